#include <doctest.h>
#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <json.hpp>
#include <map>
#include <sstream>
#include <string>

#include "deq/data_io.hpp"

#ifndef DEQ_UNMIX_EXE
#error "DEQ_UNMIX_EXE must name the deq-unmix binary"
#endif

using namespace deq;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

const fs::path kRoot = fs::temp_directory_path() / "deq_unmix_cli_test";

int run(const std::string& args) {
  const std::string cmd = std::string(DEQ_UNMIX_EXE) + " " + args + " > " + (kRoot / "last.log").string() + " 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string log_text() {
  std::ifstream in(kRoot / "last.log");
  return {std::istreambuf_iterator<char>(in), {}};
}

json read_json(const fs::path& p) {
  std::ifstream in(p);
  return json::parse(in);
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

std::string path_arg(const fs::path& p) { return "\"" + p.string() + "\""; }

// Small noiseless and noisy scenes shared by the cases below.
struct Fixture {
  Fixture() {
    fs::remove_all(kRoot);
    fs::create_directories(kRoot);
    REQUIRE(run("synth --size 10x10 --bands 20 --endmembers 3 --snr inf --seed 4 --correlation-length 3 --out " +
                path_arg(kRoot / "clean")) == 0);
    REQUIRE(run("synth --size 10x10 --bands 20 --endmembers 3 --snr 25 --seed 5 --correlation-length 3 --out " +
                path_arg(kRoot / "noisy")) == 0);
  }
};

}  // namespace

TEST_CASE_FIXTURE(Fixture, "usage errors exit with 2") {
  CHECK(run("synth --size 4x4") == 2);
  CHECK(run("synth --size 4by4 --out " + path_arg(kRoot / "x")) == 2);
  CHECK(run("train --data " + path_arg(kRoot / "noisy/scene.json") + " --method sgd --out " + path_arg(kRoot / "y")) ==
        2);
  CHECK(log_text().find("sgd") != std::string::npos);
  CHECK(run("frobnicate") == 2);
  CHECK(run("--help") == 0);
  CHECK(run("train --data " + path_arg(kRoot / "missing.json") + " --out " + path_arg(kRoot / "z")) == 1);
}

TEST_CASE_FIXTURE(Fixture, "synth writes a dataset and a manifest") {
  const Dataset clean = read_cube(kRoot / "clean/scene.json");
  REQUIRE(clean.has_ground_truth());
  CHECK(clean.y.shape() == Shape{10, 10, 20});
  // Noiseless: the cube is the float32 image of the clean mixture.
  const HsiCube mix = mode3_product(*clean.abundances, *clean.endmembers);
  double worst = 0;
  for (std::size_t i = 0; i < mix.size(); ++i) worst = std::max(worst, std::abs(mix[i] - clean.y[i]));
  CHECK(worst < 1e-6);
  const json man = read_json(kRoot / "clean/manifest.json");
  CHECK(man["command"] == "synth");
  CHECK(man.contains("version"));
  CHECK(man.contains("wall_clock_seconds"));
  CHECK(man["config"]["snr_db"] == "inf");
  // Same flags, same bytes.
  REQUIRE(run("synth --size 10x10 --bands 20 --endmembers 3 --snr 25 --seed 5 --correlation-length 3 --out " +
              path_arg(kRoot / "noisy2")) == 0);
  CHECK(slurp(kRoot / "noisy/scene.raw") == slurp(kRoot / "noisy2/scene.raw"));
}

TEST_CASE_FIXTURE(Fixture, "train with repeats writes per-run reports and an aggregate") {
  const fs::path out = kRoot / "deq";
  REQUIRE(run("train --data " + path_arg(kRoot / "noisy/scene.json") +
              " --method deq --epochs 2 --hidden 4 --repeats 3 --jobs 2 --log-every 0 --out " + path_arg(out)) == 0);
  for (int i = 0; i < 3; ++i) {
    const fs::path rd = out / ("run_00" + std::to_string(i));
    CHECK(fs::exists(rd / "report.json"));
    CHECK(fs::exists(rd / "checkpoint.bin"));
    CHECK(fs::exists(rd / "loss.csv"));
    CHECK(fs::exists(rd / "metrics.json"));
    CHECK(fs::exists(rd / "manifest.json"));
    CHECK(read_json(rd / "report.json")["loss_curve"].size() == 2);
  }
  CHECK_FALSE(fs::exists(out / "run_003"));
  const json agg = read_json(out / "aggregate.json");
  CHECK(agg["runs"].size() == 3);
  double mean = 0;
  for (const auto& r : agg["runs"]) mean += r["armse"].get<double>() / 3;
  CHECK(agg["mean_armse"].get<double>() == doctest::Approx(mean).epsilon(1e-12));
  CHECK(read_json(out / "manifest.json")["seeds"].size() == 3);

  SUBCASE("re-running reproduces the checkpoint bytes") {
    REQUIRE(run("train --data " + path_arg(kRoot / "noisy/scene.json") +
                " --method deq --epochs 2 --hidden 4 --repeats 1 --log-every 0 --out " + path_arg(kRoot / "deq2")) ==
            0);
    CHECK(slurp(out / "run_000/checkpoint.bin") == slurp(kRoot / "deq2/run_000/checkpoint.bin"));
  }
}

TEST_CASE_FIXTURE(Fixture, "fcls baseline and evaluation") {
  const fs::path out = kRoot / "fcls";
  REQUIRE(run("train --data " + path_arg(kRoot / "noisy/scene.json") + " --method fcls --out " + path_arg(out)) == 0);
  const json rep = read_json(out / "run_000/report.json");
  CHECK(rep["method"] == "fcls");
  CHECK(rep["loss_curve"].empty());
  REQUIRE(run("eval --checkpoint " + path_arg(out / "run_000/checkpoint.bin") + " --data " +
              path_arg(kRoot / "noisy/scene.json") + " --out " + path_arg(kRoot / "fcls_eval")) == 0);
  const json ev = read_json(kRoot / "fcls_eval/metrics.json");
  const json tr = read_json(out / "run_000/metrics.json");
  CHECK(ev["metrics"]["aRMSE"].get<double>() == doctest::Approx(tr["aRMSE"].get<double>()).epsilon(1e-9));
  for (int k = 0; k < 3; ++k) CHECK(fs::exists(kRoot / ("fcls_eval/abundance_0" + std::to_string(k) + ".pgm")));
  CHECK_FALSE(fs::exists(kRoot / "fcls_eval/abundance_03.pgm"));
  CHECK(fs::exists(kRoot / "fcls_eval/endmembers.csv"));
}

TEST_CASE_FIXTURE(Fixture, "a perfect checkpoint on noiseless data scores zero") {
  const Dataset clean = read_cube(kRoot / "clean/scene.json");
  ModelState m;
  m.method = "fcls";
  m.config = TrainConfig::synthetic(30.0);
  m.vca_endmembers = *clean.endmembers;
  save_checkpoint(kRoot / "perfect.bin", make_checkpoint(m));
  REQUIRE(run("eval --checkpoint " + path_arg(kRoot / "perfect.bin") + " --data " +
              path_arg(kRoot / "clean/scene.json") + " --out " + path_arg(kRoot / "perfect_eval")) == 0);
  const json ev = read_json(kRoot / "perfect_eval/metrics.json");
  CHECK(ev["metrics"]["aRMSE"].get<double>() < 1e-5);
  CHECK(ev["metrics"]["mSAD"].get<double>() < 1e-6);
}

TEST_CASE_FIXTURE(Fixture, "eval without ground truth still writes maps") {
  Dataset bare;
  bare.y = read_cube(kRoot / "noisy/scene.json").y;
  write_cube(kRoot / "bare", bare);
  REQUIRE(run("train --data " + path_arg(kRoot / "noisy/scene.json") + " --method fcls --out " +
              path_arg(kRoot / "f2")) == 0);
  REQUIRE(run("eval --checkpoint " + path_arg(kRoot / "f2/run_000/checkpoint.bin") + " --data " +
              path_arg(kRoot / "bare.json") + " --out " + path_arg(kRoot / "bare_eval")) == 0);
  CHECK(read_json(kRoot / "bare_eval/metrics.json")["metrics"].is_null());
  CHECK(log_text().find("ground truth") != std::string::npos);
  for (int k = 0; k < 3; ++k) CHECK(fs::exists(kRoot / ("bare_eval/abundance_0" + std::to_string(k) + ".pgm")));
}

TEST_CASE_FIXTURE(Fixture, "ablation table") {
  REQUIRE(run("ablate --data " + path_arg(kRoot / "noisy/scene.json") +
              " --depths 2,4 --epochs 1 --hidden 4 --out " + path_arg(kRoot / "abl")) == 0);
  std::ifstream in(kRoot / "abl/ablation.csv");
  std::string line;
  std::getline(in, line);
  CHECK(line == "method,depth,parameter_count,parameter_mb,seconds_per_step,ledger_peak_bytes,armse,msad");
  std::size_t rows = 0;
  std::map<std::string, std::map<int, long>> params;
  while (std::getline(in, line)) {
    ++rows;
    std::stringstream ss(line);
    std::string method, depth, count;
    std::getline(ss, method, ',');
    std::getline(ss, depth, ',');
    std::getline(ss, count, ',');
    params[method][std::stoi(depth)] = std::stol(count);
  }
  CHECK(rows == 6);
  CHECK(params["deq"][2] == params["deq"][4]);
  CHECK(params["unroll-s"][2] == params["unroll-s"][4]);
  CHECK(params["unroll"][4] > params["unroll"][2]);
  CHECK(fs::exists(kRoot / "abl/manifest.json"));
}

TEST_CASE_FIXTURE(Fixture, "library export") {
  REQUIRE(run("library --bands 30 --out " + path_arg(kRoot / "lib")) == 0);
  const EndmemberLibrary lib = read_library_csv(kRoot / "lib/library.csv");
  CHECK(lib.spectra.shape() == Shape{30, 8});
  CHECK(lib.spectra == builtin_library(30).spectra);
}
