// deq-unmix command-line driver: synth, train, eval, ablate, library.

#include <omp.h>

#include <CLI11.hpp>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <exception>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <json.hpp>
#include <limits>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#ifdef __GLIBC__
#include <malloc.h>
#endif

#include "deq/classical.hpp"
#include "deq/config.hpp"
#include "deq/data_io.hpp"
#include "deq/errors.hpp"
#include "deq/training.hpp"

#ifndef DEQ_VERSION
#define DEQ_VERSION "unknown"
#endif

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

using Clock = std::chrono::steady_clock;

std::mutex g_log_mutex;

void log_line(const std::string& s) {
  std::lock_guard<std::mutex> lock(g_log_mutex);
  std::cerr << s << '\n';
}

int env_threads() {
  const char* v = std::getenv("DEQ_UNMIX_THREADS");
  if (v == nullptr || *v == '\0') return 0;
  char* end = nullptr;
  const long n = std::strtol(v, &end, 10);
  if (*end != '\0' || n < 1) throw UsageError("DEQ_UNMIX_THREADS must be a positive integer, got \"" + std::string(v) + "\"");
  return static_cast<int>(n);
}

// Large tensors are allocated and released every iteration; keeping them out
// of mmap avoids page-fault churn.
void tune_allocator() {
#ifdef __GLIBC__
  mallopt(M_MMAP_THRESHOLD, 32 << 20);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
  mallopt(M_TOP_PAD, 256 << 20);
#endif
}

void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw std::runtime_error("cannot create output directory " + dir.string() + ": " + ec.message());
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os << text;
  if (!os) throw std::runtime_error("write failed for " + path.string());
}

struct Manifest {
  std::string command;
  std::vector<std::string> argv;
  json config = json::object();
  std::vector<std::uint64_t> seeds;
  json inputs = json::object();
  std::vector<std::string> outputs;
  Clock::time_point start = Clock::now();

  void write(const fs::path& dir) const {
    const json j = {{"command", command},
                    {"argv", argv},
                    {"version", DEQ_VERSION},
                    {"creator_version", std::string(deq::kCreatorVersion)},
                    {"config", config},
                    {"seeds", seeds},
                    {"inputs", inputs},
                    {"output_dir", dir.string()},
                    {"outputs", outputs},
                    {"wall_clock_seconds", std::chrono::duration<double>(Clock::now() - start).count()}};
    write_text(dir / "manifest.json", j.dump(2) + "\n");
  }
};

double parse_snr(const std::string& s) {
  if (s == "inf" || s == "+inf" || s == "infinity") return std::numeric_limits<double>::infinity();
  try {
    std::size_t pos = 0;
    const double v = std::stod(s, &pos);
    if (pos != s.size() || std::isnan(v)) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw UsageError("--snr: expected a number in dB or \"inf\", got \"" + s + "\"");
  }
}

std::pair<std::size_t, std::size_t> parse_size(const std::string& s) {
  const auto x = s.find('x');
  try {
    if (x == std::string::npos) throw std::invalid_argument(s);
    std::size_t p1 = 0, p2 = 0;
    const long h = std::stol(s.substr(0, x), &p1);
    const long w = std::stol(s.substr(x + 1), &p2);
    if (p1 != x || p2 != s.size() - x - 1 || h < 1 || w < 1) throw std::invalid_argument(s);
    return {static_cast<std::size_t>(h), static_cast<std::size_t>(w)};
  } catch (const std::exception&) {
    throw UsageError("--size: expected HxW with positive integers, got \"" + s + "\"");
  }
}

std::string fmt_double(double v) {
  std::ostringstream os;
  os << std::setprecision(10) << v;
  return os.str();
}

// ---- synth ----

struct SynthArgs {
  std::string size = "100x100";
  std::size_t bands = 224;
  std::size_t endmembers = 6;
  std::string snr = "30";
  std::uint64_t seed = 0;
  double cap = 0.85;
  double correlation_length = 10.0;
  double field_scale = 3.0;
  std::string library;
  std::string out;
};

int cmd_synth(const SynthArgs& a, const std::vector<std::string>& argv) {
  Manifest man;
  man.command = "synth";
  man.argv = argv;
  deq::SceneSpec spec;
  std::tie(spec.height, spec.width) = parse_size(a.size);
  spec.bands = a.bands;
  spec.endmembers = a.endmembers;
  spec.snr_db = parse_snr(a.snr);
  spec.seed = a.seed;
  spec.cap = a.cap;
  spec.correlation_length = a.correlation_length;
  spec.field_scale = a.field_scale;
  if (!a.library.empty()) {
    spec.library = deq::read_library_csv(a.library);
    man.inputs["library"] = a.library;
  }
  spec.validate();

  const fs::path dir(a.out);
  ensure_dir(dir);
  const deq::Dataset data = deq::synth_scene(spec);
  deq::write_cube(dir / "scene", data);
  man.seeds = {spec.seed};
  man.config = {{"height", spec.height},
                {"width", spec.width},
                {"bands", spec.bands},
                {"endmembers", spec.endmembers},
                {"snr_db", std::isinf(spec.snr_db) ? json("inf") : json(spec.snr_db)},
                {"cap", spec.cap},
                {"correlation_length", spec.correlation_length},
                {"field_scale", spec.field_scale}};
  man.outputs = {"scene.json", "scene.raw"};
  man.write(dir);
  std::cout << "wrote " << (dir / "scene.json").string() << '\n';
  return 0;
}

// ---- shared training plumbing ----

struct TrainArgs {
  std::string data;
  std::string method = "deq";
  std::string config;
  std::string preset = "synthetic";
  std::size_t repeats = 1;
  std::size_t jobs = 1;
  std::size_t layers = 10;
  std::optional<std::size_t> endmembers;
  std::optional<std::size_t> epochs;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> hidden;
  std::optional<std::size_t> k_max;
  std::size_t log_every = 10;
  std::string out;
};

bool valid_method(const std::string& m) { return m == "deq" || m == "unroll" || m == "unroll-s" || m == "fcls"; }

double dataset_snr(const deq::Dataset& data) {
  const auto it = data.provenance.find("snr_db");
  if (it == data.provenance.end()) return 30.0;
  if (it->second == "inf") return std::numeric_limits<double>::infinity();
  try {
    return std::stod(it->second);
  } catch (const std::exception&) {
    return 30.0;
  }
}

// Preset, then config file, then flags.
deq::TrainConfig resolve_config(const std::string& preset, const std::string& config_path, const deq::Dataset& data) {
  deq::TrainConfig cfg;
  if (preset == "synthetic") {
    cfg = deq::TrainConfig::synthetic(dataset_snr(data));
  } else if (preset == "samson") {
    cfg = deq::TrainConfig::samson();
  } else if (preset != "default") {
    throw UsageError("--preset must be one of default, synthetic, samson; got \"" + preset + "\"");
  }
  if (!config_path.empty()) cfg = deq::load_train_config(config_path, cfg);
  return cfg;
}

std::size_t endmember_count(const deq::Dataset& data, std::optional<std::size_t> flag) {
  if (flag) return *flag;
  if (data.endmembers) return data.endmembers->cols();
  throw UsageError("--endmembers is required when the dataset has no ground truth");
}

struct RunOutput {
  deq::TrainReport report;
  deq::ModelState model;
  std::optional<deq::MetricReport> metrics;
};

RunOutput run_method(const deq::Dataset& data, std::size_t r, const std::string& method, const deq::TrainConfig& cfg,
                     std::size_t layers, const deq::EpochCallback& on_epoch) {
  const deq::Initialization init = deq::initialize(data.y, r, cfg.seed);
  RunOutput out;
  if (method == "fcls") {
    out.report.method = "fcls";
    out.report.vca_endmembers = init.w;
    out.report.initial_abundances = init.a0;
    out.report.abundances = init.a0;
    out.report.endmembers = init.w;
  } else if (method == "deq") {
    out.report = deq::train_deq(data.y, init, cfg, on_epoch);
  } else {
    out.report = deq::train_unrolled(data.y, init, cfg, method == "unroll-s", layers, on_epoch);
  }
  out.model.method = method;
  out.model.config = cfg;
  out.model.layers = method == "deq" ? cfg.solver.k_max : method == "fcls" ? 0 : layers;
  out.model.layer = out.report.layer;
  out.model.unrolled = out.report.unrolled;
  out.model.vca_endmembers = init.w;
  if (data.has_ground_truth()) {
    out.metrics = deq::metrics(out.report.abundances, out.report.endmembers, *data.abundances, *data.endmembers);
  }
  return out;
}

// Runs fn(i) for i in [0, n) on up to `jobs` threads, each capped to an even
// share of the OpenMP threads. The first failure (by index) is rethrown.
template <typename Fn>
void parallel_runs(std::size_t n, std::size_t jobs, Fn fn) {
  jobs = std::max<std::size_t>(1, std::min(jobs, n));
  const int omp_share = std::max(1, omp_get_max_threads() / static_cast<int>(jobs));
  std::vector<std::exception_ptr> errors(n);
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    omp_set_num_threads(omp_share);
    for (std::size_t i = next++; i < n; i = next++) {
      try {
        fn(i);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  if (jobs == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t j = 0; j < jobs; ++j) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  for (std::size_t i = 0; i < n; ++i) {
    if (!errors[i]) continue;
    try {
      std::rethrow_exception(errors[i]);
    } catch (const std::exception& e) {
      throw std::runtime_error("run " + std::to_string(i) + ": " + e.what());
    }
  }
}

std::string run_dir_name(std::size_t i) {
  std::ostringstream os;
  os << "run_" << std::setw(3) << std::setfill('0') << i;
  return os.str();
}

std::vector<std::string> endmember_names(std::size_t r) {
  std::vector<std::string> names;
  for (std::size_t k = 0; k < r; ++k) names.push_back("endmember_" + std::to_string(k));
  return names;
}

// ---- train ----

int cmd_train(TrainArgs a, const std::vector<std::string>& argv) {
  if (!valid_method(a.method)) {
    throw UsageError("--method must be one of deq, unroll, unroll-s, fcls; got \"" + a.method + "\"");
  }
  if (a.repeats < 1) throw UsageError("--repeats must be >= 1");
  if (a.jobs < 1) throw UsageError("--jobs must be >= 1");
  if (a.layers < 1) throw UsageError("--layers must be >= 1");

  Manifest man;
  man.command = "train";
  man.argv = argv;
  const deq::Dataset data = deq::read_cube(a.data);
  deq::TrainConfig cfg = resolve_config(a.preset, a.config, data);
  if (a.epochs) cfg.epochs = *a.epochs;
  if (a.seed) cfg.seed = *a.seed;
  if (a.hidden) cfg.hidden = *a.hidden;
  if (a.k_max) {
    cfg.solver.k_max = *a.k_max;
    cfg.solver.anderson_memory = std::min(cfg.solver.anderson_memory, cfg.solver.k_max);
  }
  cfg.validate();
  const std::size_t r = endmember_count(data, a.endmembers);

  const fs::path dir(a.out);
  ensure_dir(dir);
  std::vector<RunOutput> runs(a.repeats);
  for (std::size_t i = 0; i < a.repeats; ++i) man.seeds.push_back(cfg.seed + i);

  parallel_runs(a.repeats, a.jobs, [&](std::size_t i) {
    const auto t0 = Clock::now();
    deq::TrainConfig run_cfg = cfg;
    run_cfg.seed = cfg.seed + i;
    deq::EpochCallback log;
    if (a.log_every > 0) {
      log = [&, i](std::size_t epoch, const deq::LossValue& loss, const deq::AbundanceTensor&, const deq::Matrix&) {
        if ((epoch + 1) % a.log_every == 0 || epoch == 0) {
          log_line("run " + std::to_string(i) + " epoch " + std::to_string(epoch + 1) + " loss " +
                   fmt_double(loss.total));
        }
      };
    }
    RunOutput run = run_method(data, r, a.method, run_cfg, a.layers, log);

    Manifest rm;
    rm.command = "train";
    rm.argv = argv;
    rm.config = json::parse(deq::train_config_json(run_cfg));
    rm.config["method"] = a.method;
    rm.config["layers"] = run.model.layers;
    rm.config["endmembers"] = r;
    rm.seeds = {run_cfg.seed};
    rm.inputs["data"] = a.data;
    rm.start = t0;
    const fs::path run_dir = dir / run_dir_name(i);
    ensure_dir(run_dir);
    deq::save_checkpoint(run_dir / "checkpoint.bin", deq::make_checkpoint(run.model));
    write_text(run_dir / "report.json", run.report.to_json() + "\n");
    {
      std::ofstream os(run_dir / "loss.csv");
      run.report.write_loss_csv(os);
    }
    deq::write_matrix_csv(run_dir / "endmembers.csv", run.report.endmembers, endmember_names(r));
    rm.outputs = {"checkpoint.bin", "report.json", "loss.csv", "endmembers.csv"};
    if (run.metrics) {
      write_text(run_dir / "metrics.json", deq::metric_report_json(*run.metrics) + "\n");
      rm.outputs.push_back("metrics.json");
      log_line("run " + std::to_string(i) + " aRMSE " + fmt_double(run.metrics->armse) + " mSAD " +
               fmt_double(run.metrics->msad));
    }
    rm.write(run_dir);
    runs[i] = std::move(run);
  });

  json agg = {{"method", a.method}, {"repeats", a.repeats}, {"seeds", man.seeds}};
  double loss_sum = 0.0, armse_sum = 0.0, msad_sum = 0.0;
  std::size_t with_loss = 0;
  json per_run = json::array();
  for (std::size_t i = 0; i < runs.size(); ++i) {
    json entry = {{"run", i}, {"seed", man.seeds[i]}};
    if (!runs[i].report.loss_curve.empty()) {
      loss_sum += runs[i].report.loss_curve.back().total;
      ++with_loss;
      entry["final_loss"] = runs[i].report.loss_curve.back().total;
    }
    if (runs[i].metrics) {
      armse_sum += runs[i].metrics->armse;
      msad_sum += runs[i].metrics->msad;
      entry["armse"] = runs[i].metrics->armse;
      entry["msad"] = runs[i].metrics->msad;
    }
    per_run.push_back(entry);
  }
  const double n = static_cast<double>(runs.size());
  agg["runs"] = per_run;
  agg["mean_final_loss"] = with_loss ? json(loss_sum / static_cast<double>(with_loss)) : json(nullptr);
  agg["mean_armse"] = data.has_ground_truth() ? json(armse_sum / n) : json(nullptr);
  agg["mean_msad"] = data.has_ground_truth() ? json(msad_sum / n) : json(nullptr);
  write_text(dir / "aggregate.json", agg.dump(2) + "\n");

  man.config = json::parse(deq::train_config_json(cfg));
  man.config["method"] = a.method;
  man.config["layers"] = a.layers;
  man.config["endmembers"] = r;
  man.config["preset"] = a.preset;
  man.config["repeats"] = a.repeats;
  man.config["jobs"] = a.jobs;
  man.inputs["data"] = a.data;
  if (!a.config.empty()) man.inputs["config"] = a.config;
  man.outputs = {"aggregate.json"};
  for (std::size_t i = 0; i < runs.size(); ++i) {
    man.outputs.push_back(run_dir_name(i));
  }
  man.write(dir);
  if (data.has_ground_truth()) {
    std::cout << a.method << ": mean aRMSE " << fmt_double(armse_sum / n) << ", mean mSAD " << fmt_double(msad_sum / n)
              << " over " << runs.size() << " run(s)\n";
  } else {
    std::cout << a.method << ": trained " << runs.size() << " run(s); no ground truth for metrics\n";
  }
  return 0;
}

// ---- eval ----

struct EvalArgs {
  std::string checkpoint;
  std::string data;
  std::string out;
};

int cmd_eval(const EvalArgs& a, const std::vector<std::string>& argv) {
  Manifest man;
  man.command = "eval";
  man.argv = argv;
  man.inputs = {{"checkpoint", a.checkpoint}, {"data", a.data}};
  const deq::Checkpoint ckpt = deq::load_checkpoint(a.checkpoint);
  const deq::ModelState model = deq::model_from_checkpoint(ckpt);
  deq::check_config_hash(deq::fnv1a64(deq::config_fingerprint(model.config, model.method, model.layers)),
                         ckpt.config_hash, std::cerr);
  const deq::Dataset data = deq::read_cube(a.data);
  const std::size_t bands = data.y.dim(2);
  if (bands != model.vca_endmembers.rows()) {
    throw deq::DimensionError("checkpoint expects " + std::to_string(model.vca_endmembers.rows()) +
                              " bands, dataset has " + std::to_string(bands));
  }

  const deq::AbundanceTensor a0 = deq::fcls(data.y, model.vca_endmembers).abundances;
  deq::AbundanceTensor est;
  deq::Matrix w;
  if (model.method == "deq") {
    const auto res = deq::solve_fixed_point(a0, data.y, model.layer, model.config.solver, model.config.solver_mode);
    est = res.a;
    w = model.layer.w;
    man.config["solver_iterations"] = res.trace.iterations;
    man.config["solver_converged"] = res.trace.converged;
  } else if (model.method == "unroll" || model.method == "unroll-s") {
    est = deq::unrolled_forward(model.unrolled, a0, data.y);
    w = model.unrolled.w;
  } else {
    est = a0;
    w = model.vca_endmembers;
  }
  man.config["method"] = model.method;
  man.config["layers"] = model.layers;
  man.config["train_config"] = json::parse(deq::train_config_json(model.config));
  man.seeds = {model.config.seed};

  const fs::path dir(a.out);
  ensure_dir(dir);
  json doc = {{"method", model.method}};
  if (data.has_ground_truth()) {
    const deq::MetricReport m = deq::metrics(est, w, *data.abundances, *data.endmembers);
    doc["metrics"] = json::parse(deq::metric_report_json(m));
    std::cout << "aRMSE " << fmt_double(m.armse) << ", mSAD " << fmt_double(m.msad) << '\n';
  } else {
    doc["metrics"] = nullptr;
    std::cerr << "notice: dataset has no ground truth; metrics skipped\n";
  }
  write_text(dir / "metrics.json", doc.dump(2) + "\n");
  man.outputs = {"metrics.json"};
  const std::size_t r = est.dim(2);
  for (std::size_t k = 0; k < r; ++k) {
    std::ostringstream name;
    name << "abundance_" << std::setw(2) << std::setfill('0') << k << ".pgm";
    deq::write_pgm(dir / name.str(), est.dim(0), est.dim(1), deq::abundance_plane(est, k));
    man.outputs.push_back(name.str());
  }
  deq::write_matrix_csv(dir / "endmembers.csv", w, endmember_names(r));
  man.outputs.push_back("endmembers.csv");
  man.write(dir);
  return 0;
}

// ---- ablate ----

struct AblateArgs {
  std::string data;
  std::vector<std::size_t> depths = {2, 5, 10, 20};
  std::vector<std::string> methods = {"deq", "unroll", "unroll-s"};
  std::string config;
  std::string preset = "synthetic";
  std::size_t epochs = 3;
  std::optional<std::size_t> endmembers;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> hidden;
  std::size_t jobs = 1;
  std::string out;
};

int cmd_ablate(const AblateArgs& a, const std::vector<std::string>& argv) {
  for (const auto& m : a.methods) {
    if (m != "deq" && m != "unroll" && m != "unroll-s") {
      throw UsageError("--methods accepts deq, unroll, unroll-s; got \"" + m + "\"");
    }
  }
  if (a.depths.empty()) throw UsageError("--depths must list at least one depth");
  for (std::size_t d : a.depths) {
    if (d < 1) throw UsageError("--depths entries must be >= 1");
  }
  if (a.jobs < 1) throw UsageError("--jobs must be >= 1");

  Manifest man;
  man.command = "ablate";
  man.argv = argv;
  const deq::Dataset data = deq::read_cube(a.data);
  deq::TrainConfig cfg = resolve_config(a.preset, a.config, data);
  cfg.epochs = a.epochs;
  if (a.seed) cfg.seed = *a.seed;
  if (a.hidden) cfg.hidden = *a.hidden;
  cfg.validate();
  const std::size_t r = endmember_count(data, a.endmembers);

  struct Cell {
    std::string method;
    std::size_t depth;
    RunOutput run;
  };
  std::vector<Cell> cells;
  for (const auto& m : a.methods) {
    for (std::size_t d : a.depths) cells.push_back({m, d, {}});
  }
  parallel_runs(cells.size(), a.jobs, [&](std::size_t i) {
    Cell& c = cells[i];
    deq::TrainConfig run_cfg = cfg;
    if (c.method == "deq") {
      run_cfg.solver.k_max = c.depth;
      run_cfg.solver.anderson_memory = std::min(run_cfg.solver.anderson_memory, c.depth);
    }
    c.run = run_method(data, r, c.method, run_cfg, c.depth, {});
    log_line(c.method + " depth " + std::to_string(c.depth) + " done");
  });

  const fs::path dir(a.out);
  ensure_dir(dir);
  std::ostringstream csv;
  csv << std::setprecision(10);
  csv << "method,depth,parameter_count,parameter_mb,seconds_per_step,ledger_peak_bytes,armse,msad\n";
  for (const Cell& c : cells) {
    const auto& rep = c.run.report;
    double secs = 0.0;
    for (double s : rep.step_seconds) secs += s;
    if (!rep.step_seconds.empty()) secs /= static_cast<double>(rep.step_seconds.size());
    const double mb = static_cast<double>(rep.parameter_count * sizeof(double)) / (1024.0 * 1024.0);
    csv << c.method << ',' << c.depth << ',' << rep.parameter_count << ',' << mb << ',' << secs << ','
        << rep.ledger_peak << ',';
    if (c.run.metrics) csv << c.run.metrics->armse << ',' << c.run.metrics->msad;
    else csv << ',';
    csv << '\n';
  }
  write_text(dir / "ablation.csv", csv.str());
  man.config = json::parse(deq::train_config_json(cfg));
  man.config["methods"] = a.methods;
  man.config["depths"] = a.depths;
  man.config["endmembers"] = r;
  man.config["preset"] = a.preset;
  man.seeds = {cfg.seed};
  man.inputs["data"] = a.data;
  if (!a.config.empty()) man.inputs["config"] = a.config;
  man.outputs = {"ablation.csv"};
  man.write(dir);
  std::cout << csv.str();
  return 0;
}

// ---- library ----

int cmd_library(std::size_t bands, const std::string& out, const std::vector<std::string>& argv) {
  if (bands < 2) throw UsageError("--bands must be >= 2");
  Manifest man;
  man.command = "library";
  man.argv = argv;
  man.config = {{"bands", bands}};
  const fs::path dir(out);
  ensure_dir(dir);
  deq::write_library_csv(dir / "library.csv", deq::builtin_library(bands));
  man.outputs = {"library.csv"};
  man.write(dir);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  tune_allocator();
  const std::vector<std::string> args(argv, argv + argc);

  CLI::App app{"Deep-equilibrium hyperspectral unmixing"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(DEQ_VERSION));

  SynthArgs synth;
  auto* s = app.add_subcommand("synth", "Generate a synthetic scene with ground truth");
  s->add_option("--size", synth.size, "Scene size HxW")->capture_default_str();
  s->add_option("--bands", synth.bands, "Number of bands L")->capture_default_str();
  s->add_option("--endmembers", synth.endmembers, "Number of endmembers R")->capture_default_str();
  s->add_option("--snr", synth.snr, "Noise level in dB, or inf")->capture_default_str();
  s->add_option("--seed", synth.seed, "Random seed")->capture_default_str();
  s->add_option("--cap", synth.cap, "Maximum abundance")->capture_default_str();
  s->add_option("--correlation-length", synth.correlation_length, "Field smoothness in pixels")->capture_default_str();
  s->add_option("--field-scale", synth.field_scale, "Field standard deviation before the softmax")
      ->capture_default_str();
  s->add_option("--library", synth.library, "Endmember library CSV (default: built-in spectra)");
  s->add_option("--out", synth.out, "Output directory")->required();

  TrainArgs train;
  auto* t = app.add_subcommand("train", "Train a model (or run the VCA+FCLS baseline)");
  t->add_option("--data", train.data, "Cube container (.json sidecar or base path)")->required();
  t->add_option("--method", train.method, "deq, unroll, unroll-s or fcls")->capture_default_str();
  t->add_option("--config", train.config, "Flat key = value config file");
  t->add_option("--preset", train.preset, "Base settings: default, synthetic or samson")->capture_default_str();
  t->add_option("--repeats", train.repeats, "Seeded repetitions")->capture_default_str();
  t->add_option("--jobs", train.jobs, "Repetitions run in parallel")->capture_default_str();
  t->add_option("--layers", train.layers, "Depth of the unrolled baselines")->capture_default_str();
  t->add_option("--endmembers", train.endmembers, "R (default: from ground truth)");
  t->add_option("--epochs", train.epochs, "Override epochs");
  t->add_option("--seed", train.seed, "Override the base seed");
  t->add_option("--hidden", train.hidden, "Override hidden channels");
  t->add_option("--k-max", train.k_max, "Override the forward iteration cap");
  t->add_option("--log-every", train.log_every, "Progress interval in epochs, 0 for quiet")->capture_default_str();
  t->add_option("--out", train.out, "Output directory")->required();

  EvalArgs eval;
  auto* e = app.add_subcommand("eval", "Evaluate a checkpoint on a dataset");
  e->add_option("--checkpoint", eval.checkpoint, "Checkpoint file")->required();
  e->add_option("--data", eval.data, "Cube container")->required();
  e->add_option("--out", eval.out, "Output directory")->required();

  AblateArgs ablate;
  auto* b = app.add_subcommand("ablate", "Depth ablation of deq, unroll and unroll-s");
  b->add_option("--data", ablate.data, "Cube container")->required();
  b->add_option("--depths", ablate.depths, "Comma-separated depths")->delimiter(',')->capture_default_str();
  b->add_option("--methods", ablate.methods, "Comma-separated methods")->delimiter(',')->capture_default_str();
  b->add_option("--config", ablate.config, "Flat key = value config file");
  b->add_option("--preset", ablate.preset, "Base settings: default, synthetic or samson")->capture_default_str();
  b->add_option("--epochs", ablate.epochs, "Epoch budget per cell")->capture_default_str();
  b->add_option("--endmembers", ablate.endmembers, "R (default: from ground truth)");
  b->add_option("--seed", ablate.seed, "Override the seed");
  b->add_option("--hidden", ablate.hidden, "Override hidden channels");
  b->add_option("--jobs", ablate.jobs, "Cells run in parallel")->capture_default_str();
  b->add_option("--out", ablate.out, "Output directory")->required();

  std::size_t lib_bands = 224;
  std::string lib_out;
  auto* l = app.add_subcommand("library", "Write the built-in endmember library as CSV");
  l->add_option("--bands", lib_bands, "Number of bands")->capture_default_str();
  l->add_option("--out", lib_out, "Output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& ex) {
    return app.exit(ex);
  } catch (const CLI::CallForAllHelp& ex) {
    return app.exit(ex);
  } catch (const CLI::CallForVersion& ex) {
    return app.exit(ex);
  } catch (const CLI::ParseError& ex) {
    app.exit(ex);
    return 2;
  }

  try {
    if (const int n = env_threads(); n > 0) omp_set_num_threads(n);
    if (s->parsed()) return cmd_synth(synth, args);
    if (t->parsed()) return cmd_train(train, args);
    if (e->parsed()) return cmd_eval(eval, args);
    if (b->parsed()) return cmd_ablate(ablate, args);
    if (l->parsed()) return cmd_library(lib_bands, lib_out, args);
  } catch (const UsageError& ex) {
    std::cerr << "usage error: " << ex.what() << '\n';
    return 2;
  } catch (const deq::ConfigError& ex) {
    std::cerr << "usage error: " << ex.what() << '\n';
    return 2;
  } catch (const std::exception& ex) {
    std::cerr << "error: " << ex.what() << '\n';
    return 1;
  }
  return 2;
}
