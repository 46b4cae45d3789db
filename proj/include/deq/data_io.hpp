#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <limits>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "deq/equilibrium.hpp"
#include "deq/tensor.hpp"
#include "deq/training.hpp"

namespace deq {

inline constexpr std::string_view kCreatorVersion = "deq-unmix 1.0.0";

// ---- endmember libraries ----

struct EndmemberLibrary {
  std::vector<std::string> names;
  Matrix spectra;  // L x count, reflectance in [0, 1]
};

// Eight smooth synthetic reflectance curves (sums of Gaussians) sampled on
// `bands` equally spaced wavelengths.
EndmemberLibrary builtin_library(std::size_t bands);

// CSV: first row material names, then one row of reflectances per band.
EndmemberLibrary read_library_csv(const std::filesystem::path& path);
void write_library_csv(const std::filesystem::path& path, const EndmemberLibrary& lib);

// ---- synthetic scenes ----

struct SceneSpec {
  std::size_t height = 100;
  std::size_t width = 100;
  std::size_t bands = 224;
  std::size_t endmembers = 6;
  std::optional<EndmemberLibrary> library;  // builtin_library(bands) when unset
  double correlation_length = 10.0;         // Gaussian kernel sigma, pixels
  double field_scale = 3.0;                 // std of each field before the softmax
  double cap = 0.85;
  double snr_db = 30.0;  // +infinity: noiseless
  std::uint64_t seed = 0;

  void validate() const;
};

struct Dataset {
  HsiCube y;
  std::optional<AbundanceTensor> abundances;  // ground truth, h x w x R
  std::optional<Matrix> endmembers;           // ground truth, L x R
  std::optional<HsiCube> clean;               // noise-free cube, synthetic scenes only
  std::uint64_t seed = 0;
  std::string creator = std::string(kCreatorVersion);
  std::map<std::string, std::string> provenance;

  bool has_ground_truth() const { return abundances.has_value() && endmembers.has_value(); }
  void validate() const;
};

// Gaussian random fields -> per-pixel softmax -> cap with proportional
// redistribution -> linear mixing -> white Gaussian noise at the requested SNR.
Dataset synth_scene(const SceneSpec& spec);

// Clip entries above `cap` and hand the excess to the other entries in
// proportion to their values, repeating until no entry exceeds the cap.
void cap_abundances(std::span<double> a, double cap);

// ---- metrics ----

struct MetricReport {
  double armse = 0.0;
  double msad = 0.0;
  std::vector<double> sad_per_endmember;  // ground-truth order
  std::vector<std::size_t> permutation;   // permutation[k] = estimated column matched to truth column k
};

// Spectral angle between two vectors. Zero-norm input is a domain error.
double spectral_angle(std::span<const double> a, std::span<const double> b);

// Assignment of estimated to true endmember columns with minimum total SAD.
// Exhaustive for R <= 8, Hungarian algorithm beyond.
std::vector<std::size_t> align_endmembers(const Matrix& est, const Matrix& gt);

MetricReport metrics(const AbundanceTensor& a_est, const Matrix& m_est, const AbundanceTensor& a_gt,
                     const Matrix& m_gt);

std::string metric_report_json(const MetricReport& m);

// ---- cube container ----
// <base>.raw holds little-endian float32 samples, band-interleaved by pixel;
// <base>.json is the sidecar. Ground truth, when present, follows the cube in
// the same payload at the offsets recorded in the sidecar.

void write_cube(const std::filesystem::path& base, const Dataset& data);
// Accepts the base path, the .json sidecar or the .raw payload path.
Dataset read_cube(const std::filesystem::path& path);

std::filesystem::path sidecar_path(const std::filesystem::path& base);
std::filesystem::path payload_path(const std::filesystem::path& base);

// ---- checkpoints ----

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  std::uint64_t config_hash = 0;
  std::string metadata;  // JSON document
  std::vector<std::pair<std::string, Tensor>> tensors;

  const Tensor& tensor(std::string_view name) const;
  bool has(std::string_view name) const;
};

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

// FNV-1a over the bytes of `text`.
std::uint64_t fnv1a64(std::string_view text);

// Canonical text of the architecture and training settings, hashed into
// checkpoints.
std::string config_fingerprint(const TrainConfig& cfg, std::string_view method, std::size_t layers);

// Prints a warning naming both hashes when they differ; returns equality.
bool check_config_hash(std::uint64_t expected, std::uint64_t found, std::ostream& log);

// A trained model of any method in checkpointable form.
struct ModelState {
  std::string method;  // deq, unroll, unroll-s, fcls
  TrainConfig config;
  std::size_t layers = 0;
  EquilibriumLayer layer;
  UnrolledModel unrolled;
  Matrix vca_endmembers;
};

Checkpoint make_checkpoint(const ModelState& model);
// Rebuilds the model from metadata, then copies every tensor with an exact
// shape check.
ModelState model_from_checkpoint(const Checkpoint& ckpt);

// Copies `src` into `dst` after a shape check naming the tensor.
void assign_checked(Tensor& dst, const Tensor& src, std::string_view name);

// ---- images ----

// 8-bit binary PGM; values are clamped to [0, 1] and scaled linearly.
void write_pgm(const std::filesystem::path& path, std::size_t height, std::size_t width,
               std::span<const double> values);

// One h x w plane of an h x w x R tensor.
std::vector<double> abundance_plane(const AbundanceTensor& a, std::size_t k);

void write_matrix_csv(const std::filesystem::path& path, const Matrix& m, const std::vector<std::string>& header);

}  // namespace deq
