#include "deq/data_io.hpp"

#include <algorithm>
#include <bit>
#include <charconv>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <json.hpp>
#include <numeric>
#include <sstream>

#include "deq/config.hpp"
#include "deq/ops.hpp"
#include "deq/rng.hpp"

namespace deq {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Bump {
  double center, width, amplitude;
};

struct CurveSpec {
  const char* name;
  double base;
  double slope;
  std::vector<Bump> bumps;
};

const std::vector<CurveSpec>& curve_specs() {
  static const std::vector<CurveSpec> specs = {
      {"soil", 0.15, 0.30, {{0.55, 0.25, 0.15}, {0.85, 0.08, -0.08}}},
      {"vegetation", 0.05, 0.00, {{0.22, 0.05, 0.08}, {0.65, 0.20, 0.45}, {0.85, 0.05, -0.15}}},
      {"water", 0.10, -0.08, {{0.15, 0.10, 0.06}}},
      {"asphalt", 0.08, 0.06, {{0.50, 0.30, 0.03}}},
      {"roof", 0.30, 0.10, {{0.35, 0.12, 0.25}, {0.75, 0.15, -0.10}}},
      {"sand", 0.25, 0.35, {{0.90, 0.05, -0.12}, {0.40, 0.20, 0.10}}},
      {"mineral_a", 0.35, 0.05, {{0.30, 0.06, -0.15}, {0.70, 0.08, 0.20}}},
      {"mineral_b", 0.20, 0.15, {{0.50, 0.04, 0.30}, {0.20, 0.10, -0.05}, {0.92, 0.06, 0.15}}},
  };
  return specs;
}

void write_le32(std::ostream& os, std::uint32_t v) {
  char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xffu);
  os.write(b, 4);
}

void write_le64(std::ostream& os, std::uint64_t v) {
  char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xffu);
  os.write(b, 8);
}

std::uint32_t le32_at(const unsigned char* p) {
  std::uint32_t v = 0;
  for (int i = 3; i >= 0; --i) v = (v << 8) | p[i];
  return v;
}

std::uint64_t le64_at(const unsigned char* p) {
  std::uint64_t v = 0;
  for (int i = 7; i >= 0; --i) v = (v << 8) | p[i];
  return v;
}

std::vector<unsigned char> read_all(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  return std::vector<unsigned char>(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

void write_floats(std::ostream& os, const Tensor& t) {
  for (double v : t.values()) write_le32(os, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
}

Tensor read_floats(const std::vector<unsigned char>& bytes, std::size_t offset, Shape shape) {
  Tensor t(std::move(shape));
  const unsigned char* p = bytes.data() + offset;
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = static_cast<double>(std::bit_cast<float>(le32_at(p + 4 * i)));
  return t;
}

// Required sidecar field; a missing one is a schema error naming it.
const json& field(const json& doc, const char* name) {
  if (!doc.contains(name)) throw SchemaError("cube sidecar is missing required field \"" + std::string(name) + "\"");
  return doc.at(name);
}

std::size_t size_field(const json& doc, const char* name) {
  const json& v = field(doc, name);
  if (!v.is_number_unsigned() && !(v.is_number_integer() && v.get<long long>() >= 0)) {
    throw SchemaError("cube sidecar field \"" + std::string(name) + "\" must be a nonnegative integer");
  }
  return v.get<std::size_t>();
}

}  // namespace

EndmemberLibrary builtin_library(std::size_t bands) {
  if (bands < 2) throw DomainError("builtin_library: need at least 2 bands");
  EndmemberLibrary lib;
  const auto& specs = curve_specs();
  lib.spectra = Matrix({bands, specs.size()});
  for (std::size_t k = 0; k < specs.size(); ++k) {
    lib.names.emplace_back(specs[k].name);
    for (std::size_t l = 0; l < bands; ++l) {
      const double t = static_cast<double>(l) / static_cast<double>(bands - 1);
      double v = specs[k].base + specs[k].slope * t;
      for (const Bump& b : specs[k].bumps) {
        const double z = (t - b.center) / b.width;
        v += b.amplitude * std::exp(-0.5 * z * z);
      }
      lib.spectra(l, k) = std::clamp(v, 0.02, 0.98);
    }
  }
  return lib;
}

EndmemberLibrary read_library_csv(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open endmember library " + path.string());
  EndmemberLibrary lib;
  std::string line;
  if (!std::getline(in, line)) throw FormatError("endmember library " + path.string() + " is empty");
  {
    std::stringstream ss(line);
    std::string name;
    while (std::getline(ss, name, ',')) lib.names.push_back(name);
  }
  const std::size_t cols = lib.names.size();
  std::vector<double> values;
  std::size_t rows = 0;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string cell;
    std::size_t c = 0;
    while (std::getline(ss, cell, ',')) {
      try {
        values.push_back(std::stod(cell));
      } catch (const std::exception&) {
        throw FormatError("endmember library row " + std::to_string(rows + 2) + ": not a number: " + cell);
      }
      ++c;
    }
    if (c != cols) {
      throw FormatError("endmember library row " + std::to_string(rows + 2) + " has " + std::to_string(c) +
                        " values, expected " + std::to_string(cols));
    }
    ++rows;
  }
  if (rows == 0) throw FormatError("endmember library " + path.string() + " has no spectra rows");
  lib.spectra = Matrix({rows, cols}, std::move(values));
  return lib;
}

void write_library_csv(const fs::path& path, const EndmemberLibrary& lib) {
  write_matrix_csv(path, lib.spectra, lib.names);
}

void SceneSpec::validate() const {
  if (height == 0 || width == 0 || bands == 0 || endmembers == 0) throw ConfigError("scene: all extents must be > 0");
  if (endmembers > bands) throw ConfigError("scene: R must not exceed L");
  if (!(cap > 1.0 / static_cast<double>(endmembers)) || cap > 1.0) {
    throw ConfigError("scene: infeasible abundance cap " + std::to_string(cap) + ", need 1/R < cap <= 1 with R=" +
                      std::to_string(endmembers));
  }
  if (std::isnan(snr_db) || snr_db == -std::numeric_limits<double>::infinity()) {
    throw ConfigError("scene: SNR must be a number or +inf");
  }
  if (!(correlation_length > 0.0)) throw ConfigError("scene: correlation length must be > 0");
  if (!(field_scale > 0.0)) throw ConfigError("scene: field scale must be > 0");
  if (library) {
    if (library->spectra.rows() != bands) {
      throw ConfigError("scene: library has " + std::to_string(library->spectra.rows()) + " bands, scene needs " +
                        std::to_string(bands));
    }
    if (library->spectra.cols() < endmembers) throw ConfigError("scene: library has too few materials");
  } else if (endmembers > curve_specs().size()) {
    throw ConfigError("scene: built-in library has only " + std::to_string(curve_specs().size()) + " materials");
  }
}

void Dataset::validate() const {
  if (y.rank() != 3) throw DimensionError("dataset: cube must be h x w x L, got " + shape_string(y.shape()));
  if (abundances && (abundances->rank() != 3 || abundances->dim(0) != y.dim(0) || abundances->dim(1) != y.dim(1))) {
    throw DimensionError("dataset: abundances " + shape_string(abundances->shape()) + " vs cube " +
                         shape_string(y.shape()));
  }
  if (endmembers && (endmembers->rank() != 2 || endmembers->rows() != y.dim(2))) {
    throw DimensionError("dataset: endmembers " + shape_string(endmembers->shape()) + " vs cube " +
                         shape_string(y.shape()));
  }
  if (abundances && endmembers && abundances->dim(2) != endmembers->cols()) {
    throw DimensionError("dataset: abundance and endmember counts differ");
  }
}

void cap_abundances(std::span<double> a, double cap) {
  const std::size_t r = a.size();
  if (!(cap * static_cast<double>(r) >= 1.0)) throw DomainError("cap_abundances: cap below 1/R");
  for (std::size_t iter = 0; iter < r; ++iter) {
    double excess = 0.0;
    double free_mass = 0.0;
    for (double v : a) {
      if (v > cap) excess += v - cap;
      else if (v < cap) free_mass += v;
    }
    if (excess <= 0.0) return;
    for (double& v : a) v = std::min(v, cap);
    if (free_mass > 0.0) {
      for (double& v : a) {
        if (v < cap) v += excess * v / free_mass;
      }
    } else {
      std::size_t open = 0;
      for (double v : a) open += v < cap ? 1 : 0;
      for (double& v : a) {
        if (v < cap) v += excess / static_cast<double>(open);
      }
    }
  }
  // Proportional shares can overshoot repeatedly only in degenerate ties.
  for (double& v : a) v = std::min(v, cap);
}

namespace {

std::vector<double> gaussian_kernel(double sigma, std::size_t& radius) {
  radius = static_cast<std::size_t>(std::ceil(3.0 * sigma));
  std::vector<double> k(2 * radius + 1);
  double s = 0.0;
  for (std::size_t i = 0; i < k.size(); ++i) {
    const double d = static_cast<double>(i) - static_cast<double>(radius);
    k[i] = std::exp(-0.5 * d * d / (sigma * sigma));
    s += k[i];
  }
  for (double& v : k) v /= s;
  return k;
}

// White noise on a padded grid, smoothed separably, cropped to h x w and
// standardized.
std::vector<double> random_field(std::size_t h, std::size_t w, double sigma, Rng& rng) {
  std::size_t rad = 0;
  const std::vector<double> k = gaussian_kernel(sigma, rad);
  const std::size_t ph = h + 2 * rad;
  const std::size_t pw = w + 2 * rad;
  std::vector<double> noise(ph * pw);
  for (double& v : noise) v = rng.normal();
  std::vector<double> rows(ph * w, 0.0);
  for (std::size_t i = 0; i < ph; ++i) {
    for (std::size_t j = 0; j < w; ++j) {
      double s = 0.0;
      for (std::size_t t = 0; t < k.size(); ++t) s += k[t] * noise[i * pw + j + t];
      rows[i * w + j] = s;
    }
  }
  std::vector<double> out(h * w, 0.0);
  for (std::size_t i = 0; i < h; ++i) {
    for (std::size_t j = 0; j < w; ++j) {
      double s = 0.0;
      for (std::size_t t = 0; t < k.size(); ++t) s += k[t] * rows[(i + t) * w + j];
      out[i * w + j] = s;
    }
  }
  const double mean = std::accumulate(out.begin(), out.end(), 0.0) / static_cast<double>(out.size());
  double var = 0.0;
  for (double v : out) var += (v - mean) * (v - mean);
  const double sd = std::sqrt(var / static_cast<double>(out.size()));
  for (double& v : out) v = sd > 0.0 ? (v - mean) / sd : 0.0;
  return out;
}

}  // namespace

Dataset synth_scene(const SceneSpec& spec) {
  spec.validate();
  const std::size_t h = spec.height;
  const std::size_t w = spec.width;
  const std::size_t l = spec.bands;
  const std::size_t r = spec.endmembers;
  const EndmemberLibrary lib = spec.library ? *spec.library : builtin_library(l);

  Dataset data;
  data.seed = spec.seed;
  Matrix m({l, r});
  for (std::size_t band = 0; band < l; ++band) {
    for (std::size_t k = 0; k < r; ++k) m(band, k) = lib.spectra(band, k);
  }

  Rng field_rng(spec.seed, 1);
  std::vector<std::vector<double>> fields;
  for (std::size_t k = 0; k < r; ++k) fields.push_back(random_field(h, w, spec.correlation_length, field_rng));
  AbundanceTensor a({h, w, r});
  Tensor logits({r});
  for (std::size_t p = 0; p < h * w; ++p) {
    for (std::size_t k = 0; k < r; ++k) logits[k] = spec.field_scale * fields[k][p];
    const Tensor s = ops::softmax_temp_forward(logits, 1.0);
    std::span<double> px(a.ptr() + p * r, r);
    std::copy(s.values().begin(), s.values().end(), px.begin());
    cap_abundances(px, spec.cap);
  }

  HsiCube clean = mode3_product(a, m);
  HsiCube y = clean;
  if (std::isfinite(spec.snr_db)) {
    const double power = dot(clean, clean);
    const double sigma2 = power / (static_cast<double>(h * w * l) * std::pow(10.0, spec.snr_db / 10.0));
    const double sigma = std::sqrt(sigma2);
    Rng noise_rng(spec.seed, 2);
    for (double& v : y.values()) v += sigma * noise_rng.normal();
  }
  data.y = std::move(y);
  data.clean = std::move(clean);
  data.abundances = std::move(a);
  data.endmembers = std::move(m);
  std::ostringstream snr;
  snr << spec.snr_db;
  data.provenance["generator"] = "synth_scene";
  data.provenance["snr_db"] = snr.str();
  data.provenance["cap"] = std::to_string(spec.cap);
  data.provenance["correlation_length"] = std::to_string(spec.correlation_length);
  data.provenance["field_scale"] = std::to_string(spec.field_scale);
  std::string names;
  for (std::size_t k = 0; k < r; ++k) names += (k ? "," : "") + lib.names[k];
  data.provenance["materials"] = names;
  return data;
}

double spectral_angle(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw DimensionError("spectral_angle: length mismatch");
  double ab = 0.0;
  double aa = 0.0;
  double bb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ab += a[i] * b[i];
    aa += a[i] * a[i];
    bb += b[i] * b[i];
  }
  if (!(aa > 0.0) || !(bb > 0.0)) throw DomainError("spectral_angle: zero-norm spectrum");
  return std::acos(std::clamp(ab / std::sqrt(aa * bb), -1.0, 1.0));
}

namespace {

std::vector<double> column(const Matrix& m, std::size_t k) {
  std::vector<double> c(m.rows());
  for (std::size_t i = 0; i < m.rows(); ++i) c[i] = m(i, k);
  return c;
}

// Minimum-cost perfect assignment, rows to columns (Jonker-Volgenant style
// potentials). Returns assignment[row] = column.
std::vector<std::size_t> hungarian(const std::vector<std::vector<double>>& cost) {
  const std::size_t n = cost.size();
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> u(n + 1, 0.0), v(n + 1, 0.0);
  std::vector<std::size_t> p(n + 1, 0), way(n + 1, 0);
  for (std::size_t i = 1; i <= n; ++i) {
    p[0] = i;
    std::size_t j0 = 0;
    std::vector<double> minv(n + 1, inf);
    std::vector<bool> used(n + 1, false);
    do {
      used[j0] = true;
      const std::size_t i0 = p[j0];
      double delta = inf;
      std::size_t j1 = 0;
      for (std::size_t j = 1; j <= n; ++j) {
        if (used[j]) continue;
        const double cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (std::size_t j = 0; j <= n; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      const std::size_t j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0 != 0);
  }
  std::vector<std::size_t> assignment(n);
  for (std::size_t j = 1; j <= n; ++j) assignment[p[j] - 1] = j - 1;
  return assignment;
}

}  // namespace

std::vector<std::size_t> align_endmembers(const Matrix& est, const Matrix& gt) {
  if (est.rank() != 2 || gt.rank() != 2 || est.shape() != gt.shape()) {
    throw DimensionError("align_endmembers: estimated " + shape_string(est.shape()) + " vs truth " +
                         shape_string(gt.shape()));
  }
  const std::size_t r = gt.cols();
  // cost[k][j]: angle between truth column k and estimated column j.
  std::vector<std::vector<double>> cost(r, std::vector<double>(r));
  for (std::size_t k = 0; k < r; ++k) {
    const std::vector<double> g = column(gt, k);
    for (std::size_t j = 0; j < r; ++j) {
      try {
        cost[k][j] = spectral_angle(g, column(est, j));
      } catch (const DomainError&) {
        throw DomainError("metrics: endmember column " + std::to_string(j) + " of the estimate or " +
                          std::to_string(k) + " of the truth has zero norm");
      }
    }
  }
  if (r > 8) return hungarian(cost);
  std::vector<std::size_t> perm(r);
  std::iota(perm.begin(), perm.end(), 0);
  std::vector<std::size_t> best = perm;
  double best_cost = std::numeric_limits<double>::infinity();
  do {
    double c = 0.0;
    for (std::size_t k = 0; k < r; ++k) c += cost[k][perm[k]];
    if (c < best_cost) {
      best_cost = c;
      best = perm;
    }
  } while (std::next_permutation(perm.begin(), perm.end()));
  return best;
}

MetricReport metrics(const AbundanceTensor& a_est, const Matrix& m_est, const AbundanceTensor& a_gt,
                     const Matrix& m_gt) {
  a_est.require_same_shape(a_gt, "metrics abundances");
  if (m_est.rank() != 2 || m_est.shape() != m_gt.shape() || m_gt.cols() != a_gt.dim(2)) {
    throw DimensionError("metrics: endmember shapes " + shape_string(m_est.shape()) + " vs " +
                         shape_string(m_gt.shape()));
  }
  MetricReport rep;
  rep.permutation = align_endmembers(m_est, m_gt);
  const std::size_t r = m_gt.cols();
  const std::size_t n = pixel_count(a_gt);
  double se = 0.0;
  for (std::size_t p = 0; p < n; ++p) {
    for (std::size_t k = 0; k < r; ++k) {
      const double d = a_est[p * r + rep.permutation[k]] - a_gt[p * r + k];
      se += d * d;
    }
  }
  rep.armse = std::sqrt(se / static_cast<double>(n * r));
  double total = 0.0;
  for (std::size_t k = 0; k < r; ++k) {
    const double s = spectral_angle(column(m_est, rep.permutation[k]), column(m_gt, k));
    rep.sad_per_endmember.push_back(s);
    total += s;
  }
  rep.msad = total / static_cast<double>(r);
  return rep;
}

std::string metric_report_json(const MetricReport& m) {
  json j = {{"aRMSE", m.armse}, {"mSAD", m.msad}, {"sad_per_endmember", m.sad_per_endmember},
            {"permutation", m.permutation}};
  return j.dump(2);
}

fs::path sidecar_path(const fs::path& base) {
  fs::path p = base;
  if (p.extension() == ".json" || p.extension() == ".raw") p.replace_extension();
  return p.string() + ".json";
}

fs::path payload_path(const fs::path& base) {
  fs::path p = base;
  if (p.extension() == ".json" || p.extension() == ".raw") p.replace_extension();
  return p.string() + ".raw";
}

void write_cube(const fs::path& base, const Dataset& data) {
  data.validate();
  const std::size_t h = data.y.dim(0);
  const std::size_t w = data.y.dim(1);
  const std::size_t l = data.y.dim(2);
  json side = {{"height", h},
               {"width", w},
               {"bands", l},
               {"dtype", "float32"},
               {"byte_order", "little"},
               {"interleave", "bip"},
               {"seed", data.seed},
               {"creator_version", data.creator}};
  std::size_t offset = 4 * h * w * l;
  if (data.has_ground_truth()) {
    const std::size_t r = data.abundances->dim(2);
    side["R"] = r;
    json gt = {{"abundances_offset", offset}, {"abundances_shape", {h, w, r}}};
    offset += 4 * h * w * r;
    gt["endmembers_offset"] = offset;
    gt["endmembers_shape"] = {l, r};
    offset += 4 * l * r;
    side["ground_truth"] = gt;
  }
  side["payload_bytes"] = offset;
  json prov = json::object();
  for (const auto& [k, v] : data.provenance) prov[k] = v;
  side["provenance"] = prov;

  if (!base.parent_path().empty()) fs::create_directories(base.parent_path());
  {
    std::ofstream out(payload_path(base), std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + payload_path(base).string());
    write_floats(out, data.y);
    if (data.has_ground_truth()) {
      write_floats(out, *data.abundances);
      write_floats(out, *data.endmembers);
    }
    if (!out) throw std::runtime_error("write failed for " + payload_path(base).string());
  }
  std::ofstream sc(sidecar_path(base));
  if (!sc) throw std::runtime_error("cannot write " + sidecar_path(base).string());
  sc << side.dump(2) << '\n';
}

Dataset read_cube(const fs::path& path) {
  const fs::path side_file = sidecar_path(path);
  std::ifstream sc(side_file);
  if (!sc) throw std::runtime_error("cannot open cube sidecar " + side_file.string());
  json side;
  try {
    side = json::parse(sc);
  } catch (const json::parse_error& e) {
    throw FormatError("cube sidecar " + side_file.string() + " is not valid JSON: " + e.what());
  }
  const std::size_t h = size_field(side, "height");
  const std::size_t w = size_field(side, "width");
  const std::size_t l = size_field(side, "bands");
  if (side.contains("dtype") && side["dtype"] != "float32") throw FormatError("cube: unsupported dtype");
  if (side.contains("byte_order") && side["byte_order"] != "little") throw FormatError("cube: unsupported byte order");

  std::size_t expected = 4 * h * w * l;
  std::size_t a_off = 0, m_off = 0, r = 0;
  const bool has_gt = side.contains("ground_truth") && !side["ground_truth"].is_null();
  if (has_gt) {
    const json& gt = side["ground_truth"];
    r = size_field(side, "R");
    a_off = size_field(gt, "abundances_offset");
    m_off = size_field(gt, "endmembers_offset");
    expected = std::max({expected, a_off + 4 * h * w * r, m_off + 4 * l * r});
  }
  const std::vector<unsigned char> bytes = read_all(payload_path(path));
  if (bytes.size() != expected) {
    throw FormatError("cube payload " + payload_path(path).string() + ": expected " + std::to_string(expected) +
                      " bytes, found " + std::to_string(bytes.size()));
  }
  Dataset data;
  data.y = read_floats(bytes, 0, {h, w, l});
  if (has_gt) {
    data.abundances = read_floats(bytes, a_off, {h, w, r});
    data.endmembers = read_floats(bytes, m_off, {l, r});
  }
  if (side.contains("seed")) data.seed = side["seed"].get<std::uint64_t>();
  if (side.contains("creator_version")) data.creator = side["creator_version"].get<std::string>();
  if (side.contains("provenance") && side["provenance"].is_object()) {
    for (const auto& [k, v] : side["provenance"].items()) data.provenance[k] = v.is_string() ? v.get<std::string>() : v.dump();
  }
  data.validate();
  return data;
}

const Tensor& Checkpoint::tensor(std::string_view name) const {
  for (const auto& [n, t] : tensors) {
    if (n == name) return t;
  }
  throw FormatError("checkpoint has no tensor named " + std::string(name));
}

bool Checkpoint::has(std::string_view name) const {
  return std::any_of(tensors.begin(), tensors.end(), [&](const auto& e) { return e.first == name; });
}

namespace {
constexpr char kMagic[8] = {'D', 'E', 'Q', 'U', 'N', 'M', 'I', 'X'};
}

void save_checkpoint(const fs::path& path, const Checkpoint& ckpt) {
  if (!path.parent_path().empty()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write checkpoint " + path.string());
  out.write(kMagic, 8);
  write_le32(out, kCheckpointVersion);
  write_le64(out, ckpt.config_hash);
  write_le64(out, ckpt.metadata.size());
  out.write(ckpt.metadata.data(), static_cast<std::streamsize>(ckpt.metadata.size()));
  write_le32(out, static_cast<std::uint32_t>(ckpt.tensors.size()));
  for (const auto& [name, t] : ckpt.tensors) {
    write_le32(out, static_cast<std::uint32_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    write_le32(out, static_cast<std::uint32_t>(t.rank()));
    for (std::size_t d : t.shape()) write_le64(out, d);
    for (double v : t.values()) write_le64(out, std::bit_cast<std::uint64_t>(v));
  }
  if (!out) throw std::runtime_error("write failed for checkpoint " + path.string());
}

Checkpoint load_checkpoint(const fs::path& path) {
  const std::vector<unsigned char> b = read_all(path);
  std::size_t pos = 0;
  auto need = [&](std::size_t n) {
    if (pos + n > b.size()) {
      throw FormatError("checkpoint " + path.string() + " truncated at byte " + std::to_string(pos) + " (needs " +
                        std::to_string(n) + " more)");
    }
  };
  auto u32 = [&]() {
    need(4);
    const std::uint32_t v = le32_at(b.data() + pos);
    pos += 4;
    return v;
  };
  auto u64 = [&]() {
    need(8);
    const std::uint64_t v = le64_at(b.data() + pos);
    pos += 8;
    return v;
  };
  auto str = [&](std::size_t n) {
    need(n);
    std::string s(reinterpret_cast<const char*>(b.data() + pos), n);
    pos += n;
    return s;
  };
  if (str(8) != std::string(kMagic, 8)) throw FormatError("not a checkpoint file: " + path.string());
  const std::uint32_t version = u32();
  if (version != kCheckpointVersion) {
    throw FormatError("checkpoint version " + std::to_string(version) + " is not supported (expected " +
                      std::to_string(kCheckpointVersion) + ")");
  }
  Checkpoint ckpt;
  ckpt.config_hash = u64();
  ckpt.metadata = str(u64());
  const std::uint32_t count = u32();
  for (std::uint32_t i = 0; i < count; ++i) {
    std::string name = str(u32());
    const std::uint32_t rank = u32();
    Shape shape(rank);
    for (auto& d : shape) d = u64();
    Tensor t(shape);
    need(8 * t.size());
    for (double& v : t.values()) v = std::bit_cast<double>(u64());
    ckpt.tensors.emplace_back(std::move(name), std::move(t));
  }
  if (pos != b.size()) throw FormatError("checkpoint " + path.string() + " has trailing bytes");
  return ckpt;
}

std::uint64_t fnv1a64(std::string_view text) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : text) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

std::string config_fingerprint(const TrainConfig& cfg, std::string_view method, std::size_t layers) {
  std::ostringstream os;
  os << std::setprecision(17) << "method=" << method << ";layers=" << layers << ";hidden=" << cfg.hidden
     << ";ratio=" << cfg.attention_ratio << ";eta=" << cfg.eta << ";gamma=" << cfg.gamma << ";lambda0=" << cfg.lambda0
     << ";alpha=" << cfg.alpha << ";epochs=" << cfg.epochs << ";lr_w=" << cfg.lr_endmembers
     << ";lr_theta=" << cfg.lr_operator << ";wd_w=" << cfg.decay_endmembers << ";wd_theta=" << cfg.decay_operator
     << ";k_max=" << cfg.solver.k_max << ";tol=" << cfg.solver.tol << ";m=" << cfg.solver.anderson_memory
     << ";ridge=" << cfg.solver.anderson_ridge << ";solver=" << solver_mode_name(cfg.solver_mode)
     << ";t_max=" << cfg.backward.t_max << ";tol_b=" << cfg.backward.tol << ";seed=" << cfg.seed;
  return os.str();
}

bool check_config_hash(std::uint64_t expected, std::uint64_t found, std::ostream& log) {
  if (expected == found) return true;
  log << "warning: checkpoint config hash " << std::hex << std::setw(16) << std::setfill('0') << found
      << " differs from expected " << std::setw(16) << expected << std::dec << std::setfill(' ') << '\n';
  return false;
}

void assign_checked(Tensor& dst, const Tensor& src, std::string_view name) {
  if (dst.shape() != src.shape()) {
    throw DimensionError("checkpoint tensor " + std::string(name) + " has shape " + shape_string(src.shape()) +
                         ", model expects " + shape_string(dst.shape()));
  }
  dst = src;
}

Checkpoint make_checkpoint(const ModelState& model) {
  Checkpoint ckpt;
  const std::size_t bands = model.vca_endmembers.rows();
  const std::size_t r = model.vca_endmembers.cols();
  json meta = {{"method", model.method},       {"layers", model.layers}, {"bands", bands},
               {"endmembers", r},              {"config", json::parse(train_config_json(model.config))},
               {"creator_version", std::string(kCreatorVersion)}};
  ckpt.metadata = meta.dump();
  ckpt.config_hash = fnv1a64(config_fingerprint(model.config, model.method, model.layers));
  ckpt.tensors.emplace_back("vca_endmembers", model.vca_endmembers);
  if (model.method == "deq") {
    const auto names = model.layer.parameter_names();
    const auto params = model.layer.parameters();
    for (std::size_t i = 0; i < params.size(); ++i) ckpt.tensors.emplace_back(names[i], *params[i]);
  } else if (model.method == "unroll" || model.method == "unroll-s") {
    const auto& u = model.unrolled;
    for (std::size_t k = 0; k < u.operators.size(); ++k) {
      const std::string prefix = "layer" + std::to_string(k) + ".";
      for (std::size_t s = 0; s < u.operators[k].theta().size(); ++s) {
        ckpt.tensors.emplace_back(prefix + std::string(theta_slot_name(s)), u.operators[k].theta()[s]);
      }
      ckpt.tensors.emplace_back(prefix + "lambda_pre", u.lambda_pres[k]);
    }
    ckpt.tensors.emplace_back("endmembers", u.w);
  } else if (model.method != "fcls") {
    throw ConfigError("checkpoint: unknown method " + model.method);
  }
  return ckpt;
}

ModelState model_from_checkpoint(const Checkpoint& ckpt) {
  json meta;
  try {
    meta = json::parse(ckpt.metadata);
  } catch (const json::parse_error& e) {
    throw FormatError(std::string("checkpoint metadata is not valid JSON: ") + e.what());
  }
  for (const char* key : {"method", "layers", "bands", "endmembers", "config"}) {
    if (!meta.contains(key)) throw SchemaError("checkpoint metadata is missing field \"" + std::string(key) + "\"");
  }
  ModelState m;
  m.method = meta["method"].get<std::string>();
  m.layers = meta["layers"].get<std::size_t>();
  m.config = train_config_from_json(meta["config"].dump());
  const std::size_t bands = meta["bands"].get<std::size_t>();
  const std::size_t r = meta["endmembers"].get<std::size_t>();
  m.vca_endmembers = Matrix({bands, r});
  assign_checked(m.vca_endmembers, ckpt.tensor("vca_endmembers"), "vca_endmembers");

  EquilibriumLayer layer;
  layer.gtheta = GThetaOperator(bands, m.config.hidden, m.config.attention_ratio);
  layer.w = Matrix({bands, r});
  layer.lambda_pre = Tensor({1});
  layer.eta = m.config.eta;
  layer.gamma = m.config.gamma;
  if (m.method == "deq") {
    const auto names = layer.parameter_names();
    const auto params = layer.parameters();
    for (std::size_t i = 0; i < params.size(); ++i) assign_checked(*params[i], ckpt.tensor(names[i]), names[i]);
    m.layer = std::move(layer);
  } else if (m.method == "unroll" || m.method == "unroll-s") {
    UnrolledModel u = UnrolledModel::from_layer(layer, m.layers, m.method == "unroll-s");
    for (std::size_t k = 0; k < u.operators.size(); ++k) {
      const std::string prefix = "layer" + std::to_string(k) + ".";
      for (std::size_t s = 0; s < u.operators[k].theta().size(); ++s) {
        const std::string name = prefix + std::string(theta_slot_name(s));
        assign_checked(u.operators[k].theta()[s], ckpt.tensor(name), name);
      }
      assign_checked(u.lambda_pres[k], ckpt.tensor(prefix + "lambda_pre"), prefix + "lambda_pre");
    }
    assign_checked(u.w, ckpt.tensor("endmembers"), "endmembers");
    m.unrolled = std::move(u);
  } else if (m.method != "fcls") {
    throw FormatError("checkpoint: unknown method " + m.method);
  }
  return m;
}

void write_pgm(const fs::path& path, std::size_t height, std::size_t width, std::span<const double> values) {
  if (values.size() != height * width) throw DimensionError("write_pgm: value count does not match image size");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "P5\n" << width << ' ' << height << "\n255\n";
  for (double v : values) {
    const double c = std::isfinite(v) ? std::clamp(v, 0.0, 1.0) : 0.0;
    out.put(static_cast<char>(static_cast<unsigned char>(std::lround(c * 255.0))));
  }
}

std::vector<double> abundance_plane(const AbundanceTensor& a, std::size_t k) {
  const std::size_t r = a.dim(2);
  if (k >= r) throw DimensionError("abundance_plane: index out of range");
  std::vector<double> plane(pixel_count(a));
  for (std::size_t p = 0; p < plane.size(); ++p) plane[p] = a[p * r + k];
  return plane;
}

void write_matrix_csv(const fs::path& path, const Matrix& m, const std::vector<std::string>& header) {
  if (header.size() != m.cols()) throw DimensionError("write_matrix_csv: header width does not match columns");
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  for (std::size_t k = 0; k < header.size(); ++k) out << (k ? "," : "") << header[k];
  out << '\n';
  for (std::size_t i = 0; i < m.rows(); ++i) {
    for (std::size_t k = 0; k < m.cols(); ++k) {
      // Shortest representation that parses back to the same double.
      char buf[32];
      const auto res = std::to_chars(buf, buf + sizeof buf, m(i, k));
      out << (k ? "," : "") << std::string_view(buf, static_cast<std::size_t>(res.ptr - buf));
    }
    out << '\n';
  }
}

}  // namespace deq
