#include "deq/ops.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>

namespace deq::ops {
namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Idx = Eigen::Index;

void require(bool ok, const std::string& what) {
  if (!ok) throw DimensionError(what);
}

struct Extents3d {
  std::size_t cin, d, h, w;
};

Extents3d check_conv3d(const Tensor& x, const Tensor& w) {
  require(x.rank() == 4, "conv3d: input must be [Cin, D, H, W], got " + shape_string(x.shape()));
  require(w.rank() == 5 && w.dim(2) == 3 && w.dim(3) == 3 && w.dim(4) == 3,
          "conv3d: weights must be [Cout, Cin, 3, 3, 3], got " + shape_string(w.shape()));
  require(w.dim(1) == x.dim(0), "conv3d: weight expects " + std::to_string(w.dim(1)) + " input channels, input has " +
                                    std::to_string(x.dim(0)));
  return {x.dim(0), x.dim(1), x.dim(2), x.dim(3)};
}

// Valid destination range for a shift of `dx` along an axis of length n:
// dst[i] pairs with src[i + dx].
inline std::pair<std::size_t, std::size_t> shifted_range(std::size_t n, int dx) {
  const std::size_t lo = dx < 0 ? static_cast<std::size_t>(-dx) : 0;
  const std::size_t hi = dx > 0 ? n - std::min<std::size_t>(n, static_cast<std::size_t>(dx)) : n;
  return {lo, std::max(lo, hi)};
}

// dst[i] += alpha * src[i + dx] over the valid range.
inline void shifted_axpy(double* dst, const double* src, std::size_t n, int dx, double alpha) {
  const auto [lo, hi] = shifted_range(n, dx);
  const double* s = src + dx;
  for (std::size_t i = lo; i < hi; ++i) dst[i] += alpha * s[i];
}

// Planes of an [C, D, H, W] volume with one image column zeroed, so that a
// flattened shift by dy * W + dx never picks up values wrapped across a row
// boundary. variant 0: unchanged, 1: column 0 zeroed, 2: column W-1 zeroed.
struct MaskedPlanes {
  std::size_t plane = 0;
  std::vector<double> first_zeroed;
  std::vector<double> last_zeroed;
  const double* base = nullptr;

  MaskedPlanes(const double* data, std::size_t planes, std::size_t height, std::size_t width)
      : plane(height * width), first_zeroed(data, data + planes * height * width),
        last_zeroed(first_zeroed), base(data) {
    for (std::size_t r = 0; r < planes * height; ++r) {
      first_zeroed[r * width] = 0.0;
      last_zeroed[r * width + width - 1] = 0.0;
    }
  }

  // Plane `index`, masked for reads shifted by dx (source side).
  const double* source(std::size_t index, int dx) const {
    if (dx > 0) return first_zeroed.data() + index * plane;
    if (dx < 0) return last_zeroed.data() + index * plane;
    return base + index * plane;
  }
  // Plane `index`, masked for writes shifted by dx (cotangent side).
  const double* target(std::size_t index, int dx) const {
    if (dx > 0) return last_zeroed.data() + index * plane;
    if (dx < 0) return first_zeroed.data() + index * plane;
    return base + index * plane;
  }
};

// Index range [lo, hi) of a flattened H x W plane for which row y + dy is
// inside the image and i + shift stays inside the buffer.
inline std::pair<std::size_t, std::size_t> plane_range(std::size_t height, std::size_t width, int dy, long shift) {
  const long h = static_cast<long>(height);
  const long w = static_cast<long>(width);
  long lo = std::max(0L, -static_cast<long>(dy)) * w;
  long hi = std::min(h, h - dy) * w;
  lo = std::max(lo, -shift);
  hi = std::min(hi, h * w - shift);
  if (hi < lo) hi = lo;
  return {static_cast<std::size_t>(lo), static_cast<std::size_t>(hi)};
}

}  // namespace

Tensor conv3d_forward(const Tensor& x, const Tensor& w, const Tensor& b) {
  const auto [cin, depth, height, width] = check_conv3d(x, w);
  const std::size_t cout = w.dim(0);
  require(b.size() == cout, "conv3d: bias length " + std::to_string(b.size()) + " for " + std::to_string(cout) +
                                " output channels");
  Tensor out({cout, depth, height, width});
  const std::size_t plane = height * width;
  const MaskedPlanes src(x.ptr(), cin * depth, height, width);
  const double* wp = w.ptr();
#pragma omp parallel for schedule(static)
  for (std::size_t co = 0; co < cout; ++co) {
    for (std::size_t z = 0; z < depth; ++z) {
      double* dst = out.ptr() + (co * depth + z) * plane;
      std::fill(dst, dst + plane, b[co]);
      for (std::size_t ci = 0; ci < cin; ++ci) {
        for (int kd = 0; kd < 3; ++kd) {
          const long zz = static_cast<long>(z) + kd - 1;
          if (zz < 0 || zz >= static_cast<long>(depth)) continue;
          const std::size_t index = ci * depth + static_cast<std::size_t>(zz);
          for (int kh = 0; kh < 3; ++kh) {
            const double* wk = wp + (((co * cin + ci) * 3 + kd) * 3 + kh) * 3;
            for (int kw = 0; kw < 3; ++kw) {
              const int dy = kh - 1;
              const int dx = kw - 1;
              const long shift = static_cast<long>(dy) * static_cast<long>(width) + dx;
              const auto [lo, hi] = plane_range(height, width, dy, shift);
              const double* s = src.source(index, dx) + shift;
              const double a = wk[kw];
#pragma omp simd
              for (std::size_t i = lo; i < hi; ++i) dst[i] += a * s[i];
            }
          }
        }
      }
    }
  }
  return out;
}

ConvGrads conv3d_vjp(const Tensor& x, const Tensor& w, const Tensor& gy, bool need_x, bool need_params) {
  const auto [cin, depth, height, width] = check_conv3d(x, w);
  const std::size_t cout = w.dim(0);
  require(gy.shape() == Shape({cout, depth, height, width}),
          "conv3d_vjp: cotangent shape " + shape_string(gy.shape()) + " does not match output");
  ConvGrads g;
  const std::size_t plane = height * width;
  const double* wp = w.ptr();
  if (need_x) {
    // gx[ci, zz][j] += w * gy[co, z][j - shift], reading gy masked on the side
    // whose shifted position would leave the image.
    const MaskedPlanes cot(gy.ptr(), cout * depth, height, width);
    g.x = Tensor(x.shape());
#pragma omp parallel for schedule(static)
    for (std::size_t ci = 0; ci < cin; ++ci) {
      for (std::size_t zz = 0; zz < depth; ++zz) {
        double* dst = g.x.ptr() + (ci * depth + zz) * plane;
        for (std::size_t co = 0; co < cout; ++co) {
          for (int kd = 0; kd < 3; ++kd) {
            const long z = static_cast<long>(zz) - kd + 1;
            if (z < 0 || z >= static_cast<long>(depth)) continue;
            const std::size_t index = co * depth + static_cast<std::size_t>(z);
            for (int kh = 0; kh < 3; ++kh) {
              const double* wk = wp + (((co * cin + ci) * 3 + kd) * 3 + kh) * 3;
              for (int kw = 0; kw < 3; ++kw) {
                const int dy = 1 - kh;
                const int dx = 1 - kw;
                const long shift = static_cast<long>(dy) * static_cast<long>(width) + dx;
                const auto [lo, hi] = plane_range(height, width, dy, shift);
                const double* s = cot.target(index, -dx) + shift;
                const double a = wk[kw];
#pragma omp simd
                for (std::size_t i = lo; i < hi; ++i) dst[i] += a * s[i];
              }
            }
          }
        }
      }
    }
  }
  if (need_params) {
    const MaskedPlanes src(x.ptr(), cin * depth, height, width);
    g.w = Tensor(w.shape());
    g.b = Tensor({cout});
    const double* gp = gy.ptr();
#pragma omp parallel for schedule(static)
    for (std::size_t co = 0; co < cout; ++co) {
      const double* gco = gp + co * depth * plane;
      double bsum = 0.0;
      for (std::size_t i = 0; i < depth * plane; ++i) bsum += gco[i];
      g.b[co] = bsum;
      for (std::size_t ci = 0; ci < cin; ++ci) {
        double* acc = g.w.ptr() + (co * cin + ci) * 27;
        for (std::size_t z = 0; z < depth; ++z) {
          const double* grow = gco + z * plane;
          for (int kd = 0; kd < 3; ++kd) {
            const long zz = static_cast<long>(z) + kd - 1;
            if (zz < 0 || zz >= static_cast<long>(depth)) continue;
            const std::size_t index = ci * depth + static_cast<std::size_t>(zz);
            for (int kh = 0; kh < 3; ++kh) {
              for (int kw = 0; kw < 3; ++kw) {
                const int dy = kh - 1;
                const int dx = kw - 1;
                const long shift = static_cast<long>(dy) * static_cast<long>(width) + dx;
                const auto [lo, hi] = plane_range(height, width, dy, shift);
                const double* s = src.source(index, dx) + shift;
                double sum = 0.0;
#pragma omp simd reduction(+ : sum)
                for (std::size_t i = lo; i < hi; ++i) sum += grow[i] * s[i];
                acc[(kd * 3 + kh) * 3 + kw] += sum;
              }
            }
          }
        }
      }
    }
  }
  return g;
}

namespace {

struct Extents2d {
  std::size_t cin, h, w;
};

Extents2d check_conv2d(const Tensor& x, const Tensor& w) {
  require(x.rank() >= 3, "conv2d: input must be [..., H, W] with rank >= 3, got " + shape_string(x.shape()));
  require(w.rank() == 4 && w.dim(2) == 3 && w.dim(3) == 3,
          "conv2d: weights must be [Cout, Cin, 3, 3], got " + shape_string(w.shape()));
  const std::size_t h = x.dim(x.rank() - 2);
  const std::size_t wd = x.dim(x.rank() - 1);
  const std::size_t cin = x.size() / (h * wd);
  require(w.dim(1) == cin, "conv2d: weight expects " + std::to_string(w.dim(1)) + " input channels, input has " +
                               std::to_string(cin));
  return {cin, h, wd};
}

// Weights regrouped per tap: row t*Cout + co, column ci.
RowMat tap_major_weights(const Tensor& w) {
  const std::size_t cout = w.dim(0);
  const std::size_t cin = w.dim(1);
  RowMat out(static_cast<Idx>(9 * cout), static_cast<Idx>(cin));
  for (std::size_t co = 0; co < cout; ++co) {
    for (std::size_t ci = 0; ci < cin; ++ci) {
      for (std::size_t t = 0; t < 9; ++t) out(static_cast<Idx>(t * cout + co), static_cast<Idx>(ci)) = w[(co * cin + ci) * 9 + t];
    }
  }
  return out;
}

}  // namespace

Tensor conv2d_forward(const Tensor& x, const Tensor& w, const Tensor& b) {
  const auto [cin, height, width] = check_conv2d(x, w);
  const std::size_t cout = w.dim(0);
  require(b.size() == cout, "conv2d: bias length " + std::to_string(b.size()) + " for " + std::to_string(cout) +
                                " output channels");
  const std::size_t plane = height * width;
  Eigen::Map<const RowMat> xm(x.ptr(), static_cast<Idx>(cin), static_cast<Idx>(plane));
  const RowMat taps = tap_major_weights(w);
  const RowMat prod = taps * xm;  // [9*Cout, H*W]

  Tensor out({cout, height, width});
  for (std::size_t co = 0; co < cout; ++co) {
    double* dst = out.ptr() + co * plane;
    std::fill(dst, dst + plane, b[co]);
    for (int kh = 0; kh < 3; ++kh) {
      for (int kw = 0; kw < 3; ++kw) {
        const std::size_t t = static_cast<std::size_t>(kh * 3 + kw);
        const double* src = prod.data() + (t * cout + co) * plane;
        const auto [ylo, yhi] = shifted_range(height, kh - 1);
        for (std::size_t yy = ylo; yy < yhi; ++yy) {
          shifted_axpy(dst + yy * width, src + (yy + kh - 1) * width, width, kw - 1, 1.0);
        }
      }
    }
  }
  return out;
}

ConvGrads conv2d_vjp(const Tensor& x, const Tensor& w, const Tensor& gy, bool need_x, bool need_params) {
  const auto [cin, height, width] = check_conv2d(x, w);
  const std::size_t cout = w.dim(0);
  require(gy.shape() == Shape({cout, height, width}),
          "conv2d_vjp: cotangent shape " + shape_string(gy.shape()) + " does not match output");
  const std::size_t plane = height * width;

  // shifted[t*Cout + co][q] = gy[co][q - offset(t)] wherever q - offset(t) is in bounds.
  RowMat shifted = RowMat::Zero(static_cast<Idx>(9 * cout), static_cast<Idx>(plane));
  for (std::size_t co = 0; co < cout; ++co) {
    const double* src = gy.ptr() + co * plane;
    for (int kh = 0; kh < 3; ++kh) {
      for (int kw = 0; kw < 3; ++kw) {
        const std::size_t t = static_cast<std::size_t>(kh * 3 + kw);
        double* dst = shifted.data() + (t * cout + co) * plane;
        const auto [ylo, yhi] = shifted_range(height, kh - 1);
        const auto [xlo, xhi] = shifted_range(width, kw - 1);
        for (std::size_t yy = ylo; yy < yhi; ++yy) {
          for (std::size_t xx = xlo; xx < xhi; ++xx) {
            dst[(yy + kh - 1) * width + (xx + kw - 1)] = src[yy * width + xx];
          }
        }
      }
    }
  }

  ConvGrads g;
  Eigen::Map<const RowMat> xm(x.ptr(), static_cast<Idx>(cin), static_cast<Idx>(plane));
  const RowMat taps = tap_major_weights(w);
  if (need_x) {
    g.x = Tensor(x.shape());
    Eigen::Map<RowMat> gx(g.x.ptr(), static_cast<Idx>(cin), static_cast<Idx>(plane));
    gx.noalias() = taps.transpose() * shifted;
  }
  if (need_params) {
    const RowMat gtaps = shifted * xm.transpose();  // [9*Cout, Cin]
    g.w = Tensor(w.shape());
    for (std::size_t co = 0; co < cout; ++co) {
      for (std::size_t ci = 0; ci < cin; ++ci) {
        for (std::size_t t = 0; t < 9; ++t) g.w[(co * cin + ci) * 9 + t] = gtaps(static_cast<Idx>(t * cout + co), static_cast<Idx>(ci));
      }
    }
    g.b = Tensor({cout});
    for (std::size_t co = 0; co < cout; ++co) {
      double s = 0.0;
      for (std::size_t i = 0; i < plane; ++i) s += gy[co * plane + i];
      g.b[co] = s;
    }
  }
  return g;
}

std::size_t attention_hidden_width(std::size_t channels, std::size_t ratio) {
  if (ratio == 0 || channels % ratio != 0 || channels / ratio == 0) {
    throw ConfigError("channel attention: " + std::to_string(channels) + " channels not divisible by ratio " +
                      std::to_string(ratio));
  }
  return channels / ratio;
}

namespace {

// hidden = fc1_w v + fc1_b (pre-activation), out = fc2_w relu(hidden) + fc2_b
void attention_mlp(const Tensor& v, const Tensor& fc1_w, const Tensor& fc1_b, const Tensor& fc2_w,
                   const Tensor& fc2_b, Tensor& hidden, double* out) {
  const std::size_t c = v.size();
  const std::size_t hid = fc1_w.dim(0);
  hidden = Tensor({hid});
  for (std::size_t j = 0; j < hid; ++j) {
    double s = fc1_b[j];
    for (std::size_t k = 0; k < c; ++k) s += fc1_w[j * c + k] * v[k];
    hidden[j] = s;
  }
  for (std::size_t k = 0; k < c; ++k) {
    double s = fc2_b[k];
    for (std::size_t j = 0; j < hid; ++j) s += fc2_w[k * hid + j] * std::max(hidden[j], 0.0);
    out[k] += s;
  }
}

}  // namespace

Tensor channel_attention_forward(const Tensor& x, const Tensor& fc1_w, const Tensor& fc1_b, const Tensor& fc2_w,
                                 const Tensor& fc2_b, AttentionCache* cache) {
  require(x.rank() >= 2, "channel_attention: input must be [C, ...], got " + shape_string(x.shape()));
  const std::size_t c = x.dim(0);
  const std::size_t vol = x.size() / c;
  require(fc1_w.rank() == 2 && fc1_w.dim(1) == c && fc1_b.size() == fc1_w.dim(0),
          "channel_attention: fc1 shapes " + shape_string(fc1_w.shape()) + ", " + shape_string(fc1_b.shape()));
  const std::size_t hid = fc1_w.dim(0);
  require(fc2_w.shape() == Shape({c, hid}) && fc2_b.size() == c,
          "channel_attention: fc2 shapes " + shape_string(fc2_w.shape()) + ", " + shape_string(fc2_b.shape()));

  AttentionCache local;
  AttentionCache& k = cache ? *cache : local;
  k.avg = Tensor({c});
  k.max = Tensor({c});
  k.argmax.assign(c, 0);
  for (std::size_t ch = 0; ch < c; ++ch) {
    const double* src = x.ptr() + ch * vol;
    double s = 0.0;
    double m = src[0];
    std::size_t arg = 0;
    for (std::size_t i = 0; i < vol; ++i) {
      s += src[i];
      if (src[i] > m) {
        m = src[i];
        arg = i;
      }
    }
    k.avg[ch] = s / static_cast<double>(vol);
    k.max[ch] = m;
    k.argmax[ch] = arg;
  }
  Tensor z({c});
  attention_mlp(k.avg, fc1_w, fc1_b, fc2_w, fc2_b, k.hidden_avg, z.ptr());
  attention_mlp(k.max, fc1_w, fc1_b, fc2_w, fc2_b, k.hidden_max, z.ptr());
  k.gate = sigmoid_forward(z);

  Tensor out(x.shape());
  for (std::size_t ch = 0; ch < c; ++ch) {
    const double s = k.gate[ch];
    const double* src = x.ptr() + ch * vol;
    double* dst = out.ptr() + ch * vol;
    for (std::size_t i = 0; i < vol; ++i) dst[i] = s * src[i];
  }
  return out;
}

AttentionGrads channel_attention_vjp(const Tensor& x, const Tensor& fc1_w, const Tensor& fc2_w,
                                     const AttentionCache& cache, const Tensor& gy, bool need_x, bool need_params) {
  x.require_same_shape(gy, "channel_attention_vjp");
  const std::size_t c = x.dim(0);
  const std::size_t vol = x.size() / c;
  const std::size_t hid = fc1_w.dim(0);

  // Cotangent of the gate pre-activation.
  Tensor gz({c});
  for (std::size_t ch = 0; ch < c; ++ch) {
    const double* xs = x.ptr() + ch * vol;
    const double* gs = gy.ptr() + ch * vol;
    double acc = 0.0;
    for (std::size_t i = 0; i < vol; ++i) acc += gs[i] * xs[i];
    const double s = cache.gate[ch];
    gz[ch] = acc * s * (1.0 - s);
  }
  // Both MLP branches see the same output cotangent gz.
  Tensor grelu({hid});
  for (std::size_t j = 0; j < hid; ++j) {
    double acc = 0.0;
    for (std::size_t k = 0; k < c; ++k) acc += fc2_w[k * hid + j] * gz[k];
    grelu[j] = acc;
  }
  Tensor gh_avg({hid});
  Tensor gh_max({hid});
  for (std::size_t j = 0; j < hid; ++j) {
    gh_avg[j] = cache.hidden_avg[j] > 0.0 ? grelu[j] : 0.0;
    gh_max[j] = cache.hidden_max[j] > 0.0 ? grelu[j] : 0.0;
  }

  AttentionGrads g;
  if (need_params) {
    g.fc2_b = Tensor({c});
    g.fc2_w = Tensor({c, hid});
    g.fc1_w = Tensor({hid, c});
    g.fc1_b = Tensor({hid});
    for (std::size_t k = 0; k < c; ++k) {
      g.fc2_b[k] = 2.0 * gz[k];
      for (std::size_t j = 0; j < hid; ++j) {
        g.fc2_w[k * hid + j] =
            gz[k] * (std::max(cache.hidden_avg[j], 0.0) + std::max(cache.hidden_max[j], 0.0));
      }
    }
    for (std::size_t j = 0; j < hid; ++j) {
      g.fc1_b[j] = gh_avg[j] + gh_max[j];
      for (std::size_t k = 0; k < c; ++k) g.fc1_w[j * c + k] = gh_avg[j] * cache.avg[k] + gh_max[j] * cache.max[k];
    }
  }
  if (need_x) {
    g.x = Tensor(x.shape());
    const double inv_vol = 1.0 / static_cast<double>(vol);
    for (std::size_t ch = 0; ch < c; ++ch) {
      double gavg = 0.0;
      double gmax = 0.0;
      for (std::size_t j = 0; j < hid; ++j) {
        gavg += fc1_w[j * c + ch] * gh_avg[j];
        gmax += fc1_w[j * c + ch] * gh_max[j];
      }
      const double s = cache.gate[ch];
      const double* gs = gy.ptr() + ch * vol;
      double* dst = g.x.ptr() + ch * vol;
      const double pooled = gavg * inv_vol;
      for (std::size_t i = 0; i < vol; ++i) dst[i] = s * gs[i] + pooled;
      dst[cache.argmax[ch]] += gmax;
    }
  }
  return g;
}

Tensor layer_norm_forward(const Tensor& x, const Tensor& gain, const Tensor& offset, LayerNormCache* cache) {
  require(x.rank() >= 3, "layer_norm: input must be [C, ..., H, W], got " + shape_string(x.shape()));
  const std::size_t c = x.dim(0);
  const std::size_t plane = x.dim(x.rank() - 2) * x.dim(x.rank() - 1);
  const std::size_t rows = x.size() / plane;  // C * L normalization group
  const std::size_t per_channel = rows / c;
  require(rows >= 2, "layer_norm: normalization group needs at least 2 elements");
  require(gain.size() == c && offset.size() == c, "layer_norm: affine parameters must have one entry per channel");

  LayerNormCache local;
  LayerNormCache& k = cache ? *cache : local;
  k.mean = Tensor({plane});
  k.rstd = Tensor({plane});
  const double inv_n = 1.0 / static_cast<double>(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* src = x.ptr() + r * plane;
    for (std::size_t p = 0; p < plane; ++p) k.mean[p] += src[p];
  }
  for (std::size_t p = 0; p < plane; ++p) k.mean[p] *= inv_n;
  Tensor var({plane});
  for (std::size_t r = 0; r < rows; ++r) {
    const double* src = x.ptr() + r * plane;
    for (std::size_t p = 0; p < plane; ++p) {
      const double d = src[p] - k.mean[p];
      var[p] += d * d;
    }
  }
  for (std::size_t p = 0; p < plane; ++p) k.rstd[p] = 1.0 / std::sqrt(var[p] * inv_n + kLayerNormEps);

  Tensor out(x.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const std::size_t ch = r / per_channel;
    const double* src = x.ptr() + r * plane;
    double* dst = out.ptr() + r * plane;
    for (std::size_t p = 0; p < plane; ++p) dst[p] = gain[ch] * (src[p] - k.mean[p]) * k.rstd[p] + offset[ch];
  }
  return out;
}

LayerNormGrads layer_norm_vjp(const Tensor& x, const Tensor& gain, const LayerNormCache& cache, const Tensor& gy,
                              bool need_x, bool need_params) {
  x.require_same_shape(gy, "layer_norm_vjp");
  const std::size_t c = x.dim(0);
  const std::size_t plane = x.dim(x.rank() - 2) * x.dim(x.rank() - 1);
  const std::size_t rows = x.size() / plane;
  const std::size_t per_channel = rows / c;

  LayerNormGrads g;
  if (need_params) {
    g.gain = Tensor({c});
    g.offset = Tensor({c});
    for (std::size_t r = 0; r < rows; ++r) {
      const std::size_t ch = r / per_channel;
      const double* src = x.ptr() + r * plane;
      const double* gs = gy.ptr() + r * plane;
      double go = 0.0;
      double gg = 0.0;
      for (std::size_t p = 0; p < plane; ++p) {
        go += gs[p];
        gg += gs[p] * (src[p] - cache.mean[p]) * cache.rstd[p];
      }
      g.offset[ch] += go;
      g.gain[ch] += gg;
    }
  }
  if (need_x) {
    // gx = rstd * (gxhat - mean(gxhat) - xhat * mean(gxhat * xhat)) per group.
    Tensor m1({plane});
    Tensor m2({plane});
    for (std::size_t r = 0; r < rows; ++r) {
      const double gv = gain[r / per_channel];
      const double* src = x.ptr() + r * plane;
      const double* gs = gy.ptr() + r * plane;
      for (std::size_t p = 0; p < plane; ++p) {
        const double gxhat = gs[p] * gv;
        m1[p] += gxhat;
        m2[p] += gxhat * (src[p] - cache.mean[p]) * cache.rstd[p];
      }
    }
    const double inv_n = 1.0 / static_cast<double>(rows);
    g.x = Tensor(x.shape());
    for (std::size_t r = 0; r < rows; ++r) {
      const double gv = gain[r / per_channel];
      const double* src = x.ptr() + r * plane;
      const double* gs = gy.ptr() + r * plane;
      double* dst = g.x.ptr() + r * plane;
      for (std::size_t p = 0; p < plane; ++p) {
        const double xhat = (src[p] - cache.mean[p]) * cache.rstd[p];
        dst[p] = cache.rstd[p] * (gs[p] * gv - m1[p] * inv_n - xhat * m2[p] * inv_n);
      }
    }
  }
  return g;
}

Tensor relu_forward(const Tensor& x) {
  Tensor out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] > 0.0 ? x[i] : 0.0;
  return out;
}

Tensor relu_vjp(const Tensor& x, const Tensor& gy) {
  x.require_same_shape(gy, "relu_vjp");
  Tensor out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] > 0.0 ? gy[i] : 0.0;
  return out;
}

Tensor sigmoid_forward(const Tensor& x) {
  Tensor out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double v = x[i];
    if (v >= 0.0) {
      out[i] = 1.0 / (1.0 + std::exp(-v));
    } else {
      const double e = std::exp(v);
      out[i] = e / (1.0 + e);
    }
  }
  return out;
}

Tensor sigmoid_vjp(const Tensor& y, const Tensor& gy) {
  y.require_same_shape(gy, "sigmoid_vjp");
  Tensor out(y.shape());
  for (std::size_t i = 0; i < y.size(); ++i) out[i] = gy[i] * y[i] * (1.0 - y[i]);
  return out;
}

Tensor linear_forward(const Tensor& x, const Tensor& w, const Tensor& b) {
  require(w.rank() == 2 && w.dim(1) == x.size() && b.size() == w.dim(0),
          "linear: weight " + shape_string(w.shape()) + " for input " + shape_string(x.shape()));
  Tensor out({w.dim(0)});
  for (std::size_t o = 0; o < w.dim(0); ++o) {
    double s = b[o];
    for (std::size_t i = 0; i < x.size(); ++i) s += w[o * x.size() + i] * x[i];
    out[o] = s;
  }
  return out;
}

LinearGrads linear_vjp(const Tensor& x, const Tensor& w, const Tensor& gy) {
  require(gy.size() == w.dim(0), "linear_vjp: cotangent length mismatch");
  LinearGrads g{Tensor(x.shape()), Tensor(w.shape()), Tensor({w.dim(0)})};
  for (std::size_t o = 0; o < w.dim(0); ++o) {
    g.b[o] = gy[o];
    for (std::size_t i = 0; i < x.size(); ++i) {
      g.w[o * x.size() + i] = gy[o] * x[i];
      g.x[i] += w[o * x.size() + i] * gy[o];
    }
  }
  return g;
}

Tensor softmax_temp_forward(const Tensor& x, double gamma) {
  if (!(gamma > 0.0)) throw DomainError("softmax_temp: gamma must be > 0");
  require(x.rank() >= 1, "softmax_temp: empty shape");
  const std::size_t r = x.dim(x.rank() - 1);
  const std::size_t n = x.size() / r;
  Tensor out(x.shape());
  for (std::size_t p = 0; p < n; ++p) {
    const double* src = x.ptr() + p * r;
    double* dst = out.ptr() + p * r;
    double m = gamma * src[0];
    for (std::size_t k = 1; k < r; ++k) m = std::max(m, gamma * src[k]);
    double s = 0.0;
    for (std::size_t k = 0; k < r; ++k) {
      dst[k] = std::exp(gamma * src[k] - m);
      s += dst[k];
    }
    const double inv = 1.0 / s;
    for (std::size_t k = 0; k < r; ++k) dst[k] *= inv;
  }
  return out;
}

Tensor softmax_temp_vjp(const Tensor& y, double gamma, const Tensor& gy) {
  y.require_same_shape(gy, "softmax_temp_vjp");
  const std::size_t r = y.dim(y.rank() - 1);
  const std::size_t n = y.size() / r;
  Tensor out(y.shape());
  for (std::size_t p = 0; p < n; ++p) {
    const double* yp = y.ptr() + p * r;
    const double* gp = gy.ptr() + p * r;
    double inner = 0.0;
    for (std::size_t k = 0; k < r; ++k) inner += gp[k] * yp[k];
    double* dst = out.ptr() + p * r;
    for (std::size_t k = 0; k < r; ++k) dst[k] = gamma * yp[k] * (gp[k] - inner);
  }
  return out;
}

Tensor soft_threshold_forward(const Tensor& x, double t) {
  if (!(t >= 0.0)) throw DomainError("soft_threshold: threshold must be >= 0, got " + std::to_string(t));
  Tensor out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double v = x[i];
    if (v > t) {
      out[i] = v - t;
    } else if (v < -t) {
      out[i] = v + t;
    }
  }
  return out;
}

SoftThresholdGrads soft_threshold_vjp(const Tensor& x, double t, const Tensor& gy) {
  x.require_same_shape(gy, "soft_threshold_vjp");
  SoftThresholdGrads g{Tensor(x.shape()), 0.0};
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double v = x[i];
    if (v > t) {
      g.x[i] = gy[i];
      g.t -= gy[i];
    } else if (v < -t) {
      g.x[i] = gy[i];
      g.t += gy[i];
    }
  }
  return g;
}

double softplus(double x) { return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }

double softplus_inverse(double y) {
  if (!(y > 0.0)) throw DomainError("softplus_inverse: argument must be > 0");
  return y > 20.0 ? y + std::log1p(-std::exp(-y)) : std::log(std::expm1(y));
}

double softplus_grad(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

Tensor concat_channels(const Tensor& a, const Tensor& b) {
  require(a.rank() == b.rank() && a.rank() >= 1, "concat_channels: rank mismatch");
  for (std::size_t i = 1; i < a.rank(); ++i) {
    require(a.dim(i) == b.dim(i), "concat_channels: " + shape_string(a.shape()) + " vs " + shape_string(b.shape()));
  }
  Shape shape = a.shape();
  shape[0] += b.dim(0);
  std::vector<double> data;
  data.reserve(a.size() + b.size());
  data.insert(data.end(), a.storage().begin(), a.storage().end());
  data.insert(data.end(), b.storage().begin(), b.storage().end());
  return Tensor(std::move(shape), std::move(data));
}

Tensor cube_to_volume(const Tensor& cube) {
  require(cube.rank() == 3, "cube_to_volume: expected h x w x L, got " + shape_string(cube.shape()));
  const std::size_t h = cube.dim(0), w = cube.dim(1), l = cube.dim(2);
  Tensor out({1, l, h, w});
  for (std::size_t p = 0; p < h * w; ++p) {
    const double* src = cube.ptr() + p * l;
    for (std::size_t band = 0; band < l; ++band) out[band * h * w + p] = src[band];
  }
  return out;
}

Tensor volume_to_cube(const Tensor& volume) {
  const bool lead = volume.rank() == 4 && volume.dim(0) == 1;
  require(volume.rank() == 3 || lead, "volume_to_cube: expected [L, h, w] or [1, L, h, w], got " +
                                          shape_string(volume.shape()));
  const std::size_t off = lead ? 1 : 0;
  const std::size_t l = volume.dim(off), h = volume.dim(off + 1), w = volume.dim(off + 2);
  Tensor out({h, w, l});
  for (std::size_t band = 0; band < l; ++band) {
    const double* src = volume.ptr() + band * h * w;
    for (std::size_t p = 0; p < h * w; ++p) out[p * l + band] = src[p];
  }
  return out;
}

}  // namespace deq::ops
