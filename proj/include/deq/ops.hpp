#pragma once

#include <cstddef>
#include <vector>

#include "deq/tensor.hpp"

// Forward kernels and hand-written vector-Jacobian products for the fixed set
// of primitives used by the equilibrium layer. Every `*_vjp` takes the forward
// inputs (plus any cache written by the forward) and an output cotangent, and
// returns cotangents for the inputs and parameters it was asked for. Requested
// cotangents that are not needed are left empty.
namespace deq::ops {

// Cotangents of a convolution. Any member may be empty when not requested.
struct ConvGrads {
  Tensor x;
  Tensor w;
  Tensor b;
};

// 3x3x3 cross-correlation, stride 1, zero padding 1.
// x: [Cin, D, H, W], w: [Cout, Cin, 3, 3, 3], b: [Cout] -> [Cout, D, H, W]
Tensor conv3d_forward(const Tensor& x, const Tensor& w, const Tensor& b);
ConvGrads conv3d_vjp(const Tensor& x, const Tensor& w, const Tensor& gy, bool need_x = true,
                     bool need_params = true);

// 3x3 cross-correlation, stride 1, zero padding 1. All leading axes of x are
// flattened into input channels, so a [C, L, H, W] volume is read as [C*L, H, W].
// w: [Cout, Cin, 3, 3], b: [Cout] -> [Cout, H, W]
Tensor conv2d_forward(const Tensor& x, const Tensor& w, const Tensor& b);
ConvGrads conv2d_vjp(const Tensor& x, const Tensor& w, const Tensor& gy, bool need_x = true,
                     bool need_params = true);

// Hidden width C / ratio of the attention MLP; throws ConfigError when C is
// not divisible by the ratio.
std::size_t attention_hidden_width(std::size_t channels, std::size_t ratio);

struct AttentionCache {
  Tensor avg;                       // [C]
  Tensor max;                       // [C]
  std::vector<std::size_t> argmax;  // first maximal flat index per channel
  Tensor hidden_avg;                // pre-ReLU hidden activations, [C/r]
  Tensor hidden_max;
  Tensor gate;  // sigmoid output, [C]

  std::size_t scalar_count() const {
    return avg.size() + max.size() + argmax.size() + hidden_avg.size() + hidden_max.size() + gate.size();
  }
};

struct AttentionGrads {
  Tensor x;
  Tensor fc1_w;
  Tensor fc1_b;
  Tensor fc2_w;
  Tensor fc2_b;
};

// Channel gate s = sigmoid(mlp(avgpool(x)) + mlp(maxpool(x))), out[c] = s[c] * x[c].
// The MLP is shared: fc1 [C/r, C] + bias, ReLU, fc2 [C, C/r] + bias.
// x: [C, ...]; pooling runs over every non-channel axis.
Tensor channel_attention_forward(const Tensor& x, const Tensor& fc1_w, const Tensor& fc1_b,
                                 const Tensor& fc2_w, const Tensor& fc2_b, AttentionCache* cache);
AttentionGrads channel_attention_vjp(const Tensor& x, const Tensor& fc1_w, const Tensor& fc2_w,
                                     const AttentionCache& cache, const Tensor& gy, bool need_x = true,
                                     bool need_params = true);

inline constexpr double kLayerNormEps = 1e-5;

struct LayerNormCache {
  Tensor mean;  // per spatial position, [H*W]
  Tensor rstd;

  std::size_t scalar_count() const { return mean.size() + rstd.size(); }
};

struct LayerNormGrads {
  Tensor x;
  Tensor gain;
  Tensor offset;
};

// x: [C, L, H, W]. Each spatial position is normalized over its C*L values,
// then scaled and shifted per channel by gain[c], offset[c].
Tensor layer_norm_forward(const Tensor& x, const Tensor& gain, const Tensor& offset, LayerNormCache* cache);
LayerNormGrads layer_norm_vjp(const Tensor& x, const Tensor& gain, const LayerNormCache& cache,
                              const Tensor& gy, bool need_x = true, bool need_params = true);

Tensor relu_forward(const Tensor& x);
// Cotangent is routed where x > 0; zero at the kink.
Tensor relu_vjp(const Tensor& x, const Tensor& gy);

Tensor sigmoid_forward(const Tensor& x);
// Takes the forward output y = sigmoid(x).
Tensor sigmoid_vjp(const Tensor& y, const Tensor& gy);

struct LinearGrads {
  Tensor x;
  Tensor w;
  Tensor b;
};

// y = w x + b for a vector x: [in], w: [out, in], b: [out].
Tensor linear_forward(const Tensor& x, const Tensor& w, const Tensor& b);
LinearGrads linear_vjp(const Tensor& x, const Tensor& w, const Tensor& gy);

// Softmax of gamma * x over the last axis, max-subtracted.
Tensor softmax_temp_forward(const Tensor& x, double gamma);
// Takes the forward output y.
Tensor softmax_temp_vjp(const Tensor& y, double gamma, const Tensor& gy);

struct SoftThresholdGrads {
  Tensor x;
  double t = 0.0;
};

// sign(x) * max(|x| - t, 0); throws DomainError for t < 0.
Tensor soft_threshold_forward(const Tensor& x, double t);
SoftThresholdGrads soft_threshold_vjp(const Tensor& x, double t, const Tensor& gy);

double softplus(double x);
double softplus_inverse(double y);
// d softplus / dx
double softplus_grad(double x);

// Stack two [C_i, ...] tensors along axis 0.
Tensor concat_channels(const Tensor& a, const Tensor& b);

// h x w x L cube -> [1, L, h, w] volume, and back. volume_to_cube accepts
// [L, h, w] or [1, L, h, w].
Tensor cube_to_volume(const Tensor& cube);
Tensor volume_to_cube(const Tensor& volume);

}  // namespace deq::ops
