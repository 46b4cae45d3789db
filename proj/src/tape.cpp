#include "deq/tape.hpp"

#include <optional>

namespace deq {

std::string_view primitive_name(Primitive kind) {
  switch (kind) {
    case Primitive::kLeaf: return "leaf";
    case Primitive::kConv3d: return "conv3d";
    case Primitive::kConv2d: return "conv2d";
    case Primitive::kChannelAttention: return "channel_attention";
    case Primitive::kLayerNorm: return "layer_norm";
    case Primitive::kRelu: return "relu";
    case Primitive::kSigmoid: return "sigmoid";
    case Primitive::kLinear: return "linear";
    case Primitive::kSoftmaxTemp: return "softmax_temp";
    case Primitive::kSoftThreshold: return "soft_threshold";
    case Primitive::kAdd: return "add";
    case Primitive::kScale: return "scale";
    case Primitive::kConcatChannels: return "concat_channels";
    case Primitive::kReshape: return "reshape";
    case Primitive::kCubeToVolume: return "cube_to_volume";
    case Primitive::kVolumeToCube: return "volume_to_cube";
    case Primitive::kMode3Product: return "mode3_product";
    case Primitive::kMode3Adjoint: return "mode3_adjoint";
    case Primitive::kSoftplus: return "softplus";
  }
  return "unknown";
}

Tape::Tape(MemoryLedger* ledger, LedgerPhase phase) : ledger_(ledger), phase_(phase) {}

Tape::~Tape() {
  if (ledger_) ledger_->release(retained_);
}

NodeId Tape::push(TapeNode node) {
  if (node.kind != Primitive::kLeaf) {
    node.retained = node.owned.size();
    if (const auto* a = std::get_if<ops::AttentionCache>(&node.cache)) node.retained += a->scalar_count();
    if (const auto* l = std::get_if<ops::LayerNormCache>(&node.cache)) node.retained += l->scalar_count();
    retained_ += node.retained;
    if (ledger_) ledger_->acquire(node.retained, phase_);
  }
  nodes_.push_back(std::move(node));
  return NodeId{nodes_.size() - 1};
}

NodeId Tape::input(const Tensor& value) {
  TapeNode n;
  n.ref = &value;
  return push(std::move(n));
}

NodeId Tape::constant(Tensor value) {
  TapeNode n;
  n.owned = std::move(value);
  return push(std::move(n));
}

namespace {

TapeNode make_node(Primitive kind, std::vector<NodeId> inputs, Tensor out) {
  TapeNode n;
  n.kind = kind;
  n.inputs = std::move(inputs);
  n.owned = std::move(out);
  return n;
}

double scalar_of(const Tensor& t, const char* what) {
  if (t.size() != 1) throw DimensionError(std::string(what) + ": expected a single-element tensor");
  return t[0];
}

}  // namespace

NodeId Tape::conv3d(NodeId x, NodeId w, NodeId b) {
  return push(make_node(Primitive::kConv3d, {x, w, b}, ops::conv3d_forward(value(x), value(w), value(b))));
}

NodeId Tape::conv2d(NodeId x, NodeId w, NodeId b) {
  return push(make_node(Primitive::kConv2d, {x, w, b}, ops::conv2d_forward(value(x), value(w), value(b))));
}

NodeId Tape::channel_attention(NodeId x, NodeId fc1_w, NodeId fc1_b, NodeId fc2_w, NodeId fc2_b) {
  ops::AttentionCache cache;
  Tensor out = ops::channel_attention_forward(value(x), value(fc1_w), value(fc1_b), value(fc2_w), value(fc2_b), &cache);
  TapeNode n = make_node(Primitive::kChannelAttention, {x, fc1_w, fc1_b, fc2_w, fc2_b}, std::move(out));
  n.cache = std::move(cache);
  return push(std::move(n));
}

NodeId Tape::layer_norm(NodeId x, NodeId gain, NodeId offset) {
  ops::LayerNormCache cache;
  Tensor out = ops::layer_norm_forward(value(x), value(gain), value(offset), &cache);
  TapeNode n = make_node(Primitive::kLayerNorm, {x, gain, offset}, std::move(out));
  n.cache = std::move(cache);
  return push(std::move(n));
}

NodeId Tape::relu(NodeId x) { return push(make_node(Primitive::kRelu, {x}, ops::relu_forward(value(x)))); }

NodeId Tape::sigmoid(NodeId x) { return push(make_node(Primitive::kSigmoid, {x}, ops::sigmoid_forward(value(x)))); }

NodeId Tape::linear(NodeId x, NodeId w, NodeId b) {
  return push(make_node(Primitive::kLinear, {x, w, b}, ops::linear_forward(value(x), value(w), value(b))));
}

NodeId Tape::softmax_temp(NodeId x, double gamma) {
  TapeNode n = make_node(Primitive::kSoftmaxTemp, {x}, ops::softmax_temp_forward(value(x), gamma));
  n.alpha = gamma;
  return push(std::move(n));
}

NodeId Tape::soft_threshold(NodeId x, NodeId t) {
  const double tv = scalar_of(value(t), "soft_threshold");
  return push(make_node(Primitive::kSoftThreshold, {x, t}, ops::soft_threshold_forward(value(x), tv)));
}

NodeId Tape::add(NodeId x, NodeId y, double alpha, double beta) {
  const Tensor& xv = value(x);
  const Tensor& yv = value(y);
  xv.require_same_shape(yv, "tape add");
  Tensor out(xv.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = alpha * xv[i] + beta * yv[i];
  TapeNode n = make_node(Primitive::kAdd, {x, y}, std::move(out));
  n.alpha = alpha;
  n.beta = beta;
  return push(std::move(n));
}

NodeId Tape::scale(NodeId x, double alpha) {
  TapeNode n = make_node(Primitive::kScale, {x}, alpha * value(x));
  n.alpha = alpha;
  return push(std::move(n));
}

NodeId Tape::concat_channels(NodeId a, NodeId b) {
  return push(make_node(Primitive::kConcatChannels, {a, b}, ops::concat_channels(value(a), value(b))));
}

NodeId Tape::reshape(NodeId x, Shape shape) {
  return push(make_node(Primitive::kReshape, {x}, value(x).reshaped(std::move(shape))));
}

NodeId Tape::cube_to_volume(NodeId cube) {
  return push(make_node(Primitive::kCubeToVolume, {cube}, ops::cube_to_volume(value(cube))));
}

NodeId Tape::volume_to_cube(NodeId volume) {
  return push(make_node(Primitive::kVolumeToCube, {volume}, ops::volume_to_cube(value(volume))));
}

NodeId Tape::mode3_product(NodeId a, NodeId m) {
  return push(make_node(Primitive::kMode3Product, {a, m}, deq::mode3_product(value(a), value(m))));
}

NodeId Tape::mode3_adjoint(NodeId g, NodeId m) {
  return push(make_node(Primitive::kMode3Adjoint, {g, m}, deq::mode3_product_adjoint(value(g), value(m))));
}

NodeId Tape::softplus(NodeId x) {
  const Tensor& xv = value(x);
  Tensor out(xv.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = ops::softplus(xv[i]);
  return push(make_node(Primitive::kSoftplus, {x}, std::move(out)));
}

namespace {

// Cotangents for each input of `node`; entries whose `need` flag is false may
// be left empty.
std::vector<Tensor> node_vjp(const Tape& tape, const TapeNode& node, const Tensor& gy, const std::vector<bool>& need) {
  auto in = [&](std::size_t i) -> const Tensor& { return tape.value(node.inputs[i]); };
  std::vector<Tensor> g(node.inputs.size());
  switch (node.kind) {
    case Primitive::kLeaf:
      break;
    case Primitive::kConv3d: {
      auto r = ops::conv3d_vjp(in(0), in(1), gy, need[0], need[1] || need[2]);
      g[0] = std::move(r.x);
      g[1] = std::move(r.w);
      g[2] = std::move(r.b);
      break;
    }
    case Primitive::kConv2d: {
      auto r = ops::conv2d_vjp(in(0), in(1), gy, need[0], need[1] || need[2]);
      if (need[0]) g[0] = r.x.reshaped(in(0).shape());
      g[1] = std::move(r.w);
      g[2] = std::move(r.b);
      break;
    }
    case Primitive::kChannelAttention: {
      const auto& cache = std::get<ops::AttentionCache>(node.cache);
      const bool params = need[1] || need[2] || need[3] || need[4];
      auto r = ops::channel_attention_vjp(in(0), in(1), in(3), cache, gy, need[0], params);
      g[0] = std::move(r.x);
      g[1] = std::move(r.fc1_w);
      g[2] = std::move(r.fc1_b);
      g[3] = std::move(r.fc2_w);
      g[4] = std::move(r.fc2_b);
      break;
    }
    case Primitive::kLayerNorm: {
      const auto& cache = std::get<ops::LayerNormCache>(node.cache);
      auto r = ops::layer_norm_vjp(in(0), in(1), cache, gy, need[0], need[1] || need[2]);
      g[0] = std::move(r.x);
      g[1] = std::move(r.gain);
      g[2] = std::move(r.offset);
      break;
    }
    case Primitive::kRelu:
      g[0] = ops::relu_vjp(in(0), gy);
      break;
    case Primitive::kSigmoid:
      g[0] = ops::sigmoid_vjp(node.value(), gy);
      break;
    case Primitive::kLinear: {
      auto r = ops::linear_vjp(in(0), in(1), gy);
      g[0] = std::move(r.x);
      g[1] = std::move(r.w);
      g[2] = std::move(r.b);
      break;
    }
    case Primitive::kSoftmaxTemp:
      g[0] = ops::softmax_temp_vjp(node.value(), node.alpha, gy);
      break;
    case Primitive::kSoftThreshold: {
      auto r = ops::soft_threshold_vjp(in(0), in(1)[0], gy);
      g[0] = std::move(r.x);
      g[1] = Tensor(in(1).shape(), r.t);
      break;
    }
    case Primitive::kAdd:
      if (need[0]) g[0] = node.alpha * gy;
      if (need[1]) g[1] = node.beta * gy;
      break;
    case Primitive::kScale:
      g[0] = node.alpha * gy;
      break;
    case Primitive::kConcatChannels: {
      const Tensor& a = in(0);
      const Tensor& b = in(1);
      std::vector<double> ga(gy.storage().begin(), gy.storage().begin() + static_cast<std::ptrdiff_t>(a.size()));
      std::vector<double> gb(gy.storage().begin() + static_cast<std::ptrdiff_t>(a.size()), gy.storage().end());
      g[0] = Tensor(a.shape(), std::move(ga));
      g[1] = Tensor(b.shape(), std::move(gb));
      break;
    }
    case Primitive::kReshape:
      g[0] = gy.reshaped(in(0).shape());
      break;
    case Primitive::kCubeToVolume:
      g[0] = ops::volume_to_cube(gy);
      break;
    case Primitive::kVolumeToCube: {
      g[0] = ops::cube_to_volume(gy).reshaped(in(0).shape());
      break;
    }
    case Primitive::kMode3Product: {
      // out = A W^T per pixel: gA = gy W, gW = gy^T A
      const Tensor& a = in(0);
      const Tensor& m = in(1);
      if (need[0]) g[0] = deq::mode3_product_adjoint(gy, m);
      if (need[1]) {
        Tensor gm(m.shape());
        const std::size_t n = pixel_count(a), r = m.cols(), l = m.rows();
        for (std::size_t p = 0; p < n; ++p) {
          for (std::size_t band = 0; band < l; ++band) {
            const double gv = gy[p * l + band];
            for (std::size_t k = 0; k < r; ++k) gm[band * r + k] += gv * a[p * r + k];
          }
        }
        g[1] = std::move(gm);
      }
      break;
    }
    case Primitive::kMode3Adjoint: {
      // out = G W per pixel: gG = gy W^T, gW = G^T gy
      const Tensor& gin = in(0);
      const Tensor& m = in(1);
      if (need[0]) g[0] = deq::mode3_product(gy, m);
      if (need[1]) {
        Tensor gm(m.shape());
        const std::size_t n = pixel_count(gin), r = m.cols(), l = m.rows();
        for (std::size_t p = 0; p < n; ++p) {
          for (std::size_t band = 0; band < l; ++band) {
            const double gv = gin[p * l + band];
            for (std::size_t k = 0; k < r; ++k) gm[band * r + k] += gv * gy[p * r + k];
          }
        }
        g[1] = std::move(gm);
      }
      break;
    }
    case Primitive::kSoftplus: {
      const Tensor& x = in(0);
      Tensor gx(x.shape());
      for (std::size_t i = 0; i < x.size(); ++i) gx[i] = gy[i] * ops::softplus_grad(x[i]);
      g[0] = std::move(gx);
      break;
    }
  }
  return g;
}

}  // namespace

std::vector<Tensor> Tape::backward(NodeId output, const Tensor& seed, std::span<const NodeId> targets) const {
  const std::size_t n = output.index + 1;
  if (output.index >= nodes_.size()) throw DimensionError("Tape::backward: unknown output node");
  value(output).require_same_shape(seed, "Tape::backward seed");

  std::vector<bool> is_target(nodes_.size(), false);
  for (NodeId t : targets) is_target.at(t.index) = true;
  std::vector<bool> depends(n, false);
  for (std::size_t i = 0; i < n; ++i) {
    bool d = is_target[i];
    for (NodeId in : nodes_[i].inputs) d = d || depends[in.index];
    depends[i] = d;
  }

  // Cotangent buffers are registered as backward-phase scalars while alive.
  std::vector<std::optional<Tensor>> grads(n);
  std::vector<LedgerHold> holds(n);
  auto accumulate = [&](std::size_t i, Tensor g) {
    if (grads[i]) {
      *grads[i] += g;
    } else {
      holds[i] = LedgerHold(ledger_, g.size(), LedgerPhase::kBackward);
      grads[i] = std::move(g);
    }
  };
  if (depends[output.index]) accumulate(output.index, seed);

  for (std::size_t i = n; i-- > 0;) {
    if (!grads[i]) continue;
    const TapeNode& node = nodes_[i];
    if (node.kind != Primitive::kLeaf) {
      std::vector<bool> need(node.inputs.size());
      for (std::size_t k = 0; k < need.size(); ++k) need[k] = depends[node.inputs[k].index];
      std::vector<Tensor> gin = node_vjp(*this, node, *grads[i], need);
      for (std::size_t k = 0; k < gin.size(); ++k) {
        if (need[k]) accumulate(node.inputs[k].index, std::move(gin[k]));
      }
    }
    if (!is_target[i]) {
      grads[i].reset();
      holds[i] = LedgerHold();
    }
  }

  std::vector<Tensor> out;
  out.reserve(targets.size());
  for (NodeId t : targets) {
    if (t.index < n && grads[t.index]) {
      out.push_back(*grads[t.index]);
    } else {
      out.push_back(Tensor(value(t).shape()));
    }
  }
  return out;
}

}  // namespace deq
