#pragma once

#include <cstddef>
#include <deque>
#include <span>
#include <string_view>
#include <variant>
#include <vector>

#include "deq/ledger.hpp"
#include "deq/ops.hpp"
#include "deq/tensor.hpp"

namespace deq {

enum class Primitive {
  kLeaf,
  kConv3d,
  kConv2d,
  kChannelAttention,
  kLayerNorm,
  kRelu,
  kSigmoid,
  kLinear,
  kSoftmaxTemp,
  kSoftThreshold,
  kAdd,
  kScale,
  kConcatChannels,
  kReshape,
  kCubeToVolume,
  kVolumeToCube,
  kMode3Product,
  kMode3Adjoint,
  kSoftplus,
};

std::string_view primitive_name(Primitive kind);

struct NodeId {
  std::size_t index = 0;
  bool operator==(const NodeId&) const = default;
};

struct TapeNode {
  Primitive kind = Primitive::kLeaf;
  std::vector<NodeId> inputs;
  Tensor owned;
  const Tensor* ref = nullptr;  // leaves may alias caller-owned tensors
  std::variant<std::monostate, ops::AttentionCache, ops::LayerNormCache> cache;
  double alpha = 0.0;
  double beta = 0.0;
  std::size_t retained = 0;  // scalars registered with the ledger

  const Tensor& value() const { return ref ? *ref : owned; }
};

// Linear record of primitive applications. Nodes are appended in evaluation
// order, so the record is acyclic by construction and a reverse sweep visits
// nodes in reverse topological order. Every non-leaf output and cache is
// registered with the ledger (when one is given) for the lifetime of the tape.
class Tape {
 public:
  explicit Tape(MemoryLedger* ledger = nullptr, LedgerPhase phase = LedgerPhase::kForward);
  ~Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // Leaf aliasing a tensor that must outlive the tape.
  NodeId input(const Tensor& value);
  // Leaf owning its value.
  NodeId constant(Tensor value);

  NodeId conv3d(NodeId x, NodeId w, NodeId b);
  NodeId conv2d(NodeId x, NodeId w, NodeId b);
  NodeId channel_attention(NodeId x, NodeId fc1_w, NodeId fc1_b, NodeId fc2_w, NodeId fc2_b);
  NodeId layer_norm(NodeId x, NodeId gain, NodeId offset);
  NodeId relu(NodeId x);
  NodeId sigmoid(NodeId x);
  NodeId linear(NodeId x, NodeId w, NodeId b);
  NodeId softmax_temp(NodeId x, double gamma);
  // t must be a single-element node.
  NodeId soft_threshold(NodeId x, NodeId t);
  // alpha * x + beta * y
  NodeId add(NodeId x, NodeId y, double alpha = 1.0, double beta = 1.0);
  NodeId scale(NodeId x, double alpha);
  NodeId concat_channels(NodeId a, NodeId b);
  NodeId reshape(NodeId x, Shape shape);
  NodeId cube_to_volume(NodeId cube);
  NodeId volume_to_cube(NodeId volume);
  NodeId mode3_product(NodeId a, NodeId m);
  NodeId mode3_adjoint(NodeId g, NodeId m);
  NodeId softplus(NodeId x);

  const Tensor& value(NodeId id) const { return nodes_.at(id.index).value(); }
  const TapeNode& node(NodeId id) const { return nodes_.at(id.index); }
  std::size_t size() const { return nodes_.size(); }
  std::size_t retained_scalars() const { return retained_; }

  // Reverse sweep from `output` seeded with `seed`. Only nodes that depend on
  // one of `targets` receive cotangents, so parameter gradients are skipped
  // entirely when only an input is targeted. Returns one cotangent per target
  // (zeros when the target does not influence the output).
  std::vector<Tensor> backward(NodeId output, const Tensor& seed, std::span<const NodeId> targets) const;

 private:
  NodeId push(TapeNode node);

  MemoryLedger* ledger_;
  LedgerPhase phase_;
  std::deque<TapeNode> nodes_;
  std::size_t retained_ = 0;
};

}  // namespace deq
