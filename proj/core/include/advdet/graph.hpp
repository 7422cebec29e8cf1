#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "advdet/tensor.hpp"

namespace advdet {

struct NodeId {
  std::size_t index = 0;
  friend bool operator==(NodeId, NodeId) = default;
};

enum class OpKind {
  kInput,
  kParameter,
  kConstant,
  kAffine,
  kConv2d,
  kMaxPool2d,
  kRelu,
  kAdd,
  kMul,
  kNeg,
  kScale,
  kShift,
  kLog,
  kExp,
  kSum,
  kMean,
  kMax,
  kGather,
  kConcat,
  kSoftmax,
  kLogSoftmax,
  kReshape,
};

const char* op_name(OpKind kind);

struct Node {
  OpKind kind = OpKind::kInput;
  std::string name;
  std::vector<NodeId> inputs;
  Shape shape;
  double factor = 0.0;        // kScale / kShift
  std::size_t axis = 0;       // kSoftmax / kLogSoftmax
  std::size_t padding = 0;    // kConv2d
  std::size_t window = 0;     // kMaxPool2d
  std::vector<std::size_t> indices;  // kGather
  Tensor constant;            // kConstant
};

// Static computation graph. Nodes are appended in topological order and
// every builder validates shapes immediately, so a Graph that was built
// without throwing is well-typed for any binding that matches its leaves.
//
// Leaves are either named inputs/parameters (bound at forward time) or
// constants baked into the graph.
class Graph {
 public:
  NodeId input(std::string name, Shape shape);
  NodeId parameter(std::string name, Shape shape);
  NodeId constant(Tensor value);

  // x [B, in], weight [out, in], bias [out] -> [B, out]
  NodeId affine(NodeId x, NodeId weight, NodeId bias);
  // x [B, C, H, W], weight [F, C, K, K], bias [F]; stride 1, zero padding.
  NodeId conv2d(NodeId x, NodeId weight, NodeId bias, std::size_t padding);
  // Non-overlapping window x window pooling over the last two axes.
  NodeId max_pool2d(NodeId x, std::size_t window);
  NodeId relu(NodeId x);

  NodeId add(NodeId a, NodeId b);
  NodeId mul(NodeId a, NodeId b);
  NodeId neg(NodeId x);
  NodeId scale(NodeId x, double factor);
  NodeId shift(NodeId x, double offset);
  NodeId log(NodeId x);
  NodeId exp(NodeId x);

  // Full reductions to a rank-0 scalar. max routes its gradient to the
  // first maximal element.
  NodeId sum(NodeId x);
  NodeId mean(NodeId x);
  NodeId max(NodeId x);

  // Picks elements of the flattened input; result is 1-D.
  NodeId gather(NodeId x, std::vector<std::size_t> flat_indices);
  // Flattened concatenation; result is 1-D.
  NodeId concat(std::span<const NodeId> parts);
  NodeId softmax(NodeId x, std::size_t axis);
  NodeId log_softmax(NodeId x, std::size_t axis);
  NodeId reshape(NodeId x, Shape shape);

  const Node& node(NodeId id) const { return nodes_.at(id.index); }
  const Shape& shape(NodeId id) const { return node(id).shape; }
  std::size_t size() const { return nodes_.size(); }
  std::optional<NodeId> find_leaf(const std::string& name) const;
  // Named leaves (inputs and parameters) in creation order.
  std::vector<NodeId> leaves() const;

 private:
  NodeId push(Node node);
  NodeId named_leaf(OpKind kind, std::string name, Shape shape);
  const Node& checked(NodeId id, const char* op) const;
  std::string label(NodeId id) const;

  std::vector<Node> nodes_;
};

// Node values from one forward evaluation; consumed by backward().
class Execution {
 public:
  const Tensor& value(NodeId id) const { return values_.at(id.index); }
  const Tensor& output() const { return values_.back(); }

 private:
  friend Execution forward(const Graph& graph, const TensorMap& bindings);
  friend TensorMap backward_impl(const Graph& graph, const Execution& run, NodeId output,
                                 const std::vector<bool>& needed);

  std::vector<Tensor> values_;
  // Flat source index chosen by each max-pool window / max reduction.
  std::vector<std::vector<std::size_t>> routes_;
};

// Evaluates every node. `bindings` must hold a tensor for each named leaf
// with exactly the declared shape. Throws ShapeError naming the offending
// node on a missing or mis-shaped binding and NumericError if any node
// produces a non-finite value.
Execution forward(const Graph& graph, const TensorMap& bindings);

// Reverse-mode gradient of the scalar `output` with respect to every named
// leaf. Leaves that `output` does not depend on get a zero tensor.
TensorMap backward(const Graph& graph, const Execution& run, NodeId output);

// Same, restricted to the leaves in `wrt`; work that only feeds other leaves
// is skipped.
TensorMap backward(const Graph& graph, const Execution& run, NodeId output,
                   std::span<const NodeId> wrt);

}  // namespace advdet
