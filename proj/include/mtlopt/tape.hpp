#pragma once

#include <functional>
#include <map>
#include <span>
#include <vector>

#include "mtlopt/tensor.hpp"

namespace mtlopt {

enum class TensorOp { MatMul, Add, Scale, Relu, Tanh, Mean, SoftmaxXent, Mse };

const char* tensor_op_name(TensorOp op);

// Untaped evaluation of a primitive. Scale takes its factor through
// `scale_arg`; the generic entry point below packs it as a scalar tensor.
Tensor eval_op(TensorOp op, std::span<const Tensor> inputs, double scale_arg = 0.0);

// Generic dispatcher used by tests and the gradient-check CLI. Scale expects
// inputs = {x, factor} with factor a scalar tensor.
Tensor tensor_op(TensorOp op, std::span<const Tensor> inputs);

using NodeId = std::int32_t;

// Gradients keyed by the leaf id of the tape they came from.
class GradSet {
 public:
  void set(NodeId leaf, Tensor grad) { grads_.insert_or_assign(leaf, std::move(grad)); }
  const Tensor& at(NodeId leaf) const;
  bool contains(NodeId leaf) const { return grads_.count(leaf) != 0; }
  std::size_t size() const { return grads_.size(); }
  auto begin() const { return grads_.begin(); }
  auto end() const { return grads_.end(); }

 private:
  std::map<NodeId, Tensor> grads_;
};

// Recording tape for reverse-mode differentiation. Nodes are stored in
// topological order (inputs always precede their consumers); leaves hold
// parameter and input tensors.
class Tape {
 public:
  struct Node {
    TensorOp op = TensorOp::Add;
    bool leaf = false;
    NodeId in0 = -1, in1 = -1;
    double scale_arg = 0.0;
    Tensor value;
  };

  NodeId leaf(Tensor value);
  NodeId apply(TensorOp op, NodeId a);
  NodeId apply(TensorOp op, NodeId a, NodeId b);
  NodeId apply_scale(NodeId a, double factor);

  const Tensor& value(NodeId id) const { return nodes_[check(id)].value; }
  std::size_t size() const { return nodes_.size(); }
  std::span<const NodeId> leaves() const { return leaves_; }
  const Node& node(NodeId id) const { return nodes_[check(id)]; }

  // Overwrites a leaf value (same shape required); call replay() afterwards
  // to refresh downstream values.
  void set_leaf(NodeId id, Tensor value);

  // Recomputes every non-leaf value from the leaves, in recording order.
  void replay();

  // Reverse sweep from a scalar root. Returns d(root)/d(leaf) * seed for
  // every leaf; leaves the root does not reach map to zero tensors.
  GradSet backward(NodeId root, double seed = 1.0) const;

  // Reverse sweep seeded with a cotangent at an arbitrary node (the VJP
  // entry point). The cotangent must have the node's element count.
  GradSet backward_vjp(NodeId node, const Tensor& cotangent) const;

 private:
  std::size_t check(NodeId id) const;
  std::vector<Node> nodes_;
  std::vector<NodeId> leaves_;
};

// Central-difference gradient of a scalar-valued function, (f(x + h e_i) -
// f(x - h e_i)) / 2h per coordinate. Used as the independent oracle for
// reverse-mode gradients.
Tensor finite_diff(const std::function<double(const Tensor&)>& f, const Tensor& x, double h);

}  // namespace mtlopt
