#include "mtlopt/tape.hpp"

#include <cmath>
#include <string>

namespace mtlopt {

namespace {

void require(bool cond, const std::string& msg) {
  if (!cond) throw ShapeError(msg);
}

Tensor k_matmul(const Tensor& a, const Tensor& b) {
  require(a.rank() == 2 && b.rank() == 2, "matmul expects rank-2 inputs");
  require(a.cols() == b.rows(), "matmul inner dimensions differ: " + a.shape_str() + " vs " + b.shape_str());
  MatrixRM c = a.as_matrix() * b.as_matrix();
  Eigen::VectorXd flat = Eigen::Map<const Eigen::VectorXd>(c.data(), c.size());
  if (!flat.allFinite()) throw NumericError("matmul produced non-finite values");
  return Tensor({a.rows(), b.cols()}, std::move(flat));
}

// add accepts identical shapes, or [n x h] + [h] as a row-wise bias add.
Tensor k_add(const Tensor& a, const Tensor& b) {
  if (a.same_shape(b)) return Tensor(a.shape(), a.flat() + b.flat());
  if (a.rank() == 2 && b.rank() == 1 && a.cols() == b.numel()) {
    MatrixRM c = a.as_matrix();
    c.rowwise() += Eigen::Map<const Eigen::RowVectorXd>(b.flat().data(), b.numel());
    return Tensor(a.shape(), Eigen::Map<const Eigen::VectorXd>(c.data(), c.size()));
  }
  throw ShapeError("add shapes do not conform: " + a.shape_str() + " vs " + b.shape_str());
}

Tensor k_scale(const Tensor& a, double c) {
  return Tensor(a.shape(), (a.flat() * c).eval());
}

Tensor k_relu(const Tensor& a) {
  return Tensor(a.shape(), a.flat().cwiseMax(0.0).eval());
}

Tensor k_tanh(const Tensor& a) {
  return Tensor(a.shape(), a.flat().array().tanh().matrix().eval());
}

Tensor k_mean(const Tensor& a) {
  return Tensor::scalar(a.flat().mean());
}

// Batch-mean cross entropy over logits [n x C] and integer labels [n].
Tensor k_softmax_xent(const Tensor& logits, const Tensor& labels) {
  require(logits.rank() == 2, "softmax_xent expects logits [n x C]");
  require(labels.rank() == 1 && labels.numel() == logits.rows(),
          "softmax_xent expects one label per row");
  const Index n = logits.rows(), c = logits.cols();
  double total = 0.0;
  for (Index i = 0; i < n; ++i) {
    double lv = labels(i);
    if (lv != std::floor(lv) || lv < 0 || lv >= static_cast<double>(c))
      throw ShapeError("softmax_xent label out of range at row " + std::to_string(i));
    Index y = static_cast<Index>(lv);
    double m = logits(i, 0);
    for (Index j = 1; j < c; ++j) m = std::max(m, logits(i, j));
    double sum = 0.0;
    for (Index j = 0; j < c; ++j) sum += std::exp(logits(i, j) - m);
    total += m + std::log(sum) - logits(i, y);
  }
  double loss = total / static_cast<double>(n);
  if (!std::isfinite(loss)) throw NumericError("softmax_xent produced non-finite loss");
  return Tensor::scalar(loss);
}

Tensor k_mse(const Tensor& a, const Tensor& b) {
  require(a.same_shape(b), "mse expects equal shapes: " + a.shape_str() + " vs " + b.shape_str());
  double v = (a.flat() - b.flat()).squaredNorm() / static_cast<double>(a.numel());
  if (!std::isfinite(v)) throw NumericError("mse produced non-finite loss");
  return Tensor::scalar(v);
}

int op_arity(TensorOp op) {
  switch (op) {
    case TensorOp::MatMul:
    case TensorOp::Add:
    case TensorOp::SoftmaxXent:
    case TensorOp::Mse:
      return 2;
    case TensorOp::Scale:
    case TensorOp::Relu:
    case TensorOp::Tanh:
    case TensorOp::Mean:
      return 1;
  }
  return 0;
}

}  // namespace

const char* tensor_op_name(TensorOp op) {
  switch (op) {
    case TensorOp::MatMul: return "matmul";
    case TensorOp::Add: return "add";
    case TensorOp::Scale: return "scale";
    case TensorOp::Relu: return "relu";
    case TensorOp::Tanh: return "tanh";
    case TensorOp::Mean: return "mean";
    case TensorOp::SoftmaxXent: return "softmax_xent";
    case TensorOp::Mse: return "mse";
  }
  return "?";
}

Tensor eval_op(TensorOp op, std::span<const Tensor> inputs, double scale_arg) {
  require(static_cast<int>(inputs.size()) == op_arity(op),
          std::string(tensor_op_name(op)) + ": wrong input count");
  switch (op) {
    case TensorOp::MatMul: return k_matmul(inputs[0], inputs[1]);
    case TensorOp::Add: return k_add(inputs[0], inputs[1]);
    case TensorOp::Scale: return k_scale(inputs[0], scale_arg);
    case TensorOp::Relu: return k_relu(inputs[0]);
    case TensorOp::Tanh: return k_tanh(inputs[0]);
    case TensorOp::Mean: return k_mean(inputs[0]);
    case TensorOp::SoftmaxXent: return k_softmax_xent(inputs[0], inputs[1]);
    case TensorOp::Mse: return k_mse(inputs[0], inputs[1]);
  }
  throw InputError("unknown op");
}

Tensor tensor_op(TensorOp op, std::span<const Tensor> inputs) {
  if (op == TensorOp::Scale) {
    require(inputs.size() == 2 && inputs[1].numel() == 1, "scale expects {x, factor}");
    return k_scale(inputs[0], inputs[1].flat()[0]);
  }
  return eval_op(op, inputs);
}

const Tensor& GradSet::at(NodeId leaf) const {
  auto it = grads_.find(leaf);
  if (it == grads_.end()) throw InputError("GradSet: unknown leaf id " + std::to_string(leaf));
  return it->second;
}

std::size_t Tape::check(NodeId id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= nodes_.size())
    throw InputError("tape node id out of range: " + std::to_string(id));
  return static_cast<std::size_t>(id);
}

NodeId Tape::leaf(Tensor value) {
  NodeId id = static_cast<NodeId>(nodes_.size());
  Node n;
  n.leaf = true;
  n.value = std::move(value);
  nodes_.push_back(std::move(n));
  leaves_.push_back(id);
  return id;
}

NodeId Tape::apply(TensorOp op, NodeId a) {
  const Tensor in[1] = {value(a)};
  Tensor out = eval_op(op, in);
  Node n;
  n.op = op;
  n.in0 = a;
  n.value = std::move(out);
  nodes_.push_back(std::move(n));
  return static_cast<NodeId>(nodes_.size() - 1);
}

NodeId Tape::apply(TensorOp op, NodeId a, NodeId b) {
  const Tensor in[2] = {value(a), value(b)};
  Tensor out = eval_op(op, in);
  Node n;
  n.op = op;
  n.in0 = a;
  n.in1 = b;
  n.value = std::move(out);
  nodes_.push_back(std::move(n));
  return static_cast<NodeId>(nodes_.size() - 1);
}

NodeId Tape::apply_scale(NodeId a, double factor) {
  const Tensor in[1] = {value(a)};
  Tensor out = eval_op(TensorOp::Scale, in, factor);
  Node n;
  n.op = TensorOp::Scale;
  n.in0 = a;
  n.scale_arg = factor;
  n.value = std::move(out);
  nodes_.push_back(std::move(n));
  return static_cast<NodeId>(nodes_.size() - 1);
}

void Tape::set_leaf(NodeId id, Tensor value) {
  Node& n = nodes_[check(id)];
  if (!n.leaf) throw InputError("set_leaf on a non-leaf node");
  if (!n.value.same_shape(value)) throw ShapeError("set_leaf shape mismatch");
  n.value = std::move(value);
}

void Tape::replay() {
  for (auto& n : nodes_) {
    if (n.leaf) continue;
    if (n.in1 >= 0) {
      const Tensor in[2] = {nodes_[static_cast<std::size_t>(n.in0)].value,
                            nodes_[static_cast<std::size_t>(n.in1)].value};
      n.value = eval_op(n.op, in, n.scale_arg);
    } else {
      const Tensor in[1] = {nodes_[static_cast<std::size_t>(n.in0)].value};
      n.value = eval_op(n.op, in, n.scale_arg);
    }
  }
}

GradSet Tape::backward(NodeId root, double seed) const {
  if (value(root).numel() != 1) throw ShapeError("backward root must be scalar");
  return backward_vjp(root, Tensor::scalar(seed));
}

GradSet Tape::backward_vjp(NodeId node, const Tensor& cotangent) const {
  const std::size_t start = check(node);
  const Tensor& root_val = nodes_[start].value;
  if (cotangent.numel() != root_val.numel())
    throw ShapeError("cotangent has " + std::to_string(cotangent.numel()) + " elements, node has " +
                     std::to_string(root_val.numel()));

  std::vector<Eigen::VectorXd> adj(nodes_.size());
  std::vector<bool> live(nodes_.size(), false);
  adj[start] = cotangent.flat();
  live[start] = true;

  auto touch = [&](NodeId id, const Eigen::VectorXd& delta) {
    std::size_t i = static_cast<std::size_t>(id);
    if (!live[i]) {
      adj[i] = delta;
      live[i] = true;
    } else {
      adj[i] += delta;
    }
  };

  for (std::size_t idx = start + 1; idx-- > 0;) {
    if (!live[idx]) continue;
    const Node& n = nodes_[idx];
    if (n.leaf) continue;
    const Eigen::VectorXd& g = adj[idx];
    const Tensor& a = nodes_[static_cast<std::size_t>(n.in0)].value;

    switch (n.op) {
      case TensorOp::MatMul: {
        const Tensor& b = nodes_[static_cast<std::size_t>(n.in1)].value;
        ConstMatMap gm(g.data(), a.rows(), b.cols());
        MatrixRM da = gm * b.as_matrix().transpose();
        MatrixRM db = a.as_matrix().transpose() * gm;
        touch(n.in0, Eigen::Map<const Eigen::VectorXd>(da.data(), da.size()));
        touch(n.in1, Eigen::Map<const Eigen::VectorXd>(db.data(), db.size()));
        break;
      }
      case TensorOp::Add: {
        const Tensor& b = nodes_[static_cast<std::size_t>(n.in1)].value;
        touch(n.in0, g);
        if (a.same_shape(b)) {
          touch(n.in1, g);
        } else {
          // bias case: sum the adjoint over rows
          ConstMatMap gm(g.data(), a.rows(), a.cols());
          touch(n.in1, gm.colwise().sum().transpose());
        }
        break;
      }
      case TensorOp::Scale:
        touch(n.in0, (n.scale_arg * g).eval());
        break;
      case TensorOp::Relu: {
        Eigen::VectorXd da = (g.array() * (a.flat().array() > 0.0).cast<double>()).matrix();
        touch(n.in0, da);
        break;
      }
      case TensorOp::Tanh: {
        // uses the saved output: d tanh = 1 - tanh^2
        const Eigen::VectorXd& y = n.value.flat();
        touch(n.in0, (g.array() * (1.0 - y.array().square())).matrix().eval());
        break;
      }
      case TensorOp::Mean:
        touch(n.in0, Eigen::VectorXd::Constant(a.numel(), g[0] / static_cast<double>(a.numel())));
        break;
      case TensorOp::SoftmaxXent: {
        const Tensor& labels = nodes_[static_cast<std::size_t>(n.in1)].value;
        const Index rows = a.rows(), cols = a.cols();
        Eigen::VectorXd da(rows * cols);
        const double s = g[0] / static_cast<double>(rows);
        for (Index i = 0; i < rows; ++i) {
          double m = a(i, 0);
          for (Index j = 1; j < cols; ++j) m = std::max(m, a(i, j));
          double sum = 0.0;
          for (Index j = 0; j < cols; ++j) sum += std::exp(a(i, j) - m);
          for (Index j = 0; j < cols; ++j) da[i * cols + j] = s * (std::exp(a(i, j) - m) / sum);
          da[i * cols + static_cast<Index>(labels(i))] -= s;
        }
        touch(n.in0, da);
        // labels carry no gradient
        break;
      }
      case TensorOp::Mse: {
        const Tensor& b = nodes_[static_cast<std::size_t>(n.in1)].value;
        Eigen::VectorXd diff = (a.flat() - b.flat()) * (2.0 * g[0] / static_cast<double>(a.numel()));
        touch(n.in0, diff);
        touch(n.in1, (-diff).eval());
        break;
      }
    }
  }

  GradSet out;
  for (NodeId id : leaves_) {
    std::size_t i = static_cast<std::size_t>(id);
    const Tensor& v = nodes_[i].value;
    if (live[i])
      out.set(id, Tensor(v.shape(), std::move(adj[i])));
    else
      out.set(id, Tensor::zeros(v.shape()));
  }
  return out;
}

Tensor finite_diff(const std::function<double(const Tensor&)>& f, const Tensor& x, double h) {
  if (!(h > 0)) throw InputError("finite_diff requires h > 0");
  Eigen::VectorXd g(x.numel());
  Eigen::VectorXd base = x.flat();
  for (Index i = 0; i < x.numel(); ++i) {
    Eigen::VectorXd hi = base, lo = base;
    hi[i] += h;
    lo[i] -= h;
    double fp = f(Tensor(x.shape(), std::move(hi)));
    double fm = f(Tensor(x.shape(), std::move(lo)));
    if (!std::isfinite(fp) || !std::isfinite(fm)) throw NumericError("finite_diff: non-finite evaluation");
    g[i] = (fp - fm) / (2.0 * h);
  }
  return Tensor(x.shape(), std::move(g));
}

}  // namespace mtlopt
