#include "mtlopt/model.hpp"

#include <cmath>
#include <string>

namespace mtlopt {

namespace {

Tensor init_uniform(std::vector<Index> shape, Index fan_in, Rng& rng) {
  Index n = 1;
  for (Index d : shape) n *= d;
  const double s = 1.0 / std::sqrt(static_cast<double>(fan_in));
  Eigen::VectorXd data(n);
  for (Index i = 0; i < n; ++i) data[i] = rng.uniform(-s, s);
  return Tensor(std::move(shape), std::move(data));
}

std::vector<DenseLayer> build_chain(Index in_dim, const std::vector<Index>& widths, Activation act,
                                    Activation last_act, Rng& rng) {
  std::vector<DenseLayer> layers;
  Index d = in_dim;
  for (std::size_t i = 0; i < widths.size(); ++i) {
    DenseLayer layer;
    layer.weight = init_uniform({d, widths[i]}, d, rng);
    layer.bias = init_uniform({widths[i]}, d, rng);
    layer.act = (i + 1 == widths.size()) ? last_act : act;
    d = widths[i];
    layers.push_back(std::move(layer));
  }
  return layers;
}

// Untaped forward through a layer chain.
Tensor forward_chain(std::span<const DenseLayer> layers, Tensor x) {
  for (const auto& layer : layers) {
    const Tensor lin_in[2] = {x, layer.weight};
    x = eval_op(TensorOp::MatMul, lin_in);
    const Tensor add_in[2] = {x, layer.bias};
    x = eval_op(TensorOp::Add, add_in);
    if (layer.act == Activation::Relu) {
      const Tensor in[1] = {x};
      x = eval_op(TensorOp::Relu, in);
    } else if (layer.act == Activation::Tanh) {
      const Tensor in[1] = {x};
      x = eval_op(TensorOp::Tanh, in);
    }
  }
  return x;
}

double loss_value(const TaskHead& head, const Tensor& pred, const Tensor& labels) {
  const Tensor in[2] = {pred, labels};
  double base = eval_op(head.loss == LossKind::SoftmaxXent ? TensorOp::SoftmaxXent : TensorOp::Mse, in)
                    .scalar_value();
  return head.loss_scale * base;
}

// Taped forward through a layer chain; records each layer's weight and bias
// as leaves (appended to param_leaves in flattening order).
NodeId taped_chain(Tape& tape, std::span<const DenseLayer> layers, NodeId x,
                   std::vector<NodeId>* param_leaves) {
  for (const auto& layer : layers) {
    NodeId w = tape.leaf(layer.weight);
    NodeId b = tape.leaf(layer.bias);
    if (param_leaves) {
      param_leaves->push_back(w);
      param_leaves->push_back(b);
    }
    x = tape.apply(TensorOp::MatMul, x, w);
    x = tape.apply(TensorOp::Add, x, b);
    if (layer.act == Activation::Relu) x = tape.apply(TensorOp::Relu, x);
    if (layer.act == Activation::Tanh) x = tape.apply(TensorOp::Tanh, x);
  }
  return x;
}

NodeId taped_loss(Tape& tape, const TaskHead& head, NodeId pred, const Tensor& labels) {
  NodeId lab = tape.leaf(labels);
  NodeId loss = tape.apply(head.loss == LossKind::SoftmaxXent ? TensorOp::SoftmaxXent : TensorOp::Mse,
                           pred, lab);
  if (head.loss_scale != 1.0) loss = tape.apply_scale(loss, head.loss_scale);
  return loss;
}

// Concatenates gradients of the given leaves in order.
Eigen::VectorXd gather_flat(const GradSet& grads, std::span<const NodeId> leaves) {
  Index total = 0;
  for (NodeId id : leaves) total += grads.at(id).numel();
  Eigen::VectorXd out(total);
  Index offset = 0;
  for (NodeId id : leaves) {
    const Tensor& g = grads.at(id);
    out.segment(offset, g.numel()) = g.flat();
    offset += g.numel();
  }
  return out;
}

// theta += factor * v over a layer chain, v in flattening order.
void axpy_chain(std::span<DenseLayer> layers, const Eigen::VectorXd& v, double factor) {
  Index offset = 0;
  for (auto& layer : layers) {
    Index wn = layer.weight.numel();
    Index bn = layer.bias.numel();
    layer.weight = Tensor(layer.weight.shape(),
                          (layer.weight.flat() + factor * v.segment(offset, wn)).eval());
    offset += wn;
    layer.bias =
        Tensor(layer.bias.shape(), (layer.bias.flat() + factor * v.segment(offset, bn)).eval());
    offset += bn;
  }
}

Index chain_param_count(std::span<const DenseLayer> layers) {
  Index n = 0;
  for (const auto& layer : layers) n += layer.param_count();
  return n;
}

void check_stale(const MultiTaskModel& model, const LatentBatch& latent) {
  if (latent.version != model.shared_version())
    throw StaleLatentError("latent was computed under shared-parameter version " +
                           std::to_string(latent.version) + ", model is at " +
                           std::to_string(model.shared_version()));
}

}  // namespace

Index TaskHead::param_count() const { return chain_param_count(layers); }

void Batch::validate(Index task_count) const {
  if (inputs.rank() != 2 || inputs.dim(0) < 1) throw ShapeError("batch inputs must be [n x d], n >= 1");
  if (static_cast<Index>(labels.size()) != task_count)
    throw ShapeError("batch has " + std::to_string(labels.size()) + " label sets for " +
                     std::to_string(task_count) + " tasks");
  for (const auto& l : labels) {
    Index n = l.rank() == 2 ? l.dim(0) : l.numel();
    if (n != size()) throw ShapeError("label count does not match batch size");
  }
}

MultiTaskModel::MultiTaskModel(std::vector<DenseLayer> encoder, std::vector<TaskHead> tasks)
    : encoder_(std::move(encoder)), tasks_(std::move(tasks)) {
  if (encoder_.empty()) throw ShapeError("model needs at least one encoder layer");
  if (tasks_.empty()) throw ShapeError("model needs at least one task");
  for (std::size_t i = 0; i + 1 < encoder_.size(); ++i)
    if (encoder_[i].out_dim() != encoder_[i + 1].in_dim())
      throw ShapeError("encoder layer widths do not chain at layer " + std::to_string(i));
  const Index d_z = latent_dim();
  for (std::size_t t = 0; t < tasks_.size(); ++t) {
    const auto& layers = tasks_[t].layers;
    if (!layers.empty() && layers.front().in_dim() != d_z)
      throw ShapeError("task " + std::to_string(t) + " does not consume the latent dimension");
    for (std::size_t i = 0; i + 1 < layers.size(); ++i)
      if (layers[i].out_dim() != layers[i + 1].in_dim())
        throw ShapeError("task " + std::to_string(t) + " layer widths do not chain");
  }
}

MultiTaskModel MultiTaskModel::make_mlp(Index input_dim, const std::vector<Index>& encoder_widths,
                                        Activation act, const std::vector<TaskSpec>& tasks,
                                        std::uint64_t seed) {
  if (encoder_widths.empty()) throw ConfigError("encoder needs at least one width (the latent dim)");
  Rng rng(seed);
  Rng enc_rng = rng.split(0x656e63);
  std::vector<DenseLayer> encoder = build_chain(input_dim, encoder_widths, act, act, enc_rng);
  const Index d_z = encoder_widths.back();
  std::vector<TaskHead> heads;
  for (std::size_t t = 0; t < tasks.size(); ++t) {
    Rng task_rng = rng.split(0x646563 + t);
    std::vector<Index> widths = tasks[t].hidden;
    widths.push_back(tasks[t].out_dim);
    TaskHead head;
    head.layers = build_chain(d_z, widths, act, Activation::Identity, task_rng);
    head.loss = tasks[t].loss;
    head.loss_scale = tasks[t].loss_scale;
    heads.push_back(std::move(head));
  }
  return MultiTaskModel(std::move(encoder), std::move(heads));
}

Index MultiTaskModel::shared_param_count() const { return chain_param_count(encoder_); }

Eigen::VectorXd MultiTaskModel::shared_flat() const {
  Eigen::VectorXd out(shared_param_count());
  Index offset = 0;
  for (const auto& layer : encoder_) {
    out.segment(offset, layer.weight.numel()) = layer.weight.flat();
    offset += layer.weight.numel();
    out.segment(offset, layer.bias.numel()) = layer.bias.flat();
    offset += layer.bias.numel();
  }
  return out;
}

Eigen::VectorXd MultiTaskModel::task_flat(Index t) const {
  const auto& layers = tasks_[static_cast<std::size_t>(t)].layers;
  Eigen::VectorXd out(chain_param_count(layers));
  Index offset = 0;
  for (const auto& layer : layers) {
    out.segment(offset, layer.weight.numel()) = layer.weight.flat();
    offset += layer.weight.numel();
    out.segment(offset, layer.bias.numel()) = layer.bias.flat();
    offset += layer.bias.numel();
  }
  return out;
}

Tensor forward_latent(const MultiTaskModel& model, const Tensor& inputs) {
  return forward_chain(model.encoder(), inputs);
}

Tensor head_output(const MultiTaskModel& model, Index task, const Tensor& z) {
  return forward_chain(model.tasks()[static_cast<std::size_t>(task)].layers, z);
}

double task_loss_value(const TaskHead& head, const Tensor& pred, const Tensor& labels) {
  return loss_value(head, pred, labels);
}

LatentBatch encode(const MultiTaskModel& model, const Batch& batch, PassCounter& counter) {
  batch.validate(model.task_count());
  if (batch.inputs.dim(1) != model.input_dim())
    throw ShapeError("batch input width " + std::to_string(batch.inputs.dim(1)) +
                     " does not match model input width " + std::to_string(model.input_dim()));
  LatentBatch latent;
  latent.input_leaf = latent.tape.leaf(batch.inputs);
  latent.z_node = taped_chain(latent.tape, model.encoder(), latent.input_leaf, &latent.shared_leaves);
  latent.z = latent.tape.value(latent.z_node);
  latent.version = model.shared_version();
  counter.enc_fwd += 1;
  return latent;
}

std::vector<double> decoder_losses(std::span<const TaskHead> heads, const Tensor& z,
                                   const Batch& batch, PassCounter& counter) {
  std::vector<double> losses;
  losses.reserve(heads.size());
  for (std::size_t t = 0; t < heads.size(); ++t) {
    Tensor pred = forward_chain(heads[t].layers, z);
    losses.push_back(loss_value(heads[t], pred, batch.labels[t]));
  }
  counter.dec_fwd += static_cast<std::int64_t>(heads.size());
  return losses;
}

std::vector<double> task_losses_from_latent(const MultiTaskModel& model, const Tensor& z,
                                            const Batch& batch, PassCounter& counter) {
  batch.validate(model.task_count());
  if (z.rank() != 2 || z.dim(1) != model.latent_dim())
    throw ShapeError("latent width does not match model latent dimension");
  return decoder_losses(model.tasks(), z, batch, counter);
}

std::vector<double> task_losses(const MultiTaskModel& model, const Batch& batch,
                                PassCounter& counter) {
  batch.validate(model.task_count());
  Tensor z = forward_chain(model.encoder(), batch.inputs);
  counter.enc_fwd += 1;
  return decoder_losses(model.tasks(), z, batch, counter);
}

std::pair<GradientBundle, GradientBundle> latent_grads(const MultiTaskModel& model,
                                                       const LatentBatch& latent,
                                                       const Batch& batch, PassCounter& counter) {
  batch.validate(model.task_count());
  check_stale(model, latent);

  GradientBundle lat;
  lat.space = GradSpace::Latent;
  GradientBundle task;
  task.space = GradSpace::TaskParam;

  for (Index t = 0; t < model.task_count(); ++t) {
    const TaskHead& head = model.tasks()[static_cast<std::size_t>(t)];
    Tape tape;
    NodeId z_leaf = tape.leaf(latent.z);
    std::vector<NodeId> param_leaves;
    NodeId pred = taped_chain(tape, head.layers, z_leaf, &param_leaves);
    NodeId loss = taped_loss(tape, head, pred, batch.labels[static_cast<std::size_t>(t)]);
    GradSet grads = tape.backward(loss);
    lat.grads.push_back(grads.at(z_leaf).flat());
    task.grads.push_back(gather_flat(grads, param_leaves));
    const double value = tape.value(loss).scalar_value();
    lat.losses.push_back(value);
    task.losses.push_back(value);
  }
  counter.dec_bwd += model.task_count();
  return {std::move(lat), std::move(task)};
}

FullGrads shared_and_task_grads(const MultiTaskModel& model, const Batch& batch,
                                PassCounter& counter) {
  batch.validate(model.task_count());

  Tape tape;
  NodeId input = tape.leaf(batch.inputs);
  std::vector<NodeId> shared_leaves;
  NodeId z = taped_chain(tape, model.encoder(), input, &shared_leaves);

  std::vector<std::vector<NodeId>> task_leaves(static_cast<std::size_t>(model.task_count()));
  std::vector<NodeId> loss_nodes;
  for (Index t = 0; t < model.task_count(); ++t) {
    const TaskHead& head = model.tasks()[static_cast<std::size_t>(t)];
    NodeId pred = taped_chain(tape, head.layers, z, &task_leaves[static_cast<std::size_t>(t)]);
    loss_nodes.push_back(taped_loss(tape, head, pred, batch.labels[static_cast<std::size_t>(t)]));
  }

  FullGrads out;
  out.shared.space = GradSpace::SharedParam;
  out.task.space = GradSpace::TaskParam;
  for (Index t = 0; t < model.task_count(); ++t) {
    GradSet grads = tape.backward(loss_nodes[static_cast<std::size_t>(t)]);
    out.shared.grads.push_back(gather_flat(grads, shared_leaves));
    out.task.grads.push_back(gather_flat(grads, task_leaves[static_cast<std::size_t>(t)]));
    const double value = tape.value(loss_nodes[static_cast<std::size_t>(t)]).scalar_value();
    out.shared.losses.push_back(value);
    out.task.losses.push_back(value);
  }
  counter.enc_fwd += 1;
  counter.enc_bwd += model.task_count();
  return out;
}

GradientBundle shared_grads(const MultiTaskModel& model, const Batch& batch, PassCounter& counter) {
  return shared_and_task_grads(model, batch, counter).shared;
}

ScalarizedGrads uniform_mean_grads(const MultiTaskModel& model, const Batch& batch,
                                   PassCounter& counter) {
  batch.validate(model.task_count());

  Tape tape;
  NodeId input = tape.leaf(batch.inputs);
  std::vector<NodeId> shared_leaves;
  NodeId z = taped_chain(tape, model.encoder(), input, &shared_leaves);

  std::vector<std::vector<NodeId>> task_leaves(static_cast<std::size_t>(model.task_count()));
  ScalarizedGrads out;
  NodeId total = -1;
  for (Index t = 0; t < model.task_count(); ++t) {
    const TaskHead& head = model.tasks()[static_cast<std::size_t>(t)];
    NodeId pred = taped_chain(tape, head.layers, z, &task_leaves[static_cast<std::size_t>(t)]);
    NodeId loss = taped_loss(tape, head, pred, batch.labels[static_cast<std::size_t>(t)]);
    out.losses.push_back(tape.value(loss).scalar_value());
    total = (total < 0) ? loss : tape.apply(TensorOp::Add, total, loss);
  }
  NodeId mean = tape.apply_scale(total, 1.0 / static_cast<double>(model.task_count()));

  GradSet grads = tape.backward(mean);
  out.shared = gather_flat(grads, shared_leaves);
  for (Index t = 0; t < model.task_count(); ++t)
    out.task.push_back(gather_flat(grads, task_leaves[static_cast<std::size_t>(t)]));
  counter.enc_fwd += 1;
  counter.enc_bwd += 1;
  return out;
}

Eigen::VectorXd encoder_vjp(const MultiTaskModel& model, const LatentBatch& latent,
                            const Eigen::VectorXd& cotangent, PassCounter& counter) {
  check_stale(model, latent);
  if (cotangent.size() != latent.z.numel())
    throw ShapeError("cotangent length " + std::to_string(cotangent.size()) +
                     " does not match latent size " + std::to_string(latent.z.numel()));
  GradSet grads = latent.tape.backward_vjp(latent.z_node, Tensor(latent.z.shape(), cotangent));
  counter.enc_bwd += 1;
  return gather_flat(grads, latent.shared_leaves);
}

TaskHead stepped_head(const TaskHead& head, const Eigen::VectorXd& v, double eta) {
  if (v.size() != head.param_count())
    throw ShapeError("stepped_head: vector length does not match head parameter count");
  TaskHead out = head;
  axpy_chain(out.layers, v, -eta);
  return out;
}

void apply_step(MultiTaskModel& model, StepSpace space, const Eigen::VectorXd& vector, double eta) {
  switch (space.kind) {
    case StepSpace::Kind::Shared:
    case StepSpace::Kind::LatentShared: {
      if (vector.size() != model.shared_param_count())
        throw ShapeError("step vector length does not match shared parameter count");
      axpy_chain(model.encoder_, vector, -eta);
      model.shared_version_ += 1;
      break;
    }
    case StepSpace::Kind::Task: {
      if (space.task < 0 || space.task >= model.task_count())
        throw InputError("apply_step: task index out of range");
      auto& head = model.tasks_[static_cast<std::size_t>(space.task)];
      if (vector.size() != head.param_count())
        throw ShapeError("step vector length does not match task parameter count");
      axpy_chain(head.layers, vector, -eta);
      break;
    }
  }
}

}  // namespace mtlopt
