#pragma once

#include <cstdint>
#include <span>
#include <utility>
#include <vector>

#include "mtlopt/direction.hpp"
#include "mtlopt/tape.hpp"

namespace mtlopt {

enum class Activation { Identity, Relu, Tanh };
enum class LossKind { SoftmaxXent, Mse };

struct DenseLayer {
  Tensor weight;  // [in x out]
  Tensor bias;    // [out]
  Activation act = Activation::Identity;

  Index in_dim() const { return weight.dim(0); }
  Index out_dim() const { return weight.dim(1); }
  Index param_count() const { return weight.numel() + bias.numel(); }
};

// Task decoder plus its loss. An empty layer list means the head scores the
// latent directly. The realized loss is loss_scale * base loss; the base
// losses are batch means, so a scale of n*d/2 turns mse into half a squared
// norm (used by the analytic toy problems).
struct TaskHead {
  std::vector<DenseLayer> layers;
  LossKind loss = LossKind::Mse;
  double loss_scale = 1.0;

  Index param_count() const;
};

struct Batch {
  Tensor inputs;               // [n x d_in]
  std::vector<Tensor> labels;  // per task: [n] integer labels or [n x d_out] targets

  Index size() const { return inputs.dim(0); }
  void validate(Index task_count) const;
};

// Forward/backward pass counts, split by model side. The line-search cost
// claims are stated in these units.
struct PassCounter {
  std::int64_t enc_fwd = 0;
  std::int64_t enc_bwd = 0;
  std::int64_t dec_fwd = 0;
  std::int64_t dec_bwd = 0;

  PassCounter operator-(const PassCounter& o) const {
    return {enc_fwd - o.enc_fwd, enc_bwd - o.enc_bwd, dec_fwd - o.dec_fwd, dec_bwd - o.dec_bwd};
  }
  bool operator==(const PassCounter&) const = default;
};

// Per-task gradients in one space, with the losses they were taken at.
struct GradientBundle {
  GradSpace space = GradSpace::SharedParam;
  std::vector<Eigen::VectorXd> grads;
  std::vector<double> losses;
};

// Addressing for apply_step: the shared block, the shared block via a
// latent-space direction pulled back by the encoder VJP, or one task block.
struct StepSpace {
  enum class Kind { Shared, LatentShared, Task };
  Kind kind = Kind::Shared;
  int task = -1;

  static StepSpace shared() { return {Kind::Shared, -1}; }
  static StepSpace latent_shared() { return {Kind::LatentShared, -1}; }
  static StepSpace task_block(int t) { return {Kind::Task, t}; }
};

struct TaskSpec {
  std::vector<Index> hidden;  // decoder hidden widths
  Index out_dim = 1;
  LossKind loss = LossKind::Mse;
  double loss_scale = 1.0;
};

// Hard-parameter-sharing model: one encoder MLP feeding T task heads through
// an explicit latent boundary. Parameters flatten in fixed layer order
// (W0, b0, W1, b1, ...). A version counter tracks shared-parameter changes so
// latents recorded by encode() can detect staleness.
class MultiTaskModel {
 public:
  MultiTaskModel(std::vector<DenseLayer> encoder, std::vector<TaskHead> tasks);

  // MLP builder: encoder_widths runs hidden...latent (the last entry is the
  // latent dimension). Weights and biases start uniform in [-s, s] with
  // s = 1/sqrt(fan_in).
  static MultiTaskModel make_mlp(Index input_dim, const std::vector<Index>& encoder_widths,
                                 Activation act, const std::vector<TaskSpec>& tasks,
                                 std::uint64_t seed);

  Index input_dim() const { return encoder_.front().in_dim(); }
  Index latent_dim() const { return encoder_.back().out_dim(); }
  Index task_count() const { return static_cast<Index>(tasks_.size()); }
  Index shared_param_count() const;
  Index task_param_count(Index t) const { return tasks_[static_cast<std::size_t>(t)].param_count(); }

  const std::vector<DenseLayer>& encoder() const { return encoder_; }
  const std::vector<TaskHead>& tasks() const { return tasks_; }
  std::int64_t shared_version() const { return shared_version_; }

  Eigen::VectorXd shared_flat() const;
  Eigen::VectorXd task_flat(Index t) const;

  friend void apply_step(MultiTaskModel& model, StepSpace space, const Eigen::VectorXd& vector,
                         double eta);

 private:
  std::vector<DenseLayer> encoder_;
  std::vector<TaskHead> tasks_;
  std::int64_t shared_version_ = 0;
};

// Latent activations for one batch, with the encoder tape that produced them.
// version pins the shared parameters the tape corresponds to.
struct LatentBatch {
  Tensor z;  // [n x d_z]
  Tape tape;
  NodeId z_node = -1;
  NodeId input_leaf = -1;
  std::vector<NodeId> shared_leaves;
  std::int64_t version = -1;
};

// Encoder forward; records the tape for a later VJP. enc_fwd += 1.
LatentBatch encode(const MultiTaskModel& model, const Batch& batch, PassCounter& counter);

// Untaped, uncounted forwards for offline evaluation (test metrics).
Tensor forward_latent(const MultiTaskModel& model, const Tensor& inputs);
Tensor head_output(const MultiTaskModel& model, Index task, const Tensor& z);
double task_loss_value(const TaskHead& head, const Tensor& pred, const Tensor& labels);

// Decoder-only loss evaluation at an explicit latent. dec_fwd += T.
std::vector<double> task_losses_from_latent(const MultiTaskModel& model, const Tensor& z,
                                            const Batch& batch, PassCounter& counter);

// Same, over bare heads (line-search trials evaluate candidate task
// parameters without copying the encoder). dec_fwd += T.
std::vector<double> decoder_losses(std::span<const TaskHead> heads, const Tensor& z,
                                   const Batch& batch, PassCounter& counter);

// Full forward through encoder and decoders. enc_fwd += 1, dec_fwd += T.
std::vector<double> task_losses(const MultiTaskModel& model, const Batch& batch,
                                PassCounter& counter);

// Per-task latent and task-parameter gradients at a recorded latent.
// dec_bwd += T; the encoder is untouched. Throws StaleLatentError if the
// shared parameters changed since encode().
std::pair<GradientBundle, GradientBundle> latent_grads(const MultiTaskModel& model,
                                                       const LatentBatch& latent,
                                                       const Batch& batch, PassCounter& counter);

struct FullGrads {
  GradientBundle shared;  // space SharedParam
  GradientBundle task;    // space TaskParam
};

// Per-task gradients w.r.t. the shared block (and task blocks, from the same
// sweeps). enc_fwd += 1, enc_bwd += T.
FullGrads shared_and_task_grads(const MultiTaskModel& model, const Batch& batch,
                                PassCounter& counter);

// The shared bundle alone, when the task blocks are not needed.
GradientBundle shared_grads(const MultiTaskModel& model, const Batch& batch, PassCounter& counter);

struct ScalarizedGrads {
  Eigen::VectorXd shared;
  std::vector<Eigen::VectorXd> task;
  std::vector<double> losses;
};

// Gradient of the uniform mean of the task losses, one backward sweep.
// enc_fwd += 1, enc_bwd += 1.
ScalarizedGrads uniform_mean_grads(const MultiTaskModel& model, const Batch& batch,
                                   PassCounter& counter);

// (dz/dtheta_sh)^T cotangent via one backward sweep of the encoder tape.
// enc_bwd += 1. The cotangent is flat of length n*d_z.
Eigen::VectorXd encoder_vjp(const MultiTaskModel& model, const LatentBatch& latent,
                            const Eigen::VectorXd& cotangent, PassCounter& counter);

// theta -= eta * vector on the addressed block. Shared-space updates bump the
// model's shared version.
void apply_step(MultiTaskModel& model, StepSpace space, const Eigen::VectorXd& vector, double eta);

// Copy of a head with parameters shifted by -eta * v (line-search trials).
TaskHead stepped_head(const TaskHead& head, const Eigen::VectorXd& v, double eta);

}  // namespace mtlopt
