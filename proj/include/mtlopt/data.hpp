#pragma once

#include <string>
#include <vector>

#include "mtlopt/model.hpp"

namespace mtlopt {

enum class Split { Train, Test };

// A fixed multi-task dataset. class_counts[t] > 0 marks task t as
// classification with that many classes; 0 marks regression.
struct Dataset {
  Tensor inputs;               // [N x d_in]
  std::vector<Tensor> labels;  // per task: [N] integer labels or [N x d_out] targets
  Split split = Split::Train;
  std::vector<Index> class_counts;

  Index size() const { return inputs.dim(0); }
  Index task_count() const { return static_cast<Index>(labels.size()); }
  Batch batch_rows(std::span<const Index> rows) const;
  Batch full_batch() const;
};

// IDX files, big-endian. Images (magic 0x00000803) load as [N x rows x cols]
// with bytes scaled to [0,1]; labels (magic 0x00000801) load as [N].
Tensor read_idx(const std::string& path);

// Inverse of read_idx: rank-3 tensors write as image files (values rounded
// back to bytes via v*255), rank-1 integer tensors as label files.
void write_idx(const std::string& path, const Tensor& tensor);

// MultiMNIST overlay: each output sample lays one source digit at the top
// left and a second, distinct-label digit offset by shift_px toward the
// bottom right of a (rows+shift_px)^2 canvas, combined pixel-wise by max.
// Task 1 is the first digit's class, task 2 the second's. Inputs come out
// flattened to [n_out x canvas^2].
Dataset make_multimnist(const Tensor& images, const Tensor& labels, Rng& rng, Index n_out,
                        Index shift_px);

// Synthetic digit corpus, an IDX-shaped stand-in for the real files at desk
// scale: one fixed prototype per class plus per-sample noise, with both
// splits drawn around the same prototypes.
struct DigitCorpus {
  Tensor train_images;  // [n_train x 28 x 28]
  Tensor train_labels;  // [n_train]
  Tensor test_images;
  Tensor test_labels;
};
DigitCorpus synth_digit_corpus(Index n_train, Index n_test, Index classes, Rng& rng);

struct SynthData {
  Dataset train;
  Dataset test;
  Eigen::MatrixXd shared_map;               // [d_in x d_z_true]
  std::vector<Eigen::VectorXd> task_heads;  // T of length d_z_true
};

// Seeded regression generator: inputs ~ N(0,1), targets
// y_t = tanh(x M) . h_t + noise_sd * N(0,1).
SynthData synth_tasks(Index d_in, Index d_z_true, Index t_count, Index n_train, Index n_test,
                      double noise_sd, std::uint64_t seed);

// T quadratic objectives with known Pareto set (the convex hull of the
// centers): L_t(theta) = 0.5 |theta - a_t|^2.
struct ToyProblem {
  std::vector<Eigen::VectorXd> centers;

  Index dim() const { return centers.front().size(); }
  Index task_count() const { return static_cast<Index>(centers.size()); }
  std::vector<double> losses(const Eigen::VectorXd& theta) const;
  std::vector<Eigen::VectorXd> grads(const Eigen::VectorXd& theta) const;
  double hull_distance(const Eigen::VectorXd& theta) const;
};

ToyProblem quadratic_problem(std::vector<Eigen::VectorXd> centers);

// The toy expressed as a model: a zero-weight single encoder layer whose bias
// IS the point (so the latent equals theta), parameterless decoders, and mse
// scaled to land exactly on 0.5 |theta - a_t|^2.
struct QuadraticSetup {
  MultiTaskModel model;
  Batch batch;
};

QuadraticSetup quadratic_model(const ToyProblem& problem, const Eigen::VectorXd& theta0);

// Current point of a quadratic_model (the encoder bias).
Eigen::VectorXd quadratic_point(const MultiTaskModel& model);

// CSV persistence for synthetic datasets: header row, one sample per row,
// label columns suffixed _t<k>.
void write_dataset_csv(const std::string& path, const Dataset& data);

}  // namespace mtlopt
