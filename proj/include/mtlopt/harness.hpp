#pragma once

#include <string>
#include <vector>

#include "mtlopt/data.hpp"
#include "mtlopt/linesearch.hpp"

namespace mtlopt {

enum class Strategy { Sgd, SgdMgda, MgdaUb, Bls, Fbls, FblsDecay };

const char* strategy_name(Strategy s);
Strategy strategy_from_name(const std::string& name);
bool strategy_uses_constant_lr(Strategy s);

enum class DatasetKind { Quadratic, Synth, MultiMnist };

struct DataConfig {
  DatasetKind kind = DatasetKind::Synth;
  // multimnist
  std::string train_images, train_labels, test_images, test_labels;  // empty => synthetic source
  std::uint64_t source_seed = 0;
  Index shift = 4;
  // shared sizes
  Index n_train = 4096;
  Index n_test = 1024;
  // synth
  Index d_in = 16;
  Index d_z_true = 4;
  Index tasks = 2;
  double noise_sd = 0.05;
  // quadratic
  std::vector<Eigen::VectorXd> centers;
  double theta0 = 5.0;
};

struct TrainConfig {
  DataConfig data;
  std::vector<Index> encoder_widths;  // hidden...latent
  Activation activation = Activation::Relu;
  std::vector<Index> decoder_hidden;
  Strategy strategy = Strategy::Fbls;
  double lr = 0.0;
  bool lr_set = false;
  LineSearchConfig ls;
  Index batch_size = 256;
  int epochs = 20;
  std::uint64_t seed = 42;
  std::string out;
  // compare grid
  std::vector<Strategy> compare_strategies;
  std::vector<double> compare_lrs;
};

// key = value lines with # comments under [data] / [model] / [optimizer]
// sections (plus [compare] for the grid). Unknown keys and missing required
// fields raise ConfigError naming the offender.
TrainConfig parse_config(const std::string& text);
TrainConfig load_config(const std::string& path);
std::string serialize_config(const TrainConfig& cfg);

// The 8-point learning-rate grid, log-even over [1e-3, 1e-1].
std::vector<double> default_lr_grid();

struct StepRecord {
  int epoch = 0;
  int step = 0;  // global step index
  Strategy strategy = Strategy::Fbls;
  double eta = 0.0;
  int trials = 0;
  bool floor_hit = false;
  std::vector<double> train_loss;  // per task, at the step's batch before the update
  std::vector<double> test_loss;   // per task, end-of-epoch evaluation
  std::vector<double> test_error;
  PassCounter passes;  // this step's deltas
  double wall_ms = 0.0;
};

struct MetricsLog {
  std::vector<StepRecord> records;
  Index task_count = 0;
  int epochs = 0;

  // Mean per-epoch wall time; epoch 0 is treated as warm-up and excluded
  // when more than one epoch ran.
  double mean_epoch_wall_ms() const;
};

MetricsLog train(const TrainConfig& cfg);

// CSV with one row per (step, task); floats carry 17 significant digits.
void write_metrics(const MetricsLog& log, const std::string& path);
std::string metrics_to_csv(const MetricsLog& log);

struct CompareCell {
  Strategy strategy = Strategy::Sgd;
  double lr = 0.0;  // 0 when the strategy searches its own step
  MetricsLog log;
};

struct CompareSummary {
  std::vector<CompareCell> cells;
};

// Runs every grid cell under the shared seed (cells may run on parallel
// workers, capped by MTLOPT_THREADS) and writes summary.csv plus one metrics
// file per cell under out_dir.
CompareSummary compare(const TrainConfig& cfg, const std::string& out_dir);
std::string summary_to_csv(const CompareSummary& summary);

// Test-set metrics for the current model: per-task loss and error
// (1 - accuracy for classification, the loss itself for regression).
struct EvalResult {
  std::vector<double> loss;
  std::vector<double> error;
};
EvalResult evaluate(const MultiTaskModel& model, const Dataset& data);

// Dataset and model construction used by train(); exposed for tests.
struct Problem {
  Dataset train_data;
  Dataset test_data;
  MultiTaskModel model;
};
Problem build_problem(const TrainConfig& cfg);

// Finite-difference audit over random encoder-decoder models (the check-grad
// subcommand). Returns the worst relative gradient error observed.
double gradient_check(std::uint64_t seed, int model_count);

// CLI entry point (subcommands train / compare / minnorm / check-grad /
// make-data). Returns 0 on success, 1 on validation errors, 2 on numeric
// failure.
int run_cli(const std::vector<std::string>& args);

}  // namespace mtlopt
