#include <CLI11.hpp>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "mtlopt/harness.hpp"

namespace mtlopt {

namespace {

std::vector<Eigen::VectorXd> read_vectors_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path);
  std::vector<Eigen::VectorXd> rows;
  std::string line;
  while (std::getline(in, line)) {
    if (line.find_first_not_of(" \t\r\n") == std::string::npos) continue;
    std::vector<double> values;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) {
      try {
        values.push_back(std::stod(cell));
      } catch (const std::exception&) {
        throw FormatError(path + ": cannot parse '" + cell + "' as a number");
      }
    }
    Eigen::VectorXd v(static_cast<Eigen::Index>(values.size()));
    for (std::size_t i = 0; i < values.size(); ++i) v[static_cast<Eigen::Index>(i)] = values[i];
    rows.push_back(std::move(v));
  }
  if (rows.empty()) throw InputError(path + ": no vectors found");
  return rows;
}

void print_final_metrics(const MetricsLog& log) {
  if (log.records.empty()) return;
  const auto& last = log.records.back();
  std::printf("final train loss:");
  for (double v : last.train_loss) std::printf(" %.6g", v);
  std::printf("\nfinal test loss: ");
  for (double v : last.test_loss) std::printf(" %.6g", v);
  std::printf("\nfinal test error:");
  for (double v : last.test_error) std::printf(" %.6g", v);
  std::printf("\nmean epoch time: %.3f ms\n", log.mean_epoch_wall_ms());
}

}  // namespace

int run_cli(const std::vector<std::string>& args) {
  CLI::App app{"mtlopt: multi-task optimization with fast latent-space backtracking"};
  app.require_subcommand(1);

  std::string train_config, train_out;
  auto* train_cmd = app.add_subcommand("train", "run one training configuration");
  train_cmd->add_option("--config", train_config, "config file")->required();
  train_cmd->add_option("--out", train_out, "output directory for metrics.csv");

  std::string cmp_config, cmp_out;
  auto* compare_cmd = app.add_subcommand("compare", "run a strategy / learning-rate grid");
  compare_cmd->add_option("--config", cmp_config, "config file")->required();
  compare_cmd->add_option("--out", cmp_out, "output directory")->required();

  std::string vectors_path;
  auto* minnorm_cmd = app.add_subcommand("minnorm", "min-norm point of the rows of a CSV file");
  minnorm_cmd->add_option("--vectors", vectors_path, "CSV file, one gradient per row")->required();

  std::uint64_t check_seed = 20240915;
  int check_models = 10;
  auto* check_cmd = app.add_subcommand("check-grad", "finite-difference gradient audit");
  check_cmd->add_option("--seed", check_seed, "rng seed");
  check_cmd->add_option("--models", check_models, "number of random models");

  auto* make_cmd = app.add_subcommand("make-data", "materialize datasets");
  make_cmd->require_subcommand(1);

  std::string dig_out;
  std::uint64_t dig_seed = 7;
  Index dig_train = 2048, dig_test = 512, dig_classes = 10;
  auto* digits_cmd = make_cmd->add_subcommand("digits", "synthetic digit corpus as IDX files");
  digits_cmd->add_option("--out", dig_out, "output directory")->required();
  digits_cmd->add_option("--seed", dig_seed, "rng seed");
  digits_cmd->add_option("--n-train", dig_train, "train corpus size");
  digits_cmd->add_option("--n-test", dig_test, "test corpus size");
  digits_cmd->add_option("--classes", dig_classes, "number of classes");

  std::string mm_src, mm_out;
  std::uint64_t mm_seed = 7;
  Index mm_train = 4096, mm_test = 1024, mm_shift = 4;
  auto* mm_cmd = make_cmd->add_subcommand("multimnist", "two-digit overlay dataset from IDX sources");
  mm_cmd->add_option("--src", mm_src, "directory holding {train,test}-{images,labels}.idx")->required();
  mm_cmd->add_option("--out", mm_out, "output directory")->required();
  mm_cmd->add_option("--seed", mm_seed, "overlay rng seed");
  mm_cmd->add_option("--n-train", mm_train, "output train samples");
  mm_cmd->add_option("--n-test", mm_test, "output test samples");
  mm_cmd->add_option("--shift", mm_shift, "second-digit offset in pixels");

  std::string sy_out;
  std::uint64_t sy_seed = 7;
  Index sy_din = 16, sy_dz = 4, sy_tasks = 2, sy_train = 4096, sy_test = 1024;
  double sy_noise = 0.05;
  auto* synth_cmd = make_cmd->add_subcommand("synth", "seeded regression tasks as CSV");
  synth_cmd->add_option("--out", sy_out, "output directory")->required();
  synth_cmd->add_option("--seed", sy_seed, "rng seed");
  synth_cmd->add_option("--d-in", sy_din, "input dimension");
  synth_cmd->add_option("--d-z", sy_dz, "hidden map dimension");
  synth_cmd->add_option("--tasks", sy_tasks, "task count");
  synth_cmd->add_option("--n-train", sy_train, "train samples");
  synth_cmd->add_option("--n-test", sy_test, "test samples");
  synth_cmd->add_option("--noise", sy_noise, "target noise standard deviation");

  std::vector<const char*> argv;
  argv.push_back("mtlopt");
  for (const auto& a : args) argv.push_back(a.c_str());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    std::fprintf(stderr, "%s", app.help().c_str());
    return 1;
  }

  try {
    if (app.got_subcommand(train_cmd)) {
      TrainConfig cfg = load_config(train_config);
      if (!train_out.empty()) cfg.out = train_out;
      MetricsLog log = train(cfg);
      if (!cfg.out.empty()) std::printf("metrics: %s/metrics.csv\n", cfg.out.c_str());
      print_final_metrics(log);
      return 0;
    }
    if (app.got_subcommand(compare_cmd)) {
      TrainConfig cfg = load_config(cmp_config);
      CompareSummary summary = compare(cfg, cmp_out);
      std::printf("%s", summary_to_csv(summary).c_str());
      std::printf("summary: %s/summary.csv\n", cmp_out.c_str());
      return 0;
    }
    if (app.got_subcommand(minnorm_cmd)) {
      auto rows = read_vectors_csv(vectors_path);
      Direction d = min_norm_fw(rows);
      std::printf("alpha =");
      for (Eigen::Index i = 0; i < d.weights.alpha.size(); ++i)
        std::printf("%s %.17g", i ? "," : "", d.weights.alpha[i]);
      std::printf("\nnorm = %.17g\n", d.vector.norm());
      return 0;
    }
    if (app.got_subcommand(check_cmd)) {
      double err = gradient_check(check_seed, check_models);
      std::printf("max relative error = %.3g\n", err);
      if (err > 1e-5) {
        std::fprintf(stderr, "gradient check failed (threshold 1e-5)\n");
        return 2;
      }
      return 0;
    }
    if (app.got_subcommand(make_cmd)) {
      if (make_cmd->got_subcommand(digits_cmd)) {
        std::filesystem::create_directories(dig_out);
        Rng src(dig_seed);
        DigitCorpus corpus = synth_digit_corpus(dig_train, dig_test, dig_classes, src);
        write_idx(dig_out + "/train-images.idx", corpus.train_images);
        write_idx(dig_out + "/train-labels.idx", corpus.train_labels);
        write_idx(dig_out + "/test-images.idx", corpus.test_images);
        write_idx(dig_out + "/test-labels.idx", corpus.test_labels);
        std::printf("wrote digit corpus to %s\n", dig_out.c_str());
        return 0;
      }
      if (make_cmd->got_subcommand(mm_cmd)) {
        std::filesystem::create_directories(mm_out);
        Tensor train_imgs = read_idx(mm_src + "/train-images.idx");
        Tensor train_labs = read_idx(mm_src + "/train-labels.idx");
        Tensor test_imgs = read_idx(mm_src + "/test-images.idx");
        Tensor test_labs = read_idx(mm_src + "/test-labels.idx");
        Rng overlay(mm_seed ^ 0x4D4DULL);
        Rng ov_train = overlay.split(1);
        Rng ov_test = overlay.split(2);
        Dataset train_data = make_multimnist(train_imgs, train_labs, ov_train, mm_train, mm_shift);
        Dataset test_data = make_multimnist(test_imgs, test_labs, ov_test, mm_test, mm_shift);
        const Index canvas = static_cast<Index>(std::lround(std::sqrt(double(train_data.inputs.dim(1)))));
        write_idx(mm_out + "/train-images.idx",
                  train_data.inputs.reshaped({train_data.size(), canvas, canvas}));
        write_idx(mm_out + "/train-labels-t0.idx", train_data.labels[0]);
        write_idx(mm_out + "/train-labels-t1.idx", train_data.labels[1]);
        write_idx(mm_out + "/test-images.idx",
                  test_data.inputs.reshaped({test_data.size(), canvas, canvas}));
        write_idx(mm_out + "/test-labels-t0.idx", test_data.labels[0]);
        write_idx(mm_out + "/test-labels-t1.idx", test_data.labels[1]);
        std::printf("wrote multimnist dataset to %s\n", mm_out.c_str());
        return 0;
      }
      if (make_cmd->got_subcommand(synth_cmd)) {
        std::filesystem::create_directories(sy_out);
        SynthData sd = synth_tasks(sy_din, sy_dz, sy_tasks, sy_train, sy_test, sy_noise, sy_seed);
        write_dataset_csv(sy_out + "/synth_train.csv", sd.train);
        write_dataset_csv(sy_out + "/synth_test.csv", sd.test);
        std::printf("wrote synth dataset to %s\n", sy_out.c_str());
        return 0;
      }
    }
  } catch (const NumericError& e) {
    std::fprintf(stderr, "numeric failure: %s\n", e.what());
    return 2;
  } catch (const Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 1;
}

}  // namespace mtlopt
