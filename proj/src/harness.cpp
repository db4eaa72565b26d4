#include "mtlopt/harness.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <sstream>
#include <thread>

namespace mtlopt {

namespace {

std::string fmt17(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

std::string fmt_short(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%g", v);
  return buf;
}

std::string trim(const std::string& s) {
  std::size_t a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  std::size_t b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    std::size_t pos = s.find(sep, start);
    if (pos == std::string::npos) {
      out.push_back(trim(s.substr(start)));
      break;
    }
    out.push_back(trim(s.substr(start, pos - start)));
    start = pos + 1;
  }
  return out;
}

double parse_double(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    double d = std::stod(v, &used);
    if (used != v.size()) throw std::invalid_argument("");
    return d;
  } catch (const std::exception&) {
    throw ConfigError("key '" + key + "': cannot parse '" + v + "' as a number");
  }
}

long long parse_int(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    long long n = std::stoll(v, &used);
    if (used != v.size()) throw std::invalid_argument("");
    return n;
  } catch (const std::exception&) {
    throw ConfigError("key '" + key + "': cannot parse '" + v + "' as an integer");
  }
}

std::vector<Index> parse_index_list(const std::string& key, const std::string& v) {
  std::vector<Index> out;
  if (trim(v).empty()) return out;
  for (const auto& part : split(v, ',')) out.push_back(parse_int(key, part));
  return out;
}

const char* activation_name(Activation a) {
  switch (a) {
    case Activation::Identity: return "identity";
    case Activation::Relu: return "relu";
    case Activation::Tanh: return "tanh";
  }
  return "?";
}

Activation activation_from_name(const std::string& s) {
  if (s == "identity") return Activation::Identity;
  if (s == "relu") return Activation::Relu;
  if (s == "tanh") return Activation::Tanh;
  throw ConfigError("unknown activation '" + s + "'");
}

const char* variant_name(ArmijoVariant v) {
  switch (v) {
    case ArmijoVariant::Both: return "both";
    case ArmijoVariant::TaskNormOnly: return "tasknorm-only";
    case ArmijoVariant::DirectionOnly: return "direction-only";
    case ArmijoVariant::ClassicalBoth: return "classical-both";
  }
  return "?";
}

ArmijoVariant variant_from_name(const std::string& s) {
  if (s == "both") return ArmijoVariant::Both;
  if (s == "tasknorm-only") return ArmijoVariant::TaskNormOnly;
  if (s == "direction-only") return ArmijoVariant::DirectionOnly;
  if (s == "classical-both") return ArmijoVariant::ClassicalBoth;
  throw ConfigError("unknown variant '" + s + "'");
}

const char* dataset_name(DatasetKind k) {
  switch (k) {
    case DatasetKind::Quadratic: return "quadratic";
    case DatasetKind::Synth: return "synth";
    case DatasetKind::MultiMnist: return "multimnist";
  }
  return "?";
}

std::vector<Eigen::VectorXd> parse_centers(const std::string& v) {
  std::vector<Eigen::VectorXd> centers;
  for (const auto& row : split(v, ';')) {
    auto parts = split(row, ',');
    Eigen::VectorXd c(static_cast<Index>(parts.size()));
    for (std::size_t i = 0; i < parts.size(); ++i) c[static_cast<Index>(i)] = parse_double("centers", parts[i]);
    centers.push_back(std::move(c));
  }
  return centers;
}

std::string centers_to_string(const std::vector<Eigen::VectorXd>& centers) {
  std::string out;
  for (std::size_t r = 0; r < centers.size(); ++r) {
    if (r) out += " ; ";
    for (Index i = 0; i < centers[r].size(); ++i) {
      if (i) out += ", ";
      out += fmt17(centers[r][i]);
    }
  }
  return out;
}

}  // namespace

const char* strategy_name(Strategy s) {
  switch (s) {
    case Strategy::Sgd: return "sgd";
    case Strategy::SgdMgda: return "sgd-mgda";
    case Strategy::MgdaUb: return "mgda-ub";
    case Strategy::Bls: return "bls";
    case Strategy::Fbls: return "fbls";
    case Strategy::FblsDecay: return "fbls-decay";
  }
  return "?";
}

Strategy strategy_from_name(const std::string& name) {
  if (name == "sgd") return Strategy::Sgd;
  if (name == "sgd-mgda") return Strategy::SgdMgda;
  if (name == "mgda-ub") return Strategy::MgdaUb;
  if (name == "bls") return Strategy::Bls;
  if (name == "fbls") return Strategy::Fbls;
  if (name == "fbls-decay") return Strategy::FblsDecay;
  throw ConfigError("unknown optimizer '" + name + "'");
}

bool strategy_uses_constant_lr(Strategy s) {
  return s == Strategy::Sgd || s == Strategy::SgdMgda || s == Strategy::MgdaUb;
}

std::vector<double> default_lr_grid() {
  std::vector<double> out;
  for (int i = 0; i < 8; ++i) out.push_back(std::pow(10.0, -3.0 + 2.0 * i / 7.0));
  return out;
}

TrainConfig parse_config(const std::string& text) {
  TrainConfig cfg;
  bool dataset_set = false, optimizer_set = false, variant_set = false;
  bool model_section_used = false;
  bool encoder_set = false;

  std::string section;
  std::istringstream in(text);
  std::string raw;
  while (std::getline(in, raw)) {
    std::string line = raw;
    std::size_t hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']') throw ConfigError("malformed section header: " + line);
      section = trim(line.substr(1, line.size() - 2));
      if (section != "data" && section != "model" && section != "optimizer" && section != "compare")
        throw ConfigError("unknown section [" + section + "]");
      continue;
    }
    std::size_t eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("expected 'key = value': " + line);
    std::string key = trim(line.substr(0, eq));
    std::string value = trim(line.substr(eq + 1));
    if (section.empty()) throw ConfigError("key '" + key + "' appears before any section");

    if (section == "data") {
      if (key == "dataset") {
        if (value == "quadratic") cfg.data.kind = DatasetKind::Quadratic;
        else if (value == "synth") cfg.data.kind = DatasetKind::Synth;
        else if (value == "multimnist") cfg.data.kind = DatasetKind::MultiMnist;
        else throw ConfigError("unknown dataset '" + value + "'");
        dataset_set = true;
      } else if (key == "train_images") cfg.data.train_images = value;
      else if (key == "train_labels") cfg.data.train_labels = value;
      else if (key == "test_images") cfg.data.test_images = value;
      else if (key == "test_labels") cfg.data.test_labels = value;
      else if (key == "source_seed") cfg.data.source_seed = static_cast<std::uint64_t>(parse_int(key, value));
      else if (key == "shift") cfg.data.shift = parse_int(key, value);
      else if (key == "n_train") cfg.data.n_train = parse_int(key, value);
      else if (key == "n_test") cfg.data.n_test = parse_int(key, value);
      else if (key == "d_in") cfg.data.d_in = parse_int(key, value);
      else if (key == "d_z_true") cfg.data.d_z_true = parse_int(key, value);
      else if (key == "tasks") cfg.data.tasks = parse_int(key, value);
      else if (key == "noise_sd") cfg.data.noise_sd = parse_double(key, value);
      else if (key == "centers") cfg.data.centers = parse_centers(value);
      else if (key == "theta0") cfg.data.theta0 = parse_double(key, value);
      else throw ConfigError("unknown key '" + key + "' in [data]");
    } else if (section == "model") {
      model_section_used = true;
      if (key == "encoder") {
        cfg.encoder_widths = parse_index_list(key, value);
        encoder_set = true;
      } else if (key == "activation") cfg.activation = activation_from_name(value);
      else if (key == "decoder") cfg.decoder_hidden = parse_index_list(key, value);
      else throw ConfigError("unknown key '" + key + "' in [model]");
    } else if (section == "optimizer") {
      if (key == "optimizer") {
        cfg.strategy = strategy_from_name(value);
        optimizer_set = true;
      } else if (key == "lr") {
        cfg.lr = parse_double(key, value);
        cfg.lr_set = true;
      } else if (key == "beta") cfg.ls.beta = parse_double(key, value);
      else if (key == "gamma") cfg.ls.gamma = parse_double(key, value);
      else if (key == "lr_ub") cfg.ls.lr_ub = parse_double(key, value);
      else if (key == "eps_floor") cfg.ls.eps_floor = parse_double(key, value);
      else if (key == "variant") {
        cfg.ls.variant = variant_from_name(value);
        variant_set = true;
      } else if (key == "decay_rate") {
        if (!cfg.ls.decay) cfg.ls.decay = DecaySchedule{};
        cfg.ls.decay->rate = parse_double(key, value);
      } else if (key == "decay_period") {
        if (!cfg.ls.decay) cfg.ls.decay = DecaySchedule{};
        cfg.ls.decay->period = static_cast<int>(parse_int(key, value));
      } else if (key == "batch_size") cfg.batch_size = parse_int(key, value);
      else if (key == "epochs") cfg.epochs = static_cast<int>(parse_int(key, value));
      else if (key == "seed") cfg.seed = static_cast<std::uint64_t>(parse_int(key, value));
      else if (key == "out") cfg.out = value;
      else throw ConfigError("unknown key '" + key + "' in [optimizer]");
    } else {  // compare
      if (key == "strategies") {
        cfg.compare_strategies.clear();
        for (const auto& part : split(value, ',')) cfg.compare_strategies.push_back(strategy_from_name(part));
      } else if (key == "lrs") {
        cfg.compare_lrs.clear();
        for (const auto& part : split(value, ',')) cfg.compare_lrs.push_back(parse_double(key, part));
      } else {
        throw ConfigError("unknown key '" + key + "' in [compare]");
      }
    }
  }

  if (!dataset_set) throw ConfigError("missing required key 'dataset' in [data]");
  if (!optimizer_set) throw ConfigError("missing required key 'optimizer' in [optimizer]");
  if (strategy_uses_constant_lr(cfg.strategy) && !cfg.lr_set)
    throw ConfigError("optimizer '" + std::string(strategy_name(cfg.strategy)) + "' requires 'lr'");
  if (cfg.lr_set && !(cfg.lr > 0)) throw ConfigError("lr must be positive");
  if (cfg.batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (cfg.epochs < 1) throw ConfigError("epochs must be >= 1");

  if (cfg.data.kind == DatasetKind::Quadratic) {
    if (model_section_used)
      throw ConfigError("[model] keys are not accepted for the quadratic dataset (the model is fixed)");
    if (cfg.data.centers.empty()) {
      cfg.data.centers.push_back(Eigen::VectorXd::Constant(1, 1.0));
      cfg.data.centers.push_back(Eigen::VectorXd::Constant(1, -1.0));
    }
  } else if (!encoder_set) {
    cfg.encoder_widths =
        cfg.data.kind == DatasetKind::MultiMnist ? std::vector<Index>{256, 64} : std::vector<Index>{32, 8};
  }
  if (cfg.data.kind != DatasetKind::Quadratic && cfg.encoder_widths.empty())
    throw ConfigError("encoder needs at least one width (the latent dimension)");

  if (cfg.strategy == Strategy::FblsDecay && !cfg.ls.decay) cfg.ls.decay = DecaySchedule{0.5, 10};

  if ((cfg.strategy == Strategy::Fbls || cfg.strategy == Strategy::FblsDecay) &&
      cfg.ls.variant == ArmijoVariant::ClassicalBoth)
    throw ConfigError("fbls needs a latent-space variant (both, tasknorm-only or direction-only)");
  if (cfg.strategy == Strategy::Bls) {
    if (variant_set && cfg.ls.variant != ArmijoVariant::ClassicalBoth)
      throw ConfigError("bls supports only the classical-both variant");
    cfg.ls.variant = ArmijoVariant::ClassicalBoth;
  }

  cfg.ls.validate();

  const bool paths_given = !cfg.data.train_images.empty() || !cfg.data.train_labels.empty() ||
                           !cfg.data.test_images.empty() || !cfg.data.test_labels.empty();
  if (paths_given && (cfg.data.train_images.empty() || cfg.data.train_labels.empty() ||
                      cfg.data.test_images.empty() || cfg.data.test_labels.empty()))
    throw ConfigError("multimnist file input needs all four of train/test images/labels paths");

  return cfg;
}

TrainConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config file " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

std::string serialize_config(const TrainConfig& cfg) {
  std::ostringstream out;
  out << "[data]\n";
  out << "dataset = " << dataset_name(cfg.data.kind) << "\n";
  switch (cfg.data.kind) {
    case DatasetKind::Quadratic:
      out << "centers = " << centers_to_string(cfg.data.centers) << "\n";
      out << "theta0 = " << fmt17(cfg.data.theta0) << "\n";
      break;
    case DatasetKind::Synth:
      out << "d_in = " << cfg.data.d_in << "\n";
      out << "d_z_true = " << cfg.data.d_z_true << "\n";
      out << "tasks = " << cfg.data.tasks << "\n";
      out << "noise_sd = " << fmt17(cfg.data.noise_sd) << "\n";
      out << "n_train = " << cfg.data.n_train << "\n";
      out << "n_test = " << cfg.data.n_test << "\n";
      break;
    case DatasetKind::MultiMnist:
      if (!cfg.data.train_images.empty()) {
        out << "train_images = " << cfg.data.train_images << "\n";
        out << "train_labels = " << cfg.data.train_labels << "\n";
        out << "test_images = " << cfg.data.test_images << "\n";
        out << "test_labels = " << cfg.data.test_labels << "\n";
      }
      out << "source_seed = " << cfg.data.source_seed << "\n";
      out << "shift = " << cfg.data.shift << "\n";
      out << "n_train = " << cfg.data.n_train << "\n";
      out << "n_test = " << cfg.data.n_test << "\n";
      break;
  }
  if (cfg.data.kind != DatasetKind::Quadratic) {
    out << "\n[model]\n";
    out << "encoder = ";
    for (std::size_t i = 0; i < cfg.encoder_widths.size(); ++i)
      out << (i ? ", " : "") << cfg.encoder_widths[i];
    out << "\n";
    out << "activation = " << activation_name(cfg.activation) << "\n";
    out << "decoder = ";
    for (std::size_t i = 0; i < cfg.decoder_hidden.size(); ++i)
      out << (i ? ", " : "") << cfg.decoder_hidden[i];
    out << "\n";
  }
  out << "\n[optimizer]\n";
  out << "optimizer = " << strategy_name(cfg.strategy) << "\n";
  if (cfg.lr_set) out << "lr = " << fmt17(cfg.lr) << "\n";
  out << "beta = " << fmt17(cfg.ls.beta) << "\n";
  out << "gamma = " << fmt17(cfg.ls.gamma) << "\n";
  out << "lr_ub = " << fmt17(cfg.ls.lr_ub) << "\n";
  out << "eps_floor = " << fmt17(cfg.ls.eps_floor) << "\n";
  out << "variant = " << variant_name(cfg.ls.variant) << "\n";
  if (cfg.ls.decay) {
    out << "decay_rate = " << fmt17(cfg.ls.decay->rate) << "\n";
    out << "decay_period = " << cfg.ls.decay->period << "\n";
  }
  out << "batch_size = " << cfg.batch_size << "\n";
  out << "epochs = " << cfg.epochs << "\n";
  out << "seed = " << cfg.seed << "\n";
  if (!cfg.out.empty()) out << "out = " << cfg.out << "\n";
  if (!cfg.compare_strategies.empty() || !cfg.compare_lrs.empty()) {
    out << "\n[compare]\n";
    if (!cfg.compare_strategies.empty()) {
      out << "strategies = ";
      for (std::size_t i = 0; i < cfg.compare_strategies.size(); ++i)
        out << (i ? ", " : "") << strategy_name(cfg.compare_strategies[i]);
      out << "\n";
    }
    if (!cfg.compare_lrs.empty()) {
      out << "lrs = ";
      for (std::size_t i = 0; i < cfg.compare_lrs.size(); ++i)
        out << (i ? ", " : "") << fmt17(cfg.compare_lrs[i]);
      out << "\n";
    }
  }
  return out.str();
}

Problem build_problem(const TrainConfig& cfg) {
  switch (cfg.data.kind) {
    case DatasetKind::Quadratic: {
      ToyProblem toy = quadratic_problem(cfg.data.centers);
      Eigen::VectorXd theta0 = Eigen::VectorXd::Constant(toy.dim(), cfg.data.theta0);
      QuadraticSetup setup = quadratic_model(toy, theta0);
      Dataset data;
      data.inputs = setup.batch.inputs;
      data.labels = setup.batch.labels;
      data.class_counts.assign(static_cast<std::size_t>(toy.task_count()), 0);
      Dataset test = data;
      test.split = Split::Test;
      return Problem{std::move(data), std::move(test), std::move(setup.model)};
    }
    case DatasetKind::Synth: {
      SynthData sd = synth_tasks(cfg.data.d_in, cfg.data.d_z_true, cfg.data.tasks, cfg.data.n_train,
                                 cfg.data.n_test, cfg.data.noise_sd, cfg.data.source_seed);
      std::vector<TaskSpec> specs(static_cast<std::size_t>(cfg.data.tasks));
      for (auto& s : specs) {
        s.hidden = cfg.decoder_hidden;
        s.out_dim = 1;
        s.loss = LossKind::Mse;
      }
      MultiTaskModel model =
          MultiTaskModel::make_mlp(cfg.data.d_in, cfg.encoder_widths, cfg.activation, specs, cfg.seed);
      return Problem{std::move(sd.train), std::move(sd.test), std::move(model)};
    }
    case DatasetKind::MultiMnist: {
      Tensor train_imgs, train_labs, test_imgs, test_labs;
      if (!cfg.data.train_images.empty()) {
        train_imgs = read_idx(cfg.data.train_images);
        train_labs = read_idx(cfg.data.train_labels);
        test_imgs = read_idx(cfg.data.test_images);
        test_labs = read_idx(cfg.data.test_labels);
      } else {
        Rng src(cfg.data.source_seed);
        DigitCorpus corpus = synth_digit_corpus(2048, 512, 10, src);
        train_imgs = std::move(corpus.train_images);
        train_labs = std::move(corpus.train_labels);
        test_imgs = std::move(corpus.test_images);
        test_labs = std::move(corpus.test_labels);
      }
      Rng overlay(cfg.data.source_seed ^ 0x4D4DULL);
      Rng ov_train = overlay.split(1);
      Rng ov_test = overlay.split(2);
      Dataset train_data = make_multimnist(train_imgs, train_labs, ov_train, cfg.data.n_train, cfg.data.shift);
      Dataset test_data = make_multimnist(test_imgs, test_labs, ov_test, cfg.data.n_test, cfg.data.shift);
      test_data.split = Split::Test;

      std::vector<TaskSpec> specs(2);
      for (std::size_t t = 0; t < 2; ++t) {
        specs[t].hidden = cfg.decoder_hidden;
        specs[t].out_dim = train_data.class_counts[t];
        specs[t].loss = LossKind::SoftmaxXent;
      }
      MultiTaskModel model = MultiTaskModel::make_mlp(train_data.inputs.dim(1), cfg.encoder_widths,
                                                      cfg.activation, specs, cfg.seed);
      return Problem{std::move(train_data), std::move(test_data), std::move(model)};
    }
  }
  throw ConfigError("unhandled dataset kind");
}

EvalResult evaluate(const MultiTaskModel& model, const Dataset& data) {
  EvalResult res;
  Tensor z = forward_latent(model, data.inputs);
  for (Index t = 0; t < model.task_count(); ++t) {
    const TaskHead& head = model.tasks()[static_cast<std::size_t>(t)];
    Tensor pred = head_output(model, t, z);
    const Tensor& labels = data.labels[static_cast<std::size_t>(t)];
    double loss = task_loss_value(head, pred, labels);
    res.loss.push_back(loss);
    if (data.class_counts[static_cast<std::size_t>(t)] > 0) {
      Index wrong = 0;
      for (Index i = 0; i < pred.dim(0); ++i) {
        Index best = 0;
        for (Index j = 1; j < pred.dim(1); ++j)
          if (pred(i, j) > pred(i, best)) best = j;
        if (best != static_cast<Index>(labels(i))) ++wrong;
      }
      res.error.push_back(static_cast<double>(wrong) / static_cast<double>(pred.dim(0)));
    } else {
      res.error.push_back(loss);
    }
  }
  return res;
}

MetricsLog train(const TrainConfig& cfg) {
  Problem problem = build_problem(cfg);
  MultiTaskModel& model = problem.model;
  const Index n = problem.train_data.size();
  const Index t_count = model.task_count();
  const Index batch_size = std::min<Index>(cfg.batch_size, n);

  MetricsLog log;
  log.task_count = t_count;
  log.epochs = cfg.epochs;

  LineSearchConfig base_ls = cfg.ls;
  if (cfg.strategy == Strategy::Bls) base_ls.variant = ArmijoVariant::ClassicalBoth;

  Rng order_base(cfg.seed);
  int global_step = 0;

  auto flush_partial = [&]() {
    if (!cfg.out.empty()) {
      std::filesystem::create_directories(cfg.out);
      write_metrics(log, cfg.out + "/metrics.csv");
    }
  };

  try {
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
      LineSearchConfig eff = base_ls;
      if (cfg.strategy == Strategy::FblsDecay) eff = decay_upper_bound(base_ls, epoch);

      std::vector<Index> order(static_cast<std::size_t>(n));
      for (Index i = 0; i < n; ++i) order[static_cast<std::size_t>(i)] = i;
      Rng epoch_rng = order_base.split(0xE50C00ULL + static_cast<std::uint64_t>(epoch));
      epoch_rng.shuffle(order);

      const std::size_t epoch_first = log.records.size();
      for (Index start = 0; start < n; start += batch_size) {
        const Index stop = std::min<Index>(start + batch_size, n);
        Batch batch = problem.train_data.batch_rows(
            std::span<const Index>(order.data() + start, static_cast<std::size_t>(stop - start)));

        StepRecord rec;
        rec.epoch = epoch;
        rec.step = global_step++;
        rec.strategy = cfg.strategy;

        PassCounter counter;
        const auto t0 = std::chrono::steady_clock::now();
        switch (cfg.strategy) {
          case Strategy::Sgd: {
            ScalarizedGrads g = uniform_mean_grads(model, batch, counter);
            apply_step(model, StepSpace::shared(), g.shared, cfg.lr);
            for (Index t = 0; t < t_count; ++t)
              apply_step(model, StepSpace::task_block(static_cast<int>(t)),
                         g.task[static_cast<std::size_t>(t)], cfg.lr);
            rec.eta = cfg.lr;
            rec.train_loss = std::move(g.losses);
            break;
          }
          case Strategy::SgdMgda: {
            FullGrads g = shared_and_task_grads(model, batch, counter);
            Direction dir = min_norm_fw(g.shared.grads);
            apply_step(model, StepSpace::shared(), dir.vector, cfg.lr);
            for (Index t = 0; t < t_count; ++t)
              apply_step(model, StepSpace::task_block(static_cast<int>(t)),
                         g.task.grads[static_cast<std::size_t>(t)], cfg.lr);
            rec.eta = cfg.lr;
            rec.train_loss = std::move(g.shared.losses);
            break;
          }
          case Strategy::MgdaUb: {
            LatentBatch latent = encode(model, batch, counter);
            auto [lat, task] = latent_grads(model, latent, batch, counter);
            Direction dir = min_norm_fw(lat.grads);
            for (Index t = 0; t < t_count; ++t)
              apply_step(model, StepSpace::task_block(static_cast<int>(t)),
                         task.grads[static_cast<std::size_t>(t)], cfg.lr);
            Eigen::VectorXd pullback = encoder_vjp(model, latent, dir.vector, counter);
            apply_step(model, StepSpace::latent_shared(), pullback, cfg.lr);
            rec.eta = cfg.lr;
            rec.train_loss = std::move(lat.losses);
            break;
          }
          case Strategy::Bls: {
            StepResult r = bls_step(model, batch, eff, counter);
            rec.eta = r.eta;
            rec.trials = r.trials;
            rec.floor_hit = r.floor_hit;
            rec.train_loss = std::move(r.losses_before);
            break;
          }
          case Strategy::Fbls:
          case Strategy::FblsDecay: {
            StepResult r = fbls_step(model, batch, eff, counter);
            rec.eta = r.eta;
            rec.trials = r.trials;
            rec.floor_hit = r.floor_hit;
            rec.train_loss = std::move(r.losses_before);
            break;
          }
        }
        const auto t1 = std::chrono::steady_clock::now();
        rec.wall_ms = std::chrono::duration<double, std::milli>(t1 - t0).count();
        rec.passes = counter;
        log.records.push_back(std::move(rec));
      }

      EvalResult eval = evaluate(model, problem.test_data);
      for (std::size_t i = epoch_first; i < log.records.size(); ++i) {
        log.records[i].test_loss = eval.loss;
        log.records[i].test_error = eval.error;
      }
    }
  } catch (const NumericError&) {
    flush_partial();
    throw;
  }

  if (!cfg.out.empty()) flush_partial();
  return log;
}

double MetricsLog::mean_epoch_wall_ms() const {
  std::map<int, double> per_epoch;
  for (const auto& r : records) per_epoch[r.epoch] += r.wall_ms;
  if (per_epoch.empty()) return 0.0;
  double total = 0.0;
  int count = 0;
  for (const auto& [epoch, ms] : per_epoch) {
    if (per_epoch.size() > 1 && epoch == 0) continue;  // warm-up epoch
    total += ms;
    ++count;
  }
  return total / count;
}

std::string metrics_to_csv(const MetricsLog& log) {
  std::ostringstream out;
  out << "epoch,step,optimizer,eta,trials,floor_hit,task,train_loss,test_loss,test_error,"
         "enc_fwd,enc_bwd,dec_fwd,dec_bwd,wall_ms\n";
  const double missing = std::numeric_limits<double>::quiet_NaN();
  for (const auto& r : log.records) {
    for (Index t = 0; t < log.task_count; ++t) {
      const auto ts = static_cast<std::size_t>(t);
      // test columns stay NaN in a partial log flushed mid-epoch
      const double test_loss = ts < r.test_loss.size() ? r.test_loss[ts] : missing;
      const double test_error = ts < r.test_error.size() ? r.test_error[ts] : missing;
      out << r.epoch << ',' << r.step << ',' << strategy_name(r.strategy) << ',' << fmt17(r.eta)
          << ',' << r.trials << ',' << (r.floor_hit ? 1 : 0) << ',' << t << ','
          << fmt17(r.train_loss[ts]) << ',' << fmt17(test_loss) << ',' << fmt17(test_error) << ','
          << r.passes.enc_fwd << ',' << r.passes.enc_bwd << ',' << r.passes.dec_fwd << ','
          << r.passes.dec_bwd << ',' << fmt17(r.wall_ms) << "\n";
    }
  }
  return out.str();
}

void write_metrics(const MetricsLog& log, const std::string& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot open " + path + " for writing");
  out << metrics_to_csv(log);
  if (!out) throw IoError("write failed for " + path);
}

namespace {

int compare_worker_cap() {
  if (const char* env = std::getenv("MTLOPT_THREADS")) {
    try {
      int v = std::stoi(env);
      if (v >= 1) return v;
    } catch (const std::exception&) {
    }
    throw ConfigError("MTLOPT_THREADS must be a positive integer");
  }
  unsigned hw = std::thread::hardware_concurrency();
  return hw == 0 ? 1 : static_cast<int>(hw);
}

std::string cell_file_name(const CompareCell& cell) {
  std::string name = strategy_name(cell.strategy);
  if (strategy_uses_constant_lr(cell.strategy)) name += "_lr" + fmt_short(cell.lr);
  for (auto& c : name)
    if (c == '.') c = 'p';
  return name;
}

}  // namespace

std::string summary_to_csv(const CompareSummary& summary) {
  double baseline = 0.0;
  int baseline_cells = 0;
  for (const auto& cell : summary.cells)
    if (cell.strategy == Strategy::Sgd) {
      baseline += cell.log.mean_epoch_wall_ms();
      ++baseline_cells;
    }
  if (baseline_cells > 0) {
    baseline /= baseline_cells;
  } else if (!summary.cells.empty()) {
    baseline = summary.cells.front().log.mean_epoch_wall_ms();
  }

  std::ostringstream out;
  out << "strategy,lr,final_train_loss,final_test_loss,final_test_error,mean_epoch_ms,rel_time_pct\n";
  for (const auto& cell : summary.cells) {
    const auto& records = cell.log.records;
    double train_loss = 0.0, test_loss = 0.0, test_error = 0.0;
    if (!records.empty()) {
      const auto& last = records.back();
      for (Index t = 0; t < cell.log.task_count; ++t) {
        train_loss += last.train_loss[static_cast<std::size_t>(t)];
        test_loss += last.test_loss[static_cast<std::size_t>(t)];
        test_error += last.test_error[static_cast<std::size_t>(t)];
      }
      train_loss /= cell.log.task_count;
      test_loss /= cell.log.task_count;
      test_error /= cell.log.task_count;
    }
    const double ms = cell.log.mean_epoch_wall_ms();
    out << strategy_name(cell.strategy) << ','
        << (strategy_uses_constant_lr(cell.strategy) ? fmt17(cell.lr) : "") << ','
        << fmt17(train_loss) << ',' << fmt17(test_loss) << ',' << fmt17(test_error) << ','
        << fmt17(ms) << ',' << fmt17(baseline > 0 ? 100.0 * ms / baseline : 0.0) << "\n";
  }
  return out.str();
}

CompareSummary compare(const TrainConfig& cfg, const std::string& out_dir) {
  std::vector<Strategy> strategies = cfg.compare_strategies;
  if (strategies.empty()) strategies = {Strategy::Sgd, Strategy::Bls, Strategy::Fbls};
  std::vector<double> lrs = cfg.compare_lrs;
  if (lrs.empty()) lrs = default_lr_grid();

  CompareSummary summary;
  std::vector<TrainConfig> cell_cfgs;
  for (Strategy s : strategies) {
    if (strategy_uses_constant_lr(s)) {
      for (double lr : lrs) {
        TrainConfig cc = cfg;
        cc.strategy = s;
        cc.lr = lr;
        cc.lr_set = true;
        cc.out.clear();
        cell_cfgs.push_back(std::move(cc));
        summary.cells.push_back(CompareCell{s, lr, {}});
      }
    } else {
      TrainConfig cc = cfg;
      cc.strategy = s;
      cc.out.clear();
      if (s == Strategy::Bls) cc.ls.variant = ArmijoVariant::ClassicalBoth;
      else if (cc.ls.variant == ArmijoVariant::ClassicalBoth) cc.ls.variant = ArmijoVariant::Both;
      if (s == Strategy::FblsDecay && !cc.ls.decay) cc.ls.decay = DecaySchedule{0.5, 10};
      cell_cfgs.push_back(std::move(cc));
      summary.cells.push_back(CompareCell{s, 0.0, {}});
    }
  }

  const int workers = std::min<int>(compare_worker_cap(), static_cast<int>(cell_cfgs.size()));
  std::atomic<std::size_t> next{0};
  std::vector<std::exception_ptr> errors(cell_cfgs.size());
  auto run_cells = [&]() {
    while (true) {
      const std::size_t i = next.fetch_add(1);
      if (i >= cell_cfgs.size()) break;
      try {
        summary.cells[i].log = train(cell_cfgs[i]);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };

  if (workers <= 1) {
    run_cells();
  } else {
    std::vector<std::thread> pool;
    for (int w = 0; w < workers; ++w) pool.emplace_back(run_cells);
    for (auto& th : pool) th.join();
  }
  for (const auto& err : errors)
    if (err) std::rethrow_exception(err);

  std::filesystem::create_directories(out_dir);
  for (const auto& cell : summary.cells)
    write_metrics(cell.log, out_dir + "/" + cell_file_name(cell) + ".csv");
  std::ofstream out(out_dir + "/summary.csv", std::ios::trunc);
  if (!out) throw IoError("cannot open " + out_dir + "/summary.csv for writing");
  out << summary_to_csv(summary);
  return summary;
}

double gradient_check(std::uint64_t seed, int model_count) {
  Rng rng(seed);
  double worst = 0.0;

  // |a-b| / max(|a|, |b|, 1e-3): the floor turns the near-zero absolute
  // tolerance of 1e-8 into the same 1e-5 threshold as the relative one.
  auto relative_error = [](const Eigen::VectorXd& a, const Eigen::VectorXd& b) {
    double err = 0.0;
    for (Eigen::Index i = 0; i < a.size(); ++i) {
      const double diff = std::abs(a[i] - b[i]);
      err = std::max(err, diff / std::max({std::abs(a[i]), std::abs(b[i]), 1e-3}));
    }
    return err;
  };

  for (int m = 0; m < model_count; ++m) {
    const Index d_in = 2 + static_cast<Index>(rng.below(5));
    const Index width = 2 + static_cast<Index>(rng.below(31));  // <= 32
    const Index d_z = 2 + static_cast<Index>(rng.below(5));
    const Index t_count = 1 + static_cast<Index>(rng.below(3));
    const Index n = 2 + static_cast<Index>(rng.below(3));

    std::vector<TaskSpec> specs(static_cast<std::size_t>(t_count));
    std::vector<Tensor> labels;
    for (auto& s : specs) {
      if (rng.uniform01() < 0.5) {
        const Index classes = 2 + static_cast<Index>(rng.below(3));
        s.out_dim = classes;
        s.loss = LossKind::SoftmaxXent;
        Eigen::VectorXd lab(n);
        for (Index i = 0; i < n; ++i) lab[i] = static_cast<double>(rng.below(static_cast<std::uint64_t>(classes)));
        labels.emplace_back(std::vector<Index>{n}, std::move(lab));
      } else {
        s.out_dim = 1 + static_cast<Index>(rng.below(3));
        s.loss = LossKind::Mse;
        Eigen::VectorXd lab(n * s.out_dim);
        for (Index i = 0; i < lab.size(); ++i) lab[i] = rng.uniform(-1.0, 1.0);
        labels.emplace_back(std::vector<Index>{n, s.out_dim}, std::move(lab));
      }
      if (rng.uniform01() < 0.5) s.hidden = {2 + static_cast<Index>(rng.below(5))};
    }

    // tanh keeps every loss smooth, which central differences require
    MultiTaskModel model = MultiTaskModel::make_mlp(d_in, {width, d_z}, Activation::Tanh, specs,
                                                    rng.next_u64());
    Batch batch;
    Eigen::VectorXd x(n * d_in);
    for (Index i = 0; i < x.size(); ++i) x[i] = rng.uniform(-1.0, 1.0);
    batch.inputs = Tensor({n, d_in}, std::move(x));
    batch.labels = labels;

    PassCounter counter;
    FullGrads grads = shared_and_task_grads(model, batch, counter);
    LatentBatch latent = encode(model, batch, counter);
    auto [lat, task] = latent_grads(model, latent, batch, counter);

    for (Index t = 0; t < t_count; ++t) {
      const auto ts = static_cast<std::size_t>(t);
      // shared parameters
      Tensor shared0 = Tensor::from_vector(model.shared_flat());
      Tensor fd_shared = finite_diff(
          [&](const Tensor& v) {
            MultiTaskModel probe = model;
            apply_step(probe, StepSpace::shared(), (probe.shared_flat() - v.flat()).eval(), 1.0);
            PassCounter c;
            return task_losses(probe, batch, c)[ts];
          },
          shared0, 1e-6);
      worst = std::max(worst, relative_error(grads.shared.grads[ts], fd_shared.flat()));

      // task parameters
      Tensor task0 = Tensor::from_vector(model.task_flat(t));
      Tensor fd_task = finite_diff(
          [&](const Tensor& v) {
            MultiTaskModel probe = model;
            apply_step(probe, StepSpace::task_block(static_cast<int>(t)),
                       (probe.task_flat(t) - v.flat()).eval(), 1.0);
            PassCounter c;
            return task_losses(probe, batch, c)[ts];
          },
          task0, 1e-6);
      worst = std::max(worst, relative_error(task.grads[ts], fd_task.flat()));

      // latent
      Tensor fd_latent = finite_diff(
          [&](const Tensor& z) {
            PassCounter c;
            return task_losses_from_latent(model, z.reshaped(latent.z.shape()), batch, c)[ts];
          },
          latent.z, 1e-6);
      worst = std::max(worst, relative_error(lat.grads[ts], fd_latent.flat()));
    }
  }
  return worst;
}

}  // namespace mtlopt
