#include "mtlopt/data.hpp"

#include <array>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <string>

namespace mtlopt {

namespace {

constexpr std::uint32_t kImagesMagic = 0x00000803;
constexpr std::uint32_t kLabelsMagic = 0x00000801;

std::uint32_t read_be32(std::istream& in, const std::string& path) {
  std::array<unsigned char, 4> b{};
  in.read(reinterpret_cast<char*>(b.data()), 4);
  if (!in) throw FormatError(path + ": truncated header");
  return (std::uint32_t(b[0]) << 24) | (std::uint32_t(b[1]) << 16) | (std::uint32_t(b[2]) << 8) |
         std::uint32_t(b[3]);
}

void write_be32(std::ostream& out, std::uint32_t v) {
  std::array<unsigned char, 4> b = {static_cast<unsigned char>(v >> 24),
                                    static_cast<unsigned char>(v >> 16),
                                    static_cast<unsigned char>(v >> 8),
                                    static_cast<unsigned char>(v)};
  out.write(reinterpret_cast<const char*>(b.data()), 4);
}

std::vector<unsigned char> read_payload(std::istream& in, Index count, const std::string& path) {
  std::vector<unsigned char> bytes(static_cast<std::size_t>(count));
  in.read(reinterpret_cast<char*>(bytes.data()), count);
  if (!in || in.gcount() != count) throw FormatError(path + ": truncated payload");
  in.peek();
  if (!in.eof()) throw FormatError(path + ": trailing bytes after payload");
  return bytes;
}

}  // namespace

Batch Dataset::batch_rows(std::span<const Index> rows) const {
  const Index d = inputs.dim(1);
  Eigen::VectorXd in(static_cast<Index>(rows.size()) * d);
  for (std::size_t k = 0; k < rows.size(); ++k)
    in.segment(static_cast<Index>(k) * d, d) = inputs.flat().segment(rows[k] * d, d);

  Batch batch;
  batch.inputs = Tensor({static_cast<Index>(rows.size()), d}, std::move(in));
  for (const auto& l : labels) {
    if (l.rank() == 1) {
      Eigen::VectorXd lv(static_cast<Index>(rows.size()));
      for (std::size_t k = 0; k < rows.size(); ++k) lv[static_cast<Index>(k)] = l(rows[k]);
      batch.labels.emplace_back(std::vector<Index>{static_cast<Index>(rows.size())}, std::move(lv));
    } else {
      const Index w = l.dim(1);
      Eigen::VectorXd lv(static_cast<Index>(rows.size()) * w);
      for (std::size_t k = 0; k < rows.size(); ++k)
        lv.segment(static_cast<Index>(k) * w, w) = l.flat().segment(rows[k] * w, w);
      batch.labels.emplace_back(std::vector<Index>{static_cast<Index>(rows.size()), w}, std::move(lv));
    }
  }
  return batch;
}

Batch Dataset::full_batch() const {
  Batch batch;
  batch.inputs = inputs;
  batch.labels = labels;
  return batch;
}

Tensor read_idx(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  const std::uint32_t magic = read_be32(in, path);
  if (magic == kImagesMagic) {
    const Index n = read_be32(in, path);
    const Index rows = read_be32(in, path);
    const Index cols = read_be32(in, path);
    if (n <= 0 || rows <= 0 || cols <= 0) throw FormatError(path + ": bad image dimensions");
    auto bytes = read_payload(in, n * rows * cols, path);
    Eigen::VectorXd data(n * rows * cols);
    for (Index i = 0; i < data.size(); ++i)
      data[i] = static_cast<double>(bytes[static_cast<std::size_t>(i)]) / 255.0;
    return Tensor({n, rows, cols}, std::move(data));
  }
  if (magic == kLabelsMagic) {
    const Index n = read_be32(in, path);
    if (n <= 0) throw FormatError(path + ": bad label count");
    auto bytes = read_payload(in, n, path);
    Eigen::VectorXd data(n);
    for (Index i = 0; i < n; ++i) data[i] = static_cast<double>(bytes[static_cast<std::size_t>(i)]);
    return Tensor({n}, std::move(data));
  }
  char buf[32];
  std::snprintf(buf, sizeof(buf), "0x%08x", magic);
  throw FormatError(path + ": unknown IDX magic " + buf);
}

void write_idx(const std::string& path, const Tensor& tensor) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path + " for writing");
  if (tensor.rank() == 3) {
    write_be32(out, kImagesMagic);
    write_be32(out, static_cast<std::uint32_t>(tensor.dim(0)));
    write_be32(out, static_cast<std::uint32_t>(tensor.dim(1)));
    write_be32(out, static_cast<std::uint32_t>(tensor.dim(2)));
    for (Index i = 0; i < tensor.numel(); ++i) {
      double v = std::round(tensor(i) * 255.0);
      if (v < 0.0 || v > 255.0) throw InputError("image values must scale into bytes");
      unsigned char b = static_cast<unsigned char>(v);
      out.write(reinterpret_cast<const char*>(&b), 1);
    }
  } else if (tensor.rank() == 1) {
    write_be32(out, kLabelsMagic);
    write_be32(out, static_cast<std::uint32_t>(tensor.dim(0)));
    for (Index i = 0; i < tensor.numel(); ++i) {
      double v = tensor(i);
      if (v != std::floor(v) || v < 0.0 || v > 255.0) throw InputError("labels must be bytes");
      unsigned char b = static_cast<unsigned char>(v);
      out.write(reinterpret_cast<const char*>(&b), 1);
    }
  } else {
    throw InputError("write_idx expects a rank-3 image tensor or rank-1 label tensor");
  }
  if (!out) throw IoError("write failed for " + path);
}

Dataset make_multimnist(const Tensor& images, const Tensor& labels, Rng& rng, Index n_out,
                        Index shift_px) {
  if (images.rank() != 3) throw ShapeError("make_multimnist expects images [N x rows x cols]");
  if (images.dim(1) != images.dim(2)) throw ShapeError("make_multimnist expects square images");
  if (labels.rank() != 1 || labels.numel() != images.dim(0))
    throw ShapeError("make_multimnist expects one label per image");
  if (shift_px < 0) throw InputError("shift_px must be non-negative");
  if (images.dim(0) < 2) throw InputError("need at least 2 source images");
  if (n_out < 1) throw InputError("n_out must be positive");

  const Index n_src = images.dim(0);
  const Index side = images.dim(1);
  const Index canvas = side + shift_px;

  Eigen::VectorXd out(n_out * canvas * canvas);
  out.setZero();
  Eigen::VectorXd lab1(n_out), lab2(n_out);

  for (Index k = 0; k < n_out; ++k) {
    const Index i = static_cast<Index>(rng.below(static_cast<std::uint64_t>(n_src)));
    Index j = i;
    int guard = 0;
    while (labels(j) == labels(i)) {
      j = static_cast<Index>(rng.below(static_cast<std::uint64_t>(n_src)));
      if (++guard > 100000) throw InputError("cannot find a second digit with a distinct label");
    }
    const double* a = images.flat().data() + i * side * side;
    const double* b = images.flat().data() + j * side * side;
    double* c = out.data() + k * canvas * canvas;
    for (Index r = 0; r < side; ++r)
      for (Index col = 0; col < side; ++col) {
        double& top = c[r * canvas + col];
        top = std::max(top, a[r * side + col]);
        double& bot = c[(r + shift_px) * canvas + (col + shift_px)];
        bot = std::max(bot, b[r * side + col]);
      }
    lab1[k] = labels(i);
    lab2[k] = labels(j);
  }

  Index classes = 0;
  for (Index i = 0; i < labels.numel(); ++i)
    classes = std::max(classes, static_cast<Index>(labels(i)) + 1);

  Dataset data;
  data.inputs = Tensor({n_out, canvas * canvas}, std::move(out));
  data.labels.emplace_back(std::vector<Index>{n_out}, std::move(lab1));
  data.labels.emplace_back(std::vector<Index>{n_out}, std::move(lab2));
  data.class_counts = {classes, classes};
  return data;
}

DigitCorpus synth_digit_corpus(Index n_train, Index n_test, Index classes, Rng& rng) {
  if (n_train < 2 || n_test < 2 || classes < 2)
    throw InputError("synth_digit_corpus needs n >= 2 per split and classes >= 2");
  const Index side = 28;

  // One prototype per class shared by both splits, then per-sample jitter.
  // Keeps classes separable but not trivially so.
  std::vector<Eigen::VectorXd> protos;
  for (Index c = 0; c < classes; ++c) {
    Eigen::VectorXd p(side * side);
    for (Index i = 0; i < p.size(); ++i) p[i] = rng.uniform01() < 0.22 ? rng.uniform(0.5, 1.0) : 0.0;
    protos.push_back(std::move(p));
  }

  auto draw = [&](Index n, Rng sample_rng) {
    Eigen::VectorXd imgs(n * side * side);
    Eigen::VectorXd labs(n);
    for (Index k = 0; k < n; ++k) {
      const Index c = static_cast<Index>(sample_rng.below(static_cast<std::uint64_t>(classes)));
      labs[k] = static_cast<double>(c);
      for (Index i = 0; i < side * side; ++i) {
        double v = protos[static_cast<std::size_t>(c)][i];
        v += 0.9 * sample_rng.uniform(-1.0, 1.0);
        if (sample_rng.uniform01() < 0.35) v = sample_rng.uniform01();  // salt noise
        // quantize to bytes so the corpus round-trips through IDX exactly
        imgs[k * side * side + i] = std::round(std::clamp(v, 0.0, 1.0) * 255.0) / 255.0;
      }
    }
    return std::pair<Tensor, Tensor>{Tensor({n, side, side}, std::move(imgs)),
                                     Tensor({n}, std::move(labs))};
  };

  DigitCorpus corpus;
  std::tie(corpus.train_images, corpus.train_labels) = draw(n_train, rng.split(0x7472));
  std::tie(corpus.test_images, corpus.test_labels) = draw(n_test, rng.split(0x7465));
  return corpus;
}

SynthData synth_tasks(Index d_in, Index d_z_true, Index t_count, Index n_train, Index n_test,
                      double noise_sd, std::uint64_t seed) {
  if (d_in < 1 || d_z_true < 1 || t_count < 1 || n_train < 1 || n_test < 1)
    throw InputError("synth_tasks sizes must be positive");
  if (noise_sd < 0) throw InputError("noise_sd must be non-negative");

  Rng base(seed);
  Rng map_rng = base.split(0x6d6170);
  SynthData out;
  out.shared_map = Eigen::MatrixXd(d_in, d_z_true);
  for (Index i = 0; i < d_in; ++i)
    for (Index j = 0; j < d_z_true; ++j)
      out.shared_map(i, j) = map_rng.normal() / std::sqrt(static_cast<double>(d_in));
  for (Index t = 0; t < t_count; ++t) {
    Eigen::VectorXd h(d_z_true);
    for (Index j = 0; j < d_z_true; ++j) h[j] = map_rng.normal();
    out.task_heads.push_back(std::move(h));
  }

  auto generate = [&](Index n, Split split, Rng rng) {
    Eigen::MatrixXd x(n, d_in);
    for (Index i = 0; i < n; ++i)
      for (Index j = 0; j < d_in; ++j) x(i, j) = rng.normal();
    Eigen::MatrixXd hidden = (x * out.shared_map).array().tanh();

    Dataset data;
    data.split = split;
    data.inputs = Tensor::from_matrix(x);
    for (Index t = 0; t < t_count; ++t) {
      Eigen::VectorXd y = hidden * out.task_heads[static_cast<std::size_t>(t)];
      for (Index i = 0; i < n; ++i) y[i] += noise_sd * rng.normal();
      data.labels.push_back(Tensor({n, 1}, std::move(y)));
      data.class_counts.push_back(0);
    }
    return data;
  };

  out.train = generate(n_train, Split::Train, base.split(0x747261));
  out.test = generate(n_test, Split::Test, base.split(0x746573));
  return out;
}

std::vector<double> ToyProblem::losses(const Eigen::VectorXd& theta) const {
  std::vector<double> out;
  for (const auto& a : centers) out.push_back(0.5 * (theta - a).squaredNorm());
  return out;
}

std::vector<Eigen::VectorXd> ToyProblem::grads(const Eigen::VectorXd& theta) const {
  std::vector<Eigen::VectorXd> out;
  for (const auto& a : centers) out.push_back(theta - a);
  return out;
}

double ToyProblem::hull_distance(const Eigen::VectorXd& theta) const {
  // distance from theta to conv{a_t} = norm of the min-norm point of {a_t - theta}
  std::vector<Eigen::VectorXd> shifted;
  for (const auto& a : centers) shifted.push_back(a - theta);
  return min_norm_fw(shifted).vector.norm();
}

ToyProblem quadratic_problem(std::vector<Eigen::VectorXd> centers) {
  if (centers.empty()) throw InputError("quadratic_problem needs at least one center");
  for (const auto& c : centers)
    if (c.size() != centers.front().size()) throw ShapeError("quadratic centers differ in length");
  return ToyProblem{std::move(centers)};
}

QuadraticSetup quadratic_model(const ToyProblem& problem, const Eigen::VectorXd& theta0) {
  const Index d = problem.dim();
  if (theta0.size() != d) throw ShapeError("theta0 length does not match problem dimension");

  DenseLayer layer;
  layer.weight = Tensor::zeros({1, d});
  layer.bias = Tensor({d}, theta0);
  layer.act = Activation::Identity;

  std::vector<TaskHead> heads;
  for (Index t = 0; t < problem.task_count(); ++t) {
    TaskHead head;
    head.loss = LossKind::Mse;
    // n = 1 row, so mse = |z - a|^2 / d; scale by d/2 to get 0.5 |theta - a|^2
    head.loss_scale = static_cast<double>(d) / 2.0;
    heads.push_back(std::move(head));
  }

  QuadraticSetup setup{MultiTaskModel({layer}, std::move(heads)),
                       Batch{Tensor::zeros({1, 1}), {}}};
  for (Index t = 0; t < problem.task_count(); ++t)
    setup.batch.labels.push_back(
        Tensor({1, d}, problem.centers[static_cast<std::size_t>(t)]));
  return setup;
}

Eigen::VectorXd quadratic_point(const MultiTaskModel& model) {
  return model.encoder().front().bias.flat();
}

void write_dataset_csv(const std::string& path, const Dataset& data) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot open " + path + " for writing");

  const Index d = data.inputs.dim(1);
  out << "x0";
  for (Index j = 1; j < d; ++j) out << ",x" << j;
  for (Index t = 0; t < data.task_count(); ++t) {
    const Tensor& l = data.labels[static_cast<std::size_t>(t)];
    if (l.rank() == 1 || l.dim(1) == 1) {
      out << ",y_t" << t;
    } else {
      for (Index j = 0; j < l.dim(1); ++j) out << ",y" << j << "_t" << t;
    }
  }
  out << "\n";

  char buf[64];
  auto write_value = [&](double v) {
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    out << buf;
  };
  for (Index i = 0; i < data.size(); ++i) {
    write_value(data.inputs(i, 0));
    for (Index j = 1; j < d; ++j) {
      out << ",";
      write_value(data.inputs(i, j));
    }
    for (const auto& l : data.labels) {
      if (l.rank() == 1) {
        out << ",";
        write_value(l(i));
      } else {
        for (Index j = 0; j < l.dim(1); ++j) {
          out << ",";
          write_value(l(i, j));
        }
      }
    }
    out << "\n";
  }
  if (!out) throw IoError("write failed for " + path);
}

}  // namespace mtlopt
