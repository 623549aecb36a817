// Copyright (c) 2026, The grade-probe Authors
// SPDX-License-Identifier: Apache-2.0

#include "grade/probe.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <istream>
#include <limits>
#include <ostream>

#include "grade/error.hpp"

namespace grade {

using nlohmann::json;

void TrainConfig::validate() const {
  if (epochs < 1 || learning_rate <= 0.0 || weight_decay < 0.0 || lr_factor <= 0.0 ||
      lr_factor >= 1.0 || lr_patience < 0 || plateau_threshold < 0.0 || momentum < 0.0 ||
      early_stop_patience < 0) {
    fail(ErrorKind::kInvalidInput, "invalid training configuration");
  }
  if (batch_size < 2) {
    fail(ErrorKind::kInvalidInput, "batch normalization needs a training batch of at least 2");
  }
  if (!(decision_threshold >= 0.0 && decision_threshold <= 1.0)) {
    fail(ErrorKind::kInvalidInput, "decision threshold must lie in [0, 1]");
  }
}

double kaiming_bound(int fan_in, double negative_slope) {
  const double gain = std::sqrt(2.0 / (1.0 + negative_slope * negative_slope));
  return gain * std::sqrt(3.0 / static_cast<double>(fan_in));
}

namespace {

DenseLayer kaiming_layer(Rng& rng, int in, int out, double slope) {
  const double b = kaiming_bound(in, slope);
  DenseLayer d;
  d.weight.resize(out, in);
  for (Eigen::Index i = 0; i < d.weight.size(); ++i) d.weight.data()[i] = rng.uniform(-b, b);
  d.bias = Vector::Zero(out);
  return d;
}

void check_arch(const ProbeArchitecture& a) {
  if (a.input_dim < 1 || a.hidden.empty()) fail(ErrorKind::kInvalidInput, "invalid probe shape");
  for (int w : a.hidden) {
    if (w < 1) fail(ErrorKind::kInvalidInput, "invalid probe width");
  }
  if (!(a.dropout >= 0.0 && a.dropout <= 1.0)) fail(ErrorKind::kInvalidInput, "dropout outside [0,1]");
}

double sigmoid(double s) {
  return s >= 0 ? 1.0 / (1.0 + std::exp(-s)) : std::exp(s) / (1.0 + std::exp(s));
}

// Per-block activations kept for the backward pass.
struct BlockCache {
  Matrix input;
  Matrix xhat;
  Vector inv_std;
  Matrix pre_act;  // normalized and affine-transformed
  Matrix mask;     // dropout keep mask, already scaled
};

struct ForwardCache {
  std::vector<BlockCache> blocks;
  Matrix head_input;
  Vector logits;
};

Vector forward_impl(const ProbeParameters& p, const Matrix& x, ProbeMode mode, Rng* rng,
                    ForwardCache* cache, std::vector<std::pair<Vector, Vector>>* batch_stats) {
  const auto& a = p.arch;
  if (x.cols() != a.input_dim) {
    fail(ErrorKind::kShapeMismatch, "probe input has " + std::to_string(x.cols()) +
                                        " features, expected " + std::to_string(a.input_dim));
  }
  if (mode == ProbeMode::kTrain) {
    if (x.rows() < 2) fail(ErrorKind::kInvalidInput, "train-mode batch needs at least 2 rows");
    if (rng == nullptr) fail(ErrorKind::kInvalidInput, "train-mode forward needs a dropout stream");
  }
  const double keep = 1.0 - a.dropout;
  Matrix act = x;
  for (std::size_t l = 0; l < p.hidden.size(); ++l) {
    const auto& lin = p.hidden[l];
    const auto& bn = p.norms[l];
    Matrix z = act * lin.weight.transpose();
    z.rowwise() += lin.bias.transpose();

    Vector mean, var;
    if (mode == ProbeMode::kTrain) {
      mean = z.colwise().mean().transpose();
      var = (z.rowwise() - mean.transpose()).array().square().colwise().mean().transpose();
    } else {
      mean = bn.running_mean;
      var = bn.running_var;
    }
    const Vector inv_std = (var.array() + a.bn_eps).rsqrt().matrix();
    Matrix xhat = (z.rowwise() - mean.transpose()).array().rowwise() * inv_std.transpose().array();
    Matrix y = (xhat.array().rowwise() * bn.gamma.transpose().array()).rowwise() +
               bn.beta.transpose().array();
    Matrix out = y.unaryExpr([s = a.negative_slope](double v) { return v > 0 ? v : s * v; });

    Matrix mask;
    if (mode == ProbeMode::kTrain && a.dropout > 0.0) {
      mask.resize(out.rows(), out.cols());
      for (Eigen::Index i = 0; i < mask.size(); ++i) {
        mask.data()[i] = keep > 0.0 && rng->uniform() < keep ? 1.0 / keep : 0.0;
      }
      out = out.cwiseProduct(mask);
    }
    if (batch_stats) {
      batch_stats->emplace_back(mean, var);
    }
    if (cache) {
      cache->blocks.push_back({std::move(act), std::move(xhat), inv_std, std::move(y), std::move(mask)});
    }
    act = std::move(out);
  }
  Vector logits = act * p.output.weight.transpose();
  logits.array() += p.output.bias(0);
  if (cache) {
    cache->head_input = act;
    cache->logits = logits;
  }
  return logits.unaryExpr([](double s) { return sigmoid(s); });
}

}  // namespace

ProbeParameters init_probe(int input_dim, std::uint64_t seed) {
  ProbeArchitecture arch;
  arch.input_dim = input_dim;
  return init_probe(arch, seed);
}

ProbeParameters init_probe(const ProbeArchitecture& arch, std::uint64_t seed) {
  check_arch(arch);
  ProbeParameters p;
  p.arch = arch;
  p.seed = seed;
  Rng rng(seed);
  int in = arch.input_dim;
  for (int width : arch.hidden) {
    p.hidden.push_back(kaiming_layer(rng, in, width, arch.negative_slope));
    p.norms.push_back({Vector::Ones(width), Vector::Zero(width), Vector::Zero(width),
                       Vector::Ones(width)});
    in = width;
  }
  p.output = kaiming_layer(rng, in, 1, arch.negative_slope);
  return p;
}

Vector probe_forward_batch(const ProbeParameters& p, const Matrix& x, ProbeMode mode, Rng* rng) {
  return forward_impl(p, x, mode, rng, nullptr, nullptr);
}

double probe_forward(const ProbeParameters& p, std::span<const double> x) {
  Matrix row(1, static_cast<Eigen::Index>(x.size()));
  for (std::size_t i = 0; i < x.size(); ++i) row(0, static_cast<Eigen::Index>(i)) = x[i];
  return probe_forward_batch(p, row, ProbeMode::kEval)(0);
}

Prediction predict_from_score(double score, double threshold) {
  return {score >= threshold ? Label::kAnswerable : Label::kUnanswerable, score};
}

Prediction predict(const ProbeParameters& p, std::span<const double> x, double threshold) {
  return predict_from_score(probe_forward(p, x), threshold);
}

double parameter_norm(const ProbeParameters& p) {
  double sq = 0.0;
  for (std::size_t l = 0; l < p.hidden.size(); ++l) {
    sq += p.hidden[l].weight.squaredNorm() + p.hidden[l].bias.squaredNorm();
    sq += p.norms[l].gamma.squaredNorm() + p.norms[l].beta.squaredNorm();
  }
  sq += p.output.weight.squaredNorm() + p.output.bias.squaredNorm();
  return std::sqrt(sq);
}

// ---------------------------------------------------------------------------
// Training

namespace {

// Flat views over every trainable tensor, in a fixed order, so optimizers can
// treat parameters and gradients uniformly.
struct ParamRefs {
  std::vector<double*> data;
  std::vector<Eigen::Index> size;
};

template <typename P, typename G>
ParamRefs collect(P& p, G& grads_or_params) {
  (void)p;
  ParamRefs r;
  for (std::size_t l = 0; l < grads_or_params.hidden.size(); ++l) {
    auto& lin = grads_or_params.hidden[l];
    auto& bn = grads_or_params.norms[l];
    for (auto* m : {&lin.weight}) {
      r.data.push_back(m->data());
      r.size.push_back(m->size());
    }
    for (auto* v : {&lin.bias, &bn.gamma, &bn.beta}) {
      r.data.push_back(v->data());
      r.size.push_back(v->size());
    }
  }
  r.data.push_back(grads_or_params.output.weight.data());
  r.size.push_back(grads_or_params.output.weight.size());
  r.data.push_back(grads_or_params.output.bias.data());
  r.size.push_back(grads_or_params.output.bias.size());
  return r;
}

ProbeParameters zeros_like(const ProbeParameters& p) {
  ProbeParameters g = p;
  for (std::size_t l = 0; l < g.hidden.size(); ++l) {
    g.hidden[l].weight.setZero();
    g.hidden[l].bias.setZero();
    g.norms[l].gamma.setZero();
    g.norms[l].beta.setZero();
  }
  g.output.weight.setZero();
  g.output.bias.setZero();
  return g;
}

// Mean BCE of the batch and its gradient (written into grads).
double loss_and_grad(const ProbeParameters& p, const Matrix& x, const Vector& y, Rng& dropout_rng,
                     ProbeParameters& grads,
                     std::vector<std::pair<Vector, Vector>>& batch_stats) {
  ForwardCache cache;
  forward_impl(p, x, ProbeMode::kTrain, &dropout_rng, &cache, &batch_stats);
  const auto b = static_cast<double>(x.rows());
  double loss = 0.0;
  Vector dlogit(x.rows());
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    const double s = cache.logits(i);
    // log(1 + e^s) - y s, computed without overflow
    loss += std::max(s, 0.0) - y(i) * s + std::log1p(std::exp(-std::abs(s)));
    dlogit(i) = (sigmoid(s) - y(i)) / b;
  }
  loss /= b;

  grads.output.weight = dlogit.transpose() * cache.head_input;
  grads.output.bias(0) = dlogit.sum();
  Matrix upstream = dlogit * p.output.weight;  // B x last_width

  const double slope = p.arch.negative_slope;
  for (std::size_t l = p.hidden.size(); l-- > 0;) {
    const auto& bc = cache.blocks[l];
    if (bc.mask.size() > 0) upstream = upstream.cwiseProduct(bc.mask);
    Matrix dy = upstream;
    for (Eigen::Index i = 0; i < dy.size(); ++i) {
      if (bc.pre_act.data()[i] <= 0) dy.data()[i] *= slope;
    }
    const auto& bn = p.norms[l];
    grads.norms[l].gamma = (dy.cwiseProduct(bc.xhat)).colwise().sum().transpose();
    grads.norms[l].beta = dy.colwise().sum().transpose();
    const Matrix dxhat = dy.array().rowwise() * bn.gamma.transpose().array();
    const Vector sum_dxhat = dxhat.colwise().sum().transpose();
    const Vector sum_dxhat_xhat = dxhat.cwiseProduct(bc.xhat).colwise().sum().transpose();
    Matrix dz = (b * dxhat.array()).matrix();
    dz.rowwise() -= sum_dxhat.transpose();
    dz -= (bc.xhat.array().rowwise() * sum_dxhat_xhat.transpose().array()).matrix();
    dz = (dz.array().rowwise() * (bc.inv_std.transpose().array() / b)).matrix();

    grads.hidden[l].weight = dz.transpose() * bc.input;
    grads.hidden[l].bias = dz.colwise().sum().transpose();
    upstream = dz * p.hidden[l].weight;
  }
  return loss;
}

std::pair<Matrix, Vector> labeled_matrix(const std::vector<FeatureVector>& data) {
  std::vector<const FeatureVector*> rows;
  for (const auto& f : data) {
    if (f.label == Label::kAnswerable || f.label == Label::kUnanswerable) rows.push_back(&f);
  }
  if (rows.empty()) fail(ErrorKind::kDegenerateLabels, "no labeled samples to train on");
  const auto width = static_cast<Eigen::Index>(rows.front()->values.size());
  Matrix x(static_cast<Eigen::Index>(rows.size()), width);
  Vector y(static_cast<Eigen::Index>(rows.size()));
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (static_cast<Eigen::Index>(rows[i]->values.size()) != width) {
      fail(ErrorKind::kLayerCountMismatch, "feature vectors have different lengths");
    }
    for (Eigen::Index j = 0; j < width; ++j) {
      x(static_cast<Eigen::Index>(i), j) = rows[i]->values[static_cast<std::size_t>(j)];
    }
    y(static_cast<Eigen::Index>(i)) = rows[i]->label == Label::kAnswerable ? 1.0 : 0.0;
  }
  const double positives = y.sum();
  if (positives == 0.0 || positives == static_cast<double>(y.size())) {
    fail(ErrorKind::kDegenerateLabels, "training data contains a single class");
  }
  return {std::move(x), std::move(y)};
}

}  // namespace

TrainResult train_probe(const std::vector<FeatureVector>& data, const TrainConfig& cfg) {
  ProbeArchitecture arch;
  arch.input_dim = data.empty() ? 1 : static_cast<int>(data.front().values.size());
  return train_probe(data, cfg, arch);
}

TrainResult train_probe(const std::vector<FeatureVector>& data, const TrainConfig& cfg,
                        ProbeArchitecture arch) {
  cfg.validate();
  auto [x, y] = labeled_matrix(data);
  arch.input_dim = static_cast<int>(x.cols());

  TrainResult result;
  result.params = init_probe(arch, cfg.seed);
  ProbeParameters& p = result.params;
  ProbeParameters grads = zeros_like(p);
  ProbeParameters state1 = zeros_like(p);  // momentum / first moment
  ProbeParameters state2 = zeros_like(p);  // second moment

  Rng shuffle_rng(cfg.seed);
  Rng dropout_rng(cfg.seed ^ 0xd1b54a32d192ed03ULL);

  const Eigen::Index n = x.rows();
  std::vector<Eigen::Index> order(static_cast<std::size_t>(n));
  for (Eigen::Index i = 0; i < n; ++i) order[static_cast<std::size_t>(i)] = i;

  double lr = cfg.learning_rate;
  double best = std::numeric_limits<double>::infinity();
  int bad_epochs = 0;
  int stale_epochs = 0;
  long step = 0;
  const double beta1 = 0.9, beta2 = 0.999, adam_eps = 1e-8;
  std::vector<std::pair<Vector, Vector>> batch_stats;

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    shuffle_rng.shuffle(order.begin(), order.end());
    double epoch_loss = 0.0;
    Eigen::Index seen = 0;
    for (Eigen::Index start = 0; start < n; start += cfg.batch_size) {
      const Eigen::Index len = std::min<Eigen::Index>(cfg.batch_size, n - start);
      if (len < 2) break;  // a trailing singleton batch cannot be batch-normalized
      Matrix xb(len, x.cols());
      Vector yb(len);
      for (Eigen::Index i = 0; i < len; ++i) {
        const Eigen::Index src = order[static_cast<std::size_t>(start + i)];
        xb.row(i) = x.row(src);
        yb(i) = y(src);
      }
      batch_stats.clear();
      const double loss = loss_and_grad(p, xb, yb, dropout_rng, grads, batch_stats);
      epoch_loss += loss * static_cast<double>(len);
      seen += len;

      // Running statistics use the unbiased batch variance.
      const double m = arch.bn_momentum;
      const double unbias = static_cast<double>(len) / static_cast<double>(len - 1);
      for (std::size_t l = 0; l < p.norms.size(); ++l) {
        auto& bn = p.norms[l];
        bn.running_mean = (1.0 - m) * bn.running_mean + m * batch_stats[l].first;
        bn.running_var = (1.0 - m) * bn.running_var + m * unbias * batch_stats[l].second;
      }

      ++step;
      const ParamRefs pr = collect(p, p);
      const ParamRefs gr = collect(grads, grads);
      const ParamRefs s1 = collect(state1, state1);
      const ParamRefs s2 = collect(state2, state2);
      for (std::size_t t = 0; t < pr.data.size(); ++t) {
        for (Eigen::Index i = 0; i < pr.size[t]; ++i) {
          double& w = pr.data[t][i];
          const double gi = gr.data[t][i];
          // Decoupled weight decay.
          w -= lr * cfg.weight_decay * w;
          if (cfg.optimizer == OptimizerKind::kSgd) {
            double& vel = s1.data[t][i];
            vel = cfg.momentum * vel + gi;
            w -= lr * vel;
          } else {
            double& mom = s1.data[t][i];
            double& sec = s2.data[t][i];
            mom = beta1 * mom + (1.0 - beta1) * gi;
            sec = beta2 * sec + (1.0 - beta2) * gi * gi;
            const double mh = mom / (1.0 - std::pow(beta1, static_cast<double>(step)));
            const double vh = sec / (1.0 - std::pow(beta2, static_cast<double>(step)));
            w -= lr * mh / (std::sqrt(vh) + adam_eps);
          }
        }
      }
    }
    epoch_loss /= static_cast<double>(std::max<Eigen::Index>(seen, 1));
    result.loss_history.push_back(epoch_loss);
    result.lr_history.push_back(lr);

    if (epoch_loss < best * (1.0 - cfg.plateau_threshold)) {
      best = epoch_loss;
      bad_epochs = 0;
      stale_epochs = 0;
    } else {
      ++bad_epochs;
      ++stale_epochs;
    }
    if (bad_epochs > cfg.lr_patience) {
      lr *= cfg.lr_factor;
      bad_epochs = 0;
    }
    if (cfg.early_stop_patience > 0 && stale_epochs >= cfg.early_stop_patience) break;
  }
  return result;
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

constexpr char kProbeMagic[4] = {'G', 'R', 'D', 'P'};

void put_u32(std::ostream& out, std::uint32_t v) {
  char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xffu);
  out.write(b, 4);
}

void put_f64(std::ostream& out, double d) {
  const auto bits = std::bit_cast<std::uint64_t>(d);
  char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<char>((bits >> (8 * i)) & 0xffu);
  out.write(b, 8);
}

std::uint32_t get_u32(std::istream& in) {
  unsigned char b[4];
  in.read(reinterpret_cast<char*>(b), 4);
  if (in.gcount() != 4) fail(ErrorKind::kTruncated, "probe checkpoint ended early");
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

double get_f64(std::istream& in) {
  unsigned char b[8];
  in.read(reinterpret_cast<char*>(b), 8);
  if (in.gcount() != 8) fail(ErrorKind::kTruncated, "probe checkpoint ended early");
  std::uint64_t bits = 0;
  for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  const double d = std::bit_cast<double>(bits);
  if (!std::isfinite(d)) fail(ErrorKind::kCorruptTensor, "probe checkpoint has a non-finite value");
  return d;
}

template <typename Visit>
void visit_tensors(ProbeParameters& p, Visit&& visit) {
  for (std::size_t l = 0; l < p.hidden.size(); ++l) {
    visit(p.hidden[l].weight.data(), p.hidden[l].weight.size());
    visit(p.hidden[l].bias.data(), p.hidden[l].bias.size());
    visit(p.norms[l].gamma.data(), p.norms[l].gamma.size());
    visit(p.norms[l].beta.data(), p.norms[l].beta.size());
    visit(p.norms[l].running_mean.data(), p.norms[l].running_mean.size());
    visit(p.norms[l].running_var.data(), p.norms[l].running_var.size());
  }
  visit(p.output.weight.data(), p.output.weight.size());
  visit(p.output.bias.data(), p.output.bias.size());
}

json train_config_json(const TrainConfig& c) {
  return {{"epochs", c.epochs},
          {"batch_size", c.batch_size},
          {"learning_rate", c.learning_rate},
          {"weight_decay", c.weight_decay},
          {"lr_factor", c.lr_factor},
          {"lr_patience", c.lr_patience},
          {"seed", c.seed},
          {"decision_threshold", c.decision_threshold},
          {"plateau_threshold", c.plateau_threshold},
          {"optimizer", c.optimizer == OptimizerKind::kSgd ? "sgd" : "adamw"},
          {"momentum", c.momentum},
          {"early_stop_patience", c.early_stop_patience}};
}

}  // namespace

void save_probe(std::ostream& out, const ProbeParameters& params, const TrainConfig& cfg) {
  ProbeParameters p = params;
  const json header = {{"format_version", kProbeFormatVersion},
                       {"input_dim", p.arch.input_dim},
                       {"widths", p.arch.hidden},
                       {"dropout", p.arch.dropout},
                       {"negative_slope", p.arch.negative_slope},
                       {"bn_eps", p.arch.bn_eps},
                       {"bn_momentum", p.arch.bn_momentum},
                       {"seed", p.seed},
                       {"train_config", train_config_json(cfg)}};
  const std::string text = header.dump();
  out.write(kProbeMagic, 4);
  put_u32(out, kProbeFormatVersion);
  put_u32(out, static_cast<std::uint32_t>(text.size()));
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  visit_tensors(p, [&](double* d, Eigen::Index count) {
    for (Eigen::Index i = 0; i < count; ++i) put_f64(out, d[i]);
  });
  if (!out) fail(ErrorKind::kIo, "failed writing probe checkpoint");
}

ProbeParameters load_probe(std::istream& in) {
  char magic[4];
  in.read(magic, 4);
  if (in.gcount() != 4) fail(ErrorKind::kTruncated, "probe checkpoint ended early");
  if (std::memcmp(magic, kProbeMagic, 4) != 0) fail(ErrorKind::kFormat, "bad probe magic");
  const std::uint32_t version = get_u32(in);
  if (version != kProbeFormatVersion) {
    fail(ErrorKind::kFormat, "unsupported probe checkpoint version " + std::to_string(version));
  }
  const std::uint32_t header_len = get_u32(in);
  if (header_len > (1u << 24)) fail(ErrorKind::kFormat, "probe header too large");
  std::string text(header_len, '\0');
  in.read(text.data(), header_len);
  if (static_cast<std::uint32_t>(in.gcount()) != header_len) {
    fail(ErrorKind::kTruncated, "probe checkpoint ended early");
  }
  ProbeArchitecture arch;
  std::uint64_t seed = 0;
  try {
    const json h = json::parse(text);
    arch.input_dim = h.at("input_dim").get<int>();
    arch.hidden = h.at("widths").get<std::vector<int>>();
    arch.dropout = h.at("dropout").get<double>();
    arch.negative_slope = h.at("negative_slope").get<double>();
    arch.bn_eps = h.at("bn_eps").get<double>();
    arch.bn_momentum = h.at("bn_momentum").get<double>();
    seed = h.at("seed").get<std::uint64_t>();
  } catch (const json::exception& e) {
    fail(ErrorKind::kFormat, std::string("probe header: ") + e.what());
  }
  ProbeParameters p = init_probe(arch, seed);
  visit_tensors(p, [&](double* d, Eigen::Index count) {
    for (Eigen::Index i = 0; i < count; ++i) d[i] = get_f64(in);
  });
  for (const auto& bn : p.norms) {
    if ((bn.running_var.array() <= 0.0).any()) {
      fail(ErrorKind::kFormat, "probe checkpoint has a non-positive running variance");
    }
  }
  return p;
}

void save_probe_file(const std::filesystem::path& path, const ProbeParameters& p,
                     const TrainConfig& cfg) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(ErrorKind::kIo, "cannot write " + path.string());
  save_probe(out, p, cfg);
}

ProbeParameters load_probe_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::kIo, "cannot open " + path.string());
  return load_probe(in);
}

}  // namespace grade
