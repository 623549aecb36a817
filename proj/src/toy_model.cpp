// Copyright (c) 2026, The grade-probe Authors
// SPDX-License-Identifier: Apache-2.0

#include "grade/toy_model.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

#include "grade/error.hpp"
#include "grade/rng.hpp"

namespace grade {

void ModelConfig::validate() const {
  if (num_layers < 1) fail(ErrorKind::kInvalidInput, "model needs at least one layer");
  if (d_model < 1 || d_ff < 1 || vocab_size < 1) {
    fail(ErrorKind::kInvalidInput, "model dimensions must be positive");
  }
}

double silu(double u) { return u / (1.0 + std::exp(-u)); }

double silu_grad(double u) {
  const double s = 1.0 / (1.0 + std::exp(-u));
  return s * (1.0 + u * (1.0 - s));
}

namespace {

void require_block_shapes(const Matrix& x, const BlockWeights& w) {
  if (w.w_gate.cols() != x.cols() || w.w_up.cols() != x.cols() ||
      w.w_gate.rows() != w.w_up.rows() || w.w_down.cols() != w.w_gate.rows() ||
      w.w_down.rows() != x.cols()) {
    fail(ErrorKind::kShapeMismatch, "gated MLP weights do not match the input width");
  }
}

Matrix random_matrix(Rng& rng, Eigen::Index rows, Eigen::Index cols, double scale) {
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = scale * rng.normal();
  return m;
}

// Row-wise log-softmax, max-subtracted.
Vector log_softmax(const Eigen::Ref<const Vector>& z) {
  const double mx = z.maxCoeff();
  const double lse = mx + std::log((z.array() - mx).exp().sum());
  return z.array() - lse;
}

}  // namespace

MlpOutput mlp_forward(const Matrix& x, const BlockWeights& w) {
  require_block_shapes(x, w);
  const Matrix a = x * w.w_gate.transpose();
  const Matrix b = x * w.w_up.transpose();
  MlpOutput out;
  out.h = a.unaryExpr([](double u) { return silu(u); }).cwiseProduct(b);
  out.o = out.h * w.w_down.transpose();
  return out;
}

Matrix mlp_hidden_staged(const Matrix& x, const BlockWeights& w) {
  require_block_shapes(x, w);
  Matrix gate = x * w.w_gate.transpose();
  for (Eigen::Index i = 0; i < gate.size(); ++i) gate.data()[i] = silu(gate.data()[i]);
  const Matrix up = x * w.w_up.transpose();
  Matrix h(gate.rows(), gate.cols());
  for (Eigen::Index i = 0; i < h.size(); ++i) h.data()[i] = gate.data()[i] * up.data()[i];
  return h;
}

double loss_pre(const Vector& logits) {
  if (logits.size() < 1 || !logits.allFinite()) {
    fail(ErrorKind::kInvalidInput, "loss_pre: logits must be finite and nonempty");
  }
  const Vector lp = log_softmax(logits);
  double h = 0.0;
  for (Eigen::Index j = 0; j < lp.size(); ++j) h -= std::exp(lp(j)) * lp(j);
  return std::max(0.0, h);
}

namespace {

TokenRange resolve_range(Eigen::Index n, std::optional<TokenRange> range) {
  const TokenRange r = range.value_or(TokenRange{0, static_cast<int>(n)});
  if (r.begin >= r.end) fail(ErrorKind::kInvalidInput, "empty token range for loss_pos");
  if (r.begin < 0 || r.end > n) fail(ErrorKind::kInvalidInput, "loss range outside the sequence");
  return r;
}

void require_targets(const ForwardTrace& trace, std::span<const int> targets, TokenRange r) {
  if (static_cast<Eigen::Index>(targets.size()) != trace.length()) {
    fail(ErrorKind::kShapeMismatch, "loss_pos: need one target per position");
  }
  for (int t = r.begin; t < r.end; ++t) {
    if (targets[t] < 0 || targets[t] >= trace.logits.cols()) {
      fail(ErrorKind::kInvalidInput, "loss_pos: target id outside the vocabulary");
    }
  }
}

}  // namespace

double loss_pos(const ForwardTrace& trace, std::span<const int> targets,
                std::optional<TokenRange> range) {
  const TokenRange r = resolve_range(trace.length(), range);
  require_targets(trace, targets, r);
  double loss = 0.0;
  for (int t = r.begin; t < r.end; ++t) {
    loss -= log_softmax(trace.logits.row(t).transpose())(targets[t]);
  }
  return loss;
}

ToyModel::ToyModel(ModelConfig cfg) : cfg_(cfg) {
  cfg_.validate();
  Rng rng(cfg_.seed);
  const double in_scale = 1.0 / std::sqrt(static_cast<double>(cfg_.d_model));
  const double ff_scale = 1.0 / std::sqrt(static_cast<double>(cfg_.d_ff));
  w_.embedding = random_matrix(rng, cfg_.vocab_size, cfg_.d_model, 1.0);
  for (int l = 0; l < cfg_.num_layers; ++l) {
    BlockWeights b;
    b.w_gate = random_matrix(rng, cfg_.d_ff, cfg_.d_model, in_scale);
    b.w_up = random_matrix(rng, cfg_.d_ff, cfg_.d_model, in_scale);
    b.w_down = random_matrix(rng, cfg_.d_model, cfg_.d_ff, ff_scale);
    w_.blocks.push_back(std::move(b));
  }
  w_.head = random_matrix(rng, cfg_.vocab_size, cfg_.d_model, in_scale);
}

ToyModel::ToyModel(ModelConfig cfg, ModelWeights weights) : cfg_(cfg), w_(std::move(weights)) {
  cfg_.validate();
  const auto v = cfg_.vocab_size, dm = cfg_.d_model, dff = cfg_.d_ff;
  bool ok = w_.embedding.rows() == v && w_.embedding.cols() == dm && w_.head.rows() == v &&
            w_.head.cols() == dm && static_cast<int>(w_.blocks.size()) == cfg_.num_layers;
  for (const auto& b : w_.blocks) {
    ok = ok && b.w_gate.rows() == dff && b.w_gate.cols() == dm && b.w_up.rows() == dff &&
         b.w_up.cols() == dm && b.w_down.rows() == dm && b.w_down.cols() == dff;
  }
  if (!ok) fail(ErrorKind::kShapeMismatch, "weights do not match the model config");
}

ForwardTrace ToyModel::forward(std::span<const int> tokens) const {
  if (tokens.empty()) fail(ErrorKind::kInvalidInput, "forward: empty token sequence");
  const auto n = static_cast<Eigen::Index>(tokens.size());
  Matrix x(n, cfg_.d_model);
  for (Eigen::Index t = 0; t < n; ++t) {
    const int id = tokens[static_cast<std::size_t>(t)];
    if (id < 0 || id >= cfg_.vocab_size) {
      fail(ErrorKind::kInvalidInput, "forward: token id " + std::to_string(id) +
                                         " outside the vocabulary");
    }
    x.row(t) = w_.embedding.row(id);
  }
  ForwardTrace tr;
  tr.tokens.assign(tokens.begin(), tokens.end());
  for (const auto& b : w_.blocks) {
    tr.block_inputs.push_back(x);
    Matrix a = x * b.w_gate.transpose();
    Matrix u = x * b.w_up.transpose();
    Matrix h = a.unaryExpr([](double v) { return silu(v); }).cwiseProduct(u);
    Matrix o = h * b.w_down.transpose();
    x += o;
    tr.gate_pre.push_back(std::move(a));
    tr.up_pre.push_back(std::move(u));
    tr.hidden.push_back(std::move(h));
    tr.outputs.push_back(std::move(o));
  }
  tr.final_state = x;
  tr.logits = x * w_.head.transpose();
  tr.model_version = version_;
  tr.owner = this;
  return tr;
}

Gradients ToyModel::backward(const ForwardTrace& trace, const LossSpec& spec,
                             const BackwardOptions& opts) const {
  if (trace.owner != this || trace.model_version != version_) {
    fail(ErrorKind::kStaleTrace, "backward: trace does not belong to the current weights");
  }
  const Eigen::Index n = trace.length();
  Gradients grads;
  Matrix dz = Matrix::Zero(n, cfg_.vocab_size);

  if (spec.kind == LossKind::kPre) {
    const int pos = spec.position.value_or(static_cast<int>(n) - 1);
    if (pos < 0 || pos >= n) fail(ErrorKind::kInvalidInput, "loss position outside the sequence");
    const Vector lp = log_softmax(trace.logits.row(pos).transpose());
    double entropy = 0.0;
    for (Eigen::Index j = 0; j < lp.size(); ++j) entropy -= std::exp(lp(j)) * lp(j);
    // dH/dz_j = -p_j (log p_j + H)
    for (Eigen::Index j = 0; j < lp.size(); ++j) dz(pos, j) = -std::exp(lp(j)) * (lp(j) + entropy);
    grads.loss = std::max(0.0, entropy);
  } else {
    const TokenRange r = resolve_range(n, spec.range);
    require_targets(trace, spec.targets, r);
    for (int t = r.begin; t < r.end; ++t) {
      const Vector lp = log_softmax(trace.logits.row(t).transpose());
      grads.loss -= lp(spec.targets[t]);
      dz.row(t) = lp.array().exp().transpose();
      dz(t, spec.targets[t]) -= 1.0;
    }
  }

  Matrix dx = dz * w_.head;
  const int num_layers = cfg_.num_layers;
  grads.delta.resize(num_layers);
  grads.g.resize(num_layers);
  grads.d_gate.resize(num_layers);
  grads.d_up.resize(num_layers);
  for (int l = num_layers - 1; l >= 0; --l) {
    const auto& b = w_.blocks[static_cast<std::size_t>(l)];
    const Matrix& x = trace.block_inputs[l];
    const Matrix& a = trace.gate_pre[l];
    const Matrix& u = trace.up_pre[l];
    grads.delta[l] = dx;  // x_{l+1} = x_l + o_l, so dL/do_l = dL/dx_{l+1}
    grads.g[l] = grad_explicit(trace.hidden[l], grads.delta[l]);
    const Matrix dh = dx * b.w_down;
    Matrix da(n, cfg_.d_ff);
    Matrix du(n, cfg_.d_ff);
    for (Eigen::Index i = 0; i < da.size(); ++i) {
      const double av = a.data()[i];
      da.data()[i] = dh.data()[i] * u.data()[i] * silu_grad(av) * opts.silu_grad_scale;
      du.data()[i] = dh.data()[i] * silu(av);
    }
    grads.d_gate[l] = da.transpose() * x;
    grads.d_up[l] = du.transpose() * x;
    dx += da * b.w_gate + du * b.w_up;
  }
  return grads;
}

double ToyModel::loss(std::span<const int> tokens, const LossSpec& spec) const {
  const ForwardTrace tr = forward(tokens);
  if (spec.kind == LossKind::kPre) {
    const int pos = spec.position.value_or(static_cast<int>(tr.length()) - 1);
    if (pos < 0 || pos >= tr.length()) {
      fail(ErrorKind::kInvalidInput, "loss position outside the sequence");
    }
    return loss_pre(tr.logits.row(pos).transpose());
  }
  return loss_pos(tr, spec.targets, spec.range);
}

// ---------------------------------------------------------------------------

std::string token_text(int id) {
  if (id % 7 == 0) return ".";
  return "w" + std::to_string(id);
}

std::vector<std::string> default_step_delimiters() { return {".", "?", "!", "\n"}; }

std::vector<int> segment_steps(std::span<const std::string> tokens,
                               std::span<const std::string> delimiters) {
  std::vector<int> starts;
  if (tokens.empty()) return starts;
  starts.push_back(0);
  for (std::size_t i = 0; i + 1 < tokens.size(); ++i) {
    if (std::find(delimiters.begin(), delimiters.end(), tokens[i]) != delimiters.end()) {
      starts.push_back(static_cast<int>(i + 1));
    }
  }
  return starts;
}

namespace {

std::vector<LayerCapture> to_layers(const ForwardTrace& tr, const Gradients& g) {
  std::vector<LayerCapture> layers;
  for (std::size_t l = 0; l < tr.hidden.size(); ++l) {
    LayerCapture lc;
    lc.layer_index = static_cast<std::uint32_t>(l);
    lc.h = tr.hidden[l].cast<float>();
    lc.delta = g.delta[l].cast<float>();
    layers.push_back(std::move(lc));
  }
  return layers;
}

struct TeacherForced {
  std::vector<int> inputs;
  std::vector<int> targets;
  int first_scored = 0;
};

// query + response[:-1] as inputs; position first_scored + j predicts response[j].
TeacherForced teacher_forced(std::span<const int> query, std::span<const int> response) {
  TeacherForced tf;
  tf.inputs.assign(query.begin(), query.end());
  tf.inputs.insert(tf.inputs.end(), response.begin(), response.end() - 1);
  tf.first_scored = static_cast<int>(query.size()) - 1;
  tf.targets.assign(tf.inputs.size(), -1);
  for (std::size_t j = 0; j < response.size(); ++j) {
    tf.targets[static_cast<std::size_t>(tf.first_scored) + j] = response[j];
  }
  return tf;
}

double greedy_accuracy(const ForwardTrace& tr, const TeacherForced& tf) {
  int hits = 0, total = 0;
  for (std::size_t t = static_cast<std::size_t>(tf.first_scored); t < tf.targets.size(); ++t) {
    Eigen::Index best;
    tr.logits.row(static_cast<Eigen::Index>(t)).maxCoeff(&best);
    hits += best == tf.targets[t];
    ++total;
  }
  return total ? static_cast<double>(hits) / total : 0.0;
}

}  // namespace

CaptureRecord capture_sequence(const ToyModel& model, const std::string& sample_id,
                               std::span<const int> query, std::span<const int> response,
                               Objective objective, bool with_steps) {
  if (query.empty() || response.empty()) {
    fail(ErrorKind::kInvalidInput, "capture_sequence: query and response must be nonempty");
  }
  CaptureRecord rec;
  rec.sample_id = sample_id;
  rec.objective = objective;

  const TeacherForced tf = teacher_forced(query, response);
  const ForwardTrace full = model.forward(tf.inputs);
  rec.accuracy_over_samples = greedy_accuracy(full, tf);

  if (objective == Objective::kPre) {
    const ForwardTrace tr = model.forward(query);
    LossSpec spec;
    spec.kind = LossKind::kPre;
    const Gradients g = model.backward(tr, spec);
    rec.loss_value = g.loss;
    rec.layers = to_layers(tr, g);
    return rec;
  }

  LossSpec spec;
  spec.kind = LossKind::kPos;
  spec.targets = tf.targets;
  spec.range = TokenRange{tf.first_scored, static_cast<int>(tf.inputs.size())};
  const Gradients g = model.backward(full, spec);
  rec.loss_value = g.loss;
  rec.layers = to_layers(full, g);
  for (int id : response) rec.tokens.push_back(token_text(id));

  if (with_steps) {
    const auto delims = default_step_delimiters();
    rec.step_boundaries = segment_steps(rec.tokens, delims);
    for (std::size_t k = 0; k < rec.step_boundaries.size(); ++k) {
      const StepSpan span = step_span(rec, k);
      const int prefix = tf.first_scored + span.end;
      const std::span<const int> prefix_inputs(tf.inputs.data(), static_cast<std::size_t>(prefix));
      const ForwardTrace tr = model.forward(prefix_inputs);
      LossSpec step_spec;
      step_spec.kind = LossKind::kPos;
      step_spec.targets.assign(tf.targets.begin(), tf.targets.begin() + prefix);
      step_spec.range = TokenRange{tf.first_scored + span.begin, prefix};
      rec.steps.push_back({to_layers(tr, model.backward(tr, step_spec))});
    }
  }
  return rec;
}

SynthDataset synth_dataset(const SynthConfig& cfg) {
  cfg.model.validate();
  if (cfg.model.vocab_size < 4) fail(ErrorKind::kInvalidInput, "synth needs a vocabulary of >= 4");
  if (cfg.num_samples < 0 || cfg.fit_steps < 0 || cfg.query_len < 1 || cfg.response_len < 1) {
    fail(ErrorKind::kInvalidInput, "synth sizes must be positive");
  }
  SynthDataset ds{ToyModel(cfg.model), {}};
  Rng rng(cfg.seed);

  // Split the vocabulary into a fitted half and a held-out half, each with its
  // own successor cycle.
  const int v = cfg.model.vocab_size;
  std::vector<int> ids(static_cast<std::size_t>(v));
  for (int i = 0; i < v; ++i) ids[static_cast<std::size_t>(i)] = i;
  rng.shuffle(ids.begin(), ids.end());
  const std::vector<int> known(ids.begin(), ids.begin() + v / 2);
  const std::vector<int> unknown(ids.begin() + v / 2, ids.end());
  std::vector<int> successor(static_cast<std::size_t>(v));
  for (const auto* pool : {&known, &unknown}) {
    for (std::size_t i = 0; i < pool->size(); ++i) {
      successor[static_cast<std::size_t>((*pool)[i])] = (*pool)[(i + 1) % pool->size()];
    }
  }

  // Fit the MLP blocks on the known transitions with full-batch descent.
  {
    LossSpec spec;
    spec.kind = LossKind::kPos;
    for (int id : known) spec.targets.push_back(successor[static_cast<std::size_t>(id)]);
    const double step = cfg.learning_rate / static_cast<double>(known.size());
    for (int it = 0; it < cfg.fit_steps; ++it) {
      const ForwardTrace tr = ds.model.forward(known);
      if (!tr.logits.allFinite()) {
        fail(ErrorKind::kInvalidInput, "model fit diverged; lower the fit learning rate");
      }
      const Gradients g = ds.model.backward(tr, spec);
      auto& w = ds.model.mutable_weights();
      for (std::size_t l = 0; l < w.blocks.size(); ++l) {
        w.blocks[l].w_gate -= step * g.d_gate[l];
        w.blocks[l].w_up -= step * g.d_up[l];
        w.blocks[l].w_down -= step * g.g[l];
      }
    }
  }

  Rng para_rng(cfg.seed ^ 0x9e3779b97f4a7c15ULL);
  auto draw_len = [](Rng& r, int max_len, int min_len) {
    const int lo = std::max(min_len, max_len / 2);
    const int hi = std::max(lo, max_len);
    return lo + static_cast<int>(r.below(static_cast<std::uint64_t>(hi - lo + 1)));
  };
  for (int i = 0; i < cfg.num_samples; ++i) {
    const bool answerable = i % 2 == 0;
    const auto& pool = answerable ? known : unknown;
    auto pick = [&](Rng& r) { return pool[r.below(pool.size())]; };

    const int q_len = draw_len(rng, cfg.query_len, 1);
    const int r_len = draw_len(rng, cfg.response_len, 2);
    std::vector<int> query(static_cast<std::size_t>(q_len));
    for (auto& t : query) t = pick(rng);
    std::vector<int> response(static_cast<std::size_t>(r_len));
    if (answerable) {
      int cur = query.back();
      for (auto& t : response) t = cur = successor[static_cast<std::size_t>(cur)];
    } else {
      for (auto& t : response) t = pick(rng);
    }
    if (cfg.paraphrase) {
      // Same answer, reworded query: keep the final query token, redraw the rest.
      const int p_len = draw_len(para_rng, cfg.query_len, 1);
      std::vector<int> reworded(static_cast<std::size_t>(p_len));
      for (auto& t : reworded) t = pick(para_rng);
      reworded.back() = query.back();
      query = std::move(reworded);
    }

    char id[64];
    std::snprintf(id, sizeof id, "%05d", i);
    const std::string sample_id = cfg.dataset_name + "-" + id;
    CaptureRecord rec = capture_sequence(ds.model, sample_id, query, response, cfg.objective,
                                         cfg.segment_steps && cfg.objective == Objective::kPos);
    rec.label = answerable ? Label::kAnswerable : Label::kUnanswerable;
    rec.dataset_name = cfg.dataset_name;
    rec.paraphrase_group = sample_id;
    ds.records.push_back(std::move(rec));
  }
  return ds;
}

}  // namespace grade
