// Copyright (c) 2026, The grade-probe Authors
// SPDX-License-Identifier: Apache-2.0
//
// Desk-scale causal LM made of gated MLP blocks:
//
//   x_0 = E[tokens]
//   h_l = silu(x_l W_gate^T) * (x_l W_up^T),  o_l = h_l W_down^T
//   x_{l+1} = x_l + o_l
//   z = x_L H^T
//
// There is no attention, so position t only ever sees token t. The model
// exists to produce (h, delta) captures with exactly known gradients.

#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "grade/capture.hpp"
#include "grade/linalg.hpp"

namespace grade {

enum class Activation { kSiLU };

struct ModelConfig {
  int num_layers = 4;
  int d_model = 16;
  int d_ff = 32;
  int vocab_size = 32;
  Activation activation = Activation::kSiLU;
  std::uint64_t seed = 42;

  void validate() const;
};

struct BlockWeights {
  Matrix w_gate;  // d_ff x d_model
  Matrix w_up;    // d_ff x d_model
  Matrix w_down;  // d_model x d_ff
};

struct ModelWeights {
  Matrix embedding;  // V x d_model
  std::vector<BlockWeights> blocks;
  Matrix head;       // V x d_model
};

double silu(double u);
double silu_grad(double u);

struct MlpOutput {
  Matrix h;  // n x d_ff
  Matrix o;  // n x d_model
};

/// One gated MLP block.
MlpOutput mlp_forward(const Matrix& x, const BlockWeights& w);

/// h evaluated in stages: gate pre-activation, activation, then the
/// elementwise product with the up projection held in separate buffers.
Matrix mlp_hidden_staged(const Matrix& x, const BlockWeights& w);

struct ForwardTrace {
  std::vector<int> tokens;
  std::vector<Matrix> block_inputs;  // x_l, per layer
  std::vector<Matrix> gate_pre;      // x_l W_gate^T
  std::vector<Matrix> up_pre;        // x_l W_up^T
  std::vector<Matrix> hidden;        // h_l
  std::vector<Matrix> outputs;       // o_l
  Matrix final_state;                // x_L
  Matrix logits;                     // n x V
  std::uint64_t model_version = 0;
  const void* owner = nullptr;

  Eigen::Index length() const noexcept { return logits.rows(); }
};

/// Entropy of softmax(z), max-subtracted.
double loss_pre(const Vector& logits);

struct TokenRange {
  int begin = 0;  // inclusive sequence position
  int end = 0;    // exclusive
};

/// -sum_{t in range} log softmax(z_t)[targets[t]]. targets has one entry
/// per position; entries outside the range are ignored. Full sequence when
/// range is absent.
double loss_pos(const ForwardTrace& trace, std::span<const int> targets,
                std::optional<TokenRange> range = std::nullopt);

enum class LossKind { kPre, kPos };

struct LossSpec {
  LossKind kind = LossKind::kPos;
  std::vector<int> targets;          // pos only
  std::optional<TokenRange> range;   // pos only
  std::optional<int> position;       // pre only; defaults to the last position
};

struct Gradients {
  double loss = 0.0;
  std::vector<Matrix> delta;   // dL/do_l, n x d_model
  std::vector<Matrix> g;       // dL/dW_down = delta^T h
  std::vector<Matrix> d_gate;  // dL/dW_gate
  std::vector<Matrix> d_up;    // dL/dW_up
};

struct BackwardOptions {
  /// Multiplies silu'(u). Anything other than 1 is a deliberately wrong
  /// derivative, used as a negative control for gradient checks.
  double silu_grad_scale = 1.0;
};

class ToyModel {
 public:
  /// Random weights drawn from cfg.seed.
  explicit ToyModel(ModelConfig cfg);
  ToyModel(ModelConfig cfg, ModelWeights weights);

  const ModelConfig& config() const noexcept { return cfg_; }
  const ModelWeights& weights() const noexcept { return w_; }
  /// Any mutable access invalidates outstanding traces.
  ModelWeights& mutable_weights() noexcept {
    ++version_;
    return w_;
  }
  std::uint64_t version() const noexcept { return version_; }

  ForwardTrace forward(std::span<const int> tokens) const;
  Gradients backward(const ForwardTrace& trace, const LossSpec& loss,
                     const BackwardOptions& opts = {}) const;

  /// Forward pass plus loss only.
  double loss(std::span<const int> tokens, const LossSpec& spec) const;

 private:
  ModelConfig cfg_;
  ModelWeights w_;
  std::uint64_t version_ = 0;
};

// ---------------------------------------------------------------------------
// Synthetic capture datasets

struct SynthConfig {
  ModelConfig model;
  int num_samples = 400;
  std::uint64_t seed = 42;
  int fit_steps = 300;
  double learning_rate = 0.02;
  int query_len = 4;
  int response_len = 8;
  Objective objective = Objective::kPos;
  bool segment_steps = false;
  /// Redraws every query prefix (keeping its last token) from a separate
  /// stream; everything else matches the unparaphrased dataset.
  bool paraphrase = false;
  std::string dataset_name = "synthetic";
};

/// Token id to display string. Every seventh id renders as a sentence
/// delimiter so that responses can be segmented into steps.
std::string token_text(int id);

/// Start indices of steps: a step ends at (and includes) a delimiter token.
std::vector<int> segment_steps(std::span<const std::string> tokens,
                               std::span<const std::string> delimiters);

std::vector<std::string> default_step_delimiters();

struct SynthDataset {
  ToyModel model;
  std::vector<CaptureRecord> records;
};

/// Builds a model, fits it on the successor map of half the vocabulary, then
/// captures answerable samples (chains inside the fitted half) and
/// unanswerable samples (held-out chains over the other half). Deterministic
/// under (cfg.model.seed, cfg.seed).
SynthDataset synth_dataset(const SynthConfig& cfg);

/// Builds the capture for an explicit token sequence. For pos, `query` is
/// followed by `response`; the loss scores the response under teacher
/// forcing. For pre, the loss is the entropy at the last query position.
CaptureRecord capture_sequence(const ToyModel& model, const std::string& sample_id,
                               std::span<const int> query, std::span<const int> response,
                               Objective objective, bool with_steps);

}  // namespace grade
