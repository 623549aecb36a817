// Copyright (c) 2026, The grade-probe Authors
// SPDX-License-Identifier: Apache-2.0
//
// Knowledge-gap probe: a feed-forward classifier over per-layer rank ratios.
//
//   L -> 256 -> 128 -> 64 -> 32 -> 1
//
// Each hidden block is Linear -> BatchNorm -> LeakyReLU(0.01) -> Dropout(0.5);
// the head is Linear -> sigmoid. Weights use Kaiming-uniform initialization
// with the leaky-ReLU gain; biases start at zero, batch-norm at unit scale
// and zero shift.

#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <span>
#include <vector>

#include "grade/capture.hpp"
#include "grade/features.hpp"
#include "grade/linalg.hpp"
#include "grade/rng.hpp"

namespace grade {

struct ProbeArchitecture {
  int input_dim = 1;
  std::vector<int> hidden = {256, 128, 64, 32};
  double dropout = 0.5;
  double negative_slope = 0.01;
  double bn_eps = 1e-5;
  double bn_momentum = 0.1;

  bool operator==(const ProbeArchitecture&) const = default;
};

struct DenseLayer {
  Matrix weight;  // out x in
  Vector bias;    // out
};

struct BatchNormState {
  Vector gamma;
  Vector beta;
  Vector running_mean;
  Vector running_var;
};

struct ProbeParameters {
  ProbeArchitecture arch;
  std::vector<DenseLayer> hidden;
  std::vector<BatchNormState> norms;
  DenseLayer output;
  std::uint64_t seed = 42;
};

enum class OptimizerKind { kSgd, kAdamW };

struct TrainConfig {
  int epochs = 100;
  int batch_size = 64;
  double learning_rate = 5e-3;
  double weight_decay = 1e-5;
  double lr_factor = 0.75;
  int lr_patience = 5;
  std::uint64_t seed = 42;
  double decision_threshold = 0.5;
  /// Relative improvement required by the plateau scheduler.
  double plateau_threshold = 1e-4;
  OptimizerKind optimizer = OptimizerKind::kSgd;
  double momentum = 0.0;  // SGD only
  /// Stop once the epoch loss fails to improve for this many epochs. 0 runs
  /// every epoch.
  int early_stop_patience = 0;

  void validate() const;
};

enum class ProbeMode { kTrain, kEval };

/// Kaiming bound for a layer with the given fan-in and leaky slope.
double kaiming_bound(int fan_in, double negative_slope);

ProbeParameters init_probe(int input_dim, std::uint64_t seed);
ProbeParameters init_probe(const ProbeArchitecture& arch, std::uint64_t seed);

/// Scores for each row of x. Train mode normalizes with batch statistics
/// (batch of >= 2 rows) and draws dropout masks from `rng`; running
/// statistics are not touched. Eval mode is deterministic.
Vector probe_forward_batch(const ProbeParameters& p, const Matrix& x, ProbeMode mode,
                           Rng* rng = nullptr);

/// Single-sample eval-mode score in (0, 1).
double probe_forward(const ProbeParameters& p, std::span<const double> x);

struct TrainResult {
  ProbeParameters params;
  std::vector<double> loss_history;  // epoch mean BCE
  std::vector<double> lr_history;    // learning rate used during each epoch
};

/// Trains on answerable (1) vs unanswerable (0) features. Ambiguous and
/// unlabeled rows are dropped. Throws DegenerateLabels on a single class.
TrainResult train_probe(const std::vector<FeatureVector>& data, const TrainConfig& cfg);
TrainResult train_probe(const std::vector<FeatureVector>& data, const TrainConfig& cfg,
                        ProbeArchitecture arch);

struct Prediction {
  Label label = Label::kUnanswerable;
  double score = 0.0;
};

/// score >= threshold means answerable.
Prediction predict_from_score(double score, double threshold = 0.5);
Prediction predict(const ProbeParameters& p, std::span<const double> x, double threshold = 0.5);

/// L2 norm over every trainable parameter.
double parameter_norm(const ProbeParameters& p);

/// Checkpoint: "GRDP" | u32 version | u32 header bytes | JSON header |
/// f64 little-endian payload.
void save_probe(std::ostream& out, const ProbeParameters& p, const TrainConfig& cfg);
ProbeParameters load_probe(std::istream& in);
void save_probe_file(const std::filesystem::path& path, const ProbeParameters& p,
                     const TrainConfig& cfg);
ProbeParameters load_probe_file(const std::filesystem::path& path);

inline constexpr std::uint32_t kProbeFormatVersion = 1;

}  // namespace grade
