// Copyright (c) 2026, The grade-probe Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "grade/capture.hpp"
#include "grade/features.hpp"
#include "grade/probe.hpp"

namespace grade {

// ---------------------------------------------------------------------------
// Labels

enum class DatasetKind { kDefault, kGsm8k };

struct LabelRule {
  DatasetKind kind = DatasetKind::kDefault;
  double upper = 0.8;
  double lower = 0.2;
  int num_samples = 10;

  static LabelRule defaults();
  static LabelRule gsm8k();
  void validate() const;
};

/// gsm8k rule for dataset names containing "gsm8k" (any case), else default.
LabelRule rule_for_dataset(std::string_view dataset_name);

Label label_sample(double empirical_accuracy, const LabelRule& rule);

// ---------------------------------------------------------------------------
// Metrics

double accuracy(std::span<const Label> predicted, std::span<const Label> truth);

/// Mann-Whitney AUROC. labels are 1 (positive) or 0. Ties count one half.
double auroc(std::span<const double> scores, std::span<const int> labels);

/// Sum of the entropies of each probability row.
double p_entropy(const std::vector<std::vector<double>>& rows);

double pearson(std::span<const double> x, std::span<const double> y);

// ---------------------------------------------------------------------------
// Reports

struct SampleResult {
  std::string sample_id;
  std::optional<std::string> paraphrase_group;
  Label truth = Label::kUnlabeled;
  double score = 0.0;
  Label predicted = Label::kUnlabeled;
};

struct EvalReport {
  std::string method = "probe";
  double accuracy = 0.0;
  double auroc = 0.0;
  int n_pos = 0;
  int n_neg = 0;
  std::vector<SampleResult> samples;
  std::optional<double> delta_acc;
  std::optional<double> delta_acc_relative;
  std::optional<std::string> train_dataset;
  std::optional<std::string> test_dataset;
};

/// Fills accuracy, auroc and class counts from `samples`. Answerable is the
/// positive class.
void finalize_report(EvalReport& r);

EvalReport evaluate_probe(const ProbeParameters& p, const std::vector<FeatureVector>& test,
                          double threshold = 0.5);

nlohmann::json report_json(const EvalReport& r);
void write_report_csv(std::ostream& out, const EvalReport& r);

// ---------------------------------------------------------------------------
// Splits and experiments

/// Keeps only answerable and unanswerable rows.
std::vector<FeatureVector> labeled_only(const std::vector<FeatureVector>& fs);

struct Split {
  std::vector<FeatureVector> train;
  std::vector<FeatureVector> test;
};

/// Seeded per-class split; each side keeps input order.
Split stratified_split(const std::vector<FeatureVector>& fs, double test_fraction = 0.2,
                       std::uint64_t seed = 42);

struct Experiment {
  Split split;
  TrainResult training;
  EvalReport report;
};

Experiment run_experiment(const std::vector<FeatureVector>& fs, const TrainConfig& cfg,
                          double test_fraction = 0.2);

struct DeltaAcc {
  double absolute = 0.0;
  std::optional<double> relative;  // absent when the original accuracy is 0
  double original_accuracy = 0.0;
  double paraphrased_accuracy = 0.0;
  int eligible_pairs = 0;
};

/// Pairs samples by paraphrase_group (sample_id when absent). Both reports
/// must cover the same groups; pairs whose true label differs are skipped.
DeltaAcc delta_acc(const EvalReport& original, const EvalReport& paraphrased);

struct RobustnessResult {
  EvalReport original;
  EvalReport paraphrased;
  DeltaAcc delta;
};

/// Trains on the original train split and evaluates on the original test
/// split and on the paraphrases of those same samples.
RobustnessResult robustness(const std::vector<FeatureVector>& original,
                            const std::vector<FeatureVector>& paraphrased, const TrainConfig& cfg,
                            double test_fraction = 0.2);

struct NamedFeatures {
  std::string name;
  std::vector<FeatureVector> features;
};

struct TransferMatrix {
  std::vector<std::string> names;
  Matrix accuracy;  // row: train set, column: test set
  Matrix auroc;
};

/// Cell (a, b) evaluates on b's test split the probe trained on a's train
/// split.
TransferMatrix transfer_matrix(const std::vector<NamedFeatures>& sets, const TrainConfig& cfg,
                               double test_fraction = 0.2, int jobs = 1);

nlohmann::json transfer_json(const TransferMatrix& m);
/// Heatmap-ready grid of one metric ("accuracy" or "auroc").
void write_transfer_csv(std::ostream& out, const TransferMatrix& m, std::string_view metric);

// ---------------------------------------------------------------------------
// Scalar-threshold baselines

enum class LayerSelect { kMean, kLast, kMid };

LayerSelect parse_layer_select(std::string_view s);
std::string_view to_string(LayerSelect s) noexcept;

/// Mean of the ratios, the last one, or the one at index L/2.
double select_scalar(std::span<const double> values, LayerSelect select);

struct ThresholdFit {
  double threshold = 0.0;
  /// true: score >= threshold predicts answerable; false: score < threshold.
  bool ascending = true;
  double train_accuracy = 0.0;
};

/// Best single threshold over midpoints of the sorted unique scores, for both
/// orientations. Ties keep the lower threshold, then the ascending orientation.
ThresholdFit fit_threshold(std::span<const double> scores, std::span<const int> labels);

EvalReport threshold_baseline(const Split& split, LayerSelect select);

}  // namespace grade
