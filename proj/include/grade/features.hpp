// Copyright (c) 2026, The grade-probe Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <iosfwd>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "grade/capture.hpp"
#include "grade/linalg.hpp"

namespace grade {

/// How the hidden-state stable rank (denominator) picks its exponent.
/// kMatched follows the objective: linear for pre, squared for pos.
enum class ExponentPairing { kMatched, kLinear, kSquared };

ExponentPairing parse_exponent_pairing(std::string_view s);

struct FeatureOptions {
  ExponentPairing pairing = ExponentPairing::kMatched;
  double pinv_rel_tol = kPinvRelTol;
};

/// Exponent of the gradient stable rank: linear for pre, squared for pos.
RankExponent gradient_exponent(Objective objective);
RankExponent hidden_exponent(Objective objective, ExponentPairing pairing);

/// srank(C_g) / srank(C_h) for one (h, delta) pair. Throws
/// DegenerateSampleError tagged with `layer` / `step` on a zero spectrum.
double rank_ratio(const Matrix& h, const Matrix& delta, Objective objective,
                  const FeatureOptions& opts = {}, int layer = -1, int step = -1);

double layer_rank_ratio(const LayerCapture& lc, Objective objective,
                        const FeatureOptions& opts = {});

struct FeatureVector {
  std::string sample_id;
  std::vector<double> values;
  Objective objective = Objective::kPre;
  Label label = Label::kUnlabeled;
  std::string dataset_name;
  std::optional<std::string> paraphrase_group;

  bool operator==(const FeatureVector&) const = default;
};

/// Per-layer ratios averaged over the record's reasoning steps.
std::vector<double> stepwise_ratios(const CaptureRecord& r, const FeatureOptions& opts = {});

/// One ratio per layer. Pos records with step boundaries use the stepwise
/// average, which requires step captures to be present.
FeatureVector feature_vector(const CaptureRecord& r, const FeatureOptions& opts = {});

struct FeatureFailure {
  std::string sample_id;
  std::string reason;
};

struct FeatureBatch {
  std::vector<FeatureVector> features;  // in input order, degenerate ones omitted
  std::vector<FeatureFailure> skipped;
};

/// Runs feature_vector over records with up to `jobs` worker threads.
/// Degenerate samples are collected in `skipped`; any other error propagates.
FeatureBatch compute_features(const std::vector<CaptureRecord>& records,
                              const FeatureOptions& opts = {}, int jobs = 1);

// ---------------------------------------------------------------------------
// Token-level interpretation

struct TokenScoreMap {
  std::string sample_id;
  std::vector<std::string> tokens;
  std::vector<double> raw_scores;
  std::vector<double> normalized_scores;  // filled by normalize_corpus
  int source_layer = 0;
};

/// Row sums of the last `num_tokens` rows of c, clamped at zero when asked.
std::vector<double> row_sum_scores(const Matrix& c, Eigen::Index num_tokens, bool clamp = true);

/// Row sums of C_g at `layer` (negative: last layer) for the response tokens.
TokenScoreMap token_scores(const CaptureRecord& r, int layer = -1, bool clamp = true,
                           const FeatureOptions& opts = {});

/// Min-max normalization over every raw score in the corpus. A constant
/// corpus maps to 0.5.
std::vector<TokenScoreMap> normalize_corpus(std::vector<TokenScoreMap> maps);

// ---------------------------------------------------------------------------
// Serialization

void write_features_csv(std::ostream& out, const std::vector<FeatureVector>& fs);
void write_features_jsonl(std::ostream& out, const std::vector<FeatureVector>& fs);
std::vector<FeatureVector> read_features_csv(std::istream& in);
std::vector<FeatureVector> read_features_jsonl(std::istream& in);

/// Chooses the reader by extension (.csv, otherwise JSON lines).
std::vector<FeatureVector> read_features_file(const std::filesystem::path& p);
void write_features_file(const std::filesystem::path& p, const std::vector<FeatureVector>& fs);

nlohmann::json token_scores_json(const std::vector<TokenScoreMap>& maps);

/// Standalone HTML page with one colored span per token. Each span carries
/// its normalized score in a data-score attribute.
std::string render_heatmap_html(const TokenScoreMap& m);

}  // namespace grade
