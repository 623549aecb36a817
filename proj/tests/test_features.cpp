// Copyright (c) 2026, The grade-probe Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>
#include <numeric>
#include <regex>
#include <sstream>

#include "fixtures.hpp"
#include "grade/features.hpp"
#include "grade/toy_model.hpp"
#include "oracles.hpp"

using namespace grade;
using fixture::kind_of;

namespace {

LayerCapture layer_from(const Matrix& h, const Matrix& delta, std::uint32_t index = 0) {
  LayerCapture lc;
  lc.layer_index = index;
  lc.h = h.cast<float>();
  lc.delta = delta.cast<float>();
  return lc;
}

Matrix permute_rows(const Matrix& m, const std::vector<int>& perm) {
  Matrix out(m.rows(), m.cols());
  for (std::size_t i = 0; i < perm.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = m.row(perm[i]);
  return out;
}

ModelConfig small_model() {
  ModelConfig c;
  c.num_layers = 3;
  c.d_model = 8;
  c.d_ff = 12;
  c.vocab_size = 21;
  c.seed = 5;
  return c;
}

}  // namespace

TEST(Exponents, ObjectiveAndPairing) {
  EXPECT_EQ(gradient_exponent(Objective::kPre), RankExponent::kLinear);
  EXPECT_EQ(gradient_exponent(Objective::kPos), RankExponent::kSquared);
  EXPECT_EQ(hidden_exponent(Objective::kPos, ExponentPairing::kMatched), RankExponent::kSquared);
  EXPECT_EQ(hidden_exponent(Objective::kPos, ExponentPairing::kLinear), RankExponent::kLinear);
  EXPECT_EQ(hidden_exponent(Objective::kPre, ExponentPairing::kSquared), RankExponent::kSquared);
  EXPECT_EQ(parse_exponent_pairing("linear"), ExponentPairing::kLinear);
  EXPECT_EQ(parse_exponent_pairing("matched"), ExponentPairing::kMatched);
  EXPECT_EQ(kind_of([] { parse_exponent_pairing("cubic"); }), ErrorKind::kInvalidInput);
}

TEST(RankRatio, OrthonormalHiddenAndRankOneGradient) {
  const Matrix h = Matrix::Identity(4, 4);
  Matrix delta = Matrix::Zero(4, 3);
  delta(0, 1) = 2.0;
  EXPECT_NEAR(rank_ratio(h, delta, Objective::kPos), 0.25, 1e-14);
  EXPECT_NEAR(rank_ratio(h, delta, Objective::kPre), 0.25, 1e-14);
}

TEST(RankRatio, KnownSpectra) {
  // C_h = diag(4, 1), C_g = diag(1, 1)
  Matrix h = Matrix::Zero(2, 3);
  h(0, 0) = 2.0;
  h(1, 1) = 1.0;
  const Matrix delta = Matrix::Identity(2, 2);
  EXPECT_NEAR(rank_ratio(h, delta, Objective::kPre), 2.0 / 1.25, 1e-13);
  EXPECT_NEAR(rank_ratio(h, delta, Objective::kPos), 2.0 / (1.0 + 1.0 / 16.0), 1e-13);
  FeatureOptions lin;
  lin.pairing = ExponentPairing::kLinear;
  EXPECT_NEAR(rank_ratio(h, delta, Objective::kPos, lin), 2.0 / 1.25, 1e-13);
}

TEST(RankRatio, ZeroGradientIsDegenerate) {
  Rng rng(1);
  const Matrix h = oracle::random_matrix(rng, 4, 6);
  try {
    rank_ratio(h, Matrix::Zero(4, 3), Objective::kPos, {}, 2, 1);
    FAIL() << "expected a degenerate sample";
  } catch (const DegenerateSampleError& e) {
    EXPECT_EQ(e.layer(), 2);
    EXPECT_EQ(e.step(), 1);
    EXPECT_NE(std::string(e.what()).find("layer 2 step 1"), std::string::npos);
  }
  EXPECT_EQ(kind_of([&] { rank_ratio(Matrix::Zero(4, 6), oracle::random_matrix(rng, 4, 3),
                                     Objective::kPre); }),
            ErrorKind::kSampleDegenerate);
}

TEST(RankRatio, MatchesIndependentOracle) {
  Rng rng(21);
  for (int trial = 0; trial < 200; ++trial) {
    const auto n = 1 + static_cast<Eigen::Index>(rng.below(10));
    const auto f = 1 + static_cast<Eigen::Index>(rng.below(14));
    const auto d = 1 + static_cast<Eigen::Index>(rng.below(8));
    const auto k = 1 + static_cast<Eigen::Index>(rng.below(static_cast<std::uint64_t>(std::min(n, f))));
    const Matrix h = trial % 2 ? oracle::random_low_rank(rng, n, f, k) : oracle::random_matrix(rng, n, f);
    const Matrix delta = oracle::random_matrix(rng, n, d);
    const auto hd = oracle::to_dense(h);
    const auto dd = oracle::to_dense(delta);
    for (auto obj : {Objective::kPre, Objective::kPos}) {
      const int e = obj == Objective::kPre ? 1 : 2;
      const double want = oracle::rank_ratio(hd, dd, e, e);
      EXPECT_NEAR(rank_ratio(h, delta, obj), want, 1e-8 * want) << "trial " << trial;
    }
  }
}

TEST(RankRatio, PermutationInvariant) {
  Rng rng(4);
  for (int trial = 0; trial < 50; ++trial) {
    const Matrix h = oracle::random_matrix(rng, 6, 9);
    const Matrix delta = oracle::random_matrix(rng, 6, 4);
    std::vector<int> perm(6);
    std::iota(perm.begin(), perm.end(), 0);
    rng.shuffle(perm.begin(), perm.end());
    const double a = rank_ratio(h, delta, Objective::kPos);
    const double b = rank_ratio(permute_rows(h, perm), permute_rows(delta, perm), Objective::kPos);
    EXPECT_NEAR(a, b, 1e-10 * a);
  }
}

TEST(RankRatio, ToyPreObjectiveGivesRankOneGradient) {
  const ToyModel m(small_model());
  const std::vector<int> q = {1, 2, 3, 4, 5};
  const std::vector<int> r = {6, 8};
  const auto rec = capture_sequence(m, "p", q, r, Objective::kPre, false);
  for (const auto& lc : rec.layers) {
    const auto c_g = projected_grad_cov(lc.h64(), lc.delta64());
    const auto sv = singular_values(c_g);
    EXPECT_NEAR(stable_rank(sv, RankExponent::kLinear), 1.0, 1e-12);
  }
}

TEST(FeatureVector, OneValuePerLayerAndMetadata) {
  Rng rng(2);
  CaptureRecord r;
  r.sample_id = "x";
  r.label = Label::kAnswerable;
  r.dataset_name = "toy";
  r.paraphrase_group = "g";
  r.layers.push_back(layer_from(oracle::random_matrix(rng, 3, 5), oracle::random_matrix(rng, 3, 2)));
  const auto fv = feature_vector(r);
  ASSERT_EQ(fv.values.size(), 1u);
  EXPECT_DOUBLE_EQ(fv.values[0], layer_rank_ratio(r.layers[0], Objective::kPre));
  EXPECT_EQ(fv.label, Label::kAnswerable);
  EXPECT_EQ(fv.dataset_name, "toy");
  EXPECT_EQ(fv.paraphrase_group, std::optional<std::string>("g"));
}

TEST(FeatureVector, DegenerateLayerIsNamed) {
  Rng rng(3);
  CaptureRecord r;
  r.sample_id = "deg";
  for (std::uint32_t l = 0; l < 3; ++l) {
    const Matrix delta = l == 1 ? Matrix::Zero(4, 2) : oracle::random_matrix(rng, 4, 2);
    r.layers.push_back(layer_from(oracle::random_matrix(rng, 4, 6), delta, l));
  }
  try {
    feature_vector(r);
    FAIL() << "expected a degenerate sample";
  } catch (const DegenerateSampleError& e) {
    EXPECT_EQ(e.layer(), 1);
    const std::string what = e.what();
    EXPECT_NE(what.find("'deg'"), std::string::npos);
    EXPECT_NE(what.find("layer 1"), std::string::npos);
  }
  const auto batch = compute_features({r}, {}, 2);
  EXPECT_TRUE(batch.features.empty());
  ASSERT_EQ(batch.skipped.size(), 1u);
  EXPECT_EQ(batch.skipped[0].sample_id, "deg");
}

TEST(Stepwise, SingleStepEqualsWholeResponse) {
  const ToyModel m(small_model());
  const std::vector<int> q = {1, 2, 3};
  const std::vector<int> r = {4, 5, 6, 8};
  auto rec = capture_sequence(m, "k1", q, r, Objective::kPos, true);
  ASSERT_EQ(rec.steps.size(), 1u);
  const auto stepwise = feature_vector(rec).values;
  std::vector<double> whole;
  for (const auto& lc : rec.layers) whole.push_back(layer_rank_ratio(lc, Objective::kPos));
  for (std::size_t l = 0; l < whole.size(); ++l) EXPECT_NEAR(stepwise[l], whole[l], 1e-10);
}

TEST(Stepwise, TwoStepsAverageTheirRatios) {
  Rng rng(6);
  CaptureRecord rec;
  rec.sample_id = "k2";
  rec.objective = Objective::kPos;
  rec.layers = fixture::random_layers(rng, 2, 4, 5, 3);
  rec.tokens = {"a", "b"};
  rec.step_boundaries = {0, 1};
  // step 0 covers 3 rows, step 1 covers 4
  const auto s0 = fixture::random_layers(rng, 2, 3, 5, 3);
  rec.steps = {{s0}, {rec.layers}};
  validate(rec);
  const auto avg = stepwise_ratios(rec);
  for (int l = 0; l < 2; ++l) {
    const double a = layer_rank_ratio(s0[static_cast<std::size_t>(l)], Objective::kPos);
    const double b = layer_rank_ratio(rec.layers[static_cast<std::size_t>(l)], Objective::kPos);
    EXPECT_NEAR(avg[static_cast<std::size_t>(l)], (a + b) / 2.0, 1e-12);
  }
}

TEST(Stepwise, ThreeStepsAreTheMeanOfStepRatios) {
  const ToyModel m(small_model());
  const std::vector<int> q = {1, 2};
  const std::vector<int> r = {3, 7, 4, 5, 14, 6, 9};  // 7 and 14 are delimiters
  const auto rec = capture_sequence(m, "k3", q, r, Objective::kPos, true);
  ASSERT_EQ(rec.step_boundaries, (std::vector<int>{0, 2, 5}));
  const auto got = feature_vector(rec).values;
  for (std::size_t l = 0; l < rec.layers.size(); ++l) {
    double sum = 0.0;
    for (const auto& st : rec.steps) {
      sum += oracle::rank_ratio(oracle::to_dense(st.layers[l].h64()),
                                oracle::to_dense(st.layers[l].delta64()), 2, 2);
    }
    EXPECT_NEAR(got[l], sum / 3.0, 1e-10);
  }
  CaptureRecord no_steps = rec;
  no_steps.steps.clear();
  EXPECT_EQ(kind_of([&] { feature_vector(no_steps); }), ErrorKind::kInvalidInput);
}

TEST(TokenScores, IdentityCovariance) {
  CaptureRecord r;
  r.sample_id = "id";
  r.objective = Objective::kPos;
  r.layers.push_back(layer_from(Matrix::Identity(3, 3), Matrix::Identity(3, 3)));
  r.tokens = {"a", "b"};
  const auto m = token_scores(r);
  EXPECT_EQ(m.tokens, r.tokens);
  ASSERT_EQ(m.raw_scores.size(), 2u);
  EXPECT_NEAR(m.raw_scores[0], 1.0, 1e-12);
  EXPECT_NEAR(m.raw_scores[1], 1.0, 1e-12);
}

TEST(TokenScores, DominantTokenScoresHighest) {
  Rng rng(8);
  CaptureRecord r;
  r.sample_id = "dom";
  r.objective = Objective::kPos;
  Matrix delta = 0.01 * oracle::random_matrix(rng, 5, 3);
  delta.row(3) << 5.0, 4.0, 3.0;
  r.layers.push_back(layer_from(Matrix::Identity(5, 5), delta));
  r.tokens = {"a", "b", "c", "d"};
  const auto m = token_scores(r);
  const auto best = std::max_element(m.raw_scores.begin(), m.raw_scores.end()) - m.raw_scores.begin();
  EXPECT_EQ(best, 2);  // row 3 of 5 is the third of the last four
}

TEST(TokenScores, MatchesDenseRecomputation) {
  Rng rng(9);
  for (int trial = 0; trial < 30; ++trial) {
    CaptureRecord r = fixture::random_record(rng, "t");
    if (r.tokens.empty()) continue;
    r.objective = Objective::kPos;
    const auto m = token_scores(r, 0, false);
    const auto& lc = r.layers[0];
    const auto c = oracle::projected_cov(oracle::to_dense(lc.h64()), oracle::to_dense(lc.delta64()));
    const std::size_t n = c.size();
    double scale = 0.0;
    for (const auto& row : c) {
      for (double x : row) scale = std::max(scale, std::abs(x));
    }
    for (std::size_t t = 0; t < r.tokens.size(); ++t) {
      const auto& row = c[n - r.tokens.size() + t];
      const double want = std::accumulate(row.begin(), row.end(), 0.0);
      EXPECT_NEAR(m.raw_scores[t], want, 1e-8 * std::max(scale, 1.0) * static_cast<double>(n));
    }
  }
}

TEST(TokenScores, UnclampedSumIsQuadraticForm) {
  Rng rng(10);
  for (int trial = 0; trial < 50; ++trial) {
    const Matrix h = oracle::random_matrix(rng, 6, 8);
    const Matrix delta = oracle::random_matrix(rng, 6, 4);
    const Matrix c = projected_grad_cov(h, delta).matrix();
    const auto s = row_sum_scores(c, 6, false);
    const Vector ones = Vector::Ones(6);
    const double quad = ones.dot(c * ones);
    EXPECT_NEAR(std::accumulate(s.begin(), s.end(), 0.0), quad, 1e-9 * c.cwiseAbs().sum());
    for (double v : row_sum_scores(c, 6, true)) EXPECT_GE(v, 0.0);
  }
}

TEST(TokenScores, PermutationEquivariant) {
  Rng rng(11);
  const Matrix h = oracle::random_matrix(rng, 5, 7);
  const Matrix delta = oracle::random_matrix(rng, 5, 3);
  std::vector<int> perm = {3, 0, 4, 1, 2};
  const auto base = row_sum_scores(projected_grad_cov(h, delta).matrix(), 5, false);
  const auto moved =
      row_sum_scores(projected_grad_cov(permute_rows(h, perm), permute_rows(delta, perm)).matrix(), 5, false);
  for (std::size_t i = 0; i < perm.size(); ++i) {
    EXPECT_NEAR(moved[i], base[static_cast<std::size_t>(perm[i])], 1e-10);
  }
}

TEST(TokenScores, RejectsPreRecordsAndBadLayers) {
  const ToyModel m(small_model());
  const std::vector<int> q = {1, 2};
  const std::vector<int> r = {3, 4};
  const auto pre = capture_sequence(m, "p", q, r, Objective::kPre, false);
  EXPECT_EQ(kind_of([&] { token_scores(pre); }), ErrorKind::kUnsupportedObjective);
  const auto pos = capture_sequence(m, "q", q, r, Objective::kPos, false);
  EXPECT_EQ(kind_of([&] { token_scores(pos, 3); }), ErrorKind::kInvalidInput);
  EXPECT_EQ(token_scores(pos).source_layer, 2);
}

TEST(Normalize, CorpusMinMax) {
  std::vector<TokenScoreMap> maps(2);
  maps[0].raw_scores = {1.0, 3.0};
  maps[1].raw_scores = {2.0};
  const auto out = normalize_corpus(maps);
  EXPECT_EQ(out[0].normalized_scores, (std::vector<double>{0.0, 1.0}));
  EXPECT_EQ(out[1].normalized_scores, (std::vector<double>{0.5}));

  std::vector<TokenScoreMap> flat(1);
  flat[0].raw_scores = {4.0, 4.0, 4.0};
  EXPECT_EQ(normalize_corpus(flat)[0].normalized_scores, (std::vector<double>{0.5, 0.5, 0.5}));
  EXPECT_EQ(kind_of([] { normalize_corpus({}); }), ErrorKind::kInvalidInput);
}

TEST(Normalize, ScoresStayInUnitInterval) {
  Rng rng(12);
  std::vector<TokenScoreMap> maps(5);
  for (auto& m : maps) {
    for (int i = 0; i < 7; ++i) m.raw_scores.push_back(rng.normal() * 10.0);
  }
  for (const auto& m : normalize_corpus(maps)) {
    for (double s : m.normalized_scores) {
      EXPECT_GE(s, 0.0);
      EXPECT_LE(s, 1.0);
    }
  }
}

TEST(Serialization, CsvAndJsonlRoundTrip) {
  Rng rng(13);
  std::vector<FeatureVector> fs;
  for (int i = 0; i < 20; ++i) {
    FeatureVector f;
    f.sample_id = i == 3 ? "with,comma \"q\"" : "s" + std::to_string(i);
    f.objective = i % 2 ? Objective::kPos : Objective::kPre;
    f.label = static_cast<Label>(i % 4);
    f.dataset_name = "toy";
    if (i % 3 == 0) f.paraphrase_group = "g" + std::to_string(i);
    for (int l = 0; l < 4; ++l) f.values.push_back(std::exp(rng.normal()));
    fs.push_back(f);
  }
  std::stringstream jsonl;
  write_features_jsonl(jsonl, fs);
  EXPECT_EQ(read_features_jsonl(jsonl), fs);

  std::stringstream csv;
  write_features_csv(csv, fs);
  const auto back = read_features_csv(csv);
  ASSERT_EQ(back.size(), fs.size());
  for (std::size_t i = 0; i < fs.size(); ++i) {
    EXPECT_EQ(back[i].sample_id, fs[i].sample_id);
    EXPECT_EQ(back[i].values, fs[i].values);
    EXPECT_EQ(back[i].label, fs[i].label);
    EXPECT_EQ(back[i].objective, fs[i].objective);
  }
}

TEST(Serialization, RejectsMalformedInput) {
  std::istringstream bad_header("id,label,objective,ratio_0\n");
  EXPECT_EQ(kind_of([&] { read_features_csv(bad_header); }), ErrorKind::kFormat);
  std::istringstream bad_number("sample_id,label,objective,ratio_0\na,answerable,pos,abc\n");
  EXPECT_EQ(kind_of([&] { read_features_csv(bad_number); }), ErrorKind::kFormat);
  std::istringstream negative("sample_id,label,objective,ratio_0\na,answerable,pos,-1\n");
  EXPECT_EQ(kind_of([&] { read_features_csv(negative); }), ErrorKind::kFormat);
  std::istringstream ragged("{\"sample_id\":\"a\",\"label\":\"answerable\",\"objective\":\"pos\",\"ratios\":[1]}\n"
                            "{\"sample_id\":\"b\",\"label\":\"answerable\",\"objective\":\"pos\",\"ratios\":[1,2]}\n");
  EXPECT_EQ(kind_of([&] { read_features_jsonl(ragged); }), ErrorKind::kLayerCountMismatch);
  std::istringstream junk("{not json\n");
  EXPECT_EQ(kind_of([&] { read_features_jsonl(junk); }), ErrorKind::kFormat);
}

TEST(Batch, ThreadCountDoesNotChangeResults) {
  SynthConfig cfg;
  cfg.model = small_model();
  cfg.num_samples = 16;
  cfg.fit_steps = 30;
  const auto ds = synth_dataset(cfg);
  const auto one = compute_features(ds.records, {}, 1);
  const auto four = compute_features(ds.records, {}, 4);
  EXPECT_EQ(one.features, four.features);
  EXPECT_EQ(one.features.size(), 16u);
}

TEST(Heatmap, OneSpanPerTokenWithScores) {
  TokenScoreMap m;
  m.sample_id = "s<1>";
  m.tokens = {"a", "<b>", "c"};
  m.normalized_scores = {0.0, 0.25, 1.0};
  const std::string html = render_heatmap_html(m);
  const std::regex span("<span class=\"tok\" data-index=\"(\\d+)\" data-score=\"([0-9.]+)\"");
  std::vector<double> scores;
  for (auto it = std::sregex_iterator(html.begin(), html.end(), span); it != std::sregex_iterator(); ++it) {
    scores.push_back(std::stod((*it)[2]));
  }
  EXPECT_EQ(scores, m.normalized_scores);
  EXPECT_NE(html.find("&lt;b&gt;"), std::string::npos);
  EXPECT_EQ(html.find("<b>"), std::string::npos);
  m.normalized_scores.pop_back();
  EXPECT_EQ(kind_of([&] { render_heatmap_html(m); }), ErrorKind::kInvalidInput);
}
