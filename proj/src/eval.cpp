// Copyright (c) 2026, The grade-probe Authors
// SPDX-License-Identifier: Apache-2.0

#include "grade/eval.hpp"

#include <algorithm>
#include <atomic>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <map>
#include <numeric>
#include <ostream>
#include <thread>

#include "grade/error.hpp"
#include "grade/rng.hpp"

namespace grade {

using nlohmann::json;

LabelRule LabelRule::defaults() { return {DatasetKind::kDefault, 0.8, 0.2, 10}; }

LabelRule LabelRule::gsm8k() { return {DatasetKind::kGsm8k, 0.6, 0.4, 5}; }

void LabelRule::validate() const {
  if (!(lower >= 0.0 && lower < upper && upper <= 1.0)) {
    fail(ErrorKind::kInvalidInput, "label rule needs 0 <= lower < upper <= 1");
  }
  if (num_samples < 1) fail(ErrorKind::kInvalidInput, "label rule needs at least one sample");
}

LabelRule rule_for_dataset(std::string_view dataset_name) {
  std::string lower(dataset_name);
  std::transform(lower.begin(), lower.end(), lower.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return lower.find("gsm8k") != std::string::npos ? LabelRule::gsm8k() : LabelRule::defaults();
}

Label label_sample(double empirical_accuracy, const LabelRule& rule) {
  rule.validate();
  if (!(empirical_accuracy >= 0.0 && empirical_accuracy <= 1.0)) {
    fail(ErrorKind::kInvalidInput, "empirical accuracy outside [0, 1]");
  }
  if (empirical_accuracy >= rule.upper) return Label::kAnswerable;
  if (empirical_accuracy <= rule.lower) return Label::kUnanswerable;
  return Label::kAmbiguous;
}

double accuracy(std::span<const Label> predicted, std::span<const Label> truth) {
  if (predicted.empty() || predicted.size() != truth.size()) {
    fail(ErrorKind::kInvalidInput, "accuracy needs two equal-length non-empty lists");
  }
  std::size_t hits = 0;
  for (std::size_t i = 0; i < predicted.size(); ++i) hits += predicted[i] == truth[i] ? 1 : 0;
  return static_cast<double>(hits) / static_cast<double>(predicted.size());
}

double auroc(std::span<const double> scores, std::span<const int> labels) {
  if (scores.size() != labels.size()) fail(ErrorKind::kInvalidInput, "auroc length mismatch");
  std::size_t n_pos = 0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (labels[i] != 0 && labels[i] != 1) fail(ErrorKind::kInvalidInput, "auroc labels must be 0 or 1");
    if (std::isnan(scores[i])) fail(ErrorKind::kInvalidInput, "auroc score is NaN");
    n_pos += static_cast<std::size_t>(labels[i]);
  }
  const std::size_t n_neg = scores.size() - n_pos;
  if (n_pos == 0 || n_neg == 0) fail(ErrorKind::kUndefinedAuroc, "auroc needs both classes");

  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  // Twice the rank sum keeps tied mid-ranks integral.
  std::uint64_t twice_rank_sum = 0;
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    std::size_t pos_in_group = 0;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) {
      pos_in_group += static_cast<std::size_t>(labels[order[j]]);
      ++j;
    }
    // ranks i+1 .. j share the mid-rank (i + 1 + j) / 2
    twice_rank_sum += static_cast<std::uint64_t>(pos_in_group) * (i + 1 + j);
    i = j;
  }
  const double u = static_cast<double>(twice_rank_sum) / 2.0 -
                   static_cast<double>(n_pos) * static_cast<double>(n_pos + 1) / 2.0;
  return u / (static_cast<double>(n_pos) * static_cast<double>(n_neg));
}

double p_entropy(const std::vector<std::vector<double>>& rows) {
  double total = 0.0;
  for (const auto& row : rows) {
    if (row.empty()) fail(ErrorKind::kInvalidInput, "empty probability row");
    double sum = 0.0;
    double h = 0.0;
    for (double p : row) {
      if (!(p >= 0.0 && p <= 1.0)) fail(ErrorKind::kInvalidInput, "probability outside [0, 1]");
      sum += p;
      if (p > 0.0) h -= p * std::log(p);
    }
    if (std::abs(sum - 1.0) > 1e-6) fail(ErrorKind::kInvalidInput, "probability row does not sum to 1");
    total += h;
  }
  return total;
}

double pearson(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size() || x.size() < 2) fail(ErrorKind::kInvalidInput, "pearson needs two equal series");
  const double n = static_cast<double>(x.size());
  const double mx = std::accumulate(x.begin(), x.end(), 0.0) / n;
  const double my = std::accumulate(y.begin(), y.end(), 0.0) / n;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
    syy += (y[i] - my) * (y[i] - my);
  }
  if (sxx == 0.0 || syy == 0.0) fail(ErrorKind::kInvalidInput, "pearson of a constant series");
  return sxy / std::sqrt(sxx * syy);
}

// ---------------------------------------------------------------------------

void finalize_report(EvalReport& r) {
  std::vector<Label> pred, truth;
  std::vector<double> scores;
  std::vector<int> labels;
  r.n_pos = r.n_neg = 0;
  for (const auto& s : r.samples) {
    pred.push_back(s.predicted);
    truth.push_back(s.truth);
    scores.push_back(s.score);
    labels.push_back(s.truth == Label::kAnswerable ? 1 : 0);
    (s.truth == Label::kAnswerable ? r.n_pos : r.n_neg) += 1;
  }
  r.accuracy = accuracy(pred, truth);
  r.auroc = auroc(scores, labels);
}

EvalReport evaluate_probe(const ProbeParameters& p, const std::vector<FeatureVector>& test,
                          double threshold) {
  EvalReport r;
  for (const auto& f : labeled_only(test)) {
    const Prediction pr = predict(p, f.values, threshold);
    r.samples.push_back({f.sample_id, f.paraphrase_group, f.label, pr.score, pr.label});
  }
  if (r.samples.empty()) fail(ErrorKind::kDegenerateLabels, "no labeled samples to evaluate");
  finalize_report(r);
  return r;
}

json report_json(const EvalReport& r) {
  json samples = json::array();
  for (const auto& s : r.samples) {
    samples.push_back({{"sample_id", s.sample_id},
                       {"paraphrase_group", s.paraphrase_group ? json(*s.paraphrase_group) : json()},
                       {"label", to_string(s.truth)},
                       {"score", s.score},
                       {"prediction", to_string(s.predicted)}});
  }
  json j = {{"method", r.method},   {"accuracy", r.accuracy}, {"auroc", r.auroc},
            {"n_pos", r.n_pos},     {"n_neg", r.n_neg},       {"samples", samples}};
  if (r.delta_acc) j["delta_acc"] = *r.delta_acc;
  if (r.delta_acc_relative) j["delta_acc_relative"] = *r.delta_acc_relative;
  if (r.train_dataset) j["train_dataset"] = *r.train_dataset;
  if (r.test_dataset) j["test_dataset"] = *r.test_dataset;
  return j;
}

void write_report_csv(std::ostream& out, const EvalReport& r) {
  out << "sample_id,paraphrase_group,label,score,prediction\n";
  char buf[32];
  for (const auto& s : r.samples) {
    std::snprintf(buf, sizeof buf, "%.17g", s.score);
    out << s.sample_id << ',' << s.paraphrase_group.value_or("") << ',' << to_string(s.truth) << ','
        << buf << ',' << to_string(s.predicted) << '\n';
  }
}

// ---------------------------------------------------------------------------

std::vector<FeatureVector> labeled_only(const std::vector<FeatureVector>& fs) {
  std::vector<FeatureVector> out;
  for (const auto& f : fs) {
    if (f.label == Label::kAnswerable || f.label == Label::kUnanswerable) out.push_back(f);
  }
  return out;
}

Split stratified_split(const std::vector<FeatureVector>& fs, double test_fraction,
                       std::uint64_t seed) {
  if (!(test_fraction > 0.0 && test_fraction < 1.0)) {
    fail(ErrorKind::kInvalidInput, "test fraction must lie in (0, 1)");
  }
  std::vector<std::size_t> pos, neg;
  for (std::size_t i = 0; i < fs.size(); ++i) {
    if (fs[i].label == Label::kAnswerable) pos.push_back(i);
    if (fs[i].label == Label::kUnanswerable) neg.push_back(i);
  }
  Rng rng(seed);
  std::vector<bool> in_test(fs.size(), false);
  for (auto* cls : {&pos, &neg}) {
    rng.shuffle(cls->begin(), cls->end());
    auto k = static_cast<std::size_t>(std::llround(test_fraction * static_cast<double>(cls->size())));
    if (cls->size() >= 2) k = std::clamp<std::size_t>(k, 1, cls->size() - 1);
    for (std::size_t i = 0; i < k && i < cls->size(); ++i) in_test[(*cls)[i]] = true;
  }
  Split s;
  for (std::size_t i = 0; i < fs.size(); ++i) {
    if (fs[i].label != Label::kAnswerable && fs[i].label != Label::kUnanswerable) continue;
    (in_test[i] ? s.test : s.train).push_back(fs[i]);
  }
  return s;
}

Experiment run_experiment(const std::vector<FeatureVector>& fs, const TrainConfig& cfg,
                          double test_fraction) {
  Experiment e;
  e.split = stratified_split(fs, test_fraction, cfg.seed);
  e.training = train_probe(e.split.train, cfg);
  e.report = evaluate_probe(e.training.params, e.split.test, cfg.decision_threshold);
  return e;
}

namespace {

std::string group_of(const SampleResult& s) { return s.paraphrase_group.value_or(s.sample_id); }

std::map<std::string, const SampleResult*> index_by_group(const EvalReport& r) {
  std::map<std::string, const SampleResult*> out;
  for (const auto& s : r.samples) {
    if (!out.emplace(group_of(s), &s).second) {
      fail(ErrorKind::kDuplicateId, "paraphrase group repeated in report: " + group_of(s));
    }
  }
  return out;
}

}  // namespace

DeltaAcc delta_acc(const EvalReport& original, const EvalReport& paraphrased) {
  const auto a = index_by_group(original);
  const auto b = index_by_group(paraphrased);
  if (a.size() != b.size() ||
      !std::equal(a.begin(), a.end(), b.begin(),
                  [](const auto& x, const auto& y) { return x.first == y.first; })) {
    fail(ErrorKind::kInvalidInput, "reports cover different paraphrase groups");
  }
  DeltaAcc d;
  int hits_a = 0, hits_b = 0;
  for (const auto& [group, sa] : a) {
    const SampleResult* sb = b.at(group);
    if (sa->truth != sb->truth) continue;
    ++d.eligible_pairs;
    hits_a += sa->predicted == sa->truth ? 1 : 0;
    hits_b += sb->predicted == sb->truth ? 1 : 0;
  }
  if (d.eligible_pairs == 0) fail(ErrorKind::kDegenerateLabels, "no paraphrase pair keeps its label");
  d.original_accuracy = static_cast<double>(hits_a) / d.eligible_pairs;
  d.paraphrased_accuracy = static_cast<double>(hits_b) / d.eligible_pairs;
  d.absolute = d.paraphrased_accuracy - d.original_accuracy;
  if (d.original_accuracy > 0.0) d.relative = d.absolute / d.original_accuracy;
  return d;
}

RobustnessResult robustness(const std::vector<FeatureVector>& original,
                            const std::vector<FeatureVector>& paraphrased, const TrainConfig& cfg,
                            double test_fraction) {
  const Split split = stratified_split(original, test_fraction, cfg.seed);
  const TrainResult trained = train_probe(split.train, cfg);

  std::map<std::string, const FeatureVector*> para;
  for (const auto& f : paraphrased) {
    const std::string g = f.paraphrase_group.value_or(f.sample_id);
    if (!para.emplace(g, &f).second) fail(ErrorKind::kDuplicateId, "paraphrase group repeated: " + g);
  }
  std::vector<FeatureVector> test_orig, test_para;
  for (const auto& f : split.test) {
    const auto it = para.find(f.paraphrase_group.value_or(f.sample_id));
    if (it == para.end()) continue;
    const auto& p = *it->second;
    if (p.label != Label::kAnswerable && p.label != Label::kUnanswerable) continue;
    test_orig.push_back(f);
    test_para.push_back(p);
  }
  if (test_orig.empty()) fail(ErrorKind::kInvalidInput, "no paraphrase matches the test split");

  RobustnessResult r;
  r.original = evaluate_probe(trained.params, test_orig, cfg.decision_threshold);
  r.paraphrased = evaluate_probe(trained.params, test_para, cfg.decision_threshold);
  r.paraphrased.method = "probe-paraphrased";
  r.delta = delta_acc(r.original, r.paraphrased);
  r.paraphrased.delta_acc = r.delta.absolute;
  r.paraphrased.delta_acc_relative = r.delta.relative;
  return r;
}

TransferMatrix transfer_matrix(const std::vector<NamedFeatures>& sets, const TrainConfig& cfg,
                               double test_fraction, int jobs) {
  if (sets.empty()) fail(ErrorKind::kInvalidInput, "transfer needs at least one dataset");
  const std::size_t k = sets.size();
  std::vector<Split> splits;
  for (const auto& s : sets) {
    auto labeled = labeled_only(s.features);
    const auto pos = std::count_if(labeled.begin(), labeled.end(),
                                   [](const auto& f) { return f.label == Label::kAnswerable; });
    if (pos == 0 || pos == static_cast<long>(labeled.size())) {
      fail(ErrorKind::kDegenerateLabels, "dataset " + s.name + " has a single class");
    }
    splits.push_back(stratified_split(labeled, test_fraction, cfg.seed));
  }

  std::vector<ProbeParameters> probes(k);
  std::vector<std::exception_ptr> errors(k);
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < k; i = next++) {
      try {
        probes[i] = train_probe(splits[i].train, cfg).params;
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  const int workers = std::max(1, std::min<int>(jobs, static_cast<int>(k)));
  if (workers == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (int w = 0; w < workers; ++w) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }

  TransferMatrix m;
  m.accuracy.resize(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(k));
  m.auroc.resizeLike(m.accuracy);
  for (std::size_t a = 0; a < k; ++a) {
    m.names.push_back(sets[a].name);
    for (std::size_t b = 0; b < k; ++b) {
      const EvalReport r = evaluate_probe(probes[a], splits[b].test, cfg.decision_threshold);
      m.accuracy(static_cast<Eigen::Index>(a), static_cast<Eigen::Index>(b)) = r.accuracy;
      m.auroc(static_cast<Eigen::Index>(a), static_cast<Eigen::Index>(b)) = r.auroc;
    }
  }
  return m;
}

json transfer_json(const TransferMatrix& m) {
  json cells = json::array();
  for (Eigen::Index a = 0; a < m.accuracy.rows(); ++a) {
    for (Eigen::Index b = 0; b < m.accuracy.cols(); ++b) {
      cells.push_back({{"train", m.names[static_cast<std::size_t>(a)]},
                       {"test", m.names[static_cast<std::size_t>(b)]},
                       {"accuracy", m.accuracy(a, b)},
                       {"auroc", m.auroc(a, b)}});
    }
  }
  return {{"datasets", m.names}, {"cells", cells}};
}

void write_transfer_csv(std::ostream& out, const TransferMatrix& m, std::string_view metric) {
  const Matrix* grid = nullptr;
  if (metric == "accuracy") grid = &m.accuracy;
  if (metric == "auroc") grid = &m.auroc;
  if (grid == nullptr) fail(ErrorKind::kInvalidInput, "unknown transfer metric: " + std::string(metric));
  out << "train\\test";
  for (const auto& n : m.names) out << ',' << n;
  out << '\n';
  char buf[32];
  for (Eigen::Index a = 0; a < grid->rows(); ++a) {
    out << m.names[static_cast<std::size_t>(a)];
    for (Eigen::Index b = 0; b < grid->cols(); ++b) {
      std::snprintf(buf, sizeof buf, "%.17g", (*grid)(a, b));
      out << ',' << buf;
    }
    out << '\n';
  }
}

// ---------------------------------------------------------------------------

LayerSelect parse_layer_select(std::string_view s) {
  if (s == "mean") return LayerSelect::kMean;
  if (s == "last") return LayerSelect::kLast;
  if (s == "mid") return LayerSelect::kMid;
  fail(ErrorKind::kInvalidInput, "unknown layer selection: " + std::string(s));
}

std::string_view to_string(LayerSelect s) noexcept {
  switch (s) {
    case LayerSelect::kMean: return "mean";
    case LayerSelect::kLast: return "last";
    case LayerSelect::kMid: return "mid";
  }
  return "?";
}

double select_scalar(std::span<const double> values, LayerSelect select) {
  if (values.empty()) fail(ErrorKind::kInvalidInput, "empty feature vector");
  switch (select) {
    case LayerSelect::kMean:
      return std::accumulate(values.begin(), values.end(), 0.0) / static_cast<double>(values.size());
    case LayerSelect::kLast:
      return values.back();
    case LayerSelect::kMid:
      return values[values.size() / 2];
  }
  return values.back();
}

ThresholdFit fit_threshold(std::span<const double> scores, std::span<const int> labels) {
  if (scores.empty() || scores.size() != labels.size()) {
    fail(ErrorKind::kInvalidInput, "threshold fit needs equal non-empty lists");
  }
  std::vector<double> uniq(scores.begin(), scores.end());
  std::sort(uniq.begin(), uniq.end());
  uniq.erase(std::unique(uniq.begin(), uniq.end()), uniq.end());
  std::vector<double> candidates;
  for (std::size_t i = 0; i + 1 < uniq.size(); ++i) candidates.push_back(0.5 * (uniq[i] + uniq[i + 1]));
  if (candidates.empty()) candidates.push_back(uniq.front());

  const double n = static_cast<double>(scores.size());
  ThresholdFit best;
  best.train_accuracy = -1.0;
  for (double t : candidates) {
    std::size_t above_pos = 0, below_neg = 0;
    for (std::size_t i = 0; i < scores.size(); ++i) {
      if (scores[i] >= t && labels[i] == 1) ++above_pos;
      if (scores[i] < t && labels[i] == 0) ++below_neg;
    }
    const double asc = static_cast<double>(above_pos + below_neg) / n;
    const double desc = 1.0 - asc;
    if (asc > best.train_accuracy) best = {t, true, asc};
    if (desc > best.train_accuracy) best = {t, false, desc};
  }
  return best;
}

EvalReport threshold_baseline(const Split& split, LayerSelect select) {
  std::vector<double> train_scores;
  std::vector<int> train_labels;
  for (const auto& f : labeled_only(split.train)) {
    train_scores.push_back(select_scalar(f.values, select));
    train_labels.push_back(f.label == Label::kAnswerable ? 1 : 0);
  }
  if (train_scores.empty()) fail(ErrorKind::kDegenerateLabels, "no labeled training samples");
  const ThresholdFit fit = fit_threshold(train_scores, train_labels);

  EvalReport r;
  r.method = "threshold-" + std::string(to_string(select));
  for (const auto& f : labeled_only(split.test)) {
    const double s = select_scalar(f.values, select);
    const bool answerable = fit.ascending ? s >= fit.threshold : s < fit.threshold;
    // Oriented so that larger scores mean answerable.
    r.samples.push_back({f.sample_id, f.paraphrase_group, f.label, fit.ascending ? s : -s,
                         answerable ? Label::kAnswerable : Label::kUnanswerable});
  }
  if (r.samples.empty()) fail(ErrorKind::kDegenerateLabels, "no labeled test samples");
  finalize_report(r);
  return r;
}

}  // namespace grade
