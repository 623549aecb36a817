// Copyright (c) 2026, The grade-probe Authors
// SPDX-License-Identifier: Apache-2.0

#include "grade/features.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <exception>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>
#include <thread>

#include "grade/error.hpp"

namespace grade {

using nlohmann::json;

ExponentPairing parse_exponent_pairing(std::string_view s) {
  if (s == "matched") return ExponentPairing::kMatched;
  if (s == "linear") return ExponentPairing::kLinear;
  if (s == "squared") return ExponentPairing::kSquared;
  fail(ErrorKind::kInvalidInput, "unknown exponent pairing '" + std::string(s) + "'");
}

RankExponent gradient_exponent(Objective objective) {
  return objective == Objective::kPre ? RankExponent::kLinear : RankExponent::kSquared;
}

RankExponent hidden_exponent(Objective objective, ExponentPairing pairing) {
  switch (pairing) {
    case ExponentPairing::kMatched: return gradient_exponent(objective);
    case ExponentPairing::kLinear: return RankExponent::kLinear;
    case ExponentPairing::kSquared: return RankExponent::kSquared;
  }
  return gradient_exponent(objective);
}

namespace {

std::string location(int layer, int step) {
  std::string s;
  if (layer >= 0) s += " at layer " + std::to_string(layer);
  if (step >= 0) s += " step " + std::to_string(step);
  return s;
}

}  // namespace

double rank_ratio(const Matrix& h, const Matrix& delta, Objective objective,
                  const FeatureOptions& opts, int layer, int step) {
  try {
    const SymmetricPsd c_g = projected_grad_cov(h, delta, opts.pinv_rel_tol);
    const auto sv_g = singular_values(c_g);
    const auto sv_h = singular_values(gram(h));
    const double num = stable_rank(sv_g, gradient_exponent(objective));
    const double den = stable_rank(sv_h, hidden_exponent(objective, opts.pairing));
    return num / den;
  } catch (const DegenerateSampleError&) {
    throw;
  } catch (const Error& e) {
    if (e.kind() != ErrorKind::kZeroSpectrum) throw;
    throw DegenerateSampleError(std::string("degenerate spectrum") + location(layer, step) + ": " +
                                    e.what(),
                                layer, step);
  }
}

double layer_rank_ratio(const LayerCapture& lc, Objective objective, const FeatureOptions& opts) {
  return rank_ratio(lc.h64(), lc.delta64(), objective, opts, static_cast<int>(lc.layer_index));
}

std::vector<double> stepwise_ratios(const CaptureRecord& r, const FeatureOptions& opts) {
  if (r.steps.empty()) {
    fail(ErrorKind::kInvalidInput,
         "record '" + r.sample_id + "' has no step captures for stepwise ratios");
  }
  const std::size_t num_layers = r.layers.size();
  std::vector<double> mean(num_layers, 0.0);
  for (std::size_t k = 0; k < r.steps.size(); ++k) {
    const auto& layers = r.steps[k].layers;
    if (layers.size() != num_layers) {
      fail(ErrorKind::kLayerCountMismatch, "step capture layer count differs from record");
    }
    for (std::size_t l = 0; l < num_layers; ++l) {
      mean[l] += rank_ratio(layers[l].h64(), layers[l].delta64(), r.objective, opts,
                            static_cast<int>(l), static_cast<int>(k));
    }
  }
  for (double& m : mean) m /= static_cast<double>(r.steps.size());
  return mean;
}

FeatureVector feature_vector(const CaptureRecord& r, const FeatureOptions& opts) {
  FeatureVector fv;
  fv.sample_id = r.sample_id;
  fv.objective = r.objective;
  fv.label = r.label;
  fv.dataset_name = r.dataset_name;
  fv.paraphrase_group = r.paraphrase_group;
  if (r.layers.empty()) fail(ErrorKind::kInvalidInput, "record '" + r.sample_id + "' has no layers");
  try {
    if (r.objective == Objective::kPos && !r.step_boundaries.empty()) {
      fv.values = stepwise_ratios(r, opts);
    } else {
      fv.values.reserve(r.layers.size());
      for (const auto& lc : r.layers) fv.values.push_back(layer_rank_ratio(lc, r.objective, opts));
    }
  } catch (const DegenerateSampleError& e) {
    throw DegenerateSampleError("sample '" + r.sample_id + "': " + e.what(), e.layer(), e.step());
  }
  return fv;
}

FeatureBatch compute_features(const std::vector<CaptureRecord>& records,
                              const FeatureOptions& opts, int jobs) {
  const std::size_t n = records.size();
  std::vector<std::optional<FeatureVector>> out(n);
  std::vector<std::string> reasons(n);
  std::vector<std::exception_ptr> errors(n);
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < n; i = next++) {
      try {
        out[i] = feature_vector(records[i], opts);
      } catch (const DegenerateSampleError& e) {
        reasons[i] = e.what();
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  const int workers = std::max(1, std::min<int>(jobs, static_cast<int>(n)));
  if (workers == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (int w = 0; w < workers; ++w) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  FeatureBatch batch;
  for (std::size_t i = 0; i < n; ++i) {
    if (errors[i]) std::rethrow_exception(errors[i]);
    if (out[i]) {
      batch.features.push_back(std::move(*out[i]));
    } else {
      batch.skipped.push_back({records[i].sample_id, reasons[i]});
    }
  }
  return batch;
}

// ---------------------------------------------------------------------------

std::vector<double> row_sum_scores(const Matrix& c, Eigen::Index num_tokens, bool clamp) {
  if (num_tokens < 0 || num_tokens > c.rows()) {
    fail(ErrorKind::kInvalidInput, "more tokens than rows in C_g");
  }
  std::vector<double> scores;
  scores.reserve(static_cast<std::size_t>(num_tokens));
  for (Eigen::Index t = c.rows() - num_tokens; t < c.rows(); ++t) {
    const double s = c.row(t).sum();
    scores.push_back(clamp ? std::max(0.0, s) : s);
  }
  return scores;
}

TokenScoreMap token_scores(const CaptureRecord& r, int layer, bool clamp,
                           const FeatureOptions& opts) {
  if (r.objective != Objective::kPos) {
    fail(ErrorKind::kUnsupportedObjective,
         "token scores need a pos record; '" + r.sample_id + "' is pre");
  }
  if (r.tokens.empty()) fail(ErrorKind::kInvalidInput, "record '" + r.sample_id + "' has no tokens");
  const int num_layers = r.num_layers();
  const int l = layer < 0 ? num_layers - 1 : layer;
  if (l >= num_layers) fail(ErrorKind::kInvalidInput, "interpretation layer out of range");
  const auto& lc = r.layers[static_cast<std::size_t>(l)];
  const SymmetricPsd c_g = projected_grad_cov(lc.h64(), lc.delta64(), opts.pinv_rel_tol);

  TokenScoreMap m;
  m.sample_id = r.sample_id;
  m.tokens = r.tokens;
  m.source_layer = l;
  m.raw_scores =
      row_sum_scores(c_g.matrix(), static_cast<Eigen::Index>(r.tokens.size()), clamp);
  return m;
}

std::vector<TokenScoreMap> normalize_corpus(std::vector<TokenScoreMap> maps) {
  double lo = std::numeric_limits<double>::infinity();
  double hi = -std::numeric_limits<double>::infinity();
  std::size_t count = 0;
  for (const auto& m : maps) {
    for (double s : m.raw_scores) {
      lo = std::min(lo, s);
      hi = std::max(hi, s);
      ++count;
    }
  }
  if (count == 0) fail(ErrorKind::kInvalidInput, "normalize_corpus: empty corpus");
  const double span = hi - lo;
  for (auto& m : maps) {
    m.normalized_scores.resize(m.raw_scores.size());
    for (std::size_t i = 0; i < m.raw_scores.size(); ++i) {
      m.normalized_scores[i] = span > 0.0 ? (m.raw_scores[i] - lo) / span : 0.5;
    }
  }
  return maps;
}

// ---------------------------------------------------------------------------

namespace {

std::string format_real(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> cells;
  std::string cur;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
        cur.push_back('"');
        ++i;
      } else if (c == '"') {
        quoted = false;
      } else {
        cur.push_back(c);
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      cells.push_back(std::move(cur));
      cur.clear();
    } else if (c != '\r') {
      cur.push_back(c);
    }
  }
  cells.push_back(std::move(cur));
  return cells;
}

std::string csv_cell(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out.push_back('"');
    out.push_back(c);
  }
  return out + "\"";
}

double parse_real(const std::string& s) {
  try {
    std::size_t used = 0;
    const double v = std::stod(s, &used);
    if (used != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    fail(ErrorKind::kFormat, "not a number: '" + s + "'");
  }
}

void check_feature(const FeatureVector& f, std::size_t width) {
  if (f.values.size() != width) {
    fail(ErrorKind::kLayerCountMismatch, "feature rows have different lengths");
  }
  for (double v : f.values) {
    if (!std::isfinite(v) || v <= 0.0) {
      fail(ErrorKind::kFormat, "feature '" + f.sample_id + "' has a non-positive ratio");
    }
  }
}

}  // namespace

void write_features_csv(std::ostream& out, const std::vector<FeatureVector>& fs) {
  const std::size_t width = fs.empty() ? 0 : fs.front().values.size();
  out << "sample_id,label,objective";
  for (std::size_t l = 0; l < width; ++l) out << ",ratio_" << l;
  out << "\n";
  for (const auto& f : fs) {
    check_feature(f, width);
    out << csv_cell(f.sample_id) << ',' << to_string(f.label) << ',' << to_string(f.objective);
    for (double v : f.values) out << ',' << format_real(v);
    out << "\n";
  }
}

std::vector<FeatureVector> read_features_csv(std::istream& in) {
  std::string line;
  if (!std::getline(in, line)) return {};
  const auto header = split_csv_line(line);
  if (header.size() < 3 || header[0] != "sample_id" || header[1] != "label" ||
      header[2] != "objective") {
    fail(ErrorKind::kFormat, "features CSV header must start with sample_id,label,objective");
  }
  const std::size_t width = header.size() - 3;
  std::vector<FeatureVector> out;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto cells = split_csv_line(line);
    if (cells.size() != header.size()) fail(ErrorKind::kFormat, "features CSV row has wrong width");
    FeatureVector f;
    f.sample_id = cells[0];
    f.label = parse_label(cells[1]);
    f.objective = parse_objective(cells[2]);
    for (std::size_t l = 0; l < width; ++l) f.values.push_back(parse_real(cells[3 + l]));
    check_feature(f, width);
    out.push_back(std::move(f));
  }
  return out;
}

void write_features_jsonl(std::ostream& out, const std::vector<FeatureVector>& fs) {
  const std::size_t width = fs.empty() ? 0 : fs.front().values.size();
  for (const auto& f : fs) {
    check_feature(f, width);
    json j;
    j["sample_id"] = f.sample_id;
    j["label"] = std::string(to_string(f.label));
    j["objective"] = std::string(to_string(f.objective));
    j["dataset_name"] = f.dataset_name;
    j["paraphrase_group"] = f.paraphrase_group ? json(*f.paraphrase_group) : json(nullptr);
    j["ratios"] = f.values;
    out << j.dump() << "\n";
  }
}

std::vector<FeatureVector> read_features_jsonl(std::istream& in) {
  std::vector<FeatureVector> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    try {
      const json j = json::parse(line);
      FeatureVector f;
      f.sample_id = j.at("sample_id").get<std::string>();
      f.label = parse_label(j.at("label").get<std::string>());
      f.objective = parse_objective(j.at("objective").get<std::string>());
      f.dataset_name = j.value("dataset_name", std::string());
      if (j.contains("paraphrase_group") && !j.at("paraphrase_group").is_null()) {
        f.paraphrase_group = j.at("paraphrase_group").get<std::string>();
      }
      f.values = j.at("ratios").get<std::vector<double>>();
      check_feature(f, out.empty() ? f.values.size() : out.front().values.size());
      out.push_back(std::move(f));
    } catch (const json::exception& e) {
      fail(ErrorKind::kFormat, std::string("features JSON line: ") + e.what());
    }
  }
  return out;
}

std::vector<FeatureVector> read_features_file(const std::filesystem::path& p) {
  std::ifstream in(p);
  if (!in) fail(ErrorKind::kIo, "cannot open " + p.string());
  return p.extension() == ".csv" ? read_features_csv(in) : read_features_jsonl(in);
}

void write_features_file(const std::filesystem::path& p, const std::vector<FeatureVector>& fs) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  if (!out) fail(ErrorKind::kIo, "cannot write " + p.string());
  if (p.extension() == ".csv") {
    write_features_csv(out, fs);
  } else {
    write_features_jsonl(out, fs);
  }
}

json token_scores_json(const std::vector<TokenScoreMap>& maps) {
  json arr = json::array();
  for (const auto& m : maps) {
    arr.push_back({{"sample_id", m.sample_id},
                   {"source_layer", m.source_layer},
                   {"tokens", m.tokens},
                   {"raw_scores", m.raw_scores},
                   {"normalized_scores", m.normalized_scores}});
  }
  return arr;
}

namespace {

std::string html_escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      case '\n': out += "&#10;"; break;
      default: out.push_back(c);
    }
  }
  return out;
}

}  // namespace

std::string render_heatmap_html(const TokenScoreMap& m) {
  if (m.normalized_scores.size() != m.tokens.size()) {
    fail(ErrorKind::kInvalidInput, "heatmap needs one normalized score per token");
  }
  std::ostringstream html;
  html << "<!DOCTYPE html>\n<html>\n<head>\n<meta charset=\"utf-8\">\n<title>"
       << html_escape(m.sample_id) << "</title>\n"
       << "<style>\n"
       << "body { font-family: sans-serif; line-height: 2; }\n"
       << ".tok { padding: 2px 3px; margin: 1px; border-radius: 3px; }\n"
       << "</style>\n</head>\n<body>\n"
       << "<h1>" << html_escape(m.sample_id) << "</h1>\n"
       << "<p>layer " << m.source_layer << "</p>\n<div class=\"tokens\">\n";
  char buf[32];
  for (std::size_t i = 0; i < m.tokens.size(); ++i) {
    const double s = std::clamp(m.normalized_scores[i], 0.0, 1.0);
    std::snprintf(buf, sizeof buf, "%.6f", s);
    html << "<span class=\"tok\" data-index=\"" << i << "\" data-score=\"" << buf
         << "\" style=\"background-color: rgba(220, 38, 38, " << buf << ")\">"
         << html_escape(m.tokens[i]) << "</span>\n";
  }
  html << "</div>\n</body>\n</html>\n";
  return html.str();
}

}  // namespace grade
