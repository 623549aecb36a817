// Copyright (c) 2026, The grade-probe Authors
// SPDX-License-Identifier: Apache-2.0

#include "grade/capture.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <istream>
#include <map>
#include <ostream>
#include <set>
#include <sstream>

#include "grade/error.hpp"

namespace grade {

namespace fs = std::filesystem;
using nlohmann::json;

std::string_view to_string(Objective o) noexcept {
  return o == Objective::kPre ? "pre" : "pos";
}

std::string_view to_string(Label l) noexcept {
  switch (l) {
    case Label::kAnswerable: return "answerable";
    case Label::kUnanswerable: return "unanswerable";
    case Label::kAmbiguous: return "ambiguous";
    case Label::kUnlabeled: return "unlabeled";
  }
  return "unlabeled";
}

Objective parse_objective(std::string_view s) {
  if (s == "pre") return Objective::kPre;
  if (s == "pos") return Objective::kPos;
  fail(ErrorKind::kInvalidInput, "unknown objective '" + std::string(s) + "'");
}

Label parse_label(std::string_view s) {
  if (s == "answerable") return Label::kAnswerable;
  if (s == "unanswerable") return Label::kUnanswerable;
  if (s == "ambiguous") return Label::kAmbiguous;
  if (s == "unlabeled") return Label::kUnlabeled;
  fail(ErrorKind::kInvalidInput, "unknown label '" + std::string(s) + "'");
}

StepSpan step_span(const CaptureRecord& r, std::size_t k) {
  if (k >= r.step_boundaries.size()) {
    fail(ErrorKind::kInvalidInput, "step index out of range");
  }
  StepSpan s;
  s.begin = r.step_boundaries[k];
  s.end = k + 1 < r.step_boundaries.size() ? r.step_boundaries[k + 1]
                                           : static_cast<int>(r.tokens.size());
  return s;
}

Eigen::Index step_prefix_length(const CaptureRecord& r, std::size_t k) {
  const Eigen::Index query_rows = r.num_positions() - static_cast<Eigen::Index>(r.tokens.size());
  return query_rows + step_span(r, k).end;
}

namespace {

void check_layers(const std::vector<LayerCapture>& layers, const std::string& where,
                  std::optional<Eigen::Index> expected_n) {
  if (layers.empty()) fail(ErrorKind::kInvalidInput, where + ": no layers");
  const auto& first = layers.front();
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const auto& lc = layers[i];
    const std::string at = where + " layer " + std::to_string(i);
    if (lc.layer_index != i) {
      fail(ErrorKind::kInvalidInput, at + ": layer indices must be contiguous from 0");
    }
    if (lc.h.rows() < 1 || lc.h.cols() < 1 || lc.delta.cols() < 1) {
      fail(ErrorKind::kInvalidInput, at + ": empty dimension");
    }
    if (lc.delta.rows() != lc.h.rows()) {
      fail(ErrorKind::kShapeMismatch, at + ": h and delta have different token counts");
    }
    if (lc.n() != first.n() || lc.d_ff() != first.d_ff() || lc.d_model() != first.d_model()) {
      fail(ErrorKind::kShapeMismatch, at + ": shape differs from layer 0");
    }
    if (!lc.h.allFinite() || !lc.delta.allFinite()) {
      fail(ErrorKind::kCorruptTensor, at + ": non-finite entries");
    }
  }
  if (expected_n && first.n() != *expected_n) {
    fail(ErrorKind::kShapeMismatch, where + ": expected " + std::to_string(*expected_n) +
                                        " rows, found " + std::to_string(first.n()));
  }
}

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xffu));
}

void put_f32(std::string& out, float f) { put_u32(out, std::bit_cast<std::uint32_t>(f)); }

void encode_blob(const std::vector<LayerCapture>& layers, std::string& out) {
  out.append(kCaptureMagic, 4);
  put_u32(out, kCaptureVersion);
  put_u32(out, static_cast<std::uint32_t>(layers.size()));
  for (const auto& lc : layers) {
    put_u32(out, lc.layer_index);
    put_u32(out, static_cast<std::uint32_t>(lc.n()));
    put_u32(out, static_cast<std::uint32_t>(lc.d_ff()));
    put_u32(out, static_cast<std::uint32_t>(lc.d_model()));
    for (Eigen::Index i = 0; i < lc.h.size(); ++i) put_f32(out, lc.h.data()[i]);
    for (Eigen::Index i = 0; i < lc.delta.size(); ++i) put_f32(out, lc.delta.data()[i]);
  }
}

class BlobReader {
 public:
  explicit BlobReader(std::istream& in) : in_(in) {}

  void read_bytes(char* dst, std::size_t count) {
    in_.read(dst, static_cast<std::streamsize>(count));
    if (static_cast<std::size_t>(in_.gcount()) != count) {
      fail(ErrorKind::kTruncated, "capture stream ended early");
    }
  }

  std::uint32_t u32() {
    unsigned char b[4];
    read_bytes(reinterpret_cast<char*>(b), 4);
    return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
           (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
  }

  // Reads rows*cols f32 values. Checks remaining stream size first when the
  // stream is seekable so that a corrupt header cannot force a huge allocation.
  MatrixF matrix(std::uint32_t rows, std::uint32_t cols) {
    const std::uint64_t count = static_cast<std::uint64_t>(rows) * cols;
    const auto here = in_.tellg();
    if (here != std::streampos(-1)) {
      in_.seekg(0, std::ios::end);
      const auto end = in_.tellg();
      in_.seekg(here);
      if (end != std::streampos(-1) &&
          static_cast<std::uint64_t>(end - here) < count * 4) {
        fail(ErrorKind::kTruncated, "capture stream ended early");
      }
    }
    std::vector<char> raw(count * 4);
    read_bytes(raw.data(), raw.size());
    MatrixF m(rows, cols);
    for (std::uint64_t i = 0; i < count; ++i) {
      const auto* p = reinterpret_cast<const unsigned char*>(raw.data() + 4 * i);
      const std::uint32_t bits = static_cast<std::uint32_t>(p[0]) |
                                 (static_cast<std::uint32_t>(p[1]) << 8) |
                                 (static_cast<std::uint32_t>(p[2]) << 16) |
                                 (static_cast<std::uint32_t>(p[3]) << 24);
      const float f = std::bit_cast<float>(bits);
      if (!std::isfinite(f)) {
        fail(ErrorKind::kCorruptTensor, "capture tensor contains a non-finite value");
      }
      m.data()[i] = f;
    }
    return m;
  }

 private:
  std::istream& in_;
};

std::vector<LayerCapture> decode_blob(std::istream& in,
                                      std::optional<std::uint32_t> expected_layers) {
  BlobReader rd(in);
  char magic[4];
  rd.read_bytes(magic, 4);
  if (std::memcmp(magic, kCaptureMagic, 4) != 0) {
    fail(ErrorKind::kFormat, "bad capture magic");
  }
  const std::uint32_t version = rd.u32();
  if (version != kCaptureVersion) {
    fail(ErrorKind::kFormat, "unsupported capture version " + std::to_string(version));
  }
  const std::uint32_t num_layers = rd.u32();
  if (num_layers == 0) fail(ErrorKind::kFormat, "capture declares zero layers");
  if (expected_layers && num_layers != *expected_layers) {
    fail(ErrorKind::kLayerCountMismatch,
         "capture has " + std::to_string(num_layers) + " layers, manifest declares " +
             std::to_string(*expected_layers));
  }
  std::vector<LayerCapture> layers;
  layers.reserve(num_layers);
  for (std::uint32_t l = 0; l < num_layers; ++l) {
    LayerCapture lc;
    lc.layer_index = rd.u32();
    const std::uint32_t n = rd.u32();
    const std::uint32_t d_ff = rd.u32();
    const std::uint32_t d_model = rd.u32();
    if (lc.layer_index != l) fail(ErrorKind::kFormat, "capture layers out of order");
    if (n == 0 || d_ff == 0 || d_model == 0) fail(ErrorKind::kFormat, "zero dimension in capture");
    lc.h = rd.matrix(n, d_ff);
    lc.delta = rd.matrix(n, d_model);
    layers.push_back(std::move(lc));
  }
  check_layers(layers, "capture", std::nullopt);
  return layers;
}

}  // namespace

void validate(const CaptureRecord& r) {
  if (r.sample_id.empty()) fail(ErrorKind::kInvalidInput, "record has an empty sample_id");
  const std::string where = "record '" + r.sample_id + "'";
  check_layers(r.layers, where, std::nullopt);
  if (!std::isfinite(r.loss_value)) fail(ErrorKind::kInvalidInput, where + ": non-finite loss");
  if (r.accuracy_over_samples &&
      !(*r.accuracy_over_samples >= 0.0 && *r.accuracy_over_samples <= 1.0)) {
    fail(ErrorKind::kInvalidInput, where + ": accuracy_over_samples outside [0,1]");
  }
  if (static_cast<Eigen::Index>(r.tokens.size()) > r.num_positions()) {
    fail(ErrorKind::kInvalidInput, where + ": more tokens than captured positions");
  }
  for (std::size_t i = 0; i < r.step_boundaries.size(); ++i) {
    const int b = r.step_boundaries[i];
    if (b < 0 || b >= static_cast<int>(r.tokens.size())) {
      fail(ErrorKind::kInvalidInput, where + ": step boundary outside the token range");
    }
    if (i > 0 && b <= r.step_boundaries[i - 1]) {
      fail(ErrorKind::kInvalidInput, where + ": step boundaries must be strictly increasing");
    }
  }
  if (!r.steps.empty()) {
    if (r.steps.size() != r.step_boundaries.size()) {
      fail(ErrorKind::kInvalidInput, where + ": step capture count differs from step boundaries");
    }
    for (std::size_t k = 0; k < r.steps.size(); ++k) {
      const auto& st = r.steps[k].layers;
      check_layers(st, where + " step " + std::to_string(k), step_prefix_length(r, k));
      if (st.size() != r.layers.size() || st.front().d_ff() != r.layers.front().d_ff() ||
          st.front().d_model() != r.layers.front().d_model()) {
        fail(ErrorKind::kShapeMismatch, where + ": step capture shape differs from record");
      }
    }
  }
}

std::size_t write_capture(const CaptureRecord& r, std::ostream& sink) {
  validate(r);
  std::string bytes;
  encode_blob(r.layers, bytes);
  for (const auto& st : r.steps) encode_blob(st.layers, bytes);
  sink.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!sink) fail(ErrorKind::kIo, "failed writing capture bytes");
  return bytes.size();
}

CaptureRecord read_capture(std::istream& source, std::optional<std::uint32_t> expected_layers) {
  CaptureRecord r;
  r.layers = decode_blob(source, expected_layers);
  return r;
}

json sidecar_json(const CaptureRecord& r) {
  json j;
  j["sample_id"] = r.sample_id;
  j["objective"] = std::string(to_string(r.objective));
  j["tokens"] = r.tokens;
  j["step_boundaries"] = r.step_boundaries;
  j["loss_value"] = r.loss_value;
  j["label"] = std::string(to_string(r.label));
  j["accuracy_over_samples"] =
      r.accuracy_over_samples ? json(*r.accuracy_over_samples) : json(nullptr);
  j["dataset_name"] = r.dataset_name;
  j["paraphrase_group"] = r.paraphrase_group ? json(*r.paraphrase_group) : json(nullptr);
  return j;
}

void apply_sidecar(const json& j, CaptureRecord& r) {
  static const std::set<std::string> kKeys = {
      "sample_id",  "objective", "tokens",       "step_boundaries",       "loss_value",
      "label",      "accuracy_over_samples",     "dataset_name",          "paraphrase_group"};
  if (!j.is_object()) fail(ErrorKind::kFormat, "sidecar is not a JSON object");
  for (const auto& [key, _] : j.items()) {
    if (!kKeys.count(key)) fail(ErrorKind::kFormat, "unknown sidecar key '" + key + "'");
  }
  for (const auto& key : kKeys) {
    if (!j.contains(key)) fail(ErrorKind::kFormat, "sidecar is missing '" + key + "'");
  }
  try {
    r.sample_id = j.at("sample_id").get<std::string>();
    r.objective = parse_objective(j.at("objective").get<std::string>());
    r.tokens = j.at("tokens").get<std::vector<std::string>>();
    r.step_boundaries = j.at("step_boundaries").get<std::vector<int>>();
    r.loss_value = j.at("loss_value").get<double>();
    r.label = parse_label(j.at("label").get<std::string>());
    const auto& acc = j.at("accuracy_over_samples");
    r.accuracy_over_samples =
        acc.is_null() ? std::nullopt : std::optional<double>(acc.get<double>());
    r.dataset_name = j.at("dataset_name").get<std::string>();
    const auto& grp = j.at("paraphrase_group");
    r.paraphrase_group =
        grp.is_null() ? std::nullopt : std::optional<std::string>(grp.get<std::string>());
  } catch (const json::exception& e) {
    fail(ErrorKind::kFormat, std::string("sidecar: ") + e.what());
  }
}

json manifest_json(const DatasetManifest& m) {
  json records = json::array();
  for (const auto& e : m.records) {
    records.push_back(
        {{"sample_id", e.sample_id}, {"file", e.file}, {"offset", e.offset}, {"length", e.length}});
  }
  return {{"format_version", m.format_version},
          {"model_name", m.model_name},
          {"num_layers", m.num_layers},
          {"records", records}};
}

DatasetManifest parse_manifest(const json& j) {
  DatasetManifest m;
  try {
    m.format_version = j.at("format_version").get<std::uint32_t>();
    m.model_name = j.at("model_name").get<std::string>();
    m.num_layers = j.at("num_layers").get<std::uint32_t>();
    for (const auto& e : j.at("records")) {
      m.records.push_back({e.at("sample_id").get<std::string>(), e.at("file").get<std::string>(),
                           e.at("offset").get<std::uint64_t>(),
                           e.at("length").get<std::uint64_t>()});
    }
  } catch (const json::exception& e) {
    fail(ErrorKind::kFormat, std::string("manifest: ") + e.what());
  }
  if (m.format_version != kManifestFormatVersion) {
    fail(ErrorKind::kFormat, "unsupported manifest version " + std::to_string(m.format_version));
  }
  std::set<std::string> ids;
  std::map<std::string, std::vector<std::pair<std::uint64_t, std::uint64_t>>> ranges;
  for (const auto& e : m.records) {
    if (!ids.insert(e.sample_id).second) {
      fail(ErrorKind::kDuplicateId, "duplicate sample_id '" + e.sample_id + "' in manifest");
    }
    ranges[e.file].emplace_back(e.offset, e.length);
  }
  for (auto& [file, rs] : ranges) {
    std::sort(rs.begin(), rs.end());
    for (std::size_t i = 1; i < rs.size(); ++i) {
      if (rs[i - 1].first + rs[i - 1].second > rs[i].first) {
        fail(ErrorKind::kFormat, "overlapping record ranges in '" + file + "'");
      }
    }
  }
  return m;
}

std::string file_stem_for(std::string_view sample_id) {
  std::string out;
  out.reserve(sample_id.size());
  for (char c : sample_id) {
    const bool ok = (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z') || (c >= '0' && c <= '9') ||
                    c == '-' || c == '_' || c == '.';
    out.push_back(ok ? c : '_');
  }
  if (out.empty() || out.front() == '.') out.insert(out.begin(), '_');
  return out;
}

namespace {

json read_json_file(const fs::path& p) {
  std::ifstream in(p);
  if (!in) fail(ErrorKind::kIo, "cannot open " + p.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    fail(ErrorKind::kFormat, p.string() + ": " + e.what());
  }
}

void write_text_file(const fs::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  if (!out) fail(ErrorKind::kIo, "cannot write " + p.string());
  out << text;
  if (!out) fail(ErrorKind::kIo, "failed writing " + p.string());
}

fs::path sidecar_path(const fs::path& dir, const std::string& file) {
  return dir / (fs::path(file).stem().string() + ".json");
}

}  // namespace

ManifestEntry write_record_files(const fs::path& dir, const CaptureRecord& r) {
  validate(r);
  const std::string stem = file_stem_for(r.sample_id);
  ManifestEntry e;
  e.sample_id = r.sample_id;
  e.file = stem + ".grdc";
  {
    std::ofstream out(dir / e.file, std::ios::binary | std::ios::trunc);
    if (!out) fail(ErrorKind::kIo, "cannot write " + (dir / e.file).string());
    e.length = write_capture(r, out);
  }
  write_text_file(dir / (stem + ".json"), sidecar_json(r).dump(2) + "\n");
  return e;
}

DatasetManifest scan_manifest(const fs::path& dir) {
  if (!fs::is_directory(dir)) fail(ErrorKind::kIo, dir.string() + " is not a directory");
  std::vector<fs::path> files;
  for (const auto& de : fs::directory_iterator(dir)) {
    if (de.is_regular_file() && de.path().extension() == ".grdc") files.push_back(de.path());
  }
  std::sort(files.begin(), files.end());

  DatasetManifest m;
  std::set<std::string> ids;
  for (const auto& p : files) {
    CaptureRecord r;
    apply_sidecar(read_json_file(sidecar_path(dir, p.filename().string())), r);
    if (!ids.insert(r.sample_id).second) {
      fail(ErrorKind::kDuplicateId, "duplicate sample_id '" + r.sample_id + "'");
    }
    std::ifstream in(p, std::ios::binary);
    if (!in) fail(ErrorKind::kIo, "cannot open " + p.string());
    const auto layers = decode_blob(in, m.records.empty() ? std::nullopt
                                                          : std::optional(m.num_layers));
    m.num_layers = static_cast<std::uint32_t>(layers.size());
    m.records.push_back({r.sample_id, p.filename().string(), 0,
                         static_cast<std::uint64_t>(fs::file_size(p))});
  }
  std::sort(m.records.begin(), m.records.end(),
            [](const ManifestEntry& a, const ManifestEntry& b) { return a.sample_id < b.sample_id; });

  if (fs::exists(dir / kManifestFile)) {
    const DatasetManifest existing = load_manifest(dir);
    m.model_name = existing.model_name;
    if (m.records.empty()) m.num_layers = existing.num_layers;
    if (existing.num_layers != m.num_layers || existing.records != m.records) {
      fail(ErrorKind::kFormat, "manifest.json disagrees with the capture files in " + dir.string());
    }
  }
  return m;
}

void write_manifest(const fs::path& dir, const DatasetManifest& m) {
  write_text_file(dir / kManifestFile, manifest_json(m).dump(2) + "\n");
}

DatasetManifest load_manifest(const fs::path& dir) {
  return parse_manifest(read_json_file(dir / kManifestFile));
}

CaptureRecord load_record(const fs::path& dir, const ManifestEntry& entry,
                          std::uint32_t num_layers) {
  std::ifstream in(dir / entry.file, std::ios::binary);
  if (!in) fail(ErrorKind::kIo, "cannot open " + (dir / entry.file).string());
  in.seekg(static_cast<std::streamoff>(entry.offset));
  if (!in) fail(ErrorKind::kTruncated, "record offset beyond end of " + entry.file);

  CaptureRecord r = read_capture(in, num_layers);
  apply_sidecar(read_json_file(sidecar_path(dir, entry.file)), r);
  if (r.sample_id != entry.sample_id) {
    fail(ErrorKind::kFormat, "sidecar sample_id '" + r.sample_id + "' differs from manifest '" +
                                 entry.sample_id + "'");
  }
  const auto end = static_cast<std::streamoff>(entry.offset + entry.length);
  while (static_cast<std::streamoff>(in.tellg()) < end) {
    r.steps.push_back({decode_blob(in, num_layers)});
  }
  if (static_cast<std::streamoff>(in.tellg()) != end) {
    fail(ErrorKind::kFormat, "record '" + r.sample_id + "' overruns its manifest range");
  }
  validate(r);
  return r;
}

DatasetManifest write_dataset(const fs::path& dir, const std::vector<CaptureRecord>& records,
                              const std::string& model_name) {
  fs::create_directories(dir);
  DatasetManifest m;
  m.model_name = model_name;
  std::set<std::string> stems;
  for (const auto& r : records) {
    if (!stems.insert(file_stem_for(r.sample_id)).second) {
      fail(ErrorKind::kDuplicateId, "sample_id '" + r.sample_id + "' collides with another record");
    }
    if (m.records.empty()) {
      m.num_layers = static_cast<std::uint32_t>(r.num_layers());
    } else if (static_cast<std::uint32_t>(r.num_layers()) != m.num_layers) {
      fail(ErrorKind::kLayerCountMismatch, "record '" + r.sample_id + "' has a different layer count");
    }
    m.records.push_back(write_record_files(dir, r));
  }
  std::sort(m.records.begin(), m.records.end(),
            [](const ManifestEntry& a, const ManifestEntry& b) { return a.sample_id < b.sample_id; });
  write_manifest(dir, m);
  return m;
}

std::vector<CaptureRecord> load_dataset(const fs::path& dir) {
  const DatasetManifest m = fs::exists(dir / kManifestFile) ? load_manifest(dir) : scan_manifest(dir);
  std::vector<CaptureRecord> out;
  out.reserve(m.records.size());
  for (const auto& e : m.records) out.push_back(load_record(dir, e, m.num_layers));
  return out;
}

}  // namespace grade
