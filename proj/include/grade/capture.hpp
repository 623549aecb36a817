// Copyright (c) 2026, The grade-probe Authors
// SPDX-License-Identifier: Apache-2.0
//
// Capture files: per-sample, per-layer hidden states h and output gradients
// delta, stored as 32-bit little-endian payloads with a JSON sidecar for the
// sample metadata and a JSON manifest per directory.
//
// Binary blob layout (all integers u32 little-endian, floats IEEE-754 f32):
//
//   "GRDC" | version=1 | L | L x { layer_index | n | d_ff | d_model |
//                                  h[n*d_ff] row-major | delta[n*d_model] }
//
// A record's byte range holds one such blob for the full sequence, followed
// by one blob per reasoning step when step captures are present.

#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "grade/linalg.hpp"

namespace grade {

using MatrixF = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

enum class Objective { kPre, kPos };
enum class Label { kAnswerable, kUnanswerable, kAmbiguous, kUnlabeled };

std::string_view to_string(Objective o) noexcept;
std::string_view to_string(Label l) noexcept;
Objective parse_objective(std::string_view s);
Label parse_label(std::string_view s);

inline constexpr char kCaptureMagic[4] = {'G', 'R', 'D', 'C'};
inline constexpr std::uint32_t kCaptureVersion = 1;
inline constexpr std::uint32_t kManifestFormatVersion = 1;

struct LayerCapture {
  std::uint32_t layer_index = 0;
  MatrixF h;      // n x d_ff
  MatrixF delta;  // n x d_model

  Eigen::Index n() const noexcept { return h.rows(); }
  Eigen::Index d_ff() const noexcept { return h.cols(); }
  Eigen::Index d_model() const noexcept { return delta.cols(); }

  Matrix h64() const { return h.cast<double>(); }
  Matrix delta64() const { return delta.cast<double>(); }

  bool operator==(const LayerCapture&) const = default;
};

/// Captures for one reasoning step: h over the cumulative prefix and delta
/// from the loss restricted to that step's tokens.
struct StepCapture {
  std::vector<LayerCapture> layers;
  bool operator==(const StepCapture&) const = default;
};

struct CaptureRecord {
  std::string sample_id;
  Objective objective = Objective::kPre;
  std::vector<std::string> tokens;  // response tokens; the last |tokens| rows
  std::vector<int> step_boundaries; // start index of each step within tokens
  double loss_value = 0.0;
  std::vector<LayerCapture> layers;
  Label label = Label::kUnlabeled;
  std::optional<double> accuracy_over_samples;
  std::string dataset_name;
  std::optional<std::string> paraphrase_group;
  std::vector<StepCapture> steps;  // empty, or one per step boundary

  int num_layers() const noexcept { return static_cast<int>(layers.size()); }
  Eigen::Index num_positions() const noexcept { return layers.empty() ? 0 : layers.front().n(); }

  bool operator==(const CaptureRecord&) const = default;
};

/// Half-open token range [begin, end) of step k within the response tokens.
struct StepSpan {
  int begin = 0;
  int end = 0;
};
StepSpan step_span(const CaptureRecord& r, std::size_t k);

/// Number of sequence rows covered by the prefix ending at step k.
Eigen::Index step_prefix_length(const CaptureRecord& r, std::size_t k);

/// Throws InvalidInput / Format describing the first violated invariant.
void validate(const CaptureRecord& r);

/// Writes the record's binary payload. Returns bytes written. Validates
/// before emitting anything.
std::size_t write_capture(const CaptureRecord& r, std::ostream& sink);

/// Reads a single blob into a record carrying only `layers`. Sidecar
/// metadata is attached separately.
CaptureRecord read_capture(std::istream& source,
                           std::optional<std::uint32_t> expected_layers = std::nullopt);

nlohmann::json sidecar_json(const CaptureRecord& r);
/// Copies metadata from a sidecar document; unknown or missing keys throw.
void apply_sidecar(const nlohmann::json& j, CaptureRecord& r);

struct ManifestEntry {
  std::string sample_id;
  std::string file;  // relative to the dataset directory
  std::uint64_t offset = 0;
  std::uint64_t length = 0;
  bool operator==(const ManifestEntry&) const = default;
};

struct DatasetManifest {
  std::uint32_t format_version = kManifestFormatVersion;
  std::string model_name;
  std::uint32_t num_layers = 0;
  std::vector<ManifestEntry> records;  // sorted by sample_id
  bool operator==(const DatasetManifest&) const = default;
};

nlohmann::json manifest_json(const DatasetManifest& m);
DatasetManifest parse_manifest(const nlohmann::json& j);

inline constexpr const char* kManifestFile = "manifest.json";

/// Filesystem-safe stem for a sample id.
std::string file_stem_for(std::string_view sample_id);

/// Writes <stem>.grdc and <stem>.json into dir.
ManifestEntry write_record_files(const std::filesystem::path& dir, const CaptureRecord& r);

/// Indexes every *.grdc file in dir. If a manifest.json is present it must
/// agree with the files on disk; its model name is carried over.
DatasetManifest scan_manifest(const std::filesystem::path& dir);

void write_manifest(const std::filesystem::path& dir, const DatasetManifest& m);
DatasetManifest load_manifest(const std::filesystem::path& dir);

/// Loads the full record (payload, steps, sidecar) for one manifest entry.
CaptureRecord load_record(const std::filesystem::path& dir, const ManifestEntry& entry,
                          std::uint32_t num_layers);

/// Writes every record plus the manifest. Returns the manifest.
DatasetManifest write_dataset(const std::filesystem::path& dir,
                              const std::vector<CaptureRecord>& records,
                              const std::string& model_name);

std::vector<CaptureRecord> load_dataset(const std::filesystem::path& dir);

}  // namespace grade
