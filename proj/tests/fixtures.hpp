// Copyright (c) 2026, The grade-probe Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <filesystem>
#include <functional>
#include <string>

#include <unistd.h>

#include "grade/capture.hpp"
#include "grade/error.hpp"
#include "grade/features.hpp"
#include "grade/rng.hpp"

namespace fixture {

inline grade::ErrorKind kind_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const grade::Error& e) {
    return e.kind();
  }
  return grade::ErrorKind::kCheckFailed;
}

/// Fresh empty directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    static int counter = 0;
    path_ = std::filesystem::temp_directory_path() /
            ("grade-test-" + tag + "-" + std::to_string(::getpid()) + "-" + std::to_string(counter++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
};

inline grade::MatrixF random_f32(grade::Rng& rng, Eigen::Index r, Eigen::Index c) {
  grade::MatrixF m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<float>(rng.normal());
  return m;
}

inline std::vector<grade::LayerCapture> random_layers(grade::Rng& rng, int num_layers, Eigen::Index n,
                                                      Eigen::Index d_ff, Eigen::Index d_model) {
  std::vector<grade::LayerCapture> out;
  for (int l = 0; l < num_layers; ++l) {
    grade::LayerCapture lc;
    lc.layer_index = static_cast<std::uint32_t>(l);
    lc.h = random_f32(rng, n, d_ff);
    lc.delta = random_f32(rng, n, d_model);
    out.push_back(std::move(lc));
  }
  return out;
}

/// Random valid record with n <= 16, d <= 32, L <= 4. About half carry
/// per-step captures.
inline grade::CaptureRecord random_record(grade::Rng& rng, const std::string& id) {
  grade::CaptureRecord r;
  r.sample_id = id;
  const int num_layers = 1 + static_cast<int>(rng.below(4));
  const Eigen::Index n = 1 + static_cast<Eigen::Index>(rng.below(16));
  const Eigen::Index d_ff = 1 + static_cast<Eigen::Index>(rng.below(32));
  const Eigen::Index d_model = 1 + static_cast<Eigen::Index>(rng.below(32));
  r.objective = rng.below(2) ? grade::Objective::kPos : grade::Objective::kPre;
  r.layers = random_layers(rng, num_layers, n, d_ff, d_model);
  const auto num_tokens = static_cast<int>(rng.below(static_cast<std::uint64_t>(n) + 1));
  for (int t = 0; t < num_tokens; ++t) r.tokens.push_back("t" + std::to_string(rng.below(50)));
  if (num_tokens > 0) {
    r.step_boundaries.push_back(0);
    for (int t = 1; t < num_tokens; ++t) {
      if (rng.below(3) == 0) r.step_boundaries.push_back(t);
    }
    if (rng.below(2)) {
      for (std::size_t k = 0; k < r.step_boundaries.size(); ++k) {
        r.steps.push_back({random_layers(rng, num_layers, grade::step_prefix_length(r, k), d_ff, d_model)});
      }
    }
  }
  r.loss_value = rng.uniform(0.0, 5.0);
  r.label = static_cast<grade::Label>(rng.below(4));
  if (rng.below(2)) r.accuracy_over_samples = rng.uniform();
  r.dataset_name = rng.below(2) ? "gsm8k-toy" : "toy";
  if (rng.below(2)) r.paraphrase_group = "g" + std::to_string(rng.below(10));
  return r;
}

/// Two classes with every coordinate at 1 -/+ sep plus 0.1 N(0,1) noise.
/// Even indices are answerable.
inline std::vector<grade::FeatureVector> gaussian_features(std::uint64_t seed, int n, int dim,
                                                           double sep = 0.25) {
  grade::Rng rng(seed);
  std::vector<grade::FeatureVector> fs;
  for (int i = 0; i < n; ++i) {
    grade::FeatureVector f;
    f.sample_id = "g" + std::to_string(i);
    const bool answerable = i % 2 == 0;
    f.label = answerable ? grade::Label::kAnswerable : grade::Label::kUnanswerable;
    f.objective = grade::Objective::kPos;
    f.dataset_name = "gauss";
    for (int l = 0; l < dim; ++l) f.values.push_back(1.0 + (answerable ? -sep : sep) + 0.1 * rng.normal());
    fs.push_back(std::move(f));
  }
  return fs;
}

}  // namespace fixture
