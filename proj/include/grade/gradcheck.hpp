// Copyright (c) 2026, The grade-probe Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "grade/toy_model.hpp"

namespace grade {

struct GradCheckConfig {
  ModelConfig model{2, 8, 12, 16, Activation::kSiLU, 42};
  std::uint64_t seed = 42;
  int sequence_len = 6;
  int coords_per_family = 100;
  double epsilon = 1e-5;
  double tolerance = 1e-5;
  double subspace_tolerance = 1e-9;
  /// Gradients smaller than this are compared absolutely.
  double magnitude_floor = 1e-8;
  /// Scale on silu' in the analytic backward; 1 is correct.
  double silu_grad_scale = 1.0;
};

struct FamilyCheck {
  std::string loss;    // "pre" or "pos"
  std::string family;  // "w_down", "w_gate", "w_up"
  int coordinates = 0;
  double max_rel_err = 0.0;
  bool passed = false;
};

struct GradCheckReport {
  std::vector<FamilyCheck> families;
  double max_subspace_residual = 0.0;
  bool identity_holds = false;  // g == delta^T h bitwise
  bool passed = false;

  nlohmann::json to_json() const;
};

/// |a - b| / max(|a|, |b|, floor).
double gradient_rel_err(double analytic, double numeric, double floor);

/// Central differences on randomly chosen weight coordinates for both loss
/// objectives, plus the g = delta^T h identity and the row-space check.
GradCheckReport run_gradcheck(const GradCheckConfig& cfg);

}  // namespace grade
