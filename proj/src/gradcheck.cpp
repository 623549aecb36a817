// Copyright (c) 2026, The grade-probe Authors
// SPDX-License-Identifier: Apache-2.0

#include "grade/gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "grade/linalg.hpp"
#include "grade/rng.hpp"

namespace grade {

double gradient_rel_err(double analytic, double numeric, double floor) {
  const double scale = std::max({std::abs(analytic), std::abs(numeric), floor});
  return std::abs(analytic - numeric) / scale;
}

namespace {

Matrix& family_matrix(ModelWeights& w, int layer, int family) {
  auto& b = w.blocks[static_cast<std::size_t>(layer)];
  if (family == 0) return b.w_down;
  if (family == 1) return b.w_gate;
  return b.w_up;
}

const Matrix& family_grad(const Gradients& g, int layer, int family) {
  if (family == 0) return g.g[static_cast<std::size_t>(layer)];
  if (family == 1) return g.d_gate[static_cast<std::size_t>(layer)];
  return g.d_up[static_cast<std::size_t>(layer)];
}

}  // namespace

GradCheckReport run_gradcheck(const GradCheckConfig& cfg) {
  cfg.model.validate();
  Rng rng(cfg.seed);
  ToyModel model(cfg.model);
  const int v = cfg.model.vocab_size;

  std::vector<int> tokens(static_cast<std::size_t>(cfg.sequence_len));
  for (auto& t : tokens) t = static_cast<int>(rng.below(static_cast<std::uint64_t>(v)));

  LossSpec pre;
  pre.kind = LossKind::kPre;
  LossSpec pos;
  pos.kind = LossKind::kPos;
  for (int i = 0; i < cfg.sequence_len; ++i) {
    pos.targets.push_back(static_cast<int>(rng.below(static_cast<std::uint64_t>(v))));
  }

  GradCheckReport report;
  report.identity_holds = true;
  const char* family_names[] = {"w_down", "w_gate", "w_up"};
  BackwardOptions bopts;
  bopts.silu_grad_scale = cfg.silu_grad_scale;

  for (const LossSpec* spec : {&pre, &pos}) {
    const ForwardTrace tr = model.forward(tokens);
    const Gradients grads = model.backward(tr, *spec, bopts);
    for (int l = 0; l < cfg.model.num_layers; ++l) {
      const Matrix explicit_g = grad_explicit(tr.hidden[l], grads.delta[l]);
      if (explicit_g != grads.g[l]) report.identity_holds = false;
      report.max_subspace_residual =
          std::max(report.max_subspace_residual, max_subspace_residual(tr.hidden[l], grads.g[l]));
    }
    for (int family = 0; family < 3; ++family) {
      FamilyCheck fc;
      fc.loss = spec->kind == LossKind::kPre ? "pre" : "pos";
      fc.family = family_names[family];
      for (int c = 0; c < cfg.coords_per_family; ++c) {
        const int layer = static_cast<int>(rng.below(static_cast<std::uint64_t>(cfg.model.num_layers)));
        ToyModel probe(cfg.model, model.weights());
        Matrix& w = family_matrix(probe.mutable_weights(), layer, family);
        const auto i = static_cast<Eigen::Index>(rng.below(static_cast<std::uint64_t>(w.rows())));
        const auto j = static_cast<Eigen::Index>(rng.below(static_cast<std::uint64_t>(w.cols())));
        const double orig = w(i, j);
        w(i, j) = orig + cfg.epsilon;
        const double up = probe.loss(tokens, *spec);
        family_matrix(probe.mutable_weights(), layer, family)(i, j) = orig - cfg.epsilon;
        const double down = probe.loss(tokens, *spec);
        const double numeric = (up - down) / (2.0 * cfg.epsilon);
        const double analytic = family_grad(grads, layer, family)(i, j);
        fc.max_rel_err = std::max(fc.max_rel_err, gradient_rel_err(analytic, numeric, cfg.magnitude_floor));
        ++fc.coordinates;
      }
      fc.passed = fc.max_rel_err <= cfg.tolerance;
      report.families.push_back(fc);
    }
  }
  report.passed = report.identity_holds && report.max_subspace_residual <= cfg.subspace_tolerance &&
                  std::all_of(report.families.begin(), report.families.end(),
                              [](const FamilyCheck& f) { return f.passed; });
  return report;
}

nlohmann::json GradCheckReport::to_json() const {
  nlohmann::json fams = nlohmann::json::array();
  for (const auto& f : families) {
    fams.push_back({{"loss", f.loss},
                    {"family", f.family},
                    {"coordinates", f.coordinates},
                    {"max_rel_err", f.max_rel_err},
                    {"passed", f.passed}});
  }
  return {{"families", fams},
          {"identity_holds", identity_holds},
          {"max_subspace_residual", max_subspace_residual},
          {"passed", passed}};
}

}  // namespace grade
