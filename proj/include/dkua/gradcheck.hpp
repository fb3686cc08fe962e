#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "dkua/numerics.hpp"

namespace dkua {

struct GradCheckResult {
  std::string name;
  double max_rel_error = 0.0;
  double tolerance = 0.0;
  bool passed = false;
};

/// Builds a scalar on a fresh graph from the given leaves.
using ScalarBuilder = std::function<Var(Graph&, const std::vector<Var>&)>;

/// Largest |analytic - numeric| / max(|analytic|, 1e-8) over all elements.
double max_relative_error(const Tensor& analytic, const Tensor& numeric);

/// Compares reverse-mode gradients with central differences (h = 1e-5) for
/// every input.
GradCheckResult check_gradient(const std::string& name, const ScalarBuilder& build, const std::vector<Tensor>& inputs,
                               double tolerance, double perturb_analytic = 1.0);

/// The full certification suite: every differentiable operation, every loss
/// term, backbone and transfer-module gradients, and the composite objective
/// at t = 3. `corrupt` scales one analytic gradient to exercise the failure path.
std::vector<GradCheckResult> run_gradchecks(std::uint64_t seed, bool corrupt = false);

}  // namespace dkua
