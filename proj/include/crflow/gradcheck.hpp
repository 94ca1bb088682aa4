#pragma once

// Central-difference verification of tape gradients (f64 only).

#include <functional>
#include <string>
#include <vector>

#include "crflow/tensor.hpp"

namespace crflow {

struct GradcheckReport {
  std::vector<double> analytic;
  std::vector<double> numeric;
  std::vector<double> rel_error;
  double max_rel_error = 0.0;
  bool deterministic = true;
  bool passed = false;
  std::string message;
};

struct GradcheckOptions {
  double eps = 1e-5;
  double tol = 1e-4;
  // Denominator floor of the relative error |a - n| / max(|a|, |n|, floor),
  // so coordinates with vanishing gradient are judged by absolute error.
  double abs_floor = 1e-6;
};

// Checks d f / d x for every coordinate of x (or the listed coordinates).
GradcheckReport gradcheck(const std::function<TensorD(const TensorD&)>& f, const TensorD& x,
                          const GradcheckOptions& opts = {}, const std::vector<std::int64_t>& coords = {});

// One scalar coordinate of a parameter tensor. The handle shares storage with
// the model, so perturbations are seen by `loss`.
struct ParamCoordinate {
  TensorD param;
  std::int64_t index = 0;
  std::string label;
};

// Checks d loss / d param[index] for each coordinate. `loss` must build its
// graph from the current parameter values on every call.
GradcheckReport gradcheck_params(const std::function<TensorD()>& loss, const std::vector<ParamCoordinate>& coords,
                                 const GradcheckOptions& opts = {});

}  // namespace crflow
