#pragma once

// Numerical oracles shared by the self-check suite and the tests.

#include <functional>
#include <vector>

#include "crflow/flow.hpp"
#include "crflow/gradcheck.hpp"
#include "crflow/nn.hpp"

namespace crflow {

// Dense Jacobian of f at x by central differences, row-major [D_out, D_in].
std::vector<double> numeric_jacobian(const std::function<TensorD(const TensorD&)>& f, const TensorD& x,
                                     double eps = 1e-6);

// ln|det A| via partial-pivot LU; A is row-major n x n.
double log_abs_det(const std::vector<double>& a, std::int64_t n);

// Adds N(0, scale^2) noise to every trainable parameter.
void perturb_params(ParamRefs<double>& params, Rng& rng, double scale);

// Picks `count` coordinates: a trainable tensor uniformly at random, then an
// index within it, so small tensors are covered as often as large ones.
std::vector<ParamCoordinate> sample_param_coords(const ParamRefs<double>& params, Rng& rng, int count);

// Two-dimensional conditional flow built from the image layers on a 2x1x1
// grid, with a constant one-channel condition.
struct ToyFlow {
  std::vector<FlowStep<double>> steps;
  TensorD cond_value;  // [1]

  explicit ToyFlow(std::uint64_t seed, int n_steps = 3, double perturb = 0.3);
  // points: [N, 2]. Returns z [N, 2] and per-point logdet [N].
  std::pair<TensorD, TensorD> forward(const TensorD& points) const;
  // log p(y) under a standard normal latent, [N].
  TensorD log_density(const TensorD& points) const;
};

// Riemann sum of exp(log_density) on the square [-half, half]^2.
double toy_density_integral(const ToyFlow& flow, double half = 6.0, double step = 0.05);

}  // namespace crflow
