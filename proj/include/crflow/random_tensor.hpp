#pragma once

#include "crflow/rng.hpp"
#include "crflow/tensor.hpp"

namespace crflow {

template <Real T>
Tensor<T> random_uniform(Shape shape, Rng& rng, double lo = 0.0, double hi = 1.0) {
  std::vector<T> v(static_cast<std::size_t>(numel_of(shape)));
  for (auto& x : v) x = static_cast<T>(rng.uniform(lo, hi));
  return Tensor<T>(std::move(shape), std::move(v));
}

template <Real T>
Tensor<T> random_normal(Shape shape, Rng& rng, double mean = 0.0, double stddev = 1.0) {
  std::vector<T> v(static_cast<std::size_t>(numel_of(shape)));
  for (auto& x : v) x = static_cast<T>(rng.normal(mean, stddev));
  return Tensor<T>(std::move(shape), std::move(v));
}

// Element type conversion; the result does not track gradients.
template <Real To, Real From>
Tensor<To> cast(const Tensor<From>& t) {
  std::vector<To> v(t.data().begin(), t.data().end());
  return Tensor<To>(t.shape(), std::move(v));
}

}  // namespace crflow
