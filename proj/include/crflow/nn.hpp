#pragma once

// Parameter registry and the convolution layer shared by the flow and the
// encoder.

#include <functional>
#include <string>
#include <vector>

#include "crflow/ops.hpp"
#include "crflow/rng.hpp"

namespace crflow {

// Handle to a model tensor under a stable checkpoint name. Buffers
// (trainable = false) are saved but never updated by the optimizer.
template <Real T>
struct NamedParam {
  std::string name;
  Tensor<T>* tensor = nullptr;
  bool trainable = true;
};

template <Real T>
using ParamRefs = std::vector<NamedParam<T>>;

// Fresh gradient-tracked leaf.
template <Real T>
Tensor<T> make_param(Tensor<T> init);

enum class Init { kDefault, kZero };

template <Real T>
struct Conv2d {
  Tensor<T> weight;  // [out, in/groups, k, k]
  Tensor<T> bias;    // [out]
  std::int64_t stride = 1;
  std::int64_t pad = 0;
  std::int64_t groups = 1;

  // kDefault draws weights from U(-1/sqrt(fan_in), 1/sqrt(fan_in)) and sets
  // the bias to zero.
  static Conv2d make(std::int64_t in, std::int64_t out, std::int64_t k, Rng& rng, Init init = Init::kDefault,
                     std::int64_t stride = 1, std::int64_t groups = 1);

  Tensor<T> operator()(const Tensor<T>& x) const;
  std::int64_t out_channels() const { return weight.dim(0); }
  void collect(const std::string& prefix, ParamRefs<T>& out);
};

// Copies values between two models with the same parameter names, converting
// the element type.
template <Real To, Real From>
void copy_params(const ParamRefs<From>& src, ParamRefs<To>& dst);

}  // namespace crflow
