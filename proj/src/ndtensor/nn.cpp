#include "crflow/nn.hpp"

#include <cmath>
#include <unordered_map>

namespace crflow {

template <Real T>
Tensor<T> make_param(Tensor<T> init) {
  init.set_requires_grad(true);
  return init;
}

template <Real T>
Conv2d<T> Conv2d<T>::make(std::int64_t in, std::int64_t out, std::int64_t k, Rng& rng, Init init,
                          std::int64_t stride, std::int64_t groups) {
  if (in % groups != 0 || out % groups != 0) throw ShapeError("Conv2d: channels not divisible by groups");
  if (k % 2 == 0) throw ShapeError("Conv2d: kernel size must be odd");
  Conv2d c;
  c.stride = stride;
  c.pad = k / 2;
  c.groups = groups;
  const std::int64_t fan_in = (in / groups) * k * k;
  std::vector<T> w(static_cast<std::size_t>(out * fan_in), T(0));
  if (init == Init::kDefault) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    for (auto& v : w) v = static_cast<T>(rng.uniform(-bound, bound));
  }
  c.weight = make_param(Tensor<T>({out, in / groups, k, k}, std::move(w)));
  c.bias = make_param(Tensor<T>::zeros({out}));
  return c;
}

template <Real T>
Tensor<T> Conv2d<T>::operator()(const Tensor<T>& x) const {
  return ops::conv2d(x, weight, &bias, stride, pad, groups);
}

template <Real T>
void Conv2d<T>::collect(const std::string& prefix, ParamRefs<T>& out) {
  out.push_back({prefix + "/weight", &weight, true});
  out.push_back({prefix + "/bias", &bias, true});
}

template <Real To, Real From>
void copy_params(const ParamRefs<From>& src, ParamRefs<To>& dst) {
  std::unordered_map<std::string, const Tensor<From>*> by_name;
  for (const auto& p : src) by_name[p.name] = p.tensor;
  for (auto& p : dst) {
    auto it = by_name.find(p.name);
    if (it == by_name.end()) throw ShapeError("copy_params: missing " + p.name);
    const auto& s = *it->second;
    if (s.shape() != p.tensor->shape()) throw ShapeError("copy_params: shape mismatch for " + p.name);
    auto d = p.tensor->mutable_data();
    auto sv = s.data();
    for (std::size_t i = 0; i < d.size(); ++i) d[i] = static_cast<To>(sv[i]);
  }
}

template Tensor<float> make_param(Tensor<float>);
template Tensor<double> make_param(Tensor<double>);
template struct Conv2d<float>;
template struct Conv2d<double>;
template void copy_params<float, double>(const ParamRefs<double>&, ParamRefs<float>&);
template void copy_params<double, float>(const ParamRefs<float>&, ParamRefs<double>&);
template void copy_params<float, float>(const ParamRefs<float>&, ParamRefs<float>&);
template void copy_params<double, double>(const ParamRefs<double>&, ParamRefs<double>&);

}  // namespace crflow
