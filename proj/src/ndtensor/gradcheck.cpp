#include "crflow/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <sstream>

namespace crflow {
namespace {

bool bit_equal(double a, double b) { return std::memcmp(&a, &b, sizeof(double)) == 0; }

void finish(GradcheckReport& r, const GradcheckOptions& opts) {
  r.rel_error.resize(r.analytic.size());
  r.max_rel_error = 0.0;
  std::size_t worst = 0;
  for (std::size_t i = 0; i < r.analytic.size(); ++i) {
    const double a = r.analytic[i], n = r.numeric[i];
    const double denom = std::max({std::abs(a), std::abs(n), opts.abs_floor});
    r.rel_error[i] = std::abs(a - n) / denom;
    if (r.rel_error[i] > r.max_rel_error) {
      r.max_rel_error = r.rel_error[i];
      worst = i;
    }
  }
  r.passed = r.deterministic && r.max_rel_error < opts.tol;
  std::ostringstream os;
  if (!r.deterministic) {
    os << "function is not deterministic";
  } else {
    os << "max rel err " << r.max_rel_error << " (tol " << opts.tol << ")";
    if (!r.analytic.empty()) os << " at coord " << worst << ": analytic " << r.analytic[worst] << " numeric " << r.numeric[worst];
  }
  r.message = os.str();
}

}  // namespace

GradcheckReport gradcheck(const std::function<TensorD(const TensorD&)>& f, const TensorD& x,
                          const GradcheckOptions& opts, const std::vector<std::int64_t>& coords) {
  GradcheckReport r;
  std::vector<double> base(x.data().begin(), x.data().end());

  {
    TensorD x0(x.shape(), base);
    const double f1 = f(x0).item();
    const double f2 = f(x0).item();
    if (!bit_equal(f1, f2)) {
      r.deterministic = false;
      finish(r, opts);
      return r;
    }
  }

  TensorD grad;
  {
    Tape<double> tape;
    TensorD leaf(x.shape(), base);
    leaf.set_requires_grad(true);
    auto loss = f(leaf);
    grad = tape.backward(loss).of(leaf);
  }

  std::vector<std::int64_t> idx = coords;
  if (idx.empty()) {
    idx.resize(static_cast<std::size_t>(x.numel()));
    for (std::int64_t i = 0; i < x.numel(); ++i) idx[i] = i;
  }
  for (auto i : idx) {
    auto plus = base;
    auto minus = base;
    plus[i] += opts.eps;
    minus[i] -= opts.eps;
    const double fp = f(TensorD(x.shape(), plus)).item();
    const double fm = f(TensorD(x.shape(), minus)).item();
    r.analytic.push_back(grad.data()[i]);
    r.numeric.push_back((fp - fm) / (2.0 * opts.eps));
  }
  finish(r, opts);
  return r;
}

GradcheckReport gradcheck_params(const std::function<TensorD()>& loss, const std::vector<ParamCoordinate>& coords,
                                 const GradcheckOptions& opts) {
  GradcheckReport r;
  if (!bit_equal(loss().item(), loss().item())) {
    r.deterministic = false;
    finish(r, opts);
    return r;
  }
  std::vector<double> analytic;
  {
    Tape<double> tape;
    auto value = loss();
    auto grads = tape.backward(value);
    for (const auto& c : coords) analytic.push_back(grads.of(c.param).data()[c.index]);
  }
  for (std::size_t k = 0; k < coords.size(); ++k) {
    auto param = coords[k].param;
    auto data = param.mutable_data();
    const double orig = data[coords[k].index];
    data[coords[k].index] = orig + opts.eps;
    const double fp = loss().item();
    data[coords[k].index] = orig - opts.eps;
    const double fm = loss().item();
    data[coords[k].index] = orig;
    r.analytic.push_back(analytic[k]);
    r.numeric.push_back((fp - fm) / (2.0 * opts.eps));
  }
  finish(r, opts);
  return r;
}

}  // namespace crflow
