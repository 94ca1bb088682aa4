#include "crflow/verify.hpp"

#include <Eigen/Dense>
#include <cmath>
#include <numbers>

namespace crflow {

namespace op = ops;

std::vector<double> numeric_jacobian(const std::function<TensorD(const TensorD&)>& f, const TensorD& x, double eps) {
  const auto d_in = x.numel();
  const auto base = f(x);
  const auto d_out = base.numel();
  std::vector<double> jac(static_cast<std::size_t>(d_out * d_in));
  std::vector<double> probe(x.data().begin(), x.data().end());
  for (std::int64_t j = 0; j < d_in; ++j) {
    const double keep = probe[static_cast<std::size_t>(j)];
    probe[static_cast<std::size_t>(j)] = keep + eps;
    auto up = f(TensorD(x.shape(), probe));
    probe[static_cast<std::size_t>(j)] = keep - eps;
    auto dn = f(TensorD(x.shape(), probe));
    probe[static_cast<std::size_t>(j)] = keep;
    auto u = up.data();
    auto v = dn.data();
    for (std::int64_t i = 0; i < d_out; ++i) {
      jac[static_cast<std::size_t>(i * d_in + j)] = (u[static_cast<std::size_t>(i)] - v[static_cast<std::size_t>(i)]) / (2 * eps);
    }
  }
  return jac;
}

double log_abs_det(const std::vector<double>& a, std::int64_t n) {
  using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  if (static_cast<std::int64_t>(a.size()) != n * n) throw ShapeError("log_abs_det: size mismatch");
  Eigen::PartialPivLU<Mat> lu(Eigen::Map<const Mat>(a.data(), n, n));
  const Mat& m = lu.matrixLU();
  double s = 0.0;
  for (std::int64_t i = 0; i < n; ++i) s += std::log(std::abs(m(i, i)));
  return s;
}

void perturb_params(ParamRefs<double>& params, Rng& rng, double scale) {
  for (auto& p : params) {
    if (!p.trainable) continue;
    for (auto& v : p.tensor->mutable_data()) v += rng.normal(0.0, scale);
  }
}

std::vector<ParamCoordinate> sample_param_coords(const ParamRefs<double>& params, Rng& rng, int count) {
  std::vector<const NamedParam<double>*> pool;
  for (const auto& p : params) {
    if (p.trainable) pool.push_back(&p);
  }
  if (pool.empty()) throw ShapeError("sample_param_coords: no trainable parameters");
  std::vector<ParamCoordinate> out;
  for (int i = 0; i < count; ++i) {
    const auto* p = pool[rng.below(pool.size())];
    const auto idx = static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(p->tensor->numel())));
    out.push_back({*p->tensor, idx, p->name + "[" + std::to_string(idx) + "]"});
  }
  return out;
}

ToyFlow::ToyFlow(std::uint64_t seed, int n_steps, double perturb) {
  Rng rng(derive_seed(seed, "toy-flow"));
  cond_value = TensorD({1}, {rng.uniform(-1.0, 1.0)});
  for (int k = 0; k < n_steps; ++k) {
    FlowStep<double> s;
    s.actnorm = ActNorm<double>(2);
    s.actnorm.set_values({std::exp(rng.normal(0, 0.1)), std::exp(rng.normal(0, 0.1))},
                         {rng.normal(0, 0.2), rng.normal(0, 0.2)});
    s.invconv = InvConv<double>(2, rng, false);
    s.coupling = Coupling<double>(2, 1, 16, rng);
    s.injector = Injector<double>(2, 1, 16, rng);
    ParamRefs<double> refs;
    s.coupling.collect("c", refs);
    s.injector.collect("i", refs);
    perturb_params(refs, rng, perturb);
    steps.push_back(std::move(s));
  }
}

std::pair<TensorD, TensorD> ToyFlow::forward(const TensorD& points) const {
  if (points.rank() != 2 || points.dim(1) != 2) throw ShapeError("ToyFlow: expected [N, 2] points");
  const auto n = points.dim(0);
  auto h = op::reshape(points, {n, 2, 1, 1});
  auto cond = TensorD::full({n, 1, 1, 1}, cond_value.item());
  auto logdet = TensorD::zeros({n});
  for (const auto& s : steps) {
    auto o = s.actnorm.forward(h);
    logdet = op::add(logdet, o.logdet);
    o = s.invconv.forward(o.y);
    logdet = op::add(logdet, o.logdet);
    o = s.coupling.forward(o.y, cond);
    logdet = op::add(logdet, o.logdet);
    o = s.injector.forward(o.y, cond);
    logdet = op::add(logdet, o.logdet);
    h = o.y;
  }
  return {op::reshape(h, {n, 2}), logdet};
}

TensorD ToyFlow::log_density(const TensorD& points) const {
  auto [z, logdet] = forward(points);
  auto sq = op::sum_per_sample(op::square(z));
  return op::add(op::add_scalar(op::mul_scalar(sq, -0.5), -std::log(2.0 * std::numbers::pi)), logdet);
}

double toy_density_integral(const ToyFlow& flow, double half, double step) {
  const auto k = static_cast<std::int64_t>(std::llround(2 * half / step));
  std::vector<double> pts(static_cast<std::size_t>(2 * k * k));
  for (std::int64_t i = 0; i < k; ++i) {
    for (std::int64_t j = 0; j < k; ++j) {
      const auto idx = static_cast<std::size_t>(2 * (i * k + j));
      pts[idx] = -half + (static_cast<double>(i) + 0.5) * step;
      pts[idx + 1] = -half + (static_cast<double>(j) + 0.5) * step;
    }
  }
  auto lp = flow.log_density(TensorD({k * k, 2}, std::move(pts)));
  double total = 0.0;
  for (double v : lp.data()) total += std::exp(v);
  return total * step * step;
}

}  // namespace crflow
