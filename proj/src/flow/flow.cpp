#include "crflow/flow.hpp"

#include <Eigen/Dense>
#include <cmath>
#include <string>

#include "crflow/crmap.hpp"

namespace crflow {

namespace op = ops;

void FlowLayout::validate() const {
  if (levels < 1 || steps_per_level < 1 || base_channels < 1 || hidden < 1) {
    throw ShapeError("FlowLayout: levels, steps, channels and hidden width must be positive");
  }
  if (split_num != 1 || split_den != 2) throw ShapeError("FlowLayout: only a 1/2 split is supported");
  const int block = 1 << levels;
  if (hr_h <= 0 || hr_w <= 0 || hr_h % block != 0 || hr_w % block != 0) {
    throw ShapeError("FlowLayout: image " + std::to_string(hr_h) + "x" + std::to_string(hr_w) +
                     " not divisible by 2^" + std::to_string(levels));
  }
  for (int l = 0; l + 1 < levels; ++l) {
    if (level_channels(l) % 2 != 0) throw ShapeError("FlowLayout: odd channel count at a split");
  }
}

int FlowLayout::level_channels(int l) const {
  int c = base_channels * 4;
  for (int i = 0; i < l; ++i) c = kept_channels(i) * 4;
  return c;
}

int FlowLayout::kept_channels(int l) const {
  const int c = level_channels(l);
  return c * split_num / split_den;
}

std::vector<Shape> FlowLayout::latent_shapes(std::int64_t n) const {
  std::vector<Shape> out;
  for (int l = 0; l + 1 < levels; ++l) {
    out.push_back({n, level_channels(l) - kept_channels(l), level_h(l), level_w(l)});
  }
  out.push_back({n, level_channels(levels - 1), level_h(levels - 1), level_w(levels - 1)});
  return out;
}

template <Real T>
Tensor<T> squeeze(const Tensor<T>& x) {
  if (x.rank() != 4) throw ShapeError("squeeze: expected NCHW, got " + to_string(x.shape()));
  const auto n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (h % 2 != 0 || w % 2 != 0) throw ShapeError("squeeze: odd spatial dims " + to_string(x.shape()));
  auto r = op::reshape(x, {n, c, h / 2, 2, w / 2, 2});
  r = op::permute(r, {0, 1, 3, 5, 2, 4});
  return op::reshape(r, {n, c * 4, h / 2, w / 2});
}

template <Real T>
Tensor<T> unsqueeze(const Tensor<T>& x) {
  if (x.rank() != 4 || x.dim(1) % 4 != 0) throw ShapeError("unsqueeze: bad shape " + to_string(x.shape()));
  const auto n = x.dim(0), c = x.dim(1) / 4, h = x.dim(2), w = x.dim(3);
  auto r = op::reshape(x, {n, c, 2, 2, h, w});
  r = op::permute(r, {0, 1, 4, 2, 5, 3});
  return op::reshape(r, {n, c, h * 2, w * 2});
}

std::vector<std::int64_t> split_shuffle(std::int64_t channels) {
  std::vector<std::int64_t> p;
  p.reserve(static_cast<std::size_t>(channels));
  for (std::int64_t c = 0; c < channels; c += 2) p.push_back(c);
  for (std::int64_t c = 1; c < channels; c += 2) p.push_back(c);
  return p;
}

template <Real T>
std::pair<Tensor<T>, Tensor<T>> split(const Tensor<T>& x) {
  const auto c = x.dim(1);
  if (c % 2 != 0) throw ShapeError("split: odd channel count " + std::to_string(c));
  auto shuffled = op::index_select(x, 1, split_shuffle(c));
  return {op::slice(shuffled, 1, 0, c / 2), op::slice(shuffled, 1, c / 2, c / 2)};
}

template <Real T>
Tensor<T> unsplit(const Tensor<T>& kept, const Tensor<T>& emitted) {
  auto joined = op::concat<T>({kept, emitted}, 1);
  const auto p = split_shuffle(joined.dim(1));
  std::vector<std::int64_t> inv(p.size());
  for (std::size_t i = 0; i < p.size(); ++i) inv[static_cast<std::size_t>(p[i])] = static_cast<std::int64_t>(i);
  return op::index_select(joined, 1, inv);
}

namespace {

constexpr double kScaleEps = 1e-3;

template <Real T>
Tensor<T> per_sample(const Tensor<T>& scalar_value, std::int64_t n, double factor) {
  auto ones = Tensor<T>::full({n}, T(1));
  return op::mul_scalar(op::mul(ones, scalar_value), static_cast<T>(factor));
}

template <Real T>
void check_cond(const Tensor<T>& x, const Tensor<T>& cond, std::int64_t channels, const char* who) {
  if (cond.rank() != 4 || cond.dim(0) != x.dim(0) || cond.dim(1) != channels || cond.dim(2) != x.dim(2) ||
      cond.dim(3) != x.dim(3)) {
    throw ShapeError(std::string(who) + ": conditioning " + to_string(cond.shape()) + " does not match input " +
                     to_string(x.shape()));
  }
}

}  // namespace

template <Real T>
Tensor<T> affine_scale(const Tensor<T>& raw) {
  const T eps = static_cast<T>(kScaleEps);
  const T denom = op::add_scalar(op::sigmoid(Tensor<T>::scalar(T(2))), eps).item();
  return op::div_scalar(op::add_scalar(op::sigmoid(op::add_scalar(raw, T(2))), eps), denom);
}

template <Real T>
LayerOut<T> apply_affine(const Tensor<T>& x, const Tensor<T>& s, const Tensor<T>& t) {
  return {op::add(op::mul(s, x), t), op::sum_per_sample(op::log(s))};
}

// ---------------------------------------------------------------- actnorm

template <Real T>
ActNorm<T>::ActNorm(std::int64_t channels)
    : logs(make_param(Tensor<T>::zeros({channels}))),
      bias(make_param(Tensor<T>::zeros({channels}))),
      initialized_(Tensor<T>::zeros({1})) {}

template <Real T>
LayerOut<T> ActNorm<T>::forward(const Tensor<T>& x) const {
  auto y = op::mul_channel(op::add_channel(x, bias), op::exp(logs));
  return {y, per_sample(op::sum(logs), x.dim(0), static_cast<double>(x.dim(2) * x.dim(3)))};
}

template <Real T>
Tensor<T> ActNorm<T>::inverse(const Tensor<T>& y) const {
  return op::add_channel(op::mul_channel(y, op::exp(op::neg(logs))), op::neg(bias));
}

template <Real T>
void ActNorm<T>::data_init(const Tensor<T>& x) {
  const auto n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  if (c != logs.dim(0)) throw ShapeError("ActNorm::data_init: channel mismatch");
  auto xv = x.data();
  auto lv = logs.mutable_data();
  auto bv = bias.mutable_data();
  for (std::int64_t ch = 0; ch < c; ++ch) {
    double s = 0.0;
    for (std::int64_t i = 0; i < n; ++i) {
      for (std::int64_t p = 0; p < hw; ++p) s += xv[static_cast<std::size_t>((i * c + ch) * hw + p)];
    }
    const double count = static_cast<double>(n * hw);
    const double mean = s / count;
    double ss = 0.0;
    for (std::int64_t i = 0; i < n; ++i) {
      for (std::int64_t p = 0; p < hw; ++p) {
        const double d = xv[static_cast<std::size_t>((i * c + ch) * hw + p)] - mean;
        ss += d * d;
      }
    }
    const double sd = std::sqrt(ss / count);
    bv[static_cast<std::size_t>(ch)] = static_cast<T>(-mean);
    lv[static_cast<std::size_t>(ch)] = static_cast<T>(-std::log(sd + 1e-6));
  }
  initialized_.mutable_data()[0] = T(1);
}

template <Real T>
void ActNorm<T>::set_values(const std::vector<T>& scale, const std::vector<T>& b) {
  auto lv = logs.mutable_data();
  auto bv = bias.mutable_data();
  if (scale.size() != lv.size() || b.size() != bv.size()) throw ShapeError("ActNorm::set_values: size mismatch");
  for (std::size_t i = 0; i < lv.size(); ++i) {
    if (!(scale[i] > T(0))) throw DomainError("ActNorm: scale must be positive");
    lv[i] = std::log(scale[i]);
    bv[i] = b[i];
  }
  initialized_.mutable_data()[0] = T(1);
}

template <Real T>
void ActNorm<T>::collect(const std::string& prefix, ParamRefs<T>& out) {
  out.push_back({prefix + "/logs", &logs, true});
  out.push_back({prefix + "/bias", &bias, true});
  out.push_back({prefix + "/initialized", &initialized_, false});
}

// ---------------------------------------------------------------- invconv

template <Real T>
void InvConv<T>::build_masks(std::int64_t c) {
  std::vector<T> lm(static_cast<std::size_t>(c * c), T(0)), um(lm.size(), T(0));
  for (std::int64_t i = 0; i < c; ++i) {
    for (std::int64_t j = 0; j < c; ++j) {
      if (j < i) lm[static_cast<std::size_t>(i * c + j)] = T(1);
      if (j > i) um[static_cast<std::size_t>(i * c + j)] = T(1);
    }
  }
  lower_mask_ = Tensor<T>({c, c}, std::move(lm));
  upper_mask_ = Tensor<T>({c, c}, std::move(um));
  eye_ = op::eye<T>(c);
}

template <Real T>
InvConv<T> InvConv<T>::from_weight(const std::vector<double>& w, std::int64_t c) {
  using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  if (static_cast<std::int64_t>(w.size()) != c * c) throw ShapeError("InvConv::from_weight: size mismatch");
  Mat a = Eigen::Map<const Mat>(w.data(), c, c);
  Eigen::PartialPivLU<Mat> lu(a);
  // Eigen factors P_e A = L U, so A = P_e^T L U.
  Mat pe = lu.permutationP().toDenseMatrix().template cast<double>();
  Mat p = pe.transpose();
  Mat lu_m = lu.matrixLU();
  std::vector<T> pv(static_cast<std::size_t>(c * c)), lv(pv.size(), T(0)), uv(pv.size(), T(0));
  std::vector<T> logs_v(static_cast<std::size_t>(c)), sign_v(static_cast<std::size_t>(c));
  for (std::int64_t i = 0; i < c; ++i) {
    for (std::int64_t j = 0; j < c; ++j) {
      const auto k = static_cast<std::size_t>(i * c + j);
      pv[k] = static_cast<T>(p(i, j));
      if (j < i) lv[k] = static_cast<T>(lu_m(i, j));
      if (j > i) uv[k] = static_cast<T>(lu_m(i, j));
    }
    const double d = lu_m(i, i);
    if (d == 0.0) throw DomainError("InvConv: singular weight");
    sign_v[static_cast<std::size_t>(i)] = d > 0 ? T(1) : T(-1);
    logs_v[static_cast<std::size_t>(i)] = static_cast<T>(std::log(std::abs(d)));
  }
  InvConv out;
  out.perm = Tensor<T>({c, c}, std::move(pv));
  out.lower = make_param(Tensor<T>({c, c}, std::move(lv)));
  out.upper = make_param(Tensor<T>({c, c}, std::move(uv)));
  out.logs = make_param(Tensor<T>({c}, std::move(logs_v)));
  out.sign = Tensor<T>({c}, std::move(sign_v));
  out.build_masks(c);
  return out;
}

template <Real T>
InvConv<T>::InvConv(std::int64_t c, Rng& rng, bool identity) {
  std::vector<double> w(static_cast<std::size_t>(c * c), 0.0);
  if (identity) {
    for (std::int64_t i = 0; i < c; ++i) w[static_cast<std::size_t>(i * c + i)] = 1.0;
  } else {
    using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
    Mat g(c, c);
    for (std::int64_t i = 0; i < c; ++i) {
      for (std::int64_t j = 0; j < c; ++j) g(i, j) = rng.normal();
    }
    Eigen::HouseholderQR<Mat> qr(g);
    Mat q = qr.householderQ();
    for (std::int64_t i = 0; i < c; ++i) {
      for (std::int64_t j = 0; j < c; ++j) w[static_cast<std::size_t>(i * c + j)] = q(i, j);
    }
  }
  *this = from_weight(w, c);
}

template <Real T>
Tensor<T> InvConv<T>::weight() const {
  auto l = op::add(op::mul(lower, lower_mask_), eye_);
  auto u = op::add(op::mul(upper, upper_mask_), op::diag(op::mul(sign, op::exp(logs))));
  return op::matmul(perm, op::matmul(l, u));
}

template <Real T>
Tensor<T> InvConv<T>::inverse_weight() const {
  auto l = op::add(op::mul(lower, lower_mask_), eye_);
  auto u = op::add(op::mul(upper, upper_mask_), op::diag(op::mul(sign, op::exp(logs))));
  auto li = op::triangular_inverse(l, true);
  auto ui = op::triangular_inverse(u, false);
  return op::matmul(ui, op::matmul(li, op::transpose(perm)));
}

template <Real T>
LayerOut<T> InvConv<T>::forward(const Tensor<T>& x) const {
  const auto c = logs.dim(0);
  if (x.dim(1) != c) throw ShapeError("InvConv: channel mismatch");
  auto y = op::conv2d(x, op::reshape(weight(), {c, c, 1, 1}), nullptr, 1, 0);
  return {y, per_sample(op::sum(logs), x.dim(0), static_cast<double>(x.dim(2) * x.dim(3)))};
}

template <Real T>
Tensor<T> InvConv<T>::inverse(const Tensor<T>& y) const {
  const auto c = logs.dim(0);
  if (y.dim(1) != c) throw ShapeError("InvConv: channel mismatch");
  return op::conv2d(y, op::reshape(inverse_weight(), {c, c, 1, 1}), nullptr, 1, 0);
}

template <Real T>
void InvConv<T>::collect(const std::string& prefix, ParamRefs<T>& out) {
  out.push_back({prefix + "/perm", &perm, false});
  out.push_back({prefix + "/lower", &lower, true});
  out.push_back({prefix + "/upper", &upper, true});
  out.push_back({prefix + "/logs", &logs, true});
  out.push_back({prefix + "/sign", &sign, false});
}

// ---------------------------------------------------------------- subnets

template <Real T>
Subnet<T> Subnet<T>::make(std::int64_t in, std::int64_t hidden, std::int64_t out, Rng& rng) {
  Subnet s;
  s.c1 = Conv2d<T>::make(in, hidden, 3, rng);
  s.c2 = Conv2d<T>::make(hidden, hidden, 1, rng);
  s.c3 = Conv2d<T>::make(hidden, out, 3, rng, Init::kZero);
  return s;
}

template <Real T>
Tensor<T> Subnet<T>::operator()(const Tensor<T>& x) const {
  return c3(op::gelu(c2(op::gelu(c1(x)))));
}

template <Real T>
void Subnet<T>::collect(const std::string& prefix, ParamRefs<T>& out) {
  c1.collect(prefix + "/c1", out);
  c2.collect(prefix + "/c2", out);
  c3.collect(prefix + "/c3", out);
}

template <Real T>
Coupling<T>::Coupling(std::int64_t c, std::int64_t cond_c, std::int64_t hidden, Rng& rng) : channels(c) {
  const auto c1 = c / 2;
  net = Subnet<T>::make(c1 + cond_c, hidden, 2 * (c - c1), rng);
}

template <Real T>
std::pair<Tensor<T>, Tensor<T>> Coupling<T>::scale_shift(const Tensor<T>& x1, const Tensor<T>& cond) const {
  const auto c2 = channels - channels / 2;
  auto raw = net(op::concat<T>({x1, cond}, 1));
  return {affine_scale(op::slice(raw, 1, 0, c2)), op::slice(raw, 1, c2, c2)};
}

template <Real T>
LayerOut<T> Coupling<T>::forward(const Tensor<T>& x, const Tensor<T>& cond) const {
  if (x.dim(1) != channels) throw ShapeError("Coupling: channel mismatch");
  check_cond(x, cond, net.c1.weight.dim(1) - channels / 2, "Coupling");
  const auto c1 = channels / 2;
  auto x1 = op::slice(x, 1, 0, c1);
  auto x2 = op::slice(x, 1, c1, channels - c1);
  auto [s, t] = scale_shift(x1, cond);
  auto out = apply_affine(x2, s, t);
  auto logdet = fault_logdet_sign ? op::neg(out.logdet) : out.logdet;
  return {op::concat<T>({x1, out.y}, 1), logdet};
}

template <Real T>
Tensor<T> Coupling<T>::inverse(const Tensor<T>& y, const Tensor<T>& cond) const {
  if (y.dim(1) != channels) throw ShapeError("Coupling: channel mismatch");
  check_cond(y, cond, net.c1.weight.dim(1) - channels / 2, "Coupling");
  const auto c1 = channels / 2;
  auto y1 = op::slice(y, 1, 0, c1);
  auto y2 = op::slice(y, 1, c1, channels - c1);
  auto [s, t] = scale_shift(y1, cond);
  return op::concat<T>({y1, op::div(op::sub(y2, t), s)}, 1);
}

template <Real T>
void Coupling<T>::collect(const std::string& prefix, ParamRefs<T>& out) {
  net.collect(prefix + "/net", out);
}

template <Real T>
Injector<T>::Injector(std::int64_t c, std::int64_t cond_c, std::int64_t hidden, Rng& rng) : channels(c) {
  net = Subnet<T>::make(cond_c, hidden, 2 * c, rng);
}

template <Real T>
std::pair<Tensor<T>, Tensor<T>> Injector<T>::scale_shift(const Tensor<T>& cond) const {
  auto raw = net(cond);
  return {affine_scale(op::slice(raw, 1, 0, channels)), op::slice(raw, 1, channels, channels)};
}

template <Real T>
LayerOut<T> Injector<T>::forward(const Tensor<T>& x, const Tensor<T>& cond) const {
  if (x.dim(1) != channels) throw ShapeError("Injector: channel mismatch");
  check_cond(x, cond, net.c1.weight.dim(1), "Injector");
  auto [s, t] = scale_shift(cond);
  return apply_affine(x, s, t);
}

template <Real T>
Tensor<T> Injector<T>::inverse(const Tensor<T>& y, const Tensor<T>& cond) const {
  if (y.dim(1) != channels) throw ShapeError("Injector: channel mismatch");
  check_cond(y, cond, net.c1.weight.dim(1), "Injector");
  auto [s, t] = scale_shift(cond);
  return op::div(op::sub(y, t), s);
}

template <Real T>
void Injector<T>::collect(const std::string& prefix, ParamRefs<T>& out) {
  net.collect(prefix + "/net", out);
}

// ---------------------------------------------------------------- model

template <Real T>
FlowModel<T>::FlowModel(const FlowLayout& layout, const FlowInit& init) : layout_(layout) {
  layout_.validate();
  steps_.resize(static_cast<std::size_t>(layout_.levels));
  for (int l = 0; l < layout_.levels; ++l) {
    const int c = layout_.level_channels(l);
    const int cc = layout_.cond_channels(l);
    for (int k = 0; k < layout_.steps_per_level; ++k) {
      Rng rng(derive_seed(init.seed, "flow-step", static_cast<std::uint64_t>(l * 1000 + k)));
      FlowStep<T> s;
      s.actnorm = ActNorm<T>(c);
      s.invconv = InvConv<T>(c, rng, init.identity_invconv);
      s.coupling = Coupling<T>(c, cc, layout_.hidden, rng);
      s.injector = Injector<T>(c, cc, layout_.hidden, rng);
      steps_[static_cast<std::size_t>(l)].push_back(std::move(s));
    }
  }
}

template <Real T>
void FlowModel<T>::collect(const std::string& prefix, ParamRefs<T>& out) {
  for (int l = 0; l < layout_.levels; ++l) {
    for (int k = 0; k < layout_.steps_per_level; ++k) {
      auto& s = step(l, k);
      const std::string p = prefix + "/l" + std::to_string(l) + "/s" + std::to_string(k);
      s.actnorm.collect(p + "/actnorm", out);
      s.invconv.collect(p + "/invconv", out);
      s.coupling.collect(p + "/coupling", out);
      s.injector.collect(p + "/injector", out);
    }
  }
}

template <Real T>
ParamRefs<T> FlowModel<T>::params(const std::string& prefix) {
  ParamRefs<T> out;
  collect(prefix, out);
  return out;
}

template <Real T>
bool FlowModel<T>::actnorm_initialized() const {
  for (const auto& level : steps_) {
    for (const auto& s : level) {
      if (!s.actnorm.initialized()) return false;
    }
  }
  return true;
}

template <Real T>
void FlowModel<T>::set_fault_coupling_logdet_sign(bool on) {
  for (auto& level : steps_) {
    for (auto& s : level) s.coupling.fault_logdet_sign = on;
  }
}

namespace {

template <Real T>
void check_inputs(const Tensor<T>& y, const std::vector<Tensor<T>>& cond, const FlowLayout& lay) {
  if (y.rank() != 4 || y.dim(1) != lay.base_channels || y.dim(2) != lay.hr_h || y.dim(3) != lay.hr_w) {
    throw ShapeError("flow: input " + to_string(y.shape()) + " does not match layout");
  }
  if (static_cast<int>(cond.size()) != lay.levels) throw ShapeError("flow: need one conditioning map per level");
}

template <Real T>
FlowResult<T> run_forward(const Tensor<T>& y, const std::vector<Tensor<T>>& cond, const FlowModel<T>& model,
                          FlowModel<T>* init_target, std::vector<LayerLogdet>* log) {
  const auto& lay = model.layout();
  check_inputs(y, cond, lay);
  const auto n = y.dim(0);
  FlowResult<T> res;
  res.logdet = Tensor<T>::zeros({n});
  auto note = [&](const std::string& name, const Tensor<T>& ld) {
    res.logdet = op::add(res.logdet, ld);
    if (log) {
      double s = 0.0;
      for (T v : ld.data()) s += static_cast<double>(v);
      log->push_back({name, s});
    }
  };
  Tensor<T> h = y;
  for (int l = 0; l < lay.levels; ++l) {
    h = squeeze(h);
    const auto& c = cond[static_cast<std::size_t>(l)];
    for (int k = 0; k < lay.steps_per_level; ++k) {
      const auto& s = model.step(l, k);
      const std::string p = "l" + std::to_string(l) + "/s" + std::to_string(k) + "/";
      if (init_target && !s.actnorm.initialized()) init_target->step(l, k).actnorm.data_init(h);
      auto o = s.actnorm.forward(h);
      note(p + "actnorm", o.logdet);
      o = s.invconv.forward(o.y);
      note(p + "invconv", o.logdet);
      o = s.coupling.forward(o.y, c);
      note(p + "coupling", o.logdet);
      o = s.injector.forward(o.y, c);
      note(p + "injector", o.logdet);
      h = o.y;
    }
    if (l + 1 < lay.levels) {
      auto [kept, emitted] = split(h);
      res.z.push_back(emitted);
      h = kept;
    }
  }
  res.z.push_back(h);
  return res;
}

}  // namespace

template <Real T>
FlowResult<T> flow_forward(const Tensor<T>& y, const std::vector<Tensor<T>>& cond, const FlowModel<T>& model,
                           std::vector<LayerLogdet>* log) {
  return run_forward<T>(y, cond, model, nullptr, log);
}

template <Real T>
void flow_data_init(const Tensor<T>& y, const std::vector<Tensor<T>>& cond, FlowModel<T>& model) {
  run_forward(y.detach(), cond, model, &model, nullptr);
}

template <Real T>
Tensor<T> flow_inverse(const LatentPyramid<T>& z, const std::vector<Tensor<T>>& cond, const FlowModel<T>& model) {
  const auto& lay = model.layout();
  if (z.empty()) throw ShapeError("flow_inverse: empty latent");
  const auto shapes = lay.latent_shapes(z.front().dim(0));
  if (z.size() != shapes.size()) throw ShapeError("flow_inverse: wrong number of latent pieces");
  for (std::size_t i = 0; i < z.size(); ++i) {
    if (z[i].shape() != shapes[i]) {
      throw ShapeError("flow_inverse: piece " + std::to_string(i) + " has shape " + to_string(z[i].shape()) +
                       ", expected " + to_string(shapes[i]));
    }
  }
  if (static_cast<int>(cond.size()) != lay.levels) throw ShapeError("flow: need one conditioning map per level");
  Tensor<T> h = z.back();
  for (int l = lay.levels - 1; l >= 0; --l) {
    if (l + 1 < lay.levels) h = unsplit(h, z[static_cast<std::size_t>(l)]);
    const auto& c = cond[static_cast<std::size_t>(l)];
    for (int k = lay.steps_per_level - 1; k >= 0; --k) {
      const auto& s = model.step(l, k);
      h = s.injector.inverse(h, c);
      h = s.coupling.inverse(h, c);
      h = s.invconv.inverse(h);
      h = s.actnorm.inverse(h);
    }
    h = unsqueeze(h);
  }
  return h;
}

template <Real T>
Tensor<T> nll(const LatentPyramid<T>& z, const Tensor<T>& logdet, const LatentPyramid<T>& mean) {
  if (z.empty()) throw ShapeError("nll: empty latent");
  std::int64_t d = 0;
  for (const auto& p : z) d += p.numel() / p.dim(0);
  auto lp = latent_log_density_per_sample(z, mean);
  auto per = op::div_scalar(op::neg(op::add(lp, logdet)), static_cast<T>(d));
  return op::mean(per);
}

#define CRFLOW_FLOW_INSTANTIATE(T)                                                                          \
  template Tensor<T> squeeze(const Tensor<T>&);                                                             \
  template Tensor<T> unsqueeze(const Tensor<T>&);                                                           \
  template std::pair<Tensor<T>, Tensor<T>> split(const Tensor<T>&);                                         \
  template Tensor<T> unsplit(const Tensor<T>&, const Tensor<T>&);                                           \
  template Tensor<T> affine_scale(const Tensor<T>&);                                                        \
  template LayerOut<T> apply_affine(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);                  \
  template class ActNorm<T>;                                                                                \
  template class InvConv<T>;                                                                                \
  template struct Subnet<T>;                                                                                \
  template class Coupling<T>;                                                                               \
  template class Injector<T>;                                                                               \
  template class FlowModel<T>;                                                                              \
  template FlowResult<T> flow_forward(const Tensor<T>&, const std::vector<Tensor<T>>&, const FlowModel<T>&, \
                                      std::vector<LayerLogdet>*);                                           \
  template Tensor<T> flow_inverse(const LatentPyramid<T>&, const std::vector<Tensor<T>>&, const FlowModel<T>&); \
  template void flow_data_init(const Tensor<T>&, const std::vector<Tensor<T>>&, FlowModel<T>&);            \
  template Tensor<T> nll(const LatentPyramid<T>&, const Tensor<T>&, const LatentPyramid<T>&);

CRFLOW_FLOW_INSTANTIATE(float)
CRFLOW_FLOW_INSTANTIATE(double)

}  // namespace crflow
