#include <Eigen/Core>
#include <cmath>
#include <memory>
#include <string>

#include "crflow/ops.hpp"

namespace crflow::ops {
namespace {

// Number of `a` elements sharing each element of `b` under trailing-singleton
// broadcast.
template <Real T>
std::int64_t broadcast_inner(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (b.rank() == 0) return a.numel();
  if (b.rank() != a.rank()) {
    throw ShapeError(std::string(op) + ": rank mismatch " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  }
  std::size_t k = 0;
  while (k < a.shape().size() && a.shape()[k] == b.shape()[k]) ++k;
  for (std::size_t j = k; j < a.shape().size(); ++j) {
    if (b.shape()[j] != 1) {
      throw ShapeError(std::string(op) + ": shapes " + to_string(a.shape()) + " and " + to_string(b.shape()) +
                       " are not trailing-broadcast compatible");
    }
  }
  return a.numel() / b.numel();
}

template <Real T, class Fwd, class Dfn>
Tensor<T> unary(const Tensor<T>& a, const char* name, Fwd fwd, Dfn dfdx) {
  auto av = a.data();
  std::vector<T> out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = fwd(av[i]);
  BackwardFn<T> bw;
  if (tracking<T>({&a})) {
    auto in = a.storage();
    bw = [in, dfdx](std::span<const T> g, GradSink<T>& sink) {
      if (auto* ga = sink.acc(0)) {
        for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i] * dfdx((*in)[i]);
      }
    };
  }
  return make_op<T>(a.shape(), std::move(out), {&a}, std::move(bw), name);
}

// Variant whose derivative is cheaper from the output value.
template <Real T, class Fwd, class Dfn>
Tensor<T> unary_from_out(const Tensor<T>& a, const char* name, Fwd fwd, Dfn dfdy) {
  auto av = a.data();
  auto out = std::make_shared<std::vector<T>>(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) (*out)[i] = fwd(av[i]);
  BackwardFn<T> bw;
  if (tracking<T>({&a})) {
    bw = [out, dfdy](std::span<const T> g, GradSink<T>& sink) {
      if (auto* ga = sink.acc(0)) {
        for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i] * dfdy((*out)[i]);
      }
    };
  }
  return make_op_shared<T>(a.shape(), out, {&a}, std::move(bw), name);
}

enum class Binary { kAdd, kSub, kMul, kDiv };

template <Real T>
Tensor<T> binary(const Tensor<T>& a, const Tensor<T>& b, Binary kind, const char* name) {
  const std::int64_t inner = broadcast_inner(a, b, name);
  auto av = a.data();
  auto bv = b.data();
  std::vector<T> out(av.size());
  const auto nb = static_cast<std::int64_t>(bv.size());
  for (std::int64_t j = 0; j < nb; ++j) {
    const T bj = bv[j];
    const std::int64_t base = j * inner;
    switch (kind) {
      case Binary::kAdd:
        for (std::int64_t i = 0; i < inner; ++i) out[base + i] = av[base + i] + bj;
        break;
      case Binary::kSub:
        for (std::int64_t i = 0; i < inner; ++i) out[base + i] = av[base + i] - bj;
        break;
      case Binary::kMul:
        for (std::int64_t i = 0; i < inner; ++i) out[base + i] = av[base + i] * bj;
        break;
      case Binary::kDiv:
        if (bj == T(0)) throw DomainError(std::string(name) + ": division by zero");
        for (std::int64_t i = 0; i < inner; ++i) out[base + i] = av[base + i] / bj;
        break;
    }
  }
  BackwardFn<T> bw;
  if (tracking<T>({&a, &b})) {
    auto sa = a.storage();
    auto sb = b.storage();
    bw = [sa, sb, inner, kind](std::span<const T> g, GradSink<T>& sink) {
      auto* ga = sink.acc(0);
      auto* gb = sink.acc(1);
      const auto nb = static_cast<std::int64_t>(sb->size());
      for (std::int64_t j = 0; j < nb; ++j) {
        const T bj = (*sb)[j];
        const std::int64_t base = j * inner;
        T accb = 0;
        for (std::int64_t i = 0; i < inner; ++i) {
          const T gi = g[base + i];
          const T ai = (*sa)[base + i];
          switch (kind) {
            case Binary::kAdd:
              if (ga) (*ga)[base + i] += gi;
              accb += gi;
              break;
            case Binary::kSub:
              if (ga) (*ga)[base + i] += gi;
              accb -= gi;
              break;
            case Binary::kMul:
              if (ga) (*ga)[base + i] += gi * bj;
              accb += gi * ai;
              break;
            case Binary::kDiv:
              if (ga) (*ga)[base + i] += gi / bj;
              accb -= gi * ai / (bj * bj);
              break;
          }
        }
        if (gb) (*gb)[j] += accb;
      }
    };
  }
  return make_op<T>(a.shape(), std::move(out), {&a, &b}, std::move(bw), name);
}

template <Real T>
Tensor<T> channel_op(const Tensor<T>& x, const Tensor<T>& v, bool multiply) {
  const char* name = multiply ? "mul_channel" : "add_channel";
  if (x.rank() < 2 || v.rank() != 1 || v.dim(0) != x.dim(1)) {
    throw ShapeError(std::string(name) + ": expected [N,C,...] and [C], got " + to_string(x.shape()) + " and " +
                     to_string(v.shape()));
  }
  const std::int64_t n = x.dim(0), c = x.dim(1), inner = x.numel() / (n * c);
  auto xv = x.data();
  auto vv = v.data();
  std::vector<T> out(xv.size());
  for (std::int64_t s = 0; s < n; ++s)
    for (std::int64_t k = 0; k < c; ++k) {
      const std::int64_t base = (s * c + k) * inner;
      const T vk = vv[k];
      if (multiply)
        for (std::int64_t i = 0; i < inner; ++i) out[base + i] = xv[base + i] * vk;
      else
        for (std::int64_t i = 0; i < inner; ++i) out[base + i] = xv[base + i] + vk;
    }
  BackwardFn<T> bw;
  if (tracking<T>({&x, &v})) {
    auto sx = x.storage();
    auto sv = v.storage();
    bw = [sx, sv, n, c, inner, multiply](std::span<const T> g, GradSink<T>& sink) {
      auto* gx = sink.acc(0);
      auto* gv = sink.acc(1);
      for (std::int64_t s = 0; s < n; ++s)
        for (std::int64_t k = 0; k < c; ++k) {
          const std::int64_t base = (s * c + k) * inner;
          const T vk = (*sv)[k];
          T acc = 0;
          for (std::int64_t i = 0; i < inner; ++i) {
            const T gi = g[base + i];
            if (multiply) {
              if (gx) (*gx)[base + i] += gi * vk;
              acc += gi * (*sx)[base + i];
            } else {
              if (gx) (*gx)[base + i] += gi;
              acc += gi;
            }
          }
          if (gv) (*gv)[k] += acc;
        }
    };
  }
  return make_op<T>(x.shape(), std::move(out), {&x, &v}, std::move(bw), name);
}

template <Real T>
T stable_sigmoid(T x) {
  if (x >= 0) return T(1) / (T(1) + std::exp(-x));
  const T e = std::exp(x);
  return e / (T(1) + e);
}

}  // namespace

template <Real T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return binary(a, b, Binary::kAdd, "add");
}
template <Real T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return binary(a, b, Binary::kSub, "sub");
}
template <Real T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  return binary(a, b, Binary::kMul, "mul");
}
template <Real T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) {
  return binary(a, b, Binary::kDiv, "div");
}

template <Real T>
Tensor<T> add_scalar(const Tensor<T>& a, T s) {
  return unary(a, "add_scalar", [s](T x) { return x + s; }, [](T) { return T(1); });
}
template <Real T>
Tensor<T> mul_scalar(const Tensor<T>& a, T s) {
  return unary(a, "mul_scalar", [s](T x) { return x * s; }, [s](T) { return s; });
}
template <Real T>
Tensor<T> div_scalar(const Tensor<T>& a, T s) {
  if (s == T(0)) throw DomainError("div_scalar: division by zero");
  return unary(a, "div_scalar", [s](T x) { return x / s; }, [s](T) { return T(1) / s; });
}

template <Real T>
Tensor<T> neg(const Tensor<T>& a) {
  return unary(a, "neg", [](T x) { return -x; }, [](T) { return T(-1); });
}
template <Real T>
Tensor<T> exp(const Tensor<T>& a) {
  return unary_from_out(a, "exp", [](T x) { return std::exp(x); }, [](T y) { return y; });
}
template <Real T>
Tensor<T> log(const Tensor<T>& a) {
  for (T v : a.data())
    if (!(v > T(0))) throw DomainError("log of non-positive value");
  return unary(a, "log", [](T x) { return std::log(x); }, [](T x) { return T(1) / x; });
}
template <Real T>
Tensor<T> sigmoid(const Tensor<T>& a) {
  return unary_from_out(a, "sigmoid", [](T x) { return stable_sigmoid(x); },
                        [](T y) { return y * (T(1) - y); });
}
template <Real T>
Tensor<T> tanh(const Tensor<T>& a) {
  return unary_from_out(a, "tanh", [](T x) { return std::tanh(x); }, [](T y) { return T(1) - y * y; });
}
template <Real T>
Tensor<T> gelu(const Tensor<T>& a) {
  using Arr = Eigen::Array<T, Eigen::Dynamic, 1>;
  static constexpr T k0 = T(0.7978845608028654);  // sqrt(2/pi)
  static constexpr T k1 = T(0.044715);
  auto av = a.data();
  const auto n = static_cast<Eigen::Index>(av.size());
  Eigen::Map<const Arr> x(av.data(), n);
  // tanh(u) is kept for the backward pass.
  auto th = std::make_shared<std::vector<T>>(av.size());
  Eigen::Map<Arr> tm(th->data(), n);
  tm = (k0 * (x + k1 * x.cube())).tanh();
  std::vector<T> out(av.size());
  Eigen::Map<Arr>(out.data(), n) = T(0.5) * x * (T(1) + tm);
  BackwardFn<T> bw;
  if (tracking<T>({&a})) {
    auto in = a.storage();
    bw = [in, th](std::span<const T> g, GradSink<T>& sink) {
      auto* ga = sink.acc(0);
      if (!ga) return;
      const auto m = static_cast<Eigen::Index>(g.size());
      Eigen::Map<const Arr> xv(in->data(), m), t(th->data(), m), gv(g.data(), m);
      Eigen::Map<Arr> acc(ga->data(), m);
      acc += gv * (T(0.5) * (T(1) + t) + T(0.5) * xv * (T(1) - t.square()) * k0 * (T(1) + T(3) * k1 * xv.square()));
    };
  }
  return make_op<T>(a.shape(), std::move(out), {&a}, std::move(bw), "gelu");
}
template <Real T>
Tensor<T> relu(const Tensor<T>& a) {
  return unary(a, "relu", [](T x) { return x > T(0) ? x : T(0); }, [](T x) { return x > T(0) ? T(1) : T(0); });
}
template <Real T>
Tensor<T> abs(const Tensor<T>& a) {
  return unary(
      a, "abs", [](T x) { return std::abs(x); },
      [](T x) { return x > T(0) ? T(1) : (x < T(0) ? T(-1) : T(0)); });
}
template <Real T>
Tensor<T> square(const Tensor<T>& a) {
  return unary(a, "square", [](T x) { return x * x; }, [](T x) { return T(2) * x; });
}

template <Real T>
Tensor<T> elementwise(Elementwise op, const Tensor<T>& a, const Tensor<T>* b) {
  auto need_b = [&]() -> const Tensor<T>& {
    if (!b) throw std::invalid_argument("elementwise: binary op needs a second operand");
    return *b;
  };
  switch (op) {
    case Elementwise::kAdd: return add(a, need_b());
    case Elementwise::kSub: return sub(a, need_b());
    case Elementwise::kMul: return mul(a, need_b());
    case Elementwise::kDiv: return div(a, need_b());
    case Elementwise::kExp: return exp(a);
    case Elementwise::kLog: return log(a);
    case Elementwise::kNeg: return neg(a);
    case Elementwise::kSigmoid: return sigmoid(a);
    case Elementwise::kTanh: return tanh(a);
  }
  throw std::invalid_argument("elementwise: unknown op");
}

template <Real T>
Tensor<T> add_channel(const Tensor<T>& x, const Tensor<T>& v) {
  return channel_op(x, v, false);
}
template <Real T>
Tensor<T> mul_channel(const Tensor<T>& x, const Tensor<T>& v) {
  return channel_op(x, v, true);
}

template <Real T>
Tensor<T> sum(const Tensor<T>& a) {
  T acc = 0;
  for (T v : a.data()) acc += v;
  BackwardFn<T> bw;
  if (tracking<T>({&a})) {
    bw = [](std::span<const T> g, GradSink<T>& sink) {
      if (auto* ga = sink.acc(0))
        for (auto& v : *ga) v += g[0];
    };
  }
  return make_op<T>(Shape{}, {acc}, {&a}, std::move(bw), "sum");
}

template <Real T>
Tensor<T> mean(const Tensor<T>& a) {
  return div_scalar(sum(a), static_cast<T>(a.numel()));
}

template <Real T>
Tensor<T> sum_per_sample(const Tensor<T>& a) {
  if (a.rank() < 1) throw ShapeError("sum_per_sample needs rank >= 1");
  const std::int64_t n = a.dim(0), inner = a.numel() / n;
  auto av = a.data();
  std::vector<T> out(static_cast<std::size_t>(n), T(0));
  for (std::int64_t s = 0; s < n; ++s) {
    T acc = 0;
    for (std::int64_t i = 0; i < inner; ++i) acc += av[s * inner + i];
    out[s] = acc;
  }
  BackwardFn<T> bw;
  if (tracking<T>({&a})) {
    bw = [n, inner](std::span<const T> g, GradSink<T>& sink) {
      if (auto* ga = sink.acc(0))
        for (std::int64_t s = 0; s < n; ++s)
          for (std::int64_t i = 0; i < inner; ++i) (*ga)[s * inner + i] += g[s];
    };
  }
  return make_op<T>(Shape{n}, std::move(out), {&a}, std::move(bw), "sum_per_sample");
}

template <Real T>
Tensor<T> softmax(const Tensor<T>& a, std::int64_t axis) {
  if (axis < 0) axis += a.rank();
  if (axis < 0 || axis >= a.rank()) throw ShapeError("softmax: axis out of range");
  const auto& s = a.shape();
  std::int64_t outer = 1, inner = 1;
  for (std::int64_t i = 0; i < axis; ++i) outer *= s[i];
  for (std::int64_t i = axis + 1; i < a.rank(); ++i) inner *= s[i];
  const std::int64_t len = s[axis];
  auto av = a.data();
  auto out = std::make_shared<std::vector<T>>(av.size());
  for (std::int64_t o = 0; o < outer; ++o)
    for (std::int64_t i = 0; i < inner; ++i) {
      const std::int64_t base = o * len * inner + i;
      T mx = av[base];
      for (std::int64_t k = 1; k < len; ++k) mx = std::max(mx, av[base + k * inner]);
      T z = 0;
      for (std::int64_t k = 0; k < len; ++k) {
        const T e = std::exp(av[base + k * inner] - mx);
        (*out)[base + k * inner] = e;
        z += e;
      }
      for (std::int64_t k = 0; k < len; ++k) (*out)[base + k * inner] /= z;
    }
  BackwardFn<T> bw;
  if (tracking<T>({&a})) {
    bw = [out, outer, inner, len](std::span<const T> g, GradSink<T>& sink) {
      auto* ga = sink.acc(0);
      if (!ga) return;
      for (std::int64_t o = 0; o < outer; ++o)
        for (std::int64_t i = 0; i < inner; ++i) {
          const std::int64_t base = o * len * inner + i;
          T dot = 0;
          for (std::int64_t k = 0; k < len; ++k) dot += g[base + k * inner] * (*out)[base + k * inner];
          for (std::int64_t k = 0; k < len; ++k) {
            const std::int64_t idx = base + k * inner;
            (*ga)[idx] += (*out)[idx] * (g[idx] - dot);
          }
        }
    };
  }
  return make_op_shared<T>(a.shape(), out, {&a}, std::move(bw), "softmax");
}

#define CRFLOW_INSTANTIATE(T)                                                              \
  template Tensor<T> elementwise<T>(Elementwise, const Tensor<T>&, const Tensor<T>*);     \
  template Tensor<T> add<T>(const Tensor<T>&, const Tensor<T>&);                          \
  template Tensor<T> sub<T>(const Tensor<T>&, const Tensor<T>&);                          \
  template Tensor<T> mul<T>(const Tensor<T>&, const Tensor<T>&);                          \
  template Tensor<T> div<T>(const Tensor<T>&, const Tensor<T>&);                          \
  template Tensor<T> add_scalar<T>(const Tensor<T>&, T);                                  \
  template Tensor<T> mul_scalar<T>(const Tensor<T>&, T);                                  \
  template Tensor<T> div_scalar<T>(const Tensor<T>&, T);                                  \
  template Tensor<T> neg<T>(const Tensor<T>&);                                            \
  template Tensor<T> exp<T>(const Tensor<T>&);                                            \
  template Tensor<T> log<T>(const Tensor<T>&);                                            \
  template Tensor<T> sigmoid<T>(const Tensor<T>&);                                        \
  template Tensor<T> tanh<T>(const Tensor<T>&);                                           \
  template Tensor<T> gelu<T>(const Tensor<T>&);                                           \
  template Tensor<T> relu<T>(const Tensor<T>&);                                           \
  template Tensor<T> abs<T>(const Tensor<T>&);                                            \
  template Tensor<T> square<T>(const Tensor<T>&);                                         \
  template Tensor<T> add_channel<T>(const Tensor<T>&, const Tensor<T>&);                  \
  template Tensor<T> mul_channel<T>(const Tensor<T>&, const Tensor<T>&);                  \
  template Tensor<T> sum<T>(const Tensor<T>&);                                            \
  template Tensor<T> mean<T>(const Tensor<T>&);                                           \
  template Tensor<T> sum_per_sample<T>(const Tensor<T>&);                                 \
  template Tensor<T> softmax<T>(const Tensor<T>&, std::int64_t);

CRFLOW_INSTANTIATE(float)
CRFLOW_INSTANTIATE(double)
#undef CRFLOW_INSTANTIATE

}  // namespace crflow::ops
