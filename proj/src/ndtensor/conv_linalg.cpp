#include <Eigen/Core>
#include <memory>
#include <string>

#include "crflow/ops.hpp"

namespace crflow::ops {
namespace {

template <Real T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <Real T>
using MapC = Eigen::Map<const RowMat<T>>;
template <Real T>
using Map = Eigen::Map<RowMat<T>>;

struct ConvGeom {
  std::int64_t n, c, h, w, o, k, stride, pad, groups, ho, wo;
  std::int64_t cg() const { return c / groups; }
  std::int64_t og() const { return o / groups; }
  std::int64_t rows() const { return cg() * k * k; }
  std::int64_t pixels() const { return ho * wo; }
  bool pointwise() const { return k == 1 && stride == 1 && pad == 0; }
};

// Output columns [lo, hi) whose tap kj lands inside a row of width w.
inline void valid_range(const ConvGeom& g, std::int64_t kj, std::int64_t& lo, std::int64_t& hi) {
  const std::int64_t off = kj - g.pad;
  lo = off >= 0 ? 0 : (-off + g.stride - 1) / g.stride;
  hi = g.w - 1 - off < 0 ? 0 : (g.w - 1 - off) / g.stride + 1;
  if (hi > g.wo) hi = g.wo;
  if (lo > hi) lo = hi;
}

// Writes the [Cg*K*K, Ho*Wo] patch matrix of one sample and one group into
// `cols`, whose rows are `ld` apart.
template <Real T>
void im2col(const T* x, const ConvGeom& g, T* cols, std::int64_t ld) {
  for (std::int64_t c = 0; c < g.cg(); ++c)
    for (std::int64_t ki = 0; ki < g.k; ++ki)
      for (std::int64_t kj = 0; kj < g.k; ++kj) {
        T* row = cols + ((c * g.k + ki) * g.k + kj) * ld;
        const T* plane = x + c * g.h * g.w;
        std::int64_t lo = 0, hi = 0;
        valid_range(g, kj, lo, hi);
        const std::int64_t off = kj - g.pad;
        for (std::int64_t oy = 0; oy < g.ho; ++oy) {
          const std::int64_t iy = oy * g.stride - g.pad + ki;
          T* dst = row + oy * g.wo;
          if (iy < 0 || iy >= g.h) {
            std::fill(dst, dst + g.wo, T(0));
            continue;
          }
          const T* src = plane + iy * g.w + off;
          std::fill(dst, dst + lo, T(0));
          if (g.stride == 1) {
            std::copy(src + lo, src + hi, dst + lo);
          } else {
            for (std::int64_t ox = lo; ox < hi; ++ox) dst[ox] = src[ox * g.stride];
          }
          std::fill(dst + hi, dst + g.wo, T(0));
        }
      }
}

template <Real T>
void col2im_add(const T* cols, const ConvGeom& g, T* dx, std::int64_t ld) {
  for (std::int64_t c = 0; c < g.cg(); ++c)
    for (std::int64_t ki = 0; ki < g.k; ++ki)
      for (std::int64_t kj = 0; kj < g.k; ++kj) {
        const T* row = cols + ((c * g.k + ki) * g.k + kj) * ld;
        T* plane = dx + c * g.h * g.w;
        std::int64_t lo = 0, hi = 0;
        valid_range(g, kj, lo, hi);
        const std::int64_t off = kj - g.pad;
        for (std::int64_t oy = 0; oy < g.ho; ++oy) {
          const std::int64_t iy = oy * g.stride - g.pad + ki;
          if (iy < 0 || iy >= g.h) continue;
          const T* src = row + oy * g.wo;
          T* dst = plane + iy * g.w + off;
          if (g.stride == 1) {
            for (std::int64_t ox = lo; ox < hi; ++ox) dst[ox] += src[ox];
          } else {
            for (std::int64_t ox = lo; ox < hi; ++ox) dst[ox * g.stride] += src[ox];
          }
        }
      }
}

// [N, C, P] channel block [c0, c0 + cc) <-> [cc, N * P].
template <Real T>
void gather_batch(const T* src, std::int64_t n, std::int64_t c, std::int64_t p, std::int64_t c0, std::int64_t cc,
                  T* dst) {
  for (std::int64_t s = 0; s < n; ++s)
    for (std::int64_t i = 0; i < cc; ++i) {
      const T* from = src + (s * c + c0 + i) * p;
      std::copy(from, from + p, dst + i * n * p + s * p);
    }
}

template <Real T>
void scatter_batch(const T* src, std::int64_t n, std::int64_t c, std::int64_t p, std::int64_t c0, std::int64_t cc,
                   T* dst, bool accumulate) {
  for (std::int64_t s = 0; s < n; ++s)
    for (std::int64_t i = 0; i < cc; ++i) {
      const T* from = src + i * n * p + s * p;
      T* to = dst + (s * c + c0 + i) * p;
      if (accumulate) {
        for (std::int64_t q = 0; q < p; ++q) to[q] += from[q];
      } else {
        std::copy(from, from + p, to);
      }
    }
}

// Patch matrices of all samples for group gi, [rows, N * pixels].
template <Real T>
void batch_cols(const T* xv, const ConvGeom& g, std::int64_t gi, T* cols) {
  const std::int64_t px = g.pixels();
  const std::int64_t ld = g.n * px;
  if (g.pointwise()) {
    gather_batch(xv, g.n, g.c, px, gi * g.cg(), g.cg(), cols);
    return;
  }
  for (std::int64_t s = 0; s < g.n; ++s) im2col(xv + (s * g.c + gi * g.cg()) * g.h * g.w, g, cols + s * px, ld);
}

// Direct loops for per-channel (depth-wise) filters.
template <Real T>
void depthwise_forward(const T* x, const T* w, const ConvGeom& g, T* y) {
  const std::int64_t mult = g.og();
  for (std::int64_t s = 0; s < g.n; ++s)
    for (std::int64_t oc = 0; oc < g.o; ++oc) {
      const T* plane = x + (s * g.c + oc / mult) * g.h * g.w;
      const T* kern = w + oc * g.k * g.k;
      T* out = y + (s * g.o + oc) * g.pixels();
      for (std::int64_t oy = 0; oy < g.ho; ++oy)
        for (std::int64_t ox = 0; ox < g.wo; ++ox) {
          T acc = 0;
          for (std::int64_t ki = 0; ki < g.k; ++ki) {
            const std::int64_t iy = oy * g.stride - g.pad + ki;
            if (iy < 0 || iy >= g.h) continue;
            for (std::int64_t kj = 0; kj < g.k; ++kj) {
              const std::int64_t ix = ox * g.stride - g.pad + kj;
              if (ix >= 0 && ix < g.w) acc += kern[ki * g.k + kj] * plane[iy * g.w + ix];
            }
          }
          out[oy * g.wo + ox] = acc;
        }
    }
}

template <Real T>
void depthwise_backward(const T* x, const T* w, const T* gy, const ConvGeom& g, T* gx, T* gw) {
  const std::int64_t mult = g.og();
  for (std::int64_t s = 0; s < g.n; ++s)
    for (std::int64_t oc = 0; oc < g.o; ++oc) {
      const std::int64_t ic = oc / mult;
      const T* plane = x + (s * g.c + ic) * g.h * g.w;
      const T* kern = w + oc * g.k * g.k;
      const T* go = gy + (s * g.o + oc) * g.pixels();
      for (std::int64_t oy = 0; oy < g.ho; ++oy)
        for (std::int64_t ox = 0; ox < g.wo; ++ox) {
          const T gv = go[oy * g.wo + ox];
          for (std::int64_t ki = 0; ki < g.k; ++ki) {
            const std::int64_t iy = oy * g.stride - g.pad + ki;
            if (iy < 0 || iy >= g.h) continue;
            for (std::int64_t kj = 0; kj < g.k; ++kj) {
              const std::int64_t ix = ox * g.stride - g.pad + kj;
              if (ix < 0 || ix >= g.w) continue;
              if (gx) gx[(s * g.c + ic) * g.h * g.w + iy * g.w + ix] += gv * kern[ki * g.k + kj];
              if (gw) gw[oc * g.k * g.k + ki * g.k + kj] += gv * plane[iy * g.w + ix];
            }
          }
        }
    }
}

}  // namespace

template <Real T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, std::type_identity_t<const Tensor<T>*> bias, std::int64_t stride,
                 std::int64_t pad, std::int64_t groups) {
  if (x.rank() != 4 || w.rank() != 4) throw ShapeError("conv2d: expected NCHW input and OIKK weights");
  if (groups < 1 || x.dim(1) % groups != 0 || w.dim(0) % groups != 0) {
    throw ShapeError("conv2d: channels " + std::to_string(x.dim(1)) + " not divisible by groups " +
                     std::to_string(groups));
  }
  if (w.dim(1) != x.dim(1) / groups) {
    throw ShapeError("conv2d: weight " + to_string(w.shape()) + " does not match input " + to_string(x.shape()));
  }
  if (w.dim(2) != w.dim(3) || w.dim(2) % 2 == 0) throw ShapeError("conv2d: kernel must be square and odd");
  if (stride < 1 || pad < 0) throw ShapeError("conv2d: bad stride/pad");
  if (bias && (bias->rank() != 1 || bias->dim(0) != w.dim(0))) throw ShapeError("conv2d: bias shape mismatch");
  ConvGeom g{x.dim(0), x.dim(1), x.dim(2), x.dim(3), w.dim(0), w.dim(2), stride, pad, groups, 0, 0};
  g.ho = (g.h + 2 * pad - g.k) / stride + 1;
  g.wo = (g.w + 2 * pad - g.k) / stride + 1;
  if (g.ho < 1 || g.wo < 1) throw ShapeError("conv2d: kernel larger than padded input");

  const std::int64_t px = g.pixels();
  const std::int64_t ld = g.n * px;
  std::vector<T> out(static_cast<std::size_t>(g.n * g.o * px), T(0));
  const T* xv = x.data().data();
  const T* wv = w.data().data();
  const bool depthwise = g.cg() == 1 && g.k > 1;
  const bool track = tracking<T>({&x, &w, bias});
  // Patch matrices per group, kept for the backward pass when tracking.
  auto cols = std::make_shared<std::vector<T>>();
  if (depthwise) {
    depthwise_forward(xv, wv, g, out.data());
  } else {
    const auto per_group = static_cast<std::size_t>(g.rows() * ld);
    cols->resize(per_group * static_cast<std::size_t>(track ? groups : 1));
    std::vector<T> ybuf(static_cast<std::size_t>(g.og() * ld));
    for (std::int64_t gi = 0; gi < groups; ++gi) {
      T* cp = cols->data() + (track ? gi * per_group : 0);
      batch_cols(xv, g, gi, cp);
      MapC<T> wm(wv + gi * g.og() * g.rows(), g.og(), g.rows());
      MapC<T> cm(cp, g.rows(), ld);
      Map<T> ym(ybuf.data(), g.og(), ld);
      ym.noalias() = wm * cm;
      scatter_batch(ybuf.data(), g.n, g.o, px, gi * g.og(), g.og(), out.data(), false);
    }
    if (!track) cols.reset();
  }
  if (bias) {
    auto bv = bias->data();
    for (std::int64_t s = 0; s < g.n; ++s)
      for (std::int64_t oc = 0; oc < g.o; ++oc) {
        T* p = out.data() + (s * g.o + oc) * px;
        for (std::int64_t i = 0; i < px; ++i) p[i] += bv[oc];
      }
  }

  BackwardFn<T> bw;
  if (track) {
    auto sx = x.storage();
    auto sw = w.storage();
    bool has_bias = bias != nullptr;
    bw = [sx, sw, cols, g, depthwise, has_bias](std::span<const T> gy, GradSink<T>& sink) {
      auto* gx = sink.acc(0);
      auto* gw = sink.acc(1);
      auto* gb = has_bias ? sink.acc(2) : nullptr;
      const std::int64_t px = g.pixels();
      const std::int64_t ld = g.n * px;
      if (gb)
        for (std::int64_t s = 0; s < g.n; ++s)
          for (std::int64_t oc = 0; oc < g.o; ++oc) {
            const T* p = gy.data() + (s * g.o + oc) * px;
            T acc = 0;
            for (std::int64_t i = 0; i < px; ++i) acc += p[i];
            (*gb)[oc] += acc;
          }
      if (!gx && !gw) return;
      if (depthwise) {
        depthwise_backward(sx->data(), sw->data(), gy.data(), g, gx ? gx->data() : nullptr,
                           gw ? gw->data() : nullptr);
        return;
      }
      const auto per_group = static_cast<std::size_t>(g.rows() * ld);
      std::vector<T> gybuf(static_cast<std::size_t>(g.og() * ld));
      std::vector<T> gcols(gx ? per_group : 0);
      for (std::int64_t gi = 0; gi < g.groups; ++gi) {
        gather_batch(gy.data(), g.n, g.o, px, gi * g.og(), g.og(), gybuf.data());
        MapC<T> gym(gybuf.data(), g.og(), ld);
        MapC<T> wm(sw->data() + gi * g.og() * g.rows(), g.og(), g.rows());
        if (gw) {
          MapC<T> cm(cols->data() + gi * per_group, g.rows(), ld);
          Map<T> gwm(gw->data() + gi * g.og() * g.rows(), g.og(), g.rows());
          gwm.noalias() += gym * cm.transpose();
        }
        if (gx) {
          Map<T> gcm(gcols.data(), g.rows(), ld);
          gcm.noalias() = wm.transpose() * gym;
          if (g.pointwise()) {
            scatter_batch(gcols.data(), g.n, g.c, px, gi * g.cg(), g.cg(), gx->data(), true);
          } else {
            for (std::int64_t s = 0; s < g.n; ++s)
              col2im_add(gcols.data() + s * px, g, gx->data() + (s * g.c + gi * g.cg()) * g.h * g.w, ld);
          }
        }
      }
    };
  }
  return make_op<T>(Shape{g.n, g.o, g.ho, g.wo}, std::move(out), {&x, &w, bias}, std::move(bw), "conv2d");
}

template <Real T>
Tensor<T> bmm(const Tensor<T>& a, const Tensor<T>& b, bool transpose_a, bool transpose_b) {
  if (a.rank() != 3 || b.rank() != 3 || a.dim(0) != b.dim(0)) {
    throw ShapeError("bmm: expected [B,M,K] x [B,K,N], got " + to_string(a.shape()) + " and " + to_string(b.shape()));
  }
  const std::int64_t batch = a.dim(0);
  const std::int64_t m = transpose_a ? a.dim(2) : a.dim(1);
  const std::int64_t k = transpose_a ? a.dim(1) : a.dim(2);
  const std::int64_t kb = transpose_b ? b.dim(2) : b.dim(1);
  const std::int64_t n = transpose_b ? b.dim(1) : b.dim(2);
  if (k != kb) throw ShapeError("bmm: inner dims differ: " + to_string(a.shape()) + " x " + to_string(b.shape()));
  const std::int64_t ar = a.dim(1), ac = a.dim(2), br = b.dim(1), bc = b.dim(2);
  std::vector<T> out(static_cast<std::size_t>(batch * m * n));
  for (std::int64_t i = 0; i < batch; ++i) {
    MapC<T> am(a.data().data() + i * ar * ac, ar, ac);
    MapC<T> bm(b.data().data() + i * br * bc, br, bc);
    Map<T> om(out.data() + i * m * n, m, n);
    if (!transpose_a && !transpose_b) om.noalias() = am * bm;
    else if (transpose_a && !transpose_b) om.noalias() = am.transpose() * bm;
    else if (!transpose_a && transpose_b) om.noalias() = am * bm.transpose();
    else om.noalias() = am.transpose() * bm.transpose();
  }
  BackwardFn<T> bw;
  if (tracking<T>({&a, &b})) {
    auto sa = a.storage();
    auto sb = b.storage();
    bw = [=](std::span<const T> g, GradSink<T>& sink) {
      auto* ga = sink.acc(0);
      auto* gb = sink.acc(1);
      for (std::int64_t i = 0; i < batch; ++i) {
        MapC<T> am(sa->data() + i * ar * ac, ar, ac);
        MapC<T> bm(sb->data() + i * br * bc, br, bc);
        MapC<T> gm(g.data() + i * m * n, m, n);
        // With A' = op(A), B' = op(B): dA' = G B'^T, dB' = A'^T G.
        if (ga) {
          Map<T> gam(ga->data() + i * ar * ac, ar, ac);
          if (!transpose_a && !transpose_b) gam.noalias() += gm * bm.transpose();
          else if (!transpose_a && transpose_b) gam.noalias() += gm * bm;
          else if (transpose_a && !transpose_b) gam.noalias() += bm * gm.transpose();
          else gam.noalias() += bm.transpose() * gm.transpose();
        }
        if (gb) {
          Map<T> gbm(gb->data() + i * br * bc, br, bc);
          if (!transpose_a && !transpose_b) gbm.noalias() += am.transpose() * gm;
          else if (transpose_a && !transpose_b) gbm.noalias() += am * gm;
          else if (!transpose_a && transpose_b) gbm.noalias() += gm.transpose() * am;
          else gbm.noalias() += gm.transpose() * am.transpose();
        }
      }
    };
  }
  return make_op<T>(Shape{batch, m, n}, std::move(out), {&a, &b}, std::move(bw), "bmm");
}

template <Real T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw ShapeError("matmul: dims mismatch " + to_string(a.shape()) + " x " + to_string(b.shape()));
  }
  auto a3 = reshape(a, Shape{1, a.dim(0), a.dim(1)});
  auto b3 = reshape(b, Shape{1, b.dim(0), b.dim(1)});
  return reshape(bmm(a3, b3), Shape{a.dim(0), b.dim(1)});
}

template <Real T>
Tensor<T> transpose(const Tensor<T>& a) {
  if (a.rank() != 2) throw ShapeError("transpose: expected a matrix");
  return permute(a, {1, 0});
}

template <Real T>
Tensor<T> triangular_inverse(const Tensor<T>& a, bool lower) {
  if (a.rank() != 2 || a.dim(0) != a.dim(1)) throw ShapeError("triangular_inverse: expected a square matrix");
  const std::int64_t n = a.dim(0);
  auto av = a.data();
  auto at = [&](std::int64_t i, std::int64_t j) -> T {
    if (lower ? j > i : j < i) return T(0);
    return av[i * n + j];
  };
  for (std::int64_t i = 0; i < n; ++i)
    if (at(i, i) == T(0)) throw DomainError("triangular_inverse: singular diagonal");
  // Solve A X = I column by column.
  auto inv = std::make_shared<std::vector<T>>(static_cast<std::size_t>(n * n), T(0));
  for (std::int64_t col = 0; col < n; ++col) {
    if (lower) {
      for (std::int64_t i = 0; i < n; ++i) {
        T acc = (i == col) ? T(1) : T(0);
        for (std::int64_t j = 0; j < i; ++j) acc -= at(i, j) * (*inv)[j * n + col];
        (*inv)[i * n + col] = acc / at(i, i);
      }
    } else {
      for (std::int64_t i = n; i-- > 0;) {
        T acc = (i == col) ? T(1) : T(0);
        for (std::int64_t j = i + 1; j < n; ++j) acc -= at(i, j) * (*inv)[j * n + col];
        (*inv)[i * n + col] = acc / at(i, i);
      }
    }
  }
  BackwardFn<T> bw;
  if (tracking<T>({&a})) {
    bw = [inv, n, lower](std::span<const T> g, GradSink<T>& sink) {
      auto* ga = sink.acc(0);
      if (!ga) return;
      // d(A^-1) = -A^-1 dA A^-1  =>  dL/dA = -A^-T G A^-T, restricted to the triangle.
      MapC<T> bm(inv->data(), n, n);
      MapC<T> gm(g.data(), n, n);
      RowMat<T> da = -(bm.transpose() * gm * bm.transpose());
      for (std::int64_t i = 0; i < n; ++i)
        for (std::int64_t j = 0; j < n; ++j)
          if (lower ? j <= i : j >= i) (*ga)[i * n + j] += da(i, j);
    };
  }
  return make_op_shared<T>(Shape{n, n}, inv, {&a}, std::move(bw), "triangular_inverse");
}

template <Real T>
Tensor<T> diag(const Tensor<T>& v) {
  if (v.rank() != 1) throw ShapeError("diag: expected a vector");
  const std::int64_t n = v.dim(0);
  std::vector<T> out(static_cast<std::size_t>(n * n), T(0));
  for (std::int64_t i = 0; i < n; ++i) out[i * n + i] = v.data()[i];
  BackwardFn<T> bw;
  if (tracking<T>({&v})) {
    bw = [n](std::span<const T> g, GradSink<T>& sink) {
      if (auto* gv = sink.acc(0))
        for (std::int64_t i = 0; i < n; ++i) (*gv)[i] += g[i * n + i];
    };
  }
  return make_op<T>(Shape{n, n}, std::move(out), {&v}, std::move(bw), "diag");
}

template <Real T>
Tensor<T> eye(std::int64_t n) {
  auto t = Tensor<T>::zeros(Shape{n, n});
  auto d = t.mutable_data();
  for (std::int64_t i = 0; i < n; ++i) d[i * n + i] = T(1);
  return t;
}

#define CRFLOW_INSTANTIATE(T)                                                                                  \
  template Tensor<T> conv2d<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>*, std::int64_t,             \
                               std::int64_t, std::int64_t);                                                    \
  template Tensor<T> matmul<T>(const Tensor<T>&, const Tensor<T>&);                                           \
  template Tensor<T> bmm<T>(const Tensor<T>&, const Tensor<T>&, bool, bool);                                  \
  template Tensor<T> transpose<T>(const Tensor<T>&);                                                          \
  template Tensor<T> triangular_inverse<T>(const Tensor<T>&, bool);                                           \
  template Tensor<T> diag<T>(const Tensor<T>&);                                                               \
  template Tensor<T> eye<T>(std::int64_t);

CRFLOW_INSTANTIATE(float)
CRFLOW_INSTANTIATE(double)
#undef CRFLOW_INSTANTIATE

}  // namespace crflow::ops
