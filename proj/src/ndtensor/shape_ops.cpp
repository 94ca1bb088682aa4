#include <numeric>
#include <string>

#include "crflow/ops.hpp"

namespace crflow::ops {
namespace {

std::int64_t norm_axis(std::int64_t axis, std::int64_t rank, const char* op) {
  if (axis < 0) axis += rank;
  if (axis < 0 || axis >= rank) throw ShapeError(std::string(op) + ": axis out of range");
  return axis;
}

// outer x axis_len x inner decomposition around `axis`.
struct AxisSplit {
  std::int64_t outer = 1, len = 1, inner = 1;
};

AxisSplit split_at(const Shape& s, std::int64_t axis) {
  AxisSplit r;
  for (std::int64_t i = 0; i < axis; ++i) r.outer *= s[i];
  r.len = s[axis];
  for (std::size_t i = axis + 1; i < s.size(); ++i) r.inner *= s[i];
  return r;
}

}  // namespace

template <Real T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
  if (numel_of(shape) != a.numel()) {
    throw ShapeError("reshape: cannot view " + to_string(a.shape()) + " as " + to_string(shape));
  }
  BackwardFn<T> bw;
  if (tracking<T>({&a})) {
    bw = [](std::span<const T> g, GradSink<T>& sink) {
      if (auto* ga = sink.acc(0))
        for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i];
    };
  }
  // Values are immutable, so the result shares the buffer.
  auto storage = std::const_pointer_cast<std::vector<T>>(a.storage());
  if (!bw) return Tensor<T>::from_node(std::move(shape), storage, 0);
  return make_op_shared<T>(std::move(shape), storage, {&a}, std::move(bw), "reshape");
}

template <Real T>
Tensor<T> permute(const Tensor<T>& a, const std::vector<std::int64_t>& order) {
  const auto r = static_cast<std::size_t>(a.rank());
  if (order.size() != r) throw ShapeError("permute: order rank mismatch");
  std::vector<bool> seen(r, false);
  for (auto o : order) {
    if (o < 0 || o >= static_cast<std::int64_t>(r) || seen[o]) throw ShapeError("permute: invalid order");
    seen[o] = true;
  }
  const auto& in = a.shape();
  Shape out_shape(r);
  std::vector<std::int64_t> in_stride(r, 1);
  for (std::size_t i = r; i-- > 1;) in_stride[i - 1] = in_stride[i] * in[i];
  for (std::size_t i = 0; i < r; ++i) out_shape[i] = in[order[i]];
  // Source offset for each output element: walk the output in row-major
  // order with an odometer over strides permuted into output order.
  std::vector<std::int64_t> stride(r);
  for (std::size_t i = 0; i < r; ++i) stride[i] = in_stride[order[i]];
  const std::int64_t n = a.numel();
  auto src_index = std::make_shared<std::vector<std::int64_t>>(static_cast<std::size_t>(n));
  {
    std::vector<std::int64_t> idx(r, 0);
    std::int64_t off = 0;
    for (std::int64_t k = 0; k < n; ++k) {
      (*src_index)[k] = off;
      for (std::size_t d = r; d-- > 0;) {
        ++idx[d];
        off += stride[d];
        if (idx[d] < out_shape[d]) break;
        off -= stride[d] * out_shape[d];
        idx[d] = 0;
      }
    }
  }
  auto av = a.data();
  std::vector<T> out(static_cast<std::size_t>(n));
  for (std::int64_t k = 0; k < n; ++k) out[k] = av[(*src_index)[k]];
  BackwardFn<T> bw;
  if (tracking<T>({&a})) {
    bw = [src_index](std::span<const T> g, GradSink<T>& sink) {
      if (auto* ga = sink.acc(0))
        for (std::size_t k = 0; k < g.size(); ++k) (*ga)[(*src_index)[k]] += g[k];
    };
  }
  return make_op<T>(std::move(out_shape), std::move(out), {&a}, std::move(bw), "permute");
}

template <Real T>
Tensor<T> slice(const Tensor<T>& a, std::int64_t axis, std::int64_t start, std::int64_t length) {
  axis = norm_axis(axis, a.rank(), "slice");
  const auto sp = split_at(a.shape(), axis);
  if (start < 0 || length <= 0 || start + length > sp.len) {
    throw ShapeError("slice: range [" + std::to_string(start) + ", " + std::to_string(start + length) +
                     ") out of bounds for " + to_string(a.shape()));
  }
  Shape out_shape = a.shape();
  out_shape[axis] = length;
  auto av = a.data();
  std::vector<T> out(static_cast<std::size_t>(sp.outer * length * sp.inner));
  const std::int64_t chunk = length * sp.inner;
  for (std::int64_t o = 0; o < sp.outer; ++o) {
    const T* src = av.data() + (o * sp.len + start) * sp.inner;
    std::copy(src, src + chunk, out.begin() + o * chunk);
  }
  BackwardFn<T> bw;
  if (tracking<T>({&a})) {
    bw = [sp, start, chunk](std::span<const T> g, GradSink<T>& sink) {
      if (auto* ga = sink.acc(0))
        for (std::int64_t o = 0; o < sp.outer; ++o) {
          T* dst = ga->data() + (o * sp.len + start) * sp.inner;
          for (std::int64_t i = 0; i < chunk; ++i) dst[i] += g[o * chunk + i];
        }
    };
  }
  return make_op<T>(std::move(out_shape), std::move(out), {&a}, std::move(bw), "slice");
}

template <Real T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, std::int64_t axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  axis = norm_axis(axis, parts[0].rank(), "concat");
  Shape out_shape = parts[0].shape();
  std::int64_t total = 0;
  for (const auto& p : parts) {
    if (p.rank() != parts[0].rank()) throw ShapeError("concat: rank mismatch");
    for (std::int64_t d = 0; d < p.rank(); ++d)
      if (d != axis && p.shape()[d] != out_shape[d])
        throw ShapeError("concat: incompatible shapes " + to_string(p.shape()) + " and " +
                         to_string(parts[0].shape()));
    total += p.shape()[axis];
  }
  out_shape[axis] = total;
  const auto sp = split_at(out_shape, axis);
  std::vector<T> out(static_cast<std::size_t>(numel_of(out_shape)));
  std::vector<std::int64_t> offsets;
  std::int64_t off = 0;
  for (const auto& p : parts) {
    offsets.push_back(off);
    const std::int64_t chunk = p.shape()[axis] * sp.inner;
    auto pv = p.data();
    for (std::int64_t o = 0; o < sp.outer; ++o)
      std::copy(pv.begin() + o * chunk, pv.begin() + (o + 1) * chunk,
                out.begin() + (o * sp.len + off) * sp.inner);
    off += p.shape()[axis];
  }
  std::vector<const Tensor<T>*> inputs;
  for (const auto& p : parts) inputs.push_back(&p);
  BackwardFn<T> bw;
  bool any = false;
  for (const auto& p : parts) any = any || tracking<T>({&p});
  if (any) {
    std::vector<std::int64_t> lens;
    for (const auto& p : parts) lens.push_back(p.shape()[axis]);
    bw = [sp, offsets, lens](std::span<const T> g, GradSink<T>& sink) {
      for (std::size_t k = 0; k < lens.size(); ++k) {
        auto* gk = sink.acc(k);
        if (!gk) continue;
        const std::int64_t chunk = lens[k] * sp.inner;
        for (std::int64_t o = 0; o < sp.outer; ++o) {
          const T* src = g.data() + (o * sp.len + offsets[k]) * sp.inner;
          T* dst = gk->data() + o * chunk;
          for (std::int64_t i = 0; i < chunk; ++i) dst[i] += src[i];
        }
      }
    };
  }
  return make_op<T>(std::move(out_shape), std::move(out), std::move(inputs), std::move(bw), "concat");
}

template <Real T>
Tensor<T> index_select(const Tensor<T>& a, std::int64_t axis, const std::vector<std::int64_t>& index) {
  axis = norm_axis(axis, a.rank(), "index_select");
  const auto sp = split_at(a.shape(), axis);
  for (auto i : index)
    if (i < 0 || i >= sp.len) throw ShapeError("index_select: index out of range");
  if (index.empty()) throw ShapeError("index_select: empty index");
  Shape out_shape = a.shape();
  const auto m = static_cast<std::int64_t>(index.size());
  out_shape[axis] = m;
  auto av = a.data();
  std::vector<T> out(static_cast<std::size_t>(sp.outer * m * sp.inner));
  for (std::int64_t o = 0; o < sp.outer; ++o)
    for (std::int64_t j = 0; j < m; ++j) {
      const T* src = av.data() + (o * sp.len + index[j]) * sp.inner;
      std::copy(src, src + sp.inner, out.begin() + (o * m + j) * sp.inner);
    }
  BackwardFn<T> bw;
  if (tracking<T>({&a})) {
    bw = [sp, index, m](std::span<const T> g, GradSink<T>& sink) {
      if (auto* ga = sink.acc(0))
        for (std::int64_t o = 0; o < sp.outer; ++o)
          for (std::int64_t j = 0; j < m; ++j) {
            T* dst = ga->data() + (o * sp.len + index[j]) * sp.inner;
            const T* src = g.data() + (o * m + j) * sp.inner;
            for (std::int64_t i = 0; i < sp.inner; ++i) dst[i] += src[i];
          }
    };
  }
  return make_op<T>(std::move(out_shape), std::move(out), {&a}, std::move(bw), "index_select");
}

template <Real T>
Tensor<T> pad2d(const Tensor<T>& x, std::int64_t top, std::int64_t bottom, std::int64_t left, std::int64_t right) {
  if (x.rank() < 2) throw ShapeError("pad2d: rank < 2");
  if (top < 0 || bottom < 0 || left < 0 || right < 0) throw ShapeError("pad2d: negative padding");
  const std::int64_t h = x.dim(-2), w = x.dim(-1), planes = x.numel() / (h * w);
  const std::int64_t ho = h + top + bottom, wo = w + left + right;
  Shape out_shape = x.shape();
  out_shape[out_shape.size() - 2] = ho;
  out_shape[out_shape.size() - 1] = wo;
  auto xv = x.data();
  std::vector<T> out(static_cast<std::size_t>(planes * ho * wo), T(0));
  for (std::int64_t p = 0; p < planes; ++p)
    for (std::int64_t i = 0; i < h; ++i)
      std::copy(xv.begin() + (p * h + i) * w, xv.begin() + (p * h + i + 1) * w,
                out.begin() + (p * ho + i + top) * wo + left);
  BackwardFn<T> bw;
  if (tracking<T>({&x})) {
    bw = [=](std::span<const T> g, GradSink<T>& sink) {
      if (auto* gx = sink.acc(0))
        for (std::int64_t p = 0; p < planes; ++p)
          for (std::int64_t i = 0; i < h; ++i)
            for (std::int64_t j = 0; j < w; ++j) (*gx)[(p * h + i) * w + j] += g[(p * ho + i + top) * wo + left + j];
    };
  }
  return make_op<T>(std::move(out_shape), std::move(out), {&x}, std::move(bw), "pad2d");
}

template <Real T>
Tensor<T> upsample_nearest(const Tensor<T>& x, std::int64_t factor) {
  if (factor < 1) throw ShapeError("upsample_nearest: factor < 1");
  if (x.rank() < 2) throw ShapeError("upsample_nearest: rank < 2");
  if (factor == 1) return x;
  const std::int64_t h = x.dim(-2), w = x.dim(-1), planes = x.numel() / (h * w);
  const std::int64_t ho = h * factor, wo = w * factor;
  Shape out_shape = x.shape();
  out_shape[out_shape.size() - 2] = ho;
  out_shape[out_shape.size() - 1] = wo;
  auto xv = x.data();
  std::vector<T> out(static_cast<std::size_t>(planes * ho * wo));
  for (std::int64_t p = 0; p < planes; ++p)
    for (std::int64_t i = 0; i < ho; ++i)
      for (std::int64_t j = 0; j < wo; ++j) out[(p * ho + i) * wo + j] = xv[(p * h + i / factor) * w + j / factor];
  BackwardFn<T> bw;
  if (tracking<T>({&x})) {
    bw = [=](std::span<const T> g, GradSink<T>& sink) {
      if (auto* gx = sink.acc(0))
        for (std::int64_t p = 0; p < planes; ++p)
          for (std::int64_t i = 0; i < ho; ++i)
            for (std::int64_t j = 0; j < wo; ++j) (*gx)[(p * h + i / factor) * w + j / factor] += g[(p * ho + i) * wo + j];
    };
  }
  return make_op<T>(std::move(out_shape), std::move(out), {&x}, std::move(bw), "upsample_nearest");
}

#define CRFLOW_INSTANTIATE(T)                                                                                 \
  template Tensor<T> reshape<T>(const Tensor<T>&, Shape);                                                    \
  template Tensor<T> permute<T>(const Tensor<T>&, const std::vector<std::int64_t>&);                         \
  template Tensor<T> slice<T>(const Tensor<T>&, std::int64_t, std::int64_t, std::int64_t);                   \
  template Tensor<T> concat<T>(const std::vector<Tensor<T>>&, std::int64_t);                                 \
  template Tensor<T> index_select<T>(const Tensor<T>&, std::int64_t, const std::vector<std::int64_t>&);      \
  template Tensor<T> pad2d<T>(const Tensor<T>&, std::int64_t, std::int64_t, std::int64_t, std::int64_t);     \
  template Tensor<T> upsample_nearest<T>(const Tensor<T>&, std::int64_t);

CRFLOW_INSTANTIATE(float)
CRFLOW_INSTANTIATE(double)
#undef CRFLOW_INSTANTIATE

}  // namespace crflow::ops
