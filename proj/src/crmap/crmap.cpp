#include "crflow/crmap.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

namespace crflow {

namespace op = ops;

template <Real T>
Tensor<T> cr_map(const Tensor<T>& image, double eps) {
  if (image.rank() != 4 || image.dim(1) != 3) throw ShapeError("cr_map: expected N x 3 x H x W");
  const auto n = image.dim(0), hw = image.dim(2) * image.dim(3);
  auto in = image.data();
  std::vector<T> out(in.size());
  for (std::int64_t i = 0; i < n; ++i) {
    const T* r = in.data() + i * 3 * hw;
    const T* g = r + hw;
    const T* b = g + hw;
    T* o = out.data() + i * 3 * hw;
    for (std::int64_t p = 0; p < hw; ++p) {
      if (r[p] < T(0) || g[p] < T(0) || b[p] < T(0)) throw DomainError("cr_map: negative pixel value");
      // max rather than sum + eps keeps the ratio exactly scale free above eps.
      const T denom = std::max(r[p] + g[p] + b[p], static_cast<T>(eps));
      o[p] = r[p] / denom;
      o[hw + p] = g[p] / denom;
      o[2 * hw + p] = b[p] / denom;
    }
  }
  return Tensor<T>(image.shape(), std::move(out));
}

template <Real T>
Tensor<T> nearest_downsample(const Tensor<T>& image, std::int64_t s) {
  if (image.rank() != 4 || s < 1 || image.dim(2) % s != 0 || image.dim(3) % s != 0) {
    throw ShapeError("nearest_downsample: dims not divisible by " + std::to_string(s));
  }
  const auto nc = image.dim(0) * image.dim(1), h = image.dim(2), w = image.dim(3);
  const auto oh = h / s, ow = w / s;
  auto in = image.data();
  std::vector<T> out(static_cast<std::size_t>(nc * oh * ow));
  for (std::int64_t c = 0; c < nc; ++c) {
    for (std::int64_t y = 0; y < oh; ++y) {
      for (std::int64_t x = 0; x < ow; ++x) out[(c * oh + y) * ow + x] = in[(c * h + y * s) * w + x * s];
    }
  }
  return Tensor<T>({image.dim(0), image.dim(1), oh, ow}, std::move(out));
}

template <Real T>
LatentPyramid<T> rearrange_to_pyramid(const Tensor<T>& mean_image, const FlowLayout& layout) {
  layout.validate();
  if (mean_image.rank() != 4 || mean_image.dim(1) != layout.base_channels || mean_image.dim(2) != layout.hr_h ||
      mean_image.dim(3) != layout.hr_w) {
    throw ShapeError("rearrange_to_pyramid: image " + to_string(mean_image.shape()) + " does not match layout");
  }
  LatentPyramid<T> out;
  Tensor<T> h = mean_image;
  for (int l = 0; l < layout.levels; ++l) {
    h = squeeze(h);
    if (l + 1 < layout.levels) {
      auto [kept, emitted] = split(h);
      out.push_back(emitted);
      h = kept;
    }
  }
  out.push_back(h);
  return out;
}

template <Real T>
Tensor<T> unrearrange_pyramid(const LatentPyramid<T>& pyramid, const FlowLayout& layout) {
  if (static_cast<int>(pyramid.size()) != layout.levels) throw ShapeError("unrearrange_pyramid: piece count");
  Tensor<T> h = pyramid.back();
  for (int l = layout.levels - 1; l >= 0; --l) {
    if (l + 1 < layout.levels) h = unsplit(h, pyramid[static_cast<std::size_t>(l)]);
    h = unsqueeze(h);
  }
  return h;
}

namespace {

template <Real T>
void check_same(const LatentPyramid<T>& a, const LatentPyramid<T>& b, const char* who) {
  if (a.size() != b.size()) throw ShapeError(std::string(who) + ": piece count mismatch");
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i].shape() != b[i].shape()) {
      throw ShapeError(std::string(who) + ": piece " + std::to_string(i) + " shapes " + to_string(a[i].shape()) +
                       " vs " + to_string(b[i].shape()));
    }
  }
}

}  // namespace

template <Real T>
LatentPyramid<T> select_prior_mean(const LatentPyramid<T>& enc_mean, const LatentPyramid<T>& cr_mean, Rng& rng,
                                   std::vector<bool>* picked_cr) {
  check_same(enc_mean, cr_mean, "select_prior_mean");
  if (enc_mean.empty()) return {};
  const auto n = enc_mean.front().dim(0);
  std::vector<T> m(static_cast<std::size_t>(n));
  if (picked_cr) picked_cr->assign(static_cast<std::size_t>(n), false);
  for (std::int64_t i = 0; i < n; ++i) {
    const bool cr = rng.bernoulli(kCrPriorProbability);
    m[static_cast<std::size_t>(i)] = cr ? T(1) : T(0);
    if (picked_cr) (*picked_cr)[static_cast<std::size_t>(i)] = cr;
  }
  LatentPyramid<T> out;
  for (std::size_t k = 0; k < enc_mean.size(); ++k) {
    const auto& e = enc_mean[k];
    Shape ms(static_cast<std::size_t>(e.rank()), 1);
    ms[0] = n;
    Tensor<T> mask(ms, m);
    auto inv = op::add_scalar(op::neg(mask), T(1));
    // 1*a + 0*b is exactly a, so each sample's mean equals its pick bitwise.
    out.push_back(op::add(op::mul(cr_mean[k], mask), op::mul(e, inv)));
  }
  return out;
}

template <Real T>
Tensor<T> latent_log_density_per_sample(const LatentPyramid<T>& z, const LatentPyramid<T>& mean) {
  check_same(z, mean, "latent_log_density");
  if (z.empty()) throw ShapeError("latent_log_density: empty latent");
  const auto n = z.front().dim(0);
  Tensor<T> sq = Tensor<T>::zeros({n});
  std::int64_t d = 0;
  for (std::size_t k = 0; k < z.size(); ++k) {
    sq = op::add(sq, op::sum_per_sample(op::square(op::sub(z[k], mean[k]))));
    d += z[k].numel() / n;
  }
  const double c = -0.5 * std::log(2.0 * std::numbers::pi) * static_cast<double>(d);
  return op::add_scalar(op::mul_scalar(sq, T(-0.5)), static_cast<T>(c));
}

template <Real T>
Tensor<T> latent_log_density(const LatentPyramid<T>& z, const LatentPyramid<T>& mean) {
  return op::sum(latent_log_density_per_sample(z, mean));
}

#define CRFLOW_CRMAP_INSTANTIATE(T)                                                                             \
  template Tensor<T> cr_map(const Tensor<T>&, double);                                                        \
  template Tensor<T> nearest_downsample(const Tensor<T>&, std::int64_t);                                      \
  template LatentPyramid<T> rearrange_to_pyramid(const Tensor<T>&, const FlowLayout&);                        \
  template Tensor<T> unrearrange_pyramid(const LatentPyramid<T>&, const FlowLayout&);                         \
  template LatentPyramid<T> select_prior_mean(const LatentPyramid<T>&, const LatentPyramid<T>&, Rng&,         \
                                              std::vector<bool>*);                                            \
  template Tensor<T> latent_log_density_per_sample(const LatentPyramid<T>&, const LatentPyramid<T>&);         \
  template Tensor<T> latent_log_density(const LatentPyramid<T>&, const LatentPyramid<T>&);

CRFLOW_CRMAP_INSTANTIATE(float)
CRFLOW_CRMAP_INSTANTIATE(double)

}  // namespace crflow
