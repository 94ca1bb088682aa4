#include "crflow/encoder.hpp"

#include <algorithm>
#include <cmath>

#include "crflow/crmap.hpp"

namespace crflow {

namespace op = ops;

namespace {

constexpr double kLumaR = 0.299, kLumaG = 0.587, kLumaB = 0.114;
constexpr int kBins = 256;
constexpr double kMaskedScore = -1e9;

void check_image(const Shape& s, std::int64_t channels, const char* who) {
  if (s.size() != 4 || (channels > 0 && s[1] != channels)) {
    throw ShapeError(std::string(who) + ": expected N x " + std::to_string(channels) + " x H x W, got " + to_string(s));
  }
}

}  // namespace

template <Real T>
Tensor<T> histeq(const Tensor<T>& x) {
  check_image(x.shape(), 3, "histeq");
  const auto n = x.dim(0), hw = x.dim(2) * x.dim(3);
  auto in = x.data();
  std::vector<T> out(in.begin(), in.end());
  std::vector<double> luma(static_cast<std::size_t>(hw));
  std::vector<int> bin(static_cast<std::size_t>(hw));
  for (std::int64_t i = 0; i < n; ++i) {
    const T* r = in.data() + i * 3 * hw;
    const T* g = r + hw;
    const T* b = g + hw;
    double lo = 1e300, hi = -1e300;
    for (std::int64_t p = 0; p < hw; ++p) {
      const double l = kLumaR * r[p] + kLumaG * g[p] + kLumaB * b[p];
      luma[p] = l;
      lo = std::min(lo, l);
      hi = std::max(hi, l);
    }
    if (hi - lo < 1.0 / 255.0) continue;
    std::vector<std::int64_t> hist(kBins, 0);
    for (std::int64_t p = 0; p < hw; ++p) {
      bin[p] = std::clamp(static_cast<int>(std::floor(luma[p] * kBins)), 0, kBins - 1);
      ++hist[bin[p]];
    }
    std::vector<double> cdf(kBins);
    std::int64_t acc = 0;
    for (int k = 0; k < kBins; ++k) {
      acc += hist[k];
      cdf[k] = static_cast<double>(acc) / static_cast<double>(hw);
    }
    T* o = out.data() + i * 3 * hw;
    for (std::int64_t p = 0; p < hw; ++p) {
      const double target = cdf[bin[p]];
      for (int c = 0; c < 3; ++c) {
        const double v = luma[p] > 0 ? in[i * 3 * hw + c * hw + p] * (target / luma[p]) : target;
        o[c * hw + p] = static_cast<T>(std::clamp(v, 0.0, 1.0));
      }
    }
  }
  return Tensor<T>(x.shape(), std::move(out));
}

template <Real T>
Tensor<T> maxgrad(const Tensor<T>& m) {
  check_image(m.shape(), 0, "maxgrad");
  const auto n = m.dim(0), c = m.dim(1), h = m.dim(2), w = m.dim(3);
  auto in = m.data();
  std::vector<T> out(static_cast<std::size_t>(n * h * w), T(0));
  for (std::int64_t i = 0; i < n; ++i) {
    T* o = out.data() + i * h * w;
    for (std::int64_t ch = 0; ch < c; ++ch) {
      const T* p = in.data() + (i * c + ch) * h * w;
      for (std::int64_t y = 0; y < h; ++y) {
        for (std::int64_t x = 0; x < w; ++x) {
          T g = 0;
          if (x + 1 < w) g = std::max(g, std::abs(p[y * w + x + 1] - p[y * w + x]));
          if (y + 1 < h) g = std::max(g, std::abs(p[(y + 1) * w + x] - p[y * w + x]));
          o[y * w + x] = std::max(o[y * w + x], g);
        }
      }
    }
  }
  return Tensor<T>({n, 1, h, w}, std::move(out));
}

template <Real T>
Tensor<T> build_cond_input(const Tensor<T>& x) {
  check_image(x.shape(), 3, "build_cond_input");
  auto eq = histeq(x);
  auto cr = cr_map(eq);
  auto grad = maxgrad(cr);
  return op::concat<T>({x.detach(), eq, cr, grad}, 1);
}

// ------------------------------------------------------------------ blocks

template <Real T>
WindowAttention<T> WindowAttention<T>::make(std::int64_t channels, std::int64_t window, std::int64_t heads, Rng& rng) {
  if (window < 1 || heads < 1 || channels % heads != 0) {
    throw ShapeError("WindowAttention: channels must divide into heads and window must be positive");
  }
  WindowAttention a;
  a.qkv = Conv2d<T>::make(channels, 3 * channels, 1, rng);
  a.proj = Conv2d<T>::make(channels, channels, 1, rng, Init::kZero);
  a.window = window;
  a.heads = heads;
  return a;
}

template <Real T>
Tensor<T> WindowAttention<T>::operator()(const Tensor<T>& x) const {
  check_image(x.shape(), qkv.weight.dim(1), "WindowAttention");
  const auto n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const auto ws = window;
  const auto hp = (h + ws - 1) / ws * ws, wp = (w + ws - 1) / ws * ws;
  const auto nh = hp / ws, nw = wp / ws, dh = c / heads, p = ws * ws;
  const auto batch = n * nh * nw * heads;

  auto xp = (hp != h || wp != w) ? op::pad2d(x, 0, hp - h, 0, wp - w) : x;
  // [N, 3C, Hp, Wp] -> [3, N, nh, nw, heads, ws, ws, dh]
  auto t = op::reshape(qkv(xp), {n, 3, heads, dh, nh, ws, nw, ws});
  t = op::permute(t, {1, 0, 4, 6, 2, 5, 7, 3});
  t = op::reshape(t, {3, batch, p, dh});
  auto q = op::reshape(op::slice(t, 0, 0, 1), {batch, p, dh});
  auto k = op::reshape(op::slice(t, 0, 1, 1), {batch, p, dh});
  auto v = op::reshape(op::slice(t, 0, 2, 1), {batch, p, dh});

  auto scores = op::mul_scalar(op::bmm(q, k, false, true), static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh))));
  if (hp != h || wp != w) {
    std::vector<T> mask(static_cast<std::size_t>(batch * p * p), T(0));
    for (std::int64_t b = 0; b < batch; ++b) {
      const auto win = b / heads;
      const auto wy = (win / nw) % nh, wx = win % nw;
      for (std::int64_t key = 0; key < p; ++key) {
        const bool pad = wy * ws + key / ws >= h || wx * ws + key % ws >= w;
        if (!pad) continue;
        for (std::int64_t qi = 0; qi < p; ++qi) mask[(b * p + qi) * p + key] = static_cast<T>(kMaskedScore);
      }
    }
    scores = op::add(scores, Tensor<T>({batch, p, p}, std::move(mask)));
  }
  auto out = op::bmm(op::softmax(scores, 2), v);  // [batch, p, dh]
  out = op::reshape(out, {n, nh, nw, heads, ws, ws, dh});
  out = op::permute(out, {0, 3, 6, 1, 4, 2, 5});
  out = op::reshape(out, {n, c, hp, wp});
  if (hp != h) out = op::slice(out, 2, 0, h);
  if (wp != w) out = op::slice(out, 3, 0, w);
  return op::add(x, proj(out));
}

template <Real T>
void WindowAttention<T>::collect(const std::string& prefix, ParamRefs<T>& out) {
  qkv.collect(prefix + "/qkv", out);
  proj.collect(prefix + "/proj", out);
}

template <Real T>
FfnDwconv<T> FfnDwconv<T>::make(std::int64_t channels, Rng& rng) {
  FfnDwconv f;
  f.expand = Conv2d<T>::make(channels, 2 * channels, 1, rng);
  f.depthwise = Conv2d<T>::make(2 * channels, 2 * channels, 3, rng, Init::kDefault, 1, 2 * channels);
  f.project = Conv2d<T>::make(2 * channels, channels, 1, rng, Init::kZero);
  return f;
}

template <Real T>
Tensor<T> FfnDwconv<T>::operator()(const Tensor<T>& x) const {
  return op::add(x, project(op::gelu(depthwise(expand(x)))));
}

template <Real T>
void FfnDwconv<T>::collect(const std::string& prefix, ParamRefs<T>& out) {
  expand.collect(prefix + "/expand", out);
  depthwise.collect(prefix + "/depthwise", out);
  project.collect(prefix + "/project", out);
}

template <Real T>
FeatureBlend<T> FeatureBlend<T>::make(std::int64_t streams, std::int64_t channels, Rng& rng) {
  FeatureBlend b;
  b.paths.resize(static_cast<std::size_t>(streams));
  for (std::int64_t i = 0; i < streams; ++i) {
    auto& row = b.paths[static_cast<std::size_t>(i)];
    row.resize(static_cast<std::size_t>(streams));
    for (std::int64_t j = 0; j < streams; ++j) {
      auto& path = row[static_cast<std::size_t>(j)];
      if (j > i) {
        path.push_back(Conv2d<T>::make(channels, channels, 1, rng, Init::kZero));
      } else if (j < i) {
        for (std::int64_t s = j; s < i; ++s) {
          path.push_back(Conv2d<T>::make(channels, channels, 3, rng, s + 1 == i ? Init::kZero : Init::kDefault, 2));
        }
      }
    }
  }
  return b;
}

template <Real T>
std::vector<Tensor<T>> FeatureBlend<T>::operator()(const std::vector<Tensor<T>>& levels) const {
  if (levels.size() != paths.size()) throw ShapeError("FeatureBlend: stream count mismatch");
  for (std::size_t i = 1; i < levels.size(); ++i) {
    const auto& f = levels[i - 1];
    const auto& c = levels[i];
    if (f.dim(2) != 2 * c.dim(2) || f.dim(3) != 2 * c.dim(3)) {
      throw ShapeError("FeatureBlend: streams " + std::to_string(i - 1) + " and " + std::to_string(i) +
                       " are not a 2x dyadic pair: " + to_string(f.shape()) + " vs " + to_string(c.shape()));
    }
  }
  std::vector<Tensor<T>> out;
  for (std::size_t i = 0; i < levels.size(); ++i) {
    Tensor<T> acc = levels[i];
    for (std::size_t j = 0; j < levels.size(); ++j) {
      if (j == i) continue;
      const auto& path = paths[i][j];
      Tensor<T> h = levels[j];
      if (j > i) {
        h = op::upsample_nearest(path.front()(h), std::int64_t{1} << (j - i));
      } else {
        for (std::size_t s = 0; s < path.size(); ++s) {
          h = path[s](h);
          if (s + 1 < path.size()) h = op::gelu(h);
        }
      }
      acc = op::add(acc, h);
    }
    out.push_back(acc);
  }
  return out;
}

template <Real T>
void FeatureBlend<T>::collect(const std::string& prefix, ParamRefs<T>& out) {
  for (std::size_t i = 0; i < paths.size(); ++i) {
    for (std::size_t j = 0; j < paths[i].size(); ++j) {
      for (std::size_t s = 0; s < paths[i][j].size(); ++s) {
        paths[i][j][s].collect(prefix + "/p" + std::to_string(j) + "to" + std::to_string(i) + "/c" + std::to_string(s),
                               out);
      }
    }
  }
}

// ------------------------------------------------------------------ encoder

template <Real T>
Encoder<T>::Encoder(const FlowLayout& layout, int scale, const EncoderConfig& config, std::uint64_t seed)
    : layout_(layout), scale_(scale), config_(config) {
  layout.validate();
  if (scale != 2 && scale != 4) throw ShapeError("Encoder: scale must be 2 or 4");
  if (layout.hr_h % (scale << (layout.levels - 1)) != 0 || layout.hr_w % (scale << (layout.levels - 1)) != 0) {
    throw ShapeError("Encoder: HR size must be divisible by scale * 2^(levels-1)");
  }
  if (config.stages < 1 || config.blocks < 1) throw ShapeError("Encoder: stages and blocks must be positive");
  Rng rng(derive_seed(seed, "encoder"));
  const auto c = config.width;
  stem = Conv2d<T>::make(kCondInputChannels, c, 3, rng);
  for (std::int64_t s = 1; s < streams(); ++s) downs.push_back(Conv2d<T>::make(c, c, 3, rng, Init::kDefault, 2));
  for (int st = 0; st < config.stages; ++st) {
    std::vector<std::vector<EncoderBlock<T>>> stage;
    for (std::int64_t s = 0; s < streams(); ++s) {
      std::vector<EncoderBlock<T>> stream;
      for (int b = 0; b < config.blocks; ++b) {
        stream.push_back({WindowAttention<T>::make(c, config.window, config.heads, rng), FfnDwconv<T>::make(c, rng)});
      }
      stage.push_back(std::move(stream));
    }
    blocks.push_back(std::move(stage));
    blends.push_back(FeatureBlend<T>::make(streams(), c, rng));
  }
  cr_head = Conv2d<T>::make(c, 3, 3, rng);
  for (int l = 0; l < layout.levels; ++l) cond_heads.push_back(Conv2d<T>::make(c, layout.cond_channels(l), 1, rng));
}

template <Real T>
CondFeatures<T> Encoder<T>::forward(const Tensor<T>& x) const {
  check_image(x.shape(), 3, "Encoder");
  if (x.dim(2) * scale_ != layout_.hr_h || x.dim(3) * scale_ != layout_.hr_w) {
    throw ShapeError("Encoder: input " + to_string(x.shape()) + " times scale " + std::to_string(scale_) +
                     " does not match the layout's HR size");
  }
  std::vector<Tensor<T>> s{stem(build_cond_input(x))};
  for (const auto& d : downs) s.push_back(d(s.back()));
  for (std::size_t st = 0; st < blocks.size(); ++st) {
    for (std::size_t i = 0; i < s.size(); ++i) {
      for (const auto& b : blocks[st][i]) s[i] = b.ffn(b.attn(s[i]));
    }
    s = blends[st](s);
  }
  CondFeatures<T> f;
  f.cr_pred = op::softmax(cr_head(s[0]), 1);
  for (std::size_t l = 0; l < cond_heads.size(); ++l) {
    auto m = cond_heads[l](s[l]);
    if (scale_ > 2) m = op::upsample_nearest(m, scale_ / 2);
    f.per_level.push_back(m);
  }
  return f;
}

template <Real T>
ParamRefs<T> Encoder<T>::params(const std::string& prefix) {
  ParamRefs<T> out;
  stem.collect(prefix + "/stem", out);
  for (std::size_t i = 0; i < downs.size(); ++i) downs[i].collect(prefix + "/down" + std::to_string(i + 1), out);
  for (std::size_t st = 0; st < blocks.size(); ++st) {
    const auto sp = prefix + "/stage" + std::to_string(st);
    for (std::size_t i = 0; i < blocks[st].size(); ++i) {
      for (std::size_t b = 0; b < blocks[st][i].size(); ++b) {
        const auto bp = sp + "/stream" + std::to_string(i) + "/block" + std::to_string(b);
        blocks[st][i][b].attn.collect(bp + "/attn", out);
        blocks[st][i][b].ffn.collect(bp + "/ffn", out);
      }
    }
    blends[st].collect(sp + "/blend", out);
  }
  cr_head.collect(prefix + "/cr_head", out);
  for (std::size_t l = 0; l < cond_heads.size(); ++l) cond_heads[l].collect(prefix + "/cond_head" + std::to_string(l), out);
  return out;
}

template <Real T>
LatentPyramid<T> encoder_prior_mean(const CondFeatures<T>& f, const FlowLayout& layout, int scale) {
  return rearrange_to_pyramid(op::upsample_nearest(f.cr_pred, static_cast<std::int64_t>(scale)), layout);
}

#define CRFLOW_ENCODER_INSTANTIATE(T)                                                             \
  template Tensor<T> histeq(const Tensor<T>&);                                                    \
  template Tensor<T> maxgrad(const Tensor<T>&);                                                   \
  template Tensor<T> build_cond_input(const Tensor<T>&);                                          \
  template struct WindowAttention<T>;                                                             \
  template struct FfnDwconv<T>;                                                                   \
  template struct FeatureBlend<T>;                                                                \
  template class Encoder<T>;                                                                      \
  template LatentPyramid<T> encoder_prior_mean(const CondFeatures<T>&, const FlowLayout&, int);

CRFLOW_ENCODER_INSTANTIATE(float)
CRFLOW_ENCODER_INSTANTIATE(double)

}  // namespace crflow
