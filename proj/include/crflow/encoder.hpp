#pragma once

// Multi-resolution parallel transformer that turns the dark LR input into the
// flow's conditioning maps and a predicted color-ratio map.
//
// stem conv -> streams at LR, LR/2, ... (one per flow level) -> stages of
// [window attention -> dwconv FFN] blocks per stream followed by a feature
// blend -> heads.

#include <string>
#include <vector>

#include "crflow/flow.hpp"
#include "crflow/nn.hpp"

namespace crflow {

inline constexpr std::int64_t kCondInputChannels = 10;

// Luminance histogram equalization, 256 bins, one gain per pixel shared by
// the three channels. Images whose luminance range is below 1/255 pass
// through unchanged. Not differentiable.
template <Real T> Tensor<T> histeq(const Tensor<T>& x);

// Max over channels and over the two forward differences; the last row and
// column only see the difference that exists. [N, C, H, W] -> [N, 1, H, W].
template <Real T> Tensor<T> maxgrad(const Tensor<T>& m);

// [x, histeq(x), cr_map(histeq(x)), maxgrad(cr)] along channels.
template <Real T> Tensor<T> build_cond_input(const Tensor<T>& x);

template <Real T>
struct WindowAttention {
  Conv2d<T> qkv;   // 1x1, C -> 3C
  Conv2d<T> proj;  // 1x1, C -> C, zero at init
  std::int64_t window = 8;
  std::int64_t heads = 2;

  static WindowAttention make(std::int64_t channels, std::int64_t window, std::int64_t heads, Rng& rng);
  // x + proj(attention(x)). Inputs are zero padded up to the window grid and
  // padded keys are masked out.
  Tensor<T> operator()(const Tensor<T>& x) const;
  void collect(const std::string& prefix, ParamRefs<T>& out);
};

template <Real T>
struct FfnDwconv {
  Conv2d<T> expand;     // 1x1, C -> 2C
  Conv2d<T> depthwise;  // 3x3, groups 2C
  Conv2d<T> project;    // 1x1, 2C -> C, zero at init

  static FfnDwconv make(std::int64_t channels, Rng& rng);
  Tensor<T> operator()(const Tensor<T>& x) const;
  void collect(const std::string& prefix, ParamRefs<T>& out);
};

// Cross-resolution exchange between streams ordered fine to coarse.
// paths[i][j] carries stream j into stream i: one 1x1 conv followed by
// nearest upsampling when j is coarser, a chain of stride-2 3x3 convs when j
// is finer. The last conv of every path starts at zero.
template <Real T>
struct FeatureBlend {
  std::vector<std::vector<std::vector<Conv2d<T>>>> paths;

  static FeatureBlend make(std::int64_t streams, std::int64_t channels, Rng& rng);
  std::vector<Tensor<T>> operator()(const std::vector<Tensor<T>>& levels) const;
  void collect(const std::string& prefix, ParamRefs<T>& out);
};

struct EncoderConfig {
  std::int64_t width = 48;
  int stages = 2;
  int blocks = 2;
  std::int64_t window = 8;
  std::int64_t heads = 2;
  bool operator==(const EncoderConfig&) const = default;
};

template <Real T>
struct CondFeatures {
  std::vector<Tensor<T>> per_level;  // [N, cond_channels(l), level_h(l), level_w(l)]
  Tensor<T> cr_pred;                 // [N, 3, h, w], softmax over channels
};

template <Real T>
struct EncoderBlock {
  WindowAttention<T> attn;
  FfnDwconv<T> ffn;
};

template <Real T>
class Encoder {
 public:
  Encoder() = default;
  Encoder(const FlowLayout& layout, int scale, const EncoderConfig& config, std::uint64_t seed);

  CondFeatures<T> forward(const Tensor<T>& x) const;
  ParamRefs<T> params(const std::string& prefix = "encoder");

  const FlowLayout& layout() const { return layout_; }
  int scale() const { return scale_; }
  const EncoderConfig& config() const { return config_; }
  std::int64_t streams() const { return static_cast<std::int64_t>(layout_.levels); }

  Conv2d<T> stem;
  std::vector<Conv2d<T>> downs;                             // stream i-1 -> i
  std::vector<std::vector<std::vector<EncoderBlock<T>>>> blocks;  // [stage][stream][block]
  std::vector<FeatureBlend<T>> blends;                      // one per stage
  Conv2d<T> cr_head;
  std::vector<Conv2d<T>> cond_heads;

 private:
  FlowLayout layout_;
  int scale_ = 2;
  EncoderConfig config_;
};

// Nearest upsampling of cr_pred to HR, rearranged into the latent pyramid.
template <Real T>
LatentPyramid<T> encoder_prior_mean(const CondFeatures<T>& f, const FlowLayout& layout, int scale);

}  // namespace crflow
