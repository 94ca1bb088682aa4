#pragma once

// Conditional multi-scale normalizing flow.
//
// Each level is squeeze -> steps x (actnorm, invconv, coupling, injector) ->
// split, with no split after the last level. Every layer maps an NCHW tensor
// to a tensor of the same shape plus a per-sample log-determinant [N].

#include <string>
#include <vector>

#include "crflow/nn.hpp"
#include "crflow/rng.hpp"
#include "crflow/tensor.hpp"

namespace crflow {

struct FlowLayout {
  int levels = 3;
  int steps_per_level = 12;
  int base_channels = 3;
  int split_num = 1;
  int split_den = 2;
  int hr_h = 32;
  int hr_w = 32;
  int hidden = 64;

  // Throws ShapeError for unsupported or inconsistent values.
  void validate() const;
  // Channels and spatial size of g inside level l (after its squeeze).
  int level_channels(int l) const;
  int level_h(int l) const { return hr_h >> (l + 1); }
  int level_w(int l) const { return hr_w >> (l + 1); }
  int cond_channels(int l) const { return level_channels(l); }
  // Channels kept after the split of level l.
  int kept_channels(int l) const;
  // Shapes of the latent pieces for batch size n, in pyramid order.
  std::vector<Shape> latent_shapes(std::int64_t n) const;
  std::int64_t dims() const { return static_cast<std::int64_t>(base_channels) * hr_h * hr_w; }
  bool operator==(const FlowLayout&) const = default;
};

// Interior split outputs in level order, then the final latent.
template <Real T>
using LatentPyramid = std::vector<Tensor<T>>;

template <Real T>
struct LayerOut {
  Tensor<T> y;
  Tensor<T> logdet;  // [N]
};

// 2x2 spatial blocks become channels: out channel c*4 + dy*2 + dx.
template <Real T> Tensor<T> squeeze(const Tensor<T>& x);
template <Real T> Tensor<T> unsqueeze(const Tensor<T>& x);

// Fixed channel shuffle applied before a split: even channels, then odd.
std::vector<std::int64_t> split_shuffle(std::int64_t channels);
template <Real T> std::pair<Tensor<T>, Tensor<T>> split(const Tensor<T>& x);
template <Real T> Tensor<T> unsplit(const Tensor<T>& kept, const Tensor<T>& emitted);

// Bounded positive scale with s(0) == 1 exactly.
template <Real T> Tensor<T> affine_scale(const Tensor<T>& raw);
// y = s * x + t with logdet = sum(log s) per sample.
template <Real T> LayerOut<T> apply_affine(const Tensor<T>& x, const Tensor<T>& s, const Tensor<T>& t);

template <Real T>
class ActNorm {
 public:
  ActNorm() = default;
  explicit ActNorm(std::int64_t channels);

  // y = exp(logs) * (x + bias) per channel.
  LayerOut<T> forward(const Tensor<T>& x) const;
  Tensor<T> inverse(const Tensor<T>& y) const;
  // Sets bias = -mean and scale = 1/(std + 1e-6) over the batch per channel.
  void data_init(const Tensor<T>& x);
  bool initialized() const { return initialized_.item() != T(0); }
  void set_values(const std::vector<T>& scale, const std::vector<T>& bias);
  void collect(const std::string& prefix, ParamRefs<T>& out);

  Tensor<T> logs;
  Tensor<T> bias;

 private:
  Tensor<T> initialized_;
};

// W = P L U with P fixed, L unit lower triangular and
// U = strict upper + diag(sign * exp(logs)).
template <Real T>
class InvConv {
 public:
  InvConv() = default;
  // Random orthogonal initial weight, or the identity.
  InvConv(std::int64_t channels, Rng& rng, bool identity);
  // Factorizes an arbitrary invertible weight.
  static InvConv from_weight(const std::vector<double>& w, std::int64_t channels);

  LayerOut<T> forward(const Tensor<T>& x) const;
  Tensor<T> inverse(const Tensor<T>& y) const;
  Tensor<T> weight() const;
  Tensor<T> inverse_weight() const;
  void collect(const std::string& prefix, ParamRefs<T>& out);

  Tensor<T> perm;  // P as a dense 0/1 matrix
  Tensor<T> lower;
  Tensor<T> upper;
  Tensor<T> logs;
  Tensor<T> sign;

 private:
  void build_masks(std::int64_t c);
  Tensor<T> lower_mask_;
  Tensor<T> upper_mask_;
  Tensor<T> eye_;
};

// conv3x3 -> GELU -> conv1x1 -> GELU -> conv3x3, last layer zero-initialized.
template <Real T>
struct Subnet {
  Conv2d<T> c1, c2, c3;
  static Subnet make(std::int64_t in, std::int64_t hidden, std::int64_t out, Rng& rng);
  Tensor<T> operator()(const Tensor<T>& x) const;
  void collect(const std::string& prefix, ParamRefs<T>& out);
};

template <Real T>
class Coupling {
 public:
  Coupling() = default;
  Coupling(std::int64_t channels, std::int64_t cond_channels, std::int64_t hidden, Rng& rng);

  LayerOut<T> forward(const Tensor<T>& x, const Tensor<T>& cond) const;
  Tensor<T> inverse(const Tensor<T>& y, const Tensor<T>& cond) const;
  void collect(const std::string& prefix, ParamRefs<T>& out);

  Subnet<T> net;
  std::int64_t channels = 0;
  // Negative control for the verification suite: flips the logdet sign.
  bool fault_logdet_sign = false;

 private:
  std::pair<Tensor<T>, Tensor<T>> scale_shift(const Tensor<T>& x1, const Tensor<T>& cond) const;
};

template <Real T>
class Injector {
 public:
  Injector() = default;
  Injector(std::int64_t channels, std::int64_t cond_channels, std::int64_t hidden, Rng& rng);

  LayerOut<T> forward(const Tensor<T>& x, const Tensor<T>& cond) const;
  Tensor<T> inverse(const Tensor<T>& y, const Tensor<T>& cond) const;
  void collect(const std::string& prefix, ParamRefs<T>& out);

  Subnet<T> net;
  std::int64_t channels = 0;

 private:
  std::pair<Tensor<T>, Tensor<T>> scale_shift(const Tensor<T>& cond) const;
};

template <Real T>
struct FlowStep {
  ActNorm<T> actnorm;
  InvConv<T> invconv;
  Coupling<T> coupling;
  Injector<T> injector;
};

struct FlowInit {
  std::uint64_t seed = 0;
  bool identity_invconv = false;
};

// One logged layer contribution, for volume accounting.
struct LayerLogdet {
  std::string layer;
  double logdet = 0.0;  // summed over the batch
};

template <Real T>
class FlowModel {
 public:
  FlowModel() = default;
  FlowModel(const FlowLayout& layout, const FlowInit& init);

  const FlowLayout& layout() const { return layout_; }
  FlowStep<T>& step(int level, int index) { return steps_[level][index]; }
  const FlowStep<T>& step(int level, int index) const { return steps_[level][index]; }
  void collect(const std::string& prefix, ParamRefs<T>& out);
  ParamRefs<T> params(const std::string& prefix = "flow");
  bool actnorm_initialized() const;
  void set_fault_coupling_logdet_sign(bool on);

 private:
  FlowLayout layout_;
  std::vector<std::vector<FlowStep<T>>> steps_;
};

template <Real T>
struct FlowResult {
  LatentPyramid<T> z;
  Tensor<T> logdet;  // [N]
};

// cond[l] must be [N, layout.cond_channels(l), level_h(l), level_w(l)].
template <Real T>
FlowResult<T> flow_forward(const Tensor<T>& y, const std::vector<Tensor<T>>& cond, const FlowModel<T>& model,
                           std::vector<LayerLogdet>* log = nullptr);
template <Real T>
Tensor<T> flow_inverse(const LatentPyramid<T>& z, const std::vector<Tensor<T>>& cond, const FlowModel<T>& model);

// Data-dependent actnorm initialization on a batch; layers already
// initialized are left untouched.
template <Real T>
void flow_data_init(const Tensor<T>& y, const std::vector<Tensor<T>>& cond, FlowModel<T>& model);

// Per-dimension negative log-likelihood averaged over the batch.
template <Real T>
Tensor<T> nll(const LatentPyramid<T>& z, const Tensor<T>& logdet, const LatentPyramid<T>& mean);

}  // namespace crflow
