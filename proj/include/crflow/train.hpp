#pragma once

// Training: the flow + encoder bundle, the two loss terms, Adam with linear
// warmup, the paired dataset, the LLSF checkpoint container and inference.

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "crflow/degrade.hpp"
#include "crflow/encoder.hpp"
#include "crflow/flow.hpp"
#include "crflow/tensor.hpp"

namespace crflow {

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct TrainConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.99;
  double adam_eps = 1e-8;
  double grad_clip = 100.0;  // global gradient norm limit, 0 disables
  int batch = 4;
  int warmup_steps = 500;
  int total_steps = 2000;
  double loss_weight_gamma = 1.5;
  double nll_weight = 1.0;  // 0 gives the L1-only ablation
  std::uint64_t seed = 0;
  std::string precision = "f32";
  int threads = 1;
  int scale = 2;
  int crop = 32;  // HR crop side; also the flow layout size
  FlowLayout layout;
  EncoderConfig encoder;
  // Training pairs are restricted to manifest gamma in [gamma_min, gamma_max].
  double gamma_min = kGammaMin;
  double gamma_max = kGammaMax;
  int checkpoint_every = 0;  // 0: only at the end

  // Throws ConfigError.
  void validate() const;
  // Layout with hr_h = hr_w = crop.
  FlowLayout train_layout() const;
  std::string to_json() const;
  // Missing keys keep their defaults; unknown keys are rejected.
  static TrainConfig from_json(const std::string& text);
};

// Linear 0 -> lr over warmup_steps, then constant. step is 1-based.
double lr_at(const TrainConfig& cfg, std::int64_t step);

template <Real T>
struct SrModel {
  FlowModel<T> flow;
  Encoder<T> encoder;

  static SrModel make(const FlowLayout& layout, int scale, const EncoderConfig& enc, std::uint64_t seed);
  int scale() const { return encoder.scale(); }
  const FlowLayout& layout() const { return flow.layout(); }
  ParamRefs<T> params();
  // Same parameters on a layout sized for an LR input of lr_h x lr_w.
  // Throws ShapeError when the size does not fit the level structure.
  SrModel resized(std::int64_t lr_h, std::int64_t lr_w) const;
};

template <Real T>
struct LossParts {
  Tensor<T> total;
  double nll = 0.0;  // NaN when its weight is 0 and it was skipped
  double l1 = 0.0;
};

// Mean |flow_inverse(encoder_prior_mean, cond) - y|.
template <Real T>
Tensor<T> l1_branch(const SrModel<T>& model, const CondFeatures<T>& f, const Tensor<T>& y);

// nll_weight * L_nll + gamma * L1. L_nll uses the prior mean chosen by
// select_prior_mean between the encoder mean and CR(y). A term with weight 0
// is not evaluated.
template <Real T>
LossParts<T> total_loss(const SrModel<T>& model, const Tensor<T>& x, const Tensor<T>& y, Rng& rng,
                        double nll_weight = 1.0, double gamma = 1.5);

template <Real T>
struct AdamState {
  std::int64_t step = 0;
  std::map<std::string, std::vector<T>> m;
  std::map<std::string, std::vector<T>> v;
};

struct AdamHyper {
  double beta1 = 0.9;
  double beta2 = 0.99;
  double eps = 1e-8;
  // Global L2 norm limit over all trainable gradients; 0 disables.
  double clip_norm = 0.0;
};

// One bias-corrected Adam update of every trainable parameter. A non-finite
// gradient throws NumericError naming the parameter, before anything is
// modified. Returns the gradient norm before clipping.
template <Real T>
double adam_step(ParamRefs<T>& params, const Gradients<T>& grads, AdamState<T>& state, double lr_t,
                 const AdamHyper& hyper = {});

// Pairs held in memory as f64 [1, 3, h, w].
struct PairSet {
  int scale = 2;
  std::vector<TensorD> lr;
  std::vector<TensorD> hr;
  std::vector<std::string> ids;
  std::size_t size() const { return hr.size(); }
};

// Reads a gen-data directory; pairs outside [gamma_min, gamma_max] are dropped.
PairSet load_pairs(const std::filesystem::path& dir, double gamma_min = kGammaMin, double gamma_max = kGammaMax);
// The pairs gen-data would write for the same options, 8-bit quantized,
// without touching the disk.
PairSet synthetic_pairs(const DatasetOptions& opts);

// Random aligned crops: HR crop x crop and the matching LR window.
template <Real T>
std::pair<Tensor<T>, Tensor<T>> sample_batch(const PairSet& data, int batch, int crop, Rng& rng);

// LLSF container: magic "LLSF", u32 version, u64 JSON metadata length and
// bytes, u64 entry count, then per entry u32 name length, name, u8 dtype
// (0 f32, 1 f64), u32 rank, i64 dims, raw little-endian values.
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointEntry {
  std::string name;
  std::uint8_t dtype = 0;
  Shape shape;
  std::vector<double> values;  // exact for both dtypes
};

struct Checkpoint {
  std::string meta_json;
  std::vector<CheckpointEntry> entries;

  const CheckpointEntry* find(const std::string& name) const;
  template <Real T>
  void put(const std::string& name, const Tensor<T>& t);
  template <Real T>
  void put(const std::string& name, const Shape& shape, const std::vector<T>& values);
};

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

// Copies every parameter and buffer into / out of a container. Loading
// converts the element type and throws CheckpointError on a missing name or
// shape mismatch.
template <Real T>
void store_params(Checkpoint& ckpt, const ParamRefs<T>& params);
template <Real T>
void restore_params(const Checkpoint& ckpt, ParamRefs<T>& params);

template <Real T>
void store_adam(Checkpoint& ckpt, const AdamState<T>& state);
template <Real T>
AdamState<T> restore_adam(const Checkpoint& ckpt, const ParamRefs<T>& params);

struct TrainLogRow {
  std::int64_t step = 0;
  double lr = 0.0;
  double nll = 0.0;
  double l1 = 0.0;
  double total = 0.0;
  double grad_norm = 0.0;
  // Non-finite loss or gradient: no update was applied.
  bool skipped = false;
};

struct TrainOptions {
  std::filesystem::path checkpoint_out;  // empty: no checkpoint
  std::filesystem::path log_csv;         // empty: no log file
  std::filesystem::path resume;          // empty: fresh start
  std::int64_t stop_after = 0;           // > 0: stop (and save) at this step
  bool verbose = false;
};

template <Real T>
struct TrainResult {
  SrModel<T> model;
  AdamState<T> adam;
  std::vector<TrainLogRow> log;
  std::int64_t step = 0;
};

// Writes the checkpoint of a training run: config, step, parameters, Adam.
template <Real T>
void save_training_state(const std::filesystem::path& path, const TrainConfig& cfg, SrModel<T>& model,
                         const AdamState<T>& adam, std::int64_t step);

// Loads config and model (converted to T) from a checkpoint.
template <Real T>
std::pair<TrainConfig, SrModel<T>> load_model(const std::filesystem::path& path);

template <Real T>
TrainResult<T> train_loop(const TrainConfig& cfg, const PairSet& data, const TrainOptions& opts = {});

// Mode of the encoder prior through the inverse flow, clamped to [0, 1].
// Inputs of another size than the model layout use a resized copy.
template <Real T>
Tensor<T> infer(const SrModel<T>& model, const Tensor<T>& x);

}  // namespace crflow
