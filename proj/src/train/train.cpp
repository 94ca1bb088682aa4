#include "crflow/train.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <json.hpp>
#include <limits>

#include "crflow/crmap.hpp"
#include "crflow/image_io.hpp"
#include "crflow/ops.hpp"

namespace crflow {

namespace {

using nlohmann::json;

json layout_json(const FlowLayout& l) {
  return {{"levels", l.levels}, {"steps_per_level", l.steps_per_level}, {"hidden", l.hidden}};
}

json encoder_json(const EncoderConfig& e) {
  return {{"width", e.width}, {"stages", e.stages}, {"blocks", e.blocks}, {"window", e.window}, {"heads", e.heads}};
}

template <class V>
void take(const json& j, const char* key, V& out) {
  if (j.contains(key)) out = j.at(key).get<V>();
}

void reject_unknown(const json& j, std::initializer_list<const char*> known, const std::string& where) {
  for (const auto& [k, v] : j.items()) {
    if (std::find_if(known.begin(), known.end(), [&](const char* s) { return k == s; }) == known.end()) {
      throw ConfigError("unknown key '" + k + "' in " + where);
    }
  }
}

}  // namespace

void TrainConfig::validate() const {
  if (!(lr > 0) || !(beta1 >= 0 && beta1 < 1) || !(beta2 >= 0 && beta2 < 1) || !(adam_eps > 0) || !(grad_clip >= 0)) {
    throw ConfigError("optimizer settings out of range");
  }
  if (batch < 1 || warmup_steps < 0 || total_steps < 0) throw ConfigError("batch, warmup and total steps");
  if (!(loss_weight_gamma >= 0) || !(nll_weight >= 0)) throw ConfigError("loss weights must be non-negative");
  if (loss_weight_gamma == 0 && nll_weight == 0) throw ConfigError("both loss weights are zero");
  if (precision != "f32" && precision != "f64") throw ConfigError("precision must be f32 or f64");
  if (threads < 1) throw ConfigError("threads must be positive");
  if (scale != 2 && scale != 4) throw ConfigError("scale must be 2 or 4");
  if (!(gamma_min <= gamma_max)) throw ConfigError("gamma_min > gamma_max");
  if (checkpoint_every < 0) throw ConfigError("checkpoint_every must be non-negative");
  try {
    train_layout().validate();
  } catch (const ShapeError& e) {
    throw ConfigError(e.what());
  }
  if (crop % (scale << (layout.levels - 1)) != 0) throw ConfigError("crop must be divisible by scale * 2^(levels-1)");
}

FlowLayout TrainConfig::train_layout() const {
  FlowLayout l = layout;
  l.hr_h = crop;
  l.hr_w = crop;
  return l;
}

std::string TrainConfig::to_json() const {
  json j{{"lr", lr},
         {"betas", {beta1, beta2}},
         {"adam_eps", adam_eps},
         {"grad_clip", grad_clip},
         {"batch", batch},
         {"warmup_steps", warmup_steps},
         {"total_steps", total_steps},
         {"loss_weight_gamma", loss_weight_gamma},
         {"nll_weight", nll_weight},
         {"seed", seed},
         {"precision", precision},
         {"threads", threads},
         {"scale", scale},
         {"crop", crop},
         {"flow", layout_json(layout)},
         {"encoder", encoder_json(encoder)},
         {"gamma_min", gamma_min},
         {"gamma_max", gamma_max},
         {"checkpoint_every", checkpoint_every}};
  return j.dump(2);
}

TrainConfig TrainConfig::from_json(const std::string& text) {
  TrainConfig c;
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("malformed config: ") + e.what());
  }
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  try {
    reject_unknown(j,
                   {"lr", "betas", "adam_eps", "grad_clip", "batch", "warmup_steps", "total_steps", "loss_weight_gamma",
                    "nll_weight", "seed", "precision", "threads", "scale", "crop", "flow", "encoder", "gamma_min",
                    "gamma_max", "checkpoint_every"},
                   "config");
    take(j, "lr", c.lr);
    if (j.contains("betas")) {
      const auto& b = j.at("betas");
      if (!b.is_array() || b.size() != 2) throw ConfigError("betas must be a pair");
      c.beta1 = b[0].get<double>();
      c.beta2 = b[1].get<double>();
    }
    take(j, "adam_eps", c.adam_eps);
    take(j, "grad_clip", c.grad_clip);
    take(j, "batch", c.batch);
    take(j, "warmup_steps", c.warmup_steps);
    take(j, "total_steps", c.total_steps);
    take(j, "loss_weight_gamma", c.loss_weight_gamma);
    take(j, "nll_weight", c.nll_weight);
    take(j, "seed", c.seed);
    take(j, "precision", c.precision);
    take(j, "threads", c.threads);
    take(j, "scale", c.scale);
    take(j, "crop", c.crop);
    take(j, "gamma_min", c.gamma_min);
    take(j, "gamma_max", c.gamma_max);
    take(j, "checkpoint_every", c.checkpoint_every);
    if (j.contains("flow")) {
      const auto& f = j.at("flow");
      reject_unknown(f, {"levels", "steps_per_level", "hidden"}, "flow");
      take(f, "levels", c.layout.levels);
      take(f, "steps_per_level", c.layout.steps_per_level);
      take(f, "hidden", c.layout.hidden);
    }
    if (j.contains("encoder")) {
      const auto& e = j.at("encoder");
      reject_unknown(e, {"width", "stages", "blocks", "window", "heads"}, "encoder");
      take(e, "width", c.encoder.width);
      take(e, "stages", c.encoder.stages);
      take(e, "blocks", c.encoder.blocks);
      take(e, "window", c.encoder.window);
      take(e, "heads", c.encoder.heads);
    }
  } catch (const json::exception& e) {
    throw ConfigError(std::string("bad config value: ") + e.what());
  }
  c.validate();
  return c;
}

double lr_at(const TrainConfig& cfg, std::int64_t step) {
  if (cfg.warmup_steps <= 0 || step >= cfg.warmup_steps) return cfg.lr;
  return cfg.lr * static_cast<double>(std::max<std::int64_t>(step, 0)) / cfg.warmup_steps;
}

// ---- model bundle ----

template <Real T>
SrModel<T> SrModel<T>::make(const FlowLayout& layout, int scale, const EncoderConfig& enc, std::uint64_t seed) {
  SrModel m;
  m.flow = FlowModel<T>(layout, FlowInit{derive_seed(seed, "flow"), false});
  m.encoder = Encoder<T>(layout, scale, enc, seed);
  return m;
}

template <Real T>
ParamRefs<T> SrModel<T>::params() {
  auto p = flow.params("flow");
  auto e = encoder.params("encoder");
  p.insert(p.end(), e.begin(), e.end());
  return p;
}

template <Real T>
SrModel<T> SrModel<T>::resized(std::int64_t lr_h, std::int64_t lr_w) const {
  FlowLayout l = layout();
  l.hr_h = static_cast<int>(lr_h * scale());
  l.hr_w = static_cast<int>(lr_w * scale());
  if (l == layout()) return *this;
  auto out = make(l, scale(), encoder.config(), 0);
  SrModel src = *this;
  auto dst = out.params();
  copy_params<T, T>(src.params(), dst);
  return out;
}

// ---- losses ----

template <Real T>
Tensor<T> l1_branch(const SrModel<T>& model, const CondFeatures<T>& f, const Tensor<T>& y) {
  auto z = encoder_prior_mean(f, model.layout(), model.scale());
  auto y_hat = flow_inverse(z, f.per_level, model.flow);
  return ops::mean(ops::abs(ops::sub(y_hat, y)));
}

template <Real T>
LossParts<T> total_loss(const SrModel<T>& model, const Tensor<T>& x, const Tensor<T>& y, Rng& rng, double nll_weight,
                        double gamma) {
  if (nll_weight == 0 && gamma == 0) throw ConfigError("total_loss: both weights are zero");
  const auto f = model.encoder.forward(x);
  LossParts<T> parts;
  parts.nll = std::numeric_limits<double>::quiet_NaN();
  parts.l1 = std::numeric_limits<double>::quiet_NaN();
  if (nll_weight != 0) {
    const auto fr = flow_forward(y, f.per_level, model.flow);
    const auto enc_mean = encoder_prior_mean(f, model.layout(), model.scale());
    const auto cr_mean = rearrange_to_pyramid(cr_map(y.detach()), model.layout());
    const auto mean = select_prior_mean(enc_mean, cr_mean, rng);
    auto n = nll(fr.z, fr.logdet, mean);
    parts.nll = static_cast<double>(n.item());
    parts.total = nll_weight == 1 ? n : ops::mul_scalar(n, static_cast<T>(nll_weight));
  }
  if (gamma != 0) {
    auto l = l1_branch(model, f, y);
    parts.l1 = static_cast<double>(l.item());
    auto term = ops::mul_scalar(l, static_cast<T>(gamma));
    parts.total = parts.total.defined() ? ops::add(parts.total, term) : term;
  }
  return parts;
}

// ---- Adam ----

template <Real T>
double adam_step(ParamRefs<T>& params, const Gradients<T>& grads, AdamState<T>& state, double lr_t,
                 const AdamHyper& hyper) {
  std::vector<Tensor<T>> g(params.size());
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!params[i].trainable) continue;
    g[i] = grads.of(*params[i].tensor);
    for (T v : g[i].data()) {
      if (!std::isfinite(v)) throw NumericError("adam_step: non-finite gradient in " + params[i].name);
    }
  }
  double sq = 0.0;
  for (const auto& gi : g)
    for (T v : gi.data()) sq += static_cast<double>(v) * v;
  const double norm = std::sqrt(sq);
  const double scale = hyper.clip_norm > 0 && norm > hyper.clip_norm ? hyper.clip_norm / norm : 1.0;
  ++state.step;
  const double c1 = 1.0 - std::pow(hyper.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(hyper.beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!params[i].trainable) continue;
    auto w = params[i].tensor->mutable_data();
    auto& m = state.m[params[i].name];
    auto& v = state.v[params[i].name];
    if (m.size() != w.size()) m.assign(w.size(), T(0));
    if (v.size() != w.size()) v.assign(w.size(), T(0));
    const auto gd = g[i].data();
    for (std::size_t k = 0; k < w.size(); ++k) {
      const double gk = gd[k] * scale;
      const double mk = hyper.beta1 * m[k] + (1.0 - hyper.beta1) * gk;
      const double vk = hyper.beta2 * v[k] + (1.0 - hyper.beta2) * gk * gk;
      m[k] = static_cast<T>(mk);
      v[k] = static_cast<T>(vk);
      const double update = lr_t * (mk / c1) / (std::sqrt(vk / c2) + hyper.eps);
      w[k] = static_cast<T>(w[k] - update);
    }
  }
  return norm;
}

template <Real T>
bool grads_finite(const ParamRefs<T>& params, const Gradients<T>& grads) {
  for (const auto& p : params) {
    if (!p.trainable) continue;
    const auto g = grads.of(*p.tensor);
    for (T v : g.data())
      if (!std::isfinite(v)) return false;
  }
  return true;
}

// ---- data ----

namespace {

TensorD quantize8(const TensorD& t) {
  std::vector<double> v(t.data().begin(), t.data().end());
  for (auto& e : v) e = std::lround(std::clamp(e, 0.0, 1.0) * 255.0) / 255.0;
  return TensorD(t.shape(), std::move(v));
}

}  // namespace

PairSet load_pairs(const std::filesystem::path& dir, double gamma_min, double gamma_max) {
  const auto manifest = dir / "manifest.json";
  std::ifstream in(manifest);
  if (!in) throw IoError("no manifest.json in " + dir.string());
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw IoError("malformed manifest " + manifest.string() + ": " + e.what());
  }
  PairSet out;
  out.scale = j.value("scale", 2);
  for (const auto& e : read_manifest(manifest)) {
    if (e.scale != out.scale) throw ShapeError("pair " + e.id + " has scale " + std::to_string(e.scale));
    if (e.params.gamma < gamma_min || e.params.gamma > gamma_max) continue;
    auto lr = read_png(dir / (e.id + "_lr.png"));
    auto hr = read_png(dir / (e.id + "_hr.png"));
    if (hr.dim(2) != lr.dim(2) * out.scale || hr.dim(3) != lr.dim(3) * out.scale) {
      throw ShapeError("pair " + e.id + ": HR " + to_string(hr.shape()) + " is not scale x LR " + to_string(lr.shape()));
    }
    out.lr.push_back(std::move(lr));
    out.hr.push_back(std::move(hr));
    out.ids.push_back(e.id);
  }
  return out;
}

PairSet synthetic_pairs(const DatasetOptions& opts) {
  if (!opts.in_dir.empty()) throw DomainError("synthetic_pairs: only procedural scenes are supported");
  const int scale = opts.cfg.scale;
  const std::int64_t unit = opts.cfg.mosaic ? 2 * scale : scale;
  if (opts.scene_size % unit != 0) throw ShapeError("synthetic_pairs: scene size not a multiple of " + std::to_string(unit));
  PairSet out;
  out.scale = scale;
  for (int i = 0; i < opts.count; ++i) {
    Rng scene_rng(derive_seed(opts.seed, "scene", static_cast<std::uint64_t>(i)));
    auto hr = procedural_scene(scene_rng, opts.scene_size, opts.scene_size);
    Rng rng(derive_seed(opts.seed, "pair", static_cast<std::uint64_t>(i)));
    auto pair = degrade_pair(hr, opts.cfg, rng);
    char id[16];
    std::snprintf(id, sizeof id, "%05d", i);
    out.lr.push_back(quantize8(pair.lr));
    out.hr.push_back(quantize8(pair.hr));
    out.ids.emplace_back(id);
  }
  return out;
}

template <Real T>
std::pair<Tensor<T>, Tensor<T>> sample_batch(const PairSet& data, int batch, int crop, Rng& rng) {
  if (data.size() == 0) throw ShapeError("sample_batch: empty dataset");
  const int s = data.scale;
  if (crop % s != 0) throw ShapeError("sample_batch: crop not divisible by scale");
  const std::int64_t lc = crop / s;
  std::vector<T> xs, ys;
  xs.reserve(static_cast<std::size_t>(batch) * 3 * lc * lc);
  ys.reserve(static_cast<std::size_t>(batch) * 3 * crop * crop);
  for (int b = 0; b < batch; ++b) {
    const auto idx = rng.below(data.size());
    const auto& hr = data.hr[idx];
    const auto& lr = data.lr[idx];
    const std::int64_t lh = lr.dim(2), lw = lr.dim(3);
    if (lh < lc || lw < lc) throw ShapeError("sample_batch: pair " + data.ids[idx] + " smaller than the crop");
    const auto oy = static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(lh - lc + 1)));
    const auto ox = static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(lw - lc + 1)));
    const auto hv = hr.data();
    const auto lv = lr.data();
    const std::int64_t hh = hr.dim(2), hw = hr.dim(3);
    for (int c = 0; c < 3; ++c)
      for (std::int64_t y = 0; y < lc; ++y)
        for (std::int64_t x = 0; x < lc; ++x) xs.push_back(static_cast<T>(lv[(c * lh + oy + y) * lw + ox + x]));
    for (int c = 0; c < 3; ++c)
      for (std::int64_t y = 0; y < crop; ++y)
        for (std::int64_t x = 0; x < crop; ++x)
          ys.push_back(static_cast<T>(hv[(c * hh + oy * s + y) * hw + ox * s + x]));
  }
  return {Tensor<T>({batch, 3, lc, lc}, std::move(xs)), Tensor<T>({batch, 3, crop, crop}, std::move(ys))};
}

// ---- checkpoint container ----

namespace {

constexpr char kMagic[4] = {'L', 'L', 'S', 'F'};

template <class V>
void put_raw(std::ostream& out, V v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof v);
}

template <class V>
V get_raw(std::istream& in) {
  V v{};
  in.read(reinterpret_cast<char*>(&v), sizeof v);
  if (!in) throw CheckpointError("truncated checkpoint");
  return v;
}

std::string get_string(std::istream& in, std::uint64_t n) {
  if (n > (1ULL << 31)) throw CheckpointError("corrupt checkpoint: string length");
  std::string s(n, '\0');
  in.read(s.data(), static_cast<std::streamsize>(n));
  if (!in) throw CheckpointError("truncated checkpoint");
  return s;
}

}  // namespace

const CheckpointEntry* Checkpoint::find(const std::string& name) const {
  for (const auto& e : entries)
    if (e.name == name) return &e;
  return nullptr;
}

template <Real T>
void Checkpoint::put(const std::string& name, const Tensor<T>& t) {
  put(name, t.shape(), std::vector<T>(t.data().begin(), t.data().end()));
}

template <Real T>
void Checkpoint::put(const std::string& name, const Shape& shape, const std::vector<T>& values) {
  if (numel_of(shape) != static_cast<std::int64_t>(values.size())) throw ShapeError("Checkpoint::put: size mismatch");
  CheckpointEntry e;
  e.name = name;
  e.dtype = std::is_same_v<T, float> ? 0 : 1;
  e.shape = shape;
  e.values.assign(values.begin(), values.end());
  entries.push_back(std::move(e));
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  static_assert(std::endian::native == std::endian::little, "checkpoint writer assumes little-endian");
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw CheckpointError("cannot write " + tmp);
    out.write(kMagic, 4);
    put_raw<std::uint32_t>(out, kCheckpointVersion);
    put_raw<std::uint64_t>(out, ckpt.meta_json.size());
    out.write(ckpt.meta_json.data(), static_cast<std::streamsize>(ckpt.meta_json.size()));
    put_raw<std::uint64_t>(out, ckpt.entries.size());
    for (const auto& e : ckpt.entries) {
      put_raw<std::uint32_t>(out, static_cast<std::uint32_t>(e.name.size()));
      out.write(e.name.data(), static_cast<std::streamsize>(e.name.size()));
      put_raw<std::uint8_t>(out, e.dtype);
      put_raw<std::uint32_t>(out, static_cast<std::uint32_t>(e.shape.size()));
      for (auto d : e.shape) put_raw<std::int64_t>(out, d);
      for (double v : e.values) {
        if (e.dtype == 0)
          put_raw<float>(out, static_cast<float>(v));
        else
          put_raw<double>(out, v);
      }
    }
    if (!out) throw CheckpointError("write failed: " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open " + path.string());
  char magic[4];
  in.read(magic, 4);
  if (!in || !std::equal(magic, magic + 4, kMagic)) throw CheckpointError(path.string() + " is not an LLSF checkpoint");
  const auto version = get_raw<std::uint32_t>(in);
  if (version != kCheckpointVersion) {
    throw CheckpointError("unsupported checkpoint version " + std::to_string(version));
  }
  Checkpoint ckpt;
  ckpt.meta_json = get_string(in, get_raw<std::uint64_t>(in));
  const auto count = get_raw<std::uint64_t>(in);
  for (std::uint64_t i = 0; i < count; ++i) {
    CheckpointEntry e;
    e.name = get_string(in, get_raw<std::uint32_t>(in));
    e.dtype = get_raw<std::uint8_t>(in);
    if (e.dtype > 1) throw CheckpointError("unknown dtype in entry " + e.name);
    const auto rank = get_raw<std::uint32_t>(in);
    if (rank > 8) throw CheckpointError("corrupt rank in entry " + e.name);
    for (std::uint32_t r = 0; r < rank; ++r) {
      const auto d = get_raw<std::int64_t>(in);
      if (d < 0 || d > (1LL << 32)) throw CheckpointError("corrupt shape in entry " + e.name);
      e.shape.push_back(d);
    }
    const auto n = numel_of(e.shape);
    e.values.resize(static_cast<std::size_t>(n));
    for (auto& v : e.values) v = e.dtype == 0 ? static_cast<double>(get_raw<float>(in)) : get_raw<double>(in);
    ckpt.entries.push_back(std::move(e));
  }
  return ckpt;
}

template <Real T>
void store_params(Checkpoint& ckpt, const ParamRefs<T>& params) {
  for (const auto& p : params) ckpt.put(p.name, *p.tensor);
}

template <Real T>
void restore_params(const Checkpoint& ckpt, ParamRefs<T>& params) {
  for (auto& p : params) {
    const auto* e = ckpt.find(p.name);
    if (!e) throw CheckpointError("checkpoint has no entry " + p.name);
    if (e->shape != p.tensor->shape()) {
      throw CheckpointError("shape mismatch for " + p.name + ": " + to_string(e->shape) + " vs " +
                            to_string(p.tensor->shape()));
    }
    auto d = p.tensor->mutable_data();
    for (std::size_t i = 0; i < d.size(); ++i) d[i] = static_cast<T>(e->values[i]);
  }
}

template <Real T>
void store_adam(Checkpoint& ckpt, const AdamState<T>& state) {
  for (const auto& [name, m] : state.m) ckpt.put("adam.m/" + name, Shape{static_cast<std::int64_t>(m.size())}, m);
  for (const auto& [name, v] : state.v) ckpt.put("adam.v/" + name, Shape{static_cast<std::int64_t>(v.size())}, v);
  ckpt.put("adam.step", Shape{1}, std::vector<double>{static_cast<double>(state.step)});
}

template <Real T>
AdamState<T> restore_adam(const Checkpoint& ckpt, const ParamRefs<T>& params) {
  AdamState<T> s;
  const auto* step = ckpt.find("adam.step");
  if (!step) return s;
  s.step = static_cast<std::int64_t>(step->values.at(0));
  for (const auto& p : params) {
    if (!p.trainable) continue;
    const auto* m = ckpt.find("adam.m/" + p.name);
    const auto* v = ckpt.find("adam.v/" + p.name);
    if (!m || !v) continue;
    if (m->values.size() != static_cast<std::size_t>(p.tensor->numel()) || v->values.size() != m->values.size()) {
      throw CheckpointError("optimizer state size mismatch for " + p.name);
    }
    auto& mm = s.m[p.name];
    auto& vv = s.v[p.name];
    for (double x : m->values) mm.push_back(static_cast<T>(x));
    for (double x : v->values) vv.push_back(static_cast<T>(x));
  }
  return s;
}

template <Real T>
void save_training_state(const std::filesystem::path& path, const TrainConfig& cfg, SrModel<T>& model,
                         const AdamState<T>& adam, std::int64_t step) {
  Checkpoint ckpt;
  json meta{{"format", "LLSF"},
            {"version", kCheckpointVersion},
            {"step", step},
            {"config", json::parse(cfg.to_json())}};
  ckpt.meta_json = meta.dump();
  store_params(ckpt, model.params());
  store_adam(ckpt, adam);
  save_checkpoint(path, ckpt);
}

namespace {

std::pair<TrainConfig, std::int64_t> parse_meta(const Checkpoint& ckpt) {
  try {
    const auto meta = json::parse(ckpt.meta_json);
    return {TrainConfig::from_json(meta.at("config").dump()), meta.at("step").get<std::int64_t>()};
  } catch (const json::exception& e) {
    throw CheckpointError(std::string("bad checkpoint metadata: ") + e.what());
  }
}

}  // namespace

template <Real T>
std::pair<TrainConfig, SrModel<T>> load_model(const std::filesystem::path& path) {
  const auto ckpt = load_checkpoint(path);
  auto [cfg, step] = parse_meta(ckpt);
  auto model = SrModel<T>::make(cfg.train_layout(), cfg.scale, cfg.encoder, cfg.seed);
  auto p = model.params();
  restore_params(ckpt, p);
  return {cfg, model};
}

// ---- loop ----

template <Real T>
TrainResult<T> train_loop(const TrainConfig& cfg, const PairSet& data, const TrainOptions& opts) {
  cfg.validate();
  if (data.size() == 0) throw ShapeError("train_loop: no training pairs");
  if (data.scale != cfg.scale) {
    throw ShapeError("train_loop: data scale " + std::to_string(data.scale) + " but config scale " +
                     std::to_string(cfg.scale));
  }
  TrainResult<T> r;
  r.model = SrModel<T>::make(cfg.train_layout(), cfg.scale, cfg.encoder, cfg.seed);
  auto params = r.model.params();
  if (!opts.resume.empty()) {
    const auto ckpt = load_checkpoint(opts.resume);
    auto [saved, step] = parse_meta(ckpt);
    if (saved.train_layout() != cfg.train_layout() || saved.scale != cfg.scale || saved.encoder != cfg.encoder) {
      throw ShapeError("train_loop: checkpoint layout does not match the config");
    }
    restore_params(ckpt, params);
    r.adam = restore_adam(ckpt, params);
    r.step = step;
  }

  std::ofstream log;
  if (!opts.log_csv.empty()) {
    if (opts.log_csv.has_parent_path()) std::filesystem::create_directories(opts.log_csv.parent_path());
    const bool append = !opts.resume.empty() && std::filesystem::exists(opts.log_csv);
    log.open(opts.log_csv, append ? std::ios::app : std::ios::trunc);
    if (!log) throw IoError("cannot write " + opts.log_csv.string());
    if (!append) log << "step,lr,nll,l1,total\n";
  }

  const AdamHyper hyper{cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.grad_clip};
  const std::int64_t last = opts.stop_after > 0 ? std::min<std::int64_t>(opts.stop_after, cfg.total_steps) : cfg.total_steps;
  for (std::int64_t step = r.step + 1; step <= last; ++step) {
    Rng batch_rng(derive_seed(cfg.seed, "batch", static_cast<std::uint64_t>(step)));
    auto [x, y] = sample_batch<T>(data, cfg.batch, cfg.crop, batch_rng);
    if (!r.model.flow.actnorm_initialized()) {
      const auto f = r.model.encoder.forward(x);
      flow_data_init(y, f.per_level, r.model.flow);
    }
    const double lr_t = lr_at(cfg, step);
    Rng prior_rng(derive_seed(cfg.seed, "prior", static_cast<std::uint64_t>(step)));
    const double nan = std::numeric_limits<double>::quiet_NaN();
    TrainLogRow row{step, lr_t, nan, nan, nan};
    try {
      LossParts<T> parts;
      Gradients<T> grads;
      {
        Tape<T> tape;
        parts = total_loss(r.model, x, y, prior_rng, cfg.nll_weight, cfg.loss_weight_gamma);
        grads = tape.backward(parts.total);
      }
      row.nll = parts.nll;
      row.l1 = parts.l1;
      row.total = static_cast<double>(parts.total.item());
      // The inverse branch can overflow in f32 on an unlucky batch.
      row.skipped = !std::isfinite(row.total) || !grads_finite(params, grads);
      if (!row.skipped) row.grad_norm = adam_step(params, grads, r.adam, lr_t, hyper);
    } catch (const NumericError&) {
      row.skipped = true;
      // Usually only the inverse branch overflowed; log the NLL on its own.
      if (cfg.nll_weight > 0) {
        Rng again(derive_seed(cfg.seed, "prior", static_cast<std::uint64_t>(step)));
        try {
          row.nll = total_loss(r.model, x, y, again, cfg.nll_weight, 0.0).nll;
        } catch (const NumericError&) {
        }
      }
    }
    if (row.skipped) {
      row.grad_norm = nan;
      if (opts.verbose) std::fprintf(stderr, "step %lld skipped: non-finite loss or gradient\n", static_cast<long long>(step));
    }
    r.log.push_back(row);
    r.step = step;
    if (log) {
      char line[160];
      std::snprintf(line, sizeof line, "%lld,%.9g,%.9g,%.9g,%.9g\n", static_cast<long long>(step), row.lr, row.nll,
                    row.l1, row.total);
      log << line;
    }
    if (opts.verbose && (step % 50 == 0 || step == 1)) {
      std::fprintf(stderr, "step %lld lr %.3g nll %.5f l1 %.5f total %.5f |g| %.3g\n", static_cast<long long>(step),
                   row.lr, row.nll, row.l1, row.total, row.grad_norm);
    }
    if (!opts.checkpoint_out.empty() && cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0 && step != last) {
      save_training_state(opts.checkpoint_out, cfg, r.model, r.adam, step);
    }
  }
  if (!opts.checkpoint_out.empty()) save_training_state(opts.checkpoint_out, cfg, r.model, r.adam, r.step);
  return r;
}

template <Real T>
Tensor<T> infer(const SrModel<T>& model, const Tensor<T>& x) {
  if (x.rank() != 4 || x.dim(1) != 3) throw ShapeError("infer: expected [N, 3, h, w], got " + to_string(x.shape()));
  const auto& l = model.layout();
  const bool same = x.dim(2) * model.scale() == l.hr_h && x.dim(3) * model.scale() == l.hr_w;
  const SrModel<T> m = same ? model : model.resized(x.dim(2), x.dim(3));
  const auto f = m.encoder.forward(x.detach());
  const auto z = encoder_prior_mean(f, m.layout(), m.scale());
  const auto y = flow_inverse(z, f.per_level, m.flow);
  std::vector<T> v(y.data().begin(), y.data().end());
  for (auto& e : v) e = std::clamp(e, T(0), T(1));
  return Tensor<T>(y.shape(), std::move(v));
}

#define CRFLOW_TRAIN_INSTANTIATE(T)                                                                              \
  template struct SrModel<T>;                                                                                    \
  template Tensor<T> l1_branch(const SrModel<T>&, const CondFeatures<T>&, const Tensor<T>&);                     \
  template LossParts<T> total_loss(const SrModel<T>&, const Tensor<T>&, const Tensor<T>&, Rng&, double, double); \
  template double adam_step(ParamRefs<T>&, const Gradients<T>&, AdamState<T>&, double, const AdamHyper&);         \
  template std::pair<Tensor<T>, Tensor<T>> sample_batch<T>(const PairSet&, int, int, Rng&);                     \
  template void Checkpoint::put(const std::string&, const Tensor<T>&);                                           \
  template void Checkpoint::put(const std::string&, const Shape&, const std::vector<T>&);                        \
  template void store_params(Checkpoint&, const ParamRefs<T>&);                                                  \
  template void restore_params(const Checkpoint&, ParamRefs<T>&);                                                \
  template void store_adam(Checkpoint&, const AdamState<T>&);                                                    \
  template AdamState<T> restore_adam(const Checkpoint&, const ParamRefs<T>&);                                    \
  template void save_training_state(const std::filesystem::path&, const TrainConfig&, SrModel<T>&,               \
                                    const AdamState<T>&, std::int64_t);                                          \
  template std::pair<TrainConfig, SrModel<T>> load_model<T>(const std::filesystem::path&);                      \
  template TrainResult<T> train_loop<T>(const TrainConfig&, const PairSet&, const TrainOptions&);               \
  template Tensor<T> infer(const SrModel<T>&, const Tensor<T>&);

CRFLOW_TRAIN_INSTANTIATE(float)
CRFLOW_TRAIN_INSTANTIATE(double)

}  // namespace crflow
