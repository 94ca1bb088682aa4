#include "crflow/degrade.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <fstream>
#include <json.hpp>
#include <numbers>

#include "crflow/image_io.hpp"

namespace crflow {

namespace {

void check_nchw(const TensorD& t, const char* who) {
  if (t.rank() != 4) throw ShapeError(std::string(who) + ": expected NCHW, got " + to_string(t.shape()));
}

double cubic(double x) {
  constexpr double a = -0.5;
  x = std::abs(x);
  if (x <= 1.0) return ((a + 2.0) * x - (a + 3.0)) * x * x + 1.0;
  if (x < 2.0) return ((a * x - 5.0 * a) * x + 8.0 * a) * x - 4.0 * a;
  return 0.0;
}

struct Taps {
  std::vector<std::int64_t> index;
  std::vector<double> weight;
  std::vector<std::size_t> start;  // per output, into index/weight; start[n] is the end
};

Taps resize_taps(std::int64_t in, std::int64_t out) {
  const double ratio = static_cast<double>(in) / static_cast<double>(out);
  const double stretch = std::max(ratio, 1.0);
  const double support = 2.0 * stretch;
  Taps t;
  for (std::int64_t i = 0; i < out; ++i) {
    t.start.push_back(t.index.size());
    const double centre = (static_cast<double>(i) + 0.5) * ratio - 0.5;
    const auto lo = static_cast<std::int64_t>(std::floor(centre - support));
    const auto hi = static_cast<std::int64_t>(std::ceil(centre + support));
    double total = 0.0;
    const auto first = t.weight.size();
    for (std::int64_t j = lo; j <= hi; ++j) {
      const double w = cubic((centre - static_cast<double>(j)) / stretch);
      if (w == 0.0) continue;
      t.index.push_back(std::clamp<std::int64_t>(j, 0, in - 1));
      t.weight.push_back(w);
      total += w;
    }
    for (auto k = first; k < t.weight.size(); ++k) t.weight[k] /= total;
  }
  t.start.push_back(t.index.size());
  return t;
}

// Exact 3x3 inverse through Eigen.
std::array<double, 9> invert3(const std::array<double, 9>& m) {
  Eigen::Matrix3d a;
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c) a(r, c) = m[static_cast<std::size_t>(r * 3 + c)];
  if (std::abs(a.determinant()) < 1e-12) throw DomainError("CCM is singular");
  Eigen::Matrix3d inv = a.inverse();
  std::array<double, 9> out{};
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c) out[static_cast<std::size_t>(r * 3 + c)] = inv(r, c);
  return out;
}

TensorD apply_ccm(const TensorD& x, const std::array<double, 9>& m) {
  const auto n = x.dim(0), hw = x.dim(2) * x.dim(3);
  auto in = x.data();
  std::vector<double> out(in.size());
  for (std::int64_t i = 0; i < n; ++i) {
    const double* s = in.data() + i * 3 * hw;
    double* d = out.data() + i * 3 * hw;
    for (std::int64_t p = 0; p < hw; ++p) {
      const double r = s[p], g = s[hw + p], b = s[2 * hw + p];
      for (int c = 0; c < 3; ++c) d[c * hw + p] = m[c * 3] * r + m[c * 3 + 1] * g + m[c * 3 + 2] * b;
    }
  }
  return TensorD(x.shape(), std::move(out));
}

int bayer_channel(std::int64_t y, std::int64_t x) {
  if (y % 2 == 0) return x % 2 == 0 ? 0 : 1;
  return x % 2 == 0 ? 1 : 2;
}

// Multiplies channel gains (g_r, 1, g_b) on RGB or on a Bayer plane.
TensorD apply_gains(const TensorD& x, double gr, double gb) {
  const auto n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const double gain[3] = {gr, 1.0, gb};
  std::vector<double> out(x.data().begin(), x.data().end());
  for (std::int64_t i = 0; i < n; ++i)
    for (std::int64_t ch = 0; ch < c; ++ch)
      for (std::int64_t y = 0; y < h; ++y)
        for (std::int64_t xx = 0; xx < w; ++xx) {
          const int which = c == 1 ? bayer_channel(y, xx) : static_cast<int>(ch);
          out[((i * c + ch) * h + y) * w + xx] *= gain[which];
        }
  return TensorD(x.shape(), std::move(out));
}

double smoothstep01(double e0, double e1, double v) {
  const double t = std::clamp((v - e0) / (e1 - e0), 0.0, 1.0);
  return t * t * (3.0 - 2.0 * t);
}

}  // namespace

DegradeParams sample_degrade_params(Rng& rng, const DegradeConfig& cfg) {
  if (cfg.gamma_min < kGammaMin || cfg.gamma_max > kGammaMax || cfg.gamma_min > cfg.gamma_max) {
    throw DomainError("sample_degrade_params: gamma range must lie inside [1.5, 5]");
  }
  DegradeParams p;
  p.alpha = rng.uniform(kAlphaMin, kAlphaMax);
  p.beta = rng.uniform(kBetaMin, kBetaMax);
  p.gamma = rng.uniform(cfg.gamma_min, cfg.gamma_max);
  const double log_s = rng.uniform(std::log(kShotVarMin), std::log(kShotVarMax));
  const double log_r = rng.normal(kReadSlope * log_s, kReadStd);
  p.sigma_s_sq = std::exp(log_s);
  p.sigma_r_sq = std::exp(log_r);
  return p;
}

TensorD darken(const TensorD& image, double alpha, double beta, double gamma) {
  if (alpha <= 0 || beta <= 0 || gamma < 1) throw DomainError("darken: need alpha, beta > 0 and gamma >= 1");
  std::vector<double> out(image.data().begin(), image.data().end());
  for (auto& v : out) v = std::clamp(beta * std::pow(std::max(alpha * v, 0.0), gamma), 0.0, 1.0);
  return TensorD(image.shape(), std::move(out));
}

TensorD bicubic_resize(const TensorD& image, std::int64_t out_h, std::int64_t out_w) {
  check_nchw(image, "bicubic_resize");
  if (out_h < 1 || out_w < 1) throw ShapeError("bicubic_resize: empty output");
  const auto nc = image.dim(0) * image.dim(1), h = image.dim(2), w = image.dim(3);
  const auto tx = resize_taps(w, out_w);
  const auto ty = resize_taps(h, out_h);
  auto in = image.data();
  std::vector<double> mid(static_cast<std::size_t>(nc * h * out_w));
  for (std::int64_t c = 0; c < nc; ++c)
    for (std::int64_t y = 0; y < h; ++y) {
      const double* row = in.data() + (c * h + y) * w;
      for (std::int64_t x = 0; x < out_w; ++x) {
        double s = 0;
        for (auto k = tx.start[x]; k < tx.start[x + 1]; ++k) s += tx.weight[k] * row[tx.index[k]];
        mid[(c * h + y) * out_w + x] = s;
      }
    }
  std::vector<double> out(static_cast<std::size_t>(nc * out_h * out_w));
  for (std::int64_t c = 0; c < nc; ++c)
    for (std::int64_t y = 0; y < out_h; ++y)
      for (std::int64_t x = 0; x < out_w; ++x) {
        double s = 0;
        for (auto k = ty.start[y]; k < ty.start[y + 1]; ++k) s += ty.weight[k] * mid[(c * h + ty.index[k]) * out_w + x];
        out[(c * out_h + y) * out_w + x] = s;
      }
  return TensorD({image.dim(0), image.dim(1), out_h, out_w}, std::move(out));
}

TensorD bicubic_down(const TensorD& image, int scale) {
  check_nchw(image, "bicubic_down");
  if (scale < 1 || image.dim(2) % scale != 0 || image.dim(3) % scale != 0) {
    throw ShapeError("bicubic_down: " + to_string(image.shape()) + " not divisible by " + std::to_string(scale));
  }
  return bicubic_resize(image, image.dim(2) / scale, image.dim(3) / scale);
}

TensorD bicubic_up(const TensorD& image, int scale) {
  check_nchw(image, "bicubic_up");
  if (scale < 1) throw ShapeError("bicubic_up: scale must be positive");
  return bicubic_resize(image, image.dim(2) * scale, image.dim(3) * scale);
}

IspParams IspParams::identity() {
  IspParams p;
  p.smoothstep_crf = false;
  return p;
}

IspParams IspParams::standard(double r_gain, double b_gain) {
  IspParams p;
  p.r_gain = r_gain;
  p.b_gain = b_gain;
  p.ccm = {1.6, -0.4, -0.2, -0.3, 1.5, -0.2, 0.0, -0.5, 1.5};
  p.ccm_inv = invert3(p.ccm);
  return p;
}

IspParams sample_isp_params(Rng& rng) {
  const double r = rng.uniform(1.9, 2.4);
  const double b = rng.uniform(1.5, 1.9);
  return IspParams::standard(r, b);
}

double crf_forward(double u) {
  u = std::clamp(u, 0.0, 1.0);
  return u * u * (3.0 - 2.0 * u);
}

double crf_inverse(double v) {
  v = std::clamp(v, 0.0, 1.0);
  return 0.5 - std::sin(std::asin(1.0 - 2.0 * v) / 3.0);
}

TensorD mosaic(const TensorD& rgb) {
  check_nchw(rgb, "mosaic");
  if (rgb.dim(1) != 3) throw ShapeError("mosaic: expected 3 channels");
  const auto n = rgb.dim(0), h = rgb.dim(2), w = rgb.dim(3);
  auto in = rgb.data();
  std::vector<double> out(static_cast<std::size_t>(n * h * w));
  for (std::int64_t i = 0; i < n; ++i)
    for (std::int64_t y = 0; y < h; ++y)
      for (std::int64_t x = 0; x < w; ++x) out[(i * h + y) * w + x] = in[((i * 3 + bayer_channel(y, x)) * h + y) * w + x];
  return TensorD({n, 1, h, w}, std::move(out));
}

TensorD demosaic(const TensorD& bayer) {
  check_nchw(bayer, "demosaic");
  if (bayer.dim(1) != 1) throw ShapeError("demosaic: expected a 1-channel Bayer plane");
  const auto n = bayer.dim(0), h = bayer.dim(2), w = bayer.dim(3);
  static constexpr double kG[3][3] = {{0, 1, 0}, {1, 4, 1}, {0, 1, 0}};
  static constexpr double kRB[3][3] = {{1, 2, 1}, {2, 4, 2}, {1, 2, 1}};
  auto in = bayer.data();
  std::vector<double> out(static_cast<std::size_t>(n * 3 * h * w));
  for (std::int64_t i = 0; i < n; ++i)
    for (int c = 0; c < 3; ++c) {
      const auto& k = c == 1 ? kG : kRB;
      for (std::int64_t y = 0; y < h; ++y)
        for (std::int64_t x = 0; x < w; ++x) {
          double s = 0, wsum = 0;
          for (int dy = -1; dy <= 1; ++dy)
            for (int dx = -1; dx <= 1; ++dx) {
              const auto yy = y + dy, xx = x + dx;
              if (yy < 0 || yy >= h || xx < 0 || xx >= w || bayer_channel(yy, xx) != c) continue;
              s += k[dy + 1][dx + 1] * in[(i * h + yy) * w + xx];
              wsum += k[dy + 1][dx + 1];
            }
          out[((i * 3 + c) * h + y) * w + x] = s / wsum;
        }
    }
  return TensorD({n, 3, h, w}, std::move(out));
}

TensorD unprocess(const TensorD& image, const IspParams& isp, bool use_mosaic, UnprocessStats* stats) {
  check_nchw(image, "unprocess");
  if (image.dim(1) != 3) throw ShapeError("unprocess: expected RGB");
  if (use_mosaic && (image.dim(2) % 2 != 0 || image.dim(3) % 2 != 0)) throw ShapeError("unprocess: odd size with mosaic");
  std::vector<double> lin(image.data().begin(), image.data().end());
  if (isp.smoothstep_crf) {
    for (auto& v : lin) v = crf_inverse(v);
  }
  auto raw = apply_ccm(TensorD(image.shape(), std::move(lin)), isp.ccm_inv);
  if (use_mosaic) raw = mosaic(raw);
  raw = apply_gains(raw, 1.0 / isp.r_gain, 1.0 / isp.b_gain);
  if (stats) {
    for (double v : raw.data()) {
      stats->below_zero += v < 0.0;
      stats->above_one += v > 1.0;
    }
  }
  return raw;
}

TensorD process(const TensorD& raw, const IspParams& isp) {
  check_nchw(raw, "process");
  if (raw.dim(1) != 1 && raw.dim(1) != 3) throw ShapeError("process: expected a Bayer plane or RGB");
  auto x = apply_gains(raw, isp.r_gain, isp.b_gain);
  if (x.dim(1) == 1) x = demosaic(x);
  x = apply_ccm(x, isp.ccm);
  std::vector<double> out(x.data().begin(), x.data().end());
  for (auto& v : out) v = isp.smoothstep_crf ? crf_forward(v) : std::clamp(v, 0.0, 1.0);
  return TensorD(x.shape(), std::move(out));
}

TensorD add_noise(const TensorD& raw, double sigma_s_sq, double sigma_r_sq, Rng& rng) {
  if (sigma_s_sq < 0 || sigma_r_sq < 0) throw DomainError("add_noise: negative variance parameter");
  std::vector<double> out(raw.data().begin(), raw.data().end());
  if (sigma_s_sq == 0 && sigma_r_sq == 0) return TensorD(raw.shape(), std::move(out));
  for (auto& v : out) v += rng.normal() * std::sqrt(std::max(v, 0.0) * sigma_s_sq + sigma_r_sq);
  return TensorD(raw.shape(), std::move(out));
}

TensorD degrade_image(const TensorD& hr, const DegradeParams& p, const IspParams& isp, int scale, bool use_mosaic,
                      Rng& rng, UnprocessStats* stats) {
  check_nchw(hr, "degrade");
  if (hr.dim(2) % (use_mosaic ? 2 * scale : scale) != 0 || hr.dim(3) % (use_mosaic ? 2 * scale : scale) != 0) {
    throw ShapeError("degrade: " + to_string(hr.shape()) + " must be divisible by scale (x2 with mosaic)");
  }
  auto lr = bicubic_down(darken(hr, p.alpha, p.beta, p.gamma), scale);
  std::vector<double> clamped(lr.data().begin(), lr.data().end());
  for (auto& v : clamped) v = std::clamp(v, 0.0, 1.0);
  auto raw = unprocess(TensorD(lr.shape(), std::move(clamped)), isp, use_mosaic, stats);
  return process(add_noise(raw, p.sigma_s_sq, p.sigma_r_sq, rng), isp);
}

DegradedPair degrade_pair(const TensorD& hr, const DegradeConfig& cfg, Rng& rng) {
  DegradedPair out;
  out.hr = hr;
  out.params = cfg.fixed ? *cfg.fixed : sample_degrade_params(rng, cfg);
  out.isp = sample_isp_params(rng);
  out.lr = degrade_image(hr, out.params, out.isp, cfg.scale, cfg.mosaic, rng, &out.stats);
  return out;
}

TensorD procedural_scene(Rng& rng, std::int64_t h, std::int64_t w) {
  auto colour = [&] { return std::array<double, 3>{rng.uniform(0.05, 0.95), rng.uniform(0.05, 0.95), rng.uniform(0.05, 0.95)}; };
  std::vector<double> img(static_cast<std::size_t>(3 * h * w));
  const auto c0 = colour(), c1 = colour();
  const double angle = rng.uniform(0.0, 2.0 * std::numbers::pi);
  const double ca = std::cos(angle), sa = std::sin(angle);
  for (std::int64_t y = 0; y < h; ++y)
    for (std::int64_t x = 0; x < w; ++x) {
      const double u = 0.5 + 0.5 * (ca * (2.0 * x / w - 1.0) + sa * (2.0 * y / h - 1.0)) / std::sqrt(2.0);
      for (int c = 0; c < 3; ++c) img[(c * h + y) * w + x] = (1 - u) * c0[c] + u * c1[c];
    }
  const int shapes = 3 + static_cast<int>(rng.below(4));
  for (int s = 0; s < shapes; ++s) {
    const auto col = colour();
    const bool ellipse = rng.bernoulli(0.5);
    const double cx = rng.uniform(0, w), cy = rng.uniform(0, h);
    const double rx = rng.uniform(0.1, 0.4) * w, ry = rng.uniform(0.1, 0.4) * h;
    const double edge = rng.uniform(0.5, 2.0);
    for (std::int64_t y = 0; y < h; ++y)
      for (std::int64_t x = 0; x < w; ++x) {
        const double dx = (x + 0.5 - cx), dy = (y + 0.5 - cy);
        // Approximate signed distance in pixels, negative inside.
        double d;
        if (ellipse) {
          d = (std::sqrt((dx / rx) * (dx / rx) + (dy / ry) * (dy / ry)) - 1.0) * std::min(rx, ry);
        } else {
          d = std::max(std::abs(dx) - rx, std::abs(dy) - ry);
        }
        const double a = 1.0 - smoothstep01(-edge, edge, d);
        for (int c = 0; c < 3; ++c) {
          auto& v = img[(c * h + y) * w + x];
          v = (1 - a) * v + a * col[c];
        }
      }
  }
  const double fx = rng.uniform(0.2, 1.2), fy = rng.uniform(0.2, 1.2), ph = rng.uniform(0, 6.3);
  const double amp = rng.uniform(0.02, 0.1);
  for (std::int64_t y = 0; y < h; ++y)
    for (std::int64_t x = 0; x < w; ++x) {
      const double t = 1.0 + amp * std::sin(fx * x + fy * y + ph);
      for (int c = 0; c < 3; ++c) {
        auto& v = img[(c * h + y) * w + x];
        v = std::clamp(v * t, 0.0, 1.0);
      }
    }
  return TensorD({1, 3, h, w}, std::move(img));
}

// ------------------------------------------------------------------ dataset

namespace {

nlohmann::json entry_json(const ManifestEntry& e) {
  return {{"id", e.id},
          {"alpha", e.params.alpha},
          {"beta", e.params.beta},
          {"gamma", e.params.gamma},
          {"sigma_s_sq", e.params.sigma_s_sq},
          {"sigma_r_sq", e.params.sigma_r_sq},
          {"r_gain", e.r_gain},
          {"b_gain", e.b_gain},
          {"seed", e.seed},
          {"scale", e.scale},
          {"source", e.source}};
}

TensorD crop_top_left(const TensorD& img, std::int64_t h, std::int64_t w) {
  if (img.dim(2) == h && img.dim(3) == w) return img;
  std::vector<double> out(static_cast<std::size_t>(3 * h * w));
  const auto iw = img.dim(3), ih = img.dim(2);
  auto in = img.data();
  for (int c = 0; c < 3; ++c)
    for (std::int64_t y = 0; y < h; ++y)
      for (std::int64_t x = 0; x < w; ++x) out[(c * h + y) * w + x] = in[(c * ih + y) * iw + x];
  return TensorD({1, 3, h, w}, std::move(out));
}

}  // namespace

DatasetReport generate_dataset(const DatasetOptions& opts) {
  namespace fs = std::filesystem;
  if (opts.count < 0) throw DomainError("generate_dataset: negative count");
  const int scale = opts.cfg.scale;
  if (scale != 2 && scale != 4) throw DomainError("generate_dataset: scale must be 2 or 4");
  const std::int64_t unit = opts.cfg.mosaic ? 2 * scale : scale;
  fs::create_directories(opts.out_dir);
  DatasetReport report;

  std::vector<fs::path> sources;
  if (!opts.in_dir.empty()) {
    if (!fs::is_directory(opts.in_dir)) throw IoError("input directory not found: " + opts.in_dir.string());
    for (const auto& e : fs::directory_iterator(opts.in_dir)) {
      if (e.is_regular_file() && e.path().extension() == ".png") sources.push_back(e.path());
    }
    std::sort(sources.begin(), sources.end());
  } else if (opts.scene_size % unit != 0) {
    throw ShapeError("generate_dataset: scene size must be a multiple of " + std::to_string(unit));
  }
  const int total = opts.in_dir.empty() ? opts.count : std::min<int>(opts.count, static_cast<int>(sources.size()));

  for (int i = 0; i < total; ++i) {
    char id[16];
    std::snprintf(id, sizeof id, "%05d", i);
    TensorD hr;
    std::string source = "procedural";
    if (opts.in_dir.empty()) {
      Rng scene_rng(derive_seed(opts.seed, "scene", static_cast<std::uint64_t>(i)));
      hr = procedural_scene(scene_rng, opts.scene_size, opts.scene_size);
    } else {
      source = sources[static_cast<std::size_t>(i)].filename().string();
      try {
        hr = read_png(sources[static_cast<std::size_t>(i)]);
      } catch (const IoError& e) {
        report.skipped.push_back(source + ": " + e.what());
        continue;
      }
      const auto h = hr.dim(2) / unit * unit, w = hr.dim(3) / unit * unit;
      if (h == 0 || w == 0) {
        report.skipped.push_back(source + ": smaller than " + std::to_string(unit) + " pixels");
        continue;
      }
      hr = crop_top_left(hr, h, w);
    }
    const auto seed = derive_seed(opts.seed, "pair", static_cast<std::uint64_t>(i));
    Rng rng(seed);
    auto pair = degrade_pair(hr, opts.cfg, rng);
    write_png(opts.out_dir / (std::string(id) + "_lr.png"), pair.lr);
    write_png(opts.out_dir / (std::string(id) + "_hr.png"), pair.hr);
    report.entries.push_back({id, pair.params, pair.isp.r_gain, pair.isp.b_gain, seed, scale, source});
  }

  nlohmann::json j;
  j["seed"] = opts.seed;
  j["scale"] = scale;
  j["mosaic"] = opts.cfg.mosaic;
  j["pairs"] = nlohmann::json::array();
  for (const auto& e : report.entries) j["pairs"].push_back(entry_json(e));
  j["skipped"] = report.skipped;
  std::ofstream(opts.out_dir / "manifest.json") << j.dump(2) << '\n';
  return report;
}

std::vector<ManifestEntry> read_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open manifest " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw IoError("malformed manifest " + path.string() + ": " + e.what());
  }
  std::vector<ManifestEntry> out;
  for (const auto& p : j.at("pairs")) {
    ManifestEntry e;
    e.id = p.at("id").get<std::string>();
    e.params = {p.at("alpha"), p.at("beta"), p.at("gamma"), p.at("sigma_s_sq"), p.at("sigma_r_sq")};
    e.r_gain = p.value("r_gain", 1.0);
    e.b_gain = p.value("b_gain", 1.0);
    e.seed = p.at("seed");
    e.scale = p.at("scale");
    e.source = p.value("source", "");
    out.push_back(e);
  }
  return out;
}

}  // namespace crflow
