#include "crflow/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <json.hpp>
#include <map>

#include "crflow/image_io.hpp"

namespace crflow {

namespace {

constexpr int kWin = 11;
constexpr double kSigma = 1.5;
constexpr double kC1 = 0.01 * 0.01;
constexpr double kC2 = 0.03 * 0.03;

void check_pair(const TensorD& a, const TensorD& b, const char* who) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(who) + ": shapes differ, " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  }
}

std::array<double, kWin> gaussian_1d() {
  std::array<double, kWin> g{};
  double s = 0;
  for (int i = 0; i < kWin; ++i) {
    const double d = i - kWin / 2;
    g[i] = std::exp(-d * d / (2 * kSigma * kSigma));
    s += g[i];
  }
  for (auto& v : g) v /= s;
  return g;
}

// Valid-mode separable filtering of one plane.
std::vector<double> filter_valid(const double* p, std::int64_t h, std::int64_t w, const std::array<double, kWin>& g) {
  const auto ow = w - kWin + 1, oh = h - kWin + 1;
  std::vector<double> mid(static_cast<std::size_t>(h * ow));
  for (std::int64_t y = 0; y < h; ++y)
    for (std::int64_t x = 0; x < ow; ++x) {
      double s = 0;
      for (int k = 0; k < kWin; ++k) s += g[k] * p[y * w + x + k];
      mid[y * ow + x] = s;
    }
  std::vector<double> out(static_cast<std::size_t>(oh * ow));
  for (std::int64_t y = 0; y < oh; ++y)
    for (std::int64_t x = 0; x < ow; ++x) {
      double s = 0;
      for (int k = 0; k < kWin; ++k) s += g[k] * mid[(y + k) * ow + x];
      out[y * ow + x] = s;
    }
  return out;
}

std::string pair_key(const std::filesystem::path& p) {
  auto stem = p.stem().string();
  for (const char* suffix : {"_pred", "_hr", "_lr"}) {
    const std::string s(suffix);
    if (stem.size() > s.size() && stem.compare(stem.size() - s.size(), s.size(), s) == 0) {
      return stem.substr(0, stem.size() - s.size());
    }
  }
  return stem;
}

}  // namespace

double psnr(const TensorD& a, const TensorD& b, double peak) {
  check_pair(a, b, "psnr");
  if (peak <= 0) throw DomainError("psnr: peak must be positive");
  if (a.numel() == 0) throw ShapeError("psnr: empty images");
  auto x = a.data();
  auto y = b.data();
  double se = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double d = x[i] - y[i];
    se += d * d;
  }
  const double mse = se / static_cast<double>(x.size());
  if (mse == 0) return kPsnrCap;
  return std::min(kPsnrCap, 10.0 * std::log10(peak * peak / mse));
}

TensorD luminance(const TensorD& rgb) {
  if (rgb.rank() != 4 || (rgb.dim(1) != 3 && rgb.dim(1) != 1)) {
    throw ShapeError("luminance: expected [N, 1 or 3, H, W], got " + to_string(rgb.shape()));
  }
  if (rgb.dim(1) == 1) return rgb;
  const auto n = rgb.dim(0), hw = rgb.dim(2) * rgb.dim(3);
  auto in = rgb.data();
  std::vector<double> out(static_cast<std::size_t>(n * hw));
  for (std::int64_t i = 0; i < n; ++i)
    for (std::int64_t p = 0; p < hw; ++p) {
      const double* s = in.data() + i * 3 * hw + p;
      out[i * hw + p] = 0.299 * s[0] + 0.587 * s[hw] + 0.114 * s[2 * hw];
    }
  return TensorD({n, 1, rgb.dim(2), rgb.dim(3)}, std::move(out));
}

double ssim(const TensorD& a, const TensorD& b) {
  check_pair(a, b, "ssim");
  const auto la = luminance(a), lb = luminance(b);
  const auto n = la.dim(0), h = la.dim(2), w = la.dim(3);
  if (h < kWin || w < kWin) throw ShapeError("ssim: image smaller than the 11x11 window");
  static const auto g = gaussian_1d();
  std::vector<double> xx(static_cast<std::size_t>(h * w)), yy(xx.size()), xy(xx.size());
  double total = 0;
  for (std::int64_t i = 0; i < n; ++i) {
    const double* x = la.data().data() + i * h * w;
    const double* y = lb.data().data() + i * h * w;
    for (std::int64_t p = 0; p < h * w; ++p) {
      xx[p] = x[p] * x[p];
      yy[p] = y[p] * y[p];
      xy[p] = x[p] * y[p];
    }
    const auto mx = filter_valid(x, h, w, g), my = filter_valid(y, h, w, g);
    const auto sxx = filter_valid(xx.data(), h, w, g), syy = filter_valid(yy.data(), h, w, g),
               sxy = filter_valid(xy.data(), h, w, g);
    double s = 0;
    for (std::size_t k = 0; k < mx.size(); ++k) {
      const double vx = sxx[k] - mx[k] * mx[k], vy = syy[k] - my[k] * my[k], cxy = sxy[k] - mx[k] * my[k];
      s += ((2 * mx[k] * my[k] + kC1) * (2 * cxy + kC2)) /
           ((mx[k] * mx[k] + my[k] * my[k] + kC1) * (vx + vy + kC2));
    }
    total += s / static_cast<double>(mx.size());
  }
  return total / static_cast<double>(n);
}

void MetricReport::add(ImageScore s) {
  per_image.push_back(std::move(s));
  double p = 0, q = 0;
  for (const auto& e : per_image) {
    p += e.psnr_db;
    q += e.ssim;
  }
  psnr_db = p / static_cast<double>(per_image.size());
  ssim = q / static_cast<double>(per_image.size());
}

std::string MetricReport::to_json() const {
  nlohmann::json j;
  j["psnr_db"] = psnr_db;
  j["ssim"] = ssim;
  j["count"] = per_image.size();
  j["per_image"] = nlohmann::json::array();
  for (const auto& e : per_image) j["per_image"].push_back({{"name", e.name}, {"psnr_db", e.psnr_db}, {"ssim", e.ssim}});
  return j.dump(2);
}

MetricReport evaluate_dirs(const std::filesystem::path& pred, const std::filesystem::path& gt) {
  namespace fs = std::filesystem;
  for (const auto& d : {pred, gt}) {
    if (!fs::is_directory(d)) throw IoError("not a directory: " + d.string());
  }
  std::map<std::string, fs::path> truth;
  for (const auto& e : fs::directory_iterator(gt)) {
    if (e.path().extension() != ".png" || e.path().stem().string().ends_with("_lr")) continue;
    const auto key = pair_key(e.path());
    // An exact "_hr" file wins over an ambiguous bare name.
    if (!truth.count(key) || e.path().stem().string().ends_with("_hr")) truth[key] = e.path();
  }
  std::vector<fs::path> preds;
  for (const auto& e : fs::directory_iterator(pred)) {
    if (e.path().extension() == ".png" && !e.path().stem().string().ends_with("_lr")) preds.push_back(e.path());
  }
  std::sort(preds.begin(), preds.end());
  MetricReport r;
  for (const auto& p : preds) {
    auto it = truth.find(pair_key(p));
    if (it == truth.end()) throw IoError("no ground truth for " + p.filename().string());
    auto a = read_png(p);
    auto b = read_png(it->second);
    r.add({p.filename().string(), psnr(a, b), ssim(a, b)});
  }
  if (r.per_image.empty()) throw IoError("no prediction PNGs in " + pred.string());
  return r;
}

}  // namespace crflow
