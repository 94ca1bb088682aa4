#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <json.hpp>

#include "crflow/image_io.hpp"
#include "crflow/metrics.hpp"
#include "crflow/random_tensor.hpp"

using namespace crflow;
namespace fs = std::filesystem;

namespace {

// Direct SSIM: explicit 11x11 window sums at every valid position.
double ssim_oracle(const std::vector<double>& x, const std::vector<double>& y, int h, int w) {
  double g[11][11], gs = 0;
  for (int i = 0; i < 11; ++i)
    for (int j = 0; j < 11; ++j) {
      g[i][j] = std::exp(-((i - 5) * (i - 5) + (j - 5) * (j - 5)) / (2 * 1.5 * 1.5));
      gs += g[i][j];
    }
  double total = 0;
  int count = 0;
  for (int y0 = 0; y0 + 11 <= h; ++y0)
    for (int x0 = 0; x0 + 11 <= w; ++x0) {
      double mx = 0, my = 0;
      for (int i = 0; i < 11; ++i)
        for (int j = 0; j < 11; ++j) {
          const double wt = g[i][j] / gs;
          mx += wt * x[(y0 + i) * w + x0 + j];
          my += wt * y[(y0 + i) * w + x0 + j];
        }
      double vx = 0, vy = 0, c = 0;
      for (int i = 0; i < 11; ++i)
        for (int j = 0; j < 11; ++j) {
          const double wt = g[i][j] / gs;
          const double dx = x[(y0 + i) * w + x0 + j] - mx, dy = y[(y0 + i) * w + x0 + j] - my;
          vx += wt * dx * dx;
          vy += wt * dy * dy;
          c += wt * dx * dy;
        }
      total += ((2 * mx * my + 1e-4) * (2 * c + 9e-4)) / ((mx * mx + my * my + 1e-4) * (vx + vy + 9e-4));
      ++count;
    }
  return total / count;
}

}  // namespace

TEST(Psnr, ConstantOffset) {
  Rng rng(1);
  auto a = random_uniform<double>({1, 3, 8, 8}, rng, 0.0, 0.5);
  std::vector<double> v(a.data().begin(), a.data().end());
  for (auto& e : v) e += 0.1;
  EXPECT_NEAR(psnr(a, TensorD(a.shape(), v)), 20.0, 1e-9);
}

TEST(Psnr, IdenticalIsCapped) {
  Rng rng(2);
  auto a = random_uniform<double>({1, 3, 8, 8}, rng);
  EXPECT_EQ(psnr(a, a), 100.0);
}

TEST(Psnr, FormulaOracleAndSymmetry) {
  Rng rng(3);
  auto a = random_uniform<double>({2, 3, 7, 5}, rng);
  auto b = random_uniform<double>({2, 3, 7, 5}, rng);
  long double se = 0;
  for (std::size_t i = 0; i < a.data().size(); ++i) {
    const long double d = static_cast<long double>(a.data()[i]) - b.data()[i];
    se += d * d;
  }
  const double oracle = static_cast<double>(10.0L * std::log10(1.0L / (se / a.data().size())));
  EXPECT_NEAR(psnr(a, b), oracle, 1e-9);
  EXPECT_EQ(psnr(a, b), psnr(b, a));
  EXPECT_NEAR(psnr(a, b, 2.0), oracle + 20 * std::log10(2.0), 1e-9);
}

TEST(Psnr, DecreasesWithNoise) {
  Rng rng(4);
  auto a = random_uniform<double>({1, 3, 16, 16}, rng);
  auto noise = random_normal<double>({1, 3, 16, 16}, rng);
  double prev = 1e9;
  for (double amp : {0.01, 0.02, 0.05, 0.1, 0.2}) {
    std::vector<double> v(a.data().begin(), a.data().end());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] += amp * noise.data()[i];
    const double p = psnr(a, TensorD(a.shape(), v));
    EXPECT_LT(p, prev);
    prev = p;
  }
}

TEST(Psnr, PixelPermutationInvariant) {
  Rng rng(5);
  auto a = random_uniform<double>({1, 1, 6, 6}, rng);
  auto b = random_uniform<double>({1, 1, 6, 6}, rng);
  std::vector<double> pa(a.data().rbegin(), a.data().rend()), pb(b.data().rbegin(), b.data().rend());
  EXPECT_NEAR(psnr(a, b), psnr(TensorD(a.shape(), pa), TensorD(b.shape(), pb)), 1e-12);
}

TEST(Psnr, RejectsShapeMismatch) { EXPECT_THROW(psnr(TensorD::zeros({1, 3, 4, 4}), TensorD::zeros({1, 3, 4, 5})), ShapeError); }

TEST(Ssim, IdenticalIsOne) {
  Rng rng(6);
  auto a = random_uniform<double>({2, 3, 16, 20}, rng);
  EXPECT_NEAR(ssim(a, a), 1.0, 1e-9);
}

TEST(Ssim, ConstantPairClosedForm) {
  const double expect = (2 * 0.24 + 1e-4) / (0.16 + 0.36 + 1e-4);
  EXPECT_NEAR(ssim(TensorD::full({1, 3, 16, 16}, 0.4), TensorD::full({1, 3, 16, 16}, 0.6)), expect, 1e-6);
  EXPECT_NEAR(expect, 0.923, 1e-3);
}

TEST(Ssim, InvertedCheckerboardIsNegative) {
  std::vector<double> a(256), b(256);
  for (int y = 0; y < 16; ++y)
    for (int x = 0; x < 16; ++x) {
      a[y * 16 + x] = (x + y) % 2 ? 0.9 : 0.1;
      b[y * 16 + x] = 1.0 - a[y * 16 + x];
    }
  const double s = ssim(TensorD({1, 1, 16, 16}, a), TensorD({1, 1, 16, 16}, b));
  EXPECT_LT(s, 0.0);
  EXPECT_NEAR(s, ssim_oracle(a, b, 16, 16), 1e-9);
}

TEST(Ssim, MatchesWindowOracle) {
  Rng rng(7);
  auto a = random_uniform<double>({1, 1, 14, 17}, rng);
  auto b = random_uniform<double>({1, 1, 14, 17}, rng);
  std::vector<double> va(a.data().begin(), a.data().end()), vb(b.data().begin(), b.data().end());
  EXPECT_NEAR(ssim(a, b), ssim_oracle(va, vb, 14, 17), 1e-9);
}

TEST(Ssim, UsesRec601Luminance) {
  Rng rng(8);
  auto a = random_uniform<double>({1, 3, 12, 12}, rng);
  auto b = random_uniform<double>({1, 3, 12, 12}, rng);
  EXPECT_NEAR(ssim(a, b), ssim(luminance(a), luminance(b)), 1e-15);
  EXPECT_NEAR(luminance(TensorD({1, 3, 1, 1}, {1.0, 0.0, 0.0})).item(), 0.299, 1e-15);
}

TEST(Ssim, ShiftedCropsAgree) {
  Rng rng(9);
  auto a = random_uniform<double>({1, 1, 20, 20}, rng);
  auto b = random_uniform<double>({1, 1, 20, 20}, rng);
  auto crop = [](const TensorD& t, int oy, int ox) {
    std::vector<double> v(16 * 16);
    for (int y = 0; y < 16; ++y)
      for (int x = 0; x < 16; ++x) v[y * 16 + x] = t.at({0, 0, y + oy, x + ox});
    return TensorD({1, 1, 16, 16}, v);
  };
  // Same content, cropped at two offsets: the SSIM of a 17x17 overlap region
  // computed both ways must agree.
  auto a0 = crop(a, 0, 0), b0 = crop(b, 0, 0);
  auto a1 = crop(a, 2, 3), b1 = crop(b, 2, 3);
  std::vector<double> va(a0.data().begin(), a0.data().end()), vb(b0.data().begin(), b0.data().end());
  EXPECT_NEAR(ssim(a0, b0), ssim_oracle(va, vb, 16, 16), 1e-9);
  std::vector<double> wa(a1.data().begin(), a1.data().end()), wb(b1.data().begin(), b1.data().end());
  EXPECT_NEAR(ssim(a1, b1), ssim_oracle(wa, wb, 16, 16), 1e-9);
}

TEST(Ssim, RejectsSmallImage) { EXPECT_THROW(ssim(TensorD::zeros({1, 3, 10, 20}), TensorD::zeros({1, 3, 10, 20})), ShapeError); }

TEST(Report, EvaluateDirs) {
  auto base = fs::temp_directory_path() / "crflow_test_eval";
  fs::remove_all(base);
  fs::create_directories(base / "pred");
  fs::create_directories(base / "gt");
  Rng rng(10);
  for (int i = 0; i < 3; ++i) {
    auto gt = random_uniform<double>({1, 3, 16, 16}, rng);
    const auto id = "0000" + std::to_string(i);
    write_png(base / "gt" / (id + "_hr.png"), gt);
    write_png(base / "gt" / (id + "_lr.png"), TensorD::zeros({1, 3, 8, 8}));
    write_png(base / "pred" / (id + "_pred.png"), gt);
  }
  auto r = evaluate_dirs(base / "pred", base / "gt");
  EXPECT_EQ(r.per_image.size(), 3u);
  EXPECT_EQ(r.psnr_db, 100.0);
  EXPECT_NEAR(r.ssim, 1.0, 1e-9);
  auto j = nlohmann::json::parse(r.to_json());
  EXPECT_EQ(j["count"], 3);
  EXPECT_EQ(j["per_image"].size(), 3u);
  fs::remove(base / "gt" / "00001_hr.png");
  EXPECT_THROW(evaluate_dirs(base / "pred", base / "gt"), IoError);
}
