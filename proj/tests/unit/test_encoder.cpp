#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <cstring>

#include "crflow/crmap.hpp"
#include "crflow/encoder.hpp"
#include "crflow/gradcheck.hpp"
#include "crflow/random_tensor.hpp"
#include "crflow/verify.hpp"

using namespace crflow;
namespace op = crflow::ops;

namespace {

bool bit_identical(const TensorD& a, const TensorD& b) {
  return a.shape() == b.shape() && std::memcmp(a.data().data(), b.data().data(), a.data().size_bytes()) == 0;
}

double max_abs_diff(const TensorD& a, const TensorD& b) {
  EXPECT_EQ(a.shape(), b.shape());
  double m = 0;
  for (std::size_t i = 0; i < a.data().size(); ++i) m = std::max(m, std::abs(a.data()[i] - b.data()[i]));
  return m;
}

FlowLayout layout(int h, int w, int levels = 3) {
  FlowLayout lay;
  lay.hr_h = h;
  lay.hr_w = w;
  lay.levels = levels;
  lay.steps_per_level = 1;
  return lay;
}

void set_identity_1x1(Conv2d<double>& c) {
  auto w = c.weight.mutable_data();
  std::fill(w.begin(), w.end(), 0.0);
  const auto o = c.weight.dim(0), i = c.weight.dim(1);
  for (std::int64_t k = 0; k < std::min(o, i); ++k) w[static_cast<std::size_t>(k * i + k)] = 1.0;
  auto b = c.bias.mutable_data();
  std::fill(b.begin(), b.end(), 0.0);
}

double gelu_ref(double v) {
  const double k = std::sqrt(2.0 / 3.14159265358979323846);
  return 0.5 * v * (1.0 + std::tanh(k * (v + 0.044715 * v * v * v)));
}

// Loop implementation of the FFN block on [1, C, H, W].
TensorD ffn_oracle(const FfnDwconv<double>& f, const TensorD& x) {
  const auto c = x.dim(1), h = x.dim(2), w = x.dim(3), e = 2 * c;
  auto at = [&](const TensorD& t, std::int64_t ch, std::int64_t y, std::int64_t xx) { return t.at({0, ch, y, xx}); };
  std::vector<double> a(static_cast<std::size_t>(e * h * w)), b(a.size());
  for (std::int64_t o = 0; o < e; ++o)
    for (std::int64_t y = 0; y < h; ++y)
      for (std::int64_t xx = 0; xx < w; ++xx) {
        double s = f.expand.bias.data()[o];
        for (std::int64_t i = 0; i < c; ++i) s += f.expand.weight.at({o, i, 0, 0}) * at(x, i, y, xx);
        a[(o * h + y) * w + xx] = s;
      }
  for (std::int64_t o = 0; o < e; ++o)
    for (std::int64_t y = 0; y < h; ++y)
      for (std::int64_t xx = 0; xx < w; ++xx) {
        double s = f.depthwise.bias.data()[o];
        for (int dy = -1; dy <= 1; ++dy)
          for (int dx = -1; dx <= 1; ++dx) {
            const auto yy = y + dy, xs = xx + dx;
            if (yy < 0 || yy >= h || xs < 0 || xs >= w) continue;
            s += f.depthwise.weight.at({o, 0, dy + 1, dx + 1}) * a[(o * h + yy) * w + xs];
          }
        b[(o * h + y) * w + xx] = gelu_ref(s);
      }
  std::vector<double> out(static_cast<std::size_t>(c * h * w));
  for (std::int64_t o = 0; o < c; ++o)
    for (std::int64_t y = 0; y < h; ++y)
      for (std::int64_t xx = 0; xx < w; ++xx) {
        double s = f.project.bias.data()[o];
        for (std::int64_t i = 0; i < e; ++i) s += f.project.weight.at({o, i, 0, 0}) * b[(i * h + y) * w + xx];
        out[(o * h + y) * w + xx] = at(x, o, y, xx) + s;
      }
  return TensorD(x.shape(), std::move(out));
}

}  // namespace

// ------------------------------------------------------------------ cond input

TEST(CondInput, ConstantImage) {
  auto x = TensorD::full({2, 3, 6, 6}, 0.42);
  auto c = build_cond_input(x);
  EXPECT_EQ(c.shape(), (Shape{2, 10, 6, 6}));
  for (std::int64_t n = 0; n < 2; ++n)
    for (std::int64_t y = 0; y < 6; ++y)
      for (std::int64_t xx = 0; xx < 6; ++xx) {
        for (std::int64_t ch = 0; ch < 6; ++ch) EXPECT_EQ(c.at({n, ch, y, xx}), 0.42);
        for (std::int64_t ch = 6; ch < 9; ++ch) EXPECT_NEAR(c.at({n, ch, y, xx}), 1.0 / 3.0, 1e-12);
        EXPECT_EQ(c.at({n, 9, y, xx}), 0.0);
      }
}

TEST(CondInput, LayoutAndRange) {
  Rng rng(1);
  auto x = random_uniform<double>({2, 3, 8, 8}, rng);
  auto c = build_cond_input(x);
  EXPECT_EQ(c.dim(1), kCondInputChannels);
  EXPECT_TRUE(bit_identical(op::slice(c, 1, 0, 3), x));
  auto eq = histeq(x);
  EXPECT_TRUE(bit_identical(op::slice(c, 1, 3, 3), eq));
  EXPECT_TRUE(bit_identical(op::slice(c, 1, 6, 3), cr_map(eq)));
  EXPECT_TRUE(bit_identical(op::slice(c, 1, 9, 1), maxgrad(cr_map(eq))));
  for (double v : c.data()) {
    EXPECT_GE(v, 0.0);
    EXPECT_LE(v, 1.0);
  }
  EXPECT_TRUE(bit_identical(build_cond_input(x), c));
}

TEST(Histeq, UniformHistogramIsNearlyFixed) {
  // Gray image whose luminance fills every bin exactly once, at the bin centre.
  std::vector<double> v(3 * 256);
  for (int p = 0; p < 256; ++p)
    for (int ch = 0; ch < 3; ++ch) v[ch * 256 + p] = (p + 0.5) / 256.0;
  TensorD x({1, 3, 16, 16}, v);
  auto y = histeq(x);
  EXPECT_LE(max_abs_diff(x, y), 1.0 / 256.0);
}

TEST(Histeq, TwoLevelImage) {
  std::vector<double> v(3 * 16);
  for (int p = 0; p < 16; ++p)
    for (int ch = 0; ch < 3; ++ch) v[ch * 16 + p] = p < 8 ? 0.1 : 0.9;
  auto y = histeq(TensorD({1, 3, 4, 4}, v));
  for (int p = 0; p < 16; ++p)
    for (int ch = 0; ch < 3; ++ch) EXPECT_NEAR(y.data()[ch * 16 + p], p < 8 ? 0.5 : 1.0, 1e-12);
}

TEST(Histeq, ConstantPassesThrough) {
  Rng rng(2);
  std::vector<double> v(3 * 25);
  for (int ch = 0; ch < 3; ++ch)
    for (int p = 0; p < 25; ++p) v[ch * 25 + p] = 0.2 + 0.1 * ch;
  TensorD x({1, 3, 5, 5}, v);
  EXPECT_TRUE(bit_identical(histeq(x), x));
}

TEST(Histeq, MonotoneOnGrayImages) {
  Rng rng(3);
  auto g = random_uniform<double>({1, 1, 12, 12}, rng);
  auto x = op::concat<double>({g, g, g}, 1);
  auto y = histeq(x);
  std::vector<std::pair<double, double>> pairs;
  for (std::int64_t p = 0; p < 144; ++p) pairs.emplace_back(x.data()[p], y.data()[p]);
  std::sort(pairs.begin(), pairs.end());
  for (std::size_t i = 1; i < pairs.size(); ++i) EXPECT_GE(pairs[i].second, pairs[i - 1].second - 1e-12);
}

TEST(Histeq, PreservesChromaticityWhenUnclipped) {
  Rng rng(4);
  auto x = random_uniform<double>({1, 3, 8, 8}, rng, 0.05, 0.3);
  auto y = histeq(x);
  auto a = cr_map(x);
  auto b = cr_map(y);
  for (std::int64_t p = 0; p < 64; ++p) {
    const bool clipped = y.data()[p] >= 1.0 || y.data()[64 + p] >= 1.0 || y.data()[128 + p] >= 1.0;
    if (clipped) continue;
    for (int ch = 0; ch < 3; ++ch) EXPECT_NEAR(a.data()[ch * 64 + p], b.data()[ch * 64 + p], 1e-9);
  }
}

TEST(Maxgrad, ConstantIsZero) {
  auto g = maxgrad(TensorD::full({1, 3, 5, 7}, 0.3));
  EXPECT_EQ(g.shape(), (Shape{1, 1, 5, 7}));
  for (double v : g.data()) EXPECT_EQ(v, 0.0);
}

TEST(Maxgrad, VerticalStep) {
  auto m = TensorD::zeros({1, 3, 6, 8});
  auto d = m.mutable_data();
  for (int y = 0; y < 6; ++y)
    for (int x = 4; x < 8; ++x) d[1 * 48 + y * 8 + x] = 0.6;
  auto g = maxgrad(m);
  for (int y = 0; y < 6; ++y)
    for (int x = 0; x < 8; ++x) EXPECT_EQ(g.at({0, 0, y, x}), x == 3 ? 0.6 : 0.0);
}

TEST(Maxgrad, MatchesLoopOracle) {
  Rng rng(5);
  auto m = random_uniform<double>({2, 3, 5, 6}, rng);
  auto g = maxgrad(m);
  for (std::int64_t n = 0; n < 2; ++n)
    for (std::int64_t y = 0; y < 5; ++y)
      for (std::int64_t x = 0; x < 6; ++x) {
        double best = 0;
        for (std::int64_t c = 0; c < 3; ++c) {
          if (x < 5) best = std::max(best, std::abs(m.at({n, c, y, x + 1}) - m.at({n, c, y, x})));
          if (y < 4) best = std::max(best, std::abs(m.at({n, c, y + 1, x}) - m.at({n, c, y, x})));
        }
        EXPECT_EQ(g.at({n, 0, y, x}), best);
      }
}

// ------------------------------------------------------------------ attention

class AttentionMean : public ::testing::TestWithParam<int> {};

TEST_P(AttentionMean, UniformWeightsGiveWindowMean) {
  const int size = GetParam();
  Rng rng(6);
  auto att = WindowAttention<double>::make(4, 8, 2, rng);
  auto w = att.qkv.weight.mutable_data();
  std::fill(w.begin(), w.end(), 0.0);
  for (int k = 0; k < 4; ++k) w[static_cast<std::size_t>((8 + k) * 4 + k)] = 1.0;  // v = x, q = k = 0
  set_identity_1x1(att.proj);
  auto x = random_normal<double>({1, 4, size, size}, rng);
  auto y = att(x);
  ASSERT_EQ(y.shape(), x.shape());
  for (std::int64_t c = 0; c < 4; ++c)
    for (std::int64_t i = 0; i < size; ++i)
      for (std::int64_t j = 0; j < size; ++j) {
        const auto wy = i / 8, wx = j / 8;
        double s = 0;
        int cnt = 0;
        for (std::int64_t a = wy * 8; a < std::min<std::int64_t>(size, wy * 8 + 8); ++a)
          for (std::int64_t b = wx * 8; b < std::min<std::int64_t>(size, wx * 8 + 8); ++b) {
            s += x.at({0, c, a, b});
            ++cnt;
          }
        EXPECT_NEAR(y.at({0, c, i, j}), x.at({0, c, i, j}) + s / cnt, 1e-12);
      }
}

INSTANTIATE_TEST_SUITE_P(Sizes, AttentionMean, ::testing::Values(16, 12, 5));

TEST(WindowAttention, ZeroInitIsIdentityAndShapePreserved) {
  Rng rng(7);
  auto att = WindowAttention<double>::make(8, 8, 2, rng);
  auto x = random_normal<double>({1, 8, 16, 16}, rng);
  auto y = att(x);
  EXPECT_EQ(y.shape(), x.shape());
  EXPECT_TRUE(bit_identical(x, y));
}

TEST(WindowAttention, PermutationWithinWindowIsEquivariant) {
  Rng rng(8);
  auto att = WindowAttention<double>::make(4, 4, 2, rng);
  ParamRefs<double> refs;
  att.collect("a", refs);
  perturb_params(refs, rng, 0.3);
  auto x = random_normal<double>({1, 4, 8, 8}, rng);
  // Swap pixels (1,2) and (3,0), both inside the top-left 4x4 window.
  auto swap = [](const TensorD& t) {
    std::vector<double> v(t.data().begin(), t.data().end());
    for (int c = 0; c < 4; ++c) std::swap(v[c * 64 + 1 * 8 + 2], v[c * 64 + 3 * 8 + 0]);
    return TensorD(t.shape(), std::move(v));
  };
  EXPECT_LT(max_abs_diff(att(swap(x)), swap(att(x))), 1e-12);
}

TEST(WindowAttention, RejectsBadHeads) {
  Rng rng(9);
  EXPECT_THROW(WindowAttention<double>::make(5, 8, 2, rng), ShapeError);
}

// ------------------------------------------------------------------ ffn

TEST(Ffn, ZeroInitIsIdentity) {
  Rng rng(10);
  auto f = FfnDwconv<double>::make(6, rng);
  auto x = random_normal<double>({2, 6, 5, 7}, rng);
  auto y = f(x);
  EXPECT_EQ(y.shape(), x.shape());
  EXPECT_TRUE(bit_identical(x, y));
}

TEST(Ffn, MatchesLoopOracle) {
  Rng rng(11);
  auto f = FfnDwconv<double>::make(3, rng);
  ParamRefs<double> refs;
  f.collect("f", refs);
  perturb_params(refs, rng, 0.4);
  auto x = random_normal<double>({1, 3, 5, 6}, rng);
  EXPECT_LT(max_abs_diff(f(x), ffn_oracle(f, x)), 1e-12);
}

// ------------------------------------------------------------------ blend

TEST(FeatureBlend, SingleLevelIdentity) {
  Rng rng(12);
  auto b = FeatureBlend<double>::make(1, 4, rng);
  auto x = random_normal<double>({1, 4, 8, 8}, rng);
  auto out = b({x});
  ASSERT_EQ(out.size(), 1u);
  EXPECT_TRUE(bit_identical(out[0], x));
}

TEST(FeatureBlend, ZeroInitIdentity) {
  Rng rng(13);
  auto b = FeatureBlend<double>::make(3, 4, rng);
  std::vector<TensorD> in{random_normal<double>({2, 4, 8, 8}, rng), random_normal<double>({2, 4, 4, 4}, rng),
                          random_normal<double>({2, 4, 2, 2}, rng)};
  auto out = b(in);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_TRUE(bit_identical(out[i], in[i]));
}

TEST(FeatureBlend, ConstantPropagation) {
  Rng rng(14);
  auto b = FeatureBlend<double>::make(2, 3, rng);
  set_identity_1x1(b.paths[0][1][0]);
  auto out = b({TensorD::full({1, 3, 8, 8}, 0.25), TensorD::full({1, 3, 4, 4}, 0.5)});
  for (double v : out[0].data()) EXPECT_EQ(v, 0.75);
  for (double v : out[1].data()) EXPECT_EQ(v, 0.5);
}

TEST(FeatureBlend, RejectsNonDyadic) {
  Rng rng(15);
  auto b = FeatureBlend<double>::make(2, 3, rng);
  EXPECT_THROW(b({TensorD::zeros({1, 3, 8, 8}), TensorD::zeros({1, 3, 3, 3})}), ShapeError);
}

// ------------------------------------------------------------------ encoder

TEST(Encoder, ShapesAtScaleTwoAndFour) {
  for (int scale : {2, 4}) {
    Encoder<double> enc(layout(32, 32), scale, {}, 1);
    Rng rng(16);
    auto x = random_uniform<double>({2, 3, 32 / scale, 32 / scale}, rng);
    auto f = enc.forward(x);
    ASSERT_EQ(f.per_level.size(), 3u);
    EXPECT_EQ(f.per_level[0].shape(), (Shape{2, 12, 16, 16}));
    EXPECT_EQ(f.per_level[1].shape(), (Shape{2, 24, 8, 8}));
    EXPECT_EQ(f.per_level[2].shape(), (Shape{2, 48, 4, 4}));
    EXPECT_EQ(f.cr_pred.shape(), (Shape{2, 3, 32 / scale, 32 / scale}));
    auto prior = encoder_prior_mean(f, enc.layout(), scale);
    auto expect = enc.layout().latent_shapes(2);
    for (std::size_t k = 0; k < prior.size(); ++k) EXPECT_EQ(prior[k].shape(), expect[k]);
  }
}

TEST(Encoder, RejectsBadInput) {
  EXPECT_THROW(Encoder<double>(layout(32, 32), 3, {}, 1), ShapeError);
  Encoder<double> enc(layout(32, 32), 2, {}, 1);
  EXPECT_THROW(enc.forward(TensorD::zeros({1, 3, 8, 8})), ShapeError);
}

TEST(Encoder, CrPredOnSimplexAndDeterministic) {
  Encoder<double> enc(layout(16, 16), 2, {}, 2);
  Rng rng(17);
  auto x = random_uniform<double>({2, 3, 8, 8}, rng);
  auto a = enc.forward(x);
  auto b = enc.forward(x);
  EXPECT_TRUE(bit_identical(a.cr_pred, b.cr_pred));
  for (std::size_t l = 0; l < a.per_level.size(); ++l) EXPECT_TRUE(bit_identical(a.per_level[l], b.per_level[l]));
  for (std::int64_t n = 0; n < 2; ++n)
    for (std::int64_t p = 0; p < 64; ++p) {
      double s = 0;
      for (std::int64_t c = 0; c < 3; ++c) {
        const double v = a.cr_pred.data()[(n * 3 + c) * 64 + p];
        EXPECT_GE(v, 0.0);
        s += v;
      }
      EXPECT_NEAR(s, 1.0, 1e-6);
    }
}

TEST(Encoder, BatchIndependence) {
  Encoder<double> enc(layout(16, 16), 2, {}, 3);
  auto params = enc.params();
  Rng rng(18);
  perturb_params(params, rng, 0.05);
  auto x = random_uniform<double>({3, 3, 8, 8}, rng);
  auto batch = enc.forward(x);
  for (std::int64_t n = 0; n < 3; ++n) {
    auto one = enc.forward(op::slice(x, 0, n, 1));
    EXPECT_LT(max_abs_diff(one.cr_pred, op::slice(batch.cr_pred, 0, n, 1)), 1e-6);
    for (std::size_t l = 0; l < one.per_level.size(); ++l) {
      EXPECT_LT(max_abs_diff(one.per_level[l], op::slice(batch.per_level[l], 0, n, 1)), 1e-6);
    }
  }
}

TEST(Encoder, ParamNamesUnique) {
  Encoder<double> enc(layout(32, 32), 2, {}, 4);
  auto params = enc.params();
  std::vector<std::string> names;
  for (const auto& p : params) {
    EXPECT_EQ(p.name.rfind("encoder/", 0), 0u);
    names.push_back(p.name);
  }
  std::sort(names.begin(), names.end());
  EXPECT_EQ(std::adjacent_find(names.begin(), names.end()), names.end());
}

TEST(Encoder, Gradcheck) {
  Encoder<double> enc(layout(16, 16), 2, {}, 5);
  auto params = enc.params();
  Rng rng(19);
  perturb_params(params, rng, 0.05);
  auto x = random_uniform<double>({1, 3, 8, 8}, rng);
  auto probe_cr = random_normal<double>({1, 3, 8, 8}, rng);
  std::vector<TensorD> probes;
  for (int l = 0; l < 3; ++l) {
    probes.push_back(random_normal<double>(enc.forward(x).per_level[static_cast<std::size_t>(l)].shape(), rng));
  }
  auto coords = sample_param_coords(params, rng, 50);
  auto report = gradcheck_params(
      [&] {
        auto f = enc.forward(x);
        auto s = op::sum(op::mul(f.cr_pred, probe_cr));
        for (std::size_t l = 0; l < probes.size(); ++l) s = op::add(s, op::sum(op::mul(f.per_level[l], probes[l])));
        return s;
      },
      coords);
  EXPECT_TRUE(report.passed) << report.message;
  EXPECT_LT(report.max_rel_error, 1e-4);
}
