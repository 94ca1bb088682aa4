#include <gtest/gtest.h>

#include <cmath>
#include <cstring>
#include <functional>

#include "crflow/gradcheck.hpp"
#include "crflow/ops.hpp"
#include "crflow/random_tensor.hpp"

using namespace crflow;
namespace op = crflow::ops;

namespace {

bool bit_identical(const TensorD& a, const TensorD& b) {
  return a.shape() == b.shape() && std::memcmp(a.data().data(), b.data().data(), a.numel() * sizeof(double)) == 0;
}

TensorD vec(std::vector<double> v) {
  const auto n = static_cast<std::int64_t>(v.size());
  return TensorD({n}, std::move(v));
}

}  // namespace

TEST(Elementwise, AddsVectors) {
  auto r = op::add(vec({1, 2}), vec({3, 4}));
  EXPECT_EQ(r.data()[0], 4.0);
  EXPECT_EQ(r.data()[1], 6.0);
}

TEST(Elementwise, ExpOfZeroIsOne) {
  auto r = op::exp(TensorD::zeros({2, 3}));
  for (double v : r.data()) EXPECT_EQ(v, 1.0);
}

TEST(Elementwise, DispatchMatchesNamedOps) {
  auto a = vec({0.5, 1.5});
  auto b = vec({2.0, 4.0});
  EXPECT_TRUE(bit_identical(op::elementwise(op::Elementwise::kDiv, a, &b), op::div(a, b)));
  EXPECT_TRUE(bit_identical(op::elementwise(op::Elementwise::kSigmoid, a), op::sigmoid(a)));
  EXPECT_THROW(op::elementwise(op::Elementwise::kAdd, a), std::invalid_argument);
}

TEST(Elementwise, ProductRuleGradient) {
  Tape<double> tape;
  auto a = vec({2});
  a.set_requires_grad(true);
  auto b = vec({5});
  auto loss = op::sum(op::mul(a, b));
  auto g = tape.backward(loss);
  EXPECT_EQ(g.of(a).data()[0], 5.0);
}

TEST(Elementwise, ShapeMismatchThrows) {
  EXPECT_THROW(op::add(vec({1, 2}), vec({1, 2, 3})), ShapeError);
  // Leading broadcast is not allowed.
  EXPECT_THROW(op::add(TensorD::zeros({2, 3}), TensorD::zeros({1, 3})), ShapeError);
}

TEST(Elementwise, DomainViolationsThrow) {
  EXPECT_THROW(op::log(vec({1.0, 0.0})), DomainError);
  EXPECT_THROW(op::log(vec({-1.0})), DomainError);
  EXPECT_THROW(op::div(vec({1.0}), vec({0.0})), DomainError);
}

TEST(Elementwise, OverflowIsSurfacedNotPropagated) {
  EXPECT_THROW(op::exp(vec({1000.0})), NumericError);
  EXPECT_THROW(op::exp(TensorF({1}, {100.0f})), NumericError);
}

TEST(Elementwise, TrailingBroadcastMatchesExplicitTiling) {
  Rng rng(7);
  auto a = random_normal<double>({2, 3, 4}, rng);
  auto b = random_normal<double>({2, 1, 1}, rng);
  std::vector<double> tiled(24);
  for (int i = 0; i < 24; ++i) tiled[i] = b.data()[i / 12];
  auto bt = TensorD({2, 3, 4}, tiled);
  auto b_before = std::vector<double>(b.data().begin(), b.data().end());
  for (auto kind : {op::Elementwise::kAdd, op::Elementwise::kSub, op::Elementwise::kMul}) {
    EXPECT_TRUE(bit_identical(op::elementwise(kind, a, &b), op::elementwise(kind, a, &bt)));
  }
  EXPECT_EQ(std::vector<double>(b.data().begin(), b.data().end()), b_before);
  auto r = op::mul(a, TensorD::scalar(2.0));
  EXPECT_EQ(r.data()[5], 2.0 * a.data()[5]);
}

TEST(Conv2d, UnitKernelIsIdentity) {
  Rng rng(1);
  auto x = random_uniform<double>({1, 1, 4, 4}, rng);
  auto w = TensorD({1, 1, 1, 1}, {1.0});
  EXPECT_TRUE(bit_identical(op::conv2d(x, w, nullptr, 1, 0), x));
}

TEST(Conv2d, DepthwiseBoxKernelIsLocalMean) {
  Rng rng(2);
  auto x = random_uniform<double>({1, 2, 4, 4}, rng);
  auto w = TensorD::full({2, 1, 3, 3}, 1.0 / 9.0);
  auto y = op::conv2d(x, w, nullptr, 1, 1, 2);
  ASSERT_EQ(y.shape(), (Shape{1, 2, 4, 4}));
  for (int c = 0; c < 2; ++c)
    for (int i = 0; i < 4; ++i)
      for (int j = 0; j < 4; ++j) {
        double acc = 0;
        for (int di = -1; di <= 1; ++di)
          for (int dj = -1; dj <= 1; ++dj) {
            int ii = i + di, jj = j + dj;
            if (ii >= 0 && ii < 4 && jj >= 0 && jj < 4) acc += x.at({0, c, ii, jj});
          }
        EXPECT_NEAR(y.at({0, c, i, j}), acc / 9.0, 1e-15);
      }
}

TEST(Conv2d, StrideHalvesSpatialDims) {
  auto y = op::conv2d(TensorD::zeros({1, 1, 4, 4}), TensorD::zeros({1, 1, 3, 3}), nullptr, 2, 1);
  EXPECT_EQ(y.shape(), (Shape{1, 1, 2, 2}));
}

TEST(Conv2d, GeneralConvMatchesDirectLoop) {
  Rng rng(3);
  auto x = random_normal<double>({2, 4, 5, 6}, rng);
  auto w = random_normal<double>({6, 2, 3, 3}, rng);
  auto b = random_normal<double>({6}, rng);
  auto y = op::conv2d(x, w, &b, 2, 1, 2);
  ASSERT_EQ(y.shape(), (Shape{2, 6, 3, 3}));
  for (int n = 0; n < 2; ++n)
    for (int o = 0; o < 6; ++o)
      for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) {
          double acc = b.data()[o];
          const int group = o / 3;
          for (int c = 0; c < 2; ++c)
            for (int ki = 0; ki < 3; ++ki)
              for (int kj = 0; kj < 3; ++kj) {
                int ii = i * 2 - 1 + ki, jj = j * 2 - 1 + kj;
                if (ii < 0 || ii >= 5 || jj < 0 || jj >= 6) continue;
                acc += w.at({o, c, ki, kj}) * x.at({n, group * 2 + c, ii, jj});
              }
          EXPECT_NEAR(y.at({n, o, i, j}), acc, 1e-12);
        }
}

TEST(Conv2d, GroupMismatchThrows) {
  EXPECT_THROW(op::conv2d(TensorD::zeros({1, 3, 4, 4}), TensorD::zeros({2, 1, 3, 3}), nullptr, 1, 1, 2),
               ShapeError);
}

TEST(Matmul, IdentityAndArithmetic) {
  Rng rng(4);
  auto a = random_normal<double>({3, 3}, rng);
  EXPECT_TRUE(bit_identical(op::matmul(op::eye<double>(3), a), a));
  auto r = op::matmul(TensorD({1, 2}, {1, 2}), TensorD({2, 1}, {3, 4}));
  EXPECT_EQ(r.item(), 11.0);
  EXPECT_THROW(op::matmul(TensorD::zeros({2, 3}), TensorD::zeros({2, 3})), ShapeError);
}

TEST(Matmul, MatchesTripleLoop) {
  Rng rng(5);
  auto a = random_normal<double>({4, 4}, rng);
  auto b = random_normal<double>({4, 4}, rng);
  auto c = op::matmul(a, b);
  double worst = 0;
  for (int i = 0; i < 4; ++i)
    for (int j = 0; j < 4; ++j) {
      double acc = 0;
      for (int k = 0; k < 4; ++k) acc += a.at({i, k}) * b.at({k, j});
      worst = std::max(worst, std::abs(acc - c.at({i, j})));
    }
  EXPECT_LT(worst, 1e-12);
}

TEST(Softmax, UniformAndStabilized) {
  auto u = op::softmax(vec({0, 0, 0}), 0);
  for (double v : u.data()) EXPECT_DOUBLE_EQ(v, 1.0 / 3.0);
  auto s = op::softmax(vec({1000, 0}), 0);
  EXPECT_EQ(s.data()[0], 1.0);
  EXPECT_LT(s.data()[1], 1e-300);
}

TEST(Softmax, MatchesExtendedPrecision) {
  auto s = op::softmax(vec({1, 2}), 0);
  const long double e1 = std::exp(1.0L), e2 = std::exp(2.0L);
  EXPECT_NEAR(s.data()[0], static_cast<double>(e1 / (e1 + e2)), 1e-15);
  EXPECT_NEAR(s.data()[1], static_cast<double>(e2 / (e1 + e2)), 1e-15);
}

TEST(Backward, SumGivesOnes) {
  Tape<double> tape;
  auto a = vec({1, 2, 3});
  a.set_requires_grad(true);
  auto g = tape.backward(op::sum(a)).of(a);
  for (double v : g.data()) EXPECT_EQ(v, 1.0);
}

TEST(Backward, SquareGivesTwiceInput) {
  Tape<double> tape;
  auto a = vec({3});
  a.set_requires_grad(true);
  auto g = tape.backward(op::sum(op::mul(a, a))).of(a);
  EXPECT_EQ(g.data()[0], 6.0);
}

TEST(Backward, UnusedLeafGetsZero) {
  Tape<double> tape;
  auto a = vec({1, 2});
  auto unused = vec({7, 8});
  a.set_requires_grad(true);
  unused.set_requires_grad(true);
  auto grads = tape.backward(op::sum(a));
  EXPECT_FALSE(grads.contains(unused));
  auto g_unused = grads.of(unused);
  for (double v : g_unused.data()) EXPECT_EQ(v, 0.0);
}

TEST(Backward, NonScalarThrows) {
  Tape<double> tape;
  auto a = vec({1, 2});
  a.set_requires_grad(true);
  EXPECT_THROW(tape.backward(op::mul_scalar(a, 2.0)), ShapeError);
}

TEST(Backward, NoTapeMeansNoRecording) {
  auto a = vec({1, 2});
  a.set_requires_grad(true);
  auto r = op::exp(a);
  EXPECT_FALSE(r.requires_grad());
}

TEST(Backward, ReplayIsBitDeterministic) {
  Rng rng(11);
  auto x = random_normal<double>({2, 3, 4, 4}, rng);
  auto w = random_normal<double>({3, 3, 3, 3}, rng);
  auto run = [&] {
    Tape<double> tape;
    auto wl = TensorD(w.shape(), std::vector<double>(w.data().begin(), w.data().end()));
    wl.set_requires_grad(true);
    auto loss = op::sum(op::gelu(op::conv2d(x, wl, nullptr, 1, 1)));
    return tape.backward(loss).of(wl);
  };
  EXPECT_TRUE(bit_identical(run(), run()));
}

TEST(Gradcheck, QuadraticIsExact) {
  Rng rng(12);
  auto x = random_normal<double>({6}, rng);
  auto rep = gradcheck([](const TensorD& v) { return op::sum(op::square(v)); }, x, {1e-5, 1e-8});
  EXPECT_TRUE(rep.passed) << rep.message;
  EXPECT_LT(rep.max_rel_error, 1e-8);
}

TEST(Gradcheck, FlagsWrongGradientRule) {
  // Forward computes 3x, backward claims 2.
  auto bad_triple = [](const TensorD& x) {
    std::vector<double> out(x.data().begin(), x.data().end());
    for (auto& v : out) v *= 3.0;
    BackwardFn<double> bw = [](std::span<const double> g, GradSink<double>& sink) {
      if (auto* gx = sink.acc(0))
        for (std::size_t i = 0; i < g.size(); ++i) (*gx)[i] += 2.0 * g[i];
    };
    return make_op<double>(x.shape(), std::move(out), {&x}, std::move(bw), "bad_triple");
  };
  Rng rng(13);
  auto x = random_normal<double>({4}, rng);
  auto rep = gradcheck([&](const TensorD& v) { return op::sum(bad_triple(v)); }, x);
  EXPECT_FALSE(rep.passed);
  EXPECT_GT(rep.max_rel_error, 0.1);
}

TEST(Gradcheck, DetectsNondeterminism) {
  int calls = 0;
  auto rep = gradcheck(
      [&](const TensorD& v) { return op::add_scalar(op::sum(v), static_cast<double>(++calls)); }, vec({1.0}));
  EXPECT_FALSE(rep.deterministic);
  EXPECT_FALSE(rep.passed);
}

// Every differentiable op passes gradcheck (eps 1e-5, tol 1e-4) on 10 random inputs.
TEST(GradcheckProperty, AllOpsOnRandomInputs) {
  using Fn = std::function<TensorD(const TensorD&)>;
  struct Case {
    const char* name;
    Shape shape;
    Fn f;
  };
  Rng prng(99);
  auto other = random_normal<double>({2, 3, 4, 4}, prng);
  auto pos_other = random_uniform<double>({2, 3, 4, 4}, prng, 0.5, 2.0);
  auto per_sample = random_normal<double>({2, 1, 1, 1}, prng);
  auto chan = random_normal<double>({3}, prng);
  auto w3 = random_normal<double>({4, 3, 3, 3}, prng, 0.0, 0.3);
  auto wdw = random_normal<double>({3, 1, 3, 3}, prng, 0.0, 0.3);
  auto mat = random_normal<double>({4, 5}, prng);
  auto weights = random_normal<double>({2, 3, 4, 4}, prng);
  auto weigh = [weights](const TensorD& y) {
    if (y.shape() == weights.shape()) return op::sum(op::mul(y, weights));
    Rng r(5);
    auto w = random_normal<double>(y.shape(), r);
    return op::sum(op::mul(y, w));
  };
  std::vector<Case> cases = {
      {"add", {2, 3, 4, 4}, [&](const TensorD& x) { return weigh(op::add(x, other)); }},
      {"sub_bcast", {2, 3, 4, 4}, [&](const TensorD& x) { return weigh(op::sub(x, per_sample)); }},
      {"mul", {2, 3, 4, 4}, [&](const TensorD& x) { return weigh(op::mul(x, other)); }},
      {"div", {2, 3, 4, 4}, [&](const TensorD& x) { return weigh(op::div(x, pos_other)); }},
      {"div_rhs", {2, 3, 4, 4}, [&](const TensorD& x) { return weigh(op::div(other, op::add_scalar(op::square(x), 1.0))); }},
      {"exp", {2, 3, 4, 4}, [&](const TensorD& x) { return weigh(op::exp(x)); }},
      {"log", {2, 3, 4, 4}, [&](const TensorD& x) { return weigh(op::log(op::add_scalar(op::square(x), 0.5))); }},
      {"neg", {2, 3, 4, 4}, [&](const TensorD& x) { return weigh(op::neg(x)); }},
      {"sigmoid", {2, 3, 4, 4}, [&](const TensorD& x) { return weigh(op::sigmoid(x)); }},
      {"tanh", {2, 3, 4, 4}, [&](const TensorD& x) { return weigh(op::tanh(x)); }},
      {"gelu", {2, 3, 4, 4}, [&](const TensorD& x) { return weigh(op::gelu(x)); }},
      {"mul_channel", {2, 3, 4, 4}, [&](const TensorD& x) { return weigh(op::mul_channel(x, chan)); }},
      {"add_channel", {2, 3, 4, 4}, [&](const TensorD& x) { return weigh(op::add_channel(op::square(x), chan)); }},
      {"sum_per_sample", {2, 3, 4, 4}, [&](const TensorD& x) { return op::sum(op::square(op::sum_per_sample(x))); }},
      {"softmax", {2, 3, 4, 4}, [&](const TensorD& x) { return weigh(op::softmax(x, 1)); }},
      {"permute", {2, 3, 4, 4}, [&](const TensorD& x) { return weigh(op::reshape(op::permute(x, {0, 2, 3, 1}), {2, 3, 4, 4})); }},
      {"slice_concat", {2, 3, 4, 4}, [&](const TensorD& x) {
         auto a = op::slice(x, 1, 0, 1);
         auto b = op::slice(x, 1, 1, 2);
         return weigh(op::concat<double>({op::square(b), a}, 1));
       }},
      {"index_select", {2, 3, 4, 4}, [&](const TensorD& x) { return weigh(op::index_select(op::square(x), 1, {2, 0, 1})); }},
      {"pad_up", {2, 3, 4, 4}, [&](const TensorD& x) {
         auto p = op::pad2d(op::upsample_nearest(op::slice(op::slice(x, 2, 0, 2), 3, 0, 2), 2), 0, 0, 0, 0);
         return weigh(op::mul(p, p));
       }},
      {"conv3x3", {2, 3, 4, 4}, [&](const TensorD& x) { return weigh(op::conv2d(x, w3, nullptr, 1, 1)); }},
      {"conv_weight", {4, 3, 3, 3}, [&](const TensorD& w) { return op::sum(op::square(op::conv2d(other, w, nullptr, 2, 1))); }},
      {"conv_depthwise", {2, 3, 4, 4}, [&](const TensorD& x) { return weigh(op::conv2d(op::square(x), wdw, nullptr, 1, 1, 3)); }},
      {"conv_dw_weight", {3, 1, 3, 3}, [&](const TensorD& w) { return op::sum(op::square(op::conv2d(other, w, nullptr, 1, 1, 3))); }},
      {"matmul", {3, 4}, [&](const TensorD& a) { return op::sum(op::square(op::matmul(a, mat))); }},
      {"bmm_tt", {2, 4, 3}, [&](const TensorD& a) {
         Rng r(8);
         auto b = random_normal<double>({2, 5, 4}, r);
         return op::sum(op::square(op::bmm(a, b, true, true)));
       }},
      {"bmm_nt", {2, 3, 4}, [&](const TensorD& a) { return op::sum(op::square(op::bmm(a, op::square(a), false, true))); }},
      {"tri_inverse_lower", {4, 4}, [&](const TensorD& a) {
         auto m = op::add(a, op::mul_scalar(op::eye<double>(4), 4.0));
         return op::sum(op::square(op::triangular_inverse(m, true)));
       }},
      {"tri_inverse_upper", {4, 4}, [&](const TensorD& a) {
         auto m = op::add(a, op::mul_scalar(op::eye<double>(4), 4.0));
         return op::sum(op::square(op::triangular_inverse(m, false)));
       }},
      {"diag_mean", {4}, [&](const TensorD& v) { return op::mean(op::square(op::diag(v))); }},
  };
  for (const auto& c : cases) {
    for (int trial = 0; trial < 10; ++trial) {
      Rng rng(derive_seed(42, c.name, trial));
      auto x = random_normal<double>(c.shape, rng);
      auto rep = gradcheck(c.f, x, {1e-5, 1e-4});
      EXPECT_TRUE(rep.passed) << c.name << " trial " << trial << ": " << rep.message;
    }
  }
}

TEST(Purity, OpsAreBitReproducible) {
  Rng rng(21);
  auto x = random_normal<double>({2, 4, 8, 8}, rng);
  auto w = random_normal<double>({4, 4, 3, 3}, rng);
  auto f = [&] { return op::softmax(op::conv2d(op::tanh(x), w, nullptr, 1, 1), 1); };
  EXPECT_TRUE(bit_identical(f(), f()));
}

TEST(Shape, PermuteMatchesIndexFormula) {
  Rng rng(22);
  auto x = random_normal<double>({2, 3, 4}, rng);
  auto y = op::permute(x, {2, 0, 1});
  ASSERT_EQ(y.shape(), (Shape{4, 2, 3}));
  for (int i = 0; i < 2; ++i)
    for (int j = 0; j < 3; ++j)
      for (int k = 0; k < 4; ++k) EXPECT_EQ(y.at({k, i, j}), x.at({i, j, k}));
}

TEST(Shape, TriangularInverseIgnoresOffTriangle) {
  auto m = TensorD({2, 2}, {2.0, 99.0, 1.0, 4.0});
  auto inv = op::triangular_inverse(m, true);
  EXPECT_DOUBLE_EQ(inv.at({0, 0}), 0.5);
  EXPECT_DOUBLE_EQ(inv.at({0, 1}), 0.0);
  EXPECT_DOUBLE_EQ(inv.at({1, 0}), -0.125);
  EXPECT_DOUBLE_EQ(inv.at({1, 1}), 0.25);
}
