#include "crflow/selfcheck.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <json.hpp>
#include <limits>
#include <stdexcept>

#include "crflow/crmap.hpp"
#include "crflow/degrade.hpp"
#include "crflow/image_io.hpp"
#include "crflow/metrics.hpp"
#include "crflow/random_tensor.hpp"
#include "crflow/train.hpp"
#include "crflow/verify.hpp"

namespace crflow {

namespace {

namespace op = crflow::ops;

// Collects measurements and remembers the first violated bound.
class Recorder {
 public:
  explicit Recorder(std::string name) { r_.name = std::move(name); }

  void below(const std::string& what, double value, double bound) {
    r_.measured.emplace_back(what, value);
    if (!(value < bound) && r_.detail.empty()) {
      char buf[256];
      std::snprintf(buf, sizeof buf, "%s = %.6g, required < %.6g", what.c_str(), value, bound);
      r_.detail = buf;
    }
  }
  void near(const std::string& what, double value, double target, double tol) {
    r_.measured.emplace_back(what, value);
    if (!(std::abs(value - target) <= tol) && r_.detail.empty()) {
      char buf[256];
      std::snprintf(buf, sizeof buf, "%s = %.12g, required %.12g +- %.3g", what.c_str(), value, target, tol);
      r_.detail = buf;
    }
  }
  void note(const std::string& what, double value) { r_.measured.emplace_back(what, value); }

  SuiteResult finish(std::chrono::steady_clock::time_point t0) {
    r_.passed = r_.detail.empty();
    r_.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return r_;
  }

 private:
  SuiteResult r_;
};

template <class F>
SuiteResult guarded(const std::string& name, F&& body) {
  const auto t0 = std::chrono::steady_clock::now();
  Recorder rec(name);
  try {
    body(rec);
  } catch (const std::exception& e) {
    rec.below(std::string("exception: ") + e.what(), 1.0, 0.0);
  }
  return rec.finish(t0);
}

FlowLayout flow_layout(int side, int steps = 12, int hidden = 64) {
  FlowLayout l;
  l.hr_h = side;
  l.hr_w = side;
  l.steps_per_level = steps;
  l.hidden = hidden;
  return l;
}

std::vector<TensorD> random_cond(const FlowLayout& lay, Rng& rng) {
  std::vector<TensorD> c;
  for (int l = 0; l < lay.levels; ++l) c.push_back(random_normal<double>({1, lay.cond_channels(l), lay.level_h(l), lay.level_w(l)}, rng));
  return c;
}

double max_abs_diff(const TensorD& a, const TensorD& b) {
  double m = 0;
  for (std::size_t i = 0; i < a.data().size(); ++i) m = std::max(m, std::abs(a.data()[i] - b.data()[i]));
  return m;
}

double jacobian_rel_err(const std::function<LayerOut<double>(const TensorD&)>& layer, const TensorD& x) {
  const double analytic = layer(x).logdet.item();
  auto jac = numeric_jacobian([&](const TensorD& v) { return op::reshape(layer(v).y, {v.numel()}); }, x);
  const double numeric = log_abs_det(jac, x.numel());
  return std::abs(analytic - numeric) / std::max(std::abs(numeric), 1e-12);
}

std::vector<TensorD> isp_images(const SelfcheckOptions& o) {
  std::vector<TensorD> out;
  if (!o.isp_images.empty()) {
    std::vector<std::filesystem::path> files;
    for (const auto& e : std::filesystem::directory_iterator(o.isp_images))
      if (e.path().extension() == ".png") files.push_back(e.path());
    std::sort(files.begin(), files.end());
    for (const auto& f : files) {
      if (static_cast<int>(out.size()) == o.isp_count) break;
      auto img = read_png(f);
      const auto h = img.dim(2) / 2 * 2, w = img.dim(3) / 2 * 2;
      std::vector<double> v;
      for (int c = 0; c < 3; ++c)
        for (std::int64_t y = 0; y < h; ++y)
          for (std::int64_t x = 0; x < w; ++x) v.push_back(img.at({0, c, y, x}));
      out.emplace_back(Shape{1, 3, h, w}, std::move(v));
    }
    if (out.empty()) throw IoError("no PNG images in " + o.isp_images.string());
    return out;
  }
  for (int i = 0; i < o.isp_count; ++i) {
    Rng rng(derive_seed(o.seed, "isp_scene", static_cast<std::uint64_t>(i)));
    out.push_back(procedural_scene(rng, 64, 64));
  }
  return out;
}

}  // namespace

SuiteResult check_invertibility(const SelfcheckOptions& o) {
  return guarded("invertibility", [&](Recorder& rec) {
    const auto lay = flow_layout(16);
    FlowModel<double> m(lay, {derive_seed(o.seed, "inv_model"), false});
    auto params = m.params();
    Rng rng(derive_seed(o.seed, "invertibility"));
    perturb_params(params, rng, 0.01);
    flow_data_init(random_uniform<double>({4, 3, 16, 16}, rng), [&] {
      std::vector<TensorD> c;
      for (int l = 0; l < lay.levels; ++l) c.push_back(random_normal<double>({4, lay.cond_channels(l), lay.level_h(l), lay.level_w(l)}, rng));
      return c;
    }(), m);
    double worst = 0;
    for (int i = 0; i < o.roundtrip_pairs; ++i) {
      auto y = random_uniform<double>({1, 3, 16, 16}, rng);
      auto cond = random_cond(lay, rng);
      auto r = flow_forward(y, cond, m);
      worst = std::max(worst, max_abs_diff(flow_inverse(r.z, cond, m), y));
    }
    rec.note("pairs", o.roundtrip_pairs);
    rec.below("max_abs_roundtrip_error", worst, 1e-8);
  });
}

SuiteResult check_logdet(const SelfcheckOptions& o) {
  return guarded("logdet_vs_jacobian", [&](Recorder& rec) {
    Rng rng(derive_seed(o.seed, "logdet"));
    auto x = random_normal<double>({1, 3, 4, 4}, rng);
    auto c = random_normal<double>({1, 4, 4, 4}, rng);
    ActNorm<double> an(3);
    an.set_values({0.7, 1.3, 2.1}, {0.2, -0.1, 0.05});
    InvConv<double> ic(3, rng, false);
    Coupling<double> cp(3, 4, 16, rng);
    Injector<double> inj(3, 4, 16, rng);
    cp.fault_logdet_sign = o.fault_coupling_logdet_sign;
    ParamRefs<double> refs;
    ic.collect("ic", refs);
    cp.collect("cp", refs);
    inj.collect("inj", refs);
    perturb_params(refs, rng, 0.3);
    rec.below("actnorm_rel_err", jacobian_rel_err([&](const TensorD& v) { return an.forward(v); }, x), 1e-5);
    rec.below("invconv_rel_err", jacobian_rel_err([&](const TensorD& v) { return ic.forward(v); }, x), 1e-5);
    rec.below("coupling_rel_err", jacobian_rel_err([&](const TensorD& v) { return cp.forward(v, c); }, x), 1e-5);
    rec.below("injector_rel_err", jacobian_rel_err([&](const TensorD& v) { return inj.forward(v, c); }, x), 1e-5);

    const auto lay = flow_layout(8);
    FlowModel<double> m(lay, {derive_seed(o.seed, "logdet_model"), false});
    auto params = m.params();
    perturb_params(params, rng, 0.05);
    m.set_fault_coupling_logdet_sign(o.fault_coupling_logdet_sign);
    auto cond = random_cond(lay, rng);
    auto y = random_normal<double>({1, 3, 8, 8}, rng);
    const double analytic = flow_forward(y, cond, m).logdet.item();
    auto jac = numeric_jacobian(
        [&](const TensorD& v) {
          auto z = flow_forward(v, cond, m).z;
          std::vector<TensorD> flat;
          for (const auto& p : z) flat.push_back(op::reshape(p, {p.numel()}));
          return op::concat(flat, 0);
        },
        y);
    const double numeric = log_abs_det(jac, y.numel());
    rec.below("composite_rel_err", std::abs(analytic - numeric) / std::max(std::abs(numeric), 1e-12), 1e-4);
  });
}

SuiteResult check_gradcheck(const SelfcheckOptions& o) {
  return guarded("gradcheck", [&](Recorder& rec) {
    const auto lay = flow_layout(8);
    auto model = SrModel<double>::make(lay, 2, EncoderConfig{}, derive_seed(o.seed, "gradcheck_model"));
    auto params = model.params();
    Rng rng(derive_seed(o.seed, "gradcheck"));
    // Larger perturbations make the 36-step inverse overflow from the
    // encoder mean, and actnorm data init on one 8x8 image leaves 4 samples
    // per channel at the last level, so neither is used here.
    perturb_params(params, rng, 0.01);
    auto x = random_uniform<double>({1, 3, 4, 4}, rng);
    auto y = random_uniform<double>({1, 3, 8, 8}, rng);
    auto coords = sample_param_coords(params, rng, o.gradcheck_coords);
    const auto prior_seed = derive_seed(o.seed, "gradcheck_prior");
    auto report = gradcheck_params(
        [&] {
          Rng r(prior_seed);
          return total_loss(model, x, y, r).total;
        },
        coords);
    rec.note("coordinates", static_cast<double>(coords.size()));
    rec.below("max_rel_error", report.max_rel_error, 1e-4);
    if (!report.deterministic) rec.below("nondeterministic_loss", 1.0, 0.0);
  });
}

SuiteResult check_density(const SelfcheckOptions& o) {
  return guarded("density_normalization", [&](Recorder& rec) {
    ToyFlow flow(derive_seed(o.seed, "toy_flow"));
    rec.near("integral", toy_density_integral(flow, 6.0, 0.05), 1.0, 0.01);
  });
}

SuiteResult check_cr_invariance(const SelfcheckOptions& o) {
  return guarded("cr_invariance", [&](Recorder& rec) {
    Rng rng(derive_seed(o.seed, "cr"));
    double inv = 0, sums = 0, commute = 0;
    for (int i = 0; i < o.cr_images; ++i) {
      auto img = random_uniform<double>({1, 3, 16, 16}, rng);
      const auto cr = cr_map(img);
      for (double k : {0.1, 0.5, 2.0}) inv = std::max(inv, max_abs_diff(cr_map(op::mul_scalar(img, k)), cr));
      for (std::int64_t p = 0; p < 256; ++p) {
        double s = 0;
        for (int c = 0; c < 3; ++c) s += cr.data()[static_cast<std::size_t>(c * 256 + p)];
        sums = std::max(sums, std::abs(s - 1.0));
      }
      for (std::int64_t f : {2, 4}) {
        commute = std::max(commute, max_abs_diff(cr_map(nearest_downsample(img, f)), nearest_downsample(cr, f)));
      }
    }
    rec.note("images", o.cr_images);
    rec.below("max_scale_diff", inv, 1e-6);
    rec.below("max_channel_sum_error", sums, 1e-6);
    rec.below("downsample_commutation_diff", commute, std::numeric_limits<double>::min());
  });
}

SuiteResult check_noise(const SelfcheckOptions& o) {
  return guarded("noise_variance", [&](Recorder& rec) {
    for (double level : {0.1, 0.5, 0.9}) {
      Rng rng(derive_seed(o.seed, "noise", static_cast<std::uint64_t>(level * 10)));
      auto y = add_noise(TensorD::full({1, 1, 256, 256}, level), 0.01, 0.001, rng);
      double m = 0, v = 0;
      for (double e : y.data()) m += e;
      m /= 65536;
      for (double e : y.data()) v += (e - m) * (e - m);
      v /= 65535;
      const double expect = level * 0.01 + 0.001;
      char name[64];
      std::snprintf(name, sizeof name, "variance_rel_err_x%.1f", level);
      rec.below(name, std::abs(v - expect) / expect, 0.1);
    }
    Rng rng(derive_seed(o.seed, "sampler"));
    double amin = 1e9, amax = -1e9, bmin = 1e9, bmax = -1e9, gmin = 1e9, gmax = -1e9, gsum = 0, ls_min = 1e9,
           ls_max = -1e9, resid = 0, resid2 = 0;
    const int n = o.sampler_draws;
    for (int i = 0; i < n; ++i) {
      const auto p = sample_degrade_params(rng);
      amin = std::min(amin, p.alpha);
      amax = std::max(amax, p.alpha);
      bmin = std::min(bmin, p.beta);
      bmax = std::max(bmax, p.beta);
      gmin = std::min(gmin, p.gamma);
      gmax = std::max(gmax, p.gamma);
      gsum += p.gamma;
      const double ls = std::log(p.sigma_s_sq);
      ls_min = std::min(ls_min, ls);
      ls_max = std::max(ls_max, ls);
      const double r = std::log(p.sigma_r_sq) - kReadSlope * ls;
      resid += r;
      resid2 += r * r;
    }
    rec.near("gamma_mean", gsum / n, 3.25, 0.02);
    const bool in_range = amin >= kAlphaMin && amax <= kAlphaMax && bmin >= kBetaMin && bmax <= kBetaMax &&
                          gmin >= kGammaMin && gmax <= kGammaMax && ls_min >= std::log(kShotVarMin) - 1e-12 &&
                          ls_max <= std::log(kShotVarMax) + 1e-12;
    rec.below("sampler_out_of_range", in_range ? 0.0 : 1.0, 0.5);
    const double rm = resid / n, rs = std::sqrt(resid2 / n - rm * rm);
    rec.near("read_noise_residual_mean", rm, 0.0, 0.01);
    rec.near("read_noise_residual_std", rs, kReadStd, 0.01);
  });
}

SuiteResult check_isp(const SelfcheckOptions& o) {
  return guarded("isp_roundtrip", [&](Recorder& rec) {
    const auto images = isp_images(o);
    Rng rng(derive_seed(o.seed, "isp"));
    double plain = 0, mosaiced = 0, worst = 0;
    for (const auto& img : images) {
      const auto isp = sample_isp_params(rng);
      auto mae = [&](const TensorD& a) {
        double s = 0;
        for (std::size_t i = 0; i < a.data().size(); ++i) s += std::abs(a.data()[i] - img.data()[i]);
        return s / static_cast<double>(a.data().size());
      };
      plain = std::max(plain, mae(process(unprocess(img, isp, false), isp)));
      const double m = mae(process(unprocess(img, isp, true), isp));
      mosaiced += m / static_cast<double>(images.size());
      worst = std::max(worst, m);
    }
    // Mosaic bound applies to the mean over the image set; the worst single
    // image is reported alongside.
    rec.note("mae_with_mosaic_worst_image", worst);
    rec.note("images", static_cast<double>(images.size()));
    rec.below("mae_without_mosaic", plain, 1e-5);
    rec.below("mae_with_mosaic", mosaiced, 2e-2);
  });
}

SuiteResult check_metrics(const SelfcheckOptions& o) {
  return guarded("metric_oracles", [&](Recorder& rec) {
    Rng rng(derive_seed(o.seed, "metrics"));
    auto a = random_uniform<double>({1, 3, 32, 32}, rng, 0.0, 0.8);
    rec.near("psnr_offset_0.1_db", psnr(a, op::add_scalar(a, 0.1)), 20.0, 1e-9);
    rec.near("ssim_identical", ssim(a, a), 1.0, 1e-9);
    const double closed = (2 * 0.4 * 0.6 + 1e-4) / (0.4 * 0.4 + 0.6 * 0.6 + 1e-4);
    rec.near("ssim_constant_pair", ssim(TensorD::full({1, 3, 16, 16}, 0.4), TensorD::full({1, 3, 16, 16}, 0.6)), closed,
             1e-6);
  });
}

const std::vector<std::string>& suite_names() {
  static const std::vector<std::string> names{"invertibility", "logdet",       "gradcheck",     "density",
                                              "cr_invariance", "noise",        "isp_roundtrip", "metrics"};
  return names;
}

SuiteResult run_suite(const std::string& name, const SelfcheckOptions& o) {
  if (name == "invertibility") return check_invertibility(o);
  if (name == "logdet") return check_logdet(o);
  if (name == "gradcheck") return check_gradcheck(o);
  if (name == "density") return check_density(o);
  if (name == "cr_invariance") return check_cr_invariance(o);
  if (name == "noise") return check_noise(o);
  if (name == "isp_roundtrip") return check_isp(o);
  if (name == "metrics") return check_metrics(o);
  throw std::invalid_argument("unknown suite '" + name + "'");
}

std::string suites_json(const std::vector<SuiteResult>& results) {
  nlohmann::json j = nlohmann::json::array();
  for (const auto& r : results) {
    nlohmann::json m = nlohmann::json::object();
    for (const auto& [k, v] : r.measured) m[k] = v;
    j.push_back({{"suite", r.name}, {"passed", r.passed}, {"measured", m}, {"detail", r.detail}, {"seconds", r.seconds}});
  }
  nlohmann::json top{{"suites", j},
                     {"all_passed", std::all_of(results.begin(), results.end(), [](const auto& r) { return r.passed; })}};
  return top.dump(2);
}

std::string suites_table(const std::vector<SuiteResult>& results) {
  std::string out;
  char line[512];
  for (const auto& r : results) {
    std::snprintf(line, sizeof line, "%-24s %s  %7.2fs  %s\n", r.name.c_str(), r.passed ? "PASS" : "FAIL", r.seconds,
                  r.detail.c_str());
    out += line;
  }
  return out;
}

}  // namespace crflow
