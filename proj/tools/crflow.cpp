// crflow command line: gen-data, train, infer, eval, crmap-demo, selfcheck.

#include <CLI11.hpp>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <json.hpp>
#include <sstream>

#include "crflow/crmap.hpp"
#include "crflow/degrade.hpp"
#include "crflow/image_io.hpp"
#include "crflow/metrics.hpp"
#include "crflow/random_tensor.hpp"
#include "crflow/selfcheck.hpp"
#include "crflow/train.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace crflow;

namespace {

struct Globals {
  std::uint64_t seed = 0;
  std::string precision;  // empty: subcommand default
  int threads = 1;
};

std::string version_string() {
  return std::string("crflow ") + CRFLOW_VERSION + " (checkpoint format LLSF v" + std::to_string(kCheckpointVersion) +
         ")";
}

void write_config(const fs::path& dir, const std::string& name, const json& j) {
  if (!dir.empty()) fs::create_directories(dir);
  std::ofstream out(dir / name);
  if (!out) throw IoError("cannot write " + (dir / name).string());
  out << j.dump(2) << '\n';
}

json globals_json(const Globals& g, const std::string& cmd, const std::string& precision) {
  return {{"command", cmd}, {"version", CRFLOW_VERSION}, {"seed", g.seed}, {"precision", precision}, {"threads", g.threads}};
}

fs::path parent_or_cwd(const fs::path& p) { return p.has_parent_path() ? p.parent_path() : fs::path("."); }

std::string read_text(const fs::path& p) {
  std::ifstream in(p);
  if (!in) throw IoError("cannot read " + p.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::string strip_suffix(std::string stem, const std::string& suffix) {
  if (stem.size() > suffix.size() && stem.compare(stem.size() - suffix.size(), suffix.size(), suffix) == 0) {
    stem.resize(stem.size() - suffix.size());
  }
  return stem;
}

// ---- gen-data ----

struct GenArgs {
  fs::path out, in;
  int count = 64;
  int scale = 2;
  std::int64_t size = 32;
  bool no_mosaic = false;
  double gamma_min = kGammaMin, gamma_max = kGammaMax;
};

int run_gen(const Globals& g, const GenArgs& a) {
  DatasetOptions o;
  o.in_dir = a.in;
  o.out_dir = a.out;
  o.count = a.count;
  o.seed = g.seed;
  o.scene_size = a.size;
  o.cfg.scale = a.scale;
  o.cfg.mosaic = !a.no_mosaic;
  o.cfg.gamma_min = a.gamma_min;
  o.cfg.gamma_max = a.gamma_max;
  auto j = globals_json(g, "gen-data", "f64");
  j["out"] = a.out.string();
  j["in"] = a.in.string();
  j["count"] = a.count;
  j["scale"] = a.scale;
  j["size"] = a.size;
  j["mosaic"] = !a.no_mosaic;
  j["gamma_min"] = a.gamma_min;
  j["gamma_max"] = a.gamma_max;
  const auto report = generate_dataset(o);
  write_config(a.out, "run_config.json", j);
  std::printf("wrote %zu pairs to %s (%zu skipped)\n", report.entries.size(), a.out.string().c_str(),
              report.skipped.size());
  for (const auto& s : report.skipped) std::fprintf(stderr, "skipped %s\n", s.c_str());
  return 0;
}

// ---- train ----

struct TrainArgs {
  fs::path config, data, out, resume, log;
  int steps = -1;
  bool seed_given = false;
  bool quiet = false;
};

template <Real T>
void train_as(const TrainConfig& cfg, const PairSet& data, const TrainOptions& opts) {
  const auto r = train_loop<T>(cfg, data, opts);
  if (!r.log.empty()) {
    const auto& last = r.log.back();
    std::printf("step %lld nll %.6f l1 %.6f total %.6f\n", static_cast<long long>(last.step), last.nll, last.l1,
                last.total);
  }
}

int run_train(const Globals& g, const TrainArgs& a) {
  TrainConfig cfg = a.config.empty() ? TrainConfig{} : TrainConfig::from_json(read_text(a.config));
  if (a.seed_given) cfg.seed = g.seed;
  if (!g.precision.empty()) cfg.precision = g.precision;
  cfg.threads = g.threads;
  if (a.steps >= 0) cfg.total_steps = a.steps;
  cfg.validate();
  const auto data = load_pairs(a.data, cfg.gamma_min, cfg.gamma_max);
  TrainOptions opts;
  opts.checkpoint_out = a.out;
  opts.log_csv = a.log.empty() ? parent_or_cwd(a.out) / (a.out.stem().string() + "_log.csv") : a.log;
  opts.resume = a.resume;
  opts.verbose = !a.quiet;
  auto j = globals_json(g, "train", cfg.precision);
  j["seed"] = cfg.seed;
  j["data"] = a.data.string();
  j["out"] = a.out.string();
  j["resume"] = a.resume.string();
  j["log"] = opts.log_csv.string();
  j["pairs"] = data.size();
  j["train"] = json::parse(cfg.to_json());
  write_config(parent_or_cwd(a.out), a.out.stem().string() + "_config.json", j);
  if (cfg.precision == "f64")
    train_as<double>(cfg, data, opts);
  else
    train_as<float>(cfg, data, opts);
  return 0;
}

// ---- infer ----

struct InferArgs {
  fs::path ckpt, in, out;
};

template <Real T>
int infer_as(const InferArgs& a) {
  auto [cfg, model] = load_model<T>(a.ckpt);
  std::vector<std::pair<fs::path, fs::path>> jobs;
  if (fs::is_directory(a.in)) {
    fs::create_directories(a.out);
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(a.in)) {
      const auto stem = e.path().stem().string();
      if (e.path().extension() == ".png" && strip_suffix(stem, "_hr") == stem) files.push_back(e.path());
    }
    std::sort(files.begin(), files.end());
    for (const auto& f : files) jobs.emplace_back(f, a.out / (strip_suffix(f.stem().string(), "_lr") + "_pred.png"));
  } else {
    jobs.emplace_back(a.in, a.out);
  }
  for (const auto& [src, dst] : jobs) {
    const auto x = cast<T>(read_png(src));
    const auto y = infer(model, x);
    write_png(dst, cast<double>(y));
    std::printf("%s -> %s (%lldx%lld)\n", src.string().c_str(), dst.string().c_str(), static_cast<long long>(y.dim(3)),
                static_cast<long long>(y.dim(2)));
  }
  return 0;
}

int run_infer(const Globals& g, const InferArgs& a) {
  std::string precision = g.precision;
  if (precision.empty()) precision = load_model<float>(a.ckpt).first.precision;
  auto j = globals_json(g, "infer", precision);
  j["ckpt"] = a.ckpt.string();
  j["in"] = a.in.string();
  j["out"] = a.out.string();
  const auto out_dir = fs::is_directory(a.in) ? a.out : parent_or_cwd(a.out);
  write_config(out_dir, "infer_config.json", j);
  return precision == "f64" ? infer_as<double>(a) : infer_as<float>(a);
}

// ---- eval ----

struct EvalArgs {
  fs::path pred, gt, out;
};

int run_eval(const Globals& g, const EvalArgs& a) {
  const auto report = evaluate_dirs(a.pred, a.gt);
  const auto out = a.out.empty() ? a.pred / "eval_report.json" : a.out;
  auto j = globals_json(g, "eval", "f64");
  j["pred"] = a.pred.string();
  j["gt"] = a.gt.string();
  j["out"] = out.string();
  write_config(parent_or_cwd(out), "eval_config.json", j);
  std::ofstream(out) << report.to_json() << '\n';
  std::printf("images %zu  PSNR %.4f dB  SSIM %.6f\n", report.per_image.size(), report.psnr_db, report.ssim);
  return 0;
}

// ---- crmap-demo ----

struct CrArgs {
  fs::path in, out;
  int downsample = 1;
};

int run_crmap(const Globals& g, const CrArgs& a) {
  const auto img = read_png(a.in);
  auto cr = cr_map(img);
  if (a.downsample > 1) cr = nearest_downsample(cr, a.downsample);
  write_png(a.out, cr);
  auto j = globals_json(g, "crmap-demo", "f64");
  j["in"] = a.in.string();
  j["out"] = a.out.string();
  j["downsample"] = a.downsample;
  write_config(parent_or_cwd(a.out), "crmap_config.json", j);
  const auto dark = cr_map(ops::mul_scalar(img, 0.25));
  double inv = 0;
  for (std::size_t i = 0; i < dark.data().size(); ++i) {
    inv = std::max(inv, std::abs(dark.data()[i] - cr_map(img).data()[i]));
  }
  std::printf("%s -> %s  max |CR(0.25 I) - CR(I)| = %.3g\n", a.in.string().c_str(), a.out.string().c_str(), inv);
  return 0;
}

// ---- selfcheck ----

struct CheckArgs {
  std::vector<std::string> suites;
  fs::path report = "selfcheck_report.json";
  std::string fault;
  fs::path isp_images;
};

int run_selfcheck(const Globals& g, const CheckArgs& a) {
  SelfcheckOptions o;
  o.seed = g.seed;
  o.fault_coupling_logdet_sign = a.fault == "coupling-logdet-sign";
  o.isp_images = a.isp_images;
  const auto names = a.suites.empty() ? suite_names() : a.suites;
  auto j = globals_json(g, "selfcheck", "f64");
  j["suites"] = names;
  j["inject_fault"] = a.fault;
  j["isp_images"] = a.isp_images.string();
  j["report"] = a.report.string();
  write_config(parent_or_cwd(a.report), "selfcheck_config.json", j);
  std::vector<SuiteResult> results;
  for (const auto& n : names) {
    results.push_back(run_suite(n, o));
    std::fputs(suites_table({results.back()}).c_str(), stdout);
    std::fflush(stdout);
  }
  std::ofstream(a.report) << suites_json(results) << '\n';
  for (const auto& r : results) {
    if (!r.passed) {
      std::printf("selfcheck FAILED: %s (%s)\n", r.name.c_str(), r.detail.c_str());
      return 1;
    }
  }
  std::printf("selfcheck passed: %zu suites\n", results.size());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Low-light image super-resolution with a conditional normalizing flow"};
  app.name("crflow");
  app.set_version_flag("--version", version_string());
  Globals g;
  app.add_option("--seed", g.seed, "Run seed (all randomness derives from it)");
  app.add_option("--precision", g.precision, "Floating point precision")->check(CLI::IsMember({"f32", "f64"}));
  app.add_option("--threads", g.threads, "Worker threads (computation is single-threaded)")->check(CLI::PositiveNumber);
  app.require_subcommand(1);

  GenArgs gen;
  auto* c_gen = app.add_subcommand("gen-data", "Generate synthetic low-light low-resolution pairs");
  c_gen->add_option("--out", gen.out, "Output directory")->required();
  c_gen->add_option("--in", gen.in, "Directory of clean PNGs (default: procedural scenes)")->check(CLI::ExistingDirectory);
  c_gen->add_option("--count", gen.count, "Number of pairs")->check(CLI::NonNegativeNumber);
  c_gen->add_option("--scale", gen.scale, "Downsampling factor")->check(CLI::IsMember({2, 4}));
  c_gen->add_option("--size", gen.size, "HR side of procedural scenes")->check(CLI::PositiveNumber);
  c_gen->add_flag("--no-mosaic", gen.no_mosaic, "Skip the Bayer mosaic in the RAW stage");
  c_gen->add_option("--gamma-min", gen.gamma_min, "Lower bound of the darkening exponent");
  c_gen->add_option("--gamma-max", gen.gamma_max, "Upper bound of the darkening exponent");

  TrainArgs tr;
  auto* c_train = app.add_subcommand("train", "Train on a generated dataset");
  c_train->add_option("--config", tr.config, "Training config JSON")->check(CLI::ExistingFile);
  c_train->add_option("--data", tr.data, "Dataset directory from gen-data")->required()->check(CLI::ExistingDirectory);
  c_train->add_option("--out", tr.out, "Checkpoint path (.llsf)")->required();
  c_train->add_option("--resume", tr.resume, "Checkpoint to resume from")->check(CLI::ExistingFile);
  c_train->add_option("--log", tr.log, "CSV log path (default: next to the checkpoint)");
  c_train->add_option("--steps", tr.steps, "Override total_steps")->check(CLI::NonNegativeNumber);
  c_train->add_flag("--quiet", tr.quiet, "No progress lines");

  InferArgs inf;
  auto* c_infer = app.add_subcommand("infer", "Super-resolve and enhance low-light images");
  c_infer->add_option("--ckpt", inf.ckpt, "Checkpoint")->required()->check(CLI::ExistingFile);
  c_infer->add_option("--in", inf.in, "Input PNG or directory")->required()->check(CLI::ExistingPath);
  c_infer->add_option("--out", inf.out, "Output PNG or directory")->required();

  EvalArgs ev;
  auto* c_eval = app.add_subcommand("eval", "PSNR / SSIM of predictions against ground truth");
  c_eval->add_option("--pred", ev.pred, "Prediction directory")->required()->check(CLI::ExistingDirectory);
  c_eval->add_option("--gt", ev.gt, "Ground-truth directory")->required()->check(CLI::ExistingDirectory);
  c_eval->add_option("--out", ev.out, "Report JSON (default: <pred>/eval_report.json)");

  CrArgs cr;
  auto* c_cr = app.add_subcommand("crmap-demo", "Write the color ratio map of an image");
  c_cr->add_option("--in", cr.in, "Input PNG")->required()->check(CLI::ExistingFile);
  c_cr->add_option("--out", cr.out, "Output PNG")->required();
  c_cr->add_option("--downsample", cr.downsample, "Nearest downsampling factor")->check(CLI::PositiveNumber);

  CheckArgs ck;
  auto* c_check = app.add_subcommand("selfcheck", "Run the numerical invariant suites");
  c_check->add_option("--suite", ck.suites, "Suite name (repeatable; default all)")
      ->check(CLI::IsMember(suite_names()));
  c_check->add_option("--report", ck.report, "Report JSON path");
  c_check->add_option("--inject-fault", ck.fault, "Negative control")->check(CLI::IsMember({"coupling-logdet-sign"}));
  c_check->add_option("--isp-images", ck.isp_images, "PNG directory for the ISP suite")
      ->check(CLI::ExistingDirectory);

  if (argc < 2) {
    std::fputs(app.help().c_str(), stderr);
    return 2;
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::Success& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    std::fputs(app.help().c_str(), stderr);
    return 2;
  }
  tr.seed_given = app.count("--seed") > 0;

  try {
    if (c_gen->parsed()) return run_gen(g, gen);
    if (c_train->parsed()) return run_train(g, tr);
    if (c_infer->parsed()) return run_infer(g, inf);
    if (c_eval->parsed()) return run_eval(g, ev);
    if (c_cr->parsed()) return run_crmap(g, cr);
    if (c_check->parsed()) return run_selfcheck(g, ck);
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 2;
}
