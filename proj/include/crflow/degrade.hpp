#pragma once

// Synthetic low-light low-resolution pairs: darkening, bicubic downsampling,
// inverse ISP to RAW, shot/read noise, forward ISP back to sRGB.
//
// Images are f64 NCHW tensors with values in [0, 1]. None of these
// functions record on the tape.

#include <array>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "crflow/rng.hpp"
#include "crflow/tensor.hpp"

namespace crflow {

struct DegradeParams {
  double alpha = 1.0;
  double beta = 1.0;
  double gamma = 1.0;
  double sigma_s_sq = 0.0;
  double sigma_r_sq = 0.0;
};

inline constexpr double kAlphaMin = 0.9, kAlphaMax = 1.0;
inline constexpr double kBetaMin = 0.5, kBetaMax = 1.0;
inline constexpr double kGammaMin = 1.5, kGammaMax = 5.0;
inline constexpr double kShotVarMin = 1e-4, kShotVarMax = 0.012;
inline constexpr double kReadSlope = 2.18, kReadStd = 0.26;

struct DegradeConfig {
  int scale = 2;
  bool mosaic = true;
  // When set, every pair uses these values instead of sampling.
  std::optional<DegradeParams> fixed;
  // Sub-range of the gamma law, for dark-level curricula.
  double gamma_min = kGammaMin;
  double gamma_max = kGammaMax;
};

// alpha ~ U(0.9, 1), beta ~ U(0.5, 1), gamma ~ U(gamma_min, gamma_max),
// log sigma_s^2 ~ U(ln 1e-4, ln 0.012),
// log sigma_r^2 ~ N(2.18 log sigma_s^2, 0.26) with 0.26 the standard deviation.
DegradeParams sample_degrade_params(Rng& rng, const DegradeConfig& cfg = {});

// beta * (alpha * I)^gamma, clamped to [0, 1].
TensorD darken(const TensorD& image, double alpha, double beta, double gamma);

// Catmull-Rom (a = -0.5) resampling with pixel-area alignment. When
// shrinking, the kernel is stretched by the ratio (antialiasing). Borders
// replicate the edge pixel; weights are normalized per output pixel.
TensorD bicubic_resize(const TensorD& image, std::int64_t out_h, std::int64_t out_w);
TensorD bicubic_down(const TensorD& image, int scale);
TensorD bicubic_up(const TensorD& image, int scale);

struct IspParams {
  double r_gain = 1.0;
  double b_gain = 1.0;
  std::array<double, 9> ccm{1, 0, 0, 0, 1, 0, 0, 0, 1};  // camera RGB -> sRGB, row major
  std::array<double, 9> ccm_inv{1, 0, 0, 0, 1, 0, 0, 0, 1};
  bool smoothstep_crf = true;

  static IspParams identity();
  // Fixed white-preserving CCM with the given gains.
  static IspParams standard(double r_gain, double b_gain);
};

// r_gain ~ U(1.9, 2.4), b_gain ~ U(1.5, 1.9).
IspParams sample_isp_params(Rng& rng);

// f(u) = 3u^2 - 2u^3 on [0, 1] and its inverse 0.5 - sin(asin(1 - 2v) / 3).
double crf_forward(double u);
double crf_inverse(double v);

// RGGB: R at (even, even), G at (even, odd) and (odd, even), B at (odd, odd).
// [N, 3, H, W] -> [N, 1, H, W].
TensorD mosaic(const TensorD& rgb);
// Bilinear interpolation of the missing samples, normalized at borders.
TensorD demosaic(const TensorD& bayer);

struct UnprocessStats {
  std::int64_t below_zero = 0;
  std::int64_t above_one = 0;
};

// Inverse CRF, inverse CCM, mosaic (optional), inverse white balance. RAW
// values outside [0, 1] are kept and counted.
TensorD unprocess(const TensorD& image, const IspParams& isp, bool use_mosaic, UnprocessStats* stats = nullptr);
// White balance, demosaic (when the input is a 1-channel Bayer plane), CCM,
// CRF, clamp to [0, 1].
TensorD process(const TensorD& raw, const IspParams& isp);

// Adds N(0, max(x, 0) * sigma_s_sq + sigma_r_sq) per sample.
TensorD add_noise(const TensorD& raw, double sigma_s_sq, double sigma_r_sq, Rng& rng);

struct DegradedPair {
  TensorD lr;
  TensorD hr;
  DegradeParams params;
  IspParams isp;
  UnprocessStats stats;
};

// x_lr = process(add_noise(unprocess(bicubic_down(darken(I_hr))))). The
// bicubic output is clamped to [0, 1] before entering the ISP.
TensorD degrade_image(const TensorD& hr, const DegradeParams& p, const IspParams& isp, int scale, bool use_mosaic,
                      Rng& rng, UnprocessStats* stats = nullptr);
DegradedPair degrade_pair(const TensorD& hr, const DegradeConfig& cfg, Rng& rng);

// Smooth random scene: gradient background, soft-edged ellipses and
// rectangles, sinusoidal texture. [1, 3, h, w] in [0, 1].
TensorD procedural_scene(Rng& rng, std::int64_t h, std::int64_t w);

struct ManifestEntry {
  std::string id;
  DegradeParams params;
  double r_gain = 1.0;
  double b_gain = 1.0;
  std::uint64_t seed = 0;
  int scale = 2;
  std::string source;
};

struct DatasetReport {
  std::vector<ManifestEntry> entries;
  std::vector<std::string> skipped;
};

struct DatasetOptions {
  std::filesystem::path in_dir;  // empty: procedural scenes
  std::filesystem::path out_dir;
  DegradeConfig cfg;
  int count = 64;
  std::uint64_t seed = 0;
  std::int64_t scene_size = 32;  // HR side of procedural scenes
};

// Writes {id}_lr.png, {id}_hr.png and manifest.json. Source images are
// cropped (top-left) to the nearest multiple of 2 * scale.
DatasetReport generate_dataset(const DatasetOptions& opts);

std::vector<ManifestEntry> read_manifest(const std::filesystem::path& path);

}  // namespace crflow
