#pragma once

// Full-reference image quality: PSNR and SSIM on f64 NCHW images.

#include <filesystem>
#include <string>
#include <vector>

#include "crflow/tensor.hpp"

namespace crflow {

inline constexpr double kPsnrCap = 100.0;

// 10 log10(peak^2 / MSE) over all elements, capped at 100 dB.
double psnr(const TensorD& a, const TensorD& b, double peak = 1.0);

// Mean local SSIM, 11x11 Gaussian window (sigma 1.5), C1 = 0.01^2,
// C2 = 0.03^2, valid positions only. RGB inputs are reduced to Rec. 601
// luminance. For N > 1 the per-image values are averaged.
double ssim(const TensorD& a, const TensorD& b);

// Rec. 601 luminance, [N, 3, H, W] -> [N, 1, H, W]. 1-channel input passes.
TensorD luminance(const TensorD& rgb);

struct ImageScore {
  std::string name;
  double psnr_db = 0.0;
  double ssim = 0.0;
};

struct MetricReport {
  std::vector<ImageScore> per_image;
  double psnr_db = 0.0;
  double ssim = 0.0;

  void add(ImageScore s);
  std::string to_json() const;
};

// Pairs files by name: every PNG in `pred` needs a same-named file in `gt`.
// A trailing "_pred"/"_hr"/"_lr" before the extension is ignored when
// matching.
MetricReport evaluate_dirs(const std::filesystem::path& pred, const std::filesystem::path& gt);

}  // namespace crflow
