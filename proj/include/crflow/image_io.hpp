#pragma once

// 8-bit PNG I/O. Values map to [0, 1] by /255 and back by rounding.

#include <filesystem>
#include <stdexcept>

#include "crflow/tensor.hpp"

namespace crflow {

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Gray, palette, alpha and 16-bit inputs are converted to 8-bit RGB.
// Returns [1, 3, H, W].
TensorD read_png(const std::filesystem::path& path);

// image: [1, 3, H, W] or [3, H, W]; values are clamped to [0, 1].
void write_png(const std::filesystem::path& path, const TensorD& image);

}  // namespace crflow
