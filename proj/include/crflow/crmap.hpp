#pragma once

// Color ratio maps and the latent prior built from them.

#include <vector>

#include "crflow/flow.hpp"
#include "crflow/rng.hpp"
#include "crflow/tensor.hpp"

namespace crflow {

inline constexpr double kCrEps = 1e-6;

// out[c] = image[c] / max(sum over channels, eps). Not differentiable.
// Throws DomainError on negative input.
template <Real T>
Tensor<T> cr_map(const Tensor<T>& image, double eps = kCrEps);

// Subsampling at stride s, keeping the top-left pixel of each block.
template <Real T>
Tensor<T> nearest_downsample(const Tensor<T>& image, std::int64_t s);

// The flow's squeeze and split applied with no learned layers. Differentiable.
template <Real T>
LatentPyramid<T> rearrange_to_pyramid(const Tensor<T>& mean_image, const FlowLayout& layout);
template <Real T>
Tensor<T> unrearrange_pyramid(const LatentPyramid<T>& pyramid, const FlowLayout& layout);

// Per sample, picks cr_mean with probability 0.8 and enc_mean otherwise.
// `picked_cr`, when given, receives the draw for each sample.
inline constexpr double kCrPriorProbability = 0.8;
template <Real T>
LatentPyramid<T> select_prior_mean(const LatentPyramid<T>& enc_mean, const LatentPyramid<T>& cr_mean, Rng& rng,
                                   std::vector<bool>* picked_cr = nullptr);

// Sum over all elements of log N(z; mean, 1). Scalar.
template <Real T>
Tensor<T> latent_log_density(const LatentPyramid<T>& z, const LatentPyramid<T>& mean);
// Same, per sample: [N].
template <Real T>
Tensor<T> latent_log_density_per_sample(const LatentPyramid<T>& z, const LatentPyramid<T>& mean);

}  // namespace crflow
