#pragma once

// Differentiable tensor ops. Every op is a pure function of its inputs.
//
// Broadcasting is restricted to trailing singleton dims of the right-hand
// operand: b may have shape a.shape[0:k] + [1, ..., 1] for any k (a scalar
// shape of all ones included). Per-channel affine maps on NCHW data use the
// dedicated *_channel ops instead.

#include <optional>
#include <type_traits>
#include <vector>

#include "crflow/tensor.hpp"

namespace crflow::ops {

enum class Elementwise { kAdd, kSub, kMul, kDiv, kExp, kLog, kNeg, kSigmoid, kTanh };

// Dispatch form; `b` is required for binary kinds and ignored otherwise.
template <Real T>
Tensor<T> elementwise(Elementwise op, const Tensor<T>& a, const Tensor<T>* b = nullptr);

template <Real T> Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <Real T> Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <Real T> Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
// Throws DomainError when any divisor is zero.
template <Real T> Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b);

template <Real T> Tensor<T> add_scalar(const Tensor<T>& a, T s);
template <Real T> Tensor<T> mul_scalar(const Tensor<T>& a, T s);
template <Real T> Tensor<T> div_scalar(const Tensor<T>& a, T s);

template <Real T> Tensor<T> neg(const Tensor<T>& a);
template <Real T> Tensor<T> exp(const Tensor<T>& a);
// Throws DomainError on non-positive input.
template <Real T> Tensor<T> log(const Tensor<T>& a);
template <Real T> Tensor<T> sigmoid(const Tensor<T>& a);
template <Real T> Tensor<T> tanh(const Tensor<T>& a);
// tanh approximation of GELU.
template <Real T> Tensor<T> gelu(const Tensor<T>& a);
template <Real T> Tensor<T> relu(const Tensor<T>& a);
template <Real T> Tensor<T> abs(const Tensor<T>& a);
template <Real T> Tensor<T> square(const Tensor<T>& a);

// x: [N, C, ...]; v: [C].
template <Real T> Tensor<T> add_channel(const Tensor<T>& x, const Tensor<T>& v);
template <Real T> Tensor<T> mul_channel(const Tensor<T>& x, const Tensor<T>& v);

template <Real T> Tensor<T> sum(const Tensor<T>& a);
template <Real T> Tensor<T> mean(const Tensor<T>& a);
// [N, ...] -> [N]
template <Real T> Tensor<T> sum_per_sample(const Tensor<T>& a);
template <Real T> Tensor<T> softmax(const Tensor<T>& a, std::int64_t axis);

template <Real T> Tensor<T> reshape(const Tensor<T>& a, Shape shape);
template <Real T> Tensor<T> permute(const Tensor<T>& a, const std::vector<std::int64_t>& order);
template <Real T> Tensor<T> slice(const Tensor<T>& a, std::int64_t axis, std::int64_t start, std::int64_t length);
template <Real T> Tensor<T> concat(const std::vector<Tensor<T>>& parts, std::int64_t axis);
template <Real T>
Tensor<T> index_select(const Tensor<T>& a, std::int64_t axis, const std::vector<std::int64_t>& index);
// Zero padding of the last two dims.
template <Real T>
Tensor<T> pad2d(const Tensor<T>& x, std::int64_t top, std::int64_t bottom, std::int64_t left, std::int64_t right);
template <Real T> Tensor<T> upsample_nearest(const Tensor<T>& x, std::int64_t factor);

// x: [N, C, H, W]; w: [O, C/groups, K, K]; bias: [O].
template <Real T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, std::type_identity_t<const Tensor<T>*> bias, std::int64_t stride,
                 std::int64_t pad, std::int64_t groups = 1);

template <Real T> Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);
// [B, M, K] x [B, K, N] with optional transposition of the trailing two dims.
template <Real T>
Tensor<T> bmm(const Tensor<T>& a, const Tensor<T>& b, bool transpose_a = false, bool transpose_b = false);
template <Real T> Tensor<T> transpose(const Tensor<T>& a);
// Inverse of a triangular matrix by substitution. Entries outside the
// triangle are ignored (treated as zero).
template <Real T> Tensor<T> triangular_inverse(const Tensor<T>& a, bool lower);
// [C] -> [C, C] diagonal matrix.
template <Real T> Tensor<T> diag(const Tensor<T>& v);

template <Real T> Tensor<T> eye(std::int64_t n);

}  // namespace crflow::ops
