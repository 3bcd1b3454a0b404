#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "learngene/tensor.hpp"

// Differentiable primitives. Every function validates shapes and throws
// InvalidArgument on mismatch; every output is checked for finiteness.
namespace lg {

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, float factor);
Tensor square(const Tensor& x);

/// x + b where b's shape is a trailing suffix of x's shape (bias, position
/// embedding).
Tensor add_broadcast(const Tensor& x, const Tensor& b);

/// Scalar sum / mean over all elements, accumulated in double.
Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
/// [B, ...] -> [B]: mean over every axis but the first.
Tensor row_mean(const Tensor& x);
/// Removes `axis` by averaging over it.
Tensor mean_axis(const Tensor& x, std::size_t axis);

Tensor matmul(const Tensor& a, const Tensor& b);
/// Batched product [N,m,k] x [N,k,n] -> [N,m,n].
Tensor bmm(const Tensor& a, const Tensor& b);
/// Affine map over the last axis: x[..., in] * w[out, in]^T + bias[out].
Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias);

Tensor reshape(const Tensor& x, Shape shape);
Tensor permute(const Tensor& x, const std::vector<std::size_t>& order);

/// Softmax over the last axis (max-subtracted).
Tensor softmax(const Tensor& x);
Tensor relu(const Tensor& x);
/// min(max(x, 0), 6); derivative is 1 strictly inside (0, 6), else 0.
Tensor relu6(const Tensor& x);

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, float eps = 1e-5f);

/// Per-channel normalization over axis 1 of [B,C] or [B,C,H,W]. In training
/// mode uses batch statistics and folds them into the running buffers with
/// `momentum` weight on the old value; in evaluation mode uses the buffers.
Tensor batch_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, Tensor& running_mean,
                  Tensor& running_var, bool training, float momentum = 0.9f, float eps = 1e-5f);

/// Stride-1 2-D convolution of [B,C,H,W] with [O,C,k,k]; zero padding `pad`.
/// `bias` may be undefined.
Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias, std::size_t pad);

/// Mean negative log-likelihood of the true class; [B,C] logits.
Tensor cross_entropy(const Tensor& logits, std::span<const int> labels);

}  // namespace lg
