#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "learngene/tensor.hpp"

namespace lg {

/// p <- p - lr * (g + weight_decay * p) for every parameter, then clears the
/// gradients. Parameters without a gradient buffer are left untouched.
void sgd_step(std::span<Tensor> params, float lr, float weight_decay = 0.0f);

/// Explicit-gradient form: p <- p - lr * g, shapes must match.
void sgd_step(std::span<Tensor> params, std::span<const std::vector<float>> grads, float lr);

/// Cosine annealing from `base` to 0 over `total` steps; step in [0, total).
float cosine_lr(float base, std::size_t step, std::size_t total);

/// Sum of squared gradient entries over a parameter set.
double grad_norm_sq(std::span<const Tensor> params);

void zero_grads(std::span<Tensor> params);

}  // namespace lg
