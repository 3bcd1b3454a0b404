#include "learngene/optim.hpp"

#include <cmath>
#include <numbers>
#include <string>

namespace lg {

void sgd_step(std::span<Tensor> params, float lr, float weight_decay) {
  if (!(lr >= 0.0f)) throw InvalidArgument("sgd_step: learning rate must be non-negative");
  for (auto& p : params) {
    if (!p.has_grad()) continue;
    auto values = p.mutable_data();
    auto g = p.grad();
    for (std::size_t i = 0; i < values.size(); ++i) {
      values[i] -= lr * (g[i] + weight_decay * values[i]);
      if (!std::isfinite(values[i])) throw NumericError("sgd_step: parameter became non-finite");
    }
    p.zero_grad();
  }
}

void sgd_step(std::span<Tensor> params, std::span<const std::vector<float>> grads, float lr) {
  if (!(lr >= 0.0f)) throw InvalidArgument("sgd_step: learning rate must be non-negative");
  if (params.size() != grads.size()) throw InvalidArgument("sgd_step: parameter/gradient count mismatch");
  for (std::size_t k = 0; k < params.size(); ++k) {
    if (params[k].numel() != grads[k].size()) {
      throw InvalidArgument("sgd_step: shape mismatch for parameter " + std::to_string(k));
    }
  }
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto values = params[k].mutable_data();
    for (std::size_t i = 0; i < values.size(); ++i) values[i] -= lr * grads[k][i];
    params[k].zero_grad();
  }
}

float cosine_lr(float base, std::size_t step, std::size_t total) {
  if (total == 0) return base;
  const double t = static_cast<double>(step) / static_cast<double>(total);
  return static_cast<float>(0.5 * base * (1.0 + std::cos(std::numbers::pi * t)));
}

double grad_norm_sq(std::span<const Tensor> params) {
  double total = 0.0;
  for (const auto& p : params) {
    if (!p.has_grad()) continue;
    for (float g : p.grad()) total += static_cast<double>(g) * g;
  }
  return total;
}

void zero_grads(std::span<Tensor> params) {
  for (auto& p : params) p.zero_grad();
}

}  // namespace lg
