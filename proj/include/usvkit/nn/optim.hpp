#pragma once

#include <cmath>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "usvkit/nn/tensor.hpp"

namespace usv::nn {

struct AdamHyper {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamState {
  std::vector<std::vector<double>> m;
  std::vector<std::vector<double>> v;
  long step = 0;
};

/// One AdamW update: decoupled decay w <- w - lr*wd*w, then the
/// bias-corrected Adam step.
inline void adamw_step(std::span<Tensor> weights, std::span<const Tensor> grads, AdamState& state, double lr,
                       double weight_decay, const AdamHyper& h = {}) {
  if (weights.size() != grads.size()) throw std::invalid_argument("adamw_step: weight/gradient count mismatch");
  for (std::size_t i = 0; i < grads.size(); ++i) {
    if (grads[i].numel() != weights[i].numel())
      throw std::invalid_argument("adamw_step: gradient shape mismatch for tensor " + std::to_string(i));
    for (double g : grads[i].data)
      if (!std::isfinite(g)) throw std::runtime_error("adamw_step: non-finite gradient in tensor " + std::to_string(i));
  }
  if (state.m.empty()) {
    for (const auto& w : weights) {
      state.m.emplace_back(w.numel(), 0.0);
      state.v.emplace_back(w.numel(), 0.0);
    }
  }
  ++state.step;
  const double bc1 = 1.0 - std::pow(h.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(h.beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < weights.size(); ++i) {
    auto& w = weights[i].data;
    const auto& g = grads[i].data;
    auto& m = state.m[i];
    auto& v = state.v[i];
    for (std::size_t k = 0; k < w.size(); ++k) {
      w[k] -= lr * weight_decay * w[k];
      m[k] = h.beta1 * m[k] + (1.0 - h.beta1) * g[k];
      v[k] = h.beta2 * v[k] + (1.0 - h.beta2) * g[k] * g[k];
      w[k] -= lr * (m[k] / bc1) / (std::sqrt(v[k] / bc2) + h.eps);
    }
  }
}

}  // namespace usv::nn
