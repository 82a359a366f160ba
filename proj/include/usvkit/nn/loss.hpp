#pragma once

#include <algorithm>
#include <cmath>
#include <span>
#include <stdexcept>
#include <vector>

#include "usvkit/call_class.hpp"
#include "usvkit/nn/tensor.hpp"

namespace usv::nn {

/// Label-smoothing targets: `on` at the true class, `off` elsewhere. They are
/// used exactly as given (0.9 + 4 * 0.05 = 1.1), not renormalized.
struct SmoothingTargets {
  double off = 0.05;
  double on = 0.9;
};

inline std::vector<double> smoothed_targets(CallClass label, const SmoothingTargets& t) {
  std::vector<double> v(kNumClasses, t.off);
  v[static_cast<std::size_t>(index_of(label))] = t.on;
  return v;
}

inline std::vector<double> softmax(std::span<const double> logits) {
  const double mx = *std::max_element(logits.begin(), logits.end());
  std::vector<double> p(logits.size());
  double z = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) z += (p[i] = std::exp(logits[i] - mx));
  for (auto& v : p) v /= z;
  return p;
}

inline std::vector<double> log_softmax(std::span<const double> logits) {
  const double mx = *std::max_element(logits.begin(), logits.end());
  double z = 0.0;
  for (double l : logits) z += std::exp(l - mx);
  const double lse = mx + std::log(z);
  std::vector<double> out(logits.size());
  for (std::size_t i = 0; i < logits.size(); ++i) out[i] = logits[i] - lse;
  return out;
}

/// -sum_k t_k log softmax(logits)_k. If `grad` is non-empty it receives
/// d loss / d logits = (sum t) * softmax - t.
inline double loss_ce_smoothed(std::span<const double> logits, CallClass label, const SmoothingTargets& t,
                               std::span<double> grad = {}) {
  if (logits.size() != kNumClasses) throw std::invalid_argument("loss_ce_smoothed: expected 5 logits");
  for (double l : logits)
    if (!std::isfinite(l)) throw std::invalid_argument("loss_ce_smoothed: non-finite logit");
  const auto target = smoothed_targets(label, t);
  const auto lsm = log_softmax(logits);
  double loss = 0.0, tsum = 0.0;
  for (std::size_t k = 0; k < kNumClasses; ++k) {
    loss -= target[k] * lsm[k];
    tsum += target[k];
  }
  if (!grad.empty()) {
    for (std::size_t k = 0; k < kNumClasses; ++k) grad[k] = tsum * std::exp(lsm[k]) - target[k];
  }
  return loss;
}

struct BatchLoss {
  double loss = 0.0;
  Tensor grad;  // d mean-loss / d logits
};

inline BatchLoss batch_loss_ce_smoothed(const Tensor& logits, const std::vector<CallClass>& labels,
                                        const SmoothingTargets& t) {
  if (logits.rank() != 2 || logits.dim(1) != static_cast<int>(kNumClasses))
    throw std::invalid_argument("batch loss: expected [N, 5] logits, got " + logits.shape_str());
  const auto n = static_cast<std::size_t>(logits.dim(0));
  if (labels.size() != n) throw std::invalid_argument("batch loss: label count mismatch");
  BatchLoss out{0.0, logits.zeros_like()};
  for (std::size_t i = 0; i < n; ++i) {
    std::span<const double> row(logits.ptr() + i * kNumClasses, kNumClasses);
    std::span<double> g(out.grad.ptr() + i * kNumClasses, kNumClasses);
    out.loss += loss_ce_smoothed(row, labels[i], t, g);
  }
  out.loss /= static_cast<double>(n);
  for (auto& v : out.grad.data) v /= static_cast<double>(n);
  return out;
}

}  // namespace usv::nn
