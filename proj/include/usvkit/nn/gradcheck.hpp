#pragma once

#include <cstdio>
#include <algorithm>
#include <cmath>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "usvkit/nn/loss.hpp"
#include "usvkit/nn/model.hpp"

namespace usv::nn {

/// Scalar objective of a model output; writes d(objective)/d(output) to grad.
using Objective = std::function<double(const Tensor& output, Tensor& grad)>;

inline Objective ce_objective(std::vector<CallClass> labels, SmoothingTargets t = {}) {
  return [labels = std::move(labels), t](const Tensor& out, Tensor& grad) {
    auto bl = batch_loss_ce_smoothed(out, labels, t);
    grad = std::move(bl.grad);
    return bl.loss;
  };
}

/// <r, out> with a fixed random r; r is drawn lazily to match the output shape.
inline Objective projection_objective(std::uint64_t seed) {
  auto r = std::make_shared<Tensor>();
  return [r, seed](const Tensor& out, Tensor& grad) {
    if (r->shape != out.shape) {
      Rng rng(seed, 0x9C);
      *r = out.zeros_like();
      for (auto& v : r->data) v = rng.normal(0.0, 1.0);
    }
    grad = *r;
    double s = 0.0;
    for (std::size_t i = 0; i < out.numel(); ++i) s += r->data[i] * out.data[i];
    return s;
  };
}

struct GradCheckOptions {
  double step = 1e-5;
  /// Check every `stride`-th element of each weight tensor (1 = all),
  /// starting at a per-tensor offset so every position class gets sampled.
  std::size_t stride = 1;
  bool check_weights = true;
  bool check_input = true;
  std::uint64_t dropout_seed = 7;
};

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t checked = 0;
  std::string worst;
};

inline double gradient_rel_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), 1e-6});
}

/// Central finite differences against backward() in the model's current
/// mode. Dropout masks are held fixed by reseeding every forward pass.
inline GradCheckResult check_gradients(Model& model, const Tensor& x, const Objective& objective,
                                       const GradCheckOptions& opt = {}) {
  auto eval = [&](const Tensor& in, Tensor* out_grad, ForwardCache* cache) {
    ForwardCache local;
    Rng rng(opt.dropout_seed);
    const Tensor y = model.forward(in, cache ? *cache : local, rng);
    Tensor g;
    const double f = objective(y, g);
    if (out_grad) *out_grad = std::move(g);
    return f;
  };
  ForwardCache cache;
  Tensor dy;
  eval(x, &dy, &cache);
  const Gradients g = model.backward(cache, dy);

  GradCheckResult res;
  auto record = [&](double a, double n, const std::string& what) {
    const double e = gradient_rel_error(a, n);
    ++res.checked;
    if (e > res.max_rel_error || res.worst.empty()) {
      res.max_rel_error = e;
      char buf[96];
      std::snprintf(buf, sizeof buf, " analytic %.6e numeric %.6e", a, n);
      res.worst = what + buf;
    }
  };
  const std::size_t stride = std::max<std::size_t>(1, opt.stride);
  for (std::size_t w = 0; opt.check_weights && w < model.weights().size(); ++w) {
    const std::size_t n = model.weights()[w].numel();
    for (std::size_t k = (w * 7919) % std::min(stride, n); k < n; k += stride) {
      const double orig = model.weights()[w][k];
      model.mutable_weights()[w][k] = orig + opt.step;
      const double fp = eval(x, nullptr, nullptr);
      model.mutable_weights()[w][k] = orig - opt.step;
      const double fm = eval(x, nullptr, nullptr);
      model.mutable_weights()[w][k] = orig;
      record(g.weights[w][k], (fp - fm) / (2.0 * opt.step), model.weight_names()[w] + "[" + std::to_string(k) + "]");
    }
  }
  if (opt.check_input) {
    Tensor xp = x;
    for (std::size_t k = 0; k < x.numel(); k += stride) {
      xp[k] = x[k] + opt.step;
      const double fp = eval(xp, nullptr, nullptr);
      xp[k] = x[k] - opt.step;
      const double fm = eval(xp, nullptr, nullptr);
      xp[k] = x[k];
      record(g.input[k], (fp - fm) / (2.0 * opt.step), "input[" + std::to_string(k) + "]");
    }
  }
  return res;
}

}  // namespace usv::nn
