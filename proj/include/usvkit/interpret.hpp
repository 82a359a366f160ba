#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "usvkit/call_class.hpp"
#include "usvkit/nn/model.hpp"
#include "usvkit/nn/optim.hpp"
#include "usvkit/nn/tensor.hpp"
#include "usvkit/rng.hpp"
#include "usvkit/spectrogram.hpp"

namespace usv {

/// Attributions for one input sample (shape of the input without the batch
/// axis). F is the target-class logit.
struct SaliencyMap {
  nn::Tensor attributions;
  CallClass target_class = CallClass::Flat;
  double f_input = 0.0;
  double f_baseline = 0.0;

  double total() const {
    double s = 0.0;
    for (double v : attributions.data) s += v;
    return s;
  }

  /// One channel of a [C, H, W] map; channel 1 is the dB spectrogram.
  Matrix channel(int c) const {
    if (attributions.rank() != 3) throw std::invalid_argument("SaliencyMap::channel: map is not [C, H, W]");
    const int h = attributions.dim(1), w = attributions.dim(2);
    if (c < 0 || c >= attributions.dim(0)) throw std::out_of_range("SaliencyMap::channel: index out of range");
    return Eigen::Map<const Matrix>(attributions.ptr() + static_cast<std::size_t>(c) * h * w, h, w);
  }
};

namespace detail {

inline std::vector<int> with_batch(const std::vector<int>& shape) {
  std::vector<int> s{1};
  s.insert(s.end(), shape.begin(), shape.end());
  return s;
}

inline void require_eval(const nn::Model& m, const char* who) {
  if (m.mode() != nn::Mode::Eval) throw std::logic_error(std::string(who) + ": model must be in Eval mode");
}

}  // namespace detail

/// Right-Riemann integrated gradients along the straight path from
/// `baseline` to `input` (both unbatched), evaluated in chunks of `batch`.
inline SaliencyMap integrated_gradients(nn::Model& model, const nn::Tensor& input, const nn::Tensor& baseline,
                                        CallClass target, int steps = 50, int batch = 10) {
  detail::require_eval(model, "integrated_gradients");
  if (input.shape != baseline.shape)
    throw std::invalid_argument("integrated_gradients: baseline " + baseline.shape_str() + " vs input " +
                                input.shape_str());
  if (steps < 1) throw std::invalid_argument("integrated_gradients: steps must be >= 1");
  const std::size_t n = input.numel();
  const auto k = static_cast<std::size_t>(index_of(target));
  std::vector<double> grad_sum(n, 0.0);
  nn::BackwardOptions bo;
  bo.weight_grads = false;
  Rng unused(0);
  for (int s0 = 1; s0 <= steps; s0 += batch) {
    const int s1 = std::min(steps, s0 + batch - 1);
    const int m = s1 - s0 + 1;
    std::vector<int> shape = input.shape;
    shape.insert(shape.begin(), m);
    nn::Tensor x(shape, nn::Tensor::Uninitialized{});
    for (int j = 0; j < m; ++j) {
      const double alpha = static_cast<double>(s0 + j) / steps;
      double* dst = x.ptr() + static_cast<std::size_t>(j) * n;
      for (std::size_t i = 0; i < n; ++i) dst[i] = baseline[i] + alpha * (input[i] - baseline[i]);
    }
    nn::ForwardCache cache;
    const nn::Tensor y = model.forward(x, cache, unused);
    if (y.rank() != 2 || y.dim(1) != static_cast<int>(kNumClasses))
      throw std::invalid_argument("integrated_gradients: model output " + y.shape_str() + " is not [N, 5]");
    nn::Tensor dy = y.zeros_like();
    for (int j = 0; j < m; ++j) dy[static_cast<std::size_t>(j) * kNumClasses + k] = 1.0;
    const nn::Gradients g = model.backward(cache, dy, bo);
    for (int j = 0; j < m; ++j) {
      const double* src = g.input.ptr() + static_cast<std::size_t>(j) * n;
      for (std::size_t i = 0; i < n; ++i) grad_sum[i] += src[i];
    }
  }
  SaliencyMap out;
  out.target_class = target;
  out.attributions = nn::Tensor(input.shape);
  for (std::size_t i = 0; i < n; ++i) out.attributions[i] = (input[i] - baseline[i]) * grad_sum[i] / steps;
  const nn::Tensor ends = nn::stack({baseline, input});
  const nn::Tensor f = model.infer(ends);
  out.f_baseline = f[k];
  out.f_input = f[kNumClasses + k];
  return out;
}

struct SmoothGradOptions {
  int samples = 5;
  double noise_std = 0.1;
  int steps = 50;
};

/// Mean of integrated-gradient maps over noisy copies of the input, each
/// against the all-zero baseline.
inline SaliencyMap smoothgrad_ig(nn::Model& model, const nn::Tensor& input, CallClass target, Rng& rng,
                                 const SmoothGradOptions& o = {}) {
  if (o.samples < 1) throw std::invalid_argument("smoothgrad_ig: samples must be >= 1");
  if (!(o.noise_std >= 0.0)) throw std::invalid_argument("smoothgrad_ig: noise_std must be >= 0");
  const nn::Tensor baseline = input.zeros_like();
  if (o.noise_std == 0.0) return integrated_gradients(model, input, baseline, target, o.steps);
  SaliencyMap acc;
  std::vector<double> noise(input.numel());
  for (int s = 0; s < o.samples; ++s) {
    nn::Tensor x = input;
    rng.fill_normal(noise, 0.0, o.noise_std);
    for (std::size_t i = 0; i < x.numel(); ++i) x[i] += noise[i];
    SaliencyMap m = integrated_gradients(model, x, baseline, target, o.steps);
    if (s == 0) {
      acc = std::move(m);
    } else {
      for (std::size_t i = 0; i < acc.attributions.numel(); ++i) acc.attributions[i] += m.attributions[i];
      acc.f_input += m.f_input;
    }
  }
  for (auto& v : acc.attributions.data) v /= o.samples;
  acc.f_input /= o.samples;
  return acc;
}

inline void to_json(nlohmann::json& j, const SaliencyMap& m) {
  j = {{"target_class", std::string(class_name(m.target_class))},
       {"shape", m.attributions.shape},
       {"f_input", m.f_input},
       {"f_baseline", m.f_baseline},
       {"attributions", m.attributions.data}};
}

// Random translation (integer pixels) plus isotropic scale about the centre,
// as bilinear taps so the backward pass is the exact transpose.
class RandomAffine {
 public:
  RandomAffine(int h, int w, double dy, double dx, double scale) {
    taps_.resize(static_cast<std::size_t>(h) * w);
    const double cy = (h - 1) / 2.0, cx = (w - 1) / 2.0;
    for (int i = 0; i < h; ++i)
      for (int j = 0; j < w; ++j) {
        const double sy = std::clamp((i - cy) / scale + cy - dy, 0.0, h - 1.0);
        const double sx = std::clamp((j - cx) / scale + cx - dx, 0.0, w - 1.0);
        const int y0 = static_cast<int>(std::floor(sy)), x0 = static_cast<int>(std::floor(sx));
        const int y1 = std::min(y0 + 1, h - 1), x1 = std::min(x0 + 1, w - 1);
        const double fy = sy - y0, fx = sx - x0;
        taps_[static_cast<std::size_t>(i) * w + j] = {{y0 * w + x0, y0 * w + x1, y1 * w + x0, y1 * w + x1},
                                                     {(1 - fy) * (1 - fx), (1 - fy) * fx, fy * (1 - fx), fy * fx}};
      }
  }

  void apply(const double* src, double* dst) const {
    for (std::size_t p = 0; p < taps_.size(); ++p) {
      const Tap& t = taps_[p];
      dst[p] = t.w[0] * src[t.idx[0]] + t.w[1] * src[t.idx[1]] + t.w[2] * src[t.idx[2]] + t.w[3] * src[t.idx[3]];
    }
  }

  void transpose(const double* g_dst, double* g_src) const {
    for (std::size_t p = 0; p < taps_.size(); ++p) {
      const Tap& t = taps_[p];
      for (int q = 0; q < 4; ++q) g_src[t.idx[q]] += t.w[q] * g_dst[p];
    }
  }

 private:
  struct Tap {
    std::array<int, 4> idx;
    std::array<double, 4> w;
  };
  std::vector<Tap> taps_;
};

struct ActivationMaxOptions {
  int iterations = 256;
  double learning_rate = 0.05;
  double init_std = 0.05;
  int relu_passthrough_iterations = 16;
  double max_shift_px = 1.0;
  double min_scale = 0.9;
  double max_scale = 1.1;
  double grad_clip = 1e3;
  /// Value of the constant time-feature channel.
  double time_feature = 0.3;
};

struct ChannelVisualization {
  nn::Tensor z;  // [S, H, W] spectrogram channels
  std::size_t layer = 0;
  int channel = 0;
  std::vector<double> activation_trace;
};

inline void to_json(nlohmann::json& j, const ChannelVisualization& v) {
  j = {{"layer", v.layer},
       {"channel", v.channel},
       {"shape", v.z.shape},
       {"activation_trace", v.activation_trace},
       {"z", v.z.data}};
}

/// Gradient ascent on the input so that the spatial mean of `channel` in the
/// output of top-level layer `layer` grows. Only the first `spectral`
/// channels of the [C, H, W] input are optimized; the remaining channels are
/// held at `time_feature`.
inline ChannelVisualization activation_maximization(nn::Model& model, std::size_t layer, int channel,
                                                    std::vector<int> input_shape, Rng& rng,
                                                    const ActivationMaxOptions& o = {}, int spectral = 2) {
  detail::require_eval(model, "activation_maximization");
  if (layer >= model.layer_count()) throw std::out_of_range("activation_maximization: layer index out of range");
  if (input_shape.size() != 3 || spectral < 1 || spectral > input_shape[0])
    throw std::invalid_argument("activation_maximization: input shape must be [C, H, W] with C >= spectral >= 1");
  const int h = input_shape[1], w = input_shape[2];
  const std::size_t plane = static_cast<std::size_t>(h) * w;

  std::ptrdiff_t final_relu = -1;
  for (std::size_t i = 0; i <= layer; ++i)
    if (model.layers()[i].kind == nn::LayerKind::ReLU) final_relu = static_cast<std::ptrdiff_t>(i);

  ChannelVisualization out;
  out.layer = layer;
  out.channel = channel;
  out.z = nn::Tensor({spectral, h, w});
  rng.fill_normal(out.z.data, 0.0, o.init_std);

  nn::ForwardOptions fo;
  fo.stop_after = layer + 1;
  std::vector<nn::Tensor> params{out.z};
  nn::AdamState adam;
  Rng unused(0);
  for (int it = 0; it < o.iterations; ++it) {
    const double dy_px = std::round(rng.uniform(-o.max_shift_px, o.max_shift_px));
    const double dx_px = std::round(rng.uniform(-o.max_shift_px, o.max_shift_px));
    const RandomAffine g(h, w, dy_px, dx_px, rng.uniform(o.min_scale, o.max_scale));

    nn::Tensor x(detail::with_batch(input_shape));
    for (int c = 0; c < spectral; ++c) g.apply(params[0].ptr() + c * plane, x.ptr() + c * plane);
    std::fill(x.data.begin() + static_cast<std::ptrdiff_t>(spectral * plane), x.data.end(), o.time_feature);

    nn::ForwardCache cache;
    const nn::Tensor y = model.forward(x, cache, unused, fo);
    if (y.dim(1) <= channel || channel < 0)
      throw std::out_of_range("activation_maximization: layer " + std::to_string(layer) + " has " +
                              std::to_string(y.dim(1)) + " channels, asked for " + std::to_string(channel));
    const std::size_t spatial = y.numel() / static_cast<std::size_t>(y.dim(1));
    nn::Tensor dy = y.zeros_like();
    double act = 0.0;
    for (std::size_t p = 0; p < spatial; ++p) {
      act += y[channel * spatial + p];
      dy[channel * spatial + p] = 1.0 / static_cast<double>(spatial);
    }
    out.activation_trace.push_back(act / static_cast<double>(spatial));

    nn::BackwardOptions bo;
    bo.weight_grads = false;
    if (it < o.relu_passthrough_iterations) bo.relu_passthrough = final_relu;
    const nn::Gradients gr = model.backward(cache, dy, bo);
    nn::Tensor gz = params[0].zeros_like();
    for (int c = 0; c < spectral; ++c) g.transpose(gr.input.ptr() + c * plane, gz.ptr() + c * plane);
    // ascent: Adam minimizes, so feed the negated, clipped gradient
    for (auto& v : gz.data) v = -std::clamp(v, -o.grad_clip, o.grad_clip);
    std::vector<nn::Tensor> grads{std::move(gz)};
    nn::adamw_step(params, grads, adam, o.learning_rate, 0.0);
  }
  out.z = params[0];
  return out;
}

}  // namespace usv
