#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "usvkit/nn/layers.hpp"
#include "usvkit/nn/tensor.hpp"
#include "usvkit/rng.hpp"

namespace usv::nn {

enum class Mode { Train, Eval };

inline constexpr double kBatchNormEps = 1e-5;
inline constexpr double kBatchNormMomentum = 0.1;

/// Saved activations of one layer (and its children) from a forward pass.
struct NodeCache {
  std::vector<Tensor> saved;
  std::vector<int> in_shape;
  std::vector<NodeCache> inner;
  std::vector<NodeCache> shortcut;
};

struct ForwardCache {
  std::vector<NodeCache> layers;
  std::size_t layers_run = 0;
  std::uint64_t model_uid = 0;
  std::uint64_t model_version = 0;
  Mode mode = Mode::Eval;
  std::vector<int> input_shape;
  std::vector<int> output_shape;
};

struct ForwardOptions {
  /// Run only the first `stop_after` top-level layers.
  std::size_t stop_after = std::numeric_limits<std::size_t>::max();
};

struct BackwardOptions {
  /// Top-level ReLU layer whose backward pass returns the incoming gradient
  /// unmasked; negative disables.
  std::ptrdiff_t relu_passthrough = -1;
  bool weight_grads = true;
  /// When false, Gradients::input is left empty and the first layer skips
  /// its input gradient (training never needs it).
  bool input_grad = true;
};

struct Gradients {
  std::vector<Tensor> weights;  // aligned with Model::weights()
  Tensor input;
};

class StaleCacheError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

class Model {
 public:
  explicit Model(std::vector<LayerSpec> layers, std::uint64_t init_seed = 0) : specs_(std::move(layers)) {
    Rng rng(init_seed, 0x1417);
    for (std::size_t i = 0; i < specs_.size(); ++i) nodes_.push_back(build(specs_[i], std::to_string(i), rng));
  }

  const std::vector<LayerSpec>& layers() const { return specs_; }
  std::size_t layer_count() const { return specs_.size(); }

  Mode mode() const { return mode_; }
  void set_mode(Mode m) { mode_ = m; }

  const std::vector<Tensor>& weights() const { return weights_; }
  const std::vector<std::string>& weight_names() const { return weight_names_; }
  /// Mutable access invalidates outstanding forward caches.
  std::vector<Tensor>& mutable_weights() {
    ++version_;
    return weights_;
  }
  const std::vector<Tensor>& buffers() const { return buffers_; }
  const std::vector<std::string>& buffer_names() const { return buffer_names_; }
  std::vector<Tensor>& mutable_buffers() { return buffers_; }

  std::uint64_t version() const { return version_; }

  /// Trainable element count; batchnorm scale/shift count, running stats do not.
  std::size_t param_count() const {
    std::size_t n = 0;
    for (const auto& w : weights_) n += w.numel();
    return n;
  }

  /// Forward pass in the model's current mode. Train mode draws dropout masks
  /// from `rng`, normalizes with batch statistics and updates running stats.
  Tensor forward(const Tensor& x, ForwardCache& cache, Rng& rng, const ForwardOptions& opts = {}) {
    Ctx ctx{mode_, &rng, mode_ == Mode::Train ? &buffers_ : nullptr, true};
    cache = ForwardCache{};
    cache.model_uid = uid_.value;
    cache.model_version = version_;
    cache.mode = mode_;
    cache.input_shape = x.shape;
    const std::size_t n = std::min(opts.stop_after, nodes_.size());
    cache.layers.resize(n);
    Tensor h = x;
    for (std::size_t i = 0; i < n; ++i) h = fwd(nodes_[i], h, &cache.layers[i], ctx);
    cache.layers_run = n;
    cache.output_shape = h.shape;
    return h;
  }

  /// Eval-mode forward without caching; safe for concurrent use.
  Tensor infer(const Tensor& x, const ForwardOptions& opts = {}) const {
    if (mode_ != Mode::Eval) throw std::logic_error("Model::infer requires Eval mode");
    Ctx ctx{Mode::Eval, nullptr, nullptr, false};
    const std::size_t n = std::min(opts.stop_after, nodes_.size());
    Tensor h = x;
    for (std::size_t i = 0; i < n; ++i) h = fwd(nodes_[i], h, nullptr, ctx);
    return h;
  }

  /// Reverse-mode gradients of <loss_grad, output> w.r.t. every weight and
  /// the input, reusing the dropout masks and batch statistics in `cache`.
  Gradients backward(const ForwardCache& cache, const Tensor& loss_grad, const BackwardOptions& opts = {}) const {
    if (cache.model_uid != uid_.value || cache.model_version != version_ || cache.layers.size() != cache.layers_run)
      throw StaleCacheError("backward: forward cache does not belong to the current model state");
    if (loss_grad.shape != cache.output_shape)
      throw std::invalid_argument("backward: loss gradient shape " + loss_grad.shape_str() + " does not match output");
    Gradients g;
    if (opts.weight_grads)
      for (const auto& w : weights_) g.weights.push_back(w.zeros_like());
    BCtx b{cache.mode, opts.weight_grads ? &g.weights : nullptr, false, true};
    Tensor gh = loss_grad;
    for (std::size_t i = cache.layers_run; i-- > 0;) {
      b.relu_passthrough = static_cast<std::ptrdiff_t>(i) == opts.relu_passthrough;
      b.need_input = i > 0 || opts.input_grad || nodes_[i].spec.kind != LayerKind::Conv2d;
      gh = bwd(nodes_[i], gh, cache.layers[i], b);
    }
    if (!opts.input_grad) gh = Tensor{};
    g.input = std::move(gh);
    return g;
  }

 private:
  using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using MapRow = Eigen::Map<RowMat>;
  using CMapRow = Eigen::Map<const RowMat>;

  struct Uid {
    std::uint64_t value;
    Uid() : value(next()) {}
    Uid(const Uid&) : value(next()) {}
    Uid& operator=(const Uid&) {
      value = next();
      return *this;
    }
    static std::uint64_t next() {
      static std::atomic<std::uint64_t> counter{1};
      return counter++;
    }
  };

  struct Node {
    LayerSpec spec;
    std::vector<std::size_t> params;
    std::vector<std::size_t> buffers;
    std::vector<Node> inner;
    std::vector<Node> shortcut;
  };

  struct Ctx {
    Mode mode;
    Rng* rng;
    std::vector<Tensor>* buffers;  // non-null when running stats should update
    bool keep;
  };

  struct BCtx {
    Mode mode;
    std::vector<Tensor>* grads;
    bool relu_passthrough;
    bool need_input;
  };

  std::size_t add_weight(const std::string& name, Tensor t) {
    weight_names_.push_back(name);
    weights_.push_back(std::move(t));
    return weights_.size() - 1;
  }
  std::size_t add_buffer(const std::string& name, Tensor t) {
    buffer_names_.push_back(name);
    buffers_.push_back(std::move(t));
    return buffers_.size() - 1;
  }

  Node build(const LayerSpec& s, const std::string& path, Rng& rng) {
    Node n;
    n.spec = s;
    auto he = [&](std::vector<int> shape, int fan_in) {
      Tensor t(std::move(shape));
      const double sd = std::sqrt(2.0 / fan_in);
      for (auto& v : t.data) v = rng.normal(0.0, sd);
      return t;
    };
    switch (s.kind) {
      case LayerKind::Dense:
        if (s.in <= 0 || s.out <= 0) throw std::invalid_argument("Dense: sizes must be positive");
        n.params.push_back(add_weight(path + ".weight", he({s.out, s.in}, s.in)));
        if (s.bias) n.params.push_back(add_weight(path + ".bias", Tensor({s.out})));
        break;
      case LayerKind::Conv2d:
        if (s.in <= 0 || s.out <= 0 || s.kernel_h <= 0 || s.kernel_w <= 0 || s.stride <= 0 || s.padding < 0)
          throw std::invalid_argument("Conv2d: invalid geometry");
        n.params.push_back(
            add_weight(path + ".weight", he({s.out, s.in, s.kernel_h, s.kernel_w}, s.in * s.kernel_h * s.kernel_w)));
        if (s.bias) n.params.push_back(add_weight(path + ".bias", Tensor({s.out})));
        break;
      case LayerKind::BatchNorm:
        if (s.in <= 0) throw std::invalid_argument("BatchNorm: feature count must be positive");
        n.params.push_back(add_weight(path + ".gamma", Tensor({s.in}, 1.0)));
        n.params.push_back(add_weight(path + ".beta", Tensor({s.in})));
        n.buffers.push_back(add_buffer(path + ".running_mean", Tensor({s.in})));
        n.buffers.push_back(add_buffer(path + ".running_var", Tensor({s.in}, 1.0)));
        break;
      case LayerKind::Dropout:
        if (!(s.rate >= 0.0 && s.rate < 1.0)) throw std::invalid_argument("Dropout: rate must be in [0, 1)");
        break;
      case LayerKind::ResidualBlock:
        if (s.inner.empty()) throw std::invalid_argument("ResidualBlock: empty inner path");
        for (std::size_t i = 0; i < s.inner.size(); ++i)
          n.inner.push_back(build(s.inner[i], path + ".inner." + std::to_string(i), rng));
        for (std::size_t i = 0; i < s.shortcut.size(); ++i)
          n.shortcut.push_back(build(s.shortcut[i], path + ".shortcut." + std::to_string(i), rng));
        break;
      case LayerKind::Concat:
        if (s.tail < 0 || s.inner.empty()) throw std::invalid_argument("Concat: needs a branch and tail >= 0");
        for (std::size_t i = 0; i < s.inner.size(); ++i)
          n.inner.push_back(build(s.inner[i], path + ".branch." + std::to_string(i), rng));
        break;
      default: break;
    }
    n.spec.inner.clear();
    n.spec.shortcut.clear();
    return n;
  }

  static void expect_rank(const Tensor& x, int rank, const char* layer) {
    if (x.rank() != rank)
      throw std::invalid_argument(std::string(layer) + ": expected rank-" + std::to_string(rank) + " input, got " +
                                  x.shape_str());
  }

  Tensor run_seq(const std::vector<Node>& seq, const Tensor& x, std::vector<NodeCache>* caches, Ctx& ctx) const {
    if (caches) caches->resize(seq.size());
    Tensor h = x;
    for (std::size_t i = 0; i < seq.size(); ++i) h = fwd(seq[i], h, caches ? &(*caches)[i] : nullptr, ctx);
    return h;
  }

  Tensor back_seq(const std::vector<Node>& seq, const Tensor& gy, const std::vector<NodeCache>& caches,
                  BCtx& b) const {
    Tensor g = gy;
    for (std::size_t i = seq.size(); i-- > 0;) g = bwd(seq[i], g, caches[i], b);
    return g;
  }

  Tensor fwd(const Node& node, const Tensor& x, NodeCache* c, Ctx& ctx) const {
    const LayerSpec& s = node.spec;
    if (c) c->in_shape = x.shape;
    switch (s.kind) {
      case LayerKind::Dense: {
        expect_rank(x, 2, "Dense");
        if (x.dim(1) != s.in)
          throw std::invalid_argument("Dense: expected " + std::to_string(s.in) + " features, got " + x.shape_str());
        const int n = x.dim(0);
        Tensor y({n, s.out});
        CMapRow X(x.ptr(), n, s.in);
        CMapRow Wm(weights_[node.params[0]].ptr(), s.out, s.in);
        MapRow Y(y.ptr(), n, s.out);
        Y.noalias() = X * Wm.transpose();
        if (s.bias) {
          Eigen::Map<const Eigen::RowVectorXd> bvec(weights_[node.params[1]].ptr(), s.out);
          Y.rowwise() += bvec;
        }
        if (c && ctx.keep) c->saved = {x};
        return y;
      }
      case LayerKind::Conv2d: return conv_forward(node, x, c, ctx);
      case LayerKind::BatchNorm: return bn_forward(node, x, c, ctx);
      case LayerKind::ReLU: {
        Tensor y = x;
        for (auto& v : y.data) v = v < 0.0 ? 0.0 : v;  // NaN propagates
        if (c && ctx.keep) c->saved = {x};
        return y;
      }
      case LayerKind::Dropout: {
        if (ctx.mode == Mode::Eval || s.rate == 0.0) return x;
        if (!ctx.rng) throw std::logic_error("Dropout: Train mode needs an rng");
        Tensor mask(x.shape);
        const double keep_scale = 1.0 / (1.0 - s.rate);
        for (auto& m : mask.data) m = ctx.rng->uniform() >= s.rate ? keep_scale : 0.0;
        Tensor y = x;
        for (std::size_t i = 0; i < y.numel(); ++i) y[i] *= mask[i];
        if (c && ctx.keep) c->saved = {std::move(mask)};
        return y;
      }
      case LayerKind::ResidualBlock: {
        Tensor a = run_seq(node.inner, x, c ? &c->inner : nullptr, ctx);
        Tensor b = node.shortcut.empty() ? x : run_seq(node.shortcut, x, c ? &c->shortcut : nullptr, ctx);
        if (a.shape != b.shape)
          throw std::invalid_argument("ResidualBlock: branch shapes differ " + a.shape_str() + " vs " + b.shape_str());
        for (std::size_t i = 0; i < a.numel(); ++i) a[i] += b[i];
        return a;
      }
      case LayerKind::Flatten: {
        if (x.rank() < 2) throw std::invalid_argument("Flatten: input needs a batch dimension");
        Tensor y = x;
        y.shape = {x.dim(0), static_cast<int>(x.sample_size())};
        return y;
      }
      case LayerKind::GlobalAveragePool: {
        expect_rank(x, 4, "GlobalAveragePool");
        const int n = x.dim(0), ch = x.dim(1);
        const std::size_t sp = static_cast<std::size_t>(x.dim(2)) * x.dim(3);
        Tensor y({n, ch});
        for (int i = 0; i < n * ch; ++i) {
          const double* p = x.ptr() + static_cast<std::size_t>(i) * sp;
          double acc = 0.0;
          for (std::size_t k = 0; k < sp; ++k) acc += p[k];
          y[i] = acc / static_cast<double>(sp);
        }
        return y;
      }
      case LayerKind::Concat: {
        expect_rank(x, 2, "Concat");
        const int n = x.dim(0), d = x.dim(1), head = d - s.tail;
        if (head <= 0) throw std::invalid_argument("Concat: tail wider than input " + x.shape_str());
        Tensor xh({n, head});
        for (int i = 0; i < n; ++i)
          std::copy_n(x.ptr() + static_cast<std::size_t>(i) * d, head, xh.ptr() + static_cast<std::size_t>(i) * head);
        Tensor bh = run_seq(node.inner, xh, c ? &c->inner : nullptr, ctx);
        expect_rank(bh, 2, "Concat branch output");
        const int m = bh.dim(1);
        Tensor y({n, m + s.tail});
        for (int i = 0; i < n; ++i) {
          std::copy_n(bh.ptr() + static_cast<std::size_t>(i) * m, m, y.ptr() + static_cast<std::size_t>(i) * (m + s.tail));
          std::copy_n(x.ptr() + static_cast<std::size_t>(i) * d + head, s.tail,
                      y.ptr() + static_cast<std::size_t>(i) * (m + s.tail) + m);
        }
        if (c) c->saved = {Tensor({m})};  // remember branch width
        return y;
      }
      case LayerKind::Softmax: {
        expect_rank(x, 2, "Softmax");
        Tensor y = x;
        const int n = x.dim(0), k = x.dim(1);
        for (int i = 0; i < n; ++i) {
          double* r = y.ptr() + static_cast<std::size_t>(i) * k;
          const double mx = *std::max_element(r, r + k);
          double z = 0.0;
          for (int j = 0; j < k; ++j) z += (r[j] = std::exp(r[j] - mx));
          for (int j = 0; j < k; ++j) r[j] /= z;
        }
        if (c && ctx.keep) c->saved = {y};
        return y;
      }
    }
    throw std::logic_error("unknown layer kind");
  }

  Tensor bwd(const Node& node, const Tensor& gy, const NodeCache& c, BCtx& b) const {
    const LayerSpec& s = node.spec;
    switch (s.kind) {
      case LayerKind::Dense: {
        const Tensor& x = c.saved.at(0);
        const int n = x.dim(0);
        CMapRow G(gy.ptr(), n, s.out);
        CMapRow X(x.ptr(), n, s.in);
        CMapRow Wm(weights_[node.params[0]].ptr(), s.out, s.in);
        if (b.grads) {
          MapRow GW((*b.grads)[node.params[0]].ptr(), s.out, s.in);
          GW.noalias() += G.transpose() * X;
          if (s.bias) {
            Eigen::Map<Eigen::RowVectorXd> gb((*b.grads)[node.params[1]].ptr(), s.out);
            gb += G.colwise().sum();
          }
        }
        Tensor gx(x.shape);
        MapRow GX(gx.ptr(), n, s.in);
        GX.noalias() = G * Wm;
        return gx;
      }
      case LayerKind::Conv2d: return conv_backward(node, gy, c, b);
      case LayerKind::BatchNorm: return bn_backward(node, gy, c, b);
      case LayerKind::ReLU: {
        if (b.relu_passthrough) return gy;
        const Tensor& x = c.saved.at(0);
        Tensor gx = gy;
        for (std::size_t i = 0; i < gx.numel(); ++i)
          if (!(x[i] > 0.0)) gx[i] = 0.0;
        return gx;
      }
      case LayerKind::Dropout: {
        if (c.saved.empty()) return gy;
        const Tensor& mask = c.saved[0];
        Tensor gx = gy;
        for (std::size_t i = 0; i < gx.numel(); ++i) gx[i] *= mask[i];
        return gx;
      }
      case LayerKind::ResidualBlock: {
        Tensor ga = back_seq(node.inner, gy, c.inner, b);
        if (node.shortcut.empty()) {
          for (std::size_t i = 0; i < ga.numel(); ++i) ga[i] += gy[i];
        } else {
          Tensor gs = back_seq(node.shortcut, gy, c.shortcut, b);
          for (std::size_t i = 0; i < ga.numel(); ++i) ga[i] += gs[i];
        }
        return ga;
      }
      case LayerKind::Flatten: {
        Tensor gx = gy;
        gx.shape = c.in_shape;
        return gx;
      }
      case LayerKind::GlobalAveragePool: {
        Tensor gx(c.in_shape);
        const int n = c.in_shape[0], ch = c.in_shape[1];
        const std::size_t sp = static_cast<std::size_t>(c.in_shape[2]) * c.in_shape[3];
        for (int i = 0; i < n * ch; ++i) {
          const double v = gy[i] / static_cast<double>(sp);
          std::fill_n(gx.ptr() + static_cast<std::size_t>(i) * sp, sp, v);
        }
        return gx;
      }
      case LayerKind::Concat: {
        const int n = c.in_shape[0], d = c.in_shape[1], head = d - s.tail;
        const int m = c.saved.at(0).dim(0);
        Tensor gb({n, m});
        for (int i = 0; i < n; ++i)
          std::copy_n(gy.ptr() + static_cast<std::size_t>(i) * (m + s.tail), m, gb.ptr() + static_cast<std::size_t>(i) * m);
        Tensor gh = back_seq(node.inner, gb, c.inner, b);
        Tensor gx(c.in_shape);
        for (int i = 0; i < n; ++i) {
          std::copy_n(gh.ptr() + static_cast<std::size_t>(i) * head, head, gx.ptr() + static_cast<std::size_t>(i) * d);
          std::copy_n(gy.ptr() + static_cast<std::size_t>(i) * (m + s.tail) + m, s.tail,
                      gx.ptr() + static_cast<std::size_t>(i) * d + head);
        }
        return gx;
      }
      case LayerKind::Softmax: {
        const Tensor& y = c.saved.at(0);
        Tensor gx = gy;
        const int n = y.dim(0), k = y.dim(1);
        for (int i = 0; i < n; ++i) {
          const std::size_t o = static_cast<std::size_t>(i) * k;
          double dot = 0.0;
          for (int j = 0; j < k; ++j) dot += gy[o + j] * y[o + j];
          for (int j = 0; j < k; ++j) gx[o + j] = y[o + j] * (gy[o + j] - dot);
        }
        return gx;
      }
    }
    throw std::logic_error("unknown layer kind");
  }

  struct ConvGeom {
    int n, c, h, w, o, kh, kw, s, p, ho, wo;
    std::size_t k() const { return static_cast<std::size_t>(c) * kh * kw; }
    std::size_t pos() const { return static_cast<std::size_t>(ho) * wo; }
  };

  static ConvGeom conv_geom(const LayerSpec& s, const std::vector<int>& in) {
    ConvGeom g{in[0], in[1], in[2], in[3], s.out, s.kernel_h, s.kernel_w, s.stride, s.padding, 0, 0};
    g.ho = (g.h + 2 * g.p - g.kh) / g.s + 1;
    g.wo = (g.w + 2 * g.p - g.kw) / g.s + 1;
    if (g.h + 2 * g.p < g.kh || g.w + 2 * g.p < g.kw || g.ho <= 0 || g.wo <= 0)
      throw std::invalid_argument("Conv2d: input " + std::to_string(g.h) + "x" + std::to_string(g.w) +
                                  " smaller than kernel");
    return g;
  }

  // Valid output columns [lo, hi) for kernel column j, i.e. 0 <= ox*s - p + j < w.
  static std::pair<int, int> conv_valid_range(const ConvGeom& g, int j) {
    int lo = 0;
    while (lo < g.wo && lo * g.s - g.p + j < 0) ++lo;
    int hi = g.wo;
    while (hi > lo && (hi - 1) * g.s - g.p + j >= g.w) --hi;
    return {lo, hi};
  }

  // Unfolds one sample [C, H, W] into a row-major [K, P] patch matrix.
  static void im2col(const ConvGeom& g, const double* x, double* col) {
    const std::size_t P = g.pos();
    for (int ch = 0; ch < g.c; ++ch) {
      const double* xc = x + static_cast<std::size_t>(ch) * g.h * g.w;
      for (int i = 0; i < g.kh; ++i)
        for (int j = 0; j < g.kw; ++j) {
          double* row = col + ((static_cast<std::size_t>(ch) * g.kh + i) * g.kw + j) * P;
          const auto [lo, hi] = conv_valid_range(g, j);
          for (int oy = 0; oy < g.ho; ++oy) {
            double* out = row + static_cast<std::size_t>(oy) * g.wo;
            const int iy = oy * g.s - g.p + i;
            if (iy < 0 || iy >= g.h) {
              std::fill_n(out, g.wo, 0.0);
              continue;
            }
            std::fill_n(out, lo, 0.0);
            std::fill(out + hi, out + g.wo, 0.0);
            const double* xr = xc + static_cast<std::ptrdiff_t>(iy) * g.w - g.p + j;
            if (g.s == 1)
              std::copy(xr + lo, xr + hi, out + lo);
            else
              for (int ox = lo; ox < hi; ++ox) out[ox] = xr[static_cast<std::ptrdiff_t>(ox) * g.s];
          }
        }
    }
  }

  // Adjoint of im2col: scatters a [K, P] matrix back into [C, H, W] (accumulating).
  static void col2im(const ConvGeom& g, const double* col, double* x) {
    const std::size_t P = g.pos();
    for (int ch = 0; ch < g.c; ++ch) {
      double* xc = x + static_cast<std::size_t>(ch) * g.h * g.w;
      for (int i = 0; i < g.kh; ++i)
        for (int j = 0; j < g.kw; ++j) {
          const double* row = col + ((static_cast<std::size_t>(ch) * g.kh + i) * g.kw + j) * P;
          const auto [lo, hi] = conv_valid_range(g, j);
          for (int oy = 0; oy < g.ho; ++oy) {
            const int iy = oy * g.s - g.p + i;
            if (iy < 0 || iy >= g.h) continue;
            const double* in = row + static_cast<std::size_t>(oy) * g.wo;
            double* xr = xc + static_cast<std::ptrdiff_t>(iy) * g.w - g.p + j;
            for (int ox = lo; ox < hi; ++ox) xr[static_cast<std::ptrdiff_t>(ox) * g.s] += in[ox];
          }
        }
    }
  }

  // Per-sample GEMMs keep each patch matrix cache-resident. The cache keeps
  // every sample's patches as [N, K, P] for the weight gradient.
  Tensor conv_forward(const Node& node, const Tensor& x, NodeCache* c, Ctx& ctx) const {
    const LayerSpec& s = node.spec;
    expect_rank(x, 4, "Conv2d");
    if (x.dim(1) != s.in)
      throw std::invalid_argument("Conv2d: expected " + std::to_string(s.in) + " channels, got " + x.shape_str());
    const ConvGeom g = conv_geom(s, x.shape);
    const std::size_t K = g.k(), P = g.pos(), in_size = static_cast<std::size_t>(g.c) * g.h * g.w;
    const bool keep = c && ctx.keep;
    Tensor col({keep ? g.n : 1, static_cast<int>(K), static_cast<int>(P)}, Tensor::Uninitialized{});
    Tensor y({g.n, g.o, g.ho, g.wo}, Tensor::Uninitialized{});
    CMapRow Wm(weights_[node.params[0]].ptr(), g.o, static_cast<Eigen::Index>(K));
    const double* bias = s.bias ? weights_[node.params[1]].ptr() : nullptr;
    for (int n = 0; n < g.n; ++n) {
      double* cn = col.ptr() + (keep ? static_cast<std::size_t>(n) * K * P : 0);
      im2col(g, x.ptr() + n * in_size, cn);
      MapRow Y(y.ptr() + static_cast<std::size_t>(n) * g.o * P, g.o, static_cast<Eigen::Index>(P));
      Y.noalias() = Wm * CMapRow(cn, static_cast<Eigen::Index>(K), static_cast<Eigen::Index>(P));
      if (bias)
        for (int o = 0; o < g.o; ++o) Y.row(o).array() += bias[o];
    }
    if (keep) c->saved = {std::move(col)};
    return y;
  }

  Tensor conv_backward(const Node& node, const Tensor& gy, const NodeCache& c, BCtx& b) const {
    const LayerSpec& s = node.spec;
    const ConvGeom g = conv_geom(s, c.in_shape);
    const std::size_t K = g.k(), P = g.pos(), in_size = static_cast<std::size_t>(g.c) * g.h * g.w;
    const Tensor& col = c.saved.at(0);
    CMapRow Wm(weights_[node.params[0]].ptr(), g.o, static_cast<Eigen::Index>(K));
    Tensor gx;
    if (b.need_input) gx = Tensor(c.in_shape);
    RowMat GC(static_cast<Eigen::Index>(K), static_cast<Eigen::Index>(P));
    for (int n = 0; n < g.n; ++n) {
      CMapRow G(gy.ptr() + static_cast<std::size_t>(n) * g.o * P, g.o, static_cast<Eigen::Index>(P));
      if (b.grads) {
        CMapRow Col(col.ptr() + static_cast<std::size_t>(n) * K * P, static_cast<Eigen::Index>(K),
                    static_cast<Eigen::Index>(P));
        MapRow GW((*b.grads)[node.params[0]].ptr(), g.o, static_cast<Eigen::Index>(K));
        GW.noalias() += G * Col.transpose();
        if (s.bias) {
          Eigen::Map<Eigen::VectorXd> gb((*b.grads)[node.params[1]].ptr(), g.o);
          gb += G.rowwise().sum();
        }
      }
      if (b.need_input) {
        GC.noalias() = Wm.transpose() * G;
        col2im(g, GC.data(), gx.ptr() + n * in_size);
      }
    }
    return gx;
  }

  // BatchNorm views its input as [N, C, S] with S = 1 for rank-2 inputs.
  static void bn_dims(const Tensor& x, int features, int& n, int& ch, std::size_t& sp) {
    if (x.rank() != 2 && x.rank() != 4)
      throw std::invalid_argument("BatchNorm: expected rank 2 or 4 input, got " + x.shape_str());
    n = x.dim(0);
    ch = x.dim(1);
    sp = x.rank() == 4 ? static_cast<std::size_t>(x.dim(2)) * x.dim(3) : 1;
    if (ch != features)
      throw std::invalid_argument("BatchNorm: expected " + std::to_string(features) + " features, got " + x.shape_str());
  }

  Tensor bn_forward(const Node& node, const Tensor& x, NodeCache* c, Ctx& ctx) const {
    int n, ch;
    std::size_t sp;
    bn_dims(x, node.spec.in, n, ch, sp);
    const double* gamma = weights_[node.params[0]].ptr();
    const double* beta = weights_[node.params[1]].ptr();
    const double m = static_cast<double>(n) * sp;
    Tensor y(x.shape, Tensor::Uninitialized{}), xhat(x.shape, Tensor::Uninitialized{}), inv_std({ch});
    for (int k = 0; k < ch; ++k) {
      double mean, var;
      if (ctx.mode == Mode::Train) {
        double acc = 0.0;
        for (int i = 0; i < n; ++i) {
          const double* p = x.ptr() + (static_cast<std::size_t>(i) * ch + k) * sp;
          for (std::size_t q = 0; q < sp; ++q) acc += p[q];
        }
        mean = acc / m;
        double sq = 0.0;
        for (int i = 0; i < n; ++i) {
          const double* p = x.ptr() + (static_cast<std::size_t>(i) * ch + k) * sp;
          for (std::size_t q = 0; q < sp; ++q) sq += (p[q] - mean) * (p[q] - mean);
        }
        var = sq / m;
        if (ctx.buffers) {
          double& rm = (*ctx.buffers)[node.buffers[0]][k];
          double& rv = (*ctx.buffers)[node.buffers[1]][k];
          const double unbiased = m > 1.0 ? sq / (m - 1.0) : var;
          rm = (1.0 - kBatchNormMomentum) * rm + kBatchNormMomentum * mean;
          rv = (1.0 - kBatchNormMomentum) * rv + kBatchNormMomentum * unbiased;
        }
      } else {
        mean = buffers_[node.buffers[0]][k];
        var = buffers_[node.buffers[1]][k];
      }
      const double is = 1.0 / std::sqrt(var + kBatchNormEps);
      inv_std[k] = is;
      for (int i = 0; i < n; ++i) {
        const std::size_t o = (static_cast<std::size_t>(i) * ch + k) * sp;
        for (std::size_t q = 0; q < sp; ++q) {
          const double xh = (x[o + q] - mean) * is;
          xhat[o + q] = xh;
          y[o + q] = gamma[k] * xh + beta[k];
        }
      }
    }
    if (c && ctx.keep) c->saved = {std::move(xhat), std::move(inv_std)};
    return y;
  }

  Tensor bn_backward(const Node& node, const Tensor& gy, const NodeCache& c, BCtx& b) const {
    const Tensor& xhat = c.saved.at(0);
    const Tensor& inv_std = c.saved.at(1);
    int n, ch;
    std::size_t sp;
    bn_dims(xhat, node.spec.in, n, ch, sp);
    const double* gamma = weights_[node.params[0]].ptr();
    const double m = static_cast<double>(n) * sp;
    Tensor gx(xhat.shape, Tensor::Uninitialized{});
    for (int k = 0; k < ch; ++k) {
      double sum_g = 0.0, sum_gx = 0.0;
      for (int i = 0; i < n; ++i) {
        const std::size_t o = (static_cast<std::size_t>(i) * ch + k) * sp;
        for (std::size_t q = 0; q < sp; ++q) {
          sum_g += gy[o + q];
          sum_gx += gy[o + q] * xhat[o + q];
        }
      }
      if (b.grads) {
        (*b.grads)[node.params[0]][k] += sum_gx;
        (*b.grads)[node.params[1]][k] += sum_g;
      }
      const double scale = gamma[k] * inv_std[k];
      for (int i = 0; i < n; ++i) {
        const std::size_t o = (static_cast<std::size_t>(i) * ch + k) * sp;
        for (std::size_t q = 0; q < sp; ++q) {
          if (b.mode == Mode::Train)
            gx[o + q] = scale * (gy[o + q] - sum_g / m - xhat[o + q] * sum_gx / m);
          else
            gx[o + q] = scale * gy[o + q];
        }
      }
    }
    return gx;
  }

  std::vector<LayerSpec> specs_;
  std::vector<Node> nodes_;
  std::vector<std::string> weight_names_;
  std::vector<Tensor> weights_;
  std::vector<std::string> buffer_names_;
  std::vector<Tensor> buffers_;
  Mode mode_ = Mode::Eval;
  Uid uid_;
  std::uint64_t version_ = 0;
};

}  // namespace usv::nn
