#pragma once

#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"

namespace usv::nn {

enum class LayerKind {
  Dense,
  Conv2d,
  BatchNorm,
  ReLU,
  Dropout,
  ResidualBlock,
  Flatten,
  GlobalAveragePool,
  Concat,
  Softmax
};

NLOHMANN_JSON_SERIALIZE_ENUM(LayerKind, {{LayerKind::Dense, "Dense"},
                                         {LayerKind::Conv2d, "Conv2d"},
                                         {LayerKind::BatchNorm, "BatchNorm"},
                                         {LayerKind::ReLU, "ReLU"},
                                         {LayerKind::Dropout, "Dropout"},
                                         {LayerKind::ResidualBlock, "ResidualBlock"},
                                         {LayerKind::Flatten, "Flatten"},
                                         {LayerKind::GlobalAveragePool, "GlobalAveragePool"},
                                         {LayerKind::Concat, "Concat"},
                                         {LayerKind::Softmax, "Softmax"}})

/// Declarative description of one layer.
///
/// ResidualBlock computes inner(x) + shortcut(x), where an empty shortcut is
/// the identity. Concat splits the trailing `tail` features off a [N, D]
/// input, runs `inner` on the leading D - tail features and appends the tail
/// to the branch output; this is how a side input joins late in the network.
struct LayerSpec {
  LayerKind kind = LayerKind::ReLU;
  int in = 0;   // Dense inputs, Conv2d input channels, BatchNorm features
  int out = 0;  // Dense outputs, Conv2d output channels
  int kernel_h = 0;
  int kernel_w = 0;
  int stride = 1;
  int padding = 0;
  bool bias = true;
  double rate = 0.0;  // Dropout probability
  int tail = 0;       // Concat passthrough width
  std::vector<LayerSpec> inner;
  std::vector<LayerSpec> shortcut;

  static LayerSpec dense(int in, int out, bool bias = true) {
    LayerSpec s;
    s.kind = LayerKind::Dense;
    s.in = in;
    s.out = out;
    s.bias = bias;
    return s;
  }
  static LayerSpec conv2d(int in_ch, int out_ch, int kh, int kw, int stride = 1, int padding = 0, bool bias = true) {
    LayerSpec s;
    s.kind = LayerKind::Conv2d;
    s.in = in_ch;
    s.out = out_ch;
    s.kernel_h = kh;
    s.kernel_w = kw;
    s.stride = stride;
    s.padding = padding;
    s.bias = bias;
    return s;
  }
  static LayerSpec batch_norm(int features) {
    LayerSpec s;
    s.kind = LayerKind::BatchNorm;
    s.in = features;
    return s;
  }
  static LayerSpec relu() { return LayerSpec{}; }
  static LayerSpec dropout(double rate) {
    LayerSpec s;
    s.kind = LayerKind::Dropout;
    s.rate = rate;
    return s;
  }
  static LayerSpec residual(std::vector<LayerSpec> inner, std::vector<LayerSpec> shortcut = {}) {
    LayerSpec s;
    s.kind = LayerKind::ResidualBlock;
    s.inner = std::move(inner);
    s.shortcut = std::move(shortcut);
    return s;
  }
  static LayerSpec flatten() {
    LayerSpec s;
    s.kind = LayerKind::Flatten;
    return s;
  }
  static LayerSpec global_average_pool() {
    LayerSpec s;
    s.kind = LayerKind::GlobalAveragePool;
    return s;
  }
  static LayerSpec concat(std::vector<LayerSpec> branch, int tail) {
    LayerSpec s;
    s.kind = LayerKind::Concat;
    s.inner = std::move(branch);
    s.tail = tail;
    return s;
  }
  static LayerSpec softmax() {
    LayerSpec s;
    s.kind = LayerKind::Softmax;
    return s;
  }

  friend bool operator==(const LayerSpec&, const LayerSpec&) = default;
};

inline void to_json(nlohmann::json& j, const LayerSpec& s) {
  j = nlohmann::json{{"kind", s.kind}};
  switch (s.kind) {
    case LayerKind::Dense:
      j["in"] = s.in, j["out"] = s.out, j["bias"] = s.bias;
      break;
    case LayerKind::Conv2d:
      j["in"] = s.in, j["out"] = s.out, j["kernel_h"] = s.kernel_h, j["kernel_w"] = s.kernel_w;
      j["stride"] = s.stride, j["padding"] = s.padding, j["bias"] = s.bias;
      break;
    case LayerKind::BatchNorm: j["in"] = s.in; break;
    case LayerKind::Dropout: j["rate"] = s.rate; break;
    case LayerKind::ResidualBlock:
      j["inner"] = s.inner, j["shortcut"] = s.shortcut;
      break;
    case LayerKind::Concat:
      j["inner"] = s.inner, j["tail"] = s.tail;
      break;
    default: break;
  }
}

inline void from_json(const nlohmann::json& j, LayerSpec& s) {
  s = LayerSpec{};
  j.at("kind").get_to(s.kind);
  s.in = j.value("in", 0);
  s.out = j.value("out", 0);
  s.kernel_h = j.value("kernel_h", 0);
  s.kernel_w = j.value("kernel_w", 0);
  s.stride = j.value("stride", 1);
  s.padding = j.value("padding", 0);
  s.bias = j.value("bias", true);
  s.rate = j.value("rate", 0.0);
  s.tail = j.value("tail", 0);
  if (j.contains("inner")) j.at("inner").get_to(s.inner);
  if (j.contains("shortcut")) j.at("shortcut").get_to(s.shortcut);
}

}  // namespace usv::nn
