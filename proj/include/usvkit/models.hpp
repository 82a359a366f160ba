#pragma once

#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "usvkit/call_class.hpp"
#include "usvkit/nn/layers.hpp"
#include "usvkit/nn/model.hpp"

namespace usv {

inline constexpr std::size_t kFnnReferenceParams = 71600;
inline constexpr std::size_t kCnnReferenceParams = 149354;

inline constexpr int kFnnSpectrogramFeatures = 384;  // 48 x 8

/// Y-shaped FNN: three BN-Dense-ReLU-Dropout blocks on the spectrogram
/// features, duration joined before the last hidden layer.
struct FnnArchConfig {
  int h1 = 128;
  int h2 = 96;
  int h3 = 56;
  int h4 = 52;
  double dropout = 0.2;

  void validate() const {
    if (h1 <= 0 || h2 <= 0 || h3 <= 0 || h4 <= 0) throw std::invalid_argument("FnnArchConfig: sizes must be positive");
    if (!(dropout >= 0.0 && dropout < 1.0)) throw std::invalid_argument("FnnArchConfig: dropout must be in [0, 1)");
  }
};

inline void to_json(nlohmann::json& j, const FnnArchConfig& c) {
  j = {{"h1", c.h1}, {"h2", c.h2}, {"h3", c.h3}, {"h4", c.h4}, {"dropout", c.dropout}};
}

inline void from_json(const nlohmann::json& j, FnnArchConfig& c) {
  const FnnArchConfig d;
  c.h1 = j.value("h1", d.h1);
  c.h2 = j.value("h2", d.h2);
  c.h3 = j.value("h3", d.h3);
  c.h4 = j.value("h4", d.h4);
  c.dropout = j.value("dropout", d.dropout);
  c.validate();
}

/// Input: [N, 385] with the 384 spectrogram features first and T last.
inline std::vector<nn::LayerSpec> fnn_layers(const FnnArchConfig& c) {
  using nn::LayerSpec;
  c.validate();
  std::vector<LayerSpec> branch;
  int width = kFnnSpectrogramFeatures;
  for (int h : {c.h1, c.h2, c.h3}) {
    branch.push_back(LayerSpec::batch_norm(width));
    branch.push_back(LayerSpec::dense(width, h));
    branch.push_back(LayerSpec::relu());
    branch.push_back(LayerSpec::dropout(c.dropout));
    width = h;
  }
  return {LayerSpec::concat(std::move(branch), 1), LayerSpec::dense(c.h3 + 1, c.h4), LayerSpec::relu(),
          LayerSpec::dropout(c.dropout), LayerSpec::dense(c.h4, static_cast<int>(kNumClasses))};
}

inline nn::Model build_fnn(const FnnArchConfig& c = {}, std::uint64_t init_seed = 0) {
  return nn::Model(fnn_layers(c), init_seed);
}

/// Residual CNN. The stem is a strided patch convolution that brings the
/// 201 x W spectrogram down before the residual stages; each stage opens
/// with a block of the given stride and the shortcut becomes a 1x1
/// projection whenever the block changes shape.
struct CnnArchConfig {
  int input_channels = 3;
  int stem_channels = 16;
  int stem_kernel = 8;
  int stem_stride = 8;
  std::vector<int> stage_widths{16, 32, 56};
  std::vector<int> stage_blocks{2, 2, 2};
  std::vector<int> stage_strides{1, 2, 2};
  double dropout = 0.2;

  void validate() const {
    if (input_channels <= 0 || stem_channels <= 0 || stem_kernel <= 0 || stem_stride <= 0)
      throw std::invalid_argument("CnnArchConfig: stem sizes must be positive");
    if (stage_widths.empty() || stage_widths.size() != stage_blocks.size() ||
        stage_widths.size() != stage_strides.size())
      throw std::invalid_argument("CnnArchConfig: stage lists must be non-empty and equally long");
    for (std::size_t i = 0; i < stage_widths.size(); ++i)
      if (stage_widths[i] <= 0 || stage_blocks[i] <= 0 || stage_strides[i] <= 0)
        throw std::invalid_argument("CnnArchConfig: stage " + std::to_string(i) + " has a non-positive entry");
    if (!(dropout >= 0.0 && dropout < 1.0)) throw std::invalid_argument("CnnArchConfig: dropout must be in [0, 1)");
  }
};

inline void to_json(nlohmann::json& j, const CnnArchConfig& c) {
  j = {{"input_channels", c.input_channels}, {"stem_channels", c.stem_channels}, {"stem_kernel", c.stem_kernel},
       {"stem_stride", c.stem_stride},       {"stage_widths", c.stage_widths},   {"stage_blocks", c.stage_blocks},
       {"stage_strides", c.stage_strides},   {"dropout", c.dropout}};
}

inline void from_json(const nlohmann::json& j, CnnArchConfig& c) {
  const CnnArchConfig d;
  c.input_channels = j.value("input_channels", d.input_channels);
  c.stem_channels = j.value("stem_channels", d.stem_channels);
  c.stem_kernel = j.value("stem_kernel", d.stem_kernel);
  c.stem_stride = j.value("stem_stride", d.stem_stride);
  c.stage_widths = j.value("stage_widths", d.stage_widths);
  c.stage_blocks = j.value("stage_blocks", d.stage_blocks);
  c.stage_strides = j.value("stage_strides", d.stage_strides);
  c.dropout = j.value("dropout", d.dropout);
  c.validate();
}

inline std::vector<nn::LayerSpec> cnn_layers(const CnnArchConfig& c) {
  using nn::LayerSpec;
  c.validate();
  std::vector<LayerSpec> layers{
      LayerSpec::conv2d(c.input_channels, c.stem_channels, c.stem_kernel, c.stem_kernel, c.stem_stride, 0, false),
      LayerSpec::batch_norm(c.stem_channels), LayerSpec::relu()};
  int ch = c.stem_channels;
  for (std::size_t s = 0; s < c.stage_widths.size(); ++s) {
    const int w = c.stage_widths[s];
    for (int b = 0; b < c.stage_blocks[s]; ++b) {
      const int stride = b == 0 ? c.stage_strides[s] : 1;
      std::vector<LayerSpec> inner{LayerSpec::conv2d(ch, w, 3, 3, stride, 1, false), LayerSpec::batch_norm(w),
                                   LayerSpec::relu(), LayerSpec::dropout(c.dropout),
                                   LayerSpec::conv2d(w, w, 3, 3, 1, 1, false), LayerSpec::batch_norm(w)};
      std::vector<LayerSpec> shortcut;
      if (stride != 1 || ch != w)
        shortcut = {LayerSpec::conv2d(ch, w, 1, 1, stride, 0, false), LayerSpec::batch_norm(w)};
      layers.push_back(LayerSpec::residual(std::move(inner), std::move(shortcut)));
      layers.push_back(LayerSpec::relu());
      ch = w;
    }
  }
  layers.push_back(LayerSpec::global_average_pool());
  layers.push_back(LayerSpec::dense(ch, static_cast<int>(kNumClasses)));
  return layers;
}

inline nn::Model build_custom_cnn(const CnnArchConfig& c = {}, std::uint64_t init_seed = 0) {
  return nn::Model(cnn_layers(c), init_seed);
}

/// Smallest frequency/time extent the stem accepts.
inline int cnn_min_input_extent(const CnnArchConfig& c) { return c.stem_kernel; }

/// e.g. "148973 trainable parameters (-381 vs 149354)".
inline std::string param_count_summary(const nn::Model& m, std::size_t reference) {
  const auto n = static_cast<long long>(m.param_count());
  const long long d = n - static_cast<long long>(reference);
  return std::to_string(n) + " trainable parameters (" + (d >= 0 ? "+" : "") + std::to_string(d) + " vs " +
         std::to_string(reference) + ")";
}

}  // namespace usv
