#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "usvkit/detection.hpp"
#include "usvkit/nn/tensor.hpp"
#include "usvkit/nn/train.hpp"
#include "usvkit/rng.hpp"
#include "usvkit/spectrogram.hpp"

namespace usv {

using nn::Mode;

inline constexpr double kFnnPadMs = 10.0;
inline constexpr double kCnnPadMs = 60.0;
inline constexpr double kMaxCallMs = 150.0;
inline constexpr int kFnnRows = 48;  // frequency
inline constexpr int kFnnCols = 8;   // time
inline constexpr int kFnnInputSize = kFnnRows * kFnnCols + 1;
inline constexpr int kCnnBins = 201;
inline constexpr int kCnnEvalWidth = 170;
inline constexpr int kCnnTrainWidth = 150;
inline constexpr int kCnnPaddedWidth = 190;

/// Relative duration feature shared by both classifiers.
inline double relative_duration(double duration_ms) { return std::clamp(duration_ms / kMaxCallMs, 0.0, 1.0); }

/// Mean over a near-equal partition: output cell (i, j) averages input rows
/// [floor(i*R/r), floor((i+1)*R/r)) and the analogous columns.
inline Matrix downsample_mean(const Matrix& in, int out_rows, int out_cols) {
  if (out_rows <= 0 || out_cols <= 0) throw std::invalid_argument("downsample_mean: output dims must be positive");
  if (out_rows > in.rows() || out_cols > in.cols())
    throw std::invalid_argument("downsample_mean: output " + std::to_string(out_rows) + "x" + std::to_string(out_cols) +
                                " larger than input " + std::to_string(in.rows()) + "x" + std::to_string(in.cols()));
  Matrix out(out_rows, out_cols);
  const Eigen::Index R = in.rows(), C = in.cols();
  for (int i = 0; i < out_rows; ++i) {
    const Eigen::Index r0 = i * R / out_rows, r1 = (i + 1) * R / out_rows;
    for (int j = 0; j < out_cols; ++j) {
      const Eigen::Index c0 = j * C / out_cols, c1 = (j + 1) * C / out_cols;
      out(i, j) = in.block(r0, c0, r1 - r0, c1 - c0).mean();
    }
  }
  return out;
}

struct FnnInput {
  std::array<double, kFnnRows * kFnnCols> S{};  // S[f * 8 + t]
  double T = 0.0;

  nn::Tensor to_tensor() const {
    nn::Tensor t({kFnnInputSize});
    std::copy(S.begin(), S.end(), t.data.begin());
    t[kFnnInputSize - 1] = T;
    return t;
  }
};

/// Min-max normalized 80 dB spectrogram of a 10 ms padded snippet, stored
/// frequency x time (129 rows).
inline Matrix fnn_spectrogram(const CallSnippet& snippet) {
  const auto energy = stft_energy(snippet.waveform, snippet.sample_rate_hz, StftParams::detection());
  Matrix db = to_db(energy, 80.0).values.transpose();
  const double lo = db.minCoeff(), hi = db.maxCoeff();
  if (hi > lo)
    db = (db.array() - lo) / (hi - lo);
  else
    db.setZero();
  return db;
}

/// Trim, downsample and (in Train) perturb a normalized FNN spectrogram.
inline FnnInput fnn_from_spectrogram(const Matrix& norm, double duration_ms, Mode mode, Rng& rng) {
  const auto cols = static_cast<int>(norm.cols());
  int left = 4, right = 4;
  if (mode == Mode::Train) {
    left = static_cast<int>(rng.uniform_int(0, 9));
    right = static_cast<int>(rng.uniform_int(0, 9));
  }
  // never trim below the 8 target columns
  while (cols - left - right < kFnnCols && (left > 0 || right > 0)) (left >= right ? left : right)--;
  Matrix kept = norm.middleCols(left, cols - left - right);
  if (kept.cols() < kFnnCols) {
    Matrix wide(kept.rows(), kFnnCols);
    for (int j = 0; j < kFnnCols; ++j) wide.col(j) = kept.col(j * kept.cols() / kFnnCols);
    kept = std::move(wide);
  }
  const Matrix small = downsample_mean(kept, kFnnRows, kFnnCols);
  FnnInput out;
  for (int f = 0; f < kFnnRows; ++f)
    for (int t = 0; t < kFnnCols; ++t) out.S[f * kFnnCols + t] = small(f, t);
  if (mode == Mode::Train) {
    std::array<double, kFnnRows * kFnnCols> noise;
    rng.fill_normal(noise, 0.0, 0.05);
    for (std::size_t i = 0; i < out.S.size(); ++i) out.S[i] = std::clamp(out.S[i] + noise[i], 0.0, 1.0);
  }
  out.T = relative_duration(duration_ms);
  return out;
}

inline FnnInput fnn_preprocess(const CallSnippet& snippet, Mode mode, Rng& rng) {
  return fnn_from_spectrogram(fnn_spectrogram(snippet), snippet.duration_ms, mode, rng);
}

/// Per-channel normalization constants for the two spectrogram channels.
struct DatasetStats {
  std::array<double, 2> mean{0.0, 0.0};
  std::array<double, 2> std{1.0, 1.0};

  void validate() const {
    for (double s : std)
      if (!(s > 0.0)) throw std::invalid_argument("DatasetStats: std must be positive");
  }
};

inline void to_json(nlohmann::json& j, const DatasetStats& s) { j = {{"mean", s.mean}, {"std", s.std}}; }
inline void from_json(const nlohmann::json& j, DatasetStats& s) {
  j.at("mean").get_to(s.mean);
  j.at("std").get_to(s.std);
  s.validate();
}

/// Energy ("smooth") and 60 dB spectrograms of a 60 ms padded snippet,
/// each 201 frequency rows x l one-millisecond columns.
struct CnnSpectra {
  std::array<Matrix, 2> channel;
  double duration_ms = 0.0;
  Eigen::Index columns() const { return channel[0].cols(); }
};

inline CnnSpectra cnn_spectra(const CallSnippet& snippet) {
  const auto energy = stft_energy(snippet.waveform, snippet.sample_rate_hz, StftParams::classification());
  CnnSpectra s;
  s.channel[0] = energy.values.transpose();
  s.channel[1] = to_db(energy, 60.0).values.transpose();
  s.duration_ms = snippet.duration_ms;
  return s;
}

struct CnnOptions {
  /// Normalize each spectrogram by its own mean/std instead of the dataset's.
  bool per_spectrogram_norm = false;
};

namespace detail {

inline Matrix replicate_pad_cols(const Matrix& m, int width) {
  const auto w = static_cast<int>(m.cols());
  const int left = (width - w) / 2;
  Matrix out(m.rows(), width);
  for (int j = 0; j < width; ++j) out.col(j) = m.col(std::clamp(j - left, 0, w - 1));
  return out;
}

// Linear interpolation along the time axis (pixel-centre aligned).
inline Matrix rescale_cols(const Matrix& m, int width) {
  const auto w = static_cast<int>(m.cols());
  Matrix out(m.rows(), width);
  const double scale = static_cast<double>(w) / width;
  for (int j = 0; j < width; ++j) {
    const double x = std::clamp((j + 0.5) * scale - 0.5, 0.0, static_cast<double>(w - 1));
    const int a = static_cast<int>(std::floor(x));
    const int b = std::min(a + 1, w - 1);
    const double f = x - a;
    out.col(j) = (1.0 - f) * m.col(a) + f * m.col(b);
  }
  return out;
}

// Moves content `shift` bins up the frequency axis, replicating the edge row.
inline Matrix shift_rows(const Matrix& m, int shift) {
  const auto h = static_cast<int>(m.rows());
  Matrix out(h, m.cols());
  for (int i = 0; i < h; ++i) out.row(i) = m.row(std::clamp(i - shift, 0, h - 1));
  return out;
}

}  // namespace detail

/// Columns kept by the initial centre crop of an l-column padded spectrogram.
inline int cnn_crop_width(int padded_columns) { return std::min(padded_columns - 100, kCnnEvalWidth); }

/// CNN input [3, 201, W] from precomputed spectra: W = 170 in Eval, 150 in Train.
inline nn::Tensor cnn_from_spectra(const CnnSpectra& spectra, Mode mode, const DatasetStats& stats, Rng& rng,
                                   const CnnOptions& opts = {}) {
  const auto len = static_cast<int>(spectra.columns());
  if (len - 100 < 1)
    throw std::invalid_argument("cnn_preprocess: padded snippet has " + std::to_string(len) +
                                " columns; at least 101 are needed for the centre crop");
  if (!opts.per_spectrogram_norm) stats.validate();
  const int crop = cnn_crop_width(len);
  int start = (len - crop) / 2;
  if (mode == Mode::Train) start += static_cast<int>(rng.uniform_int(-10, 10));
  start = std::clamp(start, 0, len - crop);

  const int scaled = mode == Mode::Train ? static_cast<int>(rng.uniform_int(kCnnEvalWidth, 220)) : 0;
  const int fshift = mode == Mode::Train ? static_cast<int>(rng.uniform_int(-10, 10)) : 0;
  const int width = mode == Mode::Train ? kCnnTrainWidth : kCnnEvalWidth;

  nn::Tensor out({3, kCnnBins, width});
  const std::size_t plane = static_cast<std::size_t>(kCnnBins) * width;
  for (int c = 0; c < 2; ++c) {
    Matrix m = spectra.channel[c].middleCols(start, crop);
    double mu = stats.mean[c], sd = stats.std[c];
    if (opts.per_spectrogram_norm) {
      mu = m.mean();
      sd = std::sqrt((m.array() - mu).square().mean());
      if (!(sd > 0.0)) sd = 1.0;
    }
    m = (m.array() - mu) / sd;
    m = detail::replicate_pad_cols(m, kCnnPaddedWidth);
    if (mode == Mode::Eval) {
      m = m.middleCols((kCnnPaddedWidth - kCnnEvalWidth) / 2, kCnnEvalWidth).eval();
    } else {
      m = detail::rescale_cols(m, scaled);
      m = detail::shift_rows(m.middleCols((scaled - kCnnTrainWidth) / 2, kCnnTrainWidth), fshift);
    }
    double* dst = out.ptr() + c * plane;
    Eigen::Map<Matrix>(dst, kCnnBins, width) = m;
  }
  if (mode == Mode::Train) {
    std::vector<double> noise(2 * plane);
    rng.fill_normal(noise, 0.0, 0.01);
    for (std::size_t i = 0; i < noise.size(); ++i) out[i] += noise[i];
  }
  std::fill(out.data.begin() + 2 * plane, out.data.end(), relative_duration(spectra.duration_ms));
  return out;
}

inline nn::Tensor cnn_preprocess(const CallSnippet& snippet, Mode mode, const DatasetStats& stats, Rng& rng,
                                 const CnnOptions& opts = {}) {
  return cnn_from_spectra(cnn_spectra(snippet), mode, stats, rng, opts);
}

/// Population mean/std per channel over every value of every spectrogram,
/// merged across snippets with the pairwise update.
inline DatasetStats compute_stats(const std::vector<const CnnSpectra*>& set) {
  if (set.empty()) throw std::invalid_argument("compute_stats: empty snippet list");
  DatasetStats out;
  for (int c = 0; c < 2; ++c) {
    double n = 0.0, mean = 0.0, m2 = 0.0;
    for (const auto* s : set) {
      const Matrix& m = s->channel[c];
      const auto nb = static_cast<double>(m.size());
      if (nb == 0.0) continue;
      const double mb = m.mean();
      const double m2b = (m.array() - mb).square().sum();
      const double delta = mb - mean;
      const double tot = n + nb;
      mean += delta * nb / tot;
      m2 += m2b + delta * delta * n * nb / tot;
      n = tot;
    }
    out.mean[c] = mean;
    out.std[c] = std::sqrt(m2 / n);
    if (!(out.std[c] > 0.0))
      throw std::invalid_argument("compute_stats: channel " + std::to_string(c) + " has zero variance");
  }
  return out;
}

inline DatasetStats compute_stats(const std::vector<CallSnippet>& snippets) {
  std::vector<CnnSpectra> spectra;
  for (const auto& s : snippets) spectra.push_back(cnn_spectra(s));
  std::vector<const CnnSpectra*> ptrs;
  for (const auto& s : spectra) ptrs.push_back(&s);
  return compute_stats(ptrs);
}

/// Classifier datasets over labeled snippets; spectrograms are computed once
/// and the per-sample augmentation runs on every draw.
class FnnDataset final : public nn::Dataset {
 public:
  FnnDataset(const std::vector<CallSnippet>& snippets, std::vector<CallClass> labels) : labels_(std::move(labels)) {
    if (snippets.size() != labels_.size()) throw std::invalid_argument("FnnDataset: snippet/label count mismatch");
    for (const auto& s : snippets) {
      grids_.push_back(fnn_spectrogram(s));
      durations_.push_back(s.duration_ms);
    }
  }
  std::size_t size() const override { return grids_.size(); }
  CallClass label(std::size_t i) const override { return labels_.at(i); }
  nn::Tensor sample(std::size_t i, Mode mode, Rng& rng) const override {
    return fnn_from_spectrogram(grids_.at(i), durations_[i], mode, rng).to_tensor();
  }

 private:
  std::vector<Matrix> grids_;
  std::vector<double> durations_;
  std::vector<CallClass> labels_;
};

class CnnDataset final : public nn::Dataset {
 public:
  CnnDataset(const std::vector<CallSnippet>& snippets, std::vector<CallClass> labels, CnnOptions opts = {})
      : labels_(std::move(labels)), opts_(opts) {
    if (snippets.size() != labels_.size()) throw std::invalid_argument("CnnDataset: snippet/label count mismatch");
    for (const auto& s : snippets) spectra_.push_back(cnn_spectra(s));
  }
  std::size_t size() const override { return spectra_.size(); }
  CallClass label(std::size_t i) const override { return labels_.at(i); }
  nn::Tensor sample(std::size_t i, Mode mode, Rng& rng) const override {
    return cnn_from_spectra(spectra_.at(i), mode, stats_, rng, opts_);
  }

  /// Stats over a subset (the training fold); must be set before sampling.
  DatasetStats fit_stats(const std::vector<std::size_t>& indices) const {
    std::vector<const CnnSpectra*> ptrs;
    for (auto i : indices) ptrs.push_back(&spectra_.at(i));
    return compute_stats(ptrs);
  }
  void set_stats(const DatasetStats& s) { stats_ = s; }
  const DatasetStats& stats() const { return stats_; }
  const CnnSpectra& spectra(std::size_t i) const { return spectra_.at(i); }

 private:
  std::vector<CnnSpectra> spectra_;
  std::vector<CallClass> labels_;
  DatasetStats stats_;
  CnnOptions opts_;
};

}  // namespace usv
