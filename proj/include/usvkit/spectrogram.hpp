#pragma once

#include <algorithm>
#include <cmath>
#include <complex>
#include <numbers>
#include <span>
#include <stdexcept>
#include <vector>

#include <Eigen/Dense>
#include <unsupported/Eigen/FFT>

#include "usvkit/audio_io.hpp"

namespace usv {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

enum class Scale { Energy, Decibel };

/// Time-frequency matrix, values(t, f): row = time step, column = frequency bin.
struct SpectrogramGrid {
  Matrix values;
  double dt_s = 0.0;
  double df_hz = 0.0;
  double f0_hz = 0.0;
  Scale scale = Scale::Energy;

  Eigen::Index time_steps() const { return values.rows(); }
  Eigen::Index freq_bins() const { return values.cols(); }
};

struct StftParams {
  double tukey_shape = 0.25;
  int segment_length = 256;
  int dft_length = 256;
  int overlap = 0;

  int hop() const { return segment_length - overlap; }

  void validate() const {
    if (segment_length <= 0 || dft_length <= 0) throw std::invalid_argument("StftParams: lengths must be positive");
    if (overlap < 0 || overlap >= segment_length)
      throw std::invalid_argument("StftParams: overlap must be in [0, segment_length)");
    if (dft_length < segment_length) throw std::invalid_argument("StftParams: dft_length < segment_length");
    if (!(tukey_shape >= 0.0 && tukey_shape <= 1.0)) throw std::invalid_argument("StftParams: tukey shape outside [0, 1]");
  }

  /// 256/256/no overlap: 129 bins, 1.024 ms per step at 250 kHz.
  static StftParams detection() { return {}; }
  /// 400-point segments with a 250-sample hop: 201 bins, 1 ms per step at 250 kHz.
  static StftParams classification() { return {0.25, 400, 400, 150}; }
};

/// Symmetric Tukey window; `shape` is the tapered fraction of the window.
inline std::vector<double> tukey_window(int n, double shape) {
  if (n < 2) throw std::invalid_argument("tukey_window: n must be >= 2");
  if (!(shape >= 0.0 && shape <= 1.0)) throw std::invalid_argument("tukey_window: shape outside [0, 1]");
  std::vector<double> w(static_cast<std::size_t>(n), 1.0);
  if (shape == 0.0) return w;
  const double pi = std::numbers::pi;
  const double m = n - 1;
  const int width = static_cast<int>(std::floor(shape * m / 2.0));
  for (int i = 0; i <= width; ++i)
    w[i] = 0.5 * (1.0 + std::cos(pi * (-1.0 + 2.0 * i / shape / m)));
  for (int i = n - width - 1; i < n; ++i)
    w[i] = 0.5 * (1.0 + std::cos(pi * (-2.0 / shape + 1.0 + 2.0 * i / shape / m)));
  return w;
}

inline Eigen::Index stft_column_count(std::size_t signal_length, const StftParams& p) {
  if (signal_length < static_cast<std::size_t>(p.segment_length)) return 0;
  return static_cast<Eigen::Index>((signal_length - p.segment_length) / p.hop() + 1);
}

/// Squared-magnitude STFT of an arbitrary sample span (unnormalized DFT).
inline SpectrogramGrid stft_energy(std::span<const double> samples, int sample_rate_hz, const StftParams& p) {
  p.validate();
  if (samples.size() < static_cast<std::size_t>(p.segment_length))
    throw std::invalid_argument("stft_energy: signal shorter than one segment (" + std::to_string(samples.size()) +
                                " < " + std::to_string(p.segment_length) + ")");
  const auto window = tukey_window(p.segment_length, p.tukey_shape);
  const Eigen::Index cols = stft_column_count(samples.size(), p);
  const Eigen::Index bins = p.dft_length / 2 + 1;

  SpectrogramGrid grid;
  grid.values.resize(cols, bins);
  grid.dt_s = static_cast<double>(p.hop()) / sample_rate_hz;
  grid.df_hz = static_cast<double>(sample_rate_hz) / p.dft_length;
  grid.scale = Scale::Energy;

  Eigen::FFT<double> fft;
  std::vector<double> frame(static_cast<std::size_t>(p.dft_length), 0.0);
  std::vector<std::complex<double>> spectrum;
  for (Eigen::Index t = 0; t < cols; ++t) {
    const std::size_t start = static_cast<std::size_t>(t) * p.hop();
    for (int i = 0; i < p.segment_length; ++i) frame[i] = samples[start + i] * window[i];
    fft.fwd(spectrum, frame);
    for (Eigen::Index k = 0; k < bins; ++k) grid.values(t, k) = std::norm(spectrum[k]);
  }
  return grid;
}

inline SpectrogramGrid stft_energy(const Recording& rec, const StftParams& p) {
  return stft_energy(rec.samples(), rec.sample_rate_hz(), p);
}

/// Power dB (10 log10) with the floor raised so the output spans at most
/// `clip_range_db`. Zero energy lands on the floor.
inline SpectrogramGrid to_db(const SpectrogramGrid& grid, double clip_range_db) {
  if (grid.scale != Scale::Energy) throw std::invalid_argument("to_db: grid is not on the energy scale");
  if (!(clip_range_db > 0.0)) throw std::invalid_argument("to_db: clip range must be positive");
  static constexpr double kEnergyFloor = 1e-30;
  SpectrogramGrid out = grid;
  out.scale = Scale::Decibel;
  out.values = grid.values.unaryExpr([](double e) { return 10.0 * std::log10(std::max(e, kEnergyFloor)); });
  const double floor = out.values.maxCoeff() - clip_range_db;
  out.values = out.values.cwiseMax(floor);
  return out;
}

}  // namespace usv
