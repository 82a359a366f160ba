#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "usvkit/audio_io.hpp"
#include "usvkit/spectrogram.hpp"

namespace usv {

struct DetectionParams {
  double entropy_threshold = 3.5;
  double ratio_threshold = 2.0;
  int gap_fuse_steps = 5;
  int min_len_steps = 2;
  double band_low_hz = 40000.0;
  double band_high_hz = 110000.0;
  double snippet_pad_ms = 10.0;

  void validate() const {
    if (!std::isfinite(entropy_threshold) || !std::isfinite(ratio_threshold))
      throw std::invalid_argument("DetectionParams: thresholds must be finite");
    if (!(ratio_threshold > 0.0)) throw std::invalid_argument("DetectionParams: ratio_threshold must be positive");
    if (gap_fuse_steps < 0 || min_len_steps < 0)
      throw std::invalid_argument("DetectionParams: step counts must be non-negative");
    if (!(band_low_hz < band_high_hz)) throw std::invalid_argument("DetectionParams: band_low_hz must be < band_high_hz");
    if (!(snippet_pad_ms >= 0.0)) throw std::invalid_argument("DetectionParams: snippet_pad_ms must be >= 0");
  }
};

inline void to_json(nlohmann::json& j, const DetectionParams& p) {
  j = nlohmann::json{{"entropy_threshold", p.entropy_threshold}, {"ratio_threshold", p.ratio_threshold},
                     {"gap_fuse_steps", p.gap_fuse_steps},       {"min_len_steps", p.min_len_steps},
                     {"band_low_hz", p.band_low_hz},             {"band_high_hz", p.band_high_hz},
                     {"snippet_pad_ms", p.snippet_pad_ms}};
}

/// Missing keys keep their defaults; unknown keys are rejected.
inline void from_json(const nlohmann::json& j, DetectionParams& p) {
  static const char* kKeys[] = {"entropy_threshold", "ratio_threshold", "gap_fuse_steps", "min_len_steps",
                                "band_low_hz",       "band_high_hz",    "snippet_pad_ms"};
  if (!j.is_object()) throw std::invalid_argument("detection config must be a JSON object");
  for (const auto& [key, _] : j.items())
    if (std::find_if(std::begin(kKeys), std::end(kKeys), [&](const char* k) { return key == k; }) == std::end(kKeys))
      throw std::invalid_argument("unknown detection config key: " + key);
  DetectionParams d;
  p.entropy_threshold = j.value("entropy_threshold", d.entropy_threshold);
  p.ratio_threshold = j.value("ratio_threshold", d.ratio_threshold);
  p.gap_fuse_steps = j.value("gap_fuse_steps", d.gap_fuse_steps);
  p.min_len_steps = j.value("min_len_steps", d.min_len_steps);
  p.band_low_hz = j.value("band_low_hz", d.band_low_hz);
  p.band_high_hz = j.value("band_high_hz", d.band_high_hz);
  p.snippet_pad_ms = j.value("snippet_pad_ms", d.snippet_pad_ms);
  p.validate();
}

/// Per-step detection features: band entropy H, band energy E_h, low energy
/// E_l and the ratio R = E_h / (E_l + eps).
struct FeatureSeries {
  std::vector<double> entropy;
  std::vector<double> high_energy;
  std::vector<double> low_energy;
  std::vector<double> ratio;
  double dt_s = 0.0;
  int band_bins = 0;

  std::size_t size() const { return entropy.size(); }
};

struct CallEvent {
  double start_s = 0.0;
  double end_s = 0.0;

  double duration_ms() const { return (end_s - start_s) * 1000.0; }
  friend bool operator==(const CallEvent&, const CallEvent&) = default;
};

struct CallSnippet {
  CallEvent event;
  std::vector<double> waveform;
  double pad_ms = 0.0;
  int sample_rate_hz = kCanonicalSampleRate;
  double duration_ms = 0.0;
};

/// Half-open run of indicator steps [start, end).
struct StepInterval {
  std::size_t start = 0;
  std::size_t end = 0;
  friend bool operator==(const StepInterval&, const StepInterval&) = default;
};

inline constexpr double kRatioEpsilon = 1e-12;

/// Inclusive bin range of the vocalization band: the bins nearest to each
/// band edge (bins 41..113, 73 bins, for 976.5625 Hz spacing).
inline std::pair<Eigen::Index, Eigen::Index> band_bins(const SpectrogramGrid& grid, const DetectionParams& params) {
  const auto lo = static_cast<Eigen::Index>(std::lround((params.band_low_hz - grid.f0_hz) / grid.df_hz));
  const auto hi = static_cast<Eigen::Index>(std::lround((params.band_high_hz - grid.f0_hz) / grid.df_hz));
  if (lo < 0 || hi >= grid.freq_bins() || lo > hi)
    throw std::invalid_argument("detection band [" + std::to_string(params.band_low_hz) + ", " +
                                std::to_string(params.band_high_hz) + "] Hz outside the spectrogram frequency axis");
  return {lo, hi};
}

inline FeatureSeries compute_features(const SpectrogramGrid& grid, const DetectionParams& params) {
  if (grid.scale != Scale::Energy) throw std::invalid_argument("compute_features: grid must be on the energy scale");
  const auto [lo, hi] = band_bins(grid, params);
  const Eigen::Index steps = grid.time_steps();
  const int bins = static_cast<int>(hi - lo + 1);
  const double max_entropy = std::log(static_cast<double>(bins));

  FeatureSeries f;
  f.dt_s = grid.dt_s;
  f.band_bins = bins;
  f.entropy.resize(steps);
  f.high_energy.resize(steps);
  f.low_energy.resize(steps);
  f.ratio.resize(steps);
  for (Eigen::Index t = 0; t < steps; ++t) {
    const auto band = grid.values.row(t).segment(lo, bins);
    const double eh = band.sum();
    const double el = grid.values.row(t).head(lo).sum();
    double h = 0.0;
    if (eh > 0.0) {
      for (Eigen::Index k = 0; k < bins; ++k) {
        const double pk = band(k) / eh;
        if (pk > 0.0) h -= pk * std::log(pk);
      }
      h = std::clamp(h, 0.0, max_entropy);
    } else {
      h = max_entropy;  // silent band: uniform by convention so the step never fires
    }
    f.entropy[t] = h;
    f.high_energy[t] = eh;
    f.low_energy[t] = el;
    f.ratio[t] = eh / (el + kRatioEpsilon);
  }
  return f;
}

inline std::vector<std::uint8_t> indicator(const FeatureSeries& features, const DetectionParams& params) {
  const std::size_t n = features.entropy.size();
  if (features.ratio.size() != n) throw std::invalid_argument("indicator: feature series length mismatch");
  std::vector<std::uint8_t> out(n, 0);
  for (std::size_t t = 0; t < n; ++t)
    out[t] = (features.entropy[t] <= params.entropy_threshold && features.ratio[t] >= params.ratio_threshold) ? 1 : 0;
  return out;
}

/// Merge zero-gaps strictly shorter than gap_fuse_steps, then drop runs
/// strictly shorter than min_len_steps.
inline std::vector<StepInterval> fuse_and_filter(const std::vector<std::uint8_t>& ind, const DetectionParams& params) {
  std::vector<StepInterval> runs;
  for (std::size_t t = 0; t < ind.size();) {
    if (!ind[t]) {
      ++t;
      continue;
    }
    std::size_t e = t;
    while (e < ind.size() && ind[e]) ++e;
    runs.push_back({t, e});
    t = e;
  }
  std::vector<StepInterval> fused;
  for (const auto& r : runs) {
    if (!fused.empty() && r.start - fused.back().end < static_cast<std::size_t>(params.gap_fuse_steps))
      fused.back().end = r.end;
    else
      fused.push_back(r);
  }
  std::erase_if(fused, [&](const StepInterval& r) {
    return r.end - r.start < static_cast<std::size_t>(params.min_len_steps);
  });
  return fused;
}

struct DetectionResult {
  FeatureSeries features;
  std::vector<std::uint8_t> indicator;
  std::vector<CallEvent> events;
};

inline DetectionResult detect_calls_detailed(const Recording& rec, const DetectionParams& params) {
  params.validate();
  const auto grid = stft_energy(rec, StftParams::detection());
  DetectionResult r;
  r.features = compute_features(grid, params);
  r.indicator = indicator(r.features, params);
  for (const auto& s : fuse_and_filter(r.indicator, params))
    r.events.push_back({static_cast<double>(s.start) * grid.dt_s, static_cast<double>(s.end) * grid.dt_s});
  return r;
}

inline std::vector<CallEvent> detect_calls(const Recording& rec, const DetectionParams& params) {
  return detect_calls_detailed(rec, params).events;
}

/// Cut [start - pad, end + pad] out of the recording, clamped to its edges.
inline CallSnippet extract_snippet(const Recording& rec, const CallEvent& event, double pad_ms) {
  if (!(pad_ms >= 0.0)) throw std::invalid_argument("extract_snippet: negative padding");
  if (!(event.start_s >= 0.0 && event.start_s < event.end_s && event.end_s <= rec.duration_s() + 1e-9))
    throw std::invalid_argument("extract_snippet: event outside recording");
  const double rate = rec.sample_rate_hz();
  const auto n = static_cast<long>(rec.size());
  const long a = std::clamp(std::lround((event.start_s - pad_ms / 1000.0) * rate), 0L, n);
  const long b = std::clamp(std::lround((event.end_s + pad_ms / 1000.0) * rate), 0L, n);
  CallSnippet s;
  s.event = event;
  s.pad_ms = pad_ms;
  s.sample_rate_hz = rec.sample_rate_hz();
  s.duration_ms = event.duration_ms();
  const auto samples = rec.samples();
  s.waveform.assign(samples.begin() + a, samples.begin() + b);
  return s;
}

struct DetectionMatch {
  std::size_t predicted = 0;
  std::size_t truth = 0;
  double overlap_s = 0.0;
};

struct DetectionReport {
  std::size_t true_positives = 0;
  std::size_t false_positives = 0;
  std::size_t missed = 0;
  std::size_t one_as_two = 0;  // unmatched predictions overlapping a matched truth call
  std::size_t two_as_one = 0;  // unmatched truth calls overlapping a matched prediction
  double recall = 0.0;
  double precision = 0.0;
  double mean_start_delay_ms = 0.0;
  double mean_end_delay_ms = 0.0;
  std::vector<DetectionMatch> matches;
};

inline double overlap_s(const CallEvent& a, const CallEvent& b) {
  return std::max(0.0, std::min(a.end_s, b.end_s) - std::max(a.start_s, b.start_s));
}

inline void require_sorted_disjoint(const std::vector<CallEvent>& v, const char* what) {
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (!(v[i].start_s < v[i].end_s)) throw std::invalid_argument(std::string(what) + ": empty or inverted interval");
    if (i > 0 && v[i].start_s < v[i - 1].end_s)
      throw std::invalid_argument(std::string(what) + ": intervals overlap or are unsorted");
  }
}

/// Greedy one-to-one matching: positive-overlap pairs are taken in order of
/// decreasing overlap while both sides are still free.
inline DetectionReport evaluate_detection(const std::vector<CallEvent>& predicted, const std::vector<CallEvent>& truth) {
  require_sorted_disjoint(predicted, "predicted");
  require_sorted_disjoint(truth, "truth");

  std::vector<DetectionMatch> pairs;
  std::size_t j0 = 0;
  for (std::size_t i = 0; i < predicted.size(); ++i) {
    while (j0 < truth.size() && truth[j0].end_s <= predicted[i].start_s) ++j0;
    for (std::size_t j = j0; j < truth.size() && truth[j].start_s < predicted[i].end_s; ++j) {
      const double ov = overlap_s(predicted[i], truth[j]);
      if (ov > 0.0) pairs.push_back({i, j, ov});
    }
  }
  std::stable_sort(pairs.begin(), pairs.end(),
                   [](const DetectionMatch& a, const DetectionMatch& b) { return a.overlap_s > b.overlap_s; });

  std::vector<char> pred_used(predicted.size(), 0), truth_used(truth.size(), 0);
  DetectionReport r;
  for (const auto& m : pairs) {
    if (pred_used[m.predicted] || truth_used[m.truth]) continue;
    pred_used[m.predicted] = truth_used[m.truth] = 1;
    r.matches.push_back(m);
  }
  std::sort(r.matches.begin(), r.matches.end(),
            [](const DetectionMatch& a, const DetectionMatch& b) { return a.truth < b.truth; });

  r.true_positives = r.matches.size();
  r.false_positives = predicted.size() - r.true_positives;
  r.missed = truth.size() - r.true_positives;
  for (const auto& m : pairs) {
    if (!pred_used[m.predicted] && truth_used[m.truth]) pred_used[m.predicted] = 2, ++r.one_as_two;
  }
  for (const auto& m : pairs) {
    if (!truth_used[m.truth] && pred_used[m.predicted] == 1) truth_used[m.truth] = 2, ++r.two_as_one;
  }
  r.recall = truth.empty() ? 1.0 : static_cast<double>(r.true_positives) / truth.size();
  r.precision = predicted.empty() ? 1.0 : static_cast<double>(r.true_positives) / predicted.size();
  if (!r.matches.empty()) {
    double ds = 0.0, de = 0.0;
    for (const auto& m : r.matches) {
      ds += predicted[m.predicted].start_s - truth[m.truth].start_s;
      de += predicted[m.predicted].end_s - truth[m.truth].end_s;
    }
    r.mean_start_delay_ms = 1000.0 * ds / r.matches.size();
    r.mean_end_delay_ms = 1000.0 * de / r.matches.size();
  }
  return r;
}

}  // namespace usv
