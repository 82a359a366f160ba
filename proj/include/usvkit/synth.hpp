#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "usvkit/audio_io.hpp"
#include "usvkit/call_class.hpp"
#include "usvkit/csv.hpp"
#include "usvkit/detection.hpp"
#include "usvkit/rng.hpp"

namespace usv {

inline constexpr double kModulationLimitHz = 6000.0;
inline constexpr double kShortLimitMs = 5.0;
inline constexpr double kMinStepHz = 10000.0;
inline constexpr double kRampMs = 1.0;

/// One synthetic call. Trajectories, with t the fraction of the call elapsed:
///   Flat, Short    base + depth * t                   (linear drift)
///   Modulated      base + depth * (1 - |2t - 1|)      (chevron)
///   FrequencyStep  base, then base + step_offset from t = step_fraction
///   Composite      base and second_freq together
struct SynthCallSpec {
  CallClass call_class = CallClass::Flat;
  double onset_s = 0.0;
  double duration_ms = 30.0;
  double base_freq_hz = 70000.0;
  double modulation_depth_hz = 0.0;
  double amplitude = 0.3;
  double step_offset_hz = 0.0;
  double step_fraction = 0.5;
  double second_freq_hz = 0.0;
  double second_amplitude_ratio = 1.0;

  double frequency_at(double t) const {
    switch (call_class) {
      case CallClass::Modulated: return base_freq_hz + modulation_depth_hz * (1.0 - std::abs(2.0 * t - 1.0));
      case CallClass::FrequencyStep: return t < step_fraction ? base_freq_hz : base_freq_hz + step_offset_hz;
      case CallClass::Composite: return base_freq_hz;
      default: return base_freq_hz + modulation_depth_hz * t;
    }
  }

  /// Lowest and highest instantaneous frequency over all components.
  std::pair<double, double> frequency_range() const {
    double lo = std::min(frequency_at(0.0), frequency_at(1.0)), hi = std::max(frequency_at(0.0), frequency_at(1.0));
    if (call_class == CallClass::Modulated) {
      lo = std::min(lo, frequency_at(0.5));
      hi = std::max(hi, frequency_at(0.5));
    }
    if (call_class == CallClass::Composite) {
      lo = std::min(lo, second_freq_hz);
      hi = std::max(hi, second_freq_hz);
    }
    return {lo, hi};
  }

  void validate(int sample_rate_hz) const {
    auto fail = [&](const std::string& why) {
      throw std::invalid_argument("synth " + std::string(class_name(call_class)) + " call: " + why);
    };
    if (!(base_freq_hz >= 40000.0 && base_freq_hz <= 110000.0)) fail("base frequency outside [40 kHz, 110 kHz]");
    if (!(amplitude > 0.0 && amplitude <= 1.0)) fail("amplitude outside (0, 1]");
    if (!(onset_s >= 0.0)) fail("negative onset");
    if (!(duration_ms >= 2.0 * kRampMs)) fail("duration shorter than the on/off ramps");
    if ((call_class == CallClass::Short) != (duration_ms < kShortLimitMs))
      fail("duration " + std::to_string(duration_ms) + " ms contradicts the 5 ms short-call limit");
    const double span = std::abs(modulation_depth_hz);
    switch (call_class) {
      case CallClass::Flat:
        if (span >= kModulationLimitHz) fail("modulation must stay below 6 kHz");
        break;
      case CallClass::Modulated:
        if (span <= kModulationLimitHz) fail("modulation must exceed 6 kHz");
        break;
      case CallClass::FrequencyStep:
        if (std::abs(step_offset_hz) < kMinStepHz) fail("step must be at least 10 kHz");
        if (!(step_fraction > 0.0 && step_fraction < 1.0)) fail("step position outside the call");
        break;
      case CallClass::Composite: {
        if (!(second_freq_hz > 0.0)) fail("missing second component");
        const double r = std::max(second_freq_hz, base_freq_hz) / std::min(second_freq_hz, base_freq_hz);
        if (std::abs(r - std::round(r)) < 0.05) fail("component frequencies are (near) harmonic");
        if (!(second_amplitude_ratio > 0.0 && second_amplitude_ratio <= 1.0)) fail("second amplitude ratio outside (0, 1]");
        break;
      }
      case CallClass::Short: break;
    }
    const auto [lo, hi] = frequency_range();
    if (!(lo > 0.0 && hi < sample_rate_hz / 2.0)) fail("trajectory leaves (0, Nyquist)");
  }
};

/// Phase-continuous synthesis with raised-cosine ramps.
inline std::vector<double> generate_call(const SynthCallSpec& spec, int sample_rate_hz) {
  spec.validate(sample_rate_hz);
  const auto n = static_cast<std::size_t>(std::lround(spec.duration_ms * 1e-3 * sample_rate_hz));
  const double ramp = kRampMs * 1e-3 * sample_rate_hz;
  const double two_pi = 2.0 * std::numbers::pi;
  std::vector<double> out(n);
  double phase = 0.0, phase2 = 0.0;
  const bool composite = spec.call_class == CallClass::Composite;
  const double a1 = composite ? spec.amplitude / (1.0 + spec.second_amplitude_ratio) : spec.amplitude;
  const double a2 = a1 * spec.second_amplitude_ratio;
  for (std::size_t i = 0; i < n; ++i) {
    const double k = static_cast<double>(i);
    const double edge = std::min(k + 0.5, static_cast<double>(n) - k - 0.5);
    const double env = edge >= ramp ? 1.0 : 0.5 * (1.0 - std::cos(std::numbers::pi * edge / ramp));
    double v = a1 * std::sin(phase);
    if (composite) v += a2 * std::sin(phase2);
    out[i] = env * v;
    phase = std::fmod(phase + two_pi * spec.frequency_at(k / static_cast<double>(n)) / sample_rate_hz, two_pi);
    phase2 = std::fmod(phase2 + two_pi * spec.second_freq_hz / sample_rate_hz, two_pi);
  }
  return out;
}

enum class SynthPreset { Easy, Hard };

NLOHMANN_JSON_SERIALIZE_ENUM(SynthPreset, {{SynthPreset::Easy, "easy"}, {SynthPreset::Hard, "hard"}})

struct SynthCorpusConfig {
  int calls_per_recording = 20;
  std::array<double, kNumClasses> class_weights{0.2, 0.2, 0.2, 0.2, 0.2};
  double min_gap_ms = 60.0;
  double max_gap_ms = 150.0;
  double recording_duration_s = 5.0;
  double call_amplitude = 0.3;      // reference peak; per-call amplitude is drawn in [0.5, 1] x this
  double noise_floor_db = -40.0;    // white noise rms relative to the reference peak
  double lf_noise_db = -20.0;       // low-frequency band noise rms relative to the reference peak
  double lf_cutoff_hz = 30000.0;
  int sample_rate_hz = kCanonicalSampleRate;
  SynthPreset preset = SynthPreset::Easy;
  std::uint64_t seed = 1;
  std::string id_prefix = "synth";

  void validate() const {
    double sum = 0.0;
    for (double w : class_weights) {
      if (!(w >= 0.0)) throw std::invalid_argument("SynthCorpusConfig: negative class weight");
      sum += w;
    }
    if (std::abs(sum - 1.0) > 1e-9) throw std::invalid_argument("SynthCorpusConfig: class weights must sum to 1");
    if (calls_per_recording < 0) throw std::invalid_argument("SynthCorpusConfig: negative call count");
    if (!(min_gap_ms > 0.0 && max_gap_ms >= min_gap_ms)) throw std::invalid_argument("SynthCorpusConfig: bad gap range");
    if (!(recording_duration_s > 0.0) || sample_rate_hz < 230000)
      throw std::invalid_argument("SynthCorpusConfig: duration must be positive and the rate at least 230 kHz");
    if (!(call_amplitude > 0.0 && call_amplitude <= 0.5))
      throw std::invalid_argument("SynthCorpusConfig: call amplitude outside (0, 0.5]");
    if (!(lf_cutoff_hz > 0.0 && lf_cutoff_hz < sample_rate_hz / 2.0))
      throw std::invalid_argument("SynthCorpusConfig: low-frequency cutoff outside (0, Nyquist)");
  }
};

inline void to_json(nlohmann::json& j, const SynthCorpusConfig& c) {
  j = {{"calls_per_recording", c.calls_per_recording},
       {"class_weights", c.class_weights},
       {"min_gap_ms", c.min_gap_ms},
       {"max_gap_ms", c.max_gap_ms},
       {"recording_duration_s", c.recording_duration_s},
       {"call_amplitude", c.call_amplitude},
       {"noise_floor_db", c.noise_floor_db},
       {"lf_noise_db", c.lf_noise_db},
       {"lf_cutoff_hz", c.lf_cutoff_hz},
       {"sample_rate_hz", c.sample_rate_hz},
       {"preset", c.preset},
       {"seed", c.seed},
       {"id_prefix", c.id_prefix}};
}

inline void from_json(const nlohmann::json& j, SynthCorpusConfig& c) {
  const SynthCorpusConfig d;
  c.calls_per_recording = j.value("calls_per_recording", d.calls_per_recording);
  c.class_weights = j.value("class_weights", d.class_weights);
  c.min_gap_ms = j.value("min_gap_ms", d.min_gap_ms);
  c.max_gap_ms = j.value("max_gap_ms", d.max_gap_ms);
  c.recording_duration_s = j.value("recording_duration_s", d.recording_duration_s);
  c.call_amplitude = j.value("call_amplitude", d.call_amplitude);
  c.noise_floor_db = j.value("noise_floor_db", d.noise_floor_db);
  c.lf_noise_db = j.value("lf_noise_db", d.lf_noise_db);
  c.lf_cutoff_hz = j.value("lf_cutoff_hz", d.lf_cutoff_hz);
  c.sample_rate_hz = j.value("sample_rate_hz", d.sample_rate_hz);
  c.preset = j.value("preset", d.preset);
  c.seed = j.value("seed", d.seed);
  c.id_prefix = j.value("id_prefix", d.id_prefix);
  c.validate();
}

inline CallClass sample_class(const std::array<double, kNumClasses>& weights, Rng& rng) {
  const double u = rng.uniform();
  double acc = 0.0;
  for (std::size_t k = 0; k < kNumClasses; ++k) {
    acc += weights[k];
    if (u < acc) return class_from_index(static_cast<int>(k));
  }
  for (std::size_t k = kNumClasses; k-- > 0;)
    if (weights[k] > 0.0) return class_from_index(static_cast<int>(k));
  return CallClass::Short;
}

/// Random call of a given class. The easy preset keeps class parameters far
/// apart; the hard preset lets them approach the class boundaries.
inline SynthCallSpec sample_call_spec(CallClass cls, double onset_s, double amplitude, SynthPreset preset, Rng& rng) {
  const bool easy = preset == SynthPreset::Easy;
  constexpr double lo_hz = 45000.0, hi_hz = 105000.0;
  SynthCallSpec s;
  s.call_class = cls;
  s.onset_s = onset_s;
  s.amplitude = amplitude;
  s.duration_ms = easy ? rng.uniform(20.0, 80.0) : rng.uniform(5.0, 80.0);
  auto place = [&](double span) { return rng.uniform(lo_hz, hi_hz - span); };  // lowest frequency of the call
  const double sign = rng.uniform() < 0.5 ? -1.0 : 1.0;
  switch (cls) {
    case CallClass::Flat:
    case CallClass::Short: {
      if (cls == CallClass::Short) s.duration_ms = easy ? rng.uniform(3.0, 4.5) : rng.uniform(2.5, 4.9);
      const double span = easy ? rng.uniform(0.0, 3000.0) : rng.uniform(0.0, 5900.0);
      const double low = place(span);
      s.modulation_depth_hz = sign * span;
      s.base_freq_hz = sign > 0 ? low : low + span;
      break;
    }
    case CallClass::Modulated: {
      const double span = easy ? rng.uniform(12000.0, 25000.0) : rng.uniform(6100.0, 25000.0);
      const double low = place(span);
      s.modulation_depth_hz = sign * span;
      s.base_freq_hz = sign > 0 ? low : low + span;
      break;
    }
    case CallClass::FrequencyStep: {
      const double step = easy ? rng.uniform(12000.0, 20000.0) : rng.uniform(10000.0, 20000.0);
      const double low = place(step);
      s.step_offset_hz = sign * step;
      s.base_freq_hz = sign > 0 ? low : low + step;
      s.step_fraction = rng.uniform(0.35, 0.65);
      break;
    }
    case CallClass::Composite: {
      const double min_sep = easy ? 15000.0 : 10000.0;
      do {
        s.base_freq_hz = rng.uniform(lo_hz, hi_hz);
        s.second_freq_hz = rng.uniform(lo_hz, hi_hz);
      } while (std::abs(s.base_freq_hz - s.second_freq_hz) < min_sep ||
               [&] {
                 const double r = std::max(s.base_freq_hz, s.second_freq_hz) / std::min(s.base_freq_hz, s.second_freq_hz);
                 return std::abs(r - std::round(r)) < 0.05;
               }());
      s.second_amplitude_ratio = easy ? rng.uniform(0.6, 1.0) : rng.uniform(0.3, 1.0);
      break;
    }
  }
  return s;
}

/// In-place 8th-order Butterworth low-pass as four bilinear biquads
/// (transposed direct form II), run interleaved per sample.
inline void butterworth_lowpass8(std::vector<double>& x, double cutoff_hz, int sample_rate_hz) {
  const double k = std::tan(std::numbers::pi * cutoff_hz / sample_rate_hz);
  std::array<double, 4> b0, a1, a2, z1{}, z2{};
  for (int sec = 0; sec < 4; ++sec) {
    const double q = 1.0 / (2.0 * std::sin((2.0 * sec + 1.0) * std::numbers::pi / 16.0));
    const double norm = 1.0 / (1.0 + k / q + k * k);
    b0[sec] = k * k * norm;
    a1[sec] = 2.0 * (k * k - 1.0) * norm;
    a2[sec] = (1.0 - k / q + k * k) * norm;
  }
  for (double& v : x) {
    double u = v;
    for (int sec = 0; sec < 4; ++sec) {
      const double y = b0[sec] * u + z1[sec];
      z1[sec] = 2.0 * b0[sec] * u - a1[sec] * y + z2[sec];
      z2[sec] = b0[sec] * u - a2[sec] * y;
      u = y;
    }
    v = u;
  }
}

struct TruthCall {
  CallEvent event;
  CallClass label = CallClass::Flat;
  friend bool operator==(const TruthCall&, const TruthCall&) = default;
};

struct SynthRecording {
  Recording recording;
  std::vector<TruthCall> truth;
  std::vector<SynthCallSpec> specs;
};

inline std::string synth_recording_id(const SynthCorpusConfig& c, std::size_t index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "_%04zu", index);
  return c.id_prefix + buf;
}

/// Recording `index` of the corpus described by `config`; each index draws
/// from its own stream, so recordings can be generated in any order.
inline SynthRecording generate_recording(const SynthCorpusConfig& config, std::size_t index = 0) {
  config.validate();
  const Rng root = Rng(config.seed, 0x5E7).split(index);
  Rng sched = root.split(1), white = root.split(2), lf = root.split(3);
  const int rate = config.sample_rate_hz;
  const auto total = static_cast<std::size_t>(std::lround(config.recording_duration_s * rate));
  std::vector<double> x(total, 0.0);

  std::vector<TruthCall> truth;
  std::vector<SynthCallSpec> specs;
  double t = 0.0;
  for (int i = 0; i < config.calls_per_recording; ++i) {
    t += sched.uniform(config.min_gap_ms, config.max_gap_ms) * 1e-3;
    const CallClass cls = sample_class(config.class_weights, sched);
    const double amp = config.call_amplitude * sched.uniform(0.5, 1.0);
    const auto start = static_cast<std::size_t>(std::lround(t * rate));
    SynthCallSpec spec = sample_call_spec(cls, static_cast<double>(start) / rate, amp, config.preset, sched);
    const auto wave = generate_call(spec, rate);
    if (start + wave.size() > total)
      throw std::invalid_argument("generate_recording: " + std::to_string(config.calls_per_recording) +
                                  " calls do not fit into " + std::to_string(config.recording_duration_s) + " s");
    for (std::size_t k = 0; k < wave.size(); ++k) x[start + k] += wave[k];
    const double end = static_cast<double>(start + wave.size()) / rate;
    truth.push_back({{spec.onset_s, end}, cls});
    specs.push_back(spec);
    t = end;
  }

  const double white_sd = config.call_amplitude * std::pow(10.0, config.noise_floor_db / 20.0);
  std::vector<double> band(total);
  white.fill_normal(band, 0.0, white_sd);
  for (std::size_t k = 0; k < total; ++k) x[k] += band[k];
  lf.fill_normal(band);
  butterworth_lowpass8(band, config.lf_cutoff_hz, rate);
  double ss = 0.0;
  for (double v : band) ss += v * v;
  const double rms = std::sqrt(ss / static_cast<double>(total));
  const double lf_scale = rms > 0.0 ? config.call_amplitude * std::pow(10.0, config.lf_noise_db / 20.0) / rms : 0.0;
  for (std::size_t k = 0; k < total; ++k) x[k] += lf_scale * band[k];

  return {Recording(synth_recording_id(config, index), std::move(x), rate), std::move(truth), std::move(specs)};
}

inline void write_truth_csv(std::ostream& out, const std::vector<std::pair<std::string, TruthCall>>& rows) {
  csv::write_row(out, {"recording_id", "start_s", "end_s", "class"});
  char a[32], b[32];
  for (const auto& [id, call] : rows) {
    std::snprintf(a, sizeof a, "%.6f", call.event.start_s);
    std::snprintf(b, sizeof b, "%.6f", call.event.end_s);
    csv::write_row(out, {id, a, b, std::string(class_name(call.label))});
  }
}

/// Ground truth keyed by recording id, in file order.
inline std::vector<std::pair<std::string, TruthCall>> read_truth_csv(std::istream& in) {
  const auto rows = csv::read_all(in);
  if (rows.empty() || rows[0] != std::vector<std::string>{"recording_id", "start_s", "end_s", "class"})
    throw std::runtime_error("truth csv: missing or unexpected header");
  std::vector<std::pair<std::string, TruthCall>> out;
  for (std::size_t i = 1; i < rows.size(); ++i) {
    const auto& r = rows[i];
    if (r.size() != 4) throw std::runtime_error("truth csv: row " + std::to_string(i) + " needs 4 fields");
    const auto cls = parse_class(r[3]);
    if (!cls) throw std::runtime_error("truth csv: unknown class '" + r[3] + "' in row " + std::to_string(i));
    out.push_back({r[0], {{std::stod(r[1]), std::stod(r[2])}, *cls}});
  }
  return out;
}

/// Writes <dir>/<id>.wav for every recording plus truth.csv and config.json.
inline void write_corpus(const std::filesystem::path& dir, const SynthCorpusConfig& config, std::size_t recordings) {
  std::filesystem::create_directories(dir);
  std::vector<std::pair<std::string, TruthCall>> rows;
  for (std::size_t i = 0; i < recordings; ++i) {
    const auto r = generate_recording(config, i);
    write_wav(r.recording, dir / (r.recording.id() + ".wav"));
    for (const auto& t : r.truth) rows.push_back({r.recording.id(), t});
  }
  std::ofstream truth(dir / "truth.csv", std::ios::binary);
  write_truth_csv(truth, rows);
  std::ofstream cfg(dir / "config.json");
  cfg << nlohmann::json(config).dump(2) << "\n";
  if (!truth || !cfg) throw std::runtime_error("write_corpus: failed writing into " + dir.string());
}

}  // namespace usv
