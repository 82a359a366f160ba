#pragma once

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

#include "json.hpp"
#include "usvkit/audio_io.hpp"
#include "usvkit/call_class.hpp"
#include "usvkit/csv.hpp"
#include "usvkit/detection.hpp"
#include "usvkit/models.hpp"
#include "usvkit/nn/serialize.hpp"
#include "usvkit/nn/train.hpp"
#include "usvkit/preprocess.hpp"
#include "usvkit/synth.hpp"

namespace usv {

NLOHMANN_JSON_SERIALIZE_ENUM(CallClass, {{CallClass::Flat, "Flat"},
                                         {CallClass::Modulated, "Modulated"},
                                         {CallClass::FrequencyStep, "FrequencyStep"},
                                         {CallClass::Composite, "Composite"},
                                         {CallClass::Short, "Short"}})

struct AutoAccepted {
  friend bool operator==(const AutoAccepted&, const AutoAccepted&) = default;
};
struct Flagged {
  friend bool operator==(const Flagged&, const Flagged&) = default;
};
struct ManuallyLabeled {
  CallClass label = CallClass::Flat;
  std::string annotator;
  std::string timestamp;  // ISO 8601, UTC
  friend bool operator==(const ManuallyLabeled&, const ManuallyLabeled&) = default;
};

using TriageStatus = std::variant<AutoAccepted, Flagged, ManuallyLabeled>;

inline std::string status_name(const TriageStatus& s) {
  switch (s.index()) {
    case 0: return "AutoAccepted";
    case 1: return "Flagged";
    default: return "ManuallyLabeled";
  }
}

inline std::string utc_timestamp(std::chrono::system_clock::time_point t = std::chrono::system_clock::now()) {
  const std::time_t tt = std::chrono::system_clock::to_time_t(t);
  std::tm tm{};
  gmtime_r(&tt, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

struct CallRecord {
  std::string recording_id;
  int call_index = 0;
  double start_s = 0.0;
  double end_s = 0.0;
  double duration_ms = 0.0;
  std::optional<CallClass> predicted_class;  // empty when no classifier ran
  std::array<double, kNumClasses> pseudo_probabilities{};
  double confidence = 0.0;
  TriageStatus triage_status = Flagged{};

  /// Stable key used by the label store and the HTTP API.
  std::string call_id() const { return recording_id + ":" + std::to_string(call_index); }

  /// The manual label if there is one, otherwise the prediction.
  std::optional<CallClass> effective_class() const {
    if (const auto* m = std::get_if<ManuallyLabeled>(&triage_status)) return m->label;
    return predicted_class;
  }

  friend bool operator==(const CallRecord&, const CallRecord&) = default;
};

/// Splits "<recording>:<index>" at the last colon.
inline std::pair<std::string, int> parse_call_id(const std::string& id) {
  const auto colon = id.rfind(':');
  if (colon == std::string::npos || colon == 0 || colon + 1 == id.size())
    throw std::invalid_argument("malformed call id '" + id + "'");
  const std::string idx = id.substr(colon + 1);
  if (!std::all_of(idx.begin(), idx.end(), [](char c) { return c >= '0' && c <= '9'; }) || idx.size() > 9)
    throw std::invalid_argument("malformed call index in '" + id + "'");
  return {id.substr(0, colon), std::stoi(idx)};
}

inline void to_json(nlohmann::json& j, const TriageStatus& s) {
  j = {{"kind", status_name(s)}};
  if (const auto* m = std::get_if<ManuallyLabeled>(&s)) {
    j["class"] = m->label;
    j["annotator"] = m->annotator;
    j["timestamp"] = m->timestamp;
  }
}

inline void from_json(const nlohmann::json& j, TriageStatus& s) {
  const auto kind = j.at("kind").get<std::string>();
  if (kind == "AutoAccepted") {
    s = AutoAccepted{};
  } else if (kind == "Flagged") {
    s = Flagged{};
  } else if (kind == "ManuallyLabeled") {
    const auto cls = parse_class(j.at("class").get<std::string>());
    if (!cls) throw std::invalid_argument("unknown class '" + j.at("class").get<std::string>() + "'");
    s = ManuallyLabeled{*cls, j.at("annotator").get<std::string>(), j.at("timestamp").get<std::string>()};
  } else {
    throw std::invalid_argument("unknown triage status '" + kind + "'");
  }
}

inline void to_json(nlohmann::json& j, const CallRecord& r) {
  j = {{"call_id", r.call_id()},
       {"recording_id", r.recording_id},
       {"call_index", r.call_index},
       {"start_s", r.start_s},
       {"end_s", r.end_s},
       {"duration_ms", r.duration_ms},
       {"class", r.predicted_class ? nlohmann::json(*r.predicted_class) : nlohmann::json(nullptr)},
       {"pseudo_probabilities", r.pseudo_probabilities},
       {"confidence", r.confidence},
       {"triage_status", r.triage_status}};
}

inline void from_json(const nlohmann::json& j, CallRecord& r) {
  r.recording_id = j.at("recording_id").get<std::string>();
  r.call_index = j.at("call_index").get<int>();
  r.start_s = j.at("start_s").get<double>();
  r.end_s = j.at("end_s").get<double>();
  r.duration_ms = j.at("duration_ms").get<double>();
  const auto& c = j.at("class");
  if (c.is_null()) {
    r.predicted_class.reset();
  } else {
    const auto cls = parse_class(c.get<std::string>());
    if (!cls) throw std::invalid_argument("unknown class '" + c.get<std::string>() + "'");
    r.predicted_class = *cls;
  }
  r.pseudo_probabilities = j.at("pseudo_probabilities").get<std::array<double, kNumClasses>>();
  r.confidence = j.at("confidence").get<double>();
  r.triage_status = j.at("triage_status").get<TriageStatus>();
}

enum class TriageMode { FullyAutomated, SemiAutomated };

NLOHMANN_JSON_SERIALIZE_ENUM(TriageMode, {{TriageMode::FullyAutomated, "fully_automated"},
                                          {TriageMode::SemiAutomated, "semi_automated"}})

struct PipelineConfig {
  DetectionParams detection;
  std::string model_path;  // informational; run_pipeline takes the loaded classifier
  double threshold = 0.7;
  TriageMode mode = TriageMode::SemiAutomated;

  void validate() const {
    detection.validate();
    if (!(threshold >= 0.0 && threshold <= 1.0)) throw std::invalid_argument("PipelineConfig: threshold outside [0, 1]");
  }
};

inline void to_json(nlohmann::json& j, const PipelineConfig& c) {
  j = {{"detection", c.detection}, {"model_path", c.model_path}, {"threshold", c.threshold}, {"mode", c.mode}};
}

inline void from_json(const nlohmann::json& j, PipelineConfig& c) {
  if (!j.is_object()) throw std::invalid_argument("PipelineConfig: expected a JSON object");
  for (const auto& [key, _] : j.items())
    if (key != "detection" && key != "model_path" && key != "threshold" && key != "mode")
      throw std::invalid_argument("PipelineConfig: unknown key '" + key + "'");
  const PipelineConfig d;
  c.detection = j.contains("detection") ? j.at("detection").get<DetectionParams>() : d.detection;
  c.model_path = j.value("model_path", d.model_path);
  c.threshold = j.value("threshold", d.threshold);
  c.mode = j.value("mode", d.mode);
  if (j.contains("mode") && !(j.at("mode") == "fully_automated" || j.at("mode") == "semi_automated"))
    throw std::invalid_argument("PipelineConfig: mode must be fully_automated or semi_automated");
  c.validate();
}

enum class ArchKind { Fnn, Cnn };

NLOHMANN_JSON_SERIALIZE_ENUM(ArchKind, {{ArchKind::Fnn, "fnn"}, {ArchKind::Cnn, "cnn"}})

/// A trained network plus what it needs to turn snippets into inputs: the
/// architecture family and, for the CNN, the training-set statistics.
class Classifier {
 public:
  Classifier(ArchKind arch, nn::Model model, DatasetStats stats = {}, nlohmann::json extra_meta = {})
      : arch_(arch), model_(std::move(model)), stats_(stats), meta_(std::move(extra_meta)) {
    if (arch_ == ArchKind::Cnn) stats_.validate();
    model_.set_mode(Mode::Eval);
  }

  static Classifier load(const std::filesystem::path& path) {
    auto bundle = nn::load_model(path);
    const auto& m = bundle.meta;
    if (!m.contains("arch")) throw std::runtime_error(path.string() + ": model file has no classifier metadata");
    if (m.at("arch") != "fnn" && m.at("arch") != "cnn") throw std::runtime_error(path.string() + ": unknown arch");
    const auto arch = m.at("arch").get<ArchKind>();
    DatasetStats stats;
    if (arch == ArchKind::Cnn) stats = m.at("stats").get<DatasetStats>();
    return Classifier(arch, std::move(bundle.model), stats, m);
  }

  void save(const std::filesystem::path& path) const {
    nlohmann::json meta = meta_.is_object() ? meta_ : nlohmann::json::object();
    meta["arch"] = arch_;
    if (arch_ == ArchKind::Cnn) meta["stats"] = stats_;
    nn::save_model(path, model_, meta);
  }

  ArchKind arch() const { return arch_; }
  const nn::Model& model() const { return model_; }
  nn::Model& model() { return model_; }
  const DatasetStats& stats() const { return stats_; }
  const nlohmann::json& meta() const { return meta_; }

  double snippet_pad_ms() const { return arch_ == ArchKind::Cnn ? kCnnPadMs : kFnnPadMs; }

  /// Eval-mode network input for one snippet (unbatched).
  nn::Tensor input(const CallSnippet& snippet) const {
    Rng unused(0);
    if (arch_ == ArchKind::Cnn) return cnn_preprocess(snippet, Mode::Eval, stats_, unused);
    return fnn_preprocess(snippet, Mode::Eval, unused).to_tensor();
  }

  std::vector<nn::ClassPrediction> classify(const std::vector<CallSnippet>& snippets, std::size_t chunk = 32) const {
    std::vector<nn::ClassPrediction> out;
    for (std::size_t b0 = 0; b0 < snippets.size(); b0 += chunk) {
      std::vector<nn::Tensor> xs;
      for (std::size_t i = b0; i < std::min(snippets.size(), b0 + chunk); ++i) xs.push_back(input(snippets[i]));
      const auto p = nn::predict(model_, nn::stack(xs));
      out.insert(out.end(), p.begin(), p.end());
    }
    return out;
  }

 private:
  ArchKind arch_;
  nn::Model model_;
  DatasetStats stats_;
  nlohmann::json meta_;
};

/// Like extract_snippet, but a call near either edge of the recording gets
/// zeros instead of a shortened pad, so every snippet carries the full
/// context the classifier inputs assume.
inline CallSnippet padded_snippet(const Recording& rec, const CallEvent& event, double pad_ms) {
  CallSnippet s = extract_snippet(rec, event, pad_ms);
  const double rate = rec.sample_rate_hz();
  const long a = std::lround((event.start_s - pad_ms / 1000.0) * rate);
  const long b = std::lround((event.end_s + pad_ms / 1000.0) * rate);
  const long n = static_cast<long>(rec.size());
  if (a < 0) s.waveform.insert(s.waveform.begin(), static_cast<std::size_t>(-a), 0.0);
  if (b > n) s.waveform.insert(s.waveform.end(), static_cast<std::size_t>(b - n), 0.0);
  return s;
}

namespace pipeline_detail {

// Record times are kept on a 1 us grid so the 6-decimal CSV text is exact.
inline double micro_round(double v) { return std::round(v * 1e6) / 1e6; }

}  // namespace pipeline_detail

inline TriageStatus triage_status_for(double confidence, const PipelineConfig& config) {
  if (config.mode == TriageMode::FullyAutomated || confidence >= config.threshold) return AutoAccepted{};
  return Flagged{};
}

/// Detect, classify and triage the calls of one recording. Without a
/// classifier every call is reported unclassified and flagged.
inline std::vector<CallRecord> process_recording(const Recording& rec, const PipelineConfig& config,
                                                 const Classifier* classifier) {
  config.validate();
  const auto events = detect_calls(rec, config.detection);
  std::vector<CallRecord> out;
  std::vector<CallSnippet> snippets;
  for (std::size_t i = 0; i < events.size(); ++i) {
    CallRecord r;
    r.recording_id = rec.id();
    r.call_index = static_cast<int>(i);
    r.start_s = pipeline_detail::micro_round(events[i].start_s);
    r.end_s = pipeline_detail::micro_round(events[i].end_s);
    r.duration_ms = pipeline_detail::micro_round(events[i].duration_ms());
    out.push_back(r);
    if (classifier) snippets.push_back(padded_snippet(rec, events[i], classifier->snippet_pad_ms()));
  }
  if (!classifier) return out;
  const auto preds = classifier->classify(snippets);
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i].predicted_class = preds[i].predicted_class;
    out[i].pseudo_probabilities = preds[i].pseudo_probabilities;
    out[i].confidence = preds[i].confidence;
    out[i].triage_status = triage_status_for(preds[i].confidence, config);
  }
  return out;
}

struct RecordingFailure {
  std::string recording_id;
  std::string message;
};

struct PipelineResult {
  std::vector<CallRecord> records;
  std::vector<RecordingFailure> failures;
};

inline PipelineResult run_pipeline(const std::vector<Recording>& recordings, const PipelineConfig& config,
                                   const Classifier* classifier) {
  config.validate();
  PipelineResult result;
  for (const auto& rec : recordings) {
    try {
      auto r = process_recording(rec, config, classifier);
      result.records.insert(result.records.end(), r.begin(), r.end());
    } catch (const std::exception& e) {
      result.failures.push_back({rec.id(), e.what()});
    }
  }
  return result;
}

// ---- CSV -------------------------------------------------------------------

inline const std::vector<std::string>& call_csv_header() {
  static const std::vector<std::string> h = {"recording_id", "call_index", "start_s",    "end_s",       "duration_ms",
                                             "class",        "p_flat",     "p_modulated", "p_freq_step", "p_composite",
                                             "p_short",      "confidence", "triage_status"};
  return h;
}

/// "AutoAccepted", "Flagged", or "ManuallyLabeled:" followed by a compact
/// JSON object with class, annotator and timestamp.
inline std::string encode_status(const TriageStatus& s) {
  if (const auto* m = std::get_if<ManuallyLabeled>(&s)) {
    const nlohmann::json j = {{"class", m->label}, {"annotator", m->annotator}, {"timestamp", m->timestamp}};
    return "ManuallyLabeled:" + j.dump();
  }
  return status_name(s);
}

inline TriageStatus decode_status(const std::string& text) {
  if (text == "AutoAccepted") return AutoAccepted{};
  if (text == "Flagged") return Flagged{};
  const std::string prefix = "ManuallyLabeled:";
  if (text.rfind(prefix, 0) == 0) {
    auto j = nlohmann::json::parse(text.substr(prefix.size()));
    j["kind"] = "ManuallyLabeled";
    return j.get<TriageStatus>();
  }
  throw std::invalid_argument("unknown triage status '" + text + "'");
}

inline void write_calls_csv(std::ostream& out, const std::vector<CallRecord>& records) {
  csv::write_row(out, call_csv_header());
  auto fixed6 = [](double v) {
    char buf[48];
    std::snprintf(buf, sizeof buf, "%.6f", v);
    return std::string(buf);
  };
  auto exact = [](double v) {
    char buf[48];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return std::string(buf);
  };
  for (const auto& r : records) {
    std::vector<std::string> row = {r.recording_id,
                                    std::to_string(r.call_index),
                                    fixed6(r.start_s),
                                    fixed6(r.end_s),
                                    fixed6(r.duration_ms),
                                    r.predicted_class ? std::string(class_name(*r.predicted_class)) : std::string()};
    for (double p : r.pseudo_probabilities) row.push_back(exact(p));
    row.push_back(exact(r.confidence));
    row.push_back(encode_status(r.triage_status));
    csv::write_row(out, row);
  }
}

inline std::vector<CallRecord> read_calls_csv(std::istream& in) {
  const auto rows = csv::read_all(in);
  if (rows.empty() || rows[0] != call_csv_header()) throw std::runtime_error("calls csv: missing or unexpected header");
  std::vector<CallRecord> out;
  for (std::size_t i = 1; i < rows.size(); ++i) {
    const auto& f = rows[i];
    auto where = [&] { return " in row " + std::to_string(i); };
    if (f.size() != call_csv_header().size()) throw std::runtime_error("calls csv: wrong field count" + where());
    try {
      CallRecord r;
      r.recording_id = f[0];
      r.call_index = std::stoi(f[1]);
      r.start_s = std::stod(f[2]);
      r.end_s = std::stod(f[3]);
      r.duration_ms = std::stod(f[4]);
      if (!f[5].empty()) {
        const auto cls = parse_class(f[5]);
        if (!cls) throw std::invalid_argument("unknown class '" + f[5] + "'");
        r.predicted_class = *cls;
      }
      for (std::size_t k = 0; k < kNumClasses; ++k) r.pseudo_probabilities[k] = std::stod(f[6 + k]);
      r.confidence = std::stod(f[11]);
      r.triage_status = decode_status(f[12]);
      out.push_back(std::move(r));
    } catch (const std::exception& e) {
      throw std::runtime_error(std::string("calls csv: ") + e.what() + where());
    }
  }
  return out;
}

inline void export_csv(const std::vector<CallRecord>& records, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  write_calls_csv(out, records);
  out.flush();
  if (!out) throw std::runtime_error("write failed for " + path.string());
}

inline std::vector<CallRecord> import_csv(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  return read_calls_csv(in);
}

// ---- corpora ---------------------------------------------------------------

/// Every .wav directly inside `dir`, ordered by file name.
inline std::vector<Recording> load_recordings(const std::filesystem::path& dir) {
  std::vector<std::filesystem::path> paths;
  for (const auto& e : std::filesystem::directory_iterator(dir))
    if (e.is_regular_file() && e.path().extension() == ".wav") paths.push_back(e.path());
  std::sort(paths.begin(), paths.end());
  std::vector<Recording> out;
  for (const auto& p : paths) out.push_back(load_wav(p));
  return out;
}

/// Ground-truth calls cut out of a labeled corpus directory (WAVs plus
/// truth.csv), with the recording each call came from.
struct LabeledCalls {
  std::vector<CallSnippet> snippets;
  std::vector<CallClass> labels;
  std::vector<std::size_t> recording;

  std::size_t size() const { return labels.size(); }
};

inline LabeledCalls labeled_calls(const std::vector<Recording>& recordings,
                                  const std::vector<std::pair<std::string, TruthCall>>& truth, double pad_ms) {
  std::map<std::string, std::size_t> by_id;
  for (std::size_t i = 0; i < recordings.size(); ++i) by_id[recordings[i].id()] = i;
  LabeledCalls out;
  for (const auto& [id, call] : truth) {
    const auto it = by_id.find(id);
    if (it == by_id.end()) throw std::runtime_error("truth refers to unknown recording '" + id + "'");
    out.snippets.push_back(padded_snippet(recordings[it->second], call.event, pad_ms));
    out.labels.push_back(call.label);
    out.recording.push_back(it->second);
  }
  return out;
}

inline LabeledCalls load_labeled_calls(const std::filesystem::path& dir, double pad_ms) {
  std::ifstream in(dir / "truth.csv", std::ios::binary);
  if (!in) throw std::runtime_error("no truth.csv in " + dir.string());
  return labeled_calls(load_recordings(dir), read_truth_csv(in), pad_ms);
}

}  // namespace usv
