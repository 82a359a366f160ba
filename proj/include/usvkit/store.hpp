#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <mutex>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "usvkit/pipeline.hpp"

namespace usv {

class StoreError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class UnknownCall : public StoreError {
 public:
  using StoreError::StoreError;
};

class VersionConflict : public StoreError {
 public:
  VersionConflict(std::uint64_t expected, std::uint64_t current)
      : StoreError("label version conflict: expected " + std::to_string(expected) + ", current " +
                   std::to_string(current)),
        current_version(current) {}
  std::uint64_t current_version;
};

struct LabelEntry {
  ManuallyLabeled label;
  std::uint64_t version = 0;
  friend bool operator==(const LabelEntry&, const LabelEntry&) = default;
};

/// A record as served: the pipeline output with any manual label applied,
/// plus the label version the client must quote to avoid a conflict.
struct StoredCall {
  CallRecord record;
  std::uint64_t version = 0;
};

/// Call records, manual labels and the service config in one append-only
/// JSON-lines file. Each mutation is one line; replaying the file rebuilds
/// the state. Compaction rewrites the file as a snapshot via rename, so a
/// crash leaves either the old or the new file.
///
/// Labels are keyed by call id and live apart from the records, so a new
/// detection run for a recording keeps the labels of matching call ids.
class CallStore {
 public:
  explicit CallStore(std::filesystem::path path) : path_(std::move(path)) {
    if (std::filesystem::exists(path_)) replay();
    if (!out_.is_open()) out_.open(path_, std::ios::binary | std::ios::app);
    if (!out_) throw StoreError("cannot open journal " + path_.string());
  }

  CallStore(const CallStore&) = delete;
  CallStore& operator=(const CallStore&) = delete;

  const std::filesystem::path& path() const { return path_; }

  /// Replace every record of one recording.
  void put_recording(const std::string& recording_id, const std::vector<CallRecord>& records) {
    std::lock_guard lock(mu_);
    nlohmann::json line = {{"op", "records"}, {"recording_id", recording_id}, {"records", records}};
    for (const auto& r : records)
      if (r.recording_id != recording_id) throw std::invalid_argument("put_recording: record of another recording");
    apply(line);
    append(line);
  }

  /// Manual label with last-write-wins semantics. When `expected_version` is
  /// given it must match the current version.
  StoredCall label(const std::string& call_id, CallClass cls, const std::string& annotator,
                   std::optional<std::uint64_t> expected_version = std::nullopt,
                   const std::string& timestamp = utc_timestamp()) {
    std::lock_guard lock(mu_);
    if (!find_record(call_id)) throw UnknownCall("unknown call '" + call_id + "'");
    const std::uint64_t current = version_locked(call_id);
    if (expected_version && *expected_version != current) throw VersionConflict(*expected_version, current);
    const nlohmann::json line = {{"op", "label"},  {"call_id", call_id},     {"class", cls},
                                 {"annotator", annotator}, {"timestamp", timestamp}, {"version", current + 1}};
    apply(line);
    append(line);
    return view_locked(*find_record(call_id));
  }

  void set_config(const nlohmann::json& config) {
    std::lock_guard lock(mu_);
    const nlohmann::json line = {{"op", "config"}, {"config", config}};
    apply(line);
    append(line);
  }

  std::optional<nlohmann::json> config() const {
    std::lock_guard lock(mu_);
    return config_;
  }

  std::optional<StoredCall> get(const std::string& call_id) const {
    std::lock_guard lock(mu_);
    const auto* r = find_record(call_id);
    if (!r) return std::nullopt;
    return view_locked(*r);
  }

  /// Every record in recording-id and call-index order.
  std::vector<StoredCall> all() const {
    std::lock_guard lock(mu_);
    std::vector<StoredCall> out;
    for (const auto& [_, recs] : records_)
      for (const auto& r : recs) out.push_back(view_locked(r));
    return out;
  }

  bool has_recording(const std::string& recording_id) const {
    std::lock_guard lock(mu_);
    return records_.count(recording_id) > 0;
  }

  std::map<std::string, LabelEntry> labels() const {
    std::lock_guard lock(mu_);
    return labels_;
  }

  std::size_t journal_lines() const {
    std::lock_guard lock(mu_);
    return lines_;
  }

  /// Full state as JSON with a fixed key order; two stores with equal
  /// snapshots are indistinguishable.
  nlohmann::json snapshot() const {
    std::lock_guard lock(mu_);
    return snapshot_locked();
  }

  void compact() {
    std::lock_guard lock(mu_);
    compact_locked();
  }

 private:
  static constexpr std::size_t kMinLinesBeforeCompaction = 64;

  const CallRecord* find_record(const std::string& call_id) const {
    std::pair<std::string, int> key;
    try {
      key = parse_call_id(call_id);
    } catch (const std::invalid_argument&) {
      return nullptr;
    }
    const auto it = records_.find(key.first);
    if (it == records_.end()) return nullptr;
    for (const auto& r : it->second)
      if (r.call_index == key.second) return &r;
    return nullptr;
  }

  std::uint64_t version_locked(const std::string& call_id) const {
    const auto it = labels_.find(call_id);
    return it == labels_.end() ? 0 : it->second.version;
  }

  StoredCall view_locked(const CallRecord& r) const {
    StoredCall s{r, 0};
    const auto it = labels_.find(r.call_id());
    if (it != labels_.end()) {
      s.record.triage_status = it->second.label;
      s.version = it->second.version;
    }
    return s;
  }

  void apply(const nlohmann::json& line) {
    const auto op = line.at("op").get<std::string>();
    if (op == "records") {
      records_[line.at("recording_id").get<std::string>()] = line.at("records").get<std::vector<CallRecord>>();
    } else if (op == "label") {
      nlohmann::json status = {{"kind", "ManuallyLabeled"},
                               {"class", line.at("class")},
                               {"annotator", line.at("annotator")},
                               {"timestamp", line.at("timestamp")}};
      labels_[line.at("call_id").get<std::string>()] = {std::get<ManuallyLabeled>(status.get<TriageStatus>()),
                                                        line.at("version").get<std::uint64_t>()};
    } else if (op == "config") {
      config_ = line.at("config");
    } else {
      throw StoreError("journal: unknown op '" + op + "'");
    }
  }

  void append(const nlohmann::json& line) {
    out_ << line.dump() << '\n';
    out_.flush();
    if (!out_) throw StoreError("journal write failed: " + path_.string());
    ++lines_;
    if (lines_ > kMinLinesBeforeCompaction && lines_ > 4 * live_entries()) compact_locked();
  }

  std::size_t live_entries() const { return records_.size() + labels_.size() + (config_ ? 1 : 0); }

  void replay() {
    std::ifstream in(path_, std::ios::binary);
    if (!in) throw StoreError("cannot read journal " + path_.string());
    std::string text;
    std::size_t number = 0;
    bool torn_tail = false;
    while (std::getline(in, text)) {
      ++number;
      if (text.empty()) continue;
      if (torn_tail) throw StoreError("journal " + path_.string() + ": corrupt line " + std::to_string(number - 1));
      nlohmann::json line;
      try {
        line = nlohmann::json::parse(text);
      } catch (const nlohmann::json::parse_error&) {
        // Only the final line may be torn by a crash mid-append.
        torn_tail = true;
        continue;
      }
      try {
        apply(line);
      } catch (const std::exception& e) {
        throw StoreError("journal " + path_.string() + " line " + std::to_string(number) + ": " + e.what());
      }
      ++lines_;
    }
    if (torn_tail) compact_locked();
  }

  nlohmann::json snapshot_locked() const {
    nlohmann::json j = {{"config", config_ ? *config_ : nlohmann::json(nullptr)},
                        {"records", nlohmann::json::object()},
                        {"labels", nlohmann::json::object()}};
    for (const auto& [id, recs] : records_) j["records"][id] = recs;
    for (const auto& [id, l] : labels_)
      j["labels"][id] = {{"class", l.label.label},
                         {"annotator", l.label.annotator},
                         {"timestamp", l.label.timestamp},
                         {"version", l.version}};
    return j;
  }

  void compact_locked() {
    std::vector<nlohmann::json> lines;
    if (config_) lines.push_back({{"op", "config"}, {"config", *config_}});
    for (const auto& [id, recs] : records_) lines.push_back({{"op", "records"}, {"recording_id", id}, {"records", recs}});
    for (const auto& [id, l] : labels_)
      lines.push_back({{"op", "label"},
                       {"call_id", id},
                       {"class", l.label.label},
                       {"annotator", l.label.annotator},
                       {"timestamp", l.label.timestamp},
                       {"version", l.version}});
    const auto tmp = std::filesystem::path(path_.string() + ".tmp");
    {
      std::ofstream t(tmp, std::ios::binary | std::ios::trunc);
      for (const auto& l : lines) t << l.dump() << '\n';
      t.flush();
      if (!t) throw StoreError("journal compaction failed writing " + tmp.string());
    }
    if (out_.is_open()) out_.close();
    std::filesystem::rename(tmp, path_);
    out_.open(path_, std::ios::binary | std::ios::app);
    if (!out_) throw StoreError("cannot reopen journal " + path_.string());
    lines_ = lines.size();
  }

  std::filesystem::path path_;
  mutable std::mutex mu_;
  std::ofstream out_;
  std::size_t lines_ = 0;
  std::map<std::string, std::vector<CallRecord>> records_;
  std::map<std::string, LabelEntry> labels_;
  std::optional<nlohmann::json> config_;
};

}  // namespace usv
