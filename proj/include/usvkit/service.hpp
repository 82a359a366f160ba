#pragma once

#include <algorithm>
#include <atomic>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <shared_mutex>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include "json.hpp"
#include "usvkit/detection.hpp"
#include "usvkit/pipeline.hpp"
#include "usvkit/png.hpp"
#include "usvkit/store.hpp"

// Last: httplib pulls in <resolv.h>, whose _res macro breaks Eigen's headers.
#include "httplib.h"

namespace usv {

struct ServiceOptions {
  std::filesystem::path corpus_dir;
  std::optional<std::filesystem::path> model_path;
  std::filesystem::path journal_path;
  /// Used when the journal holds no config yet.
  PipelineConfig config;
};

/// Error carried back to the client as {code, message}.
struct ApiError : std::runtime_error {
  ApiError(int status, std::string code, const std::string& message)
      : std::runtime_error(message), status(status), code(std::move(code)) {}
  int status;
  std::string code;
  nlohmann::json extra = nlohmann::json::object();
};

namespace service_detail {

/// Runs fn(i) for i in [0, n) on up to hardware_concurrency threads.
template <class Fn>
void parallel_for(std::size_t n, Fn fn) {
  const std::size_t workers = std::min<std::size_t>(n, std::max(1u, std::thread::hardware_concurrency()));
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < workers; ++w)
    pool.emplace_back([&] {
      for (std::size_t i; (i = next++) < n;) fn(i);
    });
  for (auto& t : pool) t.join();
}

inline double query_double(const httplib::Request& req, const char* key, double fallback) {
  if (!req.has_param(key)) return fallback;
  const std::string v = req.get_param_value(key);
  try {
    std::size_t used = 0;
    const double d = std::stod(v, &used);
    if (used != v.size() || !std::isfinite(d)) throw std::invalid_argument(v);
    return d;
  } catch (const std::exception&) {
    throw ApiError(400, "invalid_query", std::string("query parameter ") + key + " is not a number: '" + v + "'");
  }
}

inline std::size_t query_count(const httplib::Request& req, const char* key, std::size_t fallback) {
  const double d = query_double(req, key, static_cast<double>(fallback));
  if (d < 0 || d != std::floor(d)) throw ApiError(400, "invalid_query", std::string(key) + " must be a non-negative integer");
  return static_cast<std::size_t>(d);
}

inline nlohmann::json parse_body(const httplib::Request& req) {
  try {
    return nlohmann::json::parse(req.body);
  } catch (const nlohmann::json::parse_error& e) {
    throw ApiError(400, "invalid_json", std::string("request body is not JSON: ") + e.what());
  }
}

inline nlohmann::json stored_json(const StoredCall& s) {
  nlohmann::json j = s.record;
  j["version"] = s.version;
  return j;
}

}  // namespace service_detail

/// State behind the HTTP API. Recordings and the classifier never change
/// after construction; the config is guarded by a reader/writer lock and the
/// store serializes its own writes.
class Service {
 public:
  explicit Service(ServiceOptions opts) : opts_(std::move(opts)), store_(opts_.journal_path) {
    for (auto& r : load_recordings(opts_.corpus_dir)) {
      index_[r.id()] = recordings_.size();
      recordings_.push_back(std::move(r));
    }
    if (opts_.model_path) classifier_.emplace(Classifier::load(*opts_.model_path));
    if (const auto saved = store_.config()) {
      config_ = saved->get<PipelineConfig>();
    } else {
      config_ = opts_.config;
      config_.validate();
      store_.set_config(config_);
    }
    std::vector<std::size_t> missing;
    for (std::size_t i = 0; i < recordings_.size(); ++i)
      if (!store_.has_recording(recordings_[i].id())) missing.push_back(i);
    reprocess(missing, config_);
  }

  const std::vector<Recording>& recordings() const { return recordings_; }
  CallStore& store() { return store_; }
  PipelineConfig config() const {
    std::shared_lock lock(config_mu_);
    return config_;
  }
  const std::vector<RecordingFailure>& startup_failures() const { return failures_; }

  void register_routes(httplib::Server& srv) {
    using httplib::Request;
    using httplib::Response;
    auto wrap = [](auto fn) {
      return [fn](const Request& req, Response& res) {
        try {
          fn(req, res);
        } catch (const ApiError& e) {
          nlohmann::json body = {{"code", e.code}, {"message", e.what()}};
          body.update(e.extra);
          res.status = e.status;
          res.set_content(body.dump(), "application/json");
        } catch (const std::invalid_argument& e) {
          res.status = 400;
          res.set_content(nlohmann::json({{"code", "invalid_argument"}, {"message", e.what()}}).dump(), "application/json");
        } catch (const nlohmann::json::exception& e) {
          res.status = 400;
          res.set_content(nlohmann::json({{"code", "invalid_request"}, {"message", e.what()}}).dump(), "application/json");
        } catch (const std::exception& e) {
          res.status = 500;
          res.set_content(nlohmann::json({{"code", "internal"}, {"message", e.what()}}).dump(), "application/json");
        }
      };
    };
    auto json_reply = [](Response& res, const nlohmann::json& j) { res.set_content(j.dump(), "application/json"); };

    srv.Get("/api/recordings", wrap([this, json_reply](const Request&, Response& res) {
              nlohmann::json ids = nlohmann::json::array();
              for (const auto& r : recordings_) ids.push_back(r.id());
              json_reply(res, ids);
            }));

    srv.Get("/api/recordings/:id", wrap([this, json_reply](const Request& req, Response& res) {
              const auto& r = recording(req.path_params.at("id"));
              std::size_t calls = 0;
              for (const auto& c : store_.all()) calls += c.record.recording_id == r.id();
              json_reply(res, {{"id", r.id()},
                               {"duration_s", r.duration_s()},
                               {"sample_rate_hz", r.sample_rate_hz()},
                               {"calls", calls}});
            }));

    srv.Get("/api/recordings/:id/calls", wrap([this, json_reply](const Request& req, Response& res) {
              const auto& r = recording(req.path_params.at("id"));
              nlohmann::json out = nlohmann::json::array();
              for (const auto& c : store_.all())
                if (c.record.recording_id == r.id()) out.push_back(service_detail::stored_json(c));
              json_reply(res, out);
            }));

    srv.Get("/api/recordings/:id/spectrogram", wrap([this, json_reply](const Request& req, Response& res) {
              const auto& r = recording(req.path_params.at("id"));
              const auto tile = spectrogram_tile(r, service_detail::query_double(req, "t0", 0.0),
                                                 service_detail::query_double(req, "t1", r.duration_s()));
              if (req.get_param_value("format") == "png") {
                res.set_content(reinterpret_cast<const char*>(tile.png.data()), tile.png.size(), "image/png");
              } else {
                nlohmann::json j = tile.axes;
                j["png_base64"] = base64_encode(tile.png);
                json_reply(res, j);
              }
            }));

    srv.Post("/api/detect", wrap([this, json_reply](const Request& req, Response& res) {
               const auto body = service_detail::parse_body(req);
               if (!body.is_object() || !body.contains("recording_id"))
                 throw ApiError(400, "invalid_request", "body needs a recording_id");
               const auto& r = recording(body.at("recording_id").get<std::string>());
               DetectionParams params = config().detection;
               if (body.contains("params")) params = body.at("params").get<DetectionParams>();
               json_reply(res, detect_json(r, params));
             }));

    srv.Get("/api/review", wrap([this, json_reply](const Request& req, Response& res) {
              const std::string status = req.has_param("status") ? req.get_param_value("status") : "all";
              if (status != "all" && status != "Flagged" && status != "AutoAccepted" && status != "ManuallyLabeled")
                throw ApiError(400, "invalid_query", "unknown status filter '" + status + "'");
              const std::size_t offset = service_detail::query_count(req, "offset", 0);
              const std::size_t limit = service_detail::query_count(req, "limit", 50);
              json_reply(res, review_page(status, offset, limit));
            }));

    srv.Get("/api/calls/:id", wrap([this, json_reply](const Request& req, Response& res) {
              const auto c = store_.get(req.path_params.at("id"));
              if (!c) throw ApiError(404, "not_found", "unknown call '" + req.path_params.at("id") + "'");
              json_reply(res, service_detail::stored_json(*c));
            }));

    srv.Post("/api/calls/:id/label", wrap([this, json_reply](const Request& req, Response& res) {
               const auto body = service_detail::parse_body(req);
               if (!body.is_object()) throw ApiError(400, "invalid_request", "expected a JSON object");
               const auto cls = parse_class(body.value("class", std::string()));
               if (!cls) throw ApiError(400, "invalid_class", "class must be one of Flat, Modulated, FrequencyStep, Composite, Short");
               const auto annotator = body.value("annotator", std::string());
               if (annotator.empty()) throw ApiError(400, "invalid_request", "annotator is required");
               std::optional<std::uint64_t> version;
               if (body.contains("version")) version = body.at("version").get<std::uint64_t>();
               try {
                 json_reply(res, service_detail::stored_json(store_.label(req.path_params.at("id"), *cls, annotator, version)));
               } catch (const UnknownCall& e) {
                 throw ApiError(404, "not_found", e.what());
               } catch (const VersionConflict& e) {
                 ApiError err(409, "version_conflict", e.what());
                 err.extra = {{"current_version", e.current_version}};
                 throw err;
               }
             }));

    srv.Get("/api/config", wrap([this, json_reply](const Request&, Response& res) { json_reply(res, config()); }));

    srv.Put("/api/config", wrap([this, json_reply](const Request& req, Response& res) {
              const auto next = service_detail::parse_body(req).get<PipelineConfig>();
              json_reply(res, apply_config(next));
            }));

    srv.set_error_handler([](const Request&, Response& res) {
      if (!res.body.empty()) return;
      res.set_content(nlohmann::json({{"code", res.status == 404 ? "not_found" : "http_error"},
                                      {"message", "no route for this request (HTTP " + std::to_string(res.status) + ")"}})
                          .dump(),
                      "application/json");
    });
  }

  /// Replace the config and re-run the pipeline on every recording.
  nlohmann::json apply_config(PipelineConfig next) {
    next.validate();
    std::unique_lock lock(config_mu_);
    std::vector<std::size_t> all(recordings_.size());
    for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
    reprocess(all, next);
    config_ = next;
    store_.set_config(config_);
    std::size_t calls = store_.all().size();
    nlohmann::json failures = nlohmann::json::array();
    for (const auto& f : failures_) failures.push_back({{"recording_id", f.recording_id}, {"message", f.message}});
    return {{"config", config_}, {"recordings", recordings_.size()}, {"calls", calls}, {"failures", failures}};
  }

  struct Tile {
    std::vector<std::uint8_t> png;
    nlohmann::json axes;
  };

  /// Detection-resolution spectrogram of [t0, t1) in dB (80 dB range), high
  /// frequencies in the first image row.
  static Tile spectrogram_tile(const Recording& r, double t0, double t1) {
    if (!(t0 >= 0.0 && t1 > t0 && t1 <= r.duration_s() + 1e-9))
      throw ApiError(400, "invalid_window", "window must satisfy 0 <= t0 < t1 <= " + std::to_string(r.duration_s()));
    const auto rate = r.sample_rate_hz();
    const auto a = static_cast<std::size_t>(std::lround(t0 * rate));
    const auto b = std::min(r.size(), static_cast<std::size_t>(std::lround(t1 * rate)));
    const auto params = StftParams::detection();
    if (b - a < static_cast<std::size_t>(params.segment_length))
      throw ApiError(400, "invalid_window", "window shorter than one analysis segment");
    const auto grid = to_db(stft_energy(r.samples().subspan(a, b - a), rate, params), 80.0);
    const Matrix freq_major = grid.values.transpose();
    const double hi = freq_major.maxCoeff(), lo = freq_major.minCoeff();
    Tile t;
    t.png = heatmap_png(freq_major, lo, hi);
    t.axes = {{"recording_id", r.id()},
              {"t0", static_cast<double>(a) / rate},
              {"t1", static_cast<double>(a) / rate + grid.dt_s * static_cast<double>(grid.time_steps())},
              {"dt_s", grid.dt_s},
              {"width", grid.time_steps()},
              {"height", grid.freq_bins()},
              {"f_min_hz", 0.0},
              {"f_max_hz", grid.df_hz * static_cast<double>(grid.freq_bins() - 1)},
              {"df_hz", grid.df_hz},
              {"db_min", lo},
              {"db_max", hi},
              {"row_order", "high_to_low_frequency"}};
    return t;
  }

  static nlohmann::json detect_json(const Recording& r, const DetectionParams& params) {
    const auto d = detect_calls_detailed(r, params);
    nlohmann::json events = nlohmann::json::array();
    for (const auto& e : d.events) events.push_back({{"start_s", e.start_s}, {"end_s", e.end_s}});
    return {{"recording_id", r.id()},
            {"params", params},
            {"events", events},
            {"features", {{"dt_s", d.features.dt_s}, {"entropy", d.features.entropy}, {"ratio", d.features.ratio}}}};
  }

  nlohmann::json review_page(const std::string& status, std::size_t offset, std::size_t limit) const {
    std::vector<StoredCall> calls;
    for (auto& c : store_.all())
      if (status == "all" || status_name(c.record.triage_status) == status) calls.push_back(std::move(c));
    std::stable_sort(calls.begin(), calls.end(),
                     [](const StoredCall& a, const StoredCall& b) { return a.record.confidence < b.record.confidence; });
    nlohmann::json page = nlohmann::json::array();
    for (std::size_t i = offset; i < calls.size() && i < offset + limit; ++i) page.push_back(service_detail::stored_json(calls[i]));
    return {{"status", status}, {"total", calls.size()}, {"offset", offset}, {"limit", limit}, {"calls", page}};
  }

 private:
  const Recording& recording(const std::string& id) const {
    const auto it = index_.find(id);
    if (it == index_.end()) throw ApiError(404, "not_found", "unknown recording '" + id + "'");
    return recordings_[it->second];
  }

  void reprocess(const std::vector<std::size_t>& which, const PipelineConfig& cfg) {
    std::vector<std::optional<std::vector<CallRecord>>> results(which.size());
    std::vector<std::string> errors(which.size());
    const Classifier* clf = classifier_ ? &*classifier_ : nullptr;
    service_detail::parallel_for(which.size(), [&](std::size_t k) {
      try {
        results[k] = process_recording(recordings_[which[k]], cfg, clf);
      } catch (const std::exception& e) {
        errors[k] = e.what();
      }
    });
    failures_.clear();
    for (std::size_t k = 0; k < which.size(); ++k) {
      const auto& id = recordings_[which[k]].id();
      if (results[k]) {
        store_.put_recording(id, *results[k]);
      } else {
        failures_.push_back({id, errors[k]});
        store_.put_recording(id, {});
      }
    }
  }

  ServiceOptions opts_;
  CallStore store_;
  std::vector<Recording> recordings_;
  std::map<std::string, std::size_t> index_;
  std::optional<Classifier> classifier_;
  mutable std::shared_mutex config_mu_;
  PipelineConfig config_;
  std::vector<RecordingFailure> failures_;
};

/// Blocking HTTP server on host:port; returns false if the port cannot be bound.
inline bool serve(Service& service, const std::string& host, int port) {
  httplib::Server srv;
  service.register_routes(srv);
  return srv.listen(host, port);
}

}  // namespace usv
