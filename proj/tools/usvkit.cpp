// usvkit command-line front end: synth, detect, classify, train, evaluate,
// explain, serve.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "usvkit/evaluation.hpp"
#include "usvkit/interpret.hpp"
#include "usvkit/pipeline.hpp"
#include "usvkit/png.hpp"
#include "usvkit/synth.hpp"
#include "usvkit/training.hpp"
#include "usvkit/service.hpp"  // last, see the note in the header

namespace fs = std::filesystem;
using nlohmann::json;
using namespace usv;

namespace {

json read_json_file(const fs::path& p) {
  std::ifstream in(p);
  if (!in) throw std::runtime_error("cannot open " + p.string());
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw std::runtime_error(p.string() + ": " + e.what());
  }
}

void write_json_file(const fs::path& p, const json& j) {
  std::ofstream out(p);
  out << j.dump(2) << "\n";
  if (!out) throw std::runtime_error("cannot write " + p.string());
}

void write_bytes(const fs::path& p, const std::vector<std::uint8_t>& bytes) {
  std::ofstream out(p, std::ios::binary);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("cannot write " + p.string());
}

// A pipeline config file, or a bare DetectionParams object.
PipelineConfig read_pipeline_config(const std::string& path) {
  if (path.empty()) return {};
  const json j = read_json_file(path);
  if (j.is_object() && (j.contains("detection") || j.contains("threshold") || j.contains("mode") || j.contains("model_path")))
    return j.get<PipelineConfig>();
  PipelineConfig c;
  c.detection = j.get<DetectionParams>();
  return c;
}

CallClass class_arg(const std::string& s) {
  const auto c = parse_class(s);
  if (!c) throw CLI::ValidationError("class", "unknown class '" + s + "'");
  return *c;
}

struct TrainArgs {
  std::string arch = "cnn";
  std::string arch_config;
  int epochs = 50;
  int batch = 32;
  double lr = 1e-3;
  double wd = 0.01;
  std::uint64_t seed = 1;

  void add(CLI::App* app) {
    app->add_option("--arch", arch, "fnn or cnn")->check(CLI::IsMember({"fnn", "cnn"}));
    app->add_option("--arch-config", arch_config, "JSON architecture overrides")->check(CLI::ExistingFile);
    app->add_option("--epochs", epochs)->check(CLI::PositiveNumber);
    app->add_option("--batch", batch)->check(CLI::PositiveNumber);
    app->add_option("--lr", lr)->check(CLI::PositiveNumber);
    app->add_option("--wd", wd)->check(CLI::NonNegativeNumber);
    app->add_option("--seed", seed);
  }

  ClassifierSpec spec() const {
    ClassifierSpec s;
    s.arch = arch == "fnn" ? ArchKind::Fnn : ArchKind::Cnn;
    s.init_seed = seed;
    if (!arch_config.empty()) {
      const json j = read_json_file(arch_config);
      if (s.arch == ArchKind::Cnn)
        s.cnn = j.get<CnnArchConfig>();
      else
        s.fnn = j.get<FnnArchConfig>();
    }
    return s;
  }

  nn::TrainConfig train_config() const {
    nn::TrainConfig t;
    t.epochs = epochs;
    t.batch_size = batch;
    t.learning_rate = lr;
    t.weight_decay = wd;
    t.seed = seed;
    return t;
  }
};

int report_failures(const std::vector<RecordingFailure>& failures) {
  for (const auto& f : failures) std::cerr << "warning: " << f.recording_id << ": " << f.message << "\n";
  return failures.empty() ? 0 : 1;
}

int run_batch(const std::vector<std::string>& wavs, const PipelineConfig& cfg, const Classifier* clf, const std::string& out) {
  std::vector<Recording> recs;
  std::vector<RecordingFailure> failures;
  for (const auto& w : wavs) {
    try {
      recs.push_back(load_wav(w));
    } catch (const std::exception& e) {
      failures.push_back({fs::path(w).stem().string(), e.what()});
    }
  }
  auto result = run_pipeline(recs, cfg, clf);
  failures.insert(failures.end(), result.failures.begin(), result.failures.end());
  export_csv(result.records, out);
  std::cerr << result.records.size() << " calls from " << recs.size() << " recordings written to " << out << "\n";
  return report_failures(failures);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"usvkit: detect, classify and inspect rodent ultrasonic vocalizations"};
  app.require_subcommand(1);

  // synth
  auto* synth = app.add_subcommand("synth", "write a synthetic labeled corpus (WAVs + truth.csv)");
  std::string synth_config, synth_out;
  std::size_t synth_n = 100;
  synth->add_option("--config", synth_config, "SynthCorpusConfig JSON")->check(CLI::ExistingFile);
  synth->add_option("--out", synth_out, "output directory")->required();
  synth->add_option("--recordings", synth_n, "number of recordings")->check(CLI::PositiveNumber);

  // detect / classify
  auto* detect = app.add_subcommand("detect", "detect calls and write a call table");
  auto* classify = app.add_subcommand("classify", "detect, classify and triage calls");
  std::vector<std::string> wavs;
  std::string config_path, model_path, calls_out;
  double threshold = -1.0;
  std::string mode;
  for (auto* sub : {detect, classify}) {
    sub->add_option("wavs", wavs, "input WAV files")->required()->check(CLI::ExistingFile);
    sub->add_option("--config", config_path, "pipeline config or DetectionParams JSON")->check(CLI::ExistingFile);
    sub->add_option("--out", calls_out, "output CSV")->required();
    sub->add_option("--threshold", threshold, "triage threshold p")->check(CLI::Range(0.0, 1.0));
    sub->add_option("--mode", mode, "semi (flag low confidence) or full")->check(CLI::IsMember({"semi", "full"}));
  }
  detect->add_option("--model", model_path, "classifier model; without one calls stay unclassified")
      ->check(CLI::ExistingFile);
  classify->add_option("--model", model_path, "classifier model")->required()->check(CLI::ExistingFile);

  // train
  auto* train = app.add_subcommand("train", "train a classifier on a labeled corpus");
  TrainArgs targs;
  std::string data_dir, mdata_dir, model_out;
  targs.add(train);
  train->add_option("--data", data_dir, "labeled corpus directory")->required()->check(CLI::ExistingDirectory);
  train->add_option("--mdata", mdata_dir, "extra training-only corpus")->check(CLI::ExistingDirectory);
  train->add_option("--out", model_out, "model file")->required();

  // evaluate
  auto* evaluate = app.add_subcommand("evaluate", "k-fold cross-validation with metrics and triage curve");
  TrainArgs eargs;
  std::size_t folds = 10;
  std::uint64_t split_seed = 0;
  std::string report_out, metrics_csv, triage_csv;
  eargs.add(evaluate);
  evaluate->add_option("--cv", folds, "number of folds")->check(CLI::Range(2, 1000));
  evaluate->add_option("--split-seed", split_seed);
  evaluate->add_option("--data", data_dir, "labeled corpus directory")->required()->check(CLI::ExistingDirectory);
  evaluate->add_option("--mdata", mdata_dir, "extra training-only corpus")->check(CLI::ExistingDirectory);
  evaluate->add_option("--out", report_out, "JSON report");
  evaluate->add_option("--metrics-csv", metrics_csv, "pooled per-class metrics CSV");
  evaluate->add_option("--triage-csv", triage_csv, "kept fraction / recall over p CSV");

  // explain
  auto* explain = app.add_subcommand("explain", "saliency maps and channel visualizations");
  std::string op = "ig", wav, target, explain_out, png_out;
  int call_index = 0, steps = 50, layer = -1, channel = 0, iterations = 256;
  std::uint64_t explain_seed = 1;
  explain->add_option("--op", op, "ig, smoothgrad or channel")->check(CLI::IsMember({"ig", "smoothgrad", "channel"}));
  explain->add_option("--model", model_path)->required()->check(CLI::ExistingFile);
  explain->add_option("--wav", wav, "recording (ig/smoothgrad)")->check(CLI::ExistingFile);
  explain->add_option("--config", config_path, "detection config")->check(CLI::ExistingFile);
  explain->add_option("--call", call_index, "index of the detected call")->check(CLI::NonNegativeNumber);
  explain->add_option("--target", target, "target class (default: the prediction)");
  explain->add_option("--steps", steps, "integration steps")->check(CLI::PositiveNumber);
  explain->add_option("--layer", layer, "top-level layer index (channel)");
  explain->add_option("--channel", channel, "channel within the layer output")->check(CLI::NonNegativeNumber);
  explain->add_option("--iterations", iterations)->check(CLI::NonNegativeNumber);
  explain->add_option("--seed", explain_seed);
  explain->add_option("--out", explain_out, "JSON output")->required();
  explain->add_option("--png", png_out, "PNG heatmap of the dB channel");

  // serve
  auto* serve_cmd = app.add_subcommand("serve", "HTTP/JSON service for tuning and review");
  int port = 8080;
  std::string host = "127.0.0.1", corpus_dir, journal;
  serve_cmd->add_option("--port", port)->check(CLI::Range(0, 65535));
  serve_cmd->add_option("--host", host);
  serve_cmd->add_option("--corpus", corpus_dir, "directory of WAV recordings")->required()->check(CLI::ExistingDirectory);
  serve_cmd->add_option("--model", model_path)->check(CLI::ExistingFile);
  serve_cmd->add_option("--journal", journal, "label journal (default <corpus>/usvkit-journal.jsonl)");
  serve_cmd->add_option("--config", config_path, "initial pipeline config")->check(CLI::ExistingFile);

  CLI11_PARSE(app, argc, argv);

  try {
    if (*synth) {
      SynthCorpusConfig c;
      if (!synth_config.empty()) c = read_json_file(synth_config).get<SynthCorpusConfig>();
      write_corpus(synth_out, c, synth_n);
      std::cerr << synth_n << " recordings written to " << synth_out << "\n";
      return 0;
    }

    if (*detect || *classify) {
      PipelineConfig cfg = read_pipeline_config(config_path);
      if (threshold >= 0.0) cfg.threshold = threshold;
      if (!mode.empty()) cfg.mode = mode == "full" ? TriageMode::FullyAutomated : TriageMode::SemiAutomated;
      std::optional<Classifier> clf;
      if (!model_path.empty()) {
        clf.emplace(Classifier::load(model_path));
        cfg.model_path = model_path;
      }
      return run_batch(wavs, cfg, clf ? &*clf : nullptr, calls_out);
    }

    if (*train) {
      const auto spec = targs.spec();
      const auto a = load_labeled_calls(data_dir, spec.snippet_pad_ms());
      std::optional<LabeledCalls> m;
      if (!mdata_dir.empty()) m = load_labeled_calls(mdata_dir, spec.snippet_pad_ms());
      std::cerr << "training " << targs.arch << " on " << a.size() + (m ? m->size() : 0) << " calls\n";
      const auto clf = train_classifier(spec, a, m ? &*m : nullptr, targs.train_config(), [](int e, double loss) {
        std::fprintf(stderr, "epoch %d loss %.5f\n", e + 1, loss);
      });
      clf.save(model_out);
      return 0;
    }

    if (*evaluate) {
      const auto spec = eargs.spec();
      const auto a = load_labeled_calls(data_dir, spec.snippet_pad_ms());
      std::optional<LabeledCalls> m;
      if (!mdata_dir.empty()) m = load_labeled_calls(mdata_dir, spec.snippet_pad_ms());
      CvConfig cv;
      cv.folds = folds;
      cv.split_seed = split_seed;
      cv.train = eargs.train_config();
      ClassifierCvHooks hooks;
      hooks.on_epoch = [](std::size_t f, int e, double loss) {
        std::fprintf(stderr, "fold %zu epoch %d loss %.5f\n", f + 1, e + 1, loss);
      };
      const auto summary = cross_validate_classifier(spec, a, m ? &*m : nullptr, cv, hooks);

      std::vector<ClassPrediction> preds;
      std::vector<CallClass> labels;
      for (const auto& f : summary.folds)
        for (std::size_t i = 0; i < f.predictions.size(); ++i) {
          preds.push_back(f.predictions[i]);
          labels.push_back(a.labels[f.validation_indices[i]]);
        }
      const auto curve = triage_curve(preds, labels, default_triage_thresholds());
      json report = summary;
      report["pooled_metrics"] = class_metrics(summary.pooled);
      report["triage"] = curve;
      std::fprintf(stderr, "accuracy %.4f +- %.4f over %zu folds\n", summary.accuracy.mean, summary.accuracy.std, folds);
      if (report_out.empty())
        std::cout << report.dump(2) << "\n";
      else
        write_json_file(report_out, report);
      if (!metrics_csv.empty()) {
        std::ofstream out(metrics_csv, std::ios::binary);
        write_metrics_csv(out, class_metrics(summary.pooled));
      }
      if (!triage_csv.empty()) {
        std::ofstream out(triage_csv, std::ios::binary);
        write_triage_csv(out, curve);
      }
      return 0;
    }

    if (*explain) {
      Classifier clf = Classifier::load(model_path);
      Rng rng(explain_seed);
      if (op == "channel") {
        if (layer < 0) throw CLI::ValidationError("--layer", "required for --op channel");
        if (clf.arch() != ArchKind::Cnn) throw CLI::ValidationError("--op", "channel visualization needs a CNN model");
        ActivationMaxOptions o;
        o.iterations = iterations;
        const auto v = activation_maximization(clf.model(), static_cast<std::size_t>(layer), channel,
                                               {3, kCnnBins, kCnnEvalWidth}, rng, o);
        write_json_file(explain_out, v);
        if (!png_out.empty()) {
          const Matrix db = Eigen::Map<const Matrix>(v.z.ptr() + static_cast<std::size_t>(kCnnBins) * kCnnEvalWidth,
                                                     kCnnBins, kCnnEvalWidth);
          write_bytes(png_out, heatmap_png(db, db.minCoeff(), db.maxCoeff()));
        }
        return 0;
      }
      if (wav.empty()) throw CLI::ValidationError("--wav", "required for --op " + op);
      const auto rec = load_wav(wav);
      const auto cfg = read_pipeline_config(config_path);
      const auto events = detect_calls(rec, cfg.detection);
      if (static_cast<std::size_t>(call_index) >= events.size())
        throw std::runtime_error("call " + std::to_string(call_index) + " not found; " + std::to_string(events.size()) +
                                 " calls detected");
      const auto snippet = padded_snippet(rec, events[call_index], clf.snippet_pad_ms());
      const auto pred = clf.classify({snippet})[0];
      const CallClass tgt = target.empty() ? pred.predicted_class : class_arg(target);
      const auto x = clf.input(snippet);
      SaliencyMap map;
      if (op == "ig") {
        map = integrated_gradients(clf.model(), x, x.zeros_like(), tgt, steps);
      } else {
        SmoothGradOptions o;
        o.steps = steps;
        map = smoothgrad_ig(clf.model(), x, tgt, rng, o);
      }
      json out = {{"recording_id", rec.id()},
                  {"call_index", call_index},
                  {"start_s", events[call_index].start_s},
                  {"end_s", events[call_index].end_s},
                  {"predicted_class", std::string(class_name(pred.predicted_class))},
                  {"confidence", pred.confidence},
                  {"completeness_gap", map.total() - (map.f_input - map.f_baseline)},
                  {"map", map}};
      write_json_file(explain_out, out);
      if (!png_out.empty()) {
        Matrix m;
        if (clf.arch() == ArchKind::Cnn) {
          m = map.channel(1);
        } else {
          m = Eigen::Map<const Matrix>(map.attributions.ptr(), kFnnRows, kFnnCols);
        }
        const double a = std::max(std::abs(m.minCoeff()), std::abs(m.maxCoeff()));
        write_bytes(png_out, heatmap_png(m, -a, a));
      }
      return 0;
    }

    if (*serve_cmd) {
      ServiceOptions o;
      o.corpus_dir = corpus_dir;
      if (!model_path.empty()) o.model_path = model_path;
      o.journal_path = journal.empty() ? fs::path(corpus_dir) / "usvkit-journal.jsonl" : fs::path(journal);
      o.config = read_pipeline_config(config_path);
      if (!model_path.empty()) o.config.model_path = model_path;
      Service service(o);
      report_failures(service.startup_failures());
      std::cerr << "serving " << service.recordings().size() << " recordings on http://" << host << ":" << port << "\n";
      if (!serve(service, host, port)) {
        std::cerr << "error: cannot bind " << host << ":" << port << "\n";
        return 2;
      }
      return 0;
    }
  } catch (const CLI::Error& e) {
    return app.exit(e);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
