#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <functional>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "usvkit/call_class.hpp"
#include "usvkit/csv.hpp"
#include "usvkit/nn/model.hpp"
#include "usvkit/nn/train.hpp"
#include "usvkit/rng.hpp"

namespace usv {

using nn::ClassPrediction;

/// Rows are the true class, columns the predicted one.
struct ConfusionMatrix {
  std::array<std::array<std::size_t, kNumClasses>, kNumClasses> counts{};

  std::size_t total() const {
    std::size_t n = 0;
    for (const auto& r : counts)
      for (auto c : r) n += c;
    return n;
  }
  std::size_t trace() const {
    std::size_t n = 0;
    for (std::size_t k = 0; k < kNumClasses; ++k) n += counts[k][k];
    return n;
  }
  ConfusionMatrix& operator+=(const ConfusionMatrix& o) {
    for (std::size_t i = 0; i < kNumClasses; ++i)
      for (std::size_t j = 0; j < kNumClasses; ++j) counts[i][j] += o.counts[i][j];
    return *this;
  }
};

inline ConfusionMatrix confusion(const std::vector<CallClass>& preds, const std::vector<CallClass>& labels) {
  if (preds.size() != labels.size())
    throw std::invalid_argument("confusion: " + std::to_string(preds.size()) + " predictions vs " +
                                std::to_string(labels.size()) + " labels");
  if (preds.empty()) throw std::invalid_argument("confusion: no samples");
  ConfusionMatrix cm;
  for (std::size_t i = 0; i < preds.size(); ++i) ++cm.counts[index_of(labels[i])][index_of(preds[i])];
  return cm;
}

inline ConfusionMatrix confusion(const std::vector<ClassPrediction>& preds, const std::vector<CallClass>& labels) {
  std::vector<CallClass> p;
  for (const auto& x : preds) p.push_back(x.predicted_class);
  return confusion(p, labels);
}

/// One-vs-all metrics of a single class. Undefined ratios (empty denominators)
/// are reported as 0 and flagged.
struct ClassMetrics {
  std::size_t support = 0;
  std::size_t tp = 0, fn = 0, fp = 0, tn = 0;
  double accuracy = 0.0;
  double recall = 0.0;
  double precision = 0.0;
  double specificity = 0.0;
  double f1 = 0.0;
  bool recall_undefined = false;
  bool precision_undefined = false;
  bool specificity_undefined = false;
};

struct MetricsReport {
  std::array<ClassMetrics, kNumClasses> per_class{};
  double weighted_recall = 0.0;
  double weighted_precision = 0.0;
  double weighted_specificity = 0.0;
  double weighted_f1 = 0.0;
  double overall_accuracy = 0.0;
  std::size_t total = 0;
};

inline MetricsReport class_metrics(const ConfusionMatrix& cm) {
  const std::size_t n = cm.total();
  if (n == 0) throw std::invalid_argument("class_metrics: empty confusion matrix");
  auto ratio = [](std::size_t a, std::size_t b, bool& undefined) {
    undefined = b == 0;
    return b == 0 ? 0.0 : static_cast<double>(a) / static_cast<double>(b);
  };
  MetricsReport r;
  r.total = n;
  std::size_t tp_sum = 0;
  double wp = 0.0, ws = 0.0, wf = 0.0;
  for (std::size_t k = 0; k < kNumClasses; ++k) {
    ClassMetrics& m = r.per_class[k];
    std::size_t row = 0, col = 0;
    for (std::size_t j = 0; j < kNumClasses; ++j) {
      row += cm.counts[k][j];
      col += cm.counts[j][k];
    }
    m.support = row;
    m.tp = cm.counts[k][k];
    m.fn = row - m.tp;
    m.fp = col - m.tp;
    m.tn = n - m.tp - m.fn - m.fp;
    m.accuracy = static_cast<double>(m.tp + m.tn) / static_cast<double>(n);
    m.recall = ratio(m.tp, m.tp + m.fn, m.recall_undefined);
    m.precision = ratio(m.tp, m.tp + m.fp, m.precision_undefined);
    m.specificity = ratio(m.tn, m.tn + m.fp, m.specificity_undefined);
    m.f1 = m.precision + m.recall > 0.0 ? 2.0 * m.precision * m.recall / (m.precision + m.recall) : 0.0;
    tp_sum += m.tp;
    const auto w = static_cast<double>(m.support);
    wp += w * m.precision;
    ws += w * m.specificity;
    wf += w * m.f1;
  }
  const auto nd = static_cast<double>(n);
  // support * tp / support collapses to tp, which keeps the recall identity exact
  r.weighted_recall = static_cast<double>(tp_sum) / nd;
  r.weighted_precision = wp / nd;
  r.weighted_specificity = ws / nd;
  r.weighted_f1 = wf / nd;
  r.overall_accuracy = static_cast<double>(cm.trace()) / nd;
  return r;
}

inline void to_json(nlohmann::json& j, const ClassMetrics& m) {
  j = {{"support", m.support},         {"accuracy", m.accuracy},       {"recall", m.recall},
       {"precision", m.precision},     {"specificity", m.specificity}, {"f1", m.f1},
       {"recall_undefined", m.recall_undefined}, {"precision_undefined", m.precision_undefined}};
}

inline void to_json(nlohmann::json& j, const MetricsReport& r) {
  j = nlohmann::json::object();
  for (std::size_t k = 0; k < kNumClasses; ++k)
    j["per_class"][std::string(class_name(class_from_index(static_cast<int>(k))))] = r.per_class[k];
  j["weighted"] = {{"recall", r.weighted_recall},
                   {"precision", r.weighted_precision},
                   {"specificity", r.weighted_specificity},
                   {"f1", r.weighted_f1}};
  j["overall_accuracy"] = r.overall_accuracy;
  j["total"] = r.total;
}

inline std::string fmt6(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

/// One row per class plus a trailing "weighted" row.
inline void write_metrics_csv(std::ostream& out, const MetricsReport& r) {
  csv::write_row(out, {"class", "support", "accuracy", "recall", "precision", "specificity", "f1"});
  for (std::size_t k = 0; k < kNumClasses; ++k) {
    const auto& m = r.per_class[k];
    csv::write_row(out, {std::string(class_name(class_from_index(static_cast<int>(k)))), std::to_string(m.support),
                         fmt6(m.accuracy), fmt6(m.recall), fmt6(m.precision), fmt6(m.specificity), fmt6(m.f1)});
  }
  csv::write_row(out, {"weighted", std::to_string(r.total), fmt6(r.overall_accuracy), fmt6(r.weighted_recall),
                       fmt6(r.weighted_precision), fmt6(r.weighted_specificity), fmt6(r.weighted_f1)});
}

/// k disjoint folds covering 0..n-1 after a seeded shuffle; sizes differ by
/// at most one, the first n % k folds being the larger ones.
inline std::vector<std::vector<std::size_t>> kfold_split(std::size_t n, std::size_t k, std::uint64_t seed) {
  if (k == 0 || k > n)
    throw std::invalid_argument("kfold_split: need 1 <= k <= n, got k = " + std::to_string(k) + ", n = " + std::to_string(n));
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  Rng(seed, 0xF01D).shuffle(order);
  std::vector<std::vector<std::size_t>> folds(k);
  for (std::size_t i = 0; i < n; ++i) folds[i % k].push_back(order[i]);
  return folds;
}

struct CvConfig {
  std::size_t folds = 10;
  std::uint64_t split_seed = 0;
  nn::TrainConfig train;
};

struct FoldResult {
  std::size_t fold = 0;
  std::vector<std::size_t> validation_indices;
  std::vector<ClassPrediction> predictions;
  ConfusionMatrix confusion;
  MetricsReport metrics;
  std::vector<double> epoch_loss;
};

struct MeanStd {
  double mean = 0.0;
  double std = 0.0;  // population
};

struct CvSummary {
  std::vector<FoldResult> folds;
  MeanStd accuracy, weighted_precision, weighted_specificity, weighted_f1;
  ConfusionMatrix pooled;
};

inline MeanStd mean_std(const std::vector<double>& v) {
  MeanStd m;
  if (v.empty()) return m;
  for (double x : v) m.mean += x;
  m.mean /= static_cast<double>(v.size());
  for (double x : v) m.std += (x - m.mean) * (x - m.mean);
  m.std = std::sqrt(m.std / static_cast<double>(v.size()));
  return m;
}

inline void to_json(nlohmann::json& j, const MeanStd& m) { j = {{"mean", m.mean}, {"std", m.std}}; }

inline void to_json(nlohmann::json& j, const CvSummary& s) {
  j = nlohmann::json::object();
  j["accuracy"] = s.accuracy;
  j["weighted_precision"] = s.weighted_precision;
  j["weighted_specificity"] = s.weighted_specificity;
  j["weighted_f1"] = s.weighted_f1;
  for (const auto& f : s.folds) j["folds"].push_back({{"fold", f.fold}, {"metrics", f.metrics}});
  j["pooled_confusion"] = s.pooled.counts;
}

class FoldError : public std::runtime_error {
 public:
  FoldError(std::size_t fold, const std::string& what)
      : std::runtime_error("fold " + std::to_string(fold) + ": " + what), fold_(fold) {}
  std::size_t fold() const { return fold_; }

 private:
  std::size_t fold_;
};

struct CvHooks {
  /// Builds a fresh model for a fold.
  std::function<nn::Model(std::size_t fold)> build;
  /// Called with the fold's training indices into the A data before training
  /// (e.g. to fit normalization statistics).
  std::function<void(std::size_t fold, const std::vector<std::size_t>& train_indices)> before_fold;
  /// Receives every trained model.
  std::function<void(std::size_t fold, nn::Model& model)> after_fold;
  std::function<void(std::size_t fold, int epoch, double loss)> on_epoch;
};

/// k-fold protocol: each fold trains on the other k-1 splits of `a_data`
/// plus all of `m_data` (optional) and is scored on its held-out split.
inline CvSummary cross_validate(const nn::Dataset& a_data, const nn::Dataset* m_data, const CvConfig& cfg,
                                const CvHooks& hooks) {
  if (cfg.folds < 2) throw std::invalid_argument("cross_validate: need at least 2 folds for a validation split");
  if (!hooks.build) throw std::invalid_argument("cross_validate: missing model builder");
  const auto folds = kfold_split(a_data.size(), cfg.folds, cfg.split_seed);
  CvSummary s;
  std::vector<double> acc, wp, ws, wf;
  for (std::size_t f = 0; f < folds.size(); ++f) {
    try {
      std::vector<std::size_t> train_idx;
      for (std::size_t g = 0; g < folds.size(); ++g)
        if (g != f) train_idx.insert(train_idx.end(), folds[g].begin(), folds[g].end());
      std::sort(train_idx.begin(), train_idx.end());
      if (hooks.before_fold) hooks.before_fold(f, train_idx);
      const nn::SubsetDataset train_a(a_data, train_idx);
      const nn::SubsetDataset val(a_data, folds[f]);
      std::vector<const nn::Dataset*> parts{&train_a};
      if (m_data && m_data->size() > 0) parts.push_back(m_data);
      const nn::ConcatDataset train_set(parts);

      nn::Model model = hooks.build(f);
      nn::TrainConfig tc = cfg.train;
      tc.seed = cfg.train.seed + f;
      std::function<void(int, double)> cb;
      if (hooks.on_epoch) cb = [&](int e, double l) { hooks.on_epoch(f, e, l); };
      FoldResult r;
      r.fold = f;
      r.epoch_loss = nn::train(model, train_set, tc, cb).epoch_loss;
      r.validation_indices = folds[f];
      r.predictions = nn::predict_dataset(model, val);
      std::vector<CallClass> labels;
      for (std::size_t i = 0; i < val.size(); ++i) labels.push_back(val.label(i));
      r.confusion = confusion(r.predictions, labels);
      r.metrics = class_metrics(r.confusion);
      if (hooks.after_fold) hooks.after_fold(f, model);
      s.pooled += r.confusion;
      acc.push_back(r.metrics.overall_accuracy);
      wp.push_back(r.metrics.weighted_precision);
      ws.push_back(r.metrics.weighted_specificity);
      wf.push_back(r.metrics.weighted_f1);
      s.folds.push_back(std::move(r));
    } catch (const FoldError&) {
      throw;
    } catch (const std::exception& e) {
      throw FoldError(f, e.what());
    }
  }
  s.accuracy = mean_std(acc);
  s.weighted_precision = mean_std(wp);
  s.weighted_specificity = mean_std(ws);
  s.weighted_f1 = mean_std(wf);
  return s;
}

struct TriagePoint {
  double threshold = 0.0;
  std::size_t kept = 0;
  double kept_fraction = 0.0;
  double recall_on_kept = 1.0;  // accuracy over the kept calls
  bool empty_kept = false;
};

inline void to_json(nlohmann::json& j, const TriagePoint& p) {
  j = {{"threshold", p.threshold},
       {"kept", p.kept},
       {"kept_fraction", p.kept_fraction},
       {"recall_on_kept", p.recall_on_kept},
       {"empty_kept", p.empty_kept}};
}

/// Calls with confidence >= p are kept for automatic classification.
inline std::vector<TriagePoint> triage_curve(const std::vector<ClassPrediction>& preds,
                                             const std::vector<CallClass>& labels,
                                             const std::vector<double>& thresholds) {
  if (preds.size() != labels.size()) throw std::invalid_argument("triage_curve: predictions and labels differ in length");
  std::vector<TriagePoint> out;
  for (double p : thresholds) {
    TriagePoint t;
    t.threshold = p;
    std::size_t correct = 0;
    for (std::size_t i = 0; i < preds.size(); ++i)
      if (preds[i].confidence >= p) {
        ++t.kept;
        correct += preds[i].predicted_class == labels[i];
      }
    t.kept_fraction = preds.empty() ? 0.0 : static_cast<double>(t.kept) / static_cast<double>(preds.size());
    t.empty_kept = t.kept == 0;
    t.recall_on_kept = t.empty_kept ? 1.0 : static_cast<double>(correct) / static_cast<double>(t.kept);
    out.push_back(t);
  }
  return out;
}

/// 0, 0.05, ..., 1.
inline std::vector<double> default_triage_thresholds() {
  std::vector<double> v;
  for (int i = 0; i <= 20; ++i) v.push_back(i / 20.0);
  return v;
}

inline void write_triage_csv(std::ostream& out, const std::vector<TriagePoint>& pts) {
  csv::write_row(out, {"threshold", "kept", "kept_fraction", "recall_on_kept", "empty_kept"});
  for (const auto& p : pts)
    csv::write_row(out, {fmt6(p.threshold), std::to_string(p.kept), fmt6(p.kept_fraction), fmt6(p.recall_on_kept),
                         p.empty_kept ? "1" : "0"});
}

struct TriageSplit {
  std::vector<std::size_t> accepted;
  std::vector<std::size_t> flagged;
};

inline void validate_threshold(double p) {
  if (!(p >= 0.0 && p <= 1.0)) throw std::invalid_argument("triage threshold must lie in [0, 1]");
}

inline TriageSplit triage_split(const std::vector<ClassPrediction>& preds, double p) {
  validate_threshold(p);
  TriageSplit s;
  for (std::size_t i = 0; i < preds.size(); ++i) (preds[i].confidence >= p ? s.accepted : s.flagged).push_back(i);
  return s;
}

}  // namespace usv
