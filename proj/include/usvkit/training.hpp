#pragma once

#include <functional>
#include <memory>
#include <stdexcept>
#include <vector>

#include "json.hpp"
#include "usvkit/evaluation.hpp"
#include "usvkit/models.hpp"
#include "usvkit/nn/train.hpp"
#include "usvkit/pipeline.hpp"
#include "usvkit/preprocess.hpp"

namespace usv {

/// Which network to build and how; shared by training and cross-validation.
struct ClassifierSpec {
  ArchKind arch = ArchKind::Cnn;
  FnnArchConfig fnn;
  CnnArchConfig cnn;
  std::uint64_t init_seed = 1;

  double snippet_pad_ms() const { return arch == ArchKind::Cnn ? kCnnPadMs : kFnnPadMs; }

  nn::Model build(std::uint64_t seed_offset = 0) const {
    return arch == ArchKind::Cnn ? build_custom_cnn(cnn, init_seed + seed_offset) : build_fnn(fnn, init_seed + seed_offset);
  }

  nlohmann::json arch_json() const { return arch == ArchKind::Cnn ? nlohmann::json(cnn) : nlohmann::json(fnn); }
};

inline void to_json(nlohmann::json& j, const nn::TrainConfig& c) {
  j = {{"learning_rate", c.learning_rate},
       {"weight_decay", c.weight_decay},
       {"epochs", c.epochs},
       {"batch_size", c.batch_size},
       {"target_off", c.targets.off},
       {"target_on", c.targets.on},
       {"seed", c.seed}};
}

/// Networks datasets over labeled calls; the CNN variant still needs its
/// normalization statistics set before sampling.
inline std::unique_ptr<nn::Dataset> make_dataset(ArchKind arch, const LabeledCalls& calls) {
  if (arch == ArchKind::Cnn) return std::make_unique<CnnDataset>(calls.snippets, calls.labels);
  return std::make_unique<FnnDataset>(calls.snippets, calls.labels);
}

inline std::vector<std::size_t> all_indices(std::size_t n) {
  std::vector<std::size_t> v(n);
  for (std::size_t i = 0; i < n; ++i) v[i] = i;
  return v;
}

/// Train on all of `a_calls` (plus `m_calls` if given). CNN statistics come
/// from the A calls only.
inline Classifier train_classifier(const ClassifierSpec& spec, const LabeledCalls& a_calls, const LabeledCalls* m_calls,
                                   const nn::TrainConfig& tc, std::function<void(int, double)> on_epoch = {}) {
  if (a_calls.size() == 0) throw std::invalid_argument("train_classifier: no labeled calls");
  auto a = make_dataset(spec.arch, a_calls);
  std::unique_ptr<nn::Dataset> m;
  if (m_calls && m_calls->size() > 0) m = make_dataset(spec.arch, *m_calls);
  DatasetStats stats;
  if (spec.arch == ArchKind::Cnn) {
    auto* cnn = static_cast<CnnDataset*>(a.get());
    stats = cnn->fit_stats(all_indices(a->size()));
    cnn->set_stats(stats);
    if (m) static_cast<CnnDataset*>(m.get())->set_stats(stats);
  }
  std::vector<const nn::Dataset*> parts{a.get()};
  if (m) parts.push_back(m.get());
  const nn::ConcatDataset data(parts);
  nn::Model model = spec.build();
  const auto result = nn::train(model, data, tc, std::move(on_epoch));
  nlohmann::json meta = {{"arch_config", spec.arch_json()},
                         {"train", tc},
                         {"train_calls", data.size()},
                         {"param_count", model.param_count()},
                         {"final_loss", result.epoch_loss.empty() ? 0.0 : result.epoch_loss.back()}};
  return Classifier(spec.arch, std::move(model), stats, meta);
}

struct ClassifierCvHooks {
  std::function<void(std::size_t fold, int epoch, double loss)> on_epoch;
  /// Every trained fold model, wrapped with that fold's statistics.
  std::function<void(std::size_t fold, const Classifier& classifier)> after_fold;
};

/// k-fold protocol over labeled calls; CNN statistics are refit on each
/// fold's A training split.
inline CvSummary cross_validate_classifier(const ClassifierSpec& spec, const LabeledCalls& a_calls,
                                           const LabeledCalls* m_calls, const CvConfig& cfg,
                                           const ClassifierCvHooks& hooks = {}) {
  auto a = make_dataset(spec.arch, a_calls);
  std::unique_ptr<nn::Dataset> m;
  if (m_calls && m_calls->size() > 0) m = make_dataset(spec.arch, *m_calls);
  DatasetStats stats;
  CvHooks h;
  h.build = [&](std::size_t fold) { return spec.build(fold); };
  h.before_fold = [&](std::size_t, const std::vector<std::size_t>& train_idx) {
    if (spec.arch != ArchKind::Cnn) return;
    auto* cnn = static_cast<CnnDataset*>(a.get());
    stats = cnn->fit_stats(train_idx);
    cnn->set_stats(stats);
    if (m) static_cast<CnnDataset*>(m.get())->set_stats(stats);
  };
  h.on_epoch = hooks.on_epoch;
  if (hooks.after_fold)
    h.after_fold = [&](std::size_t fold, nn::Model& model) {
      hooks.after_fold(fold, Classifier(spec.arch, model, stats, {{"arch_config", spec.arch_json()}, {"fold", fold}}));
    };
  return cross_validate(*a, m.get(), cfg, h);
}

}  // namespace usv
