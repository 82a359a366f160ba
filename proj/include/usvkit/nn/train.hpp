#pragma once

#include <array>
#include <cmath>
#include <span>
#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "usvkit/call_class.hpp"
#include "usvkit/nn/loss.hpp"
#include "usvkit/nn/model.hpp"
#include "usvkit/nn/optim.hpp"
#include "usvkit/rng.hpp"

namespace usv::nn {

struct TrainConfig {
  double learning_rate = 1e-3;
  double weight_decay = 0.01;
  int epochs = 100;
  int batch_size = 32;
  SmoothingTargets targets;
  std::uint64_t seed = 0;

  void validate() const {
    if (!(learning_rate > 0.0)) throw std::invalid_argument("TrainConfig: learning_rate must be > 0");
    if (!(weight_decay >= 0.0)) throw std::invalid_argument("TrainConfig: weight_decay must be >= 0");
    if (epochs < 0 || batch_size <= 0) throw std::invalid_argument("TrainConfig: epochs >= 0 and batch_size > 0");
    if (!(0.0 <= targets.off && targets.off < targets.on && targets.on <= 1.0))
      throw std::invalid_argument("TrainConfig: smoothing targets need 0 <= off < on <= 1");
  }
};

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = {{"learning_rate", c.learning_rate}, {"weight_decay", c.weight_decay},
       {"epochs", c.epochs},               {"batch_size", c.batch_size},
       {"target_off", c.targets.off},      {"target_on", c.targets.on},
       {"seed", c.seed}};
}

inline void from_json(const nlohmann::json& j, TrainConfig& c) {
  TrainConfig d;
  c.learning_rate = j.value("learning_rate", d.learning_rate);
  c.weight_decay = j.value("weight_decay", d.weight_decay);
  c.epochs = j.value("epochs", d.epochs);
  c.batch_size = j.value("batch_size", d.batch_size);
  c.targets.off = j.value("target_off", d.targets.off);
  c.targets.on = j.value("target_on", d.targets.on);
  c.seed = j.value("seed", d.seed);
  c.validate();
}

/// Labeled samples. `sample` returns one input without the batch dimension;
/// Train-mode samples may be augmented with `rng`.
class Dataset {
 public:
  virtual ~Dataset() = default;
  virtual std::size_t size() const = 0;
  virtual CallClass label(std::size_t i) const = 0;
  virtual Tensor sample(std::size_t i, Mode mode, Rng& rng) const = 0;
};

class TensorDataset final : public Dataset {
 public:
  TensorDataset(std::vector<Tensor> inputs, std::vector<CallClass> labels)
      : inputs_(std::move(inputs)), labels_(std::move(labels)) {
    if (inputs_.size() != labels_.size()) throw std::invalid_argument("TensorDataset: input/label count mismatch");
  }
  std::size_t size() const override { return inputs_.size(); }
  CallClass label(std::size_t i) const override { return labels_.at(i); }
  Tensor sample(std::size_t i, Mode, Rng&) const override { return inputs_.at(i); }

 private:
  std::vector<Tensor> inputs_;
  std::vector<CallClass> labels_;
};

/// Index view over another dataset (which must outlive it).
class SubsetDataset final : public Dataset {
 public:
  SubsetDataset(const Dataset& base, std::vector<std::size_t> indices) : base_(base), idx_(std::move(indices)) {}
  std::size_t size() const override { return idx_.size(); }
  CallClass label(std::size_t i) const override { return base_.label(idx_.at(i)); }
  Tensor sample(std::size_t i, Mode m, Rng& r) const override { return base_.sample(idx_.at(i), m, r); }

 private:
  const Dataset& base_;
  std::vector<std::size_t> idx_;
};

class ConcatDataset final : public Dataset {
 public:
  explicit ConcatDataset(std::vector<const Dataset*> parts) : parts_(std::move(parts)) {}
  std::size_t size() const override {
    std::size_t n = 0;
    for (auto* p : parts_) n += p->size();
    return n;
  }
  CallClass label(std::size_t i) const override {
    auto [p, j] = locate(i);
    return p->label(j);
  }
  Tensor sample(std::size_t i, Mode m, Rng& r) const override {
    auto [p, j] = locate(i);
    return p->sample(j, m, r);
  }

 private:
  std::pair<const Dataset*, std::size_t> locate(std::size_t i) const {
    for (auto* p : parts_) {
      if (i < p->size()) return {p, i};
      i -= p->size();
    }
    throw std::out_of_range("ConcatDataset: index out of range");
  }
  std::vector<const Dataset*> parts_;
};

struct TrainResult {
  std::vector<double> epoch_loss;
};

class TrainingDiverged : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Mini-batch AdamW training with seeded shuffling. Per-epoch shuffles,
/// per-sample augmentation streams and per-batch dropout streams all derive
/// from the config seed, so a run is bitwise reproducible. The model is left
/// in Eval mode.
inline TrainResult train(Model& model, const Dataset& data, const TrainConfig& cfg,
                         const std::function<void(int, double)>& on_epoch = {}) {
  cfg.validate();
  if (data.size() == 0) throw std::invalid_argument("train: empty dataset");
  const Rng root(cfg.seed, 0x7EA1);
  const Rng shuffle_root = root.split(1), augment_root = root.split(2), dropout_root = root.split(3);
  AdamState opt;
  TrainResult result;
  std::vector<std::size_t> order(data.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  model.set_mode(Mode::Train);
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    Rng shuffler = shuffle_root.split(static_cast<std::uint64_t>(epoch));
    shuffler.shuffle(order);
    double loss_sum = 0.0;
    std::size_t seen = 0;
    std::size_t batch_index = 0;
    for (std::size_t b0 = 0; b0 < order.size(); b0 += static_cast<std::size_t>(cfg.batch_size), ++batch_index) {
      const std::size_t b1 = std::min(order.size(), b0 + static_cast<std::size_t>(cfg.batch_size));
      std::vector<Tensor> xs;
      std::vector<CallClass> ys;
      for (std::size_t k = b0; k < b1; ++k) {
        Rng aug = augment_root.split((static_cast<std::uint64_t>(epoch) << 32) | order[k]);
        xs.push_back(data.sample(order[k], Mode::Train, aug));
        ys.push_back(data.label(order[k]));
      }
      const Tensor x = stack(xs);
      Rng drop = dropout_root.split((static_cast<std::uint64_t>(epoch) << 32) | batch_index);
      ForwardCache cache;
      const Tensor logits = model.forward(x, cache, drop);
      auto diverged = [&] {
        return TrainingDiverged("training diverged at epoch " + std::to_string(epoch) + ", batch " +
                                std::to_string(batch_index));
      };
      for (double v : logits.data)
        if (!std::isfinite(v)) throw diverged();
      const BatchLoss bl = batch_loss_ce_smoothed(logits, ys, cfg.targets);
      if (!std::isfinite(bl.loss)) throw diverged();
      BackwardOptions bo;
      bo.input_grad = false;
      const Gradients g = model.backward(cache, bl.grad, bo);
      adamw_step(model.mutable_weights(), g.weights, opt, cfg.learning_rate, cfg.weight_decay);
      loss_sum += bl.loss * static_cast<double>(b1 - b0);
      seen += b1 - b0;
    }
    result.epoch_loss.push_back(loss_sum / static_cast<double>(seen));
    if (on_epoch) on_epoch(epoch, result.epoch_loss.back());
  }
  model.set_mode(Mode::Eval);
  return result;
}

struct ClassPrediction {
  std::array<double, kNumClasses> pseudo_probabilities{};
  CallClass predicted_class = CallClass::Flat;
  double confidence = 0.0;
};

inline ClassPrediction prediction_from_logits(std::span<const double> logits) {
  if (logits.size() != kNumClasses) throw std::invalid_argument("prediction: expected 5 logits");
  const auto p = softmax(logits);
  ClassPrediction out;
  std::size_t best = 0;
  for (std::size_t k = 0; k < kNumClasses; ++k) {
    out.pseudo_probabilities[k] = p[k];
    if (p[k] > p[best]) best = k;
  }
  out.predicted_class = class_from_index(static_cast<int>(best));
  out.confidence = p[best];
  return out;
}

/// Softmax predictions for a batched input; the model must be in Eval mode.
inline std::vector<ClassPrediction> predict(const Model& model, const Tensor& batch) {
  const Tensor logits = model.infer(batch);
  if (logits.rank() != 2 || logits.dim(1) != static_cast<int>(kNumClasses))
    throw std::invalid_argument("predict: model output " + logits.shape_str() + " is not [N, 5]");
  std::vector<ClassPrediction> out;
  for (int i = 0; i < logits.dim(0); ++i)
    out.push_back(prediction_from_logits({logits.ptr() + static_cast<std::size_t>(i) * kNumClasses, kNumClasses}));
  return out;
}

/// Eval-mode predictions for every sample of a dataset, in chunks.
inline std::vector<ClassPrediction> predict_dataset(const Model& model, const Dataset& data, std::size_t chunk = 64) {
  std::vector<ClassPrediction> out;
  Rng unused(0);
  for (std::size_t b0 = 0; b0 < data.size(); b0 += chunk) {
    std::vector<Tensor> xs;
    for (std::size_t i = b0; i < std::min(data.size(), b0 + chunk); ++i) xs.push_back(data.sample(i, Mode::Eval, unused));
    auto p = predict(model, stack(xs));
    out.insert(out.end(), p.begin(), p.end());
  }
  return out;
}

}  // namespace usv::nn
