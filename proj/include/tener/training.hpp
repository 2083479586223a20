#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "tener/data.hpp"
#include "tener/model.hpp"
#include "tener/seed.hpp"
#include "tener/tensor.hpp"

namespace tener {

/// Linear warmup to `peak` at step ceil(warmup_fraction·total), then linear
/// decay to zero at step `total`.
inline Scalar triangular_lr(std::size_t step, std::size_t total_steps, Scalar peak,
                            Scalar warmup_fraction = 0.01) {
  if (total_steps == 0) throw ContractError("triangular_lr: total_steps must be positive");
  if (step > total_steps) throw ContractError("triangular_lr: step beyond total_steps");
  const auto warm = std::max<std::size_t>(
      1, static_cast<std::size_t>(std::ceil(warmup_fraction * static_cast<Scalar>(total_steps))));
  if (step <= warm) return peak * static_cast<Scalar>(step) / static_cast<Scalar>(warm);
  return peak * static_cast<Scalar>(total_steps - step) /
         static_cast<Scalar>(total_steps - warm);
}

class SgdMomentum {
 public:
  explicit SgdMomentum(ParameterStore& params, Scalar momentum = 0.9)
      : params_(params), momentum_(momentum) {
    for (const auto& [_, t] : params_) velocity_.emplace_back(t.size(), Scalar{0});
  }

  /// v ← μ·v + g; p ← p − lr·v; gradients are cleared afterwards.
  void step(Scalar lr) {
    std::size_t i = 0;
    for (auto& [name, t] : params_) {
      if (!t.requires_grad()) {
        ++i;
        continue;
      }
      if (!t.has_grad())
        throw ContractError("parameter '" + name + "' received no gradient");
      auto g = t.grad();
      auto p = t.data();
      auto& v = velocity_[i++];
      for (std::size_t k = 0; k < v.size(); ++k) {
        v[k] = momentum_ * v[k] + g[k];
        p[k] -= lr * v[k];
      }
      t.clear_grad();
    }
  }

  const std::vector<std::vector<Scalar>>& velocity() const { return velocity_; }

 private:
  ParameterStore& params_;
  Scalar momentum_;
  std::vector<std::vector<Scalar>> velocity_;
};

/// Rescales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
inline Scalar clip_grad_norm(ParameterStore& params, Scalar max_norm) {
  Scalar sq = 0;
  for (const auto& [_, t] : params)
    if (t.has_grad())
      for (auto g : t.grad()) sq += g * g;
  const Scalar norm = std::sqrt(sq);
  if (max_norm > 0 && norm > max_norm) {
    const Scalar f = max_norm / norm;
    for (auto& [_, t] : params)
      if (t.has_grad())
        for (auto& g : t.mutable_grad()) g *= f;
  }
  return norm;
}

struct TrainConfig {
  std::size_t epochs = 100;
  std::size_t batch_size = 16;
  Scalar lr = 0.01;  // peak of the triangular schedule
  Scalar momentum = 0.9;
  Scalar warmup_fraction = 0.01;
  Scalar clip_norm = 5.0;  // 0 disables clipping
  std::uint64_t seed = 1;
  bool shuffle = true;

  void validate() const {
    if (epochs == 0) throw ConfigError("epochs must be positive");
    if (batch_size == 0) throw ConfigError("batch_size must be at least 1");
    if (!(warmup_fraction > 0 && warmup_fraction < 1))
      throw ConfigError("warmup_fraction must lie in (0,1)");
    if (lr < 0) throw ConfigError("lr must be non-negative");
    if (momentum < 0 || momentum >= 1) throw ConfigError("momentum must lie in [0,1)");
    if (clip_norm < 0) throw ConfigError("clip_norm must be non-negative");
  }
};

struct EpochRecord {
  std::size_t epoch = 0;  // 1-based
  Scalar train_loss = 0;  // mean over batches
  SpanScores dev;
  Scalar lr = 0;          // rate at the last step of the epoch
};

inline void write_metrics_header(std::ostream& os) {
  os << "epoch,train_loss,dev_p,dev_r,dev_f1,lr\n";
}

inline void write_metrics_row(std::ostream& os, const EpochRecord& r) {
  os << r.epoch << ',' << r.train_loss << ',' << r.dev.precision << ',' << r.dev.recall << ','
     << r.dev.f1 << ',' << r.lr << '\n';
}

class TrainingError : public std::runtime_error {
 public:
  TrainingError(std::size_t epoch, std::size_t batch, const std::string& what)
      : std::runtime_error("epoch " + std::to_string(epoch) + ", batch " +
                           std::to_string(batch) + ": " + what),
        epoch_(epoch),
        batch_(batch) {}
  std::size_t epoch() const { return epoch_; }
  std::size_t batch() const { return batch_; }

 private:
  std::size_t epoch_;
  std::size_t batch_;
};

struct TrainHooks {
  // Replaces dev-set evaluation; receives the 1-based epoch.
  std::function<SpanScores(const NerTagger&, std::size_t)> dev_scorer;
  std::function<void(const EpochRecord&)> on_epoch;
};

struct TrainResult {
  std::vector<EpochRecord> history;
  std::size_t best_epoch = 0;
  Scalar best_dev_f1 = 0;
};

/// Trains in place and leaves the model holding the best-dev parameters
/// (the last epoch when there is no dev data and no scorer).
inline TrainResult train(NerTagger& model, const TrainConfig& cfg,
                         const std::vector<LabeledSentence>& train_data,
                         const std::vector<LabeledSentence>& dev_data = {},
                         const TrainHooks& hooks = {}) {
  cfg.validate();
  if (train_data.empty()) throw ContractError("train: no training sentences");
  std::vector<EncodedSentence> encoded;
  encoded.reserve(train_data.size());
  for (const auto& s : train_data) {
    if (s.tokens.empty()) continue;
    encoded.push_back(model.encode_sentence(s));
  }
  if (encoded.empty()) throw ContractError("train: every training sentence is empty");

  auto& params = model.parameters();
  SgdMomentum opt(params, cfg.momentum);
  std::mt19937_64 order_rng(derive_seed(cfg.seed, "shuffle"));
  model.dropout_rng().seed(derive_seed(cfg.seed, "dropout"));
  ForwardContext ctx{true, &model.dropout_rng()};

  const std::size_t batches = (encoded.size() + cfg.batch_size - 1) / cfg.batch_size;
  const std::size_t total = batches * cfg.epochs;
  std::vector<std::size_t> order(encoded.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  const bool has_dev = static_cast<bool>(hooks.dev_scorer) || !dev_data.empty();
  TrainResult result;
  std::vector<std::vector<Scalar>> best;
  std::size_t step = 0;
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    if (cfg.shuffle) std::shuffle(order.begin(), order.end(), order_rng);
    EpochRecord rec;
    rec.epoch = epoch;
    Scalar loss_sum = 0;
    for (std::size_t b = 0; b < batches; ++b) {
      std::vector<const EncodedSentence*> rows;
      for (std::size_t i = b * cfg.batch_size; i < std::min(encoded.size(), (b + 1) * cfg.batch_size); ++i)
        rows.push_back(&encoded[order[i]]);
      auto batch = make_batch(rows);
      auto loss = model.batch_loss(batch, ctx);
      const Scalar value = loss.item();
      if (!std::isfinite(value)) throw TrainingError(epoch, b, "non-finite loss");
      backward(loss);
      if (cfg.clip_norm > 0) clip_grad_norm(params, cfg.clip_norm);
      rec.lr = triangular_lr(++step, total, cfg.lr, cfg.warmup_fraction);
      opt.step(rec.lr);
      loss_sum += value;
    }
    rec.train_loss = loss_sum / static_cast<Scalar>(batches);
    if (hooks.dev_scorer)
      rec.dev = hooks.dev_scorer(model, epoch);
    else if (!dev_data.empty())
      rec.dev = evaluate(model, dev_data).overall;

    const bool better = !has_dev ? true : (result.best_epoch == 0 || rec.dev.f1 > result.best_dev_f1);
    if (better) {
      result.best_epoch = epoch;
      result.best_dev_f1 = rec.dev.f1;
      best.clear();
      for (const auto& [_, t] : params) best.emplace_back(t.data().begin(), t.data().end());
    }
    result.history.push_back(rec);
    if (hooks.on_epoch) hooks.on_epoch(rec);
  }
  std::size_t i = 0;
  for (auto& [_, t] : params) std::copy(best[i].begin(), best[i].end(), t.data().begin()), ++i;
  return result;
}

}  // namespace tener
