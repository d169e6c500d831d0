#pragma once

// Epoch loop for the hybrid encoder with best-on-dev checkpointing.

#include <algorithm>
#include <functional>
#include <numeric>
#include <random>
#include <vector>

#include "hear/data.hpp"
#include "hear/encoder.hpp"
#include "hear/metrics.hpp"

namespace hear {

struct EncoderTrainConfig {
  std::size_t epochs = 10;
  std::size_t batch_size = 32;
  float lr = 1e-3f;
  std::uint64_t seed = 7;
};

struct EpochRecord {
  std::size_t epoch = 0;
  double loss_bi = 0.0;
  double loss_uni = 0.0;
  double dev_f1 = 0.0;
};

// Micro chunk F1 of the bidirectional head's labels over full sentences.
inline double offline_f1(const HybridEncoder& model, const std::vector<EncodedSentence>& data,
                         const std::vector<std::string>& label_names,
                         TagScheme scheme = TagScheme::kBio) {
  ChunkCounts c;
  for (const auto& s : data) {
    const auto out = model.offline_forward(s.tokens, s.indicators);
    c += chunk_counts(detail::names_of(argmax_rows(out.bi_logits), label_names),
                      detail::names_of(s.labels, label_names), scheme);
  }
  return c.score().f1;
}

struct EncoderTrainResult {
  std::vector<EpochRecord> log;
  std::size_t best_epoch = 0;
  ParameterSet best_params;
};

// Trains on `train`, scoring dev F1 after every epoch; the parameters of the
// best dev epoch (earliest on ties) are returned and also left in `model`.
inline EncoderTrainResult train_encoder(
    HybridEncoder& model, const std::vector<EncodedSentence>& train,
    const std::vector<EncodedSentence>& dev, const std::vector<std::string>& label_names,
    const EncoderTrainConfig& cfg,
    const std::function<void(const EpochRecord&)>& on_epoch = {}) {
  if (train.empty()) throw InputError("no training sentences");
  if (cfg.batch_size == 0) throw ConfigError("batch size must be >= 1");
  Adam adam(AdamConfig{cfg.lr});
  std::mt19937_64 rng(cfg.seed);
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), 0);
  EncoderTrainResult result;
  double best_f1 = -1.0;
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    EpochRecord rec;
    rec.epoch = epoch;
    std::size_t batches = 0;
    std::vector<EncodedSentence> batch;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      batch.clear();
      for (std::size_t i = start; i < std::min(order.size(), start + cfg.batch_size); ++i)
        batch.push_back(train[order[i]]);
      const StepLosses l = train_step(model, batch, adam);
      rec.loss_bi += l.loss_bi;
      rec.loss_uni += l.loss_uni;
      ++batches;
    }
    rec.loss_bi /= static_cast<double>(batches);
    rec.loss_uni /= static_cast<double>(batches);
    rec.dev_f1 = dev.empty() ? 0.0 : offline_f1(model, dev, label_names);
    result.log.push_back(rec);
    if (on_epoch) on_epoch(rec);
    if (rec.dev_f1 > best_f1) {
      best_f1 = rec.dev_f1;
      result.best_epoch = epoch;
      result.best_params = model.params();
    }
  }
  for (auto& [name, p] : result.best_params) {
    p.grad = Tensor();
    p.adam_m = Tensor();
    p.adam_v = Tensor();
  }
  model.params() = result.best_params;
  return result;
}

}  // namespace hear
