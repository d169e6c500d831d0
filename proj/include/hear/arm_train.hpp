#pragma once

// Training the restart module against the greedy policy and tuning its
// alpha/beta/exclude_latest postprocessing on held-out sentences.

#include <algorithm>
#include <functional>
#include <numeric>
#include <random>
#include <vector>

#include "hear/arm.hpp"
#include "hear/encoder.hpp"
#include "hear/metrics.hpp"
#include "hear/policy.hpp"

namespace hear {

// One sentence streamed with a restart at every step and the restart
// module's features recorded alongside.
struct ProbedSentence {
  StreamingTranscript every;                 // costs exclude feature work
  std::vector<std::vector<float>> features;  // f_t per step
  std::vector<FlopCount> arm_flops;          // feature + module cost per step
};

inline ProbedSentence probe_sentence(const HybridEncoder& encoder, const ArmModel& arm,
                                     const EncodedSentence& sentence, std::size_t id = 0,
                                     std::vector<std::string> tokens = {}) {
  arm.check_encoder(encoder.config());
  const std::size_t n = sentence.tokens.size();
  if (n == 0) throw InputError("cannot stream an empty sentence");
  ProbedSentence out;
  out.every.id = id;
  out.every.tokens = std::move(tokens);
  out.every.gold = sentence.labels;
  UniState state = encoder.begin_stream();
  StreamOptions opts;
  opts.features = true;
  opts.score_window = arm.config().window;
  for (std::size_t t = 1; t <= n; ++t) {
    const FlopCount total0 = state.ledger.total();
    const FlopCount feat0 = state.ledger.total_for("features.");
    const FlopCount bi0 = state.ledger.total_for("bi.") + state.ledger.total_for("head.bi");
    const int ind = sentence.indicators.empty() ? 0 : sentence.indicators[t - 1];
    StreamStep step = encoder.stream_extend(state, sentence.tokens[t - 1], ind, opts);
    out.features.push_back(extract_features(step, opts.score_window));
    StepRecord rec;
    rec.labels = encoder.restart_bidirectional(state);
    rec.restart = true;
    rec.uni_label = step.uni_label;
    const FlopCount feat = state.ledger.total_for("features.") - feat0;
    rec.restart_flops =
        state.ledger.total_for("bi.") + state.ledger.total_for("head.bi") - bi0;
    rec.flops = state.ledger.total() - total0 - feat;
    out.every.steps.push_back(std::move(rec));
    out.arm_flops.push_back(feat + arm.step_flops());
  }
  return out;
}

// Greedy restart labels with the final step set.
inline std::vector<int> arm_targets(const StreamingTranscript& every) {
  const auto bits = greedy_policy_labels(every.gold, prefix_predictions(every));
  std::vector<int> out(bits.begin(), bits.end());
  out.back() = 1;
  return out;
}

struct ArmExample {
  std::vector<std::vector<float>> features;
  std::vector<int> targets;
};

inline ArmExample make_example(const ProbedSentence& p) {
  return {p.features, arm_targets(p.every)};
}

struct ArmTrainConfig {
  std::size_t epochs = 5;
  std::size_t batch_size = 16;
  float lr = 1e-3f;
  std::uint64_t seed = 7;
};

// Mean BCE over the batch's timesteps; accumulates gradients into `model`.
inline double arm_accumulate_gradients(ArmModel& model, std::span<const ArmExample* const> batch) {
  std::size_t total = 0;
  for (const auto* ex : batch) total += ex->targets.size();
  if (total == 0) throw InputError("empty restart-module batch");
  double loss_sum = 0.0;
  auto& p = model.params();
  for (const auto* ex : batch) {
    const std::size_t n = ex->targets.size();
    if (ex->features.size() != n) throw InputError("feature and target counts differ");
    Graph g(true);
    Var wx = g.param(p.at("gru.wx")), wh = g.param(p.at("gru.wh"));
    Var bx = g.param(p.at("gru.bx")), bh = g.param(p.at("gru.bh"));
    Var h = g.constant(Tensor({1, model.config().hidden}));
    std::vector<Var> states;
    for (std::size_t t = 0; t < n; ++t) {
      Var x = g.constant(Tensor({1, ex->features[t].size()}, ex->features[t]));
      h = g.gru_cell(x, h, wx, wh, bx, bh);
      states.push_back(h);
    }
    Var logits = g.linear(g.stack_rows(states), g.param(p.at("out.w")), g.param(p.at("out.b")));
    Var loss = g.bce_with_logits(logits, ex->targets);
    const float w = static_cast<float>(n) / static_cast<float>(total);
    loss_sum += g.scalar(loss) * w;
    g.backward(g.scale(loss, w));
  }
  if (!std::isfinite(loss_sum)) throw NumericError("restart-module loss is not finite");
  return loss_sum;
}

struct ArmTrainLog {
  std::vector<double> epoch_loss;
};

// Adam on BCE against the greedy labels. The encoder is not touched; the
// examples were computed from it beforehand.
inline ArmTrainLog train_arm(ArmModel& model, const std::vector<ArmExample>& data,
                             const ArmTrainConfig& cfg,
                             const std::function<void(std::size_t, double)>& on_epoch = {}) {
  if (data.empty()) throw InputError("no sentences to train the restart module on");
  if (cfg.batch_size == 0) throw ConfigError("batch size must be >= 1");
  Adam adam(AdamConfig{cfg.lr});
  std::mt19937_64 rng(cfg.seed);
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);
  ArmTrainLog log;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double sum = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      std::vector<const ArmExample*> batch;
      for (std::size_t i = start; i < std::min(order.size(), start + cfg.batch_size); ++i)
        batch.push_back(&data[order[i]]);
      model.params().zero_grad();
      sum += arm_accumulate_gradients(model, batch);
      ++batches;
      adam.step(model.params());
    }
    log.epoch_loss.push_back(sum / static_cast<double>(batches));
    if (on_epoch) on_epoch(epoch + 1, log.epoch_loss.back());
  }
  return log;
}

// ---- intrinsic evaluation ---------------------------------------------------

struct BinaryScore {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
};

// F1 of the restart class.
inline BinaryScore restart_f1(const std::vector<int>& predicted, const std::vector<int>& gold) {
  if (predicted.size() != gold.size()) throw InputError("prediction and label counts differ");
  std::size_t tp = 0, fp = 0, fn = 0;
  for (std::size_t i = 0; i < gold.size(); ++i) {
    if (predicted[i] && gold[i]) ++tp;
    if (predicted[i] && !gold[i]) ++fp;
    if (!predicted[i] && gold[i]) ++fn;
  }
  BinaryScore s;
  if (tp + fp + fn == 0) return {1.0, 1.0, 1.0};
  s.precision = tp + fp ? static_cast<double>(tp) / static_cast<double>(tp + fp) : 0.0;
  s.recall = tp + fn ? static_cast<double>(tp) / static_cast<double>(tp + fn) : 0.0;
  s.f1 = s.precision + s.recall > 0 ? 2 * s.precision * s.recall / (s.precision + s.recall) : 0.0;
  return s;
}

// Thresholded raw probabilities (no alpha/beta) against the greedy labels,
// pooled over all timesteps.
inline BinaryScore arm_intrinsic_f1(const ArmModel& model, const std::vector<ArmExample>& data) {
  std::vector<int> pred, gold;
  for (const auto& ex : data) {
    for (float p : arm_probabilities(model, ex.features)) pred.push_back(p >= model.config().tau);
    gold.insert(gold.end(), ex.targets.begin(), ex.targets.end());
  }
  return restart_f1(pred, gold);
}

// Restart-class F1 of always predicting the more frequent label.
inline BinaryScore majority_baseline_f1(const std::vector<ArmExample>& data) {
  std::vector<int> gold;
  for (const auto& ex : data) gold.insert(gold.end(), ex.targets.begin(), ex.targets.end());
  const std::size_t ones = static_cast<std::size_t>(std::count(gold.begin(), gold.end(), 1));
  const int majority = 2 * ones > gold.size() ? 1 : 0;
  return restart_f1(std::vector<int>(gold.size(), majority), gold);
}

// ---- postprocessing selection ----------------------------------------------

inline constexpr std::size_t kWindowGrid[] = {0, 1, 2, 3, 5, 10};

struct GridPoint {
  std::size_t alpha = 0;
  std::size_t beta = 1;
  bool exclude_latest = false;
  double streaming_em = 0.0;
  double flops_per_example = 0.0;
};

// Transcripts the module would produce with the given settings, rebuilt
// from probed sentences and precomputed probabilities.
inline std::vector<StreamingTranscript> arm_transcripts(
    const std::vector<ProbedSentence>& probed, const std::vector<std::vector<float>>& probs,
    std::size_t alpha, std::size_t beta, bool exclude_latest, float tau) {
  std::vector<StreamingTranscript> out;
  out.reserve(probed.size());
  for (std::size_t i = 0; i < probed.size(); ++i) {
    const auto schedule = postprocess_sequence(probs[i], alpha, beta, tau);
    out.push_back(replay_transcript(probed[i].every, schedule,
                                    {exclude_latest, probed[i].arm_flops}));
  }
  return out;
}

struct GridSelection {
  GridPoint best;
  std::vector<GridPoint> grid;
};

// Highest mean Streaming EM; ties go to lower mean cost, then grid order.
inline GridSelection select_postprocessing(const ArmModel& model,
                                           const std::vector<ProbedSentence>& dev) {
  if (dev.empty()) throw InputError("no sentences to tune postprocessing on");
  std::vector<std::vector<float>> probs;
  for (const auto& p : dev) probs.push_back(arm_probabilities(model, p.features));
  GridSelection sel;
  bool have = false;
  for (std::size_t alpha : kWindowGrid)
    for (std::size_t beta : kWindowGrid) {
      if (alpha >= beta) continue;
      for (bool excl : {false, true}) {
        const auto trs = arm_transcripts(dev, probs, alpha, beta, excl, model.config().tau);
        GridPoint g{alpha, beta, excl, 0.0, 0.0};
        for (const auto& tr : trs) {
          g.streaming_em += streaming_em(tr.prefixes(), tr.gold);
          g.flops_per_example += static_cast<double>(tr.total_flops());
        }
        g.streaming_em /= static_cast<double>(trs.size());
        g.flops_per_example /= static_cast<double>(trs.size());
        sel.grid.push_back(g);
        if (!have || g.streaming_em > sel.best.streaming_em ||
            (g.streaming_em == sel.best.streaming_em &&
             g.flops_per_example < sel.best.flops_per_example)) {
          sel.best = g;
          have = true;
        }
      }
    }
  return sel;
}

}  // namespace hear
