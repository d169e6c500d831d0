#pragma once

// Waited restarts: at every step either rerun the bidirectional layers over
// the whole prefix, or keep the previous labels and append the new token's
// unidirectional label.

#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "hear/arm.hpp"
#include "hear/encoder.hpp"
#include "hear/errors.hpp"
#include "hear/transcript.hpp"

namespace hear {

struct EveryStep {};

struct FixedK {
  std::size_t k = 1;
};

struct ArmPolicy {
  const ArmModel* model = nullptr;
  std::size_t alpha = 0;
  std::size_t beta = 10;
  bool exclude_latest = false;

  static ArmPolicy from(const ArmModel& m) {
    return {&m, m.config().alpha, m.config().beta, m.config().exclude_latest};
  }
};

struct OracleSchedule {
  std::vector<bool> bits;
};

using RestartPolicy = std::variant<EveryStep, FixedK, ArmPolicy, OracleSchedule>;

// "every", "fixed:k", "oracle" or "arm:<path>". The arm path is returned
// separately because loading it is up to the caller.
struct PolicySpec {
  enum class Kind { kEvery, kFixed, kArm, kOracle } kind = Kind::kEvery;
  std::size_t k = 1;
  std::string arm_path;
};

inline PolicySpec parse_policy_spec(const std::string& s) {
  PolicySpec p;
  if (s == "every") return p;
  if (s == "oracle") {
    p.kind = PolicySpec::Kind::kOracle;
    return p;
  }
  if (s.rfind("fixed:", 0) == 0) {
    const std::string num = s.substr(6);
    if (num.empty() || num.find_first_not_of("0123456789") != std::string::npos)
      throw ConfigError("malformed policy '" + s + "': expected fixed:<k>");
    p.kind = PolicySpec::Kind::kFixed;
    p.k = std::stoul(num);
    if (p.k < 1) throw ConfigError("fixed:k needs k >= 1");
    return p;
  }
  if (s.rfind("arm:", 0) == 0 && s.size() > 4) {
    p.kind = PolicySpec::Kind::kArm;
    p.arm_path = s.substr(4);
    return p;
  }
  throw ConfigError("malformed policy '" + s + "': expected every, fixed:<k>, arm:<path> or oracle");
}

namespace detail {

struct LedgerMark {
  FlopCount total = 0;
  FlopCount bidirectional = 0;
};

inline LedgerMark mark(const FlopLedger& ledger) {
  return {ledger.total(), ledger.total_for("bi.") + ledger.total_for("head.bi")};
}

}  // namespace detail

// Streams one sentence through the encoder under `policy`. The last step
// always restarts.
inline StreamingTranscript run_stream(const HybridEncoder& model, const RestartPolicy& policy,
                                      const EncodedSentence& sentence, std::size_t id = 0,
                                      std::vector<std::string> tokens = {}) {
  const std::size_t n = sentence.tokens.size();
  if (n == 0) throw InputError("cannot stream an empty sentence");
  if (!sentence.labels.empty() && sentence.labels.size() != n)
    throw InputError("label count does not match token count");
  if (!sentence.indicators.empty() && sentence.indicators.size() != n)
    throw InputError("indicator count does not match token count");

  const auto* arm = std::get_if<ArmPolicy>(&policy);
  if (arm) {
    if (!arm->model) detail::contract_fail("arm policy without a model");
    arm->model->check_encoder(model.config());
    if (arm->alpha >= arm->beta) throw ConfigError("alpha must be smaller than beta");
  }
  if (const auto* fk = std::get_if<FixedK>(&policy); fk && fk->k < 1)
    throw ConfigError("fixed:k needs k >= 1");
  if (const auto* os = std::get_if<OracleSchedule>(&policy); os && os->bits.size() != n)
    throw InputError("oracle schedule length does not match the sentence");

  StreamingTranscript tr;
  tr.id = id;
  tr.tokens = std::move(tokens);
  tr.gold = sentence.labels;
  UniState state = model.begin_stream();
  StreamOptions opts;
  if (arm) {
    opts.features = true;
    opts.score_window = arm->model->config().window;
  }
  std::vector<float> arm_state = arm ? arm->model->initial_state() : std::vector<float>{};
  std::vector<bool> history;
  std::vector<int> labels;

  for (std::size_t t = 1; t <= n; ++t) {
    const detail::LedgerMark before = detail::mark(state.ledger);
    const int ind = sentence.indicators.empty() ? 0 : sentence.indicators[t - 1];
    StreamStep step = model.stream_extend(state, sentence.tokens[t - 1], ind, opts);

    bool restart = false;
    if (std::holds_alternative<EveryStep>(policy)) {
      restart = true;
    } else if (const auto* fk = std::get_if<FixedK>(&policy)) {
      restart = t % fk->k == 0;
    } else if (const auto* os = std::get_if<OracleSchedule>(&policy)) {
      restart = os->bits[t - 1];
    } else {
      ArmOutput o = arm_forward(*arm->model, extract_features(step, opts.score_window), arm_state);
      arm_state = std::move(o.state);
      state.ledger.record("arm", 1, arm->model->step_flops());
      restart = postprocess_decision(o.probability, history, arm->alpha, arm->beta,
                                     arm->model->config().tau);
    }
    const bool final_step = t == n;
    if (final_step) restart = true;
    history.push_back(restart);

    if (restart) {
      std::vector<int> bi = model.restart_bidirectional(state);
      if (arm && arm->exclude_latest && !final_step) bi.back() = step.uni_label;
      labels = std::move(bi);
    } else {
      labels.push_back(step.uni_label);
    }

    const detail::LedgerMark after = detail::mark(state.ledger);
    StepRecord rec;
    rec.labels = labels;
    rec.restart = restart;
    rec.flops = after.total - before.total;
    rec.restart_flops = after.bidirectional - before.bidirectional;
    rec.uni_label = step.uni_label;
    tr.steps.push_back(std::move(rec));
  }
  return tr;
}

// ---- schedules from per-prefix predictions ----------------------------------

struct PrefixPredictions {
  std::vector<int> uni;               // uni label of token t, t = 1..n
  std::vector<std::vector<int>> bi;   // bi labels after restarting at t

  std::size_t size() const { return uni.size(); }

  void validate() const {
    if (bi.size() != uni.size()) throw InputError("uni and bi views cover different lengths");
    for (std::size_t t = 0; t < bi.size(); ++t)
      if (bi[t].size() != t + 1)
        throw InputError("bi prediction for prefix " + std::to_string(t + 1) + " has " +
                         std::to_string(bi[t].size()) + " labels");
  }
};

// Reads the views back out of a transcript recorded with a restart at every
// step.
inline PrefixPredictions prefix_predictions(const StreamingTranscript& tr) {
  PrefixPredictions p;
  for (std::size_t t = 0; t < tr.steps.size(); ++t) {
    if (!tr.steps[t].restart)
      throw InputError("transcript lacks the bidirectional prediction for prefix " +
                       std::to_string(t + 1));
    p.uni.push_back(tr.steps[t].uni_label);
    p.bi.push_back(tr.steps[t].labels);
  }
  return p;
}

// pi*_t = 1 iff the bi labels of prefix t match strictly more gold labels
// than the uni labels do.
inline std::vector<bool> greedy_policy_labels(const std::vector<int>& gold,
                                              const PrefixPredictions& views) {
  views.validate();
  if (gold.size() != views.size()) throw InputError("gold and predictions differ in length");
  std::vector<bool> out(gold.size());
  std::size_t uni_hits = 0;
  for (std::size_t t = 0; t < gold.size(); ++t) {
    uni_hits += views.uni[t] == gold[t] ? 1 : 0;
    std::size_t bi_hits = 0;
    for (std::size_t i = 0; i <= t; ++i) bi_hits += views.bi[t][i] == gold[i] ? 1 : 0;
    out[t] = uni_hits < bi_hits;
  }
  return out;
}

// Schedule maximising the number of steps whose emitted prefix equals the
// gold prefix. The final bit is always set. Among equal scores the schedule
// with fewer restarts wins, then the one whose restarts come earlier.
inline std::vector<bool> oracle_schedule(const std::vector<int>& gold,
                                         const PrefixPredictions& views) {
  views.validate();
  const std::size_t n = gold.size();
  if (n == 0) throw InputError("empty sentence");
  if (views.size() != n) throw InputError("gold and predictions differ in length");

  // bi_ok[r]: restarting at r emits the gold prefix (r = 0 is the start).
  std::vector<bool> bi_ok(n + 1, true);
  for (std::size_t r = 1; r <= n; ++r)
    bi_ok[r] = std::equal(views.bi[r - 1].begin(), views.bi[r - 1].end(), gold.begin());
  // uni_run[r]: first position > r whose uni label is wrong (n + 1 if none).
  std::vector<std::size_t> uni_run(n + 1, n + 1);
  for (std::size_t r = n; r-- > 0;)
    uni_run[r] = views.uni[r] != gold[r] ? r + 1 : uni_run[r + 1];

  // Correct copy steps strictly between restarts at r and next.
  auto copy_hits = [&](std::size_t r, std::size_t next) -> std::size_t {
    if (!bi_ok[r]) return 0;
    const std::size_t stop = std::min(next, uni_run[r]);  // exclusive
    return stop > r + 1 ? stop - r - 1 : 0;
  };

  struct Best {
    std::size_t score = 0;
    std::size_t restarts = 0;
    std::size_t next = 0;
  };
  // best[r]: optimum over steps r+1..n given a restart (or the start) at r.
  std::vector<Best> best(n + 1);
  best[n] = {0, 0, 0};
  for (std::size_t r = n; r-- > 0;) {
    bool have = false;
    for (std::size_t next = r + 1; next <= n; ++next) {
      const Best& tail = best[next];
      Best cand{copy_hits(r, next) + (bi_ok[next] ? 1 : 0) + tail.score, tail.restarts + 1, next};
      const bool better = !have || cand.score > best[r].score ||
                          (cand.score == best[r].score && cand.restarts < best[r].restarts);
      if (better) {
        best[r] = cand;
        have = true;
      }
    }
  }
  std::vector<bool> bits(n, false);
  for (std::size_t r = best[0].next; r != 0; r = r == n ? 0 : best[r].next) bits[r - 1] = true;
  return bits;
}

struct ReplayOptions {
  bool exclude_latest = false;
  // Per-step cost added on top of the recorded unidirectional cost, e.g. the
  // restart module's features and forward pass.
  std::vector<FlopCount> extra_flops;
};

// Recomputes emitted labels and costs under another schedule from a
// transcript recorded with a restart at every step.
inline StreamingTranscript replay_transcript(const StreamingTranscript& every,
                                             const std::vector<bool>& schedule,
                                             const ReplayOptions& opts = {}) {
  const std::size_t n = every.steps.size();
  if (n == 0) throw InputError("empty transcript");
  if (schedule.size() != n) throw InputError("schedule length does not match the transcript");
  if (!opts.extra_flops.empty() && opts.extra_flops.size() != n)
    throw InputError("extra cost list does not match the transcript");
  for (std::size_t t = 0; t < n; ++t)
    if (!every.steps[t].restart)
      throw InputError("transcript lacks the bidirectional prediction for prefix " +
                       std::to_string(t + 1));

  StreamingTranscript out;
  out.id = every.id;
  out.tokens = every.tokens;
  out.gold = every.gold;
  std::vector<int> labels;
  for (std::size_t t = 0; t < n; ++t) {
    const StepRecord& src = every.steps[t];
    const bool final_step = t + 1 == n;
    const bool restart = schedule[t] || final_step;
    if (restart) {
      labels = src.labels;
      if (opts.exclude_latest && !final_step) labels.back() = src.uni_label;
    } else {
      labels.push_back(src.uni_label);
    }
    StepRecord rec;
    rec.labels = labels;
    rec.restart = restart;
    rec.uni_label = src.uni_label;
    rec.restart_flops = restart ? src.restart_flops : 0;
    rec.flops = src.flops - src.restart_flops + rec.restart_flops +
                (opts.extra_flops.empty() ? 0 : opts.extra_flops[t]);
    out.steps.push_back(std::move(rec));
  }
  return out;
}

// Closed-form cost of streaming n tokens with a restart at every step.
inline FlopCount every_step_flops(const HybridConfig& c, std::size_t n) {
  const std::uint64_t d = c.d_model, f = c.d_ffn, labels = c.num_labels;
  FlopCount total = 0;
  for (std::uint64_t t = 1; t <= n; ++t) {
    const FlopCount uni = c.uni_kind == UniLayerKind::kGru ? flops::gru_step(d, d)
                                                           : flops::causal_step(t, d, f);
    total += c.uni_layers * uni + flops::linear(1, d, labels);
    total += c.bi_layers * flops::attention_block(t, d, f) + flops::linear(t, d, labels);
  }
  return total;
}

inline std::vector<bool> fixed_k_schedule(std::size_t n, std::size_t k) {
  if (k < 1) throw ConfigError("fixed:k needs k >= 1");
  std::vector<bool> bits(n);
  for (std::size_t t = 1; t <= n; ++t) bits[t - 1] = t % k == 0 || t == n;
  return bits;
}

inline std::vector<bool> restart_flags(const StreamingTranscript& tr) {
  std::vector<bool> out;
  for (const auto& s : tr.steps) out.push_back(s.restart);
  return out;
}

}  // namespace hear
