// Acceptance run: prints one PASS/FAIL line per criterion and exits nonzero
// if any criterion fails. Progress goes to stderr.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <map>
#include <random>
#include <sstream>
#include <string>

#include "hear/arm_train.hpp"
#include "hear/gradcheck.hpp"
#include "hear/metrics.hpp"
#include "hear/policy.hpp"
#include "hear/trainer.hpp"

using namespace hear;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::map<int, Outcome> results;

void record(int id, bool pass, std::string detail) {
  results[id] = {pass, std::move(detail)};
  std::fprintf(stderr, "[criterion %d] %s %s\n", id, pass ? "pass" : "FAIL", results[id].detail.c_str());
}

std::string fmt(const char* f, double a) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, a);
  return buf;
}

std::vector<std::string> words(const std::string& s) {
  std::istringstream in(s);
  std::vector<std::string> out;
  for (std::string w; in >> w;) out.push_back(w);
  return out;
}

HybridConfig desk_config(std::size_t u, std::size_t b, std::size_t vocab, std::size_t labels) {
  HybridConfig c;
  c.uni_layers = u;
  c.bi_layers = b;
  c.d_model = 64;
  c.heads = 4;
  c.d_ffn = 128;
  c.vocab_size = vocab;
  c.num_labels = labels;
  c.max_length = 64;
  c.seed = 7;
  return c;
}

EncodedSentence random_sentence(std::mt19937& rng, const HybridConfig& c, std::size_t n) {
  EncodedSentence s;
  for (std::size_t i = 0; i < n; ++i) {
    s.tokens.push_back(static_cast<int>(rng() % c.vocab_size));
    s.labels.push_back(static_cast<int>(rng() % c.num_labels));
  }
  return s;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

// ---- 1 --------------------------------------------------------------------------

void metric_fidelity() {
  const std::vector<std::vector<std::string>> p = {
      words("O"), words("O O"), words("O LOC LOC"), words("O ORG ORG ORG"), words("O ORG ORG ORG LOC")};
  const auto gold = words("O LOC LOC LOC LOC");
  const double eo = edit_overhead(p), rc = relative_correctness(p), em = streaming_em(p, gold);
  record(1, eo == 3.0 / 8.0 && rc == 3.0 / 5.0 && em == 2.0 / 5.0,
         "EO=" + fmt("%.6g", eo) + " RC=" + fmt("%.6g", rc) + " EM=" + fmt("%.6g", em));
}

// ---- 2 --------------------------------------------------------------------------

void unidi_degeneracy() {
  auto c = desk_config(2, 0, 40, 5);
  HybridEncoder model(c);
  std::mt19937 rng(2);
  bool ok = true;
  double worst_eo = 0.0, worst_rc = 1.0;
  for (int i = 0; i < 200; ++i) {
    auto tr = run_stream(model, EveryStep{}, random_sentence(rng, c, 1 + rng() % 32));
    const double eo = edit_overhead(tr.prefixes()), rc = relative_correctness(tr.prefixes());
    ok = ok && eo == 0.0 && rc == 1.0;
    worst_eo = std::max(worst_eo, eo);
    worst_rc = std::min(worst_rc, rc);
  }
  record(2, ok, "200 sentences, max EO=" + fmt("%.6g", worst_eo) + " min RC=" + fmt("%.6g", worst_rc));
}

// ---- 3 --------------------------------------------------------------------------

void cache_equivalence() {
  auto c = desk_config(2, 2, 40, 5);
  HybridEncoder model(c);
  std::mt19937 rng(3);
  double max_diff = 0.0;
  bool labels_ok = true;
  for (int i = 0; i < 100; ++i) {
    auto s = random_sentence(rng, c, 1 + rng() % 32);
    const auto offline = model.offline_forward(s.tokens);
    UniState state = model.begin_stream();
    for (std::size_t t = 0; t < s.tokens.size(); ++t) {
      auto step = model.stream_extend(state, s.tokens[t]);
      for (std::size_t j = 0; j < c.d_model; ++j)
        max_diff = std::max(max_diff, static_cast<double>(std::abs(step.h_uni[j] - offline.h_uni.row(t)[j])));
      std::vector<int> prefix(s.tokens.begin(), s.tokens.begin() + static_cast<long>(t + 1));
      labels_ok = labels_ok && model.restart_bidirectional(state) ==
                                   argmax_rows(model.offline_forward(prefix).bi_logits);
    }
  }
  record(3, max_diff <= 1e-5 && labels_ok,
         "max |h_uni diff|=" + fmt("%.3g", max_diff) + ", restart labels " +
             (labels_ok ? "identical" : "differ"));
}

// ---- 5 --------------------------------------------------------------------------

void gradient_inhibition() {
  auto c = desk_config(2, 2, 40, 5);
  HybridEncoder model(c);
  std::mt19937 rng(5);
  std::vector<EncodedSentence> batch;
  for (int i = 0; i < 4; ++i) batch.push_back(random_sentence(rng, c, 3 + rng() % 10));
  model.params().zero_grad();
  accumulate_gradients(model, batch, LossTerms::kUniOnly);
  std::size_t nonzero = 0;
  bool head_moved = false;
  for (const auto& [name, p] : model.params()) {
    if (!p.has_grad()) continue;
    const bool any = std::any_of(p.grad.values().begin(), p.grad.values().end(),
                                 [](float g) { return g != 0.0f; });
    if (name.rfind("head.uni.", 0) == 0) {
      head_moved = head_moved || any;
    } else if (any) {
      ++nonzero;
    }
  }
  record(5, nonzero == 0 && head_moved,
         std::to_string(nonzero) + " non-uni-head parameters with nonzero gradient");
}

// ---- 6 --------------------------------------------------------------------------

void gradient_correctness() {
  auto c = desk_config(1, 1, 40, 5);
  HybridEncoder model(c);
  std::mt19937 rng(6);
  std::vector<EncodedSentence> batch;
  for (int i = 0; i < 4; ++i) batch.push_back(random_sentence(rng, c, 8));
  auto loss = [&](Graph& g) {
    Var total;
    bool first = true;
    for (const auto& s : batch) {
      auto out = model.build(g, s.tokens, s.indicators, false);
      Var l = g.add(g.softmax_cross_entropy(out.bi_logits, s.labels),
                    g.softmax_cross_entropy(out.uni_logits, s.labels));
      total = first ? l : g.add(total, l);
      first = false;
    }
    return total;
  };
  const auto r = finite_difference_check(loss, model.params(), 64, 1e-3f, 0);
  char buf[256];
  std::snprintf(buf, sizeof buf, "max rel error %.4g (worst %s[%zu]: analytic %.4g, numeric %.4g)",
                r.max_rel_error, r.worst_param.c_str(), r.worst_index, r.worst_analytic,
                r.worst_numeric);
  record(6, r.max_rel_error <= 1e-2, buf);
}

// ---- 7 --------------------------------------------------------------------------

// Streaming EM of a schedule, simulated directly from the per-prefix views.
double simulate_em(const std::vector<int>& gold, const std::vector<int>& uni,
                   const std::vector<std::vector<int>>& bi, const std::vector<bool>& s) {
  std::vector<int> emitted;
  std::size_t hits = 0;
  for (std::size_t t = 0; t < gold.size(); ++t) {
    if (s[t]) {
      emitted = bi[t];
    } else {
      emitted.push_back(uni[t]);
    }
    hits += std::equal(emitted.begin(), emitted.end(), gold.begin());
  }
  return static_cast<double>(hits) / static_cast<double>(gold.size());
}

void oracle_soundness() {
  std::mt19937 rng(7);
  std::size_t agree = 0;
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = 1 + rng() % 8;
    std::vector<int> gold(n);
    for (auto& g : gold) g = static_cast<int>(rng() % 3);
    auto noisy = [&](int g) { return rng() % 3 ? g : static_cast<int>(rng() % 3); };
    PrefixPredictions v;
    for (std::size_t t = 0; t < n; ++t) {
      v.uni.push_back(noisy(gold[t]));
      std::vector<int> row;
      for (std::size_t i = 0; i <= t; ++i) row.push_back(noisy(gold[i]));
      v.bi.push_back(row);
    }
    double best = 0.0;
    for (std::uint32_t mask = 0; mask < (1u << (n - 1)); ++mask) {
      std::vector<bool> s(n);
      for (std::size_t i = 0; i + 1 < n; ++i) s[i] = (mask >> i) & 1u;
      s[n - 1] = true;
      best = std::max(best, simulate_em(gold, v.uni, v.bi, s));
    }
    agree += simulate_em(gold, v.uni, v.bi, oracle_schedule(gold, v)) == best;
  }
  record(7, agree == 200, std::to_string(agree) + "/200 instances match exhaustive search");
}

// ---- 8 --------------------------------------------------------------------------

void flop_monotonicity() {
  bool increasing = true;
  double ratio = 0.0;
  for (std::size_t n : {8u, 16u, 32u, 64u}) {
    FlopCount prev = 0;
    for (std::size_t b = 0; b <= 4; ++b) {
      const FlopCount f = every_step_flops(desk_config(4 - b, b, 40, 5), n);
      if (b > 0 && f <= prev) increasing = false;
      prev = f;
    }
    if (n == 32)
      ratio = static_cast<double>(every_step_flops(desk_config(2, 2, 40, 5), n)) /
              static_cast<double>(every_step_flops(desk_config(0, 4, 40, 5), n));
  }
  record(8, increasing && ratio <= 0.75,
         std::string("strictly increasing in b: ") + (increasing ? "yes" : "no") +
             ", Hybrid/BiDi at length 32 = " + fmt("%.4f", ratio));
}

// ---- 4, 9, 10 -------------------------------------------------------------------

struct PolicySummary {
  double em = 0.0;
  double flops = 0.0;
};

PolicySummary summarize(const std::vector<StreamingTranscript>& trs) {
  PolicySummary s;
  for (const auto& t : trs) {
    s.em += streaming_em(t.prefixes(), t.gold);
    s.flops += static_cast<double>(t.total_flops());
  }
  s.em /= static_cast<double>(trs.size());
  s.flops /= static_cast<double>(trs.size());
  return s;
}

void end_to_end() {
  const auto t0 = std::chrono::steady_clock::now();
  LookaheadParams lp;
  lp.sentences = 6250;
  lp.marker_prob = 0.1;
  lp.window = 3;
  lp.seed = 7;
  const Splits splits = split_dataset(gen_lookahead(lp));
  const Vocabulary vocab = Vocabulary::build(splits.train);
  auto encode = [&](const Dataset& d) {
    std::vector<EncodedSentence> out;
    for (const auto& s : d) out.push_back(encode_sentence(vocab, s));
    return out;
  };
  const auto train = encode(splits.train), dev = encode(splits.dev), test = encode(splits.test);
  std::fprintf(stderr, "lookahead: %zu train / %zu dev / %zu test sentences\n", train.size(),
               dev.size(), test.size());

  std::map<std::string, double> f1;
  std::optional<HybridEncoder> hybrid;
  for (auto [name, u, b] : {std::tuple{"BiDi", 0, 4}, {"UniDi", 4, 0}, {"Hybrid", 2, 2}}) {
    HybridEncoder model(desk_config(u, b, vocab.token_count(), vocab.label_count()));
    auto r = train_encoder(model, train, dev, vocab.labels(), EncoderTrainConfig{},
                           [&](const EpochRecord& e) {
                             std::fprintf(stderr, "  %s epoch %zu: loss_bi %.4f loss_uni %.4f dev F1 %.4f (%.0fs)\n",
                                          name, e.epoch, e.loss_bi, e.loss_uni, e.dev_f1,
                                          seconds_since(t0));
                           });
    f1[name] = 100.0 * r.log[r.best_epoch - 1].dev_f1;
    if (std::string(name) == "Hybrid") hybrid.emplace(std::move(model));
  }

  ArmConfig ac;
  ArmModel arm(ac);
  std::vector<ProbedSentence> probed_train, probed_dev;
  std::vector<ArmExample> examples;
  for (std::size_t i = 0; i < train.size(); ++i) {
    probed_train.push_back(probe_sentence(*hybrid, arm, train[i], i));
    examples.push_back(make_example(probed_train.back()));
  }
  for (std::size_t i = 0; i < dev.size(); ++i) probed_dev.push_back(probe_sentence(*hybrid, arm, dev[i], i));
  train_arm(arm, examples, ArmTrainConfig{}, [&](std::size_t e, double loss) {
    std::fprintf(stderr, "  ARM epoch %zu: bce %.4f (%.0fs)\n", e, loss, seconds_since(t0));
  });
  const auto sel = select_postprocessing(arm, probed_dev);
  arm.config().alpha = sel.best.alpha;
  arm.config().beta = sel.best.beta;
  arm.config().exclude_latest = sel.best.exclude_latest;
  std::fprintf(stderr, "  selected alpha=%zu beta=%zu exclude_latest=%d (dev EM %.4f)\n",
               sel.best.alpha, sel.best.beta, static_cast<int>(sel.best.exclude_latest),
               sel.best.streaming_em);

  // Test-split transcripts for every policy.
  std::map<std::string, std::vector<StreamingTranscript>> runs;
  for (std::size_t i = 0; i < test.size(); ++i) {
    const auto& s = test[i];
    auto every = run_stream(*hybrid, EveryStep{}, s, i);
    runs["oracle"].push_back(run_stream(
        *hybrid, OracleSchedule{oracle_schedule(s.labels, prefix_predictions(every))}, s, i));
    runs["every"].push_back(std::move(every));
    for (std::size_t k : {2u, 3u, 5u, 8u})
      runs["fixed:" + std::to_string(k)].push_back(run_stream(*hybrid, FixedK{k}, s, i));
    runs["arm"].push_back(run_stream(*hybrid, ArmPolicy::from(arm), s, i));
  }

  std::size_t parity_failures = 0;
  for (std::size_t i = 0; i < test.size(); ++i) {
    const auto& ref = runs["every"][i].final_labels();
    for (const auto& [name, trs] : runs) parity_failures += trs[i].final_labels() != ref;
  }
  record(4, parity_failures == 0,
         std::to_string(runs.size()) + " policies x " + std::to_string(test.size()) +
             " test sentences, " + std::to_string(parity_failures) + " final-label mismatches");

  std::map<std::string, PolicySummary> sum;
  for (const auto& [name, trs] : runs) {
    sum[name] = summarize(trs);
    std::fprintf(stderr, "  test %-8s EM %.4f  FLOPs/example %.0f\n", name.c_str(), sum[name].em,
                 sum[name].flops);
  }
  double best_fixed = 0.0;
  std::string best_fixed_name;
  for (std::size_t k : {2u, 3u, 5u, 8u}) {
    const auto& s = sum["fixed:" + std::to_string(k)];
    if (s.em > best_fixed) {
      best_fixed = s.em;
      best_fixed_name = "fixed:" + std::to_string(k);
    }
  }
  const bool a = f1["BiDi"] - f1["UniDi"] >= 5.0;
  const bool b = std::abs(f1["BiDi"] - f1["Hybrid"]) <= 2.0;
  const double flop_ratio = sum["arm"].flops / sum["every"].flops;
  const bool c = sum["arm"].em >= sum["every"].em && flop_ratio <= 0.8;
  const bool d = sum["arm"].em >= best_fixed;
  char buf[512];
  std::snprintf(buf, sizeof buf,
                "(a) BiDi %.2f vs UniDi %.2f F1 %s; (b) Hybrid %.2f %s; (c) ARM EM %.4f vs every "
                "%.4f, FLOP ratio %.3f %s; (d) best fixed %s EM %.4f %s; %.0fs",
                f1["BiDi"], f1["UniDi"], a ? "ok" : "FAIL", f1["Hybrid"], b ? "ok" : "FAIL",
                sum["arm"].em, sum["every"].em, flop_ratio, c ? "ok" : "FAIL",
                best_fixed_name.c_str(), best_fixed, d ? "ok" : "FAIL", seconds_since(t0));
  record(9, a && b && c && d, buf);

  std::size_t lint_failures = 0;
  std::string first_problem;
  for (const auto& tr : runs["arm"]) {
    const auto r = lint_restarts(restart_flags(tr), arm.config().alpha, arm.config().beta);
    if (!r.ok) {
      ++lint_failures;
      if (first_problem.empty()) first_problem = r.problems.front();
    }
  }
  record(10, lint_failures == 0,
         std::to_string(runs["arm"].size()) + " ARM transcripts, " +
             std::to_string(lint_failures) + " linter failures" +
             (first_problem.empty() ? "" : " (" + first_problem + ")"));
}

void guarded(int id, const std::function<void()>& body) {
  try {
    body();
  } catch (const std::exception& e) {
    record(id, false, std::string("exception: ") + e.what());
  }
}

}  // namespace

int main() {
  guarded(1, metric_fidelity);
  guarded(2, unidi_degeneracy);
  guarded(3, cache_equivalence);
  guarded(5, gradient_inhibition);
  guarded(6, gradient_correctness);
  guarded(7, oracle_soundness);
  guarded(8, flop_monotonicity);
  try {
    end_to_end();
  } catch (const std::exception& e) {
    for (int id : {4, 9, 10})
      if (!results.count(id)) record(id, false, std::string("exception: ") + e.what());
  }
  int failed = 0;
  for (int id = 1; id <= 10; ++id) {
    const auto it = results.find(id);
    const bool pass = it != results.end() && it->second.pass;
    failed += !pass;
    std::printf("criterion %d: %s - %s\n", id, pass ? "PASS" : "FAIL",
                it == results.end() ? "not run" : it->second.detail.c_str());
  }
  std::fflush(stdout);
  return failed == 0 ? 0 : 1;
}
