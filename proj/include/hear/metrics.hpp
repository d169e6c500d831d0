#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "hear/errors.hpp"
#include "hear/tagging.hpp"
#include "hear/transcript.hpp"

namespace hear {

// ---- streaming metrics ------------------------------------------------------
// A stream is the sequence of label prefixes ŷ_1..ŷ_n with |ŷ_t| = t.

template <class L>
struct LabelEdit {
  std::size_t position = 0;
  std::optional<L> old_label;  // empty when the token first appears
  L new_label{};

  friend bool operator==(const LabelEdit&, const LabelEdit&) = default;
};

template <class L>
using EditLog = std::vector<std::vector<LabelEdit<L>>>;

namespace detail {

template <class L>
void check_prefixes(const std::vector<std::vector<L>>& prefixes) {
  if (prefixes.empty()) throw InputError("stream has no timesteps");
  for (std::size_t t = 0; t < prefixes.size(); ++t)
    if (prefixes[t].size() != t + 1)
      throw InputError("prefix " + std::to_string(t + 1) + " has " +
                       std::to_string(prefixes[t].size()) + " labels");
}

}  // namespace detail

template <class L>
EditLog<L> edit_log(const std::vector<std::vector<L>>& prefixes) {
  detail::check_prefixes(prefixes);
  EditLog<L> log(prefixes.size());
  for (std::size_t t = 0; t < prefixes.size(); ++t) {
    for (std::size_t i = 0; i < t; ++i)
      if (prefixes[t][i] != prefixes[t - 1][i])
        log[t].push_back({i, prefixes[t - 1][i], prefixes[t][i]});
    log[t].push_back({t, std::nullopt, prefixes[t][t]});
  }
  return log;
}

struct EditCounts {
  std::size_t total = 0;
  std::size_t unnecessary = 0;
};

// An edit is unnecessary when the label it writes is not the token's final
// label.
template <class L>
EditCounts count_edits(const std::vector<std::vector<L>>& prefixes) {
  const auto log = edit_log(prefixes);
  const auto& last = prefixes.back();
  EditCounts c;
  for (const auto& step : log)
    for (const auto& e : step) {
      ++c.total;
      if (e.new_label != last[e.position]) ++c.unnecessary;
    }
  return c;
}

template <class L>
double edit_overhead(const std::vector<std::vector<L>>& prefixes) {
  const EditCounts c = count_edits(prefixes);
  return static_cast<double>(c.unnecessary) / static_cast<double>(c.total);
}

template <class L>
double relative_correctness(const std::vector<std::vector<L>>& prefixes) {
  detail::check_prefixes(prefixes);
  const auto& last = prefixes.back();
  std::size_t hits = 0;
  for (const auto& p : prefixes)
    if (std::equal(p.begin(), p.end(), last.begin())) ++hits;
  return static_cast<double>(hits) / static_cast<double>(prefixes.size());
}

template <class L>
double streaming_em(const std::vector<std::vector<L>>& prefixes, const std::vector<L>& gold) {
  detail::check_prefixes(prefixes);
  if (gold.size() != prefixes.size())
    throw InputError("gold has " + std::to_string(gold.size()) + " labels for a stream of " +
                     std::to_string(prefixes.size()));
  std::size_t hits = 0;
  for (const auto& p : prefixes)
    if (std::equal(p.begin(), p.end(), gold.begin())) ++hits;
  return static_cast<double>(hits) / static_cast<double>(prefixes.size());
}

// ---- chunk F1 ---------------------------------------------------------------

struct ChunkScore {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
};

struct ChunkCounts {
  std::size_t predicted = 0;
  std::size_t gold = 0;
  std::size_t matched = 0;

  ChunkCounts& operator+=(const ChunkCounts& o) {
    predicted += o.predicted;
    gold += o.gold;
    matched += o.matched;
    return *this;
  }

  ChunkScore score() const {
    if (predicted == 0 && gold == 0) return {1.0, 1.0, 1.0};
    ChunkScore s;
    s.precision = predicted ? static_cast<double>(matched) / static_cast<double>(predicted) : 0.0;
    s.recall = gold ? static_cast<double>(matched) / static_cast<double>(gold) : 0.0;
    s.f1 = s.precision + s.recall > 0.0
               ? 2.0 * s.precision * s.recall / (s.precision + s.recall)
               : 0.0;
    return s;
  }
};

inline ChunkCounts chunk_counts(const std::vector<std::string>& pred,
                                const std::vector<std::string>& gold, TagScheme scheme) {
  if (pred.size() != gold.size())
    throw InputError("prediction and gold lengths differ");
  const auto p = extract_spans(pred, scheme).spans;
  const auto g = extract_spans(gold, scheme).spans;
  std::set<Span> gold_set(g.begin(), g.end());
  ChunkCounts c{p.size(), g.size(), 0};
  for (const auto& s : p) c.matched += gold_set.count(s);
  return c;
}

inline ChunkScore chunk_f1(const std::vector<std::string>& pred,
                           const std::vector<std::string>& gold, TagScheme scheme) {
  return chunk_counts(pred, gold, scheme).score();
}

inline ChunkScore chunk_f1(const std::vector<std::string>& pred,
                           const std::vector<std::string>& gold, std::string_view scheme) {
  return chunk_f1(pred, gold, parse_scheme(scheme));
}

// Micro-averaged over a corpus.
inline ChunkScore corpus_chunk_f1(const std::vector<std::vector<std::string>>& pred,
                                  const std::vector<std::vector<std::string>>& gold,
                                  TagScheme scheme) {
  if (pred.size() != gold.size()) throw InputError("prediction and gold corpus sizes differ");
  ChunkCounts c;
  for (std::size_t i = 0; i < pred.size(); ++i) c += chunk_counts(pred[i], gold[i], scheme);
  return c.score();
}

// ---- reports ----------------------------------------------------------------

struct SentenceMetrics {
  double streaming_em = 0.0;
  double eo = 0.0;
  double rc = 0.0;
  FlopCount flops = 0;
  std::size_t restarts = 0;
};

inline SentenceMetrics sentence_metrics(const StreamingTranscript& tr) {
  tr.validate();
  const auto prefixes = tr.prefixes();
  return {streaming_em(prefixes, tr.gold), edit_overhead(prefixes),
          relative_correctness(prefixes), tr.total_flops(), tr.restarts()};
}

struct Report {
  double offline_f1 = 0.0;
  double streaming_em = 0.0;
  double eo = 0.0;
  double rc = 0.0;
  double gflops_per_example = 0.0;
  double restarts_per_example = 0.0;
  std::size_t n_sentences = 0;

  friend bool operator==(const Report&, const Report&) = default;
};

// Rounds to 6 significant digits, the precision reports are stored with.
inline double round_sig6(double x) {
  if (!std::isfinite(x) || x == 0.0) return x;
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6g", x);
  return std::strtod(buf, nullptr);
}

inline Report rounded(Report r) {
  r.offline_f1 = round_sig6(r.offline_f1);
  r.streaming_em = round_sig6(r.streaming_em);
  r.eo = round_sig6(r.eo);
  r.rc = round_sig6(r.rc);
  r.gflops_per_example = round_sig6(r.gflops_per_example);
  r.restarts_per_example = round_sig6(r.restarts_per_example);
  return r;
}

// Streaming EM, EO and RC are macro-averaged over sentences; F1 is micro
// over the final labels. `label_names` maps label ids to strings.
inline Report aggregate_report(const std::vector<StreamingTranscript>& transcripts,
                               const std::vector<std::string>& label_names,
                               TagScheme scheme = TagScheme::kBio) {
  if (transcripts.empty()) throw InputError("report over an empty transcript set");
  Report r;
  ChunkCounts chunks;
  double flops = 0.0, restarts = 0.0;
  for (const auto& tr : transcripts) {
    const SentenceMetrics m = sentence_metrics(tr);
    r.streaming_em += m.streaming_em;
    r.eo += m.eo;
    r.rc += m.rc;
    flops += static_cast<double>(m.flops);
    restarts += static_cast<double>(m.restarts);
    chunks += chunk_counts(detail::names_of(tr.final_labels(), label_names),
                           detail::names_of(tr.gold, label_names), scheme);
  }
  const double n = static_cast<double>(transcripts.size());
  r.offline_f1 = chunks.score().f1;
  r.streaming_em /= n;
  r.eo /= n;
  r.rc /= n;
  r.gflops_per_example = flops / n / 1e9;
  r.restarts_per_example = restarts / n;
  r.n_sentences = transcripts.size();
  return r;
}

inline nlohmann::json to_json(const Report& r) {
  const Report q = rounded(r);
  return {{"offline_f1", q.offline_f1},
          {"streaming_em", q.streaming_em},
          {"eo", q.eo},
          {"rc", q.rc},
          {"gflops_per_example", q.gflops_per_example},
          {"restarts_per_example", q.restarts_per_example},
          {"n_sentences", q.n_sentences}};
}

inline Report report_from_json(const nlohmann::json& j) {
  Report r;
  try {
    r.offline_f1 = j.at("offline_f1").get<double>();
    r.streaming_em = j.at("streaming_em").get<double>();
    r.eo = j.at("eo").get<double>();
    r.rc = j.at("rc").get<double>();
    r.gflops_per_example = j.at("gflops_per_example").get<double>();
    r.restarts_per_example = j.at("restarts_per_example").get<double>();
    r.n_sentences = j.at("n_sentences").get<std::size_t>();
  } catch (const nlohmann::json::exception& e) {
    throw InputError(std::string("malformed report: ") + e.what());
  }
  return r;
}

}  // namespace hear
