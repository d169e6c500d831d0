#pragma once

#include <cstdint>
#include <istream>
#include <ostream>
#include <string>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

#include "hear/errors.hpp"
#include "hear/flops.hpp"

namespace hear {

// One timestep of a stream: the full label sequence emitted after reading
// token t, whether the bidirectional layers were rerun, and what it cost.
struct StepRecord {
  std::vector<int> labels;
  bool restart = false;
  FlopCount flops = 0;          // everything charged at this step
  FlopCount restart_flops = 0;  // the bidirectional share of `flops`
  int uni_label = 0;            // the unidirectional label of token t

  friend bool operator==(const StepRecord&, const StepRecord&) = default;
};

struct StreamingTranscript {
  std::size_t id = 0;
  std::vector<std::string> tokens;
  std::vector<int> gold;
  std::vector<StepRecord> steps;

  std::size_t size() const { return steps.size(); }
  const std::vector<int>& final_labels() const { return steps.back().labels; }

  FlopCount total_flops() const {
    FlopCount n = 0;
    for (const auto& s : steps) n += s.flops;
    return n;
  }

  std::size_t restarts() const {
    std::size_t n = 0;
    for (const auto& s : steps) n += s.restart ? 1 : 0;
    return n;
  }

  std::vector<std::vector<int>> prefixes() const {
    std::vector<std::vector<int>> out;
    out.reserve(steps.size());
    for (const auto& s : steps) out.push_back(s.labels);
    return out;
  }

  void validate() const {
    if (steps.empty()) throw InputError("transcript has no steps");
    for (std::size_t t = 0; t < steps.size(); ++t)
      if (steps[t].labels.size() != t + 1)
        throw InputError("transcript step " + std::to_string(t + 1) + " has " +
                         std::to_string(steps[t].labels.size()) + " labels");
    if (!steps.back().restart) throw InputError("transcript does not end with a restart");
    if (!gold.empty() && gold.size() != steps.size())
      throw InputError("gold label count does not match transcript length");
  }

  friend bool operator==(const StreamingTranscript&, const StreamingTranscript&) = default;
};

// ---- JSON lines -------------------------------------------------------------

namespace detail {

inline std::vector<std::string> names_of(const std::vector<int>& ids,
                                         const std::vector<std::string>& table) {
  std::vector<std::string> out;
  out.reserve(ids.size());
  for (int id : ids) {
    if (id < 0 || static_cast<std::size_t>(id) >= table.size())
      throw InputError("label id " + std::to_string(id) + " has no name");
    out.push_back(table[static_cast<std::size_t>(id)]);
  }
  return out;
}

inline std::vector<int> ids_of(const std::vector<std::string>& names,
                               const std::unordered_map<std::string, int>& index) {
  std::vector<int> out;
  out.reserve(names.size());
  for (const auto& n : names) {
    auto it = index.find(n);
    if (it == index.end()) throw InputError("unknown label '" + n + "' in transcript");
    out.push_back(it->second);
  }
  return out;
}

}  // namespace detail

inline nlohmann::json transcript_to_json(const StreamingTranscript& tr,
                                         const std::vector<std::string>& labels) {
  nlohmann::json steps = nlohmann::json::array();
  for (const auto& s : tr.steps) {
    steps.push_back({{"labels", detail::names_of(s.labels, labels)},
                     {"restart", s.restart},
                     {"flops", s.flops},
                     {"restart_flops", s.restart_flops},
                     {"uni", detail::names_of({s.uni_label}, labels)[0]}});
  }
  return {{"id", tr.id},
          {"tokens", tr.tokens},
          {"gold", detail::names_of(tr.gold, labels)},
          {"steps", std::move(steps)}};
}

inline StreamingTranscript transcript_from_json(const nlohmann::json& j,
                                                const std::vector<std::string>& labels) {
  std::unordered_map<std::string, int> index;
  for (std::size_t i = 0; i < labels.size(); ++i) index[labels[i]] = static_cast<int>(i);
  StreamingTranscript tr;
  try {
    tr.id = j.at("id").get<std::size_t>();
    tr.tokens = j.at("tokens").get<std::vector<std::string>>();
    tr.gold = detail::ids_of(j.at("gold").get<std::vector<std::string>>(), index);
    for (const auto& s : j.at("steps")) {
      StepRecord r;
      r.labels = detail::ids_of(s.at("labels").get<std::vector<std::string>>(), index);
      r.restart = s.at("restart").get<bool>();
      r.flops = s.at("flops").get<FlopCount>();
      r.restart_flops = s.at("restart_flops").get<FlopCount>();
      r.uni_label = detail::ids_of({s.at("uni").get<std::string>()}, index)[0];
      tr.steps.push_back(std::move(r));
    }
  } catch (const nlohmann::json::exception& e) {
    throw InputError(std::string("malformed transcript: ") + e.what());
  }
  tr.validate();
  return tr;
}

inline void write_transcripts(std::ostream& out,
                              const std::vector<StreamingTranscript>& transcripts,
                              const std::vector<std::string>& labels) {
  for (const auto& tr : transcripts) out << transcript_to_json(tr, labels).dump() << '\n';
}

inline std::vector<StreamingTranscript> read_transcripts(std::istream& in,
                                                         const std::vector<std::string>& labels) {
  std::vector<StreamingTranscript> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(std::string("transcript line is not JSON: ") + e.what(), line_no);
    }
    out.push_back(transcript_from_json(j, labels));
  }
  return out;
}

}  // namespace hear
