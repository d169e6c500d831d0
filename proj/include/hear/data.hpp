#pragma once

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <map>
#include <random>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

#include "hear/errors.hpp"
#include "hear/tagging.hpp"

namespace hear {

struct TaggedSentence {
  std::vector<std::string> tokens;
  std::vector<std::string> labels;
  std::vector<int> indicators;  // empty, or one 0/1 flag per token

  std::size_t size() const { return tokens.size(); }

  void validate() const {
    if (tokens.empty()) throw InputError("sentence has no tokens");
    if (labels.size() != tokens.size())
      throw InputError("sentence has " + std::to_string(tokens.size()) +
                       " tokens but " + std::to_string(labels.size()) + " labels");
    if (!indicators.empty() && indicators.size() != tokens.size())
      throw InputError("indicator count does not match token count");
  }

  friend bool operator==(const TaggedSentence&, const TaggedSentence&) = default;
};

using Dataset = std::vector<TaggedSentence>;

// Token and label id tables. Token id 0 is reserved for unknown tokens.
class Vocabulary {
 public:
  static constexpr int kUnk = 0;
  static constexpr const char* kUnkToken = "<unk>";

  Vocabulary() { tokens_.push_back(kUnkToken); token_ids_[kUnkToken] = kUnk; }

  static Vocabulary build(const Dataset& train) {
    Vocabulary v;
    std::vector<std::string> labels;
    for (const auto& s : train) {
      for (const auto& t : s.tokens) v.add_token(t);
      for (const auto& l : s.labels) labels.push_back(l);
    }
    // Sorted label order keeps ids independent of sentence order.
    std::sort(labels.begin(), labels.end());
    labels.erase(std::unique(labels.begin(), labels.end()), labels.end());
    for (const auto& l : labels) v.add_label(l);
    return v;
  }

  static Vocabulary from_tables(const std::vector<std::string>& tokens,
                                const std::vector<std::string>& labels) {
    Vocabulary v;
    if (tokens.empty() || tokens[0] != kUnkToken)
      throw InputError("vocabulary table must start with " + std::string(kUnkToken));
    for (std::size_t i = 1; i < tokens.size(); ++i) v.add_token(tokens[i]);
    for (const auto& l : labels) v.add_label(l);
    return v;
  }

  int add_token(const std::string& t) {
    auto [it, inserted] = token_ids_.try_emplace(t, static_cast<int>(tokens_.size()));
    if (inserted) tokens_.push_back(t);
    return it->second;
  }
  int add_label(const std::string& l) {
    auto [it, inserted] = label_ids_.try_emplace(l, static_cast<int>(labels_.size()));
    if (inserted) labels_.push_back(l);
    return it->second;
  }

  int token_id(const std::string& t) const {
    auto it = token_ids_.find(t);
    return it == token_ids_.end() ? kUnk : it->second;
  }
  int label_id(const std::string& l) const {
    auto it = label_ids_.find(l);
    if (it == label_ids_.end()) throw InputError("unknown label '" + l + "'");
    return it->second;
  }
  bool has_label(const std::string& l) const { return label_ids_.count(l) != 0; }
  const std::string& label(int id) const { return labels_.at(static_cast<std::size_t>(id)); }
  const std::string& token(int id) const { return tokens_.at(static_cast<std::size_t>(id)); }

  std::size_t token_count() const { return tokens_.size(); }
  std::size_t label_count() const { return labels_.size(); }
  const std::vector<std::string>& tokens() const { return tokens_; }
  const std::vector<std::string>& labels() const { return labels_; }

  std::vector<int> encode_tokens(const TaggedSentence& s) const {
    std::vector<int> ids;
    ids.reserve(s.size());
    for (const auto& t : s.tokens) ids.push_back(token_id(t));
    return ids;
  }
  std::vector<int> encode_labels(const std::vector<std::string>& labels) const {
    std::vector<int> ids;
    ids.reserve(labels.size());
    for (const auto& l : labels) ids.push_back(label_id(l));
    return ids;
  }
  std::vector<std::string> decode_labels(const std::vector<int>& ids) const {
    std::vector<std::string> out;
    out.reserve(ids.size());
    for (int id : ids) out.push_back(label(id));
    return out;
  }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> token_ids_;
  std::vector<std::string> labels_;
  std::unordered_map<std::string, int> label_ids_;
};

// ---------------------------------------------------------------------------
// CoNLL column files

struct ConllColumns {
  std::size_t token = 0;
  std::size_t tag = 1;
  int indicator = -1;  // column holding a 0/1 flag, or -1
};

inline Dataset parse_conll(std::istream& in, const ConllColumns& cols = {}) {
  Dataset out;
  TaggedSentence cur;
  std::string line;
  std::size_t lineno = 0;
  const std::size_t need =
      std::max({cols.token, cols.tag,
                cols.indicator < 0 ? std::size_t{0}
                                   : static_cast<std::size_t>(cols.indicator)}) +
      1;
  auto flush = [&] {
    if (!cur.tokens.empty()) out.push_back(std::move(cur));
    cur = {};
  };
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    std::istringstream fields(line);
    std::vector<std::string> parts;
    for (std::string f; fields >> f;) parts.push_back(f);
    if (parts.empty()) {
      flush();
      continue;
    }
    if (parts[0].rfind("-DOCSTART-", 0) == 0) continue;
    if (parts.size() < need)
      throw ParseError("expected at least " + std::to_string(need) +
                           " columns, found " + std::to_string(parts.size()),
                       lineno);
    cur.tokens.push_back(parts[cols.token]);
    cur.labels.push_back(parts[cols.tag]);
    if (cols.indicator >= 0) {
      const auto& f = parts[static_cast<std::size_t>(cols.indicator)];
      if (f != "0" && f != "1")
        throw ParseError("indicator column must be 0 or 1", lineno);
      cur.indicators.push_back(f == "1" ? 1 : 0);
    }
  }
  flush();
  return out;
}

inline Dataset read_conll(const std::string& path, const ConllColumns& cols = {}) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path);
  return parse_conll(in, cols);
}

// Writes "token [indicator] label" lines; a blank line ends each sentence.
inline void write_conll(std::ostream& out, const Dataset& data) {
  for (const auto& s : data) {
    s.validate();
    for (std::size_t i = 0; i < s.size(); ++i) {
      out << s.tokens[i] << ' ';
      if (!s.indicators.empty()) out << s.indicators[i] << ' ';
      out << s.labels[i] << '\n';
    }
    out << '\n';
  }
}

inline std::string to_conll_string(const Dataset& data) {
  std::ostringstream os;
  write_conll(os, data);
  return os.str();
}

// ---------------------------------------------------------------------------
// Scheme conversion

struct SchemeConversion {
  std::vector<std::string> labels;
  std::size_t repairs = 0;
};

inline SchemeConversion convert_scheme(const std::vector<std::string>& labels,
                                       TagScheme from, TagScheme to) {
  SpanExtraction ex = extract_spans(labels, from);
  return {render_spans(ex.spans, labels.size(), to), ex.repairs};
}

// ---------------------------------------------------------------------------
// Synthetic tasks

struct LookaheadParams {
  std::size_t sentences = 1000;
  std::size_t min_length = 4;
  std::size_t max_length = 16;
  double marker_prob = 0.1;
  std::size_t window = 3;
  std::uint64_t seed = 7;
};

struct LocalParams {
  std::size_t sentences = 1000;
  std::size_t min_length = 4;
  std::size_t max_length = 16;
  std::size_t alphabet = 6;
  std::uint64_t seed = 7;
};

inline constexpr const char* kMarker = "!";

namespace detail {

inline std::mt19937_64 sentence_rng(std::uint64_t seed, std::size_t index) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed),
                    static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(index)};
  return std::mt19937_64(seq);
}

inline std::string letter(std::size_t i) {
  return std::string(1, static_cast<char>('a' + i));
}

}  // namespace detail

// Labels a token stream for the lookahead task: markers are B-MRK; a
// non-marker is B-PRE when a marker sits within the next `window` positions.
inline std::vector<std::string> lookahead_labels(const std::vector<std::string>& tokens,
                                                 std::size_t window) {
  const std::size_t n = tokens.size();
  std::vector<std::string> labels(n, "O");
  for (std::size_t i = 0; i < n; ++i) {
    if (tokens[i] == kMarker) {
      labels[i] = "B-MRK";
      continue;
    }
    for (std::size_t j = i + 1; j <= i + window && j < n; ++j)
      if (tokens[j] == kMarker) {
        labels[i] = "B-PRE";
        break;
      }
  }
  return labels;
}

inline Dataset gen_lookahead(const LookaheadParams& p) {
  if (!(p.marker_prob >= 0.0 && p.marker_prob < 1.0))
    throw ConfigError("marker probability must lie in [0, 1)");
  if (p.window < 1) throw ConfigError("lookahead window must be >= 1");
  if (p.min_length < 1 || p.min_length > p.max_length)
    throw ConfigError("invalid sentence length range");
  Dataset out;
  out.reserve(p.sentences);
  for (std::size_t s = 0; s < p.sentences; ++s) {
    auto rng = detail::sentence_rng(p.seed, s);
    std::uniform_int_distribution<std::size_t> len(p.min_length, p.max_length);
    std::uniform_int_distribution<std::size_t> letter(0, 25);
    std::bernoulli_distribution marker(p.marker_prob);
    TaggedSentence sent;
    const std::size_t n = len(rng);
    for (std::size_t i = 0; i < n; ++i) {
      const bool m = marker(rng);
      const std::size_t l = letter(rng);
      sent.tokens.push_back(m ? std::string(kMarker) : detail::letter(l));
    }
    sent.labels = lookahead_labels(sent.tokens, p.window);
    out.push_back(std::move(sent));
  }
  return out;
}

inline std::vector<std::string> local_labels(const std::vector<std::string>& tokens) {
  std::vector<std::string> labels(tokens.size(), "O");
  for (std::size_t i = 1; i < tokens.size(); ++i)
    if (tokens[i] == tokens[i - 1]) labels[i] = "B-DUP";
  return labels;
}

inline Dataset gen_local(const LocalParams& p) {
  if (p.min_length < 1 || p.min_length > p.max_length)
    throw ConfigError("invalid sentence length range");
  if (p.alphabet < 1 || p.alphabet > 26) throw ConfigError("alphabet must be 1..26");
  Dataset out;
  out.reserve(p.sentences);
  for (std::size_t s = 0; s < p.sentences; ++s) {
    auto rng = detail::sentence_rng(p.seed, s);
    std::uniform_int_distribution<std::size_t> len(p.min_length, p.max_length);
    std::uniform_int_distribution<std::size_t> letter(0, p.alphabet - 1);
    TaggedSentence sent;
    const std::size_t n = len(rng);
    for (std::size_t i = 0; i < n; ++i) sent.tokens.push_back(detail::letter(letter(rng)));
    sent.labels = local_labels(sent.tokens);
    out.push_back(std::move(sent));
  }
  return out;
}

struct Splits {
  Dataset train, dev, test;
};

// 80/10/10 by sentence index.
inline Splits split_dataset(const Dataset& all) {
  const std::size_t n = all.size();
  const std::size_t n_train = n * 8 / 10;
  const std::size_t n_dev = n / 10;
  Splits s;
  s.train.assign(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(n_train));
  s.dev.assign(all.begin() + static_cast<std::ptrdiff_t>(n_train),
               all.begin() + static_cast<std::ptrdiff_t>(n_train + n_dev));
  s.test.assign(all.begin() + static_cast<std::ptrdiff_t>(n_train + n_dev), all.end());
  return s;
}

inline nlohmann::json to_json(const LookaheadParams& p) {
  return {{"task", "lookahead"},     {"sentences", p.sentences},
          {"min_length", p.min_length}, {"max_length", p.max_length},
          {"marker_prob", p.marker_prob}, {"window", p.window},
          {"seed", p.seed}};
}

inline nlohmann::json to_json(const LocalParams& p) {
  return {{"task", "local"},          {"sentences", p.sentences},
          {"min_length", p.min_length}, {"max_length", p.max_length},
          {"alphabet", p.alphabet},   {"seed", p.seed}};
}

}  // namespace hear
