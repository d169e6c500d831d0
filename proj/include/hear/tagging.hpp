#pragma once

// Span grammar for BIO / BIOES label sequences.

#include <string>
#include <string_view>
#include <vector>

#include "hear/errors.hpp"

namespace hear {

enum class TagScheme { kBio, kBioes };

inline TagScheme parse_scheme(std::string_view name) {
  if (name == "BIO" || name == "bio") return TagScheme::kBio;
  if (name == "BIOES" || name == "bioes") return TagScheme::kBioes;
  throw ConfigError("unknown tagging scheme '" + std::string(name) + "'");
}

struct Span {
  std::string type;
  std::size_t start = 0;  // inclusive
  std::size_t end = 0;    // inclusive

  friend bool operator==(const Span&, const Span&) = default;
  friend auto operator<=>(const Span&, const Span&) = default;
};

struct SpanExtraction {
  std::vector<Span> spans;
  std::size_t repairs = 0;  // ill-formed transitions that were patched
};

struct ParsedTag {
  char prefix = 'O';
  std::string type;
};

inline ParsedTag parse_tag(std::string_view label) {
  if (label == "O") return {'O', {}};
  if (label.size() < 3 || label[1] != '-')
    throw InputError("label '" + std::string(label) + "' is not O or X-TYPE");
  const char p = label[0];
  if (p != 'B' && p != 'I' && p != 'E' && p != 'S')
    throw InputError("label '" + std::string(label) + "' has unknown prefix");
  return {p, std::string(label.substr(2))};
}

// Ill-formed continuations (I-X without an open X span, E-X likewise, a span
// left open in BIOES) are repaired by treating the token as a span start.
inline SpanExtraction extract_spans(const std::vector<std::string>& labels,
                                    TagScheme scheme) {
  SpanExtraction out;
  bool open = false;
  Span cur;
  auto close = [&](std::size_t end) {
    if (!open) return;
    cur.end = end;
    out.spans.push_back(cur);
    open = false;
  };
  auto start = [&](const std::string& type, std::size_t i) {
    cur = Span{type, i, i};
    open = true;
  };

  for (std::size_t i = 0; i < labels.size(); ++i) {
    const ParsedTag tag = parse_tag(labels[i]);
    const bool bioes = scheme == TagScheme::kBioes;
    if (!bioes && (tag.prefix == 'E' || tag.prefix == 'S'))
      throw InputError("label '" + labels[i] + "' is not valid BIO");
    const bool continues = open && cur.type == tag.type;
    switch (tag.prefix) {
      case 'O':
        if (open && bioes) ++out.repairs;
        if (open) close(i - 1);
        break;
      case 'B':
        if (open && bioes) ++out.repairs;
        if (open) close(i - 1);
        start(tag.type, i);
        break;
      case 'S':
        if (open) {
          ++out.repairs;
          close(i - 1);
        }
        start(tag.type, i);
        close(i);
        break;
      case 'I':
        if (!continues) {
          ++out.repairs;
          if (open) close(i - 1);
          start(tag.type, i);
        }
        break;
      case 'E':
        if (!continues) {
          ++out.repairs;
          if (open) close(i - 1);
          start(tag.type, i);
        }
        close(i);
        break;
    }
  }
  if (open) {
    if (scheme == TagScheme::kBioes) ++out.repairs;
    close(labels.size() - 1);
  }
  return out;
}

// Renders spans over n tokens in the requested scheme.
inline std::vector<std::string> render_spans(const std::vector<Span>& spans,
                                             std::size_t n, TagScheme scheme) {
  std::vector<std::string> labels(n, "O");
  for (const Span& s : spans) {
    if (s.end >= n || s.start > s.end) detail::contract_fail("span out of range");
    for (std::size_t i = s.start; i <= s.end; ++i) {
      char p = 'I';
      if (scheme == TagScheme::kBio) {
        p = i == s.start ? 'B' : 'I';
      } else if (s.start == s.end) {
        p = 'S';
      } else if (i == s.start) {
        p = 'B';
      } else if (i == s.end) {
        p = 'E';
      }
      labels[i] = std::string(1, p) + "-" + s.type;
    }
  }
  return labels;
}

}  // namespace hear
