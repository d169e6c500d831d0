#include <filesystem>
#include <fstream>
#include <optional>
#include <random>
#include <sstream>

#include <gtest/gtest.h>

#include "hear/data.hpp"

using namespace hear;

namespace {

Dataset parse(const std::string& text, ConllColumns cols = {}) {
  std::istringstream in(text);
  return parse_conll(in, cols);
}

std::vector<std::string> split(const std::string& s) {
  std::istringstream in(s);
  std::vector<std::string> out;
  for (std::string w; in >> w;) out.push_back(w);
  return out;
}

// Random well-formed BIO sequence over two entity types.
std::vector<std::string> random_bio(std::mt19937& rng, std::size_t n) {
  std::vector<std::string> out;
  std::string open;
  for (std::size_t i = 0; i < n; ++i) {
    const int r = static_cast<int>(rng() % 5);
    if (r == 0) {
      out.push_back("O");
      open.clear();
    } else if (r <= 2 || open.empty()) {
      open = rng() % 2 ? "LOC" : "PER";
      out.push_back("B-" + open);
    } else {
      out.push_back("I-" + open);
    }
  }
  return out;
}

}  // namespace

TEST(ReadConll, TwoTokenSentence) {
  auto d = parse("the O\ncat O\n\n");
  ASSERT_EQ(d.size(), 1u);
  EXPECT_EQ(d[0].tokens, (std::vector<std::string>{"the", "cat"}));
  EXPECT_EQ(d[0].labels, (std::vector<std::string>{"O", "O"}));
}

TEST(ReadConll, SkipsDocstartAndHandlesMissingTrailingBlank) {
  auto d = parse("-DOCSTART- -X- O\n\nEU B-ORG\nrejects O\n\nPeter B-PER\n");
  ASSERT_EQ(d.size(), 2u);
  EXPECT_EQ(d[0].tokens, (std::vector<std::string>{"EU", "rejects"}));
  EXPECT_EQ(d[1].labels, (std::vector<std::string>{"B-PER"}));
}

TEST(ReadConll, SelectsColumns) {
  auto d = parse("EU NNP B-NP B-ORG\nrejects VBZ B-VP O\n", {0, 3});
  ASSERT_EQ(d.size(), 1u);
  EXPECT_EQ(d[0].labels, (std::vector<std::string>{"B-ORG", "O"}));
}

TEST(ReadConll, MissingColumnReportsLine) {
  try {
    parse("the O\ncat\n");
    FAIL() << "expected a parse error";
  } catch (const ParseError& e) {
    EXPECT_EQ(e.line(), 2u);
  }
}

TEST(ReadConll, MissingFileIsIoError) {
  EXPECT_THROW(read_conll("/nonexistent/file.conll"), IoError);
}

TEST(ReadConll, RoundTripWithIndicators) {
  Dataset d = gen_lookahead({50, 1, 9, 0.2, 2, 3});
  std::mt19937 rng(1);
  for (auto& s : d) {
    s.indicators.clear();
    for (std::size_t i = 0; i < s.size(); ++i) s.indicators.push_back(static_cast<int>(rng() % 2));
  }
  const auto path = std::filesystem::temp_directory_path() / "hear_roundtrip.conll";
  {
    std::ofstream out(path);
    write_conll(out, d);
  }
  EXPECT_EQ(read_conll(path.string(), {0, 2, 1}), d);
  std::filesystem::remove(path);
}

TEST(Vocabulary, DenseIdsWithUnknownAtZero) {
  Dataset train = {{{"a", "b", "a"}, {"O", "B-X", "O"}, {}}};
  Vocabulary v = Vocabulary::build(train);
  EXPECT_EQ(v.token_id("<unk>"), 0);
  EXPECT_EQ(v.token_id("a"), 1);
  EXPECT_EQ(v.token_id("b"), 2);
  EXPECT_EQ(v.token_id("never-seen"), Vocabulary::kUnk);
  EXPECT_EQ(v.labels(), (std::vector<std::string>{"B-X", "O"}));
  EXPECT_THROW(v.label_id("I-X"), InputError);
  auto again = Vocabulary::from_tables(v.tokens(), v.labels());
  EXPECT_EQ(again.tokens(), v.tokens());
}

TEST(ConvertScheme, Examples) {
  EXPECT_EQ(convert_scheme(split("B-LOC O"), TagScheme::kBio, TagScheme::kBioes).labels,
            split("S-LOC O"));
  EXPECT_EQ(convert_scheme(split("B-LOC I-LOC I-LOC"), TagScheme::kBio, TagScheme::kBioes).labels,
            split("B-LOC I-LOC E-LOC"));
}

TEST(ConvertScheme, RoundTripOnRandomSequences) {
  std::mt19937 rng(4);
  for (int i = 0; i < 100; ++i) {
    auto bio = random_bio(rng, 1 + rng() % 12);
    auto bioes = convert_scheme(bio, TagScheme::kBio, TagScheme::kBioes);
    EXPECT_EQ(bioes.repairs, 0u);
    auto back = convert_scheme(bioes.labels, TagScheme::kBioes, TagScheme::kBio);
    EXPECT_EQ(back.labels, bio);
    EXPECT_EQ(back.repairs, 0u);
  }
}

TEST(ConvertScheme, RepairsIllFormedInput) {
  auto r = convert_scheme(split("O I-LOC I-LOC"), TagScheme::kBio, TagScheme::kBioes);
  EXPECT_EQ(r.labels, split("O B-LOC E-LOC"));
  EXPECT_EQ(r.repairs, 1u);
}

TEST(GenLookahead, ZeroMarkerProbabilityGivesAllOutside) {
  for (const auto& s : gen_lookahead({20, 1, 10, 0.0, 3, 1}))
    for (const auto& l : s.labels) EXPECT_EQ(l, "O");
}

TEST(GenLookahead, WindowOneExample) {
  EXPECT_EQ(lookahead_labels(split("a ! b"), 1), split("B-PRE B-MRK O"));
}

TEST(GenLookahead, BackwardScanOracle) {
  const std::size_t w = 3;
  Dataset d = gen_lookahead({1000, 1, 20, 0.1, w, 11});
  ASSERT_EQ(d.size(), 1000u);
  for (const auto& s : d) {
    // Scan right to left remembering the nearest marker ahead.
    std::vector<std::string> expect(s.size());
    std::optional<std::size_t> next;
    for (std::size_t i = s.size(); i-- > 0;) {
      if (s.tokens[i] == "!") {
        expect[i] = "B-MRK";
        next = i;
      } else {
        expect[i] = next && *next - i <= w ? "B-PRE" : "O";
      }
    }
    EXPECT_EQ(s.labels, expect);
    for (const auto& t : s.tokens) EXPECT_TRUE(t == "!" || (t.size() == 1 && t[0] >= 'a' && t[0] <= 'z'));
  }
}

TEST(GenLookahead, DeterministicBySeed) {
  LookaheadParams p{200, 2, 12, 0.1, 3, 99};
  EXPECT_EQ(to_conll_string(gen_lookahead(p)), to_conll_string(gen_lookahead(p)));
  LookaheadParams q = p;
  q.seed = 100;
  EXPECT_NE(to_conll_string(gen_lookahead(p)), to_conll_string(gen_lookahead(q)));
}

TEST(GenLookahead, RejectsDegenerateParams) {
  EXPECT_THROW(gen_lookahead({10, 1, 5, 1.0, 3, 1}), ConfigError);
  EXPECT_THROW(gen_lookahead({10, 1, 5, -0.1, 3, 1}), ConfigError);
  EXPECT_THROW(gen_lookahead({10, 1, 5, 0.1, 0, 1}), ConfigError);
  EXPECT_THROW(gen_lookahead({10, 6, 5, 0.1, 3, 1}), ConfigError);
  EXPECT_THROW(gen_lookahead({10, 0, 5, 0.1, 3, 1}), ConfigError);
}

TEST(GenLocal, Examples) {
  EXPECT_EQ(local_labels(split("a a b")), split("O B-DUP O"));
  EXPECT_EQ(local_labels(split("a")), split("O"));
}

TEST(GenLocal, ForwardScanOracleAndDeterminism) {
  LocalParams p{1000, 1, 15, 4, 5};
  Dataset d = gen_local(p);
  for (const auto& s : d) {
    std::string prev;
    for (std::size_t i = 0; i < s.size(); ++i) {
      EXPECT_EQ(s.labels[i], i > 0 && s.tokens[i] == prev ? "B-DUP" : "O");
      prev = s.tokens[i];
    }
  }
  EXPECT_EQ(to_conll_string(d), to_conll_string(gen_local(p)));
}

TEST(Split, EightyTenTen) {
  Dataset d = gen_local({100, 1, 4, 3, 1});
  Splits s = split_dataset(d);
  EXPECT_EQ(s.train.size(), 80u);
  EXPECT_EQ(s.dev.size(), 10u);
  EXPECT_EQ(s.test.size(), 10u);
  EXPECT_EQ(s.train.front(), d.front());
  EXPECT_EQ(s.test.back(), d.back());
}

TEST(TaggedSentence, Validation) {
  EXPECT_THROW((TaggedSentence{{}, {}, {}}.validate()), InputError);
  EXPECT_THROW((TaggedSentence{{"a"}, {"O", "O"}, {}}.validate()), InputError);
  EXPECT_THROW((TaggedSentence{{"a"}, {"O"}, {1, 0}}.validate()), InputError);
  EXPECT_NO_THROW((TaggedSentence{{"a"}, {"O"}, {1}}.validate()));
}
