#pragma once

// Flat JSON run configuration shared by the command-line tools.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <set>
#include <string>

#include <nlohmann/json.hpp>

#include "hear/arm.hpp"
#include "hear/arm_train.hpp"
#include "hear/data.hpp"
#include "hear/encoder.hpp"
#include "hear/trainer.hpp"

namespace hear {

struct RunConfig {
  // encoder
  std::size_t uni_layers = 2;
  std::size_t bi_layers = 2;
  std::size_t d_model = 64;
  std::size_t heads = 4;
  std::size_t d_ffn = 128;
  std::size_t max_length = 64;
  std::string uni_kind = "causal-attention";
  // encoder optimizer
  std::size_t epochs = 10;
  std::size_t batch_size = 32;
  double lr = 1e-3;
  // restart module
  std::size_t m = 8;
  std::size_t d_arm = 64;
  std::size_t alpha = 0;
  std::size_t beta = 10;
  double tau = 0.5;
  bool exclude_latest = false;
  std::size_t arm_epochs = 5;
  std::size_t arm_batch_size = 16;
  double arm_lr = 1e-3;
  // synthetic data
  std::string task = "lookahead";
  std::size_t sentences = 1000;
  std::size_t min_sentence_length = 4;
  std::size_t max_sentence_length = 16;
  double marker_prob = 0.1;
  std::size_t window = 3;
  std::size_t alphabet = 6;
  // paths
  std::string train;
  std::string dev;
  std::string test;
  std::string out;
  std::uint64_t seed = 7;

  // Keys given explicitly by a file or flag.
  std::set<std::string> explicit_keys;

  bool is_explicit(const std::string& key) const { return explicit_keys.count(key) != 0; }
};

#define HEAR_RUN_CONFIG_FIELDS(X)                                                      \
  X(uni_layers) X(bi_layers) X(d_model) X(heads) X(d_ffn) X(max_length) X(uni_kind)   \
  X(epochs) X(batch_size) X(lr) X(m) X(d_arm) X(alpha) X(beta) X(tau)                 \
  X(exclude_latest) X(arm_epochs) X(arm_batch_size) X(arm_lr) X(task) X(sentences)    \
  X(min_sentence_length) X(max_sentence_length) X(marker_prob) X(window) X(alphabet)  \
  X(train) X(dev) X(test) X(out) X(seed)

inline nlohmann::json to_json(const RunConfig& c) {
  nlohmann::json j;
#define X(f) j[#f] = c.f;
  HEAR_RUN_CONFIG_FIELDS(X)
#undef X
  return j;
}

// Overlays the keys present in `j` onto `c`. Unknown keys and wrong types are
// configuration errors.
inline void apply_json(RunConfig& c, const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("run configuration must be a JSON object");
  for (const auto& [key, value] : j.items()) {
    bool known = false;
    try {
#define X(f)                                   \
  if (key == #f) {                             \
    c.f = value.get<decltype(RunConfig::f)>(); \
    known = true;                              \
  }
      HEAR_RUN_CONFIG_FIELDS(X)
#undef X
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError("config key '" + key + "': " + e.what());
    }
    if (!known) throw ConfigError("unknown config key '" + key + "'");
    c.explicit_keys.insert(key);
  }
}

inline RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config " + path);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("config " + path + " is not valid JSON: " + e.what());
  }
  RunConfig c;
  apply_json(c, j);
  return c;
}

// HEAR_SEED, when set, replaces the configured seed.
inline void apply_seed_env(RunConfig& c) {
  const char* s = std::getenv("HEAR_SEED");
  if (!s || !*s) return;
  char* end = nullptr;
  const unsigned long long v = std::strtoull(s, &end, 10);
  if (*end != '\0' || s[0] == '-') throw ConfigError("HEAR_SEED must be a non-negative integer");
  c.seed = v;
  c.explicit_keys.insert("seed");
}

inline HybridConfig encoder_config(const RunConfig& c, std::size_t vocab_size,
                                   std::size_t num_labels) {
  HybridConfig h;
  h.uni_layers = c.uni_layers;
  h.bi_layers = c.bi_layers;
  h.d_model = c.d_model;
  h.heads = c.heads;
  h.d_ffn = c.d_ffn;
  h.vocab_size = vocab_size;
  h.num_labels = num_labels;
  h.max_length = c.max_length;
  h.uni_kind = parse_uni_kind(c.uni_kind);
  h.seed = c.seed;
  h.validate();
  return h;
}

inline EncoderTrainConfig encoder_train_config(const RunConfig& c) {
  return {c.epochs, c.batch_size, static_cast<float>(c.lr), c.seed};
}

inline ArmConfig arm_config(const RunConfig& c) {
  ArmConfig a;
  a.d_model = c.d_model;
  a.heads = c.heads;
  a.window = c.m;
  a.hidden = c.d_arm;
  a.alpha = c.alpha;
  a.beta = c.beta;
  a.tau = static_cast<float>(c.tau);
  a.exclude_latest = c.exclude_latest;
  a.seed = c.seed;
  a.validate();
  return a;
}

inline ArmTrainConfig arm_train_config(const RunConfig& c) {
  return {c.arm_epochs, c.arm_batch_size, static_cast<float>(c.arm_lr), c.seed};
}

inline LookaheadParams lookahead_params(const RunConfig& c) {
  return {c.sentences, c.min_sentence_length, c.max_sentence_length, c.marker_prob, c.window,
          c.seed};
}

inline LocalParams local_params(const RunConfig& c) {
  return {c.sentences, c.min_sentence_length, c.max_sentence_length, c.alphabet, c.seed};
}

// Writes via a sibling temp file and rename.
inline void write_file_atomic(const std::filesystem::path& path, const std::string& content) {
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + tmp.string());
    out << content;
    out.flush();
    if (!out) throw IoError("short write to " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("cannot rename " + tmp.string() + " to " + path.string() + ": " + ec.message());
}

inline void ensure_directory(const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec || !std::filesystem::is_directory(dir))
    throw IoError("cannot create directory " + dir.string());
}

}  // namespace hear
