#pragma once

// Hybrid encoder: u causal (cacheable) layers followed by b bidirectional
// layers, with a prediction head over each stack.
//
// Offline, both stacks run over the whole sentence. Streaming, each new token
// runs only through the unidirectional stack against cached keys/values;
// the bidirectional stack is rerun ("restarted") over every cached h_uni row
// when a policy asks for it.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "hear/data.hpp"
#include "hear/errors.hpp"
#include "hear/flops.hpp"
#include "hear/graph.hpp"
#include "hear/kernels.hpp"
#include "hear/params.hpp"
#include "hear/tensor.hpp"

namespace hear {

enum class UniLayerKind { kCausalAttention, kGru };

inline std::string to_string(UniLayerKind k) {
  return k == UniLayerKind::kGru ? "gru" : "causal-attention";
}

inline UniLayerKind parse_uni_kind(const std::string& s) {
  if (s == "gru") return UniLayerKind::kGru;
  if (s == "causal-attention" || s == "attention") return UniLayerKind::kCausalAttention;
  throw ConfigError("unknown unidirectional layer kind '" + s + "'");
}

struct HybridConfig {
  std::size_t uni_layers = 2;
  std::size_t bi_layers = 2;
  std::size_t d_model = 64;
  std::size_t heads = 4;
  std::size_t d_ffn = 128;
  std::size_t vocab_size = 32;
  std::size_t num_labels = 3;
  std::size_t max_length = 64;
  UniLayerKind uni_kind = UniLayerKind::kCausalAttention;
  std::uint64_t seed = 7;

  std::size_t total_layers() const { return uni_layers + bi_layers; }

  void validate() const {
    if (total_layers() == 0) throw ConfigError("encoder needs at least one layer");
    if (d_model == 0 || heads == 0 || d_model % heads != 0)
      throw ConfigError("d_model must be a positive multiple of heads");
    if (d_ffn == 0) throw ConfigError("d_ffn must be positive");
    if (vocab_size < 1) throw ConfigError("vocab_size must be >= 1");
    if (num_labels < 1) throw ConfigError("num_labels must be >= 1");
    if (max_length < 1) throw ConfigError("max_length must be >= 1");
  }
};

inline nlohmann::json to_json(const HybridConfig& c) {
  return {{"uni_layers", c.uni_layers}, {"bi_layers", c.bi_layers},
          {"d_model", c.d_model},       {"heads", c.heads},
          {"d_ffn", c.d_ffn},           {"vocab_size", c.vocab_size},
          {"num_labels", c.num_labels}, {"max_length", c.max_length},
          {"uni_kind", to_string(c.uni_kind)}, {"seed", c.seed}};
}

inline HybridConfig hybrid_config_from_json(const nlohmann::json& j) {
  HybridConfig c;
  c.uni_layers = j.at("uni_layers").get<std::size_t>();
  c.bi_layers = j.at("bi_layers").get<std::size_t>();
  c.d_model = j.at("d_model").get<std::size_t>();
  c.heads = j.at("heads").get<std::size_t>();
  c.d_ffn = j.at("d_ffn").get<std::size_t>();
  c.vocab_size = j.at("vocab_size").get<std::size_t>();
  c.num_labels = j.at("num_labels").get<std::size_t>();
  c.max_length = j.at("max_length").get<std::size_t>();
  c.uni_kind = parse_uni_kind(j.at("uni_kind").get<std::string>());
  c.seed = j.at("seed").get<std::uint64_t>();
  c.validate();
  return c;
}

struct EncoderOutputs {
  Tensor h_uni;       // T×d
  Tensor h_bi;        // T×d
  Tensor uni_logits;  // T×C
  Tensor bi_logits;   // T×C
};

// Argmax with ties going to the lowest label id.
inline int argmax_label(std::span<const float> logits) {
  if (logits.empty()) detail::contract_fail("argmax over empty logits");
  std::size_t best = 0;
  for (std::size_t i = 1; i < logits.size(); ++i)
    if (logits[i] > logits[best]) best = i;
  return static_cast<int>(best);
}

inline std::vector<int> argmax_rows(const Tensor& logits) {
  std::vector<int> out(logits.rows());
  for (std::size_t i = 0; i < logits.rows(); ++i) out[i] = argmax_label(logits.row(i));
  return out;
}

// Key/value rows of one causal attention layer.
struct AttentionCache {
  Tensor keys;
  Tensor values;
};

// Per-sentence streaming state.
struct UniState {
  std::size_t length = 0;
  std::vector<AttentionCache> attention;         // one per causal layer
  std::vector<std::vector<float>> gru_hidden;    // one per GRU layer
  Tensor h_uni;                                  // length×d
  Tensor bi_queries;                             // first bi layer q rows
  Tensor bi_keys;                                // first bi layer k rows
  std::vector<int> uni_labels;
  FlopLedger ledger;
};

// What stream_extend hands back for the newest token.
struct StreamStep {
  std::size_t position = 0;     // 1-based t
  std::vector<float> h_uni;     // d
  std::vector<float> query;     // d, first bi layer (empty when b = 0)
  std::vector<float> key;       // d
  // Unnormalized forward scores q_i·k_t for i < t, per head: (t−1)×H rows.
  std::vector<float> forward_scores;
  std::size_t heads = 0;
  int uni_label = 0;

  // Latest m prefix scores, right-aligned into m·H slots with zero padding.
  std::vector<float> windowed_scores(std::size_t m) const {
    std::vector<float> out(m * heads, 0.0f);
    const std::size_t prior = position - 1;
    const std::size_t take = std::min(prior, m);
    for (std::size_t s = 0; s < take; ++s) {
      const std::size_t src = prior - take + s;  // prefix index, oldest first
      const std::size_t dst = m - take + s;
      for (std::size_t h = 0; h < heads; ++h)
        out[dst * heads + h] = forward_scores[src * heads + h];
    }
    return out;
  }
};

struct StreamOptions {
  // Compute q_t, k_t and forward scores for restart-policy features.
  bool features = false;
  // Window of prefix scores actually computed (and charged) when features
  // are on.
  std::size_t score_window = 8;
};

class HybridEncoder {
 public:
  explicit HybridEncoder(HybridConfig config) : config_(config) {
    config_.validate();
    init_parameters();
  }

  HybridEncoder(HybridConfig config, ParameterSet params)
      : config_(config), params_(std::move(params)) {
    config_.validate();
    check_parameters();
  }

  const HybridConfig& config() const { return config_; }
  ParameterSet& params() { return params_; }
  const ParameterSet& params() const { return params_; }

  static bool is_uni_head_param(const std::string& path) {
    return path.rfind("head.uni.", 0) == 0;
  }

  // ---- graph construction -------------------------------------------------

  struct GraphOutputs {
    Var h_uni, h_bi, uni_logits, bi_logits;
  };

  // Builds the full forward pass on g. With stop_uni_grad the uni head reads
  // a detached copy of h_uni, so its loss only reaches head.uni.*.
  GraphOutputs build(Graph& g, std::span<const int> tokens,
                     std::span<const int> indicators, bool stop_uni_grad) {
    check_input(tokens, indicators);
    const std::size_t t = tokens.size();
    std::vector<int> positions(t);
    for (std::size_t i = 0; i < t; ++i) positions[i] = static_cast<int>(i);
    std::vector<int> flags(t, 0);
    if (!indicators.empty()) flags.assign(indicators.begin(), indicators.end());

    Var x = g.embedding(p(g, "embed.token"), tokens);
    x = g.add(x, g.embedding(p(g, "embed.position"), positions));
    x = g.add(x, g.embedding(p(g, "embed.indicator"), flags));
    for (std::size_t l = 0; l < config_.uni_layers; ++l) {
      const std::string name = "uni." + std::to_string(l);
      x = config_.uni_kind == UniLayerKind::kGru ? gru_layer(g, name, x)
                                                 : block(g, name, x, true);
    }
    GraphOutputs out;
    out.h_uni = x;
    out.h_bi = bidirectional(g, x);
    Var uni_in = stop_uni_grad ? g.detach(out.h_uni) : out.h_uni;
    out.uni_logits = g.linear(uni_in, p(g, "head.uni.w"), p(g, "head.uni.b"));
    out.bi_logits = g.linear(out.h_bi, p(g, "head.bi.w"), p(g, "head.bi.b"));
    return out;
  }

  // Bidirectional stack over an existing h_uni node.
  Var bidirectional(Graph& g, Var h_uni) {
    Var y = h_uni;
    for (std::size_t l = 0; l < config_.bi_layers; ++l)
      y = block(g, "bi." + std::to_string(l), y, false);
    return y;
  }

  // ---- offline ------------------------------------------------------------

  EncoderOutputs offline_forward(std::span<const int> tokens,
                                 std::span<const int> indicators = {}) const {
    Graph g(false);
    auto& self = const_cast<HybridEncoder&>(*this);  // graph reads params only
    GraphOutputs o = self.build(g, tokens, indicators, true);
    return {g.value(o.h_uni), g.value(o.h_bi), g.value(o.uni_logits),
            g.value(o.bi_logits)};
  }

  // ---- streaming ----------------------------------------------------------

  UniState begin_stream() const {
    UniState s;
    const std::size_t d = config_.d_model;
    if (config_.uni_kind == UniLayerKind::kGru) {
      s.gru_hidden.assign(config_.uni_layers, std::vector<float>(d, 0.0f));
    } else {
      s.attention.resize(config_.uni_layers);
    }
    return s;
  }

  // Runs the new token through the unidirectional stack using cached state.
  StreamStep stream_extend(UniState& state, int token, int indicator = 0,
                           const StreamOptions& opts = {}) const {
    const std::size_t d = config_.d_model;
    const std::size_t t = state.length + 1;
    if (t > config_.max_length)
      throw CapacityError("stream length " + std::to_string(t) +
                          " exceeds max_length " + std::to_string(config_.max_length));
    if (token < 0 || static_cast<std::size_t>(token) >= config_.vocab_size)
      throw InputError("token id " + std::to_string(token) + " out of vocabulary");
    if (indicator != 0 && indicator != 1) throw InputError("indicator must be 0 or 1");

    std::vector<float> x(d);
    {
      auto tok = val("embed.token").row(static_cast<std::size_t>(token));
      auto pos = val("embed.position").row(t - 1);
      auto ind = val("embed.indicator").row(static_cast<std::size_t>(indicator));
      for (std::size_t c = 0; c < d; ++c) x[c] = tok[c] + pos[c];
      for (std::size_t c = 0; c < d; ++c) x[c] = x[c] + ind[c];
    }
    for (std::size_t l = 0; l < config_.uni_layers; ++l) {
      const std::string name = "uni." + std::to_string(l);
      if (config_.uni_kind == UniLayerKind::kGru) {
        gru_step(name, state.gru_hidden[l], x);
        state.ledger.record(name, 1, flops::gru_step(d, d));
      } else {
        causal_step(name, state.attention[l], x);
        state.ledger.record(name, 1, flops::causal_step(t, d, config_.d_ffn));
      }
    }
    state.h_uni.append_row(x);
    state.length = t;

    StreamStep step;
    step.position = t;
    step.h_uni = x;
    step.heads = config_.heads;
    step.uni_label = predict_uni_label(x);
    state.uni_labels.push_back(step.uni_label);
    state.ledger.record("head.uni", 1, flops::linear(1, d, config_.num_labels));

    if (opts.features && config_.bi_layers > 0) {
      std::vector<float> normed(d);
      kernels::layer_norm_row(x.data(), val("bi.0.ln1.gain").data(),
                              val("bi.0.ln1.bias").data(), normed.data(), d);
      step.query = project(normed, "bi.0.attn.wq", "bi.0.attn.bq");
      step.key = project(normed, "bi.0.attn.wk", "");
      state.bi_queries.append_row(step.query);
      state.bi_keys.append_row(step.key);
      const std::size_t dh = d / config_.heads;
      const std::size_t first =
          t - 1 > opts.score_window ? t - 1 - opts.score_window : 0;
      step.forward_scores.assign((t - 1) * config_.heads, 0.0f);
      for (std::size_t i = first; i + 1 < t; ++i) {
        auto q = state.bi_queries.row(i);
        for (std::size_t h = 0; h < config_.heads; ++h)
          step.forward_scores[i * config_.heads + h] =
              kernels::dot(&q[h * dh], &step.key[h * dh], dh);
      }
      state.ledger.record("features.qk", 1,
                          flops::layer_norm(1, d) + 2 * flops::linear(1, d, d));
      if (t > 1)
        state.ledger.record("features.scores", t - 1 - first,
                            2 * (t - 1 - first) * d);
    }
    return step;
  }

  // Reruns the bidirectional stack over every cached h_uni row and returns
  // the bi-head labels for all received tokens.
  std::vector<int> restart_bidirectional(UniState& state) const {
    if (state.length == 0) detail::contract_fail("restart on an empty stream");
    Tensor logits = bi_logits_from(state.h_uni);
    const std::size_t t = state.length, d = config_.d_model;
    for (std::size_t l = 0; l < config_.bi_layers; ++l)
      state.ledger.record("bi." + std::to_string(l), t,
                          flops::attention_block(t, d, config_.d_ffn));
    state.ledger.record("head.bi", t, flops::linear(t, d, config_.num_labels));
    return argmax_rows(logits);
  }

  Tensor bi_logits_from(const Tensor& h_uni) const {
    Graph g(false);
    auto& self = const_cast<HybridEncoder&>(*this);
    Var h = g.constant(h_uni);
    Var y = self.bidirectional(g, h);
    Var logits = g.linear(y, self.p(g, "head.bi.w"), self.p(g, "head.bi.b"));
    return g.value(logits);
  }

  int predict_uni_label(std::span<const float> h_uni_t) const {
    const std::size_t d = config_.d_model, c = config_.num_labels;
    if (h_uni_t.size() != d) detail::contract_fail("predict_uni_label: width mismatch");
    std::vector<float> logits(val("head.uni.b").data(), val("head.uni.b").data() + c);
    kernels::matmul(h_uni_t.data(), val("head.uni.w").data(), logits.data(), 1, d, c,
                    true);
    return argmax_label(logits);
  }

  // Analytic cost of one restart over t tokens.
  FlopCount restart_flops(std::size_t t) const {
    FlopCount n = flops::linear(t, config_.d_model, config_.num_labels);
    for (std::size_t l = 0; l < config_.bi_layers; ++l)
      n += flops::attention_block(t, config_.d_model, config_.d_ffn);
    return n;
  }

  // Analytic cost of extending the unidirectional stack to position t,
  // including the uni head.
  FlopCount uni_step_flops(std::size_t t) const {
    const std::size_t d = config_.d_model;
    FlopCount n = flops::linear(1, d, config_.num_labels);
    for (std::size_t l = 0; l < config_.uni_layers; ++l)
      n += config_.uni_kind == UniLayerKind::kGru
               ? flops::gru_step(d, d)
               : flops::causal_step(t, d, config_.d_ffn);
    return n;
  }

 private:
  Var p(Graph& g, const std::string& path) { return g.param(params_.at(path)); }
  const Tensor& val(const std::string& path) const { return params_.at(path).value; }

  void check_input(std::span<const int> tokens, std::span<const int> indicators) const {
    if (tokens.empty()) throw InputError("empty token sequence");
    if (tokens.size() > config_.max_length)
      throw CapacityError("sequence length " + std::to_string(tokens.size()) +
                          " exceeds max_length " + std::to_string(config_.max_length));
    for (int id : tokens)
      if (id < 0 || static_cast<std::size_t>(id) >= config_.vocab_size)
        throw InputError("token id " + std::to_string(id) + " out of vocabulary");
    if (!indicators.empty() && indicators.size() != tokens.size())
      throw InputError("indicator count does not match token count");
    for (int f : indicators)
      if (f != 0 && f != 1) throw InputError("indicator must be 0 or 1");
  }

  // Pre-norm transformer block.
  Var block(Graph& g, const std::string& name, Var x, bool causal) {
    Var a = g.layer_norm(x, p(g, name + ".ln1.gain"), p(g, name + ".ln1.bias"));
    Var q = g.linear(a, p(g, name + ".attn.wq"), p(g, name + ".attn.bq"));
    Var k = g.linear(a, p(g, name + ".attn.wk"));
    Var v = g.linear(a, p(g, name + ".attn.wv"), p(g, name + ".attn.bv"));
    Var ctx = g.attention(q, k, v, config_.heads, causal);
    x = g.add(x, g.linear(ctx, p(g, name + ".attn.wo"), p(g, name + ".attn.bo")));
    Var f = g.layer_norm(x, p(g, name + ".ln2.gain"), p(g, name + ".ln2.bias"));
    Var hidden = g.gelu(g.linear(f, p(g, name + ".ffn.w1"), p(g, name + ".ffn.b1")));
    return g.add(x, g.linear(hidden, p(g, name + ".ffn.w2"), p(g, name + ".ffn.b2")));
  }

  Var gru_layer(Graph& g, const std::string& name, Var x) {
    const std::size_t t = g.value(x).rows();
    Var wx = p(g, name + ".gru.wx"), wh = p(g, name + ".gru.wh");
    Var bx = p(g, name + ".gru.bx"), bh = p(g, name + ".gru.bh");
    Var h = g.constant(Tensor({1, config_.d_model}));
    std::vector<Var> outs;
    outs.reserve(t);
    for (std::size_t i = 0; i < t; ++i) {
      h = g.gru_cell(g.row(x, i), h, wx, wh, bx, bh);
      outs.push_back(h);
    }
    return g.stack_rows(outs);
  }

  std::vector<float> project(const std::vector<float>& x, const std::string& w,
                             const std::string& b) const {
    const Tensor& wv = val(w);
    std::vector<float> out(wv.cols(), 0.0f);
    if (!b.empty()) {
      const Tensor& bv = val(b);
      std::copy(bv.data(), bv.data() + bv.size(), out.begin());
    }
    kernels::matmul(x.data(), wv.data(), out.data(), 1, wv.rows(), wv.cols(), true);
    return out;
  }

  // Incremental version of block(...) for one new row; mirrors its arithmetic.
  void causal_step(const std::string& name, AttentionCache& cache,
                   std::vector<float>& x) const {
    const std::size_t d = config_.d_model;
    std::vector<float> a(d);
    kernels::layer_norm_row(x.data(), val(name + ".ln1.gain").data(),
                            val(name + ".ln1.bias").data(), a.data(), d);
    std::vector<float> q = project(a, name + ".attn.wq", name + ".attn.bq");
    cache.keys.append_row(project(a, name + ".attn.wk", ""));
    cache.values.append_row(project(a, name + ".attn.wv", name + ".attn.bv"));
    const std::size_t n_keys = cache.keys.rows();
    std::vector<float> ctx(d), probs(config_.heads * n_keys);
    kernels::attend_row(q.data(), cache.keys.data(), cache.values.data(), n_keys, d,
                        config_.heads, ctx.data(), probs.data());
    std::vector<float> o = project(ctx, name + ".attn.wo", name + ".attn.bo");
    for (std::size_t c = 0; c < d; ++c) x[c] = x[c] + o[c];
    std::vector<float> f(d);
    kernels::layer_norm_row(x.data(), val(name + ".ln2.gain").data(),
                            val(name + ".ln2.bias").data(), f.data(), d);
    std::vector<float> hidden = project(f, name + ".ffn.w1", name + ".ffn.b1");
    for (auto& v : hidden) v = kernels::gelu(v);
    std::vector<float> out = project(hidden, name + ".ffn.w2", name + ".ffn.b2");
    for (std::size_t c = 0; c < d; ++c) x[c] = x[c] + out[c];
  }

  void gru_step(const std::string& name, std::vector<float>& hidden,
                std::vector<float>& x) const {
    const std::size_t d = config_.d_model;
    std::vector<float> next(d), scratch(6 * d);
    kernels::gru_cell(x.data(), hidden.data(), val(name + ".gru.wx").data(),
                      val(name + ".gru.wh").data(), val(name + ".gru.bx").data(),
                      val(name + ".gru.bh").data(), d, d, next.data(), nullptr,
                      scratch.data());
    hidden = next;
    x = next;
  }

  void add_block_params(const std::string& name, std::mt19937& rng) {
    const std::size_t d = config_.d_model, f = config_.d_ffn;
    params_.add(name + ".ln1.gain", Tensor({d}, 1.0f));
    params_.add(name + ".ln1.bias", Tensor({d}));
    for (const char* m : {"q", "k", "v", "o"}) {
      params_.add(name + ".attn.w" + m, weight_init(d, d, rng));
      if (std::string_view(m) != "k") params_.add(name + ".attn.b" + m, Tensor({d}));
    }
    params_.add(name + ".ln2.gain", Tensor({d}, 1.0f));
    params_.add(name + ".ln2.bias", Tensor({d}));
    params_.add(name + ".ffn.w1", weight_init(d, f, rng));
    params_.add(name + ".ffn.b1", Tensor({f}));
    params_.add(name + ".ffn.w2", weight_init(f, d, rng));
    params_.add(name + ".ffn.b2", Tensor({d}));
  }

  void init_parameters() {
    std::mt19937 rng(static_cast<std::uint32_t>(config_.seed));
    const std::size_t d = config_.d_model;
    const float emb_bound = 1.0f / std::sqrt(static_cast<float>(d));
    params_.add("embed.token", uniform_init({config_.vocab_size, d}, emb_bound, rng));
    params_.add("embed.position", uniform_init({config_.max_length, d}, emb_bound, rng));
    params_.add("embed.indicator", uniform_init({2, d}, emb_bound, rng));
    for (std::size_t l = 0; l < config_.uni_layers; ++l) {
      const std::string name = "uni." + std::to_string(l);
      if (config_.uni_kind == UniLayerKind::kGru) {
        params_.add(name + ".gru.wx", weight_init(d, 3 * d, rng));
        params_.add(name + ".gru.wh", weight_init(d, 3 * d, rng));
        params_.add(name + ".gru.bx", Tensor({3 * d}));
        params_.add(name + ".gru.bh", Tensor({3 * d}));
      } else {
        add_block_params(name, rng);
      }
    }
    for (std::size_t l = 0; l < config_.bi_layers; ++l)
      add_block_params("bi." + std::to_string(l), rng);
    params_.add("head.uni.w", weight_init(d, config_.num_labels, rng));
    params_.add("head.uni.b", Tensor({config_.num_labels}));
    params_.add("head.bi.w", weight_init(d, config_.num_labels, rng));
    params_.add("head.bi.b", Tensor({config_.num_labels}));
  }

  void check_parameters() const {
    HybridEncoder reference(config_);
    if (reference.params_.size() != params_.size())
      throw ConfigError("parameter set does not match encoder config");
    for (const auto& [name, prm] : reference.params_) {
      if (!params_.contains(name)) throw ConfigError("missing parameter " + name);
      if (params_.at(name).value.shape() != prm.value.shape())
        throw ConfigError("parameter " + name + " has shape " +
                          shape_str(params_.at(name).value.shape()) + ", expected " +
                          shape_str(prm.value.shape()));
    }
  }

  HybridConfig config_;
  ParameterSet params_;
};

// ---------------------------------------------------------------------------
// Training

struct EncodedSentence {
  std::vector<int> tokens;
  std::vector<int> indicators;
  std::vector<int> labels;
};

inline EncodedSentence encode_sentence(const Vocabulary& vocab, const TaggedSentence& s) {
  s.validate();
  return {vocab.encode_tokens(s), s.indicators, vocab.encode_labels(s.labels)};
}

struct StepLosses {
  float loss_bi = 0.0f;
  float loss_uni = 0.0f;
};

// Which losses contribute to backward in train_step.
enum class LossTerms { kBoth, kBiOnly, kUniOnly };

// Accumulates gradients of the token-weighted mean losses over the batch
// without stepping an optimizer. The uni head reads a detached h_uni.
inline StepLosses accumulate_gradients(HybridEncoder& model,
                                       std::span<const EncodedSentence> batch,
                                       LossTerms terms = LossTerms::kBoth) {
  if (batch.empty()) throw InputError("empty training batch");
  std::size_t total_tokens = 0;
  for (const auto& s : batch) total_tokens += s.tokens.size();
  double sum_bi = 0.0, sum_uni = 0.0;
  for (const auto& s : batch) {
    if (s.labels.size() != s.tokens.size())
      throw InputError("label count does not match token count");
    for (int l : s.labels)
      if (l < 0 || static_cast<std::size_t>(l) >= model.config().num_labels)
        throw InputError("label id " + std::to_string(l) + " out of range");
    Graph g(true);
    auto out = model.build(g, s.tokens, s.indicators, true);
    Var lb = g.softmax_cross_entropy(out.bi_logits, s.labels);
    Var lu = g.softmax_cross_entropy(out.uni_logits, s.labels);
    const float w = static_cast<float>(s.tokens.size()) / static_cast<float>(total_tokens);
    sum_bi += static_cast<double>(g.value(lb)[0]) * w;
    sum_uni += static_cast<double>(g.value(lu)[0]) * w;
    Var loss;
    switch (terms) {
      case LossTerms::kBoth: loss = g.add(g.scale(lb, w), g.scale(lu, w)); break;
      case LossTerms::kBiOnly: loss = g.scale(lb, w); break;
      case LossTerms::kUniOnly: loss = g.scale(lu, w); break;
    }
    g.backward(loss);
  }
  StepLosses out{static_cast<float>(sum_bi), static_cast<float>(sum_uni)};
  if (!std::isfinite(out.loss_bi) || !std::isfinite(out.loss_uni))
    throw NumericError("training loss is not finite");
  return out;
}

// One optimizer step on L_bi + L_uni.
inline StepLosses train_step(HybridEncoder& model, std::span<const EncodedSentence> batch,
                             Adam& optimizer) {
  model.params().zero_grad();
  StepLosses losses = accumulate_gradients(model, batch);
  // Parameters a batch never reached (e.g. an unused GRU bias path) still
  // take a zero-gradient step.
  for (auto& [_, prm] : model.params())
    if (prm.trainable) prm.ensure_grad();
  optimizer.step(model.params());
  return losses;
}

// ---------------------------------------------------------------------------
// Model files: <prefix>.json (config, tables, parameter manifest) and
// <prefix>.bin (parameter blob).

inline void save_encoder(const std::string& prefix, const HybridEncoder& model,
                         const Vocabulary& vocab) {
  nlohmann::json header;
  header["format"] = "hear-encoder/1";
  header["config"] = to_json(model.config());
  header["tokens"] = vocab.tokens();
  header["labels"] = vocab.labels();
  header["parameters"] = write_parameters(model.params(), prefix + ".bin");
  std::ofstream out(prefix + ".json", std::ios::trunc);
  if (!out) throw IoError("cannot write " + prefix + ".json");
  out << header.dump(1) << '\n';
  if (!out) throw IoError("short write to " + prefix + ".json");
}

struct LoadedEncoder {
  HybridEncoder model;
  Vocabulary vocab;
};

inline LoadedEncoder load_encoder(const std::string& prefix) {
  std::ifstream in(prefix + ".json");
  if (!in) throw IoError("cannot open " + prefix + ".json");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw IoError("malformed encoder header: " + std::string(e.what()));
  }
  if (header.value("format", "") != "hear-encoder/1")
    throw ConfigError(prefix + ".json is not an encoder file");
  HybridConfig config = hybrid_config_from_json(header.at("config"));
  ParameterSet params = read_parameters(header.at("parameters"), prefix + ".bin");
  Vocabulary vocab = Vocabulary::from_tables(
      header.at("tokens").get<std::vector<std::string>>(),
      header.at("labels").get<std::vector<std::string>>());
  return {HybridEncoder(config, std::move(params)), std::move(vocab)};
}

}  // namespace hear
