#pragma once

// Adaptive restart module: a single-layer GRU over cache-resident features
// with a sigmoid restart probability, plus the alpha/beta decision rules.

#include <cstdint>
#include <fstream>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "hear/encoder.hpp"
#include "hear/errors.hpp"
#include "hear/flops.hpp"
#include "hear/kernels.hpp"
#include "hear/params.hpp"

namespace hear {

struct ArmConfig {
  std::size_t d_model = 64;  // encoder width
  std::size_t heads = 4;     // encoder heads
  std::size_t window = 8;    // m, prefix scores per head
  std::size_t hidden = 64;   // d_arm
  std::size_t alpha = 0;
  std::size_t beta = 10;
  float tau = 0.5f;
  bool exclude_latest = false;
  std::uint64_t seed = 7;

  std::size_t feature_dim() const { return 3 * d_model + window * heads; }

  void validate() const {
    if (d_model == 0 || heads == 0) throw ConfigError("arm: encoder width and heads must be positive");
    if (window == 0) throw ConfigError("arm: score window must be >= 1");
    if (hidden == 0) throw ConfigError("arm: hidden size must be >= 1");
    if (alpha >= beta) throw ConfigError("arm: alpha must be smaller than beta");
    if (!(tau > 0.0f && tau < 1.0f)) throw ConfigError("arm: tau must lie in (0, 1)");
  }
};

inline nlohmann::json to_json(const ArmConfig& c) {
  return {{"d_model", c.d_model}, {"heads", c.heads},   {"m", c.window},
          {"d_arm", c.hidden},    {"alpha", c.alpha},   {"beta", c.beta},
          {"tau", c.tau},         {"exclude_latest", c.exclude_latest},
          {"seed", c.seed}};
}

inline ArmConfig arm_config_from_json(const nlohmann::json& j) {
  ArmConfig c;
  c.d_model = j.at("d_model").get<std::size_t>();
  c.heads = j.at("heads").get<std::size_t>();
  c.window = j.at("m").get<std::size_t>();
  c.hidden = j.at("d_arm").get<std::size_t>();
  c.alpha = j.at("alpha").get<std::size_t>();
  c.beta = j.at("beta").get<std::size_t>();
  c.tau = j.at("tau").get<float>();
  c.exclude_latest = j.at("exclude_latest").get<bool>();
  c.seed = j.at("seed").get<std::uint64_t>();
  c.validate();
  return c;
}

// f_t = [h_uni_t, q_t, k_t, a_t]. Needs a stream step taken with features on.
inline std::vector<float> extract_features(const StreamStep& step, std::size_t window) {
  if (step.query.empty() || step.key.empty())
    detail::contract_fail("extract_features: stream step carries no query/key rows");
  std::vector<float> f;
  f.reserve(3 * step.h_uni.size() + window * step.heads);
  f.insert(f.end(), step.h_uni.begin(), step.h_uni.end());
  f.insert(f.end(), step.query.begin(), step.query.end());
  f.insert(f.end(), step.key.begin(), step.key.end());
  const auto a = step.windowed_scores(window);
  f.insert(f.end(), a.begin(), a.end());
  return f;
}

struct ArmOutput {
  float probability = 0.5f;
  float logit = 0.0f;
  std::vector<float> state;
};

class ArmModel {
 public:
  explicit ArmModel(ArmConfig config) : config_(config) {
    config_.validate();
    std::mt19937 rng(static_cast<std::uint32_t>(config_.seed));
    const std::size_t f = config_.feature_dim(), h = config_.hidden;
    const float bound = 1.0f / std::sqrt(static_cast<float>(h));
    params_.add("gru.wx", uniform_init({f, 3 * h}, bound, rng));
    params_.add("gru.wh", uniform_init({h, 3 * h}, bound, rng));
    params_.add("gru.bx", uniform_init({3 * h}, bound, rng));
    params_.add("gru.bh", uniform_init({3 * h}, bound, rng));
    params_.add("out.w", weight_init(h, 1, rng));
    params_.add("out.b", Tensor({1}));
  }

  ArmModel(ArmConfig config, ParameterSet params)
      : config_(config), params_(std::move(params)) {
    config_.validate();
    const std::size_t f = config_.feature_dim(), h = config_.hidden;
    auto expect = [&](const std::string& name, const Shape& shape) {
      if (!params_.contains(name)) throw ConfigError("arm parameter " + name + " missing");
      if (params_.at(name).value.shape() != shape)
        throw ConfigError("arm parameter " + name + " has shape " +
                          shape_str(params_.at(name).value.shape()) + ", expected " +
                          shape_str(shape));
    };
    expect("gru.wx", {f, 3 * h});
    expect("gru.wh", {h, 3 * h});
    expect("gru.bx", {3 * h});
    expect("gru.bh", {3 * h});
    expect("out.w", {h, 1});
    expect("out.b", {1});
  }

  const ArmConfig& config() const { return config_; }
  ArmConfig& config() { return config_; }
  ParameterSet& params() { return params_; }
  const ParameterSet& params() const { return params_; }

  std::vector<float> initial_state() const { return std::vector<float>(config_.hidden, 0.0f); }

  // Throws ConfigError when the encoder cannot feed this module.
  void check_encoder(const HybridConfig& enc) const {
    if (enc.bi_layers == 0)
      throw ConfigError("restart module needs an encoder with bidirectional layers");
    if (enc.d_model != config_.d_model || enc.heads != config_.heads)
      throw ConfigError("restart module built for d_model " + std::to_string(config_.d_model) +
                        " / heads " + std::to_string(config_.heads) +
                        " but the encoder has " + std::to_string(enc.d_model) + " / " +
                        std::to_string(enc.heads));
  }

  // Cost of one arm_forward call.
  FlopCount step_flops() const {
    return flops::gru_step(config_.feature_dim(), config_.hidden) +
           flops::linear(1, config_.hidden, 1);
  }

 private:
  ArmConfig config_;
  ParameterSet params_;
};

inline ArmOutput arm_forward(const ArmModel& model, std::span<const float> features,
                             std::span<const float> state) {
  const auto& c = model.config();
  const std::size_t h = c.hidden;
  if (features.size() != c.feature_dim())
    detail::contract_fail("arm_forward: feature width " + std::to_string(features.size()) +
                          ", expected " + std::to_string(c.feature_dim()));
  if (state.size() != h) detail::contract_fail("arm_forward: state width mismatch");
  const auto& p = model.params();
  ArmOutput out;
  out.state.assign(h, 0.0f);
  std::vector<float> scratch(6 * h);
  kernels::gru_cell(features.data(), state.data(), p.at("gru.wx").value.data(),
                    p.at("gru.wh").value.data(), p.at("gru.bx").value.data(),
                    p.at("gru.bh").value.data(), c.feature_dim(), h, out.state.data(),
                    nullptr, scratch.data());
  out.logit = kernels::dot(out.state.data(), p.at("out.w").value.data(), h) +
              p.at("out.b").value[0];
  out.probability = kernels::sigmoid(out.logit);
  return out;
}

// Restart probabilities for a whole feature sequence from a zero state.
inline std::vector<float> arm_probabilities(const ArmModel& model,
                                            const std::vector<std::vector<float>>& features) {
  std::vector<float> probs;
  probs.reserve(features.size());
  std::vector<float> state = model.initial_state();
  for (const auto& f : features) {
    ArmOutput o = arm_forward(model, f, state);
    probs.push_back(o.probability);
    state = std::move(o.state);
  }
  return probs;
}

// Decision for timestep t = history.size() + 1 given earlier decisions.
// The stream start acts as a restart for the beta rule only.
inline bool postprocess_decision(float prob, const std::vector<bool>& history,
                                 std::size_t alpha, std::size_t beta, float tau) {
  if (alpha >= beta) throw ConfigError("alpha must be smaller than beta");
  const std::size_t t = history.size() + 1;
  std::size_t last = 0;  // 0 = stream start
  for (std::size_t i = history.size(); i > 0; --i)
    if (history[i - 1]) {
      last = i;
      break;
    }
  if (t - last > beta) return true;
  if (last > 0 && t - last <= alpha) return false;
  return prob >= tau;
}

// Decisions for a whole stream, final step forced.
inline std::vector<bool> postprocess_sequence(const std::vector<float>& probs,
                                              std::size_t alpha, std::size_t beta, float tau) {
  std::vector<bool> out;
  out.reserve(probs.size());
  for (float p : probs) out.push_back(postprocess_decision(p, out, alpha, beta, tau));
  if (!out.empty()) out.back() = true;
  return out;
}

struct LintResult {
  bool ok = true;
  std::vector<std::string> problems;
};

// Checks a restart sequence against the alpha/beta rules: never more than
// beta consecutive steps without a restart, and no restart within alpha
// steps of the previous one unless it is the final step.
inline LintResult lint_restarts(const std::vector<bool>& restarts, std::size_t alpha,
                                std::size_t beta) {
  LintResult r;
  if (restarts.empty()) return r;
  if (!restarts.back()) {
    r.ok = false;
    r.problems.push_back("final step does not restart");
  }
  std::size_t last = 0;
  bool seen = false;
  for (std::size_t t = 1; t <= restarts.size(); ++t) {
    if (!restarts[t - 1]) {
      if (t - last >= beta + 1) {
        r.ok = false;
        r.problems.push_back("no restart in the " + std::to_string(beta) +
                             " steps before t=" + std::to_string(t));
      }
      continue;
    }
    if (seen && t - last <= alpha && t != restarts.size()) {
      r.ok = false;
      r.problems.push_back("restart at t=" + std::to_string(t) + " within " +
                           std::to_string(alpha) + " of t=" + std::to_string(last));
    }
    last = t;
    seen = true;
  }
  return r;
}

// ---- files ------------------------------------------------------------------

inline void save_arm(const std::string& prefix, const ArmModel& model,
                     const nlohmann::json& extra = nlohmann::json::object()) {
  nlohmann::json header;
  header["format"] = "hear-arm/1";
  header["config"] = to_json(model.config());
  header["parameters"] = write_parameters(model.params(), prefix + ".bin");
  if (!extra.empty()) header["training"] = extra;
  std::ofstream out(prefix + ".json", std::ios::trunc);
  if (!out) throw IoError("cannot write " + prefix + ".json");
  out << header.dump(1) << '\n';
  if (!out) throw IoError("short write to " + prefix + ".json");
}

inline ArmModel load_arm(const std::string& prefix) {
  std::ifstream in(prefix + ".json");
  if (!in) throw IoError("cannot open " + prefix + ".json");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw IoError("malformed restart module header: " + std::string(e.what()));
  }
  if (header.value("format", "") != "hear-arm/1")
    throw ConfigError(prefix + ".json is not a restart module file");
  ArmConfig config = arm_config_from_json(header.at("config"));
  ParameterSet params = read_parameters(header.at("parameters"), prefix + ".bin");
  return ArmModel(config, std::move(params));
}

}  // namespace hear
