#pragma once

// Analytic FLOP model. One multiply-accumulate counts as 2 FLOPs;
// softmax and normalization are charged the linear terms stated below.
//
//   linear d_in→d_out over T rows   2·T·d_in·d_out
//   attention block over T tokens   8·T·d² + 4·T²·d + 4·T·d_ffn·d + 10·T·d
//   causal block, one new token at
//   position t (cache hit)          8·d² + 4·t·d + 4·d_ffn·d + 10·d
//   GRU cell step                   6·d_in·d_h + 6·d_h²

#include <cstdint>
#include <string>
#include <vector>

#include "hear/errors.hpp"

namespace hear {

using FlopCount = std::uint64_t;

enum class LayerKind {
  kLinear,
  kAttention,       // full (bidirectional or one-shot causal) block
  kCausalStep,      // incremental causal block for one new token
  kGruStep,
  kLayerNorm,
};

struct FlopShape {
  std::uint64_t d_in = 0;   // model width for attention kinds
  std::uint64_t d_out = 0;  // GRU hidden size / linear output width
  std::uint64_t d_ffn = 0;
};

namespace flops {

inline FlopCount linear(std::uint64_t t, std::uint64_t d_in, std::uint64_t d_out) {
  return 2 * t * d_in * d_out;
}

inline FlopCount attention_block(std::uint64_t t, std::uint64_t d, std::uint64_t d_ffn) {
  return 8 * t * d * d + 4 * t * t * d + 4 * t * d_ffn * d + 10 * t * d;
}

inline FlopCount causal_step(std::uint64_t position, std::uint64_t d, std::uint64_t d_ffn) {
  return 8 * d * d + 4 * position * d + 4 * d_ffn * d + 10 * d;
}

inline FlopCount gru_step(std::uint64_t d_in, std::uint64_t d_h) {
  return 6 * d_in * d_h + 6 * d_h * d_h;
}

inline FlopCount layer_norm(std::uint64_t t, std::uint64_t d) { return 10 * t * d; }

}  // namespace flops

// flop_model(kind, T, shape). For kCausalStep, T is the new token's 1-based
// position; for kGruStep T counts sequential steps.
inline FlopCount flop_model(LayerKind kind, std::uint64_t t, const FlopShape& s) {
  if (t == 0) detail::contract_fail("flop_model: token count must be >= 1");
  switch (kind) {
    case LayerKind::kLinear:
      return flops::linear(t, s.d_in, s.d_out);
    case LayerKind::kAttention:
      return flops::attention_block(t, s.d_in, s.d_ffn);
    case LayerKind::kCausalStep:
      return flops::causal_step(t, s.d_in, s.d_ffn);
    case LayerKind::kGruStep:
      return t * flops::gru_step(s.d_in, s.d_out);
    case LayerKind::kLayerNorm:
      return flops::layer_norm(t, s.d_in);
  }
  return 0;
}

struct FlopEvent {
  std::string layer;  // e.g. "uni.0", "bi.1", "head.bi", "arm.gru"
  std::uint64_t tokens = 0;
  FlopCount flops = 0;
};

// Append-only record of charged computation.
class FlopLedger {
 public:
  void record(std::string layer, std::uint64_t tokens, FlopCount count) {
    events_.push_back({std::move(layer), tokens, count});
    total_ += count;
  }

  const std::vector<FlopEvent>& events() const { return events_; }
  FlopCount total() const { return total_; }
  std::size_t size() const { return events_.size(); }

  // Sum of events whose layer name starts with `prefix`.
  FlopCount total_for(const std::string& prefix) const {
    FlopCount n = 0;
    for (const auto& e : events_)
      if (e.layer.compare(0, prefix.size(), prefix) == 0) n += e.flops;
    return n;
  }

 private:
  std::vector<FlopEvent> events_;
  FlopCount total_ = 0;
};

}  // namespace hear
