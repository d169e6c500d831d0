#pragma once

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "hear/errors.hpp"
#include "hear/tensor.hpp"

namespace hear {

struct Parameter {
  Tensor value;
  Tensor grad;  // empty until a backward pass touches it
  bool trainable = true;
  Tensor adam_m;
  Tensor adam_v;

  bool has_grad() const { return !grad.empty(); }
  Tensor& ensure_grad() {
    if (grad.empty()) grad = Tensor(value.shape());
    return grad;
  }
};

// Named parameters in path order. std::map keeps addresses stable, so graph
// nodes may hold Parameter pointers across insertions.
class ParameterSet {
 public:
  Parameter& add(const std::string& path, Tensor value, bool trainable = true) {
    auto [it, inserted] = params_.try_emplace(path);
    if (!inserted) detail::contract_fail("duplicate parameter " + path);
    it->second.value = std::move(value);
    it->second.trainable = trainable;
    return it->second;
  }

  Parameter& at(const std::string& path) {
    auto it = params_.find(path);
    if (it == params_.end()) detail::contract_fail("unknown parameter " + path);
    return it->second;
  }
  const Parameter& at(const std::string& path) const {
    auto it = params_.find(path);
    if (it == params_.end()) detail::contract_fail("unknown parameter " + path);
    return it->second;
  }
  bool contains(const std::string& path) const {
    return params_.count(path) != 0;
  }

  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }
  std::size_t size() const { return params_.size(); }

  std::size_t value_count() const {
    std::size_t n = 0;
    for (const auto& [_, p] : params_) n += p.value.size();
    return n;
  }

  void zero_grad() {
    for (auto& [_, p] : params_) p.grad = Tensor();
  }

  // FNV-1a over names and raw value bytes; used to assert frozen weights.
  std::uint64_t checksum() const {
    std::uint64_t h = 1469598103934665603ull;
    auto mix = [&h](const void* data, std::size_t n) {
      const auto* b = static_cast<const unsigned char*>(data);
      for (std::size_t i = 0; i < n; ++i) {
        h ^= b[i];
        h *= 1099511628211ull;
      }
    };
    for (const auto& [name, p] : params_) {
      mix(name.data(), name.size());
      mix(p.value.data(), p.value.size() * sizeof(float));
    }
    return h;
  }

 private:
  std::map<std::string, Parameter> params_;
};

// Seeded initializers.
inline Tensor uniform_init(const Shape& shape, float bound, std::mt19937& rng) {
  std::uniform_real_distribution<float> dist(-bound, bound);
  Tensor t(shape);
  for (auto& v : t.values()) v = dist(rng);
  return t;
}

// Weight matrix d_in×d_out drawn from U(−1/√d_in, 1/√d_in).
inline Tensor weight_init(std::size_t d_in, std::size_t d_out,
                          std::mt19937& rng) {
  return uniform_init({d_in, d_out}, 1.0f / std::sqrt(static_cast<float>(d_in)),
                      rng);
}

struct AdamConfig {
  float lr = 1e-3f;
  float beta1 = 0.9f;
  float beta2 = 0.999f;
  float eps = 1e-8f;
};

class Adam {
 public:
  explicit Adam(AdamConfig config = {}) : config_(config) {}

  const AdamConfig& config() const { return config_; }
  void set_lr(float lr) { config_.lr = lr; }
  std::int64_t steps() const { return step_; }

  // Bias-corrected update of every trainable parameter, then clears grads.
  void step(ParameterSet& params) {
    for (auto& [name, p] : params) {
      if (p.trainable && !p.has_grad())
        detail::contract_fail("missing gradient for trainable parameter " +
                              name);
    }
    ++step_;
    const float c1 =
        1.0f - std::pow(config_.beta1, static_cast<float>(step_));
    const float c2 =
        1.0f - std::pow(config_.beta2, static_cast<float>(step_));
    for (auto& [name, p] : params) {
      if (!p.trainable) continue;
      if (p.adam_m.empty()) {
        p.adam_m = Tensor(p.value.shape());
        p.adam_v = Tensor(p.value.shape());
      }
      float* w = p.value.data();
      float* m = p.adam_m.data();
      float* v = p.adam_v.data();
      const float* g = p.grad.data();
      for (std::size_t i = 0; i < p.value.size(); ++i) {
        m[i] = config_.beta1 * m[i] + (1.0f - config_.beta1) * g[i];
        v[i] = config_.beta2 * v[i] + (1.0f - config_.beta2) * g[i] * g[i];
        const float mhat = m[i] / c1;
        const float vhat = v[i] / c2;
        w[i] -= config_.lr * mhat / (std::sqrt(vhat) + config_.eps);
      }
    }
    params.zero_grad();
  }

 private:
  AdamConfig config_;
  std::int64_t step_ = 0;
};

// ---------------------------------------------------------------------------
// Serialization: a JSON manifest (path, shape, byte offset) plus a flat blob
// of little-endian float32 values.

namespace detail {

inline std::uint32_t to_little_endian(std::uint32_t v) {
  if constexpr (std::endian::native == std::endian::big) {
    return ((v & 0xffu) << 24) | ((v & 0xff00u) << 8) |
           ((v & 0xff0000u) >> 8) | (v >> 24);
  }
  return v;
}

}  // namespace detail

inline nlohmann::json write_parameters(const ParameterSet& params,
                                       const std::string& blob_path) {
  std::ofstream out(blob_path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + blob_path);
  nlohmann::json manifest = nlohmann::json::array();
  std::uint64_t offset = 0;
  for (const auto& [name, p] : params) {
    manifest.push_back({{"path", name},
                        {"shape", p.value.shape()},
                        {"offset", offset},
                        {"trainable", p.trainable}});
    for (float f : p.value.values()) {
      std::uint32_t bits = detail::to_little_endian(std::bit_cast<std::uint32_t>(f));
      out.write(reinterpret_cast<const char*>(&bits), sizeof bits);
    }
    offset += p.value.size() * sizeof(float);
  }
  if (!out) throw IoError("short write to " + blob_path);
  return manifest;
}

inline ParameterSet read_parameters(const nlohmann::json& manifest,
                                    const std::string& blob_path) {
  std::ifstream in(blob_path, std::ios::binary);
  if (!in) throw IoError("cannot read " + blob_path);
  std::vector<char> blob((std::istreambuf_iterator<char>(in)),
                         std::istreambuf_iterator<char>());
  ParameterSet params;
  for (const auto& entry : manifest) {
    Shape shape = entry.at("shape").get<Shape>();
    const auto offset = entry.at("offset").get<std::uint64_t>();
    const std::size_t n = shape_size(shape);
    if (offset + n * sizeof(float) > blob.size())
      throw IoError("parameter blob truncated at " +
                    entry.at("path").get<std::string>());
    std::vector<float> values(n);
    for (std::size_t i = 0; i < n; ++i) {
      std::uint32_t bits;
      std::memcpy(&bits, blob.data() + offset + i * sizeof(float), sizeof bits);
      values[i] = std::bit_cast<float>(detail::to_little_endian(bits));
    }
    params.add(entry.at("path").get<std::string>(),
               Tensor(std::move(shape), std::move(values)),
               entry.value("trainable", true));
  }
  return params;
}

}  // namespace hear
