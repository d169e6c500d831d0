#pragma once

#include <algorithm>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "hear/errors.hpp"

namespace hear {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += "x";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

// Dense row-major float32 tensor. Rank 0..2 covers everything the models
// need; higher ranks are representable but only the 1-D/2-D accessors exist.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, float fill = 0.0f)
      : shape_(std::move(shape)), values_(shape_size(shape_), fill) {}
  Tensor(Shape shape, std::vector<float> values)
      : shape_(std::move(shape)), values_(std::move(values)) {
    if (values_.size() != shape_size(shape_))
      detail::contract_fail("tensor value count " +
                            std::to_string(values_.size()) +
                            " does not match shape " + shape_str(shape_));
  }

  static Tensor matrix(std::size_t rows, std::size_t cols,
                       std::initializer_list<float> values) {
    return Tensor({rows, cols}, std::vector<float>(values));
  }
  static Tensor vector(std::initializer_list<float> values) {
    return Tensor({values.size()}, std::vector<float>(values));
  }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return values_.size(); }
  bool empty() const { return values_.empty(); }

  // Rows/cols view a rank-1 tensor as a single row.
  std::size_t rows() const {
    return shape_.size() >= 2 ? shape_[0] : std::size_t{1};
  }
  std::size_t cols() const { return shape_.empty() ? 1 : shape_.back(); }

  float* data() { return values_.data(); }
  const float* data() const { return values_.data(); }
  std::span<float> values() { return values_; }
  std::span<const float> values() const { return values_; }

  float& operator[](std::size_t i) { return values_[i]; }
  float operator[](std::size_t i) const { return values_[i]; }
  float& at(std::size_t r, std::size_t c) { return values_[r * cols() + c]; }
  float at(std::size_t r, std::size_t c) const {
    return values_[r * cols() + c];
  }

  std::span<float> row(std::size_t r) {
    return {values_.data() + r * cols(), cols()};
  }
  std::span<const float> row(std::size_t r) const {
    return {values_.data() + r * cols(), cols()};
  }

  void fill(float v) { std::fill(values_.begin(), values_.end(), v); }
  void zero() { fill(0.0f); }

  // Appends one row to a 2-D tensor (or promotes an empty tensor to 1×n).
  void append_row(std::span<const float> r) {
    if (shape_.empty() || values_.empty()) {
      shape_ = {0, r.size()};
    }
    if (shape_.size() != 2 || shape_[1] != r.size())
      detail::contract_fail("append_row width mismatch");
    values_.insert(values_.end(), r.begin(), r.end());
    ++shape_[0];
  }

  // Leading rows as a new tensor.
  Tensor head_rows(std::size_t n) const {
    if (n > rows()) detail::contract_fail("head_rows out of range");
    return Tensor({n, cols()},
                  std::vector<float>(values_.begin(),
                                     values_.begin() + n * cols()));
  }

  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.values_ == b.values_;
  }

 private:
  Shape shape_;
  std::vector<float> values_;
};

inline float max_abs_diff(const Tensor& a, const Tensor& b) {
  if (a.size() != b.size()) detail::contract_fail("max_abs_diff size mismatch");
  float m = 0.0f;
  for (std::size_t i = 0; i < a.size(); ++i)
    m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace hear
