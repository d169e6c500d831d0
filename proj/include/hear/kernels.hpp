#pragma once

// Forward/backward numeric kernels shared by the autodiff graph and the
// incremental streaming path. Both paths call the same per-row routines so
// a streamed row and the matching row of a full forward are computed with
// identical arithmetic.

#include <cmath>
#include <cstddef>
#include <limits>
#include <span>

#include "hear/tensor.hpp"

namespace hear::kernels {

inline constexpr float kLayerNormEps = 1e-5f;

// out (+)= a(m×k) · b(k×n)
inline void matmul(const float* a, const float* b, float* out, std::size_t m,
                   std::size_t k, std::size_t n, bool accumulate = false) {
  for (std::size_t i = 0; i < m; ++i) {
    float* o = out + i * n;
    if (!accumulate)
      for (std::size_t j = 0; j < n; ++j) o[j] = 0.0f;
    const float* ai = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const float av = ai[p];
      const float* bp = b + p * n;
      for (std::size_t j = 0; j < n; ++j) o[j] += av * bp[j];
    }
  }
}

// out(k×n) += a(m×k)^T · b(m×n)
inline void matmul_at_b_acc(const float* a, const float* b, float* out,
                            std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const float* ai = a + i * k;
    const float* bi = b + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const float av = ai[p];
      if (av == 0.0f) continue;
      float* o = out + p * n;
      for (std::size_t j = 0; j < n; ++j) o[j] += av * bi[j];
    }
  }
}

// out(m×k) += a(m×n) · b(k×n)^T
inline void matmul_a_bt_acc(const float* a, const float* b, float* out,
                            std::size_t m, std::size_t n, std::size_t k) {
  for (std::size_t i = 0; i < m; ++i) {
    const float* ai = a + i * n;
    float* o = out + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const float* bp = b + p * n;
      float s = 0.0f;
      for (std::size_t j = 0; j < n; ++j) s += ai[j] * bp[j];
      o[p] += s;
    }
  }
}

inline float dot(const float* a, const float* b, std::size_t n) {
  float s = 0.0f;
  for (std::size_t i = 0; i < n; ++i) s += a[i] * b[i];
  return s;
}

inline float sigmoid(float x) { return 1.0f / (1.0f + std::exp(-x)); }

inline constexpr float kGeluC = 0.7978845608028654f;  // sqrt(2/pi)

inline float gelu(float x) {
  const float u = kGeluC * (x + 0.044715f * x * x * x);
  return 0.5f * x * (1.0f + std::tanh(u));
}

inline float gelu_grad(float x) {
  const float u = kGeluC * (x + 0.044715f * x * x * x);
  const float th = std::tanh(u);
  const float du = kGeluC * (1.0f + 3.0f * 0.044715f * x * x);
  return 0.5f * (1.0f + th) + 0.5f * x * (1.0f - th * th) * du;
}

// In-place max-subtracted softmax.
inline void softmax(float* x, std::size_t n) {
  float mx = -std::numeric_limits<float>::infinity();
  for (std::size_t i = 0; i < n; ++i) mx = std::max(mx, x[i]);
  float sum = 0.0f;
  for (std::size_t i = 0; i < n; ++i) {
    x[i] = std::exp(x[i] - mx);
    sum += x[i];
  }
  const float inv = 1.0f / sum;
  for (std::size_t i = 0; i < n; ++i) x[i] *= inv;
}

inline float log_sum_exp(const float* x, std::size_t n) {
  float mx = -std::numeric_limits<float>::infinity();
  for (std::size_t i = 0; i < n; ++i) mx = std::max(mx, x[i]);
  float sum = 0.0f;
  for (std::size_t i = 0; i < n; ++i) sum += std::exp(x[i] - mx);
  return mx + std::log(sum);
}

// One row of layer normalization. Writes the normalized (pre-affine) values
// into xhat when given, and returns 1/sigma.
inline float layer_norm_row(const float* x, const float* gain,
                            const float* bias, float* out, std::size_t d,
                            float* xhat = nullptr) {
  float mean = 0.0f;
  for (std::size_t i = 0; i < d; ++i) mean += x[i];
  mean /= static_cast<float>(d);
  float var = 0.0f;
  for (std::size_t i = 0; i < d; ++i) {
    const float c = x[i] - mean;
    var += c * c;
  }
  var /= static_cast<float>(d);
  const float rstd = 1.0f / std::sqrt(var + kLayerNormEps);
  for (std::size_t i = 0; i < d; ++i) {
    const float h = (x[i] - mean) * rstd;
    if (xhat) xhat[i] = h;
    out[i] = h * gain[i] + bias[i];
  }
  return rstd;
}

// Attention for one query row against the first n_keys rows of K/V
// (row stride d). probs receives H×n_keys softmax weights, row-major by head.
inline void attend_row(const float* q, const float* keys, const float* vals,
                       std::size_t n_keys, std::size_t d, std::size_t heads,
                       float* out, float* probs) {
  const std::size_t dh = d / heads;
  const float scale = 1.0f / std::sqrt(static_cast<float>(dh));
  for (std::size_t h = 0; h < heads; ++h) {
    float* p = probs + h * n_keys;
    const float* qh = q + h * dh;
    for (std::size_t j = 0; j < n_keys; ++j)
      p[j] = dot(qh, keys + j * d + h * dh, dh) * scale;
    softmax(p, n_keys);
    float* oh = out + h * dh;
    for (std::size_t c = 0; c < dh; ++c) oh[c] = 0.0f;
    for (std::size_t j = 0; j < n_keys; ++j) {
      const float pj = p[j];
      const float* vj = vals + j * d + h * dh;
      for (std::size_t c = 0; c < dh; ++c) oh[c] += pj * vj[c];
    }
  }
}

// GRU cell (PyTorch gate layout r|z|n in the 3·dh columns).
//   r = σ(x Wx_r + bx_r + h Wh_r + bh_r)
//   z = σ(x Wx_z + bx_z + h Wh_z + bh_z)
//   n = tanh(x Wx_n + bx_n + r ⊙ (h Wh_n + bh_n))
//   h' = (1 − z) ⊙ n + z ⊙ h
// gates (optional, 4·dh) receives [r, z, n, h Wh_n + bh_n] for backward.
inline void gru_cell(const float* x, const float* h, const float* wx,
                     const float* wh, const float* bx, const float* bh,
                     std::size_t d_in, std::size_t dh, float* h_out,
                     float* gates, float* scratch /* 6·dh */) {
  float* gx = scratch;
  float* gh = scratch + 3 * dh;
  for (std::size_t j = 0; j < 3 * dh; ++j) {
    gx[j] = bx[j];
    gh[j] = bh[j];
  }
  matmul(x, wx, gx, 1, d_in, 3 * dh, true);
  matmul(h, wh, gh, 1, dh, 3 * dh, true);
  for (std::size_t j = 0; j < dh; ++j) {
    const float r = sigmoid(gx[j] + gh[j]);
    const float z = sigmoid(gx[dh + j] + gh[dh + j]);
    const float n = std::tanh(gx[2 * dh + j] + r * gh[2 * dh + j]);
    h_out[j] = (1.0f - z) * n + z * h[j];
    if (gates) {
      gates[j] = r;
      gates[dh + j] = z;
      gates[2 * dh + j] = n;
      gates[3 * dh + j] = gh[2 * dh + j];
    }
  }
}

}  // namespace hear::kernels
