#pragma once

// Tape-based reverse-mode differentiation over 2-D float tensors.
//
// A Graph records nodes in creation order; backward() walks the tape in
// reverse. Parameter leaves accumulate straight into Parameter::grad, so
// several graphs (one per sentence of a batch) can feed one optimizer step.

#include <cmath>
#include <cstddef>
#include <functional>
#include <span>
#include <unordered_map>
#include <vector>

#include "hear/errors.hpp"
#include "hear/kernels.hpp"
#include "hear/params.hpp"
#include "hear/tensor.hpp"

namespace hear {

struct Var {
  std::size_t id = static_cast<std::size_t>(-1);
  bool valid() const { return id != static_cast<std::size_t>(-1); }
};

class Graph {
 public:
  explicit Graph(bool record_grad = true) : record_(record_grad) {}

  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  bool recording() const { return record_; }

  // Scalar losses keep a double-precision copy of their value; other nodes
  // fall back to the stored float.
  double scalar(Var v) const {
    if (value(v).size() != 1) detail::contract_fail("scalar: node is not a scalar");
    auto it = precise_.find(v.id);
    return it != precise_.end() ? it->second : static_cast<double>(value(v)[0]);
  }

  const Tensor& value(Var v) const {
    const Node& n = nodes_.at(v.id);
    return n.param ? n.param->value : n.value;
  }

  // Gradient of the last backward() with respect to a non-parameter node.
  const Tensor& grad(Var v) const { return nodes_.at(v.id).grad; }

  Var param(Parameter& p) {
    Node n;
    n.param = &p;
    n.requires_grad = record_ && p.trainable;
    return push(std::move(n));
  }

  Var constant(Tensor t) {
    Node n;
    n.value = std::move(t);
    return push(std::move(n));
  }

  // Same value, no gradient path back to the input.
  Var detach(Var x) { return constant(value(x)); }

  Var embedding(Var table, std::span<const int> ids) {
    const Tensor& tab = value(table);
    const std::size_t d = tab.cols();
    Tensor out({ids.size(), d});
    for (std::size_t i = 0; i < ids.size(); ++i) {
      if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= tab.rows())
        throw InputError("embedding id " + std::to_string(ids[i]) +
                         " out of range");
      auto src = tab.row(static_cast<std::size_t>(ids[i]));
      std::copy(src.begin(), src.end(), out.row(i).begin());
    }
    std::vector<int> saved(ids.begin(), ids.end());
    return make(std::move(out), {table}, [this, table, saved](Var self) {
      Tensor& gt = grad_of(table);
      const Tensor& g = grad(self);
      for (std::size_t i = 0; i < saved.size(); ++i) {
        auto src = g.row(i);
        auto dst = gt.row(static_cast<std::size_t>(saved[i]));
        for (std::size_t c = 0; c < src.size(); ++c) dst[c] += src[c];
      }
    });
  }

  Var add(Var a, Var b) {
    const Tensor& av = value(a);
    const Tensor& bv = value(b);
    if (!av.same_shape(bv)) detail::contract_fail("add: shape mismatch");
    Tensor out = av;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
    const bool scalar_pair = out.size() == 1;
    Var v = make(std::move(out), {a, b}, [this, a, b](Var self) {
      const Tensor& g = grad(self);
      for (Var p : {a, b}) {
        if (!needs_grad(p)) continue;
        Tensor& gp = grad_of(p);
        for (std::size_t i = 0; i < g.size(); ++i) gp[i] += g[i];
      }
    });
    if (scalar_pair && (precise_.count(a.id) || precise_.count(b.id)))
      precise_[v.id] = scalar(a) + scalar(b);
    return v;
  }

  Var scale(Var x, float s) {
    Tensor out = value(x);
    for (auto& v : out.values()) v *= s;
    Var v = make(std::move(out), {x}, [this, x, s](Var self) {
      const Tensor& g = grad(self);
      Tensor& gx = grad_of(x);
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += s * g[i];
    });
    if (precise_.count(x.id)) precise_[v.id] = scalar(x) * static_cast<double>(s);
    return v;
  }

  // y = x·W (+ b). x: T×d_in, W: d_in×d_out, b: d_out.
  Var linear(Var x, Var w, Var b = {}) {
    const Tensor& xv = value(x);
    const Tensor& wv = value(w);
    if (wv.rank() != 2 || xv.cols() != wv.rows())
      detail::contract_fail("linear: cannot multiply " + shape_str(xv.shape()) +
                            " by " + shape_str(wv.shape()));
    const std::size_t t = xv.rows(), din = wv.rows(), dout = wv.cols();
    Tensor out({t, dout});
    if (b.valid()) {
      const Tensor& bv = value(b);
      if (bv.size() != dout) detail::contract_fail("linear: bias width mismatch");
      for (std::size_t i = 0; i < t; ++i)
        std::copy(bv.data(), bv.data() + dout, out.row(i).begin());
    }
    kernels::matmul(xv.data(), wv.data(), out.data(), t, din, dout, b.valid());
    return make(std::move(out), {x, w, b},
                [this, x, w, b, t, din, dout](Var self) {
                  const Tensor& g = grad(self);
                  if (needs_grad(w))
                    kernels::matmul_at_b_acc(value(x).data(), g.data(),
                                             grad_of(w).data(), t, din, dout);
                  if (b.valid() && needs_grad(b)) {
                    Tensor& gb = grad_of(b);
                    for (std::size_t i = 0; i < t; ++i)
                      for (std::size_t j = 0; j < dout; ++j)
                        gb[j] += g.at(i, j);
                  }
                  if (needs_grad(x))
                    kernels::matmul_a_bt_acc(g.data(), value(w).data(),
                                             grad_of(x).data(), t, dout, din);
                });
  }

  Var layer_norm(Var x, Var gain, Var bias) {
    const Tensor& xv = value(x);
    const std::size_t t = xv.rows(), d = xv.cols();
    if (d == 0) detail::contract_fail("layer_norm: empty row");
    if (value(gain).size() != d || value(bias).size() != d)
      detail::contract_fail("layer_norm: affine width mismatch");
    Tensor out(xv.shape());
    Tensor xhat(xv.shape());
    std::vector<float> rstd(t);
    for (std::size_t i = 0; i < t; ++i)
      rstd[i] = kernels::layer_norm_row(&xv.row(i)[0], value(gain).data(),
                                        value(bias).data(), &out.row(i)[0], d,
                                        &xhat.row(i)[0]);
    return make(std::move(out), {x, gain, bias},
                [this, x, gain, bias, t, d, xhat = std::move(xhat),
                 rstd = std::move(rstd)](Var self) {
                  const Tensor& g = grad(self);
                  const float* gv = value(gain).data();
                  if (needs_grad(gain) || needs_grad(bias)) {
                    Tensor& gg = grad_of(gain);
                    Tensor& gb = grad_of(bias);
                    for (std::size_t i = 0; i < t; ++i)
                      for (std::size_t c = 0; c < d; ++c) {
                        gg[c] += g.at(i, c) * xhat.at(i, c);
                        gb[c] += g.at(i, c);
                      }
                  }
                  if (!needs_grad(x)) return;
                  Tensor& gx = grad_of(x);
                  const float inv_d = 1.0f / static_cast<float>(d);
                  for (std::size_t i = 0; i < t; ++i) {
                    float sum_dy = 0.0f, sum_dy_xhat = 0.0f;
                    for (std::size_t c = 0; c < d; ++c) {
                      const float dy = g.at(i, c) * gv[c];
                      sum_dy += dy;
                      sum_dy_xhat += dy * xhat.at(i, c);
                    }
                    for (std::size_t c = 0; c < d; ++c) {
                      const float dy = g.at(i, c) * gv[c];
                      gx.at(i, c) += rstd[i] * (dy - inv_d * sum_dy -
                                                xhat.at(i, c) * inv_d * sum_dy_xhat);
                    }
                  }
                });
  }

  // tanh-approximated GELU.
  Var gelu(Var x) {
    Tensor out = value(x);
    for (auto& v : out.values()) v = kernels::gelu(v);
    return make(std::move(out), {x}, [this, x](Var self) {
      const Tensor& g = grad(self);
      const Tensor& in = value(x);
      Tensor& gx = grad_of(x);
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * kernels::gelu_grad(in[i]);
    });
  }

  Var relu(Var x) {
    Tensor out = value(x);
    for (auto& v : out.values()) v = v > 0.0f ? v : 0.0f;
    return make(std::move(out), {x}, [this, x](Var self) {
      const Tensor& g = grad(self);
      const Tensor& y = value(self);
      Tensor& gx = grad_of(x);
      for (std::size_t i = 0; i < g.size(); ++i)
        if (y[i] > 0.0f) gx[i] += g[i];
    });
  }

  // Scaled dot-product attention over `heads` heads. q, k, v: T×d.
  Var attention(Var q, Var k, Var v, std::size_t heads, bool causal) {
    const Tensor& qv = value(q);
    const Tensor& kv = value(k);
    const Tensor& vv = value(v);
    const std::size_t t = qv.rows(), d = qv.cols();
    if (heads == 0 || d % heads != 0)
      detail::contract_fail("attention: width not divisible by head count");
    if (!kv.same_shape(qv) || !vv.same_shape(qv))
      detail::contract_fail("attention: q/k/v shape mismatch");
    Tensor out({t, d});
    // probs[i] holds H×n_keys(i) weights for query row i.
    std::vector<std::vector<float>> probs(t);
    for (std::size_t i = 0; i < t; ++i) {
      const std::size_t n_keys = causal ? i + 1 : t;
      probs[i].resize(heads * n_keys);
      kernels::attend_row(&qv.row(i)[0], kv.data(), vv.data(), n_keys, d, heads,
                          &out.row(i)[0], probs[i].data());
    }
    return make(std::move(out), {q, k, v},
                [this, q, k, v, heads, causal, t, d,
                 probs = std::move(probs)](Var self) {
                  const Tensor& g = grad(self);
                  const Tensor& qv = value(q);
                  const Tensor& kv = value(k);
                  const Tensor& vv = value(v);
                  Tensor& gq = grad_of(q);
                  Tensor& gk = grad_of(k);
                  Tensor& gvv = grad_of(v);
                  const std::size_t dh = d / heads;
                  const float scale = 1.0f / std::sqrt(static_cast<float>(dh));
                  std::vector<float> dp(t);
                  for (std::size_t i = 0; i < t; ++i) {
                    const std::size_t n_keys = causal ? i + 1 : t;
                    for (std::size_t h = 0; h < heads; ++h) {
                      const float* p = probs[i].data() + h * n_keys;
                      const float* gi = &g.row(i)[h * dh];
                      float dot_pdp = 0.0f;
                      for (std::size_t j = 0; j < n_keys; ++j) {
                        dp[j] = kernels::dot(gi, &vv.row(j)[h * dh], dh);
                        dot_pdp += p[j] * dp[j];
                        float* gvj = &gvv.row(j)[h * dh];
                        for (std::size_t c = 0; c < dh; ++c) gvj[c] += p[j] * gi[c];
                      }
                      float* gqi = &gq.row(i)[h * dh];
                      const float* qi = &qv.row(i)[h * dh];
                      for (std::size_t j = 0; j < n_keys; ++j) {
                        const float ds = p[j] * (dp[j] - dot_pdp) * scale;
                        if (ds == 0.0f) continue;
                        const float* kj = &kv.row(j)[h * dh];
                        float* gkj = &gk.row(j)[h * dh];
                        for (std::size_t c = 0; c < dh; ++c) {
                          gqi[c] += ds * kj[c];
                          gkj[c] += ds * qi[c];
                        }
                      }
                    }
                  }
                });
  }

  // Row i of a 2-D node as a 1×d node.
  Var row(Var x, std::size_t i) {
    const Tensor& xv = value(x);
    if (i >= xv.rows()) detail::contract_fail("row index out of range");
    auto r = xv.row(i);
    Tensor out({1, xv.cols()}, std::vector<float>(r.begin(), r.end()));
    return make(std::move(out), {x}, [this, x, i](Var self) {
      const Tensor& g = grad(self);
      auto dst = grad_of(x).row(i);
      for (std::size_t c = 0; c < dst.size(); ++c) dst[c] += g[c];
    });
  }

  // Stacks 1×d rows into an n×d node.
  Var stack_rows(const std::vector<Var>& rows) {
    if (rows.empty()) detail::contract_fail("stack_rows: no rows");
    const std::size_t d = value(rows[0]).cols();
    Tensor out({rows.size(), d});
    for (std::size_t i = 0; i < rows.size(); ++i) {
      const Tensor& r = value(rows[i]);
      if (r.size() != d) detail::contract_fail("stack_rows: width mismatch");
      std::copy(r.data(), r.data() + d, out.row(i).begin());
    }
    return make(std::move(out), rows, [this, rows, d](Var self) {
      const Tensor& g = grad(self);
      for (std::size_t i = 0; i < rows.size(); ++i) {
        if (!needs_grad(rows[i])) continue;
        Tensor& gr = grad_of(rows[i]);
        for (std::size_t c = 0; c < d; ++c) gr[c] += g.at(i, c);
      }
    });
  }

  // Column-wise concatenation of equal-height nodes.
  Var concat_cols(const std::vector<Var>& parts) {
    if (parts.empty()) detail::contract_fail("concat_cols: no parts");
    const std::size_t t = value(parts[0]).rows();
    std::size_t width = 0;
    for (Var p : parts) {
      if (value(p).rows() != t) detail::contract_fail("concat_cols: height mismatch");
      width += value(p).cols();
    }
    Tensor out({t, width});
    std::size_t off = 0;
    for (Var p : parts) {
      const Tensor& pv = value(p);
      for (std::size_t i = 0; i < t; ++i)
        std::copy(pv.row(i).begin(), pv.row(i).end(), out.row(i).begin() + off);
      off += pv.cols();
    }
    return make(std::move(out), parts, [this, parts, t](Var self) {
      const Tensor& g = grad(self);
      std::size_t off = 0;
      for (Var p : parts) {
        const std::size_t w = value(p).cols();
        if (needs_grad(p)) {
          Tensor& gp = grad_of(p);
          for (std::size_t i = 0; i < t; ++i)
            for (std::size_t c = 0; c < w; ++c) gp.at(i, c) += g.at(i, off + c);
        }
        off += w;
      }
    });
  }

  // One GRU step; x: 1×d_in, h: 1×d_h, wx: d_in×3d_h, wh: d_h×3d_h.
  Var gru_cell(Var x, Var h, Var wx, Var wh, Var bx, Var bh) {
    const Tensor& xv = value(x);
    const Tensor& hv = value(h);
    const Tensor& wxv = value(wx);
    const Tensor& whv = value(wh);
    const std::size_t din = xv.size(), dh = hv.size();
    if (wxv.rows() != din || wxv.cols() != 3 * dh || whv.rows() != dh ||
        whv.cols() != 3 * dh || value(bx).size() != 3 * dh ||
        value(bh).size() != 3 * dh)
      detail::contract_fail("gru_cell: shape mismatch");
    Tensor out({1, dh});
    std::vector<float> gates(4 * dh), scratch(6 * dh);
    kernels::gru_cell(xv.data(), hv.data(), wxv.data(), whv.data(),
                      value(bx).data(), value(bh).data(), din, dh, out.data(),
                      gates.data(), scratch.data());
    return make(
        std::move(out), {x, h, wx, wh, bx, bh},
        [this, x, h, wx, wh, bx, bh, din, dh, gates = std::move(gates)](Var self) {
          const Tensor& g = grad(self);
          const Tensor& hv = value(h);
          std::vector<float> dgx(3 * dh), dgh(3 * dh);
          for (std::size_t j = 0; j < dh; ++j) {
            const float r = gates[j], z = gates[dh + j], n = gates[2 * dh + j];
            const float hn = gates[3 * dh + j];
            const float dn = g[j] * (1.0f - z);
            const float dz = g[j] * (hv[j] - n);
            const float dan = dn * (1.0f - n * n);
            const float dr = dan * hn;
            const float daz = dz * z * (1.0f - z);
            const float dar = dr * r * (1.0f - r);
            dgx[j] = dar;
            dgx[dh + j] = daz;
            dgx[2 * dh + j] = dan;
            dgh[j] = dar;
            dgh[dh + j] = daz;
            dgh[2 * dh + j] = dan * r;
          }
          if (needs_grad(bx)) {
            Tensor& gb = grad_of(bx);
            for (std::size_t j = 0; j < 3 * dh; ++j) gb[j] += dgx[j];
          }
          if (needs_grad(bh)) {
            Tensor& gb = grad_of(bh);
            for (std::size_t j = 0; j < 3 * dh; ++j) gb[j] += dgh[j];
          }
          if (needs_grad(wx))
            kernels::matmul_at_b_acc(value(x).data(), dgx.data(),
                                     grad_of(wx).data(), 1, din, 3 * dh);
          if (needs_grad(wh))
            kernels::matmul_at_b_acc(hv.data(), dgh.data(), grad_of(wh).data(), 1,
                                     dh, 3 * dh);
          if (needs_grad(x))
            kernels::matmul_a_bt_acc(dgx.data(), value(wx).data(),
                                     grad_of(x).data(), 1, 3 * dh, din);
          if (needs_grad(h)) {
            Tensor& gh = grad_of(h);
            for (std::size_t j = 0; j < dh; ++j)
              gh[j] += g[j] * gates[dh + j];
            kernels::matmul_a_bt_acc(dgh.data(), value(wh).data(), gh.data(), 1,
                                     3 * dh, dh);
          }
        });
  }

  // Mean negative log-likelihood over unmasked rows. An empty mask means
  // every row counts.
  Var softmax_cross_entropy(Var logits, std::span<const int> targets,
                            std::span<const bool> mask = {}) {
    const Tensor& lv = value(logits);
    const std::size_t t = lv.rows(), c = lv.cols();
    if (targets.size() != t) detail::contract_fail("cross entropy: target count mismatch");
    if (!mask.empty() && mask.size() != t)
      detail::contract_fail("cross entropy: mask length mismatch");
    std::size_t count = 0;
    double loss = 0.0;
    Tensor probs({t, c});
    for (std::size_t i = 0; i < t; ++i) {
      const bool on = mask.empty() || mask[i];
      if (!on) continue;
      if (targets[i] < 0 || static_cast<std::size_t>(targets[i]) >= c)
        throw InputError("cross entropy: target " + std::to_string(targets[i]) +
                         " out of range");
      const float* row = &lv.row(i)[0];
      const float lse = kernels::log_sum_exp(row, c);
      double m = row[0];
      for (std::size_t j = 1; j < c; ++j) m = std::max(m, static_cast<double>(row[j]));
      double sum = 0.0;
      for (std::size_t j = 0; j < c; ++j) sum += std::exp(row[j] - m);
      loss += m + std::log(sum) - row[targets[i]];
      for (std::size_t j = 0; j < c; ++j) probs.at(i, j) = std::exp(row[j] - lse);
      ++count;
    }
    if (count == 0) throw InputError("cross entropy: every position is masked");
    loss /= static_cast<double>(count);
    Tensor out({1}, static_cast<float>(loss));
    std::vector<int> tg(targets.begin(), targets.end());
    std::vector<bool> mk(mask.begin(), mask.end());
    Var v = make(std::move(out), {logits},
                [this, logits, t, c, count, probs = std::move(probs),
                 tg = std::move(tg), mk = std::move(mk)](Var self) {
                  const float up = grad(self)[0] / static_cast<float>(count);
                  Tensor& gl = grad_of(logits);
                  for (std::size_t i = 0; i < t; ++i) {
                    if (!mk.empty() && !mk[i]) continue;
                    for (std::size_t j = 0; j < c; ++j) {
                      const float onehot =
                          static_cast<int>(j) == tg[i] ? 1.0f : 0.0f;
                      gl.at(i, j) += up * (probs.at(i, j) - onehot);
                    }
                  }
                });
    precise_[v.id] = loss;
    return v;
  }

  // Mean binary cross entropy of sigmoid(logits) against 0/1 targets.
  // logits: T×1.
  Var bce_with_logits(Var logits, std::span<const int> targets) {
    const Tensor& lv = value(logits);
    const std::size_t t = lv.size();
    if (targets.size() != t) detail::contract_fail("bce: target count mismatch");
    if (t == 0) throw InputError("bce: empty input");
    double loss = 0.0;
    std::vector<float> p(t);
    for (std::size_t i = 0; i < t; ++i) {
      const float z = lv[i];
      p[i] = kernels::sigmoid(z);
      // log(1 + e^{-|z|}) + max(z, 0) − z·y
      const double zd = z;
      loss += std::log1p(std::exp(-std::abs(zd))) + std::max(zd, 0.0) -
              zd * static_cast<double>(targets[i]);
    }
    loss /= static_cast<double>(t);
    Tensor out({1}, static_cast<float>(loss));
    std::vector<int> tg(targets.begin(), targets.end());
    Var v = make(std::move(out), {logits},
                [this, logits, t, p = std::move(p), tg = std::move(tg)](Var self) {
                  const float up = grad(self)[0] / static_cast<float>(t);
                  Tensor& gl = grad_of(logits);
                  for (std::size_t i = 0; i < t; ++i)
                    gl[i] += up * (p[i] - static_cast<float>(tg[i]));
                });
    precise_[v.id] = loss;
    return v;
  }

  // Seeds d(loss)/d(loss) = 1 and propagates to every recorded node.
  void backward(Var loss) {
    if (!record_) detail::contract_fail("backward on a non-recording graph");
    if (value(loss).size() != 1) detail::contract_fail("backward: loss is not scalar");
    if (!needs_grad(loss)) return;
    grad_of(loss)[0] += 1.0f;
    for (std::size_t i = loss.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (n.backward && n.requires_grad && !n.grad.empty()) n.backward(Var{i});
    }
  }

 private:
  std::unordered_map<std::size_t, double> precise_;

  struct Node {
    Tensor value;
    Tensor grad;
    Parameter* param = nullptr;
    bool requires_grad = false;
    std::function<void(Var)> backward;
  };

  Var push(Node n) {
    nodes_.push_back(std::move(n));
    return Var{nodes_.size() - 1};
  }

  bool needs_grad(Var v) const { return v.valid() && nodes_[v.id].requires_grad; }

  Tensor& grad_of(Var v) {
    Node& n = nodes_[v.id];
    if (n.param) return n.param->ensure_grad();
    if (n.grad.empty()) n.grad = Tensor(n.value.shape());
    return n.grad;
  }

  Var make(Tensor out, std::initializer_list<Var> parents,
           std::function<void(Var)> backward) {
    return make(std::move(out), std::vector<Var>(parents), std::move(backward));
  }

  Var make(Tensor out, const std::vector<Var>& parents,
           std::function<void(Var)> backward) {
    Node n;
    n.value = std::move(out);
    if (record_)
      for (Var p : parents)
        if (needs_grad(p)) n.requires_grad = true;
    if (n.requires_grad) n.backward = std::move(backward);
    return push(std::move(n));
  }

  bool record_;
  std::vector<Node> nodes_;
};

}  // namespace hear
