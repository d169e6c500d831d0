#pragma once

#include <cmath>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "hear/errors.hpp"
#include "hear/graph.hpp"
#include "hear/params.hpp"

namespace hear {

using LossBuilder = std::function<Var(Graph&)>;

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::string worst_param;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
};

// Below this magnitude on both sides a coordinate is compared absolutely.
inline constexpr double kGradCheckAbsFloor = 1e-6;

inline double gradient_rel_error(double analytic, double numeric) {
  const double scale = std::max(std::abs(analytic), std::abs(numeric));
  if (scale < kGradCheckAbsFloor) return std::abs(analytic - numeric);
  return std::abs(analytic - numeric) / scale;
}

// Central differences on `probes` random trainable coordinates against the
// gradient from one backward pass. Parameters are restored afterwards.
inline GradCheckResult finite_difference_check(const LossBuilder& build_loss,
                                               ParameterSet& params,
                                               std::size_t probes, float eps,
                                               std::uint32_t seed = 0) {
  if (probes == 0) detail::contract_fail("finite_difference_check: no probes");
  auto eval = [&]() {
    Graph g(false);
    const double loss = g.scalar(build_loss(g));
    if (!std::isfinite(loss)) throw NumericError("loss is not finite");
    return loss;
  };

  params.zero_grad();
  {
    Graph g(true);
    Var loss = build_loss(g);
    if (!std::isfinite(g.value(loss)[0])) throw NumericError("loss is not finite");
    g.backward(loss);
  }

  std::vector<std::pair<Parameter*, std::string>> trainable;
  std::vector<std::size_t> sizes;
  std::size_t total = 0;
  for (auto& [name, p] : params) {
    if (!p.trainable) continue;
    trainable.emplace_back(&p, name);
    sizes.push_back(p.value.size());
    total += p.value.size();
  }
  if (total == 0) detail::contract_fail("finite_difference_check: nothing trainable");

  std::mt19937 rng(seed);
  std::uniform_int_distribution<std::size_t> pick(0, total - 1);
  GradCheckResult result;
  for (std::size_t probe = 0; probe < probes; ++probe) {
    std::size_t flat = pick(rng);
    std::size_t which = 0;
    while (flat >= sizes[which]) flat -= sizes[which++];
    Parameter& p = *trainable[which].first;
    const float analytic = p.has_grad() ? p.grad[flat] : 0.0f;
    const float saved = p.value[flat];
    const float hi = saved + eps;
    const float lo = saved - eps;
    p.value[flat] = hi;
    const double up = eval();
    p.value[flat] = lo;
    const double down = eval();
    p.value[flat] = saved;
    // Divide by the step actually taken after float rounding.
    const double numeric =
        (up - down) / (static_cast<double>(hi) - static_cast<double>(lo));
    const double err = gradient_rel_error(analytic, numeric);
    if (err >= result.max_rel_error) {
      result.max_rel_error = err;
      result.worst_param = trainable[which].second;
      result.worst_index = flat;
      result.worst_analytic = analytic;
      result.worst_numeric = numeric;
    }
  }
  params.zero_grad();
  return result;
}

}  // namespace hear
