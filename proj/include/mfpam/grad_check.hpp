#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <random>
#include <vector>

#include "mfpam/autodiff.hpp"

namespace mfpam {

struct GradCheckReport {
  double max_rel_err = 0.0;
  double max_abs_err = 0.0;
  std::size_t checked = 0;
  bool finite = true;
  bool pass = false;
};

struct GradCheckOptions {
  double tolerance = 1e-4;
  double step = 1e-5;
  // denominators below this are treated as this value, so gradients that
  // are numerically zero are compared in absolute terms
  double abs_floor = 1e-6;
  // 0 checks every element; otherwise a seeded subsample of this size
  std::size_t subsample = 0;
  std::uint64_t seed = 0;
};

/// Compares reverse-mode gradients of a scalar function against central
/// finite differences, perturbing each element of `inputs` in place.
/// `fn` must build the computation on the tape it is handed and return a
/// scalar.
inline GradCheckReport grad_check(
    const std::function<Var<double>(Tape<double>&)>& fn,
    const std::vector<Var<double>>& inputs, GradCheckOptions opt = {}) {
  GradCheckReport rep;
  for (const auto& in : inputs) {
    in->requires_grad = true;
    in->ensure_grad().fill(0.0);
  }
  {
    Tape<double> tape;
    auto loss = fn(tape);
    if (!loss->value.all_finite()) {
      rep.finite = false;
      return rep;
    }
    tape.backward(loss);
  }
  std::vector<Tensor<double>> analytic;
  for (const auto& in : inputs) analytic.push_back(in->grad);

  std::vector<std::pair<std::size_t, std::size_t>> sites;
  for (std::size_t v = 0; v < inputs.size(); ++v)
    for (std::size_t i = 0; i < inputs[v]->value.size(); ++i) sites.emplace_back(v, i);
  if (opt.subsample && opt.subsample < sites.size()) {
    std::mt19937_64 rng(opt.seed);
    std::shuffle(sites.begin(), sites.end(), rng);
    sites.resize(opt.subsample);
  }

  auto eval = [&]() {
    Tape<double> tape;
    auto out = fn(tape);
    return out->value[0];
  };
  for (auto [v, i] : sites) {
    double& x = inputs[v]->value[i];
    const double saved = x;
    x = saved + opt.step;
    const double fp = eval();
    x = saved - opt.step;
    const double fm = eval();
    x = saved;
    if (!std::isfinite(fp) || !std::isfinite(fm)) {
      rep.finite = false;
      return rep;
    }
    const double numeric = (fp - fm) / (2.0 * opt.step);
    const double a = analytic[v][i];
    const double abs_err = std::abs(a - numeric);
    const double denom = std::max({std::abs(a), std::abs(numeric), opt.abs_floor});
    rep.max_abs_err = std::max(rep.max_abs_err, abs_err);
    rep.max_rel_err = std::max(rep.max_rel_err, abs_err / denom);
    ++rep.checked;
  }
  rep.pass = rep.finite && rep.max_rel_err < opt.tolerance;
  return rep;
}

}  // namespace mfpam
