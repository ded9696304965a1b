#pragma once

#include <cstdint>

#include "mfpam/autodiff.hpp"
#include "mfpam/ops.hpp"
#include "mfpam/random.hpp"

namespace mfpam::testing {

inline Tensor<double> random_tensor(Shape shape, std::uint64_t seed, double lo = -1.0,
                                    double hi = 1.0) {
  Rng rng(seed);
  Tensor<double> t(std::move(shape));
  for (auto& v : t.storage()) v = rng.uniform(lo, hi);
  return t;
}

inline Var<double> random_var(Shape shape, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
  return make_var(random_tensor(std::move(shape), seed, lo, hi), true);
}

/// Weighted sum with fixed random coefficients, so every output element
/// gets a distinct upstream gradient.
inline Var<double> probe(Tape<double>& tape, const Var<double>& y, std::uint64_t seed = 99) {
  auto coeff = constant(random_tensor(y->value.shape(), seed));
  return sum(tape, mul(tape, y, coeff));
}

}  // namespace mfpam::testing
