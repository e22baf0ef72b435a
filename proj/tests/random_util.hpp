#pragma once

#include <cstdint>

#include "rfm/autograd.hpp"
#include "rfm/random.hpp"
#include "rfm/tensor.hpp"

namespace rfm::testing {

inline Tensor random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t(std::move(shape));
  for (auto& v : t.storage()) v = rng.uniform(lo, hi);
  return t;
}

inline Var random_var(Shape shape, Rng& rng, bool requires_grad = true, double lo = -1.0, double hi = 1.0) {
  return Var(random_tensor(std::move(shape), rng, lo, hi), requires_grad);
}

/// Values bounded away from zero so ReLU kinks sit far from every probe.
inline Tensor random_signed(Shape shape, Rng& rng, double min_abs = 0.1) {
  Tensor t(std::move(shape));
  for (auto& v : t.storage()) {
    const double m = rng.uniform(min_abs, 1.0);
    v = rng.uniform() < 0.5 ? -m : m;
  }
  return t;
}

}  // namespace rfm::testing
