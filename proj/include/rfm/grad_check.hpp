#pragma once

#include <functional>
#include <string>
#include <vector>

#include "rfm/autograd.hpp"

namespace rfm {

struct GradCheckReport {
  std::string op_name;
  double max_rel_error = 0.0;
  std::size_t worst_index = 0;  // flat index over the concatenated inputs
  std::size_t checked = 0;
  /// Coordinates whose +-h probes landed on different ReLU pieces; a central
  /// difference across a kink measures nothing, so they are counted, not scored.
  std::size_t kink_skipped = 0;
};

/// Compares reverse-mode gradients of a scalar computation against central
/// differences (f(x+h) - f(x-h)) / 2h on every coordinate of `inputs`. The
/// relative error of a coordinate is |a - n| / max(|a|, |n|, floor).
///
/// `fn` must rebuild its graph from the current input values on every call.
/// Throws std::domain_error when fn evaluates to a non-finite value.
GradCheckReport grad_check(const std::string& op_name, const std::function<Var()>& fn,
                           const std::vector<Var>& inputs, double h = 1e-5, double floor = 1e-8);

}  // namespace rfm
