#pragma once

#include <array>

#include "rfm/autograd.hpp"

namespace rfm {

inline constexpr int kLevels = 4;

/// Four feature maps at strides 4/8/16/32; levels[0] is f_1 (finest).
struct FeaturePyramid {
  std::array<Var, kLevels> levels;

  Var& level(int i) { return levels[static_cast<std::size_t>(i - 1)]; }
  const Var& level(int i) const { return levels[static_cast<std::size_t>(i - 1)]; }
};

}  // namespace rfm
