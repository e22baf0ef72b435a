#pragma once

#include <array>

#include "rfm/rfa.hpp"

namespace rfm::losses {

struct LossConfig {
  int pool_kernel = 31;
  double boundary_gain = 5.0;
};

/// omega = 1 + gain * |avg_pool_same(gt, k) - gt|; gt must be binary.
Tensor pixel_weights(const Tensor& gt, const LossConfig& cfg = {});

/// Sum(omega * bce(sigmoid(logit), gt)) / Sum(omega), evaluated in logit space.
/// Batched inputs [B,1,H,W] are normalized per image and averaged over B.
Var weighted_bce(const Var& logits, const Tensor& gt, const Tensor& omega);

/// 1 - Sum(omega*p*g) / Sum(omega*(p + g - p*g)), p = sigmoid(logit); an empty
/// union counts as a perfect overlap. Batched inputs are averaged over B.
Var weighted_iou(const Var& logits, const Tensor& gt, const Tensor& omega);

/// Nearest-neighbour resize of a binary mask (sample at output pixel centres).
Tensor downsample_nearest(const Tensor& mask, std::int64_t out_h, std::int64_t out_w);

/// Ground truth and pixel weights at every prediction level.
struct Targets {
  std::array<Tensor, kLevels> masks;
  std::array<Tensor, kLevels> weights;
};

/// Builds per-level targets matching the spatial sizes of `pred`'s logit maps.
Targets make_targets(const Tensor& gt, const rfa::SegmentationPrediction& pred, const LossConfig& cfg = {});

struct LossTerms {
  std::array<double, kLevels> per_level{};
  double total = 0.0;
};

/// 7*L1 + (4*L2 + 3*L3 + 2*L4), the coarse terms grouped first.
double combine_levels(const std::array<double, kLevels>& per_level);

struct LossGraph {
  std::array<Var, kLevels> per_level;
  Var total;

  LossTerms terms() const;
};

LossGraph total_loss(const rfa::SegmentationPrediction& pred, const Targets& targets);

}  // namespace rfm::losses
