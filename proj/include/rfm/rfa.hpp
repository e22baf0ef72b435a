#pragma once

#include <array>
#include <optional>
#include <string>

#include "rfm/nn.hpp"
#include "rfm/pyramid.hpp"

// Top-down decoder: each level gates the upsampled coarser features by the
// coarser prediction, merges them with its own features and predicts a map.
namespace rfm::rfa {

struct RfaLevelParams {
  std::array<ConvBlock, 3> triple_conv;  // g = Conv3(Conv3(Conv3(.)))
  std::optional<ConvBlock> pre_cat_conv;   // Conv3(f_i): C_i -> D
  std::optional<ConvBlock> post_cat_conv;  // Conv3(cat): 2D -> D
  std::optional<ConvBlock> gate_conv;      // j_i = Conv3(gated): D -> D
  ConvBlock head_conv;                     // D -> D
  PlainConv c1;                            // D -> 1

  /// The top level (4) takes f_4 straight into the triple conv.
  static RfaLevelParams create(bool top, std::int64_t c_in, std::int64_t width, Rng& rng);
  void collect(ParamSet& set, const std::string& prefix);
};

struct DecoderParams {
  std::array<RfaLevelParams, kLevels> levels;  // index level-1
  std::int64_t width = 32;

  static DecoderParams create(const std::array<std::int64_t, kLevels>& channels, std::int64_t width, Rng& rng);
  RfaLevelParams& level(int i) { return levels[static_cast<std::size_t>(i - 1)]; }
  void collect(ParamSet& set, const std::string& prefix);
};

struct LevelOutput {
  Var g;  // [.., D, H, W]
  Var p;  // [.., 1, H, W] logits
};

/// Four logit maps p_1..p_4 (p_1 finest) plus the aggregated features g_i.
struct SegmentationPrediction {
  std::array<Var, kLevels> logits;
  std::array<Var, kLevels> features;

  const Var& logit(int i) const { return logits[static_cast<std::size_t>(i - 1)]; }
  Tensor probabilities(int i) const;
};

LevelOutput rfa_top(const Var& f4, RfaLevelParams& p, Mode mode);
LevelOutput rfa_step(const Var& f_i, const Var& g_next, const Var& p_next, RfaLevelParams& p, Mode mode);
SegmentationPrediction decode(const FeaturePyramid& pyramid, DecoderParams& params, Mode mode);

}  // namespace rfm::rfa
