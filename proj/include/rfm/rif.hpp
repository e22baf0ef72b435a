#pragma once

#include <optional>
#include <string>
#include <vector>

#include "rfm/owca.hpp"
#include "rfm/pyramid.hpp"

// Referring information fusion: injects reference-image features (RIF-s) or
// sentence embeddings (RIF-t) into levels 2..4 of the camouflage pyramid.
namespace rfm::rif {

enum class FusionKind { kNone, kImage, kText };

std::string to_string(FusionKind kind);
FusionKind parse_fusion_kind(const std::string& s);

struct FusionConfig {
  FusionKind kind = FusionKind::kImage;
  std::vector<int> layers{2, 3, 4};  // subset of {2,3,4}
  std::array<int, 3> windows{0, 0, 0};  // per level 2..4; 0 selects the default schedule
  int num_refs = 3;
  int heads = 4;
  int text_dim = 64;

  bool fuses(int level) const;
};

/// Default window per fused level: H2, H3/2, H4/4, falling back to the full
/// map when the pattern gives a window smaller than 2.
int default_window(int level, int height);
/// Window actually used at `level` for a map of side `height`.
int resolve_window(const FusionConfig& cfg, int level, int height);

/// References for one batch.
struct ReferenceBundle {
  FusionKind kind = FusionKind::kNone;
  /// Image kind: for levels 2..4 (index level-2), the K reference maps
  /// concatenated along channels in reference order: [B, K*C_i, H_i, W_i].
  std::array<Var, 3> image_levels;
  int num_refs = 0;
  /// Text kind: one [N, C_t] sentence matrix per batch item.
  std::vector<Var> text;

  static ReferenceBundle from_pyramids(const std::vector<FeaturePyramid>& pyramids);
  static ReferenceBundle from_text(std::vector<Var> sentences);
};

struct RifSLevel {
  owca::AttentionParams attention;
  Var alpha;  // [1], blend weight of the attended features
  ConvBlock merge_conv;  // K*C -> C, 1x1
  ConvBlock out_conv;    // C -> C, 1x1

  static RifSLevel create(std::int64_t channels, int num_refs, int heads, Rng& rng);
  void collect(ParamSet& set, const std::string& prefix);
};

struct RifTLevel {
  Linear text_proj;     // C_t -> C
  ConvBlock fuse_conv;  // 2C -> C, 1x1

  static RifTLevel create(std::int64_t channels, int text_dim, Rng& rng);
  void collect(ParamSet& set, const std::string& prefix);
};

struct FusionParams {
  FusionConfig cfg;
  std::array<std::optional<RifSLevel>, 3> image;  // index level-2
  std::array<std::optional<RifTLevel>, 3> text;

  static FusionParams create(const FusionConfig& cfg, const std::array<std::int64_t, kLevels>& channels, Rng& rng);
  void collect(ParamSet& set, const std::string& prefix);
};

/// Concatenate K reference maps along channels, then Conv1 back to C channels.
Var merge_reference_features(const std::vector<Var>& refs, ConvBlock& merge_conv, Mode mode);

/// Conv1(alpha * E + (1 - alpha) * f_x) where E is the windowed cross-attention
/// of f_x against f_s. Inputs are [C,H,W] or [B,C,H,W].
Var rif_s(const Var& f_x, const Var& f_s, int k, RifSLevel& p, Mode mode);

/// Sentence-weighted enhancement: per pixel, softmax over sentences of
/// (pixel feature . projected sentence), weighted sum of projected sentences,
/// concatenated with f_x and reduced by Conv1. `sentences` holds one [N,C_t]
/// matrix per batch item (a single one for [C,H,W] input). When `weights` is
/// given it receives each item's [H*W, N] sentence weights.
Var rif_t(const Var& f_x, const std::vector<Var>& sentences, RifTLevel& p, Mode mode,
          std::vector<Tensor>* weights = nullptr);

/// Level 1 always passes through; levels 2..4 are fused when the config lists them.
FeaturePyramid dispatch_fusion(const FeaturePyramid& pyramid, const ReferenceBundle& bundle, FusionParams& params,
                               Mode mode);

}  // namespace rfm::rif
