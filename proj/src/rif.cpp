#include "rfm/rif.hpp"

#include <algorithm>

namespace rfm::rif {

std::string to_string(FusionKind kind) {
  switch (kind) {
    case FusionKind::kNone: return "none";
    case FusionKind::kImage: return "image";
    case FusionKind::kText: return "text";
  }
  return "none";
}

FusionKind parse_fusion_kind(const std::string& s) {
  if (s == "none") return FusionKind::kNone;
  if (s == "image") return FusionKind::kImage;
  if (s == "text") return FusionKind::kText;
  throw std::invalid_argument("unknown fusion kind '" + s + "' (expected none|image|text)");
}

bool FusionConfig::fuses(int level) const {
  return kind != FusionKind::kNone && std::find(layers.begin(), layers.end(), level) != layers.end();
}

int default_window(int level, int height) {
  int k = height;
  if (level == 3) k = height / 2;
  if (level == 4) k = height / 4;
  return k < 2 ? height : k;
}

int resolve_window(const FusionConfig& cfg, int level, int height) {
  const int k = cfg.windows[static_cast<std::size_t>(level - 2)];
  const int resolved = k > 0 ? std::min(k, height) : default_window(level, height);
  owca::window_count(height, resolved);
  return resolved;
}

ReferenceBundle ReferenceBundle::from_pyramids(const std::vector<FeaturePyramid>& pyramids) {
  if (pyramids.empty()) throw std::invalid_argument("reference bundle needs at least one reference pyramid");
  ReferenceBundle b;
  b.kind = FusionKind::kImage;
  b.num_refs = static_cast<int>(pyramids.size());
  for (int level = 2; level <= kLevels; ++level) {
    std::vector<Var> maps;
    for (const auto& p : pyramids) maps.push_back(p.level(level));
    b.image_levels[static_cast<std::size_t>(level - 2)] = ops::concat_channels(maps);
  }
  return b;
}

ReferenceBundle ReferenceBundle::from_text(std::vector<Var> sentences) {
  ReferenceBundle b;
  b.kind = FusionKind::kText;
  b.text = std::move(sentences);
  return b;
}

RifSLevel RifSLevel::create(std::int64_t channels, int num_refs, int heads, Rng& rng) {
  if (num_refs < 1) throw std::invalid_argument("image fusion needs at least one reference");
  RifSLevel p;
  p.merge_conv = ConvBlock::create(channels * num_refs, channels, 1, rng);
  p.attention = owca::AttentionParams::create(channels, heads, rng);
  p.alpha = Var(Tensor::scalar(0.5), true);
  p.out_conv = ConvBlock::create(channels, channels, 1, rng);
  return p;
}

void RifSLevel::collect(ParamSet& set, const std::string& prefix) {
  merge_conv.collect(set, prefix + ".merge");
  attention.collect(set, prefix + ".attn");
  set.add_param(prefix + ".alpha", alpha);
  out_conv.collect(set, prefix + ".out");
}

RifTLevel RifTLevel::create(std::int64_t channels, int text_dim, Rng& rng) {
  RifTLevel p;
  p.text_proj = Linear::create(text_dim, channels, rng);
  p.fuse_conv = ConvBlock::create(2 * channels, channels, 1, rng);
  return p;
}

void RifTLevel::collect(ParamSet& set, const std::string& prefix) {
  text_proj.collect(set, prefix + ".proj");
  fuse_conv.collect(set, prefix + ".fuse");
}

FusionParams FusionParams::create(const FusionConfig& cfg, const std::array<std::int64_t, kLevels>& channels,
                                  Rng& rng) {
  FusionParams p;
  p.cfg = cfg;
  for (int level : cfg.layers) {
    if (level < 2 || level > kLevels) {
      throw std::invalid_argument("referring layers must be within {2,3,4}, got " + std::to_string(level));
    }
  }
  for (int level = 2; level <= kLevels; ++level) {
    if (!cfg.fuses(level)) continue;
    const auto idx = static_cast<std::size_t>(level - 2);
    const std::int64_t c = channels[static_cast<std::size_t>(level - 1)];
    if (cfg.kind == FusionKind::kImage) p.image[idx] = RifSLevel::create(c, cfg.num_refs, cfg.heads, rng);
    if (cfg.kind == FusionKind::kText) p.text[idx] = RifTLevel::create(c, cfg.text_dim, rng);
  }
  return p;
}

void FusionParams::collect(ParamSet& set, const std::string& prefix) {
  for (int level = 2; level <= kLevels; ++level) {
    const auto idx = static_cast<std::size_t>(level - 2);
    const std::string name = prefix + ".l" + std::to_string(level);
    if (image[idx]) image[idx]->collect(set, name);
    if (text[idx]) text[idx]->collect(set, name);
  }
}

Var merge_reference_features(const std::vector<Var>& refs, ConvBlock& merge_conv, Mode mode) {
  if (refs.empty()) throw std::invalid_argument("merge_reference_features: no reference maps");
  for (const auto& r : refs) {
    if (r.shape() != refs[0].shape()) {
      throw std::invalid_argument("merge_reference_features: reference shapes differ: " + shape_str(r.shape()) +
                                  " vs " + shape_str(refs[0].shape()));
    }
  }
  return conv_block(ops::concat_channels(refs), merge_conv, mode);
}

Var rif_s(const Var& f_x, const Var& f_s, int k, RifSLevel& p, Mode mode) {
  if (f_x.shape() != f_s.shape()) {
    throw std::invalid_argument("rif_s: camouflage " + shape_str(f_x.shape()) + " and reference " +
                                shape_str(f_s.shape()) + " features differ in shape");
  }
  Var attended;
  if (f_x.value().rank() == 3) {
    attended = owca::windowed_cross_attention(f_x, f_s, k, p.attention);
  } else {
    std::vector<Var> items;
    for (std::int64_t b = 0; b < f_x.dim(0); ++b) {
      items.push_back(owca::windowed_cross_attention(ops::select_batch(f_x, b), ops::select_batch(f_s, b), k,
                                                     p.attention));
    }
    attended = ops::stack_batch(items);
  }
  return conv_block(ops::blend(p.alpha, attended, f_x), p.out_conv, mode);
}

namespace {

Var enhance_one(const Var& fx, const Var& sentences, RifTLevel& p, std::vector<Tensor>* weights) {
  if (sentences.value().rank() != 2 || sentences.dim(0) < 1) {
    throw std::invalid_argument("rif_t: empty sentence bundle");
  }
  Var proj = p.text_proj(sentences);  // [N, C]
  Var pixels = ops::map_to_tokens(fx);  // [HW, C]
  Var w = ops::softmax_rows(ops::matmul(pixels, ops::transpose(proj)));  // [HW, N]
  if (weights) weights->push_back(w.value());
  return ops::tokens_to_map(ops::matmul(w, proj), fx.dim(1), fx.dim(2));
}

}  // namespace

Var rif_t(const Var& f_x, const std::vector<Var>& sentences, RifTLevel& p, Mode mode, std::vector<Tensor>* weights) {
  Var enhanced;
  if (f_x.value().rank() == 3) {
    if (sentences.size() != 1) throw std::invalid_argument("rif_t: expected one sentence matrix");
    enhanced = enhance_one(f_x, sentences[0], p, weights);
  } else {
    if (static_cast<std::int64_t>(sentences.size()) != f_x.dim(0)) {
      throw std::invalid_argument("rif_t: need one sentence matrix per batch item");
    }
    std::vector<Var> items;
    for (std::int64_t b = 0; b < f_x.dim(0); ++b) {
      items.push_back(enhance_one(ops::select_batch(f_x, b), sentences[static_cast<std::size_t>(b)], p, weights));
    }
    enhanced = ops::stack_batch(items);
  }
  return conv_block(ops::concat_channels({f_x, enhanced}), p.fuse_conv, mode);
}

FeaturePyramid dispatch_fusion(const FeaturePyramid& pyramid, const ReferenceBundle& bundle, FusionParams& params,
                               Mode mode) {
  FeaturePyramid out = pyramid;
  if (params.cfg.kind == FusionKind::kNone) return out;
  if (bundle.kind != params.cfg.kind) {
    throw std::invalid_argument("dispatch_fusion: bundle kind " + to_string(bundle.kind) +
                                " does not match fusion kind " + to_string(params.cfg.kind));
  }
  for (int level = 2; level <= kLevels; ++level) {
    if (!params.cfg.fuses(level)) continue;
    const auto idx = static_cast<std::size_t>(level - 2);
    const Var& fx = pyramid.level(level);
    if (params.cfg.kind == FusionKind::kImage) {
      RifSLevel& p = *params.image[idx];
      Var fs = conv_block(bundle.image_levels[idx], p.merge_conv, mode);
      const int k = resolve_window(params.cfg, level, static_cast<int>(fx.dim(-2)));
      out.level(level) = rif_s(fx, fs, k, p, mode);
    } else {
      out.level(level) = rif_t(fx, bundle.text, *params.text[idx], mode);
    }
  }
  return out;
}

}  // namespace rfm::rif
