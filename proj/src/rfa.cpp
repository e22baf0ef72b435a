#include "rfm/rfa.hpp"

#include <cmath>

namespace rfm::rfa {

RfaLevelParams RfaLevelParams::create(bool top, std::int64_t c_in, std::int64_t width, Rng& rng) {
  RfaLevelParams p;
  if (top) {
    p.triple_conv[0] = ConvBlock::create(c_in, width, 3, rng);
  } else {
    p.gate_conv = ConvBlock::create(width, width, 3, rng);
    p.pre_cat_conv = ConvBlock::create(c_in, width, 3, rng);
    p.post_cat_conv = ConvBlock::create(2 * width, width, 3, rng);
    p.triple_conv[0] = ConvBlock::create(width, width, 3, rng);
  }
  p.triple_conv[1] = ConvBlock::create(width, width, 3, rng);
  p.triple_conv[2] = ConvBlock::create(width, width, 3, rng);
  p.head_conv = ConvBlock::create(width, width, 3, rng);
  p.c1 = PlainConv::create(width, 1, 1, rng);
  return p;
}

void RfaLevelParams::collect(ParamSet& set, const std::string& prefix) {
  if (gate_conv) gate_conv->collect(set, prefix + ".gate");
  if (pre_cat_conv) pre_cat_conv->collect(set, prefix + ".pre_cat");
  if (post_cat_conv) post_cat_conv->collect(set, prefix + ".post_cat");
  for (std::size_t i = 0; i < triple_conv.size(); ++i) triple_conv[i].collect(set, prefix + ".g" + std::to_string(i));
  head_conv.collect(set, prefix + ".head");
  c1.collect(set, prefix + ".c1");
}

DecoderParams DecoderParams::create(const std::array<std::int64_t, kLevels>& channels, std::int64_t width,
                                    Rng& rng) {
  DecoderParams d;
  d.width = width;
  for (int i = kLevels; i >= 1; --i) {
    d.level(i) = RfaLevelParams::create(i == kLevels, channels[static_cast<std::size_t>(i - 1)], width, rng);
  }
  return d;
}

void DecoderParams::collect(ParamSet& set, const std::string& prefix) {
  for (int i = kLevels; i >= 1; --i) level(i).collect(set, prefix + ".l" + std::to_string(i));
}

Tensor SegmentationPrediction::probabilities(int i) const {
  Tensor t = logit(i).value();
  for (auto& v : t.storage()) v = v >= 0.0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v));
  return t;
}

namespace {

Var triple(const Var& x, RfaLevelParams& p, Mode mode) {
  Var g = conv_block(x, p.triple_conv[0], mode);
  g = conv_block(g, p.triple_conv[1], mode);
  return conv_block(g, p.triple_conv[2], mode);
}

Var predict(const Var& g, RfaLevelParams& p, Mode mode) { return p.c1(conv_block(g, p.head_conv, mode)); }

}  // namespace

LevelOutput rfa_top(const Var& f4, RfaLevelParams& p, Mode mode) {
  Var g = triple(f4, p, mode);
  return {g, predict(g, p, mode)};
}

LevelOutput rfa_step(const Var& f_i, const Var& g_next, const Var& p_next, RfaLevelParams& p, Mode mode) {
  if (!p.gate_conv || !p.pre_cat_conv || !p.post_cat_conv) {
    throw std::invalid_argument("rfa_step: level parameters belong to the top level");
  }
  const std::int64_t h = f_i.dim(-2), w = f_i.dim(-1);
  if (g_next.dim(-2) * 2 != h || g_next.dim(-1) * 2 != w || p_next.dim(-2) != g_next.dim(-2) ||
      p_next.dim(-1) != g_next.dim(-1)) {
    throw std::invalid_argument("rfa_step: coarse maps " + shape_str(g_next.shape()) + " / " +
                                shape_str(p_next.shape()) + " do not upsample 2x to " + shape_str(f_i.shape()));
  }
  Var up_g = ops::bilinear_resize(g_next, h, w);
  Var gate = ops::sigmoid(ops::bilinear_resize(p_next, h, w));
  Var j = conv_block(ops::gate_mul(up_g, gate), *p.gate_conv, mode);
  Var k = conv_block(ops::concat_channels({conv_block(f_i, *p.pre_cat_conv, mode), j}), *p.post_cat_conv, mode);
  Var g = triple(k, p, mode);
  return {g, predict(g, p, mode)};
}

SegmentationPrediction decode(const FeaturePyramid& pyramid, DecoderParams& params, Mode mode) {
  for (int i = 1; i <= kLevels; ++i) {
    if (!pyramid.level(i)) throw std::invalid_argument("decode: pyramid level " + std::to_string(i) + " missing");
  }
  SegmentationPrediction out;
  LevelOutput cur = rfa_top(pyramid.level(4), params.level(4), mode);
  out.logits[3] = cur.p;
  out.features[3] = cur.g;
  for (int i = 3; i >= 1; --i) {
    cur = rfa_step(pyramid.level(i), cur.g, cur.p, params.level(i), mode);
    out.logits[static_cast<std::size_t>(i - 1)] = cur.p;
    out.features[static_cast<std::size_t>(i - 1)] = cur.g;
  }
  return out;
}

}  // namespace rfm::rfa
