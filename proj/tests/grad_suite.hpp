#pragma once

// Central-difference checks of every differentiable building block, one seed
// at a time. Shared by the unit tests and the acceptance runner.

#include <string>
#include <vector>

#include "oracles.hpp"
#include "random_util.hpp"
#include "rfm/grad_check.hpp"
#include "rfm/losses.hpp"
#include "rfm/model.hpp"
#include "rfm/owca.hpp"
#include "rfm/rfa.hpp"
#include "rfm/rif.hpp"

namespace rfm::suite {

using testing::random_signed;
using testing::random_tensor;
using testing::random_var;

/// Denominator floor for deep composites (decode, total_loss of forward).
/// Rounding through twenty-odd layers scatters each central difference by up
/// to about 1e-9 at h = 1e-5, so gradients below the floor are held to an
/// absolute 1e-8 (1e-4 of the floor) instead of a relative bound.
inline constexpr double kCompositeFloor = 1e-4;

/// Randomizes normalization buffers and affines so eval mode is a generic map.
inline void perturb_network(model::Network& net, Rng& rng) {
  const ParamSet set = net.parameters();
  for (const auto& [name, t] : set.buffers()) {
    const bool var = name.find("running_var") != std::string::npos;
    for (auto& v : t->storage()) v = var ? rng.uniform(0.5, 1.5) : rng.uniform(-0.2, 0.2);
  }
  for (const auto& [name, v] : set.params()) {
    Var p = v;
    if (name.find("bn_gamma") != std::string::npos)
      for (auto& x : p.mutable_value().storage()) x = rng.uniform(0.5, 1.5);
    if (name.find("bn_beta") != std::string::npos)
      for (auto& x : p.mutable_value().storage()) x = rng.uniform(-0.2, 0.2);
  }
}

inline model::ModelConfig tiny_model(rif::FusionKind kind) {
  model::ModelConfig c;
  c.input_size = 32;
  c.stem_channels = 2;
  c.channels = {2, 2, 2, 2};
  c.decoder_width = 2;
  c.fusion.kind = kind;
  c.fusion.num_refs = 1;
  c.fusion.heads = 1;
  c.fusion.text_dim = 4;
  return c;
}

inline std::vector<GradCheckReport> tensor_op_checks(std::uint64_t seed) {
  using ops::weighted_sum;
  std::vector<GradCheckReport> out;
  Rng rng(mix_seed(seed, 0x0B5));

  Var a = random_var({2, 3, 4}, rng), b = random_var({2, 3, 4}, rng);
  const Tensor w = random_tensor({2, 3, 4}, rng);
  out.push_back(grad_check("add", [&] { return weighted_sum(ops::add(a, b), w); }, {a, b}));
  out.push_back(grad_check("sub", [&] { return weighted_sum(ops::sub(a, b), w); }, {a, b}));
  out.push_back(grad_check("mul", [&] { return weighted_sum(ops::mul(a, b), w); }, {a, b}));
  out.push_back(grad_check("scale", [&] { return weighted_sum(ops::scale(a, -1.7), w); }, {a}));
  out.push_back(grad_check("sigmoid", [&] { return weighted_sum(ops::sigmoid(a), w); }, {a}));
  Var s(random_signed({2, 3, 4}, rng), true);
  out.push_back(grad_check("relu", [&] { return weighted_sum(ops::relu(s), w); }, {s}));
  const Tensor w2 = random_tensor({4, 6}, rng);
  out.push_back(grad_check("reshape", [&] { return weighted_sum(ops::reshape(a, {4, 6}), w2); }, {a}));
  out.push_back(grad_check("sum", [&] { return ops::sum(ops::mul(a, a)); }, {a}));

  Var ma = random_var({3, 4}, rng), mb = random_var({4, 2}, rng);
  const Tensor wm = random_tensor({3, 2}, rng), wt = random_tensor({4, 3}, rng), ws = random_tensor({3, 4}, rng);
  out.push_back(grad_check("matmul", [&] { return weighted_sum(ops::matmul(ma, mb), wm); }, {ma, mb}));
  out.push_back(grad_check("transpose", [&] { return weighted_sum(ops::transpose(ma), wt); }, {ma}));
  out.push_back(grad_check("softmax_rows", [&] { return weighted_sum(ops::softmax_rows(ma), ws); }, {ma}));
  Var lx = random_var({5, 4}, rng), lw = random_var({3, 4}, rng), lb = random_var({3}, rng);
  const Tensor wl = random_tensor({5, 3}, rng);
  out.push_back(grad_check("linear", [&] { return weighted_sum(ops::linear(lx, lw, lb), wl); }, {lx, lw, lb}));
  Var q = random_var({4, 8}, rng), k = random_var({6, 8}, rng), v = random_var({6, 8}, rng);
  const Tensor wa = random_tensor({4, 8}, rng);
  out.push_back(grad_check("attention", [&] { return weighted_sum(ops::attention(q, k, v, 2), wa); }, {q, k, v}));

  Var x = random_var({2, 3, 5, 5}, rng), cw = random_var({4, 3, 3, 3}, rng), cb = random_var({4}, rng);
  const Tensor wc = random_tensor({2, 4, 3, 3}, rng);
  out.push_back(grad_check("conv2d", [&] { return weighted_sum(ops::conv2d(x, cw, cb, 2, 1), wc); }, {x, cw, cb}));
  Var g = random_var({3}, rng, true, 0.5, 1.5), be = random_var({3}, rng);
  const Tensor wb = random_tensor({2, 3, 5, 5}, rng);
  ops::BatchNormState st{Tensor({3}, 0.0), Tensor({3}, 1.0)};
  out.push_back(grad_check("batch_norm_train",
                           [&] { return weighted_sum(ops::batch_norm(x, g, be, st, ops::Mode::kTrain), wb); },
                           {x, g, be}));
  st.running_var = random_tensor({3}, rng, 0.5, 2.0);
  out.push_back(grad_check("batch_norm_eval",
                           [&] { return weighted_sum(ops::batch_norm(x, g, be, st, ops::Mode::kEval), wb); },
                           {x, g, be}));
  const Tensor wr = random_tensor({2, 3, 8, 7}, rng);
  out.push_back(grad_check("bilinear", [&] { return weighted_sum(ops::bilinear_resize(x, 8, 7), wr); }, {x}));
  out.push_back(grad_check("avg_pool", [&] { return weighted_sum(ops::avg_pool_same(x, 3), wb); }, {x}));
  Var y = random_var({2, 2, 5, 5}, rng);
  const Tensor wcat = random_tensor({2, 5, 5, 5}, rng);
  out.push_back(grad_check("concat", [&] { return weighted_sum(ops::concat_channels({x, y}), wcat); }, {x, y}));
  Var p = random_var({2, 1, 5, 5}, rng);
  out.push_back(grad_check("gate_mul", [&] { return weighted_sum(ops::gate_mul(x, p), wb); }, {x, p}));
  Var alpha = random_var({1}, rng), e = random_var({2, 3, 5, 5}, rng);
  out.push_back(grad_check("blend", [&] { return weighted_sum(ops::blend(alpha, e, x), wb); }, {alpha, e, x}));
  const Tensor w1 = random_tensor({3, 5, 5}, rng);
  out.push_back(grad_check("select_batch", [&] { return weighted_sum(ops::select_batch(x, 1), w1); }, {x}));
  Var m = random_var({3, 5, 5}, rng);
  out.push_back(grad_check("stack_batch", [&] { return weighted_sum(ops::stack_batch({m, m}), wb); }, {m}));
  const Tensor wtok = random_tensor({25, 3}, rng);
  out.push_back(grad_check("map_to_tokens", [&] { return weighted_sum(ops::map_to_tokens(m), wtok); }, {m}));
  Var tok = random_var({25, 3}, rng);
  out.push_back(grad_check("tokens_to_map", [&] { return weighted_sum(ops::tokens_to_map(tok, 5, 5), w1); }, {tok}));

  ConvBlock blk = ConvBlock::create(3, 4, 3, rng);
  Var bx = random_var({2, 3, 4, 4}, rng);
  const Tensor wblk = random_tensor({2, 4, 4, 4}, rng);
  out.push_back(grad_check("conv_block", [&] { return weighted_sum(conv_block(bx, blk, ops::Mode::kTrain), wblk); },
                           {bx, blk.kernel, blk.bn_gamma, blk.bn_beta}));
  return out;
}

inline std::vector<GradCheckReport> module_checks(std::uint64_t seed) {
  using ops::weighted_sum;
  std::vector<GradCheckReport> out;
  Rng rng(mix_seed(seed, 0x30D));
  const auto with_params = [](std::vector<Var> inputs, const ParamSet& set) {
    for (const Var& v : set.param_vars()) inputs.push_back(v);
    return inputs;
  };

  {
    owca::AttentionParams p = owca::AttentionParams::create(4, 2, rng);
    Var x = random_var({4, 4, 4}, rng), ref = random_var({4, 3, 3}, rng);
    ParamSet set;
    p.collect(set, "attn");
    const Tensor w = random_tensor({4, 4, 4}, rng);
    out.push_back(grad_check("owca", [&] { return weighted_sum(owca::windowed_cross_attention(x, ref, 2, p), w); },
                             with_params({x, ref}, set)));
  }
  {
    // Eval-mode statistics: batch statistics cancel the value biases and leave
    // them with an identically zero gradient.
    rif::RifSLevel p = rif::RifSLevel::create(4, 1, 2, rng);
    oracle::perturb_block(p.out_conv, rng);
    Var fx = random_var({4, 4, 4}, rng), fs = random_var({4, 4, 4}, rng);
    ParamSet set;
    p.collect(set, "rif");
    const Tensor w = random_tensor({4, 4, 4}, rng);
    out.push_back(grad_check("rif_s", [&] { return weighted_sum(rif::rif_s(fx, fs, 2, p, ops::Mode::kEval), w); },
                             with_params({fx, fs}, set)));
  }
  {
    rif::RifTLevel p = rif::RifTLevel::create(4, 6, rng);
    oracle::perturb_block(p.fuse_conv, rng);
    Var fx = random_var({4, 3, 3}, rng), t = random_var({3, 6}, rng);
    ParamSet set;
    p.collect(set, "rif");
    const Tensor w = random_tensor({4, 3, 3}, rng);
    out.push_back(grad_check("rif_t", [&] { return weighted_sum(rif::rif_t(fx, {t}, p, ops::Mode::kEval), w); },
                             with_params({fx, t}, set)));
  }
  {
    constexpr std::array<std::int64_t, kLevels> ch{2, 2, 2, 2};
    rfa::DecoderParams d = rfa::DecoderParams::create(ch, 2, rng);
    FeaturePyramid pyr;
    std::vector<Var> inputs;
    for (int l = 1; l <= kLevels; ++l) {
      const std::int64_t side = 16 >> (l - 1);
      pyr.level(l) = random_var({1, 2, side, side}, rng);
      inputs.push_back(pyr.level(l));
    }
    ParamSet set;
    d.collect(set, "decoder");
    // Composite of about twenty layers: see kCompositeFloor.
    out.push_back(grad_check("decode",
                             [&] {
                               const auto pred = rfa::decode(pyr, d, ops::Mode::kTrain);
                               Var s = ops::sum(pred.logit(1));
                               for (int l = 2; l <= kLevels; ++l) s = ops::add(s, ops::sum(pred.logit(l)));
                               return s;
                             },
                             with_params(inputs, set), 1e-5, kCompositeFloor));
  }
  {
    Tensor gt({2, 1, 8, 8});
    for (auto& v : gt.storage()) v = rng.uniform() < 0.4 ? 1.0 : 0.0;
    const Tensor omega = losses::pixel_weights(gt, {5, 5.0});
    Var x = random_var({2, 1, 8, 8}, rng, true, -3, 3);
    out.push_back(grad_check("weighted_bce", [&] { return losses::weighted_bce(x, gt, omega); }, {x}));
    out.push_back(grad_check("weighted_iou", [&] { return losses::weighted_iou(x, gt, omega); }, {x}));
  }
  return out;
}

/// total_loss of a full forward pass, over every network parameter.
inline GradCheckReport model_check(std::uint64_t seed, rif::FusionKind kind) {
  Rng rng(mix_seed(seed, 0x40D, static_cast<std::uint64_t>(kind)));
  model::Network net = model::Network::create(tiny_model(kind), seed);
  perturb_network(net, rng);
  const Tensor x = random_tensor({3, 32, 32}, rng, 0.0, 1.0);
  Tensor gt({1, 32, 32}, 0.0);
  for (int y = 10; y < 22; ++y)
    for (int xx = 8; xx < 20; ++xx) gt.at(0, y, xx) = 1.0;
  model::ReferenceInput refs;
  if (kind == rif::FusionKind::kImage) refs.images.push_back(random_tensor({3, 32, 32}, rng, 0.0, 1.0));
  else refs.text.push_back(random_tensor({2, 4}, rng));
  const ParamSet set = net.parameters();
  return grad_check(std::string("total_loss(forward) ") + rif::to_string(kind),
                    [&] {
                      const auto pred = model::forward(net, x, refs, ops::Mode::kEval);
                      return losses::total_loss(pred, losses::make_targets(gt, pred)).total;
                    },
                    set.param_vars(), 1e-5, kCompositeFloor);
}

inline std::vector<GradCheckReport> grad_suite(std::uint64_t seed) {
  std::vector<GradCheckReport> out = tensor_op_checks(seed);
  for (auto& r : module_checks(seed)) out.push_back(std::move(r));
  out.push_back(model_check(seed, rif::FusionKind::kImage));
  out.push_back(model_check(seed, rif::FusionKind::kText));
  return out;
}

}  // namespace rfm::suite
