#include "rfm/losses.hpp"
#include "test_util.hpp"

namespace rfm::losses {
namespace {

using testing::random_tensor;
using testing::random_var;

Tensor random_mask(Shape shape, Rng& rng, double p = 0.4) {
  Tensor t(std::move(shape));
  for (auto& v : t.storage()) v = rng.uniform() < p ? 1.0 : 0.0;
  return t;
}

double sig(double x) { return 1.0 / (1.0 + std::exp(-x)); }

TEST(PixelWeights, ConstantMasksAreFlatInTheInterior) {
  const Tensor flat = pixel_weights(Tensor({1, 48, 48}, 0.0));
  for (double v : flat.data()) EXPECT_EQ(v, 1.0);
  const Tensor ones({1, 48, 48}, 1.0);
  const Tensor w = pixel_weights(ones);
  for (int y = 15; y < 33; ++y)
    for (int x = 15; x < 33; ++x) EXPECT_NEAR(w.at(0, y, x), 1.0, 1e-15);
  for (double v : w.data()) EXPECT_GE(v, 1.0);
}

TEST(PixelWeights, IsolatedPixel) {
  Tensor gt({1, 40, 40}, 0.0);
  gt.at(0, 20, 20) = 1.0;
  const Tensor w = pixel_weights(gt);
  EXPECT_NEAR(w.at(0, 20, 20), 1.0 + 5.0 * (1.0 - 1.0 / 961.0), 1e-12);
  EXPECT_NEAR(w.at(0, 20, 30), 1.0 + 5.0 / 961.0, 1e-12);
  EXPECT_EQ(w.at(0, 20, 36), 1.0);
}

TEST(PixelWeights, NaiveWindowOracle) {
  Rng rng(1);
  const Tensor gt = random_mask({1, 20, 24}, rng);
  const Tensor w = pixel_weights(gt);
  for (int y = 0; y < 20; ++y)
    for (int x = 0; x < 24; ++x) {
      double s = 0.0;
      for (int dy = -15; dy <= 15; ++dy)
        for (int dx = -15; dx <= 15; ++dx)
          if (y + dy >= 0 && y + dy < 20 && x + dx >= 0 && x + dx < 24) s += gt.at(0, y + dy, x + dx);
      EXPECT_NEAR(w.at(0, y, x), 1.0 + 5.0 * std::abs(s / 961.0 - gt.at(0, y, x)), 1e-12);
    }
  EXPECT_THROW(pixel_weights(Tensor({1, 4, 4}, 0.5)), std::invalid_argument);
}

TEST(WeightedBce, SaturatedAndUniform) {
  Rng rng(2);
  const Tensor gt = random_mask({1, 8, 8}, rng);
  const Tensor omega = pixel_weights(gt);
  Tensor logits(gt.shape());
  for (std::size_t i = 0; i < gt.numel(); ++i) logits[i] = gt[i] > 0.5 ? 50.0 : -50.0;
  EXPECT_LE(weighted_bce(Var(logits), gt, omega).value()[0], 1e-9);
  EXPECT_NEAR(weighted_bce(Var(Tensor(gt.shape(), 0.0)), gt, omega).value()[0], std::log(2.0), 1e-15);
  for (std::size_t i = 0; i < gt.numel(); ++i) logits[i] = gt[i] > 0.5 ? -700.0 : 700.0;
  const double worst = weighted_bce(Var(logits), gt, omega).value()[0];
  EXPECT_TRUE(std::isfinite(worst));
  EXPECT_NEAR(worst, 700.0, 1e-9);
}

TEST(WeightedBce, ElementwiseOracle) {
  Rng rng(3);
  const Tensor gt = random_mask({1, 9, 7}, rng);
  const Tensor omega = random_tensor(gt.shape(), rng, 1.0, 6.0);
  const Tensor logits = random_tensor(gt.shape(), rng, -4.0, 4.0);
  double num = 0.0, den = 0.0;
  for (std::size_t i = 0; i < gt.numel(); ++i) {
    const double p = sig(logits[i]);
    num += omega[i] * -(gt[i] * std::log(p) + (1.0 - gt[i]) * std::log(1.0 - p));
    den += omega[i];
  }
  EXPECT_NEAR(weighted_bce(Var(logits), gt, omega).value()[0], num / den, 1e-10);
  EXPECT_THROW(weighted_bce(Var(logits), Tensor({1, 9, 8}), omega), std::invalid_argument);
}

TEST(WeightedIou, SaturatedAndClosedForm) {
  Rng rng(4);
  const Tensor gt = random_mask({1, 8, 8}, rng);
  const Tensor omega = pixel_weights(gt);
  Tensor logits(gt.shape());
  for (std::size_t i = 0; i < gt.numel(); ++i) logits[i] = gt[i] > 0.5 ? 50.0 : -50.0;
  EXPECT_LE(weighted_iou(Var(logits), gt, omega).value()[0], 1e-9);
  Tensor half({1, 4, 4}, 0.0);
  for (int i = 0; i < 8; ++i) half[static_cast<std::size_t>(i)] = 1.0;
  EXPECT_NEAR(weighted_iou(Var(Tensor({1, 4, 4}, 40.0)), half, Tensor({1, 4, 4}, 1.0)).value()[0], 0.5, 1e-15);
  // Empty ground truth and an empty prediction count as a perfect match.
  EXPECT_EQ(weighted_iou(Var(Tensor({1, 4, 4}, -800.0)), Tensor({1, 4, 4}, 0.0), Tensor({1, 4, 4}, 1.0)).value()[0],
            0.0);
}

TEST(WeightedIou, ElementwiseOracle) {
  Rng rng(5);
  const Tensor gt = random_mask({1, 9, 7}, rng);
  const Tensor omega = random_tensor(gt.shape(), rng, 1.0, 6.0);
  const Tensor logits = random_tensor(gt.shape(), rng, -4.0, 4.0);
  double inter = 0.0, uni = 0.0;
  for (std::size_t i = 0; i < gt.numel(); ++i) {
    const double p = sig(logits[i]);
    inter += omega[i] * p * gt[i];
    uni += omega[i] * (p + gt[i] - p * gt[i]);
  }
  EXPECT_NEAR(weighted_iou(Var(logits), gt, omega).value()[0], 1.0 - inter / uni, 1e-10);
}

TEST(Losses, WeightScalingInvariance) {
  Rng rng(6);
  const Tensor gt = random_mask({1, 10, 10}, rng);
  const Tensor omega = pixel_weights(gt);
  const Tensor logits = random_tensor(gt.shape(), rng, -3.0, 3.0);
  Tensor scaled = omega;
  for (auto& v : scaled.storage()) v *= 7.25;
  EXPECT_NEAR(weighted_bce(Var(logits), gt, omega).value()[0], weighted_bce(Var(logits), gt, scaled).value()[0], 1e-12);
  EXPECT_NEAR(weighted_iou(Var(logits), gt, omega).value()[0], weighted_iou(Var(logits), gt, scaled).value()[0], 1e-12);
}

TEST(Losses, BatchIsMeanOfPerImageLosses) {
  Rng rng(7);
  const Tensor gt = random_mask({2, 1, 6, 6}, rng);
  const Tensor omega = pixel_weights(gt);
  const Tensor logits = random_tensor(gt.shape(), rng, -3.0, 3.0);
  double bce = 0.0, iou = 0.0;
  for (int b = 0; b < 2; ++b) {
    const auto slice = [&](const Tensor& t) {
      return Tensor({1, 6, 6}, std::vector<double>(t.ptr() + b * 36, t.ptr() + (b + 1) * 36));
    };
    bce += weighted_bce(Var(slice(logits)), slice(gt), slice(omega)).value()[0] / 2.0;
    iou += weighted_iou(Var(slice(logits)), slice(gt), slice(omega)).value()[0] / 2.0;
  }
  EXPECT_NEAR(weighted_bce(Var(logits), gt, omega).value()[0], bce, 1e-14);
  EXPECT_NEAR(weighted_iou(Var(logits), gt, omega).value()[0], iou, 1e-14);
}

TEST(DownsampleNearest, SamplesPixelCentres) {
  Tensor m({1, 4, 4});
  for (int i = 0; i < 16; ++i) m[static_cast<std::size_t>(i)] = i;
  const Tensor d = downsample_nearest(m, 2, 2);
  EXPECT_EQ(d, Tensor({1, 2, 2}, std::vector<double>{5, 7, 13, 15}));
}

// ---------------------------------------------------------------------------

rfa::SegmentationPrediction prediction_from(const std::array<Tensor, kLevels>& logits, bool grad = false) {
  rfa::SegmentationPrediction p;
  for (std::size_t i = 0; i < kLevels; ++i) p.logits[i] = Var(logits[i], grad);
  return p;
}

TEST(TotalLoss, FixedLevelWeights) {
  EXPECT_EQ(combine_levels({1.0, 1.0, 1.0, 1.0}), 16.0);
  EXPECT_EQ(combine_levels({1.0, 0.0, 0.0, 0.0}), 7.0);
  EXPECT_EQ(combine_levels({0.0, 0.5, 1.0, 2.0}), 9.0);
}

TEST(TotalLoss, SaturatedPerfectIsZero) {
  Rng rng(8);
  const Tensor gt = random_mask({1, 16, 16}, rng);
  std::array<Tensor, kLevels> logits;
  for (int l = 0; l < kLevels; ++l) {
    const Tensor m = downsample_nearest(gt, 16 >> l, 16 >> l);
    logits[static_cast<std::size_t>(l)] = Tensor(m.shape());
    for (std::size_t i = 0; i < m.numel(); ++i) logits[static_cast<std::size_t>(l)][i] = m[i] > 0.5 ? 50.0 : -50.0;
  }
  const auto pred = prediction_from(logits);
  const LossTerms t = total_loss(pred, make_targets(gt, pred)).terms();
  EXPECT_LE(t.total, 1e-8);
  EXPECT_GE(t.total, 0.0);
}

TEST(TotalLoss, RecomputedFromPerLevelScalars) {
  Rng rng(9);
  const Tensor gt = random_mask({1, 16, 16}, rng);
  std::array<Tensor, kLevels> logits;
  for (int l = 0; l < kLevels; ++l) logits[static_cast<std::size_t>(l)] = random_tensor({1, 16 >> l, 16 >> l}, rng, -3, 3);
  const auto pred = prediction_from(logits);
  const Targets targets = make_targets(gt, pred);
  const LossTerms t = total_loss(pred, targets).terms();
  std::array<double, kLevels> per{};
  for (std::size_t l = 0; l < kLevels; ++l) {
    per[l] = weighted_bce(pred.logits[l], targets.masks[l], targets.weights[l]).value()[0] +
             weighted_iou(pred.logits[l], targets.masks[l], targets.weights[l]).value()[0];
    EXPECT_EQ(t.per_level[l], per[l]);
    EXPECT_GT(per[l], 0.0);
  }
  EXPECT_EQ(t.total, 7.0 * per[0] + (4.0 * per[1] + 3.0 * per[2] + 2.0 * per[3]));
  EXPECT_EQ(t.total, combine_levels(per));
}

class LossGrad : public ::testing::TestWithParam<int> {};

TEST_P(LossGrad, BceIouAndTotal) {
  Rng rng(static_cast<std::uint64_t>(90 + GetParam()));
  const Tensor gt = random_mask({2, 1, 8, 8}, rng);
  const Tensor omega = pixel_weights(gt, {5, 5.0});
  Var x = random_var({2, 1, 8, 8}, rng, true, -3, 3);
  EXPECT_GRAD_OK(grad_check("weighted_bce", [&] { return weighted_bce(x, gt, omega); }, {x}));
  EXPECT_GRAD_OK(grad_check("weighted_iou", [&] { return weighted_iou(x, gt, omega); }, {x}));

  const Tensor g1 = random_mask({1, 8, 8}, rng);
  std::array<Tensor, kLevels> logits;
  for (int l = 0; l < kLevels; ++l) logits[static_cast<std::size_t>(l)] = random_tensor({1, 8 >> l, 8 >> l}, rng, -3, 3);
  const auto pred = prediction_from(logits, true);
  const Targets targets = make_targets(g1, pred);
  EXPECT_GRAD_OK(grad_check("total_loss", [&] { return total_loss(pred, targets).total; },
                            {pred.logits.begin(), pred.logits.end()}));
}

INSTANTIATE_TEST_SUITE_P(Seeds, LossGrad, ::testing::Range(0, 5));

}  // namespace
}  // namespace rfm::losses
