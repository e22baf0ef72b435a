#include "rfm/losses.hpp"

#include <cmath>
#include <stdexcept>

namespace rfm::losses {

namespace {

struct Layout {
  std::int64_t batch;
  std::int64_t plane;
};

Layout check_layout(const Var& logits, const Tensor& gt, const Tensor& omega, const char* op) {
  if (logits.shape() != gt.shape() || gt.shape() != omega.shape()) {
    throw std::invalid_argument(std::string(op) + ": shapes differ: logits " + shape_str(logits.shape()) +
                                ", gt " + shape_str(gt.shape()) + ", omega " + shape_str(omega.shape()));
  }
  const Shape& s = gt.shape();
  if (s.size() == 3 && s[0] == 1) return {1, s[1] * s[2]};
  if (s.size() == 4 && s[1] == 1) return {s[0], s[2] * s[3]};
  throw std::invalid_argument(std::string(op) + ": expected [1,H,W] or [B,1,H,W], got " + shape_str(s));
}

double stable_sigmoid(double x) { return x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x)); }

}  // namespace

Tensor pixel_weights(const Tensor& gt, const LossConfig& cfg) {
  for (double v : gt.data()) {
    if (v != 0.0 && v != 1.0) throw std::invalid_argument("pixel_weights: ground truth must be binary");
  }
  Tensor pooled = ops::avg_pool_same(Var(gt), cfg.pool_kernel).value();
  Tensor omega(gt.shape());
  for (std::size_t i = 0; i < gt.numel(); ++i) omega[i] = 1.0 + cfg.boundary_gain * std::abs(pooled[i] - gt[i]);
  return omega;
}

Var weighted_bce(const Var& logits, const Tensor& gt, const Tensor& omega) {
  const Layout l = check_layout(logits, gt, omega, "weighted_bce");
  std::vector<double> wsum(static_cast<std::size_t>(l.batch));
  double loss = 0.0;
  for (std::int64_t b = 0; b < l.batch; ++b) {
    double num = 0.0, den = 0.0;
    for (std::int64_t i = b * l.plane; i < (b + 1) * l.plane; ++i) {
      const double x = logits.value()[i], g = gt[i];
      const double bce = std::max(x, 0.0) - x * g + std::log1p(std::exp(-std::abs(x)));
      num += omega[i] * bce;
      den += omega[i];
    }
    wsum[static_cast<std::size_t>(b)] = den;
    loss += num / den;
  }
  loss /= static_cast<double>(l.batch);
  return make_result(Tensor::scalar(loss), "weighted_bce", {logits}, [l, gt, omega, wsum](Node& self) {
    Node* in = self.inputs[0].get();
    Tensor& g = in->grad_buffer();
    const double d = self.grad[0] / static_cast<double>(l.batch);
    for (std::int64_t b = 0; b < l.batch; ++b) {
      const double inv = d / wsum[static_cast<std::size_t>(b)];
      for (std::int64_t i = b * l.plane; i < (b + 1) * l.plane; ++i) {
        g[i] += inv * omega[i] * (stable_sigmoid(in->value[i]) - gt[i]);
      }
    }
  });
}

Var weighted_iou(const Var& logits, const Tensor& gt, const Tensor& omega) {
  const Layout l = check_layout(logits, gt, omega, "weighted_iou");
  std::vector<double> inter(static_cast<std::size_t>(l.batch)), uni(static_cast<std::size_t>(l.batch));
  double loss = 0.0;
  for (std::int64_t b = 0; b < l.batch; ++b) {
    double in = 0.0, un = 0.0;
    for (std::int64_t i = b * l.plane; i < (b + 1) * l.plane; ++i) {
      const double p = stable_sigmoid(logits.value()[i]), g = gt[i];
      in += omega[i] * p * g;
      un += omega[i] * (p + g - p * g);
    }
    inter[static_cast<std::size_t>(b)] = in;
    uni[static_cast<std::size_t>(b)] = un;
    loss += un > 0.0 ? 1.0 - in / un : 0.0;
  }
  loss /= static_cast<double>(l.batch);
  return make_result(Tensor::scalar(loss), "weighted_iou", {logits}, [l, gt, omega, inter, uni](Node& self) {
    Node* node = self.inputs[0].get();
    Tensor& g = node->grad_buffer();
    const double d = self.grad[0] / static_cast<double>(l.batch);
    for (std::int64_t b = 0; b < l.batch; ++b) {
      const double in = inter[static_cast<std::size_t>(b)], un = uni[static_cast<std::size_t>(b)];
      if (!(un > 0.0)) continue;
      for (std::int64_t i = b * l.plane; i < (b + 1) * l.plane; ++i) {
        const double p = stable_sigmoid(node->value[i]);
        const double dratio_dp = omega[i] * (gt[i] * un - in * (1.0 - gt[i])) / (un * un);
        g[i] += -d * dratio_dp * p * (1.0 - p);
      }
    }
  });
}

Tensor downsample_nearest(const Tensor& mask, std::int64_t out_h, std::int64_t out_w) {
  const Shape& s = mask.shape();
  if (s.size() < 2) throw std::invalid_argument("downsample_nearest: need at least [H,W]");
  const std::int64_t h = s[s.size() - 2], w = s[s.size() - 1];
  const std::int64_t planes = static_cast<std::int64_t>(mask.numel()) / (h * w);
  Shape os = s;
  os[os.size() - 2] = out_h;
  os[os.size() - 1] = out_w;
  Tensor out(os);
  for (std::int64_t p = 0; p < planes; ++p) {
    for (std::int64_t y = 0; y < out_h; ++y) {
      const auto sy = std::min(h - 1, static_cast<std::int64_t>(std::floor((y + 0.5) * h / out_h)));
      for (std::int64_t x = 0; x < out_w; ++x) {
        const auto sx = std::min(w - 1, static_cast<std::int64_t>(std::floor((x + 0.5) * w / out_w)));
        out[(p * out_h + y) * out_w + x] = mask[(p * h + sy) * w + sx];
      }
    }
  }
  return out;
}

Targets make_targets(const Tensor& gt, const rfa::SegmentationPrediction& pred, const LossConfig& cfg) {
  Targets t;
  for (int i = 1; i <= kLevels; ++i) {
    const Var& p = pred.logit(i);
    auto& mask = t.masks[static_cast<std::size_t>(i - 1)];
    mask = downsample_nearest(gt, p.dim(-2), p.dim(-1));
    if (mask.shape() != p.shape()) {
      throw std::invalid_argument("make_targets: ground truth " + shape_str(gt.shape()) +
                                  " does not match prediction " + shape_str(p.shape()));
    }
    t.weights[static_cast<std::size_t>(i - 1)] = pixel_weights(mask, cfg);
  }
  return t;
}

double combine_levels(const std::array<double, kLevels>& l) {
  const double coarse = 4.0 * l[1] + 3.0 * l[2] + 2.0 * l[3];
  return 7.0 * l[0] + coarse;
}

LossTerms LossGraph::terms() const {
  LossTerms t;
  for (std::size_t i = 0; i < per_level.size(); ++i) t.per_level[i] = per_level[i].value()[0];
  t.total = total.value()[0];
  return t;
}

LossGraph total_loss(const rfa::SegmentationPrediction& pred, const Targets& targets) {
  LossGraph g;
  for (std::size_t i = 0; i < kLevels; ++i) {
    const Var& logits = pred.logits[i];
    g.per_level[i] = ops::add(weighted_bce(logits, targets.masks[i], targets.weights[i]),
                              weighted_iou(logits, targets.masks[i], targets.weights[i]));
  }
  Var coarse = ops::add(ops::add(ops::scale(g.per_level[1], 4.0), ops::scale(g.per_level[2], 3.0)),
                        ops::scale(g.per_level[3], 2.0));
  g.total = ops::add(ops::scale(g.per_level[0], 7.0), coarse);
  return g;
}

}  // namespace rfm::losses
