#include "rfm/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <sstream>
#include <stdexcept>

namespace rfm::metrics {

namespace {

struct Plane {
  std::int64_t h = 0, w = 0;
};

Plane check_pair(const Tensor& pred, const Tensor& gt, const char* op) {
  if (pred.shape() != gt.shape()) {
    throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(pred.shape()) + " vs " +
                                shape_str(gt.shape()));
  }
  const Shape& s = gt.shape();
  if (s.size() == 2) return {s[0], s[1]};
  if (s.size() == 3 && s[0] == 1) return {s[1], s[2]};
  throw std::invalid_argument(std::string(op) + ": expected [1,H,W] or [H,W], got " + shape_str(s));
}

double mean_of(const Tensor& t) { return t.sum() / static_cast<double>(t.numel()); }

double object_similarity(const std::vector<double>& values) {
  if (values.empty()) return 0.0;
  double x = 0.0;
  for (double v : values) x += v;
  x /= static_cast<double>(values.size());
  double var = 0.0;
  if (values.size() > 1) {
    for (double v : values) var += (v - x) * (v - x);
    var /= static_cast<double>(values.size() - 1);
  }
  return 2.0 * x / (x * x + 1.0 + std::sqrt(var) + kEps);
}

double s_object(const Tensor& pred, const Tensor& gt) {
  std::vector<double> fg, bg;
  for (std::size_t i = 0; i < gt.numel(); ++i) {
    if (gt[i] > 0.5) {
      fg.push_back(pred[i]);
    } else {
      bg.push_back(1.0 - pred[i]);
    }
  }
  const double u = mean_of(gt);
  return u * object_similarity(fg) + (1.0 - u) * object_similarity(bg);
}

double block_ssim(const Tensor& pred, const Tensor& gt, std::int64_t w, std::int64_t y0, std::int64_t y1,
                  std::int64_t x0, std::int64_t x1) {
  const double n = static_cast<double>((y1 - y0) * (x1 - x0));
  double mx = 0.0, my = 0.0;
  for (std::int64_t y = y0; y < y1; ++y) {
    for (std::int64_t x = x0; x < x1; ++x) {
      mx += pred[static_cast<std::size_t>(y * w + x)];
      my += gt[static_cast<std::size_t>(y * w + x)];
    }
  }
  mx /= n;
  my /= n;
  double sx = 0.0, sy = 0.0, sxy = 0.0;
  for (std::int64_t y = y0; y < y1; ++y) {
    for (std::int64_t x = x0; x < x1; ++x) {
      const double dx = pred[static_cast<std::size_t>(y * w + x)] - mx;
      const double dy = gt[static_cast<std::size_t>(y * w + x)] - my;
      sx += dx * dx;
      sy += dy * dy;
      sxy += dx * dy;
    }
  }
  const double denom = std::max(n - 1.0, 1.0);
  sx /= denom;
  sy /= denom;
  sxy /= denom;
  const double alpha = 4.0 * mx * my * sxy;
  const double beta = (mx * mx + my * my) * (sx + sy);
  if (alpha != 0.0) return alpha / (beta + kEps);
  return beta == 0.0 ? 1.0 : 0.0;
}

double s_region(const Tensor& pred, const Tensor& gt, Plane p) {
  // Centroid of the foreground, rounded half to even, shifted by one.
  double sy = 0.0, sx = 0.0, count = 0.0;
  for (std::int64_t y = 0; y < p.h; ++y) {
    for (std::int64_t x = 0; x < p.w; ++x) {
      if (gt[static_cast<std::size_t>(y * p.w + x)] > 0.5) {
        sy += static_cast<double>(y);
        sx += static_cast<double>(x);
        count += 1.0;
      }
    }
  }
  double cy, cx;
  if (count == 0.0) {
    cy = std::nearbyint(static_cast<double>(p.h) / 2.0);
    cx = std::nearbyint(static_cast<double>(p.w) / 2.0);
  } else {
    cy = std::nearbyint(sy / count);
    cx = std::nearbyint(sx / count);
  }
  const auto y = static_cast<std::int64_t>(cy) + 1, x = static_cast<std::int64_t>(cx) + 1;
  const double area = static_cast<double>(p.h * p.w);
  const double w1 = static_cast<double>(x * y) / area;
  const double w2 = static_cast<double>(y * (p.w - x)) / area;
  const double w3 = static_cast<double>((p.h - y) * x) / area;
  const double w4 = 1.0 - w1 - w2 - w3;
  struct Block {
    double weight;
    std::int64_t y0, y1, x0, x1;
  };
  const Block blocks[4] = {{w1, 0, y, 0, x}, {w2, 0, y, x, p.w}, {w3, y, p.h, 0, x}, {w4, y, p.h, x, p.w}};
  double score = 0.0;
  for (const Block& b : blocks) {
    if (b.y1 <= b.y0 || b.x1 <= b.x0) continue;
    score += b.weight * block_ssim(pred, gt, p.w, b.y0, b.y1, b.x0, b.x1);
  }
  return score;
}

// Nearest foreground pixel of every pixel (itself when foreground) and its
// Euclidean distance; ties go to the smallest row-major index.
void nearest_foreground(const Tensor& gt, Plane p, std::vector<std::size_t>& idx, std::vector<double>& dist) {
  const std::size_t n = gt.numel();
  idx.assign(n, 0);
  dist.assign(n, 0.0);
  std::vector<std::size_t> fg;
  for (std::size_t i = 0; i < n; ++i) {
    if (gt[i] > 0.5) fg.push_back(i);
  }
  for (std::size_t i = 0; i < n; ++i) {
    if (gt[i] > 0.5) {
      idx[i] = i;
      continue;
    }
    const auto y = static_cast<std::int64_t>(i) / p.w, x = static_cast<std::int64_t>(i) % p.w;
    std::int64_t best = std::numeric_limits<std::int64_t>::max();
    for (std::size_t j : fg) {
      const auto dy = static_cast<std::int64_t>(j) / p.w - y, dx = static_cast<std::int64_t>(j) % p.w - x;
      const std::int64_t d2 = dy * dy + dx * dx;
      if (d2 < best) {
        best = d2;
        idx[i] = j;
      }
    }
    dist[i] = std::sqrt(static_cast<double>(best));
  }
}

std::vector<double> gaussian_kernel_7x7() {
  std::vector<double> k(49);
  double peak = 0.0;
  for (int y = -3; y <= 3; ++y) {
    for (int x = -3; x <= 3; ++x) {
      const double v = std::exp(-static_cast<double>(x * x + y * y) / (2.0 * 25.0));
      k[static_cast<std::size_t>((y + 3) * 7 + x + 3)] = v;
      peak = std::max(peak, v);
    }
  }
  double sum = 0.0;
  for (double& v : k) {
    if (v < std::numeric_limits<double>::epsilon() * peak) v = 0.0;
    sum += v;
  }
  for (double& v : k) v /= sum;
  return k;
}

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

double mae(const Tensor& pred, const Tensor& gt) {
  check_pair(pred, gt, "mae");
  double s = 0.0;
  for (std::size_t i = 0; i < gt.numel(); ++i) s += std::abs(pred[i] - gt[i]);
  return s / static_cast<double>(gt.numel());
}

double s_measure(const Tensor& pred, const Tensor& gt) {
  const Plane p = check_pair(pred, gt, "s_measure");
  const double y = mean_of(gt);
  if (y == 0.0) return 1.0 - mean_of(pred);
  if (y == 1.0) return mean_of(pred);
  const double q = 0.5 * s_object(pred, gt) + 0.5 * s_region(pred, gt, p);
  return std::max(0.0, q);
}

double adaptive_e_measure(const Tensor& pred, const Tensor& gt) {
  check_pair(pred, gt, "adaptive_e_measure");
  const auto n = static_cast<double>(gt.numel());
  const double tau = std::min(2.0 * mean_of(pred), 1.0);
  double fg_fg = 0, fg_bg = 0, gt_fg = 0;
  for (std::size_t i = 0; i < gt.numel(); ++i) {
    const bool b = pred[i] >= tau && pred[i] > 0.0;
    const bool g = gt[i] > 0.5;
    gt_fg += g;
    fg_fg += b && g;
    fg_bg += b && !g;
  }
  const double pred_fg = fg_fg + fg_bg;
  double total;
  if (gt_fg == 0.0) {
    total = n - pred_fg;
  } else if (gt_fg == n) {
    total = pred_fg;
  } else {
    const double bg_fg = gt_fg - fg_fg;
    const double bg_bg = n - fg_fg - fg_bg - bg_fg;
    const double mp = pred_fg / n, mg = gt_fg / n;
    const double counts[4] = {fg_fg, fg_bg, bg_fg, bg_bg};
    const double pv[4] = {1.0 - mp, 1.0 - mp, -mp, -mp};
    const double gv[4] = {1.0 - mg, -mg, 1.0 - mg, -mg};
    total = 0.0;
    for (int k = 0; k < 4; ++k) {
      const double align = 2.0 * pv[k] * gv[k] / (pv[k] * pv[k] + gv[k] * gv[k] + kEps);
      total += counts[k] * (align + 1.0) * (align + 1.0) / 4.0;
    }
  }
  return total / n;
}

double weighted_f_measure(const Tensor& pred, const Tensor& gt) {
  const Plane p = check_pair(pred, gt, "weighted_f_measure");
  if (gt.sum() == 0.0) return 0.0;
  const std::size_t n = gt.numel();
  std::vector<std::size_t> idx;
  std::vector<double> dist;
  nearest_foreground(gt, p, idx, dist);

  std::vector<double> e(n), et(n);
  for (std::size_t i = 0; i < n; ++i) e[i] = std::abs(pred[i] - gt[i]);
  for (std::size_t i = 0; i < n; ++i) et[i] = e[idx[i]];

  const auto k = gaussian_kernel_7x7();
  std::vector<double> ea(n, 0.0);
  for (std::int64_t y = 0; y < p.h; ++y) {
    for (std::int64_t x = 0; x < p.w; ++x) {
      double acc = 0.0;
      for (int dy = -3; dy <= 3; ++dy) {
        const std::int64_t yy = y + dy;
        if (yy < 0 || yy >= p.h) continue;
        for (int dx = -3; dx <= 3; ++dx) {
          const std::int64_t xx = x + dx;
          if (xx < 0 || xx >= p.w) continue;
          acc += k[static_cast<std::size_t>((dy + 3) * 7 + dx + 3)] * et[static_cast<std::size_t>(yy * p.w + xx)];
        }
      }
      ea[static_cast<std::size_t>(y * p.w + x)] = acc;
    }
  }

  double tp = 0.0, fp = 0.0, ew_fg = 0.0, n_fg = 0.0;
  const double decay = std::log(0.5) / 5.0;
  for (std::size_t i = 0; i < n; ++i) {
    const bool g = gt[i] > 0.5;
    const double m = (g && ea[i] < e[i]) ? ea[i] : e[i];
    const double b = g ? 1.0 : 2.0 - std::exp(decay * dist[i]);
    const double ew = m * b;
    if (g) {
      ew_fg += ew;
      n_fg += 1.0;
    } else {
      fp += ew;
    }
  }
  tp = n_fg - ew_fg;
  const double r = 1.0 - ew_fg / n_fg;
  const double prec = tp / (tp + fp + kEps);
  return 2.0 * r * prec / (r + prec + kEps);
}

ImageScores score_image(const Tensor& pred, const Tensor& gt, std::string name) {
  for (double v : gt.data()) {
    if (v != 0.0 && v != 1.0) throw std::invalid_argument("score_image: ground truth must be binary");
  }
  for (double v : pred.data()) {
    if (!(v >= 0.0 && v <= 1.0)) throw std::invalid_argument("score_image: prediction must lie in [0, 1]");
  }
  ImageScores s;
  s.name = std::move(name);
  s.s_alpha = s_measure(pred, gt);
  s.adaptive_e = adaptive_e_measure(pred, gt);
  s.weighted_f = weighted_f_measure(pred, gt);
  s.mae = mae(pred, gt);
  return s;
}

MetricReport evaluate(const std::vector<Tensor>& preds, const std::vector<Tensor>& gts,
                      const std::vector<std::string>& names) {
  if (preds.size() != gts.size()) throw std::invalid_argument("evaluate: prediction and ground-truth counts differ");
  if (!names.empty() && names.size() != preds.size()) throw std::invalid_argument("evaluate: name count differs");
  if (preds.empty()) throw std::invalid_argument("evaluate: nothing to evaluate");
  MetricReport r;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    r.per_image.push_back(score_image(preds[i], gts[i], names.empty() ? std::to_string(i) : names[i]));
    const ImageScores& s = r.per_image.back();
    r.s_alpha += s.s_alpha;
    r.adaptive_e += s.adaptive_e;
    r.weighted_f += s.weighted_f;
    r.mae += s.mae;
  }
  r.n_images = preds.size();
  const auto n = static_cast<double>(r.n_images);
  r.s_alpha /= n;
  r.adaptive_e /= n;
  r.weighted_f /= n;
  r.mae /= n;
  return r;
}

std::string format_report(const MetricReport& r) {
  std::ostringstream os;
  os << "# s_alpha: alpha=0.5; empty gt -> 1-mean(pred), full gt -> mean(pred)\n"
     << "# adaptive_e: tau=min(2*mean(pred),1); empty gt scores the predicted background\n"
     << "# weighted_f: beta^2=1, gaussian 7x7 sigma 5; empty gt -> 0\n"
     << "n_images=" << r.n_images << '\n'
     << "s_alpha=" << fmt(r.s_alpha) << '\n'
     << "adaptive_e=" << fmt(r.adaptive_e) << '\n'
     << "weighted_f=" << fmt(r.weighted_f) << '\n'
     << "mae=" << fmt(r.mae) << '\n';
  for (const auto& s : r.per_image) {
    os << "image." << s.name << '=' << fmt(s.s_alpha) << ' ' << fmt(s.adaptive_e) << ' ' << fmt(s.weighted_f) << ' '
       << fmt(s.mae) << '\n';
  }
  return os.str();
}

std::string format_table(const std::vector<std::pair<std::string, MetricReport>>& rows) {
  std::size_t width = 5;
  for (const auto& [label, _] : rows) width = std::max(width, label.size());
  std::ostringstream os;
  char buf[160];
  std::snprintf(buf, sizeof buf, "%-*s  %8s  %8s  %8s  %8s\n", static_cast<int>(width), "arm", "S_alpha", "alpha_E",
                "F_w", "M");
  os << buf;
  for (const auto& [label, r] : rows) {
    std::snprintf(buf, sizeof buf, "%-*s  %8.4f  %8.4f  %8.4f  %8.4f\n", static_cast<int>(width), label.c_str(),
                  r.s_alpha, r.adaptive_e, r.weighted_f, r.mae);
    os << buf;
  }
  return os.str();
}

}  // namespace rfm::metrics
