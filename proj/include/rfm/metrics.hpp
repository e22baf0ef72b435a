#pragma once

#include <string>
#include <vector>

#include "rfm/tensor.hpp"

// Segmentation quality measures on a single prediction map pred in [0,1]
// against a binary ground truth, both [1,H,W] (or [H,W]).
namespace rfm::metrics {

inline constexpr double kEps = 2.220446049250313e-16;

double mae(const Tensor& pred, const Tensor& gt);

/// Structure measure, alpha = 0.5. All-background gt: 1 - mean(pred);
/// all-foreground gt: mean(pred). Clamped below at 0.
double s_measure(const Tensor& pred, const Tensor& gt);

/// Enhanced alignment at the adaptive threshold tau = min(2 mean(pred), 1).
/// A pixel is foreground when pred >= tau and pred > 0.
double adaptive_e_measure(const Tensor& pred, const Tensor& gt);

/// Weighted F-measure (beta^2 = 1) with a 7x7, sigma 5 Gaussian dependency
/// kernel and distance decay log(0.5)/5. Zero when gt is empty.
double weighted_f_measure(const Tensor& pred, const Tensor& gt);

struct ImageScores {
  std::string name;
  double s_alpha = 0, adaptive_e = 0, weighted_f = 0, mae = 0;
};

struct MetricReport {
  double s_alpha = 0, adaptive_e = 0, weighted_f = 0, mae = 0;
  std::vector<ImageScores> per_image;
  std::size_t n_images = 0;
};

ImageScores score_image(const Tensor& pred, const Tensor& gt, std::string name = {});

/// Per-image scores and arithmetic means, aggregated in input order.
MetricReport evaluate(const std::vector<Tensor>& preds, const std::vector<Tensor>& gts,
                      const std::vector<std::string>& names = {});

/// Machine-readable key=value report.
std::string format_report(const MetricReport& r);
/// Aligned table: label, S_alpha, alpha_E, F_w, M.
std::string format_table(const std::vector<std::pair<std::string, MetricReport>>& rows);

}  // namespace rfm::metrics
