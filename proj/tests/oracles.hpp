#pragma once

// Plain-loop reference implementations used as test oracles. Nothing here
// calls into the library's ops.

#include <algorithm>
#include <cmath>
#include <vector>

#include "rfm/nn.hpp"

namespace rfm::oracle {

/// [C,H,W] -> row-major [H*W][C].
inline std::vector<std::vector<double>> tokens(const Tensor& x) {
  const auto c = x.dim(0), h = x.dim(1), w = x.dim(2);
  std::vector<std::vector<double>> t(static_cast<std::size_t>(h * w), std::vector<double>(static_cast<std::size_t>(c)));
  for (std::int64_t ch = 0; ch < c; ++ch)
    for (std::int64_t i = 0; i < h * w; ++i) t[static_cast<std::size_t>(i)][static_cast<std::size_t>(ch)] = x[static_cast<std::size_t>(ch * h * w + i)];
  return t;
}

inline Tensor untokens(const std::vector<std::vector<double>>& t, std::int64_t h, std::int64_t w) {
  const auto c = static_cast<std::int64_t>(t[0].size());
  Tensor x({c, h, w});
  for (std::int64_t ch = 0; ch < c; ++ch)
    for (std::int64_t i = 0; i < h * w; ++i) x[static_cast<std::size_t>(ch * h * w + i)] = t[static_cast<std::size_t>(i)][static_cast<std::size_t>(ch)];
  return x;
}

inline std::vector<double> affine(const std::vector<double>& x, const Tensor& w, const Tensor& b) {
  const auto co = w.dim(0), ci = w.dim(1);
  std::vector<double> y(static_cast<std::size_t>(co));
  for (std::int64_t o = 0; o < co; ++o) {
    double s = b.empty() ? 0.0 : b[static_cast<std::size_t>(o)];
    for (std::int64_t i = 0; i < ci; ++i) s += w.at(o, i) * x[static_cast<std::size_t>(i)];
    y[static_cast<std::size_t>(o)] = s;
  }
  return y;
}

inline std::vector<std::vector<double>> affine_rows(const std::vector<std::vector<double>>& x, const Linear& l) {
  std::vector<std::vector<double>> y;
  for (const auto& row : x) y.push_back(affine(row, l.weight.value(), l.bias.value()));
  return y;
}

inline std::vector<double> softmax(std::vector<double> s) {
  const double m = *std::max_element(s.begin(), s.end());
  double z = 0.0;
  for (auto& v : s) z += (v = std::exp(v - m));
  for (auto& v : s) v /= z;
  return s;
}

/// Multi-head attention over already projected q/k/v token rows; heads take
/// contiguous channel slices.
inline std::vector<std::vector<double>> attention(const std::vector<std::vector<double>>& q,
                                                  const std::vector<std::vector<double>>& k,
                                                  const std::vector<std::vector<double>>& v, int heads) {
  const std::size_t c = q[0].size(), d = c / static_cast<std::size_t>(heads);
  std::vector<std::vector<double>> out(q.size(), std::vector<double>(c, 0.0));
  for (int h = 0; h < heads; ++h) {
    const std::size_t off = static_cast<std::size_t>(h) * d;
    for (std::size_t i = 0; i < q.size(); ++i) {
      std::vector<double> s(k.size());
      for (std::size_t j = 0; j < k.size(); ++j) {
        double dot = 0.0;
        for (std::size_t e = 0; e < d; ++e) dot += q[i][off + e] * k[j][off + e];
        s[j] = dot / std::sqrt(static_cast<double>(d));
      }
      const auto p = softmax(s);
      for (std::size_t j = 0; j < k.size(); ++j)
        for (std::size_t e = 0; e < d; ++e) out[i][off + e] += p[j] * v[j][off + e];
    }
  }
  return out;
}

/// Eval-mode conv block on [C,H,W]: conv (pad k/2) + bias, running-stat BN, ReLU.
inline Tensor conv_block_eval(const Tensor& x, const ConvBlock& p) {
  const Tensor& w = p.kernel.value();
  const auto ci = x.dim(0), h = x.dim(1), wd = x.dim(2), co = w.dim(0), k = w.dim(2), pad = k / 2;
  Tensor out({co, h, wd});
  for (std::int64_t o = 0; o < co; ++o) {
    const auto oi = static_cast<std::size_t>(o);
    for (std::int64_t y = 0; y < h; ++y) {
      for (std::int64_t xx = 0; xx < wd; ++xx) {
        double s = p.bias.value()[oi];
        for (std::int64_t c = 0; c < ci; ++c)
          for (std::int64_t dy = 0; dy < k; ++dy)
            for (std::int64_t dx = 0; dx < k; ++dx) {
              const auto sy = y + dy - pad, sx = xx + dx - pad;
              if (sy >= 0 && sy < h && sx >= 0 && sx < wd) s += w.at(o, c, dy, dx) * x.at(c, sy, sx);
            }
        const double bn = p.bn_gamma.value()[oi] * (s - p.bn.running_mean[oi]) /
                              std::sqrt(p.bn.running_var[oi] + p.bn.eps) +
                          p.bn_beta.value()[oi];
        out.at(o, y, xx) = std::max(0.0, bn);
      }
    }
  }
  return out;
}

/// Randomizes BN running statistics and affine terms so eval-mode blocks are not trivially identity.
inline void perturb_block(ConvBlock& p, Rng& rng) {
  for (auto& v : p.bn_gamma.mutable_value().storage()) v = rng.uniform(0.5, 1.5);
  for (auto& v : p.bn_beta.mutable_value().storage()) v = rng.uniform(-0.2, 0.2);
  for (auto& v : p.bn.running_mean.storage()) v = rng.uniform(-0.2, 0.2);
  for (auto& v : p.bn.running_var.storage()) v = rng.uniform(0.5, 2.0);
  for (auto& v : p.bias.mutable_value().storage()) v = rng.uniform(-0.2, 0.2);
}

}  // namespace rfm::oracle
