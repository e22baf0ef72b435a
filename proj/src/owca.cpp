#include "rfm/owca.hpp"

#include <algorithm>

namespace rfm::owca {

int window_count(int h, int k) {
  if (h < 1 || k < 1 || k > h) {
    throw WindowError("window size " + std::to_string(k) + " invalid for extent " + std::to_string(h));
  }
  if (k == h) return 1;
  if (k % 2 != 0) {
    throw WindowError("window size " + std::to_string(k) + " must be even to slide by k/2");
  }
  const int step = k / 2;
  if ((h - k) % step != 0) {
    throw WindowError("extent " + std::to_string(h) + " is not tiled by window " + std::to_string(k) +
                      " with step " + std::to_string(step) + " (edge padding would be required)");
  }
  return (h - k) / step + 1;
}

WindowGrid make_grid(int h, int w, int k) {
  if (h != w) throw WindowError("overlapped windows need a square map, got " + std::to_string(h) + "x" +
                                std::to_string(w));
  WindowGrid g;
  g.k = k;
  g.m = window_count(h, k);
  g.step = g.m == 1 ? k : k / 2;
  g.h = h;
  g.w = w;
  return g;
}

std::vector<int> coverage(const WindowGrid& grid) {
  std::vector<int> count(static_cast<std::size_t>(grid.h * grid.w), 0);
  for (int r = 0; r < grid.m; ++r) {
    for (int c = 0; c < grid.m; ++c) {
      for (int y = 0; y < grid.k; ++y) {
        for (int x = 0; x < grid.k; ++x) {
          ++count[static_cast<std::size_t>((r * grid.step + y) * grid.w + c * grid.step + x)];
        }
      }
    }
  }
  return count;
}

WindowStack partition_overlapped(const Var& x, int k) {
  if (x.value().rank() != 3) throw std::invalid_argument("partition_overlapped: expected [C,H,W]");
  const auto c = x.dim(0);
  const WindowGrid g = make_grid(static_cast<int>(x.dim(1)), static_cast<int>(x.dim(2)), k);
  const std::int64_t kk = static_cast<std::int64_t>(k) * k;
  Tensor out({g.windows(), c, k, k});
  for (int r = 0; r < g.m; ++r) {
    for (int cc = 0; cc < g.m; ++cc) {
      double* dst = out.ptr() + static_cast<std::int64_t>(r * g.m + cc) * c * kk;
      for (std::int64_t ch = 0; ch < c; ++ch) {
        for (int y = 0; y < k; ++y) {
          for (int xx = 0; xx < k; ++xx) {
            dst[ch * kk + y * k + xx] = x.value().at(ch, r * g.step + y, cc * g.step + xx);
          }
        }
      }
    }
  }
  Var windows = make_result(std::move(out), "partition_overlapped", {x}, [g, c, kk](Node& self) {
    Node* in = self.inputs[0].get();
    if (!in->requires_grad) return;
    Tensor& gx = in->grad_buffer();
    for (int r = 0; r < g.m; ++r) {
      for (int cc = 0; cc < g.m; ++cc) {
        const double* src = self.grad.ptr() + static_cast<std::int64_t>(r * g.m + cc) * c * kk;
        for (std::int64_t ch = 0; ch < c; ++ch) {
          for (int y = 0; y < g.k; ++y) {
            for (int xx = 0; xx < g.k; ++xx) {
              gx.at(ch, r * g.step + y, cc * g.step + xx) += src[ch * kk + y * g.k + xx];
            }
          }
        }
      }
    }
  });
  return {windows, g, {}};
}

Var fold_average(const WindowStack& stack) {
  const WindowGrid& g = stack.grid;
  const Shape& s = stack.windows.shape();
  if (s.size() != 4 || s[0] != g.windows() || s[2] != g.k || s[3] != g.k) {
    throw std::invalid_argument("fold_average: stack " + shape_str(s) + " inconsistent with its " +
                                std::to_string(g.m) + "x" + std::to_string(g.m) + " grid of k=" +
                                std::to_string(g.k));
  }
  std::vector<int> pos = stack.positions;
  if (pos.empty()) {
    pos.resize(static_cast<std::size_t>(g.windows()));
    for (int i = 0; i < g.windows(); ++i) pos[static_cast<std::size_t>(i)] = i;
  } else {
    std::vector<int> sorted = pos;
    std::sort(sorted.begin(), sorted.end());
    for (int i = 0; i < g.windows(); ++i) {
      if (static_cast<int>(sorted.size()) != g.windows() || sorted[static_cast<std::size_t>(i)] != i) {
        throw std::invalid_argument("fold_average: window positions are not a permutation of the grid");
      }
    }
  }
  const auto c = s[1];
  const std::int64_t kk = static_cast<std::int64_t>(g.k) * g.k;
  const std::vector<int> cover = coverage(g);

  Tensor out({c, g.h, g.w}, 0.0);
  for (int i = 0; i < g.windows(); ++i) {
    const int r = pos[static_cast<std::size_t>(i)] / g.m, cc = pos[static_cast<std::size_t>(i)] % g.m;
    const double* src = stack.windows.value().ptr() + static_cast<std::int64_t>(i) * c * kk;
    for (std::int64_t ch = 0; ch < c; ++ch) {
      for (int y = 0; y < g.k; ++y) {
        for (int x = 0; x < g.k; ++x) out.at(ch, r * g.step + y, cc * g.step + x) += src[ch * kk + y * g.k + x];
      }
    }
  }
  const std::int64_t plane = static_cast<std::int64_t>(g.h) * g.w;
  for (std::int64_t ch = 0; ch < c; ++ch) {
    for (std::int64_t p = 0; p < plane; ++p) out[ch * plane + p] /= cover[static_cast<std::size_t>(p)];
  }
  return make_result(std::move(out), "fold_average", {stack.windows},
                     [g, c, kk, pos, cover](Node& self) {
                       Node* in = self.inputs[0].get();
                       if (!in->requires_grad) return;
                       Tensor& gw = in->grad_buffer();
                       for (int i = 0; i < g.windows(); ++i) {
                         const int r = pos[static_cast<std::size_t>(i)] / g.m;
                         const int cc = pos[static_cast<std::size_t>(i)] % g.m;
                         double* dst = gw.ptr() + static_cast<std::int64_t>(i) * c * kk;
                         for (std::int64_t ch = 0; ch < c; ++ch) {
                           for (int y = 0; y < g.k; ++y) {
                             for (int x = 0; x < g.k; ++x) {
                               const int py = r * g.step + y, px = cc * g.step + x;
                               dst[ch * kk + y * g.k + x] +=
                                   self.grad.at(ch, py, px) / cover[static_cast<std::size_t>(py * g.w + px)];
                             }
                           }
                         }
                       }
                     });
}

AttentionConfig AttentionConfig::make(std::int64_t channels, int heads) {
  if (heads < 1 || channels % heads != 0) {
    throw std::invalid_argument("attention: " + std::to_string(channels) + " channels not divisible by " +
                                std::to_string(heads) + " heads");
  }
  return {heads, static_cast<int>(channels / heads)};
}

AttentionParams AttentionParams::create(std::int64_t channels, int heads, Rng& rng) {
  AttentionParams p;
  p.cfg = AttentionConfig::make(channels, heads);
  p.q = Linear::create(channels, channels, rng);
  p.k = Linear::create(channels, channels, rng, /*fixed_bias=*/true);
  p.v = Linear::create(channels, channels, rng);
  p.o = Linear::create(channels, channels, rng);
  return p;
}

void AttentionParams::collect(ParamSet& set, const std::string& prefix) {
  q.collect(set, prefix + ".q");
  k.collect(set, prefix + ".k");
  v.collect(set, prefix + ".v");
  o.collect(set, prefix + ".o");
}

ReferenceKeys project_reference(const Var& ref, const AttentionParams& p) {
  if (ref.value().rank() != 3 || ref.dim(0) != p.channels()) {
    throw std::invalid_argument("cross_attention: reference " + shape_str(ref.shape()) + " does not have " +
                                std::to_string(p.channels()) + " channels");
  }
  Var tokens = ops::map_to_tokens(ref);
  return {p.k(tokens), p.v(tokens)};
}

Var attend_window(const Var& window, const ReferenceKeys& ref, const AttentionParams& p,
                  std::vector<Tensor>* weights) {
  if (window.value().rank() != 3 || window.dim(0) != p.channels()) {
    throw std::invalid_argument("cross_attention: window " + shape_str(window.shape()) + " does not have " +
                                std::to_string(p.channels()) + " channels");
  }
  Var q = p.q(ops::map_to_tokens(window));
  Var fused = ops::attention(q, ref.keys, ref.values, p.cfg.heads, weights);
  return ops::tokens_to_map(p.o(fused), window.dim(1), window.dim(2));
}

Var cross_attention(const Var& window, const Var& ref, const AttentionParams& p, std::vector<Tensor>* weights) {
  return attend_window(window, project_reference(ref, p), p, weights);
}

Var windowed_cross_attention(const Var& x, const Var& ref, int k, const AttentionParams& p) {
  WindowStack stack = partition_overlapped(x, k);
  const ReferenceKeys keys = project_reference(ref, p);
  std::vector<Var> fused;
  fused.reserve(static_cast<std::size_t>(stack.grid.windows()));
  for (int i = 0; i < stack.grid.windows(); ++i) {
    fused.push_back(attend_window(ops::select_batch(stack.windows, i), keys, p));
  }
  stack.windows = ops::stack_batch(fused);
  return fold_average(stack);
}

}  // namespace rfm::owca
