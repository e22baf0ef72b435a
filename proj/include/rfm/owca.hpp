#pragma once

#include <stdexcept>
#include <string>
#include <vector>

#include "rfm/nn.hpp"

// Overlapped-window cross-attention: split a camouflage map into half-overlapping
// windows, let each window attend to the full reference map, fold back with
// averaging where windows overlap.
namespace rfm::owca {

/// Raised when a window size does not tile a map with step k/2.
class WindowError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct WindowGrid {
  int k = 0;     // window side
  int step = 0;  // k/2, or k when a single window covers the map
  int m = 0;     // windows per axis
  int h = 0;
  int w = 0;

  int windows() const { return m * m; }
};

/// m = (h - k) / (k/2) + 1, and 1 when k == h.
int window_count(int h, int k);
WindowGrid make_grid(int h, int w, int k);

/// Number of windows covering each pixel, row-major [h*w].
std::vector<int> coverage(const WindowGrid& grid);

struct WindowStack {
  Var windows;  // [m*m, C, k, k]
  WindowGrid grid;
  /// Grid slot (r*m + c) of each window; empty means row-major order.
  std::vector<int> positions;
};

WindowStack partition_overlapped(const Var& x, int k);
Var fold_average(const WindowStack& stack);

struct AttentionConfig {
  int heads = 1;
  int d = 0;  // per-head width

  static AttentionConfig make(std::int64_t channels, int heads);
};

/// Query/key/value/output projections of one attention block. The key bias is
/// fixed: it shifts every score of a query by the same amount, which softmax
/// ignores.
struct AttentionParams {
  Linear q, k, v, o;
  AttentionConfig cfg;

  static AttentionParams create(std::int64_t channels, int heads, Rng& rng);
  std::int64_t channels() const { return q.weight.dim(0); }
  void collect(ParamSet& set, const std::string& prefix);
};

/// Keys and values of a reference map, shared by every window attending to it.
struct ReferenceKeys {
  Var keys;    // [H*W, C]
  Var values;  // [H*W, C]
};

ReferenceKeys project_reference(const Var& ref, const AttentionParams& p);

/// One window [C,k,k] attending to precomputed reference keys.
Var attend_window(const Var& window, const ReferenceKeys& ref, const AttentionParams& p,
                  std::vector<Tensor>* weights = nullptr);

/// Window [C,k,k] attending to a reference map [C,H,W]; output has the window's shape.
Var cross_attention(const Var& window, const Var& ref, const AttentionParams& p,
                    std::vector<Tensor>* weights = nullptr);

/// partition -> cross-attention per window -> fold_average, for one [C,H,W] map.
Var windowed_cross_attention(const Var& x, const Var& ref, int k, const AttentionParams& p);

}  // namespace rfm::owca
