#pragma once

#include <optional>
#include <vector>

#include "rfm/autograd.hpp"

// Differentiable operators. Image-like inputs are [C,H,W] or [B,C,H,W]; outputs
// keep the input's rank. Every op validates shapes and throws
// std::invalid_argument on mismatch.
namespace rfm::ops {

inline Var constant(Tensor t) { return Var(std::move(t), false); }

Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, double c);
Var reshape(const Var& a, Shape shape);

/// Sum of all elements, shape [1].
Var sum(const Var& a);
/// Σ w·a with a fixed weight tensor; a cheap random projection for gradient checks.
Var weighted_sum(const Var& a, const Tensor& w);

Var relu(const Var& x);
Var sigmoid(const Var& x);

Var matmul(const Var& a, const Var& b);
Var transpose(const Var& a);
/// Row-wise softmax with max subtraction. Throws std::domain_error on NaN input.
Var softmax_rows(const Var& x);

/// Cross-correlation with zero padding. `bias` may be empty.
Var conv2d(const Var& x, const Var& weight, const Var& bias, int stride, int pad);

struct BatchNormState {
  Tensor running_mean;
  Tensor running_var;
  double eps = 1e-5;
  double momentum = 0.1;
};

enum class Mode { kTrain, kEval };

/// Per-channel batch normalization. Train mode normalizes with batch statistics
/// over (B,H,W) and folds them into `state`; eval mode uses the running stats.
Var batch_norm(const Var& x, const Var& gamma, const Var& beta, BatchNormState& state, Mode mode);

/// Concatenation along the channel axis (axis 0 for rank 3, axis 1 for rank 4).
Var concat_channels(const std::vector<Var>& parts);

/// Image `b` of a [B,C,H,W] batch as [C,H,W].
Var select_batch(const Var& x, std::int64_t b);
/// Inverse of select_batch over all entries: [C,H,W] x B -> [B,C,H,W].
Var stack_batch(const std::vector<Var>& items);

/// Half-pixel-centre bilinear resize (no corner alignment).
Var bilinear_resize(const Var& x, std::int64_t out_h, std::int64_t out_w);

/// Stride-1 k x k mean with zero padding; the divisor is always k*k.
Var avg_pool_same(const Var& x, int k);

/// g * p where p has a single channel broadcast over g's channels.
Var gate_mul(const Var& g, const Var& p);

/// alpha*e + (1-alpha)*f with a learnable one-element alpha.
Var blend(const Var& alpha, const Var& e, const Var& f);

/// [C,H,W] -> [H*W, C] token matrix, and back.
Var map_to_tokens(const Var& x);
Var tokens_to_map(const Var& tokens, std::int64_t h, std::int64_t w);

/// x[N,Cin] * W^T + b, W is [Cout,Cin]; `bias` may be empty.
Var linear(const Var& x, const Var& weight, const Var& bias);

/// Multi-head scaled dot-product attention: per head h, softmax(q_h k_h^T / sqrt(d)) v_h,
/// heads concatenated back along channels. q:[Nq,C], k,v:[Nk,C], C % heads == 0.
/// When `weights` is given, it receives each head's [Nq,Nk] attention matrix.
Var attention(const Var& q, const Var& k, const Var& v, int heads,
              std::vector<Tensor>* weights = nullptr);

}  // namespace rfm::ops
