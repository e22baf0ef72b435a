#pragma once

#include <string>
#include <utility>
#include <vector>

#include "rfm/ops.hpp"
#include "rfm/random.hpp"

namespace rfm {

using ops::Mode;

/// Named trainable tensors plus non-trainable buffers (BN running statistics,
/// fixed biases). The order of registration is the checkpoint order.
class ParamSet {
 public:
  void add_param(std::string name, Var v) { params_.emplace_back(std::move(name), std::move(v)); }
  void add_buffer(std::string name, Tensor* t) { buffers_.emplace_back(std::move(name), t); }

  const std::vector<std::pair<std::string, Var>>& params() const { return params_; }
  const std::vector<std::pair<std::string, Tensor*>>& buffers() const { return buffers_; }
  std::vector<Var> param_vars() const;
  std::size_t param_count() const;
  void zero_grad() const;

 private:
  std::vector<std::pair<std::string, Var>> params_;
  std::vector<std::pair<std::string, Tensor*>> buffers_;
};

/// Uniform in [-sqrt(6/fan_in), +sqrt(6/fan_in)].
Tensor fan_in_uniform(Shape shape, std::int64_t fan_in, Rng& rng);

/// Convolution -> batch normalization -> ReLU, with "same" zero padding.
///
/// The convolution bias is held as a fixed buffer rather than a trainable
/// parameter: batch statistics cancel it in training mode, so it has no
/// gradient to follow.
struct ConvBlock {
  Var kernel;  // [C_out, C_in, k, k]
  Var bias;    // [C_out], not trainable
  Var bn_gamma;
  Var bn_beta;
  ops::BatchNormState bn;
  int stride = 1;

  static ConvBlock create(std::int64_t c_in, std::int64_t c_out, int k, Rng& rng, int stride = 1);

  std::int64_t in_channels() const { return kernel.dim(1); }
  std::int64_t out_channels() const { return kernel.dim(0); }
  int kernel_size() const { return static_cast<int>(kernel.dim(2)); }

  void collect(ParamSet& set, const std::string& prefix);
};

/// conv_block(x) for [C,H,W] or [B,C,H,W] input. Train mode updates the running
/// statistics held in `p`.
Var conv_block(const Var& x, ConvBlock& p, Mode mode);

/// Resets a block to an identity-like batch norm: gamma 1, beta 0, running (0, 1).
void bypass_batch_norm(ConvBlock& p);

/// Bare convolution with a trainable bias (no normalization, no activation).
struct PlainConv {
  Var kernel;
  Var bias;

  static PlainConv create(std::int64_t c_in, std::int64_t c_out, int k, Rng& rng);
  Var operator()(const Var& x) const;
  void collect(ParamSet& set, const std::string& prefix);
};

/// Token-wise affine map y = x W^T + b. A layer built with `fixed_bias` keeps
/// its bias out of the trainable set.
struct Linear {
  Var weight;  // [C_out, C_in]
  Var bias;    // [C_out]

  static Linear create(std::int64_t c_in, std::int64_t c_out, Rng& rng, bool fixed_bias = false);
  Var operator()(const Var& x) const { return ops::linear(x, weight, bias); }
  void collect(ParamSet& set, const std::string& prefix);
};

}  // namespace rfm
