#include "rfm/nn.hpp"

#include <cmath>
#include <stdexcept>

namespace rfm {

std::vector<Var> ParamSet::param_vars() const {
  std::vector<Var> out;
  out.reserve(params_.size());
  for (const auto& [name, v] : params_) out.push_back(v);
  return out;
}

std::size_t ParamSet::param_count() const {
  std::size_t n = 0;
  for (const auto& [name, v] : params_) n += v.value().numel();
  return n;
}

void ParamSet::zero_grad() const {
  for (const auto& [name, v] : params_) {
    Var copy = v;
    copy.zero_grad();
  }
}

Tensor fan_in_uniform(Shape shape, std::int64_t fan_in, Rng& rng) {
  if (fan_in <= 0) throw std::invalid_argument("fan_in must be positive");
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
  Tensor t(std::move(shape));
  for (auto& v : t.storage()) v = rng.uniform(-bound, bound);
  return t;
}

ConvBlock ConvBlock::create(std::int64_t c_in, std::int64_t c_out, int k, Rng& rng, int stride) {
  if (k != 1 && k != 3) throw std::invalid_argument("conv block kernel must be 1 or 3");
  ConvBlock p;
  p.kernel = Var(fan_in_uniform({c_out, c_in, k, k}, c_in * k * k, rng), true);
  p.bias = Var(Tensor({c_out}, 0.0), false);
  p.bn_gamma = Var(Tensor({c_out}, 1.0), true);
  p.bn_beta = Var(Tensor({c_out}, 0.0), true);
  p.bn.running_mean = Tensor({c_out}, 0.0);
  p.bn.running_var = Tensor({c_out}, 1.0);
  p.stride = stride;
  return p;
}

void ConvBlock::collect(ParamSet& set, const std::string& prefix) {
  set.add_param(prefix + ".kernel", kernel);
  set.add_param(prefix + ".bn_gamma", bn_gamma);
  set.add_param(prefix + ".bn_beta", bn_beta);
  set.add_buffer(prefix + ".bias", &bias.mutable_value());
  set.add_buffer(prefix + ".bn_running_mean", &bn.running_mean);
  set.add_buffer(prefix + ".bn_running_var", &bn.running_var);
}

Var conv_block(const Var& x, ConvBlock& p, Mode mode) {
  const int k = p.kernel_size();
  Var y = ops::conv2d(x, p.kernel, p.bias, p.stride, k / 2);
  y = ops::batch_norm(y, p.bn_gamma, p.bn_beta, p.bn, mode);
  return ops::relu(y);
}

void bypass_batch_norm(ConvBlock& p) {
  p.bn_gamma.mutable_value().fill(1.0);
  p.bn_beta.mutable_value().fill(0.0);
  p.bn.running_mean.fill(0.0);
  p.bn.running_var.fill(1.0);
}

PlainConv PlainConv::create(std::int64_t c_in, std::int64_t c_out, int k, Rng& rng) {
  PlainConv c;
  c.kernel = Var(fan_in_uniform({c_out, c_in, k, k}, c_in * k * k, rng), true);
  c.bias = Var(Tensor({c_out}, 0.0), true);
  return c;
}

Var PlainConv::operator()(const Var& x) const {
  return ops::conv2d(x, kernel, bias, 1, static_cast<int>(kernel.dim(2)) / 2);
}

void PlainConv::collect(ParamSet& set, const std::string& prefix) {
  set.add_param(prefix + ".kernel", kernel);
  set.add_param(prefix + ".bias", bias);
}

Linear Linear::create(std::int64_t c_in, std::int64_t c_out, Rng& rng, bool fixed_bias) {
  Linear l;
  l.weight = Var(fan_in_uniform({c_out, c_in}, c_in, rng), true);
  l.bias = Var(Tensor({c_out}, 0.0), !fixed_bias);
  return l;
}

void Linear::collect(ParamSet& set, const std::string& prefix) {
  set.add_param(prefix + ".weight", weight);
  if (bias.requires_grad()) {
    set.add_param(prefix + ".bias", bias);
  } else {
    set.add_buffer(prefix + ".bias", &bias.mutable_value());
  }
}

}  // namespace rfm
