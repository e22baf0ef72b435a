#include "rfm/grad_check.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace rfm {

namespace {

double eval_scalar(const std::function<Var()>& fn, KinkProbe& probe, std::uint64_t& print) {
  probe.reset();
  Var out = fn();
  if (out.value().numel() != 1) throw std::invalid_argument("grad_check: function must be scalar-valued");
  const double v = out.value()[0];
  if (!std::isfinite(v)) throw std::domain_error("grad_check: non-finite function value");
  print = probe.fingerprint();
  return v;
}

}  // namespace

GradCheckReport grad_check(const std::string& op_name, const std::function<Var()>& fn,
                           const std::vector<Var>& inputs, double h, double floor) {
  GradCheckReport report;
  report.op_name = op_name;
  for (const auto& in : inputs) {
    if (!in.requires_grad()) throw std::invalid_argument("grad_check: every input must require grad");
    Var copy = in;
    copy.zero_grad();
  }

  KinkProbe probe;
  std::uint64_t base_print = 0;
  {
    probe.reset();
    Var out = fn();
    if (out.value().numel() != 1) throw std::invalid_argument("grad_check: function must be scalar-valued");
    if (!std::isfinite(out.value()[0])) throw std::domain_error("grad_check: non-finite function value");
    base_print = probe.fingerprint();
    backward(out);
  }
  std::vector<Tensor> analytic;
  analytic.reserve(inputs.size());
  for (const auto& in : inputs) analytic.push_back(in.grad());

  std::size_t flat = 0;
  for (std::size_t p = 0; p < inputs.size(); ++p) {
    Var in = inputs[p];
    Tensor& value = in.mutable_value();
    for (std::size_t i = 0; i < value.numel(); ++i, ++flat) {
      const double orig = value[i];
      std::uint64_t plus_print = 0, minus_print = 0;
      value[i] = orig + h;
      const double fp = eval_scalar(fn, probe, plus_print);
      value[i] = orig - h;
      const double fm = eval_scalar(fn, probe, minus_print);
      value[i] = orig;
      if (plus_print != base_print || minus_print != base_print) {
        ++report.kink_skipped;
        continue;
      }
      const double numeric = (fp - fm) / (2.0 * h);
      const double a = analytic[p][i];
      const double rel = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), floor});
      ++report.checked;
      if (rel > report.max_rel_error) {
        report.max_rel_error = rel;
        report.worst_index = flat;
      }
    }
  }
  return report;
}

}  // namespace rfm
