#include "rfm/ops.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

namespace rfm::ops {

namespace {

using MatR = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapR = Eigen::Map<MatR>;
using CMapR = Eigen::Map<const MatR>;

struct Dims {
  std::int64_t b, c, h, w;
  std::int64_t plane() const { return h * w; }
};

Dims image_dims(const Shape& s, const char* op) {
  if (s.size() == 3) return {1, s[0], s[1], s[2]};
  if (s.size() == 4) return {s[0], s[1], s[2], s[3]};
  throw std::invalid_argument(std::string(op) + ": expected [C,H,W] or [B,C,H,W], got " + shape_str(s));
}

Shape image_shape(const Shape& like, std::int64_t b, std::int64_t c, std::int64_t h, std::int64_t w) {
  if (like.size() == 3) return {c, h, w};
  return {b, c, h, w};
}

void require(bool cond, const std::string& msg) {
  if (!cond) throw std::invalid_argument(msg);
}

void require_same(const Var& a, const Var& b, const char* op) {
  require(a.shape() == b.shape(), std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                                      shape_str(b.shape()));
}

// Gradient slot of input i, or nullptr when that input is a constant.
Tensor* grad_in(Node& self, std::size_t i) {
  Node* in = self.inputs[i].get();
  return in->requires_grad ? &in->grad_buffer() : nullptr;
}

void im2col(const double* img, std::int64_t c, std::int64_t h, std::int64_t w, int k, int stride, int pad,
            std::int64_t oh, std::int64_t ow, double* cols) {
  const std::int64_t p = oh * ow;
  for (std::int64_t ch = 0; ch < c; ++ch) {
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        double* row = cols + ((ch * k + ky) * k + kx) * p;
        for (std::int64_t oy = 0; oy < oh; ++oy) {
          const std::int64_t iy = oy * stride - pad + ky;
          double* dst = row + oy * ow;
          if (iy < 0 || iy >= h) {
            std::fill(dst, dst + ow, 0.0);
            continue;
          }
          const double* src = img + (ch * h + iy) * w;
          for (std::int64_t ox = 0; ox < ow; ++ox) {
            const std::int64_t ix = ox * stride - pad + kx;
            dst[ox] = (ix >= 0 && ix < w) ? src[ix] : 0.0;
          }
        }
      }
    }
  }
}

void col2im_add(const double* cols, std::int64_t c, std::int64_t h, std::int64_t w, int k, int stride, int pad,
                std::int64_t oh, std::int64_t ow, double* img) {
  const std::int64_t p = oh * ow;
  for (std::int64_t ch = 0; ch < c; ++ch) {
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        const double* row = cols + ((ch * k + ky) * k + kx) * p;
        for (std::int64_t oy = 0; oy < oh; ++oy) {
          const std::int64_t iy = oy * stride - pad + ky;
          if (iy < 0 || iy >= h) continue;
          double* dst = img + (ch * h + iy) * w;
          const double* src = row + oy * ow;
          for (std::int64_t ox = 0; ox < ow; ++ox) {
            const std::int64_t ix = ox * stride - pad + kx;
            if (ix >= 0 && ix < w) dst[ix] += src[ox];
          }
        }
      }
    }
  }
}

// Source coordinate and blend weight for half-pixel-centre resampling.
struct Tap {
  std::int64_t i0, i1;
  double lambda;
};

std::vector<Tap> bilinear_taps(std::int64_t in, std::int64_t out) {
  std::vector<Tap> taps(static_cast<std::size_t>(out));
  const double ratio = static_cast<double>(in) / static_cast<double>(out);
  for (std::int64_t o = 0; o < out; ++o) {
    double src = (static_cast<double>(o) + 0.5) * ratio - 0.5;
    if (src < 0.0) src = 0.0;
    auto i0 = static_cast<std::int64_t>(std::floor(src));
    if (i0 > in - 1) i0 = in - 1;
    const std::int64_t i1 = std::min(i0 + 1, in - 1);
    taps[static_cast<std::size_t>(o)] = {i0, i1, src - static_cast<double>(i0)};
  }
  return taps;
}

// Zero-padded box sum along rows then columns; symmetric, so it is its own adjoint.
void box_sum_same(const double* src, double* dst, std::int64_t h, std::int64_t w, int k) {
  const int r = k / 2;
  std::vector<double> tmp(static_cast<std::size_t>(h * w), 0.0);
  for (std::int64_t y = 0; y < h; ++y) {
    for (std::int64_t x = 0; x < w; ++x) {
      double s = 0.0;
      const std::int64_t lo = std::max<std::int64_t>(0, x - r), hi = std::min<std::int64_t>(w - 1, x + r);
      for (std::int64_t xx = lo; xx <= hi; ++xx) s += src[y * w + xx];
      tmp[static_cast<std::size_t>(y * w + x)] = s;
    }
  }
  for (std::int64_t y = 0; y < h; ++y) {
    const std::int64_t lo = std::max<std::int64_t>(0, y - r), hi = std::min<std::int64_t>(h - 1, y + r);
    for (std::int64_t x = 0; x < w; ++x) {
      double s = 0.0;
      for (std::int64_t yy = lo; yy <= hi; ++yy) s += tmp[static_cast<std::size_t>(yy * w + x)];
      dst[y * w + x] = s;
    }
  }
}

}  // namespace

Var add(const Var& a, const Var& b) {
  require_same(a, b, "add");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] += b.value()[i];
  return make_result(std::move(out), "add", {a, b}, [](Node& self) {
    for (std::size_t k = 0; k < 2; ++k) {
      if (Tensor* g = grad_in(self, k)) {
        for (std::size_t i = 0; i < g->numel(); ++i) (*g)[i] += self.grad[i];
      }
    }
  });
}

Var sub(const Var& a, const Var& b) {
  require_same(a, b, "sub");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] -= b.value()[i];
  return make_result(std::move(out), "sub", {a, b}, [](Node& self) {
    if (Tensor* g = grad_in(self, 0)) {
      for (std::size_t i = 0; i < g->numel(); ++i) (*g)[i] += self.grad[i];
    }
    if (Tensor* g = grad_in(self, 1)) {
      for (std::size_t i = 0; i < g->numel(); ++i) (*g)[i] -= self.grad[i];
    }
  });
}

Var mul(const Var& a, const Var& b) {
  require_same(a, b, "mul");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] *= b.value()[i];
  return make_result(std::move(out), "mul", {a, b}, [](Node& self) {
    const Tensor& av = self.inputs[0]->value;
    const Tensor& bv = self.inputs[1]->value;
    if (Tensor* g = grad_in(self, 0)) {
      for (std::size_t i = 0; i < g->numel(); ++i) (*g)[i] += self.grad[i] * bv[i];
    }
    if (Tensor* g = grad_in(self, 1)) {
      for (std::size_t i = 0; i < g->numel(); ++i) (*g)[i] += self.grad[i] * av[i];
    }
  });
}

Var scale(const Var& a, double c) {
  Tensor out = a.value();
  for (auto& v : out.storage()) v *= c;
  return make_result(std::move(out), "scale", {a}, [c](Node& self) {
    if (Tensor* g = grad_in(self, 0)) {
      for (std::size_t i = 0; i < g->numel(); ++i) (*g)[i] += c * self.grad[i];
    }
  });
}

Var reshape(const Var& a, Shape shape) {
  Tensor out = a.value().reshaped(std::move(shape));
  return make_result(std::move(out), "reshape", {a}, [](Node& self) {
    if (Tensor* g = grad_in(self, 0)) {
      for (std::size_t i = 0; i < g->numel(); ++i) (*g)[i] += self.grad[i];
    }
  });
}

Var sum(const Var& a) {
  return make_result(Tensor::scalar(a.value().sum()), "sum", {a}, [](Node& self) {
    if (Tensor* g = grad_in(self, 0)) {
      const double d = self.grad[0];
      for (auto& v : g->storage()) v += d;
    }
  });
}

Var weighted_sum(const Var& a, const Tensor& w) {
  require(a.value().numel() == w.numel(), "weighted_sum: size mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < w.numel(); ++i) s += w[i] * a.value()[i];
  return make_result(Tensor::scalar(s), "weighted_sum", {a}, [w](Node& self) {
    if (Tensor* g = grad_in(self, 0)) {
      const double d = self.grad[0];
      for (std::size_t i = 0; i < g->numel(); ++i) (*g)[i] += d * w[i];
    }
  });
}

Var relu(const Var& x) {
  KinkProbe::record(x.value().data());
  Tensor out = x.value();
  for (auto& v : out.storage()) v = v > 0.0 ? v : 0.0;
  return make_result(std::move(out), "relu", {x}, [](Node& self) {
    if (Tensor* g = grad_in(self, 0)) {
      const Tensor& in = self.inputs[0]->value;
      for (std::size_t i = 0; i < g->numel(); ++i) {
        if (in[i] > 0.0) (*g)[i] += self.grad[i];
      }
    }
  });
}

Var sigmoid(const Var& x) {
  Tensor out = x.value();
  for (auto& v : out.storage()) {
    v = v >= 0.0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v));
  }
  return make_result(std::move(out), "sigmoid", {x}, [](Node& self) {
    if (Tensor* g = grad_in(self, 0)) {
      for (std::size_t i = 0; i < g->numel(); ++i) {
        const double s = self.value[i];
        (*g)[i] += self.grad[i] * s * (1.0 - s);
      }
    }
  });
}

Var matmul(const Var& a, const Var& b) {
  require(a.value().rank() == 2 && b.value().rank() == 2, "matmul: operands must be rank 2");
  const auto m = a.dim(0), k = a.dim(1), n = b.dim(1);
  require(b.dim(0) == k, "matmul: inner extents differ " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  Tensor out({m, n});
  MapR(out.ptr(), m, n).noalias() = CMapR(a.value().ptr(), m, k) * CMapR(b.value().ptr(), k, n);
  return make_result(std::move(out), "matmul", {a, b}, [m, k, n](Node& self) {
    CMapR dc(self.grad.ptr(), m, n);
    if (Tensor* g = grad_in(self, 0)) {
      MapR(g->ptr(), m, k).noalias() += dc * CMapR(self.inputs[1]->value.ptr(), k, n).transpose();
    }
    if (Tensor* g = grad_in(self, 1)) {
      MapR(g->ptr(), k, n).noalias() += CMapR(self.inputs[0]->value.ptr(), m, k).transpose() * dc;
    }
  });
}

Var transpose(const Var& a) {
  require(a.value().rank() == 2, "transpose: operand must be rank 2");
  const auto m = a.dim(0), n = a.dim(1);
  Tensor out({n, m});
  MapR(out.ptr(), n, m) = CMapR(a.value().ptr(), m, n).transpose();
  return make_result(std::move(out), "transpose", {a}, [m, n](Node& self) {
    if (Tensor* g = grad_in(self, 0)) {
      MapR(g->ptr(), m, n) += CMapR(self.grad.ptr(), n, m).transpose();
    }
  });
}

Var softmax_rows(const Var& x) {
  require(x.value().rank() == 2, "softmax_rows: operand must be rank 2");
  const auto m = x.dim(0), n = x.dim(1);
  Tensor out({m, n});
  for (std::int64_t i = 0; i < m; ++i) {
    const double* row = x.value().ptr() + i * n;
    double mx = -INFINITY;
    for (std::int64_t j = 0; j < n; ++j) {
      if (std::isnan(row[j])) throw std::domain_error("softmax_rows: NaN input");
      mx = std::max(mx, row[j]);
    }
    double s = 0.0;
    double* o = out.ptr() + i * n;
    for (std::int64_t j = 0; j < n; ++j) s += (o[j] = std::exp(row[j] - mx));
    for (std::int64_t j = 0; j < n; ++j) o[j] /= s;
  }
  return make_result(std::move(out), "softmax_rows", {x}, [m, n](Node& self) {
    if (Tensor* g = grad_in(self, 0)) {
      for (std::int64_t i = 0; i < m; ++i) {
        const double* y = self.value.ptr() + i * n;
        const double* dy = self.grad.ptr() + i * n;
        double dot = 0.0;
        for (std::int64_t j = 0; j < n; ++j) dot += y[j] * dy[j];
        double* dx = g->ptr() + i * n;
        for (std::int64_t j = 0; j < n; ++j) dx[j] += y[j] * (dy[j] - dot);
      }
    }
  });
}

Var conv2d(const Var& x, const Var& weight, const Var& bias, int stride, int pad) {
  const Dims d = image_dims(x.shape(), "conv2d");
  require(weight.value().rank() == 4, "conv2d: weight must be [Cout,Cin,kH,kW]");
  const auto cout = weight.dim(0), cin = weight.dim(1), k = weight.dim(2);
  require(weight.dim(3) == k, "conv2d: kernel must be square");
  require(cin == d.c, "conv2d: input has " + std::to_string(d.c) + " channels, kernel expects " +
                          std::to_string(cin));
  require(stride >= 1 && pad >= 0, "conv2d: bad stride/pad");
  if (bias) require(bias.value().numel() == static_cast<std::size_t>(cout), "conv2d: bias size mismatch");
  const std::int64_t oh = (d.h + 2 * pad - k) / stride + 1;
  const std::int64_t ow = (d.w + 2 * pad - k) / stride + 1;
  require(oh >= 1 && ow >= 1, "conv2d: output would be empty");
  const std::int64_t p = oh * ow, kk = cin * k * k;
  const bool pointwise = (k == 1 && stride == 1 && pad == 0);
  const int ki = static_cast<int>(k);

  Tensor out(image_shape(x.shape(), d.b, cout, oh, ow));
  std::vector<double> cols(pointwise ? 0 : static_cast<std::size_t>(kk * p));
  CMapR wmat(weight.value().ptr(), cout, kk);
  for (std::int64_t b = 0; b < d.b; ++b) {
    const double* img = x.value().ptr() + b * d.c * d.plane();
    const double* colp = img;
    if (!pointwise) {
      im2col(img, d.c, d.h, d.w, ki, stride, pad, oh, ow, cols.data());
      colp = cols.data();
    }
    MapR o(out.ptr() + b * cout * p, cout, p);
    o.noalias() = wmat * CMapR(colp, kk, p);
    if (bias) {
      for (std::int64_t co = 0; co < cout; ++co) o.row(co).array() += bias.value()[co];
    }
  }

  std::vector<Var> inputs{x, weight};
  if (bias) inputs.push_back(bias);
  const bool has_bias = static_cast<bool>(bias);
  return make_result(std::move(out), "conv2d", std::move(inputs),
                     [d, cout, kk, p, oh, ow, ki, stride, pad, pointwise, has_bias](Node& self) {
                       const Tensor& xv = self.inputs[0]->value;
                       const Tensor& wv = self.inputs[1]->value;
                       Tensor* gx = grad_in(self, 0);
                       Tensor* gw = grad_in(self, 1);
                       Tensor* gb = has_bias ? grad_in(self, 2) : nullptr;
                       std::vector<double> cols(pointwise ? 0 : static_cast<std::size_t>(kk * p));
                       std::vector<double> dcols(pointwise || !gx ? 0 : static_cast<std::size_t>(kk * p));
                       CMapR wmat(wv.ptr(), cout, kk);
                       for (std::int64_t b = 0; b < d.b; ++b) {
                         CMapR dout(self.grad.ptr() + b * cout * p, cout, p);
                         const double* img = xv.ptr() + b * d.c * d.plane();
                         if (gw) {
                           const double* colp = img;
                           if (!pointwise) {
                             im2col(img, d.c, d.h, d.w, ki, stride, pad, oh, ow, cols.data());
                             colp = cols.data();
                           }
                           MapR(gw->ptr(), cout, kk).noalias() += dout * CMapR(colp, kk, p).transpose();
                         }
                         if (gb) {
                           for (std::int64_t co = 0; co < cout; ++co) (*gb)[co] += dout.row(co).sum();
                         }
                         if (gx) {
                           double* gimg = gx->ptr() + b * d.c * d.plane();
                           if (pointwise) {
                             MapR(gimg, kk, p).noalias() += wmat.transpose() * dout;
                           } else {
                             MapR(dcols.data(), kk, p).noalias() = wmat.transpose() * dout;
                             col2im_add(dcols.data(), d.c, d.h, d.w, ki, stride, pad, oh, ow, gimg);
                           }
                         }
                       }
                     });
}

Var batch_norm(const Var& x, const Var& gamma, const Var& beta, BatchNormState& state, Mode mode) {
  const Dims d = image_dims(x.shape(), "batch_norm");
  const auto c = static_cast<std::size_t>(d.c);
  require(gamma.value().numel() == c && beta.value().numel() == c, "batch_norm: affine size mismatch");
  require(state.running_mean.numel() == c && state.running_var.numel() == c,
          "batch_norm: running stats size mismatch");
  const std::int64_t plane = d.plane();
  const double n = static_cast<double>(d.b * plane);

  std::vector<double> mean(c), invstd(c);
  if (mode == Mode::kTrain) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      double s = 0.0;
      for (std::int64_t b = 0; b < d.b; ++b) {
        const double* p = x.value().ptr() + (b * d.c + static_cast<std::int64_t>(ch)) * plane;
        for (std::int64_t i = 0; i < plane; ++i) s += p[i];
      }
      const double mu = s / n;
      double v = 0.0;
      for (std::int64_t b = 0; b < d.b; ++b) {
        const double* p = x.value().ptr() + (b * d.c + static_cast<std::int64_t>(ch)) * plane;
        for (std::int64_t i = 0; i < plane; ++i) v += (p[i] - mu) * (p[i] - mu);
      }
      const double var = v / n;
      mean[ch] = mu;
      invstd[ch] = 1.0 / std::sqrt(var + state.eps);
      const double unbiased = n > 1 ? var * n / (n - 1.0) : var;
      state.running_mean[ch] = (1.0 - state.momentum) * state.running_mean[ch] + state.momentum * mu;
      state.running_var[ch] = (1.0 - state.momentum) * state.running_var[ch] + state.momentum * unbiased;
    }
  } else {
    for (std::size_t ch = 0; ch < c; ++ch) {
      if (!(state.running_var[ch] > 0.0)) {
        throw std::invalid_argument("batch_norm: running variance must be positive");
      }
      mean[ch] = state.running_mean[ch];
      invstd[ch] = 1.0 / std::sqrt(state.running_var[ch] + state.eps);
    }
  }

  Tensor xhat(x.shape());
  Tensor out(x.shape());
  for (std::int64_t b = 0; b < d.b; ++b) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      const std::int64_t off = (b * d.c + static_cast<std::int64_t>(ch)) * plane;
      const double g = gamma.value()[ch], bt = beta.value()[ch];
      for (std::int64_t i = 0; i < plane; ++i) {
        const double h = (x.value()[off + i] - mean[ch]) * invstd[ch];
        xhat[off + i] = h;
        out[off + i] = g * h + bt;
      }
    }
  }

  const bool train = mode == Mode::kTrain;
  return make_result(std::move(out), "batch_norm", {x, gamma, beta},
                     [d, c, plane, n, train, invstd, xhat = std::move(xhat)](Node& self) {
                       const Tensor& gv = self.inputs[1]->value;
                       Tensor* gx = grad_in(self, 0);
                       Tensor* gg = grad_in(self, 1);
                       Tensor* gbeta = grad_in(self, 2);
                       for (std::size_t ch = 0; ch < c; ++ch) {
                         double sdy = 0.0, sdyx = 0.0;
                         for (std::int64_t b = 0; b < d.b; ++b) {
                           const std::int64_t off = (b * d.c + static_cast<std::int64_t>(ch)) * plane;
                           for (std::int64_t i = 0; i < plane; ++i) {
                             sdy += self.grad[off + i];
                             sdyx += self.grad[off + i] * xhat[off + i];
                           }
                         }
                         if (gg) (*gg)[ch] += sdyx;
                         if (gbeta) (*gbeta)[ch] += sdy;
                         if (!gx) continue;
                         const double k = gv[ch] * invstd[ch];
                         for (std::int64_t b = 0; b < d.b; ++b) {
                           const std::int64_t off = (b * d.c + static_cast<std::int64_t>(ch)) * plane;
                           for (std::int64_t i = 0; i < plane; ++i) {
                             if (train) {
                               (*gx)[off + i] += k * (self.grad[off + i] - sdy / n - xhat[off + i] * sdyx / n);
                             } else {
                               (*gx)[off + i] += k * self.grad[off + i];
                             }
                           }
                         }
                       }
                     });
}

Var concat_channels(const std::vector<Var>& parts) {
  require(!parts.empty(), "concat_channels: nothing to concatenate");
  const Dims d0 = image_dims(parts[0].shape(), "concat_channels");
  const int rank = parts[0].value().rank();
  std::int64_t total_c = 0;
  std::vector<std::int64_t> chans;
  for (const auto& p : parts) {
    const Dims d = image_dims(p.shape(), "concat_channels");
    require(p.value().rank() == rank && d.b == d0.b && d.h == d0.h && d.w == d0.w,
            "concat_channels: incompatible part " + shape_str(p.shape()) + " vs " + shape_str(parts[0].shape()));
    chans.push_back(d.c);
    total_c += d.c;
  }
  const std::int64_t plane = d0.plane();
  Tensor out(image_shape(parts[0].shape(), d0.b, total_c, d0.h, d0.w));
  for (std::int64_t b = 0; b < d0.b; ++b) {
    std::int64_t c_off = 0;
    for (std::size_t k = 0; k < parts.size(); ++k) {
      const double* src = parts[k].value().ptr() + b * chans[k] * plane;
      std::copy(src, src + chans[k] * plane, out.ptr() + (b * total_c + c_off) * plane);
      c_off += chans[k];
    }
  }
  return make_result(std::move(out), "concat_channels", parts, [d0, chans, total_c, plane](Node& self) {
    for (std::int64_t b = 0; b < d0.b; ++b) {
      std::int64_t c_off = 0;
      for (std::size_t k = 0; k < chans.size(); ++k) {
        if (Tensor* g = grad_in(self, k)) {
          const double* src = self.grad.ptr() + (b * total_c + c_off) * plane;
          double* dst = g->ptr() + b * chans[k] * plane;
          for (std::int64_t i = 0; i < chans[k] * plane; ++i) dst[i] += src[i];
        }
        c_off += chans[k];
      }
    }
  });
}

Var select_batch(const Var& x, std::int64_t b) {
  require(x.value().rank() == 4, "select_batch: expected [B,C,H,W]");
  require(b >= 0 && b < x.dim(0), "select_batch: index out of range");
  const std::int64_t n = x.dim(1) * x.dim(2) * x.dim(3);
  Tensor out({x.dim(1), x.dim(2), x.dim(3)});
  std::copy(x.value().ptr() + b * n, x.value().ptr() + (b + 1) * n, out.ptr());
  return make_result(std::move(out), "select_batch", {x}, [b, n](Node& self) {
    if (Tensor* g = grad_in(self, 0)) {
      double* dst = g->ptr() + b * n;
      for (std::int64_t i = 0; i < n; ++i) dst[i] += self.grad[i];
    }
  });
}

Var stack_batch(const std::vector<Var>& items) {
  require(!items.empty(), "stack_batch: nothing to stack");
  const Shape s = items[0].shape();
  require(s.size() == 3, "stack_batch: items must be [C,H,W]");
  for (const auto& it : items) require(it.shape() == s, "stack_batch: items differ in shape");
  const auto n = static_cast<std::int64_t>(shape_numel(s));
  Tensor out({static_cast<std::int64_t>(items.size()), s[0], s[1], s[2]});
  for (std::size_t k = 0; k < items.size(); ++k) {
    std::copy(items[k].value().ptr(), items[k].value().ptr() + n, out.ptr() + static_cast<std::int64_t>(k) * n);
  }
  return make_result(std::move(out), "stack_batch", items, [n](Node& self) {
    for (std::size_t k = 0; k < self.inputs.size(); ++k) {
      if (Tensor* g = grad_in(self, k)) {
        const double* src = self.grad.ptr() + static_cast<std::int64_t>(k) * n;
        for (std::int64_t i = 0; i < n; ++i) (*g)[i] += src[i];
      }
    }
  });
}

Var bilinear_resize(const Var& x, std::int64_t out_h, std::int64_t out_w) {
  const Dims d = image_dims(x.shape(), "bilinear_resize");
  require(d.h >= 1 && d.w >= 1 && d.c >= 1, "bilinear_resize: zero-size input");
  require(out_h >= 1 && out_w >= 1, "bilinear_resize: zero-size output");
  const auto ty = bilinear_taps(d.h, out_h);
  const auto tx = bilinear_taps(d.w, out_w);
  Tensor out(image_shape(x.shape(), d.b, d.c, out_h, out_w));
  const std::int64_t planes = d.b * d.c;
  for (std::int64_t pl = 0; pl < planes; ++pl) {
    const double* src = x.value().ptr() + pl * d.plane();
    double* dst = out.ptr() + pl * out_h * out_w;
    for (std::int64_t oy = 0; oy < out_h; ++oy) {
      const Tap& a = ty[static_cast<std::size_t>(oy)];
      for (std::int64_t ox = 0; ox < out_w; ++ox) {
        const Tap& b = tx[static_cast<std::size_t>(ox)];
        const double top = (1.0 - b.lambda) * src[a.i0 * d.w + b.i0] + b.lambda * src[a.i0 * d.w + b.i1];
        const double bot = (1.0 - b.lambda) * src[a.i1 * d.w + b.i0] + b.lambda * src[a.i1 * d.w + b.i1];
        dst[oy * out_w + ox] = (1.0 - a.lambda) * top + a.lambda * bot;
      }
    }
  }
  return make_result(std::move(out), "bilinear_resize", {x}, [d, out_h, out_w, ty, tx, planes](Node& self) {
    Tensor* g = grad_in(self, 0);
    if (!g) return;
    for (std::int64_t pl = 0; pl < planes; ++pl) {
      double* gs = g->ptr() + pl * d.plane();
      const double* go = self.grad.ptr() + pl * out_h * out_w;
      for (std::int64_t oy = 0; oy < out_h; ++oy) {
        const Tap& a = ty[static_cast<std::size_t>(oy)];
        for (std::int64_t ox = 0; ox < out_w; ++ox) {
          const Tap& b = tx[static_cast<std::size_t>(ox)];
          const double v = go[oy * out_w + ox];
          gs[a.i0 * d.w + b.i0] += (1.0 - a.lambda) * (1.0 - b.lambda) * v;
          gs[a.i0 * d.w + b.i1] += (1.0 - a.lambda) * b.lambda * v;
          gs[a.i1 * d.w + b.i0] += a.lambda * (1.0 - b.lambda) * v;
          gs[a.i1 * d.w + b.i1] += a.lambda * b.lambda * v;
        }
      }
    }
  });
}

Var avg_pool_same(const Var& x, int k) {
  require(k >= 1 && k % 2 == 1, "avg_pool_same: kernel size must be odd, got " + std::to_string(k));
  const Dims d = image_dims(x.shape(), "avg_pool_same");
  const double inv = 1.0 / static_cast<double>(k * k);
  Tensor out(x.shape());
  for (std::int64_t pl = 0; pl < d.b * d.c; ++pl) {
    box_sum_same(x.value().ptr() + pl * d.plane(), out.ptr() + pl * d.plane(), d.h, d.w, k);
  }
  for (auto& v : out.storage()) v *= inv;
  return make_result(std::move(out), "avg_pool_same", {x}, [d, k, inv](Node& self) {
    Tensor* g = grad_in(self, 0);
    if (!g) return;
    std::vector<double> tmp(static_cast<std::size_t>(d.plane()));
    for (std::int64_t pl = 0; pl < d.b * d.c; ++pl) {
      box_sum_same(self.grad.ptr() + pl * d.plane(), tmp.data(), d.h, d.w, k);
      double* dst = g->ptr() + pl * d.plane();
      for (std::int64_t i = 0; i < d.plane(); ++i) dst[i] += inv * tmp[static_cast<std::size_t>(i)];
    }
  });
}

Var gate_mul(const Var& g, const Var& p) {
  const Dims dg = image_dims(g.shape(), "gate_mul");
  const Dims dp = image_dims(p.shape(), "gate_mul");
  require(g.value().rank() == p.value().rank() && dp.c == 1 && dp.b == dg.b && dp.h == dg.h && dp.w == dg.w,
          "gate_mul: gate " + shape_str(p.shape()) + " incompatible with " + shape_str(g.shape()));
  const std::int64_t plane = dg.plane();
  Tensor out(g.shape());
  for (std::int64_t b = 0; b < dg.b; ++b) {
    const double* gate = p.value().ptr() + b * plane;
    for (std::int64_t c = 0; c < dg.c; ++c) {
      const std::int64_t off = (b * dg.c + c) * plane;
      for (std::int64_t i = 0; i < plane; ++i) out[off + i] = g.value()[off + i] * gate[i];
    }
  }
  return make_result(std::move(out), "gate_mul", {g, p}, [dg, plane](Node& self) {
    const Tensor& gv = self.inputs[0]->value;
    const Tensor& pv = self.inputs[1]->value;
    Tensor* gg = grad_in(self, 0);
    Tensor* gp = grad_in(self, 1);
    for (std::int64_t b = 0; b < dg.b; ++b) {
      for (std::int64_t c = 0; c < dg.c; ++c) {
        const std::int64_t off = (b * dg.c + c) * plane;
        for (std::int64_t i = 0; i < plane; ++i) {
          if (gg) (*gg)[off + i] += self.grad[off + i] * pv[b * plane + i];
          if (gp) (*gp)[b * plane + i] += self.grad[off + i] * gv[off + i];
        }
      }
    }
  });
}

Var blend(const Var& alpha, const Var& e, const Var& f) {
  require(alpha.value().numel() == 1, "blend: alpha must be a single scalar");
  require_same(e, f, "blend");
  const double a = alpha.value()[0];
  Tensor out(e.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = a * e.value()[i] + (1.0 - a) * f.value()[i];
  return make_result(std::move(out), "blend", {alpha, e, f}, [](Node& self) {
    const double a = self.inputs[0]->value[0];
    const Tensor& ev = self.inputs[1]->value;
    const Tensor& fv = self.inputs[2]->value;
    if (Tensor* ga = grad_in(self, 0)) {
      double s = 0.0;
      for (std::size_t i = 0; i < ev.numel(); ++i) s += self.grad[i] * (ev[i] - fv[i]);
      (*ga)[0] += s;
    }
    if (Tensor* ge = grad_in(self, 1)) {
      for (std::size_t i = 0; i < ge->numel(); ++i) (*ge)[i] += a * self.grad[i];
    }
    if (Tensor* gf = grad_in(self, 2)) {
      for (std::size_t i = 0; i < gf->numel(); ++i) (*gf)[i] += (1.0 - a) * self.grad[i];
    }
  });
}

Var map_to_tokens(const Var& x) {
  require(x.value().rank() == 3, "map_to_tokens: expected [C,H,W]");
  const auto c = x.dim(0), n = x.dim(1) * x.dim(2);
  Tensor out({n, c});
  MapR(out.ptr(), n, c) = CMapR(x.value().ptr(), c, n).transpose();
  return make_result(std::move(out), "map_to_tokens", {x}, [c, n](Node& self) {
    if (Tensor* g = grad_in(self, 0)) MapR(g->ptr(), c, n) += CMapR(self.grad.ptr(), n, c).transpose();
  });
}

Var tokens_to_map(const Var& tokens, std::int64_t h, std::int64_t w) {
  require(tokens.value().rank() == 2 && tokens.dim(0) == h * w,
          "tokens_to_map: " + shape_str(tokens.shape()) + " cannot form a " + std::to_string(h) + "x" +
              std::to_string(w) + " map");
  const auto n = tokens.dim(0), c = tokens.dim(1);
  Tensor out({c, h, w});
  MapR(out.ptr(), c, n) = CMapR(tokens.value().ptr(), n, c).transpose();
  return make_result(std::move(out), "tokens_to_map", {tokens}, [c, n](Node& self) {
    if (Tensor* g = grad_in(self, 0)) MapR(g->ptr(), n, c) += CMapR(self.grad.ptr(), c, n).transpose();
  });
}

Var linear(const Var& x, const Var& weight, const Var& bias) {
  require(x.value().rank() == 2 && weight.value().rank() == 2, "linear: expected x[N,Cin], W[Cout,Cin]");
  const auto n = x.dim(0), cin = x.dim(1), cout = weight.dim(0);
  require(weight.dim(1) == cin, "linear: input width " + std::to_string(cin) + " vs weight " +
                                    shape_str(weight.shape()));
  if (bias) require(bias.value().numel() == static_cast<std::size_t>(cout), "linear: bias size mismatch");
  Tensor out({n, cout});
  MapR o(out.ptr(), n, cout);
  o.noalias() = CMapR(x.value().ptr(), n, cin) * CMapR(weight.value().ptr(), cout, cin).transpose();
  if (bias) {
    for (std::int64_t i = 0; i < n; ++i) {
      for (std::int64_t j = 0; j < cout; ++j) o(i, j) += bias.value()[j];
    }
  }
  std::vector<Var> inputs{x, weight};
  if (bias) inputs.push_back(bias);
  const bool has_bias = static_cast<bool>(bias);
  return make_result(std::move(out), "linear", std::move(inputs), [n, cin, cout, has_bias](Node& self) {
    CMapR dy(self.grad.ptr(), n, cout);
    if (Tensor* g = grad_in(self, 0)) {
      MapR(g->ptr(), n, cin).noalias() += dy * CMapR(self.inputs[1]->value.ptr(), cout, cin);
    }
    if (Tensor* g = grad_in(self, 1)) {
      MapR(g->ptr(), cout, cin).noalias() += dy.transpose() * CMapR(self.inputs[0]->value.ptr(), n, cin);
    }
    if (has_bias) {
      if (Tensor* g = grad_in(self, 2)) {
        for (std::int64_t j = 0; j < cout; ++j) (*g)[j] += dy.col(j).sum();
      }
    }
  });
}

Var attention(const Var& q, const Var& k, const Var& v, int heads, std::vector<Tensor>* weights) {
  require(q.value().rank() == 2 && k.value().rank() == 2 && v.value().rank() == 2,
          "attention: q, k, v must be token matrices");
  const auto nq = q.dim(0), nk = k.dim(0), c = q.dim(1);
  require(k.dim(1) == c && v.dim(1) == c && v.dim(0) == nk, "attention: q/k/v widths or token counts disagree");
  require(heads >= 1 && c % heads == 0, "attention: width " + std::to_string(c) + " not divisible by " +
                                            std::to_string(heads) + " heads");
  const std::int64_t dh = c / heads;
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(dh));
  using Stride = Eigen::OuterStride<>;
  using CBlock = Eigen::Map<const MatR, 0, Stride>;
  using Block = Eigen::Map<MatR, 0, Stride>;

  Tensor out({nq, c});
  std::vector<MatR> probs(static_cast<std::size_t>(heads));
  for (int h = 0; h < heads; ++h) {
    CBlock qh(q.value().ptr() + h * dh, nq, dh, Stride(c));
    CBlock kh(k.value().ptr() + h * dh, nk, dh, Stride(c));
    CBlock vh(v.value().ptr() + h * dh, nk, dh, Stride(c));
    MatR s = (qh * kh.transpose()) * inv_sqrt_d;
    for (std::int64_t i = 0; i < nq; ++i) {
      const double mx = s.row(i).maxCoeff();
      s.row(i) = (s.row(i).array() - mx).exp();
      s.row(i) /= s.row(i).sum();
    }
    Block(out.ptr() + h * dh, nq, dh, Stride(c)).noalias() = s * vh;
    if (weights) weights->emplace_back(Shape{nq, nk}, std::vector<double>(s.data(), s.data() + s.size()));
    probs[static_cast<std::size_t>(h)] = std::move(s);
  }
  return make_result(std::move(out), "attention", {q, k, v},
                     [nq, nk, c, dh, heads, inv_sqrt_d, probs = std::move(probs)](Node& self) {
                       Tensor* gq = grad_in(self, 0);
                       Tensor* gk = grad_in(self, 1);
                       Tensor* gv = grad_in(self, 2);
                       for (int h = 0; h < heads; ++h) {
                         const MatR& a = probs[static_cast<std::size_t>(h)];
                         CBlock qh(self.inputs[0]->value.ptr() + h * dh, nq, dh, Stride(c));
                         CBlock kh(self.inputs[1]->value.ptr() + h * dh, nk, dh, Stride(c));
                         CBlock vh(self.inputs[2]->value.ptr() + h * dh, nk, dh, Stride(c));
                         CBlock dout(self.grad.ptr() + h * dh, nq, dh, Stride(c));
                         if (gv) Block(gv->ptr() + h * dh, nk, dh, Stride(c)).noalias() += a.transpose() * dout;
                         if (!gq && !gk) continue;
                         MatR da = dout * vh.transpose();
                         MatR ds(nq, nk);
                         for (std::int64_t i = 0; i < nq; ++i) {
                           const double dot = a.row(i).dot(da.row(i));
                           ds.row(i) = a.row(i).array() * (da.row(i).array() - dot);
                         }
                         ds *= inv_sqrt_d;
                         if (gq) Block(gq->ptr() + h * dh, nq, dh, Stride(c)).noalias() += ds * kh;
                         if (gk) Block(gk->ptr() + h * dh, nk, dh, Stride(c)).noalias() += ds.transpose() * qh;
                       }
                     });
}

}  // namespace rfm::ops
