#include "hrefnet/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>

#include "hrefnet/errors.hpp"
#include "fast_math.hpp"

namespace hrefnet::ops {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using ConstMapMat = Eigen::Map<const RowMat>;
using StridedMapMat = Eigen::Map<RowMat, 0, Eigen::OuterStride<>>;
using ConstStridedMapMat = Eigen::Map<const RowMat, 0, Eigen::OuterStride<>>;

thread_local std::uint64_t g_macs = 0;
thread_local bool g_mac_active = false;

void require_rank(const Tensor& t, std::size_t rank, const char* op) {
  if (t.rank() != rank) {
    throw InvalidArgument(std::string(op) + ": expected rank " + std::to_string(rank) +
                          " tensor, got " + shape_string(t.shape()));
  }
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw InvalidArgument(std::string(op) + ": shape mismatch " + shape_string(a.shape()) +
                          " vs " + shape_string(b.shape()));
  }
}

struct ConvGeometry {
  std::int64_t n, cin, h, w, cout, cin_g, cout_g, kh, kw, hout, wout;
  int stride, pad, dil, groups;
  std::int64_t col_rows() const { return cin_g * kh * kw; }
  std::int64_t pixels() const { return hout * wout; }
  bool pointwise() const { return kh == 1 && kw == 1 && stride == 1 && pad == 0; }
  bool depthwise() const { return groups > 1 && cin_g == 1 && cout_g == 1; }
};

ConvGeometry conv_geometry(const Tensor& x, const Tensor& weight, const Conv2dOptions& o) {
  require_rank(x, 4, "conv2d");
  require_rank(weight, 4, "conv2d weight");
  if (o.stride < 1 || o.dilation < 1 || o.padding < 0 || o.groups < 1) {
    throw InvalidArgument("conv2d: invalid stride/padding/dilation/groups");
  }
  ConvGeometry g{};
  g.n = x.dim(0);
  g.cin = x.dim(1);
  g.h = x.dim(2);
  g.w = x.dim(3);
  g.cout = weight.dim(0);
  g.cin_g = weight.dim(1);
  g.kh = weight.dim(2);
  g.kw = weight.dim(3);
  g.stride = o.stride;
  g.pad = o.padding;
  g.dil = o.dilation;
  g.groups = o.groups;
  if (g.cin % o.groups != 0 || g.cout % o.groups != 0 || g.cin / o.groups != g.cin_g) {
    throw InvalidArgument("conv2d: channel mismatch, input " + shape_string(x.shape()) +
                          " weight " + shape_string(weight.shape()) + " groups " +
                          std::to_string(o.groups));
  }
  g.cout_g = g.cout / o.groups;
  g.hout = (g.h + 2 * g.pad - g.dil * (g.kh - 1) - 1) / g.stride + 1;
  g.wout = (g.w + 2 * g.pad - g.dil * (g.kw - 1) - 1) / g.stride + 1;
  if (g.hout <= 0 || g.wout <= 0) {
    throw InvalidArgument("conv2d: input " + shape_string(x.shape()) + " too small for kernel");
  }
  return g;
}

// Output rows [oh0, oh1) of the unfolded input: col is (col_rows, (oh1 - oh0) * wout).
void im2col(const double* x, const ConvGeometry& g, std::int64_t oh0, std::int64_t oh1, double* col) {
  const std::int64_t p = (oh1 - oh0) * g.wout;
  for (std::int64_t c = 0; c < g.cin_g; ++c) {
    for (std::int64_t i = 0; i < g.kh; ++i) {
      for (std::int64_t j = 0; j < g.kw; ++j) {
        double* row = col + ((c * g.kh + i) * g.kw + j) * p;
        const double* plane = x + c * g.h * g.w;
        for (std::int64_t oh = oh0; oh < oh1; ++oh) {
          const std::int64_t ih = oh * g.stride - g.pad + i * g.dil;
          double* dst = row + (oh - oh0) * g.wout;
          if (ih < 0 || ih >= g.h) {
            std::fill(dst, dst + g.wout, 0.0);
            continue;
          }
          const double* src = plane + ih * g.w;
          if (g.stride == 1) {
            const std::int64_t shift = j * g.dil - g.pad;
            const std::int64_t lo = std::clamp<std::int64_t>(-shift, 0, g.wout);
            const std::int64_t hi = std::clamp<std::int64_t>(g.w - shift, lo, g.wout);
            std::fill(dst, dst + lo, 0.0);
            std::copy(src + lo + shift, src + hi + shift, dst + lo);
            std::fill(dst + hi, dst + g.wout, 0.0);
            continue;
          }
          for (std::int64_t ow = 0; ow < g.wout; ++ow) {
            const std::int64_t iw = ow * g.stride - g.pad + j * g.dil;
            dst[ow] = (iw >= 0 && iw < g.w) ? src[iw] : 0.0;
          }
        }
      }
    }
  }
}

void col2im(const double* col, const ConvGeometry& g, std::int64_t oh0, std::int64_t oh1, double* gx) {
  const std::int64_t p = (oh1 - oh0) * g.wout;
  for (std::int64_t c = 0; c < g.cin_g; ++c) {
    for (std::int64_t i = 0; i < g.kh; ++i) {
      for (std::int64_t j = 0; j < g.kw; ++j) {
        const double* row = col + ((c * g.kh + i) * g.kw + j) * p;
        double* plane = gx + c * g.h * g.w;
        for (std::int64_t oh = oh0; oh < oh1; ++oh) {
          const std::int64_t ih = oh * g.stride - g.pad + i * g.dil;
          if (ih < 0 || ih >= g.h) continue;
          double* dst = plane + ih * g.w;
          const double* src = row + (oh - oh0) * g.wout;
          for (std::int64_t ow = 0; ow < g.wout; ++ow) {
            const std::int64_t iw = ow * g.stride - g.pad + j * g.dil;
            if (iw >= 0 && iw < g.w) dst[iw] += src[ow];
          }
        }
      }
    }
  }
}

// Output rows per im2col tile, keeping the unfolded block near 1 MiB.
std::int64_t tile_rows(const ConvGeometry& g) {
  const std::int64_t per_row = std::max<std::int64_t>(1, g.col_rows() * g.wout);
  return std::clamp<std::int64_t>((1 << 17) / per_row, 1, g.hout);
}

Tensor depthwise_forward(const Tensor& x, const Tensor& w, const Tensor* b, const ConvGeometry& g) {
  Tensor out({g.n, g.cout, g.hout, g.wout});
  for (std::int64_t n = 0; n < g.n; ++n) {
    for (std::int64_t c = 0; c < g.cout; ++c) {
      const double* plane = x.data() + (n * g.cin + c) * g.h * g.w;
      const double* k = w.data() + c * g.kh * g.kw;
      double* dst = out.data() + (n * g.cout + c) * g.hout * g.wout;
      const double bias = b ? (*b)[c] : 0.0;
      for (std::int64_t oh = 0; oh < g.hout; ++oh) {
        for (std::int64_t ow = 0; ow < g.wout; ++ow) {
          double acc = bias;
          for (std::int64_t i = 0; i < g.kh; ++i) {
            const std::int64_t ih = oh * g.stride - g.pad + i * g.dil;
            if (ih < 0 || ih >= g.h) continue;
            for (std::int64_t j = 0; j < g.kw; ++j) {
              const std::int64_t iw = ow * g.stride - g.pad + j * g.dil;
              if (iw < 0 || iw >= g.w) continue;
              acc += k[i * g.kw + j] * plane[ih * g.w + iw];
            }
          }
          dst[oh * g.wout + ow] = acc;
        }
      }
    }
  }
  return out;
}

void depthwise_backward(const Tensor& x, const Tensor& w, const Tensor& gout, const ConvGeometry& g,
                        Tensor* gx, Tensor* gw, Tensor* gb) {
  for (std::int64_t n = 0; n < g.n; ++n) {
    for (std::int64_t c = 0; c < g.cout; ++c) {
      const double* plane = x.data() + (n * g.cin + c) * g.h * g.w;
      const double* k = w.data() + c * g.kh * g.kw;
      const double* go = gout.data() + (n * g.cout + c) * g.hout * g.wout;
      double* gplane = gx ? gx->data() + (n * g.cin + c) * g.h * g.w : nullptr;
      double* gk = gw ? gw->data() + c * g.kh * g.kw : nullptr;
      double bias_acc = 0.0;
      for (std::int64_t oh = 0; oh < g.hout; ++oh) {
        for (std::int64_t ow = 0; ow < g.wout; ++ow) {
          const double gv = go[oh * g.wout + ow];
          bias_acc += gv;
          for (std::int64_t i = 0; i < g.kh; ++i) {
            const std::int64_t ih = oh * g.stride - g.pad + i * g.dil;
            if (ih < 0 || ih >= g.h) continue;
            for (std::int64_t j = 0; j < g.kw; ++j) {
              const std::int64_t iw = ow * g.stride - g.pad + j * g.dil;
              if (iw < 0 || iw >= g.w) continue;
              if (gk) gk[i * g.kw + j] += gv * plane[ih * g.w + iw];
              if (gplane) gplane[ih * g.w + iw] += gv * k[i * g.kw + j];
            }
          }
        }
      }
      if (gb) (*gb)[c] += bias_acc;
    }
  }
}

template <typename F, typename DF>
Var unary(const Var& x, F f, DF df) {
  const Tensor& xv = x.value();
  Tensor out(xv.shape());
  for (std::int64_t i = 0; i < xv.numel(); ++i) out[i] = f(xv[i]);
  return make_result(std::move(out), {x}, [df](Node& self) {
    Tensor* gx = self.input_grad(0);
    if (!gx) return;
    const Tensor& xv = self.input_value(0);
    for (std::int64_t i = 0; i < xv.numel(); ++i) {
      (*gx)[i] += self.grad[i] * df(xv[i], self.value[i]);
    }
  });
}

struct AxisWeights {
  std::vector<std::int64_t> i0, i1;
  std::vector<double> l1;  // weight of i1; i0 gets 1 - l1
};

AxisWeights axis_weights(std::int64_t in, std::int64_t out) {
  AxisWeights a;
  a.i0.resize(static_cast<std::size_t>(out));
  a.i1.resize(static_cast<std::size_t>(out));
  a.l1.resize(static_cast<std::size_t>(out));
  const double scale = static_cast<double>(in) / static_cast<double>(out);
  for (std::int64_t o = 0; o < out; ++o) {
    double src = (static_cast<double>(o) + 0.5) * scale - 0.5;
    if (src < 0.0) src = 0.0;
    auto lo = static_cast<std::int64_t>(std::floor(src));
    if (lo > in - 1) lo = in - 1;
    const std::int64_t hi = std::min(lo + 1, in - 1);
    a.i0[o] = lo;
    a.i1[o] = hi;
    a.l1[o] = src - static_cast<double>(lo);
  }
  return a;
}

}  // namespace

Var conv2d(const Var& x, const Var& weight, const Var& bias, const Conv2dOptions& opts) {
  const ConvGeometry g = conv_geometry(x.value(), weight.value(), opts);
  const bool has_bias = bias.defined();
  if (has_bias && (bias.value().numel() != g.cout)) {
    throw InvalidArgument("conv2d: bias length " + std::to_string(bias.value().numel()) +
                          " does not match output channels " + std::to_string(g.cout));
  }
  if (g_mac_active) {
    g_macs += static_cast<std::uint64_t>(g.n * g.cout * g.pixels() * g.col_rows());
  }

  if (g.depthwise()) {
    Tensor out = depthwise_forward(x.value(), weight.value(), has_bias ? &bias.value() : nullptr, g);
    std::vector<Var> inputs{x, weight};
    if (has_bias) inputs.push_back(bias);
    return make_result(std::move(out), inputs, [g, has_bias](Node& self) {
      depthwise_backward(self.input_value(0), self.input_value(1), self.grad, g, self.input_grad(0),
                         self.input_grad(1), has_bias ? self.input_grad(2) : nullptr);
    });
  }

  Tensor out({g.n, g.cout, g.hout, g.wout});
  const std::int64_t p = g.pixels();
  const std::int64_t k = g.col_rows();
  const std::int64_t rows = tile_rows(g);
  std::vector<double> col(g.pointwise() ? 0 : static_cast<std::size_t>(k * rows * g.wout));
  for (std::int64_t n = 0; n < g.n; ++n) {
    for (int grp = 0; grp < g.groups; ++grp) {
      const double* xin = x.value().data() + (n * g.cin + grp * g.cin_g) * g.h * g.w;
      ConstMapMat wmat(weight.value().data() + grp * g.cout_g * k, g.cout_g, k);
      double* obase = out.data() + (n * g.cout + grp * g.cout_g) * p;
      if (g.pointwise()) {
        MapMat(obase, g.cout_g, p).noalias() = wmat * ConstMapMat(xin, k, p);
      } else {
        for (std::int64_t oh0 = 0; oh0 < g.hout; oh0 += rows) {
          const std::int64_t oh1 = std::min(oh0 + rows, g.hout);
          const std::int64_t tp = (oh1 - oh0) * g.wout;
          im2col(xin, g, oh0, oh1, col.data());
          StridedMapMat(obase + oh0 * g.wout, g.cout_g, tp, Eigen::OuterStride<>(p)).noalias() =
              wmat * ConstMapMat(col.data(), k, tp);
        }
      }
      if (has_bias) {
        for (std::int64_t o = 0; o < g.cout_g; ++o) {
          MapMat(obase, g.cout_g, p).row(o).array() += bias.value()[grp * g.cout_g + o];
        }
      }
    }
  }

  std::vector<Var> inputs{x, weight};
  if (has_bias) inputs.push_back(bias);
  return make_result(std::move(out), inputs, [g, has_bias](Node& self) {
    const Tensor& xv = self.input_value(0);
    const Tensor& wv = self.input_value(1);
    Tensor* gx = self.input_grad(0);
    Tensor* gw = self.input_grad(1);
    Tensor* gb = has_bias ? self.input_grad(2) : nullptr;
    const std::int64_t p = g.pixels();
    const std::int64_t k = g.col_rows();
    const std::int64_t rows = tile_rows(g);
    const auto tile = static_cast<std::size_t>(g.pointwise() ? 0 : k * rows * g.wout);
    std::vector<double> col(gw ? tile : 0), gcol(gx ? tile : 0);
    for (std::int64_t n = 0; n < g.n; ++n) {
      for (int grp = 0; grp < g.groups; ++grp) {
        const double* xin = xv.data() + (n * g.cin + grp * g.cin_g) * g.h * g.w;
        const double* gobase = self.grad.data() + (n * g.cout + grp * g.cout_g) * p;
        ConstMapMat go(gobase, g.cout_g, p);
        ConstMapMat wmat(wv.data() + grp * g.cout_g * k, g.cout_g, k);
        double* gxin = gx ? gx->data() + (n * g.cin + grp * g.cin_g) * g.h * g.w : nullptr;
        if (gb) {
          for (std::int64_t o = 0; o < g.cout_g; ++o) {
            const double* row = gobase + o * p;
            double acc = 0.0;
            for (std::int64_t i = 0; i < p; ++i) acc += row[i];
            (*gb)[grp * g.cout_g + o] += acc;
          }
        }
        if (g.pointwise()) {
          if (gw) MapMat(gw->data() + grp * g.cout_g * k, g.cout_g, k).noalias() += go * ConstMapMat(xin, k, p).transpose();
          if (gx) MapMat(gxin, k, p).noalias() += wmat.transpose() * go;
          continue;
        }
        for (std::int64_t oh0 = 0; oh0 < g.hout; oh0 += rows) {
          const std::int64_t oh1 = std::min(oh0 + rows, g.hout);
          const std::int64_t tp = (oh1 - oh0) * g.wout;
          ConstStridedMapMat got(gobase + oh0 * g.wout, g.cout_g, tp, Eigen::OuterStride<>(p));
          if (gw) {
            im2col(xin, g, oh0, oh1, col.data());
            MapMat(gw->data() + grp * g.cout_g * k, g.cout_g, k).noalias() +=
                got * ConstMapMat(col.data(), k, tp).transpose();
          }
          if (gx) {
            MapMat(gcol.data(), k, tp).noalias() = wmat.transpose() * got;
            col2im(gcol.data(), g, oh0, oh1, gxin);
          }
        }
      }
    }
  });
}

Var batch_norm(const Var& x, BatchNormState& bn, bool training) {
  const Tensor& xv = x.value();
  require_rank(xv, 4, "batch_norm");
  const std::int64_t n = xv.dim(0), c = xv.dim(1), hw = xv.dim(2) * xv.dim(3);
  if (bn.gamma.value().numel() != c) {
    throw InvalidArgument("batch_norm: expected " + std::to_string(bn.gamma.value().numel()) +
                          " channels, got " + shape_string(xv.shape()));
  }
  const std::int64_t m = n * hw;
  std::vector<double> mean(static_cast<std::size_t>(c)), inv_std(static_cast<std::size_t>(c));
  if (training) {
    for (std::int64_t ch = 0; ch < c; ++ch) {
      double s = 0.0;
      for (std::int64_t b = 0; b < n; ++b) {
        const double* p = xv.data() + (b * c + ch) * hw;
        for (std::int64_t i = 0; i < hw; ++i) s += p[i];
      }
      const double mu = s / static_cast<double>(m);
      double v = 0.0;
      for (std::int64_t b = 0; b < n; ++b) {
        const double* p = xv.data() + (b * c + ch) * hw;
        for (std::int64_t i = 0; i < hw; ++i) v += (p[i] - mu) * (p[i] - mu);
      }
      const double var = v / static_cast<double>(m);
      mean[ch] = mu;
      inv_std[ch] = 1.0 / std::sqrt(var + bn.eps);
      if (grad_enabled()) {
        // Running statistics only move in recorded (training) passes.
        const double unbiased = m > 1 ? v / static_cast<double>(m - 1) : var;
        double& rm = bn.running_mean.mutable_value()[ch];
        double& rv = bn.running_var.mutable_value()[ch];
        rm = (1.0 - bn.momentum) * rm + bn.momentum * mu;
        rv = (1.0 - bn.momentum) * rv + bn.momentum * unbiased;
      }
    }
  } else {
    for (std::int64_t ch = 0; ch < c; ++ch) {
      mean[ch] = bn.running_mean.value()[ch];
      inv_std[ch] = 1.0 / std::sqrt(bn.running_var.value()[ch] + bn.eps);
    }
  }

  Tensor out(xv.shape());
  const Tensor& gamma = bn.gamma.value();
  const Tensor& beta = bn.beta.value();
  for (std::int64_t b = 0; b < n; ++b) {
    for (std::int64_t ch = 0; ch < c; ++ch) {
      const double* p = xv.data() + (b * c + ch) * hw;
      double* o = out.data() + (b * c + ch) * hw;
      const double a = gamma[ch] * inv_std[ch];
      const double shift = beta[ch] - a * mean[ch];
      for (std::int64_t i = 0; i < hw; ++i) o[i] = a * p[i] + shift;
    }
  }

  return make_result(
      std::move(out), {x, bn.gamma, bn.beta},
      [mean = std::move(mean), inv_std = std::move(inv_std), n, c, hw, m, training](Node& self) {
        const Tensor& xv = self.input_value(0);
        const Tensor& gamma = self.input_value(1);
        Tensor* gx = self.input_grad(0);
        Tensor* gg = self.input_grad(1);
        Tensor* gbeta = self.input_grad(2);
        for (std::int64_t ch = 0; ch < c; ++ch) {
          double sum_g = 0.0, sum_gx = 0.0;
          for (std::int64_t b = 0; b < n; ++b) {
            const double* p = xv.data() + (b * c + ch) * hw;
            const double* g = self.grad.data() + (b * c + ch) * hw;
            for (std::int64_t i = 0; i < hw; ++i) {
              sum_g += g[i];
              sum_gx += g[i] * (p[i] - mean[ch]) * inv_std[ch];
            }
          }
          if (gg) (*gg)[ch] += sum_gx;
          if (gbeta) (*gbeta)[ch] += sum_g;
          if (!gx) continue;
          const double a = gamma[ch] * inv_std[ch];
          const double md = static_cast<double>(m);
          for (std::int64_t b = 0; b < n; ++b) {
            const double* p = xv.data() + (b * c + ch) * hw;
            const double* g = self.grad.data() + (b * c + ch) * hw;
            double* dst = gx->data() + (b * c + ch) * hw;
            for (std::int64_t i = 0; i < hw; ++i) {
              if (training) {
                const double xhat = (p[i] - mean[ch]) * inv_std[ch];
                dst[i] += a * (g[i] - sum_g / md - xhat * sum_gx / md);
              } else {
                dst[i] += a * g[i];
              }
            }
          }
        }
      });
}

Var layer_norm_channels(const Var& x, const Var& gamma, const Var& beta, double eps) {
  const Tensor& xv = x.value();
  require_rank(xv, 4, "layer_norm_channels");
  const std::int64_t n = xv.dim(0), c = xv.dim(1), hw = xv.dim(2) * xv.dim(3);
  if (gamma.value().numel() != c || beta.value().numel() != c) {
    throw InvalidArgument("layer_norm_channels: affine size mismatch for " +
                          shape_string(xv.shape()));
  }
  Tensor xhat(xv.shape());
  std::vector<double> inv_std(static_cast<std::size_t>(n * hw));
  Tensor out(xv.shape());
  for (std::int64_t b = 0; b < n; ++b) {
    for (std::int64_t i = 0; i < hw; ++i) {
      double s = 0.0;
      for (std::int64_t ch = 0; ch < c; ++ch) s += xv[(b * c + ch) * hw + i];
      const double mu = s / static_cast<double>(c);
      double v = 0.0;
      for (std::int64_t ch = 0; ch < c; ++ch) {
        const double d = xv[(b * c + ch) * hw + i] - mu;
        v += d * d;
      }
      const double is = 1.0 / std::sqrt(v / static_cast<double>(c) + eps);
      inv_std[b * hw + i] = is;
      for (std::int64_t ch = 0; ch < c; ++ch) {
        const std::int64_t idx = (b * c + ch) * hw + i;
        xhat[idx] = (xv[idx] - mu) * is;
        out[idx] = gamma.value()[ch] * xhat[idx] + beta.value()[ch];
      }
    }
  }
  return make_result(std::move(out), {x, gamma, beta},
                     [xhat = std::move(xhat), inv_std = std::move(inv_std), n, c, hw](Node& self) {
                       const Tensor& gamma = self.input_value(1);
                       Tensor* gx = self.input_grad(0);
                       Tensor* gg = self.input_grad(1);
                       Tensor* gbeta = self.input_grad(2);
                       const double cd = static_cast<double>(c);
                       for (std::int64_t b = 0; b < n; ++b) {
                         for (std::int64_t i = 0; i < hw; ++i) {
                           double sum_dy = 0.0, sum_dy_xhat = 0.0;
                           for (std::int64_t ch = 0; ch < c; ++ch) {
                             const std::int64_t idx = (b * c + ch) * hw + i;
                             const double g = self.grad[idx];
                             if (gg) (*gg)[ch] += g * xhat[idx];
                             if (gbeta) (*gbeta)[ch] += g;
                             const double dy = g * gamma[ch];
                             sum_dy += dy;
                             sum_dy_xhat += dy * xhat[idx];
                           }
                           if (!gx) continue;
                           const double is = inv_std[b * hw + i];
                           for (std::int64_t ch = 0; ch < c; ++ch) {
                             const std::int64_t idx = (b * c + ch) * hw + i;
                             const double dy = self.grad[idx] * gamma[ch];
                             (*gx)[idx] += is * (dy - sum_dy / cd - xhat[idx] * sum_dy_xhat / cd);
                           }
                         }
                       }
                     });
}

double sigmoid_scalar(double x) { return fast_math::sigmoid(x); }

double softplus(double x) { return fast_math::softplus(x); }

Var relu(const Var& x) {
  return unary(
      x, [](double v) { return v > 0.0 ? v : 0.0; },
      [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

Var elu(const Var& x, double alpha) {
  return unary(
      x, [alpha](double v) { return v > 0.0 ? v : alpha * std::expm1(v); },
      [alpha](double v, double y) { return v > 0.0 ? 1.0 : y + alpha; });
}

Var silu(const Var& x) {
  return unary(
      x, [](double v) { return v * sigmoid_scalar(v); },
      [](double v, double) {
        const double s = sigmoid_scalar(v);
        return s * (1.0 + v * (1.0 - s));
      });
}

Var sigmoid(const Var& x) {
  return unary(
      x, [](double v) { return sigmoid_scalar(v); }, [](double, double y) { return y * (1.0 - y); });
}

Var tanh(const Var& x) {
  return unary(
      x, [](double v) { return std::tanh(v); }, [](double, double y) { return 1.0 - y * y; });
}

Var add(const Var& a, const Var& b) {
  require_same_shape(a.value(), b.value(), "add");
  Tensor out = a.value();
  out += b.value();
  return make_result(std::move(out), {a, b}, [](Node& self) {
    for (std::size_t i = 0; i < 2; ++i) {
      if (Tensor* g = self.input_grad(i)) *g += self.grad;
    }
  });
}

Var add_n(const std::vector<Var>& xs) {
  if (xs.empty()) throw InvalidArgument("add_n: empty input list");
  Tensor out = xs.front().value();
  for (std::size_t i = 1; i < xs.size(); ++i) {
    require_same_shape(out, xs[i].value(), "add_n");
    out += xs[i].value();
  }
  return make_result(std::move(out), xs, [count = xs.size()](Node& self) {
    for (std::size_t i = 0; i < count; ++i) {
      if (Tensor* g = self.input_grad(i)) *g += self.grad;
    }
  });
}

Var mul(const Var& a, const Var& b) {
  require_same_shape(a.value(), b.value(), "mul");
  Tensor out(a.value().shape());
  for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = a.value()[i] * b.value()[i];
  return make_result(std::move(out), {a, b}, [](Node& self) {
    const Tensor& av = self.input_value(0);
    const Tensor& bv = self.input_value(1);
    if (Tensor* ga = self.input_grad(0)) {
      for (std::int64_t i = 0; i < av.numel(); ++i) (*ga)[i] += self.grad[i] * bv[i];
    }
    if (Tensor* gb = self.input_grad(1)) {
      for (std::int64_t i = 0; i < av.numel(); ++i) (*gb)[i] += self.grad[i] * av[i];
    }
  });
}

Var scale(const Var& x, double factor) {
  Tensor out = x.value();
  for (auto& v : out.values()) v *= factor;
  return make_result(std::move(out), {x}, [factor](Node& self) {
    if (Tensor* g = self.input_grad(0)) {
      for (std::int64_t i = 0; i < g->numel(); ++i) (*g)[i] += factor * self.grad[i];
    }
  });
}

Var linear(const Var& x, const Var& weight, const Var& bias) {
  require_rank(x.value(), 2, "linear");
  require_rank(weight.value(), 2, "linear weight");
  const std::int64_t n = x.dim(0), cin = x.dim(1), cout = weight.dim(0);
  if (weight.dim(1) != cin) {
    throw InvalidArgument("linear: input " + shape_string(x.shape()) + " vs weight " +
                          shape_string(weight.shape()));
  }
  const bool has_bias = bias.defined();
  Tensor out({n, cout});
  for (std::int64_t b = 0; b < n; ++b) {
    for (std::int64_t o = 0; o < cout; ++o) {
      double acc = has_bias ? bias.value()[o] : 0.0;
      for (std::int64_t i = 0; i < cin; ++i) acc += weight.value()[o * cin + i] * x.value()[b * cin + i];
      out[b * cout + o] = acc;
    }
  }
  if (g_mac_active) g_macs += static_cast<std::uint64_t>(n * cin * cout);
  std::vector<Var> inputs{x, weight};
  if (has_bias) inputs.push_back(bias);
  return make_result(std::move(out), inputs, [n, cin, cout, has_bias](Node& self) {
    const Tensor& xv = self.input_value(0);
    const Tensor& wv = self.input_value(1);
    Tensor* gx = self.input_grad(0);
    Tensor* gw = self.input_grad(1);
    Tensor* gb = has_bias ? self.input_grad(2) : nullptr;
    for (std::int64_t b = 0; b < n; ++b) {
      for (std::int64_t o = 0; o < cout; ++o) {
        const double g = self.grad[b * cout + o];
        if (gb) (*gb)[o] += g;
        for (std::int64_t i = 0; i < cin; ++i) {
          if (gw) (*gw)[o * cin + i] += g * xv[b * cin + i];
          if (gx) (*gx)[b * cin + i] += g * wv[o * cin + i];
        }
      }
    }
  });
}

Var global_avg_pool(const Var& x) {
  require_rank(x.value(), 4, "global_avg_pool");
  const std::int64_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  Tensor out({n, c});
  for (std::int64_t i = 0; i < n * c; ++i) {
    double s = 0.0;
    const double* p = x.value().data() + i * hw;
    for (std::int64_t j = 0; j < hw; ++j) s += p[j];
    out[i] = s / static_cast<double>(hw);
  }
  return make_result(std::move(out), {x}, [n, c, hw](Node& self) {
    Tensor* gx = self.input_grad(0);
    if (!gx) return;
    for (std::int64_t i = 0; i < n * c; ++i) {
      const double g = self.grad[i] / static_cast<double>(hw);
      double* p = gx->data() + i * hw;
      for (std::int64_t j = 0; j < hw; ++j) p[j] += g;
    }
  });
}

Var scale_channels(const Var& x, const Var& s) {
  require_rank(x.value(), 4, "scale_channels");
  const std::int64_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  if (s.value().numel() != n * c) {
    throw InvalidArgument("scale_channels: scale " + shape_string(s.shape()) + " for input " +
                          shape_string(x.shape()));
  }
  Tensor out(x.value().shape());
  for (std::int64_t i = 0; i < n * c; ++i) {
    const double f = s.value()[i];
    const double* p = x.value().data() + i * hw;
    double* o = out.data() + i * hw;
    for (std::int64_t j = 0; j < hw; ++j) o[j] = p[j] * f;
  }
  return make_result(std::move(out), {x, s}, [n, c, hw](Node& self) {
    const Tensor& xv = self.input_value(0);
    const Tensor& sv = self.input_value(1);
    Tensor* gx = self.input_grad(0);
    Tensor* gs = self.input_grad(1);
    for (std::int64_t i = 0; i < n * c; ++i) {
      const double* g = self.grad.data() + i * hw;
      const double* p = xv.data() + i * hw;
      double acc = 0.0;
      for (std::int64_t j = 0; j < hw; ++j) {
        acc += g[j] * p[j];
        if (gx) (*gx)[i * hw + j] += g[j] * sv[i];
      }
      if (gs) (*gs)[i] += acc;
    }
  });
}

Var concat_channels(const std::vector<Var>& xs) {
  if (xs.empty()) throw InvalidArgument("concat_channels: empty input list");
  const Tensor& first = xs.front().value();
  require_rank(first, 4, "concat_channels");
  const std::int64_t n = first.dim(0), h = first.dim(2), w = first.dim(3);
  std::vector<std::int64_t> offsets;
  std::int64_t total = 0;
  for (const auto& x : xs) {
    const Tensor& v = x.value();
    require_rank(v, 4, "concat_channels");
    if (v.dim(0) != n || v.dim(2) != h || v.dim(3) != w) {
      throw InvalidArgument("concat_channels: spatial mismatch " + shape_string(first.shape()) +
                            " vs " + shape_string(v.shape()));
    }
    offsets.push_back(total);
    total += v.dim(1);
  }
  Tensor out({n, total, h, w});
  const std::int64_t hw = h * w;
  for (std::size_t k = 0; k < xs.size(); ++k) {
    const Tensor& v = xs[k].value();
    const std::int64_t c = v.dim(1);
    for (std::int64_t b = 0; b < n; ++b) {
      std::copy_n(v.data() + b * c * hw, c * hw, out.data() + (b * total + offsets[k]) * hw);
    }
  }
  std::vector<std::int64_t> widths;
  for (const auto& x : xs) widths.push_back(x.dim(1));
  return make_result(std::move(out), xs, [offsets, widths, n, total, hw](Node& self) {
    for (std::size_t k = 0; k < widths.size(); ++k) {
      Tensor* g = self.input_grad(k);
      if (!g) continue;
      const std::int64_t c = widths[k];
      for (std::int64_t b = 0; b < n; ++b) {
        const double* src = self.grad.data() + (b * total + offsets[k]) * hw;
        double* dst = g->data() + b * c * hw;
        for (std::int64_t i = 0; i < c * hw; ++i) dst[i] += src[i];
      }
    }
  });
}

Var slice_channels(const Var& x, std::int64_t begin, std::int64_t end) {
  require_rank(x.value(), 4, "slice_channels");
  const std::int64_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  if (begin < 0 || end > c || begin >= end) {
    throw InvalidArgument("slice_channels: invalid range [" + std::to_string(begin) + ", " +
                          std::to_string(end) + ") for " + shape_string(x.shape()));
  }
  const std::int64_t width = end - begin;
  Tensor out({n, width, x.dim(2), x.dim(3)});
  for (std::int64_t b = 0; b < n; ++b) {
    std::copy_n(x.value().data() + (b * c + begin) * hw, width * hw, out.data() + b * width * hw);
  }
  return make_result(std::move(out), {x}, [n, c, hw, begin, width](Node& self) {
    Tensor* g = self.input_grad(0);
    if (!g) return;
    for (std::int64_t b = 0; b < n; ++b) {
      double* dst = g->data() + (b * c + begin) * hw;
      const double* src = self.grad.data() + b * width * hw;
      for (std::int64_t i = 0; i < width * hw; ++i) dst[i] += src[i];
    }
  });
}

Tensor bilinear_resize(const Tensor& x, std::int64_t out_h, std::int64_t out_w) {
  require_rank(x, 4, "bilinear_resize");
  const std::int64_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (out_h <= 0 || out_w <= 0) throw InvalidArgument("bilinear_resize: empty output size");
  if (h == out_h && w == out_w) return x;
  const AxisWeights ay = axis_weights(h, out_h);
  const AxisWeights ax = axis_weights(w, out_w);
  Tensor out({n, c, out_h, out_w});
  for (std::int64_t p = 0; p < n * c; ++p) {
    const double* src = x.data() + p * h * w;
    double* dst = out.data() + p * out_h * out_w;
    for (std::int64_t oy = 0; oy < out_h; ++oy) {
      const double* r0 = src + ay.i0[oy] * w;
      const double* r1 = src + ay.i1[oy] * w;
      const double ly = ay.l1[oy];
      for (std::int64_t ox = 0; ox < out_w; ++ox) {
        const double lx = ax.l1[ox];
        const double top = (1.0 - lx) * r0[ax.i0[ox]] + lx * r0[ax.i1[ox]];
        const double bot = (1.0 - lx) * r1[ax.i0[ox]] + lx * r1[ax.i1[ox]];
        dst[oy * out_w + ox] = (1.0 - ly) * top + ly * bot;
      }
    }
  }
  return out;
}

Var upsample_bilinear(const Var& x, std::int64_t out_h, std::int64_t out_w) {
  Tensor out = bilinear_resize(x.value(), out_h, out_w);
  const std::int64_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  return make_result(std::move(out), {x}, [n, c, h, w, out_h, out_w](Node& self) {
    Tensor* g = self.input_grad(0);
    if (!g) return;
    if (h == out_h && w == out_w) {
      *g += self.grad;
      return;
    }
    const AxisWeights ay = axis_weights(h, out_h);
    const AxisWeights ax = axis_weights(w, out_w);
    for (std::int64_t p = 0; p < n * c; ++p) {
      double* dst = g->data() + p * h * w;
      const double* src = self.grad.data() + p * out_h * out_w;
      for (std::int64_t oy = 0; oy < out_h; ++oy) {
        double* r0 = dst + ay.i0[oy] * w;
        double* r1 = dst + ay.i1[oy] * w;
        const double ly = ay.l1[oy];
        for (std::int64_t ox = 0; ox < out_w; ++ox) {
          const double v = src[oy * out_w + ox];
          const double lx = ax.l1[ox];
          r0[ax.i0[ox]] += (1.0 - ly) * (1.0 - lx) * v;
          r0[ax.i1[ox]] += (1.0 - ly) * lx * v;
          r1[ax.i0[ox]] += ly * (1.0 - lx) * v;
          r1[ax.i1[ox]] += ly * lx * v;
        }
      }
    }
  });
}

Var softmax(const Var& logits) {
  require_rank(logits.value(), 1, "softmax");
  const Tensor& z = logits.value();
  double mx = z[0];
  for (std::int64_t i = 1; i < z.numel(); ++i) mx = std::max(mx, z[i]);
  Tensor out(z.shape());
  double s = 0.0;
  for (std::int64_t i = 0; i < z.numel(); ++i) {
    out[i] = std::exp(z[i] - mx);
    s += out[i];
  }
  for (auto& v : out.values()) v /= s;
  return make_result(std::move(out), {logits}, [](Node& self) {
    Tensor* g = self.input_grad(0);
    if (!g) return;
    double dot = 0.0;
    for (std::int64_t i = 0; i < self.value.numel(); ++i) dot += self.grad[i] * self.value[i];
    for (std::int64_t i = 0; i < self.value.numel(); ++i) {
      (*g)[i] += self.value[i] * (self.grad[i] - dot);
    }
  });
}

Var weighted_sum(const Var& weights, const std::vector<Var>& xs) {
  require_rank(weights.value(), 1, "weighted_sum");
  if (xs.empty() || weights.value().numel() != static_cast<std::int64_t>(xs.size())) {
    throw InvalidArgument("weighted_sum: " + std::to_string(xs.size()) + " inputs for " +
                          std::to_string(weights.value().numel()) + " weights");
  }
  Tensor out(xs.front().value().shape());
  for (std::size_t k = 0; k < xs.size(); ++k) {
    require_same_shape(out, xs[k].value(), "weighted_sum");
    const double a = weights.value()[static_cast<std::int64_t>(k)];
    const Tensor& v = xs[k].value();
    for (std::int64_t i = 0; i < out.numel(); ++i) out[i] += a * v[i];
  }
  std::vector<Var> inputs{weights};
  inputs.insert(inputs.end(), xs.begin(), xs.end());
  return make_result(std::move(out), inputs, [count = xs.size()](Node& self) {
    const Tensor& wv = self.input_value(0);
    Tensor* gw = self.input_grad(0);
    for (std::size_t k = 0; k < count; ++k) {
      const Tensor& v = self.input_value(k + 1);
      if (gw) {
        double acc = 0.0;
        for (std::int64_t i = 0; i < v.numel(); ++i) acc += self.grad[i] * v[i];
        (*gw)[static_cast<std::int64_t>(k)] += acc;
      }
      if (Tensor* gx = self.input_grad(k + 1)) {
        const double a = wv[static_cast<std::int64_t>(k)];
        for (std::int64_t i = 0; i < v.numel(); ++i) (*gx)[i] += a * self.grad[i];
      }
    }
  });
}

Var gather_spatial(const Var& x, std::shared_ptr<const std::vector<std::int64_t>> order) {
  require_rank(x.value(), 4, "gather_spatial");
  const std::int64_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  const auto len = static_cast<std::int64_t>(order->size());
  for (auto idx : *order) {
    if (idx < 0 || idx >= hw) throw InvalidArgument("gather_spatial: index out of range");
  }
  Tensor out({n, c, 1, len});
  for (std::int64_t p = 0; p < n * c; ++p) {
    const double* src = x.value().data() + p * hw;
    double* dst = out.data() + p * len;
    for (std::int64_t i = 0; i < len; ++i) dst[i] = src[(*order)[i]];
  }
  return make_result(std::move(out), {x}, [order, n, c, hw, len](Node& self) {
    Tensor* g = self.input_grad(0);
    if (!g) return;
    for (std::int64_t p = 0; p < n * c; ++p) {
      double* dst = g->data() + p * hw;
      const double* src = self.grad.data() + p * len;
      for (std::int64_t i = 0; i < len; ++i) dst[(*order)[i]] += src[i];
    }
  });
}

Var scatter_spatial(const Var& seq, std::shared_ptr<const std::vector<std::int64_t>> order,
                    std::int64_t height, std::int64_t width) {
  require_rank(seq.value(), 4, "scatter_spatial");
  const std::int64_t n = seq.dim(0), c = seq.dim(1), len = seq.dim(2) * seq.dim(3);
  const std::int64_t hw = height * width;
  if (len != hw || static_cast<std::int64_t>(order->size()) != hw) {
    throw InvalidArgument("scatter_spatial: sequence length " + std::to_string(len) +
                          " does not match grid " + std::to_string(height) + "x" +
                          std::to_string(width));
  }
  Tensor out({n, c, height, width});
  for (std::int64_t p = 0; p < n * c; ++p) {
    const double* src = seq.value().data() + p * len;
    double* dst = out.data() + p * hw;
    for (std::int64_t i = 0; i < len; ++i) dst[(*order)[i]] = src[i];
  }
  return make_result(std::move(out), {seq}, [order, n, c, hw](Node& self) {
    Tensor* g = self.input_grad(0);
    if (!g) return;
    for (std::int64_t p = 0; p < n * c; ++p) {
      double* dst = g->data() + p * hw;
      const double* src = self.grad.data() + p * hw;
      for (std::int64_t i = 0; i < hw; ++i) dst[i] += src[(*order)[i]];
    }
  });
}

Var sum(const Var& x) {
  double s = 0.0;
  for (double v : x.value().values()) s += v;
  return make_result(Tensor({1}, s), {x}, [](Node& self) {
    Tensor* g = self.input_grad(0);
    if (!g) return;
    for (auto& v : g->values()) v += self.grad[0];
  });
}

Var mean(const Var& x) {
  const auto count = static_cast<double>(x.value().numel());
  return scale(sum(x), 1.0 / count);
}

Var dot_constant(const Var& x, const Tensor& weights) {
  require_same_shape(x.value(), weights, "dot_constant");
  double s = 0.0;
  for (std::int64_t i = 0; i < weights.numel(); ++i) s += x.value()[i] * weights[i];
  return make_result(Tensor({1}, s), {x}, [weights](Node& self) {
    Tensor* g = self.input_grad(0);
    if (!g) return;
    for (std::int64_t i = 0; i < weights.numel(); ++i) (*g)[i] += self.grad[0] * weights[i];
  });
}

Var bce_with_logits(const Var& logits, const Tensor& targets) {
  require_same_shape(logits.value(), targets, "bce_with_logits");
  const Tensor& z = logits.value();
  const auto count = static_cast<double>(z.numel());
  double total = 0.0;
  for (std::int64_t i = 0; i < z.numel(); ++i) {
    const double x = z[i];
    total += std::max(x, 0.0) - x * targets[i] + std::log1p(std::exp(-std::abs(x)));
  }
  return make_result(Tensor({1}, total / count), {logits}, [targets, count](Node& self) {
    Tensor* g = self.input_grad(0);
    if (!g) return;
    const Tensor& z = self.input_value(0);
    const double scale = self.grad[0] / count;
    for (std::int64_t i = 0; i < z.numel(); ++i) {
      (*g)[i] += scale * (sigmoid_scalar(z[i]) - targets[i]);
    }
  });
}

MacCounter::MacCounter() : start_(g_macs), previous_active_(g_mac_active) { g_mac_active = true; }
MacCounter::~MacCounter() { g_mac_active = previous_active_; }
std::uint64_t MacCounter::count() const { return g_macs - start_; }

void count_macs(std::uint64_t macs) {
  if (g_mac_active) g_macs += macs;
}

}  // namespace hrefnet::ops
