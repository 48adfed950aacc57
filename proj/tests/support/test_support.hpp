#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "hrefnet/autograd.hpp"
#include "hrefnet/image.hpp"
#include "hrefnet/ops.hpp"
#include "hrefnet/parameters.hpp"

namespace hrefnet::testing {

inline Tensor random_tensor(const Shape& shape, std::mt19937_64& rng, double scale = 1.0) {
  std::normal_distribution<double> n(0.0, scale);
  Tensor t(shape);
  for (auto& v : t.values()) v = n(rng);
  return t;
}

inline Tensor uniform_tensor(const Shape& shape, std::mt19937_64& rng, double lo, double hi) {
  std::uniform_real_distribution<double> u(lo, hi);
  Tensor t(shape);
  for (auto& v : t.values()) v = u(rng);
  return t;
}

inline void fill_params(ParameterSet& ps, std::mt19937_64& rng, double scale) {
  for (const auto& p : ps.parameters()) {
    Tensor& t = Var(p.var).mutable_value();
    t = random_tensor(t.shape(), rng, scale);
  }
}

inline void zero_params(ParameterSet& ps) {
  for (const auto& p : ps.parameters()) Var(p.var).mutable_value().fill(0.0);
}

// Direct-loop convolution oracle.
inline Tensor naive_conv2d(const Tensor& x, const Tensor& w, const Tensor* b, int stride, int pad, int dil,
                           int groups) {
  const auto n = x.dim(0), cin = x.dim(1), h = x.dim(2), wd = x.dim(3);
  const auto cout = w.dim(0), cig = w.dim(1), kh = w.dim(2), kw = w.dim(3);
  const auto ho = (h + 2 * pad - dil * (kh - 1) - 1) / stride + 1;
  const auto wo = (wd + 2 * pad - dil * (kw - 1) - 1) / stride + 1;
  const auto cog = cout / groups;
  (void)cin;
  Tensor y({n, cout, ho, wo});
  for (std::int64_t b0 = 0; b0 < n; ++b0)
    for (std::int64_t o = 0; o < cout; ++o)
      for (std::int64_t i = 0; i < ho; ++i)
        for (std::int64_t j = 0; j < wo; ++j) {
          double acc = b ? (*b)[o] : 0.0;
          const std::int64_t g = o / cog;
          for (std::int64_t c = 0; c < cig; ++c)
            for (std::int64_t u = 0; u < kh; ++u)
              for (std::int64_t v = 0; v < kw; ++v) {
                const std::int64_t r = i * stride - pad + u * dil, q = j * stride - pad + v * dil;
                if (r < 0 || q < 0 || r >= h || q >= wd) continue;
                acc += w.at(o, c, u, v) * x.at(b0, g * cig + c, r, q);
              }
          y.at(b0, o, i, j) = acc;
        }
  return y;
}

// Half-pixel bilinear resize oracle (align_corners = false) for one plane.
inline double bilinear_weight_sample(const Tensor& x, std::int64_t n, std::int64_t c, double sr, double sc) {
  const auto h = x.dim(2), w = x.dim(3);
  sr = std::max(sr, 0.0);
  sc = std::max(sc, 0.0);
  const auto r0 = std::min<std::int64_t>(static_cast<std::int64_t>(sr), h - 1);
  const auto c0 = std::min<std::int64_t>(static_cast<std::int64_t>(sc), w - 1);
  const auto r1 = std::min<std::int64_t>(r0 + 1, h - 1), c1 = std::min<std::int64_t>(c0 + 1, w - 1);
  const double fr = sr - static_cast<double>(r0), fc = sc - static_cast<double>(c0);
  return (1 - fr) * (1 - fc) * x.at(n, c, r0, c0) + (1 - fr) * fc * x.at(n, c, r0, c1) +
         fr * (1 - fc) * x.at(n, c, r1, c0) + fr * fc * x.at(n, c, r1, c1);
}

inline Tensor naive_resize(const Tensor& x, std::int64_t oh, std::int64_t ow) {
  Tensor y({x.dim(0), x.dim(1), oh, ow});
  const double sh = static_cast<double>(x.dim(2)) / static_cast<double>(oh);
  const double sw = static_cast<double>(x.dim(3)) / static_cast<double>(ow);
  for (std::int64_t n = 0; n < x.dim(0); ++n)
    for (std::int64_t c = 0; c < x.dim(1); ++c)
      for (std::int64_t i = 0; i < oh; ++i)
        for (std::int64_t j = 0; j < ow; ++j)
          y.at(n, c, i, j) = bilinear_weight_sample(x, n, c, (static_cast<double>(i) + 0.5) * sh - 0.5,
                                                    (static_cast<double>(j) + 0.5) * sw - 0.5);
  return y;
}

// Training-mode batch norm with gamma = 1, beta = 0 and biased variance.
inline Tensor naive_bn_identity(const Tensor& x, double eps = 1e-5) {
  Tensor y(x.shape());
  const auto n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  for (std::int64_t ch = 0; ch < c; ++ch) {
    double mean = 0, var = 0;
    for (std::int64_t b = 0; b < n; ++b)
      for (std::int64_t p = 0; p < hw; ++p) mean += x[(b * c + ch) * hw + p];
    mean /= static_cast<double>(n * hw);
    for (std::int64_t b = 0; b < n; ++b)
      for (std::int64_t p = 0; p < hw; ++p) var += std::pow(x[(b * c + ch) * hw + p] - mean, 2);
    var /= static_cast<double>(n * hw);
    for (std::int64_t b = 0; b < n; ++b)
      for (std::int64_t p = 0; p < hw; ++p)
        y[(b * c + ch) * hw + p] = (x[(b * c + ch) * hw + p] - mean) / std::sqrt(var + eps);
  }
  return y;
}

inline Tensor map_tensor(const Tensor& x, const std::function<double(double)>& f) {
  Tensor y(x.shape());
  for (std::int64_t i = 0; i < x.numel(); ++i) y[i] = f(x[i]);
  return y;
}

inline Tensor add_tensors(const Tensor& a, const Tensor& b) {
  Tensor y = a;
  y += b;
  return y;
}

inline double relu_d(double v) { return v > 0 ? v : 0.0; }
inline double sigmoid_d(double v) { return 1.0 / (1.0 + std::exp(-v)); }
inline double silu_d(double v) { return v * sigmoid_d(v); }
inline double elu_d(double v) { return v > 0 ? v : std::expm1(v); }
inline double softplus_d(double v) { return std::log1p(std::exp(v)); }

// Straight-line selective scan: u, dt (post-softplus), b, c are (L) per state
// row-major as [t][s]; a has S entries (negative).
inline std::vector<double> naive_scan(const std::vector<double>& u, const std::vector<double>& dt,
                                      const std::vector<double>& a, const std::vector<double>& b,
                                      const std::vector<double>& c, double d) {
  const std::size_t len = u.size(), st = a.size();
  std::vector<double> h(st, 0.0), y(len);
  for (std::size_t t = 0; t < len; ++t) {
    double acc = 0.0;
    for (std::size_t s = 0; s < st; ++s) {
      const double abar = std::exp(dt[t] * a[s]);
      const double bbar = (abar - 1.0) / a[s] * b[t * st + s];
      h[s] = abar * h[s] + bbar * u[t];
      acc += c[t * st + s] * h[s];
    }
    y[t] = acc + d * u[t];
  }
  return y;
}

// Zero-offset reference: K taps along one axis, indices clamped to the border.
inline Tensor straight_snake_conv(const Tensor& x, const Tensor& wx, const Tensor& wy, const Tensor& bias, int k) {
  const auto n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const auto cout = wx.dim(0);
  const int center = k / 2;
  Tensor y({n, cout, h, w});
  for (std::int64_t b = 0; b < n; ++b)
    for (std::int64_t o = 0; o < cout; ++o)
      for (std::int64_t r = 0; r < h; ++r)
        for (std::int64_t q = 0; q < w; ++q) {
          double acc = bias[o];
          for (std::int64_t ch = 0; ch < c; ++ch)
            for (int t = 0; t < k; ++t) {
              const auto qq = std::clamp<std::int64_t>(q + t - center, 0, w - 1);
              const auto rr = std::clamp<std::int64_t>(r + t - center, 0, h - 1);
              acc += wx.at(o, ch * k + t, 0, 0) * x.at(b, ch, r, qq);
              acc += wy.at(o, ch * k + t, 0, 0) * x.at(b, ch, rr, q);
            }
          y.at(b, o, r, q) = acc;
        }
  return y;
}

struct GradCheckStats {
  int checked = 0;
  int passed = 0;
  double worst = 0.0;
  std::string worst_name;
  double pass_fraction() const { return checked ? static_cast<double>(passed) / checked : 1.0; }
};

// Central differences on `samples` random coordinates of each tensor. Relative
// error is |a - n| / max(|a|, |n|, floor).
inline GradCheckStats grad_check(const std::function<Var()>& loss_fn,
                                 const std::vector<std::pair<std::string, Var>>& params, int samples,
                                 std::mt19937_64& rng, double step = 1e-3, double tol = 1e-4,
                                 double floor = 1e-6) {
  for (const auto& [name, p] : params) Var(p).zero_grad();
  Var loss = loss_fn();
  loss.backward();
  std::vector<Tensor> grads;
  for (const auto& [name, p] : params) grads.push_back(p.grad().numel() ? p.grad() : Tensor(p.value().shape()));

  GradCheckStats st;
  for (std::size_t i = 0; i < params.size(); ++i) {
    Var p = params[i].second;
    Tensor& v = p.mutable_value();
    std::uniform_int_distribution<std::int64_t> pick(0, v.numel() - 1);
    const int k = static_cast<int>(std::min<std::int64_t>(samples, v.numel()));
    for (int s = 0; s < k; ++s) {
      const std::int64_t j = k == v.numel() ? s : pick(rng);
      const double orig = v[j];
      v[j] = orig + step;
      double fp, fm;
      {
        NoGradGuard g;
        fp = loss_fn().value()[0];
      }
      v[j] = orig - step;
      {
        NoGradGuard g;
        fm = loss_fn().value()[0];
      }
      v[j] = orig;
      const double numeric = (fp - fm) / (2 * step);
      const double analytic = grads[i][j];
      const double rel = std::abs(numeric - analytic) / std::max({std::abs(numeric), std::abs(analytic), floor});
      ++st.checked;
      if (rel < tol) ++st.passed;
      if (rel > st.worst) {
        st.worst = rel;
        st.worst_name = params[i].first + "[" + std::to_string(j) + "]";
      }
    }
  }
  return st;
}

// Parameter or buffer by name; fails the calling test when absent.
inline Var named(const ParameterSet& ps, const std::string& name) {
  const NamedTensor* t = ps.find(name);
  if (!t) throw std::runtime_error("no tensor named " + name);
  return t->var;
}

inline BinaryMask random_mask(std::int64_t h, std::int64_t w, double p, std::mt19937_64& rng) {
  std::bernoulli_distribution b(p);
  BinaryMask m(h, w);
  for (auto& v : m.bits) v = b(rng) ? 1 : 0;
  return m;
}

}  // namespace hrefnet::testing
