#include "hrefnet/dsvss.hpp"

#include <algorithm>
#include <cmath>

#include "hrefnet/errors.hpp"
#include "fast_math.hpp"

namespace hrefnet::dsvss {

namespace {

// Cumulative transverse displacement (before scaling by e) of every kernel
// point at one spatial position. `step(k)` returns the increment of point k.
template <typename StepFn>
void cumulative_offsets(int num_points, StepFn step, double* cum) {
  const int center = num_points / 2;
  cum[center] = 0.0;
  for (int j = 1; j <= center; ++j) {
    cum[center + j] = cum[center + j - 1] + step(center + j);
    cum[center - j] = cum[center - j + 1] + step(center - j);
  }
}

struct Sample {
  std::int64_t r0, r1, c0, c1;
  double fr, fc;
  bool row_inside, col_inside;  // derivative is zero where the coordinate was clamped
};

Sample locate(double row, double col, std::int64_t height, std::int64_t width) {
  Sample s{};
  const double max_r = static_cast<double>(height - 1);
  const double max_c = static_cast<double>(width - 1);
  s.row_inside = row >= 0.0 && row <= max_r;
  s.col_inside = col >= 0.0 && col <= max_c;
  const double r = std::clamp(row, 0.0, max_r);
  const double c = std::clamp(col, 0.0, max_c);
  s.r0 = static_cast<std::int64_t>(std::floor(r));
  s.c0 = static_cast<std::int64_t>(std::floor(c));
  s.r1 = std::min(s.r0 + 1, height - 1);
  s.c1 = std::min(s.c0 + 1, width - 1);
  s.fr = r - static_cast<double>(s.r0);
  s.fc = c - static_cast<double>(s.c0);
  return s;
}

void fill_order(int direction, std::int64_t h, std::int64_t w, std::vector<std::int64_t>& out) {
  out.clear();
  out.reserve(static_cast<std::size_t>(h * w));
  auto diagonal = [&](bool from_right) {
    for (std::int64_t s = 0; s <= h + w - 2; ++s) {
      for (std::int64_t r = 0; r < h; ++r) {
        const std::int64_t k = s - r;  // distance from the starting column
        if (k < 0 || k >= w) continue;
        const std::int64_t c = from_right ? w - 1 - k : k;
        out.push_back(r * w + c);
      }
    }
  };
  switch (direction) {
    case 1:
      for (std::int64_t r = 0; r < h; ++r)
        for (std::int64_t c = 0; c < w; ++c) out.push_back(r * w + c);
      break;
    case 2:
      for (std::int64_t r = 0; r < h; ++r)
        for (std::int64_t c = w - 1; c >= 0; --c) out.push_back(r * w + c);
      break;
    case 3:
      for (std::int64_t c = 0; c < w; ++c)
        for (std::int64_t r = 0; r < h; ++r) out.push_back(r * w + c);
      break;
    case 4:
      for (std::int64_t c = 0; c < w; ++c)
        for (std::int64_t r = h - 1; r >= 0; --r) out.push_back(r * w + c);
      break;
    case 5:
      diagonal(false);
      break;
    case 6:
      diagonal(true);
      break;
    case 7:
      diagonal(false);
      std::reverse(out.begin(), out.end());
      break;
    case 8:
      diagonal(true);
      std::reverse(out.begin(), out.end());
      break;
    default:
      throw InvalidArgument("scan direction must be in 1..8, got " + std::to_string(direction));
  }
}

void require_finite(const Tensor& t, const char* what) {
  if (!t.all_finite()) throw NumericError(std::string("selective_scan: non-finite ") + what);
}

// Row-major (rows, cols) -> (cols, rows).
void transpose(const double* src, std::int64_t rows, std::int64_t cols, double* dst) {
  for (std::int64_t r = 0; r < rows; ++r)
    for (std::int64_t c = 0; c < cols; ++c) dst[c * rows + r] = src[r * cols + c];
}

using fast_math::Vec8;
constexpr int kLanes = 8;

// Working set for kLanes channels of one scan, one Vec8 per step or state.
// Channels past E are padded with inert values.
struct LaneBlock {
  LaneBlock(std::int64_t len_, std::int64_t st_)
      : len(len_),
        st(st_),
        u(static_cast<std::size_t>(len_)),
        dt(u.size()),
        sig(u.size()),
        a(static_cast<std::size_t>(st_)),
        inv_a(a.size()),
        a2(a.size()),
        rows(static_cast<std::size_t>(2 * kLanes * len_)) {}

  void load(const Tensor& uv, const Tensor& delta, const Tensor& a_log, const Tensor& d, const Tensor& bias,
            std::int64_t b, std::int64_t ch0, bool with_sigmoid) {
    const std::int64_t e = uv.dim(1);
    const std::int64_t nv = std::min<std::int64_t>(kLanes, e - ch0);
    const double* urows[kLanes];
    for (std::int64_t v = 0; v < nv; ++v) {
      const std::int64_t ch = ch0 + v;
      const double bv = bias[ch];
      const double* drow = delta.data() + (b * e + ch) * len;
      double* dst = rows.data() + v * len;
      double* sdst = rows.data() + (kLanes + v) * len;
      for (std::int64_t t = 0; t < len; ++t) dst[t] = fast_math::softplus(drow[t] + bv);
      if (with_sigmoid) {
        for (std::int64_t t = 0; t < len; ++t) sdst[t] = fast_math::sigmoid(drow[t] + bv);
      }
      urows[v] = uv.data() + (b * e + ch) * len;
      dskip[v] = d[ch];
      for (std::int64_t s = 0; s < st; ++s) a[s][v] = -std::exp(a_log[ch * st + s]);
    }
    for (std::int64_t v = nv; v < kLanes; ++v) {
      dskip[v] = 0.0;
      for (std::int64_t s = 0; s < st; ++s) a[s][v] = -1.0;
    }
    for (std::int64_t s = 0; s < st; ++s) {
      inv_a[s] = 1.0 / a[s];
      a2[s] = a[s] * 1.4426950408889634;  // log2(e)
    }
    for (std::int64_t t = 0; t < len; ++t) {
      Vec8 uu{}, dd{}, ss{};
      for (std::int64_t v = 0; v < nv; ++v) {
        uu[v] = urows[v][t];
        dd[v] = rows[v * len + t];
        if (with_sigmoid) ss[v] = rows[(kLanes + v) * len + t];
      }
      u[t] = uu;
      dt[t] = dd;
      sig[t] = ss;
    }
  }

  // out[i][lane] <- t(b, ch0 + lane, 0, i)
  void gather(const Tensor& t, std::int64_t b, std::int64_t ch0, std::vector<Vec8>& out) const {
    const std::int64_t e = t.dim(1);
    const std::int64_t nv = std::min<std::int64_t>(kLanes, e - ch0);
    const double* src = t.data() + (b * e + ch0) * len;
    for (std::int64_t i = 0; i < len; ++i) {
      Vec8 x{};
      for (std::int64_t v = 0; v < nv; ++v) x[v] = src[v * len + i];
      out[i] = x;
    }
  }

  template <bool Accumulate>
  void scatter(const std::vector<Vec8>& in, Tensor& t, std::int64_t b, std::int64_t ch0) const {
    const std::int64_t e = t.dim(1);
    const std::int64_t nv = std::min<std::int64_t>(kLanes, e - ch0);
    double* dst = t.data() + (b * e + ch0) * len;
    for (std::int64_t i = 0; i < len; ++i) {
      for (std::int64_t v = 0; v < nv; ++v) {
        if constexpr (Accumulate) {
          dst[v * len + i] += in[i][v];
        } else {
          dst[v * len + i] = in[i][v];
        }
      }
    }
  }

  std::int64_t len, st;
  std::vector<Vec8> u, dt, sig, a, inv_a;
  std::vector<Vec8> a2;  // A * log2(e), so exp(dt A) = exp2(dt a2)
  std::vector<double> rows;  // per-lane staging: softplus rows then sigmoid rows
  Vec8 dskip{};
};

}  // namespace

SnakeKernelGeometry snake_coordinates(const Tensor& steps, SnakeAxis axis, double e, int num_points) {
  if (num_points < 3 || num_points % 2 == 0) {
    throw InvalidConfig("snake kernel needs an odd number of points >= 3, got " +
                        std::to_string(num_points));
  }
  if (steps.rank() != 3 || steps.dim(0) != num_points) {
    throw InvalidArgument("snake_coordinates: expected steps of shape (" +
                          std::to_string(num_points) + ", H, W), got " + shape_string(steps.shape()));
  }
  SnakeKernelGeometry g;
  g.axis = axis;
  g.num_points = num_points;
  g.curvature_factor_e = e;
  g.height = steps.dim(1);
  g.width = steps.dim(2);
  const std::int64_t hw = g.height * g.width;
  g.row.resize(static_cast<std::size_t>(num_points * hw));
  g.col.resize(static_cast<std::size_t>(num_points * hw));
  const int center = num_points / 2;
  std::vector<double> cum(static_cast<std::size_t>(num_points));
  for (std::int64_t h = 0; h < g.height; ++h) {
    for (std::int64_t w = 0; w < g.width; ++w) {
      const std::int64_t p = h * g.width + w;
      cumulative_offsets(num_points, [&](int k) { return steps[k * hw + p]; }, cum.data());
      for (int k = 0; k < num_points; ++k) {
        const double along = static_cast<double>(k - center);
        const double across = e * cum[static_cast<std::size_t>(k)];
        const auto idx = static_cast<std::size_t>(k * hw + p);
        if (axis == SnakeAxis::x_aligned) {
          g.col[idx] = static_cast<double>(w) + along;
          g.row[idx] = static_cast<double>(h) + across;
        } else {
          g.row[idx] = static_cast<double>(h) + along;
          g.col[idx] = static_cast<double>(w) + across;
        }
      }
    }
  }
  return g;
}

Var snake_sample(const Var& x, const Var& steps, SnakeAxis axis, double e) {
  const Tensor& xv = x.value();
  const Tensor& sv = steps.value();
  if (xv.rank() != 4 || sv.rank() != 4 || sv.dim(0) != xv.dim(0) || sv.dim(2) != xv.dim(2) ||
      sv.dim(3) != xv.dim(3)) {
    throw InvalidArgument("snake_sample: steps " + shape_string(sv.shape()) +
                          " do not match input " + shape_string(xv.shape()));
  }
  const std::int64_t n = xv.dim(0), c = xv.dim(1), h = xv.dim(2), w = xv.dim(3);
  const int k = static_cast<int>(sv.dim(1));
  const std::int64_t hw = h * w;

  auto geometry_of = [k, h, w, hw, axis, e](const Tensor& steps_all, std::int64_t b) {
    Tensor one({k, h, w});
    std::copy_n(steps_all.data() + b * k * hw, k * hw, one.data());
    return snake_coordinates(one, axis, e, k);
  };

  Tensor out({n, c * k, h, w});
  for (std::int64_t b = 0; b < n; ++b) {
    const SnakeKernelGeometry g = geometry_of(sv, b);
    for (int kk = 0; kk < k; ++kk) {
      for (std::int64_t p = 0; p < hw; ++p) {
        const auto idx = static_cast<std::size_t>(kk * hw + p);
        const Sample s = locate(g.row[idx], g.col[idx], h, w);
        const double w00 = (1.0 - s.fr) * (1.0 - s.fc), w01 = (1.0 - s.fr) * s.fc;
        const double w10 = s.fr * (1.0 - s.fc), w11 = s.fr * s.fc;
        for (std::int64_t ch = 0; ch < c; ++ch) {
          const double* plane = xv.data() + (b * c + ch) * hw;
          out[((b * c + ch) * k + kk) * hw + p] = w00 * plane[s.r0 * w + s.c0] + w01 * plane[s.r0 * w + s.c1] +
                                                  w10 * plane[s.r1 * w + s.c0] + w11 * plane[s.r1 * w + s.c1];
        }
      }
    }
  }
  ops::count_macs(static_cast<std::uint64_t>(n * c * k * hw * 4));

  return make_result(std::move(out), {x, steps}, [=](Node& self) {
    const Tensor& xv = self.input_value(0);
    const Tensor& sv = self.input_value(1);
    Tensor* gx = self.input_grad(0);
    Tensor* gs = self.input_grad(1);
    const int center = k / 2;
    std::vector<double> g_across(static_cast<std::size_t>(k));
    for (std::int64_t b = 0; b < n; ++b) {
      const SnakeKernelGeometry g = geometry_of(sv, b);
      for (std::int64_t p = 0; p < hw; ++p) {
        for (int kk = 0; kk < k; ++kk) {
          const auto idx = static_cast<std::size_t>(kk * hw + p);
          const Sample s = locate(g.row[idx], g.col[idx], h, w);
          const double w00 = (1.0 - s.fr) * (1.0 - s.fc), w01 = (1.0 - s.fr) * s.fc;
          const double w10 = s.fr * (1.0 - s.fc), w11 = s.fr * s.fc;
          double dacross = 0.0;
          for (std::int64_t ch = 0; ch < c; ++ch) {
            const double go = self.grad[((b * c + ch) * k + kk) * hw + p];
            if (go == 0.0) continue;
            const double* plane = xv.data() + (b * c + ch) * hw;
            const double v00 = plane[s.r0 * w + s.c0], v01 = plane[s.r0 * w + s.c1];
            const double v10 = plane[s.r1 * w + s.c0], v11 = plane[s.r1 * w + s.c1];
            if (gx) {
              double* gp = gx->data() + (b * c + ch) * hw;
              gp[s.r0 * w + s.c0] += go * w00;
              gp[s.r0 * w + s.c1] += go * w01;
              gp[s.r1 * w + s.c0] += go * w10;
              gp[s.r1 * w + s.c1] += go * w11;
            }
            if (axis == SnakeAxis::x_aligned) {
              if (s.row_inside) dacross += go * ((1.0 - s.fc) * (v10 - v00) + s.fc * (v11 - v01));
            } else {
              if (s.col_inside) dacross += go * ((1.0 - s.fr) * (v01 - v00) + s.fr * (v11 - v10));
            }
          }
          g_across[static_cast<std::size_t>(kk)] = dacross * e;
        }
        if (!gs) continue;
        // Step j moves every point at or beyond j on its side of the center.
        double acc = 0.0;
        for (int j = k - 1; j > center; --j) {
          acc += g_across[static_cast<std::size_t>(j)];
          (*gs)[(b * k + j) * hw + p] += acc;
        }
        acc = 0.0;
        for (int j = 0; j < center; ++j) {
          acc += g_across[static_cast<std::size_t>(j)];
          (*gs)[(b * k + j) * hw + p] += acc;
        }
      }
    }
  });
}

Var snake_conv_forward(const Var& x, const Var& steps_x_aligned, const Var& steps_y_aligned,
                       const Var& weight_x, const Var& weight_y, const Var& bias, double e) {
  const Var sx = snake_sample(x, steps_x_aligned, SnakeAxis::x_aligned, e);
  const Var sy = snake_sample(x, steps_y_aligned, SnakeAxis::y_aligned, e);
  return ops::add(ops::conv2d(sx, weight_x, bias), ops::conv2d(sy, weight_y, Var()));
}

ScanOrder ScanOrder::make(int direction, std::int64_t height, std::int64_t width) {
  if (height <= 0 || width <= 0) throw InvalidArgument("ScanOrder: empty grid");
  auto order = std::make_shared<std::vector<std::int64_t>>();
  fill_order(direction, height, width, *order);
  ScanOrder s;
  s.direction = direction;
  s.height = height;
  s.width = width;
  s.sequence_to_grid = std::move(order);
  return s;
}

Var serialize_scan(const Var& x, const ScanOrder& order) {
  if (x.value().rank() != 4 || x.dim(2) != order.height || x.dim(3) != order.width) {
    throw InvalidArgument("serialize_scan: input " + shape_string(x.shape()) +
                          " does not match scan grid " + std::to_string(order.height) + "x" +
                          std::to_string(order.width));
  }
  return ops::gather_spatial(x, order.sequence_to_grid);
}

Var deserialize_scan(const Var& seq, const ScanOrder& order) {
  return ops::scatter_spatial(seq, order.sequence_to_grid, order.height, order.width);
}

Var selective_scan(const Var& u, const Var& delta, const Var& a_log, const Var& b, const Var& c,
                   const Var& d, const Var& delta_bias) {
  const Tensor& uv = u.value();
  if (uv.rank() != 4 || uv.dim(2) != 1) {
    throw InvalidArgument("selective_scan: u must be (N, E, 1, L), got " + shape_string(uv.shape()));
  }
  const std::int64_t n = uv.dim(0), e = uv.dim(1), len = uv.dim(3);
  if (a_log.value().rank() != 2 || a_log.dim(0) != e) {
    throw InvalidArgument("selective_scan: a_log must be (E, S), got " + shape_string(a_log.shape()));
  }
  const std::int64_t st = a_log.dim(1);
  if (delta.shape() != uv.shape()) {
    throw InvalidArgument("selective_scan: delta " + shape_string(delta.shape()) + " vs u " +
                          shape_string(uv.shape()));
  }
  const Shape bc_shape{n, st, 1, len};
  if (b.shape() != bc_shape || c.shape() != bc_shape) {
    throw InvalidArgument("selective_scan: B/C must be " + shape_string(bc_shape));
  }
  if (d.value().numel() != e || delta_bias.value().numel() != e) {
    throw InvalidArgument("selective_scan: D and delta_bias need " + std::to_string(e) + " entries");
  }
  require_finite(a_log.value(), "A");
  require_finite(d.value(), "D");
  require_finite(delta_bias.value(), "step bias");
  require_finite(uv, "input");
  require_finite(delta.value(), "step input");

  Tensor out(uv.shape());
  {
    LaneBlock lb(len, st);
    std::vector<double> bt(static_cast<std::size_t>(len * st)), ct(bt.size());
    std::vector<Vec8> yt(static_cast<std::size_t>(len)), h(static_cast<std::size_t>(st));
    for (std::int64_t bb = 0; bb < n; ++bb) {
      transpose(b.value().data() + bb * st * len, st, len, bt.data());
      transpose(c.value().data() + bb * st * len, st, len, ct.data());
      for (std::int64_t ch0 = 0; ch0 < e; ch0 += kLanes) {
        lb.load(uv, delta.value(), a_log.value(), d.value(), delta_bias.value(), bb, ch0, false);
        std::fill(h.begin(), h.end(), Vec8{});
        for (std::int64_t t = 0; t < len; ++t) {
          const Vec8 ut = lb.u[t], dt = lb.dt[t];
          const double* bts = bt.data() + t * st;
          const double* cts = ct.data() + t * st;
          Vec8 acc = lb.dskip * ut;
          for (std::int64_t s = 0; s < st; ++s) {
            const Vec8 dec = fast_math::exp2(dt * lb.a2[s]);
            h[s] = dec * h[s] + (dec - 1.0) * lb.inv_a[s] * (bts[s] * ut);
            acc += cts[s] * h[s];
          }
          yt[t] = acc;
        }
        lb.scatter<false>(yt, out, bb, ch0);
      }
    }
  }
  ops::count_macs(static_cast<std::uint64_t>(n * e * len * st * 3));

  return make_result(std::move(out), {u, delta, a_log, b, c, d, delta_bias}, [=](Node& self) {
    const Tensor& bv = self.input_value(3);
    const Tensor& cv = self.input_value(4);
    Tensor* gu = self.input_grad(0);
    Tensor* gdelta = self.input_grad(1);
    Tensor* galog = self.input_grad(2);
    Tensor* gb = self.input_grad(3);
    Tensor* gc = self.input_grad(4);
    Tensor* gd = self.input_grad(5);
    Tensor* gbias = self.input_grad(6);

    LaneBlock lb(len, st);
    const auto ls = static_cast<std::size_t>(len * st);
    std::vector<double> bt(ls), ct(ls), gbt(ls), gct(ls);
    std::vector<Vec8> hist(ls), decay(ls);
    std::vector<Vec8> gy(static_cast<std::size_t>(len)), gut(gy.size()), graw(gy.size());
    std::vector<Vec8> h(static_cast<std::size_t>(st)), gh(h.size()), ga(h.size());
    for (std::int64_t bb = 0; bb < n; ++bb) {
      transpose(bv.data() + bb * st * len, st, len, bt.data());
      transpose(cv.data() + bb * st * len, st, len, ct.data());
      std::fill(gbt.begin(), gbt.end(), 0.0);
      std::fill(gct.begin(), gct.end(), 0.0);
      for (std::int64_t ch0 = 0; ch0 < e; ch0 += kLanes) {
        lb.load(self.input_value(0), self.input_value(1), self.input_value(2), self.input_value(5),
                self.input_value(6), bb, ch0, true);
        lb.gather(self.grad, bb, ch0, gy);

        // Replay the forward recurrence to recover every state.
        std::fill(h.begin(), h.end(), Vec8{});
        for (std::int64_t t = 0; t < len; ++t) {
          const Vec8 ut = lb.u[t], dt = lb.dt[t];
          const double* bts = bt.data() + t * st;
          for (std::int64_t s = 0; s < st; ++s) {
            const Vec8 dec = fast_math::exp2(dt * lb.a2[s]);
            h[s] = dec * h[s] + (dec - 1.0) * lb.inv_a[s] * (bts[s] * ut);
            decay[t * st + s] = dec;
            hist[t * st + s] = h[s];
          }
        }

        std::fill(gh.begin(), gh.end(), Vec8{});
        std::fill(ga.begin(), ga.end(), Vec8{});
        Vec8 gdskip{}, gbias_acc{};
        for (std::int64_t t = len - 1; t >= 0; --t) {
          const Vec8 ut = lb.u[t], dt = lb.dt[t], gyt = gy[t];
          const double* bts = bt.data() + t * st;
          const double* cts = ct.data() + t * st;
          Vec8 gu_t = gyt * lb.dskip, gdt{};
          gdskip += gyt * ut;
          for (std::int64_t s = 0; s < st; ++s) {
            const Vec8 hp = t > 0 ? hist[(t - 1) * st + s] : Vec8{};
            const Vec8 dec = decay[t * st + s];
            const Vec8 as = lb.a[s], ias = lb.inv_a[s];
            gct[t * st + s] += fast_math::hsum(gyt * hist[t * st + s]);
            const Vec8 g = gh[s] + gyt * cts[s];
            const Vec8 bbar = (dec - 1.0) * ias;
            const Vec8 bu = bts[s] * ut;
            gu_t += g * bbar * bts[s];
            gbt[t * st + s] += fast_math::hsum(g * bbar * ut);
            gdt += g * dec * (hp * as + bu);
            ga[s] += g * (hp * dt * dec + bu * (dt * dec * as - (dec - 1.0)) * ias * ias);
            gh[s] = g * dec;
          }
          gut[t] = gu_t;
          graw[t] = gdt * lb.sig[t];
          gbias_acc += graw[t];
        }
        if (gu) lb.scatter<true>(gut, *gu, bb, ch0);
        if (gdelta) lb.scatter<true>(graw, *gdelta, bb, ch0);
        for (std::int64_t v = 0; v < std::min<std::int64_t>(kLanes, e - ch0); ++v) {
          if (gd) (*gd)[ch0 + v] += gdskip[v];
          if (gbias) (*gbias)[ch0 + v] += gbias_acc[v];
          if (galog) {
            for (std::int64_t s = 0; s < st; ++s) (*galog)[(ch0 + v) * st + s] += ga[s][v] * lb.a[s][v];
          }
        }
      }
      if (gb) {
        for (std::int64_t s = 0; s < st; ++s)
          for (std::int64_t t = 0; t < len; ++t) (*gb)[(bb * st + s) * len + t] += gbt[t * st + s];
      }
      if (gc) {
        for (std::int64_t s = 0; s < st; ++s)
          for (std::int64_t t = 0; t < len; ++t) (*gc)[(bb * st + s) * len + t] += gct[t * st + s];
      }
    }
  });
}

Var direction_softmax(const Var& logits) {
  if (logits.value().rank() != 1 || logits.value().numel() != kNumDirections) {
    throw InvalidArgument("direction_softmax: expected 8 logits, got " + shape_string(logits.shape()));
  }
  return ops::softmax(logits);
}

Var aggregate_directions(const std::vector<Var>& features, const Var& attention) {
  if (features.size() != static_cast<std::size_t>(kNumDirections)) {
    throw InvalidArgument("aggregate_directions: expected 8 directional features, got " +
                          std::to_string(features.size()));
  }
  return ops::weighted_sum(attention, features);
}

SnakeSelectiveScan2d::SnakeSelectiveScan2d(ParameterSet& ps, const std::string& name, int channels_,
                                           int state_dim_, int dt_rank_)
    : channels(channels_), state_dim(state_dim_), dt_rank(dt_rank_) {
  for (int k = 0; k < kNumDirections; ++k) {
    const std::string p = name + ".dir" + std::to_string(k + 1);
    DirectionalSsm& dir = directions[static_cast<std::size_t>(k)];
    dir.x_proj = ps.add_parameter(p + ".x_proj", {dt_rank + 2 * state_dim, channels, 1, 1},
                                  InitKind::kaiming_normal, channels);
    dir.dt_proj = ps.add_parameter(p + ".dt_proj", {channels, dt_rank, 1, 1}, InitKind::ssm_dt_proj, dt_rank);
    dir.dt_bias = ps.add_parameter(p + ".dt_bias", {channels}, InitKind::ssm_dt_bias);
    dir.a_log = ps.add_parameter(p + ".a_log", {channels, state_dim}, InitKind::ssm_a_log);
    dir.d = ps.add_parameter(p + ".d", {channels}, InitKind::ones);
  }
  direction_logits = ps.add_parameter(name + ".direction_logits", {kNumDirections}, InitKind::zeros);
}

Var SnakeSelectiveScan2d::operator()(const Var& x) const {
  const std::int64_t h = x.dim(2), w = x.dim(3);
  std::vector<Var> outs;
  outs.reserve(kNumDirections);
  for (int k = 0; k < kNumDirections; ++k) {
    const DirectionalSsm& dir = directions[static_cast<std::size_t>(k)];
    const ScanOrder order = ScanOrder::make(k + 1, h, w);
    const Var seq = serialize_scan(x, order);
    const Var proj = ops::conv2d(seq, dir.x_proj, Var());
    const Var dt_low = ops::slice_channels(proj, 0, dt_rank);
    const Var b = ops::slice_channels(proj, dt_rank, dt_rank + state_dim);
    const Var c = ops::slice_channels(proj, dt_rank + state_dim, dt_rank + 2 * state_dim);
    const Var delta = ops::conv2d(dt_low, dir.dt_proj, Var());
    const Var y = selective_scan(seq, delta, dir.a_log, b, c, dir.d, dir.dt_bias);
    outs.push_back(deserialize_scan(y, order));
  }
  return aggregate_directions(outs, direction_softmax(direction_logits));
}

SnakeConv::SnakeConv(ParameterSet& ps, const std::string& name, int channels, int num_points_, double e_)
    : offset_conv(ps, name + ".offset", channels, 2 * num_points_, 3, {.padding = 1}),
      num_points(num_points_),
      e(e_) {
  const std::int64_t fan_in = static_cast<std::int64_t>(channels) * num_points;
  weight_x = ps.add_parameter(name + ".weight_x", {channels, channels * num_points, 1, 1},
                              InitKind::kaiming_normal, fan_in);
  weight_y = ps.add_parameter(name + ".weight_y", {channels, channels * num_points, 1, 1},
                              InitKind::kaiming_normal, fan_in);
  bias = ps.add_parameter(name + ".bias", {channels}, InitKind::zeros);
}

Var SnakeConv::steps(const Var& x) const { return ops::tanh(offset_conv(x)); }

Var SnakeConv::operator()(const Var& x) const {
  const Var s = steps(x);
  const Var sx = ops::slice_channels(s, 0, num_points);
  const Var sy = ops::slice_channels(s, num_points, 2 * num_points);
  return snake_conv_forward(x, sx, sy, weight_x, weight_y, bias, e);
}

DsvssBlock::DsvssBlock(ParameterSet& ps, const std::string& name, int channels_, const ModelConfig& cfg)
    : channels(channels_),
      expanded(cfg.expanded_width(channels_)),
      snake(ps, name + ".snake", channels_, cfg.snake_kernel_points, cfg.curvature_factor_e),
      norm(ps, name + ".norm", channels_),
      gate_proj(ps, name + ".gate_proj", channels_, expanded, 1),
      in_proj(ps, name + ".in_proj", channels_, expanded, 1),
      dw_conv(ps, name + ".dw_conv", expanded, expanded, 3, {.padding = 1, .groups = expanded}),
      ss2d(ps, name + ".ss2d", expanded, cfg.ssm_state_dim, cfg.dt_rank(channels_)),
      out_proj(ps, name + ".out_proj", expanded, channels_, 1),
      final_conv(ps, name + ".final", channels_, channels_, 1) {}

Var DsvssBlock::ssm_branch(const Var& x) const {
  const Var z = norm(x);
  const Var gate = ops::silu(gate_proj(z));
  const Var v = ops::silu(dw_conv(in_proj(z)));
  return out_proj(ops::mul(ss2d(v), gate));
}

Var DsvssBlock::operator()(const Var& x, bool training) const {
  if (x.value().rank() != 4 || x.dim(1) != channels) {
    throw InvalidArgument("DSVSS block expects " + std::to_string(channels) + " channels, got " +
                          shape_string(x.shape()));
  }
  return final_conv(ops::add_n({snake(x), x, ssm_branch(x)}), training);
}

}  // namespace hrefnet::dsvss
