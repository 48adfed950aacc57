#include "hrefnet/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <limits>
#include <numeric>

#include "hrefnet/errors.hpp"

namespace hrefnet::metrics {

namespace {

void require_same(const BinaryMask& a, const BinaryMask& b, const char* op) {
  if (!a.same_shape(b)) {
    throw InvalidArgument(std::string(op) + ": shape " + std::to_string(a.height) + "x" + std::to_string(a.width) +
                          " vs " + std::to_string(b.height) + "x" + std::to_string(b.width));
  }
}

std::int64_t overlap(const BinaryMask& a, const BinaryMask& b) {
  std::int64_t n = 0;
  for (std::size_t i = 0; i < a.bits.size(); ++i) n += (a.bits[i] && b.bits[i]) ? 1 : 0;
  return n;
}

// Neighbours P2..P9, clockwise from north.
std::array<int, 8> neighbours(const BinaryMask& m, std::int64_t r, std::int64_t c) {
  return {m.contains(r - 1, c),     m.contains(r - 1, c + 1), m.contains(r, c + 1), m.contains(r + 1, c + 1),
          m.contains(r + 1, c),     m.contains(r + 1, c - 1), m.contains(r, c - 1), m.contains(r - 1, c - 1)};
}

// Yokoi connectivity number for 8-connected foreground; 1 marks a simple point.
int crossing_number8(const std::array<int, 8>& p) {
  int n = 0;
  for (int k = 0; k < 8; k += 2) {
    const int a = 1 - p[k];
    const int b = 1 - p[(k + 1) % 8];
    const int c = 1 - p[(k + 2) % 8];
    n += a - a * b * c;
  }
  return n;
}

// Squared distance transform to the set bits of `m` (Felzenszwalb-Huttenlocher).
// Pixels with no set bit in reach keep a huge sentinel.
std::vector<double> squared_edt(const BinaryMask& m) {
  constexpr double far = 1e20;
  const std::int64_t h = m.height, w = m.width;
  const std::int64_t n = std::max(h, w);
  std::vector<double> f(static_cast<std::size_t>(n)), d(static_cast<std::size_t>(n)), z(static_cast<std::size_t>(n + 1));
  std::vector<std::int64_t> v(static_cast<std::size_t>(n));
  auto pass = [&](std::int64_t len) {
    std::int64_t k = 0;
    v[0] = 0;
    z[0] = -std::numeric_limits<double>::infinity();
    z[1] = std::numeric_limits<double>::infinity();
    for (std::int64_t q = 1; q < len; ++q) {
      double s = 0.0;
      for (;;) {
        const std::int64_t p = v[k];
        s = ((f[q] + static_cast<double>(q * q)) - (f[p] + static_cast<double>(p * p))) / static_cast<double>(2 * (q - p));
        if (s > z[k]) break;
        --k;
      }
      ++k;
      v[k] = q;
      z[k] = s;
      z[k + 1] = std::numeric_limits<double>::infinity();
    }
    k = 0;
    for (std::int64_t q = 0; q < len; ++q) {
      while (z[k + 1] < static_cast<double>(q)) ++k;
      const double dq = static_cast<double>(q - v[k]);
      d[q] = dq * dq + f[v[k]];
    }
  };
  std::vector<double> out(static_cast<std::size_t>(h * w));
  for (std::int64_t c = 0; c < w; ++c) {
    for (std::int64_t r = 0; r < h; ++r) f[r] = m(r, c) ? 0.0 : far;
    pass(h);
    for (std::int64_t r = 0; r < h; ++r) out[r * w + c] = d[r];
  }
  for (std::int64_t r = 0; r < h; ++r) {
    for (std::int64_t c = 0; c < w; ++c) f[c] = out[r * w + c];
    pass(w);
    for (std::int64_t c = 0; c < w; ++c) out[r * w + c] = d[c];
  }
  return out;
}

std::vector<double> directed_distances(const BinaryMask& from, const std::vector<double>& to_sq) {
  std::vector<double> d;
  for (std::size_t i = 0; i < from.bits.size(); ++i) {
    if (from.bits[i]) d.push_back(std::sqrt(to_sq[i]));
  }
  return d;
}

BinaryMask restrict_to(const BinaryMask& m, const BinaryMask* fov) {
  if (!fov) return m;
  BinaryMask out = m;
  for (std::size_t i = 0; i < out.bits.size(); ++i) out.bits[i] = out.bits[i] && fov->bits[i];
  return out;
}

}  // namespace

double dice(const BinaryMask& pred, const BinaryMask& gt) {
  require_same(pred, gt, "dice");
  const std::int64_t a = pred.count(), b = gt.count();
  if (a + b == 0) return 100.0;
  return 200.0 * static_cast<double>(overlap(pred, gt)) / static_cast<double>(a + b);
}

BinaryMask skeletonize(const BinaryMask& mask) {
  BinaryMask m = mask;
  std::vector<std::int64_t> candidates;
  for (bool changed = true; changed;) {
    changed = false;
    for (int sub = 0; sub < 2; ++sub) {
      candidates.clear();
      for (std::int64_t r = 0; r < m.height; ++r) {
        for (std::int64_t c = 0; c < m.width; ++c) {
          if (!m(r, c)) continue;
          const auto p = neighbours(m, r, c);
          const int b = std::accumulate(p.begin(), p.end(), 0);
          if (b < 2 || b > 6) continue;
          int a = 0;
          for (int k = 0; k < 8; ++k) a += (!p[k] && p[(k + 1) % 8]) ? 1 : 0;
          if (a != 1) continue;
          // p[0]=N, p[2]=E, p[4]=S, p[6]=W
          const bool ok = sub == 0 ? (!(p[0] && p[2] && p[4]) && !(p[2] && p[4] && p[6]))
                                   : (!(p[0] && p[2] && p[6]) && !(p[0] && p[4] && p[6]));
          if (ok) candidates.push_back(r * m.width + c);
        }
      }
      for (const std::int64_t idx : candidates) {
        const std::int64_t r = idx / m.width, c = idx % m.width;
        const auto p = neighbours(m, r, c);
        if (std::accumulate(p.begin(), p.end(), 0) < 2 || crossing_number8(p) != 1) continue;
        m.bits[static_cast<std::size_t>(idx)] = 0;
        changed = true;
      }
    }
  }
  return m;
}

double cldice(const BinaryMask& pred, const BinaryMask& gt) {
  require_same(pred, gt, "cldice");
  const BinaryMask sp = skeletonize(pred);
  const BinaryMask sl = skeletonize(gt);
  const std::int64_t np = sp.count(), nl = sl.count();
  if (np == 0 && nl == 0) return 100.0;
  if (np == 0 || nl == 0) return 0.0;
  const double tprec = static_cast<double>(overlap(sp, gt)) / static_cast<double>(np);
  const double tsens = static_cast<double>(overlap(sl, pred)) / static_cast<double>(nl);
  if (tprec + tsens == 0.0) return 0.0;
  return 200.0 * tprec * tsens / (tprec + tsens);
}

ConfusionCounts confusion(const BinaryMask& pred, const BinaryMask& gt, const BinaryMask* fov) {
  require_same(pred, gt, "confusion");
  if (fov) require_same(pred, *fov, "confusion (fov)");
  ConfusionCounts k;
  for (std::size_t i = 0; i < pred.bits.size(); ++i) {
    if (fov && !fov->bits[i]) continue;
    const bool p = pred.bits[i], g = gt.bits[i];
    if (p && g) {
      ++k.tp;
    } else if (p) {
      ++k.fp;
    } else if (g) {
      ++k.fn;
    } else {
      ++k.tn;
    }
  }
  return k;
}

double accuracy(const ConfusionCounts& k) {
  if (k.tp < 0 || k.tn < 0 || k.fp < 0 || k.fn < 0) throw InvalidArgument("accuracy: negative count");
  if (k.total() == 0) throw InvalidArgument("accuracy: no pixels counted");
  return 100.0 * static_cast<double>(k.tp + k.tn) / static_cast<double>(k.total());
}

double auc_roc(const Grid& probs, const BinaryMask& gt, const BinaryMask* fov) {
  if (probs.height != gt.height || probs.width != gt.width) throw InvalidArgument("auc_roc: shape mismatch");
  if (fov) require_same(gt, *fov, "auc_roc (fov)");
  std::vector<std::pair<double, bool>> s;
  s.reserve(probs.values.size());
  for (std::size_t i = 0; i < probs.values.size(); ++i) {
    if (fov && !fov->bits[i]) continue;
    s.emplace_back(probs.values[i], gt.bits[i] != 0);
  }
  std::sort(s.begin(), s.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
  // Sum over ties of (negatives strictly below + half the tied negatives) per positive.
  double won = 0.0;
  std::int64_t neg_below = 0, pos = 0, neg = 0;
  for (std::size_t i = 0; i < s.size();) {
    std::size_t j = i;
    std::int64_t tp = 0, tn = 0;
    for (; j < s.size() && s[j].first == s[i].first; ++j) (s[j].second ? tp : tn) += 1;
    won += static_cast<double>(tp) * (static_cast<double>(neg_below) + 0.5 * static_cast<double>(tn));
    neg_below += tn;
    pos += tp;
    neg += tn;
    i = j;
  }
  if (pos == 0 || neg == 0) throw UndefinedMetric("auc_roc: ground truth has a single class");
  return 100.0 * won / (static_cast<double>(pos) * static_cast<double>(neg));
}

BinaryMask boundary(const BinaryMask& m) {
  BinaryMask b(m.height, m.width);
  for (std::int64_t r = 0; r < m.height; ++r) {
    for (std::int64_t c = 0; c < m.width; ++c) {
      if (!m(r, c)) continue;
      if (!m.contains(r - 1, c) || !m.contains(r + 1, c) || !m.contains(r, c - 1) || !m.contains(r, c + 1)) {
        b(r, c) = 1;
      }
    }
  }
  return b;
}

double percentile(std::vector<double> values, double q) {
  if (values.empty()) throw InvalidArgument("percentile of an empty set");
  std::sort(values.begin(), values.end());
  const double rank = q * static_cast<double>(values.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(rank));
  const std::size_t hi = std::min(lo + 1, values.size() - 1);
  const double frac = rank - static_cast<double>(lo);
  return values[lo] + frac * (values[hi] - values[lo]);
}

double hd95(const BinaryMask& pred, const BinaryMask& gt) {
  require_same(pred, gt, "hd95");
  if (pred.count() == 0 || gt.count() == 0) throw UndefinedMetric("hd95: empty mask");
  const BinaryMask bp = boundary(pred), bg = boundary(gt);
  const double a = percentile(directed_distances(bp, squared_edt(bg)), 0.95);
  const double b = percentile(directed_distances(bg, squared_edt(bp)), 0.95);
  return std::max(a, b);
}

ImageMetrics evaluate_image(const std::string& id, const Grid& probs, const BinaryMask& gt, const BinaryMask* fov,
                            double threshold) {
  ImageMetrics out;
  out.id = id;
  const BinaryMask pred = restrict_to(BinaryMask::threshold(probs, threshold), fov);
  const BinaryMask truth = restrict_to(gt, fov);
  out.values[0] = dice(pred, truth);
  out.values[1] = cldice(pred, truth);
  out.values[2] = accuracy(confusion(pred, truth, fov));
  try {
    out.values[3] = auc_roc(probs, truth, fov);
  } catch (const UndefinedMetric& e) {
    out.warnings.emplace_back(e.what());
  }
  try {
    out.values[4] = hd95(pred, truth);
  } catch (const UndefinedMetric& e) {
    out.warnings.emplace_back(e.what());
  }
  return out;
}

MetricsReport aggregate_report(std::vector<ImageMetrics> per_image) {
  if (per_image.empty()) throw InvalidArgument("aggregate_report: no images");
  MetricsReport rep;
  for (std::size_t m = 0; m < kMetricNames.size(); ++m) {
    std::vector<double> v;
    for (const auto& im : per_image) {
      if (im.values[m]) v.push_back(*im.values[m]);
    }
    Summary& s = rep.summary[m];
    s.count = static_cast<int>(v.size());
    s.undefined = static_cast<int>(per_image.size() - v.size());
    if (v.empty()) {
      s.mean = s.std = std::numeric_limits<double>::quiet_NaN();
      continue;
    }
    s.mean = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
    if (v.size() > 1) {
      double ss = 0.0;
      for (double x : v) ss += (x - s.mean) * (x - s.mean);
      s.std = std::sqrt(ss / static_cast<double>(v.size() - 1));
    }
  }
  rep.per_image = std::move(per_image);
  return rep;
}

void write_report(std::ostream& out, const MetricsReport& report, char delimiter) {
  const auto flags = out.flags();
  const auto prec = out.precision();
  out << "id";
  for (const char* name : kMetricNames) out << delimiter << name;
  out << '\n' << std::fixed << std::setprecision(4);
  for (const auto& im : report.per_image) {
    out << im.id;
    for (const auto& v : im.values) {
      out << delimiter;
      if (v) {
        out << *v;
      } else {
        out << "undefined";
      }
    }
    out << '\n';
  }
  out << "mean+-std";
  for (const auto& s : report.summary) {
    out << delimiter;
    if (s.count == 0) {
      out << "undefined";
    } else {
      out << s.mean << " +- " << s.std;
    }
  }
  out << '\n';
  out.flags(flags);
  out.precision(prec);
}

}  // namespace hrefnet::metrics
