#pragma once

#include <algorithm>
#include <cmath>
#include <queue>
#include <vector>

#include "hrefnet/image.hpp"

// Brute-force reference implementations of the evaluation metrics.
namespace hrefnet::testing {

inline double brute_dice(const BinaryMask& a, const BinaryMask& b) {
  std::int64_t na = 0, nb = 0, both = 0;
  for (std::int64_t r = 0; r < a.height; ++r)
    for (std::int64_t c = 0; c < a.width; ++c) {
      na += a(r, c);
      nb += b(r, c);
      both += a(r, c) && b(r, c);
    }
  if (na + nb == 0) return 100.0;
  return 200.0 * static_cast<double>(both) / static_cast<double>(na + nb);
}

// Tprec/Tsens from explicit set counts over given skeletons.
inline double brute_cldice(const BinaryMask& sp, const BinaryMask& sl, const BinaryMask& pred, const BinaryMask& gt) {
  std::int64_t np = 0, nl = 0, ip = 0, il = 0;
  for (std::int64_t r = 0; r < pred.height; ++r)
    for (std::int64_t c = 0; c < pred.width; ++c) {
      np += sp(r, c);
      nl += sl(r, c);
      ip += sp(r, c) && gt(r, c);
      il += sl(r, c) && pred(r, c);
    }
  if (np == 0 && nl == 0) return 100.0;
  if (np == 0 || nl == 0) return 0.0;
  const double p = static_cast<double>(ip) / static_cast<double>(np), s = static_cast<double>(il) / static_cast<double>(nl);
  return p + s == 0 ? 0.0 : 200.0 * p * s / (p + s);
}

// Fraction of (positive, negative) pairs ranked correctly, ties count half.
inline double brute_auc(const Grid& probs, const BinaryMask& gt) {
  std::vector<double> pos, neg;
  for (std::int64_t i = 0; i < probs.size(); ++i) (gt.bits[i] ? pos : neg).push_back(probs.values[i]);
  double won = 0;
  for (double p : pos)
    for (double n : neg) won += p > n ? 1.0 : (p == n ? 0.5 : 0.0);
  return 100.0 * won / (static_cast<double>(pos.size()) * static_cast<double>(neg.size()));
}

inline std::vector<std::pair<int, int>> brute_boundary(const BinaryMask& m) {
  std::vector<std::pair<int, int>> out;
  auto in = [&](std::int64_t r, std::int64_t c) {
    return r >= 0 && c >= 0 && r < m.height && c < m.width && m(r, c);
  };
  for (int r = 0; r < m.height; ++r)
    for (int c = 0; c < m.width; ++c)
      if (in(r, c) && (!in(r - 1, c) || !in(r + 1, c) || !in(r, c - 1) || !in(r, c + 1))) out.emplace_back(r, c);
  return out;
}

inline double interpolated_percentile(std::vector<double> v, double q) {
  std::sort(v.begin(), v.end());
  const double rank = q * static_cast<double>(v.size() - 1);
  const auto lo = static_cast<std::size_t>(rank);
  const auto hi = std::min(lo + 1, v.size() - 1);
  return v[lo] + (rank - static_cast<double>(lo)) * (v[hi] - v[lo]);
}

// Directed nearest distances by enumerating every boundary pixel pair.
inline std::vector<double> brute_directed(const std::vector<std::pair<int, int>>& from,
                                          const std::vector<std::pair<int, int>>& to) {
  std::vector<double> d;
  for (auto [r, c] : from) {
    double best = 1e300;
    for (auto [r2, c2] : to) best = std::min(best, std::hypot(r - r2, c - c2));
    d.push_back(best);
  }
  return d;
}

inline double brute_hd95(const BinaryMask& a, const BinaryMask& b) {
  const auto ba = brute_boundary(a), bb = brute_boundary(b);
  return std::max(interpolated_percentile(brute_directed(ba, bb), 0.95),
                  interpolated_percentile(brute_directed(bb, ba), 0.95));
}

inline double brute_hausdorff(const BinaryMask& a, const BinaryMask& b) {
  const auto ba = brute_boundary(a), bb = brute_boundary(b);
  double h = 0;
  for (double v : brute_directed(ba, bb)) h = std::max(h, v);
  for (double v : brute_directed(bb, ba)) h = std::max(h, v);
  return h;
}

// Number of 8-connected foreground components.
inline int components8(const BinaryMask& m) {
  std::vector<char> seen(m.bits.size(), 0);
  int n = 0;
  for (std::int64_t s = 0; s < m.size(); ++s) {
    if (!m.bits[s] || seen[s]) continue;
    ++n;
    std::queue<std::int64_t> q;
    q.push(s);
    seen[s] = 1;
    while (!q.empty()) {
      const std::int64_t p = q.front();
      q.pop();
      const std::int64_t r = p / m.width, c = p % m.width;
      for (int dr = -1; dr <= 1; ++dr)
        for (int dc = -1; dc <= 1; ++dc) {
          if (!m.contains(r + dr, c + dc)) continue;
          const std::int64_t k = (r + dr) * m.width + c + dc;
          if (!seen[k]) {
            seen[k] = 1;
            q.push(k);
          }
        }
    }
  }
  return n;
}

}  // namespace hrefnet::testing
