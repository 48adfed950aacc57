#pragma once

#include <bit>
#include <algorithm>
#include <cstdint>

namespace hrefnet::fast_math {

// Eight doubles processed as one SIMD value (GCC/Clang vector extension).
using Vec8 = double __attribute__((vector_size(64)));
using Vec8i = std::int64_t __attribute__((vector_size(64)));

namespace detail {

inline constexpr double kLog2e = 1.4426950408889634;
inline constexpr double kLn2Hi = 6.93147180369123816490e-01;
inline constexpr double kLn2Lo = 1.90821492927058770002e-10;
inline constexpr double kShifter = 6755399441055744.0;  // 1.5 * 2^52

// Degree-12 Taylor polynomial of e^r for |r| <= ln2/2.
template <typename T>
inline T exp_poly(T r) {
  T p = T{} + 1.0 / 479001600.0;
  p = p * r + 1.0 / 39916800.0;
  p = p * r + 1.0 / 3628800.0;
  p = p * r + 1.0 / 362880.0;
  p = p * r + 1.0 / 40320.0;
  p = p * r + 1.0 / 5040.0;
  p = p * r + 1.0 / 720.0;
  p = p * r + 1.0 / 120.0;
  p = p * r + 1.0 / 24.0;
  p = p * r + 1.0 / 6.0;
  p = p * r + 0.5;
  p = p * r + 1.0;
  return p * r + 1.0;
}

}  // namespace detail

// Branch-free double exp that GCC can auto-vectorize inside tight loops.
// Cody-Waite reduction to |r| <= ln2/2; relative error stays within a few
// ulp for x in [-700, 700].
inline double exp(double x) {
  using namespace detail;
  x = std::max(x, -700.0);
  x = std::min(x, 700.0);
  const double shifted = x * kLog2e + kShifter;
  const std::uint64_t k_bits = std::bit_cast<std::uint64_t>(shifted);
  const double k = shifted - kShifter;
  const double r = (x - k * kLn2Hi) - k * kLn2Lo;
  // Low bits of the shifted value hold k in two's complement.
  const std::uint64_t exponent = (k_bits + 1023) << 52;
  return exp_poly(r) * std::bit_cast<double>(exponent);
}

inline Vec8 exp(Vec8 x) {
  using namespace detail;
  const Vec8 lo = Vec8{} - 700.0;
  const Vec8 hi = Vec8{} + 700.0;
  x = x < lo ? lo : x;
  x = x > hi ? hi : x;
  const Vec8 shifted = x * kLog2e + kShifter;
  const Vec8 k = shifted - kShifter;
  const Vec8 r = (x - k * kLn2Hi) - k * kLn2Lo;
  const Vec8i exponent = (std::bit_cast<Vec8i>(shifted) + 1023) << 52;
  return exp_poly(r) * std::bit_cast<Vec8>(exponent);
}

// 2^x for eight lanes; x is clamped to [-1020, 1020]. Near-minimax
// degree-10 polynomial of 2^f on |f| <= 1/2, relative error about 5e-16.
inline Vec8 exp2(Vec8 x) {
  constexpr double kShifter = 6755399441055744.0;  // 1.5 * 2^52
  const Vec8 lo = Vec8{} - 1020.0;
  const Vec8 hi = Vec8{} + 1020.0;
  x = x < lo ? lo : x;
  x = x > hi ? hi : x;
  const Vec8 shifted = x + kShifter;
  const Vec8 f = x - (shifted - kShifter);
  Vec8 p = Vec8{} + 7.072585949269223e-09;
  p = p * f + 1.0208690299958306e-07;
  p = p * f + 1.321544258792169e-06;
  p = p * f + 1.5252657260200837e-05;
  p = p * f + 0.0001540353044173605;
  p = p * f + 0.0013333558230164974;
  p = p * f + 0.009618129107606888;
  p = p * f + 0.05550410866444772;
  p = p * f + 0.24022650695910097;
  p = p * f + 0.69314718055995;
  p = p * f + 1.0;
  const Vec8i exponent = (std::bit_cast<Vec8i>(shifted) + 1023) << 52;
  return p * std::bit_cast<Vec8>(exponent);
}

inline double hsum(Vec8 v) {
  double s = 0.0;
  for (int i = 0; i < 8; ++i) s += v[i];
  return s;
}

// Natural log for finite x > 0, branch-free. Splits off the binary exponent,
// centers the mantissa on [sqrt(1/2), sqrt(2)) and sums the atanh series.
inline double log(double x) {
  constexpr double kLn2Hi = 6.93147180369123816490e-01;
  constexpr double kLn2Lo = 1.90821492927058770002e-10;
  const std::uint64_t bits = std::bit_cast<std::uint64_t>(x);
  // Shift by the exponent of sqrt(2)/2 so the mantissa lands in [0.707, 1.414).
  const std::uint64_t adjusted = bits - 0x3fe6a09e667f3bcdULL;
  const std::int64_t k = static_cast<std::int64_t>(adjusted) >> 52;
  const std::uint64_t m_bits = (adjusted & 0x000fffffffffffffULL) + 0x3fe6a09e667f3bcdULL;
  const double m = std::bit_cast<double>(m_bits);
  const double z = (m - 1.0) / (m + 1.0);
  const double z2 = z * z;
  double p = 1.0 / 25.0;
  p = p * z2 + 1.0 / 23.0;
  p = p * z2 + 1.0 / 21.0;
  p = p * z2 + 1.0 / 19.0;
  p = p * z2 + 1.0 / 17.0;
  p = p * z2 + 1.0 / 15.0;
  p = p * z2 + 1.0 / 13.0;
  p = p * z2 + 1.0 / 11.0;
  p = p * z2 + 1.0 / 9.0;
  p = p * z2 + 1.0 / 7.0;
  p = p * z2 + 1.0 / 5.0;
  p = p * z2 + 1.0 / 3.0;
  const double log_m = 2.0 * z + 2.0 * z * z2 * p;
  const double kd = static_cast<double>(k);
  return kd * kLn2Hi + (log_m + kd * kLn2Lo);
}

// log(1 + exp(x)) without overflow.
inline double softplus(double x) {
  const double y = exp(-std::max(x, -x));
  const double u = 1.0 + y;
  const double d = u - 1.0;
  // log(u) * y / (u - 1) corrects the rounding of 1 + y.
  const double log1p_y = d == 0.0 ? y : log(u) * (y / d);
  return std::max(x, 0.0) + log1p_y;
}

inline double sigmoid(double x) {
  const double e = exp(-std::max(x, -x));
  const double s = 1.0 / (1.0 + e);
  return x >= 0.0 ? s : 1.0 - s;
}

}  // namespace hrefnet::fast_math
