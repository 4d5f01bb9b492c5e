#pragma once

// Branch-free exp so that loops over it vectorize. Deterministic across
// backends since both call the same function.

#include <algorithm>
#include <bit>
#include <cstdint>

namespace tcl::fastmath {

// exp(x) within a few ulp of std::exp on [-708, 709]; inputs outside that range
// are clamped, so exp(-inf) returns ~1e-308 rather than 0.
inline double exp(double x) {
  constexpr double kLog2e = 1.4426950408889634;
  constexpr double kLn2Hi = 6.93147180369123816490e-01;
  constexpr double kLn2Lo = 1.90821492927058770002e-10;
  constexpr double kShift = 6755399441055744.0;  // 1.5 * 2^52
  x = std::min(709.0, std::max(-708.0, x));
  const double t = x * kLog2e + kShift;
  const double n = t - kShift;
  const double r = (x - n * kLn2Hi) - n * kLn2Lo;
  // Taylor series to degree 13; |r| <= ln2/2 keeps the remainder below 1e-17.
  double p = 1.0 / 6227020800.0;
  p = p * r + 1.0 / 479001600.0;
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
  p = p * r + 1.0;
  const std::int64_t ni = std::bit_cast<std::int64_t>(t) - std::bit_cast<std::int64_t>(kShift);
  return p * std::bit_cast<double>((ni + 1023) << 52);
}

// tanh via exp; saturates cleanly to +-1.
inline double tanh(double x) { return 1.0 - 2.0 / (1.0 + exp(2.0 * x)); }

}  // namespace tcl::fastmath
