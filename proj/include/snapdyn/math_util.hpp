#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>

namespace snapdyn {

// exp() written as straight-line arithmetic so the compiler can vectorize
// loops over arrays.  Max relative error ~4e-15 on [-708, 709]; inputs
// below -708 clamp to the smallest normal result, above 709 to exp(709).
inline double fexp(double x) {
  x = x < -708.0 ? -708.0 : x;
  x = x > 709.0 ? 709.0 : x;

  // k = round(x / ln2) via the shift trick (exact for |arg| < 2^51).
  const double inv_ln2 = 1.4426950408889634074;
  const double shift = 6755399441055744.0;  // 1.5 * 2^52
  double kd = x * inv_ln2 + shift;
  std::int64_t ki;
  std::memcpy(&ki, &kd, sizeof(ki));
  ki = static_cast<std::int32_t>(ki & 0xffffffff);  // low word holds round(x/ln2)
  kd -= shift;

  const double ln2_hi = 6.93147180369123816490e-01;
  const double ln2_lo = 1.90821492927058770002e-10;
  double r = x - kd * ln2_hi;
  r -= kd * ln2_lo;

  // Taylor series of exp(r) on |r| <= ln2/2, degree 13.
  double p = 1.0 / 6227020800.0;           // 1/13!
  p = p * r + 1.0 / 479001600.0;           // 1/12!
  p = p * r + 1.0 / 39916800.0;            // 1/11!
  p = p * r + 1.0 / 3628800.0;             // 1/10!
  p = p * r + 1.0 / 362880.0;              // 1/9!
  p = p * r + 1.0 / 40320.0;               // 1/8!
  p = p * r + 1.0 / 5040.0;                // 1/7!
  p = p * r + 1.0 / 720.0;                 // 1/6!
  p = p * r + 1.0 / 120.0;                 // 1/5!
  p = p * r + 1.0 / 24.0;                  // 1/4!
  p = p * r + 1.0 / 6.0;                   // 1/3!
  p = p * r + 0.5;
  p = p * r + 1.0;
  p = p * r + 1.0;

  // Multiply by 2^k through the exponent bits.
  std::uint64_t bits = static_cast<std::uint64_t>(ki + 1023) << 52;
  double scale;
  std::memcpy(&scale, &bits, sizeof(scale));
  return p * scale;
}

}  // namespace snapdyn
