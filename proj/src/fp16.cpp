#include "hesskit/fp16.hpp"

#include <cmath>
#include <limits>

namespace hesskit {

double round_fp16(double x) noexcept {
  if (std::isnan(x) || std::isinf(x) || x == 0.0) return x;
  const double ax = std::fabs(x);
  const double sign = x < 0.0 ? -1.0 : 1.0;

  int e = 0;
  std::frexp(ax, &e);  // ax = m * 2^e with m in [0.5, 1)
  // Spacing of the binary16 grid around ax: 2^(E-10) for normals with
  // exponent E = e - 1, a flat 2^-24 below the normal threshold 2^-14.
  const int q = (e - 1 >= -14) ? e - 11 : -24;

  const double scaled = std::ldexp(ax, -q);  // exact, power-of-two scale
  double r = std::floor(scaled);
  const double frac = scaled - r;
  if (frac > 0.5 || (frac == 0.5 && std::fmod(r, 2.0) != 0.0)) r += 1.0;

  const double out = std::ldexp(r, q);
  if (out > 65504.0) return sign * std::numeric_limits<double>::infinity();
  return sign * out;
}

}  // namespace hesskit
