#pragma once

namespace hesskit {

// Rounds a double to the nearest IEEE 754 binary16 value (ties to even) and
// returns it widened back to double. Magnitudes that round past the largest
// finite half (65504) become +-inf; subnormals are honored; NaN stays NaN.
double round_fp16(double x) noexcept;

}  // namespace hesskit
