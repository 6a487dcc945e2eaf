// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <stdexcept>
#include <vector>

namespace moelab {

// Flat tensor of full-precision (binary32) values. Reductions over a
// TensorBuf must always accumulate in canonical index order; that ordering
// is what makes replayed iterations bit-identical to the original run.
struct TensorBuf {
  std::vector<int64_t> shape;
  std::vector<float> values;

  TensorBuf() = default;
  TensorBuf(std::vector<int64_t> s) : shape(std::move(s)) {
    int64_t n = 1;
    for (auto d : shape) n *= d;
    values.assign(static_cast<size_t>(n), 0.0f);
  }

  size_t size() const { return values.size(); }
  float& operator[](size_t i) { return values[i]; }
  float operator[](size_t i) const { return values[i]; }
};

namespace detail {

// Round a binary32 value to a narrower binary format (ebits exponent bits,
// mbits mantissa bits) with round-to-nearest-even, returning the rounded
// value widened back to binary32. Subnormals of the target format are
// honoured. `saturate` clamps overflow to the largest finite value (FP8
// convention); otherwise overflow goes to infinity (IEEE half convention).
inline float round_to_format(float x, int ebits, int mbits, bool saturate) {
  if (std::isnan(x) || std::isinf(x)) return x;

  uint32_t bits;
  std::memcpy(&bits, &x, 4);
  const uint32_t sign = bits & 0x80000000u;
  int32_t exp = static_cast<int32_t>((bits >> 23) & 0xff) - 127;
  uint32_t frac = bits & 0x7fffffu;

  if ((bits & 0x7fffffffu) == 0) return x;  // signed zero

  const int bias = (1 << (ebits - 1)) - 1;
  const int emax = bias;             // largest unbiased exponent
  const int emin = 1 - bias;         // smallest normal exponent

  // binary32 subnormal inputs are far below any target's subnormal range.
  if (exp == -127) {
    float zero = 0.0f;
    uint32_t zb = sign;
    std::memcpy(&zero, &zb, 4);
    return zero;
  }

  // Mantissa with implicit leading one, then round at the target precision.
  uint64_t mant = (1ull << 23) | frac;
  int shift = 23 - mbits;
  if (exp < emin) shift += emin - exp;  // target subnormal: coarser grid
  if (shift >= 63) {
    float zero = 0.0f;
    uint32_t zb = sign;
    std::memcpy(&zero, &zb, 4);
    return zero;
  }

  const uint64_t keep = mant >> shift;
  const uint64_t rem = mant & ((1ull << shift) - 1);
  const uint64_t half = 1ull << (shift - 1);
  uint64_t rounded = keep;
  if (rem > half || (rem == half && (keep & 1))) rounded += 1;

  double mag = std::ldexp(static_cast<double>(rounded), exp - 23 + shift);

  // Largest finite value: (2 - 2^-mbits) * 2^emax.
  const double max_finite =
      std::ldexp(static_cast<double>((2 << mbits) - 1), emax - mbits);
  if (mag > max_finite) {
    if (saturate) {
      mag = max_finite;
    } else {
      return sign ? -INFINITY : INFINITY;
    }
  }
  float out = static_cast<float>(mag);
  return sign ? -out : out;
}

}  // namespace detail

// Round-to-nearest-even emulation of reduced-precision storage on binary32
// values. Width 2 is IEEE binary16; width 1 is the E4M3 training format
// (saturating, as in common ML practice); width 4 is the identity.
inline float quantize_value(float x, int compute_bytes) {
  switch (compute_bytes) {
    case 4:
      return x;
    case 2:
      return detail::round_to_format(x, 5, 10, /*saturate=*/false);
    case 1:
      return detail::round_to_format(x, 4, 3, /*saturate=*/true);
    default:
      throw std::invalid_argument("quantize: unsupported width " +
                                  std::to_string(compute_bytes));
  }
}

inline TensorBuf quantize(const TensorBuf& master, int compute_bytes) {
  TensorBuf out = master;
  for (auto& v : out.values) v = quantize_value(v, compute_bytes);
  return out;
}

inline void quantize_inplace(std::vector<float>& vals, int compute_bytes) {
  if (compute_bytes == 4) return;
  for (auto& v : vals) v = quantize_value(v, compute_bytes);
}

// Generic reduced-format bit codecs for checkpoint payloads. Values are
// expected to already lie on the target grid (they came out of quantize), so
// packing is lossless.
inline uint16_t pack_reduced(float x, int ebits, int mbits) {
  uint32_t bits;
  std::memcpy(&bits, &x, 4);
  const int bias = (1 << (ebits - 1)) - 1;
  const uint16_t sign = static_cast<uint16_t>((bits >> 31) << (ebits + mbits));
  int32_t exp = static_cast<int32_t>((bits >> 23) & 0xff) - 127;
  uint32_t frac = bits & 0x7fffffu;
  const uint32_t exp_mask = (1u << ebits) - 1;
  if (exp == 128) {  // inf/nan
    return static_cast<uint16_t>(sign | (exp_mask << mbits) |
                                 (frac ? (1u << (mbits - 1)) : 0));
  }
  if ((bits & 0x7fffffffu) == 0) return sign;
  if (exp > bias) return static_cast<uint16_t>(sign | (exp_mask << mbits));
  const int emin = 1 - bias;
  if (exp >= emin) {
    return static_cast<uint16_t>(sign | ((exp + bias) << mbits) |
                                 (frac >> (23 - mbits)));
  }
  // target subnormal
  uint32_t mant = (1u << 23) | frac;
  int shift = (23 - mbits) + (emin - exp);
  if (shift > 31) return sign;
  return static_cast<uint16_t>(sign | (mant >> shift));
}

inline float unpack_reduced(uint16_t code, int ebits, int mbits) {
  const int bias = (1 << (ebits - 1)) - 1;
  const uint32_t exp_mask = (1u << ebits) - 1;
  const uint32_t frac_mask = (1u << mbits) - 1;
  const uint32_t sign = (static_cast<uint32_t>(code) >> (ebits + mbits)) << 31;
  const uint32_t exp = (code >> mbits) & exp_mask;
  const uint32_t frac = code & frac_mask;
  uint32_t bits;
  if (exp == 0) {
    if (frac == 0) {
      bits = sign;
    } else {
      int e = 1 - bias;
      uint32_t m = frac;
      while (!(m & (1u << mbits))) {
        m <<= 1;
        --e;
      }
      m &= frac_mask;
      bits = sign | ((e + 127) << 23) | (m << (23 - mbits));
    }
  } else if (exp == exp_mask) {
    bits = sign | 0x7f800000u | (frac << (23 - mbits));
  } else {
    bits = sign | ((static_cast<int32_t>(exp) - bias + 127) << 23) |
           (frac << (23 - mbits));
  }
  float f;
  std::memcpy(&f, &bits, 4);
  return f;
}

inline uint16_t float_to_half_bits(float x) { return pack_reduced(x, 5, 10); }
inline float half_bits_to_float(uint16_t h) { return unpack_reduced(h, 5, 10); }

}  // namespace moelab
