#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

// The engine is compiled twice: single precision for training and double
// precision for finite-difference gradient checks. Each build lives in its own
// inline namespace so both can be linked into one binary.
#ifdef VIBPRUNE_DOUBLE
#define VIBPRUNE_NAMESPACE_BEGIN \
  namespace vibprune {           \
  inline namespace f64 {
#else
#define VIBPRUNE_NAMESPACE_BEGIN \
  namespace vibprune {           \
  inline namespace f32 {
#endif
#define VIBPRUNE_NAMESPACE_END \
  }                            \
  }

VIBPRUNE_NAMESPACE_BEGIN

#ifdef VIBPRUNE_DOUBLE
using real = double;
#else
using real = float;
#endif

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto s : shape) n *= s;
  return n;
}

VIBPRUNE_NAMESPACE_END
