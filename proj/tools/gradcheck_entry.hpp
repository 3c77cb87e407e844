#pragma once

// Precision-neutral bridge so float32 programs can run the double-precision
// gradient checks.

#include <cstdint>
#include <string>
#include <vector>

struct GradcheckRow {
  std::string component;
  double max_relative_error = 0;
  double threshold = 0;
  std::size_t entries = 0;
  bool passed = false;
};

std::vector<GradcheckRow> run_gradcheck_f64(std::uint64_t seed);
