// Compiled with VIBPRUNE_DOUBLE against the double-precision library.

#include "gradcheck_entry.hpp"

#include "vibprune/gradcheck.hpp"

std::vector<GradcheckRow> run_gradcheck_f64(std::uint64_t seed) {
  vibprune::GradcheckSetup setup;
  setup.seed = seed;
  std::vector<GradcheckRow> rows;
  for (const auto& r : vibprune::gradcheck_losses(setup))
    rows.push_back({r.component, r.max_relative_error, r.threshold, r.entries, r.passed()});
  return rows;
}
