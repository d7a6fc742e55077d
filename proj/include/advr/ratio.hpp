#pragma once

#include <cstddef>

namespace advr {

// Exact fraction hits/total; value() is only for display and thresholds.
struct Ratio {
  std::size_t hits = 0;
  std::size_t total = 0;

  double value() const { return total == 0 ? 0.0 : double(hits) / double(total); }

  friend bool operator==(const Ratio&, const Ratio&) = default;
};

}  // namespace advr
