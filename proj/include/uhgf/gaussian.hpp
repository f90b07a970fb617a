// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>

namespace uhgf {

// Gaussian belief in mean/precision form.
struct Gaussian {
  double mean = 0.0;
  double precision = 1.0;

  double variance() const { return 1.0 / precision; }
  bool valid() const {
    return std::isfinite(mean) && std::isfinite(precision) && precision > 0.0;
  }
};

}  // namespace uhgf
