#pragma once

#include <cmath>

namespace zssrt {

template <typename Real>
inline Real softplus(Real x) {
  return x > Real(20) ? x : std::log1p(std::exp(x));
}

template <typename Real>
inline Real sigmoid(Real x) {
  return Real(1) / (Real(1) + std::exp(-x));
}

}  // namespace zssrt
