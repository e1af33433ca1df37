#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <functional>
#include <random>

#include "kramers/identities.hpp"

namespace kramers::testing {

using kramers::random_antisymmetric;
using kramers::random_gamma_tilde;
using kramers::random_spd;

// Composite 8-point Gauss-Legendre on [a, b] with `panels` panels.
inline double gauss_legendre(const std::function<double(double)>& f, double a, double b, int panels) {
  static const double x[8] = {-0.9602898564975363, -0.7966664774136267, -0.5255324099163290, -0.1834346424956498,
                              0.1834346424956498,  0.5255324099163290,  0.7966664774136267,  0.9602898564975363};
  static const double w[8] = {0.1012285362903763, 0.2223810344533745, 0.3137066458778873, 0.3626837833783620,
                              0.3626837833783620, 0.3137066458778873, 0.2223810344533745, 0.1012285362903763};
  const double h = (b - a) / panels;
  double acc = 0.0;
  for (int p = 0; p < panels; ++p) {
    const double mid = a + (p + 0.5) * h;
    for (int i = 0; i < 8; ++i) acc += w[i] * f(mid + 0.5 * h * x[i]);
  }
  return 0.5 * h * acc;
}

}  // namespace kramers::testing
