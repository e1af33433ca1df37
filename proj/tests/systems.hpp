#pragma once

#include <string>

#include "kramers/config.hpp"

namespace kramers::testing {

// n = 1, V = q^2/2, beta = 2 + tanh q, gamma = 1, psi = 0, q0 = 0.
inline const char* kReferenceJson = R"({
  "dimension": 1,
  "horizon": 2.0,
  "beta": {"family": "tanh_ramp", "params": {"offset": 2.0, "amplitude": 1.0, "weights": [1.0]}},
  "gamma": {"family": "constant", "params": {"value": 1.0}},
  "V": {"family": "harmonic", "params": {"stiffness": 1.0}},
  "initial": {"family": "point", "params": {"q0": 0.0}}
})";

// Same but with constant beta.
inline const char* kConstantBetaJson = R"({
  "dimension": 1,
  "horizon": 2.0,
  "beta": {"family": "constant", "params": {"value": 2.0}},
  "gamma": {"family": "constant", "params": {"value": 1.0}},
  "V": {"family": "harmonic", "params": {"stiffness": 1.0}},
  "initial": {"family": "point", "params": {"q0": 0.0}}
})";

// Everything depends on (t, q): rotating matrix drag, swirling vector potential, driven
// potential and a non-conservative external force.
inline const char* kRich2Json = R"({
  "dimension": 2,
  "horizon": 1.0,
  "beta": {"family": "tanh_ramp", "params": {"offset": 2.0, "amplitude": 0.6, "weights": [0.7, -0.4],
           "shift": 0.1, "envelope": [0.3, 0.0], "time_eps": 0.2, "time_omega": 1.3}},
  "gamma": {"family": "rotation_interp", "params": {"diag": [1.0, 2.0], "plane": [0, 1], "theta0": 0.3,
            "kappa": 0.5, "weights": [0.4, 0.2], "shift": 0.0}},
  "psi": {"family": "swirl", "params": {"amplitude": 0.5, "width": 1.2, "plane": [0, 1],
          "time_eps": 0.3, "time_omega": 0.7}},
  "V": {"family": "harmonic", "params": {"stiffness": [1.0, 1.5], "center": [0.1, -0.2],
        "drive": [0.2, 0.1], "omega": 1.0}},
  "F_ext": {"family": "linear", "params": {"matrix": [[0.0, 0.3], [-0.3, 0.1]], "offset": [0.1, 0.0],
            "time_eps": 0.1, "time_omega": 2.0}},
  "initial": {"family": "gaussian", "params": {"mean": [0.2, -0.1], "stddev": [0.3, 0.2]}}
})";

inline const char* kRich3Json = R"({
  "dimension": 3,
  "horizon": 1.0,
  "beta": {"family": "sinusoid", "params": {"offset": 2.0, "amplitude": 0.5, "weights": [0.6, 0.3, -0.5],
           "shift": 0.2, "time_eps": 0.25, "time_omega": 0.9}},
  "gamma": {"family": "rotation_interp", "params": {"diag": [1.0, 1.8, 0.7], "plane": [1, 2], "theta0": -0.2,
            "kappa": 0.8, "weights": [0.3, -0.1, 0.5], "shift": 0.1}},
  "psi": {"family": "swirl", "params": {"amplitude": 0.8, "width": 1.5, "plane": [0, 2],
          "time_eps": 0.2, "time_omega": 1.1}},
  "V": {"family": "gaussian_bump", "params": {"offset": 0.0, "amplitude": -1.0, "center": [0.0, 0.1, 0.0],
        "widths": [1.0, 1.3, 0.8], "time_eps": 0.1, "time_omega": 1.5}},
  "F_ext": {"family": "linear", "params": {"matrix": [[0.1, 0.2, 0.0], [-0.2, 0.0, 0.1], [0.0, -0.1, 0.0]],
            "offset": [0.0, 0.1, -0.1]}}
})";

// Matrix drag depending on q but no magnetic field.
inline const char* kMatrixGammaJson = R"({
  "dimension": 2,
  "horizon": 1.0,
  "beta": {"family": "tanh_ramp", "params": {"offset": 2.0, "amplitude": 0.8, "weights": [0.5, 0.9]}},
  "gamma": {"family": "rotation_interp", "params": {"diag": [1.0, 2.5], "plane": [0, 1], "theta0": 0.4,
            "kappa": 0.6, "weights": [0.5, -0.3]}},
  "V": {"family": "quartic", "params": {"quartic": 0.25, "quadratic": 0.5}},
  "F_ext": {"family": "constant", "params": {"value": [0.2, -0.1]}}
})";

// Uniform magnetic field along q3 with beta = 2 + tanh(q2) exp(-(q1)^2 / 2).
inline std::string uniform_b_json(double b0) {
  return std::string(R"({
  "dimension": 3,
  "horizon": 2.0,
  "uniform_B0": )") + std::to_string(b0) + R"(,
  "beta": {"family": "tanh_ramp", "params": {"offset": 2.0, "amplitude": 1.0, "weights": [0.0, 1.0, 0.0],
           "envelope": [1.0, 0.0, 0.0]}},
  "gamma": {"family": "constant", "params": {"value": 1.0}},
  "V": {"family": "harmonic", "params": {"stiffness": [1.0, 1.0, 1.0]}}
})";
}

inline SystemSpec reference_system() { return parse_system(kReferenceJson); }

}  // namespace kramers::testing
