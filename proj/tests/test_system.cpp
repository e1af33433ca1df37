#include <gtest/gtest.h>

#include <random>

#include "kramers/config.hpp"
#include "kramers/system.hpp"
#include "support.hpp"
#include "systems.hpp"

using namespace kramers;

namespace {

double rel(double a, double b) { return std::abs(a - b) / (1.0 + std::max(std::abs(a), std::abs(b))); }

double rel(const Mat& a, const Mat& b) {
  const double scale = 1.0 + std::max(a.cwiseAbs().maxCoeff(), b.cwiseAbs().maxCoeff());
  return (a - b).cwiseAbs().maxCoeff() / scale;
}

// Central differences in t and each q direction against the analytic bundle.
double bundle_fd_error(const SystemSpec& sys, double t, const Vec& q) {
  const int n = sys.dimension;
  const double h = 1e-5;
  const DerivativeBundle b = evaluate_bundle(sys, t, q, BundleDetail::full);
  const DerivativeBundle tp = evaluate_bundle(sys, t + h, q, BundleDetail::full);
  const DerivativeBundle tm = evaluate_bundle(sys, t - h, q, BundleDetail::full);
  double err = 0.0;
  err = std::max(err, rel(b.dt_beta, (tp.beta - tm.beta) / (2 * h)));
  err = std::max(err, rel(b.dt_V, (tp.V - tm.V) / (2 * h)));
  err = std::max(err, rel(Mat(b.dt_grad_beta), Mat((tp.grad_beta - tm.grad_beta) / (2 * h))));
  err = std::max(err, rel(Mat(b.dt_psi), Mat((tp.psi - tm.psi) / (2 * h))));
  err = std::max(err, rel(b.dt_jac_psi, (tp.jac_psi - tm.jac_psi) / (2 * h)));
  for (int i = 0; i < n; ++i) {
    Vec qp = q, qm = q;
    qp(i) += h;
    qm(i) -= h;
    const DerivativeBundle p = evaluate_bundle(sys, t, qp, BundleDetail::full);
    const DerivativeBundle m = evaluate_bundle(sys, t, qm, BundleDetail::full);
    err = std::max(err, rel(b.grad_beta(i), (p.beta - m.beta) / (2 * h)));
    err = std::max(err, rel(b.grad_V(i), (p.V - m.V) / (2 * h)));
    err = std::max(err, rel(Mat(b.hess_beta.row(i).transpose()), Mat((p.grad_beta - m.grad_beta) / (2 * h))));
    err = std::max(err, rel(Mat(b.hess_V.row(i).transpose()), Mat((p.grad_V - m.grad_V) / (2 * h))));
    err = std::max(err, rel(b.d_gamma[i], (p.gamma - m.gamma) / (2 * h)));
    err = std::max(err, rel(Mat(b.jac_psi.row(i).transpose()), Mat((p.psi - m.psi) / (2 * h))));
    err = std::max(err, rel(b.d2_psi[i], (p.jac_psi - m.jac_psi) / (2 * h)));
    err = std::max(err, rel(Mat(b.jac_F_ext.row(i).transpose()), Mat((p.F_ext - m.F_ext) / (2 * h))));
    err = std::max(err, rel(Mat(b.jac_F.row(i).transpose()), Mat((p.F - m.F) / (2 * h))));
    err = std::max(err, rel(b.d_H[i], (p.H - m.H) / (2 * h)));
    err = std::max(err, rel(b.d_gamma_tilde_inv[i], (p.gamma_tilde_inv - m.gamma_tilde_inv) / (2 * h)));
    err = std::max(err, rel(b.d_sigma[i], (p.sigma - m.sigma) / (2 * h)));
  }
  return err;
}

std::vector<SystemSpec> sample_systems() {
  return {parse_system(kramers::testing::kReferenceJson), parse_system(kramers::testing::kRich2Json),
          parse_system(kramers::testing::kRich3Json), parse_system(kramers::testing::kMatrixGammaJson),
          parse_system(kramers::testing::uniform_b_json(1.0))};
}

}  // namespace

TEST(Bundle, AnalyticDerivativesMatchFiniteDifferences) {
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> uq(-1.5, 1.5), ut(0.05, 0.95);
  for (const auto& sys : sample_systems()) {
    double worst = 0.0;
    for (int k = 0; k < 100; ++k) {
      Vec q(sys.dimension);
      for (int i = 0; i < sys.dimension; ++i) q(i) = uq(rng);
      worst = std::max(worst, bundle_fd_error(sys, ut(rng) * sys.horizon, q));
    }
    EXPECT_LT(worst, 1e-6) << "dimension " << sys.dimension;
  }
}

TEST(Bundle, EveryFamilyMatchesFiniteDifferences) {
  // One config per scalar, matrix and vector family not already covered above.
  const std::vector<std::string> configs = {
      R"({"dimension": 2, "horizon": 1, "beta": {"family": "gaussian_bump", "params": {"offset": 2, "amplitude": 0.5,
          "center": [0.1, 0.2], "widths": [0.8, 1.1], "time_eps": 0.3, "time_omega": 2}},
          "gamma": {"family": "scalar_field", "params": {"field": {"family": "sinusoid", "params":
          {"offset": 1.5, "amplitude": 0.4, "weights": [0.3, 0.8]}}}},
          "psi": {"family": "linear", "params": {"matrix": [[0.1, 0.5], [-0.2, 0.3]], "offset": [0.1, 0.2],
          "time_eps": 0.4, "time_omega": 1.7}},
          "V": {"family": "quartic", "params": {"quartic": 0.3, "quadratic": 0.7}},
          "F_ext": {"family": "swirl", "params": {"amplitude": 0.4, "width": 0.9, "time_eps": 0.2, "time_omega": 1.2}}})",
      R"({"dimension": 2, "horizon": 1, "beta": {"family": "affine", "params": {"offset": 3, "weights": [0.2, -0.1]}},
          "gamma": {"family": "constant", "params": {"value": [[2, 0.3], [0.3, 1]]}},
          "psi": {"family": "constant", "params": {"value": [0.3, 0.1]}},
          "V": {"family": "harmonic", "params": {"stiffness": [1, 2], "drive": [0.3, 0.1], "omega": 2}},
          "F_ext": {"family": "constant", "params": {"value": [0.1, 0.2]}}})"};
  std::mt19937_64 rng(12);
  std::uniform_real_distribution<double> uq(-1.5, 1.5), ut(0.05, 0.95);
  for (const auto& text : configs) {
    const SystemSpec sys = parse_system(text);
    double worst = 0.0;
    for (int k = 0; k < 100; ++k) {
      Vec q(2);
      q << uq(rng), uq(rng);
      worst = std::max(worst, bundle_fd_error(sys, ut(rng), q));
    }
    EXPECT_LT(worst, 1e-6);
  }
}

TEST(Bundle, StructuralInvariants) {
  std::mt19937_64 rng(13);
  std::uniform_real_distribution<double> uq(-1.5, 1.5);
  for (const auto& sys : sample_systems()) {
    for (int k = 0; k < 20; ++k) {
      Vec q(sys.dimension);
      for (int i = 0; i < sys.dimension; ++i) q(i) = uq(rng);
      const DerivativeBundle b = evaluate_bundle(sys, 0.3, q, BundleDetail::full);
      EXPECT_LT((b.H + b.H.transpose()).cwiseAbs().maxCoeff(), 1e-15);
      EXPECT_LT((b.gamma_tilde + b.gamma_tilde.transpose() - 2.0 * b.gamma).cwiseAbs().maxCoeff(), 1e-13);
      EXPECT_LT((b.gamma_tilde_inv * b.gamma_tilde - Mat::Identity(b.n, b.n)).cwiseAbs().maxCoeff(), 1e-12);
      EXPECT_LT((b.sigma * b.sigma.transpose() - b.Sigma).cwiseAbs().maxCoeff(), 1e-12);
      EXPECT_LT((b.Sigma - 2.0 / b.beta * b.gamma).cwiseAbs().maxCoeff(), 1e-14);
      // sigma is the symmetric root, so squaring the root of Sigma reproduces it
      const SigmaFactor f2 = derive_sigma(Mat(b.sigma * b.sigma.transpose()));
      EXPECT_LT((f2.sigma - b.sigma).cwiseAbs().maxCoeff(), 1e-12);
    }
  }
}

TEST(Sigma, Examples) {
  Mat g = Mat::Identity(2, 2);
  EXPECT_LT((derive_sigma(Mat(2.0 / 2.0 * g)).sigma - Mat::Identity(2, 2)).norm(), 1e-14);
  Mat g2(2, 2);
  g2 << 1, 0, 0, 4;
  Mat want(2, 2);
  want << 2, 0, 0, 4;
  EXPECT_LT((derive_sigma(Mat(2.0 / 0.5 * g2)).sigma - want).norm(), 1e-13);
  std::mt19937_64 rng(3);
  for (int k = 0; k < 50; ++k) {
    const Mat gr = kramers::testing::random_spd(3, rng);
    const double beta = 0.5 + k * 0.07;
    const Mat S = 2.0 / beta * gr;
    const Mat s = derive_sigma(S).sigma;
    EXPECT_LT((s * s.transpose() - S).cwiseAbs().maxCoeff(), 1e-12);
    EXPECT_LT((s - s.transpose()).cwiseAbs().maxCoeff(), 1e-13);
  }
  Mat bad(2, 2);
  bad << 1, 0, 0, -1;
  EXPECT_THROW(derive_sigma(bad), Error);
}

TEST(NoiseDrift, ConstantGammaTildeGivesZero) {
  const SystemSpec sys = parse_system(kramers::testing::uniform_b_json(1.0));
  const DerivativeBundle b = evaluate_bundle(sys, 0.2, Vec::Constant(3, 0.4));
  EXPECT_LT(noise_induced_drift_ito(b).norm(), 1e-15);
}

TEST(NoiseDrift, ScalarGammaClosedForms) {
  const SystemSpec sys = parse_system(R"({"dimension": 1, "horizon": 1,
    "beta": {"family": "tanh_ramp", "params": {"offset": 2, "amplitude": 0.5, "weights": [0.7]}},
    "gamma": {"family": "scalar_field", "params": {"field": {"family": "sinusoid",
      "params": {"offset": 1.5, "amplitude": 0.6, "weights": [1.3]}}}},
    "V": {"family": "harmonic", "params": {"stiffness": 1}}})");
  for (double x : {-1.0, -0.3, 0.2, 0.9}) {
    Vec q(1);
    q << x;
    const DerivativeBundle b = evaluate_bundle(sys, 0.0, q);
    const double g = b.gamma(0, 0), dg = b.d_gamma[0](0, 0);
    EXPECT_NEAR(noise_induced_drift_ito(b)(0), -dg / (b.beta * g * g), 1e-13);
    const double s = b.sigma(0, 0), ds = b.d_sigma[0](0, 0);
    EXPECT_NEAR(noise_induced_drift_strat(b)(0), -0.5 * ds * s / (g * g), 1e-13);
    // hand derivative of sigma = sqrt(2 g / beta)
    const double ds_hand = 0.5 / s * (2.0 * dg / b.beta - 2.0 * g * b.grad_beta(0) / (b.beta * b.beta));
    EXPECT_NEAR(ds, ds_hand, 1e-12);
  }
}

TEST(NoiseDrift, ItoMatchesFiniteDifferences) {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> uq(-1.0, 1.0);
  const double h = 1e-5;
  for (const auto& sys : sample_systems()) {
    for (int k = 0; k < 20; ++k) {
      Vec q(sys.dimension);
      for (int i = 0; i < sys.dimension; ++i) q(i) = uq(rng);
      const DerivativeBundle b = evaluate_bundle(sys, 0.4, q);
      Vec fd = Vec::Zero(sys.dimension);
      for (int j = 0; j < sys.dimension; ++j) {
        Vec qp = q, qm = q;
        qp(j) += h;
        qm(j) -= h;
        const Mat d = (evaluate_bundle(sys, 0.4, qp).gamma_tilde_inv - evaluate_bundle(sys, 0.4, qm).gamma_tilde_inv) / (2 * h);
        fd += d.col(j);
      }
      fd /= b.beta;
      EXPECT_LT((noise_induced_drift_ito(b) - fd).cwiseAbs().maxCoeff(), 1e-6);
    }
  }
}

TEST(NoiseDrift, ItoEqualsStratonovichPlusCorrection) {
  std::mt19937_64 rng(6);
  std::uniform_real_distribution<double> uq(-1.0, 1.0);
  for (const auto& sys : sample_systems()) {
    for (int k = 0; k < 50; ++k) {
      Vec q(sys.dimension);
      for (int i = 0; i < sys.dimension; ++i) q(i) = uq(rng);
      const DerivativeBundle b = evaluate_bundle(sys, 0.7, q);
      const Vec ito = b.gamma_tilde_inv * b.F + noise_induced_drift_ito(b);
      const Vec strat = b.gamma_tilde_inv * b.F + noise_induced_drift_strat(b);
      EXPECT_LT((ito - strat - ito_strat_correction(b)).cwiseAbs().maxCoeff(), 1e-8);
    }
  }
}

TEST(NoiseDrift, ScalarStratonovichVanishesForConstantCoefficients) {
  const SystemSpec sys = parse_system(kramers::testing::kConstantBetaJson);
  Vec q(1);
  q << 0.3;
  EXPECT_EQ(noise_induced_drift_strat(evaluate_bundle(sys, 0.1, q)).norm(), 0.0);
}

TEST(NoiseDrift, NeedsFullBundle) {
  const SystemSpec sys = kramers::testing::reference_system();
  const DerivativeBundle b = evaluate_bundle(sys, 0.0, Vec::Zero(1), BundleDetail::kinetic);
  EXPECT_THROW(noise_induced_drift_ito(b), InvalidInput);
}

TEST(Reverse, TimeIndependentPsiZeroIsUnchanged) {
  const SystemSpec sys = kramers::testing::reference_system();
  const SystemSpec rev = reverse_system(sys, 2.0, Involution::standard);
  for (double t : {0.0, 0.7, 2.0})
    for (double x : {-1.0, 0.5}) {
      Vec q(1);
      q << x;
      const DerivativeBundle a = evaluate_bundle(sys, t, q), b = evaluate_bundle(rev, t, q);
      EXPECT_EQ(a.beta, b.beta);
      EXPECT_EQ(a.F, b.F);
      EXPECT_EQ(a.gamma_tilde, b.gamma_tilde);
    }
}

TEST(Reverse, StandardFlipsPsiAndTime) {
  const SystemSpec sys = parse_system(kramers::testing::kRich2Json);
  const double T = 1.0;
  const SystemSpec rev = reverse_system(sys, T, Involution::standard);
  Vec q(2);
  q << 0.3, -0.4;
  for (double t : {0.0, 0.25, 0.8}) {
    const DerivativeBundle r = evaluate_bundle(rev, t, q);
    const DerivativeBundle o = evaluate_bundle(sys, T - t, q);
    EXPECT_LT((r.psi + o.psi).norm(), 1e-15);
    EXPECT_NEAR(r.beta, o.beta, 1e-15);
    EXPECT_NEAR(r.dt_beta, -o.dt_beta, 1e-14);
    EXPECT_LT((r.dt_psi - o.dt_psi).norm(), 1e-14);  // two sign flips
    EXPECT_LT((r.gamma_tilde - o.gamma_tilde.transpose()).norm(), 1e-14);
  }
  const SystemSpec back = reverse_system(rev, T, Involution::standard);
  for (double t : {0.1, 0.6}) {
    const DerivativeBundle a = evaluate_bundle(back, t, q), b = evaluate_bundle(sys, t, q);
    EXPECT_LT((a.psi - b.psi).norm(), 1e-14);
    EXPECT_NEAR(a.beta, b.beta, 1e-14);
    EXPECT_NEAR(a.dt_V, b.dt_V, 1e-13);
    EXPECT_LT((a.F - b.F).norm(), 1e-13);
  }
}

TEST(Reverse, UniformKeepsPsi) {
  const SystemSpec sys = parse_system(kramers::testing::uniform_b_json(1.0));
  const SystemSpec rev = reverse_system(sys, 2.0, Involution::uniform_B);
  Vec q(3);
  q << 0.3, -0.2, 0.5;
  const DerivativeBundle a = evaluate_bundle(sys, 0.5, q), b = evaluate_bundle(rev, 0.5, q);
  EXPECT_LT((a.psi - b.psi).norm(), 1e-15);
  EXPECT_LT((a.gamma_tilde - b.gamma_tilde).norm(), 1e-15);
  EXPECT_THROW(reverse_system(kramers::testing::reference_system(), 2.0, Involution::uniform_B), InvalidInput);
}

TEST(Reverse, UniformNeedsSymmetry) {
  // beta odd-ish in q1 violates the evenness condition
  std::string text = kramers::testing::uniform_b_json(1.0);
  const std::string from = R"("weights": [0.0, 1.0, 0.0])";
  text.replace(text.find(from), from.size(), R"("weights": [1.0, 0.0, 0.0])");
  const SystemSpec sys = parse_system(text);
  EXPECT_FALSE(validate_assumptions(sys).passed);
  EXPECT_THROW(reverse_system(sys, 2.0, Involution::uniform_B), InvalidInput);
}

TEST(Validate, ConstantSystemPasses) {
  const SystemSpec sys = parse_system(R"({"dimension": 2, "horizon": 1,
    "beta": {"family": "constant", "params": {"value": 1}},
    "gamma": {"family": "constant", "params": {"value": 1}},
    "V": {"family": "harmonic", "params": {"stiffness": 1}}})");
  const ValidationReport r = validate_assumptions(sys);
  EXPECT_TRUE(r.passed);
  EXPECT_EQ(r.gamma_eig_min, 1.0);
  EXPECT_EQ(r.gamma_eig_max, 1.0);
  EXPECT_EQ(r.beta_min, 1.0);
  EXPECT_GE(r.probes, 10000u);
}

TEST(Validate, LinearBetaFails) {
  const SystemSpec sys = parse_system(R"({"dimension": 1, "horizon": 1,
    "beta": {"family": "affine", "params": {"offset": 0, "weights": [1]}},
    "gamma": {"family": "constant", "params": {"value": 1}},
    "V": {"family": "harmonic", "params": {"stiffness": 1}}})");
  const ValidationReport r = validate_assumptions(sys);
  EXPECT_FALSE(r.passed);
  EXPECT_LE(r.beta_min, 0.0);
  EXPECT_FALSE(r.violations.empty());
}

TEST(Validate, TanhBetaRange) {
  ProbeGrid g;
  g.lo = Vec::Constant(1, -20.0);
  g.hi = Vec::Constant(1, 20.0);
  const ValidationReport r = validate_assumptions(kramers::testing::reference_system(), g);
  EXPECT_TRUE(r.passed);
  EXPECT_GE(r.beta_min, 1.0);
  EXPECT_LE(r.beta_max, 3.0);
  EXPECT_NEAR(r.beta_min, 1.0, 1e-12);
  EXPECT_NEAR(r.beta_max, 3.0, 1e-12);
}

TEST(Validate, UniformSystemPasses) {
  EXPECT_TRUE(validate_assumptions(parse_system(kramers::testing::uniform_b_json(0.0))).passed);
  EXPECT_TRUE(validate_assumptions(parse_system(kramers::testing::uniform_b_json(1.0))).passed);
}

TEST(Config, ParsesReference) {
  const SystemSpec sys = kramers::testing::reference_system();
  EXPECT_EQ(sys.dimension, 1);
  EXPECT_TRUE(sys.psi_zero());
  Vec q(1);
  q << 0.4;
  const DerivativeBundle b = evaluate_bundle(sys, 0.0, q);
  EXPECT_NEAR(b.beta, 2.0 + std::tanh(0.4), 1e-15);
  EXPECT_NEAR(b.V, 0.08, 1e-15);
}

TEST(Config, Errors) {
  auto bad = [](const std::string& text, const std::string& needle) {
    try {
      parse_system(text);
      ADD_FAILURE() << "accepted: " << text;
    } catch (const ConfigError& e) {
      EXPECT_NE(std::string(e.what()).find(needle), std::string::npos) << e.what();
    }
  };
  const std::string base_tail = R"(, "gamma": {"family": "constant", "params": {"value": 1}},
    "V": {"family": "harmonic", "params": {"stiffness": 1}}})";
  bad(R"({"dimension": 1, "horizon": 1, "beta": {"family": "constant", "params": {"value": 1}})" + base_tail +
          "x",
      "parse error");
  bad(R"({"dimension": 1, "horizon": 1, "colour": 3, "beta": {"family": "constant", "params": {"value": 1}})" +
          base_tail,
      "colour");
  bad(R"({"dimension": 1, "horizon": 1, "beta": {"family": "nope", "params": {}})" + base_tail, "config.beta.family");
  bad(R"({"dimension": 1, "horizon": 1, "beta": {"family": "constant", "params": {"valu": 1}})" + base_tail, "valu");
  bad(R"({"dimension": 1, "horizon": 1,
    "beta": {"family": "constant", "params": {"value": 1}}, "uniform_B0": 1)" + base_tail,
      "dimension 3");
  bad(R"({"dimension": 2, "horizon": 1, "beta": {"family": "tanh_ramp", "params": {"weights": [1, 2, 3]}})" + base_tail,
      "config.beta.params.weights");
  bad(R"({"horizon": 1, "beta": {"family": "constant", "params": {"value": 1}})" + base_tail, "dimension");
  // line context for a misplaced key on line 3
  bad("{\"dimension\": 1,\n \"horizon\": 1,\n \"bogus\": 1,\n \"beta\": {\"family\": \"constant\", \"params\": {\"value\": 1}}" +
          base_tail,
      "line 3");
}
