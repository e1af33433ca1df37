#pragma once

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "kramers/cellproblem.hpp"
#include "kramers/config.hpp"
#include "kramers/entropy.hpp"
#include "kramers/identities.hpp"
#include "kramers/matrixfun.hpp"
#include "kramers/simulate.hpp"
#include "kramers/system.hpp"

namespace kramers {

// Too many excluded paths in a Monte Carlo run.
class DivergenceAbort : public Error {
 public:
  using Error::Error;
};

// ================================================================ output

inline std::string fmt(double x) {
  if (x == 0.0) return "0";  // also folds -0
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.12g", x);
  return buf;
}

struct Table {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  void add(std::vector<std::string> row) {
    if (row.size() != header.size()) throw InvalidInput("table row has the wrong width");
    rows.push_back(std::move(row));
  }

  std::string csv() const {
    std::string out;
    auto line = [&out](const std::vector<std::string>& r) {
      for (std::size_t i = 0; i < r.size(); ++i) {
        if (i) out += ',';
        out += r[i];
      }
      out += '\n';
    };
    line(header);
    for (const auto& r : rows) line(r);
    return out;
  }
};

inline void write_file(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::binary);
  if (!f) throw InvalidInput("cannot write " + path.string());
  f << text;
  if (!f) throw InvalidInput("write failed for " + path.string());
}

struct LogFit {
  double slope = std::nan("");
  double intercept = std::nan("");
  int points = 0;
};

// Least squares line through (ln x, ln |y|), skipping y = 0.
inline LogFit fit_loglog(const std::vector<double>& x, const std::vector<double>& y) {
  std::vector<double> lx, ly;
  for (std::size_t i = 0; i < x.size(); ++i)
    if (x[i] > 0.0 && y[i] != 0.0 && std::isfinite(y[i])) {
      lx.push_back(std::log(x[i]));
      ly.push_back(std::log(std::abs(y[i])));
    }
  LogFit f;
  f.points = static_cast<int>(lx.size());
  if (lx.size() < 2) return f;
  const double n = static_cast<double>(lx.size());
  const double mx = std::accumulate(lx.begin(), lx.end(), 0.0) / n;
  const double my = std::accumulate(ly.begin(), ly.end(), 0.0) / n;
  double sxx = 0.0, sxy = 0.0;
  for (std::size_t i = 0; i < lx.size(); ++i) {
    sxx += (lx[i] - mx) * (lx[i] - mx);
    sxy += (lx[i] - mx) * (ly[i] - my);
  }
  if (sxx == 0.0) return f;
  f.slope = sxy / sxx;
  f.intercept = my - f.slope * mx;
  return f;
}

// Log-log line chart of |y| against x with error bars and the fitted line.
inline std::string loglog_svg(const std::string& title, const std::string& xlabel, const std::string& ylabel,
                              const std::vector<double>& x, const std::vector<double>& y,
                              const std::vector<double>& err, const LogFit& fit) {
  const double W = 640, H = 440, L = 80, R = 30, T = 50, B = 60;
  std::vector<double> lx, ly, lo, hi;
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (!(x[i] > 0.0) || y[i] == 0.0) continue;
    lx.push_back(std::log10(x[i]));
    const double a = std::abs(y[i]);
    ly.push_back(std::log10(a));
    const double e = i < err.size() ? err[i] : 0.0;
    lo.push_back(std::log10(std::max(a - e, a * 1e-3)));
    hi.push_back(std::log10(a + e));
  }
  std::ostringstream s;
  s << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\">\n";
  s << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  s << "<text x=\"" << W / 2 << "\" y=\"28\" text-anchor=\"middle\" font-size=\"16\">" << title << "</text>\n";
  if (lx.empty()) {
    s << "<text x=\"" << W / 2 << "\" y=\"" << H / 2 << "\" text-anchor=\"middle\">no nonzero points</text>\n</svg>\n";
    return s.str();
  }
  double x0 = *std::min_element(lx.begin(), lx.end()), x1 = *std::max_element(lx.begin(), lx.end());
  double y0 = *std::min_element(lo.begin(), lo.end()), y1 = *std::max_element(hi.begin(), hi.end());
  if (x1 - x0 < 1e-9) { x0 -= 0.5; x1 += 0.5; }
  if (y1 - y0 < 1e-9) { y0 -= 0.5; y1 += 0.5; }
  const double px = 0.08 * (x1 - x0), py = 0.08 * (y1 - y0);
  x0 -= px; x1 += px; y0 -= py; y1 += py;
  auto X = [&](double v) { return L + (v - x0) / (x1 - x0) * (W - L - R); };
  auto Y = [&](double v) { return H - B - (v - y0) / (y1 - y0) * (H - T - B); };
  s << "<line x1=\"" << L << "\" y1=\"" << H - B << "\" x2=\"" << W - R << "\" y2=\"" << H - B << "\" stroke=\"black\"/>\n";
  s << "<line x1=\"" << L << "\" y1=\"" << T << "\" x2=\"" << L << "\" y2=\"" << H - B << "\" stroke=\"black\"/>\n";
  for (int k = static_cast<int>(std::ceil(x0)); k <= static_cast<int>(std::floor(x1)); ++k)
    s << "<text x=\"" << X(k) << "\" y=\"" << H - B + 18 << "\" text-anchor=\"middle\" font-size=\"12\">1e" << k << "</text>\n";
  for (int k = static_cast<int>(std::ceil(y0)); k <= static_cast<int>(std::floor(y1)); ++k)
    s << "<text x=\"" << L - 8 << "\" y=\"" << Y(k) + 4 << "\" text-anchor=\"end\" font-size=\"12\">1e" << k << "</text>\n";
  s << "<text x=\"" << (L + W - R) / 2 << "\" y=\"" << H - 15 << "\" text-anchor=\"middle\" font-size=\"13\">" << xlabel
    << "</text>\n";
  s << "<text x=\"20\" y=\"" << (T + H - B) / 2 << "\" text-anchor=\"middle\" font-size=\"13\" transform=\"rotate(-90 20 "
    << (T + H - B) / 2 << ")\">" << ylabel << "</text>\n";
  for (std::size_t i = 0; i < lx.size(); ++i) {
    s << "<line x1=\"" << X(lx[i]) << "\" y1=\"" << Y(lo[i]) << "\" x2=\"" << X(lx[i]) << "\" y2=\"" << Y(hi[i])
      << "\" stroke=\"gray\"/>\n";
    s << "<circle cx=\"" << X(lx[i]) << "\" cy=\"" << Y(ly[i]) << "\" r=\"4\" fill=\"steelblue\"/>\n";
  }
  if (std::isfinite(fit.slope)) {
    const double a = x0 + px, b = x1 - px;
    const double ya = (fit.intercept + fit.slope * a * std::log(10.0)) / std::log(10.0);
    const double yb = (fit.intercept + fit.slope * b * std::log(10.0)) / std::log(10.0);
    s << "<line x1=\"" << X(a) << "\" y1=\"" << Y(ya) << "\" x2=\"" << X(b) << "\" y2=\"" << Y(yb)
      << "\" stroke=\"firebrick\" stroke-dasharray=\"6,4\"/>\n";
    s << "<text x=\"" << W - R - 10 << "\" y=\"" << T + 10 << "\" text-anchor=\"end\" font-size=\"13\">fitted slope "
      << fmt(fit.slope) << "</text>\n";
  }
  s << "</svg>\n";
  return s.str();
}

// ================================================================ time grids for a mass ladder

struct LadderRun {
  double mass = 0.0;
  TimeGrid grid;
  int substeps = 1;
};

// All masses share one noise resolution: the step for the smallest mass, divided by
// `noise_substeps`. Larger masses take steps that are whole multiples of it (the largest
// divisor of the common step count not exceeding their own m / (c1 lambda_max)) and draw
// their increments as sums of the same fine normals, so the ladder is run on common noise.
inline std::vector<LadderRun> underdamped_ladder(const SystemSpec& sys, const std::vector<double>& masses,
                                                 const std::vector<double>& checkpoints, double c1,
                                                 int noise_substeps) {
  if (masses.empty()) throw InvalidInput("mass ladder is empty");
  if (!(c1 > 0.0)) throw InvalidInput("dt-c1 must be positive");
  const double lam = gamma_lambda_max(sys);
  const double m_min = *std::min_element(masses.begin(), masses.end());
  const double unit = m_min / (c1 * lam);
  const TimeGrid fine = make_grid(sys.horizon, checkpoints, unit);
  long g = 0;
  for (long s : fine.steps) g = std::gcd(g, s);
  std::vector<LadderRun> out;
  for (double m : masses) {
    const long cap = std::max<long>(1, static_cast<long>(std::floor(m / (c1 * lam) / unit + 1e-9)));
    long r = 1;
    for (long d = std::min(cap, g); d >= 1; --d)
      if (g % d == 0) {
        r = d;
        break;
      }
    LadderRun run;
    run.mass = m;
    run.grid = fine;
    for (auto& s : run.grid.steps) s /= r;
    run.substeps = static_cast<int>(r) * noise_substeps;
    out.push_back(run);
  }
  return out;
}

inline TimeGrid overdamped_grid(const SystemSpec& sys, const std::vector<double>& checkpoints, double c2) {
  if (!(c2 > 0.0)) throw InvalidInput("dt-c2 must be positive");
  return make_grid(sys.horizon, checkpoints, sys.horizon / c2);
}

// ================================================================ plan

enum class ExperimentKind { verify_identities, gibbs_marginal, homogenize, anomaly_sweep, reverse_check };

inline ExperimentKind parse_kind(const std::string& s) {
  if (s == "verify-identities") return ExperimentKind::verify_identities;
  if (s == "gibbs-marginal") return ExperimentKind::gibbs_marginal;
  if (s == "homogenize") return ExperimentKind::homogenize;
  if (s == "anomaly-sweep") return ExperimentKind::anomaly_sweep;
  if (s == "reverse-check") return ExperimentKind::reverse_check;
  throw InvalidInput("unknown experiment " + s);
}

struct ExperimentPlan {
  std::string config_path;
  ExperimentKind kind = ExperimentKind::verify_identities;
  std::vector<double> masses{0.1, 0.03, 0.01};
  long paths = 20000;
  std::optional<double> s, t;  // window, defaults [0, horizon]
  double dt_c1 = 20.0;
  double dt_c2 = 4096.0;
  std::uint64_t seed = 0;
  std::string out_dir = ".";
  int workers = 1;
  bool fail_fast = false;
  int noise_substeps = 1;
  double max_excluded_fraction = 0.01;
  // verify-identities
  std::optional<std::vector<std::string>> identities;  // empty optional = all suites
  int instances = 100;
  bool inject_g_fault = false;
  // homogenize
  int rank = 2;

  double window_start() const { return s.value_or(0.0); }
  double window_end(const SystemSpec& sys) const { return t.value_or(sys.horizon); }

  void validate(const SystemSpec* sys) const {
    for (std::size_t i = 0; i < masses.size(); ++i) {
      if (!(masses[i] > 0.0) || !std::isfinite(masses[i])) throw InvalidInput("masses must be positive");
      if (i && !(masses[i] < masses[i - 1])) throw InvalidInput("mass ladder must be strictly decreasing");
    }
    if (paths < 1) throw InvalidInput("paths must be >= 1");
    if (workers < 1) throw InvalidInput("workers must be >= 1");
    if (noise_substeps < 1) throw InvalidInput("noise-substeps must be >= 1");
    if (instances < 1) throw InvalidInput("instances must be >= 1");
    if (sys) {
      const double a = window_start(), b = window_end(*sys);
      if (!(a >= 0.0 && a < b && b <= sys->horizon + 1e-12)) throw InvalidInput("window needs 0 <= s < t <= horizon");
    }
  }
};

inline EnsembleOptions ensemble_options(const ExperimentPlan& plan, std::uint64_t stream, int substeps) {
  EnsembleOptions o;
  o.seed = plan.seed;
  o.stream = stream;
  o.workers = plan.workers;
  o.fail_fast = plan.fail_fast;
  o.noise_substeps = substeps;
  return o;
}

inline void check_excluded(const EnsembleResult& r, long paths, const ExperimentPlan& plan, const std::string& what) {
  if (static_cast<double>(r.excluded) > plan.max_excluded_fraction * static_cast<double>(paths)) {
    std::string msg = what + ": " + std::to_string(r.excluded) + " of " + std::to_string(paths) + " paths diverged";
    if (!r.divergence_messages.empty()) msg += " (first: " + r.divergence_messages.front() + ")";
    throw DivergenceAbort(msg);
  }
}

// Streams: the underdamped ladder shares stream 0, overdamped runs use stream 1.
inline constexpr std::uint64_t kUnderdampedStream = 0;
inline constexpr std::uint64_t kOverdampedStream = 1;

// ================================================================ random test systems

// Random (t, q)-dependent system of dimension n with every coefficient active; psi only
// when requested and n >= 2.
inline SystemSpec random_system(int n, std::mt19937_64& rng, bool with_psi) {
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  auto vec = [&](double lo, double hi) {
    std::uniform_real_distribution<double> d(lo, hi);
    std::vector<double> v(n);
    for (auto& x : v) x = d(rng);
    return v;
  };
  auto uni = [&](double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); };
  auto plane = [&]() {
    const int a = static_cast<int>(rng() % n);
    const int b = (a + 1 + static_cast<int>(rng() % (n - 1))) % n;
    return std::vector<int>{std::min(a, b), std::max(a, b)};
  };
  nlohmann::json j;
  j["dimension"] = n;
  j["horizon"] = 1.0;
  j["beta"] = {{"family", "tanh_ramp"},
               {"params", {{"offset", 2.0}, {"amplitude", uni(0.3, 0.9)}, {"weights", vec(-1.0, 1.0)},
                           {"shift", uni(-0.3, 0.3)}, {"time_eps", uni(0.0, 0.3)}, {"time_omega", uni(0.5, 2.0)}}}};
  if (n == 1)
    j["gamma"] = {{"family", "constant"}, {"params", {{"value", uni(0.5, 2.0)}}}};
  else
    j["gamma"] = {{"family", "rotation_interp"},
                  {"params", {{"diag", vec(0.5, 2.5)}, {"plane", plane()}, {"theta0", uni(-1.0, 1.0)},
                              {"kappa", uni(0.0, 1.0)}, {"weights", vec(-0.5, 0.5)}, {"shift", uni(-0.2, 0.2)}}}};
  if (with_psi && n >= 2)
    j["psi"] = {{"family", "swirl"},
                {"params", {{"amplitude", uni(0.2, 0.8)}, {"width", uni(1.0, 2.0)}, {"plane", plane()},
                            {"time_eps", uni(0.0, 0.3)}, {"time_omega", uni(0.5, 1.5)}}}};
  j["V"] = {{"family", "harmonic"},
            {"params", {{"stiffness", vec(0.5, 1.5)}, {"center", vec(-0.3, 0.3)}, {"drive", vec(-0.2, 0.2)},
                        {"omega", uni(0.5, 1.5)}}}};
  std::vector<std::vector<double>> mat(n, std::vector<double>(n));
  for (auto& row : mat)
    for (auto& x : row) x = 0.3 * u(rng);
  j["F_ext"] = {{"family", "linear"},
                {"params", {{"matrix", mat}, {"offset", vec(-0.2, 0.2)}, {"time_eps", uni(0.0, 0.2)},
                            {"time_omega", uni(0.5, 2.0)}}}};
  return parse_system(j.dump());
}

// n = 3 uniform field B0 along q3 with scalar drag; beta and V even in q1 so the
// uniform-field involution applies.
inline SystemSpec uniform_system(double b0, double drag, std::mt19937_64& rng) {
  auto uni = [&](double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); };
  nlohmann::json j;
  j["dimension"] = 3;
  j["horizon"] = 1.0;
  j["uniform_B0"] = b0;
  j["beta"] = {{"family", "tanh_ramp"},
               {"params", {{"offset", 2.0}, {"amplitude", uni(0.3, 1.0)},
                           {"weights", std::vector<double>{0.0, uni(-1.0, 1.0), uni(-1.0, 1.0)}},
                           {"shift", uni(-0.3, 0.3)}, {"envelope", std::vector<double>{uni(0.3, 1.0), 0.0, 0.0}}}}};
  j["gamma"] = {{"family", "constant"}, {"params", {{"value", drag}}}};
  j["V"] = {{"family", "harmonic"},
            {"params", {{"stiffness", std::vector<double>{uni(0.5, 1.5), uni(0.5, 1.5), uni(0.5, 1.5)}}}}};
  return parse_system(j.dump());
}

inline Vec random_point(int n, std::mt19937_64& rng, double r = 1.0) {
  std::uniform_real_distribution<double> u(-r, r);
  Vec q(n);
  for (int i = 0; i < n; ++i) q(i) = u(rng);
  return q;
}

// ================================================================ identity suites

struct CheckRow {
  std::string name;
  double max_error = 0.0;
  double tolerance = 0.0;
  long instances = 0;
  bool passed() const { return std::isfinite(max_error) && max_error <= tolerance; }
};

inline Table check_table(const std::vector<CheckRow>& rows) {
  Table t{{"identity", "max_error", "tolerance", "instances", "result"}, {}};
  for (const auto& r : rows)
    t.add({r.name, fmt(r.max_error), fmt(r.tolerance), std::to_string(r.instances), r.passed() ? "pass" : "fail"});
  return t;
}

namespace detail {

inline double rel(double a, double b) { return std::abs(a - b) / std::max(1.0, std::abs(b)); }
inline double rel(const Mat& a, const Mat& b) {
  return (a - b).cwiseAbs().maxCoeff() / std::max(1.0, b.cwiseAbs().maxCoeff());
}

struct Accumulator {
  CheckRow row;
  Accumulator(std::string name, double tol) {
    row.name = std::move(name);
    row.tolerance = tol;
  }
  void add(double e) {
    row.max_error = std::isnan(e) ? e : (std::isnan(row.max_error) ? row.max_error : std::max(row.max_error, e));
    ++row.instances;
  }
};

}  // namespace detail

inline const std::vector<std::string>& identity_names() {
  static const std::vector<std::string> names{
      "g_trace_half_n",     "g_delta_cross",       "g_delta_first",        "lyapunov_residual",
      "cell_residual",      "anomaly_bridge",      "anomaly_psi0_forms",   "limit_psi0_forms",
      "y1_raw_vs_simplified", "y2_raw_vs_simplified", "uniform_b_scalar_reduction", "uniform_b_kernel",
      "uniform_b_nonnegative", "uniform_b_general",  "uniform_b_y1",         "uniform_b_y2"};
  return names;
}

struct IdentityOptions {
  std::uint64_t seed = 0;
  int instances = 100;
  bool inject_g_fault = false;                    // perturb one entry of G by 1e-3
  std::optional<std::vector<std::string>> select;  // empty optional = all
  const SystemSpec* extra = nullptr;               // evaluated alongside the random systems
};

inline std::vector<CheckRow> run_identity_suites(const IdentityOptions& opt) {
  for (const auto& s : opt.select.value_or(std::vector<std::string>{}))
    if (std::find(identity_names().begin(), identity_names().end(), s) == identity_names().end())
      throw InvalidInput("unknown identity " + s);
  auto wanted = [&](const std::string& name) {
    return !opt.select || std::find(opt.select->begin(), opt.select->end(), name) != opt.select->end();
  };
  auto wanted_any = [&](std::initializer_list<const char*> names) {
    for (const char* n : names)
      if (wanted(n)) return true;
    return false;
  };
  std::vector<CheckRow> out;
  const int N = opt.instances;
  auto seeded = [&](std::uint64_t suite, int k) {
    std::seed_seq seq{static_cast<std::uint32_t>(opt.seed), static_cast<std::uint32_t>(opt.seed >> 32),
                      static_cast<std::uint32_t>(suite), static_cast<std::uint32_t>(k)};
    return std::mt19937_64(seq);
  };

  if (wanted_any({"g_trace_half_n", "g_delta_cross", "g_delta_first"})) {
    detail::Accumulator a("g_trace_half_n", 1e-10), b("g_delta_cross", 1e-10), c("g_delta_first", 1e-10);
    for (int k = 0; k < N; ++k) {
      auto rng = seeded(1, k);
      const int n = 1 + k % 4;
      const Eigen::MatrixXd gt = random_gamma_tilde(n, rng);
      Eigen::MatrixXd g = TripleExpIntegral(gt).matrix();
      if (opt.inject_g_fault) g(0, 0) += 1e-3;
      const GContractions r = g_contractions(g, gt);
      const Eigen::MatrixXd id = Eigen::MatrixXd::Identity(n, n);
      a.add((r.a - 0.5 * n * id).cwiseAbs().maxCoeff());
      b.add((r.b - id).cwiseAbs().maxCoeff());
      c.add((r.c - id).cwiseAbs().maxCoeff());
    }
    for (auto* x : {&a, &b, &c})
      if (wanted(x->row.name)) out.push_back(x->row);
  }

  if (wanted("lyapunov_residual")) {
    detail::Accumulator a("lyapunov_residual", 1e-10);
    for (int k = 0; k < N; ++k) {
      auto rng = seeded(2, k);
      const int n = 1 + k % 4, rank = 1 + (k / 4) % 4;
      const Eigen::MatrixXd c = -random_gamma_tilde(n, rng);
      MultilinearTensor b(n, rank);
      std::normal_distribution<double> nd;
      for (std::size_t f = 0; f < b.size(); ++f) b[f] = nd(rng);
      const MultilinearTensor x = lyapunov_multilinear(c, b);
      MultilinearTensor lhs(n, rank);
      for (int s = 0; s < rank; ++s) lhs += MultilinearTensor(n, rank, detail::mode_product(x.data(), n, rank, s, c));
      lhs += b;
      a.add(lhs.max_abs() / std::max(1.0, b.max_abs()));
    }
    out.push_back(a.row);
  }

  if (wanted("cell_residual")) {
    // residual scaled by (1 + |B| |z|_max^k), the natural size of the source at the sample points
    detail::Accumulator a("cell_residual", 1e-9);
    for (int k = 0; k < N; ++k) {
      auto rng = seeded(3, k);
      const int n = 1 + k % 4, rank = 1 + (k / 4) % 5;
      const double beta = 0.5 + 3.5 * std::uniform_real_distribution<double>(0.0, 1.0)(rng);
      const Eigen::MatrixXd gt = random_gamma_tilde(n, rng);
      MultilinearTensor b(n, rank);
      std::normal_distribution<double> nd;
      for (std::size_t f = 0; f < b.size(); ++f) b[f] = nd(rng);
      const CellSolution chi = solve_cell(beta, gt, b);
      const double zmax = 6.0 / std::sqrt(beta);
      const double scale = 1.0 + b.norm() * std::pow(zmax * std::sqrt(n), rank);
      a.add(verify_residual(chi, 100, opt.seed + static_cast<std::uint64_t>(k)) / scale);
    }
    out.push_back(a.row);
  }

  if (wanted("anomaly_bridge")) {
    detail::Accumulator a("anomaly_bridge", 1e-10);
    for (int k = 0; k < N; ++k) {
      auto rng = seeded(4, k);
      const Eigen::MatrixXd g = random_spd(1 + k % 4, rng);
      a.add(detail::rel(anomaly_kernel_psi0(g), anomaly_kernel_eigen(g)));
    }
    out.push_back(a.row);
  }

  if (wanted_any({"anomaly_psi0_forms", "limit_psi0_forms"})) {
    detail::Accumulator a("anomaly_psi0_forms", 1e-9), l("limit_psi0_forms", 1e-9);
    auto visit = [&](const SystemSpec& sys, std::mt19937_64& rng) {
      const double t = std::uniform_real_distribution<double>(0.0, sys.horizon)(rng);
      const DerivativeBundle b = evaluate_bundle(sys, t, random_point(sys.dimension, rng));
      const double g = anomaly_general(b);
      a.add(std::max(detail::rel(anomaly_psi0(b), g), detail::rel(anomaly_eigen(b), g)));
      const double full = force_term(b) + divergence_term(b) + g;
      const double psi0 = force_term_psi0(b) + divergence_term_psi0(b) + anomaly_psi0(b);
      l.add(detail::rel(psi0, full));
    };
    for (int k = 0; k < N; ++k) {
      auto rng = seeded(5, k);
      const SystemSpec sys = random_system(1 + k % 4, rng, false);
      visit(sys, rng);
    }
    if (opt.extra && opt.extra->psi_zero()) {
      auto rng = seeded(105, 0);
      for (int k = 0; k < N; ++k) visit(*opt.extra, rng);
    }
    for (auto* x : {&a, &l})
      if (wanted(x->row.name)) out.push_back(x->row);
  }

  if (wanted_any({"y1_raw_vs_simplified", "y2_raw_vs_simplified"})) {
    detail::Accumulator a("y1_raw_vs_simplified", 1e-9), c("y2_raw_vs_simplified", 1e-9);
    auto visit = [&](const SystemSpec& sys, std::mt19937_64& rng) {
      const double t = std::uniform_real_distribution<double>(0.0, sys.horizon)(rng);
      const DerivativeBundle b = evaluate_bundle(sys, t, random_point(sys.dimension, rng));
      const GDerivativeSet gd = g_derivative_set(b);
      a.add(detail::rel(Mat(y1_raw(b, gd.at)), Mat(y1_simplified(b))));
      c.add(detail::rel(y2_raw(b, gd), y2_simplified(b, gd.at)));
    };
    for (int k = 0; k < N; ++k) {
      auto rng = seeded(6, k);
      const SystemSpec sys = random_system(1 + k % 4, rng, true);
      visit(sys, rng);
    }
    if (opt.extra) {
      auto rng = seeded(106, 0);
      for (int k = 0; k < N; ++k) visit(*opt.extra, rng);
    }
    for (auto* x : {&a, &c})
      if (wanted(x->row.name)) out.push_back(x->row);
  }

  if (wanted_any({"uniform_b_scalar_reduction", "uniform_b_kernel", "uniform_b_nonnegative", "uniform_b_general",
                  "uniform_b_y1", "uniform_b_y2"})) {
    detail::Accumulator red("uniform_b_scalar_reduction", 1e-12), ker("uniform_b_kernel", 1e-12),
        neg("uniform_b_nonnegative", 0.0), gen("uniform_b_general", 1e-9), y1("uniform_b_y1", 1e-9),
        y2("uniform_b_y2", 1e-9);
    for (int k = 0; k < N; ++k) {
      auto rng = seeded(7, k);
      const double drag = std::uniform_real_distribution<double>(0.5, 2.0)(rng);
      const double b0 = std::uniform_real_distribution<double>(-2.0, 2.0)(rng);
      const Vec q = random_point(3, rng, 1.5);
      {
        const SystemSpec sys = uniform_system(0.0, drag, rng);
        const DerivativeBundle b = evaluate_bundle(sys, 0.3, q);
        red.add(detail::rel(anomaly_uniform_b(b), anomaly_scalar(b)));
      }
      {
        const SystemSpec sys = uniform_system(1.0, 1.0, rng);
        const DerivativeBundle b = evaluate_bundle(sys, 0.3, q);
        const Vec k3 = (Vec(3) << 0.3, 0.3, 1.0 / 3.0).finished();
        const double want = 2.5 * b.grad_beta.dot(k3.asDiagonal() * b.grad_beta) / std::pow(b.beta, 3);
        ker.add(detail::rel(anomaly_uniform_b(b), want));
        neg.add(std::max(0.0, -anomaly_uniform_b(b)));
      }
      {
        const SystemSpec sys = uniform_system(b0, drag, rng);
        const DerivativeBundle b = evaluate_bundle(sys, 0.3, q);
        gen.add(detail::rel(anomaly_general(b), anomaly_uniform_b(b)));
        neg.add(std::max(0.0, -anomaly_uniform_b(b)));
        const GDerivativeSet gd = g_derivative_set(b);
        y1.add(detail::rel(Mat(y1_uniform_b(b)), Mat(y1_raw(b, gd.at))));
        y2.add(detail::rel(y2_uniform_b(b), y2_raw(b, gd)));
      }
    }
    for (auto* x : {&red, &ker, &neg, &gen, &y1, &y2})
      if (wanted(x->row.name)) out.push_back(x->row);
  }
  return out;
}

// ================================================================ reversal checks

// Drift of the (q, p) system with p = m v + psi, split into the dissipative part
// b_plus = -Gamma grad H and the conservative part b_minus = Pi grad H + (0, F_ext).
struct PhaseDrift {
  Vec q_plus, p_plus, q_minus, p_minus;
};

inline PhaseDrift phase_split(const DerivativeBundle& b, const Vec& p, double m) {
  const Vec u = p - b.psi;
  const Vec dp_h = u / m;                                 // dH/dp
  const Vec dq_h = b.grad_V - b.jac_psi * u / m;          // dH/dq
  PhaseDrift d;
  d.q_plus = Vec::Zero(b.n);
  d.p_plus = -b.gamma * dp_h;
  d.q_minus = dp_h;
  d.p_minus = -dq_h + b.F_ext;
  return d;
}

// The same drift written in terms of gamma_tilde and the total force F.
inline std::pair<Vec, Vec> phase_drift(const DerivativeBundle& b, const Vec& p, double m) {
  const Vec u = p - b.psi;
  return {u / m, -b.gamma_tilde * u / m + b.F + b.dt_psi + b.jac_psi.transpose() * u / m};
}

struct ReverseOptions {
  std::uint64_t seed = 0;
  int instances = 100;
  const SystemSpec* extra = nullptr;
};

inline std::vector<CheckRow> run_reverse_checks(const ReverseOptions& opt) {
  detail::Accumulator sum("split_sum", 1e-12), std_even("standard_even_part", 1e-12),
      std_odd("standard_odd_part", 1e-12), uni_even("uniform_even_part", 1e-12), uni_odd("uniform_odd_part", 1e-12),
      uni_gt("uniform_gamma_tilde_preserved", 1e-12), od("overdamped_b_hat_plus", 1e-9);
  auto seeded = [&](std::uint64_t suite, int k) {
    std::seed_seq seq{static_cast<std::uint32_t>(opt.seed), static_cast<std::uint32_t>(opt.seed >> 32),
                      static_cast<std::uint32_t>(suite), static_cast<std::uint32_t>(k)};
    return std::mt19937_64(seq);
  };
  auto vrel = [](const Vec& a, const Vec& b) {
    return (a - b).cwiseAbs().maxCoeff() / std::max(1.0, b.cwiseAbs().maxCoeff());
  };
  // eps = (rq, rp) acting diagonally on (q, p)
  auto check = [&](const SystemSpec& sys, std::mt19937_64& rng, Involution inv, detail::Accumulator& even,
                   detail::Accumulator& odd) {
    const int n = sys.dimension;
    const double T = sys.horizon;
    const SystemSpec rev = reverse_system(sys, T, inv);
    Vec rq = Vec::Ones(n), rp = -Vec::Ones(n);
    if (inv == Involution::uniform_B) {
      rq(0) = -1.0;
      rp = -rq;
    }
    const double t = std::uniform_real_distribution<double>(0.0, T)(rng);
    const double m = std::uniform_real_distribution<double>(0.05, 1.0)(rng);
    const Vec q = random_point(n, rng), p = random_point(n, rng, 2.0);
    const DerivativeBundle b = evaluate_bundle(sys, t, q, BundleDetail::full);
    const DerivativeBundle br = evaluate_bundle(rev, T - t, rq.cwiseProduct(q), BundleDetail::full);
    const PhaseDrift d = phase_split(b, p, m);
    const PhaseDrift dr = phase_split(br, rp.cwiseProduct(p), m);
    const auto full = phase_drift(b, p, m);
    sum.add(std::max(vrel(d.q_plus + d.q_minus, full.first), vrel(d.p_plus + d.p_minus, full.second)));
    even.add(std::max(vrel(dr.q_plus, rq.cwiseProduct(d.q_plus)), vrel(dr.p_plus, rp.cwiseProduct(d.p_plus))));
    odd.add(std::max(vrel(dr.q_minus, -rq.cwiseProduct(d.q_minus)), vrel(dr.p_minus, -rp.cwiseProduct(d.p_minus))));
    if (inv == Involution::uniform_B) uni_gt.add(detail::rel(Mat(br.gamma_tilde), Mat(b.gamma_tilde)));
    od.add(vrel(b_hat_plus(b), b_hat_plus_definition(b, inv)));
  };
  for (int k = 0; k < opt.instances; ++k) {
    auto rng = seeded(11, k);
    const SystemSpec sys = random_system(1 + k % 4, rng, true);
    check(sys, rng, Involution::standard, std_even, std_odd);
    const SystemSpec uni = uniform_system(std::uniform_real_distribution<double>(-2.0, 2.0)(rng),
                                          std::uniform_real_distribution<double>(0.5, 2.0)(rng), rng);
    check(uni, rng, Involution::uniform_B, uni_even, uni_odd);
  }
  if (opt.extra) {
    auto rng = seeded(111, 0);
    const bool uniform_ok = opt.extra->uniform_B0 && validate_assumptions(*opt.extra).passed;
    for (int k = 0; k < opt.instances; ++k) {
      check(*opt.extra, rng, Involution::standard, std_even, std_odd);
      if (uniform_ok) check(*opt.extra, rng, Involution::uniform_B, uni_even, uni_odd);
    }
  }
  return {sum.row, std_even.row, std_odd.row, uni_even.row, uni_odd.row, uni_gt.row, od.row};
}

// ================================================================ Monte Carlo experiments

struct GibbsRow {
  double mass, estimate, stderr, target;
  long excluded;
};

inline std::vector<GibbsRow> run_gibbs_marginal(const SystemSpec& sys, const ExperimentPlan& plan) {
  plan.validate(&sys);
  std::vector<GibbsRow> rows;
  for (const LadderRun& run : underdamped_ladder(sys, plan.masses, {}, plan.dt_c1, plan.noise_substeps)) {
    UnderdampedObservables what;
    what.entropy = false;
    what.gibbs = true;
    UnderdampedEntropyObserver obs(sys, run.mass, 0.0, sys.horizon, what);
    const EnsembleResult r = simulate_underdamped(sys, run.mass, plan.paths, run.grid, obs,
                                                  ensemble_options(plan, kUnderdampedStream, run.substeps));
    check_excluded(r, plan.paths, plan, "gibbs-marginal m=" + fmt(run.mass));
    rows.push_back({run.mass, r.stats.mean("beta_z2_T"), r.stats.stderr_of("beta_z2_T"),
                    static_cast<double>(sys.dimension), r.excluded});
  }
  return rows;
}

inline Table gibbs_table(const std::vector<GibbsRow>& rows) {
  Table t{{"m", "estimate", "stderr", "target", "z_score", "excluded"}, {}};
  for (const auto& r : rows)
    t.add({fmt(r.mass), fmt(r.estimate), fmt(r.stderr), fmt(r.target),
           fmt(r.stderr > 0 ? (r.estimate - r.target) / r.stderr : 0.0), std::to_string(r.excluded)});
  return t;
}

// Rank-2 identity, or for rank 3 the entropy source (1/2) delta (x) grad(beta).
inline TensorField homogenization_field(const SystemSpec& sys, int rank) {
  const int n = sys.dimension;
  if (rank == 2) return [n](double, const Vec&) { return MultilinearTensor::identity(n); };
  if (rank == 3)
    return [&sys, n](double t, const Vec& q) {
      const DerivativeBundle b = evaluate_bundle(sys, t, q, BundleDetail::kinetic);
      MultilinearTensor m(n, 3);
      for (int i = 0; i < n; ++i)
        for (int k = 0; k < n; ++k) m.at({i, i, k}) = 0.5 * b.grad_beta(k);
      return m;
    };
  throw InvalidInput("homogenize supports rank 2 or 3");
}

struct HomogenizeRow {
  double mass, estimate, stderr, limit, limit_stderr, gap, gap_stderr;
  long excluded;
};

// Even rank: E[J^m] against the Gibbs-averaged limit. Odd rank: m^{-1/2} E[J^m].
inline std::vector<HomogenizeRow> run_homogenize(const SystemSpec& sys, const ExperimentPlan& plan) {
  plan.validate(&sys);
  const double s = plan.window_start(), t = plan.window_end(sys);
  const TensorField field = homogenization_field(sys, plan.rank);
  OverdampedObservables what;
  what.entropy = false;
  what.homogenize = field;
  what.homogenize_rank = plan.rank;
  OverdampedEntropyObserver oobs(sys, s, t, what);
  const EnsembleResult lim = simulate_overdamped(sys, plan.paths, overdamped_grid(sys, {s, t}, plan.dt_c2), oobs,
                                                 ensemble_options(plan, kOverdampedStream, plan.noise_substeps));
  check_excluded(lim, plan.paths, plan, "homogenize limit");
  const double L = lim.stats.mean("J_limit"), Lse = lim.stats.stderr_of("J_limit");
  std::vector<HomogenizeRow> rows;
  for (const LadderRun& run : underdamped_ladder(sys, plan.masses, {s, t}, plan.dt_c1, plan.noise_substeps)) {
    UnderdampedObservables uw;
    uw.entropy = false;
    uw.homogenize = field;
    UnderdampedEntropyObserver obs(sys, run.mass, s, t, uw);
    const EnsembleResult r = simulate_underdamped(sys, run.mass, plan.paths, run.grid, obs,
                                                  ensemble_options(plan, kUnderdampedStream, run.substeps));
    check_excluded(r, plan.paths, plan, "homogenize m=" + fmt(run.mass));
    const double scale = plan.rank % 2 ? 1.0 / std::sqrt(run.mass) : 1.0;
    const double e = scale * r.stats.mean("J"), se = scale * r.stats.stderr_of("J");
    rows.push_back({run.mass, e, se, L, Lse, e - L, std::hypot(se, Lse), r.excluded});
  }
  return rows;
}

inline Table homogenize_table(const std::vector<HomogenizeRow>& rows) {
  Table t{{"m", "estimate", "stderr", "limit", "limit_stderr", "gap", "gap_stderr", "excluded"}, {}};
  for (const auto& r : rows)
    t.add({fmt(r.mass), fmt(r.estimate), fmt(r.stderr), fmt(r.limit), fmt(r.limit_stderr), fmt(r.gap),
           fmt(r.gap_stderr), std::to_string(r.excluded)});
  return t;
}

// One row per mass. `stderr` is the combined standard error of `gap` = estimate - limit.
struct SweepRow {
  double m, estimate, stderr, limit, anomaly_prediction, gap;
  long excluded;
};

// Per-mass detail for the anomaly relation:
//   anomaly_gap = E[S_env^m] - E[S_env,0] - (n/2) E[ln(beta_t / beta_s)]
// compared with the predicted anomaly integral.
struct AnomalyRow {
  double m, s_env, s_env_stderr, s_env0_corrected, s_env0_corrected_stderr, anomaly_gap, anomaly_gap_stderr,
      prediction, prediction_stderr;
};

struct SweepResult {
  std::vector<SweepRow> rows;
  std::vector<AnomalyRow> anomaly;
  PathEnsembleStats overdamped;  // every overdamped observable
  long overdamped_excluded = 0;
  LogFit fit;                    // |gap| against m
  LogFit anomaly_fit;            // |anomaly_gap - prediction| against m
};

inline SweepResult run_anomaly_sweep(const SystemSpec& sys, const ExperimentPlan& plan) {
  plan.validate(&sys);
  const double s = plan.window_start(), t = plan.window_end(sys);
  SweepResult res;
  OverdampedEntropyObserver oobs(sys, s, t, {});
  const EnsembleResult od = simulate_overdamped(sys, plan.paths, overdamped_grid(sys, {s, t}, plan.dt_c2), oobs,
                                                ensemble_options(plan, kOverdampedStream, plan.noise_substeps));
  check_excluded(od, plan.paths, plan, "anomaly-sweep overdamped");
  res.overdamped = od.stats;
  res.overdamped_excluded = od.excluded;
  const auto& o = od.stats;
  const double limit = o.mean("limit"), limit_se = o.stderr_of("limit");
  const double pred = o.mean("anomaly"), pred_se = o.stderr_of("anomaly");
  const double corr = o.mean("S_env0_half_n_log"), corr_se = o.stderr_of("S_env0_half_n_log");
  for (const LadderRun& run : underdamped_ladder(sys, plan.masses, {s, t}, plan.dt_c1, plan.noise_substeps)) {
    UnderdampedEntropyObserver obs(sys, run.mass, s, t, {});
    const EnsembleResult r = simulate_underdamped(sys, run.mass, plan.paths, run.grid, obs,
                                                  ensemble_options(plan, kUnderdampedStream, run.substeps));
    check_excluded(r, plan.paths, plan, "anomaly-sweep m=" + fmt(run.mass));
    const double e = r.stats.mean("S_env"), se = r.stats.stderr_of("S_env");
    res.rows.push_back({run.mass, e, std::hypot(se, limit_se), limit, pred, e - limit, r.excluded});
    res.anomaly.push_back({run.mass, e, se, corr, corr_se, e - corr, std::hypot(se, corr_se), pred, pred_se});
  }
  std::vector<double> ms, gaps, agaps;
  for (std::size_t i = 0; i < res.rows.size(); ++i) {
    ms.push_back(res.rows[i].m);
    gaps.push_back(res.rows[i].gap);
    agaps.push_back(res.anomaly[i].anomaly_gap - res.anomaly[i].prediction);
  }
  res.fit = fit_loglog(ms, gaps);
  res.anomaly_fit = fit_loglog(ms, agaps);
  return res;
}

inline Table sweep_table(const std::vector<SweepRow>& rows) {
  Table t{{"m", "estimate", "stderr", "limit", "anomaly_prediction", "gap", "excluded"}, {}};
  for (const auto& r : rows)
    t.add({fmt(r.m), fmt(r.estimate), fmt(r.stderr), fmt(r.limit), fmt(r.anomaly_prediction), fmt(r.gap),
           std::to_string(r.excluded)});
  return t;
}

inline Table anomaly_table(const std::vector<AnomalyRow>& rows) {
  Table t{{"m", "S_env", "S_env_stderr", "S_env0_plus_half_n_log", "S_env0_plus_half_n_log_stderr", "anomaly_gap",
           "anomaly_gap_stderr", "prediction", "prediction_stderr"},
          {}};
  for (const auto& r : rows)
    t.add({fmt(r.m), fmt(r.s_env), fmt(r.s_env_stderr), fmt(r.s_env0_corrected), fmt(r.s_env0_corrected_stderr),
           fmt(r.anomaly_gap), fmt(r.anomaly_gap_stderr), fmt(r.prediction), fmt(r.prediction_stderr)});
  return t;
}

inline Table stats_table(const PathEnsembleStats& st) {
  Table t{{"observable", "mean", "stderr", "min", "max", "count"}, {}};
  for (const auto& name : st.names())
    t.add({name, fmt(st.mean(name)), fmt(st.stderr_of(name)), fmt(st.min(name)), fmt(st.max(name)),
           std::to_string(st.count())});
  return t;
}

}  // namespace kramers
