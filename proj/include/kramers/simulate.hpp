#pragma once

#include <Eigen/Cholesky>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <functional>
#include <memory>
#include <mutex>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "kramers/errors.hpp"
#include "kramers/matrixfun.hpp"
#include "kramers/random.hpp"
#include "kramers/stats.hpp"
#include "kramers/system.hpp"

namespace kramers {

// Underdamped state in the scaled velocity z = u / sqrt(m).
struct UnderdampedState {
  double t = 0.0;
  Vec q;
  Vec z;
};

struct OverdampedState {
  double t = 0.0;
  Vec q;
};

enum class Convention { ito, stratonovich };
enum class UnderdampedScheme { exact_ou, euler_maruyama };

inline constexpr double kDivergenceBound = 1e8;

namespace detail {

inline bool sane(const Vec& v) { return v.allFinite() && v.cwiseAbs().maxCoeff() < kDivergenceBound; }

}  // namespace detail

// One step of the underdamped dynamics. The default scheme freezes the coefficients at
// the start of the step and integrates the resulting Ornstein-Uhlenbeck process for z
// exactly; q then moves with the average of the old and new z. With noise_substeps r > 1
// the Gaussian increment is assembled from r sub-increments of length h/r, which gives
// the same law but lets runs at h and h/r share their randomness.
class UnderdampedStepper {
 public:
  UnderdampedStepper(const SystemSpec& sys, double mass, UnderdampedScheme scheme = UnderdampedScheme::exact_ou,
                     int noise_substeps = 1)
      : sys_(&sys), m_(mass), sqrt_m_(std::sqrt(mass)), scheme_(scheme), substeps_(noise_substeps),
        constant_(sys.gamma_tilde_constant()) {
    if (!(mass > 0.0) || !std::isfinite(mass)) throw InvalidInput("mass must be positive");
    if (noise_substeps < 1) throw InvalidInput("noise_substeps must be >= 1");
  }

  double mass() const { return m_; }

  UnderdampedState step(const UnderdampedState& s, const DerivativeBundle& b, double h, RngStream& rng) {
    const int n = static_cast<int>(s.q.size());
    UnderdampedState out;
    out.t = s.t + h;
    if (scheme_ == UnderdampedScheme::euler_maruyama) {
      const Mat sigma = derive_sigma(Mat((2.0 / b.beta) * b.gamma)).sigma;
      Vec dw = Vec::Zero(n);
      const double sh = std::sqrt(h / substeps_);
      for (int r = 0; r < substeps_; ++r) dw += sh * rng.normal_vector(n);
      out.z = s.z + (-b.gamma_tilde * s.z / m_ + b.F / sqrt_m_) * h + sigma * dw / sqrt_m_;
      out.q = s.q + s.z * (h / sqrt_m_);
    } else {
      const OuCoefficients& c = coefficients(b, h);
      Vec noise = Vec::Zero(n);
      for (int r = 0; r < substeps_; ++r) noise = c.e_sub * noise + c.l_sub * rng.normal_vector(n);
      out.z = c.e * s.z + c.phi * (b.F / sqrt_m_) + noise / std::sqrt(b.beta);
      out.q = s.q + 0.5 * (s.z + out.z) * (h / sqrt_m_);
    }
    if (!detail::sane(out.q) || !detail::sane(out.z))
      throw DivergenceError("underdamped state diverged", static_cast<long>(rng.path()), s.t);
    return out;
  }

 private:
  struct OuCoefficients {
    double h = -1.0;
    Mat e, phi, e_sub, l_sub;
  };

  OuCoefficients build(const Mat& gamma_tilde, double h) const {
    const int n = static_cast<int>(gamma_tilde.rows());
    OuCoefficients c;
    c.h = h;
    const Eigen::MatrixXd a = gamma_tilde / m_;
    c.e = mat_exp(a, -h);
    c.phi = a.partialPivLu().solve(Eigen::MatrixXd::Identity(n, n) - Eigen::MatrixXd(c.e));
    const double hs = h / substeps_;
    c.e_sub = substeps_ == 1 ? c.e : Mat(mat_exp(a, -hs));
    const Mat cov = Mat::Identity(n, n) - c.e_sub * c.e_sub.transpose();
    Eigen::LLT<Mat> llt(0.5 * (cov + cov.transpose()));
    if (llt.info() != Eigen::Success) throw SpectralError("Ornstein-Uhlenbeck covariance is not positive definite");
    c.l_sub = llt.matrixL();
    return c;
  }

  const OuCoefficients& coefficients(const DerivativeBundle& b, double h) {
    if (!constant_) {
      scratch_ = build(b.gamma_tilde, h);
      return scratch_;
    }
    for (const auto& c : cache_)
      if (c.h == h) return c;
    if (cache_.size() >= 8) cache_.erase(cache_.begin());
    cache_.push_back(build(b.gamma_tilde, h));
    return cache_.back();
  }

  const SystemSpec* sys_;
  double m_, sqrt_m_;
  UnderdampedScheme scheme_;
  int substeps_;
  bool constant_;
  std::vector<OuCoefficients> cache_;
  OuCoefficients scratch_;
};

// Euler-Maruyama for the Ito form, Heun predictor-corrector for the Stratonovich form.
class OverdampedStepper {
 public:
  OverdampedStepper(const SystemSpec& sys, Convention conv, int noise_substeps = 1)
      : sys_(&sys), conv_(conv), substeps_(noise_substeps) {
    if (noise_substeps < 1) throw InvalidInput("noise_substeps must be >= 1");
  }

  Convention convention() const { return conv_; }

  Vec drift(const DerivativeBundle& b) const {
    const Vec base = b.gamma_tilde_inv * b.F;
    return conv_ == Convention::ito ? Vec(base + noise_induced_drift_ito(b)) : Vec(base + noise_induced_drift_strat(b));
  }

  // b must be a full bundle at (s.t, s.q).
  OverdampedState step(const OverdampedState& s, const DerivativeBundle& b, double h, RngStream& rng,
                       Vec* dw_out = nullptr) const {
    const int n = static_cast<int>(s.q.size());
    Vec dw = Vec::Zero(n);
    const double sh = std::sqrt(h / substeps_);
    for (int r = 0; r < substeps_; ++r) dw += sh * rng.normal_vector(n);
    const Mat g0 = b.gamma_tilde_inv * b.sigma;
    const Vec a0 = drift(b);
    OverdampedState out;
    out.t = s.t + h;
    out.q = s.q + a0 * h + g0 * dw;
    if (conv_ == Convention::stratonovich && detail::sane(out.q)) {
      const DerivativeBundle bp = evaluate_bundle(*sys_, out.t, out.q, BundleDetail::full);
      const Vec a1 = drift(bp);
      const Mat g1 = bp.gamma_tilde_inv * bp.sigma;
      out.q = s.q + 0.5 * (a0 + a1) * h + 0.5 * (g0 + g1) * dw;
    }
    if (!detail::sane(out.q)) throw DivergenceError("overdamped state diverged", static_cast<long>(rng.path()), s.t);
    if (dw_out) *dw_out = dw;
    return out;
  }

 private:
  const SystemSpec* sys_;
  Convention conv_;
  int substeps_;
};

// ------------------------------------------------------------ time grids

// Piecewise uniform grid: segment i runs from knots[i] to knots[i+1] in steps[i] equal steps.
struct TimeGrid {
  std::vector<double> knots;
  std::vector<long> steps;

  long total_steps() const {
    long s = 0;
    for (long x : steps) s += x;
    return s;
  }
};

// Knots are 0, the interior checkpoints, and the horizon; each segment gets the fewest
// equal steps not exceeding dt_target, multiplied by `refine`.
inline TimeGrid make_grid(double horizon, std::vector<double> checkpoints, double dt_target, long refine = 1) {
  if (!(dt_target > 0.0)) throw InvalidInput("step size must be positive");
  if (refine < 1) throw InvalidInput("refine must be >= 1");
  TimeGrid g;
  checkpoints.push_back(0.0);
  checkpoints.push_back(horizon);
  std::sort(checkpoints.begin(), checkpoints.end());
  for (double c : checkpoints) {
    if (c < 0.0 || c > horizon) throw InvalidInput("checkpoint outside [0, horizon]");
    if (g.knots.empty() || c > g.knots.back() + 1e-12) g.knots.push_back(c);
  }
  for (std::size_t i = 0; i + 1 < g.knots.size(); ++i) {
    const double len = g.knots[i + 1] - g.knots[i];
    g.steps.push_back(refine * std::max<long>(1, static_cast<long>(std::ceil(len / dt_target - 1e-9))));
  }
  return g;
}

// ------------------------------------------------------------ observers

class UnderdampedObserver {
 public:
  virtual ~UnderdampedObserver() = default;
  virtual std::vector<std::string> names() const = 0;
  virtual void start(long path, const UnderdampedState& s, const DerivativeBundle& b) = 0;
  virtual void advance(const UnderdampedState& a, const DerivativeBundle& ba, const UnderdampedState& c,
                       const DerivativeBundle& bc) = 0;
  virtual void finish(std::vector<double>& out) = 0;
  virtual std::unique_ptr<UnderdampedObserver> clone() const = 0;
};

class OverdampedObserver {
 public:
  virtual ~OverdampedObserver() = default;
  virtual std::vector<std::string> names() const = 0;
  virtual void start(long path, const OverdampedState& s, const DerivativeBundle& b) = 0;
  virtual void advance(const OverdampedState& a, const DerivativeBundle& ba, const OverdampedState& c,
                       const DerivativeBundle& bc, const Vec& dw) = 0;
  virtual void finish(std::vector<double>& out) = 0;
  virtual std::unique_ptr<OverdampedObserver> clone() const = 0;
};

struct EnsembleOptions {
  std::uint64_t seed = 0;
  std::uint64_t stream = 0;
  int workers = 1;
  bool fail_fast = false;
  int noise_substeps = 1;
  UnderdampedScheme scheme = UnderdampedScheme::exact_ou;
  Convention convention = Convention::stratonovich;
};

struct EnsembleResult {
  PathEnsembleStats stats;
  long excluded = 0;
  std::vector<std::string> divergence_messages;
};

namespace detail {

inline Vec draw_initial(const SystemSpec& sys, RngStream& rng) {
  Vec q = sys.initial_mean();
  if (sys.initial.kind == InitialCondition::Kind::gaussian)
    for (int i = 0; i < sys.dimension; ++i) q(i) += sys.initial.stddev(i) * rng.normal();
  return q;
}

// Runs `body(path, out)` for each path on `workers` threads, then folds results in path order.
template <class Body>
EnsembleResult run_paths(long paths, const std::vector<std::string>& names, const EnsembleOptions& opt, Body body) {
  if (paths < 1) throw InvalidInput("ensemble needs at least one path");
  const int workers = std::max(1, std::min<int>(opt.workers, static_cast<int>(paths)));
  std::vector<std::vector<double>> results(static_cast<std::size_t>(paths));
  std::vector<char> failed(static_cast<std::size_t>(paths), 0);
  std::vector<std::string> messages(static_cast<std::size_t>(paths));
  std::atomic<bool> abort{false};
  std::mutex err_mutex;
  std::exception_ptr first_error;

  auto work = [&](int w) {
    const long lo = paths * w / workers;
    const long hi = paths * (w + 1) / workers;
    try {
      auto runner = body();
      for (long p = lo; p < hi && !abort.load(); ++p) {
        try {
          runner(p, results[static_cast<std::size_t>(p)]);
        } catch (const DivergenceError& e) {
          if (opt.fail_fast) throw;
          failed[static_cast<std::size_t>(p)] = 1;
          messages[static_cast<std::size_t>(p)] = e.what();
        }
      }
    } catch (...) {
      std::lock_guard<std::mutex> lock(err_mutex);
      if (!first_error) first_error = std::current_exception();
      abort = true;
    }
  };
  if (workers == 1) {
    work(0);
  } else {
    std::vector<std::thread> threads;
    for (int w = 0; w < workers; ++w) threads.emplace_back(work, w);
    for (auto& t : threads) t.join();
  }
  if (first_error) std::rethrow_exception(first_error);

  EnsembleResult res{PathEnsembleStats(names), 0, {}};
  for (long p = 0; p < paths; ++p) {
    if (failed[static_cast<std::size_t>(p)]) {
      ++res.excluded;
      if (res.divergence_messages.size() < 10)
        res.divergence_messages.push_back("path " + std::to_string(p) + ": " + messages[static_cast<std::size_t>(p)]);
      continue;
    }
    res.stats.add(results[static_cast<std::size_t>(p)]);
  }
  return res;
}

}  // namespace detail

// Underdamped ensemble started from q0 ~ initial law and z0 from the local Gibbs law.
inline EnsembleResult simulate_underdamped(const SystemSpec& sys, double mass, long paths, const TimeGrid& grid,
                                           const UnderdampedObserver& proto, const EnsembleOptions& opt) {
  check_system(sys);
  const auto names = proto.names();
  return detail::run_paths(paths, names, opt, [&]() {
    auto obs = std::shared_ptr<UnderdampedObserver>(proto.clone());
    auto stepper = std::make_shared<UnderdampedStepper>(sys, mass, opt.scheme, opt.noise_substeps);
    return [&sys, &grid, &opt, obs, stepper](long p, std::vector<double>& out) {
      RngStream rng(opt.seed, opt.stream, static_cast<std::uint64_t>(p));
      UnderdampedState s;
      s.t = grid.knots.front();
      s.q = detail::draw_initial(sys, rng);
      DerivativeBundle b0, b1;
      DerivativeBundle* b = &b0;
      DerivativeBundle* bc = &b1;
      evaluate_bundle_into(*b, sys, s.t, s.q, BundleDetail::kinetic);
      s.z = rng.normal_vector(sys.dimension) / std::sqrt(b->beta);
      obs->start(p, s, *b);
      for (std::size_t seg = 0; seg < grid.steps.size(); ++seg) {
        const double t0 = grid.knots[seg];
        const double h = (grid.knots[seg + 1] - t0) / static_cast<double>(grid.steps[seg]);
        for (long k = 0; k < grid.steps[seg]; ++k) {
          UnderdampedState c = stepper->step(s, *b, h, rng);
          c.t = k + 1 == grid.steps[seg] ? grid.knots[seg + 1] : t0 + (k + 1) * h;
          evaluate_bundle_into(*bc, sys, c.t, c.q, BundleDetail::kinetic);
          obs->advance(s, *b, c, *bc);
          s = std::move(c);
          std::swap(b, bc);
        }
      }
      obs->finish(out);
    };
  });
}

inline EnsembleResult simulate_overdamped(const SystemSpec& sys, long paths, const TimeGrid& grid,
                                          const OverdampedObserver& proto, const EnsembleOptions& opt) {
  check_system(sys);
  const auto names = proto.names();
  return detail::run_paths(paths, names, opt, [&]() {
    auto obs = std::shared_ptr<OverdampedObserver>(proto.clone());
    auto stepper = std::make_shared<OverdampedStepper>(sys, opt.convention, opt.noise_substeps);
    return [&sys, &grid, &opt, obs, stepper](long p, std::vector<double>& out) {
      RngStream rng(opt.seed, opt.stream, static_cast<std::uint64_t>(p));
      OverdampedState s;
      s.t = grid.knots.front();
      s.q = detail::draw_initial(sys, rng);
      DerivativeBundle b0, b1;
      DerivativeBundle* b = &b0;
      DerivativeBundle* bc = &b1;
      evaluate_bundle_into(*b, sys, s.t, s.q, BundleDetail::full);
      obs->start(p, s, *b);
      Vec dw;
      for (std::size_t seg = 0; seg < grid.steps.size(); ++seg) {
        const double t0 = grid.knots[seg];
        const double h = (grid.knots[seg + 1] - t0) / static_cast<double>(grid.steps[seg]);
        for (long k = 0; k < grid.steps[seg]; ++k) {
          OverdampedState c = stepper->step(s, *b, h, rng, &dw);
          c.t = k + 1 == grid.steps[seg] ? grid.knots[seg + 1] : t0 + (k + 1) * h;
          evaluate_bundle_into(*bc, sys, c.t, c.q, BundleDetail::full);
          obs->advance(s, *b, c, *bc, dw);
          s = std::move(c);
          std::swap(b, bc);
        }
      }
      obs->finish(out);
    };
  });
}

// ------------------------------------------------------------ simple observers

// Terminal functions of the state.
class TerminalUnderdamped final : public UnderdampedObserver {
 public:
  using Fn = std::function<double(const UnderdampedState&, const DerivativeBundle&)>;
  TerminalUnderdamped(std::vector<std::string> names, std::vector<Fn> fns) : names_(std::move(names)), fns_(std::move(fns)) {}
  std::vector<std::string> names() const override { return names_; }
  void start(long, const UnderdampedState& s, const DerivativeBundle& b) override { s_ = s; b_ = b; }
  void advance(const UnderdampedState&, const DerivativeBundle&, const UnderdampedState& c,
               const DerivativeBundle& bc) override {
    s_ = c;
    b_ = bc;
  }
  void finish(std::vector<double>& out) override {
    out.clear();
    for (const auto& f : fns_) out.push_back(f(s_, b_));
  }
  std::unique_ptr<UnderdampedObserver> clone() const override { return std::make_unique<TerminalUnderdamped>(*this); }

 private:
  std::vector<std::string> names_;
  std::vector<Fn> fns_;
  UnderdampedState s_;
  DerivativeBundle b_;
};

class TerminalOverdamped final : public OverdampedObserver {
 public:
  using Fn = std::function<double(const OverdampedState&, const DerivativeBundle&)>;
  TerminalOverdamped(std::vector<std::string> names, std::vector<Fn> fns) : names_(std::move(names)), fns_(std::move(fns)) {}
  std::vector<std::string> names() const override { return names_; }
  void start(long, const OverdampedState& s, const DerivativeBundle& b) override { s_ = s; b_ = b; }
  void advance(const OverdampedState&, const DerivativeBundle&, const OverdampedState& c, const DerivativeBundle& bc,
               const Vec&) override {
    s_ = c;
    b_ = bc;
  }
  void finish(std::vector<double>& out) override {
    out.clear();
    for (const auto& f : fns_) out.push_back(f(s_, b_));
  }
  std::unique_ptr<OverdampedObserver> clone() const override { return std::make_unique<TerminalOverdamped>(*this); }

 private:
  std::vector<std::string> names_;
  std::vector<Fn> fns_;
  OverdampedState s_;
  DerivativeBundle b_;
};

// Stored overdamped paths on a common grid.
struct OverdampedPathSet {
  std::vector<double> times;
  std::vector<std::vector<Vec>> paths;  // paths[p][k] = q at times[k]
};

class RecordingOverdamped final : public OverdampedObserver {
 public:
  explicit RecordingOverdamped(OverdampedPathSet* store) : store_(store) {}
  std::vector<std::string> names() const override { return {}; }
  void start(long path, const OverdampedState& s, const DerivativeBundle&) override {
    path_ = path;
    auto& p = store_->paths[static_cast<std::size_t>(path)];
    p.clear();
    p.push_back(s.q);
  }
  void advance(const OverdampedState&, const DerivativeBundle&, const OverdampedState& c, const DerivativeBundle&,
               const Vec&) override {
    store_->paths[static_cast<std::size_t>(path_)].push_back(c.q);
  }
  void finish(std::vector<double>& out) override { out.clear(); }
  std::unique_ptr<OverdampedObserver> clone() const override { return std::make_unique<RecordingOverdamped>(*this); }

 private:
  OverdampedPathSet* store_;
  long path_ = 0;
};

inline std::vector<double> grid_times(const TimeGrid& grid) {
  std::vector<double> t{grid.knots.front()};
  for (std::size_t seg = 0; seg < grid.steps.size(); ++seg) {
    const double h = (grid.knots[seg + 1] - grid.knots[seg]) / static_cast<double>(grid.steps[seg]);
    for (long k = 1; k <= grid.steps[seg]; ++k)
      t.push_back(k == grid.steps[seg] ? grid.knots[seg + 1] : grid.knots[seg] + k * h);
  }
  return t;
}

inline OverdampedPathSet simulate_overdamped_paths(const SystemSpec& sys, long paths, const TimeGrid& grid,
                                                   const EnsembleOptions& opt) {
  OverdampedPathSet set;
  set.times = grid_times(grid);
  set.paths.resize(static_cast<std::size_t>(paths));
  EnsembleOptions o = opt;
  o.fail_fast = true;
  RecordingOverdamped rec(&set);
  simulate_overdamped(sys, paths, grid, rec, o);
  return set;
}

}  // namespace kramers
