// Acceptance suite. One PASS/FAIL line per criterion; pass criterion numbers as
// arguments to run a subset (default: all).

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <iterator>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "kramers/experiments.hpp"

namespace fs = std::filesystem;
using namespace kramers;

namespace {

const std::string kConfigs = KRAMERS_CONFIG_DIR;
const std::string kCli = KRAMERS_CLI;

std::string config(const std::string& name) { return kConfigs + "/" + name + ".json"; }

struct Outcome {
  bool pass = false;
  std::string detail;
};

class Timer {
 public:
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
  }

 private:
  std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

std::string num(double x) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.4g", x);
  return buf;
}

ExperimentPlan base_plan(std::uint64_t seed) {
  ExperimentPlan p;
  p.seed = seed;
  p.workers = 1;
  return p;
}

// ------------------------------------------------------------------ 1

Outcome check_identities() {
  Timer timer;
  IdentityOptions o;
  o.seed = 20240601;
  o.instances = 100;
  const auto rows = run_identity_suites(o);
  const double secs = timer.seconds();
  bool ok = rows.size() == identity_names().size() && secs <= 60.0;
  double worst = 0.0;
  std::string failed;
  for (const auto& r : rows) {
    const bool row_ok = r.passed() && r.tolerance <= 1e-9 && r.instances >= 100;
    if (!row_ok) failed += " " + r.name;
    ok = ok && row_ok;
    worst = std::max(worst, r.max_error);
  }
  return {ok, std::to_string(rows.size()) + " suites x 100 instances, worst error " + num(worst) +
                  (failed.empty() ? "" : ", failing:" + failed) + ", " + num(secs) + " s"};
}

// ------------------------------------------------------------------ 2

Outcome check_gibbs() {
  Timer timer;
  const SystemSpec sys = load_system(config("reference"));
  ExperimentPlan p = base_plan(11);
  p.masses = {0.01};
  p.paths = 20000;
  const GibbsRow r = run_gibbs_marginal(sys, p).front();
  const double secs = timer.seconds();
  const double z = (r.estimate - 1.0) / r.stderr;
  return {std::abs(z) <= 3.0 && secs <= 120.0,
          "E[beta z^2] = " + num(r.estimate) + " +- " + num(r.stderr) + " (z = " + num(z) + "), " + num(secs) + " s"};
}

// ------------------------------------------------------------------ 3

Outcome check_homogenization() {
  Timer timer;
  const SystemSpec sys = load_system(config("reference"));
  ExperimentPlan p = base_plan(12);
  p.paths = 20000;
  p.rank = 2;
  const auto rows = run_homogenize(sys, p);
  const double secs = timer.seconds();
  std::vector<double> ms, gaps;
  bool decreasing = true;
  std::string list;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    ms.push_back(rows[i].mass);
    gaps.push_back(rows[i].gap);
    if (i && !(std::abs(rows[i].gap) < std::abs(rows[i - 1].gap))) decreasing = false;
    list += (i ? ", " : "") + num(rows[i].gap) + " +- " + num(rows[i].gap_stderr);
  }
  const LogFit fit = fit_loglog(ms, gaps);
  const bool slope_ok = fit.slope >= 0.3 && fit.slope <= 0.7;
  return {decreasing && slope_ok && secs <= 600.0,
          "gaps [" + list + "], " + (decreasing ? "decreasing" : "not decreasing") + ", slope " + num(fit.slope) +
              ", " + num(secs) + " s"};
}

// ------------------------------------------------------------------ 4

Outcome check_scalar_anomaly() {
  Timer timer;
  const SystemSpec sys = load_system(config("reference"));
  ExperimentPlan p = base_plan(13);
  p.paths = 50000;
  p.s = 0.5;
  p.t = 2.0;
  const SweepResult res = run_anomaly_sweep(sys, p);
  const double secs = timer.seconds();
  const double pred = res.overdamped.mean("anomaly_scalar");
  const double pred_se = res.overdamped.stderr_of("anomaly_scalar");
  std::vector<double> dist;
  std::string list;
  for (const auto& a : res.anomaly) {
    dist.push_back(std::abs(a.anomaly_gap - pred));
    list += (list.empty() ? "" : ", ") + num(a.anomaly_gap) + " +- " + num(a.anomaly_gap_stderr);
  }
  const AnomalyRow& last = res.anomaly.back();
  const double comb = std::hypot(last.anomaly_gap_stderr, pred_se);
  const bool a_ok = dist.back() <= 3.0 * comb;
  bool b_ok = true;
  for (std::size_t i = 1; i < dist.size(); ++i) b_ok = b_ok && dist[i] < dist[i - 1];
  return {a_ok && b_ok && secs <= 900.0,
          "gaps [" + list + "] vs prediction " + num(pred) + " +- " + num(pred_se) + "; (a) " +
              (a_ok ? "within" : "outside") + " 3 x " + num(comb) + ", (b) " +
              (b_ok ? "monotone" : "not monotone") + ", " + num(secs) + " s"};
}

// ------------------------------------------------------------------ 5

Outcome check_limit_formula() {
  Timer timer;
  const SystemSpec sys = load_system(config("reference"));
  ExperimentPlan p = base_plan(14);
  p.paths = 50000;
  p.masses = {0.01};
  p.s = 0.5;
  p.t = 2.0;
  const SweepResult res = run_anomaly_sweep(sys, p);
  const double secs = timer.seconds();
  const SweepRow& r = res.rows.back();
  const bool mc_ok = std::abs(r.gap) <= 3.0 * r.stderr;
  const double disc = res.overdamped.max("psi0_discrepancy");
  const bool path_ok = disc <= 1e-9;
  return {mc_ok && path_ok, "E[S_env] = " + num(r.estimate) + ", limit " + num(r.limit) + ", gap " + num(r.gap) +
                                " +- " + num(r.stderr) + "; psi=0 vs general max discrepancy " + num(disc) + ", " +
                                num(secs) + " s"};
}

// ------------------------------------------------------------------ 6

// Pointwise uniform-field checks along overdamped paths.
class UniformProbe final : public OverdampedObserver {
 public:
  explicit UniformProbe(double b0) : b0_(b0) {}
  std::vector<std::string> names() const override { return {"scalar_mismatch", "kernel_mismatch", "negativity"}; }
  void start(long, const OverdampedState&, const DerivativeBundle& b) override {
    worst_ = {0.0, 0.0, 0.0};
    visit(b);
  }
  void advance(const OverdampedState&, const DerivativeBundle&, const OverdampedState&, const DerivativeBundle& bc,
               const Vec&) override {
    visit(bc);
  }
  void finish(std::vector<double>& out) override { out = worst_; }
  std::unique_ptr<OverdampedObserver> clone() const override { return std::make_unique<UniformProbe>(*this); }

 private:
  void visit(const DerivativeBundle& b) {
    const double a = anomaly_uniform_b(b);
    if (b0_ == 0.0) {
      worst_[0] = std::max(worst_[0], std::abs(a - anomaly_scalar(b)));
    } else {
      const Vec k = (Vec(3) << 0.3, 0.3, 1.0 / 3.0).finished();
      const double want = 2.5 * b.grad_beta.dot(k.asDiagonal() * b.grad_beta) / std::pow(b.beta, 3);
      worst_[1] = std::max(worst_[1], std::abs(a - want) / std::max(1.0, std::abs(want)));
    }
    worst_[2] = std::max(worst_[2], -a);
  }
  double b0_;
  std::vector<double> worst_{0.0, 0.0, 0.0};
};

Outcome check_uniform_b() {
  Timer timer;
  IdentityOptions o;
  o.seed = 6;
  o.instances = 100;
  o.select = std::vector<std::string>{"uniform_b_scalar_reduction", "uniform_b_kernel", "uniform_b_nonnegative",
                                      "uniform_b_general"};
  bool ok = true;
  std::string detail;
  for (const auto& r : run_identity_suites(o)) ok = ok && r.passed();
  detail += std::string("identities ") + (ok ? "pass" : "FAIL") + " (" + num(timer.seconds()) + " s)";

  for (const double b0 : {0.0, 1.0}) {
    const SystemSpec sys = load_system(config(b0 == 0.0 ? "uniform_b0" : "uniform_b1"));
    EnsembleOptions eo;
    eo.seed = 61;
    UniformProbe probe(b0);
    const EnsembleResult pr = simulate_overdamped(sys, 200, overdamped_grid(sys, {}, 1024), probe, eo);
    const double mismatch = pr.stats.max(b0 == 0.0 ? "scalar_mismatch" : "kernel_mismatch");
    const double negative = pr.stats.max("negativity");
    const bool point_ok = mismatch <= 1e-12;
    ok = ok && point_ok && negative <= 0.0;

    ExperimentPlan p = base_plan(b0 == 0.0 ? 62 : 63);
    p.paths = 10000;
    p.masses = {0.01};
    p.s = 0.5;
    p.t = 2.0;
    const SweepResult res = run_anomaly_sweep(sys, p);
    const double pred = res.overdamped.mean("anomaly_uniform_b");
    const double pred_se = res.overdamped.stderr_of("anomaly_uniform_b");
    const AnomalyRow& a = res.anomaly.back();
    const double comb = std::hypot(a.anomaly_gap_stderr, pred_se);
    const bool mc_ok = std::abs(a.anomaly_gap - pred) <= 3.0 * comb;
    ok = ok && mc_ok;
    detail += "; B0=" + num(b0) + ": pointwise mismatch " + num(mismatch) + ", min anomaly " + num(-negative) +
              ", gap " + num(a.anomaly_gap) + " vs " + num(pred) + " (3 x " + num(comb) + (mc_ok ? " ok)" : " FAIL)");
  }
  return {ok, detail + ", " + num(timer.seconds()) + " s"};
}

// ------------------------------------------------------------------ 7

// Coarse and fine runs share the fine normals: the coarse run draws each increment as
// two sub-increments of the fine step.
Outcome check_step_halving() {
  Timer timer;
  const SystemSpec sys = load_system(config("reference"));
  ExperimentPlan coarse = base_plan(17);
  coarse.paths = 10000;
  coarse.s = 0.5;
  coarse.t = 2.0;
  coarse.noise_substeps = 2;
  ExperimentPlan fine = coarse;
  fine.noise_substeps = 1;
  fine.dt_c1 = 40.0;
  fine.dt_c2 = 8192.0;

  double worst = 0.0;
  std::string worst_name;
  const auto compare = [&](const std::string& name, double a, double b, double se) {
    const double r = std::abs(a - b) / se;
    if (r > worst || worst_name.empty()) {
      worst = r;
      worst_name = name;
    }
  };

  const SweepResult c = run_anomaly_sweep(sys, coarse);
  const SweepResult f = run_anomaly_sweep(sys, fine);
  for (std::size_t i = 0; i < c.rows.size(); ++i) {
    compare("S_env m=" + num(c.rows[i].m), c.rows[i].estimate, f.rows[i].estimate, c.anomaly[i].s_env_stderr);
    compare("anomaly_gap m=" + num(c.rows[i].m), c.anomaly[i].anomaly_gap, f.anomaly[i].anomaly_gap,
            c.anomaly[i].anomaly_gap_stderr);
  }
  for (const auto& name : c.overdamped.names()) {
    // per-path rounding diagnostics, not expectations
    if (name.ends_with("_discrepancy")) continue;
    const double se = c.overdamped.stderr_of(name);
    if (se > 0.0) compare(name, c.overdamped.mean(name), f.overdamped.mean(name), se);
  }

  coarse.s.reset();
  coarse.t.reset();
  fine.s.reset();
  fine.t.reset();
  const auto gc = run_gibbs_marginal(sys, coarse);
  const auto gf = run_gibbs_marginal(sys, fine);
  for (std::size_t i = 0; i < gc.size(); ++i)
    compare("beta_z2 m=" + num(gc[i].mass), gc[i].estimate, gf[i].estimate, gc[i].stderr);
  const auto hc = run_homogenize(sys, coarse);
  const auto hf = run_homogenize(sys, fine);
  for (std::size_t i = 0; i < hc.size(); ++i)
    compare("J m=" + num(hc[i].mass), hc[i].estimate, hf[i].estimate, hc[i].stderr);
  compare("J limit", hc.front().limit, hf.front().limit, hc.front().limit_stderr);

  return {worst < 1.0, "largest change " + num(worst) + " stderr (" + worst_name + "), " + num(timer.seconds()) + " s"};
}

// ------------------------------------------------------------------ 8

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

// Every CSV under dir, keyed by relative path.
std::map<std::string, std::string> csv_bytes(const fs::path& dir) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(dir))
    if (e.is_regular_file() && e.path().extension() == ".csv")
      out[fs::relative(e.path(), dir).string()] = slurp(e.path());
  return out;
}

Outcome check_determinism() {
  Timer timer;
  const fs::path root = fs::temp_directory_path() / "kramers_acceptance_determinism";
  fs::remove_all(root);
  const std::vector<std::string> commands{
      "verify-identities --instances 20",
      "gibbs-marginal --config " + config("reference") + " --paths 300",
      "homogenize --config " + config("reference") + " --paths 300",
      "anomaly-sweep --config " + config("reference") + " --paths 300 --window-start 0.5",
      "anomaly-sweep --config " + config("driven_2d") + " --paths 100 --masses 0.1,0.05",
  };
  const auto run_all = [&](const std::string& tag, int workers) {
    const fs::path dir = root / tag;
    for (std::size_t i = 0; i < commands.size(); ++i) {
      const std::string cmd = "\"" + kCli + "\" " + commands[i] + " --seed 5 --workers " + std::to_string(workers) +
                              " --out \"" + (dir / std::to_string(i)).string() + "\" > /dev/null";
      const int rc = std::system(cmd.c_str());
      if (rc != 0) throw Error("command failed: " + cmd);
    }
    return csv_bytes(dir);
  };
  const auto reference = run_all("run1", 1);
  bool ok = !reference.empty();
  for (const auto& [tag, workers] : std::vector<std::pair<std::string, int>>{{"run2", 1}, {"run3", 1}, {"w2", 2},
                                                                             {"w3", 3}}) {
    const auto other = run_all(tag, workers);
    ok = ok && other == reference;
  }
  fs::remove_all(root);
  return {ok, std::to_string(reference.size()) + " CSV files, 3 runs plus workers 2 and 3 " +
                  (ok ? "byte-identical" : "DIFFER") + ", " + num(timer.seconds()) + " s"};
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"identity suites", check_identities},
      {"Gibbs marginal", check_gibbs},
      {"homogenization rate", check_homogenization},
      {"scalar entropy anomaly", check_scalar_anomaly},
      {"limit formula consistency", check_limit_formula},
      {"uniform-field anomaly", check_uniform_b},
      {"step halving", check_step_halving},
      {"determinism", check_determinism},
  };
  std::set<int> selected;
  for (int i = 1; i < argc; ++i) selected.insert(std::atoi(argv[i]));
  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i) + 1;
    if (!selected.empty() && !selected.count(id)) continue;
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("error: ") + e.what()};
    }
    std::cout << (o.pass ? "PASS" : "FAIL") << " criterion " << id << " (" << criteria[i].first << "): " << o.detail
              << std::endl;
    failed += !o.pass;
  }
  return failed ? 1 : 0;
}
