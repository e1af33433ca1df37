#pragma once

#include <json.hpp>

#include <algorithm>
#include <fstream>
#include <optional>
#include <set>
#include <sstream>
#include <string>

#include "kramers/errors.hpp"
#include "kramers/fields.hpp"
#include "kramers/system.hpp"

namespace kramers {

namespace config_detail {

using nlohmann::json;

// Line of the first occurrence of "key" in the source text, or 0.
inline int line_of_key(const std::string& text, const std::string& key) {
  const std::string needle = "\"" + key + "\"";
  const auto pos = text.find(needle);
  if (pos == std::string::npos) return 0;
  return 1 + static_cast<int>(std::count(text.begin(), text.begin() + static_cast<long>(pos), '\n'));
}

struct Ctx {
  const std::string* text;
  int n;

  [[noreturn]] void fail(const std::string& path, const std::string& msg) const {
    const auto last = path.find_last_of('.');
    const std::string key = last == std::string::npos ? path : path.substr(last + 1);
    const int line = text ? line_of_key(*text, key) : 0;
    std::string where = line > 0 ? " (line " + std::to_string(line) + ")" : "";
    throw ConfigError(path + where + ": " + msg);
  }

  void only_keys(const json& obj, const std::string& path, std::initializer_list<const char*> allowed) const {
    if (!obj.is_object()) fail(path, "expected an object");
    std::set<std::string> ok(allowed.begin(), allowed.end());
    for (auto it = obj.begin(); it != obj.end(); ++it)
      if (!ok.count(it.key())) fail(path + "." + it.key(), "unknown key");
  }

  double number(const json& obj, const std::string& path, const char* key, std::optional<double> def = {}) const {
    if (!obj.contains(key)) {
      if (def) return *def;
      fail(path + "." + key, "missing required parameter");
    }
    const json& v = obj.at(key);
    if (!v.is_number()) fail(path + "." + key, "expected a number");
    return v.get<double>();
  }

  int integer(const json& obj, const std::string& path, const char* key, std::optional<int> def = {}) const {
    if (!obj.contains(key)) {
      if (def) return *def;
      fail(path + "." + key, "missing required parameter");
    }
    const json& v = obj.at(key);
    if (!v.is_number_integer()) fail(path + "." + key, "expected an integer");
    return v.get<int>();
  }

  // Accepts a list of n numbers or a single number broadcast to all coordinates.
  Vec vector(const json& obj, const std::string& path, const char* key, std::optional<double> fill = {}) const {
    if (!obj.contains(key)) {
      if (fill) return Vec::Constant(n, *fill);
      fail(path + "." + key, "missing required parameter");
    }
    const json& v = obj.at(key);
    if (v.is_number()) return Vec::Constant(n, v.get<double>());
    if (!v.is_array() || static_cast<int>(v.size()) != n) fail(path + "." + key, "expected " + std::to_string(n) + " numbers");
    Vec out(n);
    for (int i = 0; i < n; ++i) {
      if (!v[i].is_number()) fail(path + "." + key, "expected numbers");
      out(i) = v[i].get<double>();
    }
    return out;
  }

  // Accepts an n x n nested list or a single number times the identity.
  Mat matrix(const json& obj, const std::string& path, const char* key) const {
    if (!obj.contains(key)) fail(path + "." + key, "missing required parameter");
    const json& v = obj.at(key);
    if (v.is_number()) return v.get<double>() * Mat::Identity(n, n);
    if (!v.is_array() || static_cast<int>(v.size()) != n) fail(path + "." + key, "expected an n x n matrix");
    Mat out(n, n);
    for (int i = 0; i < n; ++i) {
      if (!v[i].is_array() || static_cast<int>(v[i].size()) != n) fail(path + "." + key, "expected an n x n matrix");
      for (int j = 0; j < n; ++j) {
        if (!v[i][j].is_number()) fail(path + "." + key, "expected numbers");
        out(i, j) = v[i][j].get<double>();
      }
    }
    return out;
  }

  std::pair<std::string, json> family(const json& node, const std::string& path) const {
    only_keys(node, path, {"family", "params"});
    if (!node.contains("family") || !node.at("family").is_string()) fail(path + ".family", "missing family name");
    json params = node.contains("params") ? node.at("params") : json::object();
    if (!params.is_object()) fail(path + ".params", "expected an object");
    return {node.at("family").get<std::string>(), params};
  }
};

inline std::shared_ptr<const ScalarField> scalar_field(const Ctx& c, const json& node, const std::string& path) {
  auto [fam, p] = c.family(node, path);
  const std::string pp = path + ".params";
  if (fam == "constant") {
    c.only_keys(p, pp, {"value"});
    return std::make_shared<ConstantScalar>(c.number(p, pp, "value"));
  }
  if (fam == "affine") {
    c.only_keys(p, pp, {"offset", "weights"});
    return std::make_shared<Affine>(c.number(p, pp, "offset", 0.0), c.vector(p, pp, "weights"));
  }
  if (fam == "tanh_ramp") {
    c.only_keys(p, pp, {"offset", "amplitude", "weights", "shift", "envelope", "time_eps", "time_omega"});
    TanhRamp::Params q;
    q.offset = c.number(p, pp, "offset", 0.0);
    q.amplitude = c.number(p, pp, "amplitude", 1.0);
    q.weights = c.vector(p, pp, "weights");
    q.shift = c.number(p, pp, "shift", 0.0);
    q.envelope = c.vector(p, pp, "envelope", 0.0);
    q.time_eps = c.number(p, pp, "time_eps", 0.0);
    q.time_omega = c.number(p, pp, "time_omega", 0.0);
    return std::make_shared<TanhRamp>(q);
  }
  if (fam == "sinusoid") {
    c.only_keys(p, pp, {"offset", "amplitude", "weights", "shift", "time_eps", "time_omega"});
    Sinusoid::Params q;
    q.offset = c.number(p, pp, "offset", 0.0);
    q.amplitude = c.number(p, pp, "amplitude", 1.0);
    q.weights = c.vector(p, pp, "weights");
    q.shift = c.number(p, pp, "shift", 0.0);
    q.time_eps = c.number(p, pp, "time_eps", 0.0);
    q.time_omega = c.number(p, pp, "time_omega", 0.0);
    return std::make_shared<Sinusoid>(q);
  }
  if (fam == "gaussian_bump") {
    c.only_keys(p, pp, {"offset", "amplitude", "center", "widths", "time_eps", "time_omega"});
    GaussianBump::Params q;
    q.offset = c.number(p, pp, "offset", 0.0);
    q.amplitude = c.number(p, pp, "amplitude", 1.0);
    q.center = c.vector(p, pp, "center", 0.0);
    q.widths = c.vector(p, pp, "widths", 1.0);
    q.time_eps = c.number(p, pp, "time_eps", 0.0);
    q.time_omega = c.number(p, pp, "time_omega", 0.0);
    try {
      return std::make_shared<GaussianBump>(q);
    } catch (const InvalidInput& e) {
      c.fail(pp, e.what());
    }
  }
  if (fam == "harmonic") {
    c.only_keys(p, pp, {"stiffness", "center", "drive", "omega"});
    Harmonic::Params q;
    q.stiffness = c.vector(p, pp, "stiffness", 1.0);
    q.center = c.vector(p, pp, "center", 0.0);
    q.drive = c.vector(p, pp, "drive", 0.0);
    q.omega = c.number(p, pp, "omega", 0.0);
    return std::make_shared<Harmonic>(q);
  }
  if (fam == "quartic") {
    c.only_keys(p, pp, {"quartic", "quadratic"});
    return std::make_shared<Quartic>(c.number(p, pp, "quartic", 1.0), c.number(p, pp, "quadratic", 0.0));
  }
  c.fail(path + ".family", "unknown scalar family '" + fam + "'");
}

inline std::shared_ptr<const MatrixField> matrix_field(const Ctx& c, const json& node, const std::string& path) {
  auto [fam, p] = c.family(node, path);
  const std::string pp = path + ".params";
  if (fam == "constant") {
    c.only_keys(p, pp, {"value"});
    return std::make_shared<ConstantMatrix>(c.matrix(p, pp, "value"));
  }
  if (fam == "scalar_field") {
    c.only_keys(p, pp, {"field"});
    if (!p.contains("field")) c.fail(pp + ".field", "missing required parameter");
    return std::make_shared<ScalarTimesIdentity>(scalar_field(c, p.at("field"), pp + ".field"));
  }
  if (fam == "rotation_interp") {
    c.only_keys(p, pp, {"diag", "plane", "theta0", "kappa", "weights", "shift"});
    RotationInterp::Params q;
    q.diag = c.vector(p, pp, "diag");
    if (p.contains("plane")) {
      const json& pl = p.at("plane");
      if (!pl.is_array() || pl.size() != 2 || !pl[0].is_number_integer() || !pl[1].is_number_integer())
        c.fail(pp + ".plane", "expected two integer indices");
      q.plane_i = pl[0].get<int>();
      q.plane_j = pl[1].get<int>();
    }
    q.theta0 = c.number(p, pp, "theta0", 0.0);
    q.kappa = c.number(p, pp, "kappa", 0.0);
    q.weights = c.vector(p, pp, "weights", 0.0);
    q.shift = c.number(p, pp, "shift", 0.0);
    try {
      return std::make_shared<RotationInterp>(q);
    } catch (const InvalidInput& e) {
      c.fail(pp, e.what());
    }
  }
  c.fail(path + ".family", "unknown matrix family '" + fam + "'");
}

inline std::shared_ptr<const VectorField> vector_field(const Ctx& c, const json& node, const std::string& path) {
  auto [fam, p] = c.family(node, path);
  const std::string pp = path + ".params";
  if (fam == "zero") {
    c.only_keys(p, pp, {});
    return std::make_shared<ZeroVector>();
  }
  if (fam == "constant") {
    c.only_keys(p, pp, {"value"});
    return std::make_shared<ConstantVector>(c.vector(p, pp, "value"));
  }
  if (fam == "linear") {
    c.only_keys(p, pp, {"matrix", "offset", "time_eps", "time_omega"});
    LinearVector::Params q;
    q.matrix = c.matrix(p, pp, "matrix");
    q.offset = c.vector(p, pp, "offset", 0.0);
    q.time_eps = c.number(p, pp, "time_eps", 0.0);
    q.time_omega = c.number(p, pp, "time_omega", 0.0);
    return std::make_shared<LinearVector>(q);
  }
  if (fam == "uniform_B") {
    c.only_keys(p, pp, {"B0"});
    if (c.n < 2) c.fail(path + ".family", "uniform_B needs dimension >= 2");
    return std::make_shared<UniformB>(c.number(p, pp, "B0"));
  }
  if (fam == "swirl") {
    c.only_keys(p, pp, {"amplitude", "width", "plane", "time_eps", "time_omega"});
    Swirl::Params q;
    q.amplitude = c.number(p, pp, "amplitude", 1.0);
    q.width = c.number(p, pp, "width", 1.0);
    if (p.contains("plane")) {
      const json& pl = p.at("plane");
      if (!pl.is_array() || pl.size() != 2 || !pl[0].is_number_integer() || !pl[1].is_number_integer())
        c.fail(pp + ".plane", "expected two integer indices");
      q.plane_i = pl[0].get<int>();
      q.plane_j = pl[1].get<int>();
    }
    if (q.plane_i >= c.n || q.plane_j >= c.n) c.fail(pp + ".plane", "plane index outside dimension");
    q.time_eps = c.number(p, pp, "time_eps", 0.0);
    q.time_omega = c.number(p, pp, "time_omega", 0.0);
    try {
      return std::make_shared<Swirl>(q);
    } catch (const InvalidInput& e) {
      c.fail(pp, e.what());
    }
  }
  c.fail(path + ".family", "unknown vector family '" + fam + "'");
}

}  // namespace config_detail

// Parses a system description. Unknown keys, missing required keys and malformed values
// raise ConfigError naming the offending key and, where possible, its line.
inline SystemSpec parse_system(const std::string& text) {
  using nlohmann::json;
  json root;
  try {
    root = json::parse(text);
  } catch (const json::parse_error& e) {
    const std::size_t pos = std::min(e.byte, text.size());
    const int line = 1 + static_cast<int>(std::count(text.begin(), text.begin() + static_cast<long>(pos), '\n'));
    throw ConfigError("config parse error at line " + std::to_string(line) + ": " + e.what());
  }
  config_detail::Ctx c{&text, 1};
  c.only_keys(root, "config", {"dimension", "horizon", "beta", "gamma", "psi", "V", "F_ext", "uniform_B0", "initial"});
  c.n = c.integer(root, "config", "dimension");
  if (c.n < 1 || c.n > kMaxDim) c.fail("config.dimension", "must be between 1 and " + std::to_string(kMaxDim));

  SystemSpec s;
  s.dimension = c.n;
  s.horizon = c.number(root, "config", "horizon");
  if (!(s.horizon > 0.0)) c.fail("config.horizon", "must be positive");
  for (const char* key : {"beta", "gamma", "V"})
    if (!root.contains(key)) c.fail(std::string("config.") + key, "missing required key");
  s.beta = config_detail::scalar_field(c, root.at("beta"), "config.beta");
  s.gamma = config_detail::matrix_field(c, root.at("gamma"), "config.gamma");
  s.V = config_detail::scalar_field(c, root.at("V"), "config.V");
  s.F_ext = root.contains("F_ext") ? config_detail::vector_field(c, root.at("F_ext"), "config.F_ext")
                                   : std::make_shared<ZeroVector>();
  if (root.contains("uniform_B0")) {
    s.uniform_B0 = c.number(root, "config", "uniform_B0");
    if (c.n != 3) c.fail("config.uniform_B0", "uniform field requires dimension 3");
  }
  if (root.contains("psi")) {
    s.psi = config_detail::vector_field(c, root.at("psi"), "config.psi");
  } else if (s.uniform_B0) {
    s.psi = std::make_shared<UniformB>(*s.uniform_B0);
  } else {
    s.psi = std::make_shared<ZeroVector>();
  }
  if (s.uniform_B0) {
    const auto* ub = dynamic_cast<const UniformB*>(s.psi.get());
    if (!ub || ub->b0() != *s.uniform_B0) c.fail("config.psi", "must be the uniform_B family with the same B0");
  }
  if (root.contains("initial")) {
    const std::string path = "config.initial";
    auto [fam, p] = c.family(root.at("initial"), path);
    if (fam == "point") {
      c.only_keys(p, path + ".params", {"q0"});
      s.initial.kind = InitialCondition::Kind::point;
      s.initial.mean = c.vector(p, path + ".params", "q0", 0.0);
    } else if (fam == "gaussian") {
      c.only_keys(p, path + ".params", {"mean", "stddev"});
      s.initial.kind = InitialCondition::Kind::gaussian;
      s.initial.mean = c.vector(p, path + ".params", "mean", 0.0);
      s.initial.stddev = c.vector(p, path + ".params", "stddev");
      if ((s.initial.stddev.array() < 0.0).any()) c.fail(path + ".params.stddev", "must be non-negative");
    } else {
      c.fail(path + ".family", "unknown initial family '" + fam + "'");
    }
  }
  try {
    check_system(s);
  } catch (const InvalidInput& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  return s;
}

inline SystemSpec load_system(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_system(ss.str());
}

}  // namespace kramers
