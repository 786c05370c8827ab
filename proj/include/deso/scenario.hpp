#pragma once

#include "deso/gain.hpp"
#include "deso/model.hpp"
#include "deso/observers.hpp"
#include "deso/signals.hpp"
#include "deso/sim.hpp"

#include <json.hpp>

#include <cmath>
#include <fstream>
#include <limits>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

namespace deso {

/// Malformed or inconsistent scenario; the message starts with the field path.
class ScenarioError : public std::invalid_argument {
 public:
  ScenarioError(const std::string& path, const std::string& message)
      : std::invalid_argument(path.empty() ? message : path + ": " + message), path_(path) {}
  const std::string& path() const { return path_; }

 private:
  std::string path_;
};

struct MatrixSet {
  Matrix A, B, C, D;
};

struct PlantConfig {
  enum class Source { DcDrive, Inline };
  Source source = Source::DcDrive;
  UncertainParams dc;
  ParamSet observer_params = ParamSet::Nominal;
  DcDisturbanceMap disturbance_map = DcDisturbanceMap::Lumped;
  std::optional<MatrixSet> truth;
  std::optional<MatrixSet> model;  // defaults to the truth

  UncertainPlant build() const {
    if (source == Source::DcDrive) return dc_drive_uncertain(dc, observer_params, disturbance_map);
    const MatrixSet& t = *truth;
    const MatrixSet& m = model ? *model : t;
    return UncertainPlant(LtiPlant(t.A, t.B, t.C, t.D), LtiPlant(m.A, m.B, m.C, m.D));
  }
};

enum class Placement { Generic, Decoupled };

struct GainConfig {
  std::vector<Complex> poles;
  Placement placement = Placement::Generic;
  std::optional<Matrix> L;  // explicit gain; poles are ignored when set
  std::uint64_t seed = 7;
};

struct SmoConfig {
  std::optional<Matrix> L;   // Gn = [L; -I]
  std::optional<Matrix> Gn;  // explicit injection matrix
  double rho = 0.0;
  double boundary_layer = 0.0;
};

struct ObserverConfig {
  std::string name;
  ObserverKind kind = ObserverKind::StandardEso;
  std::optional<GainConfig> gain;  // falls back to the scenario gain
  std::optional<double> h;
  std::optional<SmoConfig> smo;
  int order = 1;
};

struct SweepConfig {
  std::string observer;
  std::vector<double> h;
};

struct OutputConfig {
  std::string dir = "out";
  std::string trace = "trace.csv";
  std::string metrics = "metrics.csv";
  std::string summary = "summary.txt";
};

struct Scenario {
  std::string name;
  std::string description;
  PlantConfig plant;
  SignalProfile input;
  SignalProfile disturbance;
  std::optional<GainConfig> gain;
  std::vector<ObserverConfig> observers;
  SimConfig sim;
  MetricsOptions metrics;
  std::optional<SweepConfig> sweep;
  OutputConfig output;
};

// ---------------------------------------------------------------------------
// JSON reading with field paths and unknown-key rejection.

namespace detail {

using nlohmann::json;

class Fields {
 public:
  Fields(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ScenarioError(path_, "expected an object");
  }

  std::string at(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }
  bool has(const std::string& key) const { return j_.contains(key); }

  const json& require(const std::string& key) {
    if (!j_.contains(key)) throw ScenarioError(at(key), "missing required field");
    used_.insert(key);
    return j_.at(key);
  }

  const json* optional(const std::string& key) {
    if (!j_.contains(key)) return nullptr;
    used_.insert(key);
    const json& v = j_.at(key);
    return v.is_null() ? nullptr : &v;
  }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it) {
      if (!used_.count(it.key())) throw ScenarioError(at(it.key()), "unknown field");
    }
  }

 private:
  const json& j_;
  std::string path_;
  std::set<std::string> used_;
};

inline double number(const json& j, const std::string& path) {
  if (!j.is_number()) throw ScenarioError(path, "expected a number");
  const double v = j.get<double>();
  if (!std::isfinite(v)) throw ScenarioError(path, "expected a finite number");
  return v;
}

inline std::string text(const json& j, const std::string& path) {
  if (!j.is_string()) throw ScenarioError(path, "expected a string");
  return j.get<std::string>();
}

inline bool boolean(const json& j, const std::string& path) {
  if (!j.is_boolean()) throw ScenarioError(path, "expected true or false");
  return j.get<bool>();
}

inline std::string item(const std::string& path, std::size_t i) {
  return path + "[" + std::to_string(i) + "]";
}

inline Vector vector(const json& j, const std::string& path) {
  if (!j.is_array()) throw ScenarioError(path, "expected an array of numbers");
  Vector v(static_cast<Eigen::Index>(j.size()));
  for (std::size_t i = 0; i < j.size(); ++i) v(static_cast<Eigen::Index>(i)) = number(j[i], item(path, i));
  return v;
}

inline std::vector<double> numbers(const json& j, const std::string& path) {
  const Vector v = vector(j, path);
  return {v.data(), v.data() + v.size()};
}

/// Array of rows; an empty row list gives a 0-column matrix with the given row count.
inline Matrix matrix(const json& j, const std::string& path) {
  if (!j.is_array() || j.empty()) throw ScenarioError(path, "expected a non-empty array of rows");
  const std::size_t cols = j[0].is_array() ? j[0].size() : 0;
  Matrix m(static_cast<Eigen::Index>(j.size()), static_cast<Eigen::Index>(cols));
  for (std::size_t r = 0; r < j.size(); ++r) {
    const std::string rp = item(path, r);
    if (!j[r].is_array()) throw ScenarioError(rp, "expected a row array");
    if (j[r].size() != cols) throw ScenarioError(rp, "row length differs from the first row");
    for (std::size_t c = 0; c < cols; ++c) {
      m(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = number(j[r][c], item(rp, c));
    }
  }
  return m;
}

inline Complex pole(const json& j, const std::string& path) {
  if (j.is_number()) return {number(j, path), 0.0};
  if (j.is_array() && j.size() == 2) return {number(j[0], item(path, 0)), number(j[1], item(path, 1))};
  throw ScenarioError(path, "expected a real pole or a [re, im] pair");
}

inline Segment segment(const json& j, const std::string& path) {
  Fields f(j, path);
  Segment s;
  s.t_start = number(f.require("t_start"), f.at("t_start"));
  if (const json* v = f.optional("t_end")) s.t_end = number(*v, f.at("t_end"));
  if (const json* v = f.optional("jump")) s.jump = boolean(*v, f.at("jump"));
  int shapes = 0;
  if (const json* v = f.optional("constant")) {
    s.shape = shape::Constant{number(*v, f.at("constant"))};
    ++shapes;
  }
  if (const json* v = f.optional("ramp")) {
    Fields r(*v, f.at("ramp"));
    s.shape = shape::Ramp{number(r.require("level0"), r.at("level0")),
                          number(r.require("slope"), r.at("slope"))};
    r.finish();
    ++shapes;
  }
  if (const json* v = f.optional("sine")) {
    Fields sf(*v, f.at("sine"));
    shape::Sine sine;
    if (const json* o = sf.optional("offset")) sine.offset = number(*o, sf.at("offset"));
    const json& terms = sf.require("terms");
    if (!terms.is_array() || terms.empty()) throw ScenarioError(sf.at("terms"), "expected a non-empty array");
    for (std::size_t i = 0; i < terms.size(); ++i) {
      Fields tf(terms[i], item(sf.at("terms"), i));
      shape::SineTerm t;
      t.amplitude = number(tf.require("amplitude"), tf.at("amplitude"));
      t.omega = number(tf.require("omega"), tf.at("omega"));
      if (const json* ph = tf.optional("phase")) t.phase = number(*ph, tf.at("phase"));
      tf.finish();
      sine.terms.push_back(t);
    }
    sf.finish();
    s.shape = std::move(sine);
    ++shapes;
  }
  if (shapes != 1) throw ScenarioError(path, "exactly one of constant, ramp, sine is required");
  f.finish();
  return s;
}

inline SignalProfile profile(const json& j, const std::string& path) {
  Fields f(j, path);
  const json& chans = f.require("channels");
  const std::string cp = f.at("channels");
  if (!chans.is_array()) throw ScenarioError(cp, "expected an array of segment lists");
  std::vector<std::vector<Segment>> out;
  for (std::size_t c = 0; c < chans.size(); ++c) {
    const std::string chp = item(cp, c);
    if (!chans[c].is_array()) throw ScenarioError(chp, "expected an array of segments");
    std::vector<Segment> segs;
    for (std::size_t i = 0; i < chans[c].size(); ++i) segs.push_back(segment(chans[c][i], item(chp, i)));
    out.push_back(std::move(segs));
  }
  f.finish();
  try {
    return SignalProfile(std::move(out));
  } catch (const std::invalid_argument& e) {
    throw ScenarioError(path, e.what());
  }
}

inline DcDriveParams dc_params(const json& j, const std::string& path, DcDriveParams p) {
  Fields f(j, path);
  std::pair<const char*, double*> fields[] = {{"R", &p.R},       {"L", &p.L}, {"Kv", &p.Kv},
                                              {"Ktau", &p.Ktau}, {"J", &p.J}, {"f", &p.f}};
  for (auto& [key, dst] : fields) {
    if (const json* v = f.optional(key)) *dst = number(*v, f.at(key));
  }
  f.finish();
  try {
    p.validate();
  } catch (const std::invalid_argument& e) {
    throw ScenarioError(path, e.what());
  }
  return p;
}

inline MatrixSet matrix_set(const json& j, const std::string& path) {
  Fields f(j, path);
  MatrixSet m;
  m.A = matrix(f.require("A"), f.at("A"));
  m.C = matrix(f.require("C"), f.at("C"));
  m.D = matrix(f.require("D"), f.at("D"));
  if (const json* b = f.optional("B")) {
    m.B = matrix(*b, f.at("B"));
  } else {
    m.B = Matrix::Zero(m.A.rows(), 0);
  }
  f.finish();
  try {
    LtiPlant(m.A, m.B, m.C, m.D);
  } catch (const std::invalid_argument& e) {
    throw ScenarioError(path, e.what());
  }
  return m;
}

inline PlantConfig plant(const json& j, const std::string& path) {
  Fields f(j, path);
  PlantConfig pc;
  if (const json* preset = f.optional("preset")) {
    const std::string name = text(*preset, f.at("preset"));
    if (name != "dc_drive") throw ScenarioError(f.at("preset"), "unknown preset '" + name + "'");
    pc.source = PlantConfig::Source::DcDrive;
    if (const json* v = f.optional("observer_params")) {
      const std::string s = text(*v, f.at("observer_params"));
      if (s == "real") {
        pc.observer_params = ParamSet::Real;
      } else if (s == "nominal") {
        pc.observer_params = ParamSet::Nominal;
      } else {
        throw ScenarioError(f.at("observer_params"), "expected 'real' or 'nominal'");
      }
    }
    if (const json* v = f.optional("disturbance_map")) {
      const std::string s = text(*v, f.at("disturbance_map"));
      if (s == "lumped") {
        pc.disturbance_map = DcDisturbanceMap::Lumped;
      } else if (s == "torque") {
        pc.disturbance_map = DcDisturbanceMap::Torque;
      } else {
        throw ScenarioError(f.at("disturbance_map"), "expected 'lumped' or 'torque'");
      }
    }
    if (const json* v = f.optional("real")) pc.dc.real = dc_params(*v, f.at("real"), pc.dc.real);
    if (const json* v = f.optional("nominal")) {
      pc.dc.nominal = dc_params(*v, f.at("nominal"), pc.dc.nominal);
    }
  } else {
    pc.source = PlantConfig::Source::Inline;
    pc.truth = matrix_set(f.require("truth"), f.at("truth"));
    if (const json* v = f.optional("model")) pc.model = matrix_set(*v, f.at("model"));
  }
  f.finish();
  try {
    pc.build();
  } catch (const std::invalid_argument& e) {
    throw ScenarioError(path, e.what());
  }
  return pc;
}

inline GainConfig gain(const json& j, const std::string& path) {
  Fields f(j, path);
  GainConfig g;
  if (const json* v = f.optional("L")) g.L = matrix(*v, f.at("L"));
  if (const json* v = f.optional("poles")) {
    if (!v->is_array() || v->empty()) throw ScenarioError(f.at("poles"), "expected a non-empty array");
    for (std::size_t i = 0; i < v->size(); ++i) g.poles.push_back(pole((*v)[i], item(f.at("poles"), i)));
  }
  if (const json* v = f.optional("placement")) {
    const std::string s = text(*v, f.at("placement"));
    if (s == "generic") {
      g.placement = Placement::Generic;
    } else if (s == "decoupled") {
      g.placement = Placement::Decoupled;
    } else {
      throw ScenarioError(f.at("placement"), "expected 'generic' or 'decoupled'");
    }
  }
  if (const json* v = f.optional("seed")) {
    if (!v->is_number_unsigned()) throw ScenarioError(f.at("seed"), "expected a non-negative integer");
    g.seed = v->get<std::uint64_t>();
  }
  f.finish();
  if (g.L.has_value() == !g.poles.empty()) throw ScenarioError(path, "give exactly one of L or poles");
  return g;
}

inline SmoConfig smo(const json& j, const std::string& path) {
  Fields f(j, path);
  SmoConfig s;
  if (const json* v = f.optional("L")) s.L = matrix(*v, f.at("L"));
  if (const json* v = f.optional("Gn")) s.Gn = matrix(*v, f.at("Gn"));
  s.rho = number(f.require("rho"), f.at("rho"));
  if (const json* v = f.optional("boundary_layer")) s.boundary_layer = number(*v, f.at("boundary_layer"));
  f.finish();
  if (s.L.has_value() == s.Gn.has_value()) throw ScenarioError(path, "give exactly one of L or Gn");
  if (!(s.rho > 0.0)) throw ScenarioError(path + ".rho", "must be > 0");
  if (s.boundary_layer < 0.0) throw ScenarioError(path + ".boundary_layer", "must be >= 0");
  return s;
}

inline ObserverConfig observer(const json& j, const std::string& path) {
  Fields f(j, path);
  ObserverConfig o;
  o.name = text(f.require("name"), f.at("name"));
  if (o.name.empty() || o.name.find_first_of(",\n\" ") != std::string::npos) {
    throw ScenarioError(f.at("name"), "must be non-empty without spaces, commas or quotes");
  }
  try {
    o.kind = observer_kind_from_string(text(f.require("kind"), f.at("kind")));
  } catch (const ScenarioError&) {
    throw;
  } catch (const std::invalid_argument& e) {
    throw ScenarioError(f.at("kind"), e.what());
  }
  if (const json* v = f.optional("gain")) o.gain = gain(*v, f.at("gain"));
  if (const json* v = f.optional("h")) o.h = number(*v, f.at("h"));
  if (const json* v = f.optional("smo")) o.smo = smo(*v, f.at("smo"));
  if (const json* v = f.optional("order")) {
    if (!v->is_number_integer() || v->get<int>() < 1) throw ScenarioError(f.at("order"), "expected an integer >= 1");
    o.order = v->get<int>();
  }
  f.finish();
  if (uses_delay(o.kind) != o.h.has_value()) {
    throw ScenarioError(path, uses_delay(o.kind) ? "delay kinds need h" : "h given for a delay-free kind");
  }
  if (o.h && !(*o.h > 0.0)) throw ScenarioError(f.at("h"), "must be > 0");
  if (is_sliding_mode(o.kind) != o.smo.has_value()) {
    throw ScenarioError(path, is_sliding_mode(o.kind) ? "sliding-mode kinds need smo"
                                                      : "smo given for a non sliding-mode kind");
  }
  if (is_sliding_mode(o.kind) && o.gain) throw ScenarioError(f.at("gain"), "sliding-mode kinds take smo, not gain");
  return o;
}

inline NoiseSpec noise(const json& j, const std::string& path) {
  Fields f(j, path);
  NoiseSpec n;
  if (const json* v = f.optional("enabled")) n.enabled = boolean(*v, f.at("enabled"));
  if (const json* v = f.optional("relative_amplitude")) {
    n.relative_amplitude = number(*v, f.at("relative_amplitude"));
  }
  if (const json* v = f.optional("seed")) {
    if (!v->is_number_unsigned()) throw ScenarioError(f.at("seed"), "expected a non-negative integer");
    n.seed = v->get<std::uint64_t>();
  }
  if (const json* v = f.optional("distribution")) {
    const std::string s = text(*v, f.at("distribution"));
    if (s == "uniform") {
      n.distribution = NoiseDistribution::Uniform;
    } else if (s == "gaussian") {
      n.distribution = NoiseDistribution::Gaussian;
    } else {
      throw ScenarioError(f.at("distribution"), "expected 'uniform' or 'gaussian'");
    }
  }
  f.finish();
  try {
    n.validate();
  } catch (const std::invalid_argument& e) {
    throw ScenarioError(path, e.what());
  }
  return n;
}

inline void sim(const json& j, const std::string& path, SimConfig& cfg) {
  Fields f(j, path);
  cfg.dt = number(f.require("dt"), f.at("dt"));
  cfg.t_end = number(f.require("t_end"), f.at("t_end"));
  if (!(cfg.dt > 0.0)) throw ScenarioError(f.at("dt"), "must be > 0");
  if (!(cfg.t_end > 0.0)) throw ScenarioError(f.at("t_end"), "must be > 0");
  if (const json* v = f.optional("integrator")) {
    const std::string s = text(*v, f.at("integrator"));
    if (s == "rk4") {
      cfg.integrator = Integrator::RK4;
    } else if (s == "euler") {
      cfg.integrator = Integrator::Euler;
    } else {
      throw ScenarioError(f.at("integrator"), "expected 'rk4' or 'euler'");
    }
  }
  if (const json* v = f.optional("x0")) cfg.x0 = vector(*v, f.at("x0"));
  if (const json* v = f.optional("xhat0")) cfg.xhat0 = vector(*v, f.at("xhat0"));
  if (const json* v = f.optional("blowup_threshold")) {
    cfg.blowup_threshold = number(*v, f.at("blowup_threshold"));
    if (!(cfg.blowup_threshold > 0.0)) throw ScenarioError(f.at("blowup_threshold"), "must be > 0");
  }
  f.finish();
  try {
    grid_steps(cfg.t_end, cfg.dt, "t_end");
  } catch (const std::invalid_argument& e) {
    throw ScenarioError(f.at("t_end"), e.what());
  }
}

inline MetricsOptions metrics_options(const json& j, const std::string& path) {
  Fields f(j, path);
  MetricsOptions m;
  if (const json* v = f.optional("warmup_fraction")) m.warmup_fraction = number(*v, f.at("warmup_fraction"));
  if (const json* v = f.optional("settling_band")) m.settling_band = number(*v, f.at("settling_band"));
  f.finish();
  if (!(m.warmup_fraction >= 0.0 && m.warmup_fraction < 1.0)) {
    throw ScenarioError(f.at("warmup_fraction"), "must lie in [0, 1)");
  }
  if (!(m.settling_band > 0.0)) throw ScenarioError(f.at("settling_band"), "must be > 0");
  return m;
}

inline OutputConfig output(const json& j, const std::string& path) {
  Fields f(j, path);
  OutputConfig o;
  std::pair<const char*, std::string*> fields[] = {
      {"dir", &o.dir}, {"trace", &o.trace}, {"metrics", &o.metrics}, {"summary", &o.summary}};
  for (auto& [key, dst] : fields) {
    if (const json* v = f.optional(key)) *dst = text(*v, f.at(key));
  }
  f.finish();
  return o;
}

// -- writing ----------------------------------------------------------------

inline json to_json(const Matrix& m) {
  json rows = json::array();
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    json row = json::array();
    for (Eigen::Index c = 0; c < m.cols(); ++c) row.push_back(m(r, c));
    rows.push_back(std::move(row));
  }
  return rows;
}

inline json to_json(const Vector& v) {
  json out = json::array();
  for (Eigen::Index i = 0; i < v.size(); ++i) out.push_back(v(i));
  return out;
}

inline json to_json(const Segment& s) {
  json j;
  j["t_start"] = s.t_start;
  if (std::isfinite(s.t_end)) j["t_end"] = s.t_end;
  if (s.jump) j["jump"] = true;
  std::visit(
      [&](const auto& sh) {
        using S = std::decay_t<decltype(sh)>;
        if constexpr (std::is_same_v<S, shape::Constant>) {
          j["constant"] = sh.level;
        } else if constexpr (std::is_same_v<S, shape::Ramp>) {
          j["ramp"] = {{"level0", sh.level0}, {"slope", sh.slope}};
        } else {
          json terms = json::array();
          for (const auto& t : sh.terms) {
            terms.push_back({{"amplitude", t.amplitude}, {"omega", t.omega}, {"phase", t.phase}});
          }
          j["sine"] = {{"offset", sh.offset}, {"terms", terms}};
        }
      },
      s.shape);
  return j;
}

inline json to_json(const SignalProfile& p) {
  json chans = json::array();
  for (const auto& ch : p.all_segments()) {
    json segs = json::array();
    for (const auto& s : ch) segs.push_back(to_json(s));
    chans.push_back(std::move(segs));
  }
  return {{"channels", chans}};
}

inline json to_json(const DcDriveParams& p) {
  return {{"R", p.R}, {"L", p.L}, {"Kv", p.Kv}, {"Ktau", p.Ktau}, {"J", p.J}, {"f", p.f}};
}

inline json to_json(const MatrixSet& m) {
  json j{{"A", to_json(m.A)}, {"C", to_json(m.C)}, {"D", to_json(m.D)}};
  if (m.B.cols() > 0) j["B"] = to_json(m.B);
  return j;
}

inline json to_json(const GainConfig& g) {
  json j;
  if (g.L) {
    j["L"] = to_json(*g.L);
  } else {
    json poles = json::array();
    for (const Complex& z : g.poles) {
      if (z.imag() == 0.0) {
        poles.push_back(z.real());
      } else {
        poles.push_back({z.real(), z.imag()});
      }
    }
    j["poles"] = poles;
    j["placement"] = g.placement == Placement::Decoupled ? "decoupled" : "generic";
    j["seed"] = g.seed;
  }
  return j;
}

}  // namespace detail

// ---------------------------------------------------------------------------

inline Scenario parse_scenario(const nlohmann::json& j) {
  using namespace detail;
  Fields f(j, "");
  Scenario s;
  s.name = text(f.require("name"), "name");
  if (const json* v = f.optional("description")) s.description = text(*v, "description");
  s.plant = plant(f.require("plant"), "plant");
  const UncertainPlant up = s.plant.build();

  if (const json* v = f.optional("input")) {
    s.input = profile(*v, "input");
  } else {
    s.input = SignalProfile::constant(Vector::Zero(up.truth().m()));
  }
  if (s.input.channels() != up.truth().m()) {
    throw ScenarioError("input.channels", "expected " + std::to_string(up.truth().m()) + " channel(s)");
  }
  s.disturbance = profile(f.require("disturbance"), "disturbance");
  if (s.disturbance.channels() != up.truth().q()) {
    throw ScenarioError("disturbance.channels",
                        "expected " + std::to_string(up.truth().q()) + " channel(s), one per truth disturbance input");
  }

  if (const json* v = f.optional("gain")) s.gain = gain(*v, "gain");
  const json& obs = f.require("observers");
  if (!obs.is_array() || obs.empty()) throw ScenarioError("observers", "expected a non-empty array");
  for (std::size_t i = 0; i < obs.size(); ++i) {
    ObserverConfig o = observer(obs[i], item("observers", i));
    for (const auto& prev : s.observers) {
      if (prev.name == o.name) throw ScenarioError(item("observers", i) + ".name", "duplicate name '" + o.name + "'");
    }
    if (!is_sliding_mode(o.kind) && !o.gain && !s.gain) {
      throw ScenarioError(item("observers", i), "no gain given and no scenario-level gain to fall back on");
    }
    s.observers.push_back(std::move(o));
  }

  detail::sim(f.require("sim"), "sim", s.sim);
  if (const json* v = f.optional("noise")) s.sim.noise = noise(*v, "noise");
  if (const json* v = f.optional("metrics")) s.metrics = metrics_options(*v, "metrics");
  if (const json* v = f.optional("sweep")) {
    Fields sf(*v, "sweep");
    SweepConfig sw;
    sw.observer = text(sf.require("observer"), "sweep.observer");
    sw.h = numbers(sf.require("h"), "sweep.h");
    sf.finish();
    const auto it = std::find_if(s.observers.begin(), s.observers.end(),
                                 [&](const ObserverConfig& o) { return o.name == sw.observer; });
    if (it == s.observers.end()) throw ScenarioError("sweep.observer", "no observer named '" + sw.observer + "'");
    if (!uses_delay(it->kind)) throw ScenarioError("sweep.observer", "must name a delay observer");
    s.sweep = std::move(sw);
  }
  if (const json* v = f.optional("output")) s.output = output(*v, "output");
  f.finish();
  return s;
}

/// Parses JSON text; comments are allowed.
inline Scenario parse_scenario(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text, nullptr, true, true);
  } catch (const nlohmann::json::parse_error& e) {
    throw ScenarioError("", std::string("syntax error: ") + e.what());
  }
  return parse_scenario(j);
}

inline Scenario load_scenario(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open scenario file '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_scenario(ss.str());
}

inline nlohmann::json to_json(const Scenario& s) {
  using detail::to_json;
  using nlohmann::json;
  json j;
  j["name"] = s.name;
  if (!s.description.empty()) j["description"] = s.description;

  json plant;
  if (s.plant.source == PlantConfig::Source::DcDrive) {
    plant["preset"] = "dc_drive";
    plant["observer_params"] = s.plant.observer_params == ParamSet::Real ? "real" : "nominal";
    plant["disturbance_map"] = s.plant.disturbance_map == DcDisturbanceMap::Lumped ? "lumped" : "torque";
    plant["real"] = to_json(s.plant.dc.real);
    plant["nominal"] = to_json(s.plant.dc.nominal);
  } else {
    plant["truth"] = to_json(*s.plant.truth);
    if (s.plant.model) plant["model"] = to_json(*s.plant.model);
  }
  j["plant"] = plant;
  j["input"] = to_json(s.input);
  j["disturbance"] = to_json(s.disturbance);
  if (s.gain) j["gain"] = to_json(*s.gain);

  json obs = json::array();
  for (const auto& o : s.observers) {
    json oj{{"name", o.name}, {"kind", deso::to_string(o.kind)}};
    if (o.gain) oj["gain"] = to_json(*o.gain);
    if (o.h) oj["h"] = *o.h;
    if (o.smo) {
      json sj{{"rho", o.smo->rho}, {"boundary_layer", o.smo->boundary_layer}};
      if (o.smo->L) sj["L"] = to_json(*o.smo->L);
      if (o.smo->Gn) sj["Gn"] = to_json(*o.smo->Gn);
      oj["smo"] = sj;
    }
    if (o.order != 1) oj["order"] = o.order;
    obs.push_back(std::move(oj));
  }
  j["observers"] = obs;

  json sim{{"dt", s.sim.dt},
           {"t_end", s.sim.t_end},
           {"integrator", s.sim.integrator == Integrator::RK4 ? "rk4" : "euler"},
           {"blowup_threshold", s.sim.blowup_threshold}};
  if (s.sim.x0.size()) sim["x0"] = to_json(s.sim.x0);
  if (s.sim.xhat0.size()) sim["xhat0"] = to_json(s.sim.xhat0);
  j["sim"] = sim;
  j["noise"] = {{"enabled", s.sim.noise.enabled},
                {"relative_amplitude", s.sim.noise.relative_amplitude},
                {"seed", s.sim.noise.seed},
                {"distribution", s.sim.noise.distribution == NoiseDistribution::Uniform ? "uniform" : "gaussian"}};
  j["metrics"] = {{"warmup_fraction", s.metrics.warmup_fraction}, {"settling_band", s.metrics.settling_band}};
  if (s.sweep) j["sweep"] = {{"observer", s.sweep->observer}, {"h", s.sweep->h}};
  j["output"] = {{"dir", s.output.dir},
                 {"trace", s.output.trace},
                 {"metrics", s.output.metrics},
                 {"summary", s.output.summary}};
  return j;
}

// ---------------------------------------------------------------------------
// Turning a scenario into runnable pieces.

struct DesignedObserver {
  ObserverSpec spec;
  std::optional<GainDesign> design;  // set when the gain came from pole placement
};

struct PreparedScenario {
  UncertainPlant plant;
  std::vector<DesignedObserver> observers;
  SimConfig sim;

  std::vector<ObserverSpec> specs() const {
    std::vector<ObserverSpec> out;
    for (const auto& o : observers) out.push_back(o.spec);
    return out;
  }
};

/// Gain for one observer. The integral-output kind places the poles of Abar + L C2.
inline GainDesign design_gain(const UncertainPlant& plant, const ObserverConfig& o, const GainConfig& g) {
  const ExtendedSystem ext = build_extended(plant.model(), o.order);
  if (o.kind == ObserverKind::IntegralOutputDelayEso) {
    const IntegralOutputSystem io = IntegralOutputSystem::build(plant.model());
    if (g.placement == Placement::Decoupled) {
      throw std::invalid_argument("decoupled placement is not available for the integral-output observer");
    }
    return place_poles(ext.Abar, io.C2, g.poles, g.seed);
  }
  if (g.placement == Placement::Decoupled) return place_poles_decoupled(ext, g.poles);
  const auto obs = pbh_observability(ext);
  if (!obs.observable) {
    throw UnobservableError("observer '" + o.name + "': extended system is not observable (PBH fails at " +
                            std::to_string(obs.deficient_eigenvalue->real()) + ")");
  }
  return place_poles(ext.Abar, ext.Cbar, g.poles, g.seed);
}

inline PreparedScenario prepare(const Scenario& s) {
  PreparedScenario out{s.plant.build(), {}, s.sim};
  for (std::size_t i = 0; i < s.observers.size(); ++i) {
    const auto& o = s.observers[i];
    const std::string where = "observers[" + std::to_string(i) + "]";
    DesignedObserver d;
    d.spec.name = o.name;
    d.spec.kind = o.kind;
    d.spec.h = o.h;
    d.spec.order = o.order;
    if (o.smo) {
      const auto p = out.plant.model().p();
      if (o.smo->Gn) {
        d.spec.smo = SmoParams{*o.smo->Gn, o.smo->rho, o.smo->boundary_layer};
      } else {
        if (o.smo->L->rows() != out.plant.model().n() || o.smo->L->cols() != p) {
          throw ScenarioError(where + ".smo.L", "must be n x p");
        }
        d.spec.smo = SmoParams::from_state_gain(*o.smo->L, o.smo->rho, o.smo->boundary_layer);
      }
    } else {
      const GainConfig& g = o.gain ? *o.gain : *s.gain;
      if (g.L) {
        d.spec.L = *g.L;
      } else {
        try {
          d.design = design_gain(out.plant, o, g);
        } catch (const UnobservableError&) {
          throw;
        } catch (const std::invalid_argument& e) {
          throw ScenarioError(where + ".gain", e.what());
        }
        d.spec.L = d.design->L;
      }
    }
    out.observers.push_back(std::move(d));
  }
  return out;
}

/// Full consistency check without running: builds every observer and checks
/// profile coverage, delay divisibility and initial-state sizes.
inline void validate(const Scenario& s, const PreparedScenario& p) {
  for (std::size_t i = 0; i < p.observers.size(); ++i) {
    const auto& spec = p.observers[i].spec;
    if (spec.h) {
      try {
        detail::grid_steps(*spec.h, s.sim.dt, "h");
      } catch (const std::invalid_argument& e) {
        throw ScenarioError("observers[" + std::to_string(i) + "].h", e.what());
      }
    }
    const auto N = p.plant.model().n() + spec.order * p.plant.model().q();
    const Vector xhat0 = s.sim.xhat0.size() ? s.sim.xhat0 : Vector::Zero(N);
    try {
      Observer(spec, p.plant.model(), s.sim.dt, xhat0);
    } catch (const std::invalid_argument& e) {
      throw ScenarioError("observers[" + std::to_string(i) + "]", e.what());
    }
  }
  if (s.sim.x0.size() && s.sim.x0.size() != p.plant.truth().n()) {
    throw ScenarioError("sim.x0", "expected length " + std::to_string(p.plant.truth().n()));
  }
  for (const auto& [prof, name] : {std::pair{&s.input, "input"}, std::pair{&s.disturbance, "disturbance"}}) {
    if (prof->t_begin() > 0.0 || prof->t_finish() < s.sim.t_end) {
      throw ScenarioError(name, "segments must cover [0, sim.t_end]");
    }
  }
  if (s.sweep) {
    for (std::size_t i = 0; i < s.sweep->h.size(); ++i) {
      try {
        detail::grid_steps(s.sweep->h[i], s.sim.dt, "h");
      } catch (const std::invalid_argument& e) {
        throw ScenarioError(detail::item("sweep.h", i), e.what());
      }
    }
  }
}

}  // namespace deso
