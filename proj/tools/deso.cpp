#include "deso/gain.hpp"
#include "deso/scenario.hpp"
#include "deso/sim.hpp"

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

namespace fs = std::filesystem;
using namespace deso;

namespace {

enum Exit : int { kOk = 0, kError = 1, kInvalid = 2, kUnobservable = 3, kDiverged = 4 };

#ifndef DESO_SCENARIO_DIR
#define DESO_SCENARIO_DIR "scenarios"
#endif

struct Options {
  std::string scenario;
  std::string out;
  std::optional<std::uint64_t> seed;
  std::vector<double> h;
  std::string observer;
  std::string write_gains;
  double kappa = 2.0;
};

// Bundled scenarios can be named without a path or extension.
std::string resolve(const std::string& name) {
  if (fs::exists(name)) return name;
  for (const fs::path& candidate : {fs::path(DESO_SCENARIO_DIR) / name,
                                   fs::path(DESO_SCENARIO_DIR) / (name + ".json")}) {
    if (fs::exists(candidate)) return candidate.string();
  }
  throw std::runtime_error("scenario '" + name + "' not found");
}

Scenario load(const Options& o) {
  Scenario s = load_scenario(resolve(o.scenario));
  if (o.seed) s.sim.noise.seed = *o.seed;
  if (!o.observer.empty()) {
    std::vector<ObserverConfig> kept;
    for (const auto& ob : s.observers) {
      if (ob.name.find(o.observer) != std::string::npos) kept.push_back(ob);
    }
    if (kept.empty()) throw ScenarioError("observers", "no observer matches '" + o.observer + "'");
    s.observers = std::move(kept);
    if (s.sweep && std::none_of(s.observers.begin(), s.observers.end(), [&](const auto& ob) { return ob.name == s.sweep->observer; })) {
      s.sweep.reset();
    }
  }
  return s;
}

fs::path out_dir(const Options& o, const Scenario& s) {
  fs::path dir = o.out.empty() ? fs::path(s.output.dir) : fs::path(o.out);
  fs::create_directories(dir);
  return dir;
}

void write_file(const fs::path& path, const std::string& content) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot write '" + path.string() + "'");
  f << content;
  if (!f) throw std::runtime_error("write failed for '" + path.string() + "'");
}

std::string format(const Matrix& m) {
  Eigen::IOFormat fmt(6, 0, ", ", "\n", "    [", "]");
  std::ostringstream os;
  os << m.format(fmt);
  return os.str();
}

std::string format(const std::vector<Complex>& zs) {
  std::ostringstream os;
  os << std::setprecision(6);
  for (std::size_t i = 0; i < zs.size(); ++i) {
    if (i) os << ", ";
    os << zs[i].real();
    if (zs[i].imag() != 0.0) os << (zs[i].imag() > 0 ? "+" : "-") << std::abs(zs[i].imag()) << "j";
  }
  return os.str();
}

int cmd_check(const Options& o) {
  const Scenario s = load(o);
  const PreparedScenario p = prepare(s);
  validate(s, p);
  const auto& model = p.plant.model();
  std::cout << "scenario " << s.name << ": n=" << model.n() << " m=" << model.m() << " p=" << model.p()
            << " q=" << model.q() << ", " << s.observers.size() << " observer(s)\n";
  int code = kOk;
  for (const auto& d : p.observers) {
    const ExtendedSystem ext = build_extended(model, d.spec.order);
    std::cout << "  " << d.spec.name << " (" << to_string(d.spec.kind) << "): ";
    const auto rep = pbh_observability(ext);
    if (rep.observable) {
      std::cout << "observable";
    } else {
      std::cout << "NOT observable, PBH rank " << rep.rank_at_witness << " < " << ext.N() << " at lambda = "
                << format(std::vector<Complex>{*rep.deficient_eigenvalue});
      code = kUnobservable;
    }
    if (d.spec.kind == ObserverKind::IntegralOutputDelayEso) {
      const IntegralOutputSystem io = IntegralOutputSystem::build(model);
      const auto with_integral = pbh_observability(ext.Abar, io.C2);
      std::cout << "; with the window integral " << (with_integral.observable ? "observable" : "NOT observable")
                << ", margin " << integral_output_margin(ext, io, d.spec.L) << "\n";
      continue;
    }
    if (!is_sliding_mode(d.spec.kind)) {
      std::cout << ", closed loop " << (linalg::is_hurwitz(ext.Abar + d.spec.L * ext.Cbar) ? "Hurwitz" : "NOT Hurwitz");
    }
    std::cout << "\n";
  }
  std::cout << (code == kOk ? "ok\n" : "unobservable extension\n");
  return code;
}

int cmd_design(const Options& o) {
  const Scenario s = load(o);
  const PreparedScenario p = prepare(s);
  const auto& model = p.plant.model();
  std::cout << std::setprecision(6);
  for (const auto& d : p.observers) {
    const ExtendedSystem ext = build_extended(model, d.spec.order);
    std::cout << d.spec.name << " (" << to_string(d.spec.kind) << ")\n";
    if (d.spec.smo) {
      std::cout << "  Gn =\n" << format(d.spec.smo->Gn) << "\n  rho = " << d.spec.smo->rho
                << "  boundary_layer = " << d.spec.smo->boundary_layer << "\n";
      continue;
    }
    std::cout << "  L =\n" << format(d.spec.L) << "\n";
    Matrix cbar = ext.Cbar;
    if (d.spec.kind == ObserverKind::IntegralOutputDelayEso) {
      const IntegralOutputSystem io = IntegralOutputSystem::build(model);
      cbar = io.C2;
      std::cout << "  integral-output margin = " << integral_output_margin(ext, io, d.spec.L) << "\n";
    }
    const Matrix acl = ext.Abar + d.spec.L * cbar;
    const auto eig = linalg::to_std(linalg::eigenvalues(acl));
    std::cout << "  eig(Abar + L C) = " << format(eig) << "\n";
    if (d.design) std::cout << "  placement error = " << d.design->placement_error << "\n";
    if (!linalg::is_hurwitz(acl)) {
      std::cout << "  closed loop is not Hurwitz; no Lyapunov analysis\n";
      continue;
    }
    const Matrix q = Matrix::Identity(ext.N(), ext.N());
    const Matrix P = solve_lyapunov(acl, q);
    const RazumikhinAnalysis a = razumikhin_constants(P, q, ext.D2, o.kappa);
    std::cout << "  Lyapunov residual = " << lyapunov_residual(acl, P, q) << "\n"
              << "  c3 = " << a.c3 << "  c4 = " << a.c4 << "  c5 = " << a.c5 << "  (kappa = " << a.kappa
              << ")\n"
              << "  h* = " << a.h_star << "\n";
  }
  if (!o.write_gains.empty()) {
    Scenario out = s;
    for (std::size_t i = 0; i < out.observers.size(); ++i) {
      auto& ob = out.observers[i];
      if (ob.smo) continue;
      GainConfig g;
      g.L = p.observers[i].spec.L;
      ob.gain = g;
    }
    out.gain.reset();
    write_file(o.write_gains, to_json(out).dump(2) + "\n");
  }
  return kOk;
}

int cmd_run(const Options& o) {
  const Scenario s = load(o);
  const PreparedScenario p = prepare(s);
  validate(s, p);
  const SimulationTrace trace = simulate(p.plant, s.input, s.disturbance, p.specs(), p.sim);
  const SegmentMetrics m = metrics(trace, s.disturbance, s.metrics);

  const fs::path dir = out_dir(o, s);
  {
    std::ofstream f(dir / s.output.trace);
    if (!f) throw std::runtime_error("cannot write trace in '" + dir.string() + "'");
    write_trace_csv(f, trace);
  }
  std::ostringstream csv, summary;
  write_metrics_csv(csv, m);
  write_metrics_summary(summary, m);
  write_file(dir / s.output.metrics, csv.str());
  write_file(dir / s.output.summary, summary.str());
  std::cout << summary.str();
  std::cout << "wrote " << (dir / s.output.trace).string() << "\n";
  if (trace.diverged) {
    std::cerr << "diverged: observer " << trace.diverged_observer << " at t = "
              << static_cast<double>(*trace.diverged_at_step) * s.sim.dt << " s\n";
    return kDiverged;
  }
  return kOk;
}

int cmd_sweep(const Options& o) {
  Scenario s = load(o);
  const PreparedScenario p = prepare(s);
  validate(s, p);
  const DesignedObserver* base = nullptr;
  const std::string wanted = s.sweep ? s.sweep->observer : "";
  for (const auto& d : p.observers) {
    if (!uses_delay(d.spec.kind)) continue;
    if (!base || d.spec.name == wanted) base = &d;
  }
  if (!base) throw ScenarioError("observers", "sweep needs a delay observer");
  std::vector<double> hs = o.h.empty() && s.sweep ? s.sweep->h : o.h;
  if (hs.empty()) throw ScenarioError("sweep.h", "no delay values given (use --h)");

  const auto rows = sweep_delay(p.plant, s.input, s.disturbance, base->spec, p.sim, hs, s.metrics);
  std::ostringstream csv;
  csv << "h,stable,diverged_at";
  const std::size_t segs = rows.empty() ? 0 : rows.front().segment_rms.size();
  for (std::size_t i = 0; i < segs; ++i) csv << ",rms_segment" << i;
  csv << '\n';
  std::cout << "sweep of " << base->spec.name << " (" << to_string(base->spec.kind) << ")\n";
  std::cout << std::setw(10) << "h" << std::setw(9) << "stable";
  for (std::size_t i = 0; i < segs; ++i) std::cout << std::setw(14) << ("rms[" + std::to_string(i) + "]");
  std::cout << "\n";
  for (const auto& r : rows) {
    csv << r.h << ',' << (r.stable ? 1 : 0) << ',';
    if (r.diverged_at_step) csv << static_cast<double>(*r.diverged_at_step) * s.sim.dt;
    std::cout << std::setw(10) << r.h << std::setw(9) << (r.stable ? "yes" : "no");
    for (double v : r.segment_rms) {
      csv << ',' << v;
      std::cout << std::setw(14) << v;
    }
    csv << '\n';
    std::cout << "\n";
  }
  const fs::path dir = out_dir(o, s);
  write_file(dir / "sweep.csv", csv.str());
  std::cout << "wrote " << (dir / "sweep.csv").string() << "\n";
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Extended state observers with an artificial delay"};
  app.set_help_flag("--help", "print this help and exit");
  app.require_subcommand(1);
  Options o;

  auto common = [&](CLI::App* sub) {
    sub->add_option("--scenario", o.scenario, "scenario file or bundled scenario name")->required();
    sub->add_option("--observer", o.observer, "keep only observers whose name contains this text");
    sub->add_option("--seed", o.seed, "override the noise seed");
  };
  auto* check = app.add_subcommand("check", "validate a scenario and report observability");
  common(check);
  auto* design = app.add_subcommand("design", "print gains and stability constants");
  common(design);
  design->add_option("--write-gains", o.write_gains, "write the scenario with every gain made explicit");
  design->add_option("--kappa", o.kappa, "Razumikhin ratio kappa > 1")->capture_default_str();
  auto* run = app.add_subcommand("run", "simulate and write trace and metrics");
  common(run);
  run->add_option("--out", o.out, "output directory");
  auto* sweep = app.add_subcommand("sweep", "rerun one delay observer over a list of h");
  common(sweep);
  sweep->add_option("--out", o.out, "output directory");
  sweep->set_help_flag("--help", "print this help and exit");
  sweep->add_option("--h", o.h, "delay values, comma separated")->delimiter(',');

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kInvalid;
  }

  try {
    if (*check) return cmd_check(o);
    if (*design) return cmd_design(o);
    if (*run) return cmd_run(o);
    if (*sweep) return cmd_sweep(o);
  } catch (const UnobservableError& e) {
    std::cerr << "unobservable: " << e.what() << "\n";
    return kUnobservable;
  } catch (const std::invalid_argument& e) {
    std::cerr << "invalid: " << e.what() << "\n";
    return kInvalid;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kError;
  }
  return kError;
}
