#pragma once

#include "deso/linalg.hpp"
#include "deso/model.hpp"
#include "deso/observers.hpp"
#include "deso/signals.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <future>
#include <limits>
#include <optional>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

namespace deso {

struct SimConfig {
  double dt = 1e-3;
  double t_end = 1.0;
  Integrator integrator = Integrator::RK4;
  Vector x0;     // plant initial state
  Vector xhat0;  // initial estimate; empty = zeros
  NoiseSpec noise;
  double blowup_threshold = 1e9;
  std::size_t max_samples = 20'000'000;
};

struct ObserverTrace {
  std::string name;
  Matrix xhat;      // samples x N
  Matrix err;       // samples x N, Xhat - [x; d; ...]
  Vector err_norm;  // samples
};

struct SimulationTrace {
  Vector t;
  Matrix x;  // samples x n
  Matrix y;  // samples x p (as measured)
  Matrix d;  // samples x q (lumped disturbance of the observer model)
  std::vector<ObserverTrace> observers;
  bool diverged = false;
  std::optional<std::size_t> diverged_at_step;
  std::string diverged_observer;

  Eigen::Index samples() const { return t.size(); }

  const ObserverTrace& observer(const std::string& name) const {
    for (const auto& o : observers) {
      if (o.name == name) return o;
    }
    throw std::out_of_range("no observer named '" + name + "' in trace");
  }
};

namespace detail {

inline long grid_steps(double span, double dt, const char* what) {
  const double ratio = span / dt;
  const long k = std::lround(ratio);
  if (k < 1 || std::abs(ratio - static_cast<double>(k)) > 1e-9 * std::max(1.0, ratio)) {
    throw std::invalid_argument(std::string(what) + " must be a positive integer multiple of dt");
  }
  return k;
}

// Running window integral of W = y + C A^-1 B u over [t - h, t], trapezoid on the grid.
class WindowIntegral {
 public:
  WindowIntegral(long window_steps, double dt, const Vector& w0)
      : window_(window_steps), dt_(dt), w0_(w0), cumulative_(static_cast<std::size_t>(window_steps + 1)) {
    cumulative_[0] = Vector::Zero(w0.size());
    last_w_ = w0;
    count_ = 1;
  }

  /// J at the latest pushed grid index.
  Vector current() const { return window_at(count_ - 1); }

  void push(const Vector& w) {
    Vector s = cumulative(count_ - 1) + 0.5 * dt_ * (last_w_ + w);
    cumulative_[static_cast<std::size_t>(count_) % cumulative_.size()] = std::move(s);
    last_w_ = w;
    ++count_;
  }

 private:
  // pre-history holds W constant at its initial value
  Vector cumulative(long index) const {
    if (index < 0) return static_cast<double>(index) * dt_ * w0_;
    return cumulative_[static_cast<std::size_t>(index) % cumulative_.size()];
  }
  Vector window_at(long index) const { return cumulative(index) - cumulative(index - window_); }

  long window_;
  double dt_;
  Vector w0_;
  std::vector<Vector> cumulative_;
  Vector last_w_;
  long count_ = 0;
};

}  // namespace detail

/// Fixed-step co-simulation. The truth is advanced first over each step; every
/// observer then integrates the same step using the truth's stage outputs
/// (measurement noise held over the step) and the known input.
inline SimulationTrace simulate(const UncertainPlant& plant, const SignalProfile& input,
                                const SignalProfile& disturbance,
                                const std::vector<ObserverSpec>& specs, const SimConfig& cfg) {
  const LtiPlant& truth = plant.truth();
  const LtiPlant& model = plant.model();
  const auto n = truth.n(), p = truth.p(), q = model.q();
  if (!(cfg.dt > 0.0)) throw std::invalid_argument("dt must be > 0");
  const long steps = detail::grid_steps(cfg.t_end, cfg.dt, "t_end");
  if (static_cast<std::size_t>(steps + 1) > cfg.max_samples) {
    throw std::invalid_argument("t_end / dt exceeds the trace budget");
  }
  if (input.channels() != truth.m()) throw DimensionError("input profile must have m channels");
  if (disturbance.channels() != truth.q()) {
    throw DimensionError("disturbance profile must have one channel per truth disturbance input");
  }
  for (const auto* prof : {&input, &disturbance}) {
    if (prof->t_begin() > 0.0 || prof->t_finish() < cfg.t_end) {
      throw std::invalid_argument("signal profiles must cover [0, t_end]");
    }
  }
  Vector x = cfg.x0.size() ? cfg.x0 : Vector::Zero(n);
  if (x.size() != n) throw DimensionError("x0 must have length n");
  cfg.noise.validate();

  std::vector<Observer> observers;
  std::vector<std::optional<detail::WindowIntegral>> windows;
  int max_order = 1;
  for (const auto& spec : specs) {
    const auto N = model.n() + spec.order * q;
    Vector xhat0 = cfg.xhat0.size() ? cfg.xhat0 : Vector::Zero(N);
    if (xhat0.size() != N) {
      throw DimensionError("initial estimate length does not match observer '" + spec.name + "'");
    }
    observers.emplace_back(spec, model, cfg.dt, xhat0, cfg.blowup_threshold);
    max_order = std::max(max_order, spec.order);
  }
  for (std::size_t i = 0; i < specs.size(); ++i) {
    for (std::size_t j = 0; j < i; ++j) {
      if (specs[i].name == specs[j].name) {
        throw std::invalid_argument("duplicate observer name '" + specs[i].name + "'");
      }
    }
  }

  SimulationTrace trace;
  const Eigen::Index rows = steps + 1;
  trace.t.resize(rows);
  trace.x.resize(rows, n);
  trace.y.resize(rows, p);
  trace.d.resize(rows, q);
  for (const auto& obs : observers) {
    const auto N = obs.extended().N();
    trace.observers.push_back({obs.spec().name, Matrix(rows, N), Matrix(rows, N), Vector(rows)});
  }

  NoiseGenerator noise(cfg.noise, p);

  auto derivs = [](const SignalProfile& prof, double t, int count) {
    std::vector<Vector> out;
    for (int k = 0; k < count; ++k) out.push_back(prof.derivative(t, k));
    return out;
  };

  auto record = [&](Eigen::Index row, double t, const Vector& xs, const Vector& ys) {
    trace.t(row) = t;
    trace.x.row(row) = xs.transpose();
    trace.y.row(row) = ys.transpose();
    const auto dd = plant.lumped_derivatives(xs, derivs(input, t, max_order),
                                             derivs(disturbance, t, max_order), max_order);
    trace.d.row(row) = dd[0].transpose();
    for (std::size_t i = 0; i < observers.size(); ++i) {
      const auto& obs = observers[i];
      const auto& ext = obs.extended();
      Vector truth_ext(ext.N());
      truth_ext.head(n) = xs;
      for (int r = 0; r < ext.order; ++r) truth_ext.segment(n + r * q, q) = dd[static_cast<std::size_t>(r)];
      auto& ot = trace.observers[i];
      ot.xhat.row(row) = obs.state().transpose();
      const Vector e = obs.state() - truth_ext;
      ot.err.row(row) = e.transpose();
      ot.err_norm(row) = e.norm();
    }
  };

  Vector y = noise.apply(truth.C() * x);
  auto w_of = [&](const Observer& obs, const Vector& ys, const Vector& u) {
    return Vector(ys + obs.integral_output()->CAinvB * u);
  };
  for (std::size_t i = 0; i < observers.size(); ++i) {
    if (observers[i].spec().kind == ObserverKind::IntegralOutputDelayEso) {
      windows.emplace_back(detail::WindowIntegral(observers[i].delay_steps(), cfg.dt,
                                                  w_of(observers[i], y, input.eval(0.0))));
    } else {
      windows.emplace_back(std::nullopt);
    }
  }
  record(0, 0.0, x, y);

  const bool rk4 = cfg.integrator == Integrator::RK4;
  const std::array<double, 4> c = {0.0, 0.5, 0.5, 1.0};
  const int stages = rk4 ? 4 : 1;
  StepInputs in;
  std::array<Vector, 4> xs;

  for (long k = 0; k < steps; ++k) {
    const double t = static_cast<double>(k) * cfg.dt;
    const Vector noise_k = y - truth.C() * x;

    auto f = [&](const Vector& xv, double ts, Vector& u_out) {
      u_out = input.eval(ts);
      return Vector(truth.A() * xv + truth.B() * u_out + truth.D() * disturbance.eval(ts));
    };
    Vector x_next;
    if (rk4) {
      xs[0] = x;
      const Vector k1 = f(xs[0], t, in.u[0]);
      xs[1] = x + 0.5 * cfg.dt * k1;
      const Vector k2 = f(xs[1], t + 0.5 * cfg.dt, in.u[1]);
      xs[2] = x + 0.5 * cfg.dt * k2;
      const Vector k3 = f(xs[2], t + 0.5 * cfg.dt, in.u[2]);
      xs[3] = x + cfg.dt * k3;
      const Vector k4 = f(xs[3], t + cfg.dt, in.u[3]);
      x_next = x + (cfg.dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
    } else {
      xs[0] = x;
      const Vector k1 = f(xs[0], t, in.u[0]);
      x_next = x + cfg.dt * k1;
    }
    for (int s = 0; s < stages; ++s) in.y[s] = truth.C() * xs[s] + noise_k;

    const double t_next = static_cast<double>(k + 1) * cfg.dt;
    const Vector y_next = noise.apply(truth.C() * x_next);

    bool diverged = false;
    for (std::size_t i = 0; i < observers.size(); ++i) {
      auto& obs = observers[i];
      if (windows[i]) {
        const Vector j0 = windows[i]->current();
        windows[i]->push(w_of(obs, y_next, input.eval(t_next)));
        const Vector j1 = windows[i]->current();
        for (int s = 0; s < stages; ++s) in.y_int[s] = (1.0 - c[s]) * j0 + c[s] * j1;
      }
      obs.step(in, cfg.integrator);
      if (obs.diverged() && !diverged) {
        diverged = true;
        trace.diverged_observer = obs.spec().name;
      }
    }
    x = x_next;
    y = y_next;
    if (diverged) {
      trace.diverged = true;
      trace.diverged_at_step = static_cast<std::size_t>(k + 1);
      const Eigen::Index keep = k + 1;
      trace.t.conservativeResize(keep);
      trace.x.conservativeResize(keep, Eigen::NoChange);
      trace.y.conservativeResize(keep, Eigen::NoChange);
      trace.d.conservativeResize(keep, Eigen::NoChange);
      for (auto& ot : trace.observers) {
        ot.xhat.conservativeResize(keep, Eigen::NoChange);
        ot.err.conservativeResize(keep, Eigen::NoChange);
        ot.err_norm.conservativeResize(keep);
      }
      return trace;
    }
    record(k + 1, t_next, x, y);
  }
  return trace;
}

// ---------------------------------------------------------------------------

struct MetricsOptions {
  double warmup_fraction = 0.25;  // leading share of each segment excluded from rms
  double settling_band = 0.02;    // fraction of the segment's max |d|
};

struct SegmentMetric {
  double t_start = 0.0;
  double t_end = 0.0;
  std::size_t samples = 0;  // post-warm-up samples
  double rms_error = NAN;
  double final_error = NAN;
  std::optional<double> settling_time;  // relative to t_start
  Vector channel_rms;                   // per extended coordinate
  Vector channel_final;
};

struct ObserverMetrics {
  std::string name;
  std::vector<SegmentMetric> segments;
};

struct SegmentMetrics {
  std::vector<ObserverMetrics> observers;

  const ObserverMetrics& observer(const std::string& name) const {
    for (const auto& o : observers) {
      if (o.name == name) return o;
    }
    throw std::out_of_range("no metrics for observer '" + name + "'");
  }
};

inline SegmentMetrics metrics(const SimulationTrace& trace, const SignalProfile& profile,
                              const MetricsOptions& opt = {}) {
  if (trace.samples() == 0) throw std::invalid_argument("metrics: empty trace");
  const double t_first = trace.t(0), t_last = trace.t(trace.samples() - 1);
  std::vector<double> cuts = profile.breakpoints(t_first, t_last);
  if (cuts.size() < 2) cuts = {t_first, t_last};

  SegmentMetrics out;
  for (const auto& ot : trace.observers) {
    ObserverMetrics om{ot.name, {}};
    const auto N = ot.err.cols();
    for (std::size_t s = 0; s + 1 < cuts.size(); ++s) {
      SegmentMetric m;
      m.t_start = cuts[s];
      m.t_end = cuts[s + 1];
      const bool last = s + 2 == cuts.size();
      const double t_keep = m.t_start + opt.warmup_fraction * (m.t_end - m.t_start);
      auto in_segment = [&](double t) { return t >= m.t_start && (t < m.t_end || (last && t <= m.t_end)); };

      double sum_sq = 0.0, d_max = 0.0;
      Vector ch_sq = Vector::Zero(N);
      Eigen::Index final_row = -1, first_row = -1;
      for (Eigen::Index r = 0; r < trace.samples(); ++r) {
        const double t = trace.t(r);
        if (!in_segment(t)) continue;
        if (first_row < 0) first_row = r;
        final_row = r;
        if (trace.d.cols() > 0) d_max = std::max(d_max, trace.d.row(r).norm());
        if (t + 1e-12 < t_keep) continue;
        sum_sq += ot.err_norm(r) * ot.err_norm(r);
        ch_sq += ot.err.row(r).transpose().cwiseAbs2();
        ++m.samples;
      }
      if (m.samples > 0) {
        m.rms_error = std::sqrt(sum_sq / static_cast<double>(m.samples));
        m.channel_rms = (ch_sq / static_cast<double>(m.samples)).cwiseSqrt();
      } else {
        m.channel_rms = Vector::Constant(N, NAN);
      }
      if (final_row >= 0) {
        m.final_error = ot.err_norm(final_row);
        m.channel_final = ot.err.row(final_row).transpose().cwiseAbs();
        const double band = opt.settling_band * d_max;
        Eigen::Index settle = -1;
        for (Eigen::Index r = final_row; r >= first_row; --r) {
          if (ot.err_norm(r) > band) break;
          settle = r;
        }
        if (settle >= 0) m.settling_time = trace.t(settle) - m.t_start;
      } else {
        m.channel_final = Vector::Constant(N, NAN);
      }
      om.segments.push_back(std::move(m));
    }
    out.observers.push_back(std::move(om));
  }
  return out;
}

// ---------------------------------------------------------------------------

struct SweepRow {
  double h = 0.0;
  bool stable = true;
  std::optional<std::size_t> diverged_at_step;
  std::vector<double> segment_rms;            // rms of ||e|| per segment
  std::vector<Vector> segment_channel_rms;    // per extended coordinate
};

/// One run per delay value, each with a single observer derived from `base`.
/// Runs are independent and execute concurrently; rows come back sorted by h.
inline std::vector<SweepRow> sweep_delay(const UncertainPlant& plant, const SignalProfile& input,
                                         const SignalProfile& disturbance,
                                         const ObserverSpec& base, const SimConfig& cfg,
                                         std::vector<double> h_values,
                                         const MetricsOptions& opt = {}) {
  if (!uses_delay(base.kind)) throw std::invalid_argument("sweep_delay needs a delay observer kind");
  std::sort(h_values.begin(), h_values.end());
  for (double h : h_values) detail::grid_steps(h, cfg.dt, "sweep delay h");

  auto run = [&](double h) {
    ObserverSpec spec = base;
    spec.h = h;
    const SimulationTrace trace = simulate(plant, input, disturbance, {spec}, cfg);
    SweepRow row;
    row.h = h;
    row.stable = !trace.diverged;
    row.diverged_at_step = trace.diverged_at_step;
    if (trace.diverged) {
      const auto cuts = disturbance.breakpoints(0.0, cfg.t_end);
      const auto N = trace.observers.front().xhat.cols();
      row.segment_rms.assign(cuts.size() - 1, NAN);
      row.segment_channel_rms.assign(cuts.size() - 1, Vector::Constant(N, NAN));
      return row;
    }
    const auto m = metrics(trace, disturbance, opt);
    for (const auto& seg : m.observers.front().segments) {
      row.segment_rms.push_back(seg.rms_error);
      row.segment_channel_rms.push_back(seg.channel_rms);
    }
    return row;
  };

  std::vector<std::future<SweepRow>> jobs;
  for (double h : h_values) jobs.push_back(std::async(std::launch::async, run, h));
  std::vector<SweepRow> rows;
  for (auto& j : jobs) rows.push_back(j.get());
  return rows;
}

// ---------------------------------------------------------------------------
// CSV export

namespace detail {
inline void put_number(std::ostream& os, double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  os.write(buf, res.ptr - buf);
}
}  // namespace detail

inline void write_trace_csv(std::ostream& os, const SimulationTrace& trace) {
  os << "t";
  for (Eigen::Index i = 0; i < trace.x.cols(); ++i) os << ",x" << i + 1;
  for (Eigen::Index i = 0; i < trace.y.cols(); ++i) os << ",y" << i + 1;
  for (Eigen::Index i = 0; i < trace.d.cols(); ++i) os << ",d" << i + 1;
  for (const auto& o : trace.observers) {
    for (Eigen::Index i = 0; i < o.xhat.cols(); ++i) os << ',' << o.name << ".xhat" << i + 1;
    os << ',' << o.name << ".err_norm";
  }
  os << '\n';
  for (Eigen::Index r = 0; r < trace.samples(); ++r) {
    detail::put_number(os, trace.t(r));
    auto row = [&](const Matrix& m) {
      for (Eigen::Index i = 0; i < m.cols(); ++i) {
        os << ',';
        detail::put_number(os, m(r, i));
      }
    };
    row(trace.x);
    row(trace.y);
    row(trace.d);
    for (const auto& o : trace.observers) {
      row(o.xhat);
      os << ',';
      detail::put_number(os, o.err_norm(r));
    }
    os << '\n';
  }
}

/// key=value summary, one line per observer and segment.
inline void write_metrics_summary(std::ostream& os, const SegmentMetrics& m) {
  for (const auto& o : m.observers) {
    for (std::size_t s = 0; s < o.segments.size(); ++s) {
      const auto& seg = o.segments[s];
      os << "observer=" << o.name << " segment=" << s << " t_start=" << seg.t_start
         << " t_end=" << seg.t_end << " rms=" << seg.rms_error << " final=" << seg.final_error
         << " settling=";
      if (seg.settling_time) {
        os << *seg.settling_time;
      } else {
        os << "none";
      }
      os << '\n';
    }
  }
}

/// Machine-readable rows of the same table.
inline void write_metrics_csv(std::ostream& os, const SegmentMetrics& m) {
  os << "observer,segment,t_start,t_end,samples,rms,final,settling\n";
  for (const auto& o : m.observers) {
    for (std::size_t s = 0; s < o.segments.size(); ++s) {
      const auto& seg = o.segments[s];
      os << o.name << ',' << s << ',';
      detail::put_number(os, seg.t_start);
      os << ',';
      detail::put_number(os, seg.t_end);
      os << ',' << seg.samples << ',';
      detail::put_number(os, seg.rms_error);
      os << ',';
      detail::put_number(os, seg.final_error);
      os << ',';
      if (seg.settling_time) detail::put_number(os, *seg.settling_time);
      os << '\n';
    }
  }
}

}  // namespace deso
