#pragma once

#include "deso/linalg.hpp"
#include "deso/model.hpp"

#include <array>
#include <cmath>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace deso {

enum class ObserverKind { StandardEso, DelayEso, Smo, DelaySmo, IntegralOutputDelayEso };

inline const char* to_string(ObserverKind k) {
  switch (k) {
    case ObserverKind::StandardEso: return "StandardEso";
    case ObserverKind::DelayEso: return "DelayEso";
    case ObserverKind::Smo: return "Smo";
    case ObserverKind::DelaySmo: return "DelaySmo";
    case ObserverKind::IntegralOutputDelayEso: return "IntegralOutputDelayEso";
  }
  return "?";
}

inline ObserverKind observer_kind_from_string(const std::string& s) {
  for (auto k : {ObserverKind::StandardEso, ObserverKind::DelayEso, ObserverKind::Smo,
                 ObserverKind::DelaySmo, ObserverKind::IntegralOutputDelayEso}) {
    if (s == to_string(k)) return k;
  }
  throw std::invalid_argument("unknown observer kind '" + s + "'");
}

inline bool uses_delay(ObserverKind k) {
  return k == ObserverKind::DelayEso || k == ObserverKind::DelaySmo ||
         k == ObserverKind::IntegralOutputDelayEso;
}

inline bool is_sliding_mode(ObserverKind k) {
  return k == ObserverKind::Smo || k == ObserverKind::DelaySmo;
}

struct SmoParams {
  Matrix Gn;                  // N x p
  double rho = 0.0;           // > 0
  double boundary_layer = 0;  // 0 = pure sign

  /// Gn = [L; -I_p] for a plant with n = p measured states and q = p disturbances.
  static SmoParams from_state_gain(const Matrix& l_state, double rho, double boundary_layer = 0) {
    const auto p = l_state.cols();
    Matrix gn(l_state.rows() + p, p);
    gn << l_state, -Matrix::Identity(p, p);
    return {gn, rho, boundary_layer};
  }
};

struct ObserverSpec {
  std::string name;
  ObserverKind kind = ObserverKind::StandardEso;
  Matrix L;  // N x p (N x 2p for the integral-output variant); unused by sliding-mode kinds
  std::optional<double> h;
  std::optional<SmoParams> smo;
  int order = 1;
};

// ---------------------------------------------------------------------------
// Right-hand sides. Conventions: Xhat has length N, y length p, u length m.

inline Vector eso_derivative(const ExtendedSystem& ext, const Matrix& l, const Vector& xhat,
                             const Vector& y, const Vector& u) {
  if (xhat.size() != ext.N() || y.size() != ext.p() || u.size() != ext.m() ||
      l.rows() != ext.N() || l.cols() != ext.p()) {
    throw DimensionError("eso_derivative: dimension mismatch");
  }
  return ext.Abar * xhat + ext.Bbar * u + l * (ext.Cbar * xhat - y);
}

/// (1/h) D2 (Xhat(t) - Xhat(t - h)): backward-difference estimate of the disturbance rate.
inline Vector delay_term(const ExtendedSystem& ext, double h, const Vector& xhat,
                         const Vector& xhat_delayed) {
  return (ext.D2 * (xhat - xhat_delayed)) / h;
}

inline Vector delay_eso_derivative(const ExtendedSystem& ext, const Matrix& l, double h,
                                   const Vector& xhat, const Vector& xhat_delayed,
                                   const Vector& y, const Vector& u) {
  if (!(h > 0.0)) throw std::invalid_argument("delay_eso_derivative: h must be > 0");
  if (xhat_delayed.size() != ext.N()) throw DimensionError("delayed estimate has wrong length");
  return eso_derivative(ext, l, xhat, y, u) + delay_term(ext, h, xhat, xhat_delayed);
}

/// Gn * rho * sign(y - Cbar Xhat), sign(0) = 0; inside the boundary layer the sign is
/// replaced by a linear saturation.
inline Vector smo_correction(const SmoParams& smo, const Matrix& cbar, const Vector& xhat,
                             const Vector& y) {
  const Vector innovation = y - cbar * xhat;
  Vector nu(innovation.size());
  for (Eigen::Index i = 0; i < innovation.size(); ++i) {
    const double s = innovation(i);
    double v;
    if (smo.boundary_layer > 0.0 && std::abs(s) < smo.boundary_layer) {
      v = s / smo.boundary_layer;
    } else {
      v = s > 0 ? 1.0 : (s < 0 ? -1.0 : 0.0);
    }
    nu(i) = smo.rho * v;
  }
  return smo.Gn * nu;
}

// ---------------------------------------------------------------------------
// Integral-output augmentation for extensions that are unobservable from y alone.
// Second output block: J(t) = int_{t-h}^{t} (y + C A^-1 B u) dtau.

struct IntegralOutputSystem {
  Matrix C2;      // 2p x N
  Matrix C3;      // 2p x N
  Matrix D45;     // 2p x N (D4 = D5)
  Matrix CAinvB;  // p x m

  static IntegralOutputSystem build(const LtiPlant& model) {
    const auto n = model.n(), p = model.p(), q = model.q();
    Eigen::FullPivLU<Matrix> lu(model.A());
    if (!lu.isInvertible()) {
      throw std::invalid_argument("integral-output observer requires an invertible A");
    }
    const Matrix cainv = model.C() * lu.inverse();
    const Matrix cainv_d = cainv * model.D();
    IntegralOutputSystem s;
    const auto N = n + q;
    s.C2 = Matrix::Zero(2 * p, N);
    s.C2.topLeftCorner(p, n) = model.C();
    s.C2.bottomLeftCorner(p, n) = cainv;
    s.C2.bottomRightCorner(p, q) = -cainv_d;
    s.C3 = Matrix::Zero(2 * p, N);
    s.C3.bottomLeftCorner(p, n) = -cainv;
    s.C3.bottomRightCorner(p, q) = cainv_d;
    s.D45 = Matrix::Zero(2 * p, N);
    s.D45.bottomRightCorner(p, q) = cainv_d;
    s.CAinvB = cainv * model.B();
    return s;
  }
};

inline Vector integral_output_delay_eso_derivative(const ExtendedSystem& ext,
                                                   const IntegralOutputSystem& io, const Matrix& l,
                                                   double h, const Vector& xhat,
                                                   const Vector& xhat_h, const Vector& xhat_2h,
                                                   const Vector& y_aug, const Vector& u) {
  if (l.rows() != ext.N() || l.cols() != io.C2.rows() || y_aug.size() != io.C2.rows()) {
    throw DimensionError("integral_output_delay_eso_derivative: dimension mismatch");
  }
  Vector out = ext.Abar * xhat + ext.Bbar * u + delay_term(ext, h, xhat, xhat_h);
  out += l * (io.C2 * xhat - y_aug);
  out += l * (io.C3 * xhat_h + (io.D45 * xhat_h) / h - (io.D45 * (xhat + xhat_2h)) / (2.0 * h));
  return out;
}

/// Ratio min|Re eig(Abar + L C2)| / max|eig(L C3)|; values <= 1 flag a weak margin.
inline double integral_output_margin(const ExtendedSystem& ext, const IntegralOutputSystem& io,
                                     const Matrix& l) {
  const CVector cl = linalg::eigenvalues(ext.Abar + l * io.C2);
  const CVector c3 = linalg::eigenvalues(l * io.C3);
  double lo = INFINITY, hi = 0.0;
  for (Eigen::Index i = 0; i < cl.size(); ++i) lo = std::min(lo, std::abs(cl(i).real()));
  for (Eigen::Index i = 0; i < c3.size(); ++i) hi = std::max(hi, std::abs(c3(i)));
  return hi > 0 ? lo / hi : INFINITY;
}

// ---------------------------------------------------------------------------

/// Grid-sampled history of an estimate and its time derivative. Indices before 0
/// return the initial estimate (constant pre-history).
class HistoryBuffer {
 public:
  HistoryBuffer() = default;
  HistoryBuffer(std::size_t capacity, Vector initial)
      : initial_(std::move(initial)),
        values_(capacity, Vector::Zero(initial_.size())),
        rates_(capacity, Vector::Zero(initial_.size())) {}

  void push(const Vector& value, const Vector& rate) {
    if (values_.empty()) {
      ++count_;
      return;
    }
    const std::size_t slot = static_cast<std::size_t>(count_) % values_.size();
    values_[slot] = value;
    rates_[slot] = rate;
    ++count_;
  }

  /// Number of samples pushed so far; the latest sample has index size() - 1.
  long size() const { return count_; }
  std::size_t capacity() const { return values_.size(); }

  const Vector& at(long index) const {
    if (index < 0) return initial_;
    check(index);
    return values_[static_cast<std::size_t>(index) % values_.size()];
  }

  /// Cubic Hermite value between samples index and index+1 at fraction theta.
  Vector interpolate(long index, double theta, double dt) const {
    if (theta == 0.0) return at(index);
    if (theta == 1.0) return at(index + 1);
    if (index + 1 <= 0) return initial_;
    check(index + 1);
    const Vector& x0 = at(index);
    const Vector& x1 = at(index + 1);
    const Vector& r0 = rates_[static_cast<std::size_t>(index) % values_.size()];
    const Vector& r1 = rates_[static_cast<std::size_t>(index + 1) % values_.size()];
    const double t = theta, t2 = t * t, t3 = t2 * t;
    const double h00 = 2 * t3 - 3 * t2 + 1, h10 = t3 - 2 * t2 + t;
    const double h01 = -2 * t3 + 3 * t2, h11 = t3 - t2;
    return h00 * x0 + h10 * dt * r0 + h01 * x1 + h11 * dt * r1;
  }

 private:
  void check(long index) const {
    if (index >= count_ || count_ - index > static_cast<long>(values_.size())) {
      throw std::out_of_range("history sample " + std::to_string(index) + " not buffered");
    }
  }

  Vector initial_;
  std::vector<Vector> values_;
  std::vector<Vector> rates_;
  long count_ = 0;
};

enum class Integrator { Euler, RK4 };

/// Measurement data for one integration step. Stage s of the integrator sits at
/// t_k + c_s dt with c = {0, 1/2, 1/2, 1} (RK4) or {0} (Euler).
struct StepInputs {
  std::array<Vector, 4> y;      // output at each stage
  std::array<Vector, 4> u;      // known input at each stage
  std::array<Vector, 4> y_int;  // running window integral (integral-output variant only)
};

/// Stateful observer instance owned by a single run.
class Observer {
 public:
  Observer(ObserverSpec spec, const LtiPlant& model, double dt, Vector xhat0,
           double blowup_threshold = 1e9)
      : spec_(std::move(spec)), ext_(build_extended(model, spec_.order)), dt_(dt),
        xhat_(std::move(xhat0)), blowup_(blowup_threshold) {
    validate(model);
    if (uses_delay(spec_.kind)) {
      delay_steps_ = steps_for(*spec_.h);
      const long span = spec_.kind == ObserverKind::IntegralOutputDelayEso ? 2 * delay_steps_
                                                                            : delay_steps_;
      history_ = HistoryBuffer(static_cast<std::size_t>(span + 2), xhat_);
    }
    if (spec_.kind == ObserverKind::IntegralOutputDelayEso) io_ = IntegralOutputSystem::build(model);
  }

  const ObserverSpec& spec() const { return spec_; }
  const ExtendedSystem& extended() const { return ext_; }
  const Vector& state() const { return xhat_; }
  long delay_steps() const { return delay_steps_; }
  bool diverged() const { return diverged_; }
  const std::optional<IntegralOutputSystem>& integral_output() const { return io_; }

  /// Advances the estimate from grid index k to k + 1.
  void step(const StepInputs& in, Integrator integrator) {
    const long k = step_index_;
    auto delayed = [&](long steps, double c) -> Vector {
      return history_.interpolate(k - steps, c, dt_);
    };
    auto rhs = [&](const Vector& x, int stage, double c) -> Vector {
      switch (spec_.kind) {
        case ObserverKind::StandardEso:
          return eso_derivative(ext_, spec_.L, x, in.y[stage], in.u[stage]);
        case ObserverKind::DelayEso:
          return delay_eso_derivative(ext_, spec_.L, *spec_.h, x, delayed(delay_steps_, c),
                                      in.y[stage], in.u[stage]);
        case ObserverKind::Smo:
          return ext_.Abar * x + ext_.Bbar * in.u[stage] +
                 smo_correction(*spec_.smo, ext_.Cbar, x, in.y[stage]);
        case ObserverKind::DelaySmo:
          return ext_.Abar * x + ext_.Bbar * in.u[stage] +
                 smo_correction(*spec_.smo, ext_.Cbar, x, in.y[stage]) +
                 delay_term(ext_, *spec_.h, x, delayed(delay_steps_, c));
        case ObserverKind::IntegralOutputDelayEso: {
          Vector y_aug(2 * ext_.p());
          y_aug << in.y[stage], in.y_int[stage];
          return integral_output_delay_eso_derivative(ext_, *io_, spec_.L, *spec_.h, x,
                                                      delayed(delay_steps_, c),
                                                      delayed(2 * delay_steps_, c), y_aug,
                                                      in.u[stage]);
        }
      }
      throw std::logic_error("unhandled observer kind");
    };

    const Vector k1 = rhs(xhat_, 0, 0.0);
    if (uses_delay(spec_.kind)) history_.push(xhat_, k1);
    if (integrator == Integrator::Euler) {
      xhat_ += dt_ * k1;
    } else {
      const Vector k2 = rhs(xhat_ + 0.5 * dt_ * k1, 1, 0.5);
      const Vector k3 = rhs(xhat_ + 0.5 * dt_ * k2, 2, 0.5);
      const Vector k4 = rhs(xhat_ + dt_ * k3, 3, 1.0);
      xhat_ += (dt_ / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
    }
    ++step_index_;
    if (!xhat_.allFinite() || xhat_.norm() > blowup_) diverged_ = true;
  }

 private:
  long steps_for(double h) const {
    const double ratio = h / dt_;
    const long k = std::lround(ratio);
    if (k < 1 || std::abs(ratio - static_cast<double>(k)) > 1e-9 * std::max(1.0, ratio)) {
      throw std::invalid_argument("observer '" + spec_.name + "': delay h = " + std::to_string(h) +
                                  " is not a positive integer multiple of dt = " +
                                  std::to_string(dt_));
    }
    return k;
  }

  void validate(const LtiPlant& model) const {
    const std::string who = "observer '" + spec_.name + "': ";
    const auto N = ext_.N(), p = ext_.p();
    if (xhat_.size() != N) {
      throw DimensionError(who + "initial estimate must have length " + std::to_string(N));
    }
    if (spec_.order != 1 && spec_.kind != ObserverKind::StandardEso) {
      throw std::invalid_argument(who + "augmentation order > 1 is only supported for StandardEso");
    }
    if (uses_delay(spec_.kind) != spec_.h.has_value()) {
      throw std::invalid_argument(who + (uses_delay(spec_.kind) ? "delay h is required"
                                                                : "delay h given for a delay-free kind"));
    }
    if (spec_.h && !(*spec_.h > 0.0)) throw std::invalid_argument(who + "h must be > 0");
    if (is_sliding_mode(spec_.kind) != spec_.smo.has_value()) {
      throw std::invalid_argument(who + (is_sliding_mode(spec_.kind)
                                             ? "sliding-mode parameters are required"
                                             : "sliding-mode parameters given for a non-SMO kind"));
    }
    if (spec_.smo) {
      linalg::require_shape(spec_.smo->Gn, N, p, who + "Gn");
      if (!(spec_.smo->rho > 0.0)) throw std::invalid_argument(who + "rho must be > 0");
      if (spec_.smo->boundary_layer < 0.0) {
        throw std::invalid_argument(who + "boundary_layer must be >= 0");
      }
    } else {
      const auto cols = spec_.kind == ObserverKind::IntegralOutputDelayEso ? 2 * p : p;
      linalg::require_shape(spec_.L, N, cols, who + "L");
    }
    (void)model;
  }

  ObserverSpec spec_;
  ExtendedSystem ext_;
  double dt_;
  Vector xhat_;
  double blowup_;
  long delay_steps_ = 0;
  long step_index_ = 0;
  bool diverged_ = false;
  HistoryBuffer history_;
  std::optional<IntegralOutputSystem> io_;
};

}  // namespace deso
