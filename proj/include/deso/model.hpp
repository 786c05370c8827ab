#pragma once

#include "deso/linalg.hpp"

#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace deso {

/// Disturbed linear plant  x' = A x + B u + D d,  y = C x.
class LtiPlant {
 public:
  LtiPlant(Matrix a, Matrix b, Matrix c, Matrix d)
      : a_(std::move(a)), b_(std::move(b)), c_(std::move(c)), d_(std::move(d)) {
    const auto n = a_.rows();
    if (n == 0) throw DimensionError("A must be non-empty");
    linalg::require_shape(a_, n, n, "A");
    linalg::require_shape(b_, n, b_.cols(), "B");
    linalg::require_shape(c_, c_.rows(), n, "C");
    linalg::require_shape(d_, n, d_.cols(), "D");
    if (c_.rows() == 0) throw DimensionError("C must have at least one row");
    if (d_.cols() > 0 && d_.isZero(0.0)) {
      throw std::invalid_argument("D is identically zero but declares q > 0 channels");
    }
  }

  const Matrix& A() const { return a_; }
  const Matrix& B() const { return b_; }
  const Matrix& C() const { return c_; }
  const Matrix& D() const { return d_; }

  Eigen::Index n() const { return a_.rows(); }
  Eigen::Index m() const { return b_.cols(); }
  Eigen::Index p() const { return c_.rows(); }
  Eigen::Index q() const { return d_.cols(); }

 private:
  Matrix a_, b_, c_, d_;
};

/// Plant stacked with its disturbance and (order - 1) derivatives of it.
struct ExtendedSystem {
  Matrix Abar;
  Matrix Bbar;
  Matrix Cbar;
  Matrix D2;  // 0/1 diagonal selecting the disturbance coordinates
  int order = 1;
  Eigen::Index n = 0;  // plant states
  Eigen::Index q = 0;  // disturbance channels

  Eigen::Index N() const { return Abar.rows(); }
  Eigen::Index p() const { return Cbar.rows(); }
  Eigen::Index m() const { return Bbar.cols(); }
  Matrix plant_A() const { return Abar.topLeftCorner(n, n); }
};

inline ExtendedSystem build_extended(const LtiPlant& plant, int order = 1) {
  if (order < 1) throw std::invalid_argument("augmentation order must be >= 1");
  const auto n = plant.n(), m = plant.m(), p = plant.p(), q = plant.q();
  const auto N = n + order * q;

  ExtendedSystem ext;
  ext.order = order;
  ext.n = n;
  ext.q = q;
  ext.Abar = Matrix::Zero(N, N);
  ext.Abar.topLeftCorner(n, n) = plant.A();
  ext.Abar.block(0, n, n, q) = plant.D();
  // integrator chain d -> d' -> ... -> d^(order-1); top derivative has zero dynamics
  for (int k = 0; k + 1 < order; ++k) {
    ext.Abar.block(n + k * q, n + (k + 1) * q, q, q) = Matrix::Identity(q, q);
  }
  ext.Bbar = Matrix::Zero(N, m);
  ext.Bbar.topRows(n) = plant.B();
  ext.Cbar = Matrix::Zero(p, N);
  ext.Cbar.leftCols(n) = plant.C();
  ext.D2 = Matrix::Zero(N, N);
  ext.D2.block(n, n, q, q) = Matrix::Identity(q, q);
  return ext;
}

struct ObservabilityReport {
  bool observable = true;
  std::optional<Complex> deficient_eigenvalue;
  int rank_at_witness = 0;
};

namespace detail {

inline ObservabilityReport pbh_at(const Matrix& a, const Matrix& c,
                                  const std::vector<Complex>& spectrum, double tol) {
  const auto N = a.rows();
  ObservabilityReport report;
  for (const Complex& lambda : spectrum) {
    CMatrix pbh(N + c.rows(), N);
    pbh.topRows(N) = a.cast<Complex>() - lambda * CMatrix::Identity(N, N);
    pbh.bottomRows(c.rows()) = c.cast<Complex>();
    const int r = linalg::numerical_rank(pbh, tol);
    if (r < N) {
      report.observable = false;
      report.deficient_eigenvalue = lambda;
      report.rank_at_witness = r;
      return report;
    }
  }
  report.rank_at_witness = static_cast<int>(N);
  return report;
}

// Eigenvalues of defective blocks come back split by ~eps^(1/k); merge those
// clusters so the rank test is evaluated at the true multiple eigenvalue.
inline std::vector<Complex> clustered_spectrum(const Matrix& a) {
  std::vector<Complex> ev = linalg::to_std(linalg::eigenvalues(a));
  const double scale = 1.0 + (a.size() ? a.cwiseAbs().maxCoeff() : 0.0);
  const double radius = 1e-5 * scale;
  std::vector<Complex> out;
  std::vector<bool> used(ev.size(), false);
  for (std::size_t i = 0; i < ev.size(); ++i) {
    if (used[i]) continue;
    Complex sum = ev[i];
    int count = 1;
    used[i] = true;
    for (std::size_t j = i + 1; j < ev.size(); ++j) {
      if (!used[j] && std::abs(ev[j] - ev[i]) < radius) {
        sum += ev[j];
        ++count;
        used[j] = true;
      }
    }
    out.push_back(sum / static_cast<double>(count));
  }
  return out;
}

}  // namespace detail

/// PBH test on a general pair (A, C).
inline ObservabilityReport pbh_observability(const Matrix& a, const Matrix& c,
                                             double tol = 1e-9) {
  linalg::require_shape(a, a.rows(), a.rows(), "A");
  linalg::require_shape(c, c.rows(), a.rows(), "C");
  return detail::pbh_at(a, c, detail::clustered_spectrum(a), tol);
}

/// PBH test on an extended system. Abar is block upper triangular, so its spectrum
/// is eig(A) together with an exact zero for the disturbance chain.
inline ObservabilityReport pbh_observability(const ExtendedSystem& ext, double tol = 1e-9) {
  std::vector<Complex> spectrum = detail::clustered_spectrum(ext.plant_A());
  if (ext.q > 0) spectrum.emplace_back(0.0, 0.0);
  return detail::pbh_at(ext.Abar, ext.Cbar, spectrum, tol);
}

// ---------------------------------------------------------------------------
// Plant with parameter uncertainty: the truth drives the simulation, the model
// is what the observers know. The lumped disturbance d seen by the model is
//   D_model d = (A_true - A_model) x + (B_true - B_model) u + D_true w
// where w is the external disturbance fed to the truth.

class UncertainPlant {
 public:
  UncertainPlant(LtiPlant truth, LtiPlant model, double tol = 1e-9)
      : truth_(std::move(truth)), model_(std::move(model)) {
    if (truth_.n() != model_.n() || truth_.m() != model_.m() || truth_.p() != model_.p()) {
      throw DimensionError("truth and model plants must share n, m, p");
    }
    if ((truth_.C() - model_.C()).cwiseAbs().maxCoeff() > 1e-12) {
      throw std::invalid_argument("truth and model must share the output map C");
    }
    const auto n = truth_.n();
    Matrix residual(n, n + truth_.m() + truth_.q());
    residual << truth_.A() - model_.A(), truth_.B() - model_.B(), truth_.D();
    const Eigen::CompleteOrthogonalDecomposition<Matrix> cod(model_.D());
    const Matrix pinv = cod.pseudoInverse();
    const Matrix mapped = pinv * residual;
    const Matrix back = model_.D() * mapped - residual;
    const double scale = 1.0 + residual.cwiseAbs().maxCoeff();
    if (back.size() > 0 && back.cwiseAbs().maxCoeff() > tol * scale * 1e3) {
      throw std::invalid_argument(
          "model mismatch and external disturbance do not lie in the range of the model D");
    }
    m_x_ = mapped.leftCols(n);
    m_u_ = mapped.middleCols(n, truth_.m());
    m_w_ = mapped.rightCols(truth_.q());
  }

  const LtiPlant& truth() const { return truth_; }
  const LtiPlant& model() const { return model_; }

  Vector lumped(const Vector& x, const Vector& u, const Vector& w) const {
    return m_x_ * x + m_u_ * u + m_w_ * w;
  }

  /// d, d', ..., d^(count-1) given x and derivatives of u and w (index = order).
  std::vector<Vector> lumped_derivatives(const Vector& x, const std::vector<Vector>& u_derivs,
                                         const std::vector<Vector>& w_derivs,
                                         int count) const {
    std::vector<Vector> out;
    Vector xk = x;
    for (int k = 0; k < count; ++k) {
      out.push_back(m_x_ * xk + m_u_ * u_derivs.at(k) + m_w_ * w_derivs.at(k));
      if (k + 1 < count) {
        xk = truth_.A() * xk + truth_.B() * u_derivs.at(k) + truth_.D() * w_derivs.at(k);
      }
    }
    return out;
  }

 private:
  LtiPlant truth_;
  LtiPlant model_;
  Matrix m_x_, m_u_, m_w_;
};

// ---------------------------------------------------------------------------
// DC drive: x = [i, omega], u = armature voltage, w = load torque.

struct DcDriveParams {
  double R = 0.55;      // armature resistance [Ohm]
  double L = 0.006;     // armature inductance [H]
  double Kv = 0.52;     // voltage constant [V s/rad]
  double Ktau = 0.52;   // torque constant [N m/A]
  double J = 0.1;       // inertia [kg m^2]
  double f = 0.008;     // viscous friction [N m s]

  void validate() const {
    const std::pair<const char*, double> fields[] = {
        {"R", R}, {"L", L}, {"Kv", Kv}, {"Ktau", Ktau}, {"J", J}};
    for (const auto& [name, value] : fields) {
      if (!(value > 0.0)) {
        throw std::invalid_argument(std::string("DC drive parameter ") + name +
                                    " must be strictly positive");
      }
    }
    if (!(f >= 0.0)) throw std::invalid_argument("DC drive parameter f must be non-negative");
  }

  bool operator==(const DcDriveParams&) const = default;
};

struct UncertainParams {
  DcDriveParams real;
  DcDriveParams nominal{0.6, 0.0062, 0.6, 0.5, 0.08, 0.007};

  bool operator==(const UncertainParams&) const = default;
};

enum class ParamSet { Real, Nominal };

/// How the disturbance enters the observer model.
enum class DcDisturbanceMap {
  Lumped,  // D0 = I2, d0 = [phi1, phi2]
  Torque,  // D = [0, 1]^T, d = -f/J omega - tau/J
};

/// Friction-free state matrix form used by the observers.
inline LtiPlant dc_drive_plant(const DcDriveParams& p,
                               DcDisturbanceMap map = DcDisturbanceMap::Lumped) {
  p.validate();
  Matrix a(2, 2);
  a << -p.R / p.L, -p.Kv / p.L, p.Ktau / p.J, 0.0;
  Matrix b(2, 1);
  b << 1.0 / p.L, 0.0;
  Matrix d = map == DcDisturbanceMap::Lumped ? Matrix(Matrix::Identity(2, 2))
                                             : Matrix((Matrix(2, 1) << 0.0, 1.0).finished());
  return LtiPlant(std::move(a), std::move(b), Matrix::Identity(2, 2), std::move(d));
}

inline LtiPlant dc_drive_plant(const UncertainParams& params, ParamSet which,
                               DcDisturbanceMap map = DcDisturbanceMap::Lumped) {
  return dc_drive_plant(which == ParamSet::Real ? params.real : params.nominal, map);
}

/// Physical drive with friction in A and the load torque as external input.
inline LtiPlant dc_drive_physical(const DcDriveParams& p) {
  p.validate();
  Matrix a(2, 2);
  a << -p.R / p.L, -p.Kv / p.L, p.Ktau / p.J, -p.f / p.J;
  Matrix b(2, 1);
  b << 1.0 / p.L, 0.0;
  Matrix e(2, 1);
  e << 0.0, -1.0 / p.J;
  return LtiPlant(std::move(a), std::move(b), Matrix::Identity(2, 2), std::move(e));
}

/// Truth = physical drive with the real parameters; model = observer-side plant.
inline UncertainPlant dc_drive_uncertain(const UncertainParams& params, ParamSet observer_params,
                                         DcDisturbanceMap map = DcDisturbanceMap::Lumped) {
  return UncertainPlant(dc_drive_physical(params.real),
                        dc_drive_plant(params, observer_params, map));
}

}  // namespace deso
