#pragma once

#include "deso/linalg.hpp"
#include "deso/model.hpp"

#include <map>
#include <random>
#include <stdexcept>
#include <vector>

namespace deso {

struct GainDesign {
  Matrix L;  // N x p, observer correction L (C Xhat - y)
  std::vector<Complex> achieved_eigenvalues;
  double placement_error = 0.0;  // max |achieved - requested| / (1 + |requested|)
};

class UnobservableError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

namespace detail {

// Pair every complex pole with its conjugate; returns real poles and one
// representative (imag > 0) per conjugate pair.
inline void split_conjugate(const std::vector<Complex>& poles, std::vector<double>& real,
                            std::vector<Complex>& pairs, double tol) {
  std::vector<Complex> upper, lower;
  for (const Complex& z : poles) {
    const double scale = 1.0 + std::abs(z);
    if (std::abs(z.imag()) <= tol * scale) {
      real.push_back(z.real());
    } else if (z.imag() > 0) {
      upper.push_back(z);
    } else {
      lower.push_back(z);
    }
  }
  for (const Complex& z : upper) {
    auto it = std::find_if(lower.begin(), lower.end(), [&](const Complex& w) {
      return std::abs(w - std::conj(z)) <= tol * (1.0 + std::abs(z));
    });
    if (it == lower.end()) {
      throw std::invalid_argument("requested poles are not closed under conjugation");
    }
    lower.erase(it);
    pairs.push_back(z);
  }
  if (!lower.empty()) {
    throw std::invalid_argument("requested poles are not closed under conjugation");
  }
}

template <typename Scalar>
using MatrixX = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;

// Orthonormal basis of ker [At - lambda I, -Bt].
template <typename Scalar>
MatrixX<Scalar> pencil_kernel(const Matrix& at, const Matrix& bt, Scalar lambda) {
  const auto N = at.rows(), p = bt.cols();
  MatrixX<Scalar> m(N, N + p);
  m.leftCols(N) = at.cast<Scalar>() - lambda * MatrixX<Scalar>::Identity(N, N);
  m.rightCols(p) = -bt.cast<Scalar>();
  Eigen::JacobiSVD<MatrixX<Scalar>> svd(m, Eigen::ComputeFullV);
  const int rank = linalg::numerical_rank(m, 1e-10);
  return svd.matrixV().rightCols(N + p - rank);
}

}  // namespace detail

/// Observer gain L with eig(A + L C) = desired, by duality with multi-input
/// state feedback. Each closed-loop eigenvector is drawn from the kernel of the
/// pencil [A^T - lambda I, -C^T]; the draw with the best-conditioned modal matrix
/// is kept. A pole may repeat at most p times (one independent eigenvector per
/// output), so the closed loop stays diagonalizable.
inline GainDesign place_poles(const Matrix& a, const Matrix& c, const std::vector<Complex>& desired,
                              std::uint64_t seed = 7, int trials = 16) {
  const auto N = a.rows();
  const auto p = c.rows();
  linalg::require_shape(a, N, N, "A");
  linalg::require_shape(c, p, N, "C");
  if (static_cast<Eigen::Index>(desired.size()) != N) {
    throw std::invalid_argument("need exactly " + std::to_string(N) + " desired poles, got " +
                                std::to_string(desired.size()));
  }
  std::vector<double> real_poles;
  std::vector<Complex> pair_poles;
  detail::split_conjugate(desired, real_poles, pair_poles, 1e-12);

  const auto obs = pbh_observability(a, c);
  if (!obs.observable) {
    throw UnobservableError("pair (A, C) is not observable; cannot place observer poles");
  }

  GainDesign design;
  const std::vector<Complex> open_loop = linalg::to_std(linalg::eigenvalues(a));
  if (linalg::spectrum_mismatch(open_loop, desired) < 1e-12) {
    design.L = Matrix::Zero(N, p);
    design.achieved_eigenvalues = open_loop;
    design.placement_error = linalg::spectrum_mismatch(open_loop, desired);
    return design;
  }

  // multiplicity check
  auto count_mult = [](const auto& v, const auto& x) {
    return std::count_if(v.begin(), v.end(),
                         [&](const auto& y) { return std::abs(y - x) <= 1e-12 * (1 + std::abs(x)); });
  };
  for (double r : real_poles) {
    if (count_mult(real_poles, r) > p) {
      throw std::invalid_argument("pole " + std::to_string(r) + " repeated more than p = " +
                                  std::to_string(p) + " times; not supported");
    }
  }
  for (const Complex& z : pair_poles) {
    if (count_mult(pair_poles, z) > p) {
      throw std::invalid_argument("complex pole repeated more than p times; not supported");
    }
  }

  const Matrix at = a.transpose();
  const Matrix bt = c.transpose();

  std::map<double, Matrix> real_kernels;
  for (double r : real_poles) {
    if (!real_kernels.count(r)) real_kernels[r] = detail::pencil_kernel<double>(at, bt, r);
  }
  std::vector<CMatrix> pair_kernels;
  for (const Complex& z : pair_poles) pair_kernels.push_back(detail::pencil_kernel<Complex>(at, bt, z));

  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal;
  double best_cond = INFINITY;
  Matrix best_k;

  for (int trial = 0; trial < trials; ++trial) {
    Matrix v(N, N), g(p, N);
    Eigen::Index col = 0;
    for (const auto& [r, kernel] : real_kernels) {
      const auto mult = count_mult(real_poles, r);
      for (long j = 0; j < mult; ++j) {
        Vector coeff(kernel.cols());
        for (Eigen::Index i = 0; i < coeff.size(); ++i) coeff(i) = normal(rng);
        // keep repeated-pole draws distinct by biasing toward distinct basis vectors
        if (mult > 1) coeff(j % kernel.cols()) += 4.0;
        Vector z = kernel * coeff;
        z /= z.head(N).norm();
        v.col(col) = z.head(N);
        g.col(col) = z.tail(p);
        ++col;
      }
    }
    for (std::size_t k = 0; k < pair_poles.size(); ++k) {
      const CMatrix& kernel = pair_kernels[k];
      CVector coeff(kernel.cols());
      for (Eigen::Index i = 0; i < coeff.size(); ++i) coeff(i) = Complex(normal(rng), normal(rng));
      CVector z = kernel * coeff;
      z /= z.head(N).norm();
      v.col(col) = z.head(N).real();
      v.col(col + 1) = z.head(N).imag();
      g.col(col) = z.tail(p).real();
      g.col(col + 1) = z.tail(p).imag();
      col += 2;
    }
    Eigen::JacobiSVD<Matrix> svd(v);
    const auto& s = svd.singularValues();
    const double cond = s(N - 1) > 0 ? s(0) / s(N - 1) : INFINITY;
    if (cond < best_cond) {
      best_cond = cond;
      best_k = -g * v.inverse();
    }
  }
  if (!std::isfinite(best_cond) || best_cond > 1e12) {
    throw std::runtime_error("pole placement failed: closed-loop modal matrix is singular");
  }

  design.L = best_k.transpose();
  design.achieved_eigenvalues = linalg::to_std(linalg::eigenvalues(a + design.L * c));
  design.placement_error = linalg::spectrum_mismatch(design.achieved_eigenvalues, desired);
  return design;
}

inline GainDesign place_poles(const ExtendedSystem& ext, const std::vector<Complex>& desired) {
  const auto obs = pbh_observability(ext);
  if (!obs.observable) {
    throw UnobservableError("extended system is not observable; cannot place observer poles");
  }
  return place_poles(ext.Abar, ext.Cbar, desired);
}

/// Channel-decoupled placement for order-1 extensions with C and C D invertible
/// (every state measured, one disturbance per output). In the coordinates
/// w = C e_x, z = C D e_d each channel i reduces to
///   w_i' = -a_i w_i + z_i,   z_i' = -b_i w_i,
/// with s^2 + a_i s + b_i having roots desired[2i], desired[2i+1].
inline GainDesign place_poles_decoupled(const ExtendedSystem& ext,
                                        const std::vector<Complex>& desired) {
  const auto n = ext.n, p = ext.p(), q = ext.q;
  if (ext.order != 1 || n != p || q != p) {
    throw std::invalid_argument("decoupled placement needs order 1 and n = p = q");
  }
  if (static_cast<Eigen::Index>(desired.size()) != 2 * p) {
    throw std::invalid_argument("decoupled placement needs 2p poles, listed channel by channel");
  }
  const Matrix c = ext.Cbar.leftCols(n);
  const Matrix a = ext.plant_A();
  const Matrix d = ext.Abar.block(0, n, n, q);
  Eigen::FullPivLU<Matrix> c_lu(c);
  Eigen::FullPivLU<Matrix> cd_lu(c * d);
  if (!c_lu.isInvertible() || !cd_lu.isInvertible()) {
    throw std::invalid_argument("decoupled placement needs C and C D invertible");
  }
  Vector sum(p), prod(p);
  for (Eigen::Index i = 0; i < p; ++i) {
    const Complex r1 = desired[static_cast<std::size_t>(2 * i)];
    const Complex r2 = desired[static_cast<std::size_t>(2 * i + 1)];
    const Complex s = r1 + r2, m = r1 * r2;
    if (std::abs(s.imag()) > 1e-12 * (1 + std::abs(s)) ||
        std::abs(m.imag()) > 1e-12 * (1 + std::abs(m))) {
      throw std::invalid_argument("each channel's pole pair must be real or a conjugate pair");
    }
    sum(i) = -s.real();  // a_i
    prod(i) = m.real();  // b_i
  }
  const Matrix c_inv = c_lu.inverse();
  Matrix l(n + q, p);
  l.topRows(n) = c_inv * (-(c * a * c_inv) - Matrix(sum.asDiagonal()));
  l.bottomRows(q) = -cd_lu.inverse() * Matrix(prod.asDiagonal());

  GainDesign design;
  design.L = l;
  design.achieved_eigenvalues = linalg::to_std(linalg::eigenvalues(ext.Abar + l * ext.Cbar));
  design.placement_error = linalg::spectrum_mismatch(design.achieved_eigenvalues, desired);
  return design;
}

// ---------------------------------------------------------------------------

/// Solves  Acl^T P + P Acl = -Q  (Bartels-Stewart on the complex Schur form).
inline Matrix solve_lyapunov(const Matrix& acl, const Matrix& q) {
  const auto N = acl.rows();
  linalg::require_shape(acl, N, N, "Acl");
  linalg::require_shape(q, N, N, "Q");
  if (!linalg::is_hurwitz(acl)) {
    throw std::domain_error("solve_lyapunov: Acl is not Hurwitz, no positive definite solution");
  }
  if ((q - q.transpose()).cwiseAbs().maxCoeff() > 1e-12 * (1.0 + q.cwiseAbs().maxCoeff()) ||
      Eigen::LLT<Matrix>(q).info() != Eigen::Success) {
    throw std::invalid_argument("solve_lyapunov: Q must be symmetric positive definite");
  }

  Eigen::ComplexSchur<Matrix> schur(acl);
  const CMatrix& t = schur.matrixT();
  const CMatrix& u = schur.matrixU();
  const CMatrix f = -(u.adjoint() * q.cast<Complex>() * u);

  // T^H Y + Y T = F, T upper triangular
  CMatrix y = CMatrix::Zero(N, N);
  for (Eigen::Index i = 0; i < N; ++i) {
    for (Eigen::Index j = 0; j < N; ++j) {
      Complex rhs = f(i, j);
      for (Eigen::Index k = 0; k < i; ++k) rhs -= std::conj(t(k, i)) * y(k, j);
      for (Eigen::Index k = 0; k < j; ++k) rhs -= y(i, k) * t(k, j);
      y(i, j) = rhs / (std::conj(t(i, i)) + t(j, j));
    }
  }
  Matrix p = (u * y * u.adjoint()).real();
  return 0.5 * (p + p.transpose());
}

inline double lyapunov_residual(const Matrix& acl, const Matrix& p, const Matrix& q) {
  return (acl.transpose() * p + p * acl + q).norm();
}

// ---------------------------------------------------------------------------

/// Constants of the delay-observer stability argument. These are sufficient
/// (conservative) estimates, not tight thresholds.
struct RazumikhinAnalysis {
  Matrix P;
  Matrix Q;
  double kappa = 2.0;
  double c3 = 0.0;  // lambda_min(Q)
  double c4 = 0.0;  // 2 ||P D2||
  double c5 = 1.0;  // sqrt(kappa lambda_max(P) / lambda_min(P))
  double h_star = 0.0;
  double lambda_min_P = 0.0;
  double lambda_max_P = 0.0;

  /// c6(h) = c3 - c4/h - c4 c5/h, positive for every h > h_star.
  double c6(double h) const { return c3 - c4 / h - c4 * c5 / h; }
};

inline RazumikhinAnalysis razumikhin_constants(const Matrix& p, const Matrix& q, const Matrix& d2,
                                               double kappa = 2.0) {
  if (!(kappa > 1.0)) throw std::invalid_argument("kappa must be > 1");
  RazumikhinAnalysis out;
  out.P = p;
  out.Q = q;
  out.kappa = kappa;
  const auto [qmin, qmax] = linalg::sym_eig_range(q);
  (void)qmax;
  const auto [pmin, pmax] = linalg::sym_eig_range(p);
  if (!(qmin > 0.0) || !(pmin > 0.0)) {
    throw std::invalid_argument("P and Q must be positive definite");
  }
  out.lambda_min_P = pmin;
  out.lambda_max_P = pmax;
  out.c3 = qmin;
  out.c4 = 2.0 * linalg::spectral_norm(p * d2);
  out.c5 = std::sqrt(kappa * pmax / pmin);
  out.h_star = out.c4 * (1.0 + out.c5) / out.c3;
  return out;
}

/// Convenience: Lyapunov solve for Abar + L Cbar followed by the constants.
inline RazumikhinAnalysis analyze_design(const ExtendedSystem& ext, const Matrix& l,
                                         const Matrix& q, double kappa = 2.0) {
  const Matrix acl = ext.Abar + l * ext.Cbar;
  return razumikhin_constants(solve_lyapunov(acl, q), q, ext.D2, kappa);
}

struct GammaEstimates {
  double gamma1 = 0.0;  // standard observer, radius gamma1 * d1
  double gamma2 = 0.0;  // delay observer, radius gamma2 * d2 * h
  double reference_h = 0.0;
};

/// gamma = lambda_max(P) / (lambda_min(P) * c), with c = c3 for the standard
/// observer and c = c6(h_ref) for the delay observer. Requires h_ref > h_star.
inline GammaEstimates estimate_gammas(const RazumikhinAnalysis& a, double h_ref) {
  if (!(h_ref > a.h_star)) {
    throw std::invalid_argument("reference delay must exceed h_star to estimate gamma2");
  }
  const double ratio = a.lambda_max_P / a.lambda_min_P;
  return {ratio / a.c3, ratio / a.c6(h_ref), h_ref};
}

struct TheoreticalBounds {
  double d1 = 0.0;
  double d2 = 0.0;
  double h = 0.0;
  double radius_standard = 0.0;
  double radius_delay = 0.0;
  double remainder_bound = 0.0;      // sup |R(t, h)| <= d2 h / 2
  double radius_integral_extra = 0.0;  // gamma3 ||d(0)|| h term of the integral-output variant
};

inline TheoreticalBounds error_radius(double d1, double d2, double h, const GammaEstimates& g,
                                      double d0_norm = 0.0) {
  if (!(h > 0.0)) throw std::invalid_argument("error_radius: h must be > 0");
  if (d1 < 0.0 || d2 < 0.0) throw std::invalid_argument("error_radius: bounds must be >= 0");
  TheoreticalBounds b;
  b.d1 = d1;
  b.d2 = d2;
  b.h = h;
  b.radius_standard = g.gamma1 * d1;
  b.radius_delay = g.gamma2 * d2 * h;
  b.remainder_bound = 0.5 * d2 * h;
  b.radius_integral_extra = g.gamma2 * d0_norm * h;
  return b;
}

}  // namespace deso
