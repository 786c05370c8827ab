#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <complex>
#include <stdexcept>
#include <string>
#include <vector>

namespace deso {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using CMatrix = Eigen::MatrixXcd;
using CVector = Eigen::VectorXcd;
using Complex = std::complex<double>;

/// Thrown when matrix shapes do not agree with the declared system dimensions.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

namespace linalg {

inline void require_shape(const Matrix& m, Eigen::Index rows, Eigen::Index cols,
                          const std::string& what) {
  if (m.rows() != rows || m.cols() != cols) {
    throw DimensionError(what + " must be " + std::to_string(rows) + "x" +
                         std::to_string(cols) + ", got " + std::to_string(m.rows()) +
                         "x" + std::to_string(m.cols()));
  }
}

/// Numerical rank: singular values below tol * sigma_max count as zero.
template <typename Derived>
int numerical_rank(const Eigen::MatrixBase<Derived>& m, double tol = 1e-9) {
  if (m.size() == 0) return 0;
  using Plain = typename Derived::PlainObject;
  Eigen::JacobiSVD<Plain> svd(m);
  const auto& s = svd.singularValues();
  if (s.size() == 0 || s(0) == 0.0) return 0;
  const double cutoff = tol * s(0);
  int rank = 0;
  for (Eigen::Index i = 0; i < s.size(); ++i) {
    if (s(i) > cutoff) ++rank;
  }
  return rank;
}

inline double spectral_norm(const Matrix& m) {
  if (m.size() == 0) return 0.0;
  Eigen::JacobiSVD<Matrix> svd(m);
  return svd.singularValues()(0);
}

inline CVector eigenvalues(const Matrix& a) {
  if (a.rows() == 0) return CVector(0);
  Eigen::EigenSolver<Matrix> solver(a, /*computeEigenvectors=*/false);
  return solver.eigenvalues();
}

inline bool is_hurwitz(const Matrix& a) {
  const CVector ev = eigenvalues(a);
  for (Eigen::Index i = 0; i < ev.size(); ++i) {
    if (!(ev(i).real() < 0.0)) return false;
  }
  return true;
}

/// Symmetric eigenvalue extrema of a symmetric matrix.
inline std::pair<double, double> sym_eig_range(const Matrix& s) {
  Eigen::SelfAdjointEigenSolver<Matrix> solver(s, Eigen::EigenvaluesOnly);
  const Vector& ev = solver.eigenvalues();
  return {ev.minCoeff(), ev.maxCoeff()};
}

/// Sort complex numbers by (real, imag) so that spectra can be compared element-wise.
inline std::vector<Complex> sorted(std::vector<Complex> v) {
  std::sort(v.begin(), v.end(), [](const Complex& a, const Complex& b) {
    if (a.real() != b.real()) return a.real() < b.real();
    return a.imag() < b.imag();
  });
  return v;
}

inline std::vector<Complex> to_std(const CVector& v) {
  return std::vector<Complex>(v.data(), v.data() + v.size());
}

/// Greedy matching distance between two multisets of complex numbers, scaled by
/// 1/(1+|target|). Returns the worst matched residual.
inline double spectrum_mismatch(std::vector<Complex> achieved,
                                const std::vector<Complex>& requested) {
  if (achieved.size() != requested.size()) return INFINITY;
  double worst = 0.0;
  for (const Complex& r : requested) {
    auto best = achieved.begin();
    double best_d = INFINITY;
    for (auto it = achieved.begin(); it != achieved.end(); ++it) {
      const double d = std::abs(*it - r);
      if (d < best_d) {
        best_d = d;
        best = it;
      }
    }
    worst = std::max(worst, best_d / (1.0 + std::abs(r)));
    achieved.erase(best);
  }
  return worst;
}

}  // namespace linalg
}  // namespace deso
