#pragma once

#include <cmath>
#include <numbers>
#include <string>
#include <vector>

#include "qsr/common.hpp"

namespace qsr {

// Number of even-order coefficients up to l_max.
constexpr std::size_t n_coef(int l_max) {
  return static_cast<std::size_t>((l_max + 1) * (l_max + 2) / 2);
}

namespace sh_detail {

// Associated Legendre P_l^m(x) for m >= 0 including the Condon-Shortley
// phase, by upward recurrence in l. somx2 = sqrt(1 - x^2) may be passed in
// when known more accurately than from x (near the poles).
inline double assoc_legendre(int l, int m, double x, double somx2 = -1.0) {
  double pmm = 1.0;
  if (m > 0) {
    if (somx2 < 0) somx2 = std::sqrt(std::max(0.0, (1.0 - x) * (1.0 + x)));
    double fact = 1.0;
    for (int i = 1; i <= m; ++i) {
      pmm *= -fact * somx2;
      fact += 2.0;
    }
  }
  if (l == m) return pmm;
  double pmmp1 = x * (2 * m + 1) * pmm;
  if (l == m + 1) return pmmp1;
  double pll = 0.0;
  for (int ll = m + 2; ll <= l; ++ll) {
    pll = (x * (2 * ll - 1) * pmmp1 - (ll + m - 1) * pmm) / (ll - m);
    pmm = pmmp1;
    pmmp1 = pll;
  }
  return pll;
}

// Orthonormal prefactor sqrt((2l+1)/(4 pi) * (l-m)!/(l+m)!), m >= 0.
inline double sh_norm(int l, int m) {
  double ratio = 1.0;
  for (int k = l - m + 1; k <= l + m; ++k) ratio /= k;
  return std::sqrt((2 * l + 1) / (4.0 * std::numbers::pi) * ratio);
}

}  // namespace sh_detail

// Real, antipodally symmetric SH basis: zero for odd l, sqrt(2) Im(Y_l^|m|)
// for m < 0, Y_l^0 for m = 0 and sqrt(2) Re(Y_l^m) for m > 0.
inline double modified_sh(int l, int m, double theta, double phi) {
  if (l < 0 || std::abs(m) > l)
    throw InvalidArgument("modified_sh: require l >= 0 and |m| <= l (got l=" + std::to_string(l) +
                          ", m=" + std::to_string(m) + ")");
  if (l % 2 != 0) return 0.0;
  const int am = std::abs(m);
  const double base = sh_detail::sh_norm(l, am) * sh_detail::assoc_legendre(l, am, std::cos(theta), std::abs(std::sin(theta)));
  if (m == 0) return base;
  if (m < 0) return std::numbers::sqrt2 * base * std::sin(am * phi);
  return std::numbers::sqrt2 * base * std::cos(am * phi);
}

struct SphericalAngles {
  double theta;  // polar, [0, pi]
  double phi;    // azimuth, [0, 2 pi)
};

inline SphericalAngles to_spherical(const Vec3& d) {
  const Vec3 u = d.normalized();
  const double theta = std::acos(std::clamp(u.z(), -1.0, 1.0));
  double phi = std::atan2(u.y(), u.x());
  if (phi < 0) phi += 2.0 * std::numbers::pi;
  if (phi >= 2.0 * std::numbers::pi) phi = 0.0;
  return {theta, phi};
}

struct ShCoefficients {
  Eigen::VectorXd values;
  int l_max = 0;
};

struct ShBasisMatrix {
  Eigen::MatrixXd entries;             // n_directions x n_coef
  std::vector<SphericalAngles> angles;  // one per row
  int l_max = 0;

  Eigen::Index rows() const { return entries.rows(); }
  Eigen::Index cols() const { return entries.cols(); }
};

inline ShBasisMatrix build_basis(const std::vector<Vec3>& directions, int l_max) {
  if (l_max < 0 || l_max % 2 != 0)
    throw InvalidArgument("build_basis: l_max must be even and non-negative (got " +
                          std::to_string(l_max) + ")");
  if (directions.empty()) throw InvalidArgument("build_basis: no directions");
  ShBasisMatrix basis;
  basis.l_max = l_max;
  basis.entries.resize(static_cast<Eigen::Index>(directions.size()),
                       static_cast<Eigen::Index>(n_coef(l_max)));
  for (std::size_t i = 0; i < directions.size(); ++i) {
    const auto a = to_spherical(directions[i]);
    basis.angles.push_back(a);
    Eigen::Index j = 0;
    for (int l = 0; l <= l_max; l += 2)
      for (int m = -l; m <= l; ++m)
        basis.entries(static_cast<Eigen::Index>(i), j++) = modified_sh(l, m, a.theta, a.phi);
  }
  return basis;
}

enum class ShSolver { normal_equations, orthogonal };

struct ShFitOptions {
  double condition_cap = 1e8;  // applies to B^T B
  ShSolver solver = ShSolver::normal_equations;
  std::string shell_label = "unnamed";
};

// Precomputed least-squares operator (B^T B)^-1 B^T for one basis. Immutable
// once built and shareable across threads.
class ShFitter {
 public:
  explicit ShFitter(const ShBasisMatrix& basis, const ShFitOptions& opts = {}) : l_max_(basis.l_max) {
    const auto n = basis.rows();
    const auto c = basis.cols();
    if (n < c)
      throw NumericalError("fit_sh: underdetermined system for shell '" + opts.shell_label + "' (" +
                           std::to_string(n) + " directions < " + std::to_string(c) +
                           " coefficients)");
    const Eigen::MatrixXd gram = basis.entries.transpose() * basis.entries;
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(gram, Eigen::EigenvaluesOnly);
    const double lo = eig.eigenvalues().minCoeff();
    const double hi = eig.eigenvalues().maxCoeff();
    condition_ = lo > 0 ? hi / lo : std::numeric_limits<double>::infinity();
    if (!(condition_ <= opts.condition_cap))
      throw NumericalError("fit_sh: ill-conditioned basis for shell '" + opts.shell_label +
                           "' (cond(B^T B) = " + std::to_string(condition_) + ")");
    if (opts.solver == ShSolver::normal_equations) {
      pinv_ = gram.ldlt().solve(basis.entries.transpose());
    } else {
      pinv_ = basis.entries.colPivHouseholderQr().solve(Eigen::MatrixXd::Identity(n, n));
    }
  }

  ShCoefficients fit(const Eigen::VectorXd& signals) const {
    if (signals.size() != pinv_.cols())
      throw ShapeError("fit_sh: expected " + std::to_string(pinv_.cols()) + " signals, got " +
                       std::to_string(signals.size()));
    return {pinv_ * signals, l_max_};
  }

  const Eigen::MatrixXd& operator_matrix() const noexcept { return pinv_; }
  double condition() const noexcept { return condition_; }

 private:
  Eigen::MatrixXd pinv_;
  double condition_ = 0;
  int l_max_ = 0;
};

inline ShCoefficients fit_sh(const Eigen::VectorXd& signals, const ShBasisMatrix& basis,
                             const ShFitOptions& opts = {}) {
  return ShFitter(basis, opts).fit(signals);
}

// Linear map from low-resolution samples to high-resolution samples:
// B_H (B_L^T B_L)^-1 B_L^T.
class ShInterpolator {
 public:
  ShInterpolator(const std::vector<Vec3>& low_dirs, const std::vector<Vec3>& high_dirs, int l_max,
                 const ShFitOptions& opts = {}) {
    const auto low = build_basis(low_dirs, l_max);
    const auto high = build_basis(high_dirs, l_max);
    ShFitter fitter(low, opts);
    map_ = high.entries * fitter.operator_matrix();
  }

  Eigen::VectorXd apply(const Eigen::VectorXd& low_signals) const {
    if (low_signals.size() != map_.cols())
      throw ShapeError("sh_interpolate: expected " + std::to_string(map_.cols()) + " signals");
    return map_ * low_signals;
  }

  const Eigen::MatrixXd& matrix() const noexcept { return map_; }

 private:
  Eigen::MatrixXd map_;
};

inline Eigen::VectorXd sh_interpolate(const Eigen::VectorXd& low_signals,
                                      const std::vector<Vec3>& low_dirs,
                                      const std::vector<Vec3>& high_dirs, int l_max,
                                      const ShFitOptions& opts = {}) {
  return ShInterpolator(low_dirs, high_dirs, l_max, opts).apply(low_signals);
}

}  // namespace qsr
