#include <gtest/gtest.h>

#include <numbers>

#include "qsr/phantom.hpp"
#include "qsr/shmath.hpp"

using namespace qsr;

namespace {

constexpr double pi = std::numbers::pi;

// Closed forms of the orthonormal even real harmonics up to order 2.
double y00(double, double) { return 0.5 / std::sqrt(pi); }
double y20(double t, double) { return std::sqrt(5 / (16 * pi)) * (3 * std::cos(t) * std::cos(t) - 1); }
double y21(double t, double p) { return -std::sqrt(15 / (4 * pi)) * std::sin(t) * std::cos(t) * std::cos(p); }
double y2m1(double t, double p) { return -std::sqrt(15 / (4 * pi)) * std::sin(t) * std::cos(t) * std::sin(p); }
double y22(double t, double p) { return std::sqrt(15 / (16 * pi)) * std::sin(t) * std::sin(t) * std::cos(2 * p); }
double y2m2(double t, double p) { return std::sqrt(15 / (16 * pi)) * std::sin(t) * std::sin(t) * std::sin(2 * p); }

std::vector<Vec3> random_dirs(std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<Vec3> d;
  for (std::size_t i = 0; i < n; ++i) d.push_back(Vec3(rng.normal(), rng.normal(), rng.normal()).normalized());
  return d;
}

}  // namespace

TEST(ModifiedSh, ClosedFormsUpToOrderTwo) {
  Rng rng(1);
  for (int i = 0; i < 200; ++i) {
    const double t = rng.uniform() * pi, p = rng.uniform() * 2 * pi;
    EXPECT_NEAR(modified_sh(0, 0, t, p), y00(t, p), 1e-14);
    EXPECT_NEAR(modified_sh(2, 0, t, p), y20(t, p), 1e-14);
    EXPECT_NEAR(modified_sh(2, 1, t, p), y21(t, p), 1e-14);
    EXPECT_NEAR(modified_sh(2, -1, t, p), y2m1(t, p), 1e-14);
    EXPECT_NEAR(modified_sh(2, 2, t, p), y22(t, p), 1e-14);
    EXPECT_NEAR(modified_sh(2, -2, t, p), y2m2(t, p), 1e-14);
  }
}

TEST(ModifiedSh, Examples) {
  EXPECT_NEAR(modified_sh(0, 0, 0.3, 1.1), 0.28209479177387814, 1e-15);
  EXPECT_DOUBLE_EQ(modified_sh(1, 0, 0.3, 1.1), 0.0);
  EXPECT_DOUBLE_EQ(modified_sh(3, -2, 0.3, 1.1), 0.0);
  EXPECT_THROW(modified_sh(2, 3, 0.3, 1.1), InvalidArgument);
  EXPECT_THROW(modified_sh(-2, 0, 0.3, 1.1), InvalidArgument);
}

TEST(ModifiedSh, AntipodalSymmetry) {
  for (const auto& d : random_dirs(100, 2)) {
    const auto a = to_spherical(d), b = to_spherical(-d);
    for (int l = 0; l <= 8; l += 2)
      for (int m = -l; m <= l; ++m)
        EXPECT_NEAR(modified_sh(l, m, a.theta, a.phi), modified_sh(l, m, b.theta, b.phi), 1e-12);
  }
}

// Quadrature on a dense Fibonacci sphere approximates the Gram matrix of the
// basis, which should be the identity.
TEST(ModifiedSh, OrthonormalOnTheSphere) {
  const std::size_t n = 20000;
  std::vector<Vec3> dirs;
  const double golden = pi * (3 - std::sqrt(5.0));
  for (std::size_t i = 0; i < n; ++i) {
    const double z = 1 - 2 * (static_cast<double>(i) + 0.5) / n;
    const double r = std::sqrt(1 - z * z);
    dirs.emplace_back(r * std::cos(golden * i), r * std::sin(golden * i), z);
  }
  const auto basis = build_basis(dirs, 6);
  const Eigen::MatrixXd gram = basis.entries.transpose() * basis.entries * (4 * pi / n);
  EXPECT_LT((gram - Eigen::MatrixXd::Identity(gram.rows(), gram.cols())).cwiseAbs().maxCoeff(), 1e-3);
}

TEST(BuildBasis, ShapeAndErrors) {
  const auto b = build_basis(random_dirs(30, 3), 4);
  EXPECT_EQ(b.rows(), 30);
  EXPECT_EQ(b.cols(), 15);
  EXPECT_EQ(n_coef(0), 1u);
  EXPECT_EQ(n_coef(2), 6u);
  EXPECT_EQ(n_coef(8), 45u);
  EXPECT_THROW(build_basis(random_dirs(5, 3), 3), InvalidArgument);
  EXPECT_THROW(build_basis({}, 2), InvalidArgument);
}

TEST(ToSpherical, Ranges) {
  for (const auto& d : random_dirs(500, 4)) {
    const auto a = to_spherical(d);
    EXPECT_GE(a.theta, 0);
    EXPECT_LE(a.theta, pi);
    EXPECT_GE(a.phi, 0);
    EXPECT_LT(a.phi, 2 * pi);
    const Vec3 back(std::sin(a.theta) * std::cos(a.phi), std::sin(a.theta) * std::sin(a.phi), std::cos(a.theta));
    EXPECT_LT((back - d).norm(), 1e-12);
  }
}

TEST(FitSh, MatchesDenseNormalEquationsOracle) {
  Rng rng(5);
  for (int trial = 0; trial < 100; ++trial) {
    Eigen::MatrixXd a(10, 6);
    for (int i = 0; i < 10; ++i)
      for (int j = 0; j < 6; ++j) a(i, j) = rng.normal();
    Eigen::VectorXd y(10);
    for (int i = 0; i < 10; ++i) y(i) = rng.normal();
    ShBasisMatrix basis;
    basis.entries = a;
    basis.l_max = 2;
    const auto got = fit_sh(y, basis).values;
    const Eigen::VectorXd oracle = (a.transpose() * a).inverse() * (a.transpose() * y);
    EXPECT_LT((got - oracle).norm() / oracle.norm(), 1e-9);
  }
}

TEST(FitSh, RecoversExactCoefficients) {
  Rng rng(6);
  const auto dirs = random_dirs(40, 7);
  const auto basis = build_basis(dirs, 4);
  Eigen::VectorXd c(15);
  for (int i = 0; i < 15; ++i) c(i) = rng.normal();
  for (auto solver : {ShSolver::normal_equations, ShSolver::orthogonal}) {
    ShFitOptions o;
    o.solver = solver;
    const auto got = fit_sh(basis.entries * c, basis, o);
    EXPECT_EQ(got.l_max, 4);
    EXPECT_LT((got.values - c).norm() / c.norm(), 1e-10);
  }
}

TEST(FitSh, Errors) {
  const auto basis = build_basis(random_dirs(5, 8), 2);
  EXPECT_THROW(fit_sh(Eigen::VectorXd::Zero(5), basis), NumericalError);
  // Every direction on the same axis gives a rank-deficient basis.
  const auto flat = build_basis(std::vector<Vec3>(10, Vec3::UnitZ()), 2);
  EXPECT_THROW(fit_sh(Eigen::VectorXd::Zero(10), flat), NumericalError);
  const auto ok = build_basis(random_dirs(12, 9), 2);
  EXPECT_THROW(fit_sh(Eigen::VectorXd::Zero(11), ok), ShapeError);
}

TEST(ShInterpolate, RoundTripOrderTwo) {
  Rng rng(10);
  const auto all = fibonacci_directions(114, 11);
  const std::vector<Vec3> low(all.begin(), all.begin() + 30), high(all.begin() + 30, all.end());
  Eigen::VectorXd c(6);
  for (int i = 0; i < 6; ++i) c(i) = rng.normal();
  const auto got = sh_interpolate(build_basis(low, 2).entries * c, low, high, 2);
  const Eigen::VectorXd want = build_basis(high, 2).entries * c;
  EXPECT_LT((got - want).norm() / want.norm(), 1e-10);
}

TEST(ShInterpolate, ReproducesDataAtFittedDirections) {
  const auto dirs = fibonacci_directions(6, 12);
  Eigen::VectorXd y(6);
  y << 1, 2, 3, 4, 5, 6;
  const auto got = sh_interpolate(y, dirs, dirs, 2);
  EXPECT_LT((got - y).norm(), 1e-8);
}

TEST(ShInterpolator, MatrixIsLinearMap) {
  const auto low = fibonacci_directions(15, 13), high = fibonacci_directions(20, 14);
  ShInterpolator interp(low, high, 4);
  EXPECT_EQ(interp.matrix().rows(), 20);
  EXPECT_EQ(interp.matrix().cols(), 15);
  Rng rng(15);
  Eigen::VectorXd a(15), b(15);
  for (int i = 0; i < 15; ++i) a(i) = rng.normal(), b(i) = rng.normal();
  EXPECT_LT((interp.apply(2 * a + b) - (2 * interp.apply(a) + interp.apply(b))).norm(), 1e-9);
}
