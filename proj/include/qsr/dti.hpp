#pragma once

#include <cmath>
#include <vector>

#include "qsr/common.hpp"
#include "qsr/volume.hpp"

namespace qsr {

struct DtiOptions {
  double signal_floor = 1e-6;  // S/S0 ratios below this are clamped
};

// Log-linear least-squares tensor fit, log(S / S0) = -b g^T D g, with the
// pseudo-inverse of the design precomputed once per gradient table.
class DtiFitter {
 public:
  DtiFitter(const std::vector<Vec3>& dirs, const std::vector<double>& bvals, DtiOptions opts = {}) : opts_(opts) {
    if (dirs.size() != bvals.size()) throw ShapeError("fit_dti: direction and b-value counts differ");
    if (dirs.size() < 6)
      throw InvalidArgument("fit_dti: need at least 6 diffusion-weighted directions, got " +
                            std::to_string(dirs.size()));
    const auto n = static_cast<Eigen::Index>(dirs.size());
    Eigen::MatrixXd a(n, 6);
    for (Eigen::Index i = 0; i < n; ++i) {
      const Vec3 g = dirs[static_cast<std::size_t>(i)].normalized();
      const double b = bvals[static_cast<std::size_t>(i)];
      a.row(i) << -b * g.x() * g.x(), -b * g.y() * g.y(), -b * g.z() * g.z(), -2 * b * g.x() * g.y(),
          -2 * b * g.x() * g.z(), -2 * b * g.y() * g.z();
    }
    Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(a);
    if (qr.rank() < 6) throw NumericalError("fit_dti: rank-deficient gradient design (collinear directions?)");
    pinv_ = qr.solve(Eigen::MatrixXd::Identity(n, n));
  }

  // Returns D; clamped counts the number of ratios raised to the floor.
  Eigen::Matrix3d fit(const Eigen::VectorXd& signals, double s0, std::size_t* clamped = nullptr) const {
    if (signals.size() != pinv_.cols()) throw ShapeError("fit_dti: signal length differs from the gradient table");
    if (!(s0 > 0)) throw InvalidArgument("fit_dti: s0 must be positive");
    Eigen::VectorXd y(signals.size());
    for (Eigen::Index i = 0; i < y.size(); ++i) {
      double r = signals(i) / s0;
      if (!(r >= opts_.signal_floor)) {
        r = opts_.signal_floor;
        if (clamped) ++*clamped;
      }
      y(i) = std::log(r);
    }
    const Eigen::VectorXd d = pinv_ * y;
    Eigen::Matrix3d m;
    m << d(0), d(3), d(4), d(3), d(1), d(5), d(4), d(5), d(2);
    return m;
  }

 private:
  DtiOptions opts_;
  Eigen::MatrixXd pinv_;
};

inline Eigen::Matrix3d fit_dti(const Eigen::VectorXd& signals, const std::vector<Vec3>& dirs,
                               const std::vector<double>& bvals, double s0, const DtiOptions& opts = {}) {
  std::size_t clamped = 0;
  auto d = DtiFitter(dirs, bvals, opts).fit(signals, s0, &clamped);
  if (clamped) log_warning("fit_dti: " + std::to_string(clamped) + " nonpositive signal ratios clamped");
  return d;
}

// Fractional anisotropy sqrt(3/2) |D - tr(D)/3 I|_F / |D|_F, clamped to [0, 1].
inline double fa(const Eigen::Matrix3d& d) {
  if (!d.isApprox(d.transpose(), 1e-9)) throw InvalidArgument("fa: tensor is not symmetric");
  const double norm = d.norm();
  if (norm == 0) return 0.0;
  const Eigen::Matrix3d dev = d - (d.trace() / 3.0) * Eigen::Matrix3d::Identity();
  return std::clamp(std::sqrt(1.5) * dev.norm() / norm, 0.0, 1.0);
}

// Voxelwise FA inside the mask (0 elsewhere, and where s0 <= 0).
inline std::vector<double> fa_map(const Volume4& dwi, const std::vector<Vec3>& dirs, const std::vector<double>& bvals,
                                  const std::vector<double>& s0, const Mask3& mask, const DtiOptions& opts = {}) {
  if (!mask.matches(dwi)) throw ShapeError("fa_map: mask extents differ from volume");
  if (s0.size() != dwi.spatial_size()) throw ShapeError("fa_map: s0 map size differs from volume");
  if (dwi.q() != dirs.size()) throw ShapeError("fa_map: volume count differs from gradient table");
  const DtiFitter fitter(dirs, bvals, opts);
  std::vector<double> out(dwi.spatial_size(), 0.0);
  std::vector<std::size_t> clamped(dwi.spatial_size(), 0);
  parallel_for(dwi.spatial_size(), [&](std::size_t v) {
    if (!mask.data[v] || !(s0[v] > 0)) return;
    Eigen::VectorXd sig(static_cast<Eigen::Index>(dwi.q()));
    for (std::size_t q = 0; q < dwi.q(); ++q) sig(static_cast<Eigen::Index>(q)) = dwi.volume(q)[v];
    out[v] = fa(fitter.fit(sig, s0[v], &clamped[v]));
  });
  std::size_t total = 0;
  for (auto c : clamped) total += c;
  if (total) log_warning("fa_map: " + std::to_string(total) + " nonpositive signal ratios clamped");
  return out;
}

// Voxelwise mean of the listed volumes.
inline std::vector<double> mean_volume(const Volume4& v, const std::vector<std::size_t>& qs) {
  std::vector<double> out(v.spatial_size(), 0.0);
  if (qs.empty()) throw InvalidArgument("mean_volume: no volumes listed");
  for (auto q : qs)
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += v.volume(q)[i];
  for (auto& x : out) x /= static_cast<double>(qs.size());
  return out;
}

}  // namespace qsr
