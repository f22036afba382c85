#pragma once

// Synthetic multi-shell diffusion phantom: an ellipsoidal "brain" with an
// isotropic outer rind (GM-like) around an anisotropic core (WM-like). The
// core holds a curved fibre bundle wrapping around a random axis plus a
// straight bundle whose slab crosses it.

#include <array>
#include <cmath>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "qsr/common.hpp"
#include "qsr/volume.hpp"

namespace qsr {

// n spherical-Fibonacci points, rotated by a seed-drawn random rotation and
// folded onto the z >= 0 hemisphere.
inline std::vector<Vec3> fibonacci_directions(std::size_t n, std::uint64_t seed) {
  if (n == 0) throw InvalidArgument("fibonacci_directions: n must be >= 1");
  Rng rng(hash_seed(seed, 0x5EEDF1B0ull));
  // Uniform random rotation from a random unit quaternion.
  const double u1 = rng.uniform(), u2 = rng.uniform(), u3 = rng.uniform();
  const double tau = 6.283185307179586;
  const Eigen::Quaterniond rot(std::sqrt(u1) * std::cos(tau * u3), std::sqrt(1 - u1) * std::sin(tau * u2),
                               std::sqrt(1 - u1) * std::cos(tau * u2), std::sqrt(u1) * std::sin(tau * u3));
  const Eigen::Matrix3d r = rot.normalized().toRotationMatrix();
  // Fibonacci lattice restricted to the upper hemisphere, which is the
  // antipodal version of the full-sphere lattice.
  const double golden = (1.0 + std::sqrt(5.0)) / 2.0;
  std::vector<Vec3> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double z = 1.0 - (static_cast<double>(i) + 0.5) / static_cast<double>(n);
    const double rad = std::sqrt(std::max(0.0, 1.0 - z * z));
    const double phi = tau * static_cast<double>(i) / golden;
    Vec3 v = r * Vec3(rad * std::cos(phi), rad * std::sin(phi), z);
    if (v.z() < 0 || (v.z() == 0 && v.y() < 0)) v = -v;
    out.push_back(v.normalized());
  }
  return out;
}

enum class NoiseModel { none, gaussian, rician };

inline NoiseModel parse_noise_model(const std::string& s) {
  if (s == "none") return NoiseModel::none;
  if (s == "gaussian") return NoiseModel::gaussian;
  if (s == "rician") return NoiseModel::rician;
  throw ConfigError("unknown noise model '" + s + "' (expected none, gaussian or rician)");
}

inline std::string to_string(NoiseModel n) {
  return n == NoiseModel::none ? "none" : n == NoiseModel::gaussian ? "gaussian" : "rician";
}

struct ShellSpec {
  double bvalue = 1000;
  std::size_t directions = 90;
  bool operator==(const ShellSpec&) const = default;
};

struct PhantomSpec {
  std::array<std::size_t, 3> dims{20, 20, 20};
  std::vector<ShellSpec> shells{{1000, 90}, {2000, 90}, {3000, 90}};
  std::size_t b0_volumes = 6;
  double s0 = 4000;
  double wm_axial = 1.7e-3;   // mm^2/s
  double wm_radial = 0.3e-3;  // mm^2/s
  double gm_diffusivity = 0.8e-3;
  double crossing_fraction = 0.5;  // volume fraction of the straight bundle where bundles cross
  NoiseModel noise = NoiseModel::rician;
  double sigma = 4000.0 / 15.0;  // raw-scale SNR 15 at b = 0
  std::uint64_t seed = 0;

  bool operator==(const PhantomSpec&) const = default;
};

inline nlohmann::json to_json(const PhantomSpec& s) {
  nlohmann::json shells = nlohmann::json::array();
  for (const auto& sh : s.shells) shells.push_back({{"bvalue", sh.bvalue}, {"directions", sh.directions}});
  return {{"dims", s.dims},
          {"shells", shells},
          {"b0_volumes", s.b0_volumes},
          {"s0", s.s0},
          {"wm_axial", s.wm_axial},
          {"wm_radial", s.wm_radial},
          {"gm_diffusivity", s.gm_diffusivity},
          {"crossing_fraction", s.crossing_fraction},
          {"noise", to_string(s.noise)},
          {"sigma", s.sigma},
          {"seed", s.seed}};
}

inline PhantomSpec phantom_spec_from_json(const nlohmann::json& j, PhantomSpec s = {}) {
  if (!j.is_object()) throw ConfigError("phantom config must be an object");
  const auto known = to_json(s);
  for (const auto& [key, _] : j.items())
    if (!known.contains(key)) throw ConfigError("unknown phantom config key '" + key + "'");
  try {
    if (j.contains("dims")) s.dims = j["dims"].get<std::array<std::size_t, 3>>();
    if (j.contains("shells")) {
      s.shells.clear();
      for (const auto& e : j["shells"]) {
        for (const auto& [key, _] : e.items())
          if (key != "bvalue" && key != "directions") throw ConfigError("unknown phantom shell key '" + key + "'");
        s.shells.push_back({e.at("bvalue").get<double>(), e.at("directions").get<std::size_t>()});
      }
    }
    if (j.contains("b0_volumes")) s.b0_volumes = j["b0_volumes"].get<std::size_t>();
    if (j.contains("s0")) s.s0 = j["s0"].get<double>();
    if (j.contains("wm_axial")) s.wm_axial = j["wm_axial"].get<double>();
    if (j.contains("wm_radial")) s.wm_radial = j["wm_radial"].get<double>();
    if (j.contains("gm_diffusivity")) s.gm_diffusivity = j["gm_diffusivity"].get<double>();
    if (j.contains("crossing_fraction")) s.crossing_fraction = j["crossing_fraction"].get<double>();
    if (j.contains("noise")) s.noise = parse_noise_model(j["noise"].get<std::string>());
    if (j.contains("sigma")) s.sigma = j["sigma"].get<double>();
    if (j.contains("seed")) s.seed = j["seed"].get<std::uint64_t>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("phantom config: ") + e.what());
  }
  return s;
}

// One diffusion compartment: D = radial I + (axial - radial) e e^T.
struct Compartment {
  Eigen::Matrix3d tensor = Eigen::Matrix3d::Zero();
  double fraction = 1.0;
};

inline Eigen::Matrix3d axial_tensor(const Vec3& axis, double axial, double radial) {
  const Vec3 e = axis.normalized();
  return radial * Eigen::Matrix3d::Identity() + (axial - radial) * e * e.transpose();
}

inline void require_spd(const Eigen::Matrix3d& d) {
  if (!d.isApprox(d.transpose(), 1e-12)) throw InvalidArgument("phantom: diffusion tensor is not symmetric");
  Eigen::SelfAdjointEigenSolver<Eigen::Matrix3d> eig(d, Eigen::EigenvaluesOnly);
  if (!(eig.eigenvalues().minCoeff() > 0)) throw InvalidArgument("phantom: diffusion tensor is not positive definite");
}

// S(g, b) = s0 sum_i f_i exp(-b g^T D_i g)
inline double multi_tensor_signal(const std::vector<Compartment>& comps, const Vec3& g, double b, double s0) {
  double s = 0;
  for (const auto& c : comps) s += c.fraction * std::exp(-b * g.dot(c.tensor * g));
  return s0 * s;
}

struct Phantom {
  DwiDataset noisy;   // measured
  Volume4 clean;      // noise-free truth, same layout as noisy.signal
  Mask3 wm;
  Mask3 gm;
  std::vector<std::vector<Compartment>> compartments;  // per voxel; empty outside the brain
  std::vector<Vec3> directions;  // per volume (zero for b = 0)
  std::vector<double> bvals;
};

namespace phantom_detail {

inline Vec3 random_unit(Rng& rng) {
  for (;;) {
    Vec3 v(rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1));
    const double n = v.norm();
    if (n > 1e-3 && n <= 1) return v / n;
  }
}

}  // namespace phantom_detail

inline Phantom generate(const PhantomSpec& spec) {
  const auto [nx, ny, nz] = spec.dims;
  if (nx == 0 || ny == 0 || nz == 0) throw InvalidArgument("phantom: grid extents must be positive");
  if (spec.shells.empty()) throw InvalidArgument("phantom: at least one shell is required");
  if (!(spec.s0 > 0)) throw InvalidArgument("phantom: s0 must be positive");
  if (spec.sigma < 0) throw InvalidArgument("phantom: sigma must be >= 0");
  if (spec.crossing_fraction < 0 || spec.crossing_fraction > 1)
    throw InvalidArgument("phantom: crossing_fraction must lie in [0, 1]");
  require_spd(axial_tensor(Vec3::UnitX(), spec.wm_axial, spec.wm_radial));
  require_spd(spec.gm_diffusivity * Eigen::Matrix3d::Identity());

  // Gradient table: b0 volumes first, then each shell.
  Phantom ph;
  for (std::size_t i = 0; i < spec.b0_volumes; ++i) {
    ph.directions.push_back(Vec3::Zero());
    ph.bvals.push_back(0);
  }
  for (std::size_t k = 0; k < spec.shells.size(); ++k) {
    const auto& sh = spec.shells[k];
    if (!(sh.bvalue > 0) || sh.directions == 0) throw InvalidArgument("phantom: shells need b > 0 and >= 1 direction");
    for (const auto& d : fibonacci_directions(sh.directions, hash_seed(spec.seed, k, 17))) {
      ph.directions.push_back(d);
      ph.bvals.push_back(sh.bvalue);
    }
  }
  const std::size_t nq = ph.bvals.size();

  // Geometry drawn from the seed.
  Rng geo(hash_seed(spec.seed, 0xA11CEull));
  const Vec3 centre(0.5 * static_cast<double>(nx) - 0.5 + geo.uniform(-0.5, 0.5),
                    0.5 * static_cast<double>(ny) - 0.5 + geo.uniform(-0.5, 0.5),
                    0.5 * static_cast<double>(nz) - 0.5 + geo.uniform(-0.5, 0.5));
  const Vec3 radii(0.47 * static_cast<double>(nx), 0.47 * static_cast<double>(ny), 0.47 * static_cast<double>(nz));
  const Vec3 wrap_axis = phantom_detail::random_unit(geo);
  Vec3 straight = phantom_detail::random_unit(geo);
  Vec3 slab_normal = straight.cross(phantom_detail::random_unit(geo)).normalized();
  const double slab_offset = geo.uniform(-2.0, 2.0);
  const double slab_half = 2.5;
  const double core = 0.72 + geo.uniform(-0.05, 0.05);

  const std::size_t nvox = nx * ny * nz;
  ph.noisy.mask = Mask3(nx, ny, nz);
  ph.wm = Mask3(nx, ny, nz);
  ph.gm = Mask3(nx, ny, nz);
  ph.compartments.assign(nvox, {});
  for (std::size_t z = 0; z < nz; ++z)
    for (std::size_t y = 0; y < ny; ++y)
      for (std::size_t x = 0; x < nx; ++x) {
        const std::size_t v = x + nx * (y + ny * z);
        const Vec3 p(static_cast<double>(x), static_cast<double>(y), static_cast<double>(z));
        const Vec3 rel = p - centre;
        const double r = rel.cwiseQuotient(radii).norm();
        if (r > 1.0) continue;
        ph.noisy.mask.data[v] = 1;
        auto& comps = ph.compartments[v];
        if (r > core) {
          ph.gm.data[v] = 1;
          comps.push_back({spec.gm_diffusivity * Eigen::Matrix3d::Identity(), 1.0});
          continue;
        }
        ph.wm.data[v] = 1;
        // Curved bundle: fibres circle the wrap axis; near the axis they
        // run along it.
        Vec3 tangent = wrap_axis.cross(rel);
        const double t = tangent.norm();
        const Vec3 dir = t > 1.0 ? Vec3(tangent / t) : Vec3((wrap_axis * (1.0 - t) + tangent).normalized());
        const auto curved = axial_tensor(dir, spec.wm_axial, spec.wm_radial);
        const bool crossing = std::abs(rel.dot(slab_normal) - slab_offset) <= slab_half;
        if (crossing && spec.crossing_fraction > 0) {
          comps.push_back({curved, 1.0 - spec.crossing_fraction});
          comps.push_back({axial_tensor(straight, spec.wm_axial, spec.wm_radial), spec.crossing_fraction});
          if (spec.crossing_fraction == 1.0) comps.erase(comps.begin());
        } else {
          comps.push_back({curved, 1.0});
        }
      }

  ph.clean = Volume4(nx, ny, nz, nq);
  Volume4 noisy(nx, ny, nz, nq);
  parallel_for(nvox, [&](std::size_t v) {
    const auto& comps = ph.compartments[v];
    if (comps.empty()) return;
    for (std::size_t q = 0; q < nq; ++q) {
      const double s = multi_tensor_signal(comps, ph.directions[q], ph.bvals[q], spec.s0);
      const std::size_t idx = v + q * nvox;
      ph.clean.data[idx] = s;
      Rng rng(hash_seed(spec.seed, 0x9015Eull, v, q));
      switch (spec.noise) {
        case NoiseModel::none: noisy.data[idx] = s; break;
        case NoiseModel::gaussian: noisy.data[idx] = s + spec.sigma * rng.normal(); break;
        case NoiseModel::rician: {
          const double re = s + spec.sigma * rng.normal();
          const double im = spec.sigma * rng.normal();
          noisy.data[idx] = std::hypot(re, im);
          break;
        }
      }
    }
  });

  GradientTable table;
  table.bvals = ph.bvals;
  table.bvecs = ph.directions;
  ph.noisy = make_dataset(std::move(noisy), table, ph.noisy.mask);
  return ph;
}

}  // namespace qsr
