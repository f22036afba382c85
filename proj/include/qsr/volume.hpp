#pragma once

#include <array>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include "qsr/common.hpp"
#include "qsr/nifti.hpp"
#include "qsr/qspace.hpp"

namespace qsr {

// Dense 4D array (X, Y, Z, Q), x fastest (NIfTI order).
struct Volume4 {
  std::array<std::size_t, 4> dims{0, 0, 0, 0};
  std::vector<double> data;

  Volume4() = default;
  Volume4(std::size_t x, std::size_t y, std::size_t z, std::size_t q, double fill = 0.0)
      : dims{x, y, z, q}, data(x * y * z * q, fill) {}

  std::size_t spatial_size() const noexcept { return dims[0] * dims[1] * dims[2]; }
  std::size_t q() const noexcept { return dims[3]; }

  std::size_t index(std::size_t x, std::size_t y, std::size_t z, std::size_t q) const noexcept {
    return x + dims[0] * (y + dims[1] * (z + dims[2] * q));
  }
  double& operator()(std::size_t x, std::size_t y, std::size_t z, std::size_t q) noexcept {
    return data[index(x, y, z, q)];
  }
  double operator()(std::size_t x, std::size_t y, std::size_t z, std::size_t q) const noexcept {
    return data[index(x, y, z, q)];
  }

  // Mutable view of one q-volume.
  double* volume(std::size_t q) noexcept { return data.data() + q * spatial_size(); }
  const double* volume(std::size_t q) const noexcept { return data.data() + q * spatial_size(); }

  // New array holding the listed q-volumes in order.
  Volume4 select(const std::vector<std::size_t>& qs) const {
    Volume4 out(dims[0], dims[1], dims[2], qs.size());
    const std::size_t s = spatial_size();
    for (std::size_t i = 0; i < qs.size(); ++i) {
      if (qs[i] >= q()) throw InvalidArgument("Volume4::select: q index out of range");
      std::copy_n(volume(qs[i]), s, out.volume(i));
    }
    return out;
  }

  bool same_spatial(const Volume4& o) const noexcept {
    return dims[0] == o.dims[0] && dims[1] == o.dims[1] && dims[2] == o.dims[2];
  }
};

struct Mask3 {
  std::array<std::size_t, 3> dims{0, 0, 0};
  std::vector<std::uint8_t> data;

  Mask3() = default;
  Mask3(std::size_t x, std::size_t y, std::size_t z, std::uint8_t fill = 0)
      : dims{x, y, z}, data(x * y * z, fill) {}

  std::size_t size() const noexcept { return data.size(); }
  std::size_t count() const noexcept {
    return static_cast<std::size_t>(std::count_if(data.begin(), data.end(), [](auto v) { return v != 0; }));
  }
  std::uint8_t& operator()(std::size_t x, std::size_t y, std::size_t z) noexcept {
    return data[x + dims[0] * (y + dims[1] * z)];
  }
  std::uint8_t operator()(std::size_t x, std::size_t y, std::size_t z) const noexcept {
    return data[x + dims[0] * (y + dims[1] * z)];
  }
  bool matches(const Volume4& v) const noexcept {
    return dims[0] == v.dims[0] && dims[1] == v.dims[1] && dims[2] == v.dims[2];
  }
};

struct DwiDataset {
  Volume4 signal;
  std::vector<BVector> bvectors;                 // one per q-volume
  std::map<int, std::vector<std::size_t>> shells;  // nominal b -> q-indices
  Mask3 mask;

  std::vector<double> bvals() const {
    std::vector<double> out;
    for (const auto& b : bvectors) out.push_back(b.bvalue());
    return out;
  }

  void validate() const {
    if (signal.q() != bvectors.size())
      throw ShapeError("dataset: signal has " + std::to_string(signal.q()) + " volumes but " +
                       std::to_string(bvectors.size()) + " b-vectors");
    if (!mask.matches(signal)) throw ShapeError("dataset: mask extents differ from signal extents");
    for (double v : signal.data)
      if (!std::isfinite(v)) throw NumericalError("dataset: non-finite signal value");
  }

  QSpaceShell shell(int nominal) const {
    auto it = shells.find(nominal);
    if (it == shells.end()) throw ConfigError("dataset has no b=" + std::to_string(nominal) + " shell");
    std::vector<BVector> b;
    for (auto i : it->second) b.push_back(bvectors[i]);
    return QSpaceShell(std::move(b), nominal);
  }

  Volume4 shell_signal(int nominal) const {
    auto it = shells.find(nominal);
    if (it == shells.end()) throw ConfigError("dataset has no b=" + std::to_string(nominal) + " shell");
    return signal.select(it->second);
  }
};

inline DwiDataset make_dataset(Volume4 signal, const GradientTable& table, Mask3 mask) {
  DwiDataset d;
  d.signal = std::move(signal);
  d.bvectors = table.bvectors();
  d.shells = group_shells(table.bvals);
  d.mask = std::move(mask);
  d.validate();
  return d;
}

// ---------------------------------------------------------------------------
// NIfTI <-> arrays

inline Volume4 volume_from_nifti(const NiftiImage& img) {
  if (img.dim[0] < 3 || img.dim[0] > 4)
    throw ShapeError("expected a 3D or 4D NIfTI image, got rank " + std::to_string(img.dim[0]));
  const auto d = [&](int i) { return i <= img.dim[0] ? static_cast<std::size_t>(img.dim[i]) : 1u; };
  Volume4 v(d(1), d(2), d(3), d(4));
  v.data = img.data;
  return v;
}

inline NiftiImage nifti_from_volume(const Volume4& v, NiftiDatatype type = NiftiDatatype::float32) {
  NiftiImage img;
  img.dim = {4, static_cast<std::int16_t>(v.dims[0]), static_cast<std::int16_t>(v.dims[1]),
             static_cast<std::int16_t>(v.dims[2]), static_cast<std::int16_t>(v.dims[3]), 1, 1, 1};
  img.datatype = type;
  img.data = v.data;
  return img;
}

inline Volume4 load_volume(const std::string& path) { return volume_from_nifti(load_nifti(path)); }

inline void save_volume(const Volume4& v, const std::string& path) { save_nifti(nifti_from_volume(v), path); }

inline Mask3 load_mask(const std::string& path) {
  const auto v = load_volume(path);
  if (v.q() != 1) throw ShapeError("mask '" + path + "' must be 3D");
  Mask3 m(v.dims[0], v.dims[1], v.dims[2]);
  for (std::size_t i = 0; i < m.size(); ++i) m.data[i] = v.data[i] != 0.0;
  return m;
}

inline void save_mask(const Mask3& m, const std::string& path) {
  NiftiImage img;
  img.dim = {3, static_cast<std::int16_t>(m.dims[0]), static_cast<std::int16_t>(m.dims[1]),
             static_cast<std::int16_t>(m.dims[2]), 1, 1, 1, 1};
  img.datatype = NiftiDatatype::uint8;
  img.data.assign(m.data.begin(), m.data.end());
  save_nifti(img, path);
}

inline DwiDataset load_dataset(const std::string& nii, const std::string& bvecs, const std::string& bvals,
                               const std::string& mask_path) {
  auto signal = load_volume(nii);
  auto table = read_gradient_table(bvecs, bvals);
  Mask3 mask = mask_path.empty() ? Mask3(signal.dims[0], signal.dims[1], signal.dims[2], 1) : load_mask(mask_path);
  return make_dataset(std::move(signal), table, std::move(mask));
}

// ---------------------------------------------------------------------------
// Normalization

using ShellDivisors = std::map<int, double>;

inline ShellDivisors default_divisors() { return {{1000, 4000.0}, {2000, 3000.0}, {3000, 2000.0}}; }

namespace volume_detail {

inline DwiDataset scale_shells(DwiDataset d, const ShellDivisors& divisors, bool invert) {
  const std::size_t s = d.signal.spatial_size();
  for (const auto& [b, qs] : d.shells) {
    auto it = divisors.find(b);
    if (it == divisors.end()) throw ConfigError("no normalization divisor for shell b=" + std::to_string(b));
    if (!(it->second > 0)) throw ConfigError("normalization divisor for b=" + std::to_string(b) + " must be > 0");
    for (auto q : qs) {
      double* v = d.signal.volume(q);
      for (std::size_t i = 0; i < s; ++i) v[i] = invert ? v[i] * it->second : v[i] / it->second;
    }
  }
  return d;
}

}  // namespace volume_detail

// Divides each diffusion-weighted volume by its shell's divisor. b = 0
// volumes are left untouched.
inline DwiDataset normalize_shell(DwiDataset d, const ShellDivisors& divisors) {
  d = volume_detail::scale_shells(std::move(d), divisors, false);
  // Soft check: the bulk of the normalized distribution should sit in [0, 1].
  std::vector<double> vals;
  for (const auto& [b, qs] : d.shells)
    for (auto q : qs)
      for (std::size_t i = 0; i < d.signal.spatial_size(); ++i)
        if (d.mask.data[i]) vals.push_back(d.signal.volume(q)[i]);
  if (!vals.empty()) {
    auto p95 = vals.begin() + static_cast<std::ptrdiff_t>(0.95 * static_cast<double>(vals.size() - 1));
    std::nth_element(vals.begin(), p95, vals.end());
    if (*p95 > 1.5) log_warning("95th percentile of normalized signal is " + std::to_string(*p95) + " (> 1.5)");
  }
  return d;
}

inline DwiDataset denormalize_shell(DwiDataset d, const ShellDivisors& divisors) {
  return volume_detail::scale_shells(std::move(d), divisors, true);
}

// ---------------------------------------------------------------------------
// Self-supervised denoising

struct DenoiseOptions {
  std::size_t min_volumes = 10;
};

// Voxelwise self-supervised regression: each volume's masked voxels are
// replaced by their ordinary least-squares prediction from every other
// volume (plus intercept). Voxels outside the mask are unchanged.
inline DwiDataset denoise_p2s(DwiDataset d, const DenoiseOptions& opts = {}) {
  const std::size_t nq = d.signal.q();
  if (nq < opts.min_volumes)
    throw InvalidArgument("denoise_p2s: need at least " + std::to_string(opts.min_volumes) +
                          " volumes to regress from, dataset has " + std::to_string(nq) +
                          " (disable denoising to skip)");
  if (!d.mask.matches(d.signal)) throw ShapeError("denoise_p2s: mask extents differ from signal");
  std::vector<std::size_t> voxels;
  for (std::size_t i = 0; i < d.mask.size(); ++i)
    if (d.mask.data[i]) voxels.push_back(i);
  if (voxels.empty()) throw InvalidArgument("denoise_p2s: empty mask");

  const auto n = static_cast<Eigen::Index>(voxels.size());
  const auto p = static_cast<Eigen::Index>(nq);
  // Design: column 0 is the intercept, column 1 + q is volume q.
  Eigen::MatrixXd design(n, p + 1);
  design.col(0).setOnes();
  for (Eigen::Index q = 0; q < p; ++q) {
    const double* v = d.signal.volume(static_cast<std::size_t>(q));
    for (Eigen::Index r = 0; r < n; ++r) design(r, q + 1) = v[voxels[static_cast<std::size_t>(r)]];
  }
  // Scale columns so the Gram matrix is well balanced.
  Eigen::VectorXd scale = design.colwise().norm().transpose();
  for (Eigen::Index c = 0; c <= p; ++c)
    if (scale(c) == 0) scale(c) = 1.0;
  const Eigen::MatrixXd scaled = design * scale.cwiseInverse().asDiagonal();
  const Eigen::MatrixXd gram = scaled.transpose() * scaled;

  Volume4 out = d.signal;
  parallel_for(static_cast<std::size_t>(p), [&](std::size_t j) {
    const auto col = static_cast<Eigen::Index>(j) + 1;
    std::vector<Eigen::Index> keep;
    for (Eigen::Index c = 0; c <= p; ++c)
      if (c != col) keep.push_back(c);
    const auto m = static_cast<Eigen::Index>(keep.size());
    Eigen::MatrixXd g(m, m);
    Eigen::VectorXd rhs(m);
    for (Eigen::Index a = 0; a < m; ++a) {
      rhs(a) = gram(keep[static_cast<std::size_t>(a)], col);
      for (Eigen::Index b = 0; b < m; ++b) g(a, b) = gram(keep[static_cast<std::size_t>(a)], keep[static_cast<std::size_t>(b)]);
    }
    Eigen::CompleteOrthogonalDecomposition<Eigen::MatrixXd> cod(g);
    cod.setThreshold(1e-13);
    const Eigen::VectorXd beta = cod.solve(rhs);
    Eigen::VectorXd pred = Eigen::VectorXd::Zero(n);
    for (Eigen::Index a = 0; a < m; ++a) pred += beta(a) * scaled.col(keep[static_cast<std::size_t>(a)]);
    pred *= scale(col);
    double* v = out.volume(j);
    for (Eigen::Index r = 0; r < n; ++r) v[voxels[static_cast<std::size_t>(r)]] = pred(r);
  });
  d.signal = std::move(out);
  return d;
}

// ---------------------------------------------------------------------------
// Patching

struct PatchSet {
  std::size_t patch_size = 10;
  std::vector<Volume4> patches;                     // (p, p, p, Q') each
  std::vector<std::array<std::size_t, 3>> origins;  // into the padded grid
  std::array<std::size_t, 3> pad_amounts{0, 0, 0};  // high-side zero padding per axis
  std::array<std::size_t, 3> source_dims{0, 0, 0};  // unpadded extents
  std::vector<BVector> q_metadata;

  std::size_t size() const noexcept { return patches.size(); }
  std::array<std::size_t, 3> padded_dims() const noexcept {
    return {source_dims[0] + pad_amounts[0], source_dims[1] + pad_amounts[1], source_dims[2] + pad_amounts[2]};
  }
};

// Zero-pads each axis up to a multiple of patch_size, tiles non-overlapping
// patches and drops those without any brain voxel.
inline PatchSet extract_patches(const Volume4& signal, const Mask3& mask, const std::vector<BVector>& q_metadata,
                                std::size_t patch_size = 10) {
  if (patch_size == 0) throw InvalidArgument("extract_patches: patch_size must be positive");
  if (!mask.matches(signal)) throw ShapeError("extract_patches: mask extents differ from signal");
  if (!q_metadata.empty() && q_metadata.size() != signal.q())
    throw ShapeError("extract_patches: q metadata length differs from signal Q extent");
  PatchSet set;
  set.patch_size = patch_size;
  set.q_metadata = q_metadata;
  for (int a = 0; a < 3; ++a) {
    set.source_dims[a] = signal.dims[a];
    set.pad_amounts[a] = (patch_size - signal.dims[a] % patch_size) % patch_size;
  }
  const auto padded = set.padded_dims();
  const std::size_t p = patch_size;
  for (std::size_t oz = 0; oz < padded[2]; oz += p)
    for (std::size_t oy = 0; oy < padded[1]; oy += p)
      for (std::size_t ox = 0; ox < padded[0]; ox += p) {
        bool any = false;
        for (std::size_t z = oz; z < std::min(oz + p, signal.dims[2]) && !any; ++z)
          for (std::size_t y = oy; y < std::min(oy + p, signal.dims[1]) && !any; ++y)
            for (std::size_t x = ox; x < std::min(ox + p, signal.dims[0]) && !any; ++x)
              any = mask(x, y, z) != 0;
        if (!any) continue;
        Volume4 patch(p, p, p, signal.q());
        for (std::size_t q = 0; q < signal.q(); ++q)
          for (std::size_t z = 0; z < p; ++z)
            for (std::size_t y = 0; y < p; ++y)
              for (std::size_t x = 0; x < p; ++x) {
                const std::size_t sx = ox + x, sy = oy + y, sz = oz + z;
                if (sx < signal.dims[0] && sy < signal.dims[1] && sz < signal.dims[2])
                  patch(x, y, z, q) = signal(sx, sy, sz, q);
              }
        set.patches.push_back(std::move(patch));
        set.origins.push_back({ox, oy, oz});
      }
  return set;
}

// Places predicted patches back at their origins and crops the padding.
// Voxels not covered by any retained patch are zero.
inline Volume4 reassemble(const PatchSet& set, const std::vector<Volume4>& predicted) {
  if (predicted.size() != set.origins.size())
    throw InvalidArgument("reassemble: " + std::to_string(predicted.size()) + " patches for " +
                          std::to_string(set.origins.size()) + " origins");
  const std::size_t p = set.patch_size;
  const std::size_t nq = predicted.empty() ? 0 : predicted.front().q();
  Volume4 out(set.source_dims[0], set.source_dims[1], set.source_dims[2], nq);
  for (std::size_t i = 0; i < predicted.size(); ++i) {
    const auto& patch = predicted[i];
    if (patch.dims[0] != p || patch.dims[1] != p || patch.dims[2] != p || patch.q() != nq)
      throw ShapeError("reassemble: patch " + std::to_string(i) + " has the wrong shape");
    const auto& o = set.origins[i];
    for (std::size_t q = 0; q < nq; ++q)
      for (std::size_t z = 0; z < p; ++z)
        for (std::size_t y = 0; y < p; ++y)
          for (std::size_t x = 0; x < p; ++x) {
            const std::size_t sx = o[0] + x, sy = o[1] + y, sz = o[2] + z;
            if (sx < out.dims[0] && sy < out.dims[1] && sz < out.dims[2]) out(sx, sy, sz, q) = patch(x, y, z, q);
          }
  }
  return out;
}

}  // namespace qsr
