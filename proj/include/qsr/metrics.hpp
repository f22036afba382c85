#pragma once

#include <cmath>
#include <optional>
#include <vector>

#include "qsr/common.hpp"
#include "qsr/volume.hpp"

namespace qsr {

struct Summary {
  double mean = 0;
  double sd = 0;  // population standard deviation
};

inline Summary summarize(const std::vector<double>& v) {
  if (v.empty()) throw InvalidArgument("summarize: empty list");
  double m = 0;
  for (double x : v) m += x;
  m /= static_cast<double>(v.size());
  double var = 0;
  for (double x : v) var += (x - m) * (x - m);
  return {m, std::sqrt(var / static_cast<double>(v.size()))};
}

// Per q-volume root-mean-square error over the masked voxels (all voxels
// when mask is null).
inline std::vector<double> rmse(const Volume4& pred, const Volume4& truth, const Mask3* mask = nullptr) {
  if (pred.dims != truth.dims)
    throw ShapeError("rmse: prediction and truth shapes differ");
  if (mask && !mask->matches(pred)) throw ShapeError("rmse: mask extents differ from volume extents");
  const std::size_t s = pred.spatial_size();
  const std::size_t count = mask ? mask->count() : s;
  if (count == 0) throw InvalidArgument("rmse: empty mask");
  std::vector<double> out(pred.q());
  for (std::size_t q = 0; q < pred.q(); ++q) {
    const double* a = pred.volume(q);
    const double* b = truth.volume(q);
    double acc = 0;
    for (std::size_t i = 0; i < s; ++i)
      if (!mask || mask->data[i]) acc += (a[i] - b[i]) * (a[i] - b[i]);
    out[q] = std::sqrt(acc / static_cast<double>(count));
  }
  return out;
}

struct SsimOptions {
  std::size_t window = 7;
  double sigma = 1.5;
  double k1 = 0.01;
  double k2 = 0.03;
  std::optional<double> dynamic_range;  // default: truth max - min
};

namespace metrics_detail {

// Separable Gaussian filter keeping only fully-covered window positions.
inline std::vector<double> filter_valid(const std::vector<double>& v, const std::array<std::size_t, 3>& dims,
                                        const std::vector<double>& w) {
  const std::size_t k = w.size();
  std::array<std::size_t, 3> cur = dims;
  std::vector<double> src = v;
  for (int axis = 0; axis < 3; ++axis) {
    std::array<std::size_t, 3> next = cur;
    next[axis] = cur[axis] - k + 1;
    std::vector<double> dst(next[0] * next[1] * next[2], 0.0);
    const std::size_t stride = axis == 0 ? 1 : axis == 1 ? cur[0] : cur[0] * cur[1];
    for (std::size_t z = 0; z < next[2]; ++z)
      for (std::size_t y = 0; y < next[1]; ++y)
        for (std::size_t x = 0; x < next[0]; ++x) {
          const std::size_t base = x + cur[0] * (y + cur[1] * z);
          double acc = 0;
          for (std::size_t t = 0; t < k; ++t) acc += w[t] * src[base + t * stride];
          dst[x + next[0] * (y + next[1] * z)] = acc;
        }
    src = std::move(dst);
    cur = next;
  }
  return src;
}

}  // namespace metrics_detail

// Mean structural similarity of two 3D volumes over all fully-contained 3D
// Gaussian windows.
inline double mssim(const double* a, const double* b, const std::array<std::size_t, 3>& dims,
                    const SsimOptions& opts = {}) {
  const std::size_t k = opts.window;
  if (k == 0 || dims[0] < k || dims[1] < k || dims[2] < k)
    throw InvalidArgument("mssim: volume smaller than the " + std::to_string(k) + "^3 window");
  const std::size_t n = dims[0] * dims[1] * dims[2];
  double range;
  if (opts.dynamic_range) {
    range = *opts.dynamic_range;
  } else {
    const auto [lo, hi] = std::minmax_element(b, b + n);
    range = *hi - *lo;
  }
  if (!(range > 0)) range = 1.0;
  const double c1 = (opts.k1 * range) * (opts.k1 * range);
  const double c2 = (opts.k2 * range) * (opts.k2 * range);

  std::vector<double> w(k);
  double wsum = 0;
  for (std::size_t t = 0; t < k; ++t) {
    const double off = static_cast<double>(t) - 0.5 * static_cast<double>(k - 1);
    w[t] = std::exp(-off * off / (2 * opts.sigma * opts.sigma));
    wsum += w[t];
  }
  for (auto& x : w) x /= wsum;

  std::vector<double> va(a, a + n), vb(b, b + n), aa(n), bb(n), ab(n);
  for (std::size_t i = 0; i < n; ++i) {
    aa[i] = a[i] * a[i];
    bb[i] = b[i] * b[i];
    ab[i] = a[i] * b[i];
  }
  using metrics_detail::filter_valid;
  const auto mu_a = filter_valid(va, dims, w), mu_b = filter_valid(vb, dims, w);
  const auto e_aa = filter_valid(aa, dims, w), e_bb = filter_valid(bb, dims, w), e_ab = filter_valid(ab, dims, w);
  double total = 0;
  for (std::size_t i = 0; i < mu_a.size(); ++i) {
    const double var_a = e_aa[i] - mu_a[i] * mu_a[i];
    const double var_b = e_bb[i] - mu_b[i] * mu_b[i];
    const double cov = e_ab[i] - mu_a[i] * mu_b[i];
    total += ((2 * mu_a[i] * mu_b[i] + c1) * (2 * cov + c2)) /
             ((mu_a[i] * mu_a[i] + mu_b[i] * mu_b[i] + c1) * (var_a + var_b + c2));
  }
  return total / static_cast<double>(mu_a.size());
}

// Per q-volume MSSIM; the dynamic range comes from each truth volume.
inline std::vector<double> mssim(const Volume4& pred, const Volume4& truth, const SsimOptions& opts = {}) {
  if (pred.dims != truth.dims) throw ShapeError("mssim: prediction and truth shapes differ");
  std::vector<double> out(pred.q());
  const std::array<std::size_t, 3> d{pred.dims[0], pred.dims[1], pred.dims[2]};
  parallel_for(pred.q(), [&](std::size_t q) { out[q] = mssim(pred.volume(q), truth.volume(q), d, opts); });
  return out;
}

}  // namespace qsr
