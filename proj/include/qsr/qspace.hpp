#pragma once

#include <cmath>
#include <fstream>
#include <limits>
#include <map>
#include <numbers>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "qsr/common.hpp"

namespace qsr {

// One diffusion-encoding direction. Directions are renormalized on
// construction; a zero direction is only accepted for b = 0 volumes.
class BVector {
 public:
  BVector() = default;
  BVector(const Vec3& direction, double bvalue) : direction_(direction), bvalue_(bvalue) {
    if (!direction.allFinite() || !std::isfinite(bvalue))
      throw InvalidArgument("BVector: non-finite component");
    if (bvalue < 0) throw InvalidArgument("BVector: negative b-value");
    const double norm = direction.norm();
    if (norm > 0) {
      direction_ /= norm;
    } else if (bvalue > 0) {
      throw InvalidArgument("BVector: zero direction with non-zero b-value");
    }
  }

  const Vec3& direction() const noexcept { return direction_; }
  double bvalue() const noexcept { return bvalue_; }

 private:
  Vec3 direction_ = Vec3::UnitX();
  double bvalue_ = 0.0;
};

// The sampling geometry of one shell. List order is the q-axis order of the
// paired 4D array.
class QSpaceShell {
 public:
  QSpaceShell() = default;
  QSpaceShell(std::vector<BVector> bvectors, double shell_bvalue, double tolerance = 100.0)
      : bvectors_(std::move(bvectors)), shell_bvalue_(shell_bvalue) {
    for (const auto& b : bvectors_) {
      if (b.bvalue() == 0.0) throw InvalidArgument("QSpaceShell: b = 0 volume in shell");
      if (std::abs(b.bvalue() - shell_bvalue_) > tolerance)
        throw InvalidArgument("QSpaceShell: b-value " + std::to_string(b.bvalue()) +
                              " outside tolerance of shell " + std::to_string(shell_bvalue_));
    }
  }

  // Shell from bare unit directions, all at the same b-value.
  static QSpaceShell from_directions(const std::vector<Vec3>& dirs, double bvalue = 1000.0) {
    std::vector<BVector> b;
    b.reserve(dirs.size());
    for (const auto& d : dirs) b.emplace_back(d, bvalue);
    return QSpaceShell(std::move(b), bvalue);
  }

  std::size_t size() const noexcept { return bvectors_.size(); }
  const BVector& operator[](std::size_t i) const { return bvectors_.at(i); }
  const std::vector<BVector>& bvectors() const noexcept { return bvectors_; }
  double bvalue() const noexcept { return shell_bvalue_; }

  std::vector<Vec3> directions() const {
    std::vector<Vec3> out;
    out.reserve(bvectors_.size());
    for (const auto& b : bvectors_) out.push_back(b.direction());
    return out;
  }

  QSpaceShell subset(const std::vector<std::size_t>& indices) const {
    std::vector<BVector> b;
    b.reserve(indices.size());
    for (auto i : indices) b.push_back(bvectors_.at(i));
    QSpaceShell s;
    s.bvectors_ = std::move(b);
    s.shell_bvalue_ = shell_bvalue_;
    return s;
  }

 private:
  std::vector<BVector> bvectors_;
  double shell_bvalue_ = 0.0;
};

struct ContextTargetSplit {
  std::vector<std::size_t> context_indices;
  std::vector<std::size_t> target_indices;
};

enum class SelectionStrategy { farthest_point, min_total_energy };

inline SelectionStrategy parse_selection_strategy(const std::string& s) {
  if (s == "farthest_point") return SelectionStrategy::farthest_point;
  if (s == "min_total_energy") return SelectionStrategy::min_total_energy;
  throw ConfigError("unknown selection_strategy '" + s + "'");
}

inline std::string to_string(SelectionStrategy s) {
  return s == SelectionStrategy::farthest_point ? "farthest_point" : "min_total_energy";
}

// Antipodally symmetric angle arccos(|u.v|), in [0, pi/2].
inline double angular_distance(const Vec3& u, const Vec3& v) {
  if (!u.allFinite() || !v.allFinite()) throw InvalidArgument("angular_distance: non-finite input");
  const double c = std::min(1.0, std::abs(u.dot(v)));
  return std::acos(c);
}

namespace detail {

inline std::vector<std::size_t> greedy_select(const std::vector<Vec3>& dirs, std::size_t k,
                                              std::size_t first, SelectionStrategy strategy) {
  const std::size_t n = dirs.size();
  std::vector<std::size_t> chosen{first};
  std::vector<char> taken(n, 0);
  taken[first] = 1;
  // Running score per candidate: min angle (farthest point) or sum of 1/angle.
  std::vector<double> score(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double a = angular_distance(dirs[i], dirs[first]);
    score[i] = strategy == SelectionStrategy::farthest_point
                   ? a
                   : (a > 0 ? 1.0 / a : std::numeric_limits<double>::infinity());
  }
  while (chosen.size() < k) {
    std::size_t best = n;
    for (std::size_t i = 0; i < n; ++i) {
      if (taken[i]) continue;
      if (best == n) {
        best = i;
        continue;
      }
      const bool better = strategy == SelectionStrategy::farthest_point ? score[i] > score[best]
                                                                         : score[i] < score[best];
      if (better) best = i;
    }
    chosen.push_back(best);
    taken[best] = 1;
    for (std::size_t i = 0; i < n; ++i) {
      if (taken[i]) continue;
      const double a = angular_distance(dirs[i], dirs[best]);
      if (strategy == SelectionStrategy::farthest_point)
        score[i] = std::min(score[i], a);
      else
        score[i] += a > 0 ? 1.0 / a : std::numeric_limits<double>::infinity();
    }
  }
  return chosen;
}

}  // namespace detail

// Greedy approximately-uniform subset of k directions starting from a given
// first index. Ties resolve to the lowest candidate index.
inline std::vector<std::size_t> select_uniform_subset_from(
    const QSpaceShell& shell, std::size_t k, std::size_t first,
    SelectionStrategy strategy = SelectionStrategy::farthest_point) {
  if (k < 1 || k > shell.size())
    throw InvalidArgument("select_uniform_subset: k=" + std::to_string(k) +
                          " outside [1, " + std::to_string(shell.size()) + "]");
  if (first >= shell.size()) throw InvalidArgument("select_uniform_subset: first index out of range");
  return detail::greedy_select(shell.directions(), k, first, strategy);
}

// As above with the first direction drawn uniformly from the seed.
inline std::vector<std::size_t> select_uniform_subset(
    const QSpaceShell& shell, std::size_t k, std::uint64_t seed,
    SelectionStrategy strategy = SelectionStrategy::farthest_point) {
  if (k < 1 || k > shell.size())
    throw InvalidArgument("select_uniform_subset: k=" + std::to_string(k) +
                          " outside [1, " + std::to_string(shell.size()) + "]");
  Rng rng(seed);
  return detail::greedy_select(shell.directions(), k, rng.below(shell.size()), strategy);
}

// Draw q_in + q_out uniform directions, permute them, and split into context
// and targets. The permutation continues the seed stream used for the first
// pick.
inline ContextTargetSplit shuffle_and_split(
    const QSpaceShell& shell, std::size_t q_in, std::size_t q_out, std::uint64_t epoch_seed,
    SelectionStrategy strategy = SelectionStrategy::farthest_point) {
  if (q_in < 1 || q_out < 1) throw InvalidArgument("shuffle_and_split: q_in and q_out must be >= 1");
  if (q_in + q_out > shell.size())
    throw InvalidArgument("shuffle_and_split: q_in + q_out = " + std::to_string(q_in + q_out) +
                          " exceeds shell size " + std::to_string(shell.size()));
  Rng rng(epoch_seed);
  const std::size_t first = rng.below(shell.size());
  auto picked = detail::greedy_select(shell.directions(), q_in + q_out, first, strategy);
  rng.shuffle(picked);
  ContextTargetSplit split;
  split.context_indices.assign(picked.begin(), picked.begin() + static_cast<std::ptrdiff_t>(q_in));
  split.target_indices.assign(picked.begin() + static_cast<std::ptrdiff_t>(q_in), picked.end());
  return split;
}

// Minimum pairwise antipodal angle within a subset.
inline double total_min_angle(const std::vector<std::size_t>& indices, const QSpaceShell& shell) {
  if (indices.size() < 2) throw InvalidArgument("total_min_angle: need at least 2 indices");
  double best = std::numbers::pi;
  for (std::size_t a = 0; a < indices.size(); ++a)
    for (std::size_t b = a + 1; b < indices.size(); ++b)
      best = std::min(best, angular_distance(shell[indices[a]].direction(),
                                             shell[indices[b]].direction()));
  return best;
}

// ---------------------------------------------------------------------------
// Gradient tables

struct GradientTable {
  std::vector<Vec3> bvecs;
  std::vector<double> bvals;

  std::size_t size() const noexcept { return bvals.size(); }

  std::vector<BVector> bvectors() const {
    std::vector<BVector> out;
    out.reserve(size());
    for (std::size_t i = 0; i < size(); ++i) out.emplace_back(bvecs[i], bvals[i]);
    return out;
  }
};

// Nominal shell value: the b-value rounded to the nearest 100. Nominal 0 marks
// non-diffusion-weighted volumes.
inline int nominal_bvalue(double b) { return static_cast<int>(std::lround(b / 100.0) * 100); }

// Map from nominal shell b-value to q-indices, excluding b = 0 volumes.
inline std::map<int, std::vector<std::size_t>> group_shells(const std::vector<double>& bvals) {
  std::map<int, std::vector<std::size_t>> shells;
  for (std::size_t i = 0; i < bvals.size(); ++i) {
    const int nominal = nominal_bvalue(bvals[i]);
    if (nominal != 0) shells[nominal].push_back(i);
  }
  return shells;
}

inline std::vector<std::size_t> b0_indices(const std::vector<double>& bvals) {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < bvals.size(); ++i)
    if (nominal_bvalue(bvals[i]) == 0) out.push_back(i);
  return out;
}

namespace detail {

inline std::vector<std::vector<double>> read_numeric_rows(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open '" + path + "'");
  std::vector<std::vector<double>> rows;
  std::string line;
  while (std::getline(in, line)) {
    std::istringstream ls(line);
    std::vector<double> row;
    std::string token;
    while (ls >> token) {
      try {
        std::size_t used = 0;
        row.push_back(std::stod(token, &used));
        if (used != token.size()) throw std::invalid_argument(token);
      } catch (const std::exception&) {
        throw FormatError("'" + path + "': non-numeric token '" + token + "'");
      }
    }
    if (!row.empty()) rows.push_back(std::move(row));
  }
  return rows;
}

inline void write_row(std::ostream& out, const std::vector<double>& v) {
  std::ostringstream s;
  s.precision(std::numeric_limits<double>::max_digits10);
  for (std::size_t i = 0; i < v.size(); ++i) s << (i ? " " : "") << v[i];
  out << s.str() << '\n';
}

}  // namespace detail

// FSL bvals: a single row of b-values.
inline std::vector<double> read_bvals(const std::string& path) {
  auto rows = detail::read_numeric_rows(path);
  std::vector<double> out;
  if (rows.size() == 1) return rows.front();
  // Tolerate one value per line.
  for (const auto& r : rows) {
    if (r.size() != 1) throw FormatError("'" + path + "': bvals must be a single row");
    out.push_back(r.front());
  }
  return out;
}

// FSL bvecs: three rows (x, y, z), one column per volume.
inline std::vector<Vec3> read_bvecs(const std::string& path) {
  auto rows = detail::read_numeric_rows(path);
  if (rows.size() != 3) throw FormatError("'" + path + "': bvecs must have exactly 3 rows");
  if (rows[0].size() != rows[1].size() || rows[0].size() != rows[2].size())
    throw FormatError("'" + path + "': bvecs rows differ in length");
  std::vector<Vec3> out;
  for (std::size_t i = 0; i < rows[0].size(); ++i) out.emplace_back(rows[0][i], rows[1][i], rows[2][i]);
  return out;
}

inline GradientTable read_gradient_table(const std::string& bvecs_path, const std::string& bvals_path) {
  GradientTable t{read_bvecs(bvecs_path), read_bvals(bvals_path)};
  if (t.bvecs.size() != t.bvals.size())
    throw FormatError("bvecs has " + std::to_string(t.bvecs.size()) + " columns but bvals has " +
                      std::to_string(t.bvals.size()) + " entries");
  return t;
}

inline void write_bvals(const std::string& path, const std::vector<double>& bvals) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write '" + path + "'");
  detail::write_row(out, bvals);
}

inline void write_bvecs(const std::string& path, const std::vector<Vec3>& bvecs) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write '" + path + "'");
  for (int axis = 0; axis < 3; ++axis) {
    std::vector<double> row;
    row.reserve(bvecs.size());
    for (const auto& v : bvecs) row.push_back(v[axis]);
    detail::write_row(out, row);
  }
}

inline void write_gradient_table(const std::string& bvecs_path, const std::string& bvals_path,
                                 const GradientTable& t) {
  write_bvecs(bvecs_path, t.bvecs);
  write_bvals(bvals_path, t.bvals);
}

}  // namespace qsr
