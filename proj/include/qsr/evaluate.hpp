#pragma once

#include <cstdio>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "qsr/dti.hpp"
#include "qsr/metrics.hpp"

namespace qsr {

struct EvalMasks {
  Mask3 brain;
  std::optional<Mask3> wm;
  std::optional<Mask3> gm;
};

// Volumes from which FA is derived for one method and for the truth. Each
// side lists its own diffusion-weighted volumes, gradients and S0 map.
struct FaSide {
  Volume4 dwi;
  std::vector<Vec3> dirs;
  std::vector<double> bvals;
  std::vector<double> s0;
};

struct FaInputs {
  FaSide pred;
  FaSide truth;
};

struct FaReport {
  std::vector<double> abs_error;  // per voxel, zero outside the brain
  double brain_mean = 0;
  std::optional<double> wm_mean;
  std::optional<double> gm_mean;
};

struct EvalReport {
  std::vector<double> rmse_per_q;
  std::vector<double> mssim_per_q;
  Summary rmse;
  Summary mssim;
  std::optional<Summary> wm_rmse;
  std::optional<Summary> gm_rmse;
  std::optional<FaReport> fa;
};

inline double masked_mean(const std::vector<double>& v, const Mask3& m) {
  if (m.size() != v.size()) throw ShapeError("masked_mean: mask size differs from map size");
  double acc = 0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < v.size(); ++i)
    if (m.data[i]) {
      acc += v[i];
      ++n;
    }
  if (n == 0) throw InvalidArgument("masked_mean: empty mask");
  return acc / static_cast<double>(n);
}

// Metrics on raw-scale volumes. pred and truth hold the same target q-volumes
// in the same order.
inline EvalReport evaluate(const Volume4& pred, const Volume4& truth, const EvalMasks& masks,
                           const SsimOptions& ssim = {}, const FaInputs* fa_inputs = nullptr) {
  if (pred.dims != truth.dims) throw ShapeError("evaluate: prediction and truth shapes differ");
  if (!masks.brain.matches(pred)) throw ShapeError("evaluate: brain mask extents differ from volume");
  EvalReport r;
  r.rmse_per_q = rmse(pred, truth, &masks.brain);
  r.mssim_per_q = mssim(pred, truth, ssim);
  r.rmse = summarize(r.rmse_per_q);
  r.mssim = summarize(r.mssim_per_q);
  if (masks.wm && masks.wm->count()) r.wm_rmse = summarize(rmse(pred, truth, &*masks.wm));
  if (masks.gm && masks.gm->count()) r.gm_rmse = summarize(rmse(pred, truth, &*masks.gm));
  if (fa_inputs) {
    const auto& p = fa_inputs->pred;
    const auto& t = fa_inputs->truth;
    const auto fa_p = fa_map(p.dwi, p.dirs, p.bvals, p.s0, masks.brain);
    const auto fa_t = fa_map(t.dwi, t.dirs, t.bvals, t.s0, masks.brain);
    FaReport f;
    f.abs_error.resize(fa_p.size());
    for (std::size_t i = 0; i < fa_p.size(); ++i) f.abs_error[i] = masks.brain.data[i] ? std::abs(fa_p[i] - fa_t[i]) : 0.0;
    f.brain_mean = masked_mean(f.abs_error, masks.brain);
    if (masks.wm && masks.wm->count()) f.wm_mean = masked_mean(f.abs_error, *masks.wm);
    if (masks.gm && masks.gm->count()) f.gm_mean = masked_mean(f.abs_error, *masks.gm);
    r.fa = std::move(f);
  }
  return r;
}

inline nlohmann::json to_json(const Summary& s) { return {{"mean", s.mean}, {"sd", s.sd}}; }

inline nlohmann::json to_json(const EvalReport& r) {
  nlohmann::json j{{"rmse", to_json(r.rmse)},
                   {"mssim", to_json(r.mssim)},
                   {"rmse_per_q", r.rmse_per_q},
                   {"mssim_per_q", r.mssim_per_q},
                   {"q_count", r.rmse_per_q.size()}};
  if (r.wm_rmse) j["wm_rmse"] = to_json(*r.wm_rmse);
  if (r.gm_rmse) j["gm_rmse"] = to_json(*r.gm_rmse);
  if (r.fa) {
    nlohmann::json f{{"brain_mean_abs_error", r.fa->brain_mean}};
    if (r.fa->wm_mean) f["wm_mean_abs_error"] = *r.fa->wm_mean;
    if (r.fa->gm_mean) f["gm_mean_abs_error"] = *r.fa->gm_mean;
    j["fa"] = f;
  }
  return j;
}

// Plain-text comparison table, one row per method, mean ± sd.
inline std::string format_table(const std::vector<std::pair<std::string, EvalReport>>& rows) {
  auto pm = [](const Summary& s, const char* fmt) {
    char buf[64];
    std::snprintf(buf, sizeof buf, fmt, s.mean, s.sd);
    return std::string(buf);
  };
  auto num = [](std::optional<double> v) {
    if (!v) return std::string("-");
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.4f", *v);
    return std::string(buf);
  };
  std::size_t name_w = 6;
  for (const auto& [name, _] : rows) name_w = std::max(name_w, name.size());
  char line[512];
  std::string out;
  std::snprintf(line, sizeof line, "%-*s  %-20s  %-17s  %-20s  %-20s  %-9s  %-9s\n", static_cast<int>(name_w), "method",
                "RMSE", "MSSIM", "WM RMSE", "GM RMSE", "FA AE WM", "FA AE GM");
  out += line;
  for (const auto& [name, r] : rows) {
    std::snprintf(line, sizeof line, "%-*s  %-20s  %-17s  %-20s  %-20s  %-9s  %-9s\n", static_cast<int>(name_w),
                  name.c_str(), pm(r.rmse, "%.2f ± %.2f").c_str(), pm(r.mssim, "%.4f ± %.4f").c_str(),
                  r.wm_rmse ? pm(*r.wm_rmse, "%.2f ± %.2f").c_str() : "-",
                  r.gm_rmse ? pm(*r.gm_rmse, "%.2f ± %.2f").c_str() : "-",
                  num(r.fa ? r.fa->wm_mean : std::nullopt).c_str(), num(r.fa ? r.fa->gm_mean : std::nullopt).c_str());
    out += line;
  }
  return out;
}

}  // namespace qsr
