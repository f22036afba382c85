#pragma once

// Central finite-difference checks for the autodiff engine.

#include <functional>
#include <vector>

#include "qsr/autodiff/ops.hpp"

namespace qsr::test {

using TensorD = ad::Tensor<double>;

inline TensorD random_tensor(ad::Shape shape, Rng& rng, double scale = 1.0, bool grad = true) {
  std::vector<double> v(ad::numel(shape));
  for (auto& e : v) e = scale * rng.normal();
  return TensorD(std::move(shape), std::move(v), grad);
}

struct GradReport {
  double worst = 0;  // largest per-input relative error
  std::size_t worst_input = 0;
};

// Relative error ||analytic - numeric|| / max(||analytic||, ||numeric||, floor)
// per input; f builds the scalar from the inputs each time it is called.
inline GradReport check_gradients(const std::function<TensorD(std::vector<TensorD>&)>& f,
                                  std::vector<TensorD> inputs, double h = 1e-6, double floor = 1e-8) {
  for (auto& t : inputs) t.zero_grad();
  ad::backward(f(inputs));
  GradReport r;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    if (!inputs[i].requires_grad()) continue;
    const auto analytic = std::vector<double>(inputs[i].grad().begin(), inputs[i].grad().end());
    std::vector<double> numeric(analytic.size());
    auto& v = inputs[i].data();
    {
      ad::NoGradGuard guard;
      for (std::size_t k = 0; k < v.size(); ++k) {
        const double orig = v[k];
        v[k] = orig + h;
        const double up = f(inputs).item();
        v[k] = orig - h;
        const double down = f(inputs).item();
        v[k] = orig;
        numeric[k] = (up - down) / (2 * h);
      }
    }
    double diff = 0, na = 0, nn = 0;
    for (std::size_t k = 0; k < v.size(); ++k) {
      diff += (analytic[k] - numeric[k]) * (analytic[k] - numeric[k]);
      na += analytic[k] * analytic[k];
      nn += numeric[k] * numeric[k];
    }
    const double rel = std::sqrt(diff) / std::max({std::sqrt(na), std::sqrt(nn), floor});
    if (rel > r.worst) {
      r.worst = rel;
      r.worst_input = i;
    }
  }
  return r;
}

// Projects a tensor onto fixed random weights so every output element
// contributes to the scalar with a distinct coefficient.
inline TensorD project(const TensorD& y, std::uint64_t seed) {
  Rng rng(seed);
  auto w = random_tensor(y.shape(), rng, 1.0, false);
  return ad::sum(ad::mul(y, w));
}

}  // namespace qsr::test
