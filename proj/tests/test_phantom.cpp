#include <gtest/gtest.h>

#include "qsr/metrics.hpp"
#include "qsr/phantom.hpp"

using namespace qsr;

namespace {

PhantomSpec small_spec(std::uint64_t seed = 1) {
  PhantomSpec s;
  s.dims = {12, 12, 12};
  s.shells = {{1000, 30}, {2000, 30}};
  s.b0_volumes = 2;
  s.seed = seed;
  return s;
}

}  // namespace

TEST(Fibonacci, UnitUpperHemisphereWellSpread) {
  const auto d = fibonacci_directions(90, 4);
  ASSERT_EQ(d.size(), 90u);
  double min_angle = 10;
  for (std::size_t i = 0; i < d.size(); ++i) {
    EXPECT_NEAR(d[i].norm(), 1.0, 1e-12);
    EXPECT_GE(d[i].z(), 0.0);
    for (std::size_t j = 0; j < i; ++j) min_angle = std::min(min_angle, angular_distance(d[i], d[j]));
  }
  // A perfectly random set of 90 axes would typically have a far smaller gap.
  EXPECT_GT(min_angle, 0.1);
  EXPECT_EQ(fibonacci_directions(10, 3), fibonacci_directions(10, 3));
  EXPECT_NE(fibonacci_directions(10, 3), fibonacci_directions(10, 4));
}

TEST(MultiTensor, ClosedForm) {
  const auto d = axial_tensor(Vec3::UnitX(), 2e-3, 0.5e-3);
  EXPECT_NEAR(multi_tensor_signal({{d, 1.0}}, Vec3::UnitX(), 1000, 100), 100 * std::exp(-2.0), 1e-12);
  EXPECT_NEAR(multi_tensor_signal({{d, 1.0}}, Vec3::UnitY(), 1000, 100), 100 * std::exp(-0.5), 1e-12);
  EXPECT_NEAR(multi_tensor_signal({{d, 0.5}, {d, 0.5}}, Vec3::UnitY(), 0, 7), 7, 1e-12);
  Eigen::Matrix3d bad = Eigen::Matrix3d::Identity();
  bad(2, 2) = -1;
  EXPECT_THROW(require_spd(bad), InvalidArgument);
}

TEST(Phantom, LayoutAndMasks) {
  const auto ph = generate(small_spec());
  EXPECT_EQ(ph.noisy.signal.dims, (std::array<std::size_t, 4>{12, 12, 12, 62}));
  EXPECT_EQ(ph.clean.dims, ph.noisy.signal.dims);
  EXPECT_EQ(b0_indices(ph.noisy.bvals()).size(), 2u);
  EXPECT_FALSE(ph.noisy.shells.count(0));
  EXPECT_EQ(ph.noisy.shells.at(1000).size(), 30u);
  EXPECT_EQ(ph.noisy.shells.at(2000).size(), 30u);
  EXPECT_GT(ph.wm.count(), 0u);
  EXPECT_GT(ph.gm.count(), 0u);
  for (std::size_t v = 0; v < ph.wm.size(); ++v) {
    EXPECT_FALSE(ph.wm.data[v] && ph.gm.data[v]);
    EXPECT_EQ(ph.noisy.mask.data[v], ph.wm.data[v] || ph.gm.data[v]);
    if (!ph.noisy.mask.data[v]) {
      EXPECT_EQ(ph.clean.volume(5)[v], 0.0);
      EXPECT_EQ(ph.noisy.signal.volume(5)[v], 0.0);
    }
  }
}

TEST(Phantom, CleanSignalMatchesCompartments) {
  const auto spec = small_spec();
  const auto ph = generate(spec);
  bool saw_crossing = false;
  for (std::size_t v = 0; v < ph.compartments.size(); ++v) {
    const auto& c = ph.compartments[v];
    if (c.empty()) continue;
    saw_crossing = saw_crossing || c.size() == 2;
    double f = 0;
    for (const auto& comp : c) f += comp.fraction;
    EXPECT_NEAR(f, 1.0, 1e-12);
    for (std::size_t q : {0u, 3u, 40u})
      EXPECT_NEAR(ph.clean.volume(q)[v], multi_tensor_signal(c, ph.directions[q], ph.bvals[q], spec.s0), 1e-9);
    EXPECT_NEAR(ph.clean.volume(0)[v], spec.s0, 1e-9);
  }
  EXPECT_TRUE(saw_crossing);
}

TEST(Phantom, RicianNoiseLevel) {
  auto spec = small_spec();
  spec.shells = {{1000, 30}};
  spec.b0_volumes = 30;
  const auto ph = generate(spec);
  // At b = 0 the SNR is high enough that Rician noise is close to Gaussian
  // with the configured sigma.
  double acc = 0;
  std::size_t n = 0;
  for (std::size_t q = 0; q < 30; ++q)
    for (std::size_t v = 0; v < ph.noisy.mask.size(); ++v)
      if (ph.noisy.mask.data[v]) {
        const double d = ph.noisy.signal.volume(q)[v] - ph.clean.volume(q)[v];
        acc += d * d;
        ++n;
      }
  EXPECT_NEAR(std::sqrt(acc / n) / spec.sigma, 1.0, 0.05);
  EXPECT_NEAR(spec.s0 / spec.sigma, 15.0, 1e-12);
  for (double v : ph.noisy.signal.data) EXPECT_GE(v, 0.0);
}

TEST(Phantom, DeterministicAndSeedDependent) {
  const auto a = generate(small_spec(3)), b = generate(small_spec(3)), c = generate(small_spec(4));
  EXPECT_EQ(a.noisy.signal.data, b.noisy.signal.data);
  EXPECT_EQ(a.clean.data, b.clean.data);
  EXPECT_NE(a.noisy.signal.data, c.noisy.signal.data);
}

TEST(Phantom, NoiseFreeOption) {
  auto spec = small_spec();
  spec.noise = NoiseModel::none;
  const auto ph = generate(spec);
  EXPECT_EQ(ph.noisy.signal.data, ph.clean.data);
}

TEST(Phantom, SpecJsonRoundTripAndErrors) {
  auto spec = small_spec(9);
  spec.noise = NoiseModel::gaussian;
  EXPECT_EQ(phantom_spec_from_json(to_json(spec)), spec);
  EXPECT_THROW(phantom_spec_from_json(nlohmann::json{{"nope", 1}}), ConfigError);
  EXPECT_THROW(parse_noise_model("salt"), ConfigError);
  auto bad = small_spec();
  bad.crossing_fraction = 2;
  EXPECT_THROW(generate(bad), InvalidArgument);
  bad = small_spec();
  bad.wm_radial = -1e-3;
  EXPECT_THROW(generate(bad), InvalidArgument);
}

TEST(Denoiser, ImprovesEveryShellOnPhantom) {
  PhantomSpec spec;
  spec.seed = 21;
  const auto ph = generate(spec);
  const auto den = denoise_p2s(ph.noisy);
  for (const auto& [b, qs] : ph.noisy.shells) {
    if (b == 0) continue;
    const auto clean = ph.clean.select(qs);
    const double before = summarize(rmse(ph.noisy.signal.select(qs), clean, &ph.noisy.mask)).mean;
    const double after = summarize(rmse(den.signal.select(qs), clean, &ph.noisy.mask)).mean;
    EXPECT_LT(after, before) << "b=" << b;
  }
}
