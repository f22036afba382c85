#include <gtest/gtest.h>

#include "grad_check.hpp"
#include "qsr/model.hpp"

using namespace qsr;
using namespace qsr::test;

namespace {

ModelConfig tiny_config(Variant v = Variant::rcnn3d) {
  ModelConfig c;
  c.variant = v;
  c.encoder_width = 2;
  c.encoder_branches = {1, 1, 1};
  c.convlstm_hidden_channels = 2;
  c.decoder_width = 2;
  c.decoder_branches = {1, 1, 1};
  c.tail_width = 2;
  c.patch_size = 3;
  return c;
}

ModelConfig small_config(Variant v = Variant::rcnn3d) {
  ModelConfig c;
  c.variant = v;
  c.encoder_width = 6;
  c.encoder_branches = {3, 3, 3};
  c.convlstm_hidden_channels = 6;
  c.decoder_width = 6;
  c.decoder_branches = {3, 3, 3};
  c.tail_width = 6;
  c.patch_size = 4;
  return c;
}

template <typename T>
ad::Tensor<T> random_patches(std::size_t n, std::size_t q, std::size_t p, Rng& rng, bool grad = false) {
  std::vector<T> v(n * q * p * p * p);
  for (auto& e : v) e = static_cast<T>(rng.uniform());
  return ad::Tensor<T>({n, q, 1, p, p, p}, std::move(v), grad);
}

template <typename T>
ad::Tensor<T> random_bvecs(std::size_t n, std::size_t q, Rng& rng, bool grad = false) {
  std::vector<T> v;
  for (std::size_t i = 0; i < n * q; ++i) {
    Vec3 d(rng.normal(), rng.normal(), rng.normal());
    d.normalize();
    for (int a = 0; a < 3; ++a) v.push_back(static_cast<T>(d[a]));
  }
  return ad::Tensor<T>({n, q, 3}, std::move(v), grad);
}

// Shifts the output layer bias so the final ReLU operates in its linear
// region and gradients reach every parameter.
template <typename T>
void lift_output(Model<T>& m, T value) {
  const auto& names = m.parameter_names();
  for (std::size_t i = 0; i < names.size(); ++i)
    if (names[i] == "decoder.tail2.bias") std::fill(m.parameters()[i].data().begin(), m.parameters()[i].data().end(), value);
}

template <typename T>
ad::Tensor<T> slice_q(const ad::Tensor<T>& x, std::size_t t) { return ad::slice(x, 1, t, 1); }

}  // namespace

TEST(ModelConfig, JsonRoundTripAndUnknownKeys) {
  auto c = small_config(Variant::cnn3d);
  c.decoder_norm = NormKind::instance;
  EXPECT_EQ(model_config_from_json(to_json(c)), c);
  EXPECT_THROW(model_config_from_json(nlohmann::json{{"bogus", 1}}), ConfigError);
  EXPECT_THROW(model_config_from_json(nlohmann::json{{"variant", "rnn"}}), ConfigError);
  EXPECT_THROW(model_config_from_json(nlohmann::json{{"convlstm_kernel", 2}}), ConfigError);
  EXPECT_THROW(model_config_from_json(nlohmann::json{{"encoder_width", "wide"}}), ConfigError);
}

TEST(Model, ParameterCountMatchesLayerTable) {
  for (auto v : {Variant::rcnn3d, Variant::rcnn1d, Variant::cnn3d}) {
    Model<float> m(ModelConfig{.variant = v});
    std::size_t total = 0;
    for (const auto& l : m.describe()) total += l.parameters;
    EXPECT_EQ(total, m.parameter_count()) << to_string(v);
  }
}

// Width arithmetic of the default rcnn3d configuration, counted by hand.
TEST(Model, DefaultParameterCount) {
  const std::size_t in = 4, w = 44, br = 22, h = 44;
  auto conv = [](std::size_t k, std::size_t ci, std::size_t co, bool norm) {
    return co * ci * k * k * k + co + (norm ? 2 * co : 0);
  };
  auto block = [&](std::size_t ci) { return conv(1, ci, br, true) + conv(2, ci, br, true) + conv(3, ci, br, true); };
  std::size_t n = conv(1, in, w, true);
  n += block(w) + block(3 * br + in);
  n += conv(1, 3 * br + in, w, true) + conv(1, w, w, true);
  n += 4 * h * (w + h) * 27 + 4 * h;
  n += conv(1, h + 3, w, true) + conv(1, w, w, true);
  n += block(w + 3) + block(3 * br + 3);
  n += conv(1, 3 * br + 3, w, false) + conv(1, w, 1, false);
  EXPECT_EQ(Model<float>(ModelConfig{}).parameter_count(), n);
}

TEST(Model, VariantKernels) {
  Model<float> one(small_config(Variant::rcnn1d));
  for (const auto& l : one.describe()) EXPECT_EQ(l.kernel, l.name == "encoder.qconv" ? 3u : 1u) << l.name;
  Model<float> three(small_config());
  bool saw_k2 = false;
  for (const auto& l : three.describe()) saw_k2 = saw_k2 || (l.name.ends_with("branch2") && l.kernel == 2);
  EXPECT_TRUE(saw_k2);
  Model<float> cnn(small_config(Variant::cnn3d));
  bool has_qconv = false, has_lstm = false;
  for (const auto& l : cnn.describe()) {
    has_qconv = has_qconv || l.name == "encoder.qconv";
    has_lstm = has_lstm || l.name == "encoder.convlstm";
  }
  EXPECT_TRUE(has_qconv);
  EXPECT_FALSE(has_lstm);
}

TEST(Model, InitializationIsSeededGlorot) {
  Model<float> a(small_config(), 5), b(small_config(), 5), c(small_config(), 6);
  bool differs = false;
  for (std::size_t i = 0; i < a.parameters().size(); ++i) {
    EXPECT_EQ(a.parameters()[i].data(), b.parameters()[i].data());
    differs = differs || a.parameters()[i].data() != c.parameters()[i].data();
    const auto& s = a.parameters()[i].shape();
    const auto& name = a.parameter_names()[i];
    if (name.ends_with(".kernel")) {
      std::size_t r = 1;
      for (std::size_t d = 2; d < s.size(); ++d) r *= s[d];
      const double limit = std::sqrt(6.0 / static_cast<double>((s[0] + s[1]) * r));
      for (float v : a.parameters()[i].data()) EXPECT_LE(std::abs(v), limit);
    }
    if (name == "encoder.convlstm.bias")
      for (std::size_t k = 0; k < s[0]; ++k) EXPECT_EQ(a.parameters()[i].data()[k], (k >= 6 && k < 12) ? 1.0f : 0.0f);
  }
  EXPECT_TRUE(differs);
}

TEST(Model, OutputShapeAndNonNegativity) {
  Rng rng(1);
  for (auto v : {Variant::rcnn3d, Variant::rcnn1d, Variant::cnn3d}) {
    Model<float> m(small_config(v), 2);
    auto y = m.forward(random_patches<float>(2, 3, 4, rng), random_bvecs<float>(2, 3, rng), random_bvecs<float>(2, 5, rng));
    EXPECT_EQ(y.shape(), (ad::Shape{2, 5, 1, 4, 4, 4}));
    for (float x : y.data()) EXPECT_GE(x, 0.0f);
    m.set_mode(ad::NormMode::infer);
    auto yi = m.forward(random_patches<float>(1, 2, 4, rng), random_bvecs<float>(1, 2, rng), random_bvecs<float>(1, 7, rng));
    for (float x : yi.data()) EXPECT_GE(x, 0.0f);
  }
}

TEST(Model, Cnn3dStateHasZeroCell) {
  Rng rng(2);
  Model<float> m(small_config(Variant::cnn3d));
  auto s = m.encode(random_patches<float>(1, 4, 4, rng), random_bvecs<float>(1, 4, rng));
  EXPECT_EQ(s.h.shape(), (ad::Shape{1, 6, 4, 4, 4}));
  for (float c : s.c.data()) EXPECT_EQ(c, 0.0f);
}

// Permuting the target b-vectors permutes the predictions identically.
TEST(Model, DecoderPermutationEquivarianceIsExact) {
  Rng rng(3);
  for (auto v : {Variant::rcnn3d, Variant::cnn3d}) {
    Model<float> m(small_config(v), 4);
    lift_output(m, 0.5f);
    auto ctx = random_patches<float>(2, 3, 4, rng);
    auto cb = random_bvecs<float>(2, 3, rng);
    auto tb = random_bvecs<float>(2, 5, rng);
    m.forward(ctx, cb, tb);  // initializes running statistics
    m.set_mode(ad::NormMode::infer);
    const std::vector<std::size_t> perm{3, 0, 4, 1, 2};
    std::vector<float> pv;
    for (std::size_t n = 0; n < 2; ++n)
      for (auto t : perm)
        for (int a = 0; a < 3; ++a) pv.push_back(tb.data()[(n * 5 + t) * 3 + a]);
    ad::Tensor<float> ptb({2, 5, 3}, pv);
    auto state = m.encode(ctx, cb);
    auto y = m.decode(state, tb), yp = m.decode(state, ptb);
    const std::size_t vol = 64;
    for (std::size_t n = 0; n < 2; ++n)
      for (std::size_t i = 0; i < 5; ++i)
        for (std::size_t k = 0; k < vol; ++k)
          ASSERT_EQ(yp.data()[(n * 5 + i) * vol + k], y.data()[(n * 5 + perm[i]) * vol + k]);
  }
}

// Each folded q-sample passes the shared encoder stack independently.
TEST(Model, EncoderStackQBatchInvarianceIsExact) {
  Rng rng(4);
  Model<float> m(small_config(), 7);
  auto patches = random_patches<float>(1, 4, 4, rng);
  auto bvecs = random_bvecs<float>(1, 4, rng);
  auto all = m.encoder_features(make_qspace_tensor(patches, bvecs));
  for (std::size_t t = 0; t < 4; ++t) {
    auto single = m.encoder_features(make_qspace_tensor(slice_q(patches, t), slice_q(bvecs, t)));
    auto row = ad::slice(all, 0, t, 1);
    EXPECT_EQ(single.data(), row.data()) << "q index " << t;
  }
}

TEST(Model, RecurrenceDependsOnContextOrder) {
  Rng rng(5);
  Model<float> m(small_config(), 8);
  auto patches = random_patches<float>(1, 3, 4, rng);
  auto bvecs = random_bvecs<float>(1, 3, rng);
  auto a = m.encode(patches, bvecs).h;
  auto rev = [](const ad::Tensor<float>& x) {
    return ad::concat<float>({slice_q(x, 2), slice_q(x, 1), slice_q(x, 0)}, 1);
  };
  auto b = m.encode(rev(patches), rev(bvecs)).h;
  EXPECT_NE(a.data(), b.data());
}

TEST(Model, ShapeErrors) {
  Rng rng(6);
  Model<float> m(small_config());
  EXPECT_THROW(m.encode(random_patches<float>(1, 2, 5, rng), random_bvecs<float>(1, 2, rng)), ShapeError);
  EXPECT_THROW(m.encode(random_patches<float>(1, 2, 4, rng), random_bvecs<float>(1, 3, rng)), ShapeError);
  auto s = m.encode(random_patches<float>(1, 2, 4, rng), random_bvecs<float>(1, 2, rng));
  EXPECT_THROW(m.decode(s, random_bvecs<float>(2, 2, rng)), ShapeError);
}

TEST(Model, CheckpointRoundTripReproducesOutputs) {
  Rng rng(7);
  Model<float> m(small_config(), 9);
  auto ctx = random_patches<float>(2, 3, 4, rng);
  auto cb = random_bvecs<float>(2, 3, rng);
  auto tb = random_bvecs<float>(2, 4, rng);
  m.forward(ctx, cb, tb);
  m.set_mode(ad::NormMode::infer);
  const auto ck = m.to_checkpoint();
  auto r = Model<float>::from_checkpoint(ad::deserialize_checkpoint(ad::serialize_checkpoint(ck)));
  r.set_mode(ad::NormMode::infer);
  EXPECT_EQ(r.config(), m.config());
  EXPECT_EQ(r.forward(ctx, cb, tb).data(), m.forward(ctx, cb, tb).data());
  EXPECT_EQ(ad::serialize_checkpoint(r.to_checkpoint()), ad::serialize_checkpoint(ck));
}

TEST(Model, CheckpointMismatchIsRejected) {
  Model<float> a(small_config()), b(small_config(Variant::cnn3d));
  EXPECT_THROW(b.load(a.to_checkpoint()), CheckpointError);
  auto ck = a.to_checkpoint();
  ck.metadata = "{not json";
  EXPECT_THROW(Model<float>::from_checkpoint(ck), CheckpointError);
  ck = a.to_checkpoint();
  ck.arrays[0].shape = {1};
  EXPECT_THROW(a.load(ck), CheckpointError);
}

TEST(ConvLstm, StepMatchesGateEquations) {
  Rng rng(8);
  const std::size_t hid = 2;
  auto x = random_tensor({1, 3, 2, 2, 2}, rng, 1.0, false);
  HiddenState<double> s{random_tensor({1, hid, 2, 2, 2}, rng, 1.0, false), random_tensor({1, hid, 2, 2, 2}, rng, 1.0, false)};
  auto k = random_tensor({4 * hid, 3 + hid, 1, 1, 1}, rng, 0.5, false);
  auto b = random_tensor({4 * hid}, rng, 0.5, false);
  auto out = convlstm3d_step(x, s, k, b);
  const std::size_t vox = 8;
  auto sig = [](double v) { return 1 / (1 + std::exp(-v)); };
  for (std::size_t ch = 0; ch < hid; ++ch)
    for (std::size_t v = 0; v < vox; ++v) {
      double z[4];
      for (std::size_t g = 0; g < 4; ++g) {
        const std::size_t o = g * hid + ch;
        double acc = b.data()[o];
        for (std::size_t c = 0; c < 3; ++c) acc += k.data()[o * (3 + hid) + c] * x.data()[c * vox + v];
        for (std::size_t c = 0; c < hid; ++c) acc += k.data()[o * (3 + hid) + 3 + c] * s.h.data()[c * vox + v];
        z[g] = acc;
      }
      const double c_new = sig(z[1]) * s.c.data()[ch * vox + v] + sig(z[0]) * std::tanh(z[2]);
      EXPECT_NEAR(out.c.data()[ch * vox + v], c_new, 1e-12);
      EXPECT_NEAR(out.h.data()[ch * vox + v], sig(z[3]) * std::tanh(c_new), 1e-12);
    }
}

TEST(Gradients, ConvLstmTwoSteps) {
  Rng rng(9);
  const std::size_t hid = 2;
  auto r = check_gradients(
      [&](auto& in) {
        HiddenState<double> s{ad::Tensor<double>::zeros({1, hid, 3, 3, 3}), ad::Tensor<double>::zeros({1, hid, 3, 3, 3})};
        s = convlstm3d_step(in[0], s, in[2], in[3]);
        s = convlstm3d_step(in[1], s, in[2], in[3]);
        return ad::add(project(s.h, 1), project(s.c, 2));
      },
      {random_tensor({1, 2, 3, 3, 3}, rng), random_tensor({1, 2, 3, 3, 3}, rng),
       random_tensor({4 * hid, 2 + hid, 3, 3, 3}, rng, 0.3), random_tensor({4 * hid}, rng)});
  EXPECT_LT(r.worst, 1e-4);
}

// End-to-end finite-difference check over every parameter of a tiny model
// for each variant, through the encoder, recurrence and decoder.
TEST(Gradients, FullModelAllVariants) {
  for (auto v : {Variant::rcnn3d, Variant::rcnn1d, Variant::cnn3d}) {
    Rng rng(10);
    Model<double> m(tiny_config(v), 11);
    lift_output(m, 1.0);
    auto ctx = random_patches<double>(1, 2, 3, rng);
    auto cb = random_bvecs<double>(1, 2, rng);
    auto tb = random_bvecs<double>(1, 2, rng);
    auto r = check_gradients([&](auto&) { return project(m.forward(ctx, cb, tb), 3); }, m.parameters());
    EXPECT_LT(r.worst, 1e-4) << to_string(v) << " worst parameter " << m.parameter_names()[r.worst_input];
  }
}

TEST(Gradients, EncoderAndDecoderGraphsWithInputs) {
  Rng rng(12);
  Model<double> m(tiny_config(), 13);
  lift_output(m, 1.0);
  auto r = check_gradients(
      [&](auto& in) {
        auto qt = make_qspace_tensor(in[0], in[1]);
        return project(m.encoder_features(qt), 5);
      },
      {random_patches<double>(1, 2, 3, rng, true), random_bvecs<double>(1, 2, rng, true)});
  EXPECT_LT(r.worst, 1e-4);
  auto h = random_tensor({1, 2, 3, 3, 3}, rng);
  auto r2 = check_gradients(
      [&](auto& in) {
        HiddenState<double> s{in[0], ad::Tensor<double>::zeros({1, 2, 3, 3, 3})};
        return project(m.decode(s, in[1]), 6);
      },
      {h, random_bvecs<double>(1, 3, rng, true)});
  EXPECT_LT(r2.worst, 1e-4);
}
