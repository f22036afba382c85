#pragma once

#include <array>
#include <limits>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "qsr/autodiff/checkpoint.hpp"
#include "qsr/autodiff/ops.hpp"
#include "qsr/common.hpp"

namespace qsr {

enum class Variant { rcnn3d, rcnn1d, cnn3d };
enum class NormKind { instance, batch, none };

inline Variant parse_variant(const std::string& s) {
  if (s == "rcnn3d") return Variant::rcnn3d;
  if (s == "rcnn1d") return Variant::rcnn1d;
  if (s == "cnn3d") return Variant::cnn3d;
  throw ConfigError("unknown variant '" + s + "' (expected rcnn3d, rcnn1d or cnn3d)");
}

inline std::string to_string(Variant v) {
  switch (v) {
    case Variant::rcnn3d: return "rcnn3d";
    case Variant::rcnn1d: return "rcnn1d";
    case Variant::cnn3d: return "cnn3d";
  }
  return "?";
}

inline NormKind parse_norm(const std::string& s) {
  if (s == "instance") return NormKind::instance;
  if (s == "batch") return NormKind::batch;
  throw ConfigError("unknown normalization '" + s + "' (expected instance or batch)");
}

inline std::string to_string(NormKind n) {
  return n == NormKind::instance ? "instance" : n == NormKind::batch ? "batch" : "none";
}

// Architecture hyperparameters. Topology is fixed; widths are configuration.
struct ModelConfig {
  Variant variant = Variant::rcnn3d;
  std::size_t signal_channels = 1;
  std::size_t encoder_width = 44;
  std::array<std::size_t, 3> encoder_branches{22, 22, 22};
  std::size_t convlstm_hidden_channels = 44;
  std::size_t convlstm_kernel = 3;
  std::size_t decoder_width = 44;
  std::array<std::size_t, 3> decoder_branches{22, 22, 22};
  std::size_t tail_width = 44;
  std::size_t tail_kernel = 1;
  std::size_t qconv_kernel = 3;
  NormKind encoder_norm = NormKind::instance;
  NormKind decoder_norm = NormKind::batch;
  double norm_eps = 1e-3;
  double batch_norm_momentum = 0.1;
  std::size_t patch_size = 10;

  // Spatial extent of a parallel-block branch / recurrent kernel after the
  // variant is applied.
  std::size_t branch_kernel(std::size_t nominal) const { return variant == Variant::rcnn1d ? 1 : nominal; }
  std::size_t recurrent_kernel() const { return variant == Variant::rcnn1d ? 1 : convlstm_kernel; }
  std::size_t effective_tail_kernel() const { return variant == Variant::rcnn1d ? 1 : tail_kernel; }

  void validate() const {
    auto positive = [](std::size_t v, const char* what) {
      if (v == 0) throw ConfigError(std::string("model.") + what + " must be positive");
    };
    positive(signal_channels, "signal_channels");
    positive(encoder_width, "encoder_width");
    positive(convlstm_hidden_channels, "convlstm_hidden_channels");
    positive(decoder_width, "decoder_width");
    positive(tail_width, "tail_width");
    positive(patch_size, "patch_size");
    for (auto b : encoder_branches) positive(b, "encoder_branches");
    for (auto b : decoder_branches) positive(b, "decoder_branches");
    if (convlstm_kernel % 2 == 0) throw ConfigError("model.convlstm_kernel must be odd");
    if (qconv_kernel % 2 == 0) throw ConfigError("model.qconv_kernel must be odd");
    if (tail_kernel < 1 || tail_kernel > 3) throw ConfigError("model.tail_kernel must be 1, 2 or 3");
    if (patch_size < 3) throw ConfigError("model.patch_size must be >= 3");
  }

  bool operator==(const ModelConfig&) const = default;
};

inline nlohmann::json to_json(const ModelConfig& c) {
  return {
      {"variant", to_string(c.variant)},
      {"signal_channels", c.signal_channels},
      {"encoder_width", c.encoder_width},
      {"encoder_branches", c.encoder_branches},
      {"convlstm_hidden_channels", c.convlstm_hidden_channels},
      {"convlstm_kernel", c.convlstm_kernel},
      {"decoder_width", c.decoder_width},
      {"decoder_branches", c.decoder_branches},
      {"tail_width", c.tail_width},
      {"tail_kernel", c.tail_kernel},
      {"qconv_kernel", c.qconv_kernel},
      {"encoder_norm", to_string(c.encoder_norm)},
      {"decoder_norm", to_string(c.decoder_norm)},
      {"norm_eps", c.norm_eps},
      {"batch_norm_momentum", c.batch_norm_momentum},
      {"patch_size", c.patch_size},
  };
}

// Reads the keys present in j over the defaults in base; unknown keys are
// rejected.
inline ModelConfig model_config_from_json(const nlohmann::json& j, ModelConfig c = {}) {
  if (!j.is_object()) throw ConfigError("model config must be an object");
  const auto known = to_json(c);
  for (const auto& [key, _] : j.items())
    if (!known.contains(key)) throw ConfigError("unknown model config key '" + key + "'");
  try {
    if (j.contains("variant")) c.variant = parse_variant(j["variant"].get<std::string>());
    if (j.contains("signal_channels")) c.signal_channels = j["signal_channels"].get<std::size_t>();
    if (j.contains("encoder_width")) c.encoder_width = j["encoder_width"].get<std::size_t>();
    if (j.contains("encoder_branches")) c.encoder_branches = j["encoder_branches"].get<std::array<std::size_t, 3>>();
    if (j.contains("convlstm_hidden_channels"))
      c.convlstm_hidden_channels = j["convlstm_hidden_channels"].get<std::size_t>();
    if (j.contains("convlstm_kernel")) c.convlstm_kernel = j["convlstm_kernel"].get<std::size_t>();
    if (j.contains("decoder_width")) c.decoder_width = j["decoder_width"].get<std::size_t>();
    if (j.contains("decoder_branches")) c.decoder_branches = j["decoder_branches"].get<std::array<std::size_t, 3>>();
    if (j.contains("tail_width")) c.tail_width = j["tail_width"].get<std::size_t>();
    if (j.contains("tail_kernel")) c.tail_kernel = j["tail_kernel"].get<std::size_t>();
    if (j.contains("qconv_kernel")) c.qconv_kernel = j["qconv_kernel"].get<std::size_t>();
    if (j.contains("encoder_norm")) c.encoder_norm = parse_norm(j["encoder_norm"].get<std::string>());
    if (j.contains("decoder_norm")) c.decoder_norm = parse_norm(j["decoder_norm"].get<std::string>());
    if (j.contains("norm_eps")) c.norm_eps = j["norm_eps"].get<double>();
    if (j.contains("batch_norm_momentum")) c.batch_norm_momentum = j["batch_norm_momentum"].get<double>();
    if (j.contains("patch_size")) c.patch_size = j["patch_size"].get<std::size_t>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("model config: ") + e.what());
  }
  c.validate();
  return c;
}

template <typename T>
struct HiddenState {
  ad::Tensor<T> h;
  ad::Tensor<T> c;
};

// Signal patches (N, q, C, D, H, W) and b-vectors (N, q, 3) folded into a
// single (N q, C + 3, D, H, W) batch. Row n q + t holds sample n, q-index t.
template <typename T>
ad::Tensor<T> make_qspace_tensor(const ad::Tensor<T>& patches, const ad::Tensor<T>& bvecs) {
  if (patches.rank() != 6) throw ShapeError("make_qspace_tensor: patches must be (N,q,C,D,H,W)");
  if (bvecs.rank() != 3 || bvecs.dim(2) != 3) throw ShapeError("make_qspace_tensor: b-vectors must be (N,q,3)");
  if (bvecs.dim(0) != patches.dim(0) || bvecs.dim(1) != patches.dim(1))
    throw ShapeError("make_qspace_tensor: q extents disagree (" + ad::shape_str(patches.shape()) + " vs " +
                     ad::shape_str(bvecs.shape()) + ")");
  const std::size_t nq = patches.dim(0) * patches.dim(1);
  const std::size_t d = patches.dim(3), h = patches.dim(4), w = patches.dim(5);
  auto signal = ad::reshape(patches, {nq, patches.dim(2), d, h, w});
  auto bv = ad::broadcast_spatial(ad::reshape(bvecs, {nq, 3}), d, h, w);
  return ad::concat<T>({signal, bv}, 1);
}

// One ConvLSTM step without peepholes. The kernel acts on concat(x, h) and
// produces the input, forget, cell and output pre-activations in that order.
template <typename T>
HiddenState<T> convlstm3d_step(const ad::Tensor<T>& x, const HiddenState<T>& state, const ad::Tensor<T>& kernel,
                               const ad::Tensor<T>& bias) {
  const std::size_t hidden = state.h.dim(1);
  if (state.h.shape() != state.c.shape()) throw ShapeError("convlstm3d_step: h and c shapes differ");
  if (x.rank() != 5 || x.dim(0) != state.h.dim(0) || x.dim(2) != state.h.dim(2) || x.dim(3) != state.h.dim(3) ||
      x.dim(4) != state.h.dim(4))
    throw ShapeError("convlstm3d_step: input " + ad::shape_str(x.shape()) + " incompatible with state " +
                     ad::shape_str(state.h.shape()));
  if (kernel.dim(0) != 4 * hidden) throw ShapeError("convlstm3d_step: kernel must produce 4 * hidden channels");
  auto z = ad::conv3d(ad::concat<T>({x, state.h}, 1), kernel, bias);
  auto i = ad::sigmoid(ad::slice(z, 1, 0, hidden));
  auto f = ad::sigmoid(ad::slice(z, 1, hidden, hidden));
  auto g = ad::tanh(ad::slice(z, 1, 2 * hidden, hidden));
  auto o = ad::sigmoid(ad::slice(z, 1, 3 * hidden, hidden));
  auto c = ad::add(ad::mul(f, state.c), ad::mul(i, g));
  auto h = ad::mul(o, ad::tanh(c));
  return {h, c};
}

struct LayerInfo {
  std::string name;
  std::string kind;
  std::size_t kernel = 0;
  std::size_t in_channels = 0;
  std::size_t out_channels = 0;
  std::size_t parameters = 0;
};

enum class Activation { swish, relu };

// The conditional autoencoder. All learnable arrays live in one ordered
// parameter list; the order defines the checkpoint layout.
template <typename T>
class Model {
 public:
  using Tensor = ad::Tensor<T>;

  explicit Model(ModelConfig config, std::uint64_t seed = 0) : config_(std::move(config)) {
    config_.validate();
    build();
    initialize(seed);
  }

  const ModelConfig& config() const noexcept { return config_; }
  std::vector<Tensor>& parameters() noexcept { return params_; }
  const std::vector<Tensor>& parameters() const noexcept { return params_; }
  const std::vector<std::string>& parameter_names() const noexcept { return names_; }
  std::vector<ad::BatchNormStats<T>>& norm_stats() noexcept { return stats_; }

  void set_mode(ad::NormMode m) noexcept { mode_ = m; }
  ad::NormMode mode() const noexcept { return mode_; }

  void zero_grad() {
    for (auto& p : params_) p.zero_grad();
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.numel();
    return n;
  }

  std::vector<LayerInfo> describe() const { return layer_info_; }

  // Shared per-q convolution stack of the encoder on a folded q-space
  // tensor (N q, C + 3, D, H, W) -> (N q, encoder_width, D, H, W).
  Tensor encoder_features(const Tensor& qtensor) {
    auto x = apply(enc_in_, qtensor);
    x = parallel_block(enc_block1_, x, qtensor);
    x = parallel_block(enc_block2_, x, qtensor);
    x = apply(enc_pw1_, x);
    return apply(enc_pw2_, x);
  }

  // Context patches (N, q_in, C, D, H, W) + b-vectors (N, q_in, 3) -> state.
  HiddenState<T> encode(const Tensor& patches, const Tensor& bvecs) {
    const std::size_t n = patches.dim(0), q = patches.dim(1);
    if (q < 1) throw ShapeError("encode: need at least one context sample");
    check_patch(patches, "encode");
    const std::size_t p = config_.patch_size;
    auto feats = encoder_features(make_qspace_tensor(patches, bvecs));
    if (config_.variant == Variant::cnn3d) {
      auto y = ad::swish(ad::qconv1d(feats, params_[qconv_w_], params_[qconv_b_], q));
      auto h = ad::mean_groups(y, q);
      return {h, Tensor::zeros(h.shape())};
    }
    const std::size_t hidden = config_.convlstm_hidden_channels;
    HiddenState<T> state{Tensor::zeros({n, hidden, p, p, p}), Tensor::zeros({n, hidden, p, p, p})};
    std::vector<std::size_t> rows(n);
    for (std::size_t t = 0; t < q; ++t) {
      for (std::size_t i = 0; i < n; ++i) rows[i] = i * q + t;
      state = convlstm3d_step(ad::gather(feats, rows), state, params_[lstm_w_], params_[lstm_b_]);
    }
    return state;
  }

  // State + target b-vectors (N, q_out, 3) -> predictions (N, q_out, C, D, H, W).
  Tensor decode(const HiddenState<T>& state, const Tensor& target_bvecs) {
    if (target_bvecs.rank() != 3 || target_bvecs.dim(2) != 3)
      throw ShapeError("decode: target b-vectors must be (N,q_out,3)");
    const std::size_t n = target_bvecs.dim(0), q = target_bvecs.dim(1), p = config_.patch_size;
    if (state.h.rank() != 5 || state.h.dim(0) != n || state.h.dim(1) != config_.convlstm_hidden_channels)
      throw ShapeError("decode: state " + ad::shape_str(state.h.shape()) + " does not match this model");
    std::vector<std::size_t> rows;
    rows.reserve(n * q);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t t = 0; t < q; ++t) rows.push_back(i);
    auto hrep = ad::gather(state.h, rows);
    auto bv = ad::broadcast_spatial(ad::reshape(target_bvecs, {n * q, 3}), p, p, p);
    auto x = ad::concat<T>({hrep, bv}, 1);
    x = apply(dec_pw1_, x);
    x = apply(dec_pw2_, x);
    x = ad::concat<T>({x, bv}, 1);
    x = parallel_block(dec_block1_, x, bv);
    x = parallel_block(dec_block2_, x, bv);
    x = apply(dec_tail1_, x);
    x = apply(dec_tail2_, x);
    return ad::reshape(x, {n, q, config_.signal_channels, p, p, p});
  }

  Tensor forward(const Tensor& context, const Tensor& context_bvecs, const Tensor& target_bvecs) {
    return decode(encode(context, context_bvecs), target_bvecs);
  }

  ad::Checkpoint to_checkpoint() const {
    ad::Checkpoint ck;
    ck.metadata = to_json(config_).dump();
    for (std::size_t i = 0; i < params_.size(); ++i) {
      ad::NamedArray a{names_[i], params_[i].shape(), {}};
      a.values.assign(params_[i].data().begin(), params_[i].data().end());
      ck.arrays.push_back(std::move(a));
    }
    for (std::size_t i = 0; i < stats_.size(); ++i) {
      const auto& st = stats_[i];
      const std::size_t c = stats_channels_[i];
      ad::NamedArray m{stats_names_[i] + ".running_mean", {c}, {}};
      ad::NamedArray v{stats_names_[i] + ".running_var", {c}, {}};
      if (st.initialized) {
        m.values.assign(st.mean.begin(), st.mean.end());
        v.values.assign(st.var.begin(), st.var.end());
      } else {
        m.values.assign(c, std::numeric_limits<float>::quiet_NaN());
        v.values.assign(c, std::numeric_limits<float>::quiet_NaN());
      }
      ck.arrays.push_back(std::move(m));
      ck.arrays.push_back(std::move(v));
    }
    return ck;
  }

  static Model from_checkpoint(const ad::Checkpoint& ck) {
    nlohmann::json meta;
    try {
      meta = nlohmann::json::parse(ck.metadata);
    } catch (const nlohmann::json::exception& e) {
      throw CheckpointError(std::string("checkpoint metadata is not valid JSON: ") + e.what());
    }
    ModelConfig cfg;
    try {
      cfg = model_config_from_json(meta);
    } catch (const ConfigError& e) {
      throw CheckpointError(std::string("checkpoint model config: ") + e.what());
    }
    Model m(cfg, 0);
    m.load(ck);
    return m;
  }

  // Copies weights from a checkpoint taken from an identically configured model.
  void load(const ad::Checkpoint& ck) {
    const std::size_t expected = params_.size() + 2 * stats_.size();
    if (ck.arrays.size() != expected)
      throw CheckpointError("checkpoint holds " + std::to_string(ck.arrays.size()) + " arrays, model expects " +
                            std::to_string(expected));
    for (std::size_t i = 0; i < params_.size(); ++i) {
      const auto& a = ck.arrays[i];
      if (a.name != names_[i] || a.shape != params_[i].shape())
        throw CheckpointError("checkpoint array '" + a.name + "' " + ad::shape_str(a.shape) +
                              " does not match model parameter '" + names_[i] + "' " +
                              ad::shape_str(params_[i].shape()));
      std::copy(a.values.begin(), a.values.end(), params_[i].data().begin());
    }
    for (std::size_t i = 0; i < stats_.size(); ++i) {
      const auto& m = ck.arrays[params_.size() + 2 * i];
      const auto& v = ck.arrays[params_.size() + 2 * i + 1];
      if (m.name != stats_names_[i] + ".running_mean" || v.name != stats_names_[i] + ".running_var" ||
          m.values.size() != stats_channels_[i] || v.values.size() != stats_channels_[i])
        throw CheckpointError("checkpoint running statistics do not match layer '" + stats_names_[i] + "'");
      auto& st = stats_[i];
      st = ad::BatchNormStats<T>(stats_channels_[i]);
      st.initialized = !std::isnan(m.values.front());
      if (st.initialized) {
        std::copy(m.values.begin(), m.values.end(), st.mean.begin());
        std::copy(v.values.begin(), v.values.end(), st.var.begin());
      }
    }
  }

 private:
  struct ConvLayer {
    std::size_t kernel = 1, cin = 0, cout = 0;
    Activation act = Activation::swish;
    NormKind norm = NormKind::none;
    std::size_t w = 0, b = 0, gain = 0, shift = 0, stats = 0;
  };
  struct Block {
    std::array<ConvLayer, 3> branches;
    std::size_t out_channels = 0;
  };

  std::size_t add_param(const std::string& name, ad::Shape shape) {
    names_.push_back(name);
    params_.push_back(Tensor::zeros(std::move(shape), true));
    return params_.size() - 1;
  }

  ConvLayer make_conv(const std::string& name, std::size_t k, std::size_t cin, std::size_t cout, Activation act,
                      NormKind norm, const std::string& kind = "conv") {
    ConvLayer l{k, cin, cout, act, norm};
    l.w = add_param(name + ".kernel", {cout, cin, k, k, k});
    l.b = add_param(name + ".bias", {cout});
    std::size_t count = cout * cin * k * k * k + cout;
    if (norm != NormKind::none) {
      l.gain = add_param(name + ".norm_gain", {cout});
      l.shift = add_param(name + ".norm_bias", {cout});
      count += 2 * cout;
    }
    if (norm == NormKind::batch) {
      l.stats = stats_.size();
      stats_.emplace_back(cout);
      stats_names_.push_back(name);
      stats_channels_.push_back(cout);
    }
    layer_info_.push_back({name, kind + (norm == NormKind::none ? "" : "+" + to_string(norm)), k, cin, cout, count});
    return l;
  }

  Block make_block(const std::string& name, std::size_t cin, std::size_t residual, const std::array<std::size_t, 3>& widths,
                   NormKind norm) {
    Block b;
    const std::array<std::size_t, 3> kernels{1, 2, 3};
    for (int i = 0; i < 3; ++i)
      b.branches[i] = make_conv(name + ".branch" + std::to_string(kernels[i]), config_.branch_kernel(kernels[i]), cin,
                                widths[i], Activation::swish, norm, "branch");
    b.out_channels = widths[0] + widths[1] + widths[2] + residual;
    return b;
  }

  void build() {
    const auto& c = config_;
    const std::size_t qin = c.signal_channels + 3;
    enc_in_ = make_conv("encoder.pointwise_in", 1, qin, c.encoder_width, Activation::swish, c.encoder_norm);
    enc_block1_ = make_block("encoder.block1", c.encoder_width, qin, c.encoder_branches, c.encoder_norm);
    enc_block2_ = make_block("encoder.block2", enc_block1_.out_channels, qin, c.encoder_branches, c.encoder_norm);
    enc_pw1_ = make_conv("encoder.pointwise1", 1, enc_block2_.out_channels, c.encoder_width, Activation::swish,
                         c.encoder_norm);
    enc_pw2_ = make_conv("encoder.pointwise2", 1, c.encoder_width, c.encoder_width, Activation::swish, c.encoder_norm);
    const std::size_t hidden = c.convlstm_hidden_channels;
    if (c.variant == Variant::cnn3d) {
      qconv_w_ = add_param("encoder.qconv.kernel", {hidden, c.encoder_width, c.qconv_kernel});
      qconv_b_ = add_param("encoder.qconv.bias", {hidden});
      layer_info_.push_back({"encoder.qconv", "qconv1d+mean", c.qconv_kernel, c.encoder_width, hidden,
                             hidden * c.encoder_width * c.qconv_kernel + hidden});
    } else {
      const std::size_t k = c.recurrent_kernel();
      lstm_w_ = add_param("encoder.convlstm.kernel", {4 * hidden, c.encoder_width + hidden, k, k, k});
      lstm_b_ = add_param("encoder.convlstm.bias", {4 * hidden});
      layer_info_.push_back({"encoder.convlstm", "convlstm3d", k, c.encoder_width, hidden,
                             4 * hidden * (c.encoder_width + hidden) * k * k * k + 4 * hidden});
    }
    dec_pw1_ = make_conv("decoder.pointwise1", 1, hidden + 3, c.decoder_width, Activation::swish, c.decoder_norm);
    dec_pw2_ = make_conv("decoder.pointwise2", 1, c.decoder_width, c.decoder_width, Activation::swish, c.decoder_norm);
    dec_block1_ = make_block("decoder.block1", c.decoder_width + 3, 3, c.decoder_branches, c.decoder_norm);
    dec_block2_ = make_block("decoder.block2", dec_block1_.out_channels, 3, c.decoder_branches, c.decoder_norm);
    const std::size_t tk = c.effective_tail_kernel();
    dec_tail1_ = make_conv("decoder.tail1", tk, dec_block2_.out_channels, c.tail_width, Activation::swish, NormKind::none);
    dec_tail2_ = make_conv("decoder.tail2", tk, c.tail_width, c.signal_channels, Activation::relu, NormKind::none);
  }

  // Glorot-uniform kernels, zero biases, unit norm gains, unit forget-gate bias.
  void initialize(std::uint64_t seed) {
    for (std::size_t i = 0; i < params_.size(); ++i) {
      auto& p = params_[i];
      const auto& name = names_[i];
      auto& v = p.data();
      if (name.ends_with(".kernel")) {
        const auto& s = p.shape();
        std::size_t receptive = 1;
        for (std::size_t a = 2; a < s.size(); ++a) receptive *= s[a];
        const double limit = std::sqrt(6.0 / static_cast<double>((s[0] + s[1]) * receptive));
        Rng rng(hash_seed(seed, i));
        for (auto& x : v) x = static_cast<T>(rng.uniform(-limit, limit));
      } else if (name.ends_with(".norm_gain")) {
        std::fill(v.begin(), v.end(), T(1));
      } else if (name == "encoder.convlstm.bias") {
        const std::size_t hidden = config_.convlstm_hidden_channels;
        std::fill(v.begin(), v.end(), T(0));
        std::fill(v.begin() + static_cast<std::ptrdiff_t>(hidden), v.begin() + static_cast<std::ptrdiff_t>(2 * hidden), T(1));
      } else {
        std::fill(v.begin(), v.end(), T(0));
      }
    }
  }

  Tensor apply(const ConvLayer& l, const Tensor& x) {
    auto y = ad::conv3d(x, params_[l.w], params_[l.b]);
    y = l.act == Activation::swish ? ad::swish(y) : ad::relu(y);
    const T eps = static_cast<T>(config_.norm_eps);
    switch (l.norm) {
      case NormKind::instance: return ad::instance_norm(y, params_[l.gain], params_[l.shift], eps);
      case NormKind::batch:
        return ad::batch_norm(y, params_[l.gain], params_[l.shift], stats_[l.stats], mode_,
                              static_cast<T>(config_.batch_norm_momentum), eps);
      case NormKind::none: return y;
    }
    return y;
  }

 public:
  // Three same-shape branches (1^3, 2^3, 3^3 kernels) plus the residual,
  // concatenated channel-wise.
  Tensor parallel_block(const Block& b, const Tensor& x, const Tensor& residual) {
    if (residual.rank() != 5 || residual.dim(0) != x.dim(0) || residual.dim(2) != x.dim(2) ||
        residual.dim(3) != x.dim(3) || residual.dim(4) != x.dim(4))
      throw ShapeError("parallel_block: residual " + ad::shape_str(residual.shape()) + " incompatible with input " +
                       ad::shape_str(x.shape()));
    return ad::concat<T>({apply(b.branches[0], x), apply(b.branches[1], x), apply(b.branches[2], x), residual}, 1);
  }

  const Block& encoder_block(int i) const { return i == 0 ? enc_block1_ : enc_block2_; }
  const Block& decoder_block(int i) const { return i == 0 ? dec_block1_ : dec_block2_; }

 private:
  void check_patch(const Tensor& patches, const char* where) const {
    const std::size_t p = config_.patch_size;
    if (patches.rank() != 6 || patches.dim(2) != config_.signal_channels || patches.dim(3) != p ||
        patches.dim(4) != p || patches.dim(5) != p)
      throw ShapeError(std::string(where) + ": patches must be (N,q," + std::to_string(config_.signal_channels) + "," +
                       std::to_string(p) + "," + std::to_string(p) + "," + std::to_string(p) + "), got " +
                       ad::shape_str(patches.shape()));
  }

  ModelConfig config_;
  std::vector<Tensor> params_;
  std::vector<std::string> names_;
  std::vector<ad::BatchNormStats<T>> stats_;
  std::vector<std::string> stats_names_;
  std::vector<std::size_t> stats_channels_;
  std::vector<LayerInfo> layer_info_;
  ad::NormMode mode_ = ad::NormMode::train;

  ConvLayer enc_in_, enc_pw1_, enc_pw2_, dec_pw1_, dec_pw2_, dec_tail1_, dec_tail2_;
  Block enc_block1_, enc_block2_, dec_block1_, dec_block2_;
  std::size_t lstm_w_ = 0, lstm_b_ = 0, qconv_w_ = 0, qconv_b_ = 0;
};

}  // namespace qsr
