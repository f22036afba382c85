#pragma once

#include <functional>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "qsr/autodiff/adam.hpp"
#include "qsr/model.hpp"
#include "qsr/qspace.hpp"
#include "qsr/shmath.hpp"
#include "qsr/volume.hpp"

namespace qsr {

struct TrainRunConfig {
  std::size_t epochs = 120;
  ad::AdamConfig adam{};
  std::size_t q_in = 6;
  std::size_t q_out = 84;
  std::vector<int> shells{1000};
  std::uint64_t data_seed = 0;
  std::uint64_t model_seed = 0;
  std::size_t batch_size = 8;
  std::size_t validation_every = 1;
  SelectionStrategy selection = SelectionStrategy::farthest_point;

  void validate() const {
    if (epochs < 1) throw ConfigError("train.epochs must be >= 1");
    if (q_in < 1) throw ConfigError("train.q_in must be >= 1");
    if (q_out < 1) throw ConfigError("train.q_out must be >= 1");
    if (batch_size < 1) throw ConfigError("train.batch_size must be >= 1");
    if (validation_every < 1) throw ConfigError("train.validation_every must be >= 1");
    if (shells.empty()) throw ConfigError("train.shells must list at least one shell");
    if (!(adam.lr > 0)) throw ConfigError("train.lr must be positive");
  }

  bool operator==(const TrainRunConfig& o) const {
    return epochs == o.epochs && adam.lr == o.adam.lr && adam.beta1 == o.adam.beta1 && adam.beta2 == o.adam.beta2 &&
           adam.epsilon == o.adam.epsilon && q_in == o.q_in && q_out == o.q_out && shells == o.shells &&
           data_seed == o.data_seed && model_seed == o.model_seed && batch_size == o.batch_size &&
           validation_every == o.validation_every && selection == o.selection;
  }
};

inline nlohmann::json to_json(const TrainRunConfig& c) {
  return {{"epochs", c.epochs},
          {"lr", c.adam.lr},
          {"beta1", c.adam.beta1},
          {"beta2", c.adam.beta2},
          {"epsilon", c.adam.epsilon},
          {"q_in", c.q_in},
          {"q_out", c.q_out},
          {"shells", c.shells},
          {"data_seed", c.data_seed},
          {"model_seed", c.model_seed},
          {"batch_size", c.batch_size},
          {"validation_every", c.validation_every},
          {"selection_strategy", to_string(c.selection)}};
}

inline TrainRunConfig train_config_from_json(const nlohmann::json& j, TrainRunConfig c = {}) {
  if (!j.is_object()) throw ConfigError("train config must be an object");
  const auto known = to_json(c);
  for (const auto& [key, _] : j.items())
    if (!known.contains(key)) throw ConfigError("unknown train config key '" + key + "'");
  try {
    if (j.contains("epochs")) c.epochs = j["epochs"].get<std::size_t>();
    if (j.contains("lr")) c.adam.lr = j["lr"].get<double>();
    if (j.contains("beta1")) c.adam.beta1 = j["beta1"].get<double>();
    if (j.contains("beta2")) c.adam.beta2 = j["beta2"].get<double>();
    if (j.contains("epsilon")) c.adam.epsilon = j["epsilon"].get<double>();
    if (j.contains("q_in")) c.q_in = j["q_in"].get<std::size_t>();
    if (j.contains("q_out")) c.q_out = j["q_out"].get<std::size_t>();
    if (j.contains("shells")) c.shells = j["shells"].get<std::vector<int>>();
    if (j.contains("data_seed")) c.data_seed = j["data_seed"].get<std::uint64_t>();
    if (j.contains("model_seed")) c.model_seed = j["model_seed"].get<std::uint64_t>();
    if (j.contains("batch_size")) c.batch_size = j["batch_size"].get<std::size_t>();
    if (j.contains("validation_every")) c.validation_every = j["validation_every"].get<std::size_t>();
    if (j.contains("selection_strategy"))
      c.selection = parse_selection_strategy(j["selection_strategy"].get<std::string>());
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("train config: ") + e.what());
  }
  c.validate();
  return c;
}

struct EpochRecord {
  std::size_t epoch = 0;
  double train_loss = 0;
  std::optional<double> val_loss;
};

inline nlohmann::json to_json(const EpochRecord& r) {
  nlohmann::json j{{"epoch", r.epoch}, {"train_loss", r.train_loss}};
  j["val_loss"] = r.val_loss ? nlohmann::json(*r.val_loss) : nlohmann::json(nullptr);
  return j;
}

struct TrainResult {
  std::string best_checkpoint;  // serialized checkpoint bytes
  std::size_t best_epoch = 0;
  double best_loss = std::numeric_limits<double>::infinity();  // validation loss (training loss without val data)
  std::vector<EpochRecord> history;
};

// Context/target assignment for evaluation: a uniform context subset and
// the remaining directions (in shell order) as targets, truncated to q_out
// when q_out > 0.
inline ContextTargetSplit evaluation_split(const QSpaceShell& shell, std::size_t q_in, std::uint64_t seed,
                                           std::size_t q_out = 0,
                                           SelectionStrategy strategy = SelectionStrategy::farthest_point) {
  if (q_in >= shell.size())
    throw InvalidArgument("evaluation_split: q_in = " + std::to_string(q_in) + " leaves no targets in a " +
                          std::to_string(shell.size()) + "-direction shell");
  ContextTargetSplit split;
  split.context_indices = select_uniform_subset(shell, q_in, seed, strategy);
  std::vector<bool> used(shell.size(), false);
  for (auto i : split.context_indices) used[i] = true;
  for (std::size_t i = 0; i < shell.size(); ++i)
    if (!used[i]) split.target_indices.push_back(i);
  if (q_out > 0) {
    if (q_out > split.target_indices.size())
      throw InvalidArgument("evaluation_split: q_in + q_out exceeds the shell size");
    split.target_indices.resize(q_out);
  }
  return split;
}

// Patches of one shell of a (normalized) dataset.
inline PatchSet make_patch_set(const DwiDataset& d, int shell, std::size_t patch_size = 10) {
  return extract_patches(d.shell_signal(shell), d.mask, d.shell(shell).bvectors(), patch_size);
}

namespace trainer_detail {

template <typename T>
struct Batch {
  ad::Tensor<T> context, context_bvecs, target_bvecs, target;
};

struct Sample {
  std::size_t set = 0;
  std::size_t patch = 0;
};

template <typename T>
Batch<T> make_batch(const std::vector<PatchSet>& sets, const std::vector<Sample>& samples,
                    const std::vector<ContextTargetSplit>& splits, bool with_target) {
  const std::size_t n = samples.size();
  const std::size_t qi = splits.front().context_indices.size(), qo = splits.front().target_indices.size();
  const std::size_t p = sets[samples.front().set].patch_size, vox = p * p * p;
  std::vector<T> ctx(n * qi * vox), cb(n * qi * 3), tb(n * qo * 3), tgt(with_target ? n * qo * vox : 0);
  for (std::size_t i = 0; i < n; ++i) {
    const auto& set = sets[samples[i].set];
    const auto& patch = set.patches[samples[i].patch];
    const auto& split = splits[i];
    for (std::size_t t = 0; t < qi; ++t) {
      const std::size_t q = split.context_indices[t];
      std::copy_n(patch.volume(q), vox, ctx.begin() + static_cast<std::ptrdiff_t>((i * qi + t) * vox));
      const Vec3& g = set.q_metadata[q].direction();
      for (int a = 0; a < 3; ++a) cb[(i * qi + t) * 3 + static_cast<std::size_t>(a)] = static_cast<T>(g[a]);
    }
    for (std::size_t t = 0; t < qo; ++t) {
      const std::size_t q = split.target_indices[t];
      if (with_target) std::copy_n(patch.volume(q), vox, tgt.begin() + static_cast<std::ptrdiff_t>((i * qo + t) * vox));
      const Vec3& g = set.q_metadata[q].direction();
      for (int a = 0; a < 3; ++a) tb[(i * qo + t) * 3 + static_cast<std::size_t>(a)] = static_cast<T>(g[a]);
    }
  }
  Batch<T> b;
  b.context = ad::Tensor<T>({n, qi, 1, p, p, p}, std::move(ctx));
  b.context_bvecs = ad::Tensor<T>({n, qi, 3}, std::move(cb));
  b.target_bvecs = ad::Tensor<T>({n, qo, 3}, std::move(tb));
  if (with_target) b.target = ad::Tensor<T>({n, qo, 1, p, p, p}, std::move(tgt));
  return b;
}

inline void check_sets(const std::vector<PatchSet>& sets, const ModelConfig& mc, std::size_t need, const char* what) {
  for (const auto& s : sets) {
    if (s.patch_size != mc.patch_size)
      throw ConfigError(std::string(what) + ": patch size " + std::to_string(s.patch_size) +
                        " differs from the model's " + std::to_string(mc.patch_size));
    if (s.q_metadata.size() < need)
      throw ConfigError(std::string(what) + ": shell has " + std::to_string(s.q_metadata.size()) +
                        " directions, q_in + q_out = " + std::to_string(need));
    for (const auto& patch : s.patches)
      if (patch.q() != s.q_metadata.size()) throw ShapeError(std::string(what) + ": patch q extent differs from metadata");
  }
}

}  // namespace trainer_detail

// MAE training with per-epoch q-space reshuffling; keeps the weights with the
// lowest validation loss. Every patch set holds one shell of one subject,
// already normalized. Deterministic given the seeds.
inline TrainResult train(const ModelConfig& model_config, const std::vector<PatchSet>& train_sets,
                         const std::vector<PatchSet>& val_sets, const TrainRunConfig& run,
                         const std::function<void(const EpochRecord&)>& on_epoch = {}) {
  using namespace trainer_detail;
  run.validate();
  model_config.validate();
  std::vector<Sample> samples;
  for (std::size_t s = 0; s < train_sets.size(); ++s)
    for (std::size_t p = 0; p < train_sets[s].size(); ++p) samples.push_back({s, p});
  if (samples.empty()) throw ConfigError("train: empty training set");
  const std::size_t need = run.q_in + run.q_out;
  check_sets(train_sets, model_config, need, "train");
  check_sets(val_sets, model_config, need, "validation");

  std::vector<Sample> val_samples;
  std::vector<ContextTargetSplit> val_splits;
  for (std::size_t s = 0; s < val_sets.size(); ++s) {
    const QSpaceShell shell(val_sets[s].q_metadata, nominal_bvalue(val_sets[s].q_metadata.front().bvalue()));
    for (std::size_t p = 0; p < val_sets[s].size(); ++p) {
      val_samples.push_back({s, p});
      val_splits.push_back(
          shuffle_and_split(shell, run.q_in, run.q_out, hash_seed(run.data_seed, 0x7A11ull, s, p), run.selection));
    }
  }
  std::vector<QSpaceShell> shells;
  for (const auto& s : train_sets) shells.emplace_back(s.q_metadata, nominal_bvalue(s.q_metadata.front().bvalue()));

  Model<float> model(model_config, run.model_seed);
  ad::AdamState<float> opt(run.adam);
  TrainResult result;

  for (std::size_t epoch = 1; epoch <= run.epochs; ++epoch) {
    auto order = samples;
    Rng(hash_seed(run.data_seed, 0x0D3Bull, epoch)).shuffle(order);
    model.set_mode(ad::NormMode::train);
    double loss_sum = 0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < order.size(); start += run.batch_size) {
      const std::size_t end = std::min(order.size(), start + run.batch_size);
      const std::vector<Sample> chunk(order.begin() + static_cast<std::ptrdiff_t>(start),
                                      order.begin() + static_cast<std::ptrdiff_t>(end));
      std::vector<ContextTargetSplit> splits;
      for (std::size_t i = start; i < end; ++i)
        splits.push_back(shuffle_and_split(shells[order[i].set], run.q_in, run.q_out,
                                           hash_seed(run.data_seed, epoch, i), run.selection));
      auto batch = make_batch<float>(train_sets, chunk, splits, true);
      double loss_value;
      try {
        auto pred = model.forward(batch.context, batch.context_bvecs, batch.target_bvecs);
        auto loss = ad::mae_loss(pred, batch.target);
        loss_value = loss.item();
        if (!std::isfinite(loss_value)) throw NumericalError("non-finite loss");
        ad::backward(loss);
      } catch (const NumericalError& e) {
        throw NumericalError("train: epoch " + std::to_string(epoch) + ", batch " + std::to_string(batches) +
                             ": " + e.what());
      }
      ad::adam_step(model.parameters(), opt);
      model.zero_grad();
      loss_sum += loss_value;
      ++batches;
      log_debug("epoch " + std::to_string(epoch) + " batch " + std::to_string(batches) + " loss " +
                std::to_string(loss_value));
    }
    EpochRecord rec{epoch, loss_sum / static_cast<double>(batches), std::nullopt};
    const bool validate_now = !val_samples.empty() && (epoch % run.validation_every == 0 || epoch == run.epochs);
    if (validate_now) {
      ad::NoGradGuard guard;
      model.set_mode(ad::NormMode::infer);
      double vsum = 0;
      for (std::size_t i = 0; i < val_samples.size(); ++i) {
        auto batch = make_batch<float>(val_sets, {val_samples[i]}, {val_splits[i]}, true);
        vsum += ad::mae_loss(model.forward(batch.context, batch.context_bvecs, batch.target_bvecs), batch.target).item();
      }
      rec.val_loss = vsum / static_cast<double>(val_samples.size());
    }
    const std::optional<double> score = val_samples.empty() ? std::optional<double>(rec.train_loss) : rec.val_loss;
    if (score && *score < result.best_loss) {
      result.best_loss = *score;
      result.best_epoch = epoch;
      result.best_checkpoint = ad::serialize_checkpoint(model.to_checkpoint());
    }
    result.history.push_back(rec);
    log_info("epoch " + std::to_string(epoch) + " train " + std::to_string(rec.train_loss) +
             (rec.val_loss ? " val " + std::to_string(*rec.val_loss) : std::string()));
    if (on_epoch) on_epoch(rec);
  }
  return result;
}

// Predicts the split's target volumes for every patch and reassembles them
// into a (X, Y, Z, q_out) array on the normalized scale.
inline Volume4 predict_volume(Model<float>& model, const PatchSet& set, const ContextTargetSplit& split,
                              std::size_t target_chunk = 16) {
  using namespace trainer_detail;
  if (set.patch_size != model.config().patch_size)
    throw CheckpointError("infer: patch size " + std::to_string(set.patch_size) + " differs from the model's " +
                          std::to_string(model.config().patch_size));
  if (split.context_indices.empty() || split.target_indices.empty())
    throw InvalidArgument("infer: split needs context and target directions");
  for (auto i : split.context_indices)
    if (i >= set.q_metadata.size()) throw InvalidArgument("infer: context index out of range");
  for (auto i : split.target_indices)
    if (i >= set.q_metadata.size()) throw InvalidArgument("infer: target index out of range");
  ad::NoGradGuard guard;
  model.set_mode(ad::NormMode::infer);
  const std::size_t p = set.patch_size, vox = p * p * p, qo = split.target_indices.size();
  std::vector<Volume4> predicted(set.size(), Volume4(p, p, p, qo));
  std::vector<PatchSet> one{set};
  for (std::size_t i = 0; i < set.size(); ++i) {
    auto ctx = make_batch<float>(one, {{0, i}}, {split}, false);
    const auto state = model.encode(ctx.context, ctx.context_bvecs);
    for (std::size_t start = 0; start < qo; start += target_chunk) {
      const std::size_t len = std::min(target_chunk, qo - start);
      std::vector<float> tb(len * 3);
      for (std::size_t t = 0; t < len; ++t) {
        const Vec3& g = set.q_metadata[split.target_indices[start + t]].direction();
        for (int a = 0; a < 3; ++a) tb[t * 3 + static_cast<std::size_t>(a)] = static_cast<float>(g[a]);
      }
      const auto out = model.decode(state, ad::Tensor<float>({1, len, 3}, std::move(tb)));
      for (std::size_t t = 0; t < len; ++t)
        std::copy_n(out.data().begin() + static_cast<std::ptrdiff_t>(t * vox), vox, predicted[i].volume(start + t));
    }
  }
  return reassemble(set, predicted);
}

// As predict_volume, then rescaled with the shell's normalization divisor.
inline Volume4 infer(Model<float>& model, const PatchSet& set, const ContextTargetSplit& split, double divisor,
                     std::size_t target_chunk = 16) {
  if (!(divisor > 0)) throw ConfigError("infer: normalization divisor must be positive");
  Volume4 out = predict_volume(model, set, split, target_chunk);
  for (auto& v : out.data) v *= divisor;
  return out;
}

// Voxelwise SH interpolation of one shell from its context to its target
// directions.
inline Volume4 sh_interpolate_volume(const Volume4& shell_signal, const QSpaceShell& shell,
                                     const ContextTargetSplit& split, int l_max, const ShFitOptions& opts = {}) {
  if (shell_signal.q() != shell.size()) throw ShapeError("baseline-sh: signal q extent differs from shell size");
  std::vector<Vec3> low, high;
  for (auto i : split.context_indices) low.push_back(shell[i].direction());
  for (auto i : split.target_indices) high.push_back(shell[i].direction());
  const ShInterpolator interp(low, high, l_max, opts);
  const Eigen::MatrixXd& m = interp.matrix();
  const std::size_t s = shell_signal.spatial_size();
  Volume4 out(shell_signal.dims[0], shell_signal.dims[1], shell_signal.dims[2], high.size());
  parallel_for(s, [&](std::size_t v) {
    Eigen::VectorXd in(static_cast<Eigen::Index>(low.size()));
    for (std::size_t t = 0; t < low.size(); ++t)
      in(static_cast<Eigen::Index>(t)) = shell_signal.volume(split.context_indices[t])[v];
    const Eigen::VectorXd r = m * in;
    for (std::size_t t = 0; t < high.size(); ++t) out.volume(t)[v] = r(static_cast<Eigen::Index>(t));
  });
  return out;
}

}  // namespace qsr
