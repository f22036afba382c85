// qsr: command-line front end. Every subcommand reads one optional JSON
// config, applies flag overrides and writes its artifacts under --out.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>

#include <nlohmann/json.hpp>

#include "qsr/evaluate.hpp"
#include "qsr/phantom.hpp"
#include "qsr/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace qsr;

namespace {

// ---------------------------------------------------------------------------
// Exit codes

struct ExitCode {
  const char* kind;
  int code;
  const char* meaning;
};

constexpr ExitCode exit_codes[] = {
    {"usage", 2, "bad command line"},
    {"config", 3, "malformed or inconsistent configuration"},
    {"io", 4, "missing or unwritable file"},
    {"format", 5, "unparsable input file"},
    {"shape", 6, "array shape mismatch"},
    {"invalid-argument", 7, "argument out of range"},
    {"numerical", 8, "numerical failure (ill-conditioned fit, non-finite values)"},
    {"checkpoint", 9, "checkpoint incompatible with the model"},
    {"unsupported", 10, "unsupported file variant"},
    {"state", 11, "operation invalid in the current state"},
    {"internal", 1, "unexpected internal error"},
};

int exit_code_for(const std::string& kind) {
  for (const auto& e : exit_codes)
    if (kind == e.kind) return e.code;
  return 1;
}

std::string exit_code_help() {
  std::string s = "Exit codes:\n  0   success\n";
  for (const auto& e : exit_codes) {
    char line[128];
    std::snprintf(line, sizeof line, "  %-3d %-17s %s\n", e.code, e.kind, e.meaning);
    s += line;
  }
  s += "Errors are reported on stderr as one JSON line: {\"error\":KIND,\"exit_code\":N,\"message\":TEXT}.\n";
  s += "Environment: QSR_LOG=error|info|debug sets log verbosity (default info).";
  return s;
}

int report_error(const std::string& kind, const std::string& message) {
  const int code = exit_code_for(kind);
  std::cerr << json{{"error", kind}, {"exit_code", code}, {"message", message}}.dump() << std::endl;
  return code;
}

// ---------------------------------------------------------------------------
// Run configuration

struct DataConfig {
  std::vector<std::string> train;
  std::vector<std::string> val;
  ShellDivisors divisors = default_divisors();
  bool denoise = true;
};

struct EvalConfig {
  std::size_t q_in = 6;
  std::size_t q_out = 0;  // 0: every non-context direction
  std::uint64_t seed = 42;
  int lmax = 2;
  int shell = 1000;
};

struct RunConfig {
  std::string output = "out";
  std::size_t threads = 0;  // 0: all available cores
  PhantomSpec phantom;
  DataConfig data;
  ModelConfig model;
  TrainRunConfig train;
  EvalConfig eval;
};

json divisors_to_json(const ShellDivisors& d) {
  json j = json::object();
  for (const auto& [b, v] : d) j[std::to_string(b)] = v;
  return j;
}

ShellDivisors divisors_from_json(const json& j) {
  if (!j.is_object()) throw ConfigError("data.divisors must map shell b-values to divisors");
  ShellDivisors d;
  for (const auto& [key, value] : j.items()) {
    try {
      std::size_t used = 0;
      const int b = std::stoi(key, &used);
      if (used != key.size()) throw std::invalid_argument(key);
      d[b] = value.get<double>();
    } catch (const std::exception&) {
      throw ConfigError("data.divisors: bad entry '" + key + "'");
    }
  }
  return d;
}

json to_json(const RunConfig& c) {
  return {{"output", c.output},
          {"threads", c.threads},
          {"phantom", to_json(c.phantom)},
          {"data",
           {{"train", c.data.train},
            {"val", c.data.val},
            {"divisors", divisors_to_json(c.data.divisors)},
            {"denoise", c.data.denoise}}},
          {"model", to_json(c.model)},
          {"train", to_json(c.train)},
          {"eval",
           {{"q_in", c.eval.q_in},
            {"q_out", c.eval.q_out},
            {"seed", c.eval.seed},
            {"lmax", c.eval.lmax},
            {"shell", c.eval.shell}}}};
}

void reject_unknown(const json& j, const json& known, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + " must be an object");
  for (const auto& [key, _] : j.items())
    if (!known.contains(key)) throw ConfigError("unknown config key '" + where + key + "'");
}

template <typename T>
void read_key(const json& j, const char* key, T& out, const std::string& where) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const json::exception&) {
    throw ConfigError("config key '" + where + key + "' has the wrong type");
  }
}

RunConfig run_config_from_json(const json& j) {
  RunConfig c;
  const json known = to_json(c);
  reject_unknown(j, known, "");
  read_key(j, "output", c.output, "");
  read_key(j, "threads", c.threads, "");
  if (j.contains("phantom")) c.phantom = phantom_spec_from_json(j["phantom"]);
  if (j.contains("data")) {
    const auto& d = j["data"];
    reject_unknown(d, known["data"], "data.");
    read_key(d, "train", c.data.train, "data.");
    read_key(d, "val", c.data.val, "data.");
    read_key(d, "denoise", c.data.denoise, "data.");
    if (d.contains("divisors")) c.data.divisors = divisors_from_json(d["divisors"]);
  }
  if (j.contains("model")) c.model = model_config_from_json(j["model"]);
  if (j.contains("train")) c.train = train_config_from_json(j["train"]);
  if (j.contains("eval")) {
    const auto& e = j["eval"];
    reject_unknown(e, known["eval"], "eval.");
    read_key(e, "q_in", c.eval.q_in, "eval.");
    read_key(e, "q_out", c.eval.q_out, "eval.");
    read_key(e, "seed", c.eval.seed, "eval.");
    read_key(e, "lmax", c.eval.lmax, "eval.");
    read_key(e, "shell", c.eval.shell, "eval.");
  }
  return c;
}

json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open '" + path + "'");
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError("'" + path + "' is not valid JSON: " + e.what());
  }
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write '" + path.string() + "'");
  out << text;
}

fs::path prepare_out(const std::string& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create output directory '" + dir + "': " + ec.message());
  return fs::path(dir);
}

void require_file(const fs::path& p) {
  if (!fs::exists(p)) throw IoError("missing file '" + p.string() + "'");
}

// ---------------------------------------------------------------------------
// Preprocessed bundles: normalized signal plus the divisors that produced it.

struct Bundle {
  DwiDataset data;
  ShellDivisors divisors;
  bool denoised = false;
};

Bundle load_bundle(const std::string& dir) {
  const fs::path d(dir);
  for (const char* f : {"signal.nii", "bvecs", "bvals", "mask.nii", "bundle.json"}) require_file(d / f);
  Bundle b;
  b.data = load_dataset((d / "signal.nii").string(), (d / "bvecs").string(), (d / "bvals").string(),
                        (d / "mask.nii").string());
  const auto meta = read_json_file((d / "bundle.json").string());
  reject_unknown(meta, json{{"divisors", 0}, {"denoised", 0}}, "bundle.");
  if (!meta.contains("divisors")) throw FormatError("'" + (d / "bundle.json").string() + "' lacks divisors");
  b.divisors = divisors_from_json(meta["divisors"]);
  read_key(meta, "denoised", b.denoised, "bundle.");
  return b;
}

double divisor_for(const Bundle& b, int shell) {
  auto it = b.divisors.find(shell);
  if (it == b.divisors.end()) throw ConfigError("bundle has no divisor for shell b=" + std::to_string(shell));
  return it->second;
}

// Splits are stored with shell-local indices and the matching volume
// indices of the 4D dataset.
json split_to_json(const DwiDataset& d, int shell, const ContextTargetSplit& s, const EvalConfig& e) {
  const auto& vols = d.shells.at(shell);
  std::vector<std::size_t> cv, tv;
  for (auto i : s.context_indices) cv.push_back(vols[i]);
  for (auto i : s.target_indices) tv.push_back(vols[i]);
  const auto b0 = b0_indices(d.bvals());
  return {{"shell", shell},
          {"q_in", s.context_indices.size()},
          {"q_out", s.target_indices.size()},
          {"seed", e.seed},
          {"context_indices", s.context_indices},
          {"target_indices", s.target_indices},
          {"context_volumes", cv},
          {"target_volumes", tv},
          {"b0_volumes", b0}};
}

struct SplitFile {
  int shell = 0;
  std::vector<std::size_t> context_volumes, target_volumes, b0_volumes;
};

SplitFile load_split(const std::string& path) {
  const auto j = read_json_file(path);
  SplitFile s;
  try {
    s.shell = j.at("shell").get<int>();
    s.context_volumes = j.at("context_volumes").get<std::vector<std::size_t>>();
    s.target_volumes = j.at("target_volumes").get<std::vector<std::size_t>>();
    s.b0_volumes = j.at("b0_volumes").get<std::vector<std::size_t>>();
  } catch (const json::exception& e) {
    throw FormatError("'" + path + "' is not a split file: " + e.what());
  }
  return s;
}

ContextTargetSplit make_eval_split(const DwiDataset& d, const EvalConfig& e, SelectionStrategy strategy) {
  return evaluation_split(d.shell(e.shell), e.q_in, e.seed, e.q_out, strategy);
}

// ---------------------------------------------------------------------------
// Subcommands

void cmd_phantom(const RunConfig& c) {
  const auto out = prepare_out(c.output);
  const auto ph = generate(c.phantom);
  save_volume(ph.noisy.signal, (out / "dwi.nii").string());
  save_volume(ph.clean, (out / "clean.nii").string());
  save_mask(ph.noisy.mask, (out / "mask.nii").string());
  save_mask(ph.wm, (out / "wm.nii").string());
  save_mask(ph.gm, (out / "gm.nii").string());
  write_gradient_table((out / "bvecs").string(), (out / "bvals").string(), {ph.directions, ph.bvals});
  write_text(out / "phantom.json", to_json(c.phantom).dump(2) + "\n");
  log_info("phantom written to " + out.string());
}

void cmd_preprocess(const RunConfig& c, const std::string& data_dir, const std::string& mask_path) {
  const fs::path d(data_dir);
  for (const char* f : {"dwi.nii", "bvecs", "bvals"}) require_file(d / f);
  std::string mask = mask_path;
  if (mask.empty() && fs::exists(d / "mask.nii")) mask = (d / "mask.nii").string();
  if (!mask.empty()) require_file(mask);
  auto ds = load_dataset((d / "dwi.nii").string(), (d / "bvecs").string(), (d / "bvals").string(), mask);
  if (c.data.denoise) ds = denoise_p2s(ds);
  ds = normalize_shell(ds, c.data.divisors);
  const auto out = prepare_out(c.output);
  save_volume(ds.signal, (out / "signal.nii").string());
  save_mask(ds.mask, (out / "mask.nii").string());
  GradientTable t;
  t.bvals = ds.bvals();
  for (const auto& b : ds.bvectors) t.bvecs.push_back(b.bvalue() > 0 ? b.direction() : Vec3::Zero());
  write_gradient_table((out / "bvecs").string(), (out / "bvals").string(), t);
  write_text(out / "bundle.json",
             json{{"divisors", divisors_to_json(c.data.divisors)}, {"denoised", c.data.denoise}}.dump(2) + "\n");
  log_info("bundle written to " + out.string());
}

std::vector<PatchSet> patch_sets(const std::vector<std::string>& dirs, const std::vector<int>& shells,
                                 std::size_t patch_size) {
  std::vector<PatchSet> sets;
  for (const auto& dir : dirs) {
    const auto b = load_bundle(dir);
    for (int s : shells) sets.push_back(make_patch_set(b.data, s, patch_size));
  }
  return sets;
}

void cmd_train(const RunConfig& c) {
  if (c.data.train.empty()) throw ConfigError("train: no training bundles (use --train or data.train)");
  const auto train_sets = patch_sets(c.data.train, c.train.shells, c.model.patch_size);
  const auto val_sets = patch_sets(c.data.val, c.train.shells, c.model.patch_size);
  const auto out = prepare_out(c.output);
  write_text(out / "run_config.json", to_json(c).dump(2) + "\n");
  std::ofstream history(out / "history.jsonl", std::ios::trunc);
  if (!history) throw IoError("cannot write '" + (out / "history.jsonl").string() + "'");
  const auto result = train(c.model, train_sets, val_sets, c.train, [&](const EpochRecord& r) {
    history << to_json(r).dump() << "\n";
    history.flush();
  });
  write_text(out / "best.ckpt", result.best_checkpoint);
  log_info("best epoch " + std::to_string(result.best_epoch) + ", loss " + std::to_string(result.best_loss));
}

void cmd_infer(const RunConfig& c, const std::string& checkpoint, const std::string& data_dir) {
  require_file(checkpoint);
  auto model = Model<float>::from_checkpoint(ad::read_checkpoint(checkpoint));
  const auto b = load_bundle(data_dir);
  const auto split = make_eval_split(b.data, c.eval, c.train.selection);
  const auto set = make_patch_set(b.data, c.eval.shell, model.config().patch_size);
  const auto pred = infer(model, set, split, divisor_for(b, c.eval.shell));
  const auto out = prepare_out(c.output);
  save_volume(pred, (out / "pred.nii").string());
  write_text(out / "split.json", split_to_json(b.data, c.eval.shell, split, c.eval).dump(2) + "\n");
}

void cmd_baseline_sh(const RunConfig& c, const std::string& data_dir) {
  const auto b = load_bundle(data_dir);
  const auto split = make_eval_split(b.data, c.eval, c.train.selection);
  ShFitOptions opts;
  opts.shell_label = "b=" + std::to_string(c.eval.shell);
  auto sh = sh_interpolate_volume(b.data.shell_signal(c.eval.shell), b.data.shell(c.eval.shell), split, c.eval.lmax, opts);
  const double div = divisor_for(b, c.eval.shell);
  for (auto& v : sh.data) v *= div;
  const auto out = prepare_out(c.output);
  save_volume(sh, (out / "sh.nii").string());
  write_text(out / "split.json", split_to_json(b.data, c.eval.shell, split, c.eval).dump(2) + "\n");
}

struct EvalInputs {
  std::string split, truth, mask, wm, gm, data;
  std::vector<std::string> preds;  // NAME=FILE
};

FaSide fa_side(const Volume4& context, const Volume4& targets, const std::vector<Vec3>& cdirs,
               const std::vector<Vec3>& tdirs, const std::vector<double>& cb, const std::vector<double>& tb,
               std::vector<double> s0) {
  FaSide f;
  f.dwi = Volume4(context.dims[0], context.dims[1], context.dims[2], context.q() + targets.q());
  std::copy(context.data.begin(), context.data.end(), f.dwi.data.begin());
  std::copy(targets.data.begin(), targets.data.end(), f.dwi.data.begin() + static_cast<std::ptrdiff_t>(context.data.size()));
  f.dirs = cdirs;
  f.dirs.insert(f.dirs.end(), tdirs.begin(), tdirs.end());
  f.bvals = cb;
  f.bvals.insert(f.bvals.end(), tb.begin(), tb.end());
  f.s0 = std::move(s0);
  return f;
}

void cmd_eval(const RunConfig& c, const EvalInputs& in) {
  if (in.preds.empty()) throw ConfigError("eval: at least one --pred NAME=FILE is required");
  require_file(in.split);
  require_file(in.truth);
  require_file(in.mask);
  const auto split = load_split(in.split);
  Volume4 truth_full = load_volume(in.truth);
  EvalMasks masks{load_mask(in.mask), std::nullopt, std::nullopt};
  if (!in.wm.empty()) masks.wm = load_mask(in.wm);
  if (!in.gm.empty()) masks.gm = load_mask(in.gm);

  // The truth either holds exactly the target volumes or the full dataset.
  const bool full = truth_full.q() != split.target_volumes.size();
  if (full)
    for (auto v : split.target_volumes)
      if (v >= truth_full.q()) throw ShapeError("eval: truth has no volume " + std::to_string(v));
  const Volume4 truth = full ? truth_full.select(split.target_volumes) : truth_full;

  std::optional<Bundle> bundle;
  if (!in.data.empty()) {
    if (!full) throw ConfigError("eval: FA needs the full truth dataset, not only the target volumes");
    if (split.b0_volumes.empty()) throw ConfigError("eval: FA needs b = 0 volumes for S0");
    bundle = load_bundle(in.data);
  }

  std::vector<std::pair<std::string, EvalReport>> rows;
  for (const auto& spec : in.preds) {
    const auto eq = spec.find('=');
    if (eq == std::string::npos || eq == 0) throw ConfigError("eval: --pred expects NAME=FILE, got '" + spec + "'");
    const std::string name = spec.substr(0, eq), path = spec.substr(eq + 1);
    require_file(path);
    const auto pred = load_volume(path);
    std::optional<FaInputs> fa;
    if (bundle) {
      const auto& d = bundle->data;
      const double div = divisor_for(*bundle, split.shell);
      Volume4 context = d.signal.select(split.context_volumes);
      for (auto& v : context.data) v *= div;
      std::vector<Vec3> cdirs, tdirs;
      std::vector<double> cb, tb;
      for (auto v : split.context_volumes) cdirs.push_back(d.bvectors.at(v).direction()), cb.push_back(d.bvectors[v].bvalue());
      for (auto v : split.target_volumes) tdirs.push_back(d.bvectors.at(v).direction()), tb.push_back(d.bvectors[v].bvalue());
      FaInputs f{fa_side(context, pred, cdirs, tdirs, cb, tb, mean_volume(d.signal, split.b0_volumes)),
                 fa_side(truth_full.select(split.context_volumes), truth, cdirs, tdirs, cb, tb,
                         mean_volume(truth_full, split.b0_volumes))};
      fa = std::move(f);
    }
    rows.emplace_back(name, evaluate(pred, truth, masks, {}, fa ? &*fa : nullptr));
  }

  const auto out = prepare_out(c.output);
  json report = json::object();
  for (const auto& [name, r] : rows) report[name] = to_json(r);
  write_text(out / "report.json", report.dump(2) + "\n");
  const auto table = format_table(rows);
  write_text(out / "table.txt", table);
  std::cout << table;
}

void cmd_describe(const RunConfig& c, const std::string& checkpoint) {
  const ModelConfig mc = checkpoint.empty() ? c.model : Model<float>::from_checkpoint(ad::read_checkpoint(checkpoint)).config();
  Model<float> m(mc);
  std::printf("variant %s\n", to_string(mc.variant).c_str());
  std::printf("%-28s %-18s %6s %6s %6s %10s\n", "layer", "kind", "kernel", "in", "out", "params");
  for (const auto& l : m.describe())
    std::printf("%-28s %-18s %6zu %6zu %6zu %10zu\n", l.name.c_str(), l.kind.c_str(), l.kernel, l.in_channels,
                l.out_channels, l.parameters);
  std::printf("total parameters %zu\n", m.parameter_count());
}

// Flag values that override the config (unset flags leave it untouched).
struct Overrides {
  std::string config, out, variant;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> qin, qout, threads, epochs;
  std::optional<int> lmax, shell;
  std::vector<std::string> train, val;
  bool no_denoise = false;
};

RunConfig effective_config(const std::string& command, const Overrides& o) {
  RunConfig c = o.config.empty() ? RunConfig{} : run_config_from_json(read_json_file(o.config));
  if (!o.out.empty()) c.output = o.out;
  if (o.threads) c.threads = *o.threads;
  if (!o.variant.empty()) c.model.variant = parse_variant(o.variant);
  if (o.seed) {
    if (command == "phantom") c.phantom.seed = *o.seed;
    if (command == "train") c.train.data_seed = c.train.model_seed = *o.seed;
    if (command == "infer" || command == "baseline-sh") c.eval.seed = *o.seed;
  }
  if (o.qin) (command == "train" ? c.train.q_in : c.eval.q_in) = *o.qin;
  if (o.qout) (command == "train" ? c.train.q_out : c.eval.q_out) = *o.qout;
  if (o.epochs) c.train.epochs = *o.epochs;
  if (o.lmax) c.eval.lmax = *o.lmax;
  if (o.shell) {
    c.eval.shell = *o.shell;
    c.train.shells = {*o.shell};
  }
  if (!o.train.empty()) c.data.train = o.train;
  if (!o.val.empty()) c.data.val = o.val;
  if (o.no_denoise) c.data.denoise = false;
  c.model.validate();
  c.train.validate();
  return c;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"qsr: angular super-resolution of diffusion MRI with a recurrent conditional autoencoder"};
  app.footer(exit_code_help());
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "Show help for every subcommand");

  Overrides o;
  EvalInputs ev;
  std::string data_dir, mask_path, checkpoint;
  bool defaults = false;

  auto add_common = [&](CLI::App* s) {
    s->add_option("--config", o.config, "JSON run configuration (flags override its values)");
    s->add_option("--threads", o.threads, "Worker threads for parallel stages (default: all cores)");
  };
  auto add_out = [&](CLI::App* s, const std::string& what) { s->add_option("--out", o.out, what); };
  auto add_split = [&](CLI::App* s) {
    s->add_option("--qin", o.qin, "Number of context directions");
    s->add_option("--qout", o.qout, "Number of target directions (0: all remaining)");
    s->add_option("--shell", o.shell, "Shell b-value");
    s->add_option("--seed", o.seed, "Seed of the context selection");
  };

  auto* phantom = app.add_subcommand("phantom", "Generate a synthetic noisy diffusion dataset");
  add_common(phantom);
  add_out(phantom, "Output directory (dwi.nii, clean.nii, mask.nii, wm.nii, gm.nii, bvecs, bvals, phantom.json)");
  phantom->add_option("--seed", o.seed, "Phantom seed");

  auto* preprocess = app.add_subcommand("preprocess", "Denoise, normalize and bundle a dataset for training");
  add_common(preprocess);
  add_out(preprocess, "Bundle directory (signal.nii, mask.nii, bvecs, bvals, bundle.json)");
  preprocess->add_option("--data", data_dir, "Dataset directory holding dwi.nii, bvecs, bvals and optionally mask.nii")
      ->required();
  preprocess->add_option("--mask", mask_path, "Brain mask overriding <data>/mask.nii");
  preprocess->add_flag("--no-denoise", o.no_denoise, "Skip self-supervised denoising");

  auto* train_cmd = app.add_subcommand("train", "Train a model on preprocessed bundles");
  add_common(train_cmd);
  add_out(train_cmd, "Run directory (best.ckpt, history.jsonl, run_config.json)");
  train_cmd->add_option("--train", o.train, "Training bundle directories");
  train_cmd->add_option("--val", o.val, "Validation bundle directories");
  train_cmd->add_option("--variant", o.variant, "Model variant")->check(CLI::IsMember({"rcnn3d", "rcnn1d", "cnn3d"}));
  train_cmd->add_option("--qin", o.qin, "Context directions per training sample");
  train_cmd->add_option("--qout", o.qout, "Target directions per training sample");
  train_cmd->add_option("--shell", o.shell, "Shell b-value to train on");
  train_cmd->add_option("--seed", o.seed, "Seed for weight initialization and q-space shuffling");
  train_cmd->add_option("--epochs", o.epochs, "Number of epochs");

  auto* infer_cmd = app.add_subcommand("infer", "Predict unmeasured directions with a trained model");
  add_common(infer_cmd);
  add_out(infer_cmd, "Output directory (pred.nii, split.json)");
  infer_cmd->add_option("--checkpoint", checkpoint, "Model checkpoint")->required();
  infer_cmd->add_option("--data", data_dir, "Preprocessed bundle directory")->required();
  add_split(infer_cmd);

  auto* sh_cmd = app.add_subcommand("baseline-sh", "Spherical-harmonic interpolation baseline");
  add_common(sh_cmd);
  add_out(sh_cmd, "Output directory (sh.nii, split.json)");
  sh_cmd->add_option("--data", data_dir, "Preprocessed bundle directory")->required();
  sh_cmd->add_option("--lmax", o.lmax, "Maximum even SH order");
  add_split(sh_cmd);

  auto* eval_cmd = app.add_subcommand("eval", "Score predictions against ground truth");
  add_common(eval_cmd);
  add_out(eval_cmd, "Output directory (report.json, table.txt)");
  eval_cmd->add_option("--split", ev.split, "split.json written by infer or baseline-sh")->required();
  eval_cmd->add_option("--truth", ev.truth, "Ground truth NIfTI: the target volumes or the full dataset")->required();
  eval_cmd->add_option("--pred", ev.preds, "Prediction as NAME=FILE; repeat to compare methods")->required();
  eval_cmd->add_option("--mask", ev.mask, "Brain mask")->required();
  eval_cmd->add_option("--wm", ev.wm, "White matter mask");
  eval_cmd->add_option("--gm", ev.gm, "Grey matter mask");
  eval_cmd->add_option("--data", ev.data, "Bundle supplying context volumes and S0; enables FA errors");

  auto* describe = app.add_subcommand("describe", "Print the model layer table");
  add_common(describe);
  describe->add_option("--variant", o.variant, "Model variant")->check(CLI::IsMember({"rcnn3d", "rcnn1d", "cnn3d"}));
  describe->add_option("--checkpoint", checkpoint, "Describe the model stored in this checkpoint");

  auto* config_cmd = app.add_subcommand("config", "Print the effective run configuration");
  add_common(config_cmd);
  config_cmd->add_flag("--defaults", defaults, "Print the built-in defaults, ignoring --config");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    return report_error("usage", e.what());
  }

  try {
    (void)log_level();
    CLI::App* sub = app.get_subcommands().front();
    const std::string name = sub->get_name();
    if (name == "config" && defaults) o.config.clear();
    const RunConfig c = effective_config(name, o);
    if (c.threads > 0) thread_count() = c.threads;
    if (name == "phantom") cmd_phantom(c);
    else if (name == "preprocess") cmd_preprocess(c, data_dir, mask_path);
    else if (name == "train") cmd_train(c);
    else if (name == "infer") cmd_infer(c, checkpoint, data_dir);
    else if (name == "baseline-sh") cmd_baseline_sh(c, data_dir);
    else if (name == "eval") cmd_eval(c, ev);
    else if (name == "describe") cmd_describe(c, checkpoint);
    else if (name == "config") std::cout << to_json(c).dump(2) << "\n";
  } catch (const Error& e) {
    return report_error(e.kind(), e.what());
  } catch (const std::exception& e) {
    return report_error("internal", e.what());
  }
  return 0;
}
