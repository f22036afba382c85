#include <gtest/gtest.h>

#include <unistd.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "qsr/evaluate.hpp"
#include "qsr/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace qsr;

namespace {

struct RunResult {
  int code = -1;
  std::string out;
  std::string err;
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream s;
  s << in.rdbuf();
  return s.str();
}

class Cli : public ::testing::Test {
 protected:
  static fs::path root;

  static void SetUpTestSuite() {
    root = fs::temp_directory_path() / ("qsr_cli_test_" + std::to_string(::getpid()));
    fs::remove_all(root);
    fs::create_directories(root);
    // A small phantom and a fast model keep the end-to-end runs short.
    json cfg{{"phantom", {{"dims", {10, 10, 10}}, {"shells", {{{"bvalue", 1000}, {"directions", 20}}}}, {"b0_volumes", 2}}},
             {"model",
              {{"encoder_width", 4},
               {"encoder_branches", {2, 2, 2}},
               {"convlstm_hidden_channels", 4},
               {"decoder_width", 4},
               {"decoder_branches", {2, 2, 2}},
               {"tail_width", 4},
               {"patch_size", 5}}},
             {"train", {{"epochs", 2}, {"q_in", 3}, {"q_out", 4}, {"batch_size", 4}}},
             {"eval", {{"q_in", 6}}}};
    std::ofstream(root / "config.json") << cfg.dump(2);
  }

  static void TearDownTestSuite() { fs::remove_all(root); }

  static RunResult run(const std::string& args) {
    static int counter = 0;
    const auto out = root / ("stdout" + std::to_string(counter));
    const auto err = root / ("stderr" + std::to_string(counter++));
    const std::string cmd = std::string(QSR_CLI_PATH) + " " + args + " >" + out.string() + " 2>" + err.string();
    const int status = std::system(cmd.c_str());
    RunResult r;
    r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    r.out = slurp(out);
    r.err = slurp(err);
    return r;
  }

  static std::string cfg() { return "--config " + (root / "config.json").string(); }
  static std::string p(const std::string& rel) { return (root / rel).string(); }

  // phantom -> preprocess for one seed, once per suite.
  static void ensure_bundle(int seed) {
    const std::string tag = std::to_string(seed);
    if (fs::exists(root / ("bundle" + tag) / "bundle.json")) return;
    ASSERT_EQ(run("phantom " + cfg() + " --seed " + tag + " --out " + p("ph" + tag)).code, 0);
    const auto r = run("preprocess " + cfg() + " --data " + p("ph" + tag) + " --out " + p("bundle" + tag));
    ASSERT_EQ(r.code, 0) << r.err;
  }

  // Asserts that stderr is exactly one JSON error line with the given code.
  static void expect_error(const RunResult& r, int code, const std::string& kind) {
    EXPECT_EQ(r.code, code) << r.err;
    ASSERT_FALSE(r.err.empty());
    EXPECT_EQ(r.err.find('\n'), r.err.size() - 1) << r.err;
    const auto j = json::parse(r.err);
    EXPECT_EQ(j.at("error"), kind);
    EXPECT_EQ(j.at("exit_code"), code);
    EXPECT_FALSE(j.at("message").get<std::string>().empty());
  }
};

fs::path Cli::root;

TEST_F(Cli, HelpListsEverySubcommandFlag) {
  const std::map<std::string, std::vector<std::string>> flags{
      {"phantom", {"--config", "--threads", "--out", "--seed"}},
      {"preprocess", {"--data", "--mask", "--no-denoise", "--out"}},
      {"train", {"--train", "--val", "--variant", "--qin", "--qout", "--shell", "--seed", "--epochs", "--out"}},
      {"infer", {"--checkpoint", "--data", "--qin", "--qout", "--shell", "--seed", "--out"}},
      {"baseline-sh", {"--data", "--lmax", "--qin", "--qout", "--shell", "--seed", "--out"}},
      {"eval", {"--split", "--truth", "--pred", "--mask", "--wm", "--gm", "--data", "--out"}},
      {"describe", {"--variant", "--checkpoint"}},
      {"config", {"--defaults"}}};
  const auto top = run("--help");
  EXPECT_EQ(top.code, 0);
  EXPECT_NE(top.out.find("Exit codes"), std::string::npos);
  for (const auto& [sub, list] : flags) {
    EXPECT_NE(top.out.find(sub), std::string::npos) << sub;
    const auto r = run(sub + " --help");
    EXPECT_EQ(r.code, 0);
    for (const auto& f : list) EXPECT_NE(r.out.find(f), std::string::npos) << sub << " " << f;
  }
}

TEST_F(Cli, ErrorsAreSingleJsonLinesWithDistinctCodes) {
  expect_error(run("train --bogus"), 2, "usage");
  expect_error(run(""), 2, "usage");
  expect_error(run("infer --checkpoint " + p("missing.ckpt") + " --data " + p("nowhere")), 4, "io");
  std::ofstream(root / "bad.json") << R"({"model": {"widht": 3}})";
  expect_error(run("config --config " + p("bad.json")), 3, "config");
  std::ofstream(root / "broken.json") << "{not json";
  expect_error(run("config --config " + p("broken.json")), 3, "config");
  expect_error(run("train " + cfg() + " --out " + p("t0")), 3, "config");  // no training data
  std::ofstream(root / "garbage.ckpt") << "not a checkpoint";
  expect_error(run("describe --checkpoint " + p("garbage.ckpt")), 9, "checkpoint");
}

TEST_F(Cli, ConfigDefaultsAndOverrides) {
  const auto d = run("config --defaults");
  ASSERT_EQ(d.code, 0) << d.err;
  const auto j = json::parse(d.out);
  EXPECT_EQ(j.at("model").at("variant"), "rcnn3d");
  EXPECT_EQ(j.at("data").at("divisors").at("1000"), 4000.0);
  const auto o = run("config " + cfg() + " --threads 1");
  ASSERT_EQ(o.code, 0) << o.err;
  const auto k = json::parse(o.out);
  EXPECT_EQ(k.at("model").at("encoder_width"), 4);
  EXPECT_EQ(k.at("threads"), 1);
}

TEST_F(Cli, DescribeMatchesLibrary) {
  const auto r = run("describe " + cfg() + " --variant rcnn1d");
  ASSERT_EQ(r.code, 0) << r.err;
  ModelConfig mc;
  mc.variant = Variant::rcnn1d;
  mc.encoder_width = mc.convlstm_hidden_channels = mc.decoder_width = mc.tail_width = 4;
  mc.encoder_branches = mc.decoder_branches = {2, 2, 2};
  mc.patch_size = 5;
  EXPECT_NE(r.out.find("total parameters " + std::to_string(Model<float>(mc).parameter_count())), std::string::npos)
      << r.out;
}

TEST_F(Cli, PhantomWritesAllArtifacts) {
  ensure_bundle(1);
  for (const char* f : {"dwi.nii", "clean.nii", "mask.nii", "wm.nii", "gm.nii", "bvecs", "bvals", "phantom.json"})
    EXPECT_TRUE(fs::exists(root / "ph1" / f)) << f;
  const auto v = load_volume(p("ph1/dwi.nii"));
  EXPECT_EQ(v.dims, (std::array<std::size_t, 4>{10, 10, 10, 22}));
  const auto j = json::parse(slurp(root / "bundle1" / "bundle.json"));
  EXPECT_TRUE(j.at("denoised").get<bool>());
}

TEST_F(Cli, TrainIsDeterministicAndInferWritesRawScale) {
  ensure_bundle(1);
  ensure_bundle(2);
  const std::string common = "train " + cfg() + " --train " + p("bundle1") + " --val " + p("bundle2") + " --seed 3";
  ASSERT_EQ(run(common + " --out " + p("runA")).code, 0);
  const auto b = run(common + " --out " + p("runB") + " --threads 1");
  ASSERT_EQ(b.code, 0) << b.err;
  const auto a_ckpt = slurp(root / "runA" / "best.ckpt");
  ASSERT_FALSE(a_ckpt.empty());
  EXPECT_EQ(a_ckpt, slurp(root / "runB" / "best.ckpt"));
  EXPECT_EQ(slurp(root / "runA" / "history.jsonl"), slurp(root / "runB" / "history.jsonl"));
  std::istringstream hist(slurp(root / "runA" / "history.jsonl"));
  std::string line;
  std::size_t lines = 0;
  while (std::getline(hist, line)) {
    const auto h = json::parse(line);
    EXPECT_EQ(h.at("epoch"), ++lines);
    EXPECT_TRUE(h.at("val_loss").is_number());
  }
  EXPECT_EQ(lines, 2u);
  EXPECT_EQ(json::parse(slurp(root / "runA" / "run_config.json")).at("train").at("data_seed"), 3);

  const auto r = run("infer " + cfg() + " --checkpoint " + p("runA/best.ckpt") + " --data " + p("bundle2") +
                     " --qin 6 --qout 5 --seed 9 --out " + p("inf"));
  ASSERT_EQ(r.code, 0) << r.err;
  const auto pred = load_volume(p("inf/pred.nii"));
  EXPECT_EQ(pred.dims, (std::array<std::size_t, 4>{10, 10, 10, 5}));
  const auto split = json::parse(slurp(root / "inf" / "split.json"));
  EXPECT_EQ(split.at("q_in"), 6);
  EXPECT_EQ(split.at("target_volumes").size(), 5u);
  EXPECT_EQ(split.at("b0_volumes"), (std::vector<int>{0, 1}));

  // Same computation through the library, rescaled to raw units.
  auto model = Model<float>::from_checkpoint(ad::deserialize_checkpoint(a_ckpt));
  const auto dataset = load_dataset(p("bundle2/signal.nii"), p("bundle2/bvecs"), p("bundle2/bvals"), p("bundle2/mask.nii"));
  const auto es = evaluation_split(dataset.shell(1000), 6, 9, 5);
  const auto lib = infer(model, make_patch_set(dataset, 1000, 5), es, 4000.0);
  const auto tmp = p("lib_pred.nii");
  save_volume(lib, tmp);
  EXPECT_EQ(slurp(tmp), slurp(root / "inf" / "pred.nii"));
}

TEST_F(Cli, BaselineShIsByteIdenticalToLibrary) {
  ensure_bundle(1);
  const auto r = run("baseline-sh " + cfg() + " --data " + p("bundle1") + " --qin 8 --lmax 2 --seed 4 --out " + p("sh"));
  ASSERT_EQ(r.code, 0) << r.err;
  const auto d = load_dataset(p("bundle1/signal.nii"), p("bundle1/bvecs"), p("bundle1/bvals"), p("bundle1/mask.nii"));
  const auto split = evaluation_split(d.shell(1000), 8, 4);
  auto lib = sh_interpolate_volume(d.shell_signal(1000), d.shell(1000), split, 2);
  for (auto& v : lib.data) v *= 4000.0;
  save_volume(lib, p("lib_sh.nii"));
  EXPECT_EQ(slurp(root / "lib_sh.nii"), slurp(root / "sh" / "sh.nii"));
  EXPECT_EQ(json::parse(slurp(root / "sh" / "split.json")).at("q_out"), 12);
}

TEST_F(Cli, EvalOfTruthAgainstItselfIsPerfect) {
  ensure_bundle(1);
  ASSERT_EQ(run("baseline-sh " + cfg() + " --data " + p("bundle1") + " --out " + p("sh6")).code, 0);
  const auto split = json::parse(slurp(root / "sh6" / "split.json"));
  const auto clean = load_volume(p("ph1/clean.nii"));
  save_volume(clean.select(split.at("target_volumes").get<std::vector<std::size_t>>()), p("truth_targets.nii"));
  const auto r = run("eval --split " + p("sh6/split.json") + " --truth " + p("ph1/clean.nii") +
                     " --pred exact=" + p("truth_targets.nii") + " --pred sh=" + p("sh6/sh.nii") + " --mask " +
                     p("ph1/mask.nii") + " --wm " + p("ph1/wm.nii") + " --gm " + p("ph1/gm.nii") + " --data " +
                     p("bundle1") + " --out " + p("ev"));
  ASSERT_EQ(r.code, 0) << r.err;
  const auto rep = json::parse(slurp(root / "ev" / "report.json"));
  EXPECT_EQ(rep.at("exact").at("rmse").at("mean"), 0.0);
  EXPECT_EQ(rep.at("exact").at("mssim").at("mean"), 1.0);
  EXPECT_GT(rep.at("sh").at("rmse").at("mean").get<double>(), 0.0);
  EXPECT_TRUE(rep.at("sh").contains("fa"));
  EXPECT_TRUE(rep.at("sh").contains("wm_rmse"));
  const auto table = slurp(root / "ev" / "table.txt");
  EXPECT_NE(table.find("exact"), std::string::npos);
  EXPECT_NE(table.find("FA AE WM"), std::string::npos);

  // Truth holding only the target volumes is accepted as is.
  const auto t = run("eval --split " + p("sh6/split.json") + " --truth " + p("truth_targets.nii") + " --pred sh=" +
                     p("sh6/sh.nii") + " --mask " + p("ph1/mask.nii") + " --out " + p("ev2"));
  ASSERT_EQ(t.code, 0) << t.err;
  EXPECT_EQ(json::parse(slurp(root / "ev2" / "report.json")).at("sh").at("rmse"), rep.at("sh").at("rmse"));

  expect_error(run("eval --split " + p("sh6/split.json") + " --truth " + p("ph1/clean.nii") + " --pred bad" +
                   " --mask " + p("ph1/mask.nii") + " --out " + p("ev3")),
               3, "config");
}

}  // namespace
