#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cstdio>
#include <fstream>
#include <sstream>

#include "roadseg/commands.hpp"
#include "synthetic.hpp"

using namespace roadseg;
namespace fs = std::filesystem;

namespace {

struct RunResult {
  int code;
  std::string output;
};

RunResult run_cli(const std::string& args) {
  const std::string cmd = std::string(ROADSEG_CLI_PATH) + " " + args + " 2>&1";
  FILE* pipe = ::popen(cmd.c_str(), "r");
  if (!pipe) return {-1, "popen failed"};
  std::string out;
  char buf[4096];
  while (const auto n = std::fread(buf, 1, sizeof buf, pipe)) out.append(buf, n);
  const int status = ::pclose(pipe);
  return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, out};
}

std::string q(const fs::path& p) { return "'" + p.string() + "'"; }

RunConfig parse(const std::string& text) {
  std::istringstream in(text);
  return parse_config(in);
}

void write_gray(const fs::path& p, int h, int w, std::vector<std::uint8_t> px) {
  Image img(h, w, 1);
  img.pixels = std::move(px);
  write_image(p, img);
}

std::string reduced_config(const fs::path& dataset, const fs::path& out) {
  return "# tiny run\n"
         "dataset_dir = " + dataset.string() + "\n"
         "output_dir = " + out.string() + "\n"
         "stage_depths = 1,1,1,1\n"
         "stage_channels = 8, 16, 32, 64\n"
         "stem_channels = 32\n"
         "lr0 = 1e-3\n"
         "batch_size = 2\n"
         "max_iterations = 4\n"
         "eval_every = 2\n"
         "augment = false\n"
         "seed = 3\n";
}

} // namespace

TEST(Config, ParsesKeysCommentsAndAliases) {
  const auto c = parse("dataset_dir = data  # trailing comment\n"
                       "\n"
                       "lr0 = 0.002\n"
                       "stage_channels = 8,16,32,64\n"
                       "augment = off\n"
                       "eval_set = train\n"
                       "alpha = 0.5\n"
                       "crop_size = 64\n"
                       "tta = no\n");
  EXPECT_EQ(c.dataset_dir, "data");
  EXPECT_EQ(c.train.lr0, 0.002);
  EXPECT_EQ(c.model.stage_channels, (std::array<int, 4>{8, 16, 32, 64}));
  EXPECT_FALSE(c.train.augment_enabled);
  EXPECT_EQ(c.train.eval_set, EvalSet::train);
  EXPECT_EQ(c.train.loss.alpha, 0.5);
  EXPECT_EQ(c.train.augment.crop_size, 64);
  EXPECT_FALSE(c.tta.enabled);
}

TEST(Config, DefaultsMatchTheRecipe) {
  const RunConfig c;
  EXPECT_EQ(c.train.loss.alpha, 0.7);
  EXPECT_EQ(c.train.lr0, 1e-4);
  EXPECT_EQ(c.train.decay, 1e-4);
  EXPECT_EQ(c.train.batch_size, 8);
  EXPECT_EQ(c.train.max_iterations, 20000);
  EXPECT_EQ(c.train.augment.crop_size, 448);
  EXPECT_EQ(c.model.dropout_p, 0.3);
  EXPECT_EQ(c.mask_threshold, 128);
  EXPECT_EQ(c.holdout_fraction, 0.25);
  EXPECT_EQ(c.tta.threshold, 0.5);
}

TEST(Config, UnknownKeySuggestsClosest) {
  try {
    parse("lr0 = 1e-3\nlearningrate = 0.1\n");
    FAIL();
  } catch (const ConfigError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find(":2:"), std::string::npos) << msg;
    EXPECT_NE(msg.find("'learningrate'"), std::string::npos) << msg;
    EXPECT_NE(msg.find("did you mean 'lr0'"), std::string::npos) << msg;
  }
  EXPECT_EQ(suggest_key("batchsize"), "batch_size");
  EXPECT_EQ(suggest_key("learning_rate"), "lr0");
  EXPECT_EQ(suggest_key("max_iteration"), "max_iterations");
}

TEST(Config, BadValuesAreConfigErrors) {
  EXPECT_THROW(parse("lr0 = fast\n"), ConfigError);
  EXPECT_THROW(parse("batch_size = 2.5\n"), ConfigError);
  EXPECT_THROW(parse("stage_channels = 8,16,32\n"), ConfigError);
  EXPECT_THROW(parse("augment = maybe\n"), ConfigError);
  EXPECT_THROW(parse("eval_set = test\n"), ConfigError);
  EXPECT_THROW(parse("just a line\n"), ConfigError);
  RunConfig c;
  EXPECT_THROW(apply_override(c, "lr0"), ConfigError);
  apply_override(c, "batch_size=3");
  EXPECT_EQ(c.train.batch_size, 3);
}

TEST(Config, RelativePathsFollowTheConfigFile) {
  testkit::TempDir dir("cfg");
  std::ofstream(dir.path() / "run.cfg") << "dataset_dir = data\noutput_dir = /abs/out\n";
  const auto c = load_config(dir.path() / "run.cfg");
  EXPECT_EQ(c.dataset_dir, dir.path() / "data");
  EXPECT_EQ(c.output_dir, "/abs/out");
  EXPECT_THROW(load_config(dir.path() / "missing.cfg"), ConfigError);
}

TEST(Cli, UsageErrorsExitTwo) {
  EXPECT_EQ(run_cli("").code, 2);
  EXPECT_EQ(run_cli("frobnicate").code, 2);
  EXPECT_EQ(run_cli("eval onlyone").code, 2);
  EXPECT_EQ(run_cli("--help").code, 0);
}

TEST(Cli, TrainConfigFailures) {
  testkit::TempDir dir("cli_cfg");
  const auto cfg = dir.path() / "run.cfg";
  std::ofstream(cfg) << "dataset_dir = nowhere\n";
  auto r = run_cli("train " + q(cfg));
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.output.find((dir.path() / "nowhere").string()), std::string::npos) << r.output;

  std::ofstream(cfg) << "dataset_dir = nowhere\nlearningrate = 0.1\n";
  r = run_cli("train " + q(cfg));
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.output.find("lr0"), std::string::npos) << r.output;

  fs::create_directories(dir.path() / "data");
  std::ofstream(cfg) << "dataset_dir = data\n";
  EXPECT_EQ(run_cli("train " + q(cfg) + " --set bogus=1").code, 2);
  EXPECT_EQ(run_cli("train " + q(cfg) + " --set eval_every=30000").code, 2);
  r = run_cli("train " + q(cfg));
  EXPECT_EQ(r.code, 4) << r.output;
}

TEST(Cli, TrainPredictEvalRoundTrip) {
  testkit::TempDir dir("cli_run");
  const auto pairs = testkit::synthetic_roads(31, 8, 32);
  testkit::write_dataset(pairs, dir.path() / "data");
  std::ofstream(dir.path() / "run.cfg") << reduced_config("data", "out");

  auto r = run_cli("--workers 2 train " + q(dir.path() / "run.cfg"));
  ASSERT_EQ(r.code, 0) << r.output;
  const auto out = dir.path() / "out";
  EXPECT_TRUE(fs::exists(out / "split.txt"));
  EXPECT_TRUE(fs::exists(out / "train.log"));
  ASSERT_TRUE(fs::exists(out / "best.rseg"));
  const auto split = read_split_manifest(out / "split.txt");
  EXPECT_EQ(split.train_ids.size(), 6u);
  EXPECT_EQ(split.holdout_ids.size(), 2u);

  fs::create_directories(dir.path() / "tiles");
  for (int i = 0; i < 3; ++i) write_image(dir.path() / "tiles" / ("t" + std::to_string(i) + ".png"), pairs[static_cast<std::size_t>(i)].image);
  std::ofstream(dir.path() / "tiles" / "readme.txt") << "skip me";
  r = run_cli("predict --overlay " + q(out / "best.rseg") + " " + q(dir.path() / "tiles") + " " + q(dir.path() / "pred"));
  ASSERT_EQ(r.code, 0) << r.output;
  for (int i = 0; i < 3; ++i) {
    const auto m = read_image(dir.path() / "pred" / ("t" + std::to_string(i) + ".png"));
    EXPECT_EQ(m.channels, 1);
    EXPECT_EQ(m.height, 32);
    for (auto v : m.pixels) ASSERT_TRUE(v == 0 || v == 255);
    EXPECT_TRUE(fs::exists(dir.path() / "pred" / ("t" + std::to_string(i) + "_overlay.png")));
  }

  fs::create_directories(dir.path() / "gt");
  for (int i = 0; i < 3; ++i) write_mask(pairs[static_cast<std::size_t>(i)].mask, dir.path() / "gt" / ("t" + std::to_string(i) + ".png"));
  r = run_cli("eval " + q(dir.path() / "pred") + " " + q(dir.path() / "gt"));
  EXPECT_EQ(r.code, 4) << "overlays have no ground-truth partner";
  EXPECT_NE(r.output.find("t0_overlay.png"), std::string::npos) << r.output;
  for (int i = 0; i < 3; ++i) fs::remove(dir.path() / "pred" / ("t" + std::to_string(i) + "_overlay.png"));
  r = run_cli("eval " + q(dir.path() / "pred") + " " + q(dir.path() / "gt"));
  EXPECT_EQ(r.code, 0) << r.output;
  EXPECT_NE(r.output.find("t2 iou="), std::string::npos) << r.output;
  EXPECT_NE(r.output.find("mean_iou="), std::string::npos) << r.output;
  r = run_cli("eval " + q(dir.path() / "gt") + " " + q(dir.path() / "gt"));
  EXPECT_EQ(r.code, 0) << r.output;
  EXPECT_NE(r.output.find("mean_iou=1.0000"), std::string::npos) << r.output;
}

TEST(Cli, PredictTtaOnEquivariantCheckpoint) {
  testkit::TempDir dir("cli_tta");
  // all-zero weights: every pixel gets sigmoid(0), whatever the rotation
  Model<float> model(ModelConfig::reduced(), 1);
  for (const auto& p : model.parameters())
    for (auto& v : p.tensor.mutable_data()) v = 0.0f;
  save_checkpoint(model, {}, dir.path() / "zero.rseg");
  fs::create_directories(dir.path() / "in");
  Rng rng(2);
  for (int i = 0; i < 2; ++i) write_image(dir.path() / "in" / ("x" + std::to_string(i) + ".png"), testkit::synthetic_road(rng, 48, "x").image);
  const auto ck = q(dir.path() / "zero.rseg"), in = q(dir.path() / "in");
  ASSERT_EQ(run_cli("predict --tta " + ck + " " + in + " " + q(dir.path() / "a")).code, 0);
  ASSERT_EQ(run_cli("predict --no-tta " + ck + " " + in + " " + q(dir.path() / "b")).code, 0);
  for (int i = 0; i < 2; ++i) {
    const auto name = "x" + std::to_string(i) + ".png";
    EXPECT_EQ(read_image(dir.path() / "a" / name), read_image(dir.path() / "b" / name));
  }
  EXPECT_EQ(run_cli("predict --threshold 1.5 " + ck + " " + in + " " + q(dir.path() / "c")).code, 2);
}

TEST(Cli, PredictFailures) {
  testkit::TempDir dir("cli_pf");
  Model<float> model(ModelConfig::reduced(), 1);
  save_checkpoint(model, {}, dir.path() / "ok.rseg");
  fs::create_directories(dir.path() / "empty");
  EXPECT_EQ(run_cli("predict " + q(dir.path() / "ok.rseg") + " " + q(dir.path() / "empty") + " " + q(dir.path() / "o")).code, 4);

  auto bytes = encode_checkpoint(model, {});
  bytes.resize(bytes.size() - 100);
  std::ofstream(dir.path() / "bad.rseg", std::ios::binary).write(reinterpret_cast<const char*>(bytes.data()),
                                                                 static_cast<std::streamsize>(bytes.size()));
  fs::create_directories(dir.path() / "in");
  write_image(dir.path() / "in" / "a.png", Image(32, 32, 3, 90));
  EXPECT_EQ(run_cli("predict " + q(dir.path() / "bad.rseg") + " " + q(dir.path() / "in") + " " + q(dir.path() / "o")).code, 2);

  std::ofstream(dir.path() / "in" / "broken.png") << "garbage";
  auto r = run_cli("predict " + q(dir.path() / "ok.rseg") + " " + q(dir.path() / "in") + " " + q(dir.path() / "o"));
  EXPECT_EQ(r.code, 0);
  EXPECT_NE(r.output.find("warning: skipping"), std::string::npos) << r.output;
  fs::remove(dir.path() / "in" / "a.png");
  EXPECT_EQ(run_cli("predict " + q(dir.path() / "ok.rseg") + " " + q(dir.path() / "in") + " " + q(dir.path() / "o")).code, 4);
}

TEST(Cli, EvalExamples) {
  testkit::TempDir dir("cli_eval");
  for (const auto* d : {"p", "g", "black", "white"}) fs::create_directories(dir.path() / d);
  write_gray(dir.path() / "p" / "a.png", 2, 2, {255, 255, 0, 0});
  write_gray(dir.path() / "g" / "a.png", 2, 2, {0, 200, 0, 128});
  auto r = run_cli("eval " + q(dir.path() / "p") + " " + q(dir.path() / "g"));
  EXPECT_EQ(r.code, 0);
  EXPECT_NE(r.output.find("a iou=0.3333"), std::string::npos) << r.output;
  EXPECT_NE(r.output.find("mean_iou=0.3333"), std::string::npos) << r.output;

  write_gray(dir.path() / "black" / "m.png", 4, 4, std::vector<std::uint8_t>(16, 0));
  write_gray(dir.path() / "white" / "m.png", 4, 4, std::vector<std::uint8_t>(16, 255));
  r = run_cli("eval " + q(dir.path() / "black") + " " + q(dir.path() / "white"));
  EXPECT_EQ(r.code, 0);
  EXPECT_NE(r.output.find("mean_iou=0.0000"), std::string::npos) << r.output;

  write_gray(dir.path() / "g" / "extra.png", 2, 2, {0, 0, 0, 0});
  r = run_cli("eval " + q(dir.path() / "p") + " " + q(dir.path() / "g"));
  EXPECT_EQ(r.code, 4);
  EXPECT_NE(r.output.find("extra.png"), std::string::npos) << r.output;
  EXPECT_EQ(run_cli("eval " + q(dir.path() / "p") + " " + q(dir.path() / "nope")).code, 4);
}

TEST(Cli, SelfCheck) {
  auto r = run_cli("selfcheck");
  EXPECT_EQ(r.code, 0) << r.output;
  EXPECT_NE(r.output.find("self-check passed"), std::string::npos);
  for (const auto& op : gradient_suite_ops()) {
    std::size_t count = 0;
    for (auto pos = r.output.find("grad " + op + " "); pos != std::string::npos;
         pos = r.output.find("grad " + op + " ", pos + 1))
      ++count;
    EXPECT_EQ(count, 1u) << op;
  }
  r = run_cli("selfcheck --break-op conv2d");
  EXPECT_EQ(r.code, 5);
  EXPECT_NE(r.output.find("self-check failed: conv2d"), std::string::npos) << r.output;
  EXPECT_EQ(run_cli("selfcheck --break-op nonsense").code, 2);
}
