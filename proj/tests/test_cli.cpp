#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <map>
#include <sstream>

#include "preprl/cli.hpp"

using namespace preprl;
namespace fs = std::filesystem;

namespace {

struct Invocation {
  int code = -1;
  std::string out, err;
};

Invocation invoke(std::vector<std::string> args) {
  args.insert(args.begin(), "prep_rl");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  Invocation r;
  r.code = cli::main_entry(static_cast<int>(argv.size()), argv.data(), out, err);
  r.out = out.str();
  r.err = err.str();
  return r;
}

cli::CliConfig parse(std::vector<std::string> args) {
  args.insert(args.begin(), "prep_rl");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  return cli::parse_args(static_cast<int>(argv.size()), argv.data());
}

const std::vector<std::string> kTiny = {
    "--set", "data.train_per_class=30", "--set", "data.val_per_class=10",
    "--set", "data.test_per_class=10",  "--set", "nn.epochs=1",
    "--set", "cl.epochs=1",             "--set", "rl.steps=200",
    "--set", "rl.eval_every=100",       "--set", "experiment.threads=1",
    "--quiet"};

std::vector<std::string> with(std::vector<std::string> head,
                              const std::vector<std::string>& tail = kTiny) {
  head.insert(head.end(), tail.begin(), tail.end());
  return head;
}

class CliTest : public ::testing::Test {
 protected:
  void SetUp() override {
    root_ = fs::temp_directory_path() /
            ("preprl_cli_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::remove_all(root_);
    fs::create_directories(root_);
  }
  void TearDown() override { fs::remove_all(root_); }

  // The single run directory created under `base`.
  fs::path only_run(const fs::path& base) {
    std::vector<fs::path> dirs;
    for (const auto& e : fs::directory_iterator(base)) dirs.push_back(e.path());
    EXPECT_EQ(dirs.size(), 1u) << base;
    return dirs.empty() ? fs::path() : dirs.front();
  }

  fs::path root_;
};

}  // namespace

TEST(ParseArgs, OverridesAndCommand) {
  const auto c = parse({"train-rl", "--config", __FILE__, "--set", "agent.gamma=0.95"});
  EXPECT_EQ(c.command, "train-rl");
  EXPECT_EQ(c.config_path, __FILE__);
  EXPECT_EQ(c.overrides, (std::vector<std::string>{"agent.gamma=0.95"}));
}

TEST(ParseArgs, EvalBindsCheckpoint) {
  const auto c = parse({"eval", "--checkpoint", "m.bin", "--data", "test"});
  EXPECT_EQ(c.command, "eval");
  EXPECT_EQ(c.checkpoint, "m.bin");
  EXPECT_EQ(c.split(), "test");
  EXPECT_EQ(parse({"trace", "--checkpoint", "m.bin"}).split(), "distorted");
  const auto g = parse({"--seed", "4", "--runs", "2", "robustness", "--out", "x"});
  EXPECT_EQ(g.seed, 4u);
  EXPECT_EQ(g.runs, 2u);
  EXPECT_EQ(g.out_dir, "x");
}

TEST(ParseArgs, UsageErrorsExitWithTwo) {
  const auto bogus = invoke({"bogus"});
  EXPECT_EQ(bogus.code, 2);
  EXPECT_NE(bogus.err.find("unknown command"), std::string::npos);
  EXPECT_NE(bogus.err.find("Usage"), std::string::npos) << bogus.err;
  EXPECT_EQ(invoke({}).code, 2);
  EXPECT_EQ(invoke({"eval"}).code, 2);
  EXPECT_EQ(invoke({"train-nn", "--frobnicate"}).code, 2);
  EXPECT_EQ(invoke({"train-nn", "--config", "/nonexistent/exp.cfg"}).code, 2);
  EXPECT_EQ(invoke({"eval", "--checkpoint", "m", "--data", "nope"}).code, 2);
  EXPECT_EQ(invoke({"--help"}).code, 0);
}

TEST(Config, TextRoundTripAndErrors) {
  ExperimentConfig cfg;
  apply_config_text(cfg, "agent.gamma = 0.95  # discount\n\ndata.glyphs = orbit:f_shape\n");
  EXPECT_EQ(cfg.rl.dqn.gamma, 0.95);
  EXPECT_EQ(cfg.data.glyphs.size(), 8u);
  const auto text = dump_config(cfg);
  EXPECT_NE(text.find("agent.gamma = 0.95\n"), std::string::npos);
  EXPECT_EQ(dump_config(parse_config_text(text)), text);
  try {
    parse_config_text("nn.epochs = 2\nnn.bogus = 1\n", "exp.cfg");
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("exp.cfg:2"), std::string::npos) << e.what();
  }
  EXPECT_THROW(parse_config_text("nn.epochs = -1"), ConfigError);
  EXPECT_THROW(parse_config_text("nn.epochs = two"), ConfigError);
  EXPECT_THROW(parse_config_text("model.arch = arch9"), ConfigError);
  EXPECT_THROW(parse_config_text("just words"), ConfigError);
}

TEST(Config, ShippedExperimentFileParses) {
  const fs::path file = fs::path(PREPRL_SOURCE_DIR) / "configs" / "coarse_glyphs.cfg";
  ExperimentConfig cfg;
  apply_config_text(cfg, detail::read_file(file.string()), file.string());
  EXPECT_NO_THROW(cfg.validate());
  EXPECT_EQ(cfg.data.glyphs.size(), 8u);
  EXPECT_EQ(cfg.runs, 3u);
}

TEST_F(CliTest, ConfigValidationExitsWithTwo) {
  const auto bad = invoke({"train-rl", "--out", root_.string(), "--set", "agent.gamma=1.5"});
  EXPECT_EQ(bad.code, 2);
  EXPECT_NE(bad.err.find("gamma"), std::string::npos) << bad.err;
  EXPECT_EQ(invoke({"train-nn", "--out", root_.string(), "--set", "nope.key=1"}).code, 2);
  EXPECT_TRUE(fs::is_empty(root_));
}

TEST_F(CliTest, GenDataIsDeterministicAndReproducibleFromSavedConfig) {
  const auto a = invoke(with({"gen-data", "--out", (root_ / "a").string(), "--seed", "7",
                              "--set", "data.seed=7"}));
  ASSERT_EQ(a.code, 0) << a.err;
  const auto b = invoke(with({"gen-data", "--out", (root_ / "b").string(), "--seed", "7",
                              "--set", "data.seed=7"}));
  ASSERT_EQ(b.code, 0) << b.err;
  const auto da = only_run(root_ / "a"), db = only_run(root_ / "b");
  EXPECT_EQ(da.filename().string().rfind("gen-data-", 0), 0u);
  for (const char* f : {"train-images-idx3-ubyte", "train-labels-idx1-ubyte",
                        "val-images-idx3-ubyte", "t10k-images-idx3-ubyte"}) {
    EXPECT_EQ(detail::read_file((da / f).string()), detail::read_file((db / f).string())) << f;
  }
  // the saved effective config reproduces the outputs on its own
  const auto c = invoke({"gen-data", "--out", (root_ / "c").string(), "--config",
                         (da / "config.cfg").string(), "--quiet"});
  ASSERT_EQ(c.code, 0) << c.err;
  const auto dc = only_run(root_ / "c");
  EXPECT_EQ(detail::read_file((dc / "t10k-images-idx3-ubyte").string()),
            detail::read_file((da / "t10k-images-idx3-ubyte").string()));
  EXPECT_NE(detail::read_file((da / "run.log").string()).find("effective config"),
            std::string::npos);
}

TEST_F(CliTest, GeneratedIdxFeedsTheIdxSource) {
  ASSERT_EQ(invoke(with({"gen-data", "--out", (root_ / "g").string()})).code, 0);
  const auto dir = only_run(root_ / "g");
  const auto r = invoke(with({"train-nn", "--out", (root_ / "n").string(), "--set",
                              "data.source=idx", "--set", "data.dir=" + dir.string()}));
  EXPECT_EQ(r.code, 0) << r.err;
  EXPECT_TRUE(fs::exists(only_run(root_ / "n") / "nn.ckpt"));
}

TEST_F(CliTest, TrainEvalTraceChain) {
  const auto nn = invoke(with({"train-nn", "--out", (root_ / "nn").string()}));
  ASSERT_EQ(nn.code, 0) << nn.err;
  const auto nn_ckpt = only_run(root_ / "nn") / "nn.ckpt";
  ASSERT_TRUE(fs::exists(nn_ckpt));

  const auto ev = invoke(with({"eval", "--out", (root_ / "ev").string(), "--checkpoint",
                               nn_ckpt.string(), "--data", "test"}));
  ASSERT_EQ(ev.code, 0) << ev.err;
  const auto ej = json::parse(detail::read_file((only_run(root_ / "ev") / "eval.json").string()));
  EXPECT_EQ(ej.at("kind"), "nn");
  EXPECT_EQ(ej.at("images"), 20);

  const auto rl = invoke(with({"train-rl", "--out", (root_ / "rl").string()}));
  ASSERT_EQ(rl.code, 0) << rl.err;
  const auto rl_ckpt = only_run(root_ / "rl") / "rl.ckpt";

  const auto tr = invoke(with({"trace", "--out", (root_ / "tr").string(), "--checkpoint",
                               rl_ckpt.string(), "--count", "10"}));
  ASSERT_EQ(tr.code, 0) << tr.err;
  const auto rows = read_jsonl((only_run(root_ / "tr") / "traces.jsonl").string());
  ASSERT_EQ(rows.size(), 10u);
  for (const auto& row : rows) {
    for (const char* key : {"image_id", "true_label", "steps", "predicted", "q_values"})
      EXPECT_TRUE(row.contains(key)) << key;
    const auto t = trace_from_json<float>(row);
    EXPECT_EQ(t.steps.back(), "stop(" + std::to_string(t.predicted) + ")");
    EXPECT_EQ(t.q_values.size(), t.steps.size());
  }

  const auto cl = invoke(with({"train-cl", "--out", (root_ / "cl").string(), "--checkpoint",
                               rl_ckpt.string()}));
  ASSERT_EQ(cl.code, 0) << cl.err;
  EXPECT_TRUE(fs::exists(only_run(root_ / "cl") / "cl.ckpt"));

  // a classifier checkpoint cannot drive train-cl
  EXPECT_EQ(invoke(with({"train-cl", "--out", (root_ / "x").string(), "--checkpoint",
                         nn_ckpt.string()}))
                .code,
            2);
}

TEST_F(CliTest, RuntimeFailureExitsWithOneAndNamesStage) {
  const auto r = invoke(with({"eval", "--out", root_.string(), "--checkpoint",
                              (root_ / "missing.ckpt").string()}));
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("load-checkpoint"), std::string::npos) << r.err;
}

TEST_F(CliTest, OutputDirectoryFromEnvironment) {
  ::setenv("PREP_RL_OUT", (root_ / "env").string().c_str(), 1);
  const auto r = invoke(with({"gen-data"}));
  ::unsetenv("PREP_RL_OUT");
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_TRUE(fs::exists(only_run(root_ / "env") / "config.cfg"));
}

TEST_F(CliTest, RobustnessThenReportRecount) {
  const auto r = invoke(with({"robustness", "--out", (root_ / "r").string(), "--runs", "2",
                              "--set", "experiment.trace_count=5"}));
  ASSERT_EQ(r.code, 0) << r.err;
  const auto dir = only_run(root_ / "r");
  const auto runs = read_jsonl((dir / "runs.jsonl").string());
  ASSERT_EQ(runs.size(), 12u);
  EXPECT_EQ(read_jsonl((dir / "traces.jsonl").string()).size(), 5u);
  const std::string table = detail::read_file((dir / "report.txt").string());
  EXPECT_NE(r.out.find(table), std::string::npos);

  fs::remove(dir / "report.txt");
  fs::remove(dir / "metrics.jsonl");
  const auto rep = invoke({"report", "--run-dir", dir.string()});
  ASSERT_EQ(rep.code, 0) << rep.err;
  EXPECT_EQ(detail::read_file((dir / "report.txt").string()), table);

  // independent recount of every cell from the per-run records
  std::map<std::string, std::vector<double>> acc;
  for (const auto& row : runs)
    acc[row.at("model").get<std::string>() + "/" + row.at("condition").get<std::string>()]
        .push_back(row.at("accuracy").get<double>());
  const auto cells = read_jsonl((dir / "metrics.jsonl").string());
  ASSERT_EQ(cells.size(), 6u);
  for (const auto& c : cells) {
    const auto& v = acc.at(c.at("model").get<std::string>() + "/" +
                           c.at("condition").get<std::string>());
    ASSERT_EQ(v.size(), 2u);
    const double mean = (v[0] + v[1]) / 2;
    EXPECT_NEAR(c.at("mean").get<double>(), mean, 1e-12);
    EXPECT_NEAR(c.at("std").get<double>(), std::abs(v[0] - v[1]) / 2, 1e-12);
    EXPECT_EQ(c.at("arch"), "arch1");
  }

  EXPECT_EQ(invoke({"report", "--run-dir", (root_ / "nowhere").string()}).code, 1);
}
