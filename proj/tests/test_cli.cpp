#include <gtest/gtest.h>

#include <filesystem>
#include <sstream>

#include "cvdmp/cli.hpp"

using namespace cvdmp;
namespace fs = std::filesystem;

namespace {

struct CliRun {
  int code = -1;
  std::string out;
  std::string err;
};

CliRun run(std::vector<std::string> args, const std::vector<std::string>& extra = {}) {
  args.insert(args.begin(), "cvdmp");
  args.insert(args.end(), extra.begin(), extra.end());
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  CliRun r;
  r.code = run_cli(static_cast<int>(argv.size()), argv.data(), out, err);
  r.out = out.str();
  r.err = err.str();
  return r;
}

std::string first_line(const fs::path& p) {
  const std::string text = read_text_file(p);
  return text.substr(0, text.find('\n'));
}

class Cli : public ::testing::Test {
 protected:
  static fs::path root() { return fs::temp_directory_path() / "cvdmp_test_cli"; }
  static fs::path base() { return root() / "base"; }
  static fs::path config() { return root() / "small.json"; }

  static void SetUpTestSuite() {
    fs::remove_all(root());
    fs::create_directories(root());
    const json cfg = {
        {"tasks", {1, 3}},
        {"augment", {{"copies_per_demo", 3}}},
        {"train",
         {{"epochs", 2},
          {"batch_size", 4},
          {"architecture", {{"conv1_channels", 4}, {"conv2_channels", 4}, {"hidden1", 16}, {"hidden2", 16}}}}},
        {"finetune", {{"max_iters", 5}}},
        {"eval_handwriting", {{"endpoints", 2}, {"tradeoff", {{"max_iters", 5}}}}},
        {"eval_sim", {{"episodes", 2}}}};
    write_text_file(config(), cfg.dump(2));
    ASSERT_EQ(run({"augment", "--config", config().string(), "--out", base().string()}).code, 0);
    ASSERT_EQ(run({"train", "--config", config().string(), "--out", base().string()}).code, 0);
  }

  // fresh output directory per test, reusing the base dataset and checkpoint
  fs::path fresh(const std::string& name) const {
    const fs::path d = root() / name;
    fs::remove_all(d);
    return d;
  }
  std::vector<std::string> common(const fs::path& out) const {
    return {"--config", config().string(), "--out", out.string(), "--checkpoint",
            (base() / "model.ckpt").string(), "--single-thread"};
  }
};

}  // namespace

TEST_F(Cli, AugmentAndTrainWriteStampedArtifacts) {
  for (const char* f : {"dataset.csv", "model.ckpt", "loss_curve.csv"}) EXPECT_TRUE(fs::exists(base() / f)) << f;
  EXPECT_EQ(first_line(base() / "dataset.csv").rfind("# seed=7 config_hash=", 0), 0u);
  EXPECT_EQ(first_line(base() / "loss_curve.csv").rfind("# seed=7 config_hash=", 0), 0u);
  const json side = json::parse(read_text_file(base() / "dataset.csv.json"));
  EXPECT_EQ(side["augmentation"]["copies_per_demo"], 3);
  const CvaeModel m = load(base() / "model.ckpt");
  EXPECT_EQ(m.vocabulary, (std::vector<int>{1, 3}));
  EXPECT_EQ(m.training.epochs, 2u);
}

TEST_F(Cli, GenerateWritesCsvSidecarAndSvg) {
  const fs::path out = fresh("generate");
  const CliRun r = run({"generate", "--task", "3", "--goal", "0.8,0.1", "--name", "g"}, common(out));
  ASSERT_EQ(r.code, 0) << r.err;
  for (const char* f : {"g.csv", "g.csv.json", "g.svg"}) EXPECT_TRUE(fs::exists(out / f)) << f;
  const std::string line = first_line(out / "g.csv");
  EXPECT_EQ(line.rfind("# seed=7 config_hash=", 0), 0u);
  const json side = json::parse(read_text_file(out / "g.csv.json"));
  EXPECT_EQ(side["stamp"]["seed"], 7);
  EXPECT_EQ(line, "# seed=7 config_hash=" + side["stamp"]["config_hash"].get<std::string>());
  EXPECT_NE(read_text_file(out / "g.svg").find("seed=7"), std::string::npos);
}

TEST_F(Cli, FinetuneReportsViaDistance) {
  const fs::path out = fresh("finetune");
  const CliRun r = run({"finetune", "--task", "1", "--via", "0.3,0.5"}, common(out));
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_NE(r.out.find("via-point 0 distance"), std::string::npos);
  const json side = json::parse(read_text_file(out / "generated.csv.json"));
  EXPECT_EQ(side["via_points"].size(), 1u);
}

TEST_F(Cli, UsageErrorsExitWithOne) {
  const fs::path out = fresh("usage");
  EXPECT_EQ(run({"finetune", "--task", "1"}, common(out)).code, kExitUsage);  // no via-point
  EXPECT_EQ(run({"generate", "--task", "9"}, common(out)).code, kExitUsage);  // unknown task
  EXPECT_EQ(run({"generate", "--task", "1", "--goal", "1,x"}, common(out)).code, kExitUsage);
  EXPECT_EQ(run({"generate", "--task", "1", "--goal", "0,1"}, common(out)).code, kExitUsage);  // start = goal
  EXPECT_EQ(run({"plot", "--out", out.string()}).code, kExitUsage);
  EXPECT_EQ(run({"bogus"}).code, kExitUsage);
  EXPECT_EQ(run({}).code, kExitUsage);
  EXPECT_EQ(run({"eval-sim", "--task", "throw"}).code, kExitUsage);
  const CliRun r = run({"generate", "--task", "9"}, common(out));
  EXPECT_NE(r.err.find("vocabulary is {1, 3}"), std::string::npos) << r.err;
}

TEST_F(Cli, BadConfigFileIsUsageError) {
  const fs::path bad = root() / "bad.json";
  write_text_file(bad, "{ not json");
  EXPECT_EQ(run({"augment", "--config", bad.string(), "--out", fresh("badcfg").string()}).code, kExitUsage);
  EXPECT_EQ(run({"augment", "--config", (root() / "missing.json").string()}).code, kExitUsage);
  write_text_file(bad, R"({"dmp": {"dt": -1}})");
  EXPECT_EQ(run({"augment", "--config", bad.string(), "--out", fresh("badcfg").string()}).code, kExitUsage);
}

TEST_F(Cli, DataErrorsExitWithTwo) {
  const fs::path out = fresh("data");
  EXPECT_EQ(run({"train", "--out", out.string(), "--dataset", (out / "none.csv").string()}).code, kExitData);
  const fs::path broken = root() / "broken.ckpt";
  std::string bytes = read_text_file(base() / "model.ckpt");
  bytes[bytes.size() - 5] ^= 0x10;
  write_text_file(broken, bytes);
  const CliRun r = run({"generate", "--task", "1", "--out", out.string(), "--checkpoint", broken.string()});
  EXPECT_EQ(r.code, kExitData);
  EXPECT_NE(r.err.find("checksum"), std::string::npos);
  const fs::path csv = root() / "bad.csv";
  write_text_file(csv, "task_id,step,dim0,dim1\n1,0,0.0\n");
  EXPECT_EQ(run({"plot", "--out", out.string(), csv.string()}).code, kExitData);
}

TEST_F(Cli, DivergingRolloutExitsWithThree) {
  // alpha * beta * dt^2 far beyond the stability limit of the Euler rollout
  const fs::path cfg = root() / "unstable.json";
  write_text_file(cfg, R"({"tasks": [1], "augment": {"copies_per_demo": 1}, "dmp": {"alpha": 1e6, "beta": 2.5e5}})");
  const CliRun r = run({"augment", "--config", cfg.string(), "--out", fresh("unstable").string()});
  EXPECT_EQ(r.code, kExitNumerical) << r.err;
}

TEST_F(Cli, FlagsOverrideFileOverrideDefaults) {
  const fs::path cfg = root() / "precedence.json";
  write_text_file(cfg, R"({"seed": 11, "tasks": [2], "augment": {"copies_per_demo": 5, "k": 0.05}})");
  const fs::path out = fresh("precedence");
  ASSERT_EQ(run({"augment", "--config", cfg.string(), "--copies", "2", "--out", out.string()}).code, 0);
  const json side = json::parse(read_text_file(out / "dataset.csv.json"));
  EXPECT_EQ(side["augmentation"]["copies_per_demo"], 2);  // flag
  EXPECT_EQ(side["augmentation"]["k"], 0.05);             // file
  EXPECT_EQ(side["augmentation"]["rng_seed"], 11);        // file
  EXPECT_EQ(first_line(out / "dataset.csv").rfind("# seed=11 ", 0), 0u);
  EXPECT_EQ(ingest_csv(out / "dataset.csv").tasks.at(2).size(), 3u);

  ASSERT_EQ(run({"augment", "--config", cfg.string(), "--seed", "4", "--out", out.string()}).code, 0);
  const json side2 = json::parse(read_text_file(out / "dataset.csv.json"));
  EXPECT_EQ(side2["augmentation"]["copies_per_demo"], 5);
  EXPECT_EQ(side2["augmentation"]["rng_seed"], 4);

  const fs::path def = fresh("defaults");
  ASSERT_EQ(run({"augment", "--tasks", "7", "--out", def.string()}).code, 0);
  const json side3 = json::parse(read_text_file(def / "dataset.csv.json"));
  EXPECT_EQ(side3["augmentation"]["copies_per_demo"], 100);
  EXPECT_EQ(side3["augmentation"]["k"], 0.1);
}

TEST_F(Cli, ZeroCopiesKeepsTemplatesOnly) {
  const fs::path out = fresh("zero");
  ASSERT_EQ(run({"augment", "--tasks", "1,2", "--copies", "0", "--out", out.string()}).code, 0);
  const DatasetBundle b = ingest_csv(out / "dataset.csv");
  EXPECT_EQ(b.tasks.at(1).size(), 1u);
  EXPECT_EQ(b.tasks.at(2).size(), 1u);
}

TEST_F(Cli, MissingOutputDirectoryIsCreated) {
  const fs::path out = fresh("nested") / "a" / "b";
  ASSERT_EQ(run({"augment", "--tasks", "1", "--copies", "1", "--out", out.string()}).code, 0);
  EXPECT_TRUE(fs::exists(out / "dataset.csv"));
}

TEST_F(Cli, SameSeedGivesIdenticalHandwritingCsv) {
  const fs::path a = fresh("hw_a"), b = fresh("hw_b");
  ASSERT_EQ(run({"eval-handwriting", "--tasks", "1"}, common(a)).code, 0);
  ASSERT_EQ(run({"eval-handwriting", "--tasks", "1"}, common(b)).code, 0);
  const std::string ta = read_text_file(a / "handwriting.csv");
  EXPECT_EQ(ta, read_text_file(b / "handwriting.csv"));
  EXPECT_EQ(ta.rfind("# seed=7 config_hash=", 0), 0u);
  for (const char* f : {"handwriting.txt", "handwriting_timing.csv"})
    EXPECT_EQ(first_line(a / f).rfind("# seed=7 config_hash=", 0), 0u) << f;
}

TEST_F(Cli, EvalSimWritesTracesAndSummary) {
  const fs::path out = fresh("sim");
  const CliRun r = run({"eval-sim", "--task", "reach", "--episodes", "2"}, common(out));
  ASSERT_EQ(r.code, 0) << r.err;
  const json s = json::parse(read_text_file(out / "sim_summary.json"));
  EXPECT_EQ(s["reach"]["episodes"], 2);
  EXPECT_EQ(s["stamp"]["seed"], 7);
  for (const char* f : {"sim/reach_7.csv", "sim/reach_8.csv", "sim/reach_7.svg", "sim/reach_overview.svg"})
    EXPECT_TRUE(fs::exists(out / f)) << f;
  EXPECT_EQ(first_line(out / "sim/reach_8.csv").rfind("# seed=7 config_hash=", 0), 0u);
}

TEST_F(Cli, ZeroEpisodesReportsUndefinedRate) {
  const fs::path out = fresh("sim0");
  const CliRun r = run({"eval-sim", "--task", "reach", "--episodes", "0"}, common(out));
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_NE(r.out.find("undefined"), std::string::npos);
  EXPECT_TRUE(json::parse(read_text_file(out / "sim_summary.json"))["reach"]["success_rate"].is_null());
}

TEST_F(Cli, PlotRendersEachInput) {
  const fs::path out = fresh("plot");
  const CliRun r = run({"plot", "--out", out.string(), (base() / "dataset.csv").string()});
  ASSERT_EQ(r.code, 0) << r.err;
  const std::string svg = read_text_file(out / "dataset.svg");
  EXPECT_NE(svg.find("<svg"), std::string::npos);
  EXPECT_NE(svg.find("config_hash="), std::string::npos);
}

TEST_F(Cli, ConfigHashIgnoresPathsAndThreads) {
  RunConfig a, b;
  b.out = "elsewhere";
  b.single_thread = true;
  EXPECT_EQ(a.stamp().config_hash, b.stamp().config_hash);
  b.augment.k = 0.2;
  EXPECT_NE(a.stamp().config_hash, b.stamp().config_hash);
}
