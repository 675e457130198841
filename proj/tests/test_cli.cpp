#include <gtest/gtest.h>

#include <filesystem>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "offseg/cli.hpp"

using namespace offseg;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Outcome {
  int code;
  std::string out, err;
};

Outcome run_cli(std::vector<std::string> args) {
  args.insert(args.begin(), "offseg");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = cli::run(static_cast<int>(argv.size()), argv.data(), out, err);
  return {code, out.str(), err.str()};
}

class CliTest : public ::testing::Test {
 protected:
  void SetUp() override {
    root_ = fs::temp_directory_path() /
            (std::string("offseg_cli_") + ::testing::UnitTest::GetInstance()->current_test_info()->name());
    fs::remove_all(root_);
    fs::create_directories(root_);
  }
  void TearDown() override { fs::remove_all(root_); }

  std::string dir(const std::string& name) const { return (root_ / name).string(); }

  std::string small_data(const std::string& task = "context", const std::string& name = "data",
                         const std::string& samples = "20") {
    const auto r = run_cli({"gen-data", task, "--height", "8", "--width", "8", "--samples", samples,
                            "--seed", "3", "--out", dir(name)});
    EXPECT_EQ(r.code, 0) << r.err;
    return dir(name);
  }

  static json read_json(const fs::path& p) { return json::parse(read_text(p)); }

  fs::path root_;
};

std::set<std::string> listing(const fs::path& p) {
  std::set<std::string> names;
  for (const auto& e : fs::recursive_directory_iterator(p)) names.insert(fs::relative(e.path(), p).string());
  return names;
}

}  // namespace

TEST_F(CliTest, GenDataContextDefaultsReportCeiling) {
  const auto r = run_cli({"gen-data", "context", "--samples", "4", "--out", dir("ctx")});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto m = read_json(fs::path(dir("ctx")) / "manifest.json");
  EXPECT_EQ(m.at("config").at("static_ceiling").get<double>(), 0.75);
  EXPECT_EQ(m.at("command"), "gen-data");
  EXPECT_TRUE(m.at("outputs").contains("dataset.osg"));
  EXPECT_EQ(read_json(fs::path(dir("ctx")) / "dataset.osg.json").at("static_ceiling").get<double>(), 0.75);
}

TEST_F(CliTest, GenDataIsReproducible) {
  small_data("separable", "a");
  small_data("separable", "b");
  const auto a = read_json(fs::path(dir("a")) / "manifest.json").at("outputs");
  const auto b = read_json(fs::path(dir("b")) / "manifest.json").at("outputs");
  EXPECT_EQ(a, b);
  EXPECT_EQ(cli::file_sha256(fs::path(dir("a")) / "manifest.json"),
            cli::file_sha256(fs::path(dir("b")) / "manifest.json"));
}

TEST_F(CliTest, GenDataRejectsInvalidConfigs) {
  auto r = run_cli({"gen-data", "context", "--p-amb", "0.6", "--out", dir("x")});
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("7.2"), std::string::npos);
  EXPECT_EQ(run_cli({"gen-data", "spiral", "--out", dir("x")}).code, 2);
  EXPECT_EQ(run_cli({"gen-data", "context"}).code, 2);
  EXPECT_EQ(run_cli({"gen-data", "context", "--sigma", "abc", "--out", dir("x")}).code, 2);
}

TEST_F(CliTest, UsageErrorsAndHelp) {
  EXPECT_EQ(run_cli({}).code, 2);
  EXPECT_EQ(run_cli({"bogus"}).code, 2);
  const auto h = run_cli({"--help"});
  EXPECT_EQ(h.code, 0);
  EXPECT_NE(h.out.find("gen-data"), std::string::npos);
}

TEST_F(CliTest, TrainWritesRunArtifacts) {
  const auto data = small_data();
  const auto r = run_cli({"train", "--data", data, "--iters", "5", "--channels", "8", "--out", dir("run")});
  ASSERT_EQ(r.code, 0) << r.err;
  const fs::path run(dir("run"));
  for (const char* f : {"checkpoint.osc", "checkpoint.osc.json", "log.ndjson", "metrics.json", "manifest.json"})
    EXPECT_TRUE(fs::exists(run / f)) << f;
  std::istringstream log(read_text(run / "log.ndjson"));
  std::string line;
  int lines = 0;
  while (std::getline(log, line)) {
    const auto j = json::parse(line);
    EXPECT_EQ(j.at("iter"), lines++);
    EXPECT_TRUE(j.contains("lr") && j.contains("loss"));
  }
  EXPECT_EQ(lines, 5);
  const auto m = read_json(run / "manifest.json");
  EXPECT_EQ(m.at("config").at("hidden"), 4);
  EXPECT_EQ(m.at("inputs").size(), 2u);
  EXPECT_EQ(read_json(run / "metrics.json").at("split"), "val");
}

TEST_F(CliTest, BaselineEqualsOffsetWithBranchesOff) {
  const auto data = small_data();
  ASSERT_EQ(run_cli({"train", "--data", data, "--head", "baseline", "--iters", "10", "--channels", "8",
                     "--out", dir("base")}).code, 0);
  ASSERT_EQ(run_cli({"train", "--data", data, "--head", "offset", "--co", "off", "--fo", "off", "--iters", "10",
                     "--channels", "8", "--out", dir("off")}).code, 0);
  EXPECT_EQ(read_text(fs::path(dir("base")) / "metrics.json"), read_text(fs::path(dir("off")) / "metrics.json"));
  EXPECT_EQ(cli::file_sha256(fs::path(dir("base")) / "checkpoint.osc"),
            cli::file_sha256(fs::path(dir("off")) / "checkpoint.osc"));
}

TEST_F(CliTest, BaselineWithOffsetBranchRejected) {
  const auto data = small_data();
  const auto r = run_cli({"train", "--data", data, "--head", "baseline", "--co", "on", "--out", dir("x")});
  EXPECT_EQ(r.code, 2);
  EXPECT_EQ(run_cli({"train", "--data", data, "--co", "maybe", "--out", dir("x")}).code, 2);
}

TEST_F(CliTest, ZeroItersEvaluatesInitialization) {
  const auto data = small_data();
  ASSERT_EQ(run_cli({"train", "--data", data, "--iters", "0", "--channels", "8", "--seed", "4", "--out",
                     dir("r")}).code, 0);
  EXPECT_TRUE(read_text(fs::path(dir("r")) / "log.ndjson").empty());

  TrainConfig cfg;
  cfg.channels = 8;
  cfg.hidden = 4;
  cfg.seed = 4;
  const auto ds = read_dataset(fs::path(data) / "dataset.osg");
  const auto init = init_model<float>(cfg, ds.channels, ds.classes);
  EXPECT_EQ(encode_checkpoint(init), read_file(fs::path(dir("r")) / "checkpoint.osc"));
  auto want = evaluate(init, ds, "val").to_json();
  want["split"] = "val";
  EXPECT_EQ(read_json(fs::path(dir("r")) / "metrics.json"), want);
}

TEST_F(CliTest, ChannelSweepEmitsOneReportPerWidth) {
  const auto data = small_data("separable");
  const auto r = run_cli({"train", "--data", data, "--iters", "3", "--channels", "8,16,32", "--out", dir("sw")});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto sweep = read_json(fs::path(dir("sw")) / "sweep.json");
  ASSERT_EQ(sweep.size(), 3u);
  for (int c : {8, 16, 32}) {
    const fs::path sub = fs::path(dir("sw")) / ("C" + std::to_string(c));
    EXPECT_TRUE(fs::exists(sub / "metrics.json"));
    EXPECT_EQ(read_json(sub / "checkpoint.osc.json").at("C"), c);
    EXPECT_EQ(read_json(sub / "checkpoint.osc.json").at("C_h"), c / 2);
  }
  EXPECT_TRUE(fs::exists(fs::path(dir("sw")) / "manifest.json"));
}

TEST_F(CliTest, TrainAndEvalAreReproducible) {
  const auto data = small_data();
  for (const char* name : {"r1", "r2"})
    ASSERT_EQ(run_cli({"train", "--data", data, "--iters", "8", "--channels", "8", "--out", dir(name)}).code, 0);
  EXPECT_EQ(read_json(fs::path(dir("r1")) / "manifest.json").at("outputs"),
            read_json(fs::path(dir("r2")) / "manifest.json").at("outputs"));
  const auto e1 = run_cli({"eval", "--checkpoint", dir("r1"), "--data", data, "--split", "all"});
  const auto e2 = run_cli({"eval", "--checkpoint", dir("r2") + "/checkpoint.osc", "--data", data, "--split", "all"});
  ASSERT_EQ(e1.code, 0) << e1.err;
  EXPECT_EQ(e1.out, e2.out);
}

TEST_F(CliTest, EvalErrors) {
  const auto data = small_data();
  const std::string missing = dir("nowhere") + "/checkpoint.osc";
  auto r = run_cli({"eval", "--checkpoint", missing, "--data", data});
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find(missing), std::string::npos);

  ASSERT_EQ(run_cli({"train", "--data", data, "--iters", "0", "--channels", "8", "--out", dir("r")}).code, 0);
  EXPECT_EQ(run_cli({"eval", "--checkpoint", dir("r"), "--data", data, "--split", "test"}).code, 2);

  const auto other = small_data("separable", "sep");
  r = run_cli({"eval", "--checkpoint", dir("r"), "--data", other});
  EXPECT_EQ(r.code, 0);  // both tasks default to K=6, C0=16
  auto bytes = read_file(fs::path(data) / "dataset.osg");
  bytes.resize(bytes.size() - 1);
  write_file(fs::path(data) / "dataset.osg", bytes);
  r = run_cli({"eval", "--checkpoint", dir("r"), "--data", data});
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("offset"), std::string::npos);
}

TEST_F(CliTest, OverfitTinyDatasetEvaluatesNearPerfectly) {
  ASSERT_EQ(run_cli({"gen-data", "separable", "--height", "4", "--width", "4", "--samples", "5", "--seed", "1",
                     "--out", dir("tiny")}).code, 0);
  ASSERT_EQ(run_cli({"train", "--data", dir("tiny"), "--iters", "300", "--lr", "0.01", "--channels", "16",
                     "--out", dir("fit")}).code, 0);
  const auto r = run_cli({"eval", "--checkpoint", dir("fit"), "--data", dir("tiny"), "--split", "train"});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_GE(json::parse(r.out).at("miou").get<double>(), 0.99);
}

TEST_F(CliTest, MineAndHeatmap) {
  const auto data = small_data("context", "data", "60");
  ASSERT_EQ(run_cli({"train", "--data", data, "--iters", "0", "--channels", "32", "--out", dir("r")}).code, 0);
  const auto r = run_cli({"mine", "--data", data, "--checkpoint", dir("r"), "--class", "4", "--n", "10",
                          "--out", dir("mine")});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto stats = read_json(fs::path(dir("mine")) / "stats.json");
  EXPECT_EQ(stats.at("n"), 10);
  EXPECT_EQ(stats.at("class"), 4);
  for (const char* key : {"median_same_context", "median_cross_context", "min", "max", "image_ids", "skipped"})
    EXPECT_TRUE(stats.contains(key)) << key;
  EXPECT_LT(stats.at("median_cross_context").get<double>(), stats.at("median_same_context").get<double>());

  const auto csv = (fs::path(dir("mine")) / "similarity.csv").string();
  const auto lm = parse_similarity_csv(read_text(csv));
  EXPECT_EQ(lm.ids.size(), 10u);
  ASSERT_EQ(run_cli({"heatmap", "--similarity-csv", csv, "--out", dir("hm")}).code, 0);
  const auto ppm = read_file(fs::path(dir("hm")) / "heatmap.ppm");
  EXPECT_EQ(ppm, render_heatmap_ppm(lm.values, 8));
  EXPECT_TRUE(fs::exists(fs::path(dir("hm")) / "manifest.json"));

  EXPECT_EQ(run_cli({"mine", "--data", data, "--checkpoint", dir("r"), "--class", "9", "--out", dir("m2")}).code, 2);
}

TEST_F(CliTest, HeatmapOfDuplicatesIsAllRed) {
  const Matrix<double> ones{{1, 1}, {1, 1}};
  write_text(fs::path(dir("")) / "s.csv", similarity_csv({"0", "0"}, ones));
  ASSERT_EQ(run_cli({"heatmap", "--similarity-csv", dir("s.csv"), "--out", dir("hm")}).code, 0);
  const auto ppm = read_file(fs::path(dir("hm")) / "heatmap.ppm");
  const std::string header = "P6\n16 16\n255\n";
  ASSERT_EQ(ppm.size(), header.size() + 16 * 16 * 3);
  for (std::size_t i = header.size(); i < ppm.size(); i += 3) {
    EXPECT_EQ(ppm[i], 255);
    EXPECT_EQ(ppm[i + 1], 0);
    EXPECT_EQ(ppm[i + 2], 0);
  }
}

TEST_F(CliTest, HeatmapReportsCsvLine) {
  write_text(fs::path(dir("")) / "bad.csv", "image_id,a,b\na,1,0\nc,0,1\n");
  const auto r = run_cli({"heatmap", "--similarity-csv", dir("bad.csv"), "--out", dir("hm")});
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("line 3"), std::string::npos);
}

TEST_F(CliTest, GradCheckPassesAndCatchesInjectedFault) {
  auto r = run_cli({"grad-check", "--scope", "all", "--seeds", "2"});
  EXPECT_EQ(r.code, 0) << r.out;
  for (const char* s : {"mlp", "softmax", "head", "loss"}) EXPECT_NE(r.out.find(s), std::string::npos);
  EXPECT_EQ(r.out.find("FAIL"), std::string::npos);

  r = run_cli({"grad-check", "--scope", "head", "--inject-fault"});
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.out.find("FAIL"), std::string::npos);
  EXPECT_NE(r.out.find("coordinate=head."), std::string::npos);

  EXPECT_EQ(run_cli({"grad-check", "--scope", "conv"}).code, 2);
}

TEST_F(CliTest, ParamsBreakdown) {
  auto r = run_cli({"params", "--k", "150", "--channels", "256", "--hidden", "128"});
  ASSERT_EQ(r.code, 0);
  auto j = json::parse(r.out);
  EXPECT_EQ(j.at("overhead"), 131840);
  EXPECT_EQ(j.at("class_embeddings"), 150 * 256);
  EXPECT_EQ(j.at("total"), 150 * 256 + 131840);

  j = json::parse(run_cli({"params", "--k", "150", "--channels", "256", "--co", "off", "--fo", "off"}).out);
  EXPECT_EQ(j.at("total"), 150 * 256);
  EXPECT_EQ(j.at("overhead"), 0);

  j = json::parse(run_cli({"params", "--k", "2", "--channels", "2", "--hidden", "1", "--co", "off", "--fo", "off"}).out);
  EXPECT_EQ(j.at("total"), 4);
  j = json::parse(run_cli({"params", "--k", "2", "--channels", "2", "--hidden", "1"}).out);
  EXPECT_EQ(j.at("total"), 18);
  EXPECT_EQ(j.at("overhead"), 14);
  EXPECT_EQ(run_cli({"params", "--k", "1"}).code, 2);
}

TEST_F(CliTest, CommandsWriteOnlyInsideOut) {
  const auto data = small_data();
  const auto before = listing(root_);
  ASSERT_EQ(run_cli({"train", "--data", data, "--iters", "2", "--channels", "8", "--out", dir("only")}).code, 0);
  std::set<std::string> added;
  for (const auto& n : listing(root_))
    if (!before.count(n)) added.insert(n);
  for (const auto& n : added) EXPECT_EQ(n.rfind("only", 0), 0u) << n;
  EXPECT_FALSE(added.empty());
}
