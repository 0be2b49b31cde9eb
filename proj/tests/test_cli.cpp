#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>

#include <sys/wait.h>
#include <unistd.h>

#include <gtest/gtest.h>
#include <json.hpp>

#include "iseg/iseg.hpp"

namespace fs = std::filesystem;

namespace {

struct Result {
  int code;
  std::string output;
};

class Cli : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    root_ = fs::temp_directory_path() / ("iseg_cli_test_" + std::to_string(::getpid()));
    fs::remove_all(root_);
    fs::create_directories(root_);
    ASSERT_EQ(run("--seed 5 mkdump --count 2 --size 16 --out data").code, 0);
  }
  static void TearDownTestSuite() { fs::remove_all(root_); }

  static Result run(const std::string& args) {
    const std::string cmd = "cd '" + root_.string() + "' && '" ISEG_CLI_PATH "' " + args + " 2>&1";
    Result r{-1, {}};
    FILE* pipe = ::popen(cmd.c_str(), "r");
    if (pipe == nullptr) return r;
    char buf[512];
    while (std::fgets(buf, sizeof buf, pipe) != nullptr) r.output += buf;
    const int status = ::pclose(pipe);
    r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    return r;
  }

  static nlohmann::json manifest(const std::string& dir) {
    return nlohmann::json::parse(iseg::read_file((root_ / dir / "manifest.json").string()));
  }

  static fs::path root_;
};

fs::path Cli::root_;

}  // namespace

TEST_F(Cli, RefineThenEval) {
  const auto r = run("refine data/scene000.dump data/scene001.dump --out pred");
  ASSERT_EQ(r.code, 0) << r.output;
  EXPECT_TRUE(fs::exists(root_ / "pred/scene000.png"));
  EXPECT_TRUE(fs::exists(root_ / "pred/scene000.palette.json"));
  EXPECT_TRUE(fs::exists(root_ / "pred/scene001.maps.f32"));
  const auto img = iseg::read_mask_png((root_ / "pred/scene000.png").string());
  EXPECT_EQ(img.grid, (iseg::Grid{64, 64}));

  const auto e = run("eval pred data/gt --out report");
  ASSERT_EQ(e.code, 0) << e.output;
  const auto rep = nlohmann::json::parse(iseg::read_file((root_ / "report/report.json").string()));
  EXPECT_EQ(rep["image_count"], 2);
  EXPECT_GT(rep["global"]["miou"].get<double>(), 0.9);
}

TEST_F(Cli, IdenticalDirsScorePerfectly) {
  const auto e = run("eval data/gt data/gt --out self");
  ASSERT_EQ(e.code, 0) << e.output;
  const auto rep = nlohmann::json::parse(iseg::read_file((root_ / "self/report.json").string()));
  EXPECT_EQ(rep["global"]["miou"].get<double>(), 1.0);
  EXPECT_EQ(rep["mean_image_miou"].get<double>(), 1.0);
}

TEST_F(Cli, ManifestRecordsInputsOutputsAndParameters) {
  ASSERT_EQ(run("refine data/scene000.dump --out m1").code, 0);
  const auto m = manifest("m1");
  EXPECT_EQ(m["tool"], "iseg");
  EXPECT_EQ(m["version"], iseg::kVersion);
  EXPECT_EQ(m["command"], "refine");
  EXPECT_EQ(m["inputs"][0]["sha256"], iseg::sha256_file((root_ / "data/scene000.dump").string()));
  for (const auto& o : m["outputs"])
    EXPECT_EQ(o["sha256"], iseg::sha256_file((root_ / "m1" / o["file"].get<std::string>()).string()));
  EXPECT_EQ(m["parameters"]["refine"]["iterations"], 10);
  EXPECT_EQ(m["parameters"]["refine"]["lambda"], 0.01);
  EXPECT_EQ(m["parameters"]["refine"]["gamma"], 1.6);
}

TEST_F(Cli, RefineIsDeterministic) {
  ASSERT_EQ(run("refine data/scene001.dump --out d1").code, 0);
  ASSERT_EQ(run("refine data/scene001.dump --out d2").code, 0);
  for (const auto& e : fs::directory_iterator(root_ / "d1"))
    EXPECT_EQ(iseg::read_file(e.path().string()), iseg::read_file((root_ / "d2" / e.path().filename()).string()));
}

TEST_F(Cli, GammaChangesManifest) {
  ASSERT_EQ(run("refine data/scene000.dump --gamma 1 --out g1").code, 0);
  ASSERT_EQ(run("refine data/scene000.dump --gamma 1.6 --out g16").code, 0);
  EXPECT_NE(manifest("g1")["parameters"], manifest("g16")["parameters"]);
  EXPECT_NE(iseg::read_file((root_ / "g1/scene000.maps.f32").string()),
            iseg::read_file((root_ / "g16/scene000.maps.f32").string()));
}

TEST_F(Cli, ConfigPrecedence) {
  std::ofstream(root_ / "run.cfg") << "# defaults for this run\niters = 3\nlambda = 0.05\n\n[synth]\nscenes = 2\n";
  ASSERT_EQ(run("--config run.cfg refine data/scene000.dump --iters 7 --out c1").code, 0);
  const auto p = manifest("c1")["parameters"]["refine"];
  EXPECT_EQ(p["iterations"], 7);
  EXPECT_EQ(p["lambda"], 0.05);
  EXPECT_EQ(p["gamma"], 1.6);

  const auto s = run("synth --config run.cfg --size 12 --lambdas 0,0.01 --iters-grid 1,2 --out c2");
  ASSERT_EQ(s.code, 0) << s.output;
  EXPECT_EQ(manifest("c2")["parameters"]["scenes"], 2);
}

TEST_F(Cli, ConfigAcceptsListValues) {
  std::ofstream(root_ / "lists.cfg") << "levels = 8,16\n\n[synth]\nscenes = 1\nlambdas = 0,0.01\niters-grid = 1,2\n";
  ASSERT_EQ(run("--config lists.cfg refine data/scene000.dump --out l1").code, 0);
  EXPECT_EQ(manifest("l1")["parameters"]["levels"], (nlohmann::json{"8x8", "16x16"}));
  const auto s = run("--config lists.cfg synth --size 12 --out l2");
  ASSERT_EQ(s.code, 0) << s.output;
  const auto summary = nlohmann::json::parse(iseg::read_file((root_ / "l2/summary.json").string()));
  EXPECT_EQ(summary["cells"].size(), 4u);
}

TEST_F(Cli, SynthWritesStudyAndTable) {
  const auto r = run("synth --scenes 2 --size 12 --lambdas 0,0.01 --iters-grid 1,3 --out syn");
  ASSERT_EQ(r.code, 0) << r.output;
  EXPECT_NE(r.output.find("N=3"), std::string::npos);
  const auto csv = iseg::read_file((root_ / "syn/study.csv").string());
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 1 + 2 * 2 * 2);
  const auto summary = nlohmann::json::parse(iseg::read_file((root_ / "syn/summary.json").string()));
  EXPECT_EQ(summary["cells"].size(), 4u);
}

TEST_F(Cli, SeedAndInspect) {
  const auto s = run("seed data/scene000.dump --kind box --points '0,0;15,15' --lambda 0 --out seed");
  ASSERT_EQ(s.code, 0) << s.output;
  const auto mask = iseg::read_mask_png((root_ / "seed/scene000.seed.png").string());
  EXPECT_EQ(std::count(mask.labels.begin(), mask.labels.end(), 1), 64 * 64);

  const auto i = run("inspect data/scene000.dump --pixel 3,4 --n 2 --out insp");
  ASSERT_EQ(i.code, 0) << i.output;
  const auto img = iseg::read_png((root_ / "insp/scene000.affinity.3_4.n2.png").string());
  EXPECT_EQ(img.grid, (iseg::Grid{16, 16}));
}

TEST_F(Cli, ErrorsExitNonZeroWithMessage) {
  std::ofstream(root_ / "junk.dump") << "not a dump at all, clearly";
  auto r = run("refine junk.dump --out e1");
  EXPECT_NE(r.code, 0);
  EXPECT_NE(r.output.find("bad magic"), std::string::npos);

  r = run("seed data/scene000.dump --points '99,0' --out e2");
  EXPECT_NE(r.code, 0);
  EXPECT_NE(r.output.find("outside"), std::string::npos);

  r = run("seed data/scene000.dump --points '1,1' --iters 0 --out e3");
  EXPECT_NE(r.code, 0);

  r = run("inspect data/scene000.dump --pixel 16,0 --out e4");
  EXPECT_NE(r.code, 0);

  r = run("synth --scenes 0 --out e5");
  EXPECT_NE(r.code, 0);

  r = run("refine data/scene000.dump --levels 4 --out e6");
  EXPECT_NE(r.code, 0);
  EXPECT_NE(r.output.find("not present"), std::string::npos);

  r = run("refine data/scene000.dump --bg-mode nope --out e7");
  EXPECT_NE(r.code, 0);
}

TEST_F(Cli, EvalListsUnmatchedFiles) {
  fs::create_directories(root_ / "partial");
  fs::copy_file(root_ / "data/gt/scene000.png", root_ / "partial/scene000.png", fs::copy_options::overwrite_existing);
  const auto r = run("eval partial data/gt --out e8");
  EXPECT_NE(r.code, 0);
  EXPECT_NE(r.output.find("scene001.png"), std::string::npos);
  EXPECT_FALSE(fs::exists(root_ / "e8/report.json"));
}
