#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <sys/wait.h>

#include "bossink/io.hpp"

using namespace bossink;
namespace fs = std::filesystem;

namespace {

const std::string kCli = BOSSINK_CLI;
const std::string kCorpus = std::string(BOSSINK_DATA) + "/corpus.txt";

struct Exit {
  int code;
  std::string err;
};

std::string slurp(const std::string& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// Report rows only, without the "# key=value" header lines.
std::string body(const std::string& p) {
  std::istringstream in(slurp(p));
  std::string line, out;
  while (std::getline(in, line)) {
    if (line.rfind("# ", 0) != 0) out += line + "\n";
  }
  return out;
}

class CliTest : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() /
           ("bossink_cli_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }

  std::string p(const std::string& name) const { return (dir_ / name).string(); }

  Exit run(const std::string& args, const std::string& env = "") const {
    const std::string err = p("stderr.txt");
    const std::string cmd = env + " '" + kCli + "' " + args + " > /dev/null 2> '" + err + "'";
    const int status = std::system(cmd.c_str());
    return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, slurp(err)};
  }

  std::string fixture(const std::string& kind = "planted") const {
    const auto path = p(kind);
    EXPECT_EQ(run("make-fixture --kind " + kind + " --out " + path).code, 0);
    return path;
  }

  fs::path dir_;
};

}  // namespace

TEST_F(CliTest, ScanFindsPlantedSink) {
  const auto ck = fixture();
  ASSERT_EQ(run("scan --checkpoint " + ck + " --corpus " + kCorpus + " --metric bos_head --out " + p("s.csv")).code, 0);
  const auto r = read_report(p("s.csv"));
  ASSERT_EQ(r.rows.size(), 32u);
  std::size_t best = 0;
  for (std::size_t i = 1; i < r.rows.size(); ++i) {
    if (std::stod(r.rows[i][2]) > std::stod(r.rows[best][2])) best = i;
  }
  const std::string id = r.rows[best][0] + ":" + r.rows[best][1];
  EXPECT_TRUE(id == "1:5" || id == "2:0") << id;
  bool has_seed = false;
  for (const auto& [k, v] : r.header) has_seed = has_seed || (k == "seed" && v == "0");
  EXPECT_TRUE(has_seed);
}

TEST_F(CliTest, ScanBiOnZeroBlockModel) {
  const auto ck = fixture("zero-block");
  ASSERT_EQ(run("scan --checkpoint " + ck + " --corpus " + kCorpus + " --metric bi --format json --out " + p("bi.json")).code, 0);
  const auto r = read_report(p("bi.json"));
  ASSERT_EQ(r.rows.size(), 4u);
  for (const auto& row : r.rows) EXPECT_LT(std::fabs(std::stod(row[r.column("score")])), 1e-6);
}

TEST_F(CliTest, MissingCheckpointNamesPath) {
  const auto r = run("scan --checkpoint " + p("nope") + " --corpus " + kCorpus);
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find(p("nope")), std::string::npos);
  EXPECT_EQ(std::count(r.err.begin(), r.err.end(), '\n'), 1);
}

TEST_F(CliTest, PruneRatioZeroRoundTrips) {
  const auto ck = fixture();
  ASSERT_EQ(run("prune --checkpoint " + ck + " --corpus " + kCorpus +
                " --strategy bos_head_desc --ratio 0 --out " + p("r0")).code, 0);
  EXPECT_TRUE(load_checkpoint(p("r0")).same_weights(load_checkpoint(ck)));
  const auto spec = load_prune_spec(p("r0.prune.json"));
  EXPECT_TRUE(spec.targets.empty());
}

TEST_F(CliTest, PositionalPruneNeedsNoScan) {
  const auto ck = fixture("random");
  ASSERT_EQ(run("prune --checkpoint " + ck + " --strategy bottom_up --ratio 0.25 --out " + p("bu")).code, 0);
  EXPECT_EQ(load_checkpoint(p("bu")).config.n_layers, 3u);
  EXPECT_EQ(load_prune_spec(p("bu.prune.json")).layers(), std::vector<std::size_t>{1});
}

TEST_F(CliTest, PruneFromScoreReport) {
  const auto ck = fixture();
  ASSERT_EQ(run("scan --checkpoint " + ck + " --metric mag --out " + p("mag.csv")).code, 0);
  ASSERT_EQ(run("prune --checkpoint " + ck + " --strategy mag_asc --ratio 0.5 --scores " + p("mag.csv") +
                " --out " + p("m")).code, 0);
  EXPECT_EQ(load_prune_spec(p("m.prune.json")).targets.size(), 16u);
}

TEST_F(CliTest, UnknownStrategyFails) {
  const auto ck = fixture();
  const auto r = run("prune --checkpoint " + ck + " --strategy greedy --ratio 0.1 --corpus " + kCorpus);
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("greedy"), std::string::npos);
}

TEST_F(CliTest, EvalDenseEqualsRatioZeroAndIgnoresSeed) {
  const auto ck = fixture();
  ASSERT_EQ(run("prune --checkpoint " + ck + " --corpus " + kCorpus +
                " --strategy bos_head_desc --ratio 0 --out " + p("r0")).code, 0);
  const std::string common = " --corpus " + kCorpus + " --n-items 16";
  ASSERT_EQ(run("eval --checkpoint " + ck + common + " --out " + p("dense.csv")).code, 0);
  ASSERT_EQ(run("eval --checkpoint " + p("r0") + common + " --out " + p("r0.csv")).code, 0);
  EXPECT_EQ(body(p("dense.csv")), body(p("r0.csv")));
  ASSERT_EQ(run("eval --checkpoint " + ck + common + " --seed 5 --out " + p("s5.csv")).code, 0);
  const auto a = read_report(p("dense.csv")), b = read_report(p("s5.csv"));
  EXPECT_EQ(a.rows[0][a.column("perplexity")], b.rows[0][b.column("perplexity")]);
}

TEST_F(CliTest, EvalShortCorpusFails) {
  const auto ck = fixture();
  std::ofstream(p("short.txt")) << "too short";
  EXPECT_EQ(run("eval --checkpoint " + ck + " --corpus " + p("short.txt") + " --out " + p("e.csv")).code, 1);
  EXPECT_FALSE(fs::exists(p("e.csv")));
}

TEST_F(CliTest, RerunIsByteIdentical) {
  const auto ck = fixture();
  const std::string args = "patterns --checkpoint " + ck + " --corpus " + kCorpus + " --n-prompts 3 --seq-len 32";
  ASSERT_EQ(run(args + " --out " + p("a.csv")).code, 0);
  ASSERT_EQ(run(args + " --threads 4 --out " + p("b.csv")).code, 0);
  const std::string first = slurp(p("a.csv"));
  ASSERT_EQ(run(args + " --out " + p("a.csv")).code, 0);
  EXPECT_EQ(first, slurp(p("a.csv")));
  EXPECT_EQ(body(p("a.csv")), body(p("b.csv")));
  const auto r = read_report(p("a.csv"));
  ASSERT_EQ(r.rows.size(), 32u);
}

TEST_F(CliTest, SweepAndLengths) {
  const auto ck = fixture();
  ASSERT_EQ(run("sweep --checkpoint " + ck + " --corpus " + kCorpus + " --n-items 16 --threads 4 --out " +
                p("sw.csv")).code, 0);
  const auto sw = read_report(p("sw.csv"));
  EXPECT_EQ(sw.rows.size(), 33u);
  EXPECT_TRUE(fs::exists(p("sw.layers.csv")));
  ASSERT_EQ(run("sweep --mode ratio --strategy top_down --ratios 0,0.25 --checkpoint " + ck + " --corpus " +
                kCorpus + " --n-items 8 --out " + p("rs.csv")).code, 0);
  EXPECT_EQ(read_report(p("rs.csv")).rows.size(), 2u);
  ASSERT_EQ(run("lengths --checkpoint " + ck + " --corpus " + kCorpus + " --lengths 8,16,32 --n-prompts 2 --out " +
                p("len.csv")).code, 0);
  EXPECT_EQ(read_report(p("len.csv")).rows.size(), 96u);
  EXPECT_EQ(read_report(p("len.cohorts.csv")).rows.size(), 3u);
}

TEST_F(CliTest, DefaultOutputDirectoryFromEnvironment) {
  const auto ck = fixture();
  ASSERT_EQ(run("scan --metric mag --checkpoint " + ck, "BOSSINK_OUT_DIR='" + dir_.string() + "'").code, 0);
  EXPECT_TRUE(fs::exists(p("scan_mag.csv")));
}

TEST_F(CliTest, HelpExitsZero) {
  EXPECT_EQ(run("scan --help").code, 0);
  EXPECT_EQ(run("").code, 1);
}
