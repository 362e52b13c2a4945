// SPDX-License-Identifier: Apache-2.0
#include <fstream>
#include <sstream>

#include <gtest/gtest.h>

#include "m3c2/cli.hpp"
#include "test_util.hpp"

using namespace m3c2;
using m3c2::testing::TempDir;

namespace {

struct Result {
  int code;
  std::string out, err;
};

Result run(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = m3c2::cli::run_cli(args, out, err);
  return {code, out.str(), err.str()};
}

void write(const std::filesystem::path& p, const std::string& text) { std::ofstream(p) << text; }

std::string slurp(const std::filesystem::path& p) { return m3c2::detail::read_file(p); }

std::size_t lines(const std::string& s) { return static_cast<std::size_t>(std::count(s.begin(), s.end(), '\n')); }

constexpr const char* kSmallGen = "n_cases = 24\nN = 6\nK = 4\nseed = 5\n";
constexpr const char* kQuickTrain = "epochs = 2\n";

/// A small generated dataset plus a quick training config under `dir`.
void small_setup(const TempDir& dir) {
  write(dir / "gen.cfg", kSmallGen);
  write(dir / "train.cfg", kQuickTrain);
  ASSERT_EQ(run({"gen", "--config", (dir / "gen.cfg").string(), "--out", (dir / "data").string()}).code, 0);
}

}  // namespace

TEST(CliGen, DefaultConfigWritesThreeHundredCases) {
  TempDir dir("cli_gen");
  const Result r = run({"gen", "--out", (dir / "data").string()});
  ASSERT_EQ(r.code, 0) << r.err;
  const std::string manifest = slurp(dir / "data" / "dataset.manifest");
  const auto bags = read_dataset(dir / "data" / "dataset.manifest");
  EXPECT_EQ(bags.size(), 300u);
  EXPECT_NE(r.out.find("co-occurrence A"), std::string::npos);
  EXPECT_NE(r.out.find("class histogram"), std::string::npos);
  EXPECT_TRUE(std::filesystem::exists(dir / "data" / "dataset.blob"));
}

TEST(CliGen, RepeatedSeedIsByteIdentical) {
  TempDir dir("cli_gen_rep");
  write(dir / "gen.cfg", kSmallGen);
  for (const char* sub : {"a", "b"})
    ASSERT_EQ(run({"gen", "--config", (dir / "gen.cfg").string(), "--out", (dir / sub).string()}).code, 0);
  for (const char* f : {"dataset.manifest", "dataset.blob"})
    EXPECT_EQ(slurp(dir / "a" / f), slurp(dir / "b" / f)) << f;
}

TEST(CliGen, DegeneratePriorsConcentrateOnClassThree) {
  TempDir dir("cli_gen_deg");
  write(dir / "gen.cfg", "n_cases = 40\nN = 4\nK = 4\nmarker_priors = 1, 1, 0.3, 0.03\n");
  const Result r = run({"gen", "--config", (dir / "gen.cfg").string(), "--out", (dir / "data").string()});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_NE(r.out.find("class histogram: 0:0 1:0 2:0 3:40"), std::string::npos) << r.out;
}

TEST(CliErrors, UsageAndInputErrorsExitTwo) {
  TempDir dir("cli_err");
  write(dir / "bad.cfg", "n_cases = -3\n");
  EXPECT_EQ(run({"gen", "--config", (dir / "bad.cfg").string(), "--out", (dir / "x").string()}).code, 2);
  write(dir / "unknown.cfg", "colour = blue\n");
  EXPECT_EQ(run({"gen", "--config", (dir / "unknown.cfg").string(), "--out", (dir / "x").string()}).code, 2);
  EXPECT_EQ(run({"gen", "--config", (dir / "missing.cfg").string(), "--out", (dir / "x").string()}).code, 2);
  EXPECT_EQ(run({"gen"}).code, 2);
  EXPECT_EQ(run({"frobnicate"}).code, 2);
  EXPECT_EQ(run({}).code, 2);
  EXPECT_EQ(run({"train", "--data", (dir / "nope").string(), "--out", (dir / "run").string()}).code, 2);
  EXPECT_EQ(run({"train", "--data", (dir / "nope").string(), "--out", (dir / "run").string(),
                 "--ablate", "no_such_flag"}).code, 2);
  EXPECT_EQ(run({"eval", "--data", (dir / "nope").string(), "--checkpoint", (dir / "c").string()}).code, 2);
  EXPECT_EQ(run({"report", "--run", (dir / "nope").string()}).code, 2);
  EXPECT_EQ(run({"gradcheck", "--seeds", "0"}).code, 2);
  const Result r = run({"gen", "--config", (dir / "bad.cfg").string(), "--out", (dir / "x").string()});
  EXPECT_NE(r.err.find("error:"), std::string::npos);
}

TEST(CliTrain, NoCmgLogShowsModulationSkipped) {
  TempDir dir("cli_train_nocmg");
  small_setup(dir);
  const Result r = run({"train", "--data", (dir / "data").string(), "--config", (dir / "train.cfg").string(),
                        "--out", (dir / "run").string(), "--ablate", "no_cmg"});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_NE(r.out.find("modulation skipped on every step"), std::string::npos);
  const auto rows = m3c2::cli::detail::read_csv(dir / "run" / "epochs.csv");
  ASSERT_EQ(rows.size(), 3u);
  const std::size_t mol = m3c2::cli::detail::column(rows[0], "cmg_molecular_steps", "epochs.csv");
  const std::size_t his = m3c2::cli::detail::column(rows[0], "cmg_histology_steps", "epochs.csv");
  const std::size_t skip = m3c2::cli::detail::column(rows[0], "cmg_skipped_steps", "epochs.csv");
  for (std::size_t i = 1; i < rows.size(); ++i) {
    EXPECT_EQ(rows[i][mol], "0");
    EXPECT_EQ(rows[i][his], "0");
    EXPECT_NE(rows[i][skip], "0");
  }
  EXPECT_NE(slurp(dir / "run" / "report.txt").find("variant = no_cmg"), std::string::npos);
}

TEST(CliTrain, RerunAndEvalReproduceReport) {
  TempDir dir("cli_train_rep");
  small_setup(dir);
  for (const char* sub : {"run1", "run2"}) {
    const Result r = run({"train", "--data", (dir / "data").string(), "--config",
                          (dir / "train.cfg").string(), "--out", (dir / sub).string()});
    ASSERT_EQ(r.code, 0) << r.err;
  }
  for (const char* f : {"epochs.csv", "report.txt", "checkpoint.manifest", "checkpoint.blob", "confidences.csv"})
    EXPECT_EQ(slurp(dir / "run1" / f), slurp(dir / "run2" / f)) << f;
  const Result e = run({"eval", "--data", (dir / "data").string(), "--checkpoint", (dir / "run1").string(),
                        "--out", (dir / "eval").string()});
  ASSERT_EQ(e.code, 0) << e.err;
  EXPECT_EQ(e.out, slurp(dir / "run1" / "report.txt"));
  EXPECT_EQ(slurp(dir / "eval" / "report.txt"), slurp(dir / "run1" / "report.txt"));
  const Result rep = run({"report", "--run", (dir / "run1").string(), "--out", (dir / "summary.csv").string()});
  ASSERT_EQ(rep.code, 0) << rep.err;
  EXPECT_EQ(lines(slurp(dir / "summary.csv")), 3u);
}

TEST(CliEval, MismatchedWidthIsAnInputError) {
  TempDir dir("cli_eval_k");
  small_setup(dir);
  ASSERT_EQ(run({"train", "--data", (dir / "data").string(), "--config", (dir / "train.cfg").string(),
                 "--out", (dir / "run").string()}).code, 0);
  write(dir / "wide.cfg", "n_cases = 8\nN = 4\nK = 5\n");
  ASSERT_EQ(run({"gen", "--config", (dir / "wide.cfg").string(), "--out", (dir / "wide").string()}).code, 0);
  EXPECT_EQ(run({"eval", "--data", (dir / "wide").string(), "--checkpoint", (dir / "run").string()}).code, 2);
}

TEST(CliGradcheck, FewSeedsPass) {
  const Result r = run({"gradcheck", "--seeds", "3"});
  EXPECT_EQ(r.code, 0) << r.out;
  EXPECT_NE(r.out.find(": pass"), std::string::npos) << r.out;
}

TEST(CliAblate, ReportEmitsOneRowPerVariant) {
  TempDir dir("cli_ablate");
  small_setup(dir);
  write(dir / "one.cfg", "epochs = 1\n");
  const Result a = run({"ablate", "--config", (dir / "one.cfg").string(), "--data", (dir / "data").string(),
                        "--out", (dir / "abl").string()});
  ASSERT_EQ(a.code, 0) << a.err;
  const Result r = run({"report", "--run", (dir / "abl").string(), "--out", (dir / "table.csv").string()});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto rows = m3c2::cli::detail::read_csv(dir / "table.csv");
  ASSERT_EQ(rows.size(), 1u + 1u + AblationFlags::kNames.size());
  EXPECT_EQ(rows[0][0], "variant");
  EXPECT_EQ(rows[1][0], "full");
  for (std::size_t i = 0; i < AblationFlags::kNames.size(); ++i) EXPECT_EQ(rows[i + 2][0], AblationFlags::kNames[i]);
  EXPECT_EQ(lines(r.out), rows.size());
}
