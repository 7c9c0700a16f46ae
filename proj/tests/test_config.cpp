#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <sys/wait.h>
#include <unistd.h>

#include "dtdn/config.hpp"

using namespace dtdn;
namespace fs = std::filesystem;

namespace {

ExperimentConfig parse(const std::string& text) {
    std::istringstream in(text);
    return parse_config(in);
}

fs::path scratch() {
    auto p = fs::temp_directory_path() / ("dtdn_test_config_" + std::to_string(::getpid()));
    fs::create_directories(p);
    return p;
}

fs::path write_file(const std::string& name, const std::string& text) {
    auto p = scratch() / name;
    std::ofstream(p) << text;
    return p;
}

int run_cli(const std::string& args) {
    const std::string cmd = std::string(DTDN_CLI_PATH) + " " + args + " >/dev/null 2>&1";
    const int status = std::system(cmd.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

const std::string kTinyData =
    "[data]\nper_class = 4\ntest_per_class = 2\nimage_size = 8\n"
    "[model]\nhidden_dim = 16\nembedding_dim = 8\n";

}  // namespace

TEST(ParseConfig, EmptyFileGivesDefaults) {
    const ExperimentConfig cfg = parse("");
    EXPECT_EQ(cfg.seed, ExperimentConfig{}.seed);
    EXPECT_EQ(cfg.losses.k, 6u);
    EXPECT_EQ(cfg.losses.tau, 0.05);
}

TEST(ParseConfig, SectionsSetFields) {
    const ExperimentConfig cfg = parse(
        "[experiment]\nseed = 17\nepochs = 4\nmode = open_set\n"
        "[losses]\nlambda1 = 0.3\nk = 3\nreduction = sum\n"
        "[schedule]\nlr = 0.02\nbatch = 16\n"
        "[data]\nnoise_std = 0.1\n");
    EXPECT_EQ(cfg.seed, 17u);
    EXPECT_EQ(cfg.epochs, 4u);
    EXPECT_EQ(cfg.mode, TaskMode::open_set);
    EXPECT_EQ(cfg.losses.lambda1, 0.3);
    EXPECT_EQ(cfg.losses.k, 3u);
    EXPECT_EQ(cfg.losses.reduction, Reduction::sum);
    EXPECT_EQ(cfg.lr, 0.02);
    EXPECT_EQ(cfg.batch, 16u);
    EXPECT_EQ(cfg.data.shift.noise_std, 0.1);
}

TEST(ParseConfig, PresetAppliesBeforeExplicitKeys) {
    const ExperimentConfig cfg = parse("[ablation]\nfixed_mask_ratio = 0.5\npreset = source_only\n");
    EXPECT_EQ(*cfg.ablation.fixed_mask_ratio, 0.5);
    EXPECT_FALSE(cfg.ablation.use_memory_bank);
}

TEST(ParseConfig, UnknownKeyOrSectionIsError) {
    EXPECT_THROW(parse("[losses]\nlamda1 = 0.3\n"), ConfigError);
    EXPECT_THROW(parse("[optimizer]\nlr = 0.1\n"), ConfigError);
    EXPECT_THROW(parse("seed = 3\n"), ConfigError);
}

TEST(ParseConfig, BadValuesAreErrors) {
    EXPECT_THROW(parse("[losses]\ntau = abc\n"), ConfigError);
    EXPECT_THROW(parse("[losses]\ntau = 0\n"), ConfigError);
    EXPECT_THROW(parse("[losses]\nk = -1\n"), ConfigError);
    EXPECT_THROW(parse("[experiment]\nmode = half_set\n"), ConfigError);
    EXPECT_THROW(parse("[experiment]\nopenset_threshold = 1\n"), ConfigError);
    EXPECT_THROW(parse("[ablation]\nfixed_mask_ratio = 0\n"), ConfigError);
    EXPECT_THROW(parse("[losses\nk = 1\n"), ConfigError);
}

TEST(LoadConfig, MissingFileIsError) {
    EXPECT_THROW(load_config((scratch() / "absent.ini").string()), ConfigError);
}

TEST(Cli, TrainWritesReports) {
    const auto cfg = write_file("train.ini", "[experiment]\nepochs = 1\n" + kTinyData);
    const auto out = scratch() / "train_out";
    EXPECT_EQ(run_cli("train --config " + cfg.string() + " --seed 2 --ablate l_agree --out " + out.string()), 0);
    for (const char* f : {"losses.csv", "metrics.csv", "checkpoint.bin", "summary.txt"})
        EXPECT_TRUE(fs::exists(out / f)) << f;
    EXPECT_EQ(run_cli("eval --checkpoint " + (out / "checkpoint.bin").string() + " --data " + cfg.string()), 0);
}

TEST(Cli, ConfigErrorsExitTwo) {
    const auto bad = write_file("bad.ini", "[losses]\nbogus = 1\n");
    const auto good = write_file("good.ini", "[experiment]\nepochs = 1\n" + kTinyData);
    EXPECT_EQ(run_cli("train --config " + bad.string()), 2);
    EXPECT_EQ(run_cli("train --config " + good.string() + " --ablate l_everything"), 2);
    EXPECT_EQ(run_cli("train --config " + good.string() + " --fixed-mask-ratio 0"), 2);
    EXPECT_EQ(run_cli("train"), 2);
    EXPECT_EQ(run_cli("frobnicate"), 2);
}

TEST(Cli, DivergentTrainingExitsThree) {
    const auto cfg = write_file("diverge.ini", "[experiment]\nepochs = 2\n[schedule]\nlr = 1e200\n" + kTinyData);
    EXPECT_EQ(run_cli("train --config " + cfg.string() + " --out " + (scratch() / "diverge").string()), 3);
}

TEST(Cli, SweepRunsEveryCombination) {
    const auto cfg = write_file("sweep.ini", "[experiment]\nepochs = 1\n" + kTinyData);
    const auto grid = write_file("grid.ini", "[ablation]\npreset = full,no_l_agree\n[losses]\nk = 2,3\n");
    const auto out = scratch() / "sweep_out";
    ASSERT_EQ(run_cli("sweep --config " + cfg.string() + " --grid " + grid.string() + " --out " + out.string()), 0);
    std::ifstream index(out / "sweep.csv");
    std::string line;
    std::size_t rows = 0;
    std::getline(index, line);
    while (std::getline(index, line)) ++rows;
    EXPECT_EQ(rows, 4u);
}
