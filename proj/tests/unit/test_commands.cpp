#include <gtest/gtest.h>
#include <json.hpp>

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <sys/wait.h>

#include "latentlens/binio.hpp"
#include "latentlens/checkpoint.hpp"
#include "latentlens/commands.hpp"
#include "latentlens/directions.hpp"
#include "latentlens/png.hpp"

using namespace latentlens;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("latentlens_commands_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p);
  std::stringstream s;
  s << in.rdbuf();
  return s.str();
}

ErrorCategory category_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.category();
  }
  ADD_FAILURE() << "no latentlens::Error thrown";
  return ErrorCategory::shape;
}

void run(const std::string& command, std::map<std::string, std::string> kv) {
  run_command(command, resolve_settings(command, Settings{}, Settings(std::move(kv))), [](const std::string&) {});
}

int cli(const std::string& args) {
  const std::string cmd = std::string(LATENTLENS_CLI) + " " + args + " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

}  // namespace

TEST(Settings, ParsesKeyValueLinesWithComments) {
  const Settings s = parse_key_values("# run\nseed = 7\n  model=gan   # trailing\n\nlr = 2e-4\n");
  EXPECT_EQ(s.integer("seed"), 7);
  EXPECT_EQ(s.str("model"), "gan");
  EXPECT_DOUBLE_EQ(s.real("lr"), 2e-4);
  EXPECT_EQ(category_of([] { parse_key_values("seed 7\n"); }), ErrorCategory::config);
  EXPECT_EQ(category_of([] { parse_key_values("= 7\n"); }), ErrorCategory::config);
}

TEST(Settings, TypedReadsRejectMalformedValues) {
  Settings s;
  s.set("a", "12x");
  s.set("b", "-3");
  s.set("c", "inf");
  s.set("d", "maybe");
  s.set("e", "-6, -3,0,3 ,6");
  EXPECT_EQ(category_of([&] { s.integer("a"); }), ErrorCategory::config);
  EXPECT_EQ(category_of([&] { s.u64("b"); }), ErrorCategory::config);
  EXPECT_EQ(category_of([&] { s.real("c"); }), ErrorCategory::config);
  EXPECT_EQ(category_of([&] { s.flag("d"); }), ErrorCategory::config);
  EXPECT_EQ(category_of([&] { s.str("missing"); }), ErrorCategory::config);
  EXPECT_EQ(s.reals("e"), (std::vector<double>{-6, -3, 0, 3, 6}));
}

TEST(Settings, ResolveLayersDefaultsFileAndOverrides) {
  Settings file, over;
  file.set("model", "gan");
  file.set("batch", "16");
  over.set("batch", "8");
  const Settings s = resolve_settings("train", file, over);
  EXPECT_EQ(s.str("batch"), "8");
  EXPECT_EQ(s.str("epochs"), "25");
  EXPECT_EQ(s.str("channels"), "64");
  EXPECT_EQ(s.str("lr"), "2e-4");
  const Settings v = resolve_settings("train", Settings{}, Settings{});
  EXPECT_EQ(v.str("epochs"), "15");
  EXPECT_EQ(v.str("channels"), "8");
  EXPECT_EQ(v.str("lr"), "1e-4");
  EXPECT_EQ(v.str("latent_dim"), "32");
}

TEST(Settings, ResolveRejectsUnknownKeysAndCommands) {
  Settings bad;
  bad.set("epoch", "3");
  EXPECT_EQ(category_of([&] { resolve_settings("train", bad, Settings{}); }), ErrorCategory::config);
  EXPECT_EQ(category_of([] { resolve_settings("fit", Settings{}, Settings{}); }), ErrorCategory::config);
  Settings model;
  model.set("model", "flow");
  EXPECT_EQ(category_of([&] { resolve_settings("train", Settings{}, model); }), ErrorCategory::config);
  for (auto c : kCommands) EXPECT_FALSE(command_keys(std::string(c)).empty()) << c;
}

TEST(Settings, SnapshotRoundTripsThroughReadSettingsFile) {
  const fs::path dir = scratch("snapshot");
  Settings over;
  over.set("k", "12");
  over.set("out", "x");
  const Settings s = resolve_settings("discover", Settings{}, over);
  write_settings_snapshot(dir / "config.json", "discover", s);
  const auto j = nlohmann::json::parse(slurp(dir / "config.json"));
  EXPECT_EQ(j["command"], "discover");
  EXPECT_EQ(read_settings_file(dir / "config.json").values(), s.values());
  write_text_atomic(dir / "broken.json", "{\"settings\": 3}");
  EXPECT_EQ(category_of([&] { read_settings_file(dir / "broken.json"); }), ErrorCategory::format);
}

// End-to-end on a tiny corpus: every command writes what it documents.
class TinyPipeline : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    root_ = scratch("pipeline");
    run("gen-data", {{"out", (root_ / "data").string()}, {"n", "160"}, {"seed", "3"}});
    run("train", {{"out", (root_ / "vae").string()},
                  {"data", data()},
                  {"epochs", "1"},
                  {"channels", "2"},
                  {"batch", "16"},
                  {"fid_samples", "20"}});
    run("train", {{"out", (root_ / "gan").string()},
                  {"data", data()},
                  {"model", "gan"},
                  {"epochs", "1"},
                  {"channels", "8"},
                  {"batch", "16"},
                  {"fid_samples", "20"},
                  {"extractor", (root_ / "vae" / "extractor.llck").string()}});
    run("discover", {{"out", (root_ / "dirs").string()},
                     {"checkpoint", vae()},
                     {"k", "4"},
                     {"iters", "30"},
                     {"batch", "8"},
                     {"log_every", "10"},
                     {"constraint_every", "10"},
                     {"width", "4"}});
  }
  static std::string data() { return (root_ / "data" / "dataset.llds").string(); }
  static std::string vae() { return (root_ / "vae" / "vae.llck").string(); }
  static std::string dirs() { return (root_ / "dirs" / "directions.llck").string(); }
  static inline fs::path root_;
};

TEST_F(TinyPipeline, TrainWritesLogsCheckpointsAndFiniteFid) {
  for (const char* f : {"config.json", "vae_log.csv", "vae_fid.csv", "vae.llck", "extractor.llck"})
    EXPECT_TRUE(fs::exists(root_ / "vae" / f)) << f;
  for (const char* f : {"config.json", "gan_log.csv", "gan_fid.csv", "gan.llck"})
    EXPECT_TRUE(fs::exists(root_ / "gan" / f)) << f;
  const std::string fid = slurp(root_ / "vae" / "vae_fid.csv");
  ASSERT_EQ(fid.rfind("epoch,fid\n1,", 0), 0u) << fid;
  EXPECT_TRUE(std::isfinite(std::stod(fid.substr(std::string("epoch,fid\n1,").size()))));
  EXPECT_EQ(slurp(root_ / "vae" / "vae_log.csv").rfind("step,total,recon,kld,epoch\n", 0), 0u);
  EXPECT_EQ(slurp(root_ / "gan" / "gan_log.csv").rfind("step,d_loss,g_loss,sigma,epoch\n", 0), 0u);
}

TEST_F(TinyPipeline, GanTrainingNeedsAnExtractor) {
  EXPECT_EQ(category_of([] {
              run("train", {{"out", (root_ / "gan2").string()}, {"data", data()}, {"model", "gan"}, {"epochs", "1"}});
            }),
            ErrorCategory::config);
}

TEST_F(TinyPipeline, DiscoverWritesMetricsConstraintsAndSidecar) {
  EXPECT_EQ(slurp(root_ / "dirs" / "metrics.csv").substr(0, 16), "iter,L_cl,L_s,RC");
  const std::string c = slurp(root_ / "dirs" / "constraints.csv");
  EXPECT_EQ(std::count(c.begin(), c.end(), '\n'), 4) << c;
  const DirectionsSidecar side = read_sidecar(dirs());
  EXPECT_EQ(side.k, 4);
  EXPECT_EQ(side.d, 32);
  EXPECT_LT(load_direction_matrix(dirs()).constraint_error(), 1e-5);
}

TEST_F(TinyPipeline, OrthonormalModeNeedsKAtMostD) {
  EXPECT_EQ(category_of([] {
              run("discover", {{"out", (root_ / "wide").string()},
                               {"checkpoint", vae()},
                               {"k", "33"},
                               {"mode", "orthonormal"},
                               {"iters", "1"}});
            }),
            ErrorCategory::config);
}

TEST_F(TinyPipeline, EvalWritesReportAndCorrelationTable) {
  run("eval", {{"out", (root_ / "eval").string()},
               {"checkpoint", vae()},
               {"directions", dirs()},
               {"data", data()},
               {"extractor", (root_ / "vae" / "extractor.llck").string()},
               {"n_rca", "40"},
               {"n_z", "3"},
               {"grid_points", "5"},
               {"random_baseline", "true"},
               {"random_count", "2"},
               {"interp_pairs", "2"},
               {"fid_samples", "20"}});
  const auto j = nlohmann::json::parse(slurp(root_ / "eval" / "eval.json"));
  EXPECT_EQ(j["K"], 4);
  EXPECT_EQ(j["rca"]["samples"], 40);
  EXPECT_TRUE(j["fid"].is_number());
  EXPECT_EQ(j["correlation"].size(), 4u);
  EXPECT_EQ(j["well_posed"].size(), 5u);
  EXPECT_EQ(j["random_baseline"].size(), 2u);
  EXPECT_EQ(j["interpolation"]["pairs"].size(), 2u);
  EXPECT_EQ(slurp(root_ / "eval" / "correlation.csv").rfind("direction,factor,rho,abs_rho,best_factor\n", 0), 0u);
}

TEST_F(TinyPipeline, RenderWritesGridsAndFrames) {
  run("render", {{"out", (root_ / "render").string()},
                 {"checkpoint", vae()},
                 {"directions", dirs()},
                 {"ks", "1"},
                 {"alphas", "3,-3,0"},
                 {"n_z", "2"},
                 {"frames", "4"}});
  const Gray8Image grid = decode_png(read_file(root_ / "render" / "grid_k1.png"));
  EXPECT_EQ(grid.height, 2 * 32);
  EXPECT_EQ(grid.width, 3 * 32);
  EXPECT_TRUE(fs::exists(root_ / "render" / "frames" / "k1" / "frame_003.png"));
  EXPECT_FALSE(fs::exists(root_ / "render" / "grid_k0.png"));
}

TEST_F(TinyPipeline, DirectionsForAnotherGeneratorAreRejected) {
  EXPECT_EQ(category_of([] {
              run("render", {{"out", (root_ / "mismatch").string()},
                             {"checkpoint", (root_ / "gan" / "gan.llck").string()},
                             {"directions", dirs()}});
            }),
            ErrorCategory::config);
}

TEST_F(TinyPipeline, CliExitCodesFollowErrorCategories) {
  EXPECT_EQ(cli("--help"), 0);
  EXPECT_EQ(cli("train --epoch 3"), 5);
  EXPECT_EQ(cli("train --set epoch=3 --out " + (root_ / "x").string()), 5);
  EXPECT_EQ(cli("train --out " + (root_ / "x").string() + " --data " + (root_ / "nope.llds").string()), 4);
  write_text_atomic(root_ / "junk.llds", "not a dataset");
  EXPECT_EQ(cli("train --out " + (root_ / "x").string() + " --data " + (root_ / "junk.llds").string()), 3);
  EXPECT_EQ(cli("gen-data --out " + (root_ / "cli_data").string() + " --n 4 --no-noise"), 0);
  EXPECT_EQ(read_settings_file(root_ / "cli_data" / "config.json").str("noise"), "false");
}
