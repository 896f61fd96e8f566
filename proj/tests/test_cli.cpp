#include <gtest/gtest.h>

#include <sys/wait.h>
#include <unistd.h>

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include <json.hpp>

#include "vox2bev/dataset.hpp"
#include "vox2bev/harness.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string binary() {
  const char* b = std::getenv("VOX2BEV_BIN");
  if (!b) throw std::runtime_error("VOX2BEV_BIN is not set; run through ctest");
  return b;
}

std::string slurp(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  std::ostringstream os;
  os << f.rdbuf();
  return os.str();
}

bool files_equal(const std::string& a, const std::string& b) { return slurp(a) == slurp(b); }

struct RunResult {
  int code = -1;
  std::string out;
  std::string err;
};

RunResult run_cli_cmd(const std::string& workdir, const std::string& args) {
  static int counter = 0;
  const std::string so = workdir + "/cmd_stdout_" + std::to_string(counter);
  const std::string se = workdir + "/cmd_stderr_" + std::to_string(counter);
  ++counter;
  const std::string cmd = binary() + " " + args + " >" + so + " 2>" + se;
  const int raw = std::system(cmd.c_str());
  RunResult r;
  r.code = WIFEXITED(raw) ? WEXITSTATUS(raw) : -1;
  r.out = slurp(so);
  r.err = slurp(se);
  return r;
}

std::string scratch_dir() {
  const std::string dir = ::testing::TempDir() + "v2b_cli_" + std::to_string(::getpid());
  fs::create_directories(dir);
  return dir;
}

}  // namespace

TEST(CliBasics, HelpExitsZeroAndListsSubcommands) {
  const std::string dir = scratch_dir();
  RunResult r = run_cli_cmd(dir, "--help");
  EXPECT_EQ(r.code, 0);
  for (const char* sub : {"gen", "train", "track", "eval", "inspect", "stats"})
    EXPECT_NE(r.out.find(sub), std::string::npos) << sub << " missing from help:\n" << r.out;
}

TEST(CliBasics, UnknownSubcommandIsUsageError) {
  const std::string dir = scratch_dir();
  RunResult r = run_cli_cmd(dir, "frobnicate");
  EXPECT_EQ(r.code, 2);
  EXPECT_FALSE(r.err.empty());
}

TEST(CliBasics, MissingRequiredOptionIsUsageError) {
  const std::string dir = scratch_dir();
  RunResult r = run_cli_cmd(dir, "gen --out x.jsonl");
  EXPECT_EQ(r.code, 2);
}

TEST(CliBasics, BadCountIsUsageError) {
  const std::string dir = scratch_dir();
  RunResult r = run_cli_cmd(dir, "gen --spec nope.json --out x.jsonl --seed 1 --count 0");
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("count"), std::string::npos);
}

TEST(CliBasics, MissingSpecFileIsDataError) {
  const std::string dir = scratch_dir();
  RunResult r = run_cli_cmd(dir, "gen --spec " + dir + "/nope.json --out " + dir + "/x.jsonl --seed 1 --count 1");
  EXPECT_EQ(r.code, 3);
}

// ---------------------------------------------------------------------------
// Full pipeline: gen -> train -> track -> eval -> inspect/stats
// ---------------------------------------------------------------------------

class CliPipeline : public ::testing::Test {
 protected:
  static std::string dir;

  static void SetUpTestSuite() {
    dir = scratch_dir() + "_pipe";
    fs::create_directories(dir);

    std::ofstream spec(dir + "/scene.json");
    spec << R"({"archetype":"cuboid-shell","category":"object","frames":4,"clutter":8,)"
         << R"("points_band":[30,40],"surface_jitter":0.01,"motion_jitter":0.005})" << "\n";
    spec.close();

    std::ofstream cfg(dir + "/config.ini");
    cfg << "[model]\nfeature_dim = 4\nmax_samples = 4\nradius1 = 0.8\nradius2 = 1.2\nradius3 = 1.6\n"
        << "[shape]\npoints = 16\nedge_k = 4\n"
        << "[voxel]\nsize = 0.5\nz_half = 1.5\n"
        << "[track]\ntemplate_budget = 32\nsearch_budget = 32\nmargin = 1.0\n"
        << "[train]\nepochs = 1\n";
    cfg.close();

    ASSERT_EQ(run_cli_cmd(dir, "gen --spec " + dir + "/scene.json --out " + dir + "/data.jsonl --seed 5 --count 2").code,
              0);
    ASSERT_EQ(run_cli_cmd(dir, "gen --spec " + dir + "/scene.json --out " + dir + "/data2.jsonl --seed 5 --count 2").code,
              0);
    ASSERT_EQ(run_cli_cmd(dir, "train --data " + dir + "/data.jsonl --config " + dir + "/config.ini --out " + dir +
                                   "/model.v2bp --seed 3")
                  .code,
              0);
    ASSERT_EQ(run_cli_cmd(dir, "track --data " + dir + "/data.jsonl --ckpt " + dir +
                                   "/model.v2bp --scheme first_gt --out " + dir + "/results.csv --seed 7")
                  .code,
              0);
    ASSERT_EQ(run_cli_cmd(dir, "track --data " + dir + "/data.jsonl --ckpt " + dir +
                                   "/model.v2bp --scheme first_gt --out " + dir + "/results2.csv --seed 7")
                  .code,
              0);
  }
};

std::string CliPipeline::dir;

TEST_F(CliPipeline, GenIsDeterministicAndLoadable) {
  EXPECT_TRUE(files_equal(dir + "/data.jsonl", dir + "/data2.jsonl"));
  auto ds = vox2bev::load_dataset(dir + "/data.jsonl");
  ASSERT_EQ(ds.size(), 2u);
  EXPECT_EQ(ds[0].id, "seq000");
  EXPECT_EQ(ds[1].id, "seq001");
  EXPECT_EQ(ds[0].category, "object");
  EXPECT_EQ(ds[0].frames.size(), 4u);
  // per-sequence seeds differ, so the geometry must too
  EXPECT_NE(ds[0].frames[0].cloud.coords.data, ds[1].frames[0].cloud.coords.data);
}

TEST_F(CliPipeline, EchoGtEvalScoresExactlyOneHundred) {
  auto ds = vox2bev::load_dataset(dir + "/data.jsonl");
  std::map<std::string, std::vector<vox2bev::Box3D>> echo;
  for (const auto& s : ds) {
    std::vector<vox2bev::Box3D> boxes;
    for (const auto& fr : s.frames) boxes.push_back(fr.box);
    echo[s.id] = boxes;
  }
  vox2bev::save_results(echo, dir + "/echo.csv");
  RunResult r =
      run_cli_cmd(dir, "eval --data " + dir + "/data.jsonl --results " + dir + "/echo.csv --out " + dir + "/echo.json");
  ASSERT_EQ(r.code, 0) << r.err;
  json rep = json::parse(slurp(dir + "/echo.json"));
  EXPECT_DOUBLE_EQ(rep["overall"]["success"].get<double>(), 100.0);
  EXPECT_DOUBLE_EQ(rep["overall"]["precision"].get<double>(), 100.0);
  EXPECT_EQ(rep["frames"].get<int64_t>(), 8);
  const std::string frames_csv = slurp(dir + "/echo.json.frames.csv");
  EXPECT_EQ(frames_csv.rfind("sequence_id,frame,points_in_gt,iou,distance\n", 0), 0u);
}

TEST_F(CliPipeline, EvalSupportsSparsityBuckets) {
  std::ofstream b(dir + "/buckets.json");
  b << R"({"object": 35})" << "\n";
  b.close();
  RunResult r = run_cli_cmd(dir, "eval --data " + dir + "/data.jsonl --results " + dir + "/echo.csv --buckets " + dir +
                                     "/buckets.json --out " + dir + "/bucketed.json");
  ASSERT_EQ(r.code, 0) << r.err;
  json rep = json::parse(slurp(dir + "/bucketed.json"));
  ASSERT_FALSE(rep["buckets"].empty());
  int64_t total = 0;
  for (const auto& bucket : rep["buckets"]) {
    const std::string name = bucket["name"].get<std::string>();
    EXPECT_TRUE(name == "object:sparse" || name == "object:dense") << name;
    total += bucket["frames"].get<int64_t>();
  }
  EXPECT_EQ(total, rep["frames"].get<int64_t>());
}

TEST_F(CliPipeline, TrainWritesCheckpointConfigEchoAndLossCurve) {
  EXPECT_TRUE(fs::exists(dir + "/model.v2bp"));
  // the config echo parses back to exactly the training configuration
  vox2bev::PipelineConfig original = vox2bev::load_config(dir + "/config.ini");
  vox2bev::PipelineConfig echoed = vox2bev::load_config(dir + "/model.v2bp.ini");
  EXPECT_EQ(vox2bev::config_to_string(echoed), vox2bev::config_to_string(original));
  const std::string loss_csv = slurp(dir + "/model.v2bp.loss.csv");
  EXPECT_EQ(loss_csv.rfind("iteration,total,shape,center,offset,z\n", 0), 0u);
  EXPECT_GT(std::count(loss_csv.begin(), loss_csv.end(), '\n'), 1);
  // the checkpoint itself loads and contains finite tensors
  vox2bev::ParamStore ps = vox2bev::ParamStore::load(dir + "/model.v2bp");
  EXPECT_GT(ps.names().size(), 0u);
  for (const auto& name : ps.names()) EXPECT_TRUE(ps.at(name).all_finite()) << name;
}

TEST_F(CliPipeline, TrackIsDeterministicAndWellFormed) {
  EXPECT_TRUE(files_equal(dir + "/results.csv", dir + "/results2.csv"));
  auto ds = vox2bev::load_dataset(dir + "/data.jsonl");
  auto results = vox2bev::import_results(dir + "/results.csv");
  EXPECT_NO_THROW(vox2bev::validate_results(ds, results));
  ASSERT_EQ(results.size(), 2u);
  for (const auto& [id, boxes] : results) EXPECT_EQ(boxes.size(), 4u) << id;
  // frame-0 output equals the dataset's first GT box
  EXPECT_DOUBLE_EQ(results.at("seq000")[0].cx, ds[0].frames[0].box.cx);
  json rep = json::parse(slurp(dir + "/results.csv.report.json"));
  ASSERT_EQ(rep["sequences"].size(), 2u);
  EXPECT_EQ(rep["sequences"][0]["frames"].get<int64_t>(), 4);
  EXPECT_EQ(rep["sequences"][0]["fallbacks"].size(), 4u);
}

TEST_F(CliPipeline, TrackedResultsEvaluateInRange) {
  RunResult r = run_cli_cmd(
      dir, "eval --data " + dir + "/data.jsonl --results " + dir + "/results.csv --out " + dir + "/tracked.json");
  ASSERT_EQ(r.code, 0) << r.err;
  json rep = json::parse(slurp(dir + "/tracked.json"));
  const double s = rep["overall"]["success"].get<double>();
  const double p = rep["overall"]["precision"].get<double>();
  EXPECT_GE(s, 0.0);
  EXPECT_LE(s, 100.0);
  EXPECT_GE(p, 0.0);
  EXPECT_LE(p, 100.0);
}

TEST_F(CliPipeline, InspectDumpsMapsAndShape) {
  RunResult r = run_cli_cmd(dir, "inspect --ckpt " + dir + "/model.v2bp --data " + dir +
                                     "/data.jsonl --seq seq000 --frame 1 --out-dir " + dir + "/insp --shape");
  ASSERT_EQ(r.code, 0) << r.err;
  for (const char* f : {"pred_heatmap.csv", "pred_heatmap.pgm", "gt_heatmap.csv", "gt_heatmap.pgm", "occupancy.csv",
                        "occupancy.pgm", "shape_points.csv"})
    EXPECT_TRUE(fs::exists(dir + "/insp/" + f)) << f;
  EXPECT_EQ(slurp(dir + "/insp/pred_heatmap.pgm").rfind("P2\n", 0), 0u);
  const std::string shape_csv = slurp(dir + "/insp/shape_points.csv");
  EXPECT_EQ(shape_csv.rfind("x,y,z\n", 0), 0u);
  EXPECT_EQ(std::count(shape_csv.begin(), shape_csv.end(), '\n'), 17);  // header + 16 generated points
}

TEST_F(CliPipeline, InspectRejectsOutOfRangeFrame) {
  RunResult r = run_cli_cmd(dir, "inspect --ckpt " + dir + "/model.v2bp --data " + dir +
                                     "/data.jsonl --seq seq000 --frame 99 --out-dir " + dir + "/insp2");
  EXPECT_EQ(r.code, 3);
  EXPECT_NE(r.err.find("out of range"), std::string::npos);
}

TEST_F(CliPipeline, StatsPrintsHistogram) {
  RunResult r = run_cli_cmd(dir, "stats --data " + dir + "/data.jsonl --bins 0,35");
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(r.out.rfind("bin_lo,bin_hi,count\n", 0), 0u);
  EXPECT_NE(r.out.find("35,inf,"), std::string::npos) << r.out;
  EXPECT_NE(r.out.find("0,35,"), std::string::npos) << r.out;
}

TEST_F(CliPipeline, StatsRejectsBadBinEdge) {
  RunResult r = run_cli_cmd(dir, "stats --data " + dir + "/data.jsonl --bins 0,many");
  EXPECT_EQ(r.code, 2);
}

TEST_F(CliPipeline, BadSchemeIsUsageError) {
  RunResult r = run_cli_cmd(dir, "track --data " + dir + "/data.jsonl --ckpt " + dir +
                                     "/model.v2bp --scheme psychic --out " + dir + "/x.csv");
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("scheme"), std::string::npos);
}

TEST_F(CliPipeline, MissingResultsFileIsDataError) {
  RunResult r = run_cli_cmd(
      dir, "eval --data " + dir + "/data.jsonl --results " + dir + "/nope.csv --out " + dir + "/x.json");
  EXPECT_EQ(r.code, 3);
}

TEST_F(CliPipeline, NonFiniteCheckpointIsNumericError) {
  vox2bev::ParamStore ps = vox2bev::ParamStore::load(dir + "/model.v2bp");
  ps.at(ps.names().front()).data[0] = std::nan("");
  ps.save(dir + "/poisoned.v2bp");
  std::ofstream ini(dir + "/poisoned.v2bp.ini");
  ini << slurp(dir + "/model.v2bp.ini");
  ini.close();
  RunResult r = run_cli_cmd(dir, "track --data " + dir + "/data.jsonl --ckpt " + dir +
                                     "/poisoned.v2bp --scheme first_gt --out " + dir + "/poisoned.csv");
  EXPECT_EQ(r.code, 4);
  EXPECT_NE(r.err.find("numeric failure"), std::string::npos);
}
