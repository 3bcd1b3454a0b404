#include <gtest/gtest.h>

#include <sys/wait.h>

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "learngene/checkpoint.hpp"
#include "learngene/config.hpp"
#include "learngene/experiments.hpp"
#include "learngene/metrics.hpp"
#include "learngene/rng.hpp"

using namespace lg;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

fs::path scratch_dir(const std::string& name) {
  fs::path p = fs::temp_directory_path() / ("learngene_harness_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void spit(const fs::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  out << text;
}

// Small enough that a full pipeline finishes in a few seconds.
json tiny_config_json(const fs::path& out) {
  return {
      {"run", {{"id", "tiny"}, {"seed", 11}, {"out", out.string()}}},
      {"data", {{"classes", 20}, {"per_class", 24}, {"height", 8}, {"width", 8}, {"separation", 2.0}}},
      {"ancestry", {{"depth", 5}, {"widths", {4, 4, 6, 6, 6}}, {"epochs", 2}, {"lr", 0.1}, {"batch_size", 16}}},
      {"condense",
       {{"pseudo_depth", 3}, {"pseudo_widths", {4, 6, 6}}, {"iterations", 16}, {"inner_batch", 8}, {"meta_batch", 4}}},
      {"descendant", {{"depth", 5}, {"epochs", 3}, {"lr", 0.05}, {"batch_size", 4}}},
      {"episode", {{"ways", 3}, {"shots", 2}, {"queries", 3}, {"count", 2}}},
      {"compare", {{"methods", {"auto-learngene", "from-scratch"}}, {"seeds", 5}}},
      {"sweep", {{"lrs", {0.05}}, {"weight_decays", {0.0}}, {"methods", {"auto-learngene", "from-scratch"}}, {"seeds", 1}}},
      {"evolution", {{"tasks", 1}, {"classes_per_task", 3}, {"steps_per_task", 4}, {"episodes", 1}}},
      {"stability", {{"trials", 2}}},
  };
}

RunConfig tiny_config(const fs::path& out) { return parse_run_config(tiny_config_json(out).dump()); }

Model small_model(std::uint64_t seed = 5) {
  ModelConfig cfg;
  cfg.family = Family::TinyCnn;
  cfg.depth = 3;
  cfg.widths = {3, 4, 4};
  cfg.num_classes = 4;
  cfg.input = {1, 6, 6};
  return build_model(cfg, seed);
}

void expect_bit_equal(const Model& a, const Model& b) {
  ASSERT_EQ(a.layers.size(), b.layers.size());
  EXPECT_EQ(a.family, b.family);
  EXPECT_EQ(a.role, b.role);
  EXPECT_EQ(a.inherited, b.inherited);
  EXPECT_EQ(a.lineage, b.lineage);
  for (std::size_t i = 0; i < a.layers.size(); ++i) {
    ASSERT_EQ(a.layers[i].spec, b.layers[i].spec);
    ASSERT_EQ(a.layers[i].params.size(), b.layers[i].params.size());
    for (std::size_t j = 0; j < a.layers[i].params.size(); ++j) {
      auto x = a.layers[i].params[j].value.data();
      auto y = b.layers[i].params[j].value.data();
      ASSERT_EQ(std::memcmp(x.data(), y.data(), x.size_bytes()), 0);
    }
    for (std::size_t j = 0; j < a.layers[i].buffers.size(); ++j) {
      auto x = a.layers[i].buffers[j].value.data();
      auto y = b.layers[i].buffers[j].value.data();
      ASSERT_EQ(std::memcmp(x.data(), y.data(), x.size_bytes()), 0);
    }
  }
  EXPECT_EQ(a.checksum(), b.checksum());
}

int run_cli(const std::string& args) {
  const std::string cmd = std::string(LEARNGENE_CLI) + " " + args + " > /dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

}  // namespace

// ---------------------------------------------------------------- checkpoint

TEST(Checkpoint, ModelRoundTripIsBitExact) {
  const auto dir = scratch_dir("ckpt_model");
  Model m = small_model();
  m.inherited = {0, 2};
  m.role = ModelRole::Descendant;
  m.lineage = 1234;
  write_checkpoint(m, dir / "m.ckpt");
  expect_bit_equal(m, read_model_checkpoint(dir / "m.ckpt"));
}

TEST(Checkpoint, BundleRoundTripKeepsLayersAndScores) {
  const auto dir = scratch_dir("ckpt_bundle");
  Model m = small_model(9);
  const std::vector<std::size_t> sel{1, 3};
  const auto bundle = extract_learngene(m, sel, 77);
  write_checkpoint(bundle, dir / "b.ckpt");
  const auto back = read_bundle_checkpoint(dir / "b.ckpt");
  EXPECT_EQ(back.layer_numbers, bundle.layer_numbers);
  EXPECT_EQ(back.score_hash, bundle.score_hash);
  EXPECT_EQ(back.parameter_count(), bundle.parameter_count());
  ASSERT_EQ(back.layers.size(), bundle.layers.size());
  for (std::size_t i = 0; i < back.layers.size(); ++i) {
    auto x = back.layers[i].params[0].value.data();
    auto y = bundle.layers[i].params[0].value.data();
    EXPECT_TRUE(std::equal(x.begin(), x.end(), y.begin(), y.end()));
  }
}

TEST(Checkpoint, TensorTableCoversTheBlobExactly) {
  const auto dir = scratch_dir("ckpt_table");
  write_checkpoint(small_model(), dir / "m.ckpt");
  const auto manifest = inspect_checkpoint(dir / "m.ckpt");
  EXPECT_EQ(manifest.version, kCheckpointVersion);
  std::size_t next = 0;
  for (const auto& t : manifest.tensors) {
    EXPECT_EQ(t.offset, next) << t.name;
    EXPECT_EQ(t.length, shape_numel(t.shape) * sizeof(float)) << t.name;
    next += t.length;
  }
  EXPECT_EQ(next, manifest.blob_bytes);
  EXPECT_EQ(fs::file_size(blob_path(dir / "m.ckpt")), manifest.blob_bytes);
}

TEST(Checkpoint, EveryBlobByteFlipIsDetected) {
  const auto dir = scratch_dir("ckpt_blob_flip");
  write_checkpoint(small_model(), dir / "m.ckpt");
  const std::string original = slurp(blob_path(dir / "m.ckpt"));
  for (std::size_t i = 0; i < original.size(); i += 7) {
    std::string bad = original;
    bad[i] = static_cast<char>(bad[i] ^ 0x10);
    spit(blob_path(dir / "m.ckpt"), bad);
    EXPECT_THROW(read_model_checkpoint(dir / "m.ckpt"), IoError) << "byte " << i;
  }
}

TEST(Checkpoint, EveryManifestByteFlipIsDetected) {
  const auto dir = scratch_dir("ckpt_manifest_flip");
  write_checkpoint(small_model(), dir / "m.ckpt");
  const std::string original = slurp(dir / "m.ckpt");
  for (std::size_t i = 0; i < original.size(); i += 3) {
    std::string bad = original;
    bad[i] = static_cast<char>(bad[i] ^ 0x01);
    spit(dir / "m.ckpt", bad);
    EXPECT_THROW(read_model_checkpoint(dir / "m.ckpt"), IoError) << "byte " << i;
  }
}

TEST(Checkpoint, VersionMismatchRejected) {
  const auto dir = scratch_dir("ckpt_version");
  write_checkpoint(small_model(), dir / "m.ckpt");
  json j = json::parse(slurp(dir / "m.ckpt"));
  j["version"] = kCheckpointVersion + 1;
  spit(dir / "m.ckpt", j.dump(2) + "\n");
  EXPECT_THROW(inspect_checkpoint(dir / "m.ckpt"), IoError);
}

TEST(Checkpoint, MissingFilesAndWrongRole) {
  const auto dir = scratch_dir("ckpt_missing");
  EXPECT_THROW(read_model_checkpoint(dir / "none.ckpt"), IoError);
  write_checkpoint(small_model(), dir / "m.ckpt");
  EXPECT_THROW(read_bundle_checkpoint(dir / "m.ckpt"), IoError);
  fs::remove(blob_path(dir / "m.ckpt"));
  EXPECT_THROW(read_model_checkpoint(dir / "m.ckpt"), IoError);
}

TEST(Checkpoint, RandomizedModelsRoundTrip) {
  const auto dir = scratch_dir("ckpt_random");
  SeededRng rng(21);
  for (int trial = 0; trial < 20; ++trial) {
    ModelConfig cfg;
    cfg.family = static_cast<Family>(rng.below(4));
    cfg.depth = 1 + rng.below(3);
    cfg.widths = {cfg.family == Family::TinyTransformer ? 4 : 2 + rng.below(4)};
    cfg.num_classes = 2 + rng.below(3);
    cfg.input = {1, 4, 4};
    cfg.patch = 2;
    Model m = build_model(cfg, rng.next_u64());
    write_checkpoint(m, dir / "r.ckpt");
    expect_bit_equal(m, read_model_checkpoint(dir / "r.ckpt"));
  }
}

// ---------------------------------------------------------------- metrics

TEST(Metrics, CsvRowRoundTripsAtSixDigits) {
  const MetricsRow row{"run-a", "descendant", 7, "test", 1.23456789, 0.333333333, 0.0, 42};
  const std::string line = format_csv_row(row);
  EXPECT_EQ(line, "run-a,descendant,7,test,1.23457,0.333333,0,42");
  const MetricsRow back = parse_csv_row(line);
  EXPECT_EQ(back.run_id, row.run_id);
  EXPECT_EQ(back.iter, row.iter);
  EXPECT_NEAR(back.loss, row.loss, 1e-5);
  EXPECT_NEAR(back.accuracy, row.accuracy, 1e-6);
  EXPECT_EQ(back.seed, row.seed);
}

TEST(Metrics, MalformedRowRejected) {
  EXPECT_THROW(parse_csv_row("a,b,1,test,0.5"), IoError);
  EXPECT_THROW(parse_csv_row("a,b,x,test,0.5,0.5,0,1"), IoError);
}

TEST(Metrics, EmptyEmitLeavesFilesUntouched) {
  const auto dir = scratch_dir("metrics_empty");
  emit_metrics({}, dir / "m.csv", dir / "m.jsonl");
  EXPECT_FALSE(fs::exists(dir / "m.csv"));
  EXPECT_FALSE(fs::exists(dir / "m.jsonl"));
}

TEST(Metrics, AppendsKeepOrderAndOneHeader) {
  const auto dir = scratch_dir("metrics_order");
  std::vector<MetricsRow> first{{"r", "p", 0, "train", 2.0, 0.1, 0.0, 1}, {"r", "p", 1, "train", 1.5, 0.4, 0.0, 1}};
  std::vector<MetricsRow> second{{"r", "p", 2, "train", 1.0, 0.7, 0.0, 1}};
  emit_metrics(first, dir / "m.csv", dir / "m.jsonl");
  emit_metrics(second, dir / "m.csv", dir / "m.jsonl");
  const std::string text = slurp(dir / "m.csv");
  EXPECT_EQ(text.find(kMetricsHeader), 0u);
  EXPECT_EQ(text.find(kMetricsHeader, 1), std::string::npos);
  const auto rows = read_metrics_csv(dir / "m.csv");
  ASSERT_EQ(rows.size(), 3u);
  for (std::size_t i = 0; i < rows.size(); ++i) EXPECT_EQ(rows[i].iter, i);
  std::ifstream jl(dir / "m.jsonl");
  std::string line;
  std::size_t n = 0;
  while (std::getline(jl, line)) EXPECT_EQ(json::parse(line)["iter"], n++);
  EXPECT_EQ(n, 3u);
}

TEST(Metrics, LogRejectsBackwardsIterations) {
  MetricsLog log;
  log.append({{"r", "p", 3, "train", 0, 0, 0, 1}});
  log.append({{"r", "q", 0, "train", 0, 0, 0, 1}});
  EXPECT_THROW(log.append({{"r", "p", 2, "train", 0, 0, 0, 1}}), InvalidArgument);
}

TEST(Metrics, LogKeepsRowsWhenFilesFail) {
  const auto dir = scratch_dir("metrics_fail");
  spit(dir / "blocker", "x");
  MetricsLog log(dir / "blocker");  // a file, not a directory
  log.append({{"r", "p", 0, "train", 1, 0.5, 0, 1}});
  EXPECT_EQ(log.rows().size(), 1u);
  EXPECT_FALSE(log.errors().empty());
}

// ---------------------------------------------------------------- config

TEST(Config, MinimalConfigGetsDefaults) {
  const auto c = parse_run_config(R"({"run": {"seed": 3}})");
  EXPECT_EQ(c.seed, 3u);
  EXPECT_EQ(c.ancestry.depth, 5u);
  EXPECT_EQ(c.episode.ways, 5u);
  EXPECT_EQ(c.episode.shots, 10u);
  EXPECT_DOUBLE_EQ(c.condense.meta_lr, 1e-4);
  EXPECT_EQ(c.out, fs::path("runs") / "run");
}

TEST(Config, RejectsUnknownKeysTypesAndMissingSeed) {
  EXPECT_THROW(parse_run_config(R"({"run": {"id": "x"}})"), InvalidArgument);
  EXPECT_THROW(parse_run_config(R"({"run": {"seed": 1}, "optimizer": {}})"), InvalidArgument);
  EXPECT_THROW(parse_run_config(R"({"run": {"seed": 1}, "ancestry": {"depht": 4}})"), InvalidArgument);
  EXPECT_THROW(parse_run_config(R"({"run": {"seed": 1}, "ancestry": {"depth": "four"}})"), InvalidArgument);
  EXPECT_THROW(parse_run_config(R"({"run": {"seed": -1}})"), InvalidArgument);
  EXPECT_THROW(parse_run_config("{not json"), InvalidArgument);
}

TEST(Config, RejectsInconsistentValues) {
  EXPECT_THROW(parse_run_config(R"({"run": {"seed": 1}, "compare": {"seeds": 3}})"), InvalidArgument);
  EXPECT_THROW(parse_run_config(R"({"run": {"seed": 1}, "compare": {"methods": ["magic"]}})"), InvalidArgument);
  EXPECT_THROW(parse_run_config(R"({"run": {"seed": 1}, "stability": {"trials": 1}})"), InvalidArgument);
  EXPECT_THROW(parse_run_config(R"({"run": {"seed": 1}, "noise": {"ratio": 1.5}})"), InvalidArgument);
  EXPECT_THROW(parse_run_config(R"({"run": {"seed": 1}, "ancestry": {"depth": 5, "widths": [4, 4]}})"),
               InvalidArgument);
}

TEST(Config, ExplicitSplitsMustBeDisjoint) {
  const std::string base = R"({"run": {"seed": 1}, "data": {"classes": 13}, "split": )";
  const auto ok = parse_run_config(base +
                                   R"({"ancestry_classes": [0,1,2,3,4,5], "condense_classes": [6,7],
                                       "descendant_classes": [8,9,10,11,12]}})");
  const auto plan = make_split_plan(ok, 13, 1);
  EXPECT_EQ(plan.condense_classes, (std::vector<int>{6, 7}));
  EXPECT_THROW(parse_run_config(base + R"({"ancestry_classes": [0,1,2,3,4,5], "condense_classes": [5,6],
                                           "descendant_classes": [8,9,10,11,12]}})"),
               InvalidArgument);
}

TEST(Config, DumpParsesBackToTheSameConfig) {
  const auto dir = scratch_dir("config_dump");
  const auto c = tiny_config(dir);
  const std::string once = dump_run_config(c);
  EXPECT_EQ(dump_run_config(parse_run_config(once)), once);
}

TEST(Config, LoadMissingFileIsIoError) {
  EXPECT_THROW(load_run_config("/nonexistent/config.json"), IoError);
}

TEST(Config, MethodNames) {
  for (auto m : {Method::AutoLearngene, Method::FromScratch, Method::HeurLearngene, Method::FullTransfer})
    EXPECT_EQ(parse_method(to_string(m)), m);
  EXPECT_THROW(parse_method("auto"), InvalidArgument);
}

// ---------------------------------------------------------------- baselines

TEST(Heuristic, SmallestFirstTiesToLowerIndex) {
  const std::vector<double> g{0.5, 0.1, 0.3, 0.1, 0.9};
  EXPECT_EQ(select_smallest(g, 1), (std::vector<std::size_t>{2}));
  EXPECT_EQ(select_smallest(g, 2), (std::vector<std::size_t>{2, 4}));
  EXPECT_EQ(select_smallest(g, 3), (std::vector<std::size_t>{2, 3, 4}));
  const std::vector<double> flat{0.2, 0.2, 0.2};
  EXPECT_EQ(select_smallest(flat, 2), (std::vector<std::size_t>{1, 2}));
  EXPECT_THROW(select_smallest(g, 0), InvalidArgument);
  EXPECT_THROW(select_smallest(g, 6), InvalidArgument);
}

TEST(Heuristic, DeadLayerHasZeroGradientAndIsPickedFirst) {
  ModelConfig cfg;
  cfg.family = Family::TinyMlp;
  cfg.depth = 3;
  cfg.widths = {6, 6, 6};
  cfg.num_classes = 3;
  cfg.input = {1, 4, 4};
  Model m = build_model(cfg, 4);
  // First layer: zero weights and a large negative bias, so ReLU is dead and
  // nothing flows back into it. Layers above still get bias gradients.
  for (auto& p : m.layers[0].params) {
    auto v = p.value.mutable_data();
    std::fill(v.begin(), v.end(), p.name == "bias" ? -100.0f : 0.0f);
  }
  SyntheticConfig sc;
  sc.num_classes = 3;
  sc.per_class = 8;
  sc.input = cfg.input;
  sc.seed = 2;
  const Dataset probe = make_synthetic(sc);
  const std::uint32_t before = m.checksum();
  const auto g = layer_gradient_magnitudes(m, probe);
  EXPECT_EQ(m.checksum(), before);
  ASSERT_EQ(g.size(), 3u);
  EXPECT_EQ(g[0], 0.0);
  EXPECT_GT(g[1], 0.0);
  EXPECT_GT(g[2], 0.0);
  EXPECT_EQ(heuristic_select(m, probe, 1), (std::vector<std::size_t>{1}));
}

TEST(Analysis, LeastSquaresSlopeByHand) {
  const std::vector<double> up{1.0, 2.0, 3.0};
  EXPECT_NEAR(least_squares_slope(up), 1.0, 1e-12);
  // x = 1,2,3 with mean 2; y mean 2; slope = ((-1)(1) + 0 + (1)(0)) / 2.
  const std::vector<double> mixed{3.0, 1.0, 2.0};
  EXPECT_NEAR(least_squares_slope(mixed), -0.5, 1e-12);
  const std::vector<double> one{0.7};
  EXPECT_EQ(least_squares_slope(one), 0.0);
}

TEST(Analysis, EpochsToThresholdCountsTrainingEpochs) {
  std::vector<EpochMetrics> m(5);
  const double acc[] = {0.2, 0.5, 0.85, 0.8, 1.0};
  for (std::size_t e = 0; e < 5; ++e) {
    m[e].epoch = e;
    m[e].test_accuracy = acc[e];
  }
  EXPECT_EQ(epochs_to_threshold(m), 4u);       // 0.9 of 1.0 first reached at epoch 4
  EXPECT_EQ(epochs_to_threshold(m, 0.8), 2u);  // 0.8 reached at epoch 2
  m[0].test_accuracy = 1.0;                    // the initial evaluation never counts
  EXPECT_EQ(epochs_to_threshold(m, 0.5), 1u);
  EXPECT_EQ(epochs_to_threshold(std::span<const EpochMetrics>(m.data(), 1)), 0u);
}

// ---------------------------------------------------------------- experiments

TEST(Pipeline, WritesOutputsAndIsRepeatable) {
  const auto dir = scratch_dir("pipeline");
  const auto c = tiny_config(dir);
  const auto r = cmd_pipeline(c);
  for (const auto& f : r.files) EXPECT_TRUE(fs::exists(f)) << f;
  EXPECT_FALSE(fs::exists(dir / "FAILED"));

  const json table = json::parse(slurp(dir / "score_table.json"));
  double sum = 0.0;
  for (double a : table["normalized"]) sum += a;
  EXPECT_NEAR(sum, 1.0, 1e-6);
  EXPECT_EQ(table["L"], 5);
  EXPECT_EQ(table["K"], 3);
  EXPECT_EQ(table["pairs"].size(), 15u);
  EXPECT_EQ(r.episode_accuracy.size(), 2u);

  const Model ancestry = read_model_checkpoint(dir / "ancestry.ckpt");
  EXPECT_EQ(ancestry.checksum(), r.artifacts.ancestry.checksum());
  const auto bundle = read_bundle_checkpoint(dir / "bundle.ckpt");
  EXPECT_EQ(bundle.layer_numbers, r.artifacts.condense.table.selected);
  EXPECT_LT(bundle.parameter_count(), ancestry.parameter_count());
  const Model descendant = read_model_checkpoint(dir / "descendant.ckpt");
  EXPECT_LT(descendant.parameter_count(), ancestry.parameter_count());
  EXPECT_EQ(descendant.lineage, bundle.ancestry_checksum);

  const json summary = json::parse(slurp(dir / "summary.json"));
  EXPECT_EQ(summary["meta_examples"].get<std::size_t>() * 5, summary["train_examples"].get<std::size_t>());
  EXPECT_TRUE(summary["metrics_errors"].empty());

  const std::string score_table = slurp(dir / "score_table.json");
  const std::string metrics = slurp(dir / "metrics.csv");
  cmd_pipeline(c);
  EXPECT_EQ(slurp(dir / "score_table.json"), score_table);
  EXPECT_EQ(slurp(dir / "metrics.csv"), metrics);
}

TEST(Pipeline, FailureLeavesMarkerAndKeepsErrorType) {
  const auto dir = scratch_dir("pipeline_fail");
  auto c = tiny_config(dir);
  c.data.source = "directory";
  c.data.path = (dir / "no_such_images").string();
  EXPECT_THROW(cmd_pipeline(c), IoError);
  ASSERT_TRUE(fs::exists(dir / "FAILED"));
  EXPECT_NE(slurp(dir / "FAILED").find("data"), std::string::npos);
}

TEST(Compare, FromScratchOnly) {
  const auto dir = scratch_dir("compare_scratch");
  auto c = tiny_config(dir);
  c.compare.methods = {"from-scratch"};
  const auto runs = cmd_compare(c);
  ASSERT_EQ(runs.size(), 1u);
  EXPECT_EQ(runs[0].method, Method::FromScratch);
  EXPECT_EQ(runs[0].final_accuracy.size(), 5u);
  EXPECT_EQ(runs[0].mean_curve.size(), c.descendant.fit.epochs + 1);
  EXPECT_TRUE(fs::exists(dir / "compare.csv"));
  const std::string runs_csv = slurp(dir / "compare_runs.csv");
  EXPECT_EQ(std::count(runs_csv.begin(), runs_csv.end(), '\n'), 6);
}

TEST(Compare, MethodsShareEpisodesAndSeeds) {
  const auto dir = scratch_dir("compare_all");
  auto c = tiny_config(dir);
  c.compare.methods = {"auto-learngene", "from-scratch", "heur-learngene", "full-transfer"};
  const auto art = build_artifacts(c);
  const auto runs = run_compare(art, c, compare_options(c));
  ASSERT_EQ(runs.size(), 4u);
  for (const auto& r : runs) {
    EXPECT_EQ(r.seeds, runs[0].seeds);
    for (double a : r.final_accuracy) EXPECT_TRUE(a >= 0.0 && a <= 1.0);
  }
  for (auto m : {Method::AutoLearngene, Method::FromScratch, Method::HeurLearngene, Method::FullTransfer}) {
    const Model d = make_method_model(m, art, c, 3, 99);
    EXPECT_EQ(d.layers.back().spec.out_dim, 3u);
    if (m == Method::FromScratch) EXPECT_TRUE(d.inherited.empty());
    else EXPECT_FALSE(d.inherited.empty());
  }
}

TEST(Sweep, SinglePointGridHasZeroRange) {
  const auto dir = scratch_dir("sweep_one");
  const auto result = cmd_sweep(tiny_config(dir));
  EXPECT_EQ(result.cells.size(), 2u);
  EXPECT_EQ(result.range(Method::AutoLearngene), 0.0);
  EXPECT_EQ(result.range(Method::FromScratch), 0.0);
  EXPECT_THROW(result.range(Method::FullTransfer), InvalidArgument);
  EXPECT_TRUE(fs::exists(dir / "sweep_ranges.csv"));
}

TEST(Sweep, ThreeByTwoGridGivesSixCellsPerMethod) {
  const auto dir = scratch_dir("sweep_grid");
  auto c = tiny_config(dir);
  c.sweep.lrs = {0.01, 0.05, 0.2};
  c.sweep.weight_decays = {0.0, 5e-4};
  c.descendant.fit.epochs = 1;
  const auto art = build_artifacts(c);
  const auto result = run_sweep(art, c);
  for (auto m : {Method::AutoLearngene, Method::FromScratch}) {
    EXPECT_EQ(std::count_if(result.cells.begin(), result.cells.end(), [&](const SweepCell& s) { return s.method == m; }),
              6);
    EXPECT_GE(result.range(m), 0.0);
  }
}

TEST(Evolution, OneTaskGivesOnePoint) {
  const auto dir = scratch_dir("evolution_one");
  const auto result = cmd_evolution(tiny_config(dir));
  ASSERT_EQ(result.accuracy.size(), 1u);
  EXPECT_EQ(result.selections.size(), 1u);
  EXPECT_EQ(result.slope, 0.0);
  EXPECT_TRUE(fs::exists(dir / "evolution_slope.txt"));
}

TEST(Evolution, RepeatsExactly) {
  const auto dir = scratch_dir("evolution_two");
  auto c = tiny_config(dir);
  c.evolution.tasks = 2;
  const auto a = run_evolution(c);
  const auto b = run_evolution(c);
  ASSERT_EQ(a.accuracy.size(), 2u);
  EXPECT_EQ(a.accuracy, b.accuracy);
  EXPECT_EQ(a.selections, b.selections);
}

TEST(Stability, PlantedRunReportsThePlantedLayer) {
  const auto dir = scratch_dir("stability");
  auto c = tiny_config(dir);
  c.stability.plant = PlantSection{1, 1};
  const auto report = cmd_stability(c);
  EXPECT_EQ(report.seeds.size(), 2u);
  EXPECT_NE(report.seeds[0], report.seeds[1]);
  const json j = json::parse(slurp(dir / "stability.json"));
  EXPECT_EQ(j["planted_layer"], 1);
  EXPECT_EQ(j["trials_containing_planted"].get<std::size_t>(), report.trials_containing(1));
}

TEST(Stability, PlantNeedsMatchingShapes) {
  auto j = tiny_config_json(scratch_dir("stability_bad"));
  j["stability"]["plant_layer"] = 3;  // ancestry layer 3 is 4->6, pseudo layer 1 is 1->4
  j["stability"]["plant_position"] = 1;
  EXPECT_THROW(parse_run_config(j.dump()), InvalidArgument);
}

// ---------------------------------------------------------------- command line

TEST(Cli, ExitCodes) {
  const auto dir = scratch_dir("cli");
  spit(dir / "good.json", tiny_config_json(dir / "out").dump(2));
  spit(dir / "bad.json", R"({"run": {"seed": 1}, "ancestry": {"depht": 4}})");
  EXPECT_EQ(run_cli("--help"), 0);
  EXPECT_EQ(run_cli("pipeline"), 2);
  EXPECT_EQ(run_cli("nonsense"), 2);
  EXPECT_EQ(run_cli("pipeline --config " + (dir / "bad.json").string()), 2);
  EXPECT_EQ(run_cli("pipeline --config " + (dir / "missing.json").string()), 4);
  EXPECT_EQ(run_cli("pipeline --config " + (dir / "good.json").string()), 0);
  EXPECT_EQ(run_cli("inspect-checkpoint " + (dir / "out" / "bundle.ckpt").string()), 0);
  spit(dir / "out" / "bundle.ckpt.bin", "corrupt");
  EXPECT_EQ(run_cli("inspect-checkpoint " + (dir / "out" / "bundle.ckpt").string()), 4);
  EXPECT_EQ(run_cli("pipeline --seed 12 --out " + (dir / "out2").string() + " --config " + (dir / "good.json").string()),
            0);
  EXPECT_EQ(json::parse(slurp(dir / "out2" / "summary.json"))["seed"], 12);
}
