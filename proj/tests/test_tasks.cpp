#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

#include "learngene/rng.hpp"
#include "learngene/tasks.hpp"

using namespace lg;

namespace {

Dataset blobs(std::size_t classes, std::size_t per_class, float separation, std::uint64_t seed) {
  SyntheticConfig cfg;
  cfg.family = SyntheticFamily::GaussianBlobs;
  cfg.num_classes = classes;
  cfg.per_class = per_class;
  cfg.input = {1, 4, 4};
  cfg.separation = separation;
  cfg.seed = seed;
  return make_synthetic(cfg);
}

// Nearest class centroid fitted on even-indexed examples, scored on odd ones.
double centroid_probe_accuracy(const Dataset& d) {
  const std::size_t dim = d.example_size();
  std::vector<double> centroid(d.num_classes * dim, 0.0);
  std::vector<std::size_t> count(d.num_classes, 0);
  for (std::size_t i = 0; i < d.size(); i += 2) {
    auto ex = d.example(i);
    for (std::size_t j = 0; j < dim; ++j) centroid[d.labels[i] * dim + j] += ex[j];
    ++count[d.labels[i]];
  }
  for (std::size_t c = 0; c < d.num_classes; ++c)
    for (std::size_t j = 0; j < dim; ++j) centroid[c * dim + j] /= static_cast<double>(count[c]);
  std::size_t correct = 0, total = 0;
  for (std::size_t i = 1; i < d.size(); i += 2) {
    auto ex = d.example(i);
    std::size_t best = 0;
    double best_dist = INFINITY;
    for (std::size_t c = 0; c < d.num_classes; ++c) {
      double dist = 0.0;
      for (std::size_t j = 0; j < dim; ++j) dist += std::pow(ex[j] - centroid[c * dim + j], 2);
      if (dist < best_dist) best_dist = dist, best = c;
    }
    correct += static_cast<int>(best) == d.labels[i];
    ++total;
  }
  return static_cast<double>(correct) / static_cast<double>(total);
}

std::set<std::uint64_t> id_set(const Dataset& d) { return {d.ids.begin(), d.ids.end()}; }

}  // namespace

TEST(SplitClasses, HundredClassesGiveExactDefaultRatios) {
  auto plan = split_classes(100, {}, 1);
  EXPECT_EQ(plan.ancestry_classes.size(), 64u);
  EXPECT_EQ(plan.condense_classes.size(), 16u);
  EXPECT_EQ(plan.descendant_classes.size(), 20u);
  plan.validate();
}

TEST(SplitClasses, SixteenClassesUseLargestRemainder) {
  // quotas 10.24, 2.56, 3.2 -> floors 10, 2, 3; the spare unit goes to .56
  auto plan = split_classes(16, {}, 3);
  EXPECT_EQ(plan.ancestry_classes.size(), 10u);
  EXPECT_EQ(plan.condense_classes.size(), 3u);
  EXPECT_EQ(plan.descendant_classes.size(), 3u);
  std::set<int> all;
  for (auto* part : {&plan.ancestry_classes, &plan.condense_classes, &plan.descendant_classes})
    all.insert(part->begin(), part->end());
  EXPECT_EQ(all.size(), 16u);
}

TEST(SplitClasses, DeterministicPerSeedAndRejectsTooFew) {
  auto a = split_classes(40, {}, 9), b = split_classes(40, {}, 9), c = split_classes(40, {}, 10);
  EXPECT_EQ(a.ancestry_classes, b.ancestry_classes);
  EXPECT_EQ(a.descendant_classes, b.descendant_classes);
  EXPECT_NE(a.ancestry_classes, c.ancestry_classes);
  EXPECT_THROW(split_classes(2, {}, 1), InvalidArgument);
}

TEST(SplitPlan, OverlapIsRejected) {
  SplitPlan plan{{0, 1}, {2}, {1, 3}};
  EXPECT_THROW(plan.validate(), InvalidArgument);
}

TEST(LargestRemainder, SumsToTotalForRandomWeights) {
  SeededRng rng(4);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<double> w(1 + rng.below(6));
    for (auto& x : w) x = rng.uniform_double() + 0.01;
    const std::size_t total = rng.below(500);
    auto parts = largest_remainder(total, w);
    std::size_t sum = 0;
    double wsum = 0.0;
    for (double x : w) wsum += x;
    for (std::size_t i = 0; i < parts.size(); ++i) {
      sum += parts[i];
      EXPECT_LE(std::fabs(static_cast<double>(parts[i]) - total * w[i] / wsum), 1.0);
    }
    EXPECT_EQ(sum, total);
  }
}

TEST(SplitMetaTrain, SixtyPerClassGivesTenAndFifty) {
  Dataset d = blobs(3, 60, 1.0f, 2);
  auto split = split_meta_train(d, 1.0 / 6.0, 5);
  auto meta_by_class = split.meta.indices_by_class();
  auto train_by_class = split.train.indices_by_class();
  for (std::size_t c = 0; c < 3; ++c) {
    EXPECT_EQ(meta_by_class[c].size(), 10u);
    EXPECT_EQ(train_by_class[c].size(), 50u);
  }
  EXPECT_EQ(split.meta.size(), 30u);
}

TEST(SplitMetaTrain, PartitionIsDisjointAndComplete) {
  Dataset d = blobs(4, 13, 1.0f, 2);  // 52 examples, round(52/6) = 9
  auto split = split_meta_train(d, 1.0 / 6.0, 1);
  EXPECT_EQ(split.meta.size(), 9u);
  auto meta = id_set(split.meta), train = id_set(split.train);
  for (auto id : meta) EXPECT_FALSE(train.count(id));
  std::set<std::uint64_t> all = meta;
  all.insert(train.begin(), train.end());
  EXPECT_EQ(all, id_set(d));
  EXPECT_THROW(require_disjoint(split.meta, split.meta, "self"), InvalidArgument);
}

TEST(SplitMetaTrain, RejectsDegenerateFractionAndTinyClasses) {
  Dataset d = blobs(2, 12, 1.0f, 1);
  EXPECT_THROW(split_meta_train(d, 0.0, 1), InvalidArgument);
  EXPECT_THROW(split_meta_train(blobs(2, 5, 1.0f, 1), 1.0 / 6.0, 1), InvalidArgument);
}

TEST(SampleEpisode, FiveWayTenShotSizes) {
  Dataset d = blobs(12, 30, 1.0f, 3);
  SplitPlan plan = split_classes(12, {4, 1, 7}, 2);
  ASSERT_GE(plan.descendant_classes.size(), 5u);
  Episode ep = sample_episode(d, plan, 5, 10, 15, 8);
  EXPECT_EQ(ep.support.size(), 50u);
  EXPECT_EQ(ep.query.size(), 75u);
  for (int c : ep.classes)
    EXPECT_TRUE(std::count(plan.descendant_classes.begin(), plan.descendant_classes.end(), c));
  for (int l : ep.support.labels) EXPECT_LT(l, 5);
}

TEST(SampleEpisode, FullClassUseMakesQueryTheComplement) {
  Dataset d = blobs(6, 8, 1.0f, 3);
  SplitPlan plan{{0, 1}, {2}, {3, 4, 5}};
  Episode ep = sample_episode(d, plan, 3, 3, 5, 1);
  auto s = id_set(ep.support), q = id_set(ep.query);
  std::set<std::uint64_t> both = s;
  both.insert(q.begin(), q.end());
  std::set<std::uint64_t> expected;
  for (std::size_t i = 0; i < d.size(); ++i)
    if (d.labels[i] >= 3) expected.insert(d.ids[i]);
  EXPECT_EQ(both, expected);
  EXPECT_EQ(s.size() + q.size(), expected.size());
}

TEST(SampleEpisode, HundredEpisodesNeverOverlap) {
  Dataset d = blobs(10, 25, 1.0f, 3);
  SplitPlan plan = split_classes(10, {3, 1, 6}, 7);
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    Episode ep = sample_episode(d, plan, 5, 5, 10, seed);
    auto s = id_set(ep.support);
    for (auto id : ep.query.ids) ASSERT_FALSE(s.count(id)) << "episode " << seed;
  }
  EXPECT_THROW(sample_episode(d, plan, 5, 20, 10, 0), InvalidArgument);
}

TEST(LabelNoise, ExactCountNeverOriginalAndDeterministic) {
  Dataset d = blobs(5, 10, 1.0f, 1);
  Dataset same = inject_label_noise(d, {0.0, 3});
  EXPECT_EQ(same.labels, d.labels);
  Dataset a = inject_label_noise(d, {0.2, 3}), b = inject_label_noise(d, {0.2, 3});
  std::size_t flipped = 0;
  for (std::size_t i = 0; i < d.size(); ++i) flipped += a.labels[i] != d.labels[i];
  EXPECT_EQ(flipped, 10u);
  EXPECT_EQ(a.labels, b.labels);
  EXPECT_EQ(a.pixels, d.pixels);
  Dataset one = blobs(2, 10, 1.0f, 1);
  one.num_classes = 1;
  std::fill(one.labels.begin(), one.labels.end(), 0);
  EXPECT_THROW(inject_label_noise(one, {0.5, 1}), InvalidArgument);
}

TEST(SequentialTasks, ShapeAndDeterminism) {
  SplitPlan plan = split_classes(40, {}, 1);
  auto tasks = make_sequential_tasks(plan, 25, 5, 4);
  ASSERT_EQ(tasks.size(), 25u);
  for (const auto& t : tasks) {
    EXPECT_EQ(t.classes.size(), 5u);
    EXPECT_EQ(std::set<int>(t.classes.begin(), t.classes.end()).size(), 5u);
    for (int c : t.classes)
      EXPECT_TRUE(std::count(plan.ancestry_classes.begin(), plan.ancestry_classes.end(), c));
  }
  EXPECT_EQ(make_sequential_tasks(plan, 25, 5, 4)[7].classes, tasks[7].classes);
  EXPECT_EQ(make_sequential_tasks(plan, 1, 5, 4).size(), 1u);
  EXPECT_THROW(make_sequential_tasks(plan, 2, 100, 4), InvalidArgument);
}

TEST(Synthetic, SeparatedBlobsAreLinearlySeparable) {
  EXPECT_GE(centroid_probe_accuracy(blobs(2, 200, 1.0f, 5)), 0.99);
}

TEST(Synthetic, ZeroSeparationIsChance) {
  for (auto family : {SyntheticFamily::GaussianBlobs, SyntheticFamily::TexturedShapes}) {
    SyntheticConfig cfg;
    cfg.family = family;
    cfg.num_classes = 4;
    cfg.per_class = 400;
    cfg.input = {1, 8, 8};
    cfg.separation = 0.0f;
    cfg.seed = 6;
    EXPECT_NEAR(centroid_probe_accuracy(make_synthetic(cfg)), 0.25, 0.05) << to_string(family);
  }
}

TEST(Synthetic, TexturedShapesCarryClassSignal) {
  SyntheticConfig cfg;
  cfg.num_classes = 5;
  cfg.per_class = 100;
  cfg.input = {1, 8, 8};
  cfg.separation = 1.5f;
  cfg.seed = 2;
  EXPECT_GT(centroid_probe_accuracy(make_synthetic(cfg)), 2.0 / 5.0);  // twice chance
}

TEST(Synthetic, SameSeedBitIdentical) {
  SyntheticConfig cfg;
  cfg.input = {3, 8, 8};
  cfg.per_class = 4;
  cfg.seed = 11;
  Dataset a = make_synthetic(cfg), b = make_synthetic(cfg);
  EXPECT_EQ(a.pixels, b.pixels);
  EXPECT_EQ(a.labels, b.labels);
  cfg.seed = 12;
  EXPECT_NE(make_synthetic(cfg).pixels, a.pixels);
}

TEST(ImageDirectory, LoadsManifestAndRawFiles) {
  namespace fs = std::filesystem;
  const fs::path root = fs::temp_directory_path() / "learngene_images_test";
  fs::remove_all(root);
  fs::create_directories(root / "cat");
  fs::create_directories(root / "dog");
  std::ofstream(root / "manifest.json") << R"({"channels":1,"height":2,"width":2,"classes":["cat","dog"]})";
  auto write_raw = [](const fs::path& p, std::vector<unsigned char> bytes) {
    std::ofstream f(p, std::ios::binary);
    f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  };
  write_raw(root / "cat" / "a.raw", {0, 255, 51, 102});
  write_raw(root / "dog" / "b.raw", {255, 255, 0, 0});
  Dataset d = load_image_directory(root);
  EXPECT_EQ(d.provenance, Provenance::File);
  ASSERT_EQ(d.size(), 2u);
  EXPECT_EQ(d.labels, (std::vector<int>{0, 1}));
  EXPECT_FLOAT_EQ(d.pixels[1], 1.0f);
  EXPECT_FLOAT_EQ(d.pixels[2], 0.2f);

  write_raw(root / "dog" / "bad.raw", {1, 2, 3});
  EXPECT_THROW(load_image_directory(root), IoError);
  fs::remove_all(root);
}
