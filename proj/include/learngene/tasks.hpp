#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "learngene/netgraph.hpp"
#include "learngene/tensor.hpp"

namespace lg {

enum class Provenance { Synthetic, File };

/// Labelled image examples stored contiguously, [n, C, H, W].
struct Dataset {
  InputSpec input;
  std::size_t num_classes = 0;
  std::vector<float> pixels;
  std::vector<int> labels;
  std::vector<std::uint64_t> ids;
  Provenance provenance = Provenance::Synthetic;

  std::size_t size() const { return labels.size(); }
  std::size_t example_size() const { return input.channels * input.height * input.width; }
  std::span<const float> example(std::size_t i) const {
    return {pixels.data() + i * example_size(), example_size()};
  }
  /// Indices of the examples of every class.
  std::vector<std::vector<std::size_t>> indices_by_class() const;

  /// Examples at `indices`, labels unchanged.
  Dataset subset(std::span<const std::size_t> indices) const;
  /// Examples whose label is in `classes`, relabelled to their position there.
  Dataset select_classes(std::span<const int> classes) const;

  /// Throws InvalidArgument when labels are out of range, ids repeat or the
  /// pixel buffer does not match.
  void validate() const;
};

struct Batch {
  Tensor inputs;  // [B, C, H, W]
  std::vector<int> labels;
};

Batch make_batch(const Dataset& data, std::span<const std::size_t> indices);
Batch full_batch(const Dataset& data);

struct SplitRatios {
  double ancestry = 64;
  double condense = 16;
  double descendant = 20;
};

/// Disjoint class partition plus the meta/train fraction of the condense part.
struct SplitPlan {
  std::vector<int> ancestry_classes;
  std::vector<int> condense_classes;
  std::vector<int> descendant_classes;
  double meta_fraction = 1.0 / 6.0;
  double train_fraction = 5.0 / 6.0;
  std::uint64_t seed = 0;

  /// Throws InvalidArgument unless the three class sets are pairwise
  /// disjoint and the fractions sum to one.
  void validate() const;
};

/// Largest-remainder apportionment of `total` units over `weights`; ties go
/// to the lower index.
std::vector<std::size_t> largest_remainder(std::size_t total, std::span<const double> weights);

SplitPlan split_classes(std::size_t num_classes, const SplitRatios& ratios, std::uint64_t seed);

struct MetaTrainSplit {
  Dataset meta;   // D-hat
  Dataset train;  // D
};

/// Stratified per class; |meta| = round(n * meta_fraction).
MetaTrainSplit split_meta_train(const Dataset& condense_part, double meta_fraction, std::uint64_t seed);

/// Throws InvalidArgument if any example id appears in both datasets.
void require_disjoint(const Dataset& a, const Dataset& b, const std::string& what);

struct Episode {
  std::vector<int> classes;  // original class ids, position = episode label
  std::size_t ways = 0, shots = 0, queries = 0;
  Dataset support;
  Dataset query;
  std::uint64_t seed = 0;
};

/// N-way K-shot episode over the descendant classes of `plan`.
Episode sample_episode(const Dataset& data, const SplitPlan& plan, std::size_t ways, std::size_t shots,
                       std::size_t queries, std::uint64_t seed);

struct NoiseSpec {
  double ratio = 0.0;
  std::uint64_t seed = 0;
};

/// Copy of `data` with exactly round(ratio * n) labels moved to a uniformly
/// chosen different class.
Dataset inject_label_noise(const Dataset& data, const NoiseSpec& spec);

struct SequentialTask {
  std::vector<int> classes;
};

/// Classes are distinct within a task and may repeat across tasks.
std::vector<SequentialTask> make_sequential_tasks(const SplitPlan& plan, std::size_t num_tasks,
                                                  std::size_t classes_per_task, std::uint64_t seed);

enum class SyntheticFamily { GaussianBlobs, TexturedShapes };
SyntheticFamily parse_synthetic_family(const std::string& name);
std::string to_string(SyntheticFamily family);

struct SyntheticConfig {
  SyntheticFamily family = SyntheticFamily::TexturedShapes;
  std::size_t num_classes = 16;
  std::size_t per_class = 60;
  InputSpec input;
  /// Signal amplitude relative to unit pixel noise; 0 gives pure noise.
  float separation = 1.0f;
  std::uint64_t seed = 0;
};

Dataset make_synthetic(const SyntheticConfig& config);

/// Loads <root>/manifest.json ({"channels","height","width","classes":[...]})
/// and <root>/<class>/*.raw files of exactly C*H*W unsigned bytes, planar.
Dataset load_image_directory(const std::filesystem::path& root);

}  // namespace lg
