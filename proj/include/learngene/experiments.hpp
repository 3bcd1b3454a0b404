#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "learngene/condense.hpp"
#include "learngene/config.hpp"
#include "learngene/inherit.hpp"
#include "learngene/metrics.hpp"
#include "learngene/tasks.hpp"

namespace lg {

/// Data and class partition for one run.
struct Workspace {
  Dataset data;
  SplitPlan plan;
  Dataset ancestry_data;  // relabelled to positions in plan.ancestry_classes
  MetaTrainSplit condense;
};

Workspace prepare_workspace(const RunConfig& config);

ModelConfig ancestry_model_config(const RunConfig& config, std::size_t num_classes);
CondenseConfig condense_config(const RunConfig& config);
TrainConfig ancestry_train_config(const RunConfig& config, std::uint64_t seed);
TrainConfig descendant_train_config(const RunConfig& config, std::uint64_t seed);

/// Converts per-epoch metrics into rows (train and test split per epoch).
std::vector<MetricsRow> epoch_rows(std::span<const EpochMetrics> metrics, const std::string& run_id,
                                   const std::string& phase, std::uint64_t seed, bool with_test);

/// Everything upstream of descendant training.
struct Artifacts {
  Workspace ws;
  Model ancestry;
  CondenseResult condense;
  LearngeneBundle bundle;
};

/// Trains the ancestry, condenses and extracts. `log` may be null.
Artifacts build_artifacts(const RunConfig& config, MetricsLog* log = nullptr);

/// Mean absolute parameter gradient of every counted ancestry layer on
/// `probe` (labels in the ancestry head's range). Leaves the model unchanged.
std::vector<double> layer_gradient_magnitudes(Model& ancestry, const Dataset& probe);
/// The `count` layers with the smallest magnitudes, ties to the lower index,
/// returned ascending (1-based).
std::vector<std::size_t> select_smallest(std::span<const double> magnitudes, std::size_t count);
std::vector<std::size_t> heuristic_select(Model& ancestry, const Dataset& probe, std::size_t count);

/// Untrained descendant for `method`, built for `ways` classes.
Model make_method_model(Method method, const Artifacts& art, const RunConfig& config, std::size_t ways,
                        std::uint64_t seed);

/// First training epoch (1-based) whose test accuracy reaches `fraction` of
/// the final test accuracy; 0 when there are no training epochs.
std::size_t epochs_to_threshold(std::span<const EpochMetrics> metrics, double fraction = 0.9);

struct MethodRuns {
  Method method;
  std::vector<std::uint64_t> seeds;
  std::vector<double> final_accuracy;  // query accuracy after the last epoch
  std::vector<std::size_t> threshold_epoch;
  std::vector<double> mean_curve;  // query accuracy per epoch, mean over seeds

  double mean_accuracy() const;
  double std_accuracy() const;  // sample standard deviation
  double mean_threshold() const;
};

struct CompareOptions {
  std::vector<Method> methods;
  std::size_t seeds = 5;
  std::size_t ways = 5, shots = 10, queries = 15;
  FitSection fit;
  double noise_ratio = 0.0;
  std::string run_id = "compare";
};

CompareOptions compare_options(const RunConfig& config);

/// One episode per seed, shared by every method; each method trains the same
/// epoch budget from the same seed.
std::vector<MethodRuns> run_compare(const Artifacts& art, const RunConfig& config, const CompareOptions& options,
                                    MetricsLog* log = nullptr);

struct SweepCell {
  Method method;
  double lr = 0.0, weight_decay = 0.0;
  double accuracy = 0.0;  // mean over seeds
};

struct SweepResult {
  std::vector<SweepCell> cells;
  /// max - min of the cell accuracies of `method`.
  double range(Method method) const;
};

SweepResult run_sweep(const Artifacts& art, const RunConfig& config, MetricsLog* log = nullptr);

double least_squares_slope(std::span<const double> series);

struct EvolutionResult {
  std::vector<double> accuracy;  // one per task
  std::vector<std::vector<std::size_t>> selections;
  std::uint64_t seed = 0;
  double slope = 0.0;
};

/// Grows the ancestry task by task (replaying earlier tasks), condenses after
/// each task, and scores fresh descendants on a fixed set of episodes.
EvolutionResult run_evolution(const RunConfig& config, MetricsLog* log = nullptr);

/// Pseudo-descendant factory that copies ancestry layer `layer` into
/// pseudo-descendant layer `position` after seeded initialization.
PseudoFactory planted_factory(const Model& ancestry, const CondenseConfig& config, std::size_t num_classes,
                              std::size_t layer, std::size_t position);

StabilityReport run_stability(const RunConfig& config, std::size_t trials, MetricsLog* log = nullptr);

struct PipelineResult {
  Artifacts artifacts;
  std::vector<double> episode_accuracy;
  std::vector<std::filesystem::path> files;
};

/// Writes ancestry and bundle checkpoints, the first descendant, the score
/// table, the convergence report, metrics and a summary under config.out.
PipelineResult cmd_pipeline(const RunConfig& config);
std::vector<MethodRuns> cmd_compare(const RunConfig& config);
SweepResult cmd_sweep(const RunConfig& config);
EvolutionResult cmd_evolution(const RunConfig& config);
StabilityReport cmd_stability(const RunConfig& config);

}  // namespace lg
