#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "learngene/netgraph.hpp"
#include "learngene/tasks.hpp"

namespace lg {

/// Selected ancestry layers plus the preprocessing they depend on.
struct LearngeneBundle {
  Family family = Family::TinyCnn;
  InputSpec input;
  std::vector<std::size_t> layer_numbers;  // 1-based ancestry layer numbers, ascending
  std::vector<Layer> layers;               // deep copies, same order
  std::optional<Layer> embedding;          // transformer patch + position embedding
  std::size_t ancestry_depth = 0;
  std::vector<std::size_t> ancestry_widths;  // output width of every ancestry layer
  std::size_t ancestry_parameters = 0;
  std::uint32_t ancestry_checksum = 0;
  std::uint32_t score_hash = 0;
  std::vector<std::string> warnings;

  /// Inherited layers plus the embedding.
  std::size_t parameter_count() const;
};

/// CRC-32 of a score vector, for bundle provenance.
std::uint32_t hash_scores(std::span<const double> values);

LearngeneBundle extract_learngene(const Model& ancestry, std::span<const std::size_t> selected,
                                  std::uint32_t score_hash = 0);

struct DescendantSlot {
  bool inherited = false;
  std::size_t bundle_index = 0;  // inherited slots
  LayerSpec spec;
};

struct DescendantPlan {
  Family family = Family::TinyCnn;
  InputSpec input;
  bool reuse_embedding = false;
  std::optional<LayerSpec> embedding;  // transformer
  std::vector<DescendantSlot> slots;    // counted layers in order
  std::size_t num_classes = 0;

  std::size_t depth() const { return slots.size(); }
  std::size_t inherited_count() const;
};

/// Transformer: inherited blocks stacked in ancestry order, embedding reused,
/// fresh blocks appended up to `depth`. Conv and dense: inherited layers at
/// their relative depth in a `depth`-layer stack (deeper if needed), gaps
/// filled with fresh layers following the ancestry's width progression.
DescendantPlan plan_descendant(const LearngeneBundle& bundle, std::size_t depth, std::size_t num_classes);

/// Same architecture with every slot fresh (the from-scratch baseline).
DescendantPlan fresh_plan(const DescendantPlan& plan);

/// Throws InvalidArgument unless the plan is shape-closed.
void validate_plan(const DescendantPlan& plan);

/// Inherited slots get bit-exact copies of the bundle's tensors; fresh slots
/// and the head use seeded fan-in initialization. Throws InvalidArgument on a
/// plan/bundle mismatch or when the result is not smaller than the ancestry.
Model build_descendant(const LearngeneBundle& bundle, const DescendantPlan& plan, std::uint64_t seed);

/// All-fresh model for a plan.
Model build_from_plan(const DescendantPlan& plan, std::uint64_t seed);

struct TrainConfig {
  std::size_t epochs = 20;
  float lr = 0.05f;
  float weight_decay = 0.0f;
  std::size_t batch_size = 16;
  std::uint64_t seed = 0;
  bool freeze_inherited = false;
  bool record_time = false;

  void validate() const;
};

struct EpochMetrics {
  std::size_t epoch = 0;  // 0 is the evaluation before any training
  double train_loss = 0.0, train_accuracy = 0.0;
  double test_loss = 0.0, test_accuracy = 0.0;
  double seconds = 0.0;
};

struct Evaluation {
  double loss = 0.0;
  double accuracy = 0.0;
};

/// Evaluation-mode loss and accuracy, batched.
Evaluation evaluate(Model& model, const Dataset& data);

/// Mini-batch SGD; one metrics row per epoch plus the initial evaluation.
/// `test` may be null.
std::vector<EpochMetrics> train_classifier(Model& model, const Dataset& train, const Dataset* test,
                                           const TrainConfig& config);

/// Trains on the support set and reports query metrics. Rejects episodes
/// whose classes overlap the ancestry part of `plan`.
std::vector<EpochMetrics> finetune_descendant(Model& model, const Episode& episode, const SplitPlan& plan,
                                              const TrainConfig& config);

}  // namespace lg
