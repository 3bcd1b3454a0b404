#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "learngene/condense.hpp"
#include "learngene/netgraph.hpp"
#include "learngene/tasks.hpp"

namespace lg {

enum class Method { AutoLearngene, FromScratch, HeurLearngene, FullTransfer };
/// "auto-learngene", "from-scratch", "heur-learngene", "full-transfer".
Method parse_method(const std::string& name);
std::string to_string(Method method);

struct DataSection {
  std::string source = "synthetic";  // synthetic | directory
  SyntheticFamily family = SyntheticFamily::TexturedShapes;
  std::size_t classes = 30;
  std::size_t per_class = 60;
  InputSpec input{1, 12, 12};
  double separation = 2.0;
  std::string path;  // directory source
};

struct SplitSection {
  SplitRatios ratios;
  double meta_fraction = 1.0 / 6.0;
  /// Explicit partition; used instead of the ratios when all three are set.
  std::vector<int> ancestry_classes, condense_classes, descendant_classes;
};

struct FitSection {
  std::size_t epochs = 20;
  double lr = 0.05;
  double weight_decay = 0.0;
  std::size_t batch_size = 16;
};

struct ArchSection {
  Family family = Family::TinyCnn;
  std::size_t depth = 5;
  std::vector<std::size_t> widths{8, 16, 16, 16, 16};
  std::size_t patch = 4;
  std::size_t heads = 2;
};

struct CondenseSection {
  std::size_t pseudo_depth = 3;
  std::vector<std::size_t> pseudo_widths{8, 16, 16};
  std::size_t iterations = 400;
  double inner_lr = 0.05;
  double meta_lr = 1e-4;
  std::size_t inner_batch = 16;
  std::size_t meta_batch = 16;
  AlignPolicy align = AlignPolicy::Auto;
  double meta_weight_init = 0.0;
  double meta_bias_init = 1.0;
};

struct DescendantSection {
  std::size_t depth = 3;
  FitSection fit{30, 0.05, 0.0, 10};
  bool freeze_inherited = false;
};

struct EpisodeSection {
  std::size_t ways = 5;
  std::size_t shots = 10;
  std::size_t queries = 15;
  std::size_t count = 3;  // episodes fine-tuned by the pipeline
};

struct CompareSection {
  std::vector<std::string> methods{"auto-learngene", "from-scratch"};
  std::size_t seeds = 5;
};

struct SweepSection {
  std::vector<double> lrs{0.01, 0.05, 0.2};
  std::vector<double> weight_decays{0.0, 5e-4};
  std::vector<std::string> methods{"auto-learngene", "from-scratch"};
  std::size_t seeds = 2;
};

struct EvolutionSection {
  std::size_t tasks = 25;
  std::size_t classes_per_task = 5;
  std::size_t steps_per_task = 40;
  std::size_t episodes = 3;
};

struct PlantSection {
  std::size_t layer = 1;     // ancestry layer
  std::size_t position = 1;  // pseudo-descendant layer
};

struct StabilitySection {
  std::size_t trials = 10;
  std::optional<PlantSection> plant;
};

struct RunConfig {
  std::string id = "run";
  std::uint64_t seed = 0;
  std::filesystem::path out;
  bool record_time = false;
  DataSection data;
  SplitSection split;
  ArchSection ancestry;
  FitSection ancestry_fit;
  CondenseSection condense;
  DescendantSection descendant;
  EpisodeSection episode;
  double noise_ratio = 0.0;
  CompareSection compare;
  SweepSection sweep;
  EvolutionSection evolution;
  StabilitySection stability;

  /// Throws InvalidArgument on any inconsistency; runs no training.
  void validate() const;
};

/// Parses JSON text with one object per section ("run", "data", "split",
/// "ancestry", "condense", "descendant", "episode", "noise", "compare",
/// "sweep", "evolution", "stability"). Unknown sections or keys, wrong
/// types and a missing run.seed throw InvalidArgument.
RunConfig parse_run_config(const std::string& text);
RunConfig load_run_config(const std::filesystem::path& path);
/// Canonical JSON of every field, parseable by parse_run_config.
std::string dump_run_config(const RunConfig& config);

/// Class partition the config describes (explicit lists or ratios).
SplitPlan make_split_plan(const RunConfig& config, std::size_t num_classes, std::uint64_t seed);

}  // namespace lg
