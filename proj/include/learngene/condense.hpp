#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <unordered_set>
#include <vector>

#include "learngene/netgraph.hpp"
#include "learngene/tasks.hpp"
#include "learngene/tensor.hpp"

namespace lg {

/// Candidate pair (l, k), both 1-based counted-layer numbers.
struct PairIndex {
  std::size_t l = 0;
  std::size_t k = 0;
  friend bool operator==(const PairIndex&, const PairIndex&) = default;
};

/// Every (l, k) with l in 1..L and k in 1..K.
std::vector<PairIndex> all_pairs(std::size_t L, std::size_t K);

enum class AlignMode { Identity, Pointwise };
/// Auto: identity for token features of equal width, pointwise otherwise.
enum class AlignPolicy { Auto, Identity, Pointwise };
AlignPolicy parse_align_policy(const std::string& name);

/// h(.; zeta) for one pair. Pointwise maps descendant channels (axis 1 of
/// image features, last axis of token or dense features) onto ancestry ones.
struct PairAlignment {
  AlignMode mode = AlignMode::Identity;
  Tensor weight;  // [C_l, C_k]
  Tensor bias;    // [C_l]
};

struct AlignmentMap {
  std::vector<PairIndex> pairs;
  std::vector<PairAlignment> maps;

  /// Pointwise maps between equal widths start at the identity matrix,
  /// others at seeded uniform fan-in values.
  static AlignmentMap build(const Model& ancestry, const Model& pseudo, std::span<const PairIndex> pairs,
                            AlignPolicy policy, std::uint64_t seed);

  /// Throws InvalidArgument if the aligned shape differs from `target`.
  Tensor apply(std::size_t pair, const Tensor& zk, const Shape& target) const;
  std::vector<Tensor> parameters() const;
};

/// G^{l,k}: one affine map from the pooled Z^l to a scalar, then ReLU6.
struct MetaNetwork {
  std::vector<PairIndex> pairs;
  std::vector<Tensor> weights;  // [1, C_l]
  std::vector<Tensor> biases;   // [1]

  /// Weights start at `weight_init`, biases at `bias_init`.
  static MetaNetwork build(const Model& ancestry, std::span<const PairIndex> pairs, float weight_init = 0.0f,
                           float bias_init = 1.0f);
  /// Weights U(-scale, scale), biases U(lo, hi).
  static MetaNetwork random(const Model& ancestry, std::span<const PairIndex> pairs, std::uint64_t seed,
                            float scale, float bias_lo, float bias_hi);
  std::vector<Tensor> parameters() const;
  std::size_t parameter_count() const;
};

/// Per-example channel vector: mean over spatial or token axes. [B, C].
Tensor pool_features(const Tensor& z);

struct SimilarityRecord {
  Tensor psi;          // (h(z^k) - Z^l)^2, same shape as Z^l
  Tensor psi_bar;      // scalar mean over all elements
  Tensor per_example;  // [B]: mean over every element of one example
};

/// Z^l is treated as a constant; gradients reach zeta and z^k only.
SimilarityRecord pair_similarity(const Tensor& Zl, const Tensor& zk, const AlignmentMap& align, std::size_t pair);

/// alpha^{l,k} per example, [B] each, indexed like `meta.pairs`.
std::vector<Tensor> score_pairs(std::span<const Tensor> ancestry_trace, const MetaNetwork& meta);

/// (1/B) sum_i sum_pairs alpha_i psi_bar_i. Entries are [B] or scalars.
Tensor meta_loss(std::span<const Tensor> alpha, std::span<const Tensor> psi_bar);

struct CondenseConfig {
  float inner_lr = 0.05f;   // beta, constant
  float meta_lr = 1e-4f;    // beta-hat, cosine-annealed to 0 over the run
  std::size_t inner_batch = 16;  // N
  std::size_t meta_batch = 16;   // M
  std::size_t iterations = 400;  // I
  std::uint64_t seed = 0;
  ModelConfig pseudo;       // K = pseudo.depth
  AlignPolicy align = AlignPolicy::Auto;
  float meta_weight_init = 0.0f;
  float meta_bias_init = 1.0f;

  void validate() const;
};

struct ConvergenceReport {
  std::vector<double> grad_norm_sq;  // one per completed meta step
  std::size_t window = 25;

  /// Trailing means over `window` iterations, one per entry.
  std::vector<double> running_means() const;
};

struct ConvergenceTrend {
  double first_quarter_mean = 0.0;
  double last_quarter_mean = 0.0;
  double ratio = 0.0;  // last / first
};

/// Requires at least 8 entries.
ConvergenceTrend convergence_monitor(const ConvergenceReport& report);

struct NormalizedScores {
  std::vector<std::size_t> layers;  // ancestry layers present in R, ascending
  std::vector<double> layer_max;    // alpha^l
  std::vector<double> normalized;   // softmax over layer_max
};

/// alpha^l = max over k, then softmax over the layers present.
NormalizedScores normalize_scores(std::span<const PairIndex> pairs, std::span<const double> alpha);

/// 1-based positions p with alpha_tilde[p-1] > 1/L, ascending; the argmax
/// (lowest index on ties) when none qualifies.
std::vector<std::size_t> select_learngene(std::span<const double> alpha_tilde, std::size_t L);

struct ScoreTable {
  std::size_t L = 0, K = 0;
  std::vector<PairIndex> pairs;
  std::vector<double> alpha;  // mean over the meta data, per pair
  NormalizedScores scores;
  std::vector<std::size_t> selected;  // ancestry layer numbers
};

/// Everything Algorithm-style condensation mutates, plus the data discipline.
struct CondenseState {
  Model* ancestry = nullptr;
  Model pseudo;
  AlignmentMap align;
  MetaNetwork meta;
  CondenseConfig config;
  ConvergenceReport report;
  std::unordered_set<std::uint64_t> train_ids;
  std::unordered_set<std::uint64_t> meta_ids;
  std::size_t iteration = 0;

  std::vector<Tensor> inner_parameters() const;  // theta and zeta
};

CondenseState make_condense_state(Model& ancestry, const MetaTrainSplit& data, const CondenseConfig& config,
                                  Model pseudo);

/// One SGD step on L^cls + L^meta for theta and zeta with phi fixed.
/// Rejects any example that is not training data. Returns L^total.
double inner_update(CondenseState& state, const Dataset& source, std::span<const std::size_t> indices, float lr);

/// phi <- phi - lr * grad of the mean meta loss over the batch. Rejects any
/// example that is not meta data. Records and returns ||grad||^2.
double meta_update(CondenseState& state, const Dataset& source, std::span<const std::size_t> indices, float lr);

/// Generic descent step used by both updates: backpropagates `loss`, steps
/// `params` by `lr` and returns the squared gradient norm before the step.
double descent_step(std::span<Tensor> params, const Tensor& loss, float lr);

/// Final alpha averaged over the whole meta data, normalization, selection.
ScoreTable score_table(CondenseState& state, const Dataset& meta_data);

struct CondenseResult {
  ScoreTable table;
  ConvergenceReport report;
  Model pseudo;
};

/// Pseudo-descendant built from `config.pseudo` with a seed derived from
/// `config.seed`.
Model make_pseudo_descendant(const CondenseConfig& config, std::size_t num_classes);

CondenseResult run_condensation(Model& ancestry, const MetaTrainSplit& data, const CondenseConfig& config);
/// Same, with a caller-built pseudo-descendant.
CondenseResult run_condensation(Model& ancestry, const MetaTrainSplit& data, const CondenseConfig& config,
                                Model pseudo);

/// Copies ancestry layer `l` into pseudo layer `k` (specs must match).
void plant_layer(Model& pseudo, const Model& ancestry, std::size_t l, std::size_t k);

using PseudoFactory = std::function<Model(std::uint64_t seed)>;

struct StabilityReport {
  std::vector<std::uint64_t> seeds;
  std::vector<std::vector<std::size_t>> selections;
  std::vector<std::size_t> modal;
  std::vector<double> agreement;  // per trial: 1 when equal to the modal set
  double agreement_fraction = 0.0;

  /// Number of trials whose selection contains `layer`.
  std::size_t trials_containing(std::size_t layer) const;
};

/// Reruns condensation once per seed (seed i = derive(config.seed, i) unless
/// `seeds` is given). `factory` builds each trial's pseudo-descendant.
StabilityReport stability_check(Model& ancestry, const MetaTrainSplit& data, const CondenseConfig& config,
                                std::size_t trials, const PseudoFactory& factory = {},
                                std::span<const std::uint64_t> seeds = {});

}  // namespace lg
