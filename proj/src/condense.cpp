#include "learngene/condense.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <stdexcept>
#include <string>

#include "learngene/ops.hpp"
#include "learngene/optim.hpp"
#include "learngene/rng.hpp"

namespace lg {

namespace {

void require(bool ok, const std::string& message) {
  if (!ok) throw InvalidArgument(message);
}

std::string pair_name(const PairIndex& p) {
  return "(" + std::to_string(p.l) + "," + std::to_string(p.k) + ")";
}

std::vector<std::size_t> sample_indices(std::size_t n, std::size_t k, SeededRng& rng) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  k = std::min(k, n);
  for (std::size_t i = 0; i < k; ++i) std::swap(idx[i], idx[i + rng.below(n - i)]);
  idx.resize(k);
  return idx;
}

void require_ids(const Dataset& source, std::span<const std::size_t> indices,
                 const std::unordered_set<std::uint64_t>& allowed, const char* what) {
  for (std::size_t i : indices) {
    require(i < source.size(), std::string(what) + ": batch index out of range");
    if (!allowed.count(source.ids[i]))
      throw InvalidArgument(std::string(what) + ": split violation, example " + std::to_string(source.ids[i]) +
                            " is not in its data split");
  }
}

std::vector<Tensor> ancestry_trace(Model& ancestry, const Tensor& x) {
  NoGradGuard guard;
  return forward_collect(ancestry, x, false).trace;
}

std::vector<Tensor> per_example_psi(const CondenseState& state, std::span<const Tensor> Z, std::span<const Tensor> z) {
  std::vector<Tensor> psi;
  psi.reserve(state.meta.pairs.size());
  for (std::size_t p = 0; p < state.meta.pairs.size(); ++p) {
    const auto& pair = state.meta.pairs[p];
    psi.push_back(pair_similarity(Z[pair.l - 1], z[pair.k - 1], state.align, p).per_example);
  }
  return psi;
}

}  // namespace

std::vector<PairIndex> all_pairs(std::size_t L, std::size_t K) {
  std::vector<PairIndex> pairs;
  for (std::size_t l = 1; l <= L; ++l)
    for (std::size_t k = 1; k <= K; ++k) pairs.push_back({l, k});
  return pairs;
}

AlignPolicy parse_align_policy(const std::string& name) {
  if (name == "auto") return AlignPolicy::Auto;
  if (name == "identity") return AlignPolicy::Identity;
  if (name == "pointwise") return AlignPolicy::Pointwise;
  throw InvalidArgument("unknown alignment policy '" + name + "'");
}

// ---------------------------------------------------------------- alignment

AlignmentMap AlignmentMap::build(const Model& ancestry, const Model& pseudo, std::span<const PairIndex> pairs,
                                 AlignPolicy policy, std::uint64_t seed) {
  AlignmentMap map;
  SeededRng rng(SeededRng::derive(seed, 0xa119));
  for (const auto& pair : pairs) {
    require(pair.l >= 1 && pair.l <= ancestry.depth() && pair.k >= 1 && pair.k <= pseudo.depth(),
            "alignment: pair " + pair_name(pair) + " outside the models");
    const std::size_t cl = ancestry.counted_layer(pair.l).spec.out_dim;
    const std::size_t ck = pseudo.counted_layer(pair.k).spec.out_dim;
    AlignMode mode = AlignMode::Pointwise;
    if (policy == AlignPolicy::Identity) {
      require(cl == ck, "alignment: identity mode needs equal feature dims for pair " + pair_name(pair) + ", got " +
                            std::to_string(ck) + " -> " + std::to_string(cl));
      mode = AlignMode::Identity;
    } else if (policy == AlignPolicy::Auto && ancestry.family == Family::TinyTransformer && cl == ck) {
      mode = AlignMode::Identity;
    }
    PairAlignment a;
    a.mode = mode;
    if (mode == AlignMode::Pointwise) {
      std::vector<float> w(cl * ck, 0.0f), b(cl, 0.0f);
      if (cl == ck) {
        for (std::size_t i = 0; i < cl; ++i) w[i * ck + i] = 1.0f;
      } else {
        const float bound = 1.0f / std::sqrt(static_cast<float>(ck));
        for (auto& v : w) v = rng.uniform(-bound, bound);
        for (auto& v : b) v = rng.uniform(-bound, bound);
      }
      a.weight = Tensor({cl, ck}, std::move(w), true);
      a.bias = Tensor({cl}, std::move(b), true);
    }
    map.pairs.push_back(pair);
    map.maps.push_back(std::move(a));
  }
  return map;
}

Tensor AlignmentMap::apply(std::size_t pair, const Tensor& zk, const Shape& target) const {
  const auto& a = maps.at(pair);
  Tensor out = zk;
  if (a.mode == AlignMode::Pointwise) {
    if (zk.rank() == 4) {
      out = conv2d(zk, reshape(a.weight, {a.weight.dim(0), a.weight.dim(1), 1, 1}), a.bias, 0);
    } else {
      out = linear(zk, a.weight, a.bias);
    }
  }
  require(out.shape() == target, "alignment: pair " + pair_name(pairs.at(pair)) + " maps " + shape_str(zk.shape()) +
                                     " to " + shape_str(out.shape()) + ", ancestry feature is " + shape_str(target));
  return out;
}

std::vector<Tensor> AlignmentMap::parameters() const {
  std::vector<Tensor> params;
  for (const auto& a : maps)
    if (a.mode == AlignMode::Pointwise) {
      params.push_back(a.weight);
      params.push_back(a.bias);
    }
  return params;
}

// ---------------------------------------------------------------- meta-network

MetaNetwork MetaNetwork::build(const Model& ancestry, std::span<const PairIndex> pairs, float weight_init,
                               float bias_init) {
  MetaNetwork meta;
  for (const auto& pair : pairs) {
    require(pair.l >= 1 && pair.l <= ancestry.depth(), "meta-network: pair " + pair_name(pair) + " outside ancestry");
    const std::size_t c = ancestry.counted_layer(pair.l).spec.out_dim;
    meta.pairs.push_back(pair);
    meta.weights.push_back(Tensor::full({1, c}, weight_init, true));
    meta.biases.push_back(Tensor::full({1}, bias_init, true));
  }
  return meta;
}

MetaNetwork MetaNetwork::random(const Model& ancestry, std::span<const PairIndex> pairs, std::uint64_t seed,
                                float scale, float bias_lo, float bias_hi) {
  MetaNetwork meta = build(ancestry, pairs);
  SeededRng rng(seed);
  for (std::size_t p = 0; p < meta.pairs.size(); ++p) {
    for (auto& v : meta.weights[p].mutable_data()) v = rng.uniform(-scale, scale);
    meta.biases[p].mutable_data()[0] = rng.uniform(bias_lo, bias_hi);
  }
  return meta;
}

std::vector<Tensor> MetaNetwork::parameters() const {
  std::vector<Tensor> params;
  for (std::size_t p = 0; p < pairs.size(); ++p) {
    params.push_back(weights[p]);
    params.push_back(biases[p]);
  }
  return params;
}

std::size_t MetaNetwork::parameter_count() const {
  std::size_t n = 0;
  for (const auto& t : parameters()) n += t.numel();
  return n;
}

Tensor pool_features(const Tensor& z) {
  switch (z.rank()) {
    case 2:
      return z;
    case 3:
      return mean_axis(z, 1);
    case 4:
      return mean_axis(reshape(z, {z.dim(0), z.dim(1), z.dim(2) * z.dim(3)}), 2);
    default:
      throw InvalidArgument("pool_features: unsupported feature shape " + shape_str(z.shape()));
  }
}

// ---------------------------------------------------------------- similarity and scores

SimilarityRecord pair_similarity(const Tensor& Zl, const Tensor& zk, const AlignmentMap& align, std::size_t pair) {
  const Tensor target = Zl.detach();
  const Tensor aligned = align.apply(pair, zk, target.shape());
  SimilarityRecord rec;
  rec.psi = square(sub(aligned, target));
  rec.psi_bar = mean(rec.psi);
  rec.per_example = row_mean(rec.psi);
  return rec;
}

std::vector<Tensor> score_pairs(std::span<const Tensor> ancestry_trace, const MetaNetwork& meta) {
  std::map<std::size_t, Tensor> pooled;
  std::vector<Tensor> alpha;
  alpha.reserve(meta.pairs.size());
  for (std::size_t p = 0; p < meta.pairs.size(); ++p) {
    const std::size_t l = meta.pairs[p].l;
    require(l >= 1 && l <= ancestry_trace.size(), "score_pairs: trace does not cover layer " + std::to_string(l));
    auto it = pooled.find(l);
    if (it == pooled.end()) it = pooled.emplace(l, pool_features(ancestry_trace[l - 1].detach())).first;
    Tensor a = relu6(linear(it->second, meta.weights[p], meta.biases[p]));
    alpha.push_back(reshape(a, {a.dim(0)}));
  }
  return alpha;
}

Tensor meta_loss(std::span<const Tensor> alpha, std::span<const Tensor> psi_bar) {
  require(alpha.size() == psi_bar.size(), "meta_loss: alpha and psi_bar are indexed differently");
  require(!alpha.empty(), "meta_loss: empty candidate set");
  Tensor total;
  for (std::size_t p = 0; p < alpha.size(); ++p) {
    require(alpha[p].shape() == psi_bar[p].shape(), "meta_loss: shape mismatch at pair " + std::to_string(p));
    Tensor term = mean(mul(alpha[p], psi_bar[p]));
    total = total.defined() ? add(total, term) : term;
  }
  return total;
}

// ---------------------------------------------------------------- config and monitor

void CondenseConfig::validate() const {
  require(inner_lr > 0.0f && std::isfinite(inner_lr), "condense: inner learning rate must be positive");
  require(meta_lr > 0.0f && std::isfinite(meta_lr), "condense: meta learning rate must be positive");
  require(inner_batch >= 1 && meta_batch >= 1, "condense: batch sizes must be at least 1");
}

std::vector<double> ConvergenceReport::running_means() const {
  std::vector<double> out(grad_norm_sq.size());
  const std::size_t w = std::max<std::size_t>(window, 1);
  double acc = 0.0;
  for (std::size_t i = 0; i < grad_norm_sq.size(); ++i) {
    acc += grad_norm_sq[i];
    if (i >= w) acc -= grad_norm_sq[i - w];
    out[i] = acc / static_cast<double>(std::min(i + 1, w));
  }
  return out;
}

ConvergenceTrend convergence_monitor(const ConvergenceReport& report) {
  const auto& g = report.grad_norm_sq;
  require(g.size() >= 8, "convergence_monitor: need at least 8 iterations, got " + std::to_string(g.size()));
  const std::size_t q = g.size() / 4;
  ConvergenceTrend trend;
  trend.first_quarter_mean = std::accumulate(g.begin(), g.begin() + static_cast<std::ptrdiff_t>(q), 0.0) / q;
  trend.last_quarter_mean = std::accumulate(g.end() - static_cast<std::ptrdiff_t>(q), g.end(), 0.0) / q;
  trend.ratio = trend.first_quarter_mean > 0.0 ? trend.last_quarter_mean / trend.first_quarter_mean
                                               : (trend.last_quarter_mean > 0.0 ? INFINITY : 1.0);
  return trend;
}

// ---------------------------------------------------------------- normalization and selection

NormalizedScores normalize_scores(std::span<const PairIndex> pairs, std::span<const double> alpha) {
  require(!pairs.empty(), "normalize_scores: empty candidate set");
  require(pairs.size() == alpha.size(), "normalize_scores: one score per pair expected");
  std::map<std::size_t, double> best;
  for (std::size_t p = 0; p < pairs.size(); ++p) {
    require(std::isfinite(alpha[p]), "normalize_scores: non-finite score");
    auto [it, inserted] = best.emplace(pairs[p].l, alpha[p]);
    if (!inserted) it->second = std::max(it->second, alpha[p]);
  }
  NormalizedScores out;
  double top = -INFINITY;
  for (const auto& [l, a] : best) {
    out.layers.push_back(l);
    out.layer_max.push_back(a);
    top = std::max(top, a);
  }
  double z = 0.0;
  for (double a : out.layer_max) z += std::exp(a - top);
  for (double a : out.layer_max) out.normalized.push_back(std::exp(a - top) / z);
  return out;
}

std::vector<std::size_t> select_learngene(std::span<const double> alpha_tilde, std::size_t L) {
  require(L >= 1 && alpha_tilde.size() == L, "select_learngene: expected " + std::to_string(L) + " scores");
  const double total = std::accumulate(alpha_tilde.begin(), alpha_tilde.end(), 0.0);
  require(std::fabs(total - 1.0) <= 1e-6, "select_learngene: scores must sum to 1");
  const double threshold = 1.0 / static_cast<double>(L);
  std::vector<std::size_t> selected;
  for (std::size_t i = 0; i < L; ++i)
    if (alpha_tilde[i] > threshold) selected.push_back(i + 1);
  if (selected.empty()) {
    auto it = std::max_element(alpha_tilde.begin(), alpha_tilde.end());
    selected.push_back(static_cast<std::size_t>(it - alpha_tilde.begin()) + 1);
  }
  return selected;
}

// ---------------------------------------------------------------- bilevel loop

std::vector<Tensor> CondenseState::inner_parameters() const {
  auto params = pseudo.parameters();
  for (auto& t : align.parameters()) params.push_back(t);
  return params;
}

CondenseState make_condense_state(Model& ancestry, const MetaTrainSplit& data, const CondenseConfig& config,
                                  Model pseudo) {
  config.validate();
  require_disjoint(data.meta, data.train, "condensation meta data and training data");
  require(data.meta.size() > 0 && data.train.size() > 0, "condensation: meta and training data must be nonempty");
  require(pseudo.input == data.train.input && ancestry.input == data.train.input,
          "condensation: model inputs do not match the data");
  require(pseudo.num_classes() == data.train.num_classes,
          "condensation: pseudo-descendant head has " + std::to_string(pseudo.num_classes()) + " classes, data has " +
              std::to_string(data.train.num_classes));
  require(ancestry.depth() >= pseudo.depth(), "condensation: ancestry must be at least as deep as the pseudo-descendant");
  CondenseState state;
  state.ancestry = &ancestry;
  state.pseudo = std::move(pseudo);
  state.pseudo.role = ModelRole::PseudoDescendant;
  state.config = config;
  const auto pairs = all_pairs(ancestry.depth(), state.pseudo.depth());
  state.align = AlignmentMap::build(ancestry, state.pseudo, pairs, config.align, SeededRng::derive(config.seed, 2));
  state.meta = MetaNetwork::build(ancestry, pairs, config.meta_weight_init, config.meta_bias_init);
  state.train_ids.insert(data.train.ids.begin(), data.train.ids.end());
  state.meta_ids.insert(data.meta.ids.begin(), data.meta.ids.end());
  return state;
}

double descent_step(std::span<Tensor> params, const Tensor& loss, float lr) {
  backward(loss);
  const double norm = grad_norm_sq(params);
  sgd_step(params, lr);
  return norm;
}

double inner_update(CondenseState& state, const Dataset& source, std::span<const std::size_t> indices, float lr) {
  require_ids(source, indices, state.train_ids, "inner_update");
  const Batch batch = make_batch(source, indices);
  auto Z = ancestry_trace(*state.ancestry, batch.inputs);
  std::vector<Tensor> alpha;
  {
    NoGradGuard guard;
    alpha = score_pairs(Z, state.meta);
  }
  auto params = state.inner_parameters();
  zero_grads(params);
  auto result = forward_collect(state.pseudo, batch.inputs, true);
  Tensor total = add(cross_entropy(result.logits, batch.labels), meta_loss(alpha, per_example_psi(state, Z, result.trace)));
  descent_step(params, total, lr);
  return total.item();
}

double meta_update(CondenseState& state, const Dataset& source, std::span<const std::size_t> indices, float lr) {
  require_ids(source, indices, state.meta_ids, "meta_update");
  const Batch batch = make_batch(source, indices);
  auto Z = ancestry_trace(*state.ancestry, batch.inputs);
  std::vector<Tensor> psi;
  {
    NoGradGuard guard;
    // Batch statistics, as in the inner step, without folding meta data into
    // the pseudo-descendant's running buffers.
    std::vector<std::vector<float>> saved;
    for (const auto& layer : state.pseudo.layers)
      for (const auto& b : layer.buffers) saved.emplace_back(b.value.data().begin(), b.value.data().end());
    auto result = forward_collect(state.pseudo, batch.inputs, true);
    psi = per_example_psi(state, Z, result.trace);
    std::size_t s = 0;
    for (auto& layer : state.pseudo.layers)
      for (auto& b : layer.buffers) std::copy(saved[s].begin(), saved[s].end(), b.value.mutable_data().begin()), ++s;
  }
  auto params = state.meta.parameters();
  zero_grads(params);
  const Tensor loss = meta_loss(score_pairs(Z, state.meta), psi);
  const double norm = descent_step(params, loss, lr);
  state.report.grad_norm_sq.push_back(norm);
  return norm;
}

ScoreTable score_table(CondenseState& state, const Dataset& meta_data) {
  NoGradGuard guard;
  ScoreTable table;
  table.L = state.ancestry->depth();
  table.K = state.pseudo.depth();
  table.pairs = state.meta.pairs;
  table.alpha.assign(table.pairs.size(), 0.0);
  constexpr std::size_t chunk = 64;
  for (std::size_t start = 0; start < meta_data.size(); start += chunk) {
    std::vector<std::size_t> idx(std::min(chunk, meta_data.size() - start));
    std::iota(idx.begin(), idx.end(), start);
    const Batch batch = make_batch(meta_data, idx);
    auto alpha = score_pairs(ancestry_trace(*state.ancestry, batch.inputs), state.meta);
    for (std::size_t p = 0; p < alpha.size(); ++p)
      for (float a : alpha[p].data()) table.alpha[p] += a;
  }
  for (auto& a : table.alpha) a /= static_cast<double>(meta_data.size());
  table.scores = normalize_scores(table.pairs, table.alpha);
  for (std::size_t pos : select_learngene(table.scores.normalized, table.scores.layers.size()))
    table.selected.push_back(table.scores.layers[pos - 1]);
  return table;
}

Model make_pseudo_descendant(const CondenseConfig& config, std::size_t num_classes) {
  ModelConfig cfg = config.pseudo;
  cfg.num_classes = num_classes;
  cfg.role = ModelRole::PseudoDescendant;
  return build_model(cfg, SeededRng::derive(config.seed, 1));
}

CondenseResult run_condensation(Model& ancestry, const MetaTrainSplit& data, const CondenseConfig& config) {
  return run_condensation(ancestry, data, config, make_pseudo_descendant(config, data.train.num_classes));
}

CondenseResult run_condensation(Model& ancestry, const MetaTrainSplit& data, const CondenseConfig& config,
                                Model pseudo) {
  const std::uint32_t before = ancestry.checksum();
  CondenseState state = make_condense_state(ancestry, data, config, std::move(pseudo));
  SeededRng rng(SeededRng::derive(config.seed, 3));
  for (std::size_t it = 0; it < config.iterations; ++it) {
    try {
      auto b = sample_indices(data.train.size(), config.inner_batch, rng);
      inner_update(state, data.train, b, config.inner_lr);
      auto bh = sample_indices(data.meta.size(), config.meta_batch, rng);
      meta_update(state, data.meta, bh, cosine_lr(config.meta_lr, it, config.iterations));
    } catch (const NumericError& e) {
      throw NumericError("condensation iteration " + std::to_string(it) + ": " + e.what());
    }
    ++state.iteration;
  }
  CondenseResult result;
  result.table = score_table(state, data.meta);
  if (ancestry.checksum() != before) throw std::logic_error("condensation modified the ancestry parameters");
  result.report = std::move(state.report);
  result.pseudo = std::move(state.pseudo);
  return result;
}

void plant_layer(Model& pseudo, const Model& ancestry, std::size_t l, std::size_t k) {
  const Layer& source = ancestry.counted_layer(l);
  Layer& target = pseudo.counted_layer(k);
  require(source.spec == target.spec, "plant_layer: ancestry layer " + std::to_string(l) +
                                          " and pseudo-descendant layer " + std::to_string(k) + " differ in spec");
  target = source.clone();
}

// ---------------------------------------------------------------- stability

std::size_t StabilityReport::trials_containing(std::size_t layer) const {
  std::size_t n = 0;
  for (const auto& s : selections) n += std::count(s.begin(), s.end(), layer) > 0;
  return n;
}

StabilityReport stability_check(Model& ancestry, const MetaTrainSplit& data, const CondenseConfig& config,
                                std::size_t trials, const PseudoFactory& factory,
                                std::span<const std::uint64_t> seeds) {
  require(trials >= 2, "stability_check: need at least 2 trials");
  require(seeds.empty() || seeds.size() == trials, "stability_check: one seed per trial expected");
  StabilityReport report;
  for (std::size_t t = 0; t < trials; ++t) {
    CondenseConfig cfg = config;
    cfg.seed = seeds.empty() ? SeededRng::derive(config.seed, 0x57ab + t) : seeds[t];
    Model pseudo = factory ? factory(cfg.seed) : make_pseudo_descendant(cfg, data.train.num_classes);
    auto result = run_condensation(ancestry, data, cfg, std::move(pseudo));
    report.seeds.push_back(cfg.seed);
    report.selections.push_back(result.table.selected);
  }
  std::map<std::vector<std::size_t>, std::size_t> counts;
  std::size_t best = 0;
  for (const auto& s : report.selections) {
    const std::size_t c = ++counts[s];
    if (c > best) best = c;
  }
  for (const auto& s : report.selections)
    if (counts[s] == best) {
      report.modal = s;
      break;
    }
  for (const auto& s : report.selections) report.agreement.push_back(s == report.modal ? 1.0 : 0.0);
  report.agreement_fraction =
      std::accumulate(report.agreement.begin(), report.agreement.end(), 0.0) / static_cast<double>(trials);
  return report;
}

}  // namespace lg
