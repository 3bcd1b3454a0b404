#include "learngene/experiments.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <memory>
#include <numeric>
#include <optional>

#include <json.hpp>

#include "learngene/checkpoint.hpp"
#include "learngene/ops.hpp"
#include "learngene/optim.hpp"
#include "learngene/rng.hpp"

namespace lg {

namespace {

namespace fs = std::filesystem;
using ojson = nlohmann::ordered_json;

// Stream identifiers for SeededRng::derive, one per consumer of the run seed.
enum Stream : std::uint64_t {
  kData = 0xda7a,
  kSplit = 0x5b17,
  kMetaSplit = 0x3e7a,
  kAncestryInit = 0xa1c0,
  kAncestryTrain = 0xa1c1,
  kCondense = 0xc0de,
  kCompare = 0x1000,
  kSweep = 0x2000,
  kEvolutionTasks = 0xe701,
  kEvolutionBatches = 0xe702,
  kEvolutionEpisodes = 0xe800,
  kNoise = 0x7015,
};

void require(bool ok, const std::string& message) {
  if (!ok) throw InvalidArgument(message);
}

std::string g6(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6g", v);
  return buf;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out << text;
  if (!out) throw IoError("write failed for " + path.string());
}

void prepare_out(const RunConfig& config) {
  std::error_code ec;
  fs::create_directories(config.out, ec);
  if (ec) throw IoError("cannot create " + config.out.string() + ": " + ec.message());
  fs::remove(config.out / "FAILED", ec);
  write_text(config.out / "config.json", dump_run_config(config));
}

/// Runs one stage; on failure leaves a FAILED marker naming the stage and
/// rethrows with the stage name prefixed, keeping the error category.
template <typename F>
auto stage(const RunConfig& config, const std::string& name, F&& f) {
  auto flag = [&](const std::string& what) {
    std::ofstream out(config.out / "FAILED");
    out << "stage " << name << " failed: " << what << "\noutputs in this directory may be partial\n";
  };
  try {
    return f();
  } catch (const NumericError& e) {
    flag(e.what());
    throw NumericError(name + ": " + e.what());
  } catch (const IoError& e) {
    flag(e.what());
    throw IoError(name + ": " + e.what());
  } catch (const InvalidArgument& e) {
    flag(e.what());
    throw InvalidArgument(name + ": " + e.what());
  } catch (const std::exception& e) {
    flag(e.what());
    throw std::runtime_error(name + ": " + e.what());
  }
}

ojson scores_json(const ScoreTable& t) {
  ojson pairs = ojson::array();
  for (std::size_t p = 0; p < t.pairs.size(); ++p)
    pairs.push_back({{"l", t.pairs[p].l}, {"k", t.pairs[p].k}, {"alpha", t.alpha[p]}});
  return {{"L", t.L},
          {"K", t.K},
          {"pairs", pairs},
          {"layers", t.scores.layers},
          {"layer_max", t.scores.layer_max},
          {"normalized", t.scores.normalized},
          {"normalized_sum", std::accumulate(t.scores.normalized.begin(), t.scores.normalized.end(), 0.0)},
          {"selected", t.selected}};
}

double mean_of(std::span<const double> v) {
  return v.empty() ? 0.0 : std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

}  // namespace

// ---------------------------------------------------------------- setup

Workspace prepare_workspace(const RunConfig& config) {
  Workspace ws;
  if (config.data.source == "synthetic") {
    SyntheticConfig sc;
    sc.family = config.data.family;
    sc.num_classes = config.data.classes;
    sc.per_class = config.data.per_class;
    sc.input = config.data.input;
    sc.separation = static_cast<float>(config.data.separation);
    sc.seed = SeededRng::derive(config.seed, kData);
    ws.data = make_synthetic(sc);
  } else {
    ws.data = load_image_directory(config.data.path);
    require(ws.data.input == config.data.input, "data: directory images are " +
                                                    std::to_string(ws.data.input.channels) + "x" +
                                                    std::to_string(ws.data.input.height) + "x" +
                                                    std::to_string(ws.data.input.width) + ", config says otherwise");
  }
  ws.plan = make_split_plan(config, ws.data.num_classes, SeededRng::derive(config.seed, kSplit));
  ws.ancestry_data = ws.data.select_classes(ws.plan.ancestry_classes);
  ws.condense = split_meta_train(ws.data.select_classes(ws.plan.condense_classes), ws.plan.meta_fraction,
                                 SeededRng::derive(config.seed, kMetaSplit));
  require_disjoint(ws.condense.meta, ws.condense.train, "meta data and condensation training data");
  require_disjoint(ws.ancestry_data, ws.condense.train, "ancestry data and condensation data");
  return ws;
}

ModelConfig ancestry_model_config(const RunConfig& config, std::size_t num_classes) {
  ModelConfig m;
  m.family = config.ancestry.family;
  m.depth = config.ancestry.depth;
  m.widths = config.ancestry.widths;
  m.num_classes = num_classes;
  m.input = config.data.input;
  m.patch = config.ancestry.patch;
  m.heads = config.ancestry.heads;
  return m;
}

CondenseConfig condense_config(const RunConfig& config) {
  const auto& c = config.condense;
  CondenseConfig out;
  out.inner_lr = static_cast<float>(c.inner_lr);
  out.meta_lr = static_cast<float>(c.meta_lr);
  out.inner_batch = c.inner_batch;
  out.meta_batch = c.meta_batch;
  out.iterations = c.iterations;
  out.seed = SeededRng::derive(config.seed, kCondense);
  out.pseudo = ancestry_model_config(config, 0);
  out.pseudo.depth = c.pseudo_depth;
  out.pseudo.widths = c.pseudo_widths;
  out.pseudo.role = ModelRole::PseudoDescendant;
  out.align = c.align;
  out.meta_weight_init = static_cast<float>(c.meta_weight_init);
  out.meta_bias_init = static_cast<float>(c.meta_bias_init);
  return out;
}

namespace {

TrainConfig fit_config(const FitSection& f, std::uint64_t seed, bool record_time) {
  TrainConfig t;
  t.epochs = f.epochs;
  t.lr = static_cast<float>(f.lr);
  t.weight_decay = static_cast<float>(f.weight_decay);
  t.batch_size = f.batch_size;
  t.seed = seed;
  t.record_time = record_time;
  return t;
}

}  // namespace

TrainConfig ancestry_train_config(const RunConfig& config, std::uint64_t seed) {
  return fit_config(config.ancestry_fit, seed, config.record_time);
}

TrainConfig descendant_train_config(const RunConfig& config, std::uint64_t seed) {
  TrainConfig t = fit_config(config.descendant.fit, seed, config.record_time);
  t.freeze_inherited = config.descendant.freeze_inherited;
  return t;
}

std::vector<MetricsRow> epoch_rows(std::span<const EpochMetrics> metrics, const std::string& run_id,
                                   const std::string& phase, std::uint64_t seed, bool with_test) {
  std::vector<MetricsRow> rows;
  for (const auto& m : metrics) {
    rows.push_back({run_id, phase, m.epoch, "train", m.train_loss, m.train_accuracy, m.seconds, seed});
    if (with_test) rows.push_back({run_id, phase, m.epoch, "test", m.test_loss, m.test_accuracy, m.seconds, seed});
  }
  return rows;
}

Artifacts build_artifacts(const RunConfig& config, MetricsLog* log) {
  Artifacts art;
  art.ws = prepare_workspace(config);
  const auto& ws = art.ws;
  art.ancestry = build_model(ancestry_model_config(config, ws.plan.ancestry_classes.size()),
                             SeededRng::derive(config.seed, kAncestryInit));
  const TrainConfig tc = ancestry_train_config(config, SeededRng::derive(config.seed, kAncestryTrain));
  auto rows = train_classifier(art.ancestry, ws.ancestry_data, nullptr, tc);
  if (log) log->append(epoch_rows(rows, config.id, "ancestry", config.seed, false));

  art.condense = run_condensation(art.ancestry, ws.condense, condense_config(config));
  if (log) {
    std::vector<MetricsRow> crow;
    const auto& g = art.condense.report.grad_norm_sq;
    for (std::size_t i = 0; i < g.size(); ++i) crow.push_back({config.id, "condense", i + 1, "meta", g[i], 0.0, 0.0, config.seed});
    log->append(std::move(crow));
  }
  art.bundle = extract_learngene(art.ancestry, art.condense.table.selected,
                                 hash_scores(art.condense.table.scores.normalized));
  return art;
}

// ---------------------------------------------------------------- baselines

std::vector<double> layer_gradient_magnitudes(Model& ancestry, const Dataset& probe) {
  require(probe.size() > 0, "heuristic_select: empty probe data");
  const auto params = ancestry.parameters();
  std::vector<Tensor> all(params.begin(), params.end());
  zero_grads(all);
  constexpr std::size_t chunk = 64;
  for (std::size_t start = 0; start < probe.size(); start += chunk) {
    std::vector<std::size_t> idx(std::min(chunk, probe.size() - start));
    std::iota(idx.begin(), idx.end(), start);
    const Batch batch = make_batch(probe, idx);
    // Sum of per-chunk mean losses, rescaled below to the full-data mean.
    backward(scale(cross_entropy(forward(ancestry, batch.inputs, false), batch.labels),
                   static_cast<float>(idx.size()) / static_cast<float>(probe.size())));
  }
  std::vector<double> out;
  for (std::size_t pos : ancestry.counted_positions()) {
    double total = 0.0;
    std::size_t n = 0;
    for (auto& p : ancestry.layers[pos].params) {
      if (p.value.has_grad())
        for (float g : p.value.grad()) total += std::fabs(static_cast<double>(g));
      n += p.value.numel();
    }
    out.push_back(n ? total / static_cast<double>(n) : 0.0);
  }
  zero_grads(all);
  return out;
}

std::vector<std::size_t> select_smallest(std::span<const double> magnitudes, std::size_t count) {
  require(count >= 1 && count <= magnitudes.size(), "select_smallest: count out of range");
  std::vector<std::size_t> order(magnitudes.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return magnitudes[a] < magnitudes[b]; });
  std::vector<std::size_t> picked;
  for (std::size_t i = 0; i < count; ++i) picked.push_back(order[i] + 1);
  std::sort(picked.begin(), picked.end());
  return picked;
}

std::vector<std::size_t> heuristic_select(Model& ancestry, const Dataset& probe, std::size_t count) {
  return select_smallest(layer_gradient_magnitudes(ancestry, probe), count);
}

namespace {

LearngeneBundle heuristic_bundle(const Artifacts& art) {
  Model probe_model = art.ancestry.clone();
  auto sel = heuristic_select(probe_model, art.ws.ancestry_data, art.bundle.layers.size());
  return extract_learngene(art.ancestry, sel);
}

Model method_model(Method method, const Artifacts& art, const RunConfig& config, std::size_t ways,
                   std::uint64_t seed, const LearngeneBundle* heuristic) {
  const std::size_t depth = config.descendant.depth;
  switch (method) {
    case Method::AutoLearngene:
      return build_descendant(art.bundle, plan_descendant(art.bundle, depth, ways), seed);
    case Method::FromScratch:
      return build_from_plan(plan_descendant(art.bundle, depth, ways), seed);
    case Method::HeurLearngene: {
      if (heuristic) return build_descendant(*heuristic, plan_descendant(*heuristic, depth, ways), seed);
      const LearngeneBundle h = heuristic_bundle(art);
      return build_descendant(h, plan_descendant(h, depth, ways), seed);
    }
    case Method::FullTransfer: {
      Model m = art.ancestry.clone();
      const std::size_t head = m.layers.size() - 1;
      m.layers[head] = make_layer({LayerKind::ClassifierHead, m.layers[head].spec.in_dim, ways, Activation::None},
                                  SeededRng::derive(seed, head));
      m.role = ModelRole::Descendant;
      m.lineage = art.ancestry.checksum();
      m.inherited.resize(head);
      std::iota(m.inherited.begin(), m.inherited.end(), 0);
      return m;
    }
  }
  throw InvalidArgument("unknown method");
}

}  // namespace

Model make_method_model(Method method, const Artifacts& art, const RunConfig& config, std::size_t ways,
                        std::uint64_t seed) {
  return method_model(method, art, config, ways, seed, nullptr);
}

// ---------------------------------------------------------------- compare

std::size_t epochs_to_threshold(std::span<const EpochMetrics> metrics, double fraction) {
  if (metrics.size() <= 1) return 0;
  const double target = fraction * metrics.back().test_accuracy;
  for (std::size_t e = 1; e < metrics.size(); ++e)
    if (metrics[e].test_accuracy >= target) return metrics[e].epoch;
  return metrics.back().epoch;
}

double MethodRuns::mean_accuracy() const { return mean_of(final_accuracy); }

double MethodRuns::std_accuracy() const {
  if (final_accuracy.size() < 2) return 0.0;
  const double m = mean_accuracy();
  double s = 0.0;
  for (double a : final_accuracy) s += (a - m) * (a - m);
  return std::sqrt(s / static_cast<double>(final_accuracy.size() - 1));
}

double MethodRuns::mean_threshold() const {
  if (threshold_epoch.empty()) return 0.0;
  double s = 0.0;
  for (auto e : threshold_epoch) s += static_cast<double>(e);
  return s / static_cast<double>(threshold_epoch.size());
}

CompareOptions compare_options(const RunConfig& config) {
  CompareOptions o;
  for (const auto& m : config.compare.methods) o.methods.push_back(parse_method(m));
  o.seeds = config.compare.seeds;
  o.ways = config.episode.ways;
  o.shots = config.episode.shots;
  o.queries = config.episode.queries;
  o.fit = config.descendant.fit;
  o.noise_ratio = config.noise_ratio;
  o.run_id = config.id + ".compare";
  return o;
}

std::vector<MethodRuns> run_compare(const Artifacts& art, const RunConfig& config, const CompareOptions& options,
                                    MetricsLog* log) {
  require(!options.methods.empty(), "compare: no methods");
  require(options.seeds >= 1, "compare: need at least one seed");
  std::optional<LearngeneBundle> heuristic;
  if (std::count(options.methods.begin(), options.methods.end(), Method::HeurLearngene))
    heuristic = heuristic_bundle(art);

  std::vector<MethodRuns> runs;
  for (Method m : options.methods) runs.push_back({m, {}, {}, {}, {}});
  for (std::size_t i = 0; i < options.seeds; ++i) {
    const std::uint64_t seed = SeededRng::derive(config.seed, kCompare + i);
    Episode ep = sample_episode(art.ws.data, art.ws.plan, options.ways, options.shots, options.queries, seed);
    if (options.noise_ratio > 0.0)
      ep.support = inject_label_noise(ep.support, {options.noise_ratio, SeededRng::derive(seed, kNoise)});
    for (auto& run : runs) {
      Model model = method_model(run.method, art, config, options.ways, seed, heuristic ? &*heuristic : nullptr);
      TrainConfig tc = fit_config(options.fit, seed, config.record_time);
      tc.freeze_inherited = config.descendant.freeze_inherited;
      const auto metrics = finetune_descendant(model, ep, art.ws.plan, tc);
      if (log) {
        log->append(epoch_rows(metrics, options.run_id + "." + to_string(run.method) + ".s" + std::to_string(i),
                               "descendant", seed, true));
      }
      run.seeds.push_back(seed);
      run.final_accuracy.push_back(metrics.back().test_accuracy);
      run.threshold_epoch.push_back(epochs_to_threshold(metrics));
      if (run.mean_curve.empty()) run.mean_curve.assign(metrics.size(), 0.0);
      for (std::size_t e = 0; e < metrics.size(); ++e)
        run.mean_curve[e] += metrics[e].test_accuracy / static_cast<double>(options.seeds);
    }
  }
  return runs;
}

// ---------------------------------------------------------------- sweep

double SweepResult::range(Method method) const {
  double lo = 0.0, hi = 0.0;
  bool any = false;
  for (const auto& c : cells) {
    if (c.method != method) continue;
    lo = any ? std::min(lo, c.accuracy) : c.accuracy;
    hi = any ? std::max(hi, c.accuracy) : c.accuracy;
    any = true;
  }
  require(any, "sweep: no cells for " + to_string(method));
  return hi - lo;
}

SweepResult run_sweep(const Artifacts& art, const RunConfig& config, MetricsLog* log) {
  SweepResult result;
  CompareOptions base = compare_options(config);
  base.methods.clear();
  for (const auto& m : config.sweep.methods) base.methods.push_back(parse_method(m));
  base.seeds = config.sweep.seeds;
  for (double lr : config.sweep.lrs)
    for (double wd : config.sweep.weight_decays) {
      CompareOptions o = base;
      o.fit.lr = lr;
      o.fit.weight_decay = wd;
      o.run_id = config.id + ".sweep.lr" + g6(lr) + ".wd" + g6(wd);
      for (const auto& r : run_compare(art, config, o, log)) result.cells.push_back({r.method, lr, wd, r.mean_accuracy()});
    }
  return result;
}

// ---------------------------------------------------------------- evolution

double least_squares_slope(std::span<const double> y) {
  const std::size_t n = y.size();
  if (n < 2) return 0.0;
  const double xbar = (static_cast<double>(n) + 1.0) / 2.0;
  const double ybar = mean_of(y);
  double sxy = 0.0, sxx = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double dx = static_cast<double>(i + 1) - xbar;
    sxy += dx * (y[i] - ybar);
    sxx += dx * dx;
  }
  return sxy / sxx;
}

EvolutionResult run_evolution(const RunConfig& config, MetricsLog* log) {
  const auto& ev = config.evolution;
  EvolutionResult result;
  result.seed = config.seed;
  const Workspace ws = prepare_workspace(config);
  Model ancestry = build_model(ancestry_model_config(config, ws.plan.ancestry_classes.size()),
                               SeededRng::derive(config.seed, kAncestryInit));
  const auto tasks =
      make_sequential_tasks(ws.plan, ev.tasks, ev.classes_per_task, SeededRng::derive(config.seed, kEvolutionTasks));
  const auto by_class = ws.ancestry_data.indices_by_class();
  const CondenseConfig ccfg = condense_config(config);

  std::vector<Episode> episodes;
  for (std::size_t k = 0; k < ev.episodes; ++k) {
    episodes.push_back(sample_episode(ws.data, ws.plan, config.episode.ways, config.episode.shots,
                                      config.episode.queries, SeededRng::derive(config.seed, kEvolutionEpisodes + k)));
  }

  SeededRng rng(SeededRng::derive(config.seed, kEvolutionBatches));
  std::vector<bool> seen(ws.plan.ancestry_classes.size(), false);
  std::vector<std::size_t> pool;
  const auto params_all = ancestry.parameters();
  std::vector<Tensor> params(params_all.begin(), params_all.end());
  const auto& fit = config.ancestry_fit;
  for (std::size_t t = 0; t < tasks.size(); ++t) {
    for (int cls : tasks[t].classes) {
      const auto pos = static_cast<std::size_t>(
          std::find(ws.plan.ancestry_classes.begin(), ws.plan.ancestry_classes.end(), cls) -
          ws.plan.ancestry_classes.begin());
      if (!seen[pos]) {
        seen[pos] = true;
        pool.insert(pool.end(), by_class[pos].begin(), by_class[pos].end());
      }
    }
    const std::size_t batch = std::min(fit.batch_size, pool.size());
    for (std::size_t step = 0; step < ev.steps_per_task; ++step) {
      std::vector<std::size_t> idx(batch);
      for (auto& i : idx) i = pool[rng.below(pool.size())];
      const Batch b = make_batch(ws.ancestry_data, idx);
      zero_grads(params);
      backward(cross_entropy(forward(ancestry, b.inputs, true), b.labels));
      sgd_step(params, static_cast<float>(fit.lr), static_cast<float>(fit.weight_decay));
    }

    auto cres = run_condensation(ancestry, ws.condense, ccfg);
    const auto bundle = extract_learngene(ancestry, cres.table.selected, hash_scores(cres.table.scores.normalized));
    double acc = 0.0;
    for (std::size_t k = 0; k < episodes.size(); ++k) {
      const std::uint64_t seed = SeededRng::derive(config.seed, kEvolutionEpisodes + 0x100 + k);
      Model d = build_descendant(bundle, plan_descendant(bundle, config.descendant.depth, config.episode.ways), seed);
      const auto metrics = finetune_descendant(d, episodes[k], ws.plan, descendant_train_config(config, seed));
      acc += metrics.back().test_accuracy / static_cast<double>(episodes.size());
    }
    result.accuracy.push_back(acc);
    result.selections.push_back(cres.table.selected);
    if (log) log->append({{config.id + ".evolution", "evolution", t + 1, "query", 0.0, acc, 0.0, config.seed}});
  }
  result.slope = least_squares_slope(result.accuracy);
  return result;
}

// ---------------------------------------------------------------- stability

PseudoFactory planted_factory(const Model& ancestry, const CondenseConfig& config, std::size_t num_classes,
                              std::size_t layer, std::size_t position) {
  auto source = std::make_shared<Model>(ancestry.clone());
  return [source, config, num_classes, layer, position](std::uint64_t seed) {
    CondenseConfig c = config;
    c.seed = seed;
    Model pseudo = make_pseudo_descendant(c, num_classes);
    plant_layer(pseudo, *source, layer, position);
    return pseudo;
  };
}

StabilityReport run_stability(const RunConfig& config, std::size_t trials, MetricsLog* log) {
  Workspace ws = prepare_workspace(config);
  Model ancestry = build_model(ancestry_model_config(config, ws.plan.ancestry_classes.size()),
                               SeededRng::derive(config.seed, kAncestryInit));
  auto rows = train_classifier(ancestry, ws.ancestry_data, nullptr,
                               ancestry_train_config(config, SeededRng::derive(config.seed, kAncestryTrain)));
  if (log) log->append(epoch_rows(rows, config.id, "ancestry", config.seed, false));
  const CondenseConfig ccfg = condense_config(config);
  PseudoFactory factory;
  if (config.stability.plant) {
    factory = planted_factory(ancestry, ccfg, ws.condense.train.num_classes, config.stability.plant->layer,
                              config.stability.plant->position);
  }
  return stability_check(ancestry, ws.condense, ccfg, trials, factory);
}

// ---------------------------------------------------------------- commands

PipelineResult cmd_pipeline(const RunConfig& config) {
  config.validate();
  prepare_out(config);
  MetricsLog log(config.out);
  log.reset_files();
  PipelineResult result;
  auto& art = result.artifacts;
  art.ws = stage(config, "data", [&] { return prepare_workspace(config); });
  stage(config, "ancestry", [&] {
    art.ancestry = build_model(ancestry_model_config(config, art.ws.plan.ancestry_classes.size()),
                               SeededRng::derive(config.seed, kAncestryInit));
    auto rows = train_classifier(art.ancestry, art.ws.ancestry_data, nullptr,
                                 ancestry_train_config(config, SeededRng::derive(config.seed, kAncestryTrain)));
    log.append(epoch_rows(rows, config.id, "ancestry", config.seed, false));
    write_checkpoint(art.ancestry, config.out / "ancestry.ckpt");
    return 0;
  });
  stage(config, "condense", [&] {
    art.condense = run_condensation(art.ancestry, art.ws.condense, condense_config(config));
    std::vector<MetricsRow> rows;
    const auto& g = art.condense.report.grad_norm_sq;
    for (std::size_t i = 0; i < g.size(); ++i) rows.push_back({config.id, "condense", i + 1, "meta", g[i], 0.0, 0.0, config.seed});
    log.append(std::move(rows));
    write_text(config.out / "score_table.json", scores_json(art.condense.table).dump(2) + "\n");
    std::string conv = "iter,grad_norm_sq,running_mean\n";
    const auto running = art.condense.report.running_means();
    for (std::size_t i = 0; i < g.size(); ++i) conv += std::to_string(i + 1) + "," + g6(g[i]) + "," + g6(running[i]) + "\n";
    write_text(config.out / "convergence.csv", conv);
    return 0;
  });
  stage(config, "extract", [&] {
    art.bundle = extract_learngene(art.ancestry, art.condense.table.selected,
                                   hash_scores(art.condense.table.scores.normalized));
    write_checkpoint(art.bundle, config.out / "bundle.ckpt");
    return 0;
  });
  stage(config, "descendant", [&] {
    const auto plan = plan_descendant(art.bundle, config.descendant.depth, config.episode.ways);
    for (std::size_t k = 0; k < config.episode.count; ++k) {
      const std::uint64_t seed = SeededRng::derive(config.seed, kCompare + k);
      Episode ep = sample_episode(art.ws.data, art.ws.plan, config.episode.ways, config.episode.shots,
                                  config.episode.queries, seed);
      if (config.noise_ratio > 0.0)
        ep.support = inject_label_noise(ep.support, {config.noise_ratio, SeededRng::derive(seed, kNoise)});
      Model d = build_descendant(art.bundle, plan, seed);
      if (k == 0) write_checkpoint(d, config.out / "descendant.ckpt");
      const auto metrics = finetune_descendant(d, ep, art.ws.plan, descendant_train_config(config, seed));
      log.append(epoch_rows(metrics, config.id + ".episode" + std::to_string(k), "descendant", seed, true));
      result.episode_accuracy.push_back(metrics.back().test_accuracy);
    }
    return 0;
  });
  stage(config, "summary", [&] {
    const auto trend = convergence_monitor(art.condense.report);
    ojson summary = {{"run_id", config.id},
                     {"seed", config.seed},
                     {"ancestry_classes", art.ws.plan.ancestry_classes},
                     {"condense_classes", art.ws.plan.condense_classes},
                     {"descendant_classes", art.ws.plan.descendant_classes},
                     {"meta_examples", art.ws.condense.meta.size()},
                     {"train_examples", art.ws.condense.train.size()},
                     {"ancestry_parameters", art.ancestry.parameter_count()},
                     {"ancestry_checksum", art.ancestry.checksum()},
                     {"selected", art.condense.table.selected},
                     {"bundle_parameters", art.bundle.parameter_count()},
                     {"bundle_warnings", art.bundle.warnings},
                     {"convergence_ratio", trend.ratio},
                     {"episode_accuracy", result.episode_accuracy},
                     {"mean_episode_accuracy", mean_of(result.episode_accuracy)},
                     {"metrics_errors", log.errors()}};
    write_text(config.out / "summary.json", summary.dump(2) + "\n");
    return 0;
  });
  for (const char* f : {"config.json", "ancestry.ckpt", "bundle.ckpt", "descendant.ckpt", "score_table.json",
                        "convergence.csv", "metrics.csv", "metrics.jsonl", "summary.json"})
    result.files.push_back(config.out / f);
  return result;
}

std::vector<MethodRuns> cmd_compare(const RunConfig& config) {
  config.validate();
  prepare_out(config);
  MetricsLog log(config.out);
  log.reset_files();
  const Artifacts art = stage(config, "artifacts", [&] { return build_artifacts(config, &log); });
  const auto runs = stage(config, "compare", [&] { return run_compare(art, config, compare_options(config), &log); });
  stage(config, "report", [&] {
    std::string per_seed = "method,seed,final_accuracy,epochs_to_threshold\n";
    std::string summary = "method,seeds,mean_accuracy,std_accuracy,mean_epochs_to_threshold\n";
    std::string curves = "method,epoch,mean_test_accuracy\n";
    for (const auto& r : runs) {
      for (std::size_t i = 0; i < r.seeds.size(); ++i)
        per_seed += to_string(r.method) + "," + std::to_string(r.seeds[i]) + "," + g6(r.final_accuracy[i]) + "," +
                    std::to_string(r.threshold_epoch[i]) + "\n";
      summary += to_string(r.method) + "," + std::to_string(r.seeds.size()) + "," + g6(r.mean_accuracy()) + "," +
                 g6(r.std_accuracy()) + "," + g6(r.mean_threshold()) + "\n";
      for (std::size_t e = 0; e < r.mean_curve.size(); ++e)
        curves += to_string(r.method) + "," + std::to_string(e) + "," + g6(r.mean_curve[e]) + "\n";
    }
    write_text(config.out / "compare_runs.csv", per_seed);
    write_text(config.out / "compare.csv", summary);
    write_text(config.out / "compare_curves.csv", curves);
    return 0;
  });
  return runs;
}

SweepResult cmd_sweep(const RunConfig& config) {
  config.validate();
  prepare_out(config);
  MetricsLog log(config.out);
  log.reset_files();
  const Artifacts art = stage(config, "artifacts", [&] { return build_artifacts(config, &log); });
  const SweepResult result = stage(config, "sweep", [&] { return run_sweep(art, config, &log); });
  stage(config, "report", [&] {
    std::string cells = "method,lr,weight_decay,mean_accuracy\n";
    for (const auto& c : result.cells)
      cells += to_string(c.method) + "," + g6(c.lr) + "," + g6(c.weight_decay) + "," + g6(c.accuracy) + "\n";
    std::string ranges = "method,range\n";
    for (const auto& m : config.sweep.methods) ranges += m + "," + g6(result.range(parse_method(m))) + "\n";
    write_text(config.out / "sweep.csv", cells);
    write_text(config.out / "sweep_ranges.csv", ranges);
    return 0;
  });
  return result;
}

EvolutionResult cmd_evolution(const RunConfig& config) {
  config.validate();
  prepare_out(config);
  MetricsLog log(config.out);
  log.reset_files();
  const EvolutionResult result = stage(config, "evolution", [&] { return run_evolution(config, &log); });
  stage(config, "report", [&] {
    std::string text = "task,accuracy,selected,seed\n";
    for (std::size_t t = 0; t < result.accuracy.size(); ++t) {
      std::string sel;
      for (auto l : result.selections[t]) sel += (sel.empty() ? "" : " ") + std::to_string(l);
      text += std::to_string(t + 1) + "," + g6(result.accuracy[t]) + "," + sel + "," + std::to_string(result.seed) + "\n";
    }
    write_text(config.out / "evolution.csv", text);
    write_text(config.out / "evolution_slope.txt", g6(result.slope) + "\n");
    return 0;
  });
  return result;
}

StabilityReport cmd_stability(const RunConfig& config) {
  config.validate();
  prepare_out(config);
  MetricsLog log(config.out);
  log.reset_files();
  const StabilityReport report =
      stage(config, "stability", [&] { return run_stability(config, config.stability.trials, &log); });
  stage(config, "report", [&] {
    ojson trials = ojson::array();
    for (std::size_t t = 0; t < report.seeds.size(); ++t)
      trials.push_back({{"seed", report.seeds[t]}, {"selected", report.selections[t]}, {"agrees", report.agreement[t] > 0.5}});
    ojson j = {{"trials", trials}, {"modal", report.modal}, {"agreement_fraction", report.agreement_fraction}};
    if (config.stability.plant) {
      j["planted_layer"] = config.stability.plant->layer;
      j["trials_containing_planted"] = report.trials_containing(config.stability.plant->layer);
    }
    write_text(config.out / "stability.json", j.dump(2) + "\n");
    return 0;
  });
  return report;
}

}  // namespace lg
