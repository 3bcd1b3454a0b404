// Command-line front end: pipeline, compare, sweep, evolution, stability,
// inspect-checkpoint.

#include <cstdio>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "learngene/checkpoint.hpp"
#include "learngene/config.hpp"
#include "learngene/experiments.hpp"

namespace {

enum Exit { kOk = 0, kFailure = 1, kConfig = 2, kNumeric = 3, kIo = 4 };

struct Overrides {
  std::string config;
  std::uint64_t seed = 0;
  std::string out;
  std::vector<std::string> methods;
  std::size_t trials = 0;
};

std::string join(const std::vector<std::size_t>& v) {
  std::string s = "{";
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? ", " : "") + std::to_string(v[i]);
  return s + "}";
}

lg::RunConfig resolve(const Overrides& o, const CLI::App& sub) {
  if (o.config.empty()) throw lg::InvalidArgument("--config is required");
  lg::RunConfig c = lg::load_run_config(o.config);
  if (sub.count("--seed")) c.seed = o.seed;
  if (sub.count("--out")) c.out = o.out;
  if (sub.count("--methods")) {
    c.compare.methods = o.methods;
    c.sweep.methods = o.methods;
  }
  if (sub.count("--trials")) c.stability.trials = o.trials;
  c.validate();
  return c;
}

void add_common(CLI::App* sub, Overrides& o) {
  sub->add_option("--config", o.config, "run configuration (JSON)")->required();
  sub->add_option("--seed", o.seed, "overrides run.seed");
  sub->add_option("--out", o.out, "overrides run.out");
  sub->add_option("--methods", o.methods, "comma-separated methods")->delimiter(',');
  sub->add_option("--trials", o.trials, "overrides stability.trials");
}

int verb_pipeline(const lg::RunConfig& c) {
  auto r = lg::cmd_pipeline(c);
  const auto& t = r.artifacts.condense.table;
  std::printf("selected layers: %s of %zu\n", join(t.selected).c_str(), t.L);
  for (std::size_t i = 0; i < t.scores.layers.size(); ++i)
    std::printf("  layer %zu  alpha %.6g  normalized %.6g\n", t.scores.layers[i], t.scores.layer_max[i],
                t.scores.normalized[i]);
  double mean = 0.0;
  for (double a : r.episode_accuracy) mean += a / static_cast<double>(r.episode_accuracy.size());
  std::printf("bundle parameters %zu, ancestry parameters %zu\n", r.artifacts.bundle.parameter_count(),
              r.artifacts.ancestry.parameter_count());
  for (const auto& w : r.artifacts.bundle.warnings) std::printf("warning: %s\n", w.c_str());
  std::printf("descendant query accuracy over %zu episodes: %.4f\n", r.episode_accuracy.size(), mean);
  std::printf("outputs in %s\n", c.out.string().c_str());
  return kOk;
}

int verb_compare(const lg::RunConfig& c) {
  auto runs = lg::cmd_compare(c);
  std::printf("%-16s %8s %8s %10s\n", "method", "mean", "std", "epochs90");
  for (const auto& r : runs)
    std::printf("%-16s %8.4f %8.4f %10.2f\n", lg::to_string(r.method).c_str(), r.mean_accuracy(), r.std_accuracy(),
                r.mean_threshold());
  std::printf("outputs in %s\n", c.out.string().c_str());
  return kOk;
}

int verb_sweep(const lg::RunConfig& c) {
  auto result = lg::cmd_sweep(c);
  for (const auto& cell : result.cells)
    std::printf("%-16s lr %-8g wd %-8g acc %.4f\n", lg::to_string(cell.method).c_str(), cell.lr, cell.weight_decay,
                cell.accuracy);
  for (const auto& m : c.sweep.methods) std::printf("range %-16s %.4f\n", m.c_str(), result.range(lg::parse_method(m)));
  return kOk;
}

int verb_evolution(const lg::RunConfig& c) {
  auto result = lg::cmd_evolution(c);
  for (std::size_t t = 0; t < result.accuracy.size(); ++t)
    std::printf("task %2zu  accuracy %.4f  selected %s\n", t + 1, result.accuracy[t],
                join(result.selections[t]).c_str());
  std::printf("least-squares slope %.6g\n", result.slope);
  return kOk;
}

int verb_stability(const lg::RunConfig& c) {
  auto report = lg::cmd_stability(c);
  for (std::size_t t = 0; t < report.seeds.size(); ++t)
    std::printf("trial %2zu  seed %llu  selected %s\n", t + 1, static_cast<unsigned long long>(report.seeds[t]),
                join(report.selections[t]).c_str());
  std::printf("modal %s  agreement %.2f\n", join(report.modal).c_str(), report.agreement_fraction);
  if (c.stability.plant)
    std::printf("planted layer %zu selected in %zu of %zu trials\n", c.stability.plant->layer,
                report.trials_containing(c.stability.plant->layer), report.seeds.size());
  return kOk;
}

int verb_inspect(const std::string& path) {
  auto m = lg::inspect_checkpoint(path);
  std::printf("version %d  role %s  blob %s  %zu bytes  crc32 %08x (verified)\n", m.version,
              lg::to_string(m.role).c_str(), m.blob.c_str(), m.blob_bytes, m.checksum);
  for (const auto& t : m.tensors) {
    std::ostringstream shape;
    for (std::size_t i = 0; i < t.shape.size(); ++i) shape << (i ? "x" : "") << t.shape[i];
    std::printf("  %-36s %-14s offset %-8zu bytes %zu\n", t.name.c_str(), shape.str().c_str(), t.offset, t.length);
  }
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"learngene: condense an ancestry model into a learngene and inherit it"};
  app.require_subcommand(1);
  Overrides o;
  auto* pipeline = app.add_subcommand("pipeline", "train ancestry, condense, inherit and fine-tune");
  auto* compare = app.add_subcommand("compare", "compare descendant initializations over seeds");
  auto* sweep = app.add_subcommand("sweep", "learning-rate by weight-decay sensitivity grid");
  auto* evolution = app.add_subcommand("evolution", "sequential-task ancestry growth");
  auto* stability = app.add_subcommand("stability", "repeat condensation and compare selections");
  for (auto* sub : {pipeline, compare, sweep, evolution, stability}) add_common(sub, o);
  auto* inspect = app.add_subcommand("inspect-checkpoint", "verify and list a checkpoint");
  std::string ckpt;
  inspect->add_option("path", ckpt, "checkpoint manifest")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kConfig;
  }

  try {
    if (*inspect) return verb_inspect(ckpt);
    if (*pipeline) return verb_pipeline(resolve(o, *pipeline));
    if (*compare) return verb_compare(resolve(o, *compare));
    if (*sweep) return verb_sweep(resolve(o, *sweep));
    if (*evolution) return verb_evolution(resolve(o, *evolution));
    if (*stability) return verb_stability(resolve(o, *stability));
  } catch (const lg::InvalidArgument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kConfig;
  } catch (const lg::NumericError& e) {
    std::cerr << "numeric abort: " << e.what() << "\n";
    return kNumeric;
  } catch (const lg::IoError& e) {
    std::cerr << "i/o error: " << e.what() << "\n";
    return kIo;
  } catch (const std::exception& e) {
    std::cerr << "failure: " << e.what() << "\n";
    return kFailure;
  }
  return kFailure;
}
