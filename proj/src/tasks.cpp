#include "learngene/tasks.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <numeric>
#include <set>
#include <unordered_set>

#include <json.hpp>

#include "learngene/rng.hpp"

namespace lg {

namespace {

void require(bool ok, const std::string& message) {
  if (!ok) throw InvalidArgument(message);
}

std::size_t round_half_up(double x) { return static_cast<std::size_t>(std::floor(x + 0.5)); }

void require_disjoint_classes(std::span<const int> a, std::span<const int> b, const char* what) {
  std::set<int> seen(a.begin(), a.end());
  for (int c : b)
    if (seen.count(c)) throw InvalidArgument(std::string("class ") + std::to_string(c) + " appears in " + what);
}

}  // namespace

// ---------------------------------------------------------------- Dataset

std::vector<std::vector<std::size_t>> Dataset::indices_by_class() const {
  std::vector<std::vector<std::size_t>> by_class(num_classes);
  for (std::size_t i = 0; i < labels.size(); ++i) by_class.at(static_cast<std::size_t>(labels[i])).push_back(i);
  return by_class;
}

Dataset Dataset::subset(std::span<const std::size_t> indices) const {
  Dataset out;
  out.input = input;
  out.num_classes = num_classes;
  out.provenance = provenance;
  const std::size_t stride = example_size();
  out.pixels.reserve(indices.size() * stride);
  for (std::size_t i : indices) {
    require(i < size(), "subset index out of range");
    auto ex = example(i);
    out.pixels.insert(out.pixels.end(), ex.begin(), ex.end());
    out.labels.push_back(labels[i]);
    out.ids.push_back(ids[i]);
  }
  return out;
}

Dataset Dataset::select_classes(std::span<const int> classes) const {
  std::vector<int> position(num_classes, -1);
  for (std::size_t j = 0; j < classes.size(); ++j) {
    require(classes[j] >= 0 && static_cast<std::size_t>(classes[j]) < num_classes, "class id out of range");
    require(position[classes[j]] < 0, "duplicate class in selection");
    position[classes[j]] = static_cast<int>(j);
  }
  std::vector<std::size_t> keep;
  for (std::size_t i = 0; i < size(); ++i)
    if (position[labels[i]] >= 0) keep.push_back(i);
  Dataset out = subset(keep);
  out.num_classes = classes.size();
  for (auto& l : out.labels) l = position[l];
  return out;
}

void Dataset::validate() const {
  require(pixels.size() == size() * example_size(), "pixel buffer does not match example count");
  require(ids.size() == labels.size(), "id count does not match label count");
  for (int l : labels)
    require(l >= 0 && static_cast<std::size_t>(l) < num_classes, "label " + std::to_string(l) + " out of range");
  std::unordered_set<std::uint64_t> seen(ids.begin(), ids.end());
  require(seen.size() == ids.size(), "duplicate example id");
}

Batch make_batch(const Dataset& data, std::span<const std::size_t> indices) {
  require(!indices.empty(), "empty batch");
  const std::size_t stride = data.example_size();
  std::vector<float> values(indices.size() * stride);
  Batch batch;
  batch.labels.reserve(indices.size());
  for (std::size_t b = 0; b < indices.size(); ++b) {
    require(indices[b] < data.size(), "batch index out of range");
    auto ex = data.example(indices[b]);
    std::copy(ex.begin(), ex.end(), values.begin() + b * stride);
    batch.labels.push_back(data.labels[indices[b]]);
  }
  batch.inputs = Tensor({indices.size(), data.input.channels, data.input.height, data.input.width}, std::move(values));
  return batch;
}

Batch full_batch(const Dataset& data) {
  std::vector<std::size_t> all(data.size());
  std::iota(all.begin(), all.end(), 0);
  return make_batch(data, all);
}

// ---------------------------------------------------------------- splits

void SplitPlan::validate() const {
  require(!ancestry_classes.empty() && !condense_classes.empty() && !descendant_classes.empty(),
          "every class part must be nonempty");
  require_disjoint_classes(ancestry_classes, condense_classes, "both ancestry and condense parts");
  require_disjoint_classes(ancestry_classes, descendant_classes, "both ancestry and descendant parts");
  require_disjoint_classes(condense_classes, descendant_classes, "both condense and descendant parts");
  require(meta_fraction > 0.0 && meta_fraction < 1.0, "meta fraction must lie in (0, 1)");
  require(std::fabs(meta_fraction + train_fraction - 1.0) < 1e-12, "meta and train fractions must sum to 1");
}

std::vector<std::size_t> largest_remainder(std::size_t total, std::span<const double> weights) {
  require(!weights.empty(), "no weights");
  double sum = 0.0;
  for (double w : weights) {
    require(w >= 0.0 && std::isfinite(w), "weights must be finite and non-negative");
    sum += w;
  }
  require(sum > 0.0, "weights sum to zero");
  std::vector<std::size_t> parts(weights.size());
  std::vector<double> remainder(weights.size());
  std::size_t assigned = 0;
  for (std::size_t i = 0; i < weights.size(); ++i) {
    const double quota = static_cast<double>(total) * weights[i] / sum;
    parts[i] = static_cast<std::size_t>(std::floor(quota));
    remainder[i] = quota - std::floor(quota);
    assigned += parts[i];
  }
  std::vector<std::size_t> order(weights.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return remainder[a] > remainder[b]; });
  for (std::size_t i = 0; assigned < total; ++i, ++assigned) ++parts[order[i % order.size()]];
  return parts;
}

SplitPlan split_classes(std::size_t num_classes, const SplitRatios& ratios, std::uint64_t seed) {
  require(num_classes >= 3, "need at least 3 classes to split, got " + std::to_string(num_classes));
  const std::vector<double> weights{ratios.ancestry, ratios.condense, ratios.descendant};
  auto sizes = largest_remainder(num_classes, weights);
  for (std::size_t s : sizes) require(s >= 1, "too few classes for every part to be nonempty");

  std::vector<int> classes(num_classes);
  std::iota(classes.begin(), classes.end(), 0);
  SeededRng rng(SeededRng::derive(seed, 0x5b1175));
  rng.shuffle(classes);

  SplitPlan plan;
  plan.seed = seed;
  auto it = classes.begin();
  plan.ancestry_classes.assign(it, it + sizes[0]);
  it += sizes[0];
  plan.condense_classes.assign(it, it + sizes[1]);
  it += sizes[1];
  plan.descendant_classes.assign(it, classes.end());
  for (auto* part : {&plan.ancestry_classes, &plan.condense_classes, &plan.descendant_classes})
    std::sort(part->begin(), part->end());
  return plan;
}

MetaTrainSplit split_meta_train(const Dataset& condense_part, double meta_fraction, std::uint64_t seed) {
  require(meta_fraction > 0.0 && meta_fraction < 1.0, "meta fraction must lie in (0, 1)");
  auto by_class = condense_part.indices_by_class();
  std::vector<std::size_t> present;
  std::vector<double> counts;
  for (std::size_t c = 0; c < by_class.size(); ++c) {
    if (by_class[c].empty()) continue;
    require(by_class[c].size() >= 6, "class " + std::to_string(c) + " has fewer than 6 examples");
    present.push_back(c);
    counts.push_back(static_cast<double>(by_class[c].size()));
  }
  require(!present.empty(), "condense part is empty");
  const std::size_t total_meta = round_half_up(static_cast<double>(condense_part.size()) * meta_fraction);
  auto meta_counts = largest_remainder(total_meta, counts);

  SeededRng rng(SeededRng::derive(seed, 0x3e7a));
  std::vector<std::size_t> meta_idx, train_idx;
  for (std::size_t j = 0; j < present.size(); ++j) {
    auto idx = by_class[present[j]];
    rng.shuffle(idx);
    require(meta_counts[j] >= 1 && meta_counts[j] < idx.size(), "meta fraction leaves a class part empty");
    meta_idx.insert(meta_idx.end(), idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(meta_counts[j]));
    train_idx.insert(train_idx.end(), idx.begin() + static_cast<std::ptrdiff_t>(meta_counts[j]), idx.end());
  }
  std::sort(meta_idx.begin(), meta_idx.end());
  std::sort(train_idx.begin(), train_idx.end());
  MetaTrainSplit split{condense_part.subset(meta_idx), condense_part.subset(train_idx)};
  require_disjoint(split.meta, split.train, "meta and train data");
  return split;
}

void require_disjoint(const Dataset& a, const Dataset& b, const std::string& what) {
  std::unordered_set<std::uint64_t> seen(a.ids.begin(), a.ids.end());
  for (auto id : b.ids)
    if (seen.count(id)) throw InvalidArgument(what + " share example " + std::to_string(id));
}

// ---------------------------------------------------------------- episodes

Episode sample_episode(const Dataset& data, const SplitPlan& plan, std::size_t ways, std::size_t shots,
                       std::size_t queries, std::uint64_t seed) {
  plan.validate();
  require(ways >= 2, "an episode needs at least 2 ways");
  require(shots >= 1 && queries >= 1, "shots and queries must be positive");
  auto by_class = data.indices_by_class();
  std::vector<int> eligible;
  for (int c : plan.descendant_classes) {
    require(c >= 0 && static_cast<std::size_t>(c) < data.num_classes, "descendant class outside dataset");
    if (by_class[c].size() >= shots + queries) eligible.push_back(c);
  }
  require(eligible.size() >= ways, "only " + std::to_string(eligible.size()) + " descendant classes have " +
                                       std::to_string(shots + queries) + " examples; episode needs " +
                                       std::to_string(ways));

  SeededRng rng(SeededRng::derive(seed, 0xe915));
  rng.shuffle(eligible);
  Episode ep;
  ep.classes.assign(eligible.begin(), eligible.begin() + static_cast<std::ptrdiff_t>(ways));
  ep.ways = ways;
  ep.shots = shots;
  ep.queries = queries;
  ep.seed = seed;

  std::vector<std::size_t> support_idx, query_idx;
  for (int c : ep.classes) {
    auto idx = by_class[c];
    rng.shuffle(idx);
    support_idx.insert(support_idx.end(), idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(shots));
    query_idx.insert(query_idx.end(), idx.begin() + static_cast<std::ptrdiff_t>(shots),
                     idx.begin() + static_cast<std::ptrdiff_t>(shots + queries));
  }
  auto relabel = [&](Dataset d) {
    std::vector<int> position(data.num_classes, -1);
    for (std::size_t j = 0; j < ep.classes.size(); ++j) position[ep.classes[j]] = static_cast<int>(j);
    for (auto& l : d.labels) l = position[l];
    d.num_classes = ways;
    return d;
  };
  ep.support = relabel(data.subset(support_idx));
  ep.query = relabel(data.subset(query_idx));
  require_disjoint(ep.support, ep.query, "support and query sets");
  return ep;
}

// ---------------------------------------------------------------- noise

Dataset inject_label_noise(const Dataset& data, const NoiseSpec& spec) {
  require(spec.ratio >= 0.0 && spec.ratio <= 1.0, "noise ratio must lie in [0, 1]");
  Dataset out = data;
  if (spec.ratio == 0.0) return out;
  require(data.num_classes >= 2, "label noise needs at least 2 classes");
  const std::size_t flips = round_half_up(spec.ratio * static_cast<double>(data.size()));
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);
  SeededRng rng(SeededRng::derive(spec.seed, 0x401e));
  rng.shuffle(order);
  for (std::size_t j = 0; j < flips; ++j) {
    const std::size_t i = order[j];
    int other = static_cast<int>(rng.below(data.num_classes - 1));
    if (other >= data.labels[i]) ++other;
    out.labels[i] = other;
  }
  return out;
}

// ---------------------------------------------------------------- sequential tasks

std::vector<SequentialTask> make_sequential_tasks(const SplitPlan& plan, std::size_t num_tasks,
                                                  std::size_t classes_per_task, std::uint64_t seed) {
  require(num_tasks >= 1, "need at least one task");
  require(classes_per_task >= 2, "a task needs at least 2 classes");
  require(classes_per_task <= plan.ancestry_classes.size(),
          "classes per task (" + std::to_string(classes_per_task) + ") exceeds ancestry classes (" +
              std::to_string(plan.ancestry_classes.size()) + ")");
  SeededRng rng(SeededRng::derive(seed, 0x5e9));
  std::vector<SequentialTask> tasks(num_tasks);
  for (auto& task : tasks) {
    auto pool = plan.ancestry_classes;
    rng.shuffle(pool);
    task.classes.assign(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(classes_per_task));
    std::sort(task.classes.begin(), task.classes.end());
  }
  return tasks;
}

// ---------------------------------------------------------------- synthetic data

SyntheticFamily parse_synthetic_family(const std::string& name) {
  if (name == "gaussian-blobs") return SyntheticFamily::GaussianBlobs;
  if (name == "textured-shapes") return SyntheticFamily::TexturedShapes;
  throw InvalidArgument("unknown synthetic family '" + name + "'");
}

std::string to_string(SyntheticFamily family) {
  return family == SyntheticFamily::GaussianBlobs ? "gaussian-blobs" : "textured-shapes";
}

namespace {

Dataset empty_dataset(const SyntheticConfig& config) {
  Dataset d;
  d.input = config.input;
  d.num_classes = config.num_classes;
  d.provenance = Provenance::Synthetic;
  d.pixels.reserve(config.num_classes * config.per_class * d.example_size());
  return d;
}

Dataset make_blobs(const SyntheticConfig& config) {
  Dataset d = empty_dataset(config);
  const std::size_t dim = d.example_size();
  SeededRng world(SeededRng::derive(config.seed, 1));
  std::vector<float> means(config.num_classes * dim);
  for (auto& m : means) m = config.separation * world.normal();
  SeededRng noise(SeededRng::derive(config.seed, 2));
  for (std::size_t c = 0; c < config.num_classes; ++c)
    for (std::size_t n = 0; n < config.per_class; ++n) {
      for (std::size_t j = 0; j < dim; ++j) d.pixels.push_back(means[c * dim + j] + noise.normal());
      d.labels.push_back(static_cast<int>(c));
      d.ids.push_back(d.ids.size());
    }
  return d;
}

// Classes share a dictionary of small oriented gratings; a class is a fixed
// arrangement of a few of them, rendered with positional jitter, random gain
// and a distractor pattern over unit Gaussian pixel noise.
struct Placement {
  std::size_t primitive, row, col;
};

Dataset make_textured(const SyntheticConfig& config) {
  Dataset d = empty_dataset(config);
  const std::size_t C = config.input.channels, H = config.input.height, W = config.input.width;
  const std::size_t p = std::clamp<std::size_t>(std::min(H, W) / 3, 3, 5);
  require(H >= p && W >= p, "image too small for textured-shapes");
  const std::size_t num_primitives = 12, parts = 2;

  SeededRng world(SeededRng::derive(config.seed, 1));
  std::vector<std::vector<float>> dictionary(num_primitives, std::vector<float>(C * p * p));
  for (auto& patch : dictionary) {
    const double theta = world.uniform_double() * std::numbers::pi;
    const double freq = 0.2 + 0.3 * world.uniform_double();
    const double phase = world.uniform_double() * 2.0 * std::numbers::pi;
    std::vector<float> tint(C);
    for (auto& t : tint) t = world.uniform(0.5f, 1.0f) * (world.uniform() < 0.5f ? -1.0f : 1.0f);
    double energy = 0.0;
    for (std::size_t u = 0; u < p; ++u)
      for (std::size_t v = 0; v < p; ++v) {
        const double s = std::cos(2.0 * std::numbers::pi * freq * (u * std::cos(theta) + v * std::sin(theta)) + phase);
        for (std::size_t ch = 0; ch < C; ++ch) patch[(ch * p + u) * p + v] = static_cast<float>(s) * tint[ch];
      }
    for (float x : patch) energy += static_cast<double>(x) * x;
    const float norm = static_cast<float>(std::sqrt(static_cast<double>(patch.size()) / std::max(energy, 1e-12)));
    for (auto& x : patch) x *= norm;
  }
  std::vector<std::vector<Placement>> classes(config.num_classes);
  for (auto& cls : classes)
    for (std::size_t j = 0; j < parts; ++j)
      cls.push_back({world.below(num_primitives), world.below(H - p + 1), world.below(W - p + 1)});

  SeededRng noise(SeededRng::derive(config.seed, 2));
  const std::size_t dim = d.example_size();
  std::vector<float> image(dim);
  auto stamp = [&](const std::vector<float>& patch, long row, long col, float gain) {
    row = std::clamp<long>(row, 0, static_cast<long>(H - p));
    col = std::clamp<long>(col, 0, static_cast<long>(W - p));
    for (std::size_t ch = 0; ch < C; ++ch)
      for (std::size_t u = 0; u < p; ++u)
        for (std::size_t v = 0; v < p; ++v)
          image[(ch * H + row + u) * W + col + v] += gain * patch[(ch * p + u) * p + v];
  };
  for (std::size_t c = 0; c < config.num_classes; ++c)
    for (std::size_t n = 0; n < config.per_class; ++n) {
      for (auto& x : image) x = noise.normal();
      for (const auto& part : classes[c]) {
        const long jr = static_cast<long>(noise.below(3)) - 1, jc = static_cast<long>(noise.below(3)) - 1;
        stamp(dictionary[part.primitive], static_cast<long>(part.row) + jr, static_cast<long>(part.col) + jc,
              config.separation * noise.uniform(0.7f, 1.3f));
      }
      stamp(dictionary[noise.below(num_primitives)], static_cast<long>(noise.below(H - p + 1)),
            static_cast<long>(noise.below(W - p + 1)), 0.5f * config.separation);
      d.pixels.insert(d.pixels.end(), image.begin(), image.end());
      d.labels.push_back(static_cast<int>(c));
      d.ids.push_back(d.ids.size());
    }
  return d;
}

}  // namespace

Dataset make_synthetic(const SyntheticConfig& config) {
  require(config.num_classes >= 2, "synthetic data needs at least 2 classes");
  require(config.per_class >= 1, "per-class count must be positive");
  require(config.input.channels >= 1 && config.input.height >= 1 && config.input.width >= 1, "empty input dims");
  require(config.separation >= 0.0f && std::isfinite(config.separation), "separation must be finite and >= 0");
  Dataset d = config.family == SyntheticFamily::GaussianBlobs ? make_blobs(config) : make_textured(config);
  d.validate();
  return d;
}

// ---------------------------------------------------------------- image files

Dataset load_image_directory(const std::filesystem::path& root) {
  namespace fs = std::filesystem;
  const fs::path manifest_path = root / "manifest.json";
  std::ifstream in(manifest_path);
  if (!in) throw IoError("cannot open " + manifest_path.string());
  nlohmann::json manifest;
  try {
    in >> manifest;
  } catch (const nlohmann::json::exception& e) {
    throw InvalidArgument("malformed manifest " + manifest_path.string() + ": " + e.what());
  }
  Dataset d;
  d.provenance = Provenance::File;
  try {
    d.input = {manifest.at("channels").get<std::size_t>(), manifest.at("height").get<std::size_t>(),
               manifest.at("width").get<std::size_t>()};
  } catch (const nlohmann::json::exception& e) {
    throw InvalidArgument("manifest " + manifest_path.string() + ": " + e.what());
  }
  require(d.input.channels == 1 || d.input.channels == 3, "images must be grayscale or RGB");
  const auto names = manifest.at("classes").get<std::vector<std::string>>();
  require(names.size() >= 2, "manifest lists fewer than 2 classes");
  d.num_classes = names.size();
  const std::size_t bytes = d.example_size();
  for (std::size_t c = 0; c < names.size(); ++c) {
    const fs::path dir = root / names[c];
    if (!fs::is_directory(dir)) throw IoError("missing class directory " + dir.string());
    std::vector<fs::path> files;
    for (const auto& entry : fs::directory_iterator(dir))
      if (entry.is_regular_file() && entry.path().extension() == ".raw") files.push_back(entry.path());
    std::sort(files.begin(), files.end());
    for (const auto& file : files) {
      std::ifstream f(file, std::ios::binary);
      std::vector<unsigned char> raw(bytes + 1);
      f.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
      if (static_cast<std::size_t>(f.gcount()) != bytes)
        throw IoError(file.string() + " is not " + std::to_string(bytes) + " bytes");
      for (std::size_t j = 0; j < bytes; ++j) d.pixels.push_back(static_cast<float>(raw[j]) / 255.0f);
      d.labels.push_back(static_cast<int>(c));
      d.ids.push_back(d.ids.size());
    }
  }
  d.validate();
  return d;
}

}  // namespace lg
