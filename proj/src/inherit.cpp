#include "learngene/inherit.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>
#include <set>

#include <zlib.h>

#include "learngene/ops.hpp"
#include "learngene/optim.hpp"
#include "learngene/rng.hpp"

namespace lg {

namespace {

void require(bool ok, const std::string& message) {
  if (!ok) throw InvalidArgument(message);
}

LayerSpec fresh_spec(Family family, std::size_t in, std::size_t out) {
  switch (family) {
    case Family::TinyMlp:
      return {LayerKind::Dense, in, out, Activation::Relu};
    case Family::TinyCnn:
      return {LayerKind::ConvBN, in, out, Activation::Relu};
    case Family::TinyResnet:
      return {in == out ? LayerKind::ResidualConv : LayerKind::ConvBN, in, out, Activation::Relu};
    case Family::TinyTransformer:
      break;
  }
  throw InvalidArgument("fresh_spec: transformer blocks are copied from the bundle");
}

std::size_t input_width(Family family, const InputSpec& input) {
  return family == Family::TinyMlp ? input.channels * input.height * input.width : input.channels;
}

std::size_t relative_position(std::size_t index, std::size_t from, std::size_t to) {
  // Maps 1-based index in a stack of `from` layers onto a stack of `to`.
  if (from <= 1 || to <= 1) return 1;
  const double r = static_cast<double>(index - 1) / static_cast<double>(from - 1);
  return static_cast<std::size_t>(std::lround(r * static_cast<double>(to - 1))) + 1;
}

std::vector<Tensor> trainable_parameters(const Model& model, bool freeze_inherited) {
  std::vector<Tensor> out;
  for (std::size_t i = 0; i < model.layers.size(); ++i) {
    if (freeze_inherited && std::count(model.inherited.begin(), model.inherited.end(), i)) continue;
    for (const auto& p : model.layers[i].params) out.push_back(p.value);
  }
  return out;
}

}  // namespace

std::size_t LearngeneBundle::parameter_count() const {
  std::size_t n = embedding ? embedding->parameter_count() : 0;
  for (const auto& layer : layers) n += layer.parameter_count();
  return n;
}

std::uint32_t hash_scores(std::span<const double> values) {
  uLong crc = crc32(0L, Z_NULL, 0);
  return static_cast<std::uint32_t>(
      crc32(crc, reinterpret_cast<const Bytef*>(values.data()), static_cast<uInt>(values.size() * sizeof(double))));
}

LearngeneBundle extract_learngene(const Model& ancestry, std::span<const std::size_t> selected,
                                  std::uint32_t score_hash) {
  require(!selected.empty(), "extract_learngene: empty layer selection");
  const std::size_t L = ancestry.depth();
  for (std::size_t i = 0; i < selected.size(); ++i) {
    require(selected[i] >= 1 && selected[i] <= L, "extract_learngene: layer " + std::to_string(selected[i]) +
                                                       " outside 1.." + std::to_string(L));
    require(i == 0 || selected[i] > selected[i - 1], "extract_learngene: layer numbers must be strictly ascending");
  }
  LearngeneBundle bundle;
  bundle.family = ancestry.family;
  bundle.input = ancestry.input;
  bundle.layer_numbers.assign(selected.begin(), selected.end());
  for (std::size_t l : selected) bundle.layers.push_back(ancestry.counted_layer(l).clone());
  for (const auto& layer : ancestry.layers)
    if (layer.spec.kind == LayerKind::PatchEmbed) bundle.embedding = layer.clone();
  bundle.ancestry_depth = L;
  for (std::size_t l = 1; l <= L; ++l) bundle.ancestry_widths.push_back(ancestry.counted_layer(l).spec.out_dim);
  bundle.ancestry_parameters = ancestry.parameter_count();
  bundle.ancestry_checksum = ancestry.checksum();
  bundle.score_hash = score_hash;
  if (selected.size() == L) bundle.warnings.push_back("every ancestry layer selected; only the head is left out");
  require(bundle.parameter_count() < bundle.ancestry_parameters,
          "extract_learngene: bundle would not be smaller than the ancestry");
  return bundle;
}

std::size_t DescendantPlan::inherited_count() const {
  return static_cast<std::size_t>(std::count_if(slots.begin(), slots.end(), [](const auto& s) { return s.inherited; }));
}

DescendantPlan plan_descendant(const LearngeneBundle& bundle, std::size_t depth, std::size_t num_classes) {
  require(!bundle.layers.empty(), "plan_descendant: empty bundle");
  require(num_classes >= 2, "plan_descendant: need at least two classes");
  DescendantPlan plan;
  plan.family = bundle.family;
  plan.input = bundle.input;
  plan.num_classes = num_classes;
  const std::size_t D = std::max(depth, bundle.layers.size());

  if (bundle.family == Family::TinyTransformer) {
    require(bundle.embedding.has_value(), "plan_descendant: transformer bundle lacks its embedding");
    plan.reuse_embedding = true;
    plan.embedding = bundle.embedding->spec;
    for (std::size_t i = 0; i < bundle.layers.size(); ++i) plan.slots.push_back({true, i, bundle.layers[i].spec});
    while (plan.slots.size() < D) plan.slots.push_back({false, 0, bundle.layers.back().spec});
    validate_plan(plan);
    return plan;
  }

  const std::size_t L = bundle.ancestry_depth;
  const std::size_t c0 = input_width(bundle.family, bundle.input);
  std::vector<std::size_t> positions;
  std::size_t prev_pos = 0, prev_out = c0;
  for (std::size_t i = 0; i < bundle.layers.size(); ++i) {
    const auto& spec = bundle.layers[i].spec;
    std::size_t min_pos = prev_pos + 1;
    if (spec.in_dim != prev_out) ++min_pos;  // a fresh layer must bridge the widths
    const std::size_t pos = std::max(relative_position(bundle.layer_numbers[i], L, D), min_pos);
    positions.push_back(pos);
    prev_pos = pos;
    prev_out = spec.out_dim;
  }
  const std::size_t total = std::max(D, positions.back());
  plan.slots.resize(total);
  std::vector<bool> taken(total + 2, false);
  for (std::size_t i = 0; i < positions.size(); ++i) {
    plan.slots[positions[i] - 1] = {true, i, bundle.layers[i].spec};
    taken[positions[i]] = true;
  }
  std::size_t prev = c0;
  for (std::size_t q = 1; q <= total; ++q) {
    auto& slot = plan.slots[q - 1];
    if (!slot.inherited) {
      std::size_t out;
      if (q < total && taken[q + 1]) {
        out = plan.slots[q].spec.in_dim;
      } else {
        out = bundle.ancestry_widths[relative_position(q, total, L) - 1];
      }
      slot = {false, 0, fresh_spec(bundle.family, prev, out)};
    }
    prev = slot.spec.out_dim;
  }
  validate_plan(plan);
  return plan;
}

DescendantPlan fresh_plan(const DescendantPlan& plan) {
  DescendantPlan out = plan;
  out.reuse_embedding = false;
  for (auto& slot : out.slots) slot.inherited = false;
  return out;
}

void validate_plan(const DescendantPlan& plan) {
  require(!plan.slots.empty(), "descendant plan has no layers");
  require(plan.num_classes >= 2, "descendant plan needs at least two classes");
  require(plan.family != Family::TinyTransformer || plan.embedding.has_value(),
          "transformer descendant plan needs an embedding");
  Shape shape{1, plan.input.channels, plan.input.height, plan.input.width};
  if (plan.embedding) shape = layer_output_shape(*plan.embedding, shape);
  for (std::size_t i = 0; i < plan.slots.size(); ++i) {
    require(is_counted(plan.slots[i].spec.kind), "descendant slot " + std::to_string(i + 1) + " is not a layer");
    shape = layer_output_shape(plan.slots[i].spec, shape);
  }
  layer_output_shape({LayerKind::ClassifierHead, plan.slots.back().spec.out_dim, plan.num_classes, Activation::None},
                     shape);
}

namespace {

Model assemble(const DescendantPlan& plan, const LearngeneBundle* bundle, std::uint64_t seed) {
  validate_plan(plan);
  Model model;
  model.family = plan.family;
  model.role = ModelRole::Descendant;
  model.input = plan.input;
  std::size_t position = 0;
  if (plan.embedding) {
    if (plan.reuse_embedding && bundle) {
      model.layers.push_back(bundle->embedding->clone());
      model.inherited.push_back(position);
    } else {
      model.layers.push_back(make_layer(*plan.embedding, SeededRng::derive(seed, position)));
    }
    ++position;
  }
  for (const auto& slot : plan.slots) {
    if (slot.inherited && bundle) {
      model.layers.push_back(bundle->layers[slot.bundle_index].clone());
      model.inherited.push_back(position);
    } else {
      model.layers.push_back(make_layer(slot.spec, SeededRng::derive(seed, position)));
    }
    ++position;
  }
  model.layers.push_back(make_layer({LayerKind::ClassifierHead, plan.slots.back().spec.out_dim, plan.num_classes,
                                     Activation::None},
                                    SeededRng::derive(seed, position)));
  model.validate();
  return model;
}

}  // namespace

Model build_descendant(const LearngeneBundle& bundle, const DescendantPlan& plan, std::uint64_t seed) {
  require(plan.family == bundle.family, "build_descendant: plan and bundle families differ");
  require(plan.input == bundle.input, "build_descendant: plan and bundle inputs differ");
  if (plan.reuse_embedding) {
    require(bundle.embedding.has_value() && plan.embedding && *plan.embedding == bundle.embedding->spec,
            "build_descendant: embedding does not match the bundle");
  }
  for (std::size_t i = 0; i < plan.slots.size(); ++i) {
    const auto& slot = plan.slots[i];
    if (!slot.inherited) continue;
    require(slot.bundle_index < bundle.layers.size(), "build_descendant: slot refers past the bundle");
    require(slot.spec == bundle.layers[slot.bundle_index].spec,
            "build_descendant: slot " + std::to_string(i + 1) + " does not match bundle layer " +
                std::to_string(bundle.layer_numbers[slot.bundle_index]));
  }
  Model model = assemble(plan, &bundle, seed);
  model.lineage = bundle.ancestry_checksum;
  require(model.parameter_count() < bundle.ancestry_parameters,
          "build_descendant: descendant has " + std::to_string(model.parameter_count()) +
              " parameters, not fewer than the ancestry's " + std::to_string(bundle.ancestry_parameters));
  return model;
}

Model build_from_plan(const DescendantPlan& plan, std::uint64_t seed) { return assemble(fresh_plan(plan), nullptr, seed); }

// ---------------------------------------------------------------- training

void TrainConfig::validate() const {
  require(lr >= 0.0f && std::isfinite(lr), "train: learning rate must be finite and non-negative");
  require(weight_decay >= 0.0f && std::isfinite(weight_decay), "train: weight decay must be finite and >= 0");
  require(batch_size >= 1, "train: batch size must be at least 1");
}

Evaluation evaluate(Model& model, const Dataset& data) {
  require(data.size() > 0, "evaluate: empty dataset");
  NoGradGuard guard;
  double loss = 0.0;
  std::size_t correct = 0;
  constexpr std::size_t chunk = 128;
  for (std::size_t start = 0; start < data.size(); start += chunk) {
    std::vector<std::size_t> idx(std::min(chunk, data.size() - start));
    std::iota(idx.begin(), idx.end(), start);
    const Batch batch = make_batch(data, idx);
    const Tensor logits = forward(model, batch.inputs, false);
    loss += static_cast<double>(cross_entropy(logits, batch.labels).item()) * static_cast<double>(idx.size());
    const std::size_t C = logits.dim(1);
    auto v = logits.data();
    for (std::size_t b = 0; b < idx.size(); ++b) {
      const auto row = v.subspan(b * C, C);
      const auto best = static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
      correct += best == batch.labels[b];
    }
  }
  return {loss / static_cast<double>(data.size()), static_cast<double>(correct) / static_cast<double>(data.size())};
}

std::vector<EpochMetrics> train_classifier(Model& model, const Dataset& train, const Dataset* test,
                                           const TrainConfig& config) {
  config.validate();
  require(train.size() > 0, "train: empty training set");
  require(train.num_classes <= model.num_classes(), "train: data has more classes than the model head");
  const auto start = std::chrono::steady_clock::now();
  auto record = [&](std::size_t epoch) {
    EpochMetrics m;
    m.epoch = epoch;
    const auto tr = evaluate(model, train);
    m.train_loss = tr.loss;
    m.train_accuracy = tr.accuracy;
    if (test) {
      const auto te = evaluate(model, *test);
      m.test_loss = te.loss;
      m.test_accuracy = te.accuracy;
    }
    if (config.record_time)
      m.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    return m;
  };

  std::vector<EpochMetrics> metrics{record(0)};
  auto all = model.parameters();
  auto params = trainable_parameters(model, config.freeze_inherited);
  SeededRng rng(SeededRng::derive(config.seed, 0x7a1));
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), 0);
  for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
    rng.shuffle(order);
    for (std::size_t s = 0; s < order.size(); s += config.batch_size) {
      const std::size_t n = std::min(config.batch_size, order.size() - s);
      if (n == 1 && order.size() > 1) continue;  // batch statistics need two examples
      const Batch batch = make_batch(train, std::span<const std::size_t>(order).subspan(s, n));
      zero_grads(all);
      backward(cross_entropy(forward(model, batch.inputs, true), batch.labels));
      sgd_step(params, config.lr, config.weight_decay);
    }
    metrics.push_back(record(epoch));
  }
  zero_grads(all);
  return metrics;
}

std::vector<EpochMetrics> finetune_descendant(Model& model, const Episode& episode, const SplitPlan& plan,
                                              const TrainConfig& config) {
  const std::set<int> ancestry(plan.ancestry_classes.begin(), plan.ancestry_classes.end());
  const std::set<int> condense(plan.condense_classes.begin(), plan.condense_classes.end());
  for (int c : episode.classes) {
    require(!ancestry.count(c), "finetune_descendant: class " + std::to_string(c) + " was used to train the ancestry");
    require(!condense.count(c), "finetune_descendant: class " + std::to_string(c) + " was used for condensation");
  }
  require(model.num_classes() == episode.ways, "finetune_descendant: head size does not match the episode ways");
  return train_classifier(model, episode.support, &episode.query, config);
}

}  // namespace lg
