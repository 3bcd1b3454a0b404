#include "learngene/config.hpp"

#include <cmath>
#include <fstream>
#include <iterator>
#include <set>

#include <json.hpp>

namespace lg {

namespace {

using json = nlohmann::json;
using ojson = nlohmann::ordered_json;

void require(bool ok, const std::string& message) {
  if (!ok) throw InvalidArgument("config: " + message);
}

/// Reads one section and remembers which keys were consumed.
class Section {
 public:
  Section(const json& root, std::string name) : name_(std::move(name)) {
    if (root.contains(name_)) {
      require(root.at(name_).is_object(), "section '" + name_ + "' must be an object");
      j_ = &root.at(name_);
    }
  }

  bool has(const char* key) const { return j_ && j_->contains(key); }

  void get(const char* key, std::size_t& out) {
    if (const json* v = take(key)) {
      require(v->is_number_unsigned(), where(key) + " must be a non-negative integer");
      out = v->get<std::size_t>();
    }
  }
  void get(const char* key, std::uint64_t& out, bool) {
    if (const json* v = take(key)) {
      require(v->is_number_unsigned(), where(key) + " must be a non-negative integer");
      out = v->get<std::uint64_t>();
    }
  }
  void get(const char* key, double& out) {
    if (const json* v = take(key)) {
      require(v->is_number(), where(key) + " must be a number");
      out = v->get<double>();
      require(std::isfinite(out), where(key) + " must be finite");
    }
  }
  void get(const char* key, bool& out) {
    if (const json* v = take(key)) {
      require(v->is_boolean(), where(key) + " must be true or false");
      out = v->get<bool>();
    }
  }
  void get(const char* key, std::string& out) {
    if (const json* v = take(key)) {
      require(v->is_string(), where(key) + " must be a string");
      out = v->get<std::string>();
    }
  }
  template <typename T>
  void get_list(const char* key, std::vector<T>& out) {
    if (const json* v = take(key)) {
      require(v->is_array(), where(key) + " must be a list");
      out.clear();
      for (const auto& e : *v) {
        if constexpr (std::is_same_v<T, std::string>) {
          require(e.is_string(), where(key) + " must hold strings");
        } else if constexpr (std::is_floating_point_v<T>) {
          require(e.is_number(), where(key) + " must hold numbers");
        } else if constexpr (std::is_signed_v<T>) {
          require(e.is_number_integer(), where(key) + " must hold integers");
        } else {
          require(e.is_number_unsigned(), where(key) + " must hold non-negative integers");
        }
        out.push_back(e.get<T>());
      }
    }
  }
  template <typename T, typename Parse>
  void get_enum(const char* key, T& out, Parse parse) {
    std::string name;
    if (!has(key)) return;
    get(key, name);
    try {
      out = parse(name);
    } catch (const InvalidArgument& e) {
      require(false, where(key) + ": " + e.what());
    }
  }

  void finish() const {
    if (!j_) return;
    for (const auto& [key, value] : j_->items()) {
      require(seen_.count(key), "unknown key '" + key + "' in section '" + name_ + "'");
    }
  }

 private:
  const json* take(const char* key) {
    if (!has(key)) return nullptr;
    seen_.insert(key);
    return &j_->at(key);
  }
  std::string where(const char* key) const { return name_ + "." + key; }

  const json* j_ = nullptr;
  std::string name_;
  std::set<std::string> seen_;
};

void read_fit(Section& s, FitSection& f) {
  s.get("epochs", f.epochs);
  s.get("lr", f.lr);
  s.get("weight_decay", f.weight_decay);
  s.get("batch_size", f.batch_size);
}

ojson fit_json(const FitSection& f) {
  return {{"epochs", f.epochs}, {"lr", f.lr}, {"weight_decay", f.weight_decay}, {"batch_size", f.batch_size}};
}

void check_fit(const FitSection& f, const std::string& name) {
  require(f.lr >= 0.0, name + ".lr must be >= 0");
  require(f.weight_decay >= 0.0, name + ".weight_decay must be >= 0");
  require(f.batch_size >= 1, name + ".batch_size must be >= 1");
}

std::string align_name(AlignPolicy p) {
  switch (p) {
    case AlignPolicy::Identity: return "identity";
    case AlignPolicy::Pointwise: return "pointwise";
    case AlignPolicy::Auto: break;
  }
  return "auto";
}

ModelConfig arch_model(const ArchSection& a, std::size_t classes, const InputSpec& input) {
  ModelConfig m;
  m.family = a.family;
  m.depth = a.depth;
  m.widths = a.widths;
  m.num_classes = classes;
  m.input = input;
  m.patch = a.patch;
  m.heads = a.heads;
  return m;
}

}  // namespace

Method parse_method(const std::string& name) {
  for (auto m : {Method::AutoLearngene, Method::FromScratch, Method::HeurLearngene, Method::FullTransfer})
    if (to_string(m) == name) return m;
  throw InvalidArgument("unknown method '" + name + "'");
}

std::string to_string(Method method) {
  switch (method) {
    case Method::AutoLearngene: return "auto-learngene";
    case Method::FromScratch: return "from-scratch";
    case Method::HeurLearngene: return "heur-learngene";
    case Method::FullTransfer: return "full-transfer";
  }
  return "?";
}

RunConfig parse_run_config(const std::string& text) {
  json root;
  try {
    root = json::parse(text);
  } catch (const json::exception& e) {
    throw InvalidArgument(std::string("config: not valid JSON (") + e.what() + ")");
  }
  require(root.is_object(), "top level must be an object");
  static const std::set<std::string> sections{"run",     "data",    "split", "ancestry", "condense",  "descendant",
                                              "episode", "noise",   "compare", "sweep",  "evolution", "stability"};
  for (const auto& [key, value] : root.items()) require(sections.count(key), "unknown section '" + key + "'");

  RunConfig c;
  {
    Section s(root, "run");
    require(s.has("seed"), "run.seed is required");
    s.get("id", c.id);
    s.get("seed", c.seed, true);
    std::string out;
    s.get("out", out);
    c.out = out;
    s.get("record_time", c.record_time);
    s.finish();
  }
  {
    Section s(root, "data");
    s.get("source", c.data.source);
    s.get_enum("family", c.data.family, [](const std::string& n) { return parse_synthetic_family(n); });
    s.get("classes", c.data.classes);
    s.get("per_class", c.data.per_class);
    s.get("channels", c.data.input.channels);
    s.get("height", c.data.input.height);
    s.get("width", c.data.input.width);
    s.get("separation", c.data.separation);
    s.get("path", c.data.path);
    s.finish();
  }
  {
    Section s(root, "split");
    s.get("ancestry", c.split.ratios.ancestry);
    s.get("condense", c.split.ratios.condense);
    s.get("descendant", c.split.ratios.descendant);
    s.get("meta_fraction", c.split.meta_fraction);
    s.get_list("ancestry_classes", c.split.ancestry_classes);
    s.get_list("condense_classes", c.split.condense_classes);
    s.get_list("descendant_classes", c.split.descendant_classes);
    s.finish();
  }
  {
    Section s(root, "ancestry");
    s.get_enum("family", c.ancestry.family, [](const std::string& n) { return parse_family(n); });
    s.get("depth", c.ancestry.depth);
    s.get_list("widths", c.ancestry.widths);
    s.get("patch", c.ancestry.patch);
    s.get("heads", c.ancestry.heads);
    read_fit(s, c.ancestry_fit);
    s.finish();
  }
  {
    Section s(root, "condense");
    s.get("pseudo_depth", c.condense.pseudo_depth);
    s.get_list("pseudo_widths", c.condense.pseudo_widths);
    s.get("iterations", c.condense.iterations);
    s.get("inner_lr", c.condense.inner_lr);
    s.get("meta_lr", c.condense.meta_lr);
    s.get("inner_batch", c.condense.inner_batch);
    s.get("meta_batch", c.condense.meta_batch);
    s.get_enum("align", c.condense.align, [](const std::string& n) { return parse_align_policy(n); });
    s.get("meta_weight_init", c.condense.meta_weight_init);
    s.get("meta_bias_init", c.condense.meta_bias_init);
    s.finish();
  }
  {
    Section s(root, "descendant");
    s.get("depth", c.descendant.depth);
    read_fit(s, c.descendant.fit);
    s.get("freeze_inherited", c.descendant.freeze_inherited);
    s.finish();
  }
  {
    Section s(root, "episode");
    s.get("ways", c.episode.ways);
    s.get("shots", c.episode.shots);
    s.get("queries", c.episode.queries);
    s.get("count", c.episode.count);
    s.finish();
  }
  {
    Section s(root, "noise");
    s.get("ratio", c.noise_ratio);
    s.finish();
  }
  {
    Section s(root, "compare");
    s.get_list("methods", c.compare.methods);
    s.get("seeds", c.compare.seeds);
    s.finish();
  }
  {
    Section s(root, "sweep");
    s.get_list("lrs", c.sweep.lrs);
    s.get_list("weight_decays", c.sweep.weight_decays);
    s.get_list("methods", c.sweep.methods);
    s.get("seeds", c.sweep.seeds);
    s.finish();
  }
  {
    Section s(root, "evolution");
    s.get("tasks", c.evolution.tasks);
    s.get("classes_per_task", c.evolution.classes_per_task);
    s.get("steps_per_task", c.evolution.steps_per_task);
    s.get("episodes", c.evolution.episodes);
    s.finish();
  }
  {
    Section s(root, "stability");
    s.get("trials", c.stability.trials);
    if (s.has("plant_layer") || s.has("plant_position")) {
      PlantSection p;
      s.get("plant_layer", p.layer);
      s.get("plant_position", p.position);
      c.stability.plant = p;
    }
    s.finish();
  }
  if (c.out.empty()) c.out = std::filesystem::path("runs") / c.id;
  c.validate();
  return c;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config " + path.string());
  return parse_run_config({std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()});
}

std::string dump_run_config(const RunConfig& c) {
  ojson stability = {{"trials", c.stability.trials}};
  if (c.stability.plant) {
    stability["plant_layer"] = c.stability.plant->layer;
    stability["plant_position"] = c.stability.plant->position;
  }
  ojson ancestry = {{"family", std::string(to_string(c.ancestry.family))},
                    {"depth", c.ancestry.depth},
                    {"widths", c.ancestry.widths},
                    {"patch", c.ancestry.patch},
                    {"heads", c.ancestry.heads}};
  ancestry.update(fit_json(c.ancestry_fit));
  ojson descendant = {{"depth", c.descendant.depth}};
  descendant.update(fit_json(c.descendant.fit));
  descendant["freeze_inherited"] = c.descendant.freeze_inherited;
  ojson root = {
      {"run", {{"id", c.id}, {"seed", c.seed}, {"out", c.out.string()}, {"record_time", c.record_time}}},
      {"data",
       {{"source", c.data.source},
        {"family", to_string(c.data.family)},
        {"classes", c.data.classes},
        {"per_class", c.data.per_class},
        {"channels", c.data.input.channels},
        {"height", c.data.input.height},
        {"width", c.data.input.width},
        {"separation", c.data.separation},
        {"path", c.data.path}}},
      {"split",
       {{"ancestry", c.split.ratios.ancestry},
        {"condense", c.split.ratios.condense},
        {"descendant", c.split.ratios.descendant},
        {"meta_fraction", c.split.meta_fraction},
        {"ancestry_classes", c.split.ancestry_classes},
        {"condense_classes", c.split.condense_classes},
        {"descendant_classes", c.split.descendant_classes}}},
      {"ancestry", ancestry},
      {"condense",
       {{"pseudo_depth", c.condense.pseudo_depth},
        {"pseudo_widths", c.condense.pseudo_widths},
        {"iterations", c.condense.iterations},
        {"inner_lr", c.condense.inner_lr},
        {"meta_lr", c.condense.meta_lr},
        {"inner_batch", c.condense.inner_batch},
        {"meta_batch", c.condense.meta_batch},
        {"align", align_name(c.condense.align)},
        {"meta_weight_init", c.condense.meta_weight_init},
        {"meta_bias_init", c.condense.meta_bias_init}}},
      {"descendant", descendant},
      {"episode",
       {{"ways", c.episode.ways}, {"shots", c.episode.shots}, {"queries", c.episode.queries}, {"count", c.episode.count}}},
      {"noise", {{"ratio", c.noise_ratio}}},
      {"compare", {{"methods", c.compare.methods}, {"seeds", c.compare.seeds}}},
      {"sweep",
       {{"lrs", c.sweep.lrs},
        {"weight_decays", c.sweep.weight_decays},
        {"methods", c.sweep.methods},
        {"seeds", c.sweep.seeds}}},
      {"evolution",
       {{"tasks", c.evolution.tasks},
        {"classes_per_task", c.evolution.classes_per_task},
        {"steps_per_task", c.evolution.steps_per_task},
        {"episodes", c.evolution.episodes}}},
      {"stability", stability}};
  return root.dump(2) + "\n";
}

SplitPlan make_split_plan(const RunConfig& c, std::size_t num_classes, std::uint64_t seed) {
  const auto& s = c.split;
  SplitPlan plan;
  if (!s.ancestry_classes.empty() || !s.condense_classes.empty() || !s.descendant_classes.empty()) {
    require(!s.ancestry_classes.empty() && !s.condense_classes.empty() && !s.descendant_classes.empty(),
            "explicit split lists must all be given");
    plan.ancestry_classes = s.ancestry_classes;
    plan.condense_classes = s.condense_classes;
    plan.descendant_classes = s.descendant_classes;
    plan.seed = seed;
    for (const auto* part : {&plan.ancestry_classes, &plan.condense_classes, &plan.descendant_classes})
      for (int cls : *part)
        require(cls >= 0 && static_cast<std::size_t>(cls) < num_classes,
                "split class " + std::to_string(cls) + " outside 0.." + std::to_string(num_classes - 1));
  } else {
    plan = split_classes(num_classes, s.ratios, seed);
  }
  plan.meta_fraction = s.meta_fraction;
  plan.train_fraction = 1.0 - s.meta_fraction;
  try {
    plan.validate();
  } catch (const InvalidArgument& e) {
    require(false, std::string("split: ") + e.what());
  }
  return plan;
}

void RunConfig::validate() const {
  require(!id.empty() && id.find_first_of(",\n\r\"/") == std::string::npos, "run.id must be a plain name");

  require(data.source == "synthetic" || data.source == "directory", "data.source must be synthetic or directory");
  require(data.source != "directory" || !data.path.empty(), "data.path is required for directory data");
  require(data.input.channels >= 1 && data.input.height >= 1 && data.input.width >= 1, "data dimensions must be >= 1");
  require(data.separation >= 0.0, "data.separation must be >= 0");
  require(data.per_class >= 6, "data.per_class must be at least 6");

  require(split.ratios.ancestry >= 0 && split.ratios.condense >= 0 && split.ratios.descendant >= 0,
          "split ratios must be >= 0");
  require(split.meta_fraction > 0.0 && split.meta_fraction < 1.0, "split.meta_fraction must lie in (0, 1)");

  check_fit(ancestry_fit, "ancestry");
  check_fit(descendant.fit, "descendant");
  require(descendant.depth >= 1, "descendant.depth must be >= 1");
  require(episode.ways >= 2 && episode.shots >= 1 && episode.queries >= 1 && episode.count >= 1,
          "episode needs ways >= 2, shots >= 1, queries >= 1, count >= 1");
  require(noise_ratio >= 0.0 && noise_ratio < 1.0, "noise.ratio must lie in [0, 1)");
  require(!compare.methods.empty(), "compare.methods is empty");
  for (const auto& m : compare.methods) parse_method(m);
  require(compare.seeds >= 5, "compare.seeds must be at least 5");
  require(!sweep.lrs.empty() && !sweep.weight_decays.empty() && !sweep.methods.empty(), "sweep grid is empty");
  for (double v : sweep.lrs) require(std::isfinite(v) && v >= 0.0, "sweep.lrs must be >= 0");
  for (double v : sweep.weight_decays) require(std::isfinite(v) && v >= 0.0, "sweep.weight_decays must be >= 0");
  for (const auto& m : sweep.methods) parse_method(m);
  require(sweep.seeds >= 1, "sweep.seeds must be >= 1");
  require(evolution.tasks >= 1 && evolution.classes_per_task >= 1 && evolution.episodes >= 1,
          "evolution needs tasks, classes_per_task and episodes >= 1");
  require(stability.trials >= 2, "stability.trials must be >= 2");

  if (data.source != "synthetic") return;  // class counts are known only after loading
  const SplitPlan plan = make_split_plan(*this, data.classes, seed);
  require(episode.ways <= plan.descendant_classes.size(),
          "episode.ways exceeds the " + std::to_string(plan.descendant_classes.size()) + " descendant classes");
  require(episode.shots + episode.queries <= data.per_class, "episode shots + queries exceed data.per_class");
  require(evolution.classes_per_task <= plan.ancestry_classes.size(),
          "evolution.classes_per_task exceeds the ancestry classes");

  Model anc, pseudo;
  try {
    anc = build_model(arch_model(ancestry, plan.ancestry_classes.size(), data.input), 0);
    ArchSection p = ancestry;
    p.depth = condense.pseudo_depth;
    p.widths = condense.pseudo_widths;
    pseudo = build_model(arch_model(p, plan.condense_classes.size(), data.input), 0);
  } catch (const InvalidArgument& e) {
    require(false, std::string("architecture: ") + e.what());
  }
  require(condense.iterations >= 1 && condense.inner_batch >= 1 && condense.meta_batch >= 1,
          "condense iterations and batch sizes must be >= 1");
  require(condense.inner_lr >= 0.0 && condense.meta_lr >= 0.0, "condense learning rates must be >= 0");
  if (stability.plant) {
    const auto& p = *stability.plant;
    require(p.layer >= 1 && p.layer <= anc.depth(), "stability.plant_layer outside the ancestry");
    require(p.position >= 1 && p.position <= pseudo.depth(), "stability.plant_position outside the pseudo-descendant");
    require(anc.counted_layer(p.layer).spec == pseudo.counted_layer(p.position).spec,
            "stability plant: ancestry and pseudo-descendant layers differ in shape");
  }
}

}  // namespace lg
