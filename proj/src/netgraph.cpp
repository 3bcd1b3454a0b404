#include "learngene/netgraph.hpp"

#include <zlib.h>

#include <algorithm>
#include <cmath>

#include "learngene/ops.hpp"
#include "learngene/rng.hpp"

namespace lg {

namespace {

void require(bool cond, const std::string& what) {
  if (!cond) throw InvalidArgument(what);
}

Tensor uniform_tensor(Shape shape, float bound, SeededRng& rng) {
  std::vector<float> values(shape_numel(shape));
  for (auto& v : values) v = rng.uniform(-bound, bound);
  return Tensor(std::move(shape), std::move(values), true);
}

Tensor fan_in_tensor(Shape shape, std::size_t fan_in, SeededRng& rng) {
  return uniform_tensor(std::move(shape), 1.0f / std::sqrt(static_cast<float>(fan_in)), rng);
}

void add_linear(Layer& layer, const std::string& prefix, std::size_t in, std::size_t out, SeededRng& rng) {
  layer.params.push_back({prefix + "weight", fan_in_tensor({out, in}, in, rng)});
  layer.params.push_back({prefix + "bias", fan_in_tensor({out}, in, rng)});
}

void add_norm(Layer& layer, const std::string& prefix, std::size_t dim) {
  layer.params.push_back({prefix + "gamma", Tensor::full({dim}, 1.0f, true)});
  layer.params.push_back({prefix + "beta", Tensor::zeros({dim}, true)});
}

void add_bn_buffers(Layer& layer, std::size_t dim) {
  layer.buffers.push_back({"running_mean", Tensor::zeros({dim})});
  layer.buffers.push_back({"running_var", Tensor::full({dim}, 1.0f)});
}

Tensor activate(const Tensor& x, Activation act) { return act == Activation::Relu ? relu(x) : x; }

Tensor flatten_batch(const Tensor& x) {
  if (x.rank() == 2) return x;
  return reshape(x, {x.dim(0), x.numel() / x.dim(0)});
}

Tensor split_heads(const Tensor& t, std::size_t batch, std::size_t tokens, std::size_t heads, std::size_t dh) {
  return reshape(permute(reshape(t, {batch, tokens, heads, dh}), {0, 2, 1, 3}), {batch * heads, tokens, dh});
}

Tensor merge_heads(const Tensor& t, std::size_t batch, std::size_t tokens, std::size_t heads, std::size_t dh) {
  return reshape(permute(reshape(t, {batch, heads, tokens, dh}), {0, 2, 1, 3}), {batch, tokens, heads * dh});
}

Tensor batch_norm_layer(Layer& layer, const Tensor& x, bool training) {
  return batch_norm(x, layer.param("bn.gamma"), layer.param("bn.beta"), layer.buffer("running_mean"),
                    layer.buffer("running_var"), training);
}

}  // namespace

std::string_view to_string(LayerKind kind) {
  switch (kind) {
    case LayerKind::Dense: return "dense";
    case LayerKind::Conv1x1: return "conv1x1";
    case LayerKind::ConvBN: return "conv3x3-bn";
    case LayerKind::ResidualConv: return "residual-conv";
    case LayerKind::TransformerBlock: return "attention-block";
    case LayerKind::FeedForwardBlock: return "feed-forward-block";
    case LayerKind::LayerNorm: return "layer-norm";
    case LayerKind::ClassifierHead: return "classifier-head";
    case LayerKind::PatchEmbed: return "patch-embed";
  }
  return "?";
}

std::string_view to_string(Activation act) { return act == Activation::Relu ? "relu" : "none"; }

std::string_view to_string(Family family) {
  switch (family) {
    case Family::TinyMlp: return "tiny-mlp";
    case Family::TinyCnn: return "tiny-cnn";
    case Family::TinyResnet: return "tiny-resnet";
    case Family::TinyTransformer: return "tiny-transformer";
  }
  return "?";
}

std::string_view to_string(ModelRole role) {
  switch (role) {
    case ModelRole::Ancestry: return "ancestry";
    case ModelRole::PseudoDescendant: return "pseudo-descendant";
    case ModelRole::Descendant: return "descendant";
  }
  return "?";
}

LayerKind parse_layer_kind(std::string_view name) {
  for (auto kind : {LayerKind::Dense, LayerKind::Conv1x1, LayerKind::ConvBN, LayerKind::ResidualConv,
                    LayerKind::TransformerBlock, LayerKind::FeedForwardBlock, LayerKind::LayerNorm,
                    LayerKind::ClassifierHead, LayerKind::PatchEmbed}) {
    if (to_string(kind) == name) return kind;
  }
  throw InvalidArgument("unknown layer kind '" + std::string(name) + "'");
}

Activation parse_activation(std::string_view name) {
  if (name == "relu") return Activation::Relu;
  if (name == "none") return Activation::None;
  throw InvalidArgument("unknown activation '" + std::string(name) + "'");
}

Family parse_family(std::string_view name) {
  for (auto f : {Family::TinyMlp, Family::TinyCnn, Family::TinyResnet, Family::TinyTransformer}) {
    if (to_string(f) == name) return f;
  }
  throw InvalidArgument("unsupported architecture family '" + std::string(name) + "'");
}

ModelRole parse_role(std::string_view name) {
  for (auto r : {ModelRole::Ancestry, ModelRole::PseudoDescendant, ModelRole::Descendant}) {
    if (to_string(r) == name) return r;
  }
  throw InvalidArgument("unknown model role '" + std::string(name) + "'");
}

bool is_counted(LayerKind kind) { return kind != LayerKind::ClassifierHead && kind != LayerKind::PatchEmbed; }

Shape layer_output_shape(const LayerSpec& spec, const Shape& in) {
  const std::string where = std::string(to_string(spec.kind)) + ": input " + shape_str(in);
  require(!in.empty() && in[0] > 0, where + " has no batch axis");
  const std::size_t batch = in[0];
  switch (spec.kind) {
    case LayerKind::Dense: {
      std::size_t features = shape_numel(in) / batch;
      require(features == spec.in_dim, where + " does not flatten to " + std::to_string(spec.in_dim));
      return {batch, spec.out_dim};
    }
    case LayerKind::Conv1x1:
    case LayerKind::ConvBN:
    case LayerKind::ResidualConv:
      require(in.size() == 4 && in[1] == spec.in_dim, where + " expected " + std::to_string(spec.in_dim) + " channels");
      require(spec.kind != LayerKind::ResidualConv || spec.in_dim == spec.out_dim,
              where + ": residual blocks need equal input and output channels");
      return {batch, spec.out_dim, in[2], in[3]};
    case LayerKind::TransformerBlock:
    case LayerKind::FeedForwardBlock:
    case LayerKind::LayerNorm:
      require(in.size() == 3 && in[2] == spec.in_dim && spec.in_dim == spec.out_dim,
              where + " expected token width " + std::to_string(spec.in_dim));
      return in;
    case LayerKind::ClassifierHead:
      require((in.size() == 2 && in[1] == spec.in_dim) || (in.size() == 3 && in[2] == spec.in_dim) ||
                  (in.size() == 4 && in[1] == spec.in_dim),
              where + " expected feature width " + std::to_string(spec.in_dim));
      return {batch, spec.out_dim};
    case LayerKind::PatchEmbed: {
      require(in.size() == 4 && spec.patch > 0 && in[2] % spec.patch == 0 && in[3] % spec.patch == 0,
              where + " is not divisible into patches");
      require(in[1] * spec.patch * spec.patch == spec.in_dim, where + " patch size does not match");
      const std::size_t tokens = (in[2] / spec.patch) * (in[3] / spec.patch);
      require(tokens == spec.tokens, where + " token count mismatch");
      return {batch, tokens, spec.out_dim};
    }
  }
  throw InvalidArgument(where + ": unknown layer kind");
}

Tensor& Layer::param(std::string_view name) {
  for (auto& p : params)
    if (p.name == name) return p.value;
  throw InvalidArgument("layer " + std::string(to_string(spec.kind)) + " has no parameter '" + std::string(name) + "'");
}

const Tensor& Layer::param(std::string_view name) const { return const_cast<Layer*>(this)->param(name); }

Tensor& Layer::buffer(std::string_view name) {
  for (auto& b : buffers)
    if (b.name == name) return b.value;
  throw InvalidArgument("layer " + std::string(to_string(spec.kind)) + " has no buffer '" + std::string(name) + "'");
}

std::size_t Layer::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : params) n += p.value.numel();
  return n;
}

Layer Layer::clone() const {
  Layer copy;
  copy.spec = spec;
  for (const auto& p : params) copy.params.push_back({p.name, p.value.clone()});
  for (const auto& b : buffers) copy.buffers.push_back({b.name, b.value.clone()});
  return copy;
}

Layer make_layer(const LayerSpec& spec, std::uint64_t seed) {
  require(spec.in_dim >= 1 && spec.out_dim >= 1, std::string(to_string(spec.kind)) + ": dims must be positive");
  SeededRng rng(seed);
  Layer layer;
  layer.spec = spec;
  switch (spec.kind) {
    case LayerKind::Dense:
    case LayerKind::ClassifierHead:
      add_linear(layer, "", spec.in_dim, spec.out_dim, rng);
      break;
    case LayerKind::Conv1x1:
      layer.params.push_back({"weight", fan_in_tensor({spec.out_dim, spec.in_dim, 1, 1}, spec.in_dim, rng)});
      layer.params.push_back({"bias", fan_in_tensor({spec.out_dim}, spec.in_dim, rng)});
      break;
    case LayerKind::ConvBN:
    case LayerKind::ResidualConv:
      require(spec.kind != LayerKind::ResidualConv || spec.in_dim == spec.out_dim,
              "residual-conv: input and output channels must match");
      layer.params.push_back({"weight", fan_in_tensor({spec.out_dim, spec.in_dim, 3, 3}, spec.in_dim * 9, rng)});
      add_norm(layer, "bn.", spec.out_dim);
      add_bn_buffers(layer, spec.out_dim);
      break;
    case LayerKind::TransformerBlock: {
      require(spec.in_dim == spec.out_dim, "attention-block: width must be preserved");
      require(spec.heads >= 1 && spec.in_dim % spec.heads == 0, "attention-block: width not divisible by heads");
      require(spec.hidden >= 1, "attention-block: hidden width must be positive");
      const std::size_t d = spec.in_dim;
      add_norm(layer, "ln1.", d);
      add_linear(layer, "q.", d, d, rng);
      add_linear(layer, "k.", d, d, rng);
      add_linear(layer, "v.", d, d, rng);
      add_linear(layer, "proj.", d, d, rng);
      add_norm(layer, "ln2.", d);
      add_linear(layer, "fc1.", d, spec.hidden, rng);
      add_linear(layer, "fc2.", spec.hidden, d, rng);
      break;
    }
    case LayerKind::FeedForwardBlock:
      require(spec.in_dim == spec.out_dim && spec.hidden >= 1, "feed-forward-block: bad dims");
      add_norm(layer, "ln.", spec.in_dim);
      add_linear(layer, "fc1.", spec.in_dim, spec.hidden, rng);
      add_linear(layer, "fc2.", spec.hidden, spec.in_dim, rng);
      break;
    case LayerKind::LayerNorm:
      require(spec.in_dim == spec.out_dim, "layer-norm: width must be preserved");
      add_norm(layer, "", spec.in_dim);
      break;
    case LayerKind::PatchEmbed:
      require(spec.patch >= 1 && spec.tokens >= 1, "patch-embed: patch size and token count required");
      add_linear(layer, "", spec.in_dim, spec.out_dim, rng);
      layer.params.push_back({"pos", uniform_tensor({spec.tokens, spec.out_dim}, 0.02f, rng)});
      break;
  }
  return layer;
}

Tensor forward_layer(Layer& layer, const Tensor& prev, bool training) {
  const auto& spec = layer.spec;
  layer_output_shape(spec, prev.shape());  // validates
  switch (spec.kind) {
    case LayerKind::Dense:
      return activate(linear(flatten_batch(prev), layer.param("weight"), layer.param("bias")), spec.activation);
    case LayerKind::Conv1x1:
      return activate(conv2d(prev, layer.param("weight"), layer.param("bias"), 0), spec.activation);
    case LayerKind::ConvBN: {
      Tensor z = conv2d(prev, layer.param("weight"), Tensor(), 1);
      return activate(batch_norm_layer(layer, z, training), spec.activation);
    }
    case LayerKind::ResidualConv: {
      Tensor z = conv2d(prev, layer.param("weight"), Tensor(), 1);
      return add(activate(batch_norm_layer(layer, z, training), spec.activation), prev);
    }
    case LayerKind::TransformerBlock: {
      const std::size_t batch = prev.dim(0), tokens = prev.dim(1), d = prev.dim(2);
      const std::size_t heads = spec.heads, dh = d / heads;
      Tensor h = layer_norm(prev, layer.param("ln1.gamma"), layer.param("ln1.beta"));
      Tensor q = split_heads(linear(h, layer.param("q.weight"), layer.param("q.bias")), batch, tokens, heads, dh);
      Tensor k = split_heads(linear(h, layer.param("k.weight"), layer.param("k.bias")), batch, tokens, heads, dh);
      Tensor v = split_heads(linear(h, layer.param("v.weight"), layer.param("v.bias")), batch, tokens, heads, dh);
      Tensor scores = scale(bmm(q, permute(k, {0, 2, 1})), 1.0f / std::sqrt(static_cast<float>(dh)));
      Tensor attended = merge_heads(bmm(softmax(scores), v), batch, tokens, heads, dh);
      Tensor mid = add(prev, linear(attended, layer.param("proj.weight"), layer.param("proj.bias")));
      Tensor h2 = layer_norm(mid, layer.param("ln2.gamma"), layer.param("ln2.beta"));
      Tensor ff = linear(relu(linear(h2, layer.param("fc1.weight"), layer.param("fc1.bias"))),
                         layer.param("fc2.weight"), layer.param("fc2.bias"));
      return add(mid, ff);
    }
    case LayerKind::FeedForwardBlock: {
      Tensor h = layer_norm(prev, layer.param("ln.gamma"), layer.param("ln.beta"));
      Tensor ff = linear(relu(linear(h, layer.param("fc1.weight"), layer.param("fc1.bias"))),
                         layer.param("fc2.weight"), layer.param("fc2.bias"));
      return add(prev, ff);
    }
    case LayerKind::LayerNorm:
      return layer_norm(prev, layer.param("gamma"), layer.param("beta"));
    case LayerKind::ClassifierHead: {
      Tensor pooled = prev;
      if (prev.rank() == 4) {
        pooled = mean_axis(reshape(prev, {prev.dim(0), prev.dim(1), prev.dim(2) * prev.dim(3)}), 2);
      } else if (prev.rank() == 3) {
        pooled = mean_axis(prev, 1);
      }
      return linear(pooled, layer.param("weight"), layer.param("bias"));
    }
    case LayerKind::PatchEmbed: {
      const std::size_t batch = prev.dim(0), c = prev.dim(1), p = spec.patch;
      const std::size_t gh = prev.dim(2) / p, gw = prev.dim(3) / p;
      Tensor patches = reshape(permute(reshape(prev, {batch, c, gh, p, gw, p}), {0, 2, 4, 1, 3, 5}),
                               {batch, gh * gw, c * p * p});
      return add_broadcast(linear(patches, layer.param("weight"), layer.param("bias")), layer.param("pos"));
    }
  }
  throw InvalidArgument("forward_layer: unknown layer kind");
}

std::vector<std::size_t> Model::counted_positions() const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < layers.size(); ++i)
    if (is_counted(layers[i].spec.kind)) out.push_back(i);
  return out;
}

Layer& Model::counted_layer(std::size_t number) {
  auto pos = counted_positions();
  require(number >= 1 && number <= pos.size(), "layer number " + std::to_string(number) + " out of range");
  return layers[pos[number - 1]];
}

const Layer& Model::counted_layer(std::size_t number) const {
  return const_cast<Model*>(this)->counted_layer(number);
}

std::size_t Model::num_classes() const {
  require(!layers.empty() && layers.back().spec.kind == LayerKind::ClassifierHead, "model has no classifier head");
  return layers.back().spec.out_dim;
}

std::vector<Tensor> Model::parameters() const {
  std::vector<Tensor> out;
  for (const auto& layer : layers)
    for (const auto& p : layer.params) out.push_back(p.value);
  return out;
}

std::size_t Model::parameter_count() const {
  std::size_t n = 0;
  for (const auto& layer : layers) n += layer.parameter_count();
  return n;
}

std::uint32_t Model::checksum() const {
  uLong crc = crc32(0L, Z_NULL, 0);
  for (const auto& layer : layers) {
    for (const auto* group : {&layer.params, &layer.buffers}) {
      for (const auto& t : *group) {
        auto values = t.value.data();
        crc = crc32(crc, reinterpret_cast<const Bytef*>(values.data()),
                    static_cast<uInt>(values.size() * sizeof(float)));
      }
    }
  }
  return static_cast<std::uint32_t>(crc);
}

Model Model::clone() const {
  Model copy;
  copy.family = family;
  copy.role = role;
  copy.input = input;
  copy.lineage = lineage;
  copy.inherited = inherited;
  for (const auto& layer : layers) copy.layers.push_back(layer.clone());
  return copy;
}

void Model::validate() const {
  require(!layers.empty(), "model has no layers");
  Shape shape{1, input.channels, input.height, input.width};
  for (const auto& layer : layers) shape = layer_output_shape(layer.spec, shape);
  require(layers.back().spec.kind == LayerKind::ClassifierHead, "model must end in a classifier head");
}

std::vector<std::size_t> expand_widths(const ModelConfig& config) {
  require(config.depth >= 1, "build_model: depth must be at least 1");
  require(!config.widths.empty(), "build_model: widths missing");
  std::vector<std::size_t> widths = config.widths;
  if (widths.size() == 1) widths.assign(config.depth, widths[0]);
  require(widths.size() == config.depth, "build_model: expected " + std::to_string(config.depth) + " widths, got " +
                                             std::to_string(widths.size()));
  for (auto w : widths) require(w >= 2, "build_model: width must be at least 2");
  return widths;
}

Model build_model(const ModelConfig& config, std::uint64_t seed) {
  const auto widths = expand_widths(config);
  require(config.num_classes >= 2, "build_model: need at least two classes");
  Model model;
  model.family = config.family;
  model.role = config.role;
  model.input = config.input;
  std::vector<LayerSpec> specs;
  const std::size_t in_ch = config.input.channels;
  switch (config.family) {
    case Family::TinyMlp: {
      std::size_t prev = in_ch * config.input.height * config.input.width;
      for (auto w : widths) {
        specs.push_back({LayerKind::Dense, prev, w, Activation::Relu});
        prev = w;
      }
      break;
    }
    case Family::TinyCnn: {
      std::size_t prev = in_ch;
      for (auto w : widths) {
        specs.push_back({LayerKind::ConvBN, prev, w, Activation::Relu});
        prev = w;
      }
      break;
    }
    case Family::TinyResnet: {
      std::size_t prev = in_ch;
      for (auto w : widths) {
        specs.push_back({w == prev ? LayerKind::ResidualConv : LayerKind::ConvBN, prev, w, Activation::Relu});
        prev = w;
      }
      break;
    }
    case Family::TinyTransformer: {
      const std::size_t d = widths[0];
      for (auto w : widths) require(w == d, "tiny-transformer: all blocks share one token width");
      const std::size_t p = config.patch;
      require(p >= 1 && config.input.height % p == 0 && config.input.width % p == 0,
              "tiny-transformer: image size must be divisible by the patch size");
      LayerSpec embed{LayerKind::PatchEmbed, in_ch * p * p, d, Activation::None};
      embed.patch = p;
      embed.tokens = (config.input.height / p) * (config.input.width / p);
      specs.push_back(embed);
      for (std::size_t i = 0; i < widths.size(); ++i) {
        LayerSpec block{LayerKind::TransformerBlock, d, d, Activation::Relu};
        block.heads = config.heads;
        block.hidden = 2 * d;
        specs.push_back(block);
      }
      break;
    }
  }
  specs.push_back({LayerKind::ClassifierHead, widths.back(), config.num_classes, Activation::None});
  for (std::size_t i = 0; i < specs.size(); ++i) model.layers.push_back(make_layer(specs[i], SeededRng::derive(seed, i)));
  model.validate();
  return model;
}

ForwardResult forward_collect(Model& model, const Tensor& batch, bool training) {
  require(batch.defined() && batch.rank() >= 1 && batch.dim(0) > 0, "forward_collect: empty batch");
  require(batch.rank() == 4 && batch.dim(1) == model.input.channels && batch.dim(2) == model.input.height &&
              batch.dim(3) == model.input.width,
          "forward_collect: batch shape " + shape_str(batch.shape()) + " does not match the model input");
  ForwardResult result;
  Tensor h = batch;
  for (auto& layer : model.layers) {
    h = forward_layer(layer, h, training);
    if (is_counted(layer.spec.kind)) result.trace.push_back(h);
  }
  result.logits = h;
  return result;
}

Tensor forward(Model& model, const Tensor& batch, bool training) {
  return forward_collect(model, batch, training).logits;
}

}  // namespace lg
