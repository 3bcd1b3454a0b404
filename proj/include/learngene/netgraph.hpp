#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "learngene/tensor.hpp"

namespace lg {

enum class LayerKind {
  Dense,
  Conv1x1,
  ConvBN,
  ResidualConv,
  TransformerBlock,
  FeedForwardBlock,
  LayerNorm,
  ClassifierHead,
  PatchEmbed,
};

enum class Activation { None, Relu };

enum class Family { TinyMlp, TinyCnn, TinyResnet, TinyTransformer };

enum class ModelRole { Ancestry, PseudoDescendant, Descendant };

std::string_view to_string(LayerKind kind);
std::string_view to_string(Activation act);
std::string_view to_string(Family family);
std::string_view to_string(ModelRole role);
LayerKind parse_layer_kind(std::string_view name);
Activation parse_activation(std::string_view name);
/// Accepts "tiny-mlp", "tiny-cnn", "tiny-resnet", "tiny-transformer".
Family parse_family(std::string_view name);
ModelRole parse_role(std::string_view name);

/// Whether a layer kind counts toward L / K (embeddings and heads do not).
bool is_counted(LayerKind kind);

/// Image batches are [B, channels, height, width].
struct InputSpec {
  std::size_t channels = 1;
  std::size_t height = 16;
  std::size_t width = 16;
  friend bool operator==(const InputSpec&, const InputSpec&) = default;
};

struct LayerSpec {
  LayerKind kind = LayerKind::Dense;
  std::size_t in_dim = 0;   // features, channels or token width
  std::size_t out_dim = 0;  // features, channels, token width or classes
  Activation activation = Activation::None;
  std::size_t heads = 0;    // TransformerBlock
  std::size_t hidden = 0;   // TransformerBlock / FeedForwardBlock
  std::size_t patch = 0;    // PatchEmbed
  std::size_t tokens = 0;   // PatchEmbed
  friend bool operator==(const LayerSpec&, const LayerSpec&) = default;
};

/// Output shape of `spec` applied to an input of shape `in` (batch-major);
/// throws InvalidArgument when the input does not fit.
Shape layer_output_shape(const LayerSpec& spec, const Shape& in);

struct NamedTensor {
  std::string name;
  Tensor value;
};

struct Layer {
  LayerSpec spec;
  std::vector<NamedTensor> params;   // trainable
  std::vector<NamedTensor> buffers;  // running statistics

  Tensor& param(std::string_view name);
  const Tensor& param(std::string_view name) const;
  Tensor& buffer(std::string_view name);
  std::size_t parameter_count() const;
  Layer clone() const;
};

/// Creates a layer with seeded uniform fan-in initialization.
Layer make_layer(const LayerSpec& spec, std::uint64_t seed);

struct Model {
  Family family = Family::TinyCnn;
  ModelRole role = ModelRole::Ancestry;
  InputSpec input;
  std::vector<Layer> layers;
  /// Descendants: checksum of the ancestry their learngene came from.
  std::uint32_t lineage = 0;
  /// Descendants: positions in `layers` copied from a learngene.
  std::vector<std::size_t> inherited;

  /// Positions in `layers` of the counted layers, in order.
  std::vector<std::size_t> counted_positions() const;
  /// L (ancestry) or K (pseudo-descendant / descendant).
  std::size_t depth() const { return counted_positions().size(); }
  /// Counted layer by 1-based layer number.
  Layer& counted_layer(std::size_t number);
  const Layer& counted_layer(std::size_t number) const;
  std::size_t num_classes() const;

  std::vector<Tensor> parameters() const;
  std::size_t parameter_count() const;
  /// CRC-32 over every parameter and buffer value in layer order.
  std::uint32_t checksum() const;
  Model clone() const;
  /// Throws InvalidArgument unless every layer accepts its predecessor's output.
  void validate() const;
};

struct ModelConfig {
  Family family = Family::TinyCnn;
  std::size_t depth = 5;
  /// One entry per counted layer, or a single entry repeated.
  std::vector<std::size_t> widths{8};
  std::size_t num_classes = 10;
  InputSpec input;
  std::size_t patch = 4;  // transformer
  std::size_t heads = 2;  // transformer
  ModelRole role = ModelRole::Ancestry;
};

/// Widths expanded to exactly `depth` entries.
std::vector<std::size_t> expand_widths(const ModelConfig& config);

Model build_model(const ModelConfig& config, std::uint64_t seed);

/// Applies one layer. `training` selects batch statistics for BatchNorm.
Tensor forward_layer(Layer& layer, const Tensor& prev, bool training);

struct ForwardResult {
  Tensor logits;
  std::vector<Tensor> trace;  // one entry per counted layer
};

ForwardResult forward_collect(Model& model, const Tensor& batch, bool training);
Tensor forward(Model& model, const Tensor& batch, bool training);

}  // namespace lg
