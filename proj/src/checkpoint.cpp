#include "learngene/checkpoint.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <sstream>

#include <json.hpp>
#include <zlib.h>

namespace lg {

namespace {

using json = nlohmann::json;
namespace fs = std::filesystem;

constexpr const char* kFormat = "learngene-checkpoint";

std::uint32_t crc_of(const void* data, std::size_t n) {
  uLong crc = crc32(0L, Z_NULL, 0);
  return static_cast<std::uint32_t>(crc32(crc, static_cast<const Bytef*>(data), static_cast<uInt>(n)));
}

[[noreturn]] void corrupt(const fs::path& path, const std::string& what) {
  throw IoError("checkpoint " + path.string() + ": " + what);
}

/// Collects tensors in write order and lays them out back to back.
struct BlobWriter {
  std::vector<TensorEntry> entries;
  std::vector<unsigned char> bytes;

  void add(const std::string& name, const Tensor& t) {
    TensorEntry e{name, t.shape(), bytes.size(), t.numel() * sizeof(float)};
    bytes.resize(bytes.size() + e.length);
    unsigned char* out = bytes.data() + e.offset;
    for (float v : t.data()) {
      auto bits = std::bit_cast<std::uint32_t>(v);
      if constexpr (std::endian::native == std::endian::big) bits = __builtin_bswap32(bits);
      std::memcpy(out, &bits, 4);
      out += 4;
    }
    entries.push_back(std::move(e));
  }
};

void write_bytes(const fs::path& path, const void* data, std::size_t n) {
  if (path.has_parent_path()) {
    std::error_code ec;
    fs::create_directories(path.parent_path(), ec);
  }
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open " + tmp.string() + " for writing");
    out.write(static_cast<const char*>(data), static_cast<std::streamsize>(n));
    if (!out) throw IoError("write failed for " + tmp.string());
  }
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) throw IoError("cannot move " + tmp.string() + " to " + path.string() + ": " + ec.message());
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

json spec_json(const LayerSpec& s) {
  return {{"kind", std::string(to_string(s.kind))},
          {"in", s.in_dim},
          {"out", s.out_dim},
          {"activation", std::string(to_string(s.activation))},
          {"heads", s.heads},
          {"hidden", s.hidden},
          {"patch", s.patch},
          {"tokens", s.tokens}};
}

LayerSpec spec_from(const json& j) {
  LayerSpec s;
  s.kind = parse_layer_kind(j.at("kind").get<std::string>());
  s.in_dim = j.at("in").get<std::size_t>();
  s.out_dim = j.at("out").get<std::size_t>();
  s.activation = parse_activation(j.at("activation").get<std::string>());
  s.heads = j.at("heads").get<std::size_t>();
  s.hidden = j.at("hidden").get<std::size_t>();
  s.patch = j.at("patch").get<std::size_t>();
  s.tokens = j.at("tokens").get<std::size_t>();
  return s;
}

json layer_json(const Layer& layer) {
  json j = spec_json(layer.spec);
  json params = json::array(), buffers = json::array();
  for (const auto& p : layer.params) params.push_back(p.name);
  for (const auto& b : layer.buffers) buffers.push_back(b.name);
  j["params"] = params;
  j["buffers"] = buffers;
  return j;
}

void add_layer(BlobWriter& w, const std::string& prefix, const Layer& layer) {
  for (const auto& p : layer.params) w.add(prefix + "." + p.name, p.value);
  for (const auto& b : layer.buffers) w.add(prefix + ".buffers." + b.name, b.value);
}

json input_json(const InputSpec& in) { return json::array({in.channels, in.height, in.width}); }

InputSpec input_from(const json& j) {
  if (!j.is_array() || j.size() != 3) throw std::invalid_argument("input must be [channels, height, width]");
  return {j[0].get<std::size_t>(), j[1].get<std::size_t>(), j[2].get<std::size_t>()};
}

void write_all(const fs::path& path, CheckpointRole role, const BlobWriter& w, json content) {
  json tensors = json::array();
  for (const auto& e : w.entries) {
    tensors.push_back(
        {{"name", e.name}, {"dtype", "f32"}, {"shape", e.shape}, {"offset", e.offset}, {"length", e.length}});
  }
  const fs::path blob = blob_path(path);
  json m = {{"format", kFormat},
            {"version", kCheckpointVersion},
            {"role", to_string(role)},
            {"blob", blob.filename().string()},
            {"blob_bytes", w.bytes.size()},
            {"checksum", crc_of(w.bytes.data(), w.bytes.size())},
            {"tensors", tensors},
            {"content", std::move(content)}};
  const std::string body = m.dump(2);
  m["manifest_checksum"] = crc_of(body.data(), body.size());
  const std::string text = m.dump(2) + "\n";
  write_bytes(blob, w.bytes.data(), w.bytes.size());
  write_bytes(path, text.data(), text.size());
}

struct Loaded {
  CheckpointManifest manifest;
  json content;
  std::vector<unsigned char> blob;
};

Loaded load(const fs::path& path) {
  const std::string text = read_text(path);
  json m;
  try {
    m = json::parse(text);
  } catch (const json::exception& e) {
    corrupt(path, std::string("manifest is not valid JSON (") + e.what() + ")");
  }
  Loaded out;
  try {
    if (!m.is_object() || m.value("format", "") != kFormat) corrupt(path, "not a learngene checkpoint");
    if (m.dump(2) + "\n" != text) corrupt(path, "manifest bytes were altered");
    if (!m.contains("manifest_checksum")) corrupt(path, "manifest checksum missing");
    const auto stated = m.at("manifest_checksum").get<std::uint32_t>();
    m.erase("manifest_checksum");
    const std::string body = m.dump(2);
    if (crc_of(body.data(), body.size()) != stated) corrupt(path, "manifest checksum mismatch");

    auto& man = out.manifest;
    man.version = m.at("version").get<int>();
    if (man.version != kCheckpointVersion) {
      corrupt(path, "format version " + std::to_string(man.version) + " is not supported (expected " +
                        std::to_string(kCheckpointVersion) + ")");
    }
    const auto role = m.at("role").get<std::string>();
    if (role == "model") man.role = CheckpointRole::Model;
    else if (role == "bundle") man.role = CheckpointRole::Bundle;
    else corrupt(path, "unknown role '" + role + "'");
    man.blob = m.at("blob").get<std::string>();
    man.blob_bytes = m.at("blob_bytes").get<std::size_t>();
    man.checksum = m.at("checksum").get<std::uint32_t>();
    std::size_t expected_offset = 0;
    for (const auto& t : m.at("tensors")) {
      TensorEntry e{t.at("name").get<std::string>(), t.at("shape").get<Shape>(), t.at("offset").get<std::size_t>(),
                    t.at("length").get<std::size_t>()};
      if (t.at("dtype").get<std::string>() != "f32") corrupt(path, "tensor " + e.name + " is not f32");
      if (e.offset != expected_offset) corrupt(path, "tensor " + e.name + " offset out of order");
      if (e.length != shape_numel(e.shape) * sizeof(float)) corrupt(path, "tensor " + e.name + " length mismatch");
      expected_offset += e.length;
      man.tensors.push_back(std::move(e));
    }
    if (expected_offset != man.blob_bytes) corrupt(path, "tensor lengths do not sum to the blob size");
    out.content = m.at("content");
  } catch (const json::exception& e) {
    corrupt(path, std::string("malformed manifest (") + e.what() + ")");
  }

  const fs::path blob = path.parent_path() / out.manifest.blob;
  const std::string raw = read_text(blob);
  if (raw.size() != out.manifest.blob_bytes) {
    corrupt(path, "blob has " + std::to_string(raw.size()) + " bytes, manifest says " +
                      std::to_string(out.manifest.blob_bytes));
  }
  if (crc_of(raw.data(), raw.size()) != out.manifest.checksum) corrupt(path, "blob checksum mismatch");
  out.blob.assign(raw.begin(), raw.end());
  return out;
}

/// Hands out tensors in manifest order, checking names and shapes.
struct BlobReader {
  const fs::path& path;
  const Loaded& loaded;
  std::size_t next = 0;

  void fill(const std::string& name, Tensor& t) {
    const auto& entries = loaded.manifest.tensors;
    if (next >= entries.size() || entries[next].name != name) corrupt(path, "expected tensor " + name);
    const auto& e = entries[next++];
    if (e.shape != t.shape()) corrupt(path, "tensor " + name + " has shape " + shape_str(e.shape));
    auto dst = t.mutable_data();
    const unsigned char* src = loaded.blob.data() + e.offset;
    for (std::size_t i = 0; i < dst.size(); ++i) {
      std::uint32_t bits;
      std::memcpy(&bits, src + 4 * i, 4);
      if constexpr (std::endian::native == std::endian::big) bits = __builtin_bswap32(bits);
      const float v = std::bit_cast<float>(bits);
      if (!std::isfinite(v)) corrupt(path, "tensor " + name + " holds a non-finite value");
      dst[i] = v;
    }
  }

  void finish() {
    if (next != loaded.manifest.tensors.size()) corrupt(path, "unexpected extra tensors");
  }
};

Layer read_layer(BlobReader& r, const std::string& prefix, const json& j) {
  Layer layer = make_layer(spec_from(j), 0);
  const auto params = j.at("params").get<std::vector<std::string>>();
  const auto buffers = j.at("buffers").get<std::vector<std::string>>();
  if (params.size() != layer.params.size() || buffers.size() != layer.buffers.size())
    corrupt(r.path, prefix + " tensor list does not match its kind");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i] != layer.params[i].name) corrupt(r.path, prefix + " parameter names do not match");
    r.fill(prefix + "." + params[i], layer.params[i].value);
  }
  for (std::size_t i = 0; i < buffers.size(); ++i) {
    if (buffers[i] != layer.buffers[i].name) corrupt(r.path, prefix + " buffer names do not match");
    r.fill(prefix + ".buffers." + buffers[i], layer.buffers[i].value);
  }
  return layer;
}

template <typename F>
auto guarded(const fs::path& path, F&& f) {
  try {
    return f();
  } catch (const IoError&) {
    throw;
  } catch (const std::exception& e) {
    corrupt(path, std::string("inconsistent content (") + e.what() + ")");
  }
}

}  // namespace

std::string to_string(CheckpointRole role) { return role == CheckpointRole::Model ? "model" : "bundle"; }

fs::path blob_path(const fs::path& manifest) { return fs::path(manifest.string() + ".bin"); }

void write_checkpoint(const Model& model, const fs::path& path) {
  BlobWriter w;
  json layers = json::array();
  for (std::size_t i = 0; i < model.layers.size(); ++i) {
    layers.push_back(layer_json(model.layers[i]));
    add_layer(w, "layers." + std::to_string(i), model.layers[i]);
  }
  json content = {{"family", std::string(to_string(model.family))},
                  {"role", std::string(to_string(model.role))},
                  {"input", input_json(model.input)},
                  {"lineage", model.lineage},
                  {"inherited", model.inherited},
                  {"parameters", model.parameter_count()},
                  {"model_checksum", model.checksum()},
                  {"layers", layers}};
  write_all(path, CheckpointRole::Model, w, std::move(content));
}

void write_checkpoint(const LearngeneBundle& bundle, const fs::path& path) {
  BlobWriter w;
  json layers = json::array();
  for (std::size_t i = 0; i < bundle.layers.size(); ++i) {
    layers.push_back(layer_json(bundle.layers[i]));
    add_layer(w, "layers." + std::to_string(i), bundle.layers[i]);
  }
  json embedding = nullptr;
  if (bundle.embedding) {
    embedding = layer_json(*bundle.embedding);
    add_layer(w, "embedding", *bundle.embedding);
  }
  json content = {{"family", std::string(to_string(bundle.family))},
                  {"input", input_json(bundle.input)},
                  {"layer_numbers", bundle.layer_numbers},
                  {"ancestry_depth", bundle.ancestry_depth},
                  {"ancestry_widths", bundle.ancestry_widths},
                  {"ancestry_parameters", bundle.ancestry_parameters},
                  {"ancestry_checksum", bundle.ancestry_checksum},
                  {"score_hash", bundle.score_hash},
                  {"warnings", bundle.warnings},
                  {"parameters", bundle.parameter_count()},
                  {"layers", layers},
                  {"embedding", embedding}};
  write_all(path, CheckpointRole::Bundle, w, std::move(content));
}

Model read_model_checkpoint(const fs::path& path) {
  const Loaded loaded = load(path);
  if (loaded.manifest.role != CheckpointRole::Model) corrupt(path, "holds a bundle, not a model");
  return guarded(path, [&] {
    const json& c = loaded.content;
    BlobReader r{path, loaded};
    Model m;
    m.family = parse_family(c.at("family").get<std::string>());
    m.role = parse_role(c.at("role").get<std::string>());
    m.input = input_from(c.at("input"));
    m.lineage = c.at("lineage").get<std::uint32_t>();
    m.inherited = c.at("inherited").get<std::vector<std::size_t>>();
    const auto& layers = c.at("layers");
    for (std::size_t i = 0; i < layers.size(); ++i) m.layers.push_back(read_layer(r, "layers." + std::to_string(i), layers[i]));
    r.finish();
    m.validate();
    if (m.checksum() != c.at("model_checksum").get<std::uint32_t>()) corrupt(path, "model checksum mismatch");
    return m;
  });
}

LearngeneBundle read_bundle_checkpoint(const fs::path& path) {
  const Loaded loaded = load(path);
  if (loaded.manifest.role != CheckpointRole::Bundle) corrupt(path, "holds a model, not a bundle");
  return guarded(path, [&] {
    const json& c = loaded.content;
    BlobReader r{path, loaded};
    LearngeneBundle b;
    b.family = parse_family(c.at("family").get<std::string>());
    b.input = input_from(c.at("input"));
    b.layer_numbers = c.at("layer_numbers").get<std::vector<std::size_t>>();
    b.ancestry_depth = c.at("ancestry_depth").get<std::size_t>();
    b.ancestry_widths = c.at("ancestry_widths").get<std::vector<std::size_t>>();
    b.ancestry_parameters = c.at("ancestry_parameters").get<std::size_t>();
    b.ancestry_checksum = c.at("ancestry_checksum").get<std::uint32_t>();
    b.score_hash = c.at("score_hash").get<std::uint32_t>();
    b.warnings = c.at("warnings").get<std::vector<std::string>>();
    const auto& layers = c.at("layers");
    if (layers.size() != b.layer_numbers.size()) corrupt(path, "layer count does not match layer numbers");
    for (std::size_t i = 0; i < layers.size(); ++i) b.layers.push_back(read_layer(r, "layers." + std::to_string(i), layers[i]));
    if (!c.at("embedding").is_null()) b.embedding = read_layer(r, "embedding", c.at("embedding"));
    r.finish();
    return b;
  });
}

CheckpointManifest inspect_checkpoint(const fs::path& path) { return load(path).manifest; }

}  // namespace lg
