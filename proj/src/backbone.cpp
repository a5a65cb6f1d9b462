#include "aescomp/backbone.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <json.hpp>
#include <sstream>

#include "aescomp/error.hpp"
#include "aescomp/rng.hpp"
#include "onnx_graph.hpp"

namespace aescomp {

using nlohmann::json;

std::string_view to_string(FeatureLayer layer) {
  return layer == FeatureLayer::FirstFullyConnected ? "FirstFullyConnected" : "GlobalAveragePool";
}

FeatureLayer parse_feature_layer(std::string_view text) {
  if (text == "FirstFullyConnected") return FeatureLayer::FirstFullyConnected;
  if (text == "GlobalAveragePool") return FeatureLayer::GlobalAveragePool;
  throw RegistryError("unknown feature_layer '" + std::string(text) + "'");
}

void BackboneDescriptor::validate() const {
  if (id.empty()) throw RegistryError("backbone descriptor has an empty id");
  if (feature_dim == 0) throw RegistryError("backbone '" + id + "' has feature_dim 0");
  // Sides below the preprocessing minimum are allowed here so that tiny stub
  // backbones can be driven with hand-built tensors.
  if (input_size < 1) throw RegistryError("backbone '" + id + "' has input_size < 1");
  for (std::size_t c = 0; c < 3; ++c) {
    if (!std::isfinite(channel_means[c]) || !(channel_stds[c] > 0.0) || !std::isfinite(channel_stds[c])) {
      throw RegistryError("backbone '" + id + "' has invalid channel normalisation");
    }
  }
}

PreprocessConfig BackboneDescriptor::preprocess(const CropSpec& crop) const {
  PreprocessConfig cfg;
  cfg.input_size = input_size;
  cfg.channel_means = channel_means;
  cfg.channel_stds = channel_stds;
  cfg.crop = crop;
  return cfg;
}

FeatureVector::FeatureVector(std::string backbone_id, ViewKind view, std::vector<float> values)
    : backbone_id_(std::move(backbone_id)), view_(view), values_(std::move(values)) {
  for (float v : values_) {
    if (!std::isfinite(v)) throw NumericsError("non-finite activation from backbone '" + backbone_id_ + "'");
  }
}

Backbone::Backbone(BackboneDescriptor descriptor) : descriptor_(std::move(descriptor)) {
  descriptor_.validate();
}

FeatureVector Backbone::extract(const PreprocessedTensor& tensor, ViewKind view) const {
  if (tensor.side() != descriptor_.input_size) {
    throw ShapeError("backbone '" + descriptor_.id + "' expects side " + std::to_string(descriptor_.input_size) +
                     ", got " + std::to_string(tensor.side()));
  }
  invocations_.fetch_add(1, std::memory_order_relaxed);
  auto values = forward(tensor.values());
  if (values.size() != descriptor_.feature_dim) {
    throw ShapeError("backbone '" + descriptor_.id + "' produced " + std::to_string(values.size()) +
                     " values, descriptor says " + std::to_string(descriptor_.feature_dim));
  }
  return FeatureVector(descriptor_.id, view, std::move(values));
}

FeatureVector extract_features(const Backbone& backbone, const PreprocessedTensor& tensor, ViewKind view) {
  return backbone.extract(tensor, view);
}

// ---------------------------------------------------------------------------

namespace {

class StubBackbone final : public Backbone {
 public:
  StubBackbone(BackboneDescriptor descriptor, std::uint64_t seed) : Backbone(std::move(descriptor)) {
    const std::size_t dim = this->descriptor().feature_dim;
    inputs_ = 3 * static_cast<std::size_t>(this->descriptor().input_size) * this->descriptor().input_size;
    const std::size_t words_per_row = (inputs_ + 63) / 64;
    negative_.assign(dim * words_per_row, 0);
    Xorshift64Star rng(seed);
    for (std::size_t r = 0; r < dim; ++r) {
      std::uint64_t* row = negative_.data() + r * words_per_row;
      for (std::size_t c = 0; c < inputs_; ++c) {
        if (rng.next() >> 63) row[c / 64] |= std::uint64_t{1} << (c % 64);
      }
    }
    sqrt_n_ = std::sqrt(static_cast<double>(inputs_));
  }

 protected:
  std::vector<float> forward(std::span<const float> input) const override {
    const std::size_t dim = descriptor().feature_dim;
    const std::size_t words_per_row = (inputs_ + 63) / 64;
    std::vector<float> out(dim);
    for (std::size_t r = 0; r < dim; ++r) {
      const std::uint64_t* row = negative_.data() + r * words_per_row;
      double acc = 0.0;
      for (std::size_t c = 0; c < inputs_; ++c) {
        const double v = input[c];
        acc += (row[c / 64] >> (c % 64) & 1u) ? -v : v;
      }
      out[r] = static_cast<float>(acc / sqrt_n_);
    }
    return out;
  }

 private:
  std::size_t inputs_ = 0;
  std::vector<std::uint64_t> negative_;
  double sqrt_n_ = 1.0;
};

class OnnxBackbone final : public Backbone {
 public:
  OnnxBackbone(BackboneDescriptor descriptor, onnx_runtime::Graph graph)
      : Backbone(std::move(descriptor)), graph_(std::move(graph)) {}

 protected:
  std::vector<float> forward(std::span<const float> input) const override {
    const auto side = static_cast<std::int64_t>(descriptor().input_size);
    auto tensor = onnx_runtime::Tensor::of_floats({1, 3, side, side}, {input.begin(), input.end()});
    auto output = graph_.run(tensor);
    if (output.dtype != onnx_runtime::DType::Float) throw GraphError("graph output is not a float tensor");
    return std::move(output.floats);
  }

 private:
  onnx_runtime::Graph graph_;
};

std::optional<std::size_t> declared_feature_size(const onnx_runtime::DeclaredShape& shape) {
  if (shape.empty()) return std::nullopt;
  std::size_t product = 1;
  // Leading batch dimension is skipped.
  for (std::size_t k = 1; k < shape.size(); ++k) {
    if (!shape[k]) return std::nullopt;
    product *= static_cast<std::size_t>(*shape[k]);
  }
  return product;
}

}  // namespace

BackbonePtr load_backbone(const BackboneDescriptor& descriptor) {
  descriptor.validate();
  if (!std::filesystem::exists(descriptor.graph_path)) {
    throw IoError("graph file '" + descriptor.graph_path.string() + "' does not exist");
  }
  auto graph = onnx_runtime::Graph::load(descriptor.graph_path);
  if (descriptor.opset && *descriptor.opset != graph.opset()) {
    throw DescriptorMismatch("backbone '" + descriptor.id + "' pins opset " + std::to_string(*descriptor.opset) +
                             " but the graph uses opset " + std::to_string(graph.opset()));
  }
  const auto& in_shape = graph.input_shape();
  if (!in_shape.empty()) {
    const auto side = static_cast<std::int64_t>(descriptor.input_size);
    const bool rank_ok = in_shape.size() == 4;
    auto dim_ok = [&](std::size_t k, std::int64_t want) { return !in_shape[k] || *in_shape[k] == want; };
    if (!rank_ok || !dim_ok(1, 3) || !dim_ok(2, side) || !dim_ok(3, side)) {
      throw DescriptorMismatch("graph input shape does not accept 1x3x" + std::to_string(side) + "x" +
                               std::to_string(side) + " tensors");
    }
  }
  std::optional<std::size_t> out_size = declared_feature_size(graph.output_shape());
  if (!out_size) {
    const auto side = static_cast<std::int64_t>(descriptor.input_size);
    const auto probe = onnx_runtime::Tensor::of_floats(
        {1, 3, side, side}, std::vector<float>(static_cast<std::size_t>(3 * side * side), 0.0f));
    out_size = graph.run(probe).numel();
  }
  if (*out_size != descriptor.feature_dim) {
    throw DescriptorMismatch("backbone '" + descriptor.id + "' declares feature_dim " +
                             std::to_string(descriptor.feature_dim) + " but the graph emits " +
                             std::to_string(*out_size) + " values");
  }
  return std::make_shared<OnnxBackbone>(descriptor, std::move(graph));
}

BackbonePtr make_stub_backbone(std::uint64_t seed, std::size_t dim, int input_size) {
  if (dim < 1) throw InvalidArgument("stub backbone dim must be >= 1");
  if (input_size < 1) throw InvalidArgument("stub backbone input_size must be >= 1");
  BackboneDescriptor desc;
  desc.id = StubSpec{seed, dim, input_size}.id();
  desc.feature_dim = dim;
  desc.input_size = input_size;
  desc.feature_layer = FeatureLayer::GlobalAveragePool;
  return std::make_shared<StubBackbone>(std::move(desc), seed);
}

std::string StubSpec::id() const {
  return "stub:" + std::to_string(seed) + ":" + std::to_string(dim) + ":" + std::to_string(input_size);
}

bool is_stub_id(std::string_view id) { return id.substr(0, 5) == "stub:"; }

StubSpec parse_stub_id(std::string_view id) {
  if (!is_stub_id(id)) throw RegistryError("'" + std::string(id) + "' is not a stub id");
  std::vector<std::uint64_t> fields;
  std::string_view rest = id.substr(5);
  while (true) {
    const auto colon = rest.find(':');
    const std::string_view part = rest.substr(0, colon);
    std::uint64_t value = 0;
    const auto [ptr, ec] = std::from_chars(part.data(), part.data() + part.size(), value);
    if (part.empty() || ec != std::errc{} || ptr != part.data() + part.size()) {
      throw RegistryError("malformed stub id '" + std::string(id) + "' (expected stub:<seed>[:<dim>[:<input_size>]])");
    }
    fields.push_back(value);
    if (colon == std::string_view::npos) break;
    rest = rest.substr(colon + 1);
  }
  if (fields.size() > 3) throw RegistryError("malformed stub id '" + std::string(id) + "'");
  StubSpec spec;
  spec.seed = fields[0];
  if (fields.size() > 1) spec.dim = static_cast<std::size_t>(fields[1]);
  if (fields.size() > 2) spec.input_size = static_cast<int>(fields[2]);
  if (spec.dim < 1 || spec.input_size < 1 || fields.size() > 2 && fields[2] > 4096) {
    throw RegistryError("stub id '" + std::string(id) + "' has an invalid dim or input size");
  }
  return spec;
}

// ---------------------------------------------------------------------------

namespace {

BackboneDescriptor descriptor_from_json(const json& j, const std::filesystem::path& base_dir) {
  if (!j.is_object()) throw RegistryError("registry entries must be objects");
  auto require = [&](const char* key) -> const json& {
    if (!j.contains(key)) throw RegistryError(std::string("registry entry is missing '") + key + "'");
    return j.at(key);
  };
  try {
    BackboneDescriptor d;
    d.id = require("id").get<std::string>();
    std::filesystem::path graph = require("graph_path").get<std::string>();
    d.graph_path = graph.is_relative() && !base_dir.empty() ? base_dir / graph : graph;
    d.feature_layer = parse_feature_layer(require("feature_layer").get<std::string>());
    const auto dim = require("feature_dim").get<std::int64_t>();
    if (dim <= 0) throw RegistryError("backbone '" + d.id + "' has a non-positive feature_dim");
    d.feature_dim = static_cast<std::size_t>(dim);
    d.input_size = require("input_size").get<int>();
    d.channel_means = require("channel_means").get<std::array<double, 3>>();
    d.channel_stds = require("channel_stds").get<std::array<double, 3>>();
    if (j.contains("opset")) d.opset = j.at("opset").get<std::int64_t>();
    d.validate();
    return d;
  } catch (const json::exception& e) {
    throw RegistryError(std::string("malformed registry entry: ") + e.what());
  }
}

}  // namespace

BackboneRegistry BackboneRegistry::from_json_text(std::string_view text, const std::filesystem::path& base_dir) {
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::exception& e) {
    throw RegistryError(std::string("registry is not valid JSON: ") + e.what());
  }
  if (!doc.is_array()) throw RegistryError("registry must be a JSON array of descriptors");
  BackboneRegistry registry;
  for (const auto& entry : doc) registry.add(descriptor_from_json(entry, base_dir));
  return registry;
}

BackboneRegistry BackboneRegistry::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw RegistryError("cannot open registry '" + path.string() + "'");
  std::stringstream buffer;
  buffer << in.rdbuf();
  return from_json_text(buffer.str(), path.parent_path());
}

void BackboneRegistry::add(BackboneDescriptor descriptor) {
  descriptor.validate();
  if (is_stub_id(descriptor.id)) throw RegistryError("ids starting with 'stub:' are reserved");
  std::lock_guard lock(*mutex_);
  const std::string id = descriptor.id;
  if (!descriptors_.emplace(id, std::move(descriptor)).second) {
    throw RegistryError("duplicate backbone id '" + id + "'");
  }
}

bool BackboneRegistry::contains(std::string_view id) const {
  std::lock_guard lock(*mutex_);
  return descriptors_.count(id) > 0 || loaded_.count(id) > 0;
}

const BackboneDescriptor& BackboneRegistry::descriptor(std::string_view id) const {
  std::lock_guard lock(*mutex_);
  auto it = descriptors_.find(id);
  if (it == descriptors_.end()) throw RegistryError("unknown backbone id '" + std::string(id) + "'");
  return it->second;
}

std::vector<std::string> BackboneRegistry::ids() const {
  std::lock_guard lock(*mutex_);
  std::vector<std::string> out;
  for (const auto& [id, d] : descriptors_) out.push_back(id);
  return out;
}

BackbonePtr BackboneRegistry::resolve(std::string_view id) const {
  std::lock_guard lock(*mutex_);
  if (is_stub_id(id)) {
    const StubSpec spec = parse_stub_id(id);
    const std::string canonical = spec.id();
    if (auto it = loaded_.find(canonical); it != loaded_.end()) return it->second;
    auto stub = make_stub_backbone(spec.seed, spec.dim, spec.input_size);
    loaded_.emplace(canonical, stub);
    return stub;
  }
  if (auto it = loaded_.find(id); it != loaded_.end()) return it->second;
  auto it = descriptors_.find(id);
  if (it == descriptors_.end()) throw RegistryError("unknown backbone id '" + std::string(id) + "'");
  auto backbone = load_backbone(it->second);
  loaded_.emplace(std::string(id), backbone);
  return backbone;
}

void BackboneRegistry::insert(BackbonePtr backbone) {
  std::lock_guard lock(*mutex_);
  const std::string id = backbone->id();
  if (descriptors_.count(id) > 0 || !loaded_.emplace(id, std::move(backbone)).second) {
    throw RegistryError("duplicate backbone id '" + id + "'");
  }
}

std::string descriptor_to_json(const BackboneDescriptor& d) {
  json j = {
      {"id", d.id},
      {"graph_path", d.graph_path.string()},
      {"feature_layer", std::string(to_string(d.feature_layer))},
      {"feature_dim", d.feature_dim},
      {"input_size", d.input_size},
      {"channel_means", d.channel_means},
      {"channel_stds", d.channel_stds},
  };
  if (d.opset) j["opset"] = *d.opset;
  return j.dump();
}

}  // namespace aescomp
