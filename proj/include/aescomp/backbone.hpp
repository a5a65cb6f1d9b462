#pragma once

#include <array>
#include <atomic>
#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "aescomp/image.hpp"
#include "aescomp/types.hpp"

namespace aescomp {

/// Where activations are read from: the first fully connected layer
/// (AlexNet / VGG, 4096-d) or the global average pool (ResNet, 2048-d).
enum class FeatureLayer : std::uint8_t { FirstFullyConnected, GlobalAveragePool };

std::string_view to_string(FeatureLayer layer);
FeatureLayer parse_feature_layer(std::string_view text);

struct BackboneDescriptor {
  std::string id;
  std::filesystem::path graph_path;
  FeatureLayer feature_layer = FeatureLayer::GlobalAveragePool;
  std::size_t feature_dim = 0;
  int input_size = 224;
  std::array<double, 3> channel_means = kImageNetMeans;
  std::array<double, 3> channel_stds = kImageNetStds;
  /// ONNX default-domain opset the graph was exported with, if pinned.
  std::optional<std::int64_t> opset;

  /// Throws RegistryError on an empty id, zero dim or invalid normalisation.
  void validate() const;
  /// Preprocessing for this backbone's input, with the given crop for the
  /// local view.
  PreprocessConfig preprocess(const CropSpec& crop = CropSpec{}) const;
};

/// Activations of one backbone for one view of one image.
class FeatureVector {
 public:
  FeatureVector() = default;
  /// Throws NumericsError if any value is not finite.
  FeatureVector(std::string backbone_id, ViewKind view, std::vector<float> values);

  const std::string& backbone_id() const { return backbone_id_; }
  ViewKind view() const { return view_; }
  std::size_t dim() const { return values_.size(); }
  std::span<const float> values() const { return values_; }

  friend bool operator==(const FeatureVector&, const FeatureVector&) = default;

 private:
  std::string backbone_id_;
  ViewKind view_ = ViewKind::Global;
  std::vector<float> values_;
};

/// A frozen feature extractor. Implementations must be safe for concurrent
/// `extract` calls.
class Backbone {
 public:
  explicit Backbone(BackboneDescriptor descriptor);
  virtual ~Backbone() = default;
  Backbone(const Backbone&) = delete;
  Backbone& operator=(const Backbone&) = delete;

  const BackboneDescriptor& descriptor() const { return descriptor_; }
  const std::string& id() const { return descriptor_.id; }

  /// Throws ShapeError if the tensor side differs from the descriptor's
  /// input size, NumericsError on a non-finite activation.
  FeatureVector extract(const PreprocessedTensor& tensor, ViewKind view = ViewKind::Global) const;

  /// Number of forward passes run so far.
  std::uint64_t invocations() const { return invocations_.load(std::memory_order_relaxed); }

 protected:
  /// Forward pass on a 1x3xSxS tensor; returns descriptor().feature_dim values.
  virtual std::vector<float> forward(std::span<const float> input) const = 0;

 private:
  BackboneDescriptor descriptor_;
  mutable std::atomic<std::uint64_t> invocations_{0};
};

using BackbonePtr = std::shared_ptr<const Backbone>;

/// Free-function form of Backbone::extract.
FeatureVector extract_features(const Backbone& backbone, const PreprocessedTensor& tensor,
                               ViewKind view = ViewKind::Global);

/// Loads an ONNX graph. Throws IoError if the file is missing,
/// DescriptorMismatch if the graph's output size (or pinned opset, or static
/// input size) disagrees with the descriptor, GraphError for graphs the
/// runtime cannot execute.
BackbonePtr load_backbone(const BackboneDescriptor& descriptor);

/// Deterministic linear test double: features = M * flatten(tensor) / sqrt(n)
/// with M a dim x n matrix of +-1 signs. Entry (r, c) is draw r*n + c of
/// xorshift64* seeded with `seed`; a set top bit means -1.
/// n = 3 * input_size^2.
BackbonePtr make_stub_backbone(std::uint64_t seed, std::size_t dim, int input_size);

/// Identifier scheme for stubs: "stub:<seed>[:<dim>[:<input_size>]]".
struct StubSpec {
  static constexpr std::size_t kDefaultDim = 64;
  static constexpr int kDefaultInputSize = 224;

  std::uint64_t seed = 0;
  std::size_t dim = kDefaultDim;
  int input_size = kDefaultInputSize;

  /// Canonical id, always with all three fields.
  std::string id() const;
};
bool is_stub_id(std::string_view id);
/// Throws RegistryError on a malformed stub id.
StubSpec parse_stub_id(std::string_view id);

/// Maps backbone ids to descriptors and memoises loaded backbones. Stub ids
/// resolve without a registry entry.
class BackboneRegistry {
 public:
  BackboneRegistry() = default;

  /// Reads a JSON array of descriptor objects. Relative graph paths are taken
  /// relative to the registry file's directory. Throws RegistryError.
  static BackboneRegistry load(const std::filesystem::path& path);
  static BackboneRegistry from_json_text(std::string_view text,
                                         const std::filesystem::path& base_dir = {});

  /// Throws RegistryError on a duplicate id.
  void add(BackboneDescriptor descriptor);
  bool contains(std::string_view id) const;
  const BackboneDescriptor& descriptor(std::string_view id) const;
  std::vector<std::string> ids() const;

  /// Returns the shared backbone for an id, loading it on first use.
  BackbonePtr resolve(std::string_view id) const;
  /// Registers an already constructed backbone (tests, custom adapters).
  void insert(BackbonePtr backbone);

 private:
  std::map<std::string, BackboneDescriptor, std::less<>> descriptors_;
  mutable std::map<std::string, BackbonePtr, std::less<>> loaded_;
  mutable std::shared_ptr<std::mutex> mutex_ = std::make_shared<std::mutex>();
};

/// Serialises a descriptor with the registry field names.
std::string descriptor_to_json(const BackboneDescriptor& descriptor);

}  // namespace aescomp
