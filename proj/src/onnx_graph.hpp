#pragma once

// Minimal CPU interpreter for the inference subset of ONNX used by
// image-classification backbones (AlexNet, VGG, ResNet families).

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace onnx {
class ModelProto;
}

namespace aescomp::onnx_runtime {

enum class DType : std::uint8_t { Float, Int64 };

struct Tensor {
  DType dtype = DType::Float;
  std::vector<std::int64_t> shape;
  std::vector<float> floats;
  std::vector<std::int64_t> ints;

  static Tensor of_floats(std::vector<std::int64_t> shape, std::vector<float> values);
  static Tensor of_ints(std::vector<std::int64_t> shape, std::vector<std::int64_t> values);

  std::size_t numel() const;
  std::size_t rank() const { return shape.size(); }
};

struct Attribute {
  enum class Kind : std::uint8_t { Int, Float, Ints, Floats, String, Tensor } kind = Kind::Int;
  std::int64_t i = 0;
  float f = 0.0f;
  std::vector<std::int64_t> ints;
  std::vector<float> floats;
  std::string s;
  std::vector<Tensor> tensor;  // zero or one element
};

struct Node {
  std::string op_type;
  std::string name;
  std::vector<std::string> inputs;
  std::vector<std::string> outputs;
  std::map<std::string, Attribute, std::less<>> attributes;

  std::int64_t int_attr(std::string_view key, std::int64_t fallback) const;
  float float_attr(std::string_view key, float fallback) const;
  std::vector<std::int64_t> ints_attr(std::string_view key, std::vector<std::int64_t> fallback = {}) const;
  std::string string_attr(std::string_view key, std::string fallback = {}) const;
  const Attribute* find(std::string_view key) const;
};

/// Declared dimension: nullopt for symbolic or missing sizes.
using DeclaredShape = std::vector<std::optional<std::int64_t>>;

class Graph {
 public:
  static constexpr std::int64_t kMinOpset = 7;
  static constexpr std::int64_t kMaxOpset = 21;

  /// Throws IoError if the file cannot be read and GraphError for anything
  /// the interpreter cannot execute.
  static Graph load(const std::filesystem::path& path);
  static Graph from_model(const onnx::ModelProto& model, const std::filesystem::path& base_dir = {});

  std::int64_t opset() const { return opset_; }
  const std::string& input_name() const { return input_name_; }
  const std::string& output_name() const { return output_name_; }
  const DeclaredShape& input_shape() const { return input_shape_; }
  const DeclaredShape& output_shape() const { return output_shape_; }
  const std::vector<Node>& nodes() const { return nodes_; }

  /// Runs the graph on one input tensor and returns its first output.
  Tensor run(const Tensor& input) const;

  static bool supports(std::string_view op_type);

 private:
  std::int64_t opset_ = 0;
  std::string input_name_;
  std::string output_name_;
  DeclaredShape input_shape_;
  DeclaredShape output_shape_;
  std::map<std::string, Tensor, std::less<>> initializers_;
  std::vector<Node> nodes_;
  // Values that can be released once node i has executed.
  std::vector<std::vector<std::string>> release_after_;
};

/// Executes a single node; exposed for operator-level tests.
std::vector<Tensor> execute_node(const Node& node, std::span<const Tensor* const> inputs,
                                 std::int64_t opset);

}  // namespace aescomp::onnx_runtime
