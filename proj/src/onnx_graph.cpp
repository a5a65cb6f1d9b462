#include "onnx_graph.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <functional>
#include <limits>
#include <numeric>
#include <set>
#include <unordered_map>

#include "aescomp/error.hpp"
#include "onnx.pb.h"

namespace aescomp::onnx_runtime {

namespace {

using Shape = std::vector<std::int64_t>;

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= static_cast<std::size_t>(d);
  return n;
}

std::string shape_string(const Shape& shape) {
  std::string out = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i != 0) out += ",";
    out += std::to_string(shape[i]);
  }
  return out + "]";
}

[[noreturn]] void fail(const Node& node, const std::string& message) {
  throw GraphError(node.op_type + (node.name.empty() ? "" : " '" + node.name + "'") + ": " + message);
}

std::int64_t normalize_axis(const Node& node, std::int64_t axis, std::size_t rank) {
  const auto r = static_cast<std::int64_t>(rank);
  if (axis < -r || axis >= r) fail(node, "axis " + std::to_string(axis) + " out of range");
  return axis < 0 ? axis + r : axis;
}

}  // namespace

Tensor Tensor::of_floats(std::vector<std::int64_t> shape, std::vector<float> values) {
  Tensor t;
  t.dtype = DType::Float;
  t.shape = std::move(shape);
  t.floats = std::move(values);
  return t;
}

Tensor Tensor::of_ints(std::vector<std::int64_t> shape, std::vector<std::int64_t> values) {
  Tensor t;
  t.dtype = DType::Int64;
  t.shape = std::move(shape);
  t.ints = std::move(values);
  return t;
}

std::size_t Tensor::numel() const { return shape_numel(shape); }

const Attribute* Node::find(std::string_view key) const {
  auto it = attributes.find(key);
  return it == attributes.end() ? nullptr : &it->second;
}

std::int64_t Node::int_attr(std::string_view key, std::int64_t fallback) const {
  const Attribute* a = find(key);
  return a == nullptr ? fallback : a->i;
}

float Node::float_attr(std::string_view key, float fallback) const {
  const Attribute* a = find(key);
  return a == nullptr ? fallback : a->f;
}

std::vector<std::int64_t> Node::ints_attr(std::string_view key, std::vector<std::int64_t> fallback) const {
  const Attribute* a = find(key);
  return a == nullptr ? std::move(fallback) : a->ints;
}

std::string Node::string_attr(std::string_view key, std::string fallback) const {
  const Attribute* a = find(key);
  return a == nullptr ? std::move(fallback) : a->s;
}

// ---------------------------------------------------------------------------
// Operators
// ---------------------------------------------------------------------------

namespace {

using Inputs = std::span<const Tensor* const>;
using OpFn = std::vector<Tensor> (*)(const Node&, Inputs, std::int64_t);

const Tensor& input(const Node& node, Inputs in, std::size_t i) {
  if (i >= in.size() || in[i] == nullptr) fail(node, "missing input " + std::to_string(i));
  return *in[i];
}

const Tensor* optional_input(Inputs in, std::size_t i) {
  return i < in.size() ? in[i] : nullptr;
}

const Tensor& float_input(const Node& node, Inputs in, std::size_t i) {
  const Tensor& t = input(node, in, i);
  if (t.dtype != DType::Float) fail(node, "input " + std::to_string(i) + " must be float");
  return t;
}

std::vector<std::int64_t> int_values(const Node& node, const Tensor& t) {
  if (t.dtype != DType::Int64) fail(node, "expected an int64 tensor");
  return t.ints;
}

Shape broadcast_shapes(const Node& node, const Shape& a, const Shape& b) {
  const std::size_t rank = std::max(a.size(), b.size());
  Shape out(rank);
  for (std::size_t i = 0; i < rank; ++i) {
    const std::int64_t da = i < rank - a.size() ? 1 : a[i - (rank - a.size())];
    const std::int64_t db = i < rank - b.size() ? 1 : b[i - (rank - b.size())];
    if (da != db && da != 1 && db != 1) {
      fail(node, "cannot broadcast " + shape_string(a) + " with " + shape_string(b));
    }
    out[i] = da == 1 ? db : da;
  }
  return out;
}

// Strides of `shape` aligned to an output of rank `rank`; broadcast dims get 0.
std::vector<std::size_t> broadcast_strides(const Shape& shape, std::size_t rank) {
  std::vector<std::size_t> strides(rank, 0);
  std::size_t stride = 1;
  for (std::size_t k = shape.size(); k-- > 0;) {
    const std::size_t out_axis = k + (rank - shape.size());
    strides[out_axis] = shape[k] == 1 ? 0 : stride;
    stride *= static_cast<std::size_t>(shape[k]);
  }
  return strides;
}

template <typename T, typename F>
std::vector<T> broadcast_apply(const Shape& out_shape, const Shape& as, const std::vector<T>& a,
                               const Shape& bs, const std::vector<T>& b, F op) {
  const std::size_t n = shape_numel(out_shape);
  std::vector<T> out(n);
  if (as == bs) {
    for (std::size_t i = 0; i < n; ++i) out[i] = op(a[i], b[i]);
    return out;
  }
  const std::size_t rank = out_shape.size();
  const auto sa = broadcast_strides(as, rank);
  const auto sb = broadcast_strides(bs, rank);
  std::vector<std::int64_t> idx(rank, 0);
  std::size_t ia = 0;
  std::size_t ib = 0;
  for (std::size_t i = 0; i < n; ++i) {
    out[i] = op(a[ia], b[ib]);
    for (std::size_t k = rank; k-- > 0;) {
      if (++idx[k] < out_shape[k]) {
        ia += sa[k];
        ib += sb[k];
        break;
      }
      ia -= sa[k] * static_cast<std::size_t>(out_shape[k] - 1);
      ib -= sb[k] * static_cast<std::size_t>(out_shape[k] - 1);
      idx[k] = 0;
    }
  }
  return out;
}

template <typename F>
std::vector<Tensor> binary_op(const Node& node, Inputs in, F op) {
  const Tensor& a = input(node, in, 0);
  const Tensor& b = input(node, in, 1);
  if (a.dtype != b.dtype) fail(node, "mixed input types");
  const Shape out_shape = broadcast_shapes(node, a.shape, b.shape);
  if (a.dtype == DType::Float) {
    return {Tensor::of_floats(out_shape, broadcast_apply(out_shape, a.shape, a.floats, b.shape, b.floats,
                                                         [&](float x, float y) { return op(x, y); }))};
  }
  return {Tensor::of_ints(out_shape, broadcast_apply(out_shape, a.shape, a.ints, b.shape, b.ints,
                                                     [&](std::int64_t x, std::int64_t y) { return op(x, y); }))};
}

std::vector<Tensor> op_add(const Node& n, Inputs in, std::int64_t) {
  return binary_op(n, in, [](auto x, auto y) { return x + y; });
}
std::vector<Tensor> op_sub(const Node& n, Inputs in, std::int64_t) {
  return binary_op(n, in, [](auto x, auto y) { return x - y; });
}
std::vector<Tensor> op_mul(const Node& n, Inputs in, std::int64_t) {
  return binary_op(n, in, [](auto x, auto y) { return x * y; });
}
std::vector<Tensor> op_div(const Node& n, Inputs in, std::int64_t) {
  const Tensor& b = input(n, in, 1);
  if (b.dtype == DType::Int64 && std::find(b.ints.begin(), b.ints.end(), 0) != b.ints.end()) {
    fail(n, "integer division by zero");
  }
  return binary_op(n, in, [](auto x, auto y) { return x / y; });
}

template <typename F>
std::vector<Tensor> unary_float(const Node& node, Inputs in, F op) {
  Tensor out = float_input(node, in, 0);
  for (float& v : out.floats) v = op(v);
  return {std::move(out)};
}

std::vector<Tensor> op_relu(const Node& n, Inputs in, std::int64_t) {
  return unary_float(n, in, [](float v) { return v > 0.0f ? v : 0.0f; });
}
std::vector<Tensor> op_sigmoid(const Node& n, Inputs in, std::int64_t) {
  return unary_float(n, in, [](float v) { return 1.0f / (1.0f + std::exp(-v)); });
}
std::vector<Tensor> op_identity(const Node& n, Inputs in, std::int64_t) { return {input(n, in, 0)}; }

std::vector<Tensor> op_clip(const Node& n, Inputs in, std::int64_t opset) {
  float lo = -std::numeric_limits<float>::infinity();
  float hi = std::numeric_limits<float>::infinity();
  if (opset < 11) {
    lo = n.float_attr("min", lo);
    hi = n.float_attr("max", hi);
  } else {
    if (const Tensor* t = optional_input(in, 1); t != nullptr && !t->floats.empty()) lo = t->floats[0];
    if (const Tensor* t = optional_input(in, 2); t != nullptr && !t->floats.empty()) hi = t->floats[0];
  }
  return unary_float(n, in, [=](float v) { return std::clamp(v, lo, hi); });
}

std::vector<Tensor> op_dropout(const Node& n, Inputs in, std::int64_t) {
  // Inference: identity. An optional mask output is all ones.
  std::vector<Tensor> out{float_input(n, in, 0)};
  if (n.outputs.size() > 1 && !n.outputs[1].empty()) {
    out.push_back(Tensor::of_ints(out[0].shape, std::vector<std::int64_t>(out[0].numel(), 1)));
  }
  return out;
}

std::vector<Tensor> op_constant(const Node& n, Inputs, std::int64_t) {
  if (const Attribute* a = n.find("value"); a != nullptr && !a->tensor.empty()) return {a->tensor.front()};
  if (const Attribute* a = n.find("value_float")) return {Tensor::of_floats({}, {a->f})};
  if (const Attribute* a = n.find("value_floats")) {
    return {Tensor::of_floats({static_cast<std::int64_t>(a->floats.size())}, a->floats)};
  }
  if (const Attribute* a = n.find("value_int")) return {Tensor::of_ints({}, {a->i})};
  if (const Attribute* a = n.find("value_ints")) {
    return {Tensor::of_ints({static_cast<std::int64_t>(a->ints.size())}, a->ints)};
  }
  fail(n, "unsupported constant payload");
}

struct SpatialGeometry {
  std::int64_t in_h, in_w;
  std::int64_t k_h, k_w;
  std::int64_t s_h, s_w;
  std::int64_t d_h, d_w;
  std::int64_t pad_top, pad_left, pad_bottom, pad_right;
  std::int64_t out_h, out_w;
};

SpatialGeometry spatial_geometry(const Node& node, std::int64_t in_h, std::int64_t in_w,
                                 std::vector<std::int64_t> kernel, bool ceil_mode) {
  if (kernel.size() != 2) fail(node, "only 2-D spatial operators are supported");
  auto strides = node.ints_attr("strides", {1, 1});
  auto dilations = node.ints_attr("dilations", {1, 1});
  auto pads = node.ints_attr("pads", {0, 0, 0, 0});
  if (strides.size() != 2 || dilations.size() != 2 || pads.size() != 4) fail(node, "bad spatial attributes");
  SpatialGeometry g{in_h, in_w, kernel[0], kernel[1], strides[0], strides[1], dilations[0], dilations[1],
                    pads[0], pads[1], pads[2], pads[3], 0, 0};
  const std::string auto_pad = node.string_attr("auto_pad", "NOTSET");
  const auto extent_h = (g.k_h - 1) * g.d_h + 1;
  const auto extent_w = (g.k_w - 1) * g.d_w + 1;
  if (auto_pad == "SAME_UPPER" || auto_pad == "SAME_LOWER") {
    auto total = [](std::int64_t in, std::int64_t s, std::int64_t extent) {
      const std::int64_t out = (in + s - 1) / s;
      return std::max<std::int64_t>(0, (out - 1) * s + extent - in);
    };
    const auto th = total(in_h, g.s_h, extent_h);
    const auto tw = total(in_w, g.s_w, extent_w);
    const bool upper = auto_pad == "SAME_UPPER";
    g.pad_top = upper ? th / 2 : th - th / 2;
    g.pad_bottom = th - g.pad_top;
    g.pad_left = upper ? tw / 2 : tw - tw / 2;
    g.pad_right = tw - g.pad_left;
  } else if (auto_pad == "VALID") {
    g.pad_top = g.pad_left = g.pad_bottom = g.pad_right = 0;
  } else if (auto_pad != "NOTSET") {
    fail(node, "unsupported auto_pad " + auto_pad);
  }
  auto out_size = [&](std::int64_t in, std::int64_t pb, std::int64_t pe, std::int64_t extent, std::int64_t s) {
    const std::int64_t span = in + pb + pe - extent;
    if (span < 0) fail(node, "kernel larger than padded input");
    std::int64_t out = (ceil_mode ? (span + s - 1) / s : span / s) + 1;
    // A window may not start entirely inside the trailing padding.
    if (ceil_mode && (out - 1) * s >= in + pb) --out;
    return out;
  };
  g.out_h = out_size(in_h, g.pad_top, g.pad_bottom, extent_h, g.s_h);
  g.out_w = out_size(in_w, g.pad_left, g.pad_right, extent_w, g.s_w);
  return g;
}

using RowMatrix = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

std::vector<Tensor> op_conv(const Node& n, Inputs in, std::int64_t) {
  const Tensor& x = float_input(n, in, 0);
  const Tensor& w = float_input(n, in, 1);
  const Tensor* b = optional_input(in, 2);
  if (x.rank() != 4 || w.rank() != 4) fail(n, "only NCHW 2-D convolution is supported");
  const std::int64_t batch = x.shape[0];
  const std::int64_t channels = x.shape[1];
  const std::int64_t out_channels = w.shape[0];
  const std::int64_t group = n.int_attr("group", 1);
  if (group < 1 || channels % group != 0 || out_channels % group != 0 || w.shape[1] != channels / group) {
    fail(n, "weight shape " + shape_string(w.shape) + " inconsistent with input " + shape_string(x.shape));
  }
  if (b != nullptr && (b->dtype != DType::Float || b->numel() != static_cast<std::size_t>(out_channels))) {
    fail(n, "bias length does not match output channels");
  }
  const auto kernel = n.ints_attr("kernel_shape", {w.shape[2], w.shape[3]});
  if (kernel.size() != 2 || kernel[0] != w.shape[2] || kernel[1] != w.shape[3]) fail(n, "kernel_shape mismatch");
  const SpatialGeometry g = spatial_geometry(n, x.shape[2], x.shape[3], kernel, false);

  const std::int64_t cg = channels / group;
  const std::int64_t mg = out_channels / group;
  const std::int64_t patch = cg * g.k_h * g.k_w;
  const std::int64_t out_plane = g.out_h * g.out_w;
  const std::int64_t in_plane = g.in_h * g.in_w;
  const bool pointwise = g.k_h == 1 && g.k_w == 1 && g.s_h == 1 && g.s_w == 1 && g.pad_top == 0 &&
                         g.pad_left == 0 && g.pad_bottom == 0 && g.pad_right == 0;

  std::vector<float> out(static_cast<std::size_t>(batch * out_channels * out_plane));
  RowMatrix cols;
  if (!pointwise) cols.resize(patch, out_plane);

  for (std::int64_t nb = 0; nb < batch; ++nb) {
    for (std::int64_t gi = 0; gi < group; ++gi) {
      const float* src = x.floats.data() + (nb * channels + gi * cg) * in_plane;
      const float* col_data = src;
      if (!pointwise) {
        for (std::int64_t c = 0; c < cg; ++c) {
          for (std::int64_t kh = 0; kh < g.k_h; ++kh) {
            for (std::int64_t kw = 0; kw < g.k_w; ++kw) {
              float* row = cols.data() + ((c * g.k_h + kh) * g.k_w + kw) * out_plane;
              for (std::int64_t oy = 0; oy < g.out_h; ++oy) {
                const std::int64_t iy = oy * g.s_h - g.pad_top + kh * g.d_h;
                for (std::int64_t ox = 0; ox < g.out_w; ++ox) {
                  const std::int64_t ix = ox * g.s_w - g.pad_left + kw * g.d_w;
                  const bool inside = iy >= 0 && iy < g.in_h && ix >= 0 && ix < g.in_w;
                  row[oy * g.out_w + ox] = inside ? src[c * in_plane + iy * g.in_w + ix] : 0.0f;
                }
              }
            }
          }
        }
        col_data = cols.data();
      }
      Eigen::Map<const RowMatrix> weights(w.floats.data() + gi * mg * patch, mg, patch);
      Eigen::Map<const RowMatrix> patches(col_data, patch, out_plane);
      Eigen::Map<RowMatrix> result(out.data() + (nb * out_channels + gi * mg) * out_plane, mg, out_plane);
      result.noalias() = weights * patches;
    }
    if (b != nullptr) {
      for (std::int64_t m = 0; m < out_channels; ++m) {
        float* plane = out.data() + (nb * out_channels + m) * out_plane;
        const float bias = b->floats[static_cast<std::size_t>(m)];
        for (std::int64_t i = 0; i < out_plane; ++i) plane[i] += bias;
      }
    }
  }
  return {Tensor::of_floats({batch, out_channels, g.out_h, g.out_w}, std::move(out))};
}

std::vector<Tensor> pool(const Node& n, Inputs in, bool is_max) {
  const Tensor& x = float_input(n, in, 0);
  if (x.rank() != 4) fail(n, "only NCHW 2-D pooling is supported");
  const auto kernel = n.ints_attr("kernel_shape");
  const bool ceil_mode = n.int_attr("ceil_mode", 0) != 0;
  const SpatialGeometry g = spatial_geometry(n, x.shape[2], x.shape[3], kernel, ceil_mode);
  const bool include_pad = n.int_attr("count_include_pad", 0) != 0;
  const std::int64_t planes = x.shape[0] * x.shape[1];
  std::vector<float> out(static_cast<std::size_t>(planes * g.out_h * g.out_w));
  for (std::int64_t p = 0; p < planes; ++p) {
    const float* src = x.floats.data() + p * g.in_h * g.in_w;
    float* dst = out.data() + p * g.out_h * g.out_w;
    for (std::int64_t oy = 0; oy < g.out_h; ++oy) {
      for (std::int64_t ox = 0; ox < g.out_w; ++ox) {
        const std::int64_t y0 = oy * g.s_h - g.pad_top;
        const std::int64_t x0 = ox * g.s_w - g.pad_left;
        float best = -std::numeric_limits<float>::infinity();
        double sum = 0.0;
        std::int64_t count = 0;
        for (std::int64_t kh = 0; kh < g.k_h; ++kh) {
          const std::int64_t iy = y0 + kh * g.d_h;
          if (iy < 0 || iy >= g.in_h) continue;
          for (std::int64_t kw = 0; kw < g.k_w; ++kw) {
            const std::int64_t ix = x0 + kw * g.d_w;
            if (ix < 0 || ix >= g.in_w) continue;
            const float v = src[iy * g.in_w + ix];
            best = std::max(best, v);
            sum += v;
            ++count;
          }
        }
        if (is_max) {
          dst[oy * g.out_w + ox] = best;
        } else {
          std::int64_t divisor = count;
          if (include_pad) {
            const std::int64_t y1 = std::min(y0 + g.k_h, g.in_h + g.pad_bottom);
            const std::int64_t x1 = std::min(x0 + g.k_w, g.in_w + g.pad_right);
            divisor = (y1 - y0) * (x1 - x0);
          }
          dst[oy * g.out_w + ox] = divisor > 0 ? static_cast<float>(sum / static_cast<double>(divisor)) : 0.0f;
        }
      }
    }
  }
  return {Tensor::of_floats({x.shape[0], x.shape[1], g.out_h, g.out_w}, std::move(out))};
}

std::vector<Tensor> op_maxpool(const Node& n, Inputs in, std::int64_t) {
  if (n.outputs.size() > 1 && !n.outputs[1].empty()) fail(n, "MaxPool indices output is not supported");
  if (n.int_attr("storage_order", 0) != 0) fail(n, "column-major storage_order is not supported");
  return pool(n, in, true);
}
std::vector<Tensor> op_avgpool(const Node& n, Inputs in, std::int64_t) { return pool(n, in, false); }

std::vector<Tensor> op_global_avgpool(const Node& n, Inputs in, std::int64_t) {
  const Tensor& x = float_input(n, in, 0);
  if (x.rank() < 3) fail(n, "expects N x C x spatial input");
  const std::size_t planes = static_cast<std::size_t>(x.shape[0] * x.shape[1]);
  std::size_t plane = 1;
  for (std::size_t k = 2; k < x.rank(); ++k) plane *= static_cast<std::size_t>(x.shape[k]);
  std::vector<float> out(planes);
  for (std::size_t p = 0; p < planes; ++p) {
    double sum = 0.0;
    const float* src = x.floats.data() + p * plane;
    for (std::size_t i = 0; i < plane; ++i) sum += src[i];
    out[p] = static_cast<float>(sum / static_cast<double>(plane));
  }
  Shape shape(x.rank(), 1);
  shape[0] = x.shape[0];
  shape[1] = x.shape[1];
  return {Tensor::of_floats(std::move(shape), std::move(out))};
}

std::vector<Tensor> op_batchnorm(const Node& n, Inputs in, std::int64_t) {
  const Tensor& x = float_input(n, in, 0);
  const Tensor& scale = float_input(n, in, 1);
  const Tensor& bias = float_input(n, in, 2);
  const Tensor& mean = float_input(n, in, 3);
  const Tensor& var = float_input(n, in, 4);
  if (n.int_attr("training_mode", 0) != 0) fail(n, "training mode is not supported");
  if (x.rank() < 2) fail(n, "expects N x C x ... input");
  const auto channels = static_cast<std::size_t>(x.shape[1]);
  for (const Tensor* t : {&scale, &bias, &mean, &var}) {
    if (t->numel() != channels) fail(n, "per-channel parameter length mismatch");
  }
  const double eps = n.float_attr("epsilon", 1e-5f);
  std::size_t plane = 1;
  for (std::size_t k = 2; k < x.rank(); ++k) plane *= static_cast<std::size_t>(x.shape[k]);
  Tensor out = x;
  const auto batch = static_cast<std::size_t>(x.shape[0]);
  for (std::size_t c = 0; c < channels; ++c) {
    const double inv = 1.0 / std::sqrt(static_cast<double>(var.floats[c]) + eps);
    const auto a = static_cast<float>(scale.floats[c] * inv);
    const auto shift = static_cast<float>(bias.floats[c] - mean.floats[c] * scale.floats[c] * inv);
    for (std::size_t nb = 0; nb < batch; ++nb) {
      float* p = out.floats.data() + (nb * channels + c) * plane;
      for (std::size_t i = 0; i < plane; ++i) p[i] = p[i] * a + shift;
    }
  }
  return {std::move(out)};
}

std::vector<Tensor> op_lrn(const Node& n, Inputs in, std::int64_t) {
  const Tensor& x = float_input(n, in, 0);
  if (x.rank() != 4) fail(n, "expects NCHW input");
  const std::int64_t size = n.int_attr("size", 0);
  if (size < 1) fail(n, "size attribute is required");
  const double alpha = n.float_attr("alpha", 1e-4f);
  const double beta = n.float_attr("beta", 0.75f);
  const double bias = n.float_attr("bias", 1.0f);
  const std::int64_t channels = x.shape[1];
  const std::int64_t plane = x.shape[2] * x.shape[3];
  const std::int64_t before = (size - 1) / 2;
  const std::int64_t after = size - 1 - before;
  Tensor out = x;
  for (std::int64_t nb = 0; nb < x.shape[0]; ++nb) {
    const float* src = x.floats.data() + nb * channels * plane;
    float* dst = out.floats.data() + nb * channels * plane;
    for (std::int64_t c = 0; c < channels; ++c) {
      const std::int64_t lo = std::max<std::int64_t>(0, c - before);
      const std::int64_t hi = std::min<std::int64_t>(channels - 1, c + after);
      for (std::int64_t i = 0; i < plane; ++i) {
        double sq = 0.0;
        for (std::int64_t k = lo; k <= hi; ++k) {
          const double v = src[k * plane + i];
          sq += v * v;
        }
        dst[c * plane + i] = static_cast<float>(src[c * plane + i] / std::pow(bias + alpha / size * sq, beta));
      }
    }
  }
  return {std::move(out)};
}

std::vector<Tensor> op_gemm(const Node& n, Inputs in, std::int64_t) {
  const Tensor& a = float_input(n, in, 0);
  const Tensor& b = float_input(n, in, 1);
  const Tensor* c = optional_input(in, 2);
  if (a.rank() != 2 || b.rank() != 2) fail(n, "expects 2-D operands");
  const bool ta = n.int_attr("transA", 0) != 0;
  const bool tb = n.int_attr("transB", 0) != 0;
  const float alpha = n.float_attr("alpha", 1.0f);
  const float beta = n.float_attr("beta", 1.0f);
  Eigen::Map<const RowMatrix> ma(a.floats.data(), a.shape[0], a.shape[1]);
  Eigen::Map<const RowMatrix> mb(b.floats.data(), b.shape[0], b.shape[1]);
  const std::int64_t m = ta ? a.shape[1] : a.shape[0];
  const std::int64_t k = ta ? a.shape[0] : a.shape[1];
  const std::int64_t kb = tb ? b.shape[1] : b.shape[0];
  const std::int64_t cols = tb ? b.shape[0] : b.shape[1];
  if (k != kb) fail(n, "inner dimensions differ: " + shape_string(a.shape) + " x " + shape_string(b.shape));
  RowMatrix y(m, cols);
  if (ta && tb) {
    y.noalias() = ma.transpose() * mb.transpose();
  } else if (ta) {
    y.noalias() = ma.transpose() * mb;
  } else if (tb) {
    y.noalias() = ma * mb.transpose();
  } else {
    y.noalias() = ma * mb;
  }
  if (alpha != 1.0f) y *= alpha;
  std::vector<float> out(y.data(), y.data() + y.size());
  const Shape out_shape{m, cols};
  if (c != nullptr && c->dtype == DType::Float && beta != 0.0f) {
    const Shape bshape = broadcast_shapes(n, out_shape, c->shape);
    if (bshape != out_shape) fail(n, "C does not broadcast to the output");
    out = broadcast_apply(out_shape, out_shape, out, c->shape, c->floats,
                          [beta](float x, float y2) { return x + beta * y2; });
  }
  return {Tensor::of_floats(out_shape, std::move(out))};
}

std::vector<Tensor> op_matmul(const Node& n, Inputs in, std::int64_t) {
  Tensor a = float_input(n, in, 0);
  Tensor b = float_input(n, in, 1);
  const bool a_vec = a.rank() == 1;
  const bool b_vec = b.rank() == 1;
  if (a_vec) a.shape.insert(a.shape.begin(), 1);
  if (b_vec) b.shape.push_back(1);
  if (b.rank() != 2) fail(n, "only a 2-D right operand is supported");
  const std::int64_t k = a.shape.back();
  if (k != b.shape[0]) fail(n, "inner dimensions differ: " + shape_string(a.shape) + " x " + shape_string(b.shape));
  const std::int64_t rows = static_cast<std::int64_t>(a.numel()) / k;
  const std::int64_t cols = b.shape[1];
  Eigen::Map<const RowMatrix> ma(a.floats.data(), rows, k);
  Eigen::Map<const RowMatrix> mb(b.floats.data(), k, cols);
  RowMatrix y = ma * mb;
  Shape out_shape(a.shape.begin(), a.shape.end() - 1);
  out_shape.push_back(cols);
  if (a_vec) out_shape.erase(out_shape.begin());
  if (b_vec) out_shape.pop_back();
  return {Tensor::of_floats(std::move(out_shape), std::vector<float>(y.data(), y.data() + y.size()))};
}

Tensor with_shape(const Tensor& t, Shape shape) {
  Tensor out = t;
  out.shape = std::move(shape);
  return out;
}

std::vector<Tensor> op_flatten(const Node& n, Inputs in, std::int64_t) {
  const Tensor& x = input(n, in, 0);
  std::int64_t axis = n.int_attr("axis", 1);
  if (axis < 0) axis += static_cast<std::int64_t>(x.rank());
  if (axis < 0 || axis > static_cast<std::int64_t>(x.rank())) fail(n, "axis out of range");
  std::int64_t outer = 1;
  for (std::int64_t k = 0; k < axis; ++k) outer *= x.shape[static_cast<std::size_t>(k)];
  const auto inner = static_cast<std::int64_t>(x.numel()) / std::max<std::int64_t>(outer, 1);
  return {with_shape(x, {outer, inner})};
}

std::vector<Tensor> op_reshape(const Node& n, Inputs in, std::int64_t) {
  const Tensor& x = input(n, in, 0);
  auto target = int_values(n, input(n, in, 1));
  const bool allow_zero = n.int_attr("allowzero", 0) != 0;
  std::int64_t known = 1;
  std::int64_t infer_at = -1;
  for (std::size_t k = 0; k < target.size(); ++k) {
    if (target[k] == 0 && !allow_zero) {
      if (k >= x.rank()) fail(n, "0 refers past the input rank");
      target[k] = x.shape[k];
    }
    if (target[k] == -1) {
      if (infer_at >= 0) fail(n, "more than one -1 in target shape");
      infer_at = static_cast<std::int64_t>(k);
    } else {
      known *= target[k];
    }
  }
  const auto total = static_cast<std::int64_t>(x.numel());
  if (infer_at >= 0) {
    if (known == 0 || total % known != 0) fail(n, "cannot infer reshape dimension");
    target[static_cast<std::size_t>(infer_at)] = total / known;
  }
  if (static_cast<std::int64_t>(shape_numel(target)) != total) {
    fail(n, "cannot reshape " + shape_string(x.shape) + " to " + shape_string(target));
  }
  return {with_shape(x, target)};
}

std::vector<std::int64_t> axes_from(const Node& n, Inputs in, std::int64_t opset) {
  if (opset >= 13) {
    const Tensor* t = optional_input(in, 1);
    return t == nullptr ? std::vector<std::int64_t>{} : int_values(n, *t);
  }
  return n.ints_attr("axes");
}

std::vector<Tensor> op_squeeze(const Node& n, Inputs in, std::int64_t opset) {
  const Tensor& x = input(n, in, 0);
  auto axes = axes_from(n, in, opset);
  std::set<std::int64_t> drop;
  for (auto a : axes) drop.insert(normalize_axis(n, a, x.rank()));
  Shape shape;
  for (std::size_t k = 0; k < x.rank(); ++k) {
    const bool squeeze = axes.empty() ? x.shape[k] == 1 : drop.count(static_cast<std::int64_t>(k)) > 0;
    if (squeeze && x.shape[k] != 1) fail(n, "cannot squeeze a non-unit dimension");
    if (!squeeze) shape.push_back(x.shape[k]);
  }
  return {with_shape(x, std::move(shape))};
}

std::vector<Tensor> op_unsqueeze(const Node& n, Inputs in, std::int64_t opset) {
  const Tensor& x = input(n, in, 0);
  auto axes = axes_from(n, in, opset);
  const std::size_t rank = x.rank() + axes.size();
  std::set<std::int64_t> insert;
  for (auto a : axes) insert.insert(normalize_axis(n, a, rank));
  if (insert.size() != axes.size()) fail(n, "duplicate axes");
  Shape shape;
  std::size_t src = 0;
  for (std::size_t k = 0; k < rank; ++k) {
    shape.push_back(insert.count(static_cast<std::int64_t>(k)) > 0 ? 1 : x.shape[src++]);
  }
  return {with_shape(x, std::move(shape))};
}

std::vector<Tensor> op_concat(const Node& n, Inputs in, std::int64_t) {
  if (in.empty()) fail(n, "needs at least one input");
  const Tensor& first = input(n, in, 0);
  const std::int64_t axis = normalize_axis(n, n.int_attr("axis", 0), first.rank());
  Shape shape = first.shape;
  shape[static_cast<std::size_t>(axis)] = 0;
  for (std::size_t i = 0; i < in.size(); ++i) {
    const Tensor& t = input(n, in, i);
    if (t.dtype != first.dtype || t.rank() != first.rank()) fail(n, "inputs differ in type or rank");
    for (std::size_t k = 0; k < t.rank(); ++k) {
      if (static_cast<std::int64_t>(k) != axis && t.shape[k] != first.shape[k]) fail(n, "shape mismatch");
    }
    shape[static_cast<std::size_t>(axis)] += t.shape[static_cast<std::size_t>(axis)];
  }
  std::size_t outer = 1;
  for (std::int64_t k = 0; k < axis; ++k) outer *= static_cast<std::size_t>(shape[static_cast<std::size_t>(k)]);
  Tensor out;
  out.dtype = first.dtype;
  out.shape = shape;
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t i = 0; i < in.size(); ++i) {
      const Tensor& t = *in[i];
      const std::size_t chunk = t.numel() / std::max<std::size_t>(outer, 1);
      if (t.dtype == DType::Float) {
        out.floats.insert(out.floats.end(), t.floats.begin() + static_cast<std::ptrdiff_t>(o * chunk),
                          t.floats.begin() + static_cast<std::ptrdiff_t>((o + 1) * chunk));
      } else {
        out.ints.insert(out.ints.end(), t.ints.begin() + static_cast<std::ptrdiff_t>(o * chunk),
                        t.ints.begin() + static_cast<std::ptrdiff_t>((o + 1) * chunk));
      }
    }
  }
  return {std::move(out)};
}

std::vector<Tensor> op_shape(const Node& n, Inputs in, std::int64_t) {
  const Tensor& x = input(n, in, 0);
  const auto rank = static_cast<std::int64_t>(x.rank());
  std::int64_t start = n.int_attr("start", 0);
  std::int64_t end = n.int_attr("end", rank);
  if (start < 0) start += rank;
  if (end < 0) end += rank;
  start = std::clamp<std::int64_t>(start, 0, rank);
  end = std::clamp<std::int64_t>(end, start, rank);
  std::vector<std::int64_t> dims(x.shape.begin() + start, x.shape.begin() + end);
  const auto len = static_cast<std::int64_t>(dims.size());
  return {Tensor::of_ints({len}, std::move(dims))};
}

std::vector<Tensor> op_gather(const Node& n, Inputs in, std::int64_t) {
  const Tensor& data = input(n, in, 0);
  const auto indices = int_values(n, input(n, in, 1));
  const Shape& index_shape = input(n, in, 1).shape;
  const std::int64_t axis = normalize_axis(n, n.int_attr("axis", 0), data.rank());
  const std::int64_t axis_len = data.shape[static_cast<std::size_t>(axis)];
  std::size_t outer = 1;
  for (std::int64_t k = 0; k < axis; ++k) outer *= static_cast<std::size_t>(data.shape[static_cast<std::size_t>(k)]);
  std::size_t inner = 1;
  for (std::size_t k = static_cast<std::size_t>(axis) + 1; k < data.rank(); ++k) inner *= static_cast<std::size_t>(data.shape[k]);
  Shape shape(data.shape.begin(), data.shape.begin() + axis);
  shape.insert(shape.end(), index_shape.begin(), index_shape.end());
  shape.insert(shape.end(), data.shape.begin() + axis + 1, data.shape.end());
  Tensor out;
  out.dtype = data.dtype;
  out.shape = shape;
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::int64_t idx : indices) {
      if (idx < 0) idx += axis_len;
      if (idx < 0 || idx >= axis_len) fail(n, "index out of range");
      const std::size_t from = (o * static_cast<std::size_t>(axis_len) + static_cast<std::size_t>(idx)) * inner;
      if (data.dtype == DType::Float) {
        out.floats.insert(out.floats.end(), data.floats.begin() + static_cast<std::ptrdiff_t>(from),
                          data.floats.begin() + static_cast<std::ptrdiff_t>(from + inner));
      } else {
        out.ints.insert(out.ints.end(), data.ints.begin() + static_cast<std::ptrdiff_t>(from),
                        data.ints.begin() + static_cast<std::ptrdiff_t>(from + inner));
      }
    }
  }
  return {std::move(out)};
}

const std::unordered_map<std::string_view, OpFn>& operator_table() {
  static const std::unordered_map<std::string_view, OpFn> table = {
      {"Add", op_add},
      {"AveragePool", op_avgpool},
      {"BatchNormalization", op_batchnorm},
      {"Clip", op_clip},
      {"Concat", op_concat},
      {"Constant", op_constant},
      {"Conv", op_conv},
      {"Div", op_div},
      {"Dropout", op_dropout},
      {"Flatten", op_flatten},
      {"Gather", op_gather},
      {"Gemm", op_gemm},
      {"GlobalAveragePool", op_global_avgpool},
      {"Identity", op_identity},
      {"LRN", op_lrn},
      {"MatMul", op_matmul},
      {"MaxPool", op_maxpool},
      {"Mul", op_mul},
      {"Relu", op_relu},
      {"Reshape", op_reshape},
      {"Shape", op_shape},
      {"Sigmoid", op_sigmoid},
      {"Squeeze", op_squeeze},
      {"Sub", op_sub},
      {"Unsqueeze", op_unsqueeze},
  };
  return table;
}

// ---------------------------------------------------------------------------
// Model loading
// ---------------------------------------------------------------------------

template <typename T>
std::vector<T> read_raw_le(const std::string& raw, std::size_t count) {
  if (raw.size() != count * sizeof(T)) throw GraphError("raw tensor data has the wrong length");
  std::vector<T> out(count);
  std::memcpy(out.data(), raw.data(), raw.size());  // host is little-endian (checked at load)
  return out;
}

std::string read_external(const onnx::TensorProto& proto, const std::filesystem::path& base_dir) {
  std::string location;
  std::int64_t offset = 0;
  std::int64_t length = -1;
  for (const auto& entry : proto.external_data()) {
    if (entry.key() == "location") location = entry.value();
    if (entry.key() == "offset") offset = std::stoll(entry.value());
    if (entry.key() == "length") length = std::stoll(entry.value());
  }
  if (location.empty()) throw GraphError("external tensor '" + proto.name() + "' has no location");
  const auto path = base_dir / location;
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open external tensor data '" + path.string() + "'");
  in.seekg(0, std::ios::end);
  const std::int64_t file_size = in.tellg();
  if (length < 0) length = file_size - offset;
  if (offset < 0 || offset + length > file_size) throw GraphError("external tensor range out of bounds");
  std::string raw(static_cast<std::size_t>(length), '\0');
  in.seekg(offset);
  in.read(raw.data(), length);
  if (!in) throw IoError("cannot read external tensor data '" + path.string() + "'");
  return raw;
}

Tensor tensor_from_proto(const onnx::TensorProto& proto, const std::filesystem::path& base_dir) {
  Shape shape(proto.dims().begin(), proto.dims().end());
  for (auto d : shape) {
    if (d < 0) throw GraphError("tensor '" + proto.name() + "' has a negative dimension");
  }
  const std::size_t count = shape_numel(shape);
  std::string raw;
  const bool external = proto.data_location() == onnx::TensorProto::EXTERNAL;
  if (external) {
    raw = read_external(proto, base_dir);
  } else if (proto.has_raw_data()) {
    raw = proto.raw_data();
  }
  const bool use_raw = external || proto.has_raw_data();

  auto check = [&](std::size_t have) {
    if (have != count) throw GraphError("tensor '" + proto.name() + "' has " + std::to_string(have) +
                                        " values for shape " + shape_string(shape));
  };
  switch (proto.data_type()) {
    case onnx::TensorProto::FLOAT: {
      if (use_raw) return Tensor::of_floats(shape, read_raw_le<float>(raw, count));
      check(static_cast<std::size_t>(proto.float_data_size()));
      return Tensor::of_floats(shape, {proto.float_data().begin(), proto.float_data().end()});
    }
    case onnx::TensorProto::DOUBLE: {
      std::vector<double> values;
      if (use_raw) {
        values = read_raw_le<double>(raw, count);
      } else {
        check(static_cast<std::size_t>(proto.double_data_size()));
        values.assign(proto.double_data().begin(), proto.double_data().end());
      }
      return Tensor::of_floats(shape, {values.begin(), values.end()});
    }
    case onnx::TensorProto::INT64: {
      if (use_raw) return Tensor::of_ints(shape, read_raw_le<std::int64_t>(raw, count));
      check(static_cast<std::size_t>(proto.int64_data_size()));
      return Tensor::of_ints(shape, {proto.int64_data().begin(), proto.int64_data().end()});
    }
    case onnx::TensorProto::INT32: {
      std::vector<std::int32_t> values;
      if (use_raw) {
        values = read_raw_le<std::int32_t>(raw, count);
      } else {
        check(static_cast<std::size_t>(proto.int32_data_size()));
        values.assign(proto.int32_data().begin(), proto.int32_data().end());
      }
      return Tensor::of_ints(shape, {values.begin(), values.end()});
    }
    default:
      throw GraphError("tensor '" + proto.name() + "' has unsupported data type " +
                       std::to_string(proto.data_type()));
  }
}

Attribute attribute_from_proto(const onnx::AttributeProto& proto, const std::filesystem::path& base_dir) {
  Attribute a;
  switch (proto.type()) {
    case onnx::AttributeProto::INT:
      a.kind = Attribute::Kind::Int;
      a.i = proto.i();
      break;
    case onnx::AttributeProto::FLOAT:
      a.kind = Attribute::Kind::Float;
      a.f = proto.f();
      break;
    case onnx::AttributeProto::INTS:
      a.kind = Attribute::Kind::Ints;
      a.ints.assign(proto.ints().begin(), proto.ints().end());
      break;
    case onnx::AttributeProto::FLOATS:
      a.kind = Attribute::Kind::Floats;
      a.floats.assign(proto.floats().begin(), proto.floats().end());
      break;
    case onnx::AttributeProto::STRING:
      a.kind = Attribute::Kind::String;
      a.s = proto.s();
      break;
    case onnx::AttributeProto::TENSOR:
      a.kind = Attribute::Kind::Tensor;
      a.tensor.push_back(tensor_from_proto(proto.t(), base_dir));
      break;
    default:
      throw GraphError("attribute '" + proto.name() + "' has an unsupported type");
  }
  return a;
}

DeclaredShape declared_shape(const onnx::ValueInfoProto& info) {
  DeclaredShape shape;
  if (!info.has_type() || !info.type().has_tensor_type() || !info.type().tensor_type().has_shape()) return shape;
  for (const auto& dim : info.type().tensor_type().shape().dim()) {
    if (dim.has_dim_value() && dim.dim_value() > 0) {
      shape.emplace_back(dim.dim_value());
    } else {
      shape.emplace_back(std::nullopt);
    }
  }
  return shape;
}

}  // namespace

bool Graph::supports(std::string_view op_type) { return operator_table().count(op_type) > 0; }

std::vector<Tensor> execute_node(const Node& node, std::span<const Tensor* const> inputs, std::int64_t opset) {
  const auto& table = operator_table();
  auto it = table.find(node.op_type);
  if (it == table.end()) throw GraphError("unsupported operator " + node.op_type);
  return it->second(node, inputs, opset);
}

Graph Graph::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open graph '" + path.string() + "'");
  onnx::ModelProto model;
  if (!model.ParseFromIstream(&in)) throw GraphError("'" + path.string() + "' is not a valid ONNX model");
  return from_model(model, path.parent_path());
}

Graph Graph::from_model(const onnx::ModelProto& model, const std::filesystem::path& base_dir) {
  static_assert(sizeof(float) == 4);
  {
    const std::uint32_t probe = 1;
    std::uint8_t first = 0;
    std::memcpy(&first, &probe, 1);
    if (first != 1) throw GraphError("raw tensor decoding requires a little-endian host");
  }
  Graph g;
  for (const auto& import : model.opset_import()) {
    if (import.domain().empty() || import.domain() == "ai.onnx") g.opset_ = import.version();
  }
  if (g.opset_ == 0) throw GraphError("model does not import the default ONNX domain");
  if (g.opset_ < kMinOpset || g.opset_ > kMaxOpset) {
    throw GraphError("opset " + std::to_string(g.opset_) + " is outside the supported range " +
                     std::to_string(kMinOpset) + "-" + std::to_string(kMaxOpset));
  }
  const auto& graph = model.graph();
  for (const auto& init : graph.initializer()) g.initializers_.emplace(init.name(), tensor_from_proto(init, base_dir));

  for (const auto& value : graph.input()) {
    if (g.initializers_.count(value.name()) == 0) {
      if (!g.input_name_.empty()) throw GraphError("graph has more than one non-constant input");
      g.input_name_ = value.name();
      g.input_shape_ = declared_shape(value);
    }
  }
  if (g.input_name_.empty()) throw GraphError("graph has no runtime input");
  if (graph.output_size() < 1) throw GraphError("graph has no output");
  g.output_name_ = graph.output(0).name();
  g.output_shape_ = declared_shape(graph.output(0));

  std::set<std::string, std::less<>> available{g.input_name_};
  for (const auto& [name, tensor] : g.initializers_) available.insert(name);
  std::map<std::string, std::size_t, std::less<>> last_use;
  for (const auto& proto : graph.node()) {
    if (!proto.domain().empty() && proto.domain() != "ai.onnx") {
      throw GraphError("operator domain '" + proto.domain() + "' is not supported");
    }
    Node node;
    node.op_type = proto.op_type();
    node.name = proto.name();
    node.inputs.assign(proto.input().begin(), proto.input().end());
    node.outputs.assign(proto.output().begin(), proto.output().end());
    for (const auto& attr : proto.attribute()) node.attributes.emplace(attr.name(), attribute_from_proto(attr, base_dir));
    if (!supports(node.op_type)) throw GraphError("unsupported operator " + node.op_type);
    const std::size_t index = g.nodes_.size();
    for (const auto& name : node.inputs) {
      if (name.empty()) continue;
      if (available.count(name) == 0) {
        throw GraphError("node " + node.op_type + " reads '" + name + "' before it is produced");
      }
      if (g.initializers_.count(name) == 0) last_use[name] = index;
    }
    for (const auto& name : node.outputs) {
      if (!name.empty()) available.insert(name);
    }
    g.nodes_.push_back(std::move(node));
  }
  if (available.count(g.output_name_) == 0) throw GraphError("graph output '" + g.output_name_ + "' is never produced");

  g.release_after_.resize(g.nodes_.size());
  for (const auto& [name, index] : last_use) {
    if (name != g.output_name_) g.release_after_[index].push_back(name);
  }
  return g;
}

Tensor Graph::run(const Tensor& input_tensor) const {
  std::unordered_map<std::string, Tensor> values;
  values.emplace(input_name_, input_tensor);
  std::vector<const Tensor*> args;
  for (std::size_t i = 0; i < nodes_.size(); ++i) {
    const Node& node = nodes_[i];
    args.clear();
    for (const auto& name : node.inputs) {
      if (name.empty()) {
        args.push_back(nullptr);
      } else if (auto it = initializers_.find(name); it != initializers_.end()) {
        args.push_back(&it->second);
      } else {
        args.push_back(&values.at(name));
      }
    }
    auto outputs = execute_node(node, args, opset_);
    for (std::size_t k = 0; k < node.outputs.size() && k < outputs.size(); ++k) {
      if (!node.outputs[k].empty()) values.insert_or_assign(node.outputs[k], std::move(outputs[k]));
    }
    for (const auto& name : release_after_[i]) values.erase(name);
  }
  if (auto it = initializers_.find(output_name_); it != initializers_.end()) return it->second;
  return values.at(output_name_);
}

}  // namespace aescomp::onnx_runtime
