#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "aescomp/types.hpp"

namespace aescomp {

/// Decoded 8-bit RGB image, row-major, interleaved channels.
class RawImage {
 public:
  static constexpr int kChannels = 3;

  RawImage() = default;
  /// Throws ShapeError if either side is < 1 or `data` has the wrong length.
  RawImage(int width, int height, std::vector<std::uint8_t> data);
  /// Image filled with one colour.
  static RawImage filled(int width, int height, std::array<std::uint8_t, 3> rgb);

  int width() const { return width_; }
  int height() const { return height_; }
  bool empty() const { return data_.empty(); }
  std::span<const std::uint8_t> data() const { return data_; }

  std::uint8_t at(int x, int y, int c) const {
    return data_[(static_cast<std::size_t>(y) * width_ + x) * kChannels + c];
  }
  std::uint8_t& at(int x, int y, int c) {
    return data_[(static_cast<std::size_t>(y) * width_ + x) * kChannels + c];
  }

  friend bool operator==(const RawImage&, const RawImage&) = default;

 private:
  int width_ = 0;
  int height_ = 0;
  std::vector<std::uint8_t> data_;
};

/// Fraction of each side kept by a centre crop, in (0, 1].
class CropSpec {
 public:
  static constexpr double kDefaultRatio = 0.62;

  CropSpec() = default;
  /// Throws InvalidArgument unless 0 < ratio <= 1.
  explicit CropSpec(double ratio);

  double ratio() const { return ratio_; }
  friend bool operator==(const CropSpec&, const CropSpec&) = default;

 private:
  double ratio_ = kDefaultRatio;
};

/// ImageNet channel statistics used by the published classification and
/// scene backbones.
inline constexpr std::array<double, 3> kImageNetMeans = {0.485, 0.456, 0.406};
inline constexpr std::array<double, 3> kImageNetStds = {0.229, 0.224, 0.225};

struct PreprocessConfig {
  int input_size = 224;
  std::array<double, 3> channel_means = kImageNetMeans;
  std::array<double, 3> channel_stds = kImageNetStds;
  CropSpec crop;

  /// Throws InvalidArgument when input_size < 8 or a std is not positive.
  void validate() const;
  friend bool operator==(const PreprocessConfig&, const PreprocessConfig&) = default;
};

/// Network input in channels x height x width order.
class PreprocessedTensor {
 public:
  PreprocessedTensor() = default;
  /// Throws ShapeError on a length mismatch and NumericsError on non-finite values.
  PreprocessedTensor(int side, std::vector<float> values);

  int side() const { return side_; }
  std::size_t size() const { return values_.size(); }
  std::span<const float> values() const { return values_; }
  float at(int c, int y, int x) const {
    return values_[(static_cast<std::size_t>(c) * side_ + y) * side_ + x];
  }

  friend bool operator==(const PreprocessedTensor&, const PreprocessedTensor&) = default;

 private:
  int side_ = 0;
  std::vector<float> values_;
};

/// Decodes PNG or JPEG bytes. Grey sources are replicated to RGB, alpha is
/// dropped. Throws DecodeError on malformed or truncated input.
RawImage decode_image(std::span<const std::uint8_t> bytes);

/// Reads and decodes a file. Throws IoError if it cannot be read.
RawImage load_image(const std::filesystem::path& path);

/// Writes an 8-bit RGB PNG. Throws IoError on failure.
void save_png(const RawImage& image, const std::filesystem::path& path);

/// Encodes an 8-bit RGB PNG into memory.
std::vector<std::uint8_t> encode_png(const RawImage& image);

/// Centre crop: each side becomes floor(ratio * side) (at least 1), offset
/// floor((side - cropped) / 2).
RawImage center_crop(const RawImage& image, const CropSpec& crop);

struct CropWindow {
  int x = 0;
  int y = 0;
  int width = 0;
  int height = 0;
  friend bool operator==(const CropWindow&, const CropWindow&) = default;
};
CropWindow center_crop_window(int width, int height, const CropSpec& crop);

/// Bilinear resize with half-pixel-centre sampling and edge clamping.
/// Aspect ratio is not preserved.
RawImage resize_bilinear(const RawImage& image, int out_width, int out_height);

/// value[c][y][x] = (pixel / 255 - mean[c]) / std[c]. The image must already
/// be cfg.input_size square, otherwise ShapeError.
PreprocessedTensor to_tensor(const RawImage& image, const PreprocessConfig& cfg);

/// Global and Scene: resize the whole image. Local: centre crop, then resize.
PreprocessedTensor prepare_view(const RawImage& image, ViewKind view,
                                const PreprocessConfig& cfg);

}  // namespace aescomp
