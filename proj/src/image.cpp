#include "aescomp/image.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <csetjmp>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <iterator>
#include <string>

// jpeglib.h needs FILE and size_t declared first.
#include <jerror.h>
#include <jpeglib.h>

#include "aescomp/error.hpp"

namespace aescomp {

RawImage::RawImage(int width, int height, std::vector<std::uint8_t> data)
    : width_(width), height_(height), data_(std::move(data)) {
  if (width < 1 || height < 1) {
    throw ShapeError("image dimensions must be positive, got " + std::to_string(width) + "x" +
                     std::to_string(height));
  }
  const auto expected = static_cast<std::size_t>(width) * height * kChannels;
  if (data_.size() != expected) {
    throw ShapeError("image data length " + std::to_string(data_.size()) + " != " +
                     std::to_string(expected));
  }
}

RawImage RawImage::filled(int width, int height, std::array<std::uint8_t, 3> rgb) {
  if (width < 1 || height < 1) throw ShapeError("image dimensions must be positive");
  std::vector<std::uint8_t> data(static_cast<std::size_t>(width) * height * kChannels);
  for (std::size_t i = 0; i < data.size(); i += kChannels) {
    std::copy(rgb.begin(), rgb.end(), data.begin() + static_cast<std::ptrdiff_t>(i));
  }
  return RawImage(width, height, std::move(data));
}

CropSpec::CropSpec(double ratio) : ratio_(ratio) {
  if (!(ratio > 0.0 && ratio <= 1.0)) {
    throw InvalidArgument("crop ratio must lie in (0, 1], got " + std::to_string(ratio));
  }
}

void PreprocessConfig::validate() const {
  if (input_size < 8) {
    throw InvalidArgument("input_size must be >= 8, got " + std::to_string(input_size));
  }
  for (double s : channel_stds) {
    if (!(s > 0.0) || !std::isfinite(s)) throw InvalidArgument("channel stds must be positive");
  }
  for (double m : channel_means) {
    if (!std::isfinite(m)) throw InvalidArgument("channel means must be finite");
  }
}

PreprocessedTensor::PreprocessedTensor(int side, std::vector<float> values)
    : side_(side), values_(std::move(values)) {
  const auto expected = static_cast<std::size_t>(3) * side * side;
  if (side < 1 || values_.size() != expected) {
    throw ShapeError("tensor length " + std::to_string(values_.size()) + " does not match 3x" +
                     std::to_string(side) + "x" + std::to_string(side));
  }
  for (float v : values_) {
    if (!std::isfinite(v)) throw NumericsError("non-finite value in preprocessed tensor");
  }
}

namespace {

bool has_png_signature(std::span<const std::uint8_t> bytes) {
  return bytes.size() >= 8 && png_sig_cmp(bytes.data(), 0, 8) == 0;
}

bool has_jpeg_signature(std::span<const std::uint8_t> bytes) {
  return bytes.size() >= 3 && bytes[0] == 0xFF && bytes[1] == 0xD8 && bytes[2] == 0xFF;
}

struct PngReadSource {
  std::span<const std::uint8_t> bytes;
  std::size_t offset = 0;
};

void png_read_from_span(png_structp png, png_bytep out, png_size_t length) {
  auto* src = static_cast<PngReadSource*>(png_get_io_ptr(png));
  if (src->offset + length > src->bytes.size()) png_error(png, "unexpected end of PNG data");
  std::memcpy(out, src->bytes.data() + src->offset, length);
  src->offset += length;
}

void png_throwing_error(png_structp png, png_const_charp message) {
  auto* text = static_cast<std::string*>(png_get_error_ptr(png));
  if (text != nullptr) *text = message;
  png_longjmp(png, 1);
}

void png_silent_warning(png_structp, png_const_charp) {}

RawImage decode_png(std::span<const std::uint8_t> bytes) {
  std::string message = "invalid PNG";
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, &message, png_throwing_error,
                                           png_silent_warning);
  if (png == nullptr) throw DecodeError("cannot allocate PNG reader");
  png_infop info = png_create_info_struct(png);
  if (info == nullptr) {
    png_destroy_read_struct(&png, nullptr, nullptr);
    throw DecodeError("cannot allocate PNG info");
  }

  PngReadSource source{bytes, 0};
  // Everything that must survive a longjmp lives outside this frame's locals
  // that are modified after setjmp.
  std::vector<std::uint8_t> pixels;
  std::vector<png_bytep> rows;
  png_uint_32 width = 0;
  png_uint_32 height = 0;

  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw DecodeError("PNG decode failed: " + message);
  }

  png_set_read_fn(png, &source, png_read_from_span);
  png_read_info(png, info);
  width = png_get_image_width(png, info);
  height = png_get_image_height(png, info);
  const int color_type = png_get_color_type(png, info);
  const int bit_depth = png_get_bit_depth(png, info);

  if (bit_depth == 16) png_set_strip_16(png);
  if (color_type == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color_type == PNG_COLOR_TYPE_GRAY && bit_depth < 8) png_set_expand_gray_1_2_4_to_8(png);
  if (color_type == PNG_COLOR_TYPE_GRAY || color_type == PNG_COLOR_TYPE_GRAY_ALPHA) {
    png_set_gray_to_rgb(png);
  }
  if (color_type & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
  png_set_interlace_handling(png);
  png_read_update_info(png, info);

  if (png_get_rowbytes(png, info) != static_cast<png_size_t>(width) * 3) {
    png_error(png, "unexpected row layout after conversion");
  }
  pixels.resize(static_cast<std::size_t>(width) * height * 3);
  rows.resize(height);
  for (png_uint_32 y = 0; y < height; ++y) rows[y] = pixels.data() + static_cast<std::size_t>(y) * width * 3;
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);

  return RawImage(static_cast<int>(width), static_cast<int>(height), std::move(pixels));
}

struct JpegErrorManager {
  jpeg_error_mgr base;
  std::jmp_buf jump;
  char message[JMSG_LENGTH_MAX];
};

void jpeg_throwing_exit(j_common_ptr cinfo) {
  auto* err = reinterpret_cast<JpegErrorManager*>(cinfo->err);
  (*cinfo->err->format_message)(cinfo, err->message);
  std::longjmp(err->jump, 1);
}

// libjpeg treats a truncated stream as a warning and pads with grey; we treat
// it as a decode failure.
void jpeg_strict_emit(j_common_ptr cinfo, int msg_level) {
  if (msg_level < 0 && cinfo->err->msg_code == JWRN_JPEG_EOF) jpeg_throwing_exit(cinfo);
}

RawImage decode_jpeg(std::span<const std::uint8_t> bytes) {
  jpeg_decompress_struct cinfo{};
  JpegErrorManager err{};
  cinfo.err = jpeg_std_error(&err.base);
  err.base.error_exit = jpeg_throwing_exit;
  err.base.emit_message = jpeg_strict_emit;
  std::vector<std::uint8_t> pixels;

  if (setjmp(err.jump)) {
    jpeg_destroy_decompress(&cinfo);
    throw DecodeError(std::string("JPEG decode failed: ") + err.message);
  }

  jpeg_create_decompress(&cinfo);
  jpeg_mem_src(&cinfo, bytes.data(), static_cast<unsigned long>(bytes.size()));
  jpeg_read_header(&cinfo, TRUE);
  cinfo.out_color_space = JCS_RGB;
  jpeg_start_decompress(&cinfo);
  if (cinfo.output_components != 3) {
    jpeg_destroy_decompress(&cinfo);
    throw DecodeError("JPEG did not decode to 3 channels");
  }
  const auto width = cinfo.output_width;
  const auto height = cinfo.output_height;
  pixels.resize(static_cast<std::size_t>(width) * height * 3);
  while (cinfo.output_scanline < height) {
    JSAMPROW row = pixels.data() + static_cast<std::size_t>(cinfo.output_scanline) * width * 3;
    jpeg_read_scanlines(&cinfo, &row, 1);
  }
  jpeg_finish_decompress(&cinfo);
  jpeg_destroy_decompress(&cinfo);
  return RawImage(static_cast<int>(width), static_cast<int>(height), std::move(pixels));
}

}  // namespace

RawImage decode_image(std::span<const std::uint8_t> bytes) {
  if (has_png_signature(bytes)) return decode_png(bytes);
  if (has_jpeg_signature(bytes)) return decode_jpeg(bytes);
  throw DecodeError("unrecognised image format (expected PNG or JPEG)");
}

RawImage load_image(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open image '" + path.string() + "'");
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                  std::istreambuf_iterator<char>());
  if (in.bad()) throw IoError("cannot read image '" + path.string() + "'");
  try {
    return decode_image(bytes);
  } catch (const DecodeError& e) {
    throw DecodeError(path.string() + ": " + e.what());
  }
}

std::vector<std::uint8_t> encode_png(const RawImage& image) {
  png_image desc{};
  desc.version = PNG_IMAGE_VERSION;
  desc.width = static_cast<png_uint_32>(image.width());
  desc.height = static_cast<png_uint_32>(image.height());
  desc.format = PNG_FORMAT_RGB;
  png_alloc_size_t size = 0;
  if (!png_image_write_to_memory(&desc, nullptr, &size, 0, image.data().data(), 0, nullptr)) {
    throw IoError(std::string("PNG encode failed: ") + desc.message);
  }
  std::vector<std::uint8_t> out(size);
  if (!png_image_write_to_memory(&desc, out.data(), &size, 0, image.data().data(), 0, nullptr)) {
    throw IoError(std::string("PNG encode failed: ") + desc.message);
  }
  out.resize(size);
  return out;
}

void save_png(const RawImage& image, const std::filesystem::path& path) {
  const auto bytes = encode_png(image);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("cannot write '" + path.string() + "'");
}

CropWindow center_crop_window(int width, int height, const CropSpec& crop) {
  const int cw = std::max(1, static_cast<int>(std::floor(crop.ratio() * width)));
  const int ch = std::max(1, static_cast<int>(std::floor(crop.ratio() * height)));
  return {(width - cw) / 2, (height - ch) / 2, cw, ch};
}

RawImage center_crop(const RawImage& image, const CropSpec& crop) {
  const CropWindow win = center_crop_window(image.width(), image.height(), crop);
  std::vector<std::uint8_t> out(static_cast<std::size_t>(win.width) * win.height * 3);
  const auto src = image.data();
  const auto row_bytes = static_cast<std::size_t>(win.width) * 3;
  for (int y = 0; y < win.height; ++y) {
    const auto from = (static_cast<std::size_t>(win.y + y) * image.width() + win.x) * 3;
    std::copy_n(src.begin() + static_cast<std::ptrdiff_t>(from), row_bytes,
                out.begin() + static_cast<std::ptrdiff_t>(y * row_bytes));
  }
  return RawImage(win.width, win.height, std::move(out));
}

namespace {

struct SampleTap {
  int lo = 0;
  int hi = 0;
  double frac = 0.0;
};

std::vector<SampleTap> bilinear_taps(int in_size, int out_size) {
  std::vector<SampleTap> taps(static_cast<std::size_t>(out_size));
  const double scale = static_cast<double>(in_size) / out_size;
  for (int i = 0; i < out_size; ++i) {
    double src = (i + 0.5) * scale - 0.5;
    src = std::clamp(src, 0.0, static_cast<double>(in_size - 1));
    const int lo = static_cast<int>(std::floor(src));
    taps[static_cast<std::size_t>(i)] = {lo, std::min(lo + 1, in_size - 1), src - lo};
  }
  return taps;
}

}  // namespace

RawImage resize_bilinear(const RawImage& image, int out_width, int out_height) {
  if (out_width < 1 || out_height < 1) {
    throw InvalidArgument("resize target must be at least 1x1");
  }
  if (out_width == image.width() && out_height == image.height()) return image;

  const auto xs = bilinear_taps(image.width(), out_width);
  const auto ys = bilinear_taps(image.height(), out_height);
  std::vector<std::uint8_t> out(static_cast<std::size_t>(out_width) * out_height * 3);
  std::size_t k = 0;
  for (const SampleTap& ty : ys) {
    for (const SampleTap& tx : xs) {
      for (int c = 0; c < 3; ++c) {
        const double top = image.at(tx.lo, ty.lo, c) * (1.0 - tx.frac) + image.at(tx.hi, ty.lo, c) * tx.frac;
        const double bottom = image.at(tx.lo, ty.hi, c) * (1.0 - tx.frac) + image.at(tx.hi, ty.hi, c) * tx.frac;
        const double value = top * (1.0 - ty.frac) + bottom * ty.frac;
        out[k++] = static_cast<std::uint8_t>(std::clamp(std::floor(value + 0.5), 0.0, 255.0));
      }
    }
  }
  return RawImage(out_width, out_height, std::move(out));
}

PreprocessedTensor to_tensor(const RawImage& image, const PreprocessConfig& cfg) {
  cfg.validate();
  if (image.width() != cfg.input_size || image.height() != cfg.input_size) {
    throw ShapeError("to_tensor expects a " + std::to_string(cfg.input_size) + "x" +
                     std::to_string(cfg.input_size) + " image, got " + std::to_string(image.width()) +
                     "x" + std::to_string(image.height()));
  }
  const int side = cfg.input_size;
  const auto plane = static_cast<std::size_t>(side) * side;
  std::vector<float> values(3 * plane);
  for (int c = 0; c < 3; ++c) {
    const double mean = cfg.channel_means[static_cast<std::size_t>(c)];
    const double std_dev = cfg.channel_stds[static_cast<std::size_t>(c)];
    for (int y = 0; y < side; ++y) {
      for (int x = 0; x < side; ++x) {
        const double v = (image.at(x, y, c) / 255.0 - mean) / std_dev;
        values[c * plane + static_cast<std::size_t>(y) * side + x] = static_cast<float>(v);
      }
    }
  }
  return PreprocessedTensor(side, std::move(values));
}

PreprocessedTensor prepare_view(const RawImage& image, ViewKind view, const PreprocessConfig& cfg) {
  cfg.validate();
  if (image.empty()) throw ShapeError("cannot prepare a view of an empty image");
  const int side = cfg.input_size;
  switch (view) {
    case ViewKind::Global:
    case ViewKind::Scene:
      return to_tensor(resize_bilinear(image, side, side), cfg);
    case ViewKind::Local:
      return to_tensor(resize_bilinear(center_crop(image, cfg.crop), side, side), cfg);
  }
  throw InvalidArgument("unknown view kind");
}

}  // namespace aescomp
