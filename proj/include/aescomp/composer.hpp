#pragma once

#include <cstddef>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "aescomp/backbone.hpp"
#include "aescomp/hash.hpp"
#include "aescomp/image.hpp"
#include "aescomp/types.hpp"

namespace aescomp {

class FeatureCache;

/// Nonempty set of views, always held in G, L, S order.
class ViewSet {
 public:
  /// Throws CompositionError if empty or if a view repeats. The views are
  /// put into canonical order.
  explicit ViewSet(std::vector<ViewKind> views);
  /// Accepts "GLS", "G+L+S", "global,scene", in any order and case.
  static ViewSet parse(std::string_view text);

  std::span<const ViewKind> views() const { return views_; }
  std::size_t size() const { return views_.size(); }
  bool contains(ViewKind view) const;
  /// "G", "G+L", "G+L+S", ...
  std::string to_string() const;

  friend bool operator==(const ViewSet&, const ViewSet&) = default;

 private:
  std::vector<ViewKind> views_;
};

class CompositeFeature {
 public:
  CompositeFeature(ViewSet views, std::vector<float> values, Provenance provenance);

  const ViewSet& view_set() const { return views_; }
  std::size_t dim() const { return values_.size(); }
  std::span<const float> values() const { return values_; }
  const Provenance& provenance() const { return provenance_; }

  /// The i-th constituent vector, recovered from the concatenation.
  FeatureVector slice(std::size_t part) const;

  friend bool operator==(const CompositeFeature&, const CompositeFeature&) = default;

 private:
  ViewSet views_;
  std::vector<float> values_;
  Provenance provenance_;
};

/// Concatenates per-view vectors in canonical order. parts[i] must carry the
/// view views[i]; otherwise CompositionError.
CompositeFeature compose(std::span<const FeatureVector> parts, const ViewSet& views);

/// Backbones per role: Global and Local share the content network, Scene
/// uses the scene network.
struct BackboneSet {
  BackbonePtr content;
  BackbonePtr scene;

  /// Throws CompositionError if the role for `view` has no backbone.
  const Backbone& for_view(ViewKind view) const;
};

/// An image plus the content hash that identifies it in the cache. Files are
/// hashed by their bytes and decoded lazily, so a warm cache never decodes.
/// Not safe to share between threads.
class ImageSource {
 public:
  /// Reads the file now, decodes on demand. Throws IoError.
  static ImageSource from_file(const std::filesystem::path& path);
  static ImageSource from_bytes(std::vector<std::uint8_t> bytes);
  /// Identity is a hash of the dimensions and pixels.
  static ImageSource from_pixels(RawImage image);

  const Digest& content_hash() const { return hash_; }
  /// Throws DecodeError on undecodable bytes.
  const RawImage& image() const;

 private:
  Digest hash_{};
  std::vector<std::uint8_t> bytes_;
  mutable std::optional<RawImage> image_;
};

/// Computes (or fetches from `cache`) one vector per view and composes them.
/// Cache failures degrade to recomputation with a warning.
CompositeFeature featurize_image(const ImageSource& source, const ViewSet& views, const BackboneSet& backbones,
                                 const CropSpec& crop, FeatureCache* cache);
CompositeFeature featurize_image(const RawImage& image, const ViewSet& views, const BackboneSet& backbones,
                                 const CropSpec& crop, FeatureCache* cache);

}  // namespace aescomp
