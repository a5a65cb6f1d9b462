#include "aescomp/composer.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <iterator>

#include "aescomp/error.hpp"
#include "aescomp/log.hpp"
#include "aescomp/store.hpp"

namespace aescomp {

ViewSet::ViewSet(std::vector<ViewKind> views) : views_(std::move(views)) {
  if (views_.empty()) throw CompositionError("view set is empty");
  std::sort(views_.begin(), views_.end());
  if (std::adjacent_find(views_.begin(), views_.end()) != views_.end()) {
    throw CompositionError("view set repeats a view");
  }
}

ViewSet ViewSet::parse(std::string_view text) {
  std::vector<ViewKind> views;
  try {
    if (text.find_first_of("+, ") != std::string_view::npos) {
      std::string token;
      for (char c : std::string(text) + ",") {
        if (c == '+' || c == ',' || c == ' ') {
          if (!token.empty()) views.push_back(parse_view(token));
          token.clear();
        } else {
          token += c;
        }
      }
    } else {
      // A whole view name ("scene") or a run of letters ("GLS").
      try {
        views.push_back(parse_view(text));
      } catch (const InvalidArgument&) {
        for (char c : text) views.push_back(parse_view(std::string_view(&c, 1)));
      }
    }
    return ViewSet(std::move(views));
  } catch (const Error& e) {
    throw CompositionError("view set '" + std::string(text) + "': " + e.what());
  }
}

bool ViewSet::contains(ViewKind view) const {
  return std::find(views_.begin(), views_.end(), view) != views_.end();
}

std::string ViewSet::to_string() const {
  std::string out;
  for (ViewKind v : views_) {
    if (!out.empty()) out += '+';
    out += view_letter(v);
  }
  return out;
}

CompositeFeature::CompositeFeature(ViewSet views, std::vector<float> values, Provenance provenance)
    : views_(std::move(views)), values_(std::move(values)), provenance_(std::move(provenance)) {
  std::size_t total = 0;
  for (const auto& p : provenance_) total += p.dim;
  if (total != values_.size()) throw CompositionError("provenance dims do not add up to the composite length");
  if (provenance_.size() != views_.size()) throw CompositionError("provenance does not cover the view set");
  for (std::size_t i = 0; i < provenance_.size(); ++i) {
    if (provenance_[i].view != views_.views()[i]) throw CompositionError("provenance order differs from the view set");
  }
}

FeatureVector CompositeFeature::slice(std::size_t part) const {
  if (part >= provenance_.size()) throw InvalidArgument("composite has no part " + std::to_string(part));
  std::size_t offset = 0;
  for (std::size_t i = 0; i < part; ++i) offset += provenance_[i].dim;
  const auto& p = provenance_[part];
  return FeatureVector(p.backbone_id, p.view,
                       std::vector<float>(values_.begin() + static_cast<std::ptrdiff_t>(offset),
                                          values_.begin() + static_cast<std::ptrdiff_t>(offset + p.dim)));
}

CompositeFeature compose(std::span<const FeatureVector> parts, const ViewSet& views) {
  if (parts.size() != views.size()) {
    throw CompositionError("got " + std::to_string(parts.size()) + " parts for view set " + views.to_string());
  }
  std::size_t total = 0;
  for (std::size_t i = 0; i < parts.size(); ++i) {
    if (parts[i].view() != views.views()[i]) {
      throw CompositionError("part " + std::to_string(i) + " is the " + std::string(to_string(parts[i].view())) +
                             " view where " + std::string(to_string(views.views()[i])) + " was expected");
    }
    total += parts[i].dim();
  }
  std::vector<float> values;
  values.reserve(total);
  Provenance provenance;
  for (const auto& p : parts) {
    values.insert(values.end(), p.values().begin(), p.values().end());
    provenance.push_back({p.backbone_id(), p.view(), p.dim()});
  }
  return CompositeFeature(views, std::move(values), std::move(provenance));
}

const Backbone& BackboneSet::for_view(ViewKind view) const {
  const BackbonePtr& b = view == ViewKind::Scene ? scene : content;
  if (!b) {
    throw CompositionError(std::string("no ") + (view == ViewKind::Scene ? "scene" : "content") +
                           " backbone for the " + std::string(to_string(view)) + " view");
  }
  return *b;
}

ImageSource ImageSource::from_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read image " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (in.bad()) throw IoError("cannot read image " + path.string());
  return from_bytes(std::move(bytes));
}

ImageSource ImageSource::from_bytes(std::vector<std::uint8_t> bytes) {
  ImageSource s;
  s.hash_ = sha256(bytes);
  s.bytes_ = std::move(bytes);
  return s;
}

ImageSource ImageSource::from_pixels(RawImage image) {
  ImageSource s;
  Sha256Builder b;
  b.add_field("pixels");
  b.add_field(std::to_string(image.width()) + "x" + std::to_string(image.height()));
  b.add(image.data());
  s.hash_ = b.finish();
  s.image_ = std::move(image);
  return s;
}

const RawImage& ImageSource::image() const {
  if (!image_) image_ = decode_image(bytes_);
  return *image_;
}

CompositeFeature featurize_image(const ImageSource& source, const ViewSet& views, const BackboneSet& backbones,
                                 const CropSpec& crop, FeatureCache* cache) {
  std::vector<FeatureVector> parts;
  parts.reserve(views.size());
  for (ViewKind view : views.views()) {
    const Backbone& backbone = backbones.for_view(view);
    const PreprocessConfig cfg = backbone.descriptor().preprocess(crop);
    CacheKey key{source.content_hash(), backbone.id(), view, preprocess_hash(cfg)};

    std::optional<FeatureVector> hit;
    if (cache != nullptr) {
      try {
        hit = cache->get(key);
      } catch (const CacheError& e) {
        warn(std::string("feature cache read failed, recomputing: ") + e.what());
      }
    }
    if (hit && hit->dim() == backbone.descriptor().feature_dim) {
      parts.push_back(std::move(*hit));
      continue;
    }

    FeatureVector fv = backbone.extract(prepare_view(source.image(), view, cfg), view);
    if (cache != nullptr) {
      try {
        cache->put(key, fv);
      } catch (const CacheError& e) {
        warn(std::string("feature cache write failed: ") + e.what());
      }
    }
    parts.push_back(std::move(fv));
  }
  return compose(parts, views);
}

CompositeFeature featurize_image(const RawImage& image, const ViewSet& views, const BackboneSet& backbones,
                                 const CropSpec& crop, FeatureCache* cache) {
  return featurize_image(ImageSource::from_pixels(image), views, backbones, crop, cache);
}

}  // namespace aescomp
