#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

namespace aescomp {

/// The three ways an image is looked at. Declaration order is the canonical
/// concatenation order of composite features.
enum class ViewKind : std::uint8_t { Global = 0, Local = 1, Scene = 2 };

inline constexpr std::array<ViewKind, 3> kAllViews = {ViewKind::Global, ViewKind::Local,
                                                      ViewKind::Scene};

std::string_view to_string(ViewKind view);
/// Single-letter code used in view-set strings ("G", "L", "S").
char view_letter(ViewKind view);
/// Accepts "global"/"local"/"scene" (any case) or the single letters.
ViewKind parse_view(std::string_view text);

/// Binary aesthetic class. High is the positive class (+1).
enum class Label : std::uint8_t { Low = 0, High = 1 };

std::string_view to_string(Label label);
inline int label_sign(Label label) { return label == Label::High ? +1 : -1; }
inline Label label_from_sign(double value) { return value >= 0.0 ? Label::High : Label::Low; }

/// One slice of a composite feature: which backbone produced which view.
struct ProvenanceEntry {
  std::string backbone_id;
  ViewKind view = ViewKind::Global;
  std::size_t dim = 0;
  friend bool operator==(const ProvenanceEntry&, const ProvenanceEntry&) = default;
};
using Provenance = std::vector<ProvenanceEntry>;

std::string provenance_to_string(const Provenance& provenance);

}  // namespace aescomp
