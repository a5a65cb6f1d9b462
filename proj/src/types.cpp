#include "aescomp/types.hpp"

#include <cctype>
#include <string>

#include "aescomp/error.hpp"

namespace aescomp {

std::string_view to_string(ViewKind view) {
  switch (view) {
    case ViewKind::Global: return "global";
    case ViewKind::Local: return "local";
    case ViewKind::Scene: return "scene";
  }
  return "unknown";
}

char view_letter(ViewKind view) {
  switch (view) {
    case ViewKind::Global: return 'G';
    case ViewKind::Local: return 'L';
    case ViewKind::Scene: return 'S';
  }
  return '?';
}

ViewKind parse_view(std::string_view text) {
  std::string lower;
  for (char ch : text) lower += static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
  if (lower == "global" || lower == "g") return ViewKind::Global;
  if (lower == "local" || lower == "l") return ViewKind::Local;
  if (lower == "scene" || lower == "s") return ViewKind::Scene;
  throw InvalidArgument("unknown view '" + std::string(text) + "'");
}

std::string_view to_string(Label label) { return label == Label::High ? "high" : "low"; }

std::string provenance_to_string(const Provenance& provenance) {
  std::string out;
  for (const auto& p : provenance) {
    if (!out.empty()) out += ",";
    out += p.backbone_id + "/" + std::string(to_string(p.view)) + "/" + std::to_string(p.dim);
  }
  return out.empty() ? "<none>" : out;
}

}  // namespace aescomp
