#include "aescomp/dataset.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <array>
#include <cstdio>
#include <numeric>
#include <set>
#include <sstream>

#include <boost/algorithm/string.hpp>
#include <boost/tokenizer.hpp>

#include "aescomp/error.hpp"
#include "aescomp/rng.hpp"

namespace aescomp {

namespace {

constexpr double kScoreMin = 1.0;
constexpr double kScoreMax = 10.0;

std::vector<std::string> split_csv_line(const std::string& line, std::size_t line_no) {
  using Tokenizer = boost::tokenizer<boost::escaped_list_separator<char>>;
  std::vector<std::string> out;
  try {
    // No escape character: backslashes are ordinary path characters.
    Tokenizer tok(line, boost::escaped_list_separator<char>(std::string(), std::string(","), std::string("\"")));
    for (const auto& field : tok) out.push_back(boost::algorithm::trim_copy(field));
  } catch (const boost::escaped_list_error& e) {
    throw ManifestError("line " + std::to_string(line_no) + ": malformed CSV (" + e.what() + ")");
  }
  return out;
}

double parse_real(const std::string& text, std::size_t line_no, std::string_view what) {
  double value = 0.0;
  const char* begin = text.data();
  const char* end = begin + text.size();
  auto [ptr, ec] = std::from_chars(begin, end, value);
  if (ec != std::errc{} || ptr != end || !std::isfinite(value)) {
    throw ManifestError("line " + std::to_string(line_no) + ": bad " + std::string(what) + " '" + text + "'");
  }
  return value;
}

Label parse_label_token(const std::string& text, std::size_t line_no) {
  const std::string lower = boost::algorithm::to_lower_copy(text);
  if (lower == "high") return Label::High;
  if (lower == "low") return Label::Low;
  throw ManifestError("line " + std::to_string(line_no) + ": bad label token '" + text + "'");
}

Split parse_split_token(const std::string& text, std::size_t line_no) {
  const std::string lower = boost::algorithm::to_lower_copy(text);
  if (lower.empty()) return Split::Unassigned;
  if (lower == "train") return Split::Train;
  if (lower == "test") return Split::Test;
  throw ManifestError("line " + std::to_string(line_no) + ": bad split token '" + text + "'");
}

std::string csv_field(const std::string& text) {
  if (text.find_first_of("\"\n\r") != std::string::npos) {
    throw ManifestError("image_path cannot be written to CSV: '" + text + "'");
  }
  if (text.find(',') == std::string::npos) return text;
  return "\"" + text + "\"";
}

std::string format_score(double score) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", score);
  return buf;
}

}  // namespace

std::string_view to_string(Split split) {
  switch (split) {
    case Split::Train: return "train";
    case Split::Test: return "test";
    case Split::Unassigned: return "";
  }
  return "";
}

bool DatasetManifest::has_split_assignments() const {
  return std::any_of(samples.begin(), samples.end(), [](const Sample& s) { return s.split != Split::Unassigned; });
}

std::vector<Sample> DatasetManifest::select(Split split) const {
  if (!has_split_assignments()) return samples;
  std::vector<Sample> out;
  std::copy_if(samples.begin(), samples.end(), std::back_inserter(out),
               [split](const Sample& s) { return s.split == split; });
  return out;
}

Binarized binarize_score(double mean_score, double delta) {
  if (mean_score > 5.0 + delta) return Binarized::High;
  if (mean_score < 5.0 - delta) return Binarized::Low;
  // With no margin the midpoint itself goes to Low.
  if (delta == 0.0) return Binarized::Low;
  return Binarized::Discard;
}

DatasetManifest parse_manifest_text(std::string_view text, std::string name) {
  DatasetManifest manifest;
  manifest.name = std::move(name);

  std::istringstream in{std::string(text)};
  std::string line;
  std::size_t line_no = 0;
  double delta = 0.0;
  bool have_header = false;
  int col_path = -1, col_label = -1, col_score = -1, col_split = -1;
  std::set<std::string> seen;

  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line_no == 1 && line.starts_with("\xEF\xBB\xBF")) line.erase(0, 3);
    const std::string trimmed = boost::algorithm::trim_copy(line);
    if (trimmed.empty()) continue;
    if (trimmed.front() == '#') {
      std::string body = boost::algorithm::trim_copy(trimmed.substr(1));
      if (body.starts_with("delta")) {
        const auto eq = body.find('=');
        if (eq == std::string::npos) throw ManifestError("line " + std::to_string(line_no) + ": malformed delta comment");
        delta = parse_real(boost::algorithm::trim_copy(body.substr(eq + 1)), line_no, "delta");
        if (delta < 0.0) throw ManifestError("line " + std::to_string(line_no) + ": delta must be nonnegative");
      }
      continue;
    }

    auto fields = split_csv_line(trimmed, line_no);
    if (!have_header) {
      for (std::size_t i = 0; i < fields.size(); ++i) {
        const std::string col = boost::algorithm::to_lower_copy(fields[i]);
        int* slot = col == "image_path" ? &col_path
                    : col == "label"    ? &col_label
                    : col == "score"    ? &col_score
                    : col == "split"    ? &col_split
                                        : nullptr;
        if (slot == nullptr) continue;
        if (*slot >= 0) throw ManifestError("duplicate column '" + col + "'");
        *slot = static_cast<int>(i);
      }
      if (col_path < 0) throw ManifestError("header lacks an image_path column");
      if (col_label < 0 && col_score < 0) throw ManifestError("header needs a label or score column");
      have_header = true;
      continue;
    }

    auto cell = [&](int col) -> std::string {
      return col >= 0 && static_cast<std::size_t>(col) < fields.size() ? fields[col] : std::string{};
    };

    Sample sample;
    sample.image_path = cell(col_path);
    if (sample.image_path.empty()) throw ManifestError("line " + std::to_string(line_no) + ": empty image_path");
    sample.split = parse_split_token(cell(col_split), line_no);

    const std::string score_text = cell(col_score);
    if (!score_text.empty()) {
      const double score = parse_real(score_text, line_no, "score");
      if (score < kScoreMin || score > kScoreMax) {
        throw ManifestError("line " + std::to_string(line_no) + ": score " + score_text + " outside [1,10]");
      }
      sample.mean_score = score;
    }

    const std::string label_text = cell(col_label);
    if (!label_text.empty()) {
      sample.label = parse_label_token(label_text, line_no);
    } else if (sample.mean_score) {
      const Binarized b = binarize_score(*sample.mean_score, delta);
      if (b == Binarized::Discard) continue;
      sample.label = b == Binarized::High ? Label::High : Label::Low;
    } else {
      throw ManifestError("line " + std::to_string(line_no) + ": row has neither label nor score");
    }

    if (!seen.insert(sample.image_path).second) {
      throw ManifestError("line " + std::to_string(line_no) + ": duplicate image_path '" + sample.image_path + "'");
    }
    manifest.samples.push_back(std::move(sample));
  }
  if (!have_header) throw ManifestError("manifest has no header row");
  return manifest;
}

DatasetManifest parse_manifest(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ManifestError("cannot read manifest " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  try {
    return parse_manifest_text(buf.str(), path.stem().string());
  } catch (const ManifestError& e) {
    throw ManifestError(path.string() + ": " + e.what());
  }
}

std::string manifest_to_csv(const DatasetManifest& manifest) {
  const bool with_score = std::any_of(manifest.samples.begin(), manifest.samples.end(),
                                      [](const Sample& s) { return s.mean_score.has_value(); });
  std::string out = with_score ? "image_path,label,score,split\n" : "image_path,label,split\n";
  for (const Sample& s : manifest.samples) {
    out += csv_field(s.image_path);
    out += ',';
    out += to_string(s.label);
    if (with_score) {
      out += ',';
      if (s.mean_score) out += format_score(*s.mean_score);
    }
    out += ',';
    out += to_string(s.split);
    out += '\n';
  }
  return out;
}

void write_manifest(const DatasetManifest& manifest, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write manifest " + path.string());
  out << manifest_to_csv(manifest);
  if (!out.flush()) throw IoError("cannot write manifest " + path.string());
}

DatasetStats dataset_stats(const DatasetManifest& manifest) {
  DatasetStats stats;
  for (const Sample& s : manifest.samples) {
    (s.label == Label::High ? stats.high : stats.low) += 1;
    if (s.split == Split::Train) ++stats.train;
    if (s.split == Split::Test) ++stats.test;
  }
  return stats;
}

DatasetManifest split_balanced(const DatasetManifest& manifest, double train_fraction, std::uint64_t seed) {
  if (!(train_fraction > 0.0 && train_fraction < 1.0)) {
    throw InvalidArgument("train_fraction must lie in (0, 1)");
  }
  DatasetManifest out = manifest;
  Xorshift64Star rng(seed);
  for (Label label : {Label::High, Label::Low}) {
    std::vector<std::size_t> members;
    for (std::size_t i = 0; i < out.samples.size(); ++i) {
      if (out.samples[i].label == label) members.push_back(i);
    }
    if (members.size() < 2) {
      throw SplitError("class " + std::string(to_string(label)) + " has " + std::to_string(members.size()) +
                       " member(s); need at least 2");
    }
    seeded_shuffle(std::span<std::size_t>(members), rng);
    const auto n_train = static_cast<std::size_t>(std::llround(train_fraction * static_cast<double>(members.size())));
    for (std::size_t k = 0; k < members.size(); ++k) {
      out.samples[members[k]].split = k < n_train ? Split::Train : Split::Test;
    }
  }
  return out;
}

double mean_vote_score(std::span<const std::uint64_t, 10> votes) {
  std::uint64_t total = 0;
  double weighted = 0.0;
  for (std::size_t i = 0; i < votes.size(); ++i) {
    total += votes[i];
    weighted += static_cast<double>(i + 1) * static_cast<double>(votes[i]);
  }
  if (total == 0) throw ManifestError("vote histogram is empty");
  return weighted / static_cast<double>(total);
}

std::vector<ScoredImage> parse_ava_list(const std::filesystem::path& path, const std::filesystem::path& image_dir) {
  std::ifstream in(path);
  if (!in) throw ManifestError("cannot read AVA list " + path.string());
  std::vector<ScoredImage> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    boost::algorithm::trim(line);
    if (line.empty()) continue;
    std::istringstream row(line);
    std::uint64_t index = 0;
    std::string image_id;
    std::array<std::uint64_t, 10> votes{};
    row >> index >> image_id;
    for (auto& v : votes) row >> v;
    if (!row) throw ManifestError(path.string() + " line " + std::to_string(line_no) + ": malformed row");
    out.push_back({(image_dir / (image_id + ".jpg")).string(), mean_vote_score(votes)});
  }
  return out;
}

DatasetManifest build_thresholded_manifest(const std::vector<ScoredImage>& images, double delta, std::string name) {
  if (!(delta >= 0.0)) throw InvalidArgument("delta must be nonnegative");
  DatasetManifest out;
  out.name = std::move(name);
  std::set<std::string> seen;
  for (const ScoredImage& img : images) {
    const Binarized b = binarize_score(img.mean_score, delta);
    if (b == Binarized::Discard) continue;
    if (!seen.insert(img.image_path).second) throw ManifestError("duplicate image_path '" + img.image_path + "'");
    out.samples.push_back({img.image_path, b == Binarized::High ? Label::High : Label::Low, img.mean_score,
                           Split::Unassigned});
  }
  return out;
}

DatasetManifest build_extremes_manifest(const std::vector<ScoredImage>& images, std::size_t per_class,
                                        std::string name) {
  if (2 * per_class > images.size()) {
    throw ManifestError("cannot take " + std::to_string(per_class) + " per class from " +
                        std::to_string(images.size()) + " images");
  }
  std::vector<std::size_t> order(images.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (images[a].mean_score != images[b].mean_score) return images[a].mean_score > images[b].mean_score;
    return images[a].image_path < images[b].image_path;
  });
  DatasetManifest out;
  out.name = std::move(name);
  for (std::size_t k = 0; k < per_class; ++k) {
    const ScoredImage& img = images[order[k]];
    out.samples.push_back({img.image_path, Label::High, img.mean_score, Split::Unassigned});
  }
  for (std::size_t k = order.size() - per_class; k < order.size(); ++k) {
    const ScoredImage& img = images[order[k]];
    out.samples.push_back({img.image_path, Label::Low, img.mean_score, Split::Unassigned});
  }
  std::set<std::string> seen;
  for (const Sample& s : out.samples) {
    if (!seen.insert(s.image_path).second) throw ManifestError("duplicate image_path '" + s.image_path + "'");
  }
  return out;
}

}  // namespace aescomp
