#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "aescomp/types.hpp"

namespace aescomp {

enum class Split : std::uint8_t { Unassigned, Train, Test };

std::string_view to_string(Split split);

struct Sample {
  std::string image_path;
  Label label = Label::Low;
  std::optional<double> mean_score;
  Split split = Split::Unassigned;

  friend bool operator==(const Sample&, const Sample&) = default;
};

struct DatasetManifest {
  std::string name;
  std::vector<Sample> samples;

  /// Samples with the given split. When no sample has any split assigned,
  /// every sample is returned.
  std::vector<Sample> select(Split split) const;
  bool has_split_assignments() const;

  friend bool operator==(const DatasetManifest&, const DatasetManifest&) = default;
};

/// Outcome of thresholding a mean score.
enum class Binarized : std::uint8_t { Low, High, Discard };

/// score > 5 + delta is High, score < 5 - delta is Low, anything else is
/// discarded. With delta = 0 a score of exactly 5 is Low.
Binarized binarize_score(double mean_score, double delta);

/// Reads a manifest CSV. The header names the columns: `image_path` plus
/// `label` and/or `score`, and optionally `split`. Lines starting with `#`
/// are comments; `# delta=<x>` sets the binarisation margin for score-only
/// rows. Throws ManifestError on unreadable files, duplicate paths, bad
/// tokens or out-of-range scores.
DatasetManifest parse_manifest(const std::filesystem::path& path);
DatasetManifest parse_manifest_text(std::string_view text, std::string name = "manifest");

/// Writes `image_path,label,score,split` (score column only if any sample
/// has one).
std::string manifest_to_csv(const DatasetManifest& manifest);
void write_manifest(const DatasetManifest& manifest, const std::filesystem::path& path);

struct DatasetStats {
  std::size_t high = 0;
  std::size_t low = 0;
  std::size_t train = 0;
  std::size_t test = 0;
  friend bool operator==(const DatasetStats&, const DatasetStats&) = default;
};

DatasetStats dataset_stats(const DatasetManifest& manifest);

/// Per-class seeded shuffle; the first round(train_fraction * class_size)
/// of each class become Train, the rest Test. Throws InvalidArgument unless
/// 0 < train_fraction < 1 and SplitError if a class has fewer than 2 members.
DatasetManifest split_balanced(const DatasetManifest& manifest, double train_fraction, std::uint64_t seed);

/// An image and its community mean score, the raw material for AVA subsets.
struct ScoredImage {
  std::string image_path;
  double mean_score = 0.0;
};

/// Mean score of a 1..10 vote histogram. Throws ManifestError if empty.
double mean_vote_score(std::span<const std::uint64_t, 10> votes);

/// Reads the AVA release list (`index image_id v1 .. v10 tag1 tag2 challenge`)
/// into scored images at `<image_dir>/<image_id>.jpg`. Throws ManifestError.
std::vector<ScoredImage> parse_ava_list(const std::filesystem::path& path, const std::filesystem::path& image_dir);

/// Binarises every image with margin `delta` (0 for the usual AVA1 rule);
/// discarded images are left out.
DatasetManifest build_thresholded_manifest(const std::vector<ScoredImage>& images, double delta, std::string name);

/// Balanced subset: the `per_class` highest-scored images become High and
/// the `per_class` lowest-scored Low (AVA2 style). Ties are broken by path.
/// Throws ManifestError if 2 * per_class exceeds the number of images.
DatasetManifest build_extremes_manifest(const std::vector<ScoredImage>& images, std::size_t per_class,
                                        std::string name);

}  // namespace aescomp
