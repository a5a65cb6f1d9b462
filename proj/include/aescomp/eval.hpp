#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "aescomp/backbone.hpp"
#include "aescomp/composer.hpp"
#include "aescomp/dataset.hpp"
#include "aescomp/svm.hpp"

namespace aescomp {

class FeatureCache;

struct ExperimentConfig {
  DatasetManifest train_manifest;
  DatasetManifest test_manifest;
  std::vector<ViewSet> view_sets;
  std::string content_backbone;
  /// Needed only when a view set contains the scene view.
  std::string scene_backbone;
  CropSpec crop;
  SmoConfig smo;
  std::optional<std::filesystem::path> cache_path;
  /// Upper bound on extraction worker threads (at least 1).
  std::size_t jobs = 1;

  /// Throws InvalidArgument on empty manifests or view sets, a zero job
  /// count, or a scene view without a scene backbone.
  void validate() const;
};

struct Confusion {
  std::size_t tp = 0;
  std::size_t fp = 0;
  std::size_t tn = 0;
  std::size_t fn = 0;
  friend bool operator==(const Confusion&, const Confusion&) = default;
};

struct EvalReport {
  std::string model;
  ViewSet view_set{std::vector<ViewKind>{ViewKind::Global}};
  std::string dataset;
  double accuracy = 0.0;
  std::size_t n_test = 0;
  Confusion confusion;
  bool converged = true;
  friend bool operator==(const EvalReport&, const EvalReport&) = default;
};

/// Work done while featurising a corpus.
struct ExtractionSummary {
  std::size_t images = 0;
  std::size_t vectors = 0;
  std::uint64_t backbone_invocations = 0;
  std::uint64_t cache_hits = 0;
  std::uint64_t cache_misses = 0;
};

/// Featurises every sample's image with up to `jobs` threads. Output order
/// follows `samples` regardless of scheduling.
std::vector<CompositeFeature> featurize_corpus(std::span<const Sample> samples, const ViewSet& views,
                                               const BackboneSet& backbones, const CropSpec& crop,
                                               FeatureCache* cache, std::size_t jobs,
                                               ExtractionSummary* summary = nullptr);

/// Smallest view set covering all of `sets`.
ViewSet union_views(std::span<const ViewSet> sets);

/// Keeps only the parts of `feature` for `views`, which must be a subset.
CompositeFeature restrict_views(const CompositeFeature& feature, const ViewSet& views);

/// Trains with the default kernel width. The model records the provenance
/// of the first feature; every feature must share it.
SvmModel train_model(std::span<const CompositeFeature> features, std::span<const Label> labels,
                     const SmoConfig& cfg);

/// Accuracy and confusion with High as the positive class. Throws
/// ModelMismatch if a feature's provenance differs from the model's.
EvalReport evaluate(const SvmModel& model, std::span<const CompositeFeature> features,
                    std::span<const Label> labels);

/// Resolves the content and scene backbones named by `cfg`.
BackboneSet resolve_backbones(const ExperimentConfig& cfg, const BackboneRegistry& registry);

/// One train and evaluate cycle per view set, in cfg order. Training uses the
/// train manifest's Train split and testing the test manifest's Test split
/// (a manifest with no splits contributes all its samples). Features are
/// extracted once for the union of the view sets.
std::vector<EvalReport> ablation_run(const ExperimentConfig& cfg, const BackboneRegistry& registry = {},
                                     ExtractionSummary* summary = nullptr);

/// Trains on every sample of `train` and tests on every sample of `test`,
/// using the first view set of `cfg`.
EvalReport cross_dataset(const DatasetManifest& train, const DatasetManifest& test, const ExperimentConfig& cfg,
                         const BackboneRegistry& registry = {}, ExtractionSummary* summary = nullptr);

/// Report label for the backbones behind a view set.
std::string model_label(const ExperimentConfig& cfg, const ViewSet& views);

struct RenderedReport {
  std::string text;
  std::string csv;
};

/// Accuracy as a percentage with two decimals ("90.01").
std::string format_accuracy(double accuracy);

/// Aligned text table and CSV, one row per report in order. In the text
/// table a non-converged model's accuracy carries a "*".
RenderedReport render_report(std::span<const EvalReport> reports);

inline constexpr const char* kReportCsvHeader = "model,view_set,dataset,accuracy,n_test,tp,fp,tn,fn,converged";

}  // namespace aescomp
