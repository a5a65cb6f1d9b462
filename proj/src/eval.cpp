#include "aescomp/eval.hpp"

#include <algorithm>
#include <array>
#include <atomic>
#include <cstdio>
#include <exception>
#include <mutex>
#include <set>
#include <thread>

#include "aescomp/error.hpp"
#include "aescomp/store.hpp"

namespace aescomp {

namespace {

std::uint64_t total_invocations(const BackboneSet& b) {
  std::uint64_t n = b.content ? b.content->invocations() : 0;
  if (b.scene && b.scene != b.content) n += b.scene->invocations();
  return n;
}

std::vector<Label> labels_of(std::span<const Sample> samples) {
  std::vector<Label> out;
  out.reserve(samples.size());
  for (const Sample& s : samples) out.push_back(s.label);
  return out;
}

std::string csv_cell(const std::string& text) {
  if (text.find_first_of(",\"\n") == std::string::npos) return text;
  std::string out = "\"";
  for (char c : text) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

}  // namespace

void ExperimentConfig::validate() const {
  if (train_manifest.samples.empty()) throw InvalidArgument("train manifest is empty");
  if (test_manifest.samples.empty()) throw InvalidArgument("test manifest is empty");
  if (view_sets.empty()) throw InvalidArgument("no view sets given");
  if (jobs == 0) throw InvalidArgument("jobs must be at least 1");
  if (content_backbone.empty()) throw InvalidArgument("no content backbone given");
  for (const ViewSet& v : view_sets) {
    if (v.contains(ViewKind::Scene) && scene_backbone.empty()) {
      throw InvalidArgument("view set " + v.to_string() + " needs a scene backbone");
    }
  }
  smo.validate();
}

std::vector<CompositeFeature> featurize_corpus(std::span<const Sample> samples, const ViewSet& views,
                                               const BackboneSet& backbones, const CropSpec& crop,
                                               FeatureCache* cache, std::size_t jobs,
                                               ExtractionSummary* summary) {
  if (jobs == 0) throw InvalidArgument("jobs must be at least 1");
  const std::uint64_t invocations_before = total_invocations(backbones);
  const CacheStats cache_before = cache ? cache->stats() : CacheStats{};

  std::vector<std::optional<CompositeFeature>> slots(samples.size());
  std::atomic<std::size_t> next{0};
  std::atomic<bool> failed{false};
  std::exception_ptr error;
  std::size_t error_index = samples.size();
  std::mutex error_mutex;

  auto worker = [&] {
    while (!failed.load(std::memory_order_relaxed)) {
      const std::size_t i = next.fetch_add(1);
      if (i >= samples.size()) return;
      try {
        slots[i] = featurize_image(ImageSource::from_file(samples[i].image_path), views, backbones, crop, cache);
      } catch (...) {
        std::lock_guard lock(error_mutex);
        // Report the earliest failing sample so errors do not depend on timing.
        if (i < error_index) {
          error_index = i;
          error = std::current_exception();
        }
        failed.store(true);
      }
    }
  };

  const std::size_t n_threads = std::min(jobs, std::max<std::size_t>(samples.size(), 1));
  if (n_threads <= 1) {
    worker();
  } else {
    std::vector<std::jthread> pool;
    for (std::size_t t = 0; t < n_threads; ++t) pool.emplace_back(worker);
  }
  if (error) std::rethrow_exception(error);

  std::vector<CompositeFeature> out;
  out.reserve(samples.size());
  for (auto& s : slots) out.push_back(std::move(*s));

  if (summary != nullptr) {
    const CacheStats cache_after = cache ? cache->stats() : CacheStats{};
    summary->images += samples.size();
    summary->vectors += samples.size() * views.size();
    summary->backbone_invocations += total_invocations(backbones) - invocations_before;
    summary->cache_hits += cache_after.hits - cache_before.hits;
    summary->cache_misses += cache_after.misses - cache_before.misses;
  }
  return out;
}

ViewSet union_views(std::span<const ViewSet> sets) {
  std::set<ViewKind> all;
  for (const ViewSet& s : sets) all.insert(s.views().begin(), s.views().end());
  return ViewSet(std::vector<ViewKind>(all.begin(), all.end()));
}

CompositeFeature restrict_views(const CompositeFeature& feature, const ViewSet& views) {
  if (feature.view_set() == views) return feature;
  std::vector<FeatureVector> parts;
  for (ViewKind v : views.views()) {
    const auto& have = feature.view_set().views();
    const auto it = std::find(have.begin(), have.end(), v);
    if (it == have.end()) {
      throw CompositionError("composite " + feature.view_set().to_string() + " lacks the " +
                             std::string(to_string(v)) + " view");
    }
    parts.push_back(feature.slice(static_cast<std::size_t>(it - have.begin())));
  }
  return compose(parts, views);
}

SvmModel train_model(std::span<const CompositeFeature> features, std::span<const Label> labels,
                     const SmoConfig& cfg) {
  if (features.size() != labels.size()) throw ShapeError("feature and label counts differ");
  if (features.empty()) throw DegenerateLabels("no training examples");
  const Provenance& provenance = features.front().provenance();
  FeatureMatrix x;
  for (const CompositeFeature& f : features) {
    if (f.provenance() != provenance) {
      throw ModelMismatch("training features disagree on provenance: " + provenance_to_string(f.provenance()) +
                          " vs " + provenance_to_string(provenance));
    }
    x.push_row(f.values());
  }
  return train_smo_default_gamma(x, labels, cfg, provenance);
}

EvalReport evaluate(const SvmModel& model, std::span<const CompositeFeature> features,
                    std::span<const Label> labels) {
  if (features.size() != labels.size()) throw ShapeError("feature and label counts differ");
  if (features.empty()) throw InvalidArgument("cannot evaluate on an empty test set");
  EvalReport report;
  for (std::size_t i = 0; i < features.size(); ++i) {
    check_provenance(model, features[i].provenance());
    const bool predicted_high = predict(model, features[i].values()) == Label::High;
    const bool actual_high = labels[i] == Label::High;
    if (predicted_high && actual_high) ++report.confusion.tp;
    if (predicted_high && !actual_high) ++report.confusion.fp;
    if (!predicted_high && !actual_high) ++report.confusion.tn;
    if (!predicted_high && actual_high) ++report.confusion.fn;
  }
  report.n_test = features.size();
  report.accuracy = static_cast<double>(report.confusion.tp + report.confusion.tn) / static_cast<double>(report.n_test);
  report.view_set = features.front().view_set();
  report.converged = model.converged;
  return report;
}

BackboneSet resolve_backbones(const ExperimentConfig& cfg, const BackboneRegistry& registry) {
  BackboneSet set;
  set.content = registry.resolve(cfg.content_backbone);
  if (!cfg.scene_backbone.empty()) set.scene = registry.resolve(cfg.scene_backbone);
  return set;
}

std::string model_label(const ExperimentConfig& cfg, const ViewSet& views) {
  const bool content = views.contains(ViewKind::Global) || views.contains(ViewKind::Local);
  const bool scene = views.contains(ViewKind::Scene);
  if (content && scene) return cfg.content_backbone + "|" + cfg.scene_backbone;
  return scene ? cfg.scene_backbone : cfg.content_backbone;
}

std::vector<EvalReport> ablation_run(const ExperimentConfig& cfg, const BackboneRegistry& registry,
                                     ExtractionSummary* summary) {
  cfg.validate();
  const BackboneSet backbones = resolve_backbones(cfg, registry);
  std::optional<FeatureCache> cache;
  if (cfg.cache_path) cache.emplace(*cfg.cache_path);
  FeatureCache* cache_ptr = cache ? &*cache : nullptr;

  const ViewSet all = union_views(cfg.view_sets);
  const std::vector<Sample> train = cfg.train_manifest.select(Split::Train);
  const std::vector<Sample> test = cfg.test_manifest.select(Split::Test);
  if (train.empty()) throw InvalidArgument("train manifest has no Train samples");
  if (test.empty()) throw InvalidArgument("test manifest has no Test samples");

  const auto train_all = featurize_corpus(train, all, backbones, cfg.crop, cache_ptr, cfg.jobs, summary);
  const auto test_all = featurize_corpus(test, all, backbones, cfg.crop, cache_ptr, cfg.jobs, summary);
  const auto train_labels = labels_of(train);
  const auto test_labels = labels_of(test);

  std::vector<EvalReport> reports;
  for (const ViewSet& views : cfg.view_sets) {
    std::vector<CompositeFeature> tr, te;
    tr.reserve(train_all.size());
    te.reserve(test_all.size());
    for (const auto& f : train_all) tr.push_back(restrict_views(f, views));
    for (const auto& f : test_all) te.push_back(restrict_views(f, views));
    const SvmModel model = train_model(tr, train_labels, cfg.smo);
    EvalReport r = evaluate(model, te, test_labels);
    r.model = model_label(cfg, views);
    r.dataset = cfg.test_manifest.name;
    reports.push_back(std::move(r));
  }
  return reports;
}

EvalReport cross_dataset(const DatasetManifest& train, const DatasetManifest& test, const ExperimentConfig& cfg,
                         const BackboneRegistry& registry, ExtractionSummary* summary) {
  ExperimentConfig c = cfg;
  c.train_manifest = train;
  c.test_manifest = test;
  c.validate();
  const ViewSet& views = c.view_sets.front();
  const BackboneSet backbones = resolve_backbones(c, registry);
  std::optional<FeatureCache> cache;
  if (c.cache_path) cache.emplace(*c.cache_path);
  FeatureCache* cache_ptr = cache ? &*cache : nullptr;

  const auto tr = featurize_corpus(train.samples, views, backbones, c.crop, cache_ptr, c.jobs, summary);
  const auto te = featurize_corpus(test.samples, views, backbones, c.crop, cache_ptr, c.jobs, summary);
  const SvmModel model = train_model(tr, labels_of(train.samples), c.smo);
  EvalReport r = evaluate(model, te, labels_of(test.samples));
  r.model = model_label(c, views);
  r.dataset = train.name + "->" + test.name;
  return r;
}

std::string format_accuracy(double accuracy) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", accuracy * 100.0);
  return buf;
}

RenderedReport render_report(std::span<const EvalReport> reports) {
  RenderedReport out;
  out.csv = std::string(kReportCsvHeader) + "\n";
  std::vector<std::array<std::string, 5>> rows;
  rows.push_back({"model", "views", "dataset", "accuracy", "n_test"});
  for (const EvalReport& r : reports) {
    const std::string acc = format_accuracy(r.accuracy);
    out.csv += csv_cell(r.model) + "," + r.view_set.to_string() + "," + csv_cell(r.dataset) + "," + acc + "," +
               std::to_string(r.n_test) + "," + std::to_string(r.confusion.tp) + "," +
               std::to_string(r.confusion.fp) + "," + std::to_string(r.confusion.tn) + "," +
               std::to_string(r.confusion.fn) + "," + (r.converged ? "true" : "false") + "\n";
    rows.push_back({r.model, r.view_set.to_string(), r.dataset, acc + (r.converged ? "" : "*"),
                    std::to_string(r.n_test)});
  }
  std::array<std::size_t, 5> width{};
  for (const auto& row : rows) {
    for (std::size_t c = 0; c < row.size(); ++c) width[c] = std::max(width[c], row[c].size());
  }
  bool any_unconverged = false;
  for (const EvalReport& r : reports) any_unconverged |= !r.converged;
  for (const auto& row : rows) {
    std::string line;
    for (std::size_t c = 0; c < row.size(); ++c) {
      const bool numeric = c >= 3;
      const std::string pad(width[c] - row[c].size(), ' ');
      if (c) line += "  ";
      line += numeric ? pad + row[c] : row[c] + pad;
    }
    while (!line.empty() && line.back() == ' ') line.pop_back();
    out.text += line + "\n";
  }
  if (any_unconverged) out.text += "* solver hit its iteration budget before reaching the KKT tolerance\n";
  return out;
}

}  // namespace aescomp
