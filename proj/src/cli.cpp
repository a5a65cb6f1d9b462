#include "aescomp/cli.hpp"

#include <algorithm>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <memory>
#include <optional>
#include <sstream>
#include <thread>

#include <CLI11.hpp>
#include <json.hpp>

#include "aescomp/backbone.hpp"
#include "aescomp/composer.hpp"
#include "aescomp/dataset.hpp"
#include "aescomp/error.hpp"
#include "aescomp/eval.hpp"
#include "aescomp/log.hpp"
#include "aescomp/store.hpp"
#include "aescomp/svm.hpp"

namespace aescomp {

namespace {

using json = nlohmann::json;

constexpr const char* kCacheEnv = "AESCOMP_CACHE";

struct Options {
  std::string registry;
  std::string cache;
  std::size_t jobs = std::max(1u, std::thread::hardware_concurrency());
  double crop_ratio = CropSpec::kDefaultRatio;

  std::string manifest;
  std::string train_manifest;
  std::string test_manifest;
  std::string views;
  std::string view_sets = "G,G+S,G+L,G+L+S";
  std::string content_backbone;
  std::string scene_backbone;

  std::string model;
  std::string image;
  std::string out;
  std::string format = "csv";

  double C = SmoConfig{}.C;
  double kkt_tol = SmoConfig{}.kkt_tol;
  std::size_t max_passes = SmoConfig{}.max_passes;
  std::uint64_t seed = 0;

  std::optional<double> split;
};

/// Appends flags from a --config JSON object that the command line does not
/// already set.
std::vector<std::string> merge_config(std::vector<std::string> args) {
  std::string config_path;
  for (std::size_t i = 0; i < args.size(); ++i) {
    if (args[i] == "--config" && i + 1 < args.size()) config_path = args[i + 1];
    if (args[i].starts_with("--config=")) config_path = args[i].substr(9);
  }
  if (config_path.empty()) return args;

  std::ifstream in(config_path);
  if (!in) throw IoError("cannot read config " + config_path);
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw FormatError("config " + config_path + " is not valid JSON: " + e.what());
  }
  if (!j.is_object()) throw FormatError("config " + config_path + " must be a JSON object");

  auto given = [&](const std::string& flag) {
    return std::any_of(args.begin(), args.end(),
                       [&](const std::string& a) { return a == flag || a.starts_with(flag + "="); });
  };
  std::vector<std::string> extra;
  for (const auto& [key, value] : j.items()) {
    if (key == "config") continue;
    const std::string flag = "--" + key;
    if (given(flag)) continue;
    if (value.is_boolean()) {
      if (value.get<bool>()) extra.push_back(flag);
    } else if (value.is_string()) {
      extra.push_back(flag + "=" + value.get<std::string>());
    } else if (value.is_number()) {
      extra.push_back(flag + "=" + value.dump());
    } else {
      throw FormatError("config key '" + key + "' must be a string, number or boolean");
    }
  }
  args.insert(args.end(), extra.begin(), extra.end());
  return args;
}

std::optional<std::filesystem::path> cache_root(const Options& o) {
  if (!o.cache.empty()) return std::filesystem::path(o.cache);
  if (const char* env = std::getenv(kCacheEnv); env != nullptr && *env != '\0') return std::filesystem::path(env);
  return std::nullopt;
}

BackboneRegistry load_registry(const Options& o) {
  return o.registry.empty() ? BackboneRegistry{} : BackboneRegistry::load(o.registry);
}

SmoConfig smo_config(const Options& o) {
  SmoConfig cfg;
  cfg.C = o.C;
  cfg.kkt_tol = o.kkt_tol;
  cfg.max_passes = o.max_passes;
  cfg.seed = o.seed;
  cfg.validate();
  return cfg;
}

void require(const std::string& value, const char* flag) {
  if (value.empty()) throw UsageError(std::string("missing required option ") + flag);
}

BackboneSet backbones_for(const Options& o, const ViewSet& views, const BackboneRegistry& registry) {
  BackboneSet set;
  if (views.contains(ViewKind::Global) || views.contains(ViewKind::Local)) {
    require(o.content_backbone, "--content-backbone");
    set.content = registry.resolve(o.content_backbone);
  }
  if (views.contains(ViewKind::Scene)) {
    require(o.scene_backbone, "--scene-backbone");
    set.scene = registry.resolve(o.scene_backbone);
  }
  return set;
}

/// Backbones and views a trained model expects, from its provenance.
std::pair<ViewSet, BackboneSet> model_inputs(const SvmModel& model, const BackboneRegistry& registry) {
  if (model.expected_provenance.empty()) throw ModelMismatch("model records no feature provenance");
  std::vector<ViewKind> views;
  std::string content, scene;
  for (const auto& p : model.expected_provenance) {
    views.push_back(p.view);
    std::string& slot = p.view == ViewKind::Scene ? scene : content;
    if (!slot.empty() && slot != p.backbone_id) {
      throw ModelMismatch("model uses two different content backbones");
    }
    slot = p.backbone_id;
  }
  BackboneSet set;
  if (!content.empty()) set.content = registry.resolve(content);
  if (!scene.empty()) set.scene = registry.resolve(scene);
  return {ViewSet(views), set};
}

std::string model_name(const SvmModel& model) {
  std::string content, scene;
  for (const auto& p : model.expected_provenance) (p.view == ViewKind::Scene ? scene : content) = p.backbone_id;
  if (!content.empty() && !scene.empty()) return content + "|" + scene;
  return content.empty() ? scene : content;
}

std::string summary_line(const ExtractionSummary& s) {
  return "images=" + std::to_string(s.images) + " vectors=" + std::to_string(s.vectors) +
         " backbone_invocations=" + std::to_string(s.backbone_invocations) +
         " cache_hits=" + std::to_string(s.cache_hits) + " cache_misses=" + std::to_string(s.cache_misses);
}

std::vector<Label> labels_of(const std::vector<Sample>& samples) {
  std::vector<Label> out;
  for (const Sample& s : samples) out.push_back(s.label);
  return out;
}

void write_output(const Options& o, const std::string& text, std::ostream& out) {
  if (o.out.empty()) {
    out << text;
    return;
  }
  std::ofstream f(o.out, std::ios::binary | std::ios::trunc);
  if (!f || !(f << text) || !f.flush()) throw IoError("cannot write " + o.out);
}

void emit_reports(const Options& o, const std::vector<EvalReport>& reports, std::ostream& out) {
  const RenderedReport r = render_report(reports);
  if (o.format == "csv") {
    write_output(o, r.csv, out);
  } else if (o.format == "text") {
    write_output(o, r.text, out);
  } else {
    throw UsageError("--format must be csv or text");
  }
}

std::unique_ptr<FeatureCache> open_cache(const Options& o) {
  if (auto root = cache_root(o)) return std::make_unique<FeatureCache>(*root);
  return nullptr;
}

DatasetManifest maybe_split(DatasetManifest m, const Options& o) {
  if (o.split && !m.has_split_assignments()) m = split_balanced(m, *o.split, o.seed);
  return m;
}

// Verbs

int cmd_extract(const Options& o, std::ostream& out, std::ostream&) {
  require(o.manifest, "--manifest");
  const auto root = cache_root(o);
  if (!root) throw UsageError(std::string("extract needs --cache or ") + kCacheEnv);
  const ViewSet views = ViewSet::parse(o.views.empty() ? "GLS" : o.views);
  const auto registry = load_registry(o);
  const BackboneSet backbones = backbones_for(o, views, registry);
  const DatasetManifest m = parse_manifest(o.manifest);
  FeatureCache cache(*root);
  ExtractionSummary s;
  featurize_corpus(m.samples, views, backbones, CropSpec(o.crop_ratio), &cache, o.jobs, &s);
  out << "extracted " << summary_line(s) << "\n";
  return 0;
}

int cmd_train(const Options& o, std::ostream& out, std::ostream& err) {
  require(o.manifest, "--manifest");
  require(o.out, "--out");
  const ViewSet views = ViewSet::parse(o.views.empty() ? "GLS" : o.views);
  const auto registry = load_registry(o);
  const BackboneSet backbones = backbones_for(o, views, registry);
  const DatasetManifest m = maybe_split(parse_manifest(o.manifest), o);
  const std::vector<Sample> train = m.select(Split::Train);
  auto cache = open_cache(o);
  ExtractionSummary s;
  const auto features = featurize_corpus(train, views, backbones, CropSpec(o.crop_ratio), cache.get(),
                                         o.jobs, &s);
  const SvmModel model = train_model(features, labels_of(train), smo_config(o));
  save_model(model, o.out);
  err << "note: extracted " << summary_line(s) << "\n";
  out << "trained " << o.out << " support_vectors=" << model.support_vectors.size()
      << " converged=" << (model.converged ? "true" : "false") << "\n";
  return 0;
}

int cmd_predict(const Options& o, std::ostream& out, std::ostream&) {
  require(o.model, "--model");
  require(o.image, "--image");
  const SvmModel model = load_model(o.model);
  const auto registry = load_registry(o);
  const auto [views, backbones] = model_inputs(model, registry);
  auto cache = open_cache(o);
  const CompositeFeature f = featurize_image(ImageSource::from_file(o.image), views, backbones, CropSpec(o.crop_ratio),
                                             cache.get());
  check_provenance(model, f.provenance());
  const double d = decision_value(model, f.values());
  char buf[64];
  std::snprintf(buf, sizeof buf, "%s %.17g\n", std::string(to_string(predict_label(d))).c_str(), d);
  out << buf;
  return 0;
}

int cmd_eval(const Options& o, std::ostream& out, std::ostream& err) {
  require(o.model, "--model");
  require(o.manifest, "--manifest");
  const SvmModel model = load_model(o.model);
  const DatasetManifest m = parse_manifest(o.manifest);
  const auto registry = load_registry(o);
  const auto [views, backbones] = model_inputs(model, registry);
  const std::vector<Sample> test = m.select(Split::Test);
  auto cache = open_cache(o);
  ExtractionSummary s;
  const auto features = featurize_corpus(test, views, backbones, CropSpec(o.crop_ratio), cache.get(),
                                         o.jobs, &s);
  EvalReport r = evaluate(model, features, labels_of(test));
  r.model = model_name(model);
  r.dataset = m.name;
  err << "note: extracted " << summary_line(s) << "\n";
  emit_reports(o, {r}, out);
  return 0;
}

ExperimentConfig experiment(const Options& o) {
  ExperimentConfig cfg;
  cfg.content_backbone = o.content_backbone;
  cfg.scene_backbone = o.scene_backbone;
  cfg.crop = CropSpec(o.crop_ratio);
  cfg.smo = smo_config(o);
  cfg.cache_path = cache_root(o);
  cfg.jobs = o.jobs;
  return cfg;
}

int cmd_ablate(const Options& o, std::ostream& out, std::ostream& err) {
  const std::string train_path = o.train_manifest.empty() ? o.manifest : o.train_manifest;
  const std::string test_path = o.test_manifest.empty() ? train_path : o.test_manifest;
  require(train_path, "--manifest or --train-manifest");
  ExperimentConfig cfg = experiment(o);
  cfg.train_manifest = maybe_split(parse_manifest(train_path), o);
  cfg.test_manifest = test_path == train_path ? cfg.train_manifest : maybe_split(parse_manifest(test_path), o);
  std::stringstream list(o.view_sets);
  std::string item;
  while (std::getline(list, item, ',')) {
    if (!item.empty()) cfg.view_sets.push_back(ViewSet::parse(item));
  }
  const auto registry = load_registry(o);
  ExtractionSummary s;
  const auto reports = ablation_run(cfg, registry, &s);
  err << "note: extracted " << summary_line(s) << "\n";
  emit_reports(o, reports, out);
  return 0;
}

int cmd_cross_eval(const Options& o, std::ostream& out, std::ostream& err) {
  require(o.train_manifest, "--train-manifest");
  require(o.test_manifest, "--test-manifest");
  ExperimentConfig cfg = experiment(o);
  cfg.view_sets = {ViewSet::parse(o.views.empty() ? "G" : o.views)};
  const DatasetManifest train = parse_manifest(o.train_manifest);
  const DatasetManifest test = parse_manifest(o.test_manifest);
  const auto registry = load_registry(o);
  ExtractionSummary s;
  const EvalReport r = cross_dataset(train, test, cfg, registry, &s);
  err << "note: extracted " << summary_line(s) << "\n";
  emit_reports(o, {r}, out);
  return 0;
}

int cmd_stats(const Options& o, std::ostream& out, std::ostream&) {
  require(o.manifest, "--manifest");
  DatasetManifest m = parse_manifest(o.manifest);
  if (o.split) m = split_balanced(m, *o.split, o.seed);
  if (!o.out.empty()) write_manifest(m, o.out);
  const DatasetStats s = dataset_stats(m);
  out << "high=" << s.high << " low=" << s.low << " train=" << s.train << " test=" << s.test << "\n";
  return 0;
}

int cmd_gc(const Options& o, std::ostream& out, std::ostream&) {
  const auto root = cache_root(o);
  if (!root) throw UsageError(std::string("gc needs --cache or ") + kCacheEnv);
  FeatureCache cache(*root);
  const GcReport r = cache.gc();
  out << "gc live_records=" << r.live_records << " dropped_entries=" << r.dropped_entries
      << " removed_segments=" << r.removed_segments << "\n";
  return 0;
}

std::string one_line(std::string text) {
  std::replace(text.begin(), text.end(), '\n', ' ');
  std::replace(text.begin(), text.end(), '\r', ' ');
  return text;
}

}  // namespace

int run_command(const std::vector<std::string>& raw_args, std::ostream& out, std::ostream& err) {
  const WarningSink previous = set_warning_sink([&err](const std::string& m) { err << "warning: " << one_line(m) << "\n"; });
  struct Restore {
    const WarningSink& sink;
    ~Restore() { set_warning_sink(sink); }
  } restore{previous};

  Options o;
  CLI::App app{"Training-free image aesthetics classification with composite deep features", "aescomp"};
  app.require_subcommand(1, 1);
  app.set_help_all_flag("--help-all", "Show help for every command");

  auto common = [&](CLI::App* sub) {
    sub->add_option("--config", "JSON file supplying any option; the command line wins");
    sub->add_option("--registry", o.registry, "Backbone descriptor registry (JSON)");
    sub->add_option("--cache", o.cache, std::string("Feature cache directory (default $") + kCacheEnv + ")");
    sub->add_option("--jobs", o.jobs, "Extraction worker threads")->check(CLI::PositiveNumber);
    sub->add_option("--crop-ratio", o.crop_ratio, "Local view centre-crop ratio")->check(CLI::Range(0.0, 1.0));
  };
  auto backbones = [&](CLI::App* sub) {
    sub->add_option("--content-backbone", o.content_backbone, "Backbone id for the global and local views");
    sub->add_option("--scene-backbone", o.scene_backbone, "Backbone id for the scene view");
  };
  auto solver = [&](CLI::App* sub) {
    sub->add_option("--C", o.C, "SVM box constraint")->check(CLI::PositiveNumber);
    sub->add_option("--kkt-tol", o.kkt_tol, "SMO KKT tolerance")->check(CLI::PositiveNumber);
    sub->add_option("--max-passes", o.max_passes, "SMO update budget per training example")->check(CLI::PositiveNumber);
    sub->add_option("--seed", o.seed, "Seed for the solver scan and for --split");
    sub->add_option("--split", o.split, "Assign a balanced train fraction to manifests without splits");
  };
  auto report = [&](CLI::App* sub) {
    sub->add_option("--out", o.out, "Write the report here instead of stdout");
    sub->add_option("--format", o.format, "csv or text")->check(CLI::IsMember({"csv", "text"}));
  };

  auto* extract = app.add_subcommand("extract", "Fill the feature cache for a manifest");
  common(extract);
  backbones(extract);
  extract->add_option("--manifest", o.manifest, "Manifest CSV");
  extract->add_option("--views", o.views, "Views to extract, e.g. GLS");

  auto* train = app.add_subcommand("train", "Train and save a model");
  common(train);
  backbones(train);
  solver(train);
  train->add_option("--manifest", o.manifest, "Manifest CSV; its train split is used");
  train->add_option("--views", o.views, "View set, e.g. GLS or G+L");
  train->add_option("--out", o.out, "Model file to write");

  auto* predict = app.add_subcommand("predict", "Classify one image");
  common(predict);
  predict->add_option("--model", o.model, "Model file");
  predict->add_option("--image", o.image, "Image file (PNG or JPEG)");

  auto* eval = app.add_subcommand("eval", "Evaluate a model on a manifest's test split");
  common(eval);
  report(eval);
  eval->add_option("--model", o.model, "Model file");
  eval->add_option("--manifest", o.manifest, "Manifest CSV");

  auto* ablate = app.add_subcommand("ablate", "Train and evaluate one model per view set");
  common(ablate);
  backbones(ablate);
  solver(ablate);
  report(ablate);
  ablate->add_option("--manifest", o.manifest, "Manifest CSV for both training and testing");
  ablate->add_option("--train-manifest", o.train_manifest, "Training manifest");
  ablate->add_option("--test-manifest", o.test_manifest, "Testing manifest");
  ablate->add_option("--view-sets", o.view_sets, "Comma-separated view sets");

  auto* cross = app.add_subcommand("cross-eval", "Train on one dataset, test on another");
  common(cross);
  backbones(cross);
  solver(cross);
  report(cross);
  cross->add_option("--train-manifest", o.train_manifest, "Training manifest (all samples)");
  cross->add_option("--test-manifest", o.test_manifest, "Testing manifest (all samples)");
  cross->add_option("--views", o.views, "View set (default G)");

  auto* stats = app.add_subcommand("stats", "Count labels and splits");
  common(stats);
  stats->add_option("--manifest", o.manifest, "Manifest CSV");
  stats->add_option("--split", o.split, "Reassign a balanced split with this train fraction")
      ->check(CLI::Range(0.0, 1.0));
  stats->add_option("--seed", o.seed, "Seed for --split");
  stats->add_option("--out", o.out, "Write the (re)split manifest here");

  auto* gc = app.add_subcommand("gc", "Compact the feature cache index and drop unreferenced segments");
  common(gc);

  try {
    std::vector<std::string> args = merge_config(raw_args);
    std::reverse(args.begin(), args.end());
    app.parse(args);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "error: UsageError: " << one_line(e.what()) << "\n";
    return 2;
  } catch (const Error& e) {
    err << "error: " << e.kind() << ": " << one_line(e.what()) << "\n";
    return 1;
  }

  try {
    if (extract->parsed()) return cmd_extract(o, out, err);
    if (train->parsed()) return cmd_train(o, out, err);
    if (predict->parsed()) return cmd_predict(o, out, err);
    if (eval->parsed()) return cmd_eval(o, out, err);
    if (ablate->parsed()) return cmd_ablate(o, out, err);
    if (cross->parsed()) return cmd_cross_eval(o, out, err);
    if (stats->parsed()) return cmd_stats(o, out, err);
    if (gc->parsed()) return cmd_gc(o, out, err);
    throw UsageError("no command given");
  } catch (const UsageError& e) {
    err << "error: UsageError: " << one_line(e.what()) << "\n";
    return 2;
  } catch (const Error& e) {
    err << "error: " << e.kind() << ": " << one_line(e.what()) << "\n";
    return 1;
  } catch (const std::exception& e) {
    err << "error: InternalError: " << one_line(e.what()) << "\n";
    return 1;
  }
}

}  // namespace aescomp
