#include <gtest/gtest.h>

#include <cstdlib>
#include <sstream>

#include "aescomp/cli.hpp"
#include "aescomp/composer.hpp"
#include "aescomp/eval.hpp"
#include "aescomp/store.hpp"
#include "test_support.hpp"

using namespace aescomp;
using aescomp::testing::make_brightness_corpus;
using aescomp::testing::read_text;
using aescomp::testing::TempDir;
using aescomp::testing::write_text;

namespace {

struct CliResult {
  int rc = 0;
  std::string out;
  std::string err;
};

CliResult run(std::vector<std::string> args) {
  std::ostringstream out, err;
  CliResult r;
  r.rc = run_command(args, out, err);
  r.out = out.str();
  r.err = err.str();
  return r;
}

class CliTest : public ::testing::Test {
 protected:
  void SetUp() override {
    ::unsetenv("AESCOMP_CACHE");
    DatasetManifest m = split_balanced(make_brightness_corpus(dir_ / "img", 12, 21), 0.5, 1);
    m.name = "toy";
    write_manifest(m, manifest());
    samples_ = m.samples;
  }

  std::string manifest() const { return (dir_ / "toy.csv").string(); }
  std::string path(const std::string& name) const { return (dir_ / name).string(); }

  TempDir dir_;
  std::vector<Sample> samples_;
};

int count_lines(const std::string& s) { return static_cast<int>(std::count(s.begin(), s.end(), '\n')); }

}  // namespace

TEST_F(CliTest, TrainWritesModel) {
  const CliResult r = run({"train", "--manifest", manifest(), "--views", "GLS", "--content-backbone", "stub:7:16:32",
                     "--scene-backbone", "stub:8:16:32", "--out", path("m.json"), "--jobs", "2"});
  ASSERT_EQ(r.rc, 0) << r.err;
  EXPECT_EQ(r.out.rfind("trained " + path("m.json") + " support_vectors=", 0), 0u);
  EXPECT_NE(r.out.find("converged=true"), std::string::npos);
  const SvmModel m = load_model(path("m.json"));
  EXPECT_EQ(m.expected_provenance.size(), 3u);
  EXPECT_EQ(m.expected_provenance[2].backbone_id, "stub:8:16:32");
}

TEST_F(CliTest, TrainAcceptsShortStubIdAndIsIdempotent) {
  const std::vector<std::string> args = {"train", "--manifest", manifest(), "--views", "G", "--content-backbone",
                                         "stub:7", "--out", path("a.json")};
  ASSERT_EQ(run(args).rc, 0);
  const std::string first = read_text(path("a.json"));
  ASSERT_EQ(run(args).rc, 0);
  EXPECT_EQ(read_text(path("a.json")), first);
  EXPECT_EQ(load_model(path("a.json")).expected_provenance[0].backbone_id, "stub:7:64:224");
}

TEST_F(CliTest, PredictPrintsLabelAndDecisionValue) {
  ASSERT_EQ(run({"train", "--manifest", manifest(), "--views", "G+L", "--content-backbone", "stub:7:16:32", "--out",
                 path("m.json")})
                .rc,
            0);
  const std::string image = samples_.front().image_path;
  const CliResult r = run({"predict", "--model", path("m.json"), "--image", image});
  ASSERT_EQ(r.rc, 0) << r.err;
  std::istringstream line(r.out);
  std::string label;
  double value = 0;
  line >> label >> value;
  EXPECT_EQ(count_lines(r.out), 1);

  const SvmModel m = load_model(path("m.json"));
  const BackboneSet set{make_stub_backbone(7, 16, 32), nullptr};
  const CompositeFeature f =
      featurize_image(ImageSource::from_file(image), ViewSet::parse("G+L"), set, CropSpec{}, nullptr);
  const double expected = decision_value(m, f.values());
  EXPECT_EQ(value, expected);
  EXPECT_EQ(label, expected >= 0 ? "high" : "low");
}

TEST_F(CliTest, EvalMissingManifestIsManifestError) {
  ASSERT_EQ(run({"train", "--manifest", manifest(), "--views", "G", "--content-backbone", "stub:7:16:32", "--out",
                 path("m.json")})
                .rc,
            0);
  const CliResult r = run({"eval", "--model", path("m.json"), "--manifest", path("missing.csv")});
  EXPECT_NE(r.rc, 0);
  EXPECT_EQ(r.err.rfind("error: ManifestError: ", 0), 0u) << r.err;
  EXPECT_EQ(count_lines(r.err), 1);
  EXPECT_TRUE(r.out.empty());
}

TEST_F(CliTest, EvalEmitsOneCsvRow) {
  ASSERT_EQ(run({"train", "--manifest", manifest(), "--views", "G", "--content-backbone", "stub:7:16:32", "--out",
                 path("m.json")})
                .rc,
            0);
  const CliResult r = run({"eval", "--model", path("m.json"), "--manifest", manifest()});
  ASSERT_EQ(r.rc, 0) << r.err;
  std::istringstream csv(r.out);
  std::string header, row;
  std::getline(csv, header);
  std::getline(csv, row);
  EXPECT_EQ(header, kReportCsvHeader);
  EXPECT_EQ(row.rfind("stub:7:16:32,G,toy,", 0), 0u) << row;
  EXPECT_NE(row.find(",12,"), std::string::npos);
}

TEST_F(CliTest, ExtractTwiceHitsCacheOnSecondPass) {
  const std::vector<std::string> args = {"extract", "--manifest", manifest(), "--cache", path("cache"),
                                         "--content-backbone", "stub:7:16:32", "--scene-backbone", "stub:8:16:32"};
  const CliResult cold = run(args);
  ASSERT_EQ(cold.rc, 0) << cold.err;
  EXPECT_EQ(cold.out, "extracted images=24 vectors=72 backbone_invocations=72 cache_hits=0 cache_misses=72\n");
  const CliResult warm = run(args);
  EXPECT_EQ(warm.out, "extracted images=24 vectors=72 backbone_invocations=0 cache_hits=72 cache_misses=0\n");
}

TEST_F(CliTest, CacheComesFromEnvironment) {
  ::setenv("AESCOMP_CACHE", path("envcache").c_str(), 1);
  const CliResult r = run({"extract", "--manifest", manifest(), "--views", "G", "--content-backbone", "stub:7:16:32"});
  ::unsetenv("AESCOMP_CACHE");
  ASSERT_EQ(r.rc, 0) << r.err;
  EXPECT_TRUE(std::filesystem::exists(path("envcache") + "/index.jsonl"));
}

TEST_F(CliTest, ExtractWithoutCacheIsUsageError) {
  const CliResult r = run({"extract", "--manifest", manifest(), "--content-backbone", "stub:7:16:32"});
  EXPECT_EQ(r.rc, 2);
  EXPECT_EQ(r.err.rfind("error: UsageError: ", 0), 0u);
}

TEST_F(CliTest, AblateDefaultsToFourViewSets) {
  const CliResult r = run({"ablate", "--manifest", manifest(), "--content-backbone", "stub:7:16:32", "--scene-backbone",
                     "stub:8:16:32"});
  ASSERT_EQ(r.rc, 0) << r.err;
  std::istringstream csv(r.out);
  std::string line;
  std::vector<std::string> view_sets;
  std::getline(csv, line);
  while (std::getline(csv, line)) {
    const auto a = line.find(','), b = line.find(',', a + 1);
    view_sets.push_back(line.substr(a + 1, b - a - 1));
  }
  EXPECT_EQ(view_sets, (std::vector<std::string>{"G", "G+S", "G+L", "G+L+S"}));
}

TEST_F(CliTest, AblateTextFormatToFile) {
  const CliResult r = run({"ablate", "--manifest", manifest(), "--content-backbone", "stub:7:16:32", "--view-sets", "G,G+L",
                     "--format", "text", "--out", path("report.txt")});
  ASSERT_EQ(r.rc, 0) << r.err;
  EXPECT_TRUE(r.out.empty());
  const std::string text = read_text(path("report.txt"));
  EXPECT_NE(text.find("G+L"), std::string::npos);
}

TEST_F(CliTest, CrossEvalReportsDatasetPair) {
  DatasetManifest other = make_brightness_corpus(dir_.path() / "other", 8, 22);
  other.name = "other";
  write_manifest(other, path("other.csv"));
  const CliResult r = run({"cross-eval", "--train-manifest", manifest(), "--test-manifest", path("other.csv"),
                     "--content-backbone", "stub:7:16:32"});
  ASSERT_EQ(r.rc, 0) << r.err;
  EXPECT_NE(r.out.find(",G,toy->other,"), std::string::npos) << r.out;
  EXPECT_NE(r.out.find(",16,"), std::string::npos);
}

TEST_F(CliTest, StatsAndResplit) {
  CliResult r = run({"stats", "--manifest", manifest()});
  ASSERT_EQ(r.rc, 0);
  EXPECT_EQ(r.out, "high=12 low=12 train=12 test=12\n");
  r = run({"stats", "--manifest", manifest(), "--split", "0.25", "--seed", "3", "--out", path("resplit.csv")});
  ASSERT_EQ(r.rc, 0) << r.err;
  EXPECT_EQ(r.out, "high=12 low=12 train=6 test=18\n");
  EXPECT_EQ(run({"stats", "--manifest", path("resplit.csv")}).out, r.out);
}

TEST_F(CliTest, GcReportsCounts) {
  ASSERT_EQ(run({"extract", "--manifest", manifest(), "--views", "G", "--cache", path("c"), "--content-backbone",
                 "stub:7:16:32"})
                .rc,
            0);
  const CliResult r = run({"gc", "--cache", path("c")});
  ASSERT_EQ(r.rc, 0) << r.err;
  EXPECT_EQ(r.out, "gc live_records=24 dropped_entries=0 removed_segments=0\n");
}

TEST_F(CliTest, ConfigFileSuppliesOptionsAndCommandLineWins) {
  write_text(path("cfg.json"), "{\"content-backbone\": \"stub:7:16:32\", \"views\": \"G+S\", \"scene-backbone\": "
                               "\"stub:99:4:32\", \"C\": 2.5}");
  const CliResult r = run({"train", "--config", path("cfg.json"), "--manifest", manifest(), "--views", "G", "--out",
                     path("m.json")});
  ASSERT_EQ(r.rc, 0) << r.err;
  const SvmModel m = load_model(path("m.json"));
  EXPECT_EQ(m.C, 2.5);
  ASSERT_EQ(m.expected_provenance.size(), 1u);
  EXPECT_EQ(m.expected_provenance[0].backbone_id, "stub:7:16:32");
}

TEST_F(CliTest, UsageErrors) {
  CliResult r = run({});
  EXPECT_EQ(r.rc, 2);
  EXPECT_EQ(r.err.rfind("error: UsageError: ", 0), 0u);
  r = run({"train", "--bogus"});
  EXPECT_EQ(r.rc, 2);
  EXPECT_EQ(count_lines(r.err), 1);
  r = run({"frobnicate"});
  EXPECT_EQ(r.rc, 2);
  r = run({"train", "--manifest", manifest()});
  EXPECT_EQ(r.rc, 2);
  EXPECT_NE(r.err.find("--out"), std::string::npos);
}

TEST_F(CliTest, ModuleErrorsAreSingleLineWithKind) {
  write_text(path("bad.json"), "{\"format_version\": 999}");
  CliResult r = run({"predict", "--model", path("bad.json"), "--image", samples_.front().image_path});
  EXPECT_EQ(r.rc, 1);
  EXPECT_EQ(r.err.rfind("error: FormatError: ", 0), 0u) << r.err;
  r = run({"train", "--manifest", manifest(), "--views", "G", "--content-backbone", "nope", "--out", path("m.json")});
  EXPECT_EQ(r.rc, 1);
  EXPECT_EQ(r.err.rfind("error: RegistryError: ", 0), 0u) << r.err;
  EXPECT_EQ(count_lines(r.err), 1);
}
