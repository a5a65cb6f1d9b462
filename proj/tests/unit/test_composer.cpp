#include <gtest/gtest.h>

#include <random>

#include "aescomp/composer.hpp"
#include "aescomp/error.hpp"
#include "aescomp/store.hpp"
#include "test_support.hpp"

using namespace aescomp;
using aescomp::testing::random_image;
using aescomp::testing::TempDir;

namespace {

FeatureVector vec(ViewKind view, std::size_t dim, float start, const std::string& id = "b") {
  std::vector<float> v(dim);
  for (std::size_t i = 0; i < dim; ++i) v[i] = start + static_cast<float>(i) * 0.25f;
  return FeatureVector(id, view, std::move(v));
}

BackboneSet stub_set() { return {make_stub_backbone(11, 12, 16), make_stub_backbone(23, 5, 24)}; }

std::vector<float> to_vector(std::span<const float> s) { return {s.begin(), s.end()}; }

}  // namespace

TEST(ViewSet, CanonicalOrderAndNames) {
  const ViewSet v({ViewKind::Scene, ViewKind::Global});
  EXPECT_EQ(v.to_string(), "G+S");
  EXPECT_EQ(v.views()[0], ViewKind::Global);
  EXPECT_TRUE(v.contains(ViewKind::Scene));
  EXPECT_FALSE(v.contains(ViewKind::Local));
}

TEST(ViewSet, ParseAcceptsSeveralSpellings) {
  const ViewSet all({ViewKind::Global, ViewKind::Local, ViewKind::Scene});
  EXPECT_EQ(ViewSet::parse("GLS"), all);
  EXPECT_EQ(ViewSet::parse("s+g+l"), all);
  EXPECT_EQ(ViewSet::parse("global,scene,local"), all);
  EXPECT_EQ(ViewSet::parse("Local"), ViewSet({ViewKind::Local}));
  EXPECT_EQ(ViewSet::parse("G"), ViewSet({ViewKind::Global}));
}

TEST(ViewSet, RejectsEmptyDuplicateAndUnknown) {
  EXPECT_THROW(ViewSet({}), CompositionError);
  EXPECT_THROW(ViewSet({ViewKind::Global, ViewKind::Global}), CompositionError);
  EXPECT_THROW(ViewSet::parse(""), CompositionError);
  EXPECT_THROW(ViewSet::parse("GG"), CompositionError);
  EXPECT_THROW(ViewSet::parse("GX"), CompositionError);
}

TEST(Compose, ThreeResNetSizedViewsGive6144) {
  const std::vector<FeatureVector> parts = {vec(ViewKind::Global, 2048, 0), vec(ViewKind::Local, 2048, 1),
                                            vec(ViewKind::Scene, 2048, 2, "places")};
  const CompositeFeature c = compose(parts, ViewSet::parse("GLS"));
  EXPECT_EQ(c.dim(), 6144u);
  ASSERT_EQ(c.provenance().size(), 3u);
  EXPECT_EQ(c.provenance()[2].backbone_id, "places");
  EXPECT_EQ(c.provenance()[1].dim, 2048u);
}

TEST(Compose, SingleViewIsIdentity) {
  const FeatureVector g = vec(ViewKind::Global, 7, -1.5f);
  const CompositeFeature c = compose(std::span(&g, 1), ViewSet::parse("G"));
  EXPECT_EQ(to_vector(c.values()), to_vector(g.values()));
}

TEST(Compose, ViewMismatchIsCompositionError) {
  const std::vector<FeatureVector> parts = {vec(ViewKind::Global, 3, 0), vec(ViewKind::Scene, 3, 0)};
  EXPECT_THROW(compose(parts, ViewSet::parse("G+L")), CompositionError);
  EXPECT_THROW(compose(std::span(parts.data(), 1), ViewSet::parse("G+S")), CompositionError);
}

TEST(Compose, SlicesRecoverEachPartExactly) {
  std::mt19937_64 rng(4);
  std::normal_distribution<float> n;
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<FeatureVector> parts;
    for (ViewKind v : {ViewKind::Global, ViewKind::Local, ViewKind::Scene}) {
      std::vector<float> x(1 + rng() % 40);
      for (auto& e : x) e = n(rng);
      parts.emplace_back("id" + std::to_string(trial), v, std::move(x));
    }
    const CompositeFeature c = compose(parts, ViewSet::parse("GLS"));
    for (std::size_t i = 0; i < 3; ++i) EXPECT_EQ(c.slice(i), parts[i]);
    EXPECT_THROW(c.slice(3), InvalidArgument);
  }
}

TEST(Compose, InconsistentProvenanceIsRejected) {
  EXPECT_THROW(CompositeFeature(ViewSet::parse("G"), {1, 2, 3}, {{"b", ViewKind::Global, 2}}), CompositionError);
  EXPECT_THROW(CompositeFeature(ViewSet::parse("G"), {1}, {{"b", ViewKind::Scene, 1}}), CompositionError);
}

TEST(BackboneSet, MissingRoleIsCompositionError) {
  BackboneSet set{make_stub_backbone(1, 2, 8), nullptr};
  EXPECT_NO_THROW(set.for_view(ViewKind::Local));
  EXPECT_THROW(set.for_view(ViewKind::Scene), CompositionError);
}

TEST(Featurize, GlobalOnlyEqualsDirectExtraction) {
  std::mt19937_64 rng(1);
  const RawImage img = random_image(40, 30, rng);
  const BackboneSet set = stub_set();
  const CompositeFeature c = featurize_image(img, ViewSet::parse("G"), set, CropSpec{}, nullptr);
  const auto& b = *set.content;
  const FeatureVector direct = b.extract(prepare_view(img, ViewKind::Global, b.descriptor().preprocess()));
  EXPECT_EQ(to_vector(c.values()), to_vector(direct.values()));
}

TEST(Featurize, ThreeViewsConcatenateIndependentExtractions) {
  std::mt19937_64 rng(2);
  const RawImage img = random_image(50, 44, rng);
  const BackboneSet set = stub_set();
  const CropSpec crop{0.62};
  const CompositeFeature c = featurize_image(img, ViewSet::parse("GLS"), set, crop, nullptr);
  std::vector<float> manual;
  for (ViewKind v : {ViewKind::Global, ViewKind::Local, ViewKind::Scene}) {
    const Backbone& b = set.for_view(v);
    const auto t = prepare_view(img, v, b.descriptor().preprocess(crop));
    const auto f = b.extract(t, v);
    manual.insert(manual.end(), f.values().begin(), f.values().end());
  }
  EXPECT_EQ(c.dim(), 12u + 12u + 5u);
  EXPECT_EQ(to_vector(c.values()), manual);
  EXPECT_EQ(c.provenance()[2].backbone_id, "stub:23:5:24");
}

TEST(Featurize, WarmCacheSkipsBackbonesAndMatchesUncached) {
  TempDir dir;
  std::mt19937_64 rng(3);
  const RawImage img = random_image(33, 33, rng);
  const BackboneSet set = stub_set();
  FeatureCache cache(dir.path());
  const ViewSet views = ViewSet::parse("GLS");
  const CompositeFeature cold = featurize_image(img, views, set, CropSpec{}, &cache);
  const auto before = set.content->invocations() + set.scene->invocations();
  EXPECT_EQ(before, 3u);
  const CompositeFeature warm = featurize_image(img, views, set, CropSpec{}, &cache);
  EXPECT_EQ(set.content->invocations() + set.scene->invocations(), before);
  EXPECT_EQ(warm, cold);
  EXPECT_EQ(featurize_image(img, views, set, CropSpec{}, nullptr), cold);
  EXPECT_EQ(cache.stats().hits, 3u);
}

TEST(Featurize, CropRatioIsPartOfTheCacheKey) {
  TempDir dir;
  std::mt19937_64 rng(5);
  const RawImage img = random_image(33, 33, rng);
  const BackboneSet set = stub_set();
  FeatureCache cache(dir.path());
  const auto a = featurize_image(img, ViewSet::parse("L"), set, CropSpec{0.62}, &cache);
  const auto b = featurize_image(img, ViewSet::parse("L"), set, CropSpec{0.5}, &cache);
  EXPECT_NE(a, b);
  EXPECT_EQ(set.content->invocations(), 2u);
}

TEST(Featurize, UniformImageHasEqualGlobalAndLocalParts) {
  const RawImage img = RawImage::filled(61, 47, {13, 200, 77});
  const CompositeFeature c = featurize_image(img, ViewSet::parse("G+L"), stub_set(), CropSpec{}, nullptr);
  EXPECT_EQ(to_vector(c.slice(0).values()), to_vector(c.slice(1).values()));
}

TEST(ImageSource, FileBytesDefineIdentity) {
  TempDir dir;
  std::mt19937_64 rng(6);
  const RawImage img = random_image(9, 9, rng);
  save_png(img, dir / "a.png");
  save_png(img, dir / "b.png");
  const ImageSource a = ImageSource::from_file(dir / "a.png");
  const ImageSource b = ImageSource::from_file(dir / "b.png");
  EXPECT_EQ(a.content_hash(), b.content_hash());
  EXPECT_EQ(a.image(), img);
  EXPECT_NE(ImageSource::from_pixels(img).content_hash(), a.content_hash());
  EXPECT_THROW(ImageSource::from_file(dir / "missing.png"), IoError);
  EXPECT_THROW(ImageSource::from_bytes({1, 2, 3}).image(), DecodeError);
}
