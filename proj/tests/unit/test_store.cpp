#include <gtest/gtest.h>

#include <sys/wait.h>
#include <unistd.h>

#include <cstdio>
#include <cstring>
#include <fstream>
#include <random>
#include <set>
#include <thread>

#include "aescomp/error.hpp"
#include "aescomp/store.hpp"
#include "test_support.hpp"

using namespace aescomp;
using aescomp::testing::CapturedWarnings;
using aescomp::testing::read_text;
using aescomp::testing::TempDir;
using aescomp::testing::write_text;

namespace {

CacheKey key_for(int i, ViewKind view = ViewKind::Global) {
  CacheKey k;
  k.image_hash = sha256("image-" + std::to_string(i));
  k.backbone_id = "stub:1:8:16";
  k.view = view;
  k.preprocess_hash = preprocess_hash(PreprocessConfig{});
  return k;
}

FeatureVector random_vector(std::size_t dim, std::mt19937_64& rng, ViewKind view = ViewKind::Global) {
  std::normal_distribution<float> n(0.0f, 3.0f);
  std::vector<float> v(dim);
  for (auto& x : v) x = n(rng);
  return FeatureVector("stub:1:8:16", view, std::move(v));
}

std::vector<std::filesystem::path> segments(const std::filesystem::path& root) {
  std::vector<std::filesystem::path> out;
  for (const auto& e : std::filesystem::directory_iterator(root))
    if (e.path().extension() == ".aefc") out.push_back(e.path());
  return out;
}

void flip_byte(const std::filesystem::path& file, std::uint64_t offset) {
  std::fstream f(file, std::ios::in | std::ios::out | std::ios::binary);
  f.seekg(static_cast<std::streamoff>(offset));
  char c = 0;
  f.read(&c, 1);
  c = static_cast<char>(c ^ 0x5a);
  f.seekp(static_cast<std::streamoff>(offset));
  f.write(&c, 1);
}

SvmModel xor_model() {
  FeatureMatrix x = FeatureMatrix::from_rows({{0, 0}, {1, 1}, {1, 0}, {0, 1}});
  SmoConfig cfg;
  cfg.C = 10.0;
  const std::vector<Label> labels = {Label::Low, Label::Low, Label::High, Label::High};
  return train_smo(x, labels, KernelParams{1.0}, cfg,
                   {{"stub:1:2:16", ViewKind::Global, 2}});
}

}  // namespace

TEST(Record, EncodeDecodeRoundTrip) {
  const Digest d = sha256("k");
  const std::vector<float> v = {1.5f, -0.0f, 3.4028235e38f, 1e-45f};
  const auto bytes = encode_record(d, v);
  EXPECT_EQ(bytes.size(), kRecordHeaderSize + 4 * v.size() + 4);
  EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + 4), "AEFC");
  EXPECT_EQ(bytes[4], 1);
  EXPECT_EQ(bytes[5], 0);
  const DecodedRecord r = decode_record(bytes);
  EXPECT_EQ(r.key_digest, d);
  ASSERT_EQ(r.values.size(), v.size());
  for (std::size_t i = 0; i < v.size(); ++i) EXPECT_EQ(std::memcmp(&r.values[i], &v[i], 4), 0);
}

TEST(Record, ChecksumCatchesEveryFlippedByte) {
  const auto good = encode_record(sha256("k"), std::vector<float>{1, 2, 3});
  for (std::size_t i = 0; i < good.size(); ++i) {
    auto bad = good;
    bad[i] ^= 0x01;
    EXPECT_THROW(decode_record(bad), CacheError) << "byte " << i;
  }
  EXPECT_THROW(decode_record(std::span(good.data(), good.size() - 1)), CacheError);
}

TEST(Record, TrailerIsCrc32c) {
  const auto bytes = encode_record(sha256("k"), std::vector<float>{0.5f});
  const std::uint32_t crc = crc32c(std::span(bytes.data(), bytes.size() - 4));
  const std::uint32_t stored = bytes[bytes.size() - 4] | (bytes[bytes.size() - 3] << 8) |
                               (bytes[bytes.size() - 2] << 16) | (std::uint32_t(bytes[bytes.size() - 1]) << 24);
  EXPECT_EQ(stored, crc);
  // Standard check value for "123456789".
  EXPECT_EQ(crc32c(std::span(reinterpret_cast<const std::uint8_t*>("123456789"), 9)), 0xE3069283u);
}

TEST(FeatureCache, PutThenGetIsBitIdentical) {
  TempDir dir;
  FeatureCache cache(dir.path());
  std::mt19937_64 rng(1);
  const FeatureVector v = random_vector(100, rng);
  cache.put(key_for(1), v);
  const auto got = cache.get(key_for(1));
  ASSERT_TRUE(got.has_value());
  EXPECT_EQ(*got, v);
}

TEST(FeatureCache, AbsentKeyIsAMiss) {
  TempDir dir;
  FeatureCache cache(dir.path());
  EXPECT_FALSE(cache.get(key_for(1)).has_value());
  EXPECT_EQ(cache.stats().misses, 1u);
}

TEST(FeatureCache, IdenticalPutWritesOnce) {
  TempDir dir;
  std::mt19937_64 rng(2);
  const FeatureVector v = random_vector(10, rng);
  {
    FeatureCache cache(dir.path());
    cache.put(key_for(1), v);
    cache.put(key_for(1), v);
    EXPECT_EQ(cache.size(), 1u);
  }
  const std::string index = read_text(dir / "index.jsonl");
  EXPECT_EQ(std::count(index.begin(), index.end(), '\n'), 1);
  ASSERT_EQ(segments(dir.path()).size(), 1u);
  EXPECT_EQ(std::filesystem::file_size(segments(dir.path())[0]), kRecordHeaderSize + 40 + 4);
  FeatureCache reopened(dir.path());
  EXPECT_EQ(reopened.get(key_for(1)), v);
}

TEST(FeatureCache, LastWriteWins) {
  TempDir dir;
  std::mt19937_64 rng(3);
  FeatureCache cache(dir.path());
  cache.put(key_for(1), random_vector(4, rng));
  const FeatureVector second = random_vector(4, rng);
  cache.put(key_for(1), second);
  EXPECT_EQ(cache.get(key_for(1)), second);
  FeatureCache other(dir.path());
  EXPECT_EQ(other.get(key_for(1)), second);
}

TEST(FeatureCache, CorruptRecordWarnsAndMisses) {
  TempDir dir;
  std::mt19937_64 rng(4);
  {
    FeatureCache cache(dir.path());
    cache.put(key_for(1), random_vector(8, rng));
  }
  flip_byte(segments(dir.path()).at(0), kRecordHeaderSize + 5);
  CapturedWarnings warnings;
  FeatureCache cache(dir.path());
  EXPECT_FALSE(cache.get(key_for(1)).has_value());
  EXPECT_EQ(cache.stats().corrupt, 1u);
  ASSERT_EQ(warnings.messages().size(), 1u);
  EXPECT_NE(warnings.messages()[0].find("checksum"), std::string::npos);

  // A fresh put repairs the entry.
  const FeatureVector v = random_vector(8, rng);
  cache.put(key_for(1), v);
  EXPECT_EQ(cache.get(key_for(1)), v);
}

TEST(FeatureCache, TornIndexTailIsIgnored) {
  TempDir dir;
  std::mt19937_64 rng(5);
  const FeatureVector v = random_vector(3, rng);
  {
    FeatureCache cache(dir.path());
    cache.put(key_for(1), v);
  }
  std::ofstream(dir / "index.jsonl", std::ios::app) << "{\"key_hash\":\"ab";
  CapturedWarnings warnings;
  FeatureCache cache(dir.path());
  EXPECT_EQ(cache.get(key_for(1)), v);
}

TEST(FeatureCache, SecondPassHitsEverything) {
  TempDir dir;
  std::mt19937_64 rng(6);
  std::vector<FeatureVector> vs;
  {
    FeatureCache cache(dir.path());
    for (int i = 0; i < 50; ++i) {
      vs.push_back(random_vector(16, rng));
      cache.put(key_for(i), vs.back());
    }
  }
  FeatureCache cache(dir.path());
  for (int i = 0; i < 50; ++i) EXPECT_EQ(cache.get(key_for(i)), vs[static_cast<std::size_t>(i)]);
  EXPECT_EQ(cache.stats().hits, 50u);
  EXPECT_EQ(cache.stats().misses, 0u);
}

TEST(FeatureCache, ConcurrentThreadsShareOneInstance) {
  TempDir dir;
  FeatureCache cache(dir.path());
  std::vector<std::jthread> threads;
  for (int t = 0; t < 8; ++t) {
    threads.emplace_back([&cache, t] {
      std::mt19937_64 rng(static_cast<std::uint64_t>(t));
      for (int i = 0; i < 25; ++i) {
        const FeatureVector v = random_vector(32, rng);
        cache.put(key_for(t * 100 + i), v);
        if (cache.get(key_for(t * 100 + i)) != v) ADD_FAILURE() << "thread " << t << " item " << i;
      }
    });
  }
  threads.clear();
  EXPECT_EQ(cache.size(), 200u);
}

TEST(FeatureCache, ConcurrentProcessesAppendSafely) {
  TempDir dir;
  constexpr int kPerProcess = 60;
  auto write_batch = [&](int base) {
    FeatureCache cache(dir.path());
    std::mt19937_64 rng(static_cast<std::uint64_t>(base));
    for (int i = 0; i < kPerProcess; ++i) cache.put(key_for(base + i), random_vector(24, rng));
  };
  std::vector<pid_t> children;
  for (int p = 1; p <= 3; ++p) {
    const pid_t pid = ::fork();
    ASSERT_GE(pid, 0);
    if (pid == 0) {
      try {
        write_batch(p * 1000);
      } catch (...) {
        ::_exit(1);
      }
      ::_exit(0);
    }
    children.push_back(pid);
  }
  write_batch(0);
  for (pid_t pid : children) {
    int status = 0;
    ::waitpid(pid, &status, 0);
    EXPECT_TRUE(WIFEXITED(status) && WEXITSTATUS(status) == 0);
  }
  FeatureCache cache(dir.path());
  EXPECT_EQ(cache.size(), 4u * kPerProcess);
  for (int base : {0, 1000, 2000, 3000}) {
    std::mt19937_64 rng(static_cast<std::uint64_t>(base));
    for (int i = 0; i < kPerProcess; ++i) EXPECT_EQ(cache.get(key_for(base + i)), random_vector(24, rng));
  }
  EXPECT_EQ(cache.stats().corrupt, 0u);
}

TEST(FeatureCache, GcCompactsIndexAndDropsUnreferencedSegments) {
  TempDir dir;
  std::mt19937_64 rng(7);
  std::vector<FeatureVector> latest;
  {
    FeatureCache first(dir.path());
    for (int i = 0; i < 5; ++i) first.put(key_for(i), random_vector(6, rng));
  }
  {
    FeatureCache second(dir.path());
    for (int i = 0; i < 5; ++i) {
      latest.push_back(random_vector(6, rng));
      second.put(key_for(i), latest.back());
    }
  }
  ASSERT_EQ(segments(dir.path()).size(), 2u);
  FeatureCache cache(dir.path());
  const GcReport r = cache.gc();
  EXPECT_EQ(r.live_records, 5u);
  EXPECT_EQ(r.dropped_entries, 5u);
  EXPECT_EQ(r.removed_segments, 1u);
  EXPECT_EQ(segments(dir.path()).size(), 1u);
  for (int i = 0; i < 5; ++i) EXPECT_EQ(cache.get(key_for(i)), latest[static_cast<std::size_t>(i)]);
  FeatureCache reopened(dir.path());
  for (int i = 0; i < 5; ++i) EXPECT_EQ(reopened.get(key_for(i)), latest[static_cast<std::size_t>(i)]);
}

TEST(FeatureCache, GcInAnotherInstanceIsNoticed) {
  TempDir dir;
  std::mt19937_64 rng(8);
  FeatureCache reader(dir.path());
  {
    FeatureCache writer(dir.path());
    writer.put(key_for(1), random_vector(6, rng));
  }
  const FeatureVector v = random_vector(6, rng);
  {
    FeatureCache writer(dir.path());
    writer.put(key_for(1), v);
  }
  EXPECT_EQ(reader.get(key_for(1)), v);
  FeatureCache(dir.path()).gc();
  EXPECT_EQ(reader.get(key_for(1)), v);
}

TEST(CacheKey, EveryComponentChangesTheDigest) {
  std::mt19937_64 rng(9);
  std::set<Digest> seen;
  for (int i = 0; i < 200; ++i) {
    const CacheKey base = key_for(i);
    CacheKey a = base, b = base, c = base, d = base;
    a.image_hash[rng() % 32] ^= static_cast<std::uint8_t>(1u << (rng() % 8));
    b.backbone_id += "x";
    c.view = ViewKind::Local;
    PreprocessConfig cfg;
    cfg.crop = CropSpec{0.3 + 0.001 * i};  // stays clear of the default 0.62
    d.preprocess_hash = preprocess_hash(cfg);
    for (const CacheKey& k : {base, a, b, c, d}) EXPECT_TRUE(seen.insert(k.digest()).second);
  }
}

TEST(CacheKey, PreprocessHashCoversEveryField) {
  const PreprocessConfig base;
  std::set<Digest> seen = {preprocess_hash(base)};
  PreprocessConfig c = base;
  c.input_size = 225;
  EXPECT_TRUE(seen.insert(preprocess_hash(c)).second);
  c = base;
  c.channel_means[2] += 1e-12;
  EXPECT_TRUE(seen.insert(preprocess_hash(c)).second);
  c = base;
  c.channel_stds[0] = 0.3;
  EXPECT_TRUE(seen.insert(preprocess_hash(c)).second);
  c = base;
  c.crop = CropSpec{0.61};
  EXPECT_TRUE(seen.insert(preprocess_hash(c)).second);
  EXPECT_EQ(preprocess_hash(PreprocessConfig{}), preprocess_hash(base));
}

TEST(ModelIo, DecisionValuesSurviveRoundTrip) {
  std::mt19937_64 rng(10);
  std::normal_distribution<double> n;
  FeatureMatrix x;
  std::vector<Label> labels;
  for (int i = 0; i < 40; ++i) {
    std::vector<double> row = {n(rng), n(rng), n(rng)};
    labels.push_back(row[0] + 0.5 * row[1] > 0 ? Label::High : Label::Low);
    x.push_row(std::span<const double>(row));
  }
  const SvmModel m = train_smo_default_gamma(x, labels, SmoConfig{}, {{"stub:2:3:16", ViewKind::Scene, 3}});
  TempDir dir;
  save_model(m, dir / "m.json");
  const SvmModel loaded = load_model(dir / "m.json");
  EXPECT_EQ(model_to_json(loaded), model_to_json(m));
  EXPECT_EQ(loaded.expected_provenance, m.expected_provenance);
  for (int i = 0; i < 100; ++i) {
    const std::vector<double> z = {3 * n(rng), 3 * n(rng), 3 * n(rng)};
    const double a = decision_value(m, z), b = decision_value(loaded, z);
    EXPECT_EQ(a, b);
  }
}

TEST(ModelIo, XorModelStillSeparatesAfterReload) {
  const SvmModel loaded = model_from_json(model_to_json(xor_model()));
  EXPECT_EQ(predict(loaded, std::vector<double>{0, 0}), Label::Low);
  EXPECT_EQ(predict(loaded, std::vector<double>{1, 1}), Label::Low);
  EXPECT_EQ(predict(loaded, std::vector<double>{1, 0}), Label::High);
  EXPECT_EQ(predict(loaded, std::vector<double>{0, 1}), Label::High);
}

TEST(ModelIo, UnknownVersionIsFormatError) {
  std::string text = model_to_json(xor_model());
  const auto pos = text.find("\"format_version\": 1");
  ASSERT_NE(pos, std::string::npos);
  text.replace(pos, 19, "\"format_version\": 999");
  EXPECT_THROW(model_from_json(text), FormatError);
}

TEST(ModelIo, MalformedInputIsFormatError) {
  EXPECT_THROW(model_from_json("{"), FormatError);
  EXPECT_THROW(model_from_json("[]"), FormatError);
  std::string text = model_to_json(xor_model());
  const auto pos = text.find("\"dual_coeffs\": [");
  ASSERT_NE(pos, std::string::npos);
  text.insert(pos + 16, "0.5, ");
  EXPECT_THROW(model_from_json(text), FormatError);
  TempDir dir;
  EXPECT_THROW(load_model(dir / "absent.json"), IoError);
}
