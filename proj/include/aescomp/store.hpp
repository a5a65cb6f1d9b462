#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "aescomp/backbone.hpp"
#include "aescomp/hash.hpp"
#include "aescomp/image.hpp"
#include "aescomp/svm.hpp"
#include "aescomp/types.hpp"

namespace aescomp {

/// Everything that determines an extracted feature vector.
struct CacheKey {
  /// SHA-256 of the image file bytes.
  Digest image_hash{};
  std::string backbone_id;
  ViewKind view = ViewKind::Global;
  Digest preprocess_hash{};

  /// Digest identifying the key in records and the index.
  Digest digest() const;
  friend bool operator==(const CacheKey&, const CacheKey&) = default;
};

/// Hash of every field of a preprocessing config.
Digest preprocess_hash(const PreprocessConfig& cfg);

/// Feature record: "AEFC", u16 version, 32-byte key digest, u32 dim,
/// dim float32 values, CRC-32C of all preceding bytes. Little endian.
inline constexpr std::uint16_t kRecordVersion = 1;
inline constexpr std::size_t kRecordHeaderSize = 4 + 2 + 32 + 4;
std::vector<std::uint8_t> encode_record(const Digest& key_digest, std::span<const float> values);

struct DecodedRecord {
  Digest key_digest{};
  std::vector<float> values;
};
/// Throws CacheError on a bad magic, version, length or checksum.
DecodedRecord decode_record(std::span<const std::uint8_t> bytes);

struct CacheStats {
  std::uint64_t hits = 0;
  std::uint64_t misses = 0;
  std::uint64_t puts = 0;
  std::uint64_t corrupt = 0;
};

struct GcReport {
  std::size_t live_records = 0;
  std::size_t dropped_entries = 0;
  std::size_t removed_segments = 0;
};

/// Append-only on-disk cache of feature vectors.
///
/// Each process appends records to its own segment file and makes them
/// durable before publishing `{key_hash, segment, offset}` to `index.jsonl`
/// under an exclusive file lock. The last index line for a key wins.
/// Instances are safe for concurrent use by many threads.
class FeatureCache {
 public:
  /// Creates the root directory if needed. Throws CacheError if it cannot.
  explicit FeatureCache(std::filesystem::path root);
  ~FeatureCache();
  FeatureCache(const FeatureCache&) = delete;
  FeatureCache& operator=(const FeatureCache&) = delete;

  const std::filesystem::path& root() const { return root_; }

  /// Stores a vector. Storing values equal to those already held for the key
  /// writes nothing. Throws CacheError on I/O failure.
  void put(const CacheKey& key, const FeatureVector& vector);
  /// Cached vector or nullopt. A record failing its checksum is reported
  /// through warn() and treated as a miss.
  std::optional<FeatureVector> get(const CacheKey& key);

  CacheStats stats() const;
  std::size_t size() const;

  /// Rewrites the index to one verified entry per key and deletes segment
  /// files no entry references. Must not run while other processes write.
  GcReport gc();

 private:
  struct Location {
    std::string segment;
    std::uint64_t offset = 0;
  };
  struct Segment;

  void refresh_locked();
  std::optional<std::vector<float>> read_locked(const Digest& digest, const Location& loc);
  Segment& segment_locked(const std::string& name);
  void open_writer_locked();

  std::filesystem::path root_;
  std::filesystem::path index_path_;
  mutable std::mutex mutex_;
  std::map<Digest, Location> index_;
  std::uint64_t index_read_pos_ = 0;
  std::uint64_t index_inode_ = 0;
  std::map<std::string, std::unique_ptr<Segment>> segments_;
  std::string writer_name_;
  int writer_fd_ = -1;
  std::uint64_t writer_size_ = 0;
  CacheStats stats_;
};

/// Writes the model as JSON with 17 significant digits per real.
std::string model_to_json(const SvmModel& model);
void save_model(const SvmModel& model, const std::filesystem::path& path);
/// Throws FormatError on malformed JSON or a format_version other than 1,
/// IoError if the file cannot be read.
SvmModel model_from_json(std::string_view text);
SvmModel load_model(const std::filesystem::path& path);

}  // namespace aescomp
