#include "aescomp/store.hpp"

#include <fcntl.h>
#include <sys/file.h>
#include <sys/stat.h>
#include <unistd.h>

#include <algorithm>
#include <bit>
#include <cerrno>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <random>
#include <set>
#include <sstream>

#include <json.hpp>

#include "aescomp/error.hpp"
#include "aescomp/log.hpp"

namespace aescomp {

namespace {

using json = nlohmann::json;

constexpr char kMagic[4] = {'A', 'E', 'F', 'C'};
constexpr const char* kIndexName = "index.jsonl";
constexpr const char* kSegmentPrefix = "seg-";
constexpr const char* kSegmentSuffix = ".aefc";

void put_u16(std::vector<std::uint8_t>& out, std::uint16_t v) {
  out.push_back(static_cast<std::uint8_t>(v));
  out.push_back(static_cast<std::uint8_t>(v >> 8));
}

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

std::uint32_t get_u32(const std::uint8_t* p) {
  return static_cast<std::uint32_t>(p[0]) | static_cast<std::uint32_t>(p[1]) << 8 |
         static_cast<std::uint32_t>(p[2]) << 16 | static_cast<std::uint32_t>(p[3]) << 24;
}

std::string errno_text() { return std::strerror(errno); }

/// Closes a descriptor on scope exit.
struct FdGuard {
  int fd = -1;
  ~FdGuard() {
    if (fd >= 0) ::close(fd);
  }
};

/// flock() for the lifetime of the object.
struct FileLock {
  int fd;
  FileLock(int fd_, int op) : fd(fd_) {
    while (::flock(fd, op) != 0) {
      if (errno != EINTR) throw CacheError("cannot lock cache index: " + errno_text());
    }
  }
  ~FileLock() { ::flock(fd, LOCK_UN); }
};

void write_all(int fd, const std::uint8_t* data, std::size_t size, const std::string& what) {
  while (size > 0) {
    const ssize_t n = ::write(fd, data, size);
    if (n < 0) {
      if (errno == EINTR) continue;
      throw CacheError("write to " + what + " failed: " + errno_text());
    }
    data += n;
    size -= static_cast<std::size_t>(n);
  }
}

bool read_exact_at(int fd, std::uint8_t* data, std::size_t size, std::uint64_t offset) {
  while (size > 0) {
    const ssize_t n = ::pread(fd, data, size, static_cast<off_t>(offset));
    if (n < 0 && errno == EINTR) continue;
    if (n <= 0) return false;
    data += n;
    size -= static_cast<std::size_t>(n);
    offset += static_cast<std::uint64_t>(n);
  }
  return true;
}

std::string random_hex(std::size_t bytes) {
  std::random_device rd;
  std::vector<std::uint8_t> raw(bytes);
  for (auto& b : raw) b = static_cast<std::uint8_t>(rd());
  return to_hex(raw);
}

bool is_segment_name(const std::string& name) {
  return name.starts_with(kSegmentPrefix) && name.ends_with(kSegmentSuffix) &&
         name.find('/') == std::string::npos;
}

struct IndexEntry {
  Digest digest{};
  std::string segment;
  std::uint64_t offset = 0;
};

std::optional<IndexEntry> parse_index_line(const std::string& line) {
  try {
    const json j = json::parse(line);
    IndexEntry e;
    e.digest = digest_from_hex(j.at("key_hash").get<std::string>());
    e.segment = j.at("segment").get<std::string>();
    e.offset = j.at("offset").get<std::uint64_t>();
    if (!is_segment_name(e.segment)) return std::nullopt;
    return e;
  } catch (const std::exception&) {
    return std::nullopt;
  }
}

std::string index_line(const Digest& digest, const std::string& segment, std::uint64_t offset) {
  json j;
  j["key_hash"] = to_hex(digest);
  j["segment"] = segment;
  j["offset"] = offset;
  return j.dump() + "\n";
}

std::string fmt_real(double v) {
  if (!std::isfinite(v)) throw FormatError("model contains a non-finite value");
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

void append_reals(std::string& out, std::span<const double> values) {
  out += '[';
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (i) out += ',';
    out += fmt_real(values[i]);
  }
  out += ']';
}

std::vector<double> reals_from(const json& j, const char* what) {
  if (!j.is_array()) throw FormatError(std::string(what) + " must be an array");
  std::vector<double> out;
  out.reserve(j.size());
  for (const auto& v : j) {
    if (!v.is_number()) throw FormatError(std::string(what) + " must hold numbers");
    out.push_back(v.get<double>());
  }
  return out;
}

}  // namespace

// Keys and records

Digest CacheKey::digest() const {
  Sha256Builder b;
  b.add_field("aescomp-cache-key-v1");
  b.add(image_hash);
  b.add_field(backbone_id);
  b.add_field(to_string(view));
  b.add(preprocess_hash);
  return b.finish();
}

Digest preprocess_hash(const PreprocessConfig& cfg) {
  Sha256Builder b;
  b.add_field("aescomp-preprocess-v1");
  b.add_field(std::to_string(cfg.input_size));
  for (double m : cfg.channel_means) b.add_field(fmt_real(m));
  for (double s : cfg.channel_stds) b.add_field(fmt_real(s));
  b.add_field(fmt_real(cfg.crop.ratio()));
  return b.finish();
}

std::vector<std::uint8_t> encode_record(const Digest& key_digest, std::span<const float> values) {
  if (values.size() > UINT32_MAX / 4) throw CacheError("feature vector too large for a record");
  std::vector<std::uint8_t> out;
  out.reserve(kRecordHeaderSize + 4 * values.size() + 4);
  out.insert(out.end(), std::begin(kMagic), std::end(kMagic));
  put_u16(out, kRecordVersion);
  out.insert(out.end(), key_digest.begin(), key_digest.end());
  put_u32(out, static_cast<std::uint32_t>(values.size()));
  for (float v : values) put_u32(out, std::bit_cast<std::uint32_t>(v));
  put_u32(out, crc32c(out));
  return out;
}

DecodedRecord decode_record(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < kRecordHeaderSize + 4) throw CacheError("record truncated");
  if (!std::equal(std::begin(kMagic), std::end(kMagic), bytes.begin())) throw CacheError("bad record magic");
  const auto version = static_cast<std::uint16_t>(bytes[4] | bytes[5] << 8);
  if (version != kRecordVersion) throw CacheError("unsupported record version " + std::to_string(version));
  const std::uint32_t dim = get_u32(bytes.data() + kRecordHeaderSize - 4);
  const std::size_t total = kRecordHeaderSize + 4 * static_cast<std::size_t>(dim) + 4;
  if (bytes.size() != total) throw CacheError("record length does not match its dimension");
  if (crc32c(bytes.first(total - 4)) != get_u32(bytes.data() + total - 4)) throw CacheError("record checksum mismatch");
  DecodedRecord rec;
  std::copy_n(bytes.begin() + 6, 32, rec.key_digest.begin());
  rec.values.resize(dim);
  for (std::uint32_t i = 0; i < dim; ++i) {
    rec.values[i] = std::bit_cast<float>(get_u32(bytes.data() + kRecordHeaderSize + 4 * i));
  }
  return rec;
}

// FeatureCache

struct FeatureCache::Segment {
  int fd = -1;
  ~Segment() {
    if (fd >= 0) ::close(fd);
  }
};

FeatureCache::FeatureCache(std::filesystem::path root) : root_(std::move(root)) {
  std::error_code ec;
  std::filesystem::create_directories(root_, ec);
  if (ec || !std::filesystem::is_directory(root_)) {
    throw CacheError("cannot create cache directory " + root_.string());
  }
  index_path_ = root_ / kIndexName;
  std::lock_guard lock(mutex_);
  refresh_locked();
}

FeatureCache::~FeatureCache() {
  if (writer_fd_ >= 0) ::close(writer_fd_);
}

void FeatureCache::refresh_locked() {
  const int fd = ::open(index_path_.c_str(), O_RDONLY | O_CLOEXEC);
  if (fd < 0) {
    if (errno == ENOENT) return;
    throw CacheError("cannot open cache index: " + errno_text());
  }
  FdGuard guard{fd};
  FileLock shared(fd, LOCK_SH);
  struct stat st{};
  if (::fstat(fd, &st) != 0) throw CacheError("cannot stat cache index: " + errno_text());
  const auto size = static_cast<std::uint64_t>(st.st_size);
  // gc replaces the file wholesale; start over when that happened.
  const auto inode = static_cast<std::uint64_t>(st.st_ino);
  if (inode != index_inode_ || size < index_read_pos_) {
    index_.clear();
    index_read_pos_ = 0;
    index_inode_ = inode;
  }
  if (size == index_read_pos_) return;

  std::string buf(size - index_read_pos_, '\0');
  if (!read_exact_at(fd, reinterpret_cast<std::uint8_t*>(buf.data()), buf.size(), index_read_pos_)) {
    throw CacheError("cannot read cache index");
  }
  std::size_t consumed = 0;
  while (true) {
    const auto nl = buf.find('\n', consumed);
    if (nl == std::string::npos) break;  // partial trailing line: read it next time
    const std::string line = buf.substr(consumed, nl - consumed);
    consumed = nl + 1;
    if (line.empty()) continue;
    if (auto e = parse_index_line(line)) {
      index_[e->digest] = Location{e->segment, e->offset};
    } else {
      warn("cache index " + index_path_.string() + ": skipping malformed line");
    }
  }
  index_read_pos_ += consumed;
}

FeatureCache::Segment& FeatureCache::segment_locked(const std::string& name) {
  auto it = segments_.find(name);
  if (it != segments_.end()) return *it->second;
  auto seg = std::make_unique<Segment>();
  seg->fd = ::open((root_ / name).c_str(), O_RDONLY | O_CLOEXEC);
  if (seg->fd < 0) throw CacheError("cannot open segment " + name + ": " + errno_text());
  return *segments_.emplace(name, std::move(seg)).first->second;
}

std::optional<std::vector<float>> FeatureCache::read_locked(const Digest& digest, const Location& loc) {
  try {
    Segment& seg = segment_locked(loc.segment);
    std::vector<std::uint8_t> bytes(kRecordHeaderSize);
    if (!read_exact_at(seg.fd, bytes.data(), bytes.size(), loc.offset)) throw CacheError("record truncated");
    const std::uint32_t dim = get_u32(bytes.data() + kRecordHeaderSize - 4);
    bytes.resize(kRecordHeaderSize + 4 * static_cast<std::size_t>(dim) + 4);
    if (!read_exact_at(seg.fd, bytes.data() + kRecordHeaderSize, bytes.size() - kRecordHeaderSize,
                       loc.offset + kRecordHeaderSize)) {
      throw CacheError("record truncated");
    }
    DecodedRecord rec = decode_record(bytes);
    if (rec.key_digest != digest) throw CacheError("record belongs to another key");
    return std::move(rec.values);
  } catch (const CacheError& e) {
    ++stats_.corrupt;
    warn("feature cache: " + loc.segment + "@" + std::to_string(loc.offset) + ": " + e.what() +
         "; recomputing");
    return std::nullopt;
  }
}

void FeatureCache::open_writer_locked() {
  if (writer_fd_ >= 0) return;
  writer_name_ = std::string(kSegmentPrefix) + std::to_string(::getpid()) + "-" + random_hex(8) + kSegmentSuffix;
  writer_fd_ = ::open((root_ / writer_name_).c_str(), O_WRONLY | O_CREAT | O_EXCL | O_APPEND | O_CLOEXEC, 0644);
  if (writer_fd_ < 0) throw CacheError("cannot create segment " + writer_name_ + ": " + errno_text());
  writer_size_ = 0;
}

void FeatureCache::put(const CacheKey& key, const FeatureVector& vector) {
  const Digest digest = key.digest();
  std::lock_guard lock(mutex_);
  refresh_locked();
  if (auto it = index_.find(digest); it != index_.end()) {
    const Location loc = it->second;
    if (auto existing = read_locked(digest, loc)) {
      const auto values = vector.values();
      if (existing->size() == values.size() &&
          std::memcmp(existing->data(), values.data(), values.size() * sizeof(float)) == 0) {
        return;
      }
    }
  }

  const auto record = encode_record(digest, vector.values());
  open_writer_locked();
  const std::uint64_t offset = writer_size_;
  write_all(writer_fd_, record.data(), record.size(), writer_name_);
  writer_size_ += record.size();
  if (::fdatasync(writer_fd_) != 0) throw CacheError("cannot sync segment: " + errno_text());

  const std::string line = index_line(digest, writer_name_, offset);
  const int fd = ::open(index_path_.c_str(), O_WRONLY | O_CREAT | O_APPEND | O_CLOEXEC, 0644);
  if (fd < 0) throw CacheError("cannot open cache index: " + errno_text());
  FdGuard guard{fd};
  {
    FileLock exclusive(fd, LOCK_EX);
    write_all(fd, reinterpret_cast<const std::uint8_t*>(line.data()), line.size(), kIndexName);
    if (::fdatasync(fd) != 0) throw CacheError("cannot sync cache index: " + errno_text());
  }
  index_[digest] = Location{writer_name_, offset};
  ++stats_.puts;
}

std::optional<FeatureVector> FeatureCache::get(const CacheKey& key) {
  const Digest digest = key.digest();
  std::lock_guard lock(mutex_);
  auto it = index_.find(digest);
  if (it == index_.end()) {
    refresh_locked();
    it = index_.find(digest);
  }
  if (it != index_.end()) {
    if (auto values = read_locked(digest, it->second)) {
      try {
        FeatureVector fv(key.backbone_id, key.view, std::move(*values));
        ++stats_.hits;
        return fv;
      } catch (const NumericsError&) {
        ++stats_.corrupt;
        warn("feature cache: record holds non-finite values; recomputing");
      }
    }
  }
  ++stats_.misses;
  return std::nullopt;
}

CacheStats FeatureCache::stats() const {
  std::lock_guard lock(mutex_);
  return stats_;
}

std::size_t FeatureCache::size() const {
  std::lock_guard lock(mutex_);
  return index_.size();
}

GcReport FeatureCache::gc() {
  std::lock_guard lock(mutex_);
  GcReport report;
  const int fd = ::open(index_path_.c_str(), O_RDWR | O_CREAT | O_CLOEXEC, 0644);
  if (fd < 0) throw CacheError("cannot open cache index: " + errno_text());
  FdGuard guard{fd};
  FileLock exclusive(fd, LOCK_EX);

  std::string text;
  {
    std::ifstream in(index_path_, std::ios::binary);
    std::ostringstream buf;
    buf << in.rdbuf();
    text = buf.str();
  }
  std::map<Digest, Location> latest;
  std::size_t total_lines = 0;
  std::istringstream lines(text);
  std::string line;
  while (std::getline(lines, line)) {
    if (line.empty()) continue;
    ++total_lines;
    if (auto e = parse_index_line(line)) latest[e->digest] = Location{e->segment, e->offset};
  }

  std::map<Digest, Location> live;
  for (const auto& [digest, loc] : latest) {
    if (std::filesystem::exists(root_ / loc.segment) && read_locked(digest, loc)) live.emplace(digest, loc);
  }

  std::string out;
  for (const auto& [digest, loc] : live) out += index_line(digest, loc.segment, loc.offset);
  const auto tmp = root_ / (std::string(kIndexName) + ".tmp-" + random_hex(4));
  {
    const int tfd = ::open(tmp.c_str(), O_WRONLY | O_CREAT | O_TRUNC | O_CLOEXEC, 0644);
    if (tfd < 0) throw CacheError("cannot write " + tmp.string() + ": " + errno_text());
    FdGuard tguard{tfd};
    write_all(tfd, reinterpret_cast<const std::uint8_t*>(out.data()), out.size(), tmp.string());
    if (::fsync(tfd) != 0) throw CacheError("cannot sync " + tmp.string() + ": " + errno_text());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, index_path_, ec);
  if (ec) throw CacheError("cannot replace cache index: " + ec.message());

  std::set<std::string> referenced;
  for (const auto& [digest, loc] : live) referenced.insert(loc.segment);
  for (const auto& entry : std::filesystem::directory_iterator(root_)) {
    const std::string name = entry.path().filename().string();
    if (!is_segment_name(name) || referenced.count(name) || name == writer_name_) continue;
    segments_.erase(name);
    if (std::filesystem::remove(entry.path(), ec)) ++report.removed_segments;
  }

  index_ = live;
  index_read_pos_ = out.size();
  struct stat st{};
  index_inode_ = ::stat(index_path_.c_str(), &st) == 0 ? static_cast<std::uint64_t>(st.st_ino) : 0;
  report.live_records = live.size();
  report.dropped_entries = total_lines - live.size();
  return report;
}

// Models

std::string model_to_json(const SvmModel& model) {
  std::string out = "{\n";
  out += "  \"format_version\": " + std::to_string(SvmModel::kFormatVersion) + ",\n";
  out += "  \"gamma\": " + fmt_real(model.kernel.gamma) + ",\n";
  out += "  \"bias\": " + fmt_real(model.bias) + ",\n";
  out += "  \"C\": " + fmt_real(model.C) + ",\n";
  out += "  \"converged\": " + std::string(model.converged ? "true" : "false") + ",\n";
  out += "  \"label_map\": {\"+1\": \"high\", \"-1\": \"low\"},\n";
  out += "  \"provenance\": [";
  for (std::size_t i = 0; i < model.expected_provenance.size(); ++i) {
    const auto& p = model.expected_provenance[i];
    json entry;
    entry["backbone_id"] = p.backbone_id;
    entry["view"] = std::string(to_string(p.view));
    entry["dim"] = p.dim;
    out += (i ? ", " : "") + entry.dump();
  }
  out += "],\n";
  out += "  \"standardizer\": {\"means\": ";
  append_reals(out, model.standardizer.means);
  out += ", \"stds\": ";
  append_reals(out, model.standardizer.stds);
  out += "},\n";
  out += "  \"dual_coeffs\": ";
  append_reals(out, model.dual_coeffs);
  out += ",\n  \"support_vectors\": [";
  for (std::size_t i = 0; i < model.support_vectors.size(); ++i) {
    out += i ? ",\n    " : "\n    ";
    append_reals(out, model.support_vectors[i]);
  }
  out += model.support_vectors.empty() ? "]\n" : "\n  ]\n";
  out += "}\n";
  return out;
}

void save_model(const SvmModel& model, const std::filesystem::path& path) {
  const std::string text = model_to_json(model);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write model " + path.string());
  out << text;
  if (!out.flush()) throw IoError("cannot write model " + path.string());
}

SvmModel model_from_json(std::string_view text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw FormatError(std::string("model is not valid JSON: ") + e.what());
  }
  if (!j.is_object()) throw FormatError("model must be a JSON object");
  try {
    const json& version = j.at("format_version");
    if (!version.is_number_integer() || version.get<std::int64_t>() != SvmModel::kFormatVersion) {
      throw FormatError("unsupported model format_version " + version.dump());
    }
    SvmModel m;
    if (!j.at("gamma").is_number() || !j.at("bias").is_number() || !j.at("C").is_number()) {
      throw FormatError("gamma, bias and C must be numbers");
    }
    m.kernel.gamma = j.at("gamma").get<double>();
    m.bias = j.at("bias").get<double>();
    m.C = j.at("C").get<double>();
    m.converged = j.at("converged").get<bool>();
    if (j.contains("label_map")) {
      const json& lm = j.at("label_map");
      if (lm.value("+1", "") != "high" || lm.value("-1", "") != "low") {
        throw FormatError("label_map must map +1 to high and -1 to low");
      }
    }
    for (const json& p : j.at("provenance")) {
      ProvenanceEntry e;
      e.backbone_id = p.at("backbone_id").get<std::string>();
      e.view = parse_view(p.at("view").get<std::string>());
      e.dim = p.at("dim").get<std::size_t>();
      m.expected_provenance.push_back(std::move(e));
    }
    m.standardizer.means = reals_from(j.at("standardizer").at("means"), "standardizer.means");
    m.standardizer.stds = reals_from(j.at("standardizer").at("stds"), "standardizer.stds");
    m.dual_coeffs = reals_from(j.at("dual_coeffs"), "dual_coeffs");
    const json& svs = j.at("support_vectors");
    if (!svs.is_array()) throw FormatError("support_vectors must be an array");
    for (const json& sv : svs) m.support_vectors.push_back(reals_from(sv, "support_vectors"));

    const std::size_t dim = m.standardizer.means.size();
    if (m.standardizer.stds.size() != dim) throw FormatError("standardizer means and stds differ in length");
    if (m.dual_coeffs.size() != m.support_vectors.size()) {
      throw FormatError("dual_coeffs and support_vectors differ in length");
    }
    for (const auto& sv : m.support_vectors) {
      if (sv.size() != dim) throw FormatError("support vector length differs from the standardizer");
    }
    std::size_t prov_dim = 0;
    for (const auto& p : m.expected_provenance) prov_dim += p.dim;
    if (!m.expected_provenance.empty() && prov_dim != dim) {
      throw FormatError("provenance dims do not add up to the model dimension");
    }
    if (!(m.kernel.gamma > 0.0) || !std::isfinite(m.kernel.gamma)) throw FormatError("gamma must be positive");
    if (!(m.C > 0.0)) throw FormatError("C must be positive");
    for (double s : m.standardizer.stds) {
      if (!(s > 0.0)) throw FormatError("standardizer stds must be positive");
    }
    return m;
  } catch (const json::exception& e) {
    throw FormatError(std::string("malformed model: ") + e.what());
  } catch (const InvalidArgument& e) {
    throw FormatError(std::string("malformed model: ") + e.what());
  }
}

SvmModel load_model(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read model " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  try {
    return model_from_json(buf.str());
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

}  // namespace aescomp
