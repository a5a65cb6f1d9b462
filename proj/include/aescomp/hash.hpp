#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>

namespace aescomp {

using Digest = std::array<std::uint8_t, 32>;

/// SHA-256 of a byte range.
Digest sha256(std::span<const std::uint8_t> bytes);
Digest sha256(std::string_view text);

/// Incremental SHA-256 for multi-part keys.
class Sha256Builder {
 public:
  Sha256Builder();
  ~Sha256Builder();
  Sha256Builder(const Sha256Builder&) = delete;
  Sha256Builder& operator=(const Sha256Builder&) = delete;

  Sha256Builder& add(std::span<const std::uint8_t> bytes);
  Sha256Builder& add(std::string_view text);
  /// Length-prefixed, so ("ab","c") and ("a","bc") hash differently.
  Sha256Builder& add_field(std::string_view text);
  Digest finish();

 private:
  void* ctx_;
};

std::string to_hex(std::span<const std::uint8_t> bytes);
/// Throws FormatError on malformed input.
Digest digest_from_hex(std::string_view hex);

/// CRC-32C (Castagnoli), as used in the feature record trailer.
std::uint32_t crc32c(std::span<const std::uint8_t> bytes);

}  // namespace aescomp
