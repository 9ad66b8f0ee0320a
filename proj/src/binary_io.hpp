#pragma once

// Little-endian primitive encoding shared by the embedding and checkpoint
// formats. Headers are assembled in memory so they can be checksummed.

#include <algorithm>
#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <span>
#include <string>
#include <string_view>
#include <type_traits>
#include <vector>

#include <zlib.h>

#include "llmembed/error.hpp"

namespace llmembed::detail {

template <typename T>
T byteswap_if_big(T value) {
  static_assert(std::is_trivially_copyable_v<T>);
  if constexpr (std::endian::native == std::endian::big) {
    auto bytes = std::bit_cast<std::array<unsigned char, sizeof(T)>>(value);
    std::reverse(bytes.begin(), bytes.end());
    return std::bit_cast<T>(bytes);
  } else {
    return value;
  }
}

class ByteWriter {
 public:
  template <typename T>
  void put(T value) {
    value = byteswap_if_big(value);
    const auto* p = reinterpret_cast<const unsigned char*>(&value);
    bytes_.insert(bytes_.end(), p, p + sizeof(T));
  }

  void put_bytes(std::string_view raw) { bytes_.insert(bytes_.end(), raw.begin(), raw.end()); }

  void put_string16(std::string_view s) {
    if (s.size() > 0xFFFF) {
      throw Error(ErrorCode::validation, "string longer than 65535 bytes: " + std::string(s.substr(0, 32)) + "...");
    }
    put<std::uint16_t>(static_cast<std::uint16_t>(s.size()));
    put_bytes(s);
  }

  template <typename T>
  void put_array(std::span<const T> values) {
    if constexpr (std::endian::native == std::endian::little) {
      const auto* p = reinterpret_cast<const unsigned char*>(values.data());
      bytes_.insert(bytes_.end(), p, p + values.size_bytes());
    } else {
      for (T v : values) put(v);
    }
  }

  /// Appends the CRC-32 of everything written so far.
  void seal() { put<std::uint32_t>(crc32_of(bytes_)); }

  static std::uint32_t crc32_of(std::span<const char> data) {
    return static_cast<std::uint32_t>(
        ::crc32(0L, reinterpret_cast<const Bytef*>(data.data()), static_cast<uInt>(data.size())));
  }

  const std::vector<char>& bytes() const { return bytes_; }

 private:
  std::vector<char> bytes_;
};

/// Cursor over an in-memory buffer. Running past the end is a corruption
/// error because every reader knows its exact layout up front.
class ByteReader {
 public:
  explicit ByteReader(std::span<const char> data) : data_(data) {}

  template <typename T>
  T get() {
    need(sizeof(T));
    T value;
    std::memcpy(&value, data_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return byteswap_if_big(value);
  }

  std::string get_bytes(std::size_t n) {
    need(n);
    std::string out(data_.data() + pos_, n);
    pos_ += n;
    return out;
  }

  std::string get_string16() { return get_bytes(get<std::uint16_t>()); }

  template <typename T>
  void get_array(std::span<T> out) {
    need(out.size_bytes());
    std::memcpy(out.data(), data_.data() + pos_, out.size_bytes());
    pos_ += out.size_bytes();
    if constexpr (std::endian::native == std::endian::big) {
      for (T& v : out) v = byteswap_if_big(v);
    }
  }

  /// Reads a trailing CRC-32 and compares it against the bytes consumed so far.
  void verify_seal(std::string_view what) {
    const std::uint32_t expected = ByteWriter::crc32_of(data_.first(pos_));
    const auto stored = get<std::uint32_t>();
    if (stored != expected) {
      throw Error(ErrorCode::corruption, std::string(what) + " header checksum mismatch");
    }
  }

  std::size_t position() const { return pos_; }
  std::size_t remaining() const { return data_.size() - pos_; }

 private:
  void need(std::size_t n) const {
    if (data_.size() - pos_ < n) {
      throw Error(ErrorCode::corruption, "unexpected end of data");
    }
  }

  std::span<const char> data_;
  std::size_t pos_ = 0;
};

}  // namespace llmembed::detail
