#pragma once

// Little-endian byte streams with offset-tagged errors, LSB-first bit packing
// and CRC32 for the checkpoint and compressed-model formats.

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace sbc::binio {

std::uint32_t crc32(std::span<const std::uint8_t> bytes);

class ByteWriter {
 public:
  void u8(std::uint8_t v) { buf_.push_back(v); }
  void u16(std::uint16_t v);
  void u32(std::uint32_t v);
  void u64(std::uint64_t v);
  void f32(float v);
  void f64(double v);
  void str(const std::string& s);
  void f64s(std::span<const double> v);
  void bytes(std::span<const std::uint8_t> b) { buf_.insert(buf_.end(), b.begin(), b.end()); }
  /// Appends CRC32 of everything written so far.
  void seal();
  std::size_t size() const { return buf_.size(); }
  const std::vector<std::uint8_t>& buffer() const { return buf_; }

 private:
  std::vector<std::uint8_t> buf_;
};

class ByteReader {
 public:
  explicit ByteReader(std::span<const std::uint8_t> data) : data_(data) {}
  std::uint8_t u8();
  std::uint16_t u16();
  std::uint32_t u32();
  std::uint64_t u64();
  float f32();
  double f64();
  std::string str();
  std::vector<double> f64s();
  std::span<const std::uint8_t> bytes(std::size_t n);
  std::size_t offset() const { return pos_; }
  std::size_t remaining() const { return data_.size() - pos_; }
  /// Checks the trailing CRC32 and shrinks the readable range to the payload.
  void verify_seal();
  /// FormatError unless every payload byte was consumed.
  void expect_end() const;

 private:
  void need(std::size_t n) const;
  std::span<const std::uint8_t> data_;
  std::size_t pos_ = 0;
};

class BitWriter {
 public:
  void put(std::uint64_t value, unsigned bits);
  /// Pads to a byte boundary and returns the bytes.
  std::vector<std::uint8_t> finish();
  std::size_t bit_count() const { return bits_; }

 private:
  std::vector<std::uint8_t> out_;
  std::size_t bits_ = 0;
};

class BitReader {
 public:
  BitReader(std::span<const std::uint8_t> data, std::size_t base_offset = 0) : data_(data), base_(base_offset) {}
  std::uint64_t get(unsigned bits);

 private:
  std::span<const std::uint8_t> data_;
  std::size_t base_;
  std::size_t bit_ = 0;
};

/// Bytes needed for `count` values of `bits` each, padded to a byte.
inline std::size_t packed_bytes(std::size_t count, unsigned bits) { return (count * bits + 7) / 8; }

/// ceil(log2(n)) with a floor of 1 bit, the width needed to index n slots.
unsigned index_bits(std::size_t n);

std::vector<std::uint8_t> read_file(const std::string& path);
void write_file(const std::string& path, std::span<const std::uint8_t> bytes);

}  // namespace sbc::binio
