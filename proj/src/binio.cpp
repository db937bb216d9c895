#include "sbc/binio.hpp"

#include <bit>
#include <boost/crc.hpp>
#include <cstring>
#include <fstream>
#include <iterator>

#include "sbc/errors.hpp"

namespace sbc::binio {

std::uint32_t crc32(std::span<const std::uint8_t> bytes) {
  boost::crc_32_type c;
  c.process_bytes(bytes.data(), bytes.size());
  return c.checksum();
}

namespace {
template <class T>
void put_le(std::vector<std::uint8_t>& buf, T v) {
  for (std::size_t i = 0; i < sizeof(T); ++i) buf.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}
}  // namespace

void ByteWriter::u16(std::uint16_t v) { put_le(buf_, v); }
void ByteWriter::u32(std::uint32_t v) { put_le(buf_, v); }
void ByteWriter::u64(std::uint64_t v) { put_le(buf_, v); }
void ByteWriter::f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
void ByteWriter::f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }

void ByteWriter::str(const std::string& s) {
  u32(static_cast<std::uint32_t>(s.size()));
  buf_.insert(buf_.end(), s.begin(), s.end());
}

void ByteWriter::f64s(std::span<const double> v) {
  u64(v.size());
  for (double d : v) f64(d);
}

void ByteWriter::seal() { u32(crc32(buf_)); }

void ByteReader::need(std::size_t n) const {
  if (data_.size() - pos_ < n) {
    throw FormatError("unexpected end of data: need " + std::to_string(n) + " bytes, " +
                          std::to_string(data_.size() - pos_) + " left",
                      pos_);
  }
}

std::uint8_t ByteReader::u8() {
  need(1);
  return data_[pos_++];
}

std::uint16_t ByteReader::u16() {
  need(2);
  std::uint16_t v = static_cast<std::uint16_t>(data_[pos_] | (data_[pos_ + 1] << 8));
  pos_ += 2;
  return v;
}

std::uint32_t ByteReader::u32() {
  need(4);
  std::uint32_t v = 0;
  for (int i = 3; i >= 0; --i) v = (v << 8) | data_[pos_ + i];
  pos_ += 4;
  return v;
}

std::uint64_t ByteReader::u64() {
  need(8);
  std::uint64_t v = 0;
  for (int i = 7; i >= 0; --i) v = (v << 8) | data_[pos_ + i];
  pos_ += 8;
  return v;
}

float ByteReader::f32() { return std::bit_cast<float>(u32()); }
double ByteReader::f64() { return std::bit_cast<double>(u64()); }

std::string ByteReader::str() {
  const std::uint32_t n = u32();
  need(n);
  std::string s(reinterpret_cast<const char*>(data_.data() + pos_), n);
  pos_ += n;
  return s;
}

std::vector<double> ByteReader::f64s() {
  const std::size_t at = pos_;
  const std::uint64_t n = u64();
  if (n > remaining() / 8) throw FormatError("array length " + std::to_string(n) + " exceeds data", at);
  std::vector<double> v(n);
  for (auto& d : v) d = f64();
  return v;
}

std::span<const std::uint8_t> ByteReader::bytes(std::size_t n) {
  need(n);
  auto s = data_.subspan(pos_, n);
  pos_ += n;
  return s;
}

void ByteReader::verify_seal() {
  if (data_.size() < 4) throw FormatError("too short for checksum", data_.size());
  const std::size_t end = data_.size() - 4;
  std::uint32_t stored = 0;
  for (int i = 3; i >= 0; --i) stored = (stored << 8) | data_[end + i];
  if (stored != crc32(data_.first(end))) throw FormatError("checksum mismatch", end);
  data_ = data_.first(end);
}

void ByteReader::expect_end() const {
  if (pos_ != data_.size()) throw FormatError(std::to_string(remaining()) + " trailing bytes", pos_);
}

void BitWriter::put(std::uint64_t value, unsigned bits) {
  for (unsigned i = 0; i < bits; ++i, ++bits_) {
    if (bits_ % 8 == 0) out_.push_back(0);
    if ((value >> i) & 1u) out_.back() |= static_cast<std::uint8_t>(1u << (bits_ % 8));
  }
}

std::vector<std::uint8_t> BitWriter::finish() {
  bits_ = 0;
  return std::move(out_);
}

std::uint64_t BitReader::get(unsigned bits) {
  std::uint64_t v = 0;
  for (unsigned i = 0; i < bits; ++i, ++bit_) {
    const std::size_t byte = bit_ / 8;
    if (byte >= data_.size()) throw FormatError("packed field overruns its section", base_ + byte);
    if ((data_[byte] >> (bit_ % 8)) & 1u) v |= std::uint64_t{1} << i;
  }
  return v;
}

unsigned index_bits(std::size_t n) {
  unsigned b = 1;
  while (b < 64 && (std::size_t{1} << b) < n) ++b;
  return b;
}

std::vector<std::uint8_t> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file(const std::string& path, std::span<const std::uint8_t> bytes) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("write failed: " + path);
}

}  // namespace sbc::binio
