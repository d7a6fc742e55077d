#include "advr/binio.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <vector>

#include "advr/errors.hpp"

namespace advr::binio {

namespace {

template <typename T>
T to_little(T v) {
  if constexpr (std::endian::native == std::endian::big) {
    auto bytes = std::bit_cast<std::array<unsigned char, sizeof(T)>>(v);
    std::reverse(bytes.begin(), bytes.end());
    return std::bit_cast<T>(bytes);
  }
  return v;
}

constexpr std::size_t kMaxRank = 8;
constexpr std::uint64_t kMaxElements = std::uint64_t{1} << 32;

}  // namespace

void Writer::raw(const void* p, std::size_t n) {
  out_.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
  if (!out_) throw DataError("write failed");
}

void Writer::magic(std::string_view tag) {
  if (tag.size() != 8) throw InvalidArgument("magic tags are 8 bytes");
  raw(tag.data(), tag.size());
}

void Writer::u8(std::uint8_t v) { raw(&v, 1); }

void Writer::u32(std::uint32_t v) {
  v = to_little(v);
  raw(&v, sizeof v);
}

void Writer::u64(std::uint64_t v) {
  v = to_little(v);
  raw(&v, sizeof v);
}

void Writer::f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }

void Writer::str(std::string_view s) {
  u32(static_cast<std::uint32_t>(s.size()));
  raw(s.data(), s.size());
}

void Writer::f64s(std::span<const double> values) {
  if constexpr (std::endian::native == std::endian::little) {
    raw(values.data(), values.size_bytes());
  } else {
    for (double v : values) f64(v);
  }
}

void Writer::tensor(const Tensor& t) {
  u32(static_cast<std::uint32_t>(t.shape().size()));
  for (std::size_t d : t.shape()) u64(d);
  f64s(t.data());
}

void Reader::raw(void* p, std::size_t n) {
  in_.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
  if (static_cast<std::size_t>(in_.gcount()) != n) {
    throw DataError(source_ + ": unexpected end of file at byte offset " +
                    std::to_string(offset_ + static_cast<std::uint64_t>(in_.gcount())));
  }
  offset_ += n;
}

void Reader::expect_magic(std::string_view tag) {
  char buf[8];
  raw(buf, sizeof buf);
  if (std::memcmp(buf, tag.data(), 8) != 0) {
    throw DataError(source_ + ": bad magic bytes (expected '" + std::string(tag) + "')");
  }
}

std::uint8_t Reader::u8() {
  std::uint8_t v;
  raw(&v, 1);
  return v;
}

std::uint32_t Reader::u32() {
  std::uint32_t v;
  raw(&v, sizeof v);
  return to_little(v);
}

std::uint64_t Reader::u64() {
  std::uint64_t v;
  raw(&v, sizeof v);
  return to_little(v);
}

double Reader::f64() { return std::bit_cast<double>(u64()); }

std::string Reader::str() {
  const std::uint32_t n = u32();
  if (n > (1u << 20)) throw DataError(source_ + ": string length " + std::to_string(n) + " too large");
  std::string s(n, '\0');
  raw(s.data(), n);
  return s;
}

void Reader::f64s(std::span<double> out) {
  if constexpr (std::endian::native == std::endian::little) {
    raw(out.data(), out.size_bytes());
  } else {
    for (double& v : out) v = f64();
  }
}

Tensor Reader::tensor() {
  const std::uint32_t rank = u32();
  if (rank > kMaxRank) throw DataError(source_ + ": tensor rank " + std::to_string(rank) + " too large");
  Shape shape(rank);
  std::uint64_t count = 1;
  for (auto& d : shape) {
    d = u64();
    count *= d;
    if (count > kMaxElements) throw DataError(source_ + ": tensor too large");
  }
  Tensor t(shape);
  f64s(t.data());
  return t;
}

void Reader::expect_end() {
  if (in_.peek() != std::char_traits<char>::eof()) {
    throw DataError(source_ + ": trailing bytes after offset " + std::to_string(offset_));
  }
}

}  // namespace advr::binio
