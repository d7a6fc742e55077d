#pragma once

#include <array>
#include <cstdint>
#include <istream>
#include <ostream>
#include <string>
#include <string_view>

#include "advr/tensor.hpp"

namespace advr::binio {

// Little-endian primitive writer shared by every checkpoint/file format.
class Writer {
 public:
  explicit Writer(std::ostream& out) : out_(out) {}

  void magic(std::string_view tag);  // exactly 8 bytes
  void u8(std::uint8_t v);
  void u32(std::uint32_t v);
  void u64(std::uint64_t v);
  void f64(double v);
  void str(std::string_view s);
  void f64s(std::span<const double> values);
  // rank, dims, then packed values.
  void tensor(const Tensor& t);

 private:
  void raw(const void* p, std::size_t n);
  std::ostream& out_;
};

class Reader {
 public:
  Reader(std::istream& in, std::string source) : in_(in), source_(std::move(source)) {}

  void expect_magic(std::string_view tag);
  std::uint8_t u8();
  std::uint32_t u32();
  std::uint64_t u64();
  double f64();
  std::string str();
  void f64s(std::span<double> out);
  Tensor tensor();

  std::uint64_t offset() const { return offset_; }
  // Throws unless the stream is exhausted.
  void expect_end();

 private:
  void raw(void* p, std::size_t n);
  std::istream& in_;
  std::string source_;
  std::uint64_t offset_ = 0;
};

}  // namespace advr::binio
