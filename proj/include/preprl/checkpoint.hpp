#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <type_traits>
#include <vector>

#include "preprl/network.hpp"

// Parameter checkpoint container:
//   "PRLNET1" | u8 dtype (4 = float32, 8 = float64) | u32 tensor count
//   per tensor: u32 name length | name | u32 rank | u32 dims[rank] | data
// All integers and scalars little-endian.

namespace preprl {

inline constexpr char kCheckpointMagic[] = "PRLNET1";

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

template <typename T>
void put_scalar(std::string& out, T v) {
  using U = std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>;
  U bits = std::bit_cast<U>(v);
  for (std::size_t i = 0; i < sizeof(T); ++i)
    out.push_back(static_cast<char>((bits >> (8 * i)) & 0xff));
}

class ByteReader {
 public:
  ByteReader(const std::string& bytes, std::string what)
      : bytes_(bytes), what_(std::move(what)) {}

  std::size_t offset() const { return pos_; }
  bool at_end() const { return pos_ == bytes_.size(); }

  void need(std::size_t n) const {
    if (bytes_.size() - pos_ < n) {
      throw FormatError(what_ + ": truncated at byte offset " +
                        std::to_string(pos_) + " (need " + std::to_string(n) +
                        " more bytes, " + std::to_string(bytes_.size() - pos_) +
                        " left)");
    }
  }
  std::uint8_t u8() {
    need(1);
    return static_cast<std::uint8_t>(bytes_[pos_++]);
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i)
      v |= static_cast<std::uint32_t>(static_cast<std::uint8_t>(bytes_[pos_ + i])) << (8 * i);
    pos_ += 4;
    return v;
  }
  template <typename T>
  T scalar() {
    using U = std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>;
    need(sizeof(T));
    U bits = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i)
      bits |= static_cast<U>(static_cast<std::uint8_t>(bytes_[pos_ + i])) << (8 * i);
    pos_ += sizeof(T);
    return std::bit_cast<T>(bits);
  }
  std::string str(std::size_t n) {
    need(n);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }

 private:
  const std::string& bytes_;
  std::string what_;
  std::size_t pos_ = 0;
};

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_file(const std::string& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot write '" + path + "'");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw FormatError("write failed for '" + path + "'");
}

}  // namespace detail

template <typename T>
std::string encode_checkpoint(const NamedTensors<T>& tensors) {
  static_assert(sizeof(T) == 4 || sizeof(T) == 8);
  std::string out(kCheckpointMagic, 7);
  out.push_back(static_cast<char>(sizeof(T)));
  detail::put_u32(out, static_cast<std::uint32_t>(tensors.size()));
  for (const auto& [name, t] : tensors) {
    detail::put_u32(out, static_cast<std::uint32_t>(name.size()));
    out += name;
    detail::put_u32(out, static_cast<std::uint32_t>(t.rank()));
    for (auto d : t.shape()) detail::put_u32(out, static_cast<std::uint32_t>(d));
    for (T v : t.data()) detail::put_scalar(out, v);
  }
  return out;
}

// Decodes a checkpoint; scalars stored at the other precision are converted.
template <typename T>
NamedTensors<T> decode_checkpoint(const std::string& bytes,
                                  const std::string& what = "checkpoint") {
  detail::ByteReader r(bytes, what);
  if (r.str(7) != std::string(kCheckpointMagic, 7)) {
    throw FormatError(what + ": bad magic at byte offset 0 (expected PRLNET1)");
  }
  const auto dtype = r.u8();
  if (dtype != 4 && dtype != 8) {
    throw FormatError(what + ": unknown dtype tag " + std::to_string(dtype) +
                      " at byte offset 7");
  }
  const auto count = r.u32();
  NamedTensors<T> out;
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto len = r.u32();
    std::string name = r.str(len);
    const auto rank = r.u32();
    Shape shape;
    for (std::uint32_t d = 0; d < rank; ++d) shape.push_back(r.u32());
    const std::size_t n = shape_size(shape);
    r.need(n * dtype);
    std::vector<T> data(n);
    for (auto& v : data) {
      v = dtype == 4 ? static_cast<T>(r.scalar<float>())
                     : static_cast<T>(r.scalar<double>());
    }
    out.emplace_back(std::move(name), Tensor<T>(std::move(shape), std::move(data)));
  }
  if (!r.at_end()) {
    throw FormatError(what + ": trailing bytes at offset " +
                      std::to_string(r.offset()));
  }
  return out;
}

template <typename T>
void save_checkpoint(const std::string& path, const NamedTensors<T>& tensors) {
  detail::write_file(path, encode_checkpoint(tensors));
}

template <typename T>
NamedTensors<T> load_checkpoint(const std::string& path) {
  return decode_checkpoint<T>(detail::read_file(path), path);
}

// Sidecar "key = value" metadata stored next to a checkpoint as <path>.meta.
using Metadata = std::map<std::string, std::string>;

inline void save_metadata(const std::string& path, const Metadata& meta) {
  std::string text;
  for (const auto& [k, v] : meta) text += k + " = " + v + "\n";
  detail::write_file(path, text);
}

inline Metadata load_metadata(const std::string& path) {
  std::istringstream in(detail::read_file(path));
  Metadata meta;
  std::string line;
  while (std::getline(in, line)) {
    auto eq = line.find('=');
    if (eq == std::string::npos) continue;
    auto trim = [](std::string s) {
      const auto b = s.find_first_not_of(" \t\r");
      const auto e = s.find_last_not_of(" \t\r");
      return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
    };
    meta[trim(line.substr(0, eq))] = trim(line.substr(eq + 1));
  }
  return meta;
}

}  // namespace preprl
