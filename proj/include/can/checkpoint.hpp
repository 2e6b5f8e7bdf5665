#pragma once

// Flat binary tensor container shared by parameter checkpoints and object
// feature files:
//
//   "CANCKPT1" | version u32 | entry count u32
//   per entry: name length u16 | UTF-8 name | dtype u8 (0=f32, 1=f64) |
//              rank u8 | extents u32 × rank | row-major payload
//
// All integers and payload scalars are little-endian.

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <type_traits>
#include <vector>

#include "can/errors.hpp"
#include "can/tensor.hpp"

namespace can::checkpoint {

inline constexpr char kMagic[8] = {'C', 'A', 'N', 'C', 'K', 'P', 'T', '1'};
inline constexpr std::uint32_t kVersion = 1;

enum class DType : std::uint8_t { f32 = 0, f64 = 1 };

struct Entry {
  std::string name;
  DType dtype = DType::f64;
  Shape shape;
  std::vector<double> values;  // f32 payloads are widened exactly

  bool operator==(const Entry&) const = default;
};

template <typename T>
constexpr DType dtype_of() {
  static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>);
  return std::is_same_v<T, float> ? DType::f32 : DType::f64;
}

template <typename T>
Entry to_entry(std::string name, const Tensor<T>& t) {
  return Entry{std::move(name), dtype_of<T>(), t.shape(), std::vector<double>(t.data().begin(), t.data().end())};
}

template <typename T>
Tensor<T> to_tensor(const Entry& e) {
  std::vector<T> values(e.values.size());
  for (std::size_t i = 0; i < values.size(); ++i) values[i] = static_cast<T>(e.values[i]);
  return Tensor<T>(e.shape, std::move(values));
}

namespace detail {

template <typename U>
void put(std::string& out, U v) {
  static_assert(std::is_trivially_copyable_v<U>);
  unsigned char bytes[sizeof(U)];
  std::memcpy(bytes, &v, sizeof(U));
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(U));
  out.append(reinterpret_cast<const char*>(bytes), sizeof(U));
}

class Reader {
 public:
  explicit Reader(std::string_view bytes) : bytes_(bytes) {}

  template <typename U>
  U get(const char* what) {
    if (pos_ + sizeof(U) > bytes_.size()) throw DataError(std::string("checkpoint truncated reading ") + what);
    unsigned char raw[sizeof(U)];
    std::memcpy(raw, bytes_.data() + pos_, sizeof(U));
    if constexpr (std::endian::native == std::endian::big) std::reverse(raw, raw + sizeof(U));
    pos_ += sizeof(U);
    U v;
    std::memcpy(&v, raw, sizeof(U));
    return v;
  }

  std::string_view take(std::size_t n, const char* what) {
    if (pos_ + n > bytes_.size()) throw DataError(std::string("checkpoint truncated reading ") + what);
    auto s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  bool done() const { return pos_ == bytes_.size(); }
  std::size_t remaining() const { return bytes_.size() - pos_; }

 private:
  std::string_view bytes_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::string encode(const std::vector<Entry>& entries) {
  std::string out(kMagic, sizeof(kMagic));
  detail::put<std::uint32_t>(out, kVersion);
  detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(entries.size()));
  for (const auto& e : entries) {
    if (e.name.size() > 0xFFFF) throw ContractError("checkpoint entry name too long: " + e.name);
    if (e.shape.empty() || e.shape.size() > 0xFF) throw ContractError("checkpoint entry rank out of range: " + e.name);
    if (shape_numel(e.shape) != e.values.size()) throw DimensionError("checkpoint entry size mismatch: " + e.name);
    detail::put<std::uint16_t>(out, static_cast<std::uint16_t>(e.name.size()));
    out += e.name;
    detail::put<std::uint8_t>(out, static_cast<std::uint8_t>(e.dtype));
    detail::put<std::uint8_t>(out, static_cast<std::uint8_t>(e.shape.size()));
    for (auto extent : e.shape) detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(extent));
    for (double v : e.values) {
      if (e.dtype == DType::f32) {
        detail::put<float>(out, static_cast<float>(v));
      } else {
        detail::put<double>(out, v);
      }
    }
  }
  return out;
}

inline std::vector<Entry> decode(std::string_view bytes) {
  detail::Reader in(bytes);
  if (in.take(sizeof(kMagic), "magic") != std::string_view(kMagic, sizeof(kMagic))) {
    throw DataError("not a CANCKPT1 container (bad magic)");
  }
  const auto version = in.get<std::uint32_t>("version");
  if (version != kVersion) throw DataError("unsupported container version " + std::to_string(version));
  const auto count = in.get<std::uint32_t>("entry count");
  std::vector<Entry> entries;
  entries.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    Entry e;
    const auto len = in.get<std::uint16_t>("name length");
    e.name = std::string(in.take(len, "name"));
    const auto tag = in.get<std::uint8_t>("dtype");
    if (tag > 1) throw DataError("entry " + e.name + ": unknown dtype tag " + std::to_string(tag));
    e.dtype = static_cast<DType>(tag);
    const auto rank = in.get<std::uint8_t>("rank");
    if (rank == 0) throw DataError("entry " + e.name + ": rank 0");
    for (std::uint8_t r = 0; r < rank; ++r) e.shape.push_back(in.get<std::uint32_t>("extent"));
    const std::size_t n = shape_numel(e.shape);
    const std::size_t width = e.dtype == DType::f32 ? sizeof(float) : sizeof(double);
    if (n > in.remaining() / width) throw DataError("entry " + e.name + ": payload extends past end of container");
    e.values.resize(n);
    for (std::size_t j = 0; j < n; ++j) {
      e.values[j] = e.dtype == DType::f32 ? static_cast<double>(in.get<float>("payload")) : in.get<double>("payload");
    }
    entries.push_back(std::move(e));
  }
  if (!in.done()) throw DataError("trailing bytes after last checkpoint entry");
  return entries;
}

inline void write(const std::filesystem::path& path, const std::vector<Entry>& entries) {
  const std::string bytes = encode(entries);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open for writing: " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed: " + path.string());
}

inline std::vector<Entry> read(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open: " + path.string());
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  try {
    return decode(bytes);
  } catch (const DataError& e) {
    throw DataError(path.string() + ": " + e.what());
  }
}

}  // namespace can::checkpoint
