#pragma once

#include <array>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "dart/tensor.hpp"

// Self-describing little-endian checkpoint container: 8-byte magic
// "DARTCKPT", u32 version, repeated records (u32 name length, name bytes,
// u8 dtype code, u32 rank, u32 dims..., raw data), trailing CRC32 over
// everything before it. Writes are atomic (temp file + rename).

namespace dart {
namespace ckpt {

constexpr std::array<char, 8> kMagic = {'D', 'A', 'R', 'T', 'C', 'K', 'P', 'T'};
constexpr std::uint32_t kVersion = 1;

enum class Dtype : std::uint8_t { f32 = 0, f64 = 1, u8 = 2, i32 = 3, u64 = 4 };

inline std::size_t dtype_size(Dtype d) {
  switch (d) {
    case Dtype::f32: return 4;
    case Dtype::f64: return 8;
    case Dtype::u8: return 1;
    case Dtype::i32: return 4;
    case Dtype::u64: return 8;
  }
  throw IoError("unknown dtype code");
}

namespace detail {

inline std::uint32_t crc32(const std::uint8_t* data, std::size_t len) {
  static const auto table = [] {
    std::array<std::uint32_t, 256> t{};
    for (std::uint32_t i = 0; i < 256; ++i) {
      std::uint32_t c = i;
      for (int k = 0; k < 8; ++k) c = (c & 1) ? 0xEDB88320u ^ (c >> 1) : c >> 1;
      t[i] = c;
    }
    return t;
  }();
  std::uint32_t crc = 0xFFFFFFFFu;
  for (std::size_t i = 0; i < len; ++i) crc = table[(crc ^ data[i]) & 0xFFu] ^ (crc >> 8);
  return crc ^ 0xFFFFFFFFu;
}

template <typename T>
void append_raw(std::vector<std::uint8_t>& buf, const T& v) {
  const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
  buf.insert(buf.end(), p, p + sizeof(T));
}

}  // namespace detail

struct Record {
  Dtype dtype = Dtype::f32;
  Shape dims;
  std::vector<std::uint8_t> bytes;

  std::int64_t count() const {
    std::int64_t n = 1;
    for (int d : dims) n *= d;
    return n;
  }
};

class Writer {
 public:
  void add_record(const std::string& name, Dtype dtype, const Shape& dims, const void* data, std::size_t nbytes) {
    std::int64_t n = 1;
    for (int d : dims) {
      if (d <= 0) throw IoError("checkpoint record '" + name + "' has non-positive dim");
      n *= d;
    }
    if (nbytes != static_cast<std::size_t>(n) * dtype_size(dtype))
      throw IoError("checkpoint record '" + name + "' byte count mismatch");
    if (!order_.empty() || !records_.empty()) {
      if (records_.count(name)) throw IoError("duplicate checkpoint record '" + name + "'");
    }
    Record r;
    r.dtype = dtype;
    r.dims = dims;
    r.bytes.assign(static_cast<const std::uint8_t*>(data), static_cast<const std::uint8_t*>(data) + nbytes);
    records_.emplace(name, std::move(r));
    order_.push_back(name);
  }

  template <typename T>
  void add_tensor(const std::string& name, const Tensor<T>& t) {
    add_record(name, dtype_of<T>(), t.shape, t.data.data(), t.data.size() * sizeof(T));
  }

  void add_scalar_u64(const std::string& name, std::uint64_t v) { add_record(name, Dtype::u64, {1}, &v, 8); }

  void add_ints(const std::string& name, const std::vector<std::int32_t>& v) {
    add_record(name, Dtype::i32, {static_cast<int>(v.size())}, v.data(), v.size() * 4);
  }

  void add_floats(const std::string& name, const std::vector<float>& v) {
    add_record(name, Dtype::f32, {static_cast<int>(v.size())}, v.data(), v.size() * 4);
  }

  void add_text(const std::string& name, const std::string& text) {
    add_record(name, Dtype::u8, {static_cast<int>(text.size())}, text.data(), text.size());
  }

  void write(const std::string& path) const {
    std::vector<std::uint8_t> buf;
    buf.insert(buf.end(), kMagic.begin(), kMagic.end());
    detail::append_raw(buf, kVersion);
    for (const auto& name : order_) {
      const Record& r = records_.at(name);
      detail::append_raw(buf, static_cast<std::uint32_t>(name.size()));
      buf.insert(buf.end(), name.begin(), name.end());
      buf.push_back(static_cast<std::uint8_t>(r.dtype));
      detail::append_raw(buf, static_cast<std::uint32_t>(r.dims.size()));
      for (int d : r.dims) detail::append_raw(buf, static_cast<std::uint32_t>(d));
      buf.insert(buf.end(), r.bytes.begin(), r.bytes.end());
    }
    const std::uint32_t crc = detail::crc32(buf.data(), buf.size());
    detail::append_raw(buf, crc);

    namespace fs = std::filesystem;
    const fs::path target(path);
    if (target.has_parent_path()) fs::create_directories(target.parent_path());
    const fs::path tmp = target.string() + ".tmp";
    {
      std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
      if (!out) throw IoError("cannot open " + tmp.string() + " for writing");
      out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
      if (!out) throw IoError("short write to " + tmp.string());
    }
    fs::rename(tmp, target);
  }

  template <typename T>
  static Dtype dtype_of() {
    if constexpr (std::is_same_v<T, float>) return Dtype::f32;
    else if constexpr (std::is_same_v<T, double>) return Dtype::f64;
    else if constexpr (std::is_same_v<T, std::uint8_t>) return Dtype::u8;
    else if constexpr (std::is_same_v<T, std::int32_t>) return Dtype::i32;
    else if constexpr (std::is_same_v<T, std::uint64_t>) return Dtype::u64;
    else static_assert(!sizeof(T), "unsupported checkpoint dtype");
  }

 private:
  std::map<std::string, Record> records_;
  std::vector<std::string> order_;
};

class Reader {
 public:
  explicit Reader(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open checkpoint " + path);
    std::vector<std::uint8_t> buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (buf.size() < kMagic.size() + 4 + 4) throw IoError(path + ": truncated checkpoint");
    if (std::memcmp(buf.data(), kMagic.data(), kMagic.size()) != 0)
      throw IoError(path + ": not a checkpoint file (bad magic)");
    const std::uint32_t stored_crc = read_at<std::uint32_t>(buf, buf.size() - 4);
    const std::uint32_t actual_crc = detail::crc32(buf.data(), buf.size() - 4);
    if (stored_crc != actual_crc) throw IoError(path + ": CRC mismatch (corrupted checkpoint)");
    std::size_t off = kMagic.size();
    version_ = read_at<std::uint32_t>(buf, off);
    off += 4;
    if (version_ != kVersion)
      throw IoError(path + ": unsupported checkpoint version " + std::to_string(version_) + " (expected " +
                    std::to_string(kVersion) + ")");
    const std::size_t end = buf.size() - 4;
    while (off < end) {
      const std::uint32_t name_len = read_checked<std::uint32_t>(buf, off, end, path);
      if (off + name_len > end) throw IoError(path + ": truncated record name");
      std::string name(reinterpret_cast<const char*>(buf.data() + off), name_len);
      off += name_len;
      if (off + 1 > end) throw IoError(path + ": truncated record header");
      Record r;
      r.dtype = static_cast<Dtype>(buf[off++]);
      if (static_cast<int>(r.dtype) > 4) throw IoError(path + ": bad dtype code in record '" + name + "'");
      const std::uint32_t rank = read_checked<std::uint32_t>(buf, off, end, path);
      if (rank > 16) throw IoError(path + ": implausible rank in record '" + name + "'");
      std::int64_t n = 1;
      for (std::uint32_t i = 0; i < rank; ++i) {
        const std::uint32_t d = read_checked<std::uint32_t>(buf, off, end, path);
        r.dims.push_back(static_cast<int>(d));
        n *= d;
      }
      const std::size_t nbytes = static_cast<std::size_t>(n) * dtype_size(r.dtype);
      if (off + nbytes > end) throw IoError(path + ": truncated data in record '" + name + "'");
      r.bytes.assign(buf.begin() + static_cast<std::ptrdiff_t>(off), buf.begin() + static_cast<std::ptrdiff_t>(off + nbytes));
      off += nbytes;
      if (records_.count(name)) throw IoError(path + ": duplicate record '" + name + "'");
      records_.emplace(name, std::move(r));
      order_.push_back(name);
    }
  }

  bool has(const std::string& name) const { return records_.count(name) != 0; }

  const Record& get(const std::string& name) const {
    auto it = records_.find(name);
    if (it == records_.end()) throw IoError("checkpoint record '" + name + "' missing");
    return it->second;
  }

  template <typename T>
  Tensor<T> tensor(const std::string& name) const {
    const Record& r = get(name);
    if (r.dtype != Writer::dtype_of<T>()) throw IoError("checkpoint record '" + name + "' has wrong dtype");
    Tensor<T> t = Tensor<T>::zeros(r.dims);
    std::memcpy(t.data.data(), r.bytes.data(), r.bytes.size());
    return t;
  }

  std::uint64_t scalar_u64(const std::string& name) const {
    const Record& r = get(name);
    if (r.dtype != Dtype::u64 || r.count() != 1) throw IoError("checkpoint record '" + name + "' is not a u64 scalar");
    std::uint64_t v;
    std::memcpy(&v, r.bytes.data(), 8);
    return v;
  }

  std::vector<std::int32_t> ints(const std::string& name) const {
    const Record& r = get(name);
    if (r.dtype != Dtype::i32) throw IoError("checkpoint record '" + name + "' is not i32");
    std::vector<std::int32_t> v(static_cast<std::size_t>(r.count()));
    std::memcpy(v.data(), r.bytes.data(), r.bytes.size());
    return v;
  }

  std::vector<float> floats(const std::string& name) const {
    const Record& r = get(name);
    if (r.dtype != Dtype::f32) throw IoError("checkpoint record '" + name + "' is not f32");
    std::vector<float> v(static_cast<std::size_t>(r.count()));
    std::memcpy(v.data(), r.bytes.data(), r.bytes.size());
    return v;
  }

  std::string text(const std::string& name) const {
    const Record& r = get(name);
    if (r.dtype != Dtype::u8) throw IoError("checkpoint record '" + name + "' is not text");
    return std::string(reinterpret_cast<const char*>(r.bytes.data()), r.bytes.size());
  }

  const std::vector<std::string>& names() const { return order_; }
  std::uint32_t version() const { return version_; }

 private:
  template <typename T>
  static T read_at(const std::vector<std::uint8_t>& buf, std::size_t off) {
    T v;
    std::memcpy(&v, buf.data() + off, sizeof(T));
    return v;
  }

  template <typename T>
  static T read_checked(const std::vector<std::uint8_t>& buf, std::size_t& off, std::size_t end,
                        const std::string& path) {
    if (off + sizeof(T) > end) throw IoError(path + ": truncated checkpoint");
    T v = read_at<T>(buf, off);
    off += sizeof(T);
    return v;
  }

  std::map<std::string, Record> records_;
  std::vector<std::string> order_;
  std::uint32_t version_ = 0;
};

}  // namespace ckpt
}  // namespace dart
