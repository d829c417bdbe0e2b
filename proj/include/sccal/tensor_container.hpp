#pragma once

// Flat little-endian tensor container ("SCT1").
//
//   magic    4 bytes  "SCT1"
//   version  u32      1
//   count    u32      number of entries
//   entry*:  u32 name length, UTF-8 name bytes,
//            u8 dtype (0 = f32, 1 = u8 byte blob), u8 ndim, u32 dims[ndim],
//            raw little-endian payload (product(dims) elements)
//
// Entries keep file order, so load -> save reproduces the input bytes.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "sccal/error.hpp"
#include "sccal/numerics.hpp"

namespace sccal {

static_assert(std::endian::native == std::endian::little, "container I/O assumes a little-endian host");

enum class DType : std::uint8_t { F32 = 0, U8 = 1 };

struct ContainerEntry {
  std::string name;
  DType dtype = DType::F32;
  std::vector<std::uint32_t> dims;
  std::vector<float> f32;
  std::vector<std::uint8_t> bytes;

  std::size_t element_count() const {
    return std::accumulate(dims.begin(), dims.end(), std::size_t{1},
                           [](std::size_t a, std::uint32_t b) { return a * b; });
  }
};

class TensorContainer {
 public:
  static constexpr char kMagic[4] = {'S', 'C', 'T', '1'};
  static constexpr std::uint32_t kVersion = 1;

  void add(std::string name, std::vector<std::uint32_t> dims, std::vector<float> values) {
    ContainerEntry e{std::move(name), DType::F32, std::move(dims), std::move(values), {}};
    if (e.element_count() != e.f32.size()) {
      throw ShapeError("container entry '" + e.name + "': dims do not match payload length");
    }
    insert(std::move(e));
  }

  void add(const std::string& name, const Tensor2D& t) {
    add(name, {static_cast<std::uint32_t>(t.rows()), static_cast<std::uint32_t>(t.cols())}, t.data());
  }

  void add_vector(const std::string& name, std::vector<float> v) {
    const auto n = static_cast<std::uint32_t>(v.size());
    add(name, {n}, std::move(v));
  }

  void add_scalar(const std::string& name, float v) { add(name, {1}, {v}); }

  void add_bytes(std::string name, std::vector<std::uint8_t> bytes) {
    const auto n = static_cast<std::uint32_t>(bytes.size());
    insert(ContainerEntry{std::move(name), DType::U8, {n}, {}, std::move(bytes)});
  }

  void add_string(const std::string& name, const std::string& s) {
    add_bytes(name, std::vector<std::uint8_t>(s.begin(), s.end()));
  }

  bool contains(const std::string& name) const { return find(name) != nullptr; }

  const ContainerEntry& at(const std::string& name) const {
    const ContainerEntry* e = find(name);
    if (!e) throw DataError("container: missing tensor '" + name + "'");
    return *e;
  }

  const std::vector<ContainerEntry>& entries() const noexcept { return entries_; }

  // Any f32 entry viewed as a matrix: dim 0 rows, remaining dims flattened.
  Tensor2D matrix(const std::string& name) const {
    const ContainerEntry& e = f32_entry(name);
    const std::size_t rows = e.dims.empty() ? 1 : e.dims[0];
    const std::size_t cols = rows == 0 ? 0 : e.f32.size() / rows;
    return Tensor2D(rows, cols, e.f32);
  }

  std::vector<float> vector(const std::string& name) const { return f32_entry(name).f32; }

  float scalar(const std::string& name) const {
    const ContainerEntry& e = f32_entry(name);
    if (e.f32.size() != 1) throw DataError("container: '" + name + "' is not a scalar");
    return e.f32[0];
  }

  std::string string(const std::string& name) const {
    const ContainerEntry& e = at(name);
    if (e.dtype != DType::U8) throw DataError("container: '" + name + "' is not a byte blob");
    return std::string(e.bytes.begin(), e.bytes.end());
  }

  std::string serialize() const {
    std::string out;
    out.append(kMagic, 4);
    put_u32(out, kVersion);
    put_u32(out, static_cast<std::uint32_t>(entries_.size()));
    for (const auto& e : entries_) {
      put_u32(out, static_cast<std::uint32_t>(e.name.size()));
      out += e.name;
      out.push_back(static_cast<char>(e.dtype));
      out.push_back(static_cast<char>(e.dims.size()));
      for (auto d : e.dims) put_u32(out, d);
      if (e.dtype == DType::F32) {
        out.append(reinterpret_cast<const char*>(e.f32.data()), e.f32.size() * sizeof(float));
      } else {
        out.append(reinterpret_cast<const char*>(e.bytes.data()), e.bytes.size());
      }
    }
    return out;
  }

  static TensorContainer deserialize(const std::string& buf) {
    std::size_t pos = 0;
    auto need = [&](std::size_t n) {
      if (pos + n > buf.size()) throw DataError("container: truncated at byte " + std::to_string(pos));
    };
    auto u32 = [&] {
      need(4);
      std::uint32_t v;
      std::memcpy(&v, buf.data() + pos, 4);
      pos += 4;
      return v;
    };
    auto u8 = [&] {
      need(1);
      return static_cast<std::uint8_t>(buf[pos++]);
    };

    need(4);
    if (std::memcmp(buf.data(), kMagic, 4) != 0) throw DataError("container: bad magic");
    pos = 4;
    if (const auto version = u32(); version != kVersion) {
      throw DataError("container: unsupported version " + std::to_string(version));
    }
    const std::uint32_t count = u32();
    TensorContainer c;
    for (std::uint32_t i = 0; i < count; ++i) {
      ContainerEntry e;
      const std::uint32_t name_len = u32();
      need(name_len);
      e.name.assign(buf.data() + pos, name_len);
      pos += name_len;
      const std::uint8_t dtype = u8();
      if (dtype > 1) throw DataError("container: unknown dtype " + std::to_string(dtype) + " for '" + e.name + "'");
      e.dtype = static_cast<DType>(dtype);
      const std::uint8_t ndim = u8();
      for (std::uint8_t d = 0; d < ndim; ++d) e.dims.push_back(u32());
      const std::size_t n = e.element_count();
      if (e.dtype == DType::F32) {
        need(n * sizeof(float));
        e.f32.resize(n);
        std::memcpy(e.f32.data(), buf.data() + pos, n * sizeof(float));
        pos += n * sizeof(float);
      } else {
        need(n);
        e.bytes.assign(buf.begin() + static_cast<std::ptrdiff_t>(pos), buf.begin() + static_cast<std::ptrdiff_t>(pos + n));
        pos += n;
      }
      c.insert(std::move(e));
    }
    if (pos != buf.size()) throw DataError("container: trailing bytes after last entry");
    return c;
  }

  static TensorContainer load(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open tensor container: " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return deserialize(ss.str());
  }

  // Written to a sibling temp file and renamed into place.
  void save(const std::filesystem::path& path) const {
    const std::string bytes = serialize();
    write_file_atomic(path, bytes);
  }

  static void write_file_atomic(const std::filesystem::path& path, const std::string& bytes) {
    auto tmp = path;
    tmp += ".tmp";
    {
      std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
      if (!out) throw IoError("cannot write: " + tmp.string());
      out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
      if (!out) throw IoError("short write: " + tmp.string());
    }
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    if (ec) throw IoError("cannot rename " + tmp.string() + " -> " + path.string() + ": " + ec.message());
  }

 private:
  static void put_u32(std::string& out, std::uint32_t v) {
    char b[4];
    std::memcpy(b, &v, 4);
    out.append(b, 4);
  }

  const ContainerEntry* find(const std::string& name) const {
    for (const auto& e : entries_)
      if (e.name == name) return &e;
    return nullptr;
  }

  const ContainerEntry& f32_entry(const std::string& name) const {
    const ContainerEntry& e = at(name);
    if (e.dtype != DType::F32) throw DataError("container: '" + name + "' is not f32");
    return e;
  }

  void insert(ContainerEntry e) {
    if (find(e.name)) throw DataError("container: duplicate tensor name '" + e.name + "'");
    entries_.push_back(std::move(e));
  }

  std::vector<ContainerEntry> entries_;
};

}  // namespace sccal
