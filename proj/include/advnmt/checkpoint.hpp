#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "advnmt/tensor.hpp"

namespace advnmt {

// Named-array container: magic, format version, a plain key=value text
// section for model configuration, then each array as
//   name length/bytes, ndim, dims (u64), values (f64, little-endian).
// All integers are little-endian regardless of host order.
namespace ckpt {

inline constexpr char kMagic[8] = {'A', 'N', 'M', 'T', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kVersion = 1;

inline void write_u32(std::ostream& out, std::uint32_t v) {
  unsigned char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xFF);
  out.write(reinterpret_cast<const char*>(b), 4);
}

inline void write_u64(std::ostream& out, std::uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xFF);
  out.write(reinterpret_cast<const char*>(b), 8);
}

inline void write_f64(std::ostream& out, double d) {
  std::uint64_t bits;
  std::memcpy(&bits, &d, 8);
  write_u64(out, bits);
}

inline std::uint32_t read_u32(std::istream& in) {
  unsigned char b[4];
  in.read(reinterpret_cast<char*>(b), 4);
  if (!in) throw std::runtime_error("checkpoint: truncated file");
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
  return v;
}

inline std::uint64_t read_u64(std::istream& in) {
  unsigned char b[8];
  in.read(reinterpret_cast<char*>(b), 8);
  if (!in) throw std::runtime_error("checkpoint: truncated file");
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return v;
}

inline double read_f64(std::istream& in) {
  const std::uint64_t bits = read_u64(in);
  double d;
  std::memcpy(&d, &bits, 8);
  return d;
}

}  // namespace ckpt

struct Checkpoint {
  std::string meta;                      // key=value lines
  std::map<std::string, Tensor> arrays;  // sorted by name

  void save(const std::string& path) const {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("checkpoint: cannot open for writing: " + path);
    out.write(ckpt::kMagic, 8);
    ckpt::write_u32(out, ckpt::kVersion);
    ckpt::write_u64(out, meta.size());
    out.write(meta.data(), static_cast<std::streamsize>(meta.size()));
    ckpt::write_u32(out, static_cast<std::uint32_t>(arrays.size()));
    for (const auto& [name, t] : arrays) {
      ckpt::write_u32(out, static_cast<std::uint32_t>(name.size()));
      out.write(name.data(), static_cast<std::streamsize>(name.size()));
      ckpt::write_u32(out, static_cast<std::uint32_t>(t.shape.size()));
      for (int d : t.shape) ckpt::write_u64(out, static_cast<std::uint64_t>(d));
      for (double v : t.data) ckpt::write_f64(out, v);
    }
    if (!out) throw std::runtime_error("checkpoint: write failed: " + path);
  }

  static Checkpoint load(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("checkpoint: cannot open: " + path);
    char magic[8];
    in.read(magic, 8);
    if (!in || std::memcmp(magic, ckpt::kMagic, 8) != 0)
      throw std::runtime_error("checkpoint: bad magic in " + path);
    const std::uint32_t version = ckpt::read_u32(in);
    if (version != ckpt::kVersion)
      throw std::runtime_error("checkpoint: unsupported format version " + std::to_string(version) + " in " + path);
    Checkpoint c;
    const std::uint64_t meta_len = ckpt::read_u64(in);
    c.meta.resize(meta_len);
    in.read(c.meta.data(), static_cast<std::streamsize>(meta_len));
    const std::uint32_t count = ckpt::read_u32(in);
    for (std::uint32_t i = 0; i < count; ++i) {
      const std::uint32_t name_len = ckpt::read_u32(in);
      std::string name(name_len, '\0');
      in.read(name.data(), name_len);
      const std::uint32_t ndim = ckpt::read_u32(in);
      Shape shape;
      for (std::uint32_t d = 0; d < ndim; ++d) shape.push_back(static_cast<int>(ckpt::read_u64(in)));
      Tensor t = Tensor::zeros(shape);
      for (double& v : t.data) v = ckpt::read_f64(in);
      c.arrays.emplace(std::move(name), std::move(t));
    }
    if (!in) throw std::runtime_error("checkpoint: truncated file: " + path);
    return c;
  }

  const Tensor& require(const std::string& name) const {
    auto it = arrays.find(name);
    if (it == arrays.end()) throw std::runtime_error("checkpoint: missing array '" + name + "'");
    return it->second;
  }

  // key=value lookup in the meta section
  std::string meta_value(const std::string& key) const {
    std::size_t pos = 0;
    while (pos < meta.size()) {
      std::size_t end = meta.find('\n', pos);
      if (end == std::string::npos) end = meta.size();
      const std::string line = meta.substr(pos, end - pos);
      const std::size_t eq = line.find('=');
      if (eq != std::string::npos) {
        std::string k = line.substr(0, eq);
        while (!k.empty() && k.back() == ' ') k.pop_back();
        std::size_t start = 0;
        while (start < k.size() && k[start] == ' ') ++start;
        if (k.substr(start) == key) {
          std::string v = line.substr(eq + 1);
          std::size_t vs = 0;
          while (vs < v.size() && v[vs] == ' ') ++vs;
          std::size_t ve = v.size();
          while (ve > vs && (v[ve - 1] == ' ' || v[ve - 1] == '\r')) --ve;
          return v.substr(vs, ve - vs);
        }
      }
      pos = end + 1;
    }
    throw std::runtime_error("checkpoint: missing meta key '" + key + "'");
  }
};

}  // namespace advnmt
