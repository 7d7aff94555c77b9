#pragma once

// Checkpoint container and file format: a text header carrying a key-value
// config block, followed by named parameter records with raw little-endian
// 64-bit float payloads. Writing is deterministic: identical content gives
// identical bytes.

#include <bit>
#include <cstdint>
#include <fstream>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "embedkit/errors.hpp"

namespace embedkit {

namespace detail {

inline void write_f64_le(std::ostream& out, const std::vector<double>& v) {
  for (double x : v) {
    const auto u = std::bit_cast<std::uint64_t>(x);
    char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<char>((u >> (8 * i)) & 0xff);
    out.write(b, 8);
  }
}

inline void read_f64_le(std::istream& in, std::vector<double>& v, std::size_t n) {
  v.resize(n);
  for (std::size_t k = 0; k < n; ++k) {
    char b[8];
    in.read(b, 8);
    if (!in) throw IoError("checkpoint: truncated float payload");
    std::uint64_t u = 0;
    for (int i = 0; i < 8; ++i)
      u |= static_cast<std::uint64_t>(static_cast<unsigned char>(b[i])) << (8 * i);
    v[k] = std::bit_cast<double>(u);
  }
}

inline void write_u64_le(std::ostream& out, std::uint64_t u) {
  char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<char>((u >> (8 * i)) & 0xff);
  out.write(b, 8);
}

inline std::uint64_t read_u64_le(std::istream& in) {
  char b[8];
  in.read(b, 8);
  if (!in) throw IoError("binary payload truncated");
  std::uint64_t u = 0;
  for (int i = 0; i < 8; ++i)
    u |= static_cast<std::uint64_t>(static_cast<unsigned char>(b[i])) << (8 * i);
  return u;
}

inline std::uint64_t fnv1a64(const std::string& bytes) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

inline std::uint64_t fnv1a64_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("hash: cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return fnv1a64(ss.str());
}

}  // namespace detail

struct ParamRecord {
  std::string name;
  std::vector<std::size_t> shape;
  std::vector<double> data;

  std::size_t numel() const {
    std::size_t n = 1;
    for (std::size_t d : shape) n *= d;
    return n;
  }
};

struct Checkpoint {
  // Ordered so that save(load(x)) is byte-identical to x.
  std::vector<std::pair<std::string, std::string>> config;
  std::vector<ParamRecord> params;

  const std::string* config_value(const std::string& key) const {
    for (const auto& [k, v] : config)
      if (k == key) return &v;
    return nullptr;
  }

  const ParamRecord* find(const std::string& name) const {
    for (const auto& p : params)
      if (p.name == name) return &p;
    return nullptr;
  }
};

inline void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("checkpoint: cannot write " + path);
  out << "embedkit-checkpoint v1\n";
  out << "config " << ckpt.config.size() << "\n";
  for (const auto& [k, v] : ckpt.config) out << k << " " << v << "\n";
  out << "params " << ckpt.params.size() << "\n";
  for (const auto& p : ckpt.params) {
    out << "param " << p.name << " " << p.shape.size();
    for (std::size_t d : p.shape) out << " " << d;
    out << "\n";
    if (p.data.size() != p.numel()) {
      throw DimensionError("checkpoint: param " + p.name + " data/shape mismatch");
    }
    detail::write_f64_le(out, p.data);
    out << "\n";
  }
  if (!out) throw IoError("checkpoint: write failed for " + path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("checkpoint: cannot open " + path);
  std::string line;
  if (!std::getline(in, line) || line != "embedkit-checkpoint v1") {
    throw DataError("checkpoint: bad magic in " + path);
  }
  Checkpoint ckpt;
  std::size_t n_config = 0, n_params = 0;
  {
    std::string tag;
    in >> tag >> n_config;
    if (!in || tag != "config") throw DataError("checkpoint: missing config block in " + path);
    std::getline(in, line);
    for (std::size_t i = 0; i < n_config; ++i) {
      if (!std::getline(in, line)) throw DataError("checkpoint: truncated config in " + path);
      const auto sp = line.find(' ');
      if (sp == std::string::npos) throw DataError("checkpoint: bad config line '" + line + "'");
      ckpt.config.emplace_back(line.substr(0, sp), line.substr(sp + 1));
    }
    in >> tag >> n_params;
    if (!in || tag != "params") throw DataError("checkpoint: missing params block in " + path);
    std::getline(in, line);
  }
  for (std::size_t i = 0; i < n_params; ++i) {
    std::string tag, name;
    std::size_t rank = 0;
    in >> tag >> name >> rank;
    if (!in || tag != "param") throw DataError("checkpoint: bad param header in " + path);
    ParamRecord rec;
    rec.name = name;
    rec.shape.resize(rank);
    std::size_t numel = 1;
    for (std::size_t r = 0; r < rank; ++r) {
      in >> rec.shape[r];
      numel *= rec.shape[r];
    }
    std::getline(in, line);  // consume end of header line
    detail::read_f64_le(in, rec.data, numel);
    std::getline(in, line);  // trailing newline after payload
    ckpt.params.push_back(std::move(rec));
  }
  return ckpt;
}

}  // namespace embedkit
