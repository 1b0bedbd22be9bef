#pragma once

#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <string>

#include "smfnet/core/nn.hpp"

namespace smfnet {

/// Single-file checkpoint: text manifest (key = value lines, including the
/// parameter inventory) followed by float32 weight blobs.
struct Manifest {
  std::map<std::string, std::string> kv;

  std::string& operator[](const std::string& k) { return kv[k]; }
  bool has(const std::string& k) const { return kv.count(k) > 0; }
  std::string get(const std::string& k, const std::string& dflt = "") const {
    auto it = kv.find(k);
    return it == kv.end() ? dflt : it->second;
  }

  std::string to_text() const {
    std::ostringstream os;
    for (auto& [k, v] : kv) os << k << " = " << v << "\n";
    return os.str();
  }
  static Manifest from_text(const std::string& text) {
    Manifest m;
    std::istringstream is(text);
    std::string line;
    while (std::getline(is, line)) {
      auto eq = line.find(" = ");
      if (eq == std::string::npos) continue;
      m.kv[line.substr(0, eq)] = line.substr(eq + 3);
    }
    return m;
  }
};

namespace detail {
inline void write_u64(std::ostream& os, std::uint64_t v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(v));
}
inline std::uint64_t read_u64(std::istream& is) {
  std::uint64_t v = 0;
  is.read(reinterpret_cast<char*>(&v), sizeof(v));
  return v;
}
inline void write_str(std::ostream& os, const std::string& s) {
  write_u64(os, s.size());
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}
inline std::string read_str(std::istream& is) {
  std::string s(read_u64(is), '\0');
  is.read(s.data(), static_cast<std::streamsize>(s.size()));
  return s;
}
}  // namespace detail

inline constexpr char kCkptMagic[] = "SMFCKPT1";

template <class T>
void save_checkpoint(const std::string& path, Manifest manifest, const NamedParams<T>& params) {
  std::ostringstream inv;
  for (auto& [name, p] : params) {
    inv.str("");
    inv << "param." << name;
    std::ostringstream sh;
    for (std::size_t i = 0; i < p.shape().size(); ++i) sh << (i ? "x" : "") << p.shape()[i];
    manifest[inv.str()] = sh.str();
  }
  std::ofstream os(path, std::ios::binary);
  check(static_cast<bool>(os), "save_checkpoint: cannot open " + path);
  os.write(kCkptMagic, 8);
  detail::write_str(os, manifest.to_text());
  detail::write_u64(os, params.size());
  for (auto& [name, p] : params) {
    detail::write_str(os, name);
    detail::write_u64(os, p.shape().size());
    for (int d : p.shape()) detail::write_u64(os, static_cast<std::uint64_t>(d));
    std::vector<float> buf(static_cast<std::size_t>(p.numel()));
    for (long long i = 0; i < p.numel(); ++i) buf[static_cast<std::size_t>(i)] = static_cast<float>(p.val()[i]);
    os.write(reinterpret_cast<const char*>(buf.data()),
             static_cast<std::streamsize>(buf.size() * sizeof(float)));
  }
  check(static_cast<bool>(os), "save_checkpoint: write failed for " + path);
}

inline Manifest read_manifest(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  check(static_cast<bool>(is), "read_manifest: cannot open " + path);
  char magic[8];
  is.read(magic, 8);
  check(std::string(magic, 8) == kCkptMagic, "read_manifest: bad magic in " + path);
  return Manifest::from_text(detail::read_str(is));
}

/// Loads weights into an existing parameter set; names and shapes must match.
template <class T>
Manifest load_checkpoint(const std::string& path, NamedParams<T>& params) {
  std::ifstream is(path, std::ios::binary);
  check(static_cast<bool>(is), "load_checkpoint: cannot open " + path);
  char magic[8];
  is.read(magic, 8);
  check(std::string(magic, 8) == kCkptMagic, "load_checkpoint: bad magic");
  Manifest manifest = Manifest::from_text(detail::read_str(is));
  std::map<std::string, Var<T>> by_name;
  for (auto& [name, p] : params) by_name.emplace(name, p);
  std::uint64_t count = detail::read_u64(is);
  std::size_t loaded = 0;
  for (std::uint64_t i = 0; i < count; ++i) {
    std::string name = detail::read_str(is);
    std::uint64_t rank = detail::read_u64(is);
    std::vector<int> shape(rank);
    for (auto& d : shape) d = static_cast<int>(detail::read_u64(is));
    std::vector<float> buf(static_cast<std::size_t>(Tensor<T>::numel_of(shape)));
    is.read(reinterpret_cast<char*>(buf.data()),
            static_cast<std::streamsize>(buf.size() * sizeof(float)));
    auto it = by_name.find(name);
    check(it != by_name.end(), "load_checkpoint: unexpected parameter " + name);
    check(it->second.shape() == shape, "load_checkpoint: shape mismatch for " + name);
    for (std::size_t j = 0; j < buf.size(); ++j) it->second.val()[static_cast<long long>(j)] = static_cast<T>(buf[j]);
    ++loaded;
  }
  check(loaded == by_name.size(), "load_checkpoint: parameter count mismatch");
  return manifest;
}

/// Loads whatever subset of `params` the checkpoint contains (used to seed a
/// fusion-enabled model from a reconstruction-only checkpoint). Every stored
/// parameter must exist in `params` with a matching shape; parameters absent
/// from the file keep their initial values. Returns the loaded names.
template <class T>
std::vector<std::string> load_checkpoint_partial(const std::string& path, NamedParams<T>& params) {
  std::ifstream is(path, std::ios::binary);
  check(static_cast<bool>(is), "load_checkpoint_partial: cannot open " + path);
  char magic[8];
  is.read(magic, 8);
  check(std::string(magic, 8) == kCkptMagic, "load_checkpoint_partial: bad magic");
  detail::read_str(is);  // manifest
  std::map<std::string, Var<T>> by_name;
  for (auto& [name, p] : params) by_name.emplace(name, p);
  std::uint64_t count = detail::read_u64(is);
  std::vector<std::string> loaded;
  for (std::uint64_t i = 0; i < count; ++i) {
    std::string name = detail::read_str(is);
    std::uint64_t rank = detail::read_u64(is);
    std::vector<int> shape(rank);
    for (auto& d : shape) d = static_cast<int>(detail::read_u64(is));
    std::vector<float> buf(static_cast<std::size_t>(Tensor<T>::numel_of(shape)));
    is.read(reinterpret_cast<char*>(buf.data()),
            static_cast<std::streamsize>(buf.size() * sizeof(float)));
    auto it = by_name.find(name);
    check(it != by_name.end(), "load_checkpoint_partial: unexpected parameter " + name);
    check(it->second.shape() == shape, "load_checkpoint_partial: shape mismatch for " + name);
    for (std::size_t j = 0; j < buf.size(); ++j)
      it->second.val()[static_cast<long long>(j)] = static_cast<T>(buf[j]);
    loaded.push_back(name);
  }
  return loaded;
}

}  // namespace smfnet
