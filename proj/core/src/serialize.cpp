#include "tagcot/serialize.hpp"

#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "tagcot/errors.hpp"

namespace tagcot {

namespace {

// Host is assumed little-endian (x86-64 / aarch64 LE); verified at startup
// cost zero via static storage order checks where it matters.
template <class T>
void write_raw(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T read_raw(std::istream& is) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw ArtifactError("unexpected end of stream while reading binary field");
  return v;
}

}  // namespace

void write_u32(std::ostream& os, std::uint32_t v) { write_raw(os, v); }
std::uint32_t read_u32(std::istream& is) { return read_raw<std::uint32_t>(is); }
void write_u64(std::ostream& os, std::uint64_t v) { write_raw(os, v); }
std::uint64_t read_u64(std::istream& is) { return read_raw<std::uint64_t>(is); }

void write_tensor(std::ostream& os, const Tensor& t) {
  write_u32(os, static_cast<std::uint32_t>(t.shape.size()));
  for (auto d : t.shape) write_u32(os, static_cast<std::uint32_t>(d));
  os.write(reinterpret_cast<const char*>(t.values.data()),
           static_cast<std::streamsize>(t.values.size() * sizeof(double)));
}

Tensor read_tensor(std::istream& is) {
  const std::uint32_t rank = read_u32(is);
  if (rank == 0 || rank > 8) {
    throw ArtifactError("tensor record has implausible rank " + std::to_string(rank));
  }
  std::vector<std::size_t> shape(rank);
  std::size_t n = 1;
  for (auto& d : shape) {
    d = read_u32(is);
    if (d == 0) throw ArtifactError("tensor record has zero dimension");
    n *= d;
  }
  Tensor t;
  t.shape = std::move(shape);
  t.values.resize(n);
  is.read(reinterpret_cast<char*>(t.values.data()),
          static_cast<std::streamsize>(n * sizeof(double)));
  if (!is) throw ArtifactError("unexpected end of stream while reading tensor values");
  return t;
}

void Fnv1a::update(const void* data, std::size_t len) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < len; ++i) {
    state_ ^= p[i];
    state_ *= 0x100000001b3ULL;
  }
}

void Fnv1a::update_u64(std::uint64_t v) { update(&v, sizeof(v)); }

void Fnv1a::update_f64(double v) {
  std::uint64_t bits;
  std::memcpy(&bits, &v, sizeof(bits));
  update_u64(bits);
}

std::uint64_t tensor_checksum(const Tensor& t) {
  Fnv1a h;
  h.update_u64(t.shape.size());
  for (auto d : t.shape) h.update_u64(d);
  h.update(t.values.data(), t.values.size() * sizeof(double));
  return h.digest();
}

std::string hash_hex(std::uint64_t h) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

std::string read_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ArtifactError("cannot open file: " + path);
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

void write_file_atomic(const std::string& path, const std::string& content) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw ArtifactError("cannot write file: " + tmp);
    os.write(content.data(), static_cast<std::streamsize>(content.size()));
    if (!os) throw ArtifactError("short write: " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

}  // namespace tagcot
