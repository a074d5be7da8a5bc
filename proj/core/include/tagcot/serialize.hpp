#pragma once

#include <cstdint>
#include <istream>
#include <ostream>
#include <string>

#include "tagcot/tensor.hpp"

namespace tagcot {

// Binary tensor layout used by checkpoint and cache files:
// little-endian u32 rank, u32 per dimension, then raw f64 values.
void write_tensor(std::ostream& os, const Tensor& t);
Tensor read_tensor(std::istream& is);

void write_u32(std::ostream& os, std::uint32_t v);
std::uint32_t read_u32(std::istream& is);
void write_u64(std::ostream& os, std::uint64_t v);
std::uint64_t read_u64(std::istream& is);

// FNV-1a over arbitrary bytes; used for artifact config hashes and
// parameter-snapshot provenance checksums.
class Fnv1a {
 public:
  void update(const void* data, std::size_t len);
  void update(const std::string& s) { update(s.data(), s.size()); }
  void update_u64(std::uint64_t v);
  void update_f64(double v);
  std::uint64_t digest() const { return state_; }

 private:
  std::uint64_t state_ = 0xcbf29ce484222325ULL;
};

std::uint64_t tensor_checksum(const Tensor& t);
std::string hash_hex(std::uint64_t h);

std::string read_file(const std::string& path);
void write_file_atomic(const std::string& path, const std::string& content);

}  // namespace tagcot
