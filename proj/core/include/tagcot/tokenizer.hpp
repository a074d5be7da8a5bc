#pragma once

#include <span>
#include <string>
#include <vector>

#include "tagcot/errors.hpp"

namespace tagcot {

// Byte-level vocabulary: ids 0..255 are raw bytes, specials follow. The
// round trip detokenize(tokenize(s)) is the identity on any UTF-8 string
// that fits the sequence budget.
namespace vocab {
constexpr int kBytes = 256;
constexpr int kPad = 256;
constexpr int kBos = 257;
constexpr int kEos = 258;
constexpr int kSep = 259;
constexpr int kSize = 260;

inline bool is_special(int id) { return id >= kBytes; }
}  // namespace vocab

// BOS + bytes + EOS, bytes truncated to max_seq - 2 from the front.
inline std::vector<int> tokenize(const std::string& text, int max_seq) {
  if (max_seq < 2) throw ContractError("tokenize: max_seq must be >= 2");
  const std::size_t keep =
      std::min(text.size(), static_cast<std::size_t>(max_seq - 2));
  std::vector<int> out;
  out.reserve(keep + 2);
  out.push_back(vocab::kBos);
  for (std::size_t i = 0; i < keep; ++i) {
    out.push_back(static_cast<int>(static_cast<unsigned char>(text[i])));
  }
  out.push_back(vocab::kEos);
  return out;
}

// Inverse map; special tokens are dropped.
inline std::string detokenize(std::span<const int> tokens) {
  std::string out;
  out.reserve(tokens.size());
  for (int id : tokens) {
    if (id < 0 || id >= vocab::kSize) {
      throw ContractError("detokenize: token id " + std::to_string(id) + " out of range");
    }
    if (!vocab::is_special(id)) out.push_back(static_cast<char>(id));
  }
  return out;
}

}  // namespace tagcot
