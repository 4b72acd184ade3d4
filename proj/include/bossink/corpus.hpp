#pragma once

#include <cstdint>
#include <fstream>
#include <random>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "bossink/error.hpp"
#include "bossink/model.hpp"

namespace bossink {

using Prompt = std::vector<TokenId>;

// Byte-level tokenizer: every byte is one token id in [0, 256).
inline std::vector<TokenId> tokenize_bytes(std::string_view text) {
  std::vector<TokenId> out;
  out.reserve(text.size());
  for (unsigned char ch : text) out.push_back(static_cast<TokenId>(ch));
  return out;
}

inline std::vector<TokenId> load_corpus(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open corpus '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  if (in.bad()) throw IoError("failed reading corpus '" + path + "'");
  return tokenize_bytes(ss.str());
}

// Cuts `n_prompts` windows of exactly `length` tokens at seeded offsets.
inline std::vector<Prompt> cut_prompts(const std::vector<TokenId>& stream, std::size_t n_prompts,
                                       std::size_t length, std::uint64_t seed) {
  if (length == 0) throw InputError("cut_prompts: prompt length must be positive");
  if (stream.size() < length) {
    throw InputError("corpus has " + std::to_string(stream.size()) +
                     " tokens, too short for prompts of " + std::to_string(length));
  }
  std::mt19937_64 rng(seed);
  const std::uint64_t span = stream.size() - length + 1;
  std::vector<Prompt> prompts;
  prompts.reserve(n_prompts);
  for (std::size_t i = 0; i < n_prompts; ++i) {
    const std::size_t off = static_cast<std::size_t>(rng() % span);
    prompts.emplace_back(stream.begin() + static_cast<std::ptrdiff_t>(off),
                         stream.begin() + static_cast<std::ptrdiff_t>(off + length));
  }
  return prompts;
}

}  // namespace bossink
