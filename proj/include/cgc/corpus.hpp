#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace cgc::corpus {

using Region = std::pair<std::size_t, std::size_t>;  // [begin, end) token offsets

// Byte-level tokenizer: one token per byte, vocabulary 256.
inline constexpr int kByteVocab = 256;
std::vector<int> tokenize(std::string_view text);
std::string read_file(const std::string& path);
std::uint64_t fingerprint(std::span<const int> tokens);

/// The corpus is cut into n_shards equal contiguous shards; shard index is
/// the category label. The tail `holdout_fraction` of each shard is held out
/// for evaluation, the head is used for training and calibration.
struct Layout {
  std::vector<Region> train;
  std::vector<Region> heldout;
};
Layout layout(std::size_t n_tokens, int n_shards, double holdout_fraction);

// Concatenation of the given regions.
std::vector<int> gather(std::span<const int> tokens, const std::vector<Region>& regions);

/// Seeded synthetic text of roughly `bytes` bytes in four equal contiguous
/// sections: narrative prose, arithmetic statements, code-like listings and
/// key/value records. Used as the default desk corpus.
std::string generate(std::size_t bytes, std::uint64_t seed);

}  // namespace cgc::corpus
