#pragma once

// Binary artifact container shared by checkpoints, activation dumps and SAE
// banks:
//
//   magic[4] | version u16 | header_len u32 | header (JSON, UTF-8) | f32 data
//
// All integers and floats are little-endian. The header carries a "tensors"
// array of {name, shape, offset}, offsets in bytes from the start of the data
// section.

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

namespace cgc::container {

inline constexpr std::uint16_t kVersion = 1;

struct TensorRecord {
  std::string name;
  std::vector<std::size_t> shape;
  std::span<const float> values;
};

void write(const std::string& path, std::array<char, 4> magic, nlohmann::json header,
           const std::vector<TensorRecord>& tensors);

struct Loaded {
  nlohmann::json header;
  std::vector<float> data;  // whole data section

  // Values of a named tensor; checks the stored shape against `shape`.
  std::span<const float> tensor(const std::string& name, const std::vector<std::size_t>& shape) const;
};

Loaded read(const std::string& path, std::array<char, 4> magic);

// Parses only the header (no tensor data).
nlohmann::json read_header(const std::string& path, std::array<char, 4> magic);

}  // namespace cgc::container
