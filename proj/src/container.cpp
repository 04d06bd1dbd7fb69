#include "cgc/container.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include "cgc/error.hpp"

namespace cgc::container {

static_assert(std::endian::native == std::endian::little, "artifact I/O assumes a little-endian host");

namespace {

template <typename T>
void put(std::ofstream& out, T value) {
  out.write(reinterpret_cast<const char*>(&value), sizeof value);
}

template <typename T>
T get(std::ifstream& in, const std::string& path) {
  T value{};
  if (!in.read(reinterpret_cast<char*>(&value), sizeof value)) throw ArtifactError(path + ": truncated header");
  return value;
}

std::ifstream open_checked(const std::string& path, std::array<char, 4> magic, nlohmann::json& header) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ArtifactError("cannot open " + path);
  std::array<char, 4> got{};
  in.read(got.data(), 4);
  if (!in || got != magic) {
    throw ArtifactError(path + ": bad magic, expected " + std::string(magic.data(), 4));
  }
  const auto version = get<std::uint16_t>(in, path);
  if (version != kVersion) throw ArtifactError(path + ": unsupported version " + std::to_string(version));
  const auto header_len = get<std::uint32_t>(in, path);
  std::string text(header_len, '\0');
  if (!in.read(text.data(), header_len)) throw ArtifactError(path + ": truncated JSON header");
  try {
    header = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw ArtifactError(path + ": malformed JSON header: " + e.what());
  }
  return in;
}

}  // namespace

void write(const std::string& path, std::array<char, 4> magic, nlohmann::json header,
           const std::vector<TensorRecord>& tensors) {
  auto directory = nlohmann::json::array();
  std::size_t offset = 0;
  for (const auto& t : tensors) {
    std::size_t expected = 1;
    for (auto d : t.shape) expected *= d;
    if (expected != t.values.size()) throw InvalidArgument("tensor " + t.name + ": shape does not match data size");
    directory.push_back({{"name", t.name}, {"shape", t.shape}, {"offset", offset}});
    offset += t.values.size() * sizeof(float);
  }
  header["tensors"] = std::move(directory);
  const std::string text = header.dump();

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw ArtifactError("cannot write " + path);
  out.write(magic.data(), 4);
  put<std::uint16_t>(out, kVersion);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(text.size()));
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto& t : tensors) {
    out.write(reinterpret_cast<const char*>(t.values.data()),
              static_cast<std::streamsize>(t.values.size() * sizeof(float)));
  }
  if (!out) throw ArtifactError("write failed: " + path);
}

Loaded read(const std::string& path, std::array<char, 4> magic) {
  Loaded loaded;
  auto in = open_checked(path, magic, loaded.header);
  const auto data_begin = in.tellg();
  in.seekg(0, std::ios::end);
  const auto bytes = static_cast<std::size_t>(in.tellg() - data_begin);
  if (bytes % sizeof(float) != 0) throw ArtifactError(path + ": data section is not a whole number of f32");
  in.seekg(data_begin);
  loaded.data.resize(bytes / sizeof(float));
  in.read(reinterpret_cast<char*>(loaded.data.data()), static_cast<std::streamsize>(bytes));
  if (!in) throw ArtifactError(path + ": truncated data section");
  return loaded;
}

nlohmann::json read_header(const std::string& path, std::array<char, 4> magic) {
  nlohmann::json header;
  open_checked(path, magic, header);
  return header;
}

std::span<const float> Loaded::tensor(const std::string& name, const std::vector<std::size_t>& shape) const {
  for (const auto& entry : header.at("tensors")) {
    if (entry.at("name") != name) continue;
    const auto stored = entry.at("shape").get<std::vector<std::size_t>>();
    if (stored != shape) throw ArtifactError("tensor " + name + ": shape mismatch");
    std::size_t count = 1;
    for (auto d : shape) count *= d;
    const auto offset = entry.at("offset").get<std::size_t>();
    if (offset % sizeof(float) != 0 || offset / sizeof(float) + count > data.size()) {
      throw ArtifactError("tensor " + name + ": out of bounds");
    }
    return {data.data() + offset / sizeof(float), count};
  }
  throw ArtifactError("missing tensor " + name);
}

}  // namespace cgc::container
