#pragma once

// Binary checkpoint container:
//   "GFCK" | u32 version | u32 element bytes | u64 manifest length | manifest (JSON)
//   | u32 block count | blocks...
// block: u32 name length | name | u32 rank | u64 dims[rank] | little-endian payload

#include <cstdint>
#include <string>
#include <vector>

#include "json.hpp"

#include "gatefuse/data_io.hpp"
#include "gatefuse/tensor.hpp"

namespace gatefuse {

inline constexpr char kCheckpointMagic[4] = {'G', 'F', 'C', 'K'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

template <class Real>
struct CheckpointBlock {
  std::string name;
  Shape shape;
  std::vector<Real> data;
  bool operator==(const CheckpointBlock&) const = default;
};

template <class Real>
struct CheckpointFile {
  nlohmann::json manifest;
  std::vector<CheckpointBlock<Real>> blocks;

  const CheckpointBlock<Real>& block(const std::string& name) const {
    for (const auto& b : blocks)
      if (b.name == name) return b;
    throw FormatError("checkpoint has no block named '" + name + "'");
  }
};

template <class Real>
std::string serialize_checkpoint(const CheckpointFile<Real>& ck) {
  std::string out(kCheckpointMagic, 4);
  le::put(out, kCheckpointVersion);
  le::put(out, static_cast<std::uint32_t>(sizeof(Real)));
  const std::string manifest = ck.manifest.dump(1);
  le::put(out, static_cast<std::uint64_t>(manifest.size()));
  out += manifest;
  le::put(out, static_cast<std::uint32_t>(ck.blocks.size()));
  for (const auto& b : ck.blocks) {
    if (numel(b.shape) != b.data.size())
      throw std::invalid_argument("checkpoint block '" + b.name + "' shape does not match data");
    le::put(out, static_cast<std::uint32_t>(b.name.size()));
    out += b.name;
    le::put(out, static_cast<std::uint32_t>(b.shape.size()));
    for (auto d : b.shape) le::put(out, static_cast<std::uint64_t>(d));
    for (Real v : b.data) le::put(out, v);
  }
  return out;
}

template <class Real>
CheckpointFile<Real> parse_checkpoint(std::string_view bytes, const std::string& name = "checkpoint") {
  le::Reader r(bytes, name);
  if (r.take(4, "magic") != std::string_view(kCheckpointMagic, 4))
    throw FormatError(name + ": bad magic at byte offset 0 (expected GFCK)");
  const auto version = r.get<std::uint32_t>("version");
  if (version != kCheckpointVersion) r.fail("unsupported version " + std::to_string(version));
  const auto width = r.get<std::uint32_t>("element width");
  if (width != sizeof(Real))
    throw std::invalid_argument(name + ": stored with " + std::to_string(8 * width) +
                                "-bit floats, this build reads " + std::to_string(8 * sizeof(Real)) + "-bit");
  CheckpointFile<Real> ck;
  const auto manifest_len = r.get<std::uint64_t>("manifest length");
  const auto manifest = r.take(manifest_len, "manifest");
  try {
    ck.manifest = nlohmann::json::parse(manifest);
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError(name + ": manifest is not valid JSON (" + e.what() + ")");
  }
  const auto count = r.get<std::uint32_t>("block count");
  for (std::uint32_t i = 0; i < count; ++i) {
    CheckpointBlock<Real> b;
    const auto len = r.get<std::uint32_t>("block name length");
    b.name = std::string(r.take(len, "block name"));
    const auto rank = r.get<std::uint32_t>("block rank");
    if (rank > 8) r.fail("implausible rank " + std::to_string(rank) + " for block '" + b.name + "'");
    std::uint64_t n = 1;
    for (std::uint32_t k = 0; k < rank; ++k) {
      const auto d = r.get<std::uint64_t>("block dims");
      b.shape.push_back(static_cast<std::size_t>(d));
      n *= d;
    }
    r.need(n * sizeof(Real), "block payload");
    b.data.resize(n);
    for (auto& v : b.data) v = r.get<Real>("block payload");
    ck.blocks.push_back(std::move(b));
  }
  if (r.remaining() != 0) r.fail(std::to_string(r.remaining()) + " trailing bytes");
  return ck;
}

template <class Real>
void write_checkpoint(const std::string& path, const CheckpointFile<Real>& ck) {
  atomic_write(path, serialize_checkpoint(ck));
}

template <class Real>
CheckpointFile<Real> read_checkpoint(const std::string& path) {
  return parse_checkpoint<Real>(read_file(path), path);
}

/// Element width recorded in a checkpoint header, without parsing the rest.
inline std::uint32_t checkpoint_element_bytes(const std::string& path) {
  const auto bytes = read_file(path);
  le::Reader r(bytes, path);
  if (r.take(4, "magic") != std::string_view(kCheckpointMagic, 4))
    throw FormatError(path + ": bad magic at byte offset 0 (expected GFCK)");
  r.get<std::uint32_t>("version");
  return r.get<std::uint32_t>("element width");
}

}  // namespace gatefuse
