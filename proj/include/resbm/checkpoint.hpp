#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "resbm/model.hpp"

namespace resbm::model {

/// On-disk layout:
///
///   bytes 0..7    magic "RESBMCK1"
///   bytes 8..15   header length N, little-endian uint64
///   next N bytes  JSON header {"format", "version", "step", "config", "params": [
///                   {"name", "kind", "shape", "offset", "bytes"}, ...]}
///   remainder     parameter data, little-endian float64, offsets relative
///                 to the start of this section
///
/// The header is serialized deterministically, so load followed by save
/// reproduces the file byte for byte.
struct Checkpoint {
  ModelConfig config;
  Parameters params;
  std::uint64_t step = 0;
};

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& checkpoint);
Checkpoint decode_checkpoint(const std::vector<std::uint8_t>& bytes);

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint);
/// Throws DataError for unreadable or malformed files.
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace resbm::model
