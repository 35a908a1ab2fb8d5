#pragma once

// Flat binary parameter container:
//   magic "CECTCKPT" | u32 version | u64 config digest | u32 record count
//   then per record: u32 name length | name bytes | u32 rank |
//   u64 extents[rank] | float32 payload (little-endian throughout).
// Loading verifies the digest and fills existing tensors by name.

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "cect/tensor.hpp"

namespace cect {

using NamedFloatParams = std::vector<std::pair<std::string, Tensor>>;

void save_checkpoint(const std::string& path, std::uint64_t config_digest,
                     const NamedFloatParams& params);

// Fills the given tensors in place. Throws IoError on malformed files and
// ValidationError on digest/name/shape mismatches.
void load_checkpoint(const std::string& path, std::uint64_t expected_digest,
                     NamedFloatParams& params);

std::uint64_t read_checkpoint_digest(const std::string& path);

} // namespace cect
