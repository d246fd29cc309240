#pragma once

#include <filesystem>
#include <nlohmann/json.hpp>
#include <string>
#include <string_view>

#include "phd/core/nn.hpp"

namespace phd {

// Checkpoint archive: magic "PHDARCH1", u64 metadata length, JSON metadata,
// u32 tensor count, then per tensor: u32 name length, name, u32 rank,
// u32 extents, float32 values. All integers and floats little-endian.
struct Archive {
    nlohmann::json meta;
    ParamStore params;
};

// Writes to a sibling temp file and renames it into place.
void write_archive(const std::filesystem::path& path, const nlohmann::json& meta, const ParamStore& params);
Archive read_archive(const std::filesystem::path& path);

// Lowercase hex SHA-256 of a byte string.
std::string sha256_hex(std::string_view bytes);

}  // namespace phd
