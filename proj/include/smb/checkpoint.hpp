#pragma once

// Flat binary container of named f32 tensors.
//
//   "SMBCKPT\0"  u32 version  u32 count
//   count x { u32 name_len, name bytes, u32 rank, rank x u64 dim, f32[] payload }
//
// All integers and floats are little-endian.

#include "smb/tensor.hpp"

#include <filesystem>
#include <string>
#include <vector>

namespace smb::nn {

inline constexpr std::uint32_t kContainerVersion = 1;

struct TensorRecord {
    std::string name;
    Shape shape;
    std::vector<float> values;
};

void write_container(const std::filesystem::path& path, const std::vector<TensorRecord>& records);

// Reads the whole file before returning; throws DataError on a bad magic,
// version, or truncated payload.
std::vector<TensorRecord> read_container(const std::filesystem::path& path);

} // namespace smb::nn
