#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "qart/tensor.hpp"

namespace qart::io {

inline constexpr std::uint32_t kCheckpointVersion = 1;

/// Binary container:
///   "QART" | u32 version | u32 count |
///   count x { u32 name_len | name | u32 rank | rank x u64 dim | numel x f64 }
/// All integers and floats little-endian.
std::vector<std::uint8_t> encode_checkpoint(const std::vector<NamedTensor>& entries);
/// Throws FormatError (with byte offset) on bad magic, version or truncation.
std::vector<NamedTensor> decode_checkpoint(const std::vector<std::uint8_t>& bytes);

void save_checkpoint(const std::filesystem::path& path, const std::vector<NamedTensor>& entries);
std::vector<NamedTensor> load_checkpoint(const std::filesystem::path& path);

}  // namespace qart::io
