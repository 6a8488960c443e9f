#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <vector>

#include "qart/tensor.hpp"

namespace qart::io {

/// Interleaved 8-bit RGB raster.
struct ImageFile {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<std::uint8_t> rgb;  // width * height * 3

  bool operator==(const ImageFile&) const = default;
};

/// Binary PPM (P6, maxval 255, single newline separators).
std::vector<std::uint8_t> encode_ppm(const ImageFile& img);
/// Accepts any whitespace/comment layout allowed by the P6 grammar with maxval
/// 255. Throws FormatError naming the byte offset of the problem.
ImageFile decode_ppm(const std::vector<std::uint8_t>& bytes);

void save_image(const std::filesystem::path& path, const ImageFile& img);
ImageFile load_image(const std::filesystem::path& path);

/// [3, 1, H, W] map with values v / 255.
Tensor to_tensor(const ImageFile& img);
/// Clamps to [0, 1] and rounds to the nearest 8-bit level. Accepts [3, 1, H, W].
ImageFile from_tensor(const Tensor& t);

/// FNV-1a 64-bit digest of a byte buffer.
std::uint64_t fnv1a(const std::uint8_t* data, std::size_t size, std::uint64_t seed = 0xcbf29ce484222325ULL);
std::uint64_t file_digest(const std::filesystem::path& path);
std::vector<std::uint8_t> read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes);

}  // namespace qart::io
