#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "qart/data.hpp"
#include "qart/image_io.hpp"

namespace qart::io {

enum class Family { Gradient, Checker, Blobs, Strokes };

std::string to_string(Family f);

/// Normalised 5x5 Gaussian taps (separable row) for a given sigma.
std::array<double, 5> gaussian_taps5(double sigma);

/// Gaussian blur (sigma 1, 5x5, replicated borders), 4x box downsample,
/// additive Gaussian noise (seeded), clamp to [0, 1], 8-bit rounding.
/// Throws ParameterError unless both sides are multiples of 4.
ImageFile degrade(const ImageFile& hr, std::uint64_t seed, double noise_sigma = 0.02);

/// Procedural HR image from one of the families, fully determined by seed.
ImageFile synthesize(Family family, std::size_t size, std::uint64_t seed);
/// Family chosen by index, image seeded with base_seed + index.
ImageFile synthesize_indexed(std::size_t index, std::size_t size, std::uint64_t base_seed);

struct SetSpec {
  std::size_t count = 64;
  std::size_t hr_size = 128;
  std::uint64_t seed = 0;
  double noise_sigma = 0.02;
};

/// In-memory synthetic pairs; pair i is built from seed + i.
Dataset make_synthetic_set(const SetSpec& spec);

struct ManifestRow {
  std::size_t index = 0;
  std::string lr_file;
  std::string hr_file;
  std::uint64_t lr_digest = 0;
  std::uint64_t hr_digest = 0;
};

/// Generates the set, writes lr_XXXX.ppm / hr_XXXX.ppm and manifest.csv into
/// `dir` and returns the rows. Throws IoError when `dir` is unwritable.
std::vector<ManifestRow> build_calibration_set(const SetSpec& spec, const std::filesystem::path& dir);

std::vector<ManifestRow> read_manifest(const std::filesystem::path& dir);
/// Loads every pair listed in dir/manifest.csv.
Dataset load_dataset(const std::filesystem::path& dir);

}  // namespace qart::io
