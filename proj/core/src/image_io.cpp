#include "qart/image_io.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <iterator>
#include <string>

#include "qart/errors.hpp"

namespace qart::io {

std::vector<std::uint8_t> encode_ppm(const ImageFile& img) {
  if (img.width == 0 || img.height == 0) throw FormatError("cannot encode an empty image");
  if (img.rgb.size() != img.width * img.height * 3) throw FormatError("pixel payload does not match dimensions");
  const std::string header = "P6\n" + std::to_string(img.width) + " " + std::to_string(img.height) + "\n255\n";
  std::vector<std::uint8_t> out(header.begin(), header.end());
  out.insert(out.end(), img.rgb.begin(), img.rgb.end());
  return out;
}

namespace {

class HeaderReader {
 public:
  explicit HeaderReader(const std::vector<std::uint8_t>& b) : bytes_(b) {}

  void skip_space_and_comments() {
    while (pos_ < bytes_.size()) {
      if (bytes_[pos_] == '#') {
        while (pos_ < bytes_.size() && bytes_[pos_] != '\n') ++pos_;
      } else if (std::isspace(bytes_[pos_])) {
        ++pos_;
      } else {
        break;
      }
    }
  }

  std::size_t number(const char* what) {
    skip_space_and_comments();
    const std::size_t start = pos_;
    std::size_t value = 0;
    while (pos_ < bytes_.size() && std::isdigit(bytes_[pos_])) {
      value = value * 10 + static_cast<std::size_t>(bytes_[pos_] - '0');
      if (value > 1'000'000) throw FormatError(std::string(what) + " too large at byte " + std::to_string(start));
      ++pos_;
    }
    if (pos_ == start) throw FormatError(std::string("expected ") + what + " at byte " + std::to_string(start));
    return value;
  }

  std::size_t pos_ = 0;

 private:
  const std::vector<std::uint8_t>& bytes_;
};

}  // namespace

ImageFile decode_ppm(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < 2 || bytes[0] != 'P' || bytes[1] != '6') throw FormatError("missing P6 magic at byte 0");
  HeaderReader r(bytes);
  r.pos_ = 2;
  ImageFile img;
  img.width = r.number("width");
  img.height = r.number("height");
  r.skip_space_and_comments();
  const std::size_t maxval_at = r.pos_;
  const std::size_t maxval = r.number("maxval");
  if (maxval != 255) throw FormatError("maxval " + std::to_string(maxval) + " unsupported at byte " + std::to_string(maxval_at));
  if (img.width == 0 || img.height == 0) throw FormatError("zero image dimension in header");
  if (r.pos_ >= bytes.size() || !std::isspace(bytes[r.pos_])) {
    throw FormatError("expected single whitespace after maxval at byte " + std::to_string(r.pos_));
  }
  const std::size_t payload_at = r.pos_ + 1;
  const std::size_t expected = img.width * img.height * 3;
  const std::size_t actual = bytes.size() - payload_at;
  if (actual != expected) {
    throw FormatError("payload at byte " + std::to_string(payload_at) + " has " + std::to_string(actual) +
                      " bytes, expected " + std::to_string(expected));
  }
  img.rgb.assign(bytes.begin() + static_cast<std::ptrdiff_t>(payload_at), bytes.end());
  return img;
}

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("short write to " + path.string());
}

void save_image(const std::filesystem::path& path, const ImageFile& img) { write_file(path, encode_ppm(img)); }

ImageFile load_image(const std::filesystem::path& path) { return decode_ppm(read_file(path)); }

Tensor to_tensor(const ImageFile& img) {
  const std::size_t plane = img.width * img.height;
  if (img.rgb.size() != plane * 3) throw FormatError("pixel payload does not match dimensions");
  std::vector<double> v(plane * 3);
  for (std::size_t p = 0; p < plane; ++p)
    for (std::size_t c = 0; c < 3; ++c) v[c * plane + p] = img.rgb[p * 3 + c] / 255.0;
  return Tensor(Shape{3, 1, img.height, img.width}, std::move(v));
}

ImageFile from_tensor(const Tensor& t) {
  if (t.rank() != 4 || t.dim(0) != 3 || t.dim(1) != 1) {
    throw DimensionError("expected a [3,1,H,W] image, got " + shape_string(t.shape()));
  }
  ImageFile img;
  img.height = t.dim(2);
  img.width = t.dim(3);
  const std::size_t plane = img.width * img.height;
  img.rgb.resize(plane * 3);
  const auto d = t.data();
  for (std::size_t p = 0; p < plane; ++p)
    for (std::size_t c = 0; c < 3; ++c) {
      const double v = std::clamp(d[c * plane + p], 0.0, 1.0);
      img.rgb[p * 3 + c] = static_cast<std::uint8_t>(std::lround(v * 255.0));
    }
  return img;
}

std::uint64_t fnv1a(const std::uint8_t* data, std::size_t size, std::uint64_t seed) {
  std::uint64_t h = seed;
  for (std::size_t i = 0; i < size; ++i) {
    h ^= data[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::uint64_t file_digest(const std::filesystem::path& path) {
  const auto bytes = read_file(path);
  return fnv1a(bytes.data(), bytes.size());
}

}  // namespace qart::io
