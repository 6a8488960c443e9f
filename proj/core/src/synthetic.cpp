#include "qart/synthetic.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <random>
#include <sstream>

#include "qart/errors.hpp"

namespace qart::io {

std::string to_string(Family f) {
  switch (f) {
    case Family::Gradient: return "gradient";
    case Family::Checker: return "checker";
    case Family::Blobs: return "blobs";
    case Family::Strokes: return "strokes";
  }
  return "unknown";
}

std::array<double, 5> gaussian_taps5(double sigma) {
  std::array<double, 5> taps{};
  double total = 0.0;
  for (int i = 0; i < 5; ++i) {
    const double x = i - 2;
    taps[static_cast<std::size_t>(i)] = std::exp(-x * x / (2.0 * sigma * sigma));
    total += taps[static_cast<std::size_t>(i)];
  }
  for (auto& t : taps) t /= total;
  return taps;
}

namespace {

// Planar float image, channel-major.
struct Planes {
  std::size_t w = 0, h = 0;
  std::vector<double> v;
  double& at(std::size_t c, std::size_t y, std::size_t x) { return v[(c * h + y) * w + x]; }
  double at(std::size_t c, std::size_t y, std::size_t x) const { return v[(c * h + y) * w + x]; }
};

Planes to_planes(const ImageFile& img) {
  Planes p{img.width, img.height, std::vector<double>(img.width * img.height * 3)};
  for (std::size_t y = 0; y < img.height; ++y)
    for (std::size_t x = 0; x < img.width; ++x)
      for (std::size_t c = 0; c < 3; ++c) p.at(c, y, x) = img.rgb[(y * img.width + x) * 3 + c] / 255.0;
  return p;
}

ImageFile to_image(const Planes& p) {
  ImageFile img{p.w, p.h, std::vector<std::uint8_t>(p.w * p.h * 3)};
  for (std::size_t y = 0; y < p.h; ++y)
    for (std::size_t x = 0; x < p.w; ++x)
      for (std::size_t c = 0; c < 3; ++c) {
        const double v = std::clamp(p.at(c, y, x), 0.0, 1.0);
        img.rgb[(y * p.w + x) * 3 + c] = static_cast<std::uint8_t>(std::lround(v * 255.0));
      }
  return img;
}

Planes blur5(const Planes& in, const std::array<double, 5>& taps) {
  auto clampi = [](std::ptrdiff_t v, std::size_t n) {
    return static_cast<std::size_t>(std::clamp<std::ptrdiff_t>(v, 0, static_cast<std::ptrdiff_t>(n) - 1));
  };
  Planes tmp = in, out = in;
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t y = 0; y < in.h; ++y)
      for (std::size_t x = 0; x < in.w; ++x) {
        double acc = 0.0;
        for (int k = 0; k < 5; ++k) acc += taps[static_cast<std::size_t>(k)] * in.at(c, y, clampi(static_cast<std::ptrdiff_t>(x) + k - 2, in.w));
        tmp.at(c, y, x) = acc;
      }
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t y = 0; y < in.h; ++y)
      for (std::size_t x = 0; x < in.w; ++x) {
        double acc = 0.0;
        for (int k = 0; k < 5; ++k) acc += taps[static_cast<std::size_t>(k)] * tmp.at(c, clampi(static_cast<std::ptrdiff_t>(y) + k - 2, in.h), x);
        out.at(c, y, x) = acc;
      }
  return out;
}

std::array<double, 3> random_color(std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  return {u(rng), u(rng), u(rng)};
}

}  // namespace

ImageFile degrade(const ImageFile& hr, std::uint64_t seed, double noise_sigma) {
  if (hr.width == 0 || hr.height == 0 || hr.width % 4 != 0 || hr.height % 4 != 0) {
    throw ParameterError("degrade needs sides divisible by 4, got " + std::to_string(hr.width) + "x" +
                         std::to_string(hr.height));
  }
  const Planes blurred = blur5(to_planes(hr), gaussian_taps5(1.0));
  Planes lr{hr.width / 4, hr.height / 4, std::vector<double>(hr.width * hr.height * 3 / 16)};
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> noise(0.0, 1.0);
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t y = 0; y < lr.h; ++y)
      for (std::size_t x = 0; x < lr.w; ++x) {
        double acc = 0.0;
        for (std::size_t dy = 0; dy < 4; ++dy)
          for (std::size_t dx = 0; dx < 4; ++dx) acc += blurred.at(c, 4 * y + dy, 4 * x + dx);
        lr.at(c, y, x) = acc / 16.0;
      }
  if (noise_sigma > 0.0) {
    for (auto& v : lr.v) v = std::clamp(v + noise_sigma * noise(rng), 0.0, 1.0);
  }
  return to_image(lr);
}

ImageFile synthesize(Family family, std::size_t size, std::uint64_t seed) {
  if (size == 0) throw ParameterError("image size must be positive");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Planes p{size, size, std::vector<double>(size * size * 3)};
  const double n = static_cast<double>(size);
  auto fill = [&](auto&& colour_at) {
    for (std::size_t y = 0; y < size; ++y)
      for (std::size_t x = 0; x < size; ++x) {
        const auto col = colour_at(static_cast<double>(x), static_cast<double>(y));
        for (std::size_t c = 0; c < 3; ++c) p.at(c, y, x) = col[c];
      }
  };
  switch (family) {
    case Family::Gradient: {
      const auto a = random_color(rng), b = random_color(rng);
      const double angle = u(rng) * 2.0 * M_PI;
      const double dx = std::cos(angle), dy = std::sin(angle);
      fill([&](double x, double y) {
        const double t = std::clamp(0.5 + ((x / n - 0.5) * dx + (y / n - 0.5) * dy), 0.0, 1.0);
        return std::array<double, 3>{a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1]), a[2] + t * (b[2] - a[2])};
      });
      break;
    }
    case Family::Checker: {
      const auto a = random_color(rng), b = random_color(rng);
      const double cell = 8.0 + std::floor(u(rng) * 25.0);
      const double ox = std::floor(u(rng) * cell), oy = std::floor(u(rng) * cell);
      fill([&](double x, double y) {
        const auto parity = (static_cast<long>(std::floor((x + ox) / cell)) + static_cast<long>(std::floor((y + oy) / cell))) & 1;
        return parity ? a : b;
      });
      break;
    }
    case Family::Blobs: {
      const auto bg = random_color(rng);
      const int count = 3 + static_cast<int>(u(rng) * 4.0);
      struct Blob {
        double x, y, r;
        std::array<double, 3> col;
      };
      std::vector<Blob> blobs;
      for (int i = 0; i < count; ++i) blobs.push_back({u(rng) * n, u(rng) * n, (0.05 + 0.15 * u(rng)) * n, random_color(rng)});
      fill([&](double x, double y) {
        std::array<double, 3> col = bg;
        for (const auto& b : blobs) {
          const double d2 = ((x - b.x) * (x - b.x) + (y - b.y) * (y - b.y)) / (b.r * b.r);
          const double w = std::exp(-0.5 * d2);
          for (std::size_t c = 0; c < 3; ++c) col[c] = col[c] * (1.0 - w) + b.col[c] * w;
        }
        return col;
      });
      break;
    }
    case Family::Strokes: {
      const auto bg = random_color(rng);
      fill([&](double, double) { return bg; });
      const int count = 4 + static_cast<int>(u(rng) * 6.0);
      for (int i = 0; i < count; ++i) {
        const auto col = random_color(rng);
        const double x0 = u(rng) * n, y0 = u(rng) * n;
        const double len = (0.1 + 0.3 * u(rng)) * n, angle = std::floor(u(rng) * 4.0) * M_PI / 4.0;
        const double half_width = 1.0 + 2.0 * u(rng);
        const double x1 = x0 + len * std::cos(angle), y1 = y0 + len * std::sin(angle);
        for (std::size_t y = 0; y < size; ++y)
          for (std::size_t x = 0; x < size; ++x) {
            const double px = static_cast<double>(x) - x0, py = static_cast<double>(y) - y0;
            const double vx = x1 - x0, vy = y1 - y0;
            const double t = std::clamp((px * vx + py * vy) / (vx * vx + vy * vy), 0.0, 1.0);
            const double ex = px - t * vx, ey = py - t * vy;
            if (ex * ex + ey * ey <= half_width * half_width) {
              for (std::size_t c = 0; c < 3; ++c) p.at(c, y, x) = col[c];
            }
          }
      }
      break;
    }
  }
  return to_image(p);
}

ImageFile synthesize_indexed(std::size_t index, std::size_t size, std::uint64_t base_seed) {
  return synthesize(static_cast<Family>(index % 4), size, base_seed + index);
}

Dataset make_synthetic_set(const SetSpec& spec) {
  Dataset out;
  out.reserve(spec.count);
  for (std::size_t i = 0; i < spec.count; ++i) {
    const ImageFile hr = synthesize_indexed(i, spec.hr_size, spec.seed);
    out.push_back({to_tensor(degrade(hr, spec.seed + i, spec.noise_sigma)), to_tensor(hr)});
  }
  return out;
}

namespace {

std::string numbered(const char* prefix, std::size_t i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%s_%04zu.ppm", prefix, i);
  return buf;
}

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

}  // namespace

std::vector<ManifestRow> build_calibration_set(const SetSpec& spec, const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
  std::vector<ManifestRow> rows;
  for (std::size_t i = 0; i < spec.count; ++i) {
    const ImageFile hr = synthesize_indexed(i, spec.hr_size, spec.seed);
    const ImageFile lr = degrade(hr, spec.seed + i, spec.noise_sigma);
    ManifestRow row{i, numbered("lr", i), numbered("hr", i), 0, 0};
    const auto lr_bytes = encode_ppm(lr), hr_bytes = encode_ppm(hr);
    write_file(dir / row.lr_file, lr_bytes);
    write_file(dir / row.hr_file, hr_bytes);
    row.lr_digest = fnv1a(lr_bytes.data(), lr_bytes.size());
    row.hr_digest = fnv1a(hr_bytes.data(), hr_bytes.size());
    rows.push_back(row);
  }
  std::ofstream manifest(dir / "manifest.csv", std::ios::trunc);
  if (!manifest) throw IoError("cannot write " + (dir / "manifest.csv").string());
  manifest << "index,lr,hr,lr_fnv1a,hr_fnv1a\n";
  for (const auto& r : rows) {
    manifest << r.index << ',' << r.lr_file << ',' << r.hr_file << ',' << hex64(r.lr_digest) << ','
             << hex64(r.hr_digest) << '\n';
  }
  if (!manifest) throw IoError("short write to manifest in " + dir.string());
  return rows;
}

std::vector<ManifestRow> read_manifest(const std::filesystem::path& dir) {
  std::ifstream in(dir / "manifest.csv");
  if (!in) throw IoError("no manifest.csv in " + dir.string());
  std::string line;
  std::getline(in, line);
  std::vector<ManifestRow> rows;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string index, lr, hr, lrd, hrd;
    if (!std::getline(ss, index, ',') || !std::getline(ss, lr, ',') || !std::getline(ss, hr, ',') ||
        !std::getline(ss, lrd, ',') || !std::getline(ss, hrd, ',')) {
      throw FormatError("manifest line " + std::to_string(line_no) + " has too few fields");
    }
    try {
      rows.push_back({std::stoull(index), lr, hr, std::stoull(lrd, nullptr, 16), std::stoull(hrd, nullptr, 16)});
    } catch (const std::exception&) {
      throw FormatError("manifest line " + std::to_string(line_no) + " is malformed");
    }
  }
  return rows;
}

Dataset load_dataset(const std::filesystem::path& dir) {
  Dataset out;
  for (const auto& row : read_manifest(dir)) {
    out.push_back({to_tensor(load_image(dir / row.lr_file)), to_tensor(load_image(dir / row.hr_file))});
  }
  return out;
}

}  // namespace qart::io
