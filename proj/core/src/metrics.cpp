#include "qart/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "qart/errors.hpp"
#include "qart/model.hpp"

namespace qart::metrics {

namespace {

void check_same(const Tensor& a, const Tensor& b, const char* what) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(what) + ": shapes " + shape_string(a.shape()) + " and " +
                         shape_string(b.shape()) + " differ");
  }
}

std::vector<double> ranks(std::span<const double> x) {
  std::vector<std::size_t> idx(x.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t i, std::size_t j) { return x[i] < x[j]; });
  std::vector<double> r(x.size());
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    while (j + 1 < idx.size() && x[idx[j + 1]] == x[idx[i]]) ++j;
    const double avg = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) r[idx[k]] = avg;
    i = j + 1;
  }
  return r;
}

}  // namespace

double psnr(const Tensor& a, const Tensor& b, double peak) {
  check_same(a, b, "psnr");
  if (!(peak > 0.0)) throw ParameterError("psnr peak must be positive");
  const auto x = a.data();
  const auto y = b.data();
  double sq = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) sq += (x[i] - y[i]) * (x[i] - y[i]);
  const double mse = x.empty() ? 0.0 : sq / static_cast<double>(x.size());
  if (mse < 1e-12) return kPsnrCap;
  return std::min(kPsnrCap, 10.0 * std::log10(peak * peak / mse));
}

double ssim(const Tensor& a, const Tensor& b) {
  check_same(a, b, "ssim");
  if (a.rank() != 4) throw DimensionError("ssim expects [C, N, H, W] maps");
  constexpr std::size_t win = 8;
  const std::size_t c = a.dim(0), n = a.dim(1), h = a.dim(2), w = a.dim(3);
  if (h < win || w < win) {
    throw ParameterError("ssim window 8x8 exceeds image " + std::to_string(h) + "x" + std::to_string(w));
  }
  constexpr double c1 = 0.01 * 0.01, c2 = 0.03 * 0.03;
  const auto x = a.data();
  const auto y = b.data();
  double total = 0.0;
  std::size_t windows = 0;
  for (std::size_t ch = 0; ch < c; ++ch) {
    for (std::size_t img = 0; img < n; ++img) {
      const std::size_t base = (ch * n + img) * h * w;
      for (std::size_t r0 = 0; r0 + win <= h; r0 += win) {
        for (std::size_t c0 = 0; c0 + win <= w; c0 += win) {
          double mx = 0, my = 0;
          for (std::size_t r = r0; r < r0 + win; ++r) {
            for (std::size_t q = c0; q < c0 + win; ++q) {
              mx += x[base + r * w + q];
              my += y[base + r * w + q];
            }
          }
          constexpr double count = win * win;
          mx /= count;
          my /= count;
          double vx = 0, vy = 0, cov = 0;
          for (std::size_t r = r0; r < r0 + win; ++r) {
            for (std::size_t q = c0; q < c0 + win; ++q) {
              const double dx = x[base + r * w + q] - mx, dy = y[base + r * w + q] - my;
              vx += dx * dx;
              vy += dy * dy;
              cov += dx * dy;
            }
          }
          vx /= count - 1;
          vy /= count - 1;
          cov /= count - 1;
          total += ((2 * mx * my + c1) * (2 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
          ++windows;
        }
      }
    }
  }
  return total / static_cast<double>(windows);
}

double spearman(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size()) throw DimensionError("spearman inputs differ in length");
  if (x.size() < 2) throw ParameterError("spearman needs at least two points");
  const auto rx = ranks(x);
  const auto ry = ranks(y);
  const double n = static_cast<double>(x.size());
  const double mean = (n + 1.0) / 2.0;
  double sxy = 0, sxx = 0, syy = 0;
  for (std::size_t i = 0; i < rx.size(); ++i) {
    sxy += (rx[i] - mean) * (ry[i] - mean);
    sxx += (rx[i] - mean) * (rx[i] - mean);
    syy += (ry[i] - mean) * (ry[i] - mean);
  }
  if (sxx == 0.0 || syy == 0.0) return 0.0;
  return sxy / std::sqrt(sxx * syy);
}

nlohmann::json MetricReport::to_json() const {
  return {{"tag", tag},   {"bits", bits}, {"psnr_db", psnr_db}, {"ssim", ssim}, {"latent_error", latent_error},
          {"stage_losses", stage_losses}};
}

MetricReport MetricReport::from_json(const nlohmann::json& j) {
  MetricReport r;
  r.tag = j.at("tag").get<std::string>();
  r.bits = j.at("bits").get<std::string>();
  r.psnr_db = j.at("psnr_db").get<double>();
  r.ssim = j.at("ssim").get<double>();
  r.latent_error = j.at("latent_error").get<double>();
  r.stage_losses = j.value("stage_losses", std::vector<double>{});
  return r;
}

std::string MetricReport::csv_header() { return "tag,bits,psnr_db,ssim,latent_error"; }

std::string MetricReport::csv_row() const {
  std::ostringstream os;
  os.precision(10);
  // bits contains a comma, so it is quoted.
  os << tag << ",\"" << bits << "\"," << psnr_db << ',' << ssim << ',' << latent_error;
  return os.str();
}

nlohmann::json CostReport::to_json() const {
  return {{"fp_params", fp_params},
          {"effective_params", effective_params},
          {"params_effective_mbytes", params_effective_mbytes},
          {"params_reduction", params_reduction},
          {"fp_ops", fp_ops},
          {"ops_effective", ops_effective},
          {"ops_reduction", ops_reduction}};
}

CostReport account_cost(std::span<const LayerCost> layers, int weight_bits, int activation_bits) {
  if (layers.empty()) throw AccountingError("empty layer inventory");
  if (weight_bits < 1 || weight_bits > 32 || activation_bits < 1 || activation_bits > 32) {
    throw AccountingError("bit-widths must lie in [1, 32]");
  }
  const double wf = weight_bits / 32.0;
  const double of = static_cast<double>(weight_bits * activation_bits) / 1024.0;
  CostReport r;
  for (const auto& l : layers) {
    r.fp_params += static_cast<double>(l.weights);
    r.fp_ops += static_cast<double>(l.macs);
    if (l.quantized) {
      r.effective_params += static_cast<double>(l.weights) * wf + static_cast<double>(l.overhead_params);
      r.ops_effective += static_cast<double>(l.macs) * of + static_cast<double>(l.overhead_macs);
    } else {
      r.effective_params += static_cast<double>(l.weights + l.overhead_params);
      r.ops_effective += static_cast<double>(l.macs + l.overhead_macs);
    }
  }
  r.params_effective_mbytes = r.effective_params * 4.0 / 1e6;
  r.params_reduction = r.fp_params > 0 ? std::clamp(1.0 - r.effective_params / r.fp_params, 0.0, 1.0) : 0.0;
  r.ops_reduction = r.fp_ops > 0 ? std::clamp(1.0 - r.ops_effective / r.fp_ops, 0.0, 1.0) : 0.0;
  return r;
}

std::vector<LayerCost> inventory(const model::ToyOSDSR& model, std::size_t lr_height, std::size_t lr_width) {
  if (lr_height % model::kScaleFactor != 0 || lr_width % model::kScaleFactor != 0) {
    throw AccountingError("LR size must be a multiple of 4");
  }
  std::vector<LayerCost> out;
  std::vector<bool> seen(model.module_count(), false);
  for (const auto& p : model.backbone_parameters()) {
    LayerCost l;
    l.name = p.name;
    l.weights = p.value.numel();
    bool registry = false;
    for (std::size_t m = 0; m < model.module_count(); ++m) {
      if (p.name != model.module_name(m) + ".weight") continue;
      registry = true;
      seen[m] = true;
      const std::size_t pos = model.module_positions(m, lr_height, lr_width);
      l.quantized = true;
      l.macs = l.weights * pos;
      if (model.has_quantizer(m)) {
        const auto& fq = model.quantizer(m);
        l.overhead_params = fq.overhead_params();
        l.overhead_macs = fq.overhead_macs_per_column() * pos;
      }
    }
    if (!registry) {
      if (p.name == "encoder.conv1.weight") l.macs = l.weights * (lr_height / 2) * (lr_width / 2);
      if (p.name == "encoder.conv2.weight") l.macs = l.weights * (lr_height / 4) * (lr_width / 4);
      if (p.name.ends_with(".temb_weight")) l.macs = l.weights;
    }
    out.push_back(std::move(l));
  }
  for (std::size_t m = 0; m < seen.size(); ++m) {
    if (!seen[m]) throw AccountingError("registry module " + model.module_name(m) + " has no weight entry");
  }
  return out;
}

CostReport account_cost(const model::ToyOSDSR& model, int weight_bits, int activation_bits, std::size_t lr_height,
                        std::size_t lr_width) {
  const auto layers = inventory(model, lr_height, lr_width);
  return account_cost(layers, weight_bits, activation_bits);
}

}  // namespace qart::metrics
