#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "qart/tensor.hpp"

namespace qart::model {
class ToyOSDSR;
}

namespace qart::metrics {

inline constexpr double kPsnrCap = 99.0;

/// 10 log10(peak^2 / MSE), capped at 99 dB when MSE < 1e-12.
double psnr(const Tensor& a, const Tensor& b, double peak = 1.0);

/// Mean SSIM over non-overlapping 8x8 windows of [C, N, H, W] maps (k1 = 0.01,
/// k2 = 0.03, dynamic range 1), averaged over channels and images. Throws
/// ParameterError when a side is smaller than the window.
double ssim(const Tensor& a, const Tensor& b);

/// Spearman rank correlation with average ranks for ties.
double spearman(std::span<const double> x, std::span<const double> y);

struct MetricReport {
  std::string tag;
  std::string bits;
  double psnr_db = 0.0;
  double ssim = 0.0;
  double latent_error = 0.0;
  std::vector<double> stage_losses;

  nlohmann::json to_json() const;
  static MetricReport from_json(const nlohmann::json& j);
  /// "tag,bits,psnr_db,ssim,latent_error"
  static std::string csv_header();
  std::string csv_row() const;
};

/// One weight-carrying layer in the cost inventory.
struct LayerCost {
  std::string name;
  std::size_t weights = 0;
  /// Multiply-accumulates for one forward pass.
  std::size_t macs = 0;
  bool quantized = false;
  /// Full-precision extras carried by the quantised layer.
  std::size_t overhead_params = 0;
  std::size_t overhead_macs = 0;
};

struct CostReport {
  double fp_params = 0.0;
  /// FP32-equivalent parameter count.
  double effective_params = 0.0;
  double params_effective_mbytes = 0.0;
  double params_reduction = 0.0;
  double fp_ops = 0.0;
  double ops_effective = 0.0;
  double ops_reduction = 0.0;

  nlohmann::json to_json() const;
};

/// Size: w/32 of each quantised weight plus FP counts and overhead.
/// Ops: quantised MACs weighted by (w * a) / 1024 plus FP and overhead MACs.
/// Throws AccountingError for an empty inventory or bits outside [1, 32].
CostReport account_cost(std::span<const LayerCost> layers, int weight_bits, int activation_bits);

/// Layer inventory of the toy model for an LR input of the given size. Every
/// registry module is marked quantised; overhead comes from installed
/// quantisers. Non-registry weights (encoder, c_y, embeddings, block scales)
/// are listed as FP entries.
std::vector<LayerCost> inventory(const model::ToyOSDSR& model, std::size_t lr_height, std::size_t lr_width);

CostReport account_cost(const model::ToyOSDSR& model, int weight_bits, int activation_bits, std::size_t lr_height,
                        std::size_t lr_width);

}  // namespace qart::metrics
