#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "qart/calib.hpp"
#include "qart/model.hpp"

namespace qart::io {

/// Every knob of a CLI run. All fields have defaults; JSON files may set any
/// subset, unknown keys are rejected.
struct RunConfig {
  std::uint64_t seed = 0;
  calib::BitWidth bits;
  /// Low-rank skip / finetuner ranks; unset means the per-layer default.
  std::optional<std::size_t> rank;
  std::optional<std::size_t> finetune_rank;
  /// "per_channel" or "per_tensor" weight ranges.
  std::string weight_granularity = "per_channel";
  /// 32 leaves the compensated bias unquantised.
  int bias_bits = 8;
  std::vector<int> timesteps{1, 250, 500, 750, 1000};
  /// Timestep of the original (pre-retraining) backbone.
  int original_timestep = 1000;

  std::size_t backbone_epochs = 100;
  double backbone_lr = 4e-3;

  std::size_t stage_steps = 200;
  std::size_t et_steps = 1000;
  std::size_t batch = 4;
  double finetune_lr = 1e-3;
  double quant_lr = 1e-3;
  double et_lr = 3e-3;
  std::size_t calibration_images = 16;
  calib::LossConfig loss;

  /// Folder with manifest.csv; empty selects the synthetic set.
  std::string data_dir;
  std::size_t synthetic_size = 64;
  std::size_t hr_size = 128;
  std::size_t eval_size = 16;
  std::uint64_t eval_seed = 1000;

  std::string out_dir = "out";

  nlohmann::json to_json() const;
  /// Throws ConfigError on unknown keys, bad types or a missing data_dir.
  static RunConfig from_json(const nlohmann::json& j);
  static RunConfig load(const std::filesystem::path& path);

  calib::CalibrationPlan plan(const model::ToyOSDSR& model) const;
  model::TrainOptions train_options() const;
  model::ToyConfig model_config() const;
};

}  // namespace qart::io
