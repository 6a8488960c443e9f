#include "qart/config.hpp"

#include <fstream>
#include <set>

#include "qart/errors.hpp"

namespace qart::io {

nlohmann::json RunConfig::to_json() const {
  nlohmann::json j;
  j["seed"] = seed;
  j["bits"] = bits.to_string();
  j["rank"] = rank ? nlohmann::json(*rank) : nlohmann::json(nullptr);
  j["finetune_rank"] = finetune_rank ? nlohmann::json(*finetune_rank) : nlohmann::json(nullptr);
  j["weight_granularity"] = weight_granularity;
  j["bias_bits"] = bias_bits;
  j["timesteps"] = timesteps;
  j["original_timestep"] = original_timestep;
  j["backbone_epochs"] = backbone_epochs;
  j["backbone_lr"] = backbone_lr;
  j["stage_steps"] = stage_steps;
  j["et_steps"] = et_steps;
  j["batch"] = batch;
  j["finetune_lr"] = finetune_lr;
  j["quant_lr"] = quant_lr;
  j["et_lr"] = et_lr;
  j["calibration_images"] = calibration_images;
  j["loss"] = {{"a1", loss.a1}, {"a2", loss.a2}, {"module_loss_weight", loss.module_loss_weight}};
  j["data_dir"] = data_dir;
  j["synthetic_size"] = synthetic_size;
  j["hr_size"] = hr_size;
  j["eval_size"] = eval_size;
  j["eval_seed"] = eval_seed;
  j["out_dir"] = out_dir;
  return j;
}

namespace {

template <typename T>
void read(const nlohmann::json& j, const char* key, T& field) {
  if (!j.contains(key)) return;
  try {
    field = j.at(key).get<T>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("config key '") + key + "': " + e.what());
  }
}

void read_rank(const nlohmann::json& j, const char* key, std::optional<std::size_t>& field) {
  if (!j.contains(key)) return;
  if (j.at(key).is_null()) {
    field.reset();
    return;
  }
  std::size_t v = 0;
  read(j, key, v);
  field = v;
}

}  // namespace

RunConfig RunConfig::from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  static const std::set<std::string> known{"seed",        "bits",        "rank",          "finetune_rank", "weight_granularity", "bias_bits",
                                           "timesteps",   "original_timestep", "backbone_epochs", "backbone_lr",
                                           "stage_steps", "et_steps",    "batch",         "finetune_lr",
                                           "quant_lr",    "et_lr",    "calibration_images", "loss",     "data_dir",
                                           "synthetic_size", "hr_size",  "eval_size",     "eval_seed",
                                           "out_dir"};
  for (const auto& [key, value] : j.items()) {
    if (!known.contains(key)) throw ConfigError("unknown config key '" + key + "'");
  }
  RunConfig c;
  read(j, "seed", c.seed);
  if (j.contains("bits")) {
    std::string bits;
    read(j, "bits", bits);
    try {
      c.bits = calib::BitWidth::parse(bits);
    } catch (const ParameterError& e) {
      throw ConfigError(e.what());
    }
  }
  read_rank(j, "rank", c.rank);
  read_rank(j, "finetune_rank", c.finetune_rank);
  read(j, "weight_granularity", c.weight_granularity);
  if (c.weight_granularity != "per_channel" && c.weight_granularity != "per_tensor") {
    throw ConfigError("weight_granularity must be per_channel or per_tensor");
  }
  read(j, "bias_bits", c.bias_bits);
  if (c.bias_bits < 2 || (c.bias_bits > 8 && c.bias_bits != 32)) throw ConfigError("bias_bits must be 2..8 or 32");
  read(j, "timesteps", c.timesteps);
  read(j, "original_timestep", c.original_timestep);
  read(j, "backbone_epochs", c.backbone_epochs);
  read(j, "backbone_lr", c.backbone_lr);
  read(j, "stage_steps", c.stage_steps);
  read(j, "et_steps", c.et_steps);
  read(j, "batch", c.batch);
  read(j, "finetune_lr", c.finetune_lr);
  read(j, "quant_lr", c.quant_lr);
  read(j, "et_lr", c.et_lr);
  read(j, "calibration_images", c.calibration_images);
  if (j.contains("loss")) {
    const auto& l = j.at("loss");
    if (!l.is_object()) throw ConfigError("config key 'loss' must be an object");
    for (const auto& [key, value] : l.items()) {
      if (key != "a1" && key != "a2" && key != "module_loss_weight") {
        throw ConfigError("unknown config key 'loss." + key + "'");
      }
    }
    read(l, "a1", c.loss.a1);
    read(l, "a2", c.loss.a2);
    read(l, "module_loss_weight", c.loss.module_loss_weight);
  }
  read(j, "data_dir", c.data_dir);
  read(j, "synthetic_size", c.synthetic_size);
  read(j, "hr_size", c.hr_size);
  read(j, "eval_size", c.eval_size);
  read(j, "eval_seed", c.eval_seed);
  read(j, "out_dir", c.out_dir);
  c.loss.validate();
  if (c.timesteps.empty()) throw ConfigError("timesteps must not be empty");
  if (!c.data_dir.empty() && !std::filesystem::is_directory(c.data_dir)) {
    throw ConfigError("data_dir '" + c.data_dir + "' does not exist");
  }
  return c;
}

RunConfig RunConfig::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("config " + path.string() + ": " + e.what());
  }
  return from_json(j);
}

calib::CalibrationPlan RunConfig::plan(const model::ToyOSDSR& model) const {
  auto p = calib::CalibrationPlan::reversed(model);
  p.stage_steps = stage_steps;
  p.et_steps = et_steps;
  p.batch = batch;
  p.finetune_lr = finetune_lr;
  p.quant_lr = quant_lr;
  p.et_lr = et_lr;
  p.calibration_images = calibration_images;
  p.seed = seed;
  p.bits = bits;
  p.loss = loss;
  p.layer.rank = rank;
  p.layer.finetune_rank = finetune_rank;
  p.layer.seed = seed;
  p.layer.weight_granularity =
      weight_granularity == "per_tensor" ? quant::Granularity::PerTensor : quant::Granularity::PerChannel;
  p.layer.bias_bits = bias_bits;
  return p;
}

model::TrainOptions RunConfig::train_options() const {
  model::TrainOptions o;
  o.epochs = backbone_epochs;
  o.batch = batch;
  o.lr = backbone_lr;
  o.seed = seed;
  return o;
}

model::ToyConfig RunConfig::model_config() const {
  model::ToyConfig c;
  c.seed = seed;
  return c;
}

}  // namespace qart::io
