#include "qart/calib.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <random>
#include <sstream>

#include "qart/errors.hpp"
#include "qart/image_io.hpp"
#include "qart/losses.hpp"
#include "qart/metrics.hpp"
#include "qart/ops.hpp"
#include "qart/optim.hpp"

namespace qart::calib {

using model::ToyOSDSR;
using reparam::FinetuneOptions;
using reparam::FinetuneQuantizer;

void LossConfig::validate() const {
  if (a1 < 0.0 || a2 < 0.0 || module_loss_weight < 0.0) throw ConfigError("loss weights must be non-negative");
  if (a1 == 0.0 && a2 == 0.0) throw ConfigError("a1 and a2 cannot both be zero");
}

std::string BitWidth::to_string() const { return std::to_string(weight) + "," + std::to_string(activation); }

BitWidth BitWidth::parse(const std::string& text) {
  const auto comma = text.find(',');
  if (comma == std::string::npos) throw ParameterError("bits must look like W,A: '" + text + "'");
  BitWidth b;
  try {
    std::size_t used = 0;
    b.weight = std::stoi(text.substr(0, comma), &used);
    if (used != comma) throw ParameterError("");
    const std::string rest = text.substr(comma + 1);
    b.activation = std::stoi(rest, &used);
    if (used != rest.size()) throw ParameterError("");
  } catch (const std::exception&) {
    throw ParameterError("bits must look like W,A: '" + text + "'");
  }
  for (int v : {b.weight, b.activation}) {
    if (v != reparam::kFullPrecisionBits && (v < 2 || v > 8)) {
      throw ParameterError("bit-width " + std::to_string(v) + " not in [2, 8] or 32");
    }
  }
  return b;
}

Tensor image_loss(const Tensor& quantized, const Tensor& reference, const LossConfig& cfg) {
  if (quantized.shape() != reference.shape()) {
    throw DimensionError("image loss: shapes " + shape_string(quantized.shape()) + " and " +
                         shape_string(reference.shape()) + " differ");
  }
  cfg.validate();
  Tensor out;
  if (cfg.a2 != 0.0) out = mul_scalar(mse_loss(quantized, reference), cfg.a2);
  if (cfg.a1 != 0.0) {
    Tensor p = mul_scalar(perceptual_proxy(quantized, reference), cfg.a1);
    out = out.defined() ? add(out, p) : p;
  }
  return out;
}

Tensor module_loss(const Tensor& quantized, const Tensor& reference) { return mse_loss(quantized, reference); }

CalibrationPlan CalibrationPlan::reversed(const ToyOSDSR& model) {
  CalibrationPlan plan;
  for (std::size_t i = model.module_count(); i-- > 0;) plan.order.push_back(i);
  return plan;
}

void CalibrationPlan::validate(const ToyOSDSR& model) const {
  if (order.size() != model.module_count()) {
    throw ConfigError("plan lists " + std::to_string(order.size()) + " modules, registry has " +
                      std::to_string(model.module_count()));
  }
  for (std::size_t k = 0; k < order.size(); ++k) {
    if (order[k] != model.module_count() - 1 - k) {
      throw ConfigError("stage " + std::to_string(k) + " quantises " + std::to_string(order[k]) +
                        ", expected the reversed registry");
    }
  }
  if (stage_steps == 0) throw ConfigError("stage budget must be positive");
  if (batch == 0) throw ConfigError("batch size must be positive");
  if (calibration_images == 0) throw ConfigError("calibration needs at least one image");
  loss.validate();
}

namespace {

std::vector<bool> no_modules(const ToyOSDSR& m) { return std::vector<bool>(m.module_count(), false); }

Tensor first_images(const Dataset& data, std::size_t images) {
  const std::size_t n = std::min(images, data.size());
  if (n == 0) throw CalibrationError("calibration set is empty");
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  return gather_lr(data, idx);
}

// Columns each module consumes when the model runs with its current mask.
std::vector<Tensor> module_inputs(const ToyOSDSR& model, const Tensor& lr, int t, const std::vector<bool>& mask) {
  NoGradGuard ng;
  model::ForwardTrace trace;
  model.forward_masked(lr, t, mask, &trace);
  std::vector<Tensor> cols;
  for (std::size_t m = 0; m < model.module_count(); ++m) cols.push_back(model.module_columns(m, trace.inputs[m]));
  return cols;
}

void recalibrate(ToyOSDSR& model, std::size_t m, const Tensor& lr) {
  const auto cols = module_inputs(model, lr, model.timestep(), model.active_mask());
  model.quantizer(m).recalibrate_activation(std::span<const Tensor>(&cols[m], 1));
}

class BatchSampler {
 public:
  BatchSampler(std::size_t n, std::uint64_t seed) : order_(n), rng_(seed) {
    std::iota(order_.begin(), order_.end(), 0);
    std::shuffle(order_.begin(), order_.end(), rng_);
  }

  std::vector<std::size_t> next(std::size_t batch) {
    std::vector<std::size_t> out;
    while (out.size() < std::min(batch, order_.size())) {
      if (pos_ == order_.size()) {
        std::shuffle(order_.begin(), order_.end(), rng_);
        pos_ = 0;
      }
      out.push_back(order_[pos_++]);
    }
    return out;
  }

 private:
  std::vector<std::size_t> order_;
  std::mt19937_64 rng_;
  std::size_t pos_ = 0;
};

std::vector<Tensor> fp_outputs(const ToyOSDSR& model, const Dataset& data) {
  NoGradGuard ng;
  std::vector<Tensor> out;
  out.reserve(data.size());
  constexpr std::size_t chunk = 8;
  const auto mask = no_modules(model);
  for (std::size_t start = 0; start < data.size(); start += chunk) {
    std::vector<std::size_t> idx(std::min(chunk, data.size() - start));
    std::iota(idx.begin(), idx.end(), start);
    for (auto& img : unstack_batch(model.forward_masked(gather_lr(data, idx), model.timestep(), mask))) {
      out.push_back(img);
    }
  }
  return out;
}

Tensor gather(const std::vector<Tensor>& images, std::span<const std::size_t> idx) {
  std::vector<Tensor> picked;
  for (auto i : idx) picked.push_back(images[i]);
  return stack_batch(picked);
}

Adam make_optimizer(const ToyOSDSR& model, const CalibrationPlan& plan) {
  ParamGroup finetune{{}, plan.finetune_lr}, quant{{}, plan.quant_lr};
  for (std::size_t m = 0; m < model.module_count(); ++m) {
    if (!model.is_active(m)) continue;
    const auto& fq = model.quantizer(m);
    for (auto& p : fq.finetune_params()) finetune.params.push_back(p);
    for (auto& p : fq.quant_params()) quant.params.push_back(p);
  }
  return Adam({finetune, quant});
}

void count_early_grads(const ToyOSDSR& model, PipelineLog& log) {
  for (std::size_t m = 0; m < model.module_count(); ++m) {
    if (model.is_active(m) || !model.has_quantizer(m)) continue;
    for (const auto& p : model.quantizer(m).trainable()) {
      if (!p.has_grad()) continue;
      const auto g = p.grad();
      if (std::any_of(g.begin(), g.end(), [](double v) { return v != 0.0; })) ++log.early_grad_events[m];
    }
  }
}

void clamp_active(ToyOSDSR& model) {
  for (std::size_t m = 0; m < model.module_count(); ++m) {
    if (model.is_active(m)) model.quantizer(m).clamp_scales();
  }
}

void check_quantizers(const ToyOSDSR& model) {
  for (std::size_t m = 0; m < model.module_count(); ++m) {
    if (!model.has_quantizer(m)) throw ConfigError("module " + model.module_name(m) + " has no quantiser installed");
  }
}

void check_digest(const ToyOSDSR& model, const PipelineLog& log, const std::string& stage) {
  if (frozen_digest(model) != log.digest) throw TrainingError("frozen weights changed during stage " + stage);
}

struct StageSpec {
  std::string name;
  std::size_t steps;
  // Registry index whose module loss enters the objective; npos for pure image loss.
  std::size_t module;
  std::uint64_t seed;
};

void train_stage(ToyOSDSR& model, const Dataset& calib, const std::vector<Tensor>& reference,
                 const CalibrationPlan& plan, const StageSpec& spec, PipelineLog& log) {
  Adam opt = make_optimizer(model, plan);
  BatchSampler sampler(calib.size(), spec.seed);
  const int t = model.timestep();
  const bool has_module = spec.module != static_cast<std::size_t>(-1);
  for (std::size_t step = 0; step < spec.steps; ++step) {
    const auto idx = sampler.next(plan.batch);
    model::ForwardTrace trace;
    const Tensor out = model.forward(gather_lr(calib, idx), t, &trace);
    const Tensor li = image_loss(out, gather(reference, idx), plan.loss);
    Tensor total = li;
    double lm_value = 0.0;
    if (has_module) {
      Tensor fp;
      {
        NoGradGuard ng;
        fp = model.run_module(spec.module, trace.inputs[spec.module].detach(), t, false);
      }
      const Tensor lm = module_loss(trace.outputs[spec.module], fp);
      lm_value = lm.item();
      total = add(mul_scalar(lm, plan.loss.module_loss_weight), li);
    }
    const double value = total.item();
    if (!std::isfinite(value)) {
      throw TrainingError("objective became non-finite in stage " + spec.name + " at step " + std::to_string(step));
    }
    opt.zero_grad();
    total.backward();
    count_early_grads(model, log);
    opt.step();
    clamp_active(model);
    log.rows.push_back({spec.name, step, lm_value, li.item(), value});
  }
  opt.zero_grad();
}

std::uint64_t stage_seed(std::uint64_t seed, std::size_t stage) { return seed + 0x9e3779b97f4a7c15ULL * (stage + 1); }

}  // namespace

void prepare_quantizers(ToyOSDSR& model, const Dataset& calib, int t, BitWidth bits, const FinetuneOptions& layer,
                        std::size_t images) {
  model.remove_quantizers();
  const auto cols = module_inputs(model, first_images(calib, images), t, no_modules(model));
  for (std::size_t m = 0; m < model.module_count(); ++m) {
    FinetuneOptions opts = layer;
    opts.seed = layer.seed + m;
    const auto& conv = model.module_layer(m);
    model.install_quantizer(m, FinetuneQuantizer::init(conv.weight, conv.bias, std::span<const Tensor>(&cols[m], 1),
                                                       bits.weight, bits.activation, opts));
    model.set_active(m, false);
  }
}

void run_maxmin_baseline(ToyOSDSR& model, const Dataset& calib, BitWidth bits, std::size_t images,
                         const FinetuneOptions& layer) {
  FinetuneOptions opts = layer;
  opts.rank = 0;
  opts.finetune_rank = 0;
  opts.mode = quant::QuantizerMode::MaxMinStatic;
  prepare_quantizers(model, calib, model.timestep(), bits, opts, images);
  for (std::size_t m = 0; m < model.module_count(); ++m) model.set_active(m, true);
}

std::uint64_t frozen_digest(const ToyOSDSR& model) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const auto& p : model.backbone_parameters()) {
    h = io::fnv1a(reinterpret_cast<const std::uint8_t*>(p.name.data()), p.name.size(), h);
    const auto d = p.value.data();
    h = io::fnv1a(reinterpret_cast<const std::uint8_t*>(d.data()), d.size_bytes(), h);
  }
  return h;
}

std::string PipelineLog::to_csv() const {
  std::ostringstream os;
  os.precision(12);
  os << "stage,step,L_M,L_image,total\n";
  for (const auto& r : rows) {
    os << r.stage << ',' << r.step << ',' << r.module_loss << ',' << r.image_loss << ',' << r.total << '\n';
  }
  return os.str();
}

std::vector<double> PipelineLog::totals(const std::string& stage) const {
  std::vector<double> out;
  for (const auto& r : rows) {
    if (r.stage == stage) out.push_back(r.total);
  }
  return out;
}

bool non_increasing(std::span<const double> curve, std::size_t patience) {
  if (curve.empty()) return true;
  const std::size_t k = std::min(patience, curve.size());
  const double head = std::accumulate(curve.begin(), curve.begin() + static_cast<std::ptrdiff_t>(k), 0.0);
  const double tail = std::accumulate(curve.end() - static_cast<std::ptrdiff_t>(k), curve.end(), 0.0);
  return tail <= head;
}

void run_rpq(ToyOSDSR& model, const Dataset& calib, const CalibrationPlan& plan, PipelineLog& log,
             const StageHook& hook) {
  plan.validate(model);
  check_quantizers(model);
  if (calib.empty()) throw DataError("calibration set is empty");
  for (std::size_t m = 0; m < model.module_count(); ++m) model.set_active(m, false);
  log.digest = frozen_digest(model);
  log.early_grad_events.assign(model.module_count(), 0);
  const auto reference = fp_outputs(model, calib);
  const Tensor calib_lr = first_images(calib, plan.calibration_images);
  for (std::size_t k = 0; k < plan.order.size(); ++k) {
    const std::size_t m = plan.order[k];
    recalibrate(model, m, calib_lr);
    model.set_active(m, true);
    const StageSpec spec{model.module_name(m), plan.stage_steps, m, stage_seed(plan.seed, k)};
    train_stage(model, calib, reference, plan, spec, log);
    check_digest(model, log, spec.name);
    log.stages.push_back(spec.name);
    if (hook) hook(spec.name, model);
  }
}

void run_et(ToyOSDSR& model, const Dataset& calib, const CalibrationPlan& plan, PipelineLog& log,
            const StageHook& hook) {
  check_quantizers(model);
  plan.loss.validate();
  if (plan.batch == 0) throw ConfigError("batch size must be positive");
  for (std::size_t m = 0; m < model.module_count(); ++m) {
    if (!model.is_active(m)) throw ConfigError("extended training needs every module quantised");
  }
  if (calib.empty()) throw DataError("calibration set is empty");
  if (log.early_grad_events.size() != model.module_count()) log.early_grad_events.assign(model.module_count(), 0);
  log.digest = frozen_digest(model);
  if (plan.et_steps > 0) {
    const auto reference = fp_outputs(model, calib);
    const StageSpec spec{"et", plan.et_steps, static_cast<std::size_t>(-1), stage_seed(plan.seed, plan.order.size())};
    auto et_plan = plan;
    et_plan.finetune_lr = et_plan.quant_lr = plan.et_lr;
    train_stage(model, calib, reference, et_plan, spec, log);
    check_digest(model, log, spec.name);
  }
  log.stages.push_back("et");
  if (hook) hook("et", model);
}

void activate_all(ToyOSDSR& model, const Dataset& calib, std::size_t images) {
  check_quantizers(model);
  const Tensor lr = first_images(calib, images);
  for (std::size_t m = 0; m < model.module_count(); ++m) {
    recalibrate(model, m, lr);
    model.set_active(m, true);
  }
}

diffusion::TimestepErrorProfile sweep_timesteps(const ToyOSDSR& fp, const Dataset& calib, const Dataset& probes,
                                                std::span<const int> timesteps, BitWidth bits,
                                                std::size_t calibration_images) {
  if (probes.empty()) throw DataError("empty probe set");
  FinetuneOptions opts;
  opts.rank = 0;
  opts.finetune_rank = 0;
  opts.mode = quant::QuantizerMode::MaxMinStatic;
  std::map<int, ToyOSDSR> quantized;
  std::vector<bool> denoiser(fp.module_count(), false);
  for (std::size_t m = 0; m < fp.config().denoiser_blocks; ++m) denoiser[m] = true;
  for (int t : timesteps) {
    if (t < 1 || t > fp.schedule().t_max()) throw ParameterError("timestep " + std::to_string(t) + " out of range");
    if (quantized.contains(t)) continue;
    ToyOSDSR q = fp.clone();
    prepare_quantizers(q, calib, t, bits, opts, calibration_images);
    quantized.emplace(t, std::move(q));
  }
  const auto none = no_modules(fp);
  auto reference = [&](std::size_t p, int t) { return fp.hr_latent(probes[p].lr, t, none); };
  auto measured = [&](std::size_t p, int t) { return quantized.at(t).hr_latent(probes[p].lr, t, denoiser); };
  return diffusion::measure_timestep_error(fp.schedule(), timesteps, probes.size(), reference, measured);
}

TrqResult run_trq(const ToyOSDSR& original, const Dataset& data, std::span<const int> candidates, BitWidth bits,
                  const TrqOptions& options) {
  if (candidates.empty()) throw ParameterError("timestep retraining needs at least one candidate");
  if (data.empty()) throw DataError("timestep retraining needs a non-empty dataset");
  const Dataset probes(data.begin(), data.begin() + static_cast<std::ptrdiff_t>(std::min(options.probes, data.size())));
  ToyOSDSR fp = original.clone();
  fp.remove_quantizers();
  auto profile = sweep_timesteps(fp, data, probes, candidates, bits, options.calibration_images);
  const auto best = std::min_element(profile.rows.begin(), profile.rows.end(),
                                     [](const auto& a, const auto& b) { return a.delta_z < b.delta_z; });
  const int best_t = best->t;
  ToyOSDSR backbone = ToyOSDSR::create(original.config());
  auto log = model::train_backbone(backbone, data, best_t, options.train);
  return {best_t, std::move(profile), std::move(backbone), std::move(log)};
}

std::string to_string(Arm arm) {
  switch (arm) {
    case Arm::Baseline:
      return "baseline";
    case Arm::Trq:
      return "trq";
    case Arm::Rpq:
      return "rpq";
    case Arm::TrqRpq:
      return "trq+rpq";
    case Arm::TrqEt:
      return "trq+et";
    case Arm::TrqRpqEt:
      return "trq+rpq+et";
  }
  return "unknown";
}

Arm parse_arm(const std::string& name) {
  for (Arm a : kAllArms) {
    if (to_string(a) == name) return a;
  }
  throw ParameterError("unknown ablation arm '" + name + "'");
}

bool uses_trq(Arm arm) { return arm != Arm::Baseline && arm != Arm::Rpq; }
bool uses_rpq(Arm arm) { return arm == Arm::Rpq || arm == Arm::TrqRpq || arm == Arm::TrqRpqEt; }
bool uses_et(Arm arm) { return arm == Arm::TrqEt || arm == Arm::TrqRpqEt; }

ToyOSDSR quantize_arm(Arm arm, const ToyOSDSR& backbone, const Dataset& calib, const CalibrationPlan& plan,
                      PipelineLog& log, const StageHook& hook) {
  ToyOSDSR q = backbone.clone();
  q.remove_quantizers();
  if (!uses_rpq(arm) && !uses_et(arm)) {
    run_maxmin_baseline(q, calib, plan.bits, plan.calibration_images, plan.layer);
    return q;
  }
  prepare_quantizers(q, calib, q.timestep(), plan.bits, plan.layer, plan.calibration_images);
  if (uses_rpq(arm)) {
    run_rpq(q, calib, plan, log, hook);
  } else {
    activate_all(q, calib, plan.calibration_images);
  }
  if (uses_et(arm)) run_et(q, calib, plan, log, hook);
  return q;
}

double psnr_to_fp(const ToyOSDSR& quantized, const ToyOSDSR& fp, const Dataset& eval, int t) {
  if (eval.empty()) throw DataError("evaluation set is empty");
  NoGradGuard ng;
  const auto none = no_modules(fp);
  double total = 0.0;
  for (const auto& pair : eval) {
    total += metrics::psnr(quantized.forward(pair.lr, t), fp.forward_masked(pair.lr, t, none));
  }
  return total / static_cast<double>(eval.size());
}

metrics::MetricReport evaluate(const ToyOSDSR& quantized, const ToyOSDSR& fp, const Dataset& eval,
                               const std::string& tag) {
  if (eval.empty()) throw DataError("evaluation set is empty");
  NoGradGuard ng;
  const int t = quantized.timestep();
  const auto none = no_modules(fp);
  metrics::MetricReport r;
  r.tag = tag;
  r.bits = "32,32";
  for (std::size_t m = 0; m < quantized.module_count(); ++m) {
    if (!quantized.is_active(m)) continue;
    const auto& fq = quantized.quantizer(m);
    r.bits = BitWidth{fq.weight_bits(), fq.activation_bits()}.to_string();
    break;
  }
  for (const auto& pair : eval) {
    const Tensor out = quantized.forward(pair.lr, t);
    const Tensor ref = fp.forward_masked(pair.lr, t, none);
    r.psnr_db += metrics::psnr(out, ref);
    r.ssim += metrics::ssim(out, ref);
    const Tensor zq = quantized.hr_latent(pair.lr, t, quantized.active_mask());
    const Tensor zf = fp.hr_latent(pair.lr, t, none);
    double sq = 0.0;
    for (std::size_t i = 0; i < zq.numel(); ++i) sq += (zq.data()[i] - zf.data()[i]) * (zq.data()[i] - zf.data()[i]);
    r.latent_error += std::sqrt(sq);
  }
  const double n = static_cast<double>(eval.size());
  r.psnr_db /= n;
  r.ssim /= n;
  r.latent_error /= n;
  return r;
}

}  // namespace qart::calib
