#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "qart/data.hpp"
#include "qart/reparam.hpp"
#include "qart/schedule.hpp"
#include "qart/tensor.hpp"

namespace qart::model {

enum class Activation { Silu, Identity };

Activation parse_activation(const std::string& name);
std::string to_string(Activation act);

/// LR -> HR upscaling factor of the toy network.
inline constexpr std::size_t kScaleFactor = 4;

struct ToyConfig {
  /// Encoder width c; the latent has 2c channels.
  std::size_t channels = 16;
  std::size_t denoiser_blocks = 4;
  /// Length of the sinusoidal timestep embedding.
  std::size_t embedding_dim = 32;
  Activation activation = Activation::Silu;
  /// Denoiser blocks compute h + g * act(conv(h) + temb) instead of g * act(conv(h) + temb).
  bool residual_denoiser = true;
  diffusion::ScheduleKind schedule = diffusion::ScheduleKind::Linear;
  int t_max = 1000;
  /// Initial value of the per-channel output scale of every denoiser block.
  double block_scale_init = 0.01;
  std::uint64_t seed = 0;
};

/// 3x3 convolution held as a [out, in*k*k] matrix plus bias [out].
struct ConvLayer {
  Tensor weight;
  Tensor bias;
  std::size_t kernel = 3;
  std::size_t stride = 1;
  std::size_t pad = 1;

  std::size_t out_channels() const { return weight.dim(0); }
  std::size_t in_channels() const { return weight.dim(1) / (kernel * kernel); }
};

struct ModuleHandle {
  std::string name;
  std::size_t inference_index = 0;
  bool quantized = false;
};

/// Per-module inputs and outputs captured during a forward pass, indexed by
/// inference position, plus the LR and HR latents.
struct ForwardTrace {
  std::vector<Tensor> inputs;
  std::vector<Tensor> outputs;
  Tensor z_l;
  Tensor z_h;
};

/// Sinusoidal embedding of a timestep as a [dim, 1] column.
Tensor timestep_embedding(int t, std::size_t dim);

/// Toy one-step diffusion SR network. Images are [3, N, H, W] maps in
/// [0, 1]; H and W must be multiples of 4.
///
///   encoder:  conv 3->c stride 2 + act, conv c->2c stride 2      (FP)
///   denoiser: h0 = Z_L + c_y, blocks h_k = [h_{k-1} +] g_k * act(conv(h_{k-1}) + P_k e(T) + q_k)
///   latent:   Z_H = (Z_L - sqrt(1 - abar_T) h_K) / sqrt(abar_T)
///   decoder:  conv 2c->c + act, bilinear x4; conv c->3, bilinear x4; clamp [0, 1]
///
/// Quantisable modules, in inference order: denoiser.block1..K,
/// decoder.layer1, decoder.layer2.
class ToyOSDSR {
 public:
  static ToyOSDSR create(const ToyConfig& config);

  const ToyConfig& config() const noexcept { return config_; }
  const diffusion::NoiseSchedule& schedule() const noexcept { return schedule_; }
  /// Timestep the backbone was trained at.
  int timestep() const noexcept { return timestep_; }
  void set_timestep(int t);

  std::size_t module_count() const noexcept { return modules_.size(); }
  std::vector<ModuleHandle> registry() const;
  ModuleHandle handle(const std::string& name) const;
  const std::string& module_name(std::size_t index) const;

  Tensor forward_fp(const Tensor& img_lr, int t) const;
  /// Modules in `active` run through their quantisers, the rest in FP.
  Tensor forward_quantized(const Tensor& img_lr, int t, std::span<const ModuleHandle> active) const;
  /// Mask-based forward used by the calibration pipeline.
  Tensor forward_masked(const Tensor& img_lr, int t, const std::vector<bool>& active,
                        ForwardTrace* trace = nullptr) const;
  /// Forward with the model's own active mask.
  Tensor forward(const Tensor& img_lr, int t, ForwardTrace* trace = nullptr) const;

  Tensor encode(const Tensor& img_lr) const;
  /// Z_H for the given mask (only denoiser entries matter).
  Tensor hr_latent(const Tensor& img_lr, int t, const std::vector<bool>& active) const;
  /// A single registry module applied to its input.
  Tensor run_module(std::size_t index, const Tensor& input, int t, bool quantized) const;
  /// im2col columns consumed by the module's convolution.
  Tensor module_columns(std::size_t index, const Tensor& input) const;

  const ConvLayer& module_layer(std::size_t index) const;
  /// Spatial positions per image seen by the module's convolution.
  std::size_t module_positions(std::size_t index, std::size_t lr_height, std::size_t lr_width) const;

  void install_quantizer(std::size_t index, reparam::FinetuneQuantizer fq);
  bool has_quantizer(std::size_t index) const;
  reparam::FinetuneQuantizer& quantizer(std::size_t index);
  const reparam::FinetuneQuantizer& quantizer(std::size_t index) const;
  void remove_quantizers();
  void set_active(std::size_t index, bool active);
  bool is_active(std::size_t index) const;
  const std::vector<bool>& active_mask() const noexcept { return active_; }

  /// Every backbone weight, shared with the model (writes are visible).
  std::vector<NamedTensor> backbone_parameters() const;
  std::size_t parameter_count() const;
  void set_backbone_trainable(bool trainable);

  /// Backbone plus quantiser state and metadata, for checkpoints.
  std::vector<NamedTensor> state() const;
  static ToyOSDSR from_state(const std::vector<NamedTensor>& entries);

  /// Deep copy: no tensor is shared with the original.
  ToyOSDSR clone() const;

 private:
  struct Block {
    Tensor temb_weight;  // [2c, dim]
    Tensor temb_bias;    // [2c, 1]
    Tensor scale;        // [2c, 1, 1, 1]
  };

  Tensor activate(const Tensor& x) const;
  Tensor conv_apply(std::size_t index, const Tensor& x, bool quantized) const;
  /// `emb` is the timestep embedding; unused by decoder layers.
  Tensor module_forward(std::size_t index, const Tensor& x, const Tensor& emb, bool quantized) const;
  Tensor denoise(const Tensor& z_l, int t, const std::vector<bool>& active, ForwardTrace* trace) const;
  Tensor decode(const Tensor& z_h, const std::vector<bool>& active, ForwardTrace* trace) const;
  std::size_t decoder_index(std::size_t layer) const { return config_.denoiser_blocks + layer; }
  void check_index(std::size_t index) const;
  void check_image(const Tensor& img) const;

  ToyConfig config_;
  diffusion::NoiseSchedule schedule_;
  int timestep_ = 1;
  ConvLayer enc1_, enc2_;
  Tensor c_y_;  // [2c, 1, 1, 1]
  std::vector<Block> blocks_;
  std::vector<ConvLayer> modules_;
  std::vector<std::string> names_;
  std::vector<std::optional<reparam::FinetuneQuantizer>> quantizers_;
  std::vector<bool> active_;
};

struct TrainOptions {
  std::size_t epochs = 100;
  std::size_t batch = 4;
  double lr = 4e-3;
  double proxy_weight = 0.1;
  /// Scales the learning rate of c_y and the block output scales by
  /// min(1, sqrt(abar_T) / sqrt(1 - abar_T)), the inverse of the gain the
  /// denoiser output sees in Z_H.
  bool precondition_denoiser = true;
  /// Cosine decay of both learning rates to zero over the run.
  bool cosine_decay = true;
  /// Stops after this many optimiser steps when non-zero.
  std::size_t max_steps = 0;
  std::uint64_t seed = 0;
};

struct TrainLog {
  std::vector<double> losses;
  int timestep = 0;
};

/// Trains the FP backbone at timestep t on MSE + proxy_weight * perceptual
/// proxy against the HR targets. Tags the model with t and leaves it frozen.
/// Throws DataError on an empty dataset, TrainingError on a non-finite loss.
TrainLog train_backbone(ToyOSDSR& model, const Dataset& data, int t, const TrainOptions& options);

}  // namespace qart::model
