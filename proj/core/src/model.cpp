#include "qart/model.hpp"

#include <cmath>
#include <limits>
#include <algorithm>
#include <map>
#include <numeric>
#include <random>

#include "qart/errors.hpp"
#include "qart/image_ops.hpp"
#include "qart/losses.hpp"
#include "qart/ops.hpp"
#include "qart/optim.hpp"

namespace qart::model {

using reparam::FinetuneQuantizer;

Activation parse_activation(const std::string& name) {
  if (name == "silu") return Activation::Silu;
  if (name == "identity") return Activation::Identity;
  throw ConfigError("unknown activation '" + name + "'");
}

std::string to_string(Activation act) { return act == Activation::Silu ? "silu" : "identity"; }

Tensor timestep_embedding(int t, std::size_t dim) {
  if (dim == 0 || dim % 2 != 0) throw ParameterError("embedding dimension must be even and positive");
  const std::size_t half = dim / 2;
  std::vector<double> e(dim);
  for (std::size_t i = 0; i < half; ++i) {
    const double freq = std::pow(10000.0, -static_cast<double>(i) / static_cast<double>(half));
    e[i] = std::sin(t * freq);
    e[half + i] = std::cos(t * freq);
  }
  return Tensor(Shape{dim, 1}, std::move(e));
}

namespace {

ConvLayer make_conv(std::size_t cin, std::size_t cout, std::size_t stride, double gain, std::mt19937_64& rng) {
  ConvLayer layer;
  layer.stride = stride;
  const std::size_t fan_in = cin * layer.kernel * layer.kernel;
  std::normal_distribution<double> dist(0.0, gain * std::sqrt(2.0 / static_cast<double>(fan_in)));
  std::vector<double> w(cout * fan_in);
  for (auto& v : w) v = dist(rng);
  layer.weight = Tensor(Shape{cout, fan_in}, std::move(w));
  layer.bias = Tensor(Shape{cout}, 0.0);
  return layer;
}

ConvLayer clone_conv(const ConvLayer& c) {
  ConvLayer out = c;
  out.weight = c.weight.clone();
  out.bias = c.bias.clone();
  return out;
}

}  // namespace

ToyOSDSR ToyOSDSR::create(const ToyConfig& config) {
  if (config.channels == 0 || config.denoiser_blocks == 0) throw ConfigError("model needs channels and blocks");
  ToyOSDSR m;
  m.config_ = config;
  m.schedule_ = diffusion::NoiseSchedule::build(config.schedule, config.t_max);
  m.timestep_ = 1;
  const std::size_t c = config.channels, c2 = 2 * config.channels;
  std::mt19937_64 rng(config.seed);
  m.enc1_ = make_conv(3, c, 2, 1.0, rng);
  m.enc2_ = make_conv(c, c2, 2, 1.0, rng);
  m.c_y_ = Tensor(Shape{c2, 1, 1, 1}, 0.0);
  std::normal_distribution<double> emb_dist(0.0, 0.1 / std::sqrt(static_cast<double>(config.embedding_dim)));
  for (std::size_t k = 0; k < config.denoiser_blocks; ++k) {
    m.modules_.push_back(make_conv(c2, c2, 1, 1.0, rng));
    m.names_.push_back("denoiser.block" + std::to_string(k + 1));
    std::vector<double> pw(c2 * config.embedding_dim);
    for (auto& v : pw) v = emb_dist(rng);
    m.blocks_.push_back({Tensor(Shape{c2, config.embedding_dim}, std::move(pw)), Tensor(Shape{c2, 1}, 0.0),
                         Tensor(Shape{c2, 1, 1, 1}, config.block_scale_init)});
  }
  m.modules_.push_back(make_conv(c2, c, 1, 1.0, rng));
  m.names_.push_back("decoder.layer1");
  m.modules_.push_back(make_conv(c, 3, 1, 1.0, rng));
  m.names_.push_back("decoder.layer2");
  for (auto& v : m.modules_.back().bias.mutable_data()) v = 0.5;
  m.quantizers_.resize(m.modules_.size());
  m.active_.assign(m.modules_.size(), false);
  return m;
}

void ToyOSDSR::set_timestep(int t) {
  if (t < 1 || t > schedule_.t_max()) throw ParameterError("timestep " + std::to_string(t) + " outside schedule");
  timestep_ = t;
}

std::vector<ModuleHandle> ToyOSDSR::registry() const {
  std::vector<ModuleHandle> out;
  for (std::size_t i = 0; i < modules_.size(); ++i) out.push_back({names_[i], i, active_[i]});
  return out;
}

ModuleHandle ToyOSDSR::handle(const std::string& name) const {
  for (std::size_t i = 0; i < names_.size(); ++i) {
    if (names_[i] == name) return {names_[i], i, active_[i]};
  }
  throw RegistryError("unknown module '" + name + "'");
}

const std::string& ToyOSDSR::module_name(std::size_t index) const {
  check_index(index);
  return names_[index];
}

void ToyOSDSR::check_index(std::size_t index) const {
  if (index >= modules_.size()) throw RegistryError("module index " + std::to_string(index) + " out of range");
}

void ToyOSDSR::check_image(const Tensor& img) const {
  if (img.rank() != 4 || img.dim(0) != 3) {
    throw DimensionError("expected a 3-channel [3,N,H,W] image, got " + shape_string(img.shape()));
  }
  if (img.dim(2) % 4 != 0 || img.dim(3) % 4 != 0) throw DimensionError("image sides must be multiples of 4");
}

Tensor ToyOSDSR::activate(const Tensor& x) const {
  return config_.activation == Activation::Silu ? silu(x) : x;
}

Tensor ToyOSDSR::conv_apply(std::size_t index, const Tensor& x, bool quantized) const {
  const ConvLayer& layer = modules_[index];
  if (!quantized) return conv2d(x, layer.weight, layer.bias, layer.kernel, layer.stride, layer.pad);
  if (!quantizers_[index]) throw RegistryError("module " + names_[index] + " has no quantiser installed");
  const std::size_t ho = (x.dim(2) + 2 * layer.pad - layer.kernel) / layer.stride + 1;
  const std::size_t wo = (x.dim(3) + 2 * layer.pad - layer.kernel) / layer.stride + 1;
  return columns_to_map(quantizers_[index]->forward(module_columns(index, x)), x.dim(1), ho, wo);
}

Tensor ToyOSDSR::module_columns(std::size_t index, const Tensor& input) const {
  check_index(index);
  const ConvLayer& layer = modules_[index];
  if (input.rank() != 4 || input.dim(0) != layer.in_channels()) {
    throw DimensionError("module " + names_[index] + " input " + shape_string(input.shape()) +
                         " does not match its channels");
  }
  return im2col(input, layer.kernel, layer.stride, layer.pad);
}

Tensor ToyOSDSR::module_forward(std::size_t index, const Tensor& x, const Tensor& emb, bool quantized) const {
  const std::size_t blocks = config_.denoiser_blocks;
  Tensor y = conv_apply(index, x, quantized);
  if (index < blocks) {
    const Block& b = blocks_[index];
    const std::size_t c2 = y.dim(0);
    y = add(y, reshape(add(matmul(b.temb_weight, emb), b.temb_bias), Shape{c2, 1, 1, 1}));
    Tensor a = mul(activate(y), b.scale);
    return config_.residual_denoiser ? add(x, a) : a;
  }
  if (index == decoder_index(0)) return upsample_bilinear(activate(y), 4);
  return upsample_bilinear(y, 4);
}

Tensor ToyOSDSR::run_module(std::size_t index, const Tensor& input, int t, bool quantized) const {
  check_index(index);
  schedule_.alpha_bar(t);
  return module_forward(index, input, timestep_embedding(t, config_.embedding_dim), quantized);
}

Tensor ToyOSDSR::encode(const Tensor& img_lr) const {
  check_image(img_lr);
  Tensor h = activate(conv2d(img_lr, enc1_.weight, enc1_.bias, enc1_.kernel, enc1_.stride, enc1_.pad));
  return conv2d(h, enc2_.weight, enc2_.bias, enc2_.kernel, enc2_.stride, enc2_.pad);
}

Tensor ToyOSDSR::denoise(const Tensor& z_l, int t, const std::vector<bool>& active, ForwardTrace* trace) const {
  const Tensor emb = timestep_embedding(t, config_.embedding_dim);
  Tensor h = add(z_l, c_y_);
  for (std::size_t k = 0; k < config_.denoiser_blocks; ++k) {
    Tensor out = module_forward(k, h, emb, active[k]);
    if (trace) {
      trace->inputs[k] = h;
      trace->outputs[k] = out;
    }
    h = out;
  }
  return h;
}

Tensor ToyOSDSR::decode(const Tensor& z_h, const std::vector<bool>& active, ForwardTrace* trace) const {
  Tensor x = z_h;
  for (std::size_t layer = 0; layer < 2; ++layer) {
    const std::size_t idx = decoder_index(layer);
    Tensor out = module_forward(idx, x, Tensor(), active[idx]);
    if (trace) {
      trace->inputs[idx] = x;
      trace->outputs[idx] = out;
    }
    x = out;
  }
  return clip(x, 0.0, 1.0);
}

Tensor ToyOSDSR::forward_masked(const Tensor& img_lr, int t, const std::vector<bool>& active,
                                ForwardTrace* trace) const {
  if (active.size() != modules_.size()) throw RegistryError("active mask does not match the registry");
  const double abar = schedule_.alpha_bar(t);
  if (trace) {
    trace->inputs.assign(modules_.size(), Tensor());
    trace->outputs.assign(modules_.size(), Tensor());
  }
  Tensor z_l = encode(img_lr);
  Tensor z_h = diffusion::lr_to_hr_latent(z_l, abar, denoise(z_l, t, active, trace));
  if (trace) {
    trace->z_l = z_l;
    trace->z_h = z_h;
  }
  return decode(z_h, active, trace);
}

Tensor ToyOSDSR::forward_fp(const Tensor& img_lr, int t) const {
  return forward_masked(img_lr, t, std::vector<bool>(modules_.size(), false));
}

Tensor ToyOSDSR::forward_quantized(const Tensor& img_lr, int t, std::span<const ModuleHandle> active) const {
  std::vector<bool> mask(modules_.size(), false);
  for (const auto& h : active) {
    if (h.inference_index >= modules_.size() || names_[h.inference_index] != h.name) {
      throw RegistryError("handle '" + h.name + "' is not in the registry");
    }
    mask[h.inference_index] = true;
  }
  return forward_masked(img_lr, t, mask);
}

Tensor ToyOSDSR::forward(const Tensor& img_lr, int t, ForwardTrace* trace) const {
  return forward_masked(img_lr, t, active_, trace);
}

Tensor ToyOSDSR::hr_latent(const Tensor& img_lr, int t, const std::vector<bool>& active) const {
  if (active.size() != modules_.size()) throw RegistryError("active mask does not match the registry");
  const double abar = schedule_.alpha_bar(t);
  Tensor z_l = encode(img_lr);
  return diffusion::lr_to_hr_latent(z_l, abar, denoise(z_l, t, active, nullptr));
}

const ConvLayer& ToyOSDSR::module_layer(std::size_t index) const {
  check_index(index);
  return modules_[index];
}

std::size_t ToyOSDSR::module_positions(std::size_t index, std::size_t lr_height, std::size_t lr_width) const {
  check_index(index);
  // Latent is 1/4 of the LR input; decoder.layer2 runs after the first x4 resize.
  if (index == decoder_index(1)) return lr_height * lr_width;
  return (lr_height / 4) * (lr_width / 4);
}

void ToyOSDSR::install_quantizer(std::size_t index, FinetuneQuantizer fq) {
  check_index(index);
  if (!fq.weight().same_storage(modules_[index].weight)) {
    throw RegistryError("quantiser for " + names_[index] + " was built on a different weight tensor");
  }
  quantizers_[index] = std::move(fq);
}

bool ToyOSDSR::has_quantizer(std::size_t index) const {
  check_index(index);
  return quantizers_[index].has_value();
}

FinetuneQuantizer& ToyOSDSR::quantizer(std::size_t index) {
  check_index(index);
  if (!quantizers_[index]) throw RegistryError("module " + names_[index] + " has no quantiser installed");
  return *quantizers_[index];
}

const FinetuneQuantizer& ToyOSDSR::quantizer(std::size_t index) const {
  check_index(index);
  if (!quantizers_[index]) throw RegistryError("module " + names_[index] + " has no quantiser installed");
  return *quantizers_[index];
}

void ToyOSDSR::remove_quantizers() {
  for (auto& q : quantizers_) q.reset();
  active_.assign(modules_.size(), false);
}

void ToyOSDSR::set_active(std::size_t index, bool active) {
  check_index(index);
  if (active && !quantizers_[index]) throw RegistryError("module " + names_[index] + " has no quantiser installed");
  active_[index] = active;
}

bool ToyOSDSR::is_active(std::size_t index) const {
  check_index(index);
  return active_[index];
}

std::vector<NamedTensor> ToyOSDSR::backbone_parameters() const {
  std::vector<NamedTensor> out;
  auto conv = [&out](const std::string& name, const ConvLayer& c) {
    out.push_back({name + ".weight", c.weight});
    out.push_back({name + ".bias", c.bias});
  };
  conv("encoder.conv1", enc1_);
  conv("encoder.conv2", enc2_);
  out.push_back({"denoiser.c_y", c_y_});
  for (std::size_t i = 0; i < modules_.size(); ++i) {
    conv(names_[i], modules_[i]);
    if (i < blocks_.size()) {
      out.push_back({names_[i] + ".temb_weight", blocks_[i].temb_weight});
      out.push_back({names_[i] + ".temb_bias", blocks_[i].temb_bias});
      out.push_back({names_[i] + ".scale", blocks_[i].scale});
    }
  }
  return out;
}

std::size_t ToyOSDSR::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : backbone_parameters()) n += p.value.numel();
  return n;
}

void ToyOSDSR::set_backbone_trainable(bool trainable) {
  for (auto& p : backbone_parameters()) p.value.set_requires_grad(trainable);
}

namespace {

constexpr std::string_view kMeta = "meta.";

void put_scalar(std::vector<NamedTensor>& out, const std::string& name, double v) {
  out.push_back({name, Tensor::scalar(v)});
}

void put_quantizer(std::vector<NamedTensor>& out, const std::string& prefix, const quant::Quantizer& q) {
  put_scalar(out, prefix + ".mode", static_cast<double>(q.mode()));
  if (!q.active()) return;
  const auto& p = q.params();
  put_scalar(out, prefix + ".bits", p.bits);
  put_scalar(out, prefix + ".signed", p.is_signed ? 1.0 : 0.0);
  put_scalar(out, prefix + ".train_scale", p.scale.requires_grad() ? 1.0 : 0.0);
  put_scalar(out, prefix + ".train_zero", p.zero_point.requires_grad() ? 1.0 : 0.0);
  out.push_back({prefix + ".scale", p.scale.detach()});
  out.push_back({prefix + ".zero", p.zero_point.detach()});
}

class EntryMap {
 public:
  explicit EntryMap(const std::vector<NamedTensor>& entries) {
    for (const auto& e : entries) map_[e.name] = e.value;
  }
  bool has(const std::string& name) const { return map_.count(name) != 0; }
  const Tensor& get(const std::string& name) const {
    auto it = map_.find(name);
    if (it == map_.end()) throw FormatError("checkpoint lacks entry '" + name + "'");
    return it->second;
  }
  double scalar(const std::string& name) const {
    const Tensor& t = get(name);
    if (t.numel() != 1) throw FormatError("checkpoint entry '" + name + "' is not a scalar");
    return t.data()[0];
  }
  Tensor leaf(const std::string& name, const Shape& shape) const {
    const Tensor& t = get(name);
    if (t.shape() != shape) {
      throw FormatError("checkpoint entry '" + name + "' has shape " + shape_string(t.shape()) + ", expected " +
                        shape_string(shape));
    }
    return t.detach();
  }

 private:
  std::map<std::string, Tensor> map_;
};

quant::Quantizer read_quantizer(const EntryMap& m, const std::string& prefix) {
  const auto mode = static_cast<quant::QuantizerMode>(static_cast<int>(m.scalar(prefix + ".mode")));
  if (mode == quant::QuantizerMode::FpPassthrough) return quant::Quantizer::passthrough();
  const Tensor& s = m.get(prefix + ".scale");
  const Tensor& z = m.get(prefix + ".zero");
  auto qp = quant::QuantParams::make(static_cast<int>(m.scalar(prefix + ".bits")), m.scalar(prefix + ".signed") != 0.0,
                                     std::vector<double>(s.data().begin(), s.data().end()),
                                     std::vector<double>(z.data().begin(), z.data().end()));
  qp.scale.set_requires_grad(m.scalar(prefix + ".train_scale") != 0.0);
  qp.zero_point.set_requires_grad(m.scalar(prefix + ".train_zero") != 0.0);
  return quant::Quantizer(mode, std::move(qp));
}

}  // namespace

std::vector<NamedTensor> ToyOSDSR::state() const {
  std::vector<NamedTensor> out;
  const std::string meta(kMeta);
  put_scalar(out, meta + "channels", static_cast<double>(config_.channels));
  put_scalar(out, meta + "denoiser_blocks", static_cast<double>(config_.denoiser_blocks));
  put_scalar(out, meta + "embedding_dim", static_cast<double>(config_.embedding_dim));
  put_scalar(out, meta + "activation", static_cast<double>(config_.activation));
  put_scalar(out, meta + "residual_denoiser", config_.residual_denoiser ? 1.0 : 0.0);
  put_scalar(out, meta + "schedule", static_cast<double>(config_.schedule));
  put_scalar(out, meta + "t_max", config_.t_max);
  put_scalar(out, meta + "block_scale_init", config_.block_scale_init);
  put_scalar(out, meta + "seed_lo", static_cast<double>(config_.seed & 0xffffffffULL));
  put_scalar(out, meta + "seed_hi", static_cast<double>(config_.seed >> 32));
  put_scalar(out, meta + "timestep", timestep_);
  for (const auto& p : backbone_parameters()) out.push_back({p.name, p.value.detach()});
  for (std::size_t i = 0; i < modules_.size(); ++i) {
    if (!quantizers_[i]) continue;
    const FinetuneQuantizer& fq = *quantizers_[i];
    const std::string pre = "quant." + names_[i];
    put_scalar(out, pre + ".active", active_[i] ? 1.0 : 0.0);
    put_scalar(out, pre + ".weight_bits", fq.weight_bits());
    put_scalar(out, pre + ".activation_bits", fq.activation_bits());
    put_scalar(out, pre + ".bias_bits", fq.bias_bits());
    if (fq.rank() > 0) {
      out.push_back({pre + ".l1", fq.l1().detach()});
      out.push_back({pre + ".l2", fq.l2().detach()});
    }
    if (fq.finetune_rank() > 0) {
      out.push_back({pre + ".f1", fq.f1().detach()});
      out.push_back({pre + ".f2", fq.f2().detach()});
    }
    out.push_back({pre + ".log_phi", fq.transform().log_phi.detach()});
    out.push_back({pre + ".gamma", fq.transform().gamma.detach()});
    put_quantizer(out, pre + ".qw", fq.weight_quantizer());
    put_quantizer(out, pre + ".qa", fq.activation_quantizer());
  }
  return out;
}

ToyOSDSR ToyOSDSR::from_state(const std::vector<NamedTensor>& entries) {
  const EntryMap m(entries);
  const std::string meta(kMeta);
  ToyConfig cfg;
  cfg.channels = static_cast<std::size_t>(m.scalar(meta + "channels"));
  cfg.denoiser_blocks = static_cast<std::size_t>(m.scalar(meta + "denoiser_blocks"));
  cfg.embedding_dim = static_cast<std::size_t>(m.scalar(meta + "embedding_dim"));
  cfg.activation = static_cast<Activation>(static_cast<int>(m.scalar(meta + "activation")));
  cfg.residual_denoiser = m.scalar(meta + "residual_denoiser") != 0.0;
  cfg.schedule = static_cast<diffusion::ScheduleKind>(static_cast<int>(m.scalar(meta + "schedule")));
  cfg.t_max = static_cast<int>(m.scalar(meta + "t_max"));
  cfg.block_scale_init = m.scalar(meta + "block_scale_init");
  cfg.seed = static_cast<std::uint64_t>(m.scalar(meta + "seed_lo")) |
             (static_cast<std::uint64_t>(m.scalar(meta + "seed_hi")) << 32);
  ToyOSDSR model = create(cfg);
  model.set_timestep(static_cast<int>(m.scalar(meta + "timestep")));
  for (auto& p : model.backbone_parameters()) {
    const Tensor src = m.leaf(p.name, p.value.shape());
    std::copy(src.data().begin(), src.data().end(), p.value.mutable_data().begin());
  }
  for (std::size_t i = 0; i < model.modules_.size(); ++i) {
    const std::string pre = "quant." + model.names_[i];
    if (!m.has(pre + ".active")) continue;
    const ConvLayer& layer = model.modules_[i];
    const std::size_t rows = layer.weight.dim(0), cols = layer.weight.dim(1);
    FinetuneQuantizer::State st;
    st.weight = layer.weight;
    st.bias = layer.bias;
    if (m.has(pre + ".l1")) {
      st.l1 = m.get(pre + ".l1").detach().set_requires_grad(true);
      st.l2 = m.get(pre + ".l2").detach().set_requires_grad(true);
    }
    if (m.has(pre + ".f1")) {
      st.f1 = m.get(pre + ".f1").detach().set_requires_grad(true);
      st.f2 = m.get(pre + ".f2").detach().set_requires_grad(true);
    }
    st.transform.log_phi = m.leaf(pre + ".log_phi", Shape{cols, 1}).set_requires_grad(true);
    st.transform.gamma = m.leaf(pre + ".gamma", Shape{cols, 1}).set_requires_grad(true);
    st.qw = read_quantizer(m, pre + ".qw");
    st.qa = read_quantizer(m, pre + ".qa");
    st.weight_bits = static_cast<int>(m.scalar(pre + ".weight_bits"));
    st.activation_bits = static_cast<int>(m.scalar(pre + ".activation_bits"));
    st.bias_bits = static_cast<int>(m.scalar(pre + ".bias_bits"));
    if (st.l1.defined() && (st.l1.dim(0) != rows || st.l2.dim(1) != cols)) {
      throw FormatError("low-rank factors of " + model.names_[i] + " do not match the layer");
    }
    model.quantizers_[i] = FinetuneQuantizer::from_state(std::move(st));
    model.active_[i] = m.scalar(pre + ".active") != 0.0;
  }
  return model;
}

ToyOSDSR ToyOSDSR::clone() const {
  ToyOSDSR out = *this;
  out.enc1_ = clone_conv(enc1_);
  out.enc2_ = clone_conv(enc2_);
  out.c_y_ = c_y_.clone();
  for (auto& b : out.blocks_) {
    b.temb_weight = b.temb_weight.clone();
    b.temb_bias = b.temb_bias.clone();
    b.scale = b.scale.clone();
  }
  for (std::size_t i = 0; i < modules_.size(); ++i) {
    out.modules_[i] = clone_conv(modules_[i]);
    if (quantizers_[i]) {
      out.quantizers_[i] = quantizers_[i]->clone();
      out.quantizers_[i]->rebind_frozen(out.modules_[i].weight, out.modules_[i].bias);
    }
  }
  return out;
}

TrainLog train_backbone(ToyOSDSR& model, const Dataset& data, int t, const TrainOptions& options) {
  if (data.empty()) throw DataError("backbone training needs a non-empty dataset");
  if (options.batch == 0) throw ConfigError("batch size must be positive");
  for (std::size_t i = 0; i < model.module_count(); ++i) {
    if (model.has_quantizer(i)) throw ConfigError("cannot retrain a backbone with quantisers installed");
  }
  model.set_timestep(t);
  model.set_backbone_trainable(true);
  double denoiser_lr = options.lr;
  if (options.precondition_denoiser) {
    const double abar = model.schedule().alpha_bar(t);
    denoiser_lr *= std::min(1.0, std::sqrt(abar / (1.0 - abar)));
  }
  ParamGroup outer{{}, options.lr}, denoiser{{}, denoiser_lr};
  auto output_gain = [](const std::string& name) {
    return name == "denoiser.c_y" || (name.rfind("denoiser.", 0) == 0 && name.ends_with(".scale"));
  };
  for (const auto& p : model.backbone_parameters()) {
    (output_gain(p.name) ? denoiser : outer).params.push_back(p.value);
  }
  Adam opt({outer, denoiser});
  std::mt19937_64 rng(options.seed);
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);
  TrainLog log;
  log.timestep = t;
  std::size_t steps = 0;
  const std::size_t per_epoch = (data.size() + options.batch - 1) / options.batch;
  std::size_t total = per_epoch * options.epochs;
  if (options.max_steps != 0) total = std::min(total, options.max_steps);
  for (std::size_t epoch = 0; epoch < options.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t start = 0; start < order.size(); start += options.batch) {
      if (options.max_steps != 0 && steps >= options.max_steps) break;
      const std::size_t end = std::min(order.size(), start + options.batch);
      const std::span<const std::size_t> idx(order.data() + start, end - start);
      // Loss on the unclamped decoder output so saturated pixels still pass gradient.
      ForwardTrace trace;
      model.forward_masked(gather_lr(data, idx), t, std::vector<bool>(model.module_count(), false), &trace);
      const Tensor out = trace.outputs.back();
      const Tensor target = gather_hr(data, idx);
      const Tensor loss = add(mse_loss(out, target), mul_scalar(perceptual_proxy(out, target), options.proxy_weight));
      const double value = loss.item();
      if (!std::isfinite(value)) {
        model.set_backbone_trainable(false);
        throw TrainingError("backbone loss became non-finite at step " + std::to_string(steps) + " (t=" +
                            std::to_string(t) + ")");
      }
      opt.zero_grad();
      loss.backward();
      if (options.cosine_decay) {
        opt.set_lr_scale(0.5 * (1.0 + std::cos(M_PI * static_cast<double>(steps) / static_cast<double>(total))));
      }
      opt.step();
      log.losses.push_back(value);
      ++steps;
    }
  }
  opt.zero_grad();
  model.set_backbone_trainable(false);
  return log;
}

}  // namespace qart::model
