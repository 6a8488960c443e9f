#pragma once

#include <functional>
#include <span>
#include <string>
#include <vector>

#include "qart/tensor.hpp"

namespace qart::diffusion {

enum class ScheduleKind { Linear, ScaledLinear };

ScheduleKind parse_schedule_kind(const std::string& name);
std::string to_string(ScheduleKind kind);

/// DDPM-style schedule indexed by t = 1..t_max.
class NoiseSchedule {
 public:
  /// Linear: beta from 1e-4 to 2e-2. ScaledLinear: sqrt(beta) linear from
  /// sqrt(8.5e-4) to sqrt(1.2e-2).
  static NoiseSchedule build(ScheduleKind kind = ScheduleKind::Linear, int t_max = 1000);
  /// Throws ParameterError unless every beta lies in (0, 1).
  static NoiseSchedule from_betas(std::vector<double> betas);

  int t_max() const noexcept { return static_cast<int>(beta_.size()); }
  double beta(int t) const { return beta_[index(t)]; }
  double alpha(int t) const { return 1.0 - beta_[index(t)]; }
  /// Cumulative product of alpha_1..alpha_t.
  double alpha_bar(int t) const { return alpha_bar_[index(t)]; }
  /// sqrt(1 - alpha_bar_t), the factor the latent quantisation error scales with.
  double lambda(int t) const;

  const std::vector<double>& betas() const noexcept { return beta_; }
  const std::vector<double>& alpha_bars() const noexcept { return alpha_bar_; }

 private:
  std::size_t index(int t) const;
  std::vector<double> beta_;
  std::vector<double> alpha_bar_;
};

using EpsFn = std::function<Tensor(const Tensor& z_l, int t, const Tensor& c_y)>;

/// One-step LR -> HR latent: Z_H = (Z_L - sqrt(1 - abar_t) eps(Z_L; t, c_y)) / sqrt(abar_t).
/// Throws ParameterError when t is outside [1, t_max].
Tensor lr_to_hr_latent(const NoiseSchedule& schedule, const Tensor& z_l, int t, const EpsFn& eps_fn,
                       const Tensor& c_y);
/// Same transform for an explicit cumulative alpha and noise estimate.
Tensor lr_to_hr_latent(const Tensor& z_l, double alpha_bar, const Tensor& eps);

struct TimestepErrorRow {
  int t = 0;
  double lambda = 0.0;
  double delta_z = 0.0;
};

/// Rows sorted by t; lambda column taken from the schedule.
struct TimestepErrorProfile {
  std::vector<TimestepErrorRow> rows;

  /// Header "t,lambda,delta_z", one row per timestep.
  std::string to_csv() const;
};

/// Latent producer for a probe at a timestep.
using LatentFn = std::function<Tensor(std::size_t probe, int t)>;

/// delta_z(t) = mean over probes of ||quant(p, t) - reference(p, t)||_2.
/// Throws DataError on an empty probe set, ParameterError on bad timesteps.
TimestepErrorProfile measure_timestep_error(const NoiseSchedule& schedule, std::span<const int> timesteps,
                                            std::size_t probe_count, const LatentFn& reference,
                                            const LatentFn& quantized);

}  // namespace qart::diffusion
