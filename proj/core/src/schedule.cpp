#include "qart/schedule.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "qart/errors.hpp"
#include "qart/ops.hpp"

namespace qart::diffusion {

ScheduleKind parse_schedule_kind(const std::string& name) {
  if (name == "linear") return ScheduleKind::Linear;
  if (name == "scaled_linear") return ScheduleKind::ScaledLinear;
  throw ConfigError("unknown schedule kind '" + name + "'");
}

std::string to_string(ScheduleKind kind) { return kind == ScheduleKind::Linear ? "linear" : "scaled_linear"; }

NoiseSchedule NoiseSchedule::build(ScheduleKind kind, int t_max) {
  if (t_max < 1) throw ParameterError("t_max must be >= 1");
  std::vector<double> betas(static_cast<std::size_t>(t_max));
  const double span = t_max > 1 ? static_cast<double>(t_max - 1) : 1.0;
  for (int t = 0; t < t_max; ++t) {
    const double frac = static_cast<double>(t) / span;
    if (kind == ScheduleKind::Linear) {
      betas[t] = 1e-4 + (2e-2 - 1e-4) * frac;
    } else {
      const double lo = std::sqrt(8.5e-4), hi = std::sqrt(1.2e-2);
      const double r = lo + (hi - lo) * frac;
      betas[t] = r * r;
    }
  }
  return from_betas(std::move(betas));
}

NoiseSchedule NoiseSchedule::from_betas(std::vector<double> betas) {
  if (betas.empty()) throw ParameterError("schedule needs at least one step");
  NoiseSchedule s;
  double prod = 1.0;
  for (double b : betas) {
    if (!(b > 0.0 && b < 1.0)) throw ParameterError("beta must lie in (0, 1)");
    prod *= 1.0 - b;
    s.alpha_bar_.push_back(prod);
  }
  s.beta_ = std::move(betas);
  return s;
}

std::size_t NoiseSchedule::index(int t) const {
  if (t < 1 || t > t_max()) {
    throw ParameterError("timestep " + std::to_string(t) + " outside [1, " + std::to_string(t_max()) + "]");
  }
  return static_cast<std::size_t>(t - 1);
}

double NoiseSchedule::lambda(int t) const { return std::sqrt(1.0 - alpha_bar(t)); }

Tensor lr_to_hr_latent(const Tensor& z_l, double alpha_bar, const Tensor& eps) {
  if (z_l.shape() != eps.shape()) {
    throw DimensionError("noise estimate " + shape_string(eps.shape()) + " does not match latent " +
                         shape_string(z_l.shape()));
  }
  if (!(alpha_bar > 0.0 && alpha_bar <= 1.0)) throw ParameterError("alpha_bar must lie in (0, 1]");
  const double noise_gain = std::sqrt(1.0 - alpha_bar);
  const double inv_signal = 1.0 / std::sqrt(alpha_bar);
  return mul_scalar(sub(z_l, mul_scalar(eps, noise_gain)), inv_signal);
}

Tensor lr_to_hr_latent(const NoiseSchedule& schedule, const Tensor& z_l, int t, const EpsFn& eps_fn,
                       const Tensor& c_y) {
  const double abar = schedule.alpha_bar(t);
  return lr_to_hr_latent(z_l, abar, eps_fn(z_l, t, c_y));
}

std::string TimestepErrorProfile::to_csv() const {
  std::ostringstream os;
  os.precision(17);
  os << "t,lambda,delta_z\n";
  for (const auto& r : rows) os << r.t << ',' << r.lambda << ',' << r.delta_z << '\n';
  return os.str();
}

TimestepErrorProfile measure_timestep_error(const NoiseSchedule& schedule, std::span<const int> timesteps,
                                            std::size_t probe_count, const LatentFn& reference,
                                            const LatentFn& quantized) {
  if (probe_count == 0) throw DataError("empty probe set");
  std::vector<int> ts(timesteps.begin(), timesteps.end());
  std::sort(ts.begin(), ts.end());
  TimestepErrorProfile profile;
  for (int t : ts) {
    const double lam = schedule.lambda(t);
    double total = 0.0;
    for (std::size_t p = 0; p < probe_count; ++p) {
      const Tensor a = reference(p, t);
      const Tensor b = quantized(p, t);
      if (a.shape() != b.shape()) throw DimensionError("latent shapes differ between FP and quantized runs");
      double sq = 0.0;
      for (std::size_t i = 0; i < a.numel(); ++i) {
        const double d = a.data()[i] - b.data()[i];
        sq += d * d;
      }
      total += std::sqrt(sq);
    }
    profile.rows.push_back({t, lam, total / static_cast<double>(probe_count)});
  }
  return profile;
}

}  // namespace qart::diffusion
