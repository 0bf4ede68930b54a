#include "sdlab/schedule.hpp"

#include <cmath>
#include <string>

namespace sdlab {

NoiseSchedule::NoiseSchedule(int max_timestep, Vector betas)
    : max_timestep_(max_timestep), betas_(std::move(betas)) {
  if (max_timestep_ < 1) throw InvalidArgument("schedule: T must be >= 1");
  require_dim(betas_.size(), static_cast<std::size_t>(max_timestep_), "schedule betas");
  alpha_bars_.resize(betas_.size() + 1);
  alpha_bars_[0] = 1.0;
  for (std::size_t i = 0; i < betas_.size(); ++i) {
    const double b = betas_[i];
    if (!(b > 0.0 && b < 1.0)) {
      throw InvalidArgument("schedule: beta_" + std::to_string(i + 1) + " outside (0,1)");
    }
    alpha_bars_[i + 1] = alpha_bars_[i] * (1.0 - b);
  }
}

void NoiseSchedule::require_timestep(int t, int min_t) const {
  if (t < min_t || t > max_timestep_) {
    throw OutOfRange("timestep " + std::to_string(t) + " outside [" +
                     std::to_string(min_t) + ", " + std::to_string(max_timestep_) + "]");
  }
}

double NoiseSchedule::beta(int t) const {
  require_timestep(t, 1);
  return betas_[static_cast<std::size_t>(t - 1)];
}

double NoiseSchedule::alpha_bar(int t) const {
  require_timestep(t, 0);
  return alpha_bars_[static_cast<std::size_t>(t)];
}

NoiseSchedule build_schedule(int max_timestep, double beta_min, double beta_max,
                             ScheduleKind kind) {
  if (max_timestep < 1) throw InvalidArgument("build_schedule: T must be >= 1");
  if (!(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0)) {
    throw InvalidArgument("build_schedule: require 0 < beta_min <= beta_max < 1");
  }
  Vector betas(static_cast<std::size_t>(max_timestep));
  for (int i = 0; i < max_timestep; ++i) {
    const double frac = max_timestep == 1 ? 0.0 : static_cast<double>(i) / (max_timestep - 1);
    switch (kind) {
      case ScheduleKind::linear:
        betas[i] = beta_min + frac * (beta_max - beta_min);
        break;
      case ScheduleKind::scaled_linear: {
        const double lo = std::sqrt(beta_min);
        const double hi = std::sqrt(beta_max);
        const double r = lo + frac * (hi - lo);
        betas[i] = r * r;
        break;
      }
    }
  }
  return NoiseSchedule(max_timestep, std::move(betas));
}

double dca_coefficient(const NoiseSchedule& sched, int t, int cutoff) {
  sched.require_timestep(t, 0);
  if (cutoff < 0 || cutoff > sched.max_timestep()) {
    throw OutOfRange("dca cutoff " + std::to_string(cutoff) + " outside [0, T]");
  }
  return t > cutoff ? 1.0 : 1.0 - sched.alpha_bar(t);
}

double sds_weight(const NoiseSchedule& sched, int t, WeightKind kind) {
  sched.require_timestep(t, 1);
  switch (kind) {
    case WeightKind::uniform:
      return 1.0;
    case WeightKind::one_minus_alpha_bar:
      return 1.0 - sched.alpha_bar(t);
  }
  return 1.0;
}

std::string_view to_string(ScheduleKind kind) {
  return kind == ScheduleKind::linear ? "linear" : "scaled_linear";
}

std::string_view to_string(WeightKind kind) {
  return kind == WeightKind::uniform ? "uniform" : "one_minus_alpha_bar";
}

ScheduleKind parse_schedule_kind(std::string_view name) {
  if (name == "linear") return ScheduleKind::linear;
  if (name == "scaled_linear") return ScheduleKind::scaled_linear;
  throw InvalidArgument("unknown schedule kind '" + std::string(name) + "'");
}

WeightKind parse_weight_kind(std::string_view name) {
  if (name == "uniform") return WeightKind::uniform;
  if (name == "one_minus_alpha_bar") return WeightKind::one_minus_alpha_bar;
  throw InvalidArgument("unknown weight kind '" + std::string(name) + "'");
}

}  // namespace sdlab
