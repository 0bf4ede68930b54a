#pragma once

#include <span>
#include <string_view>

#include "sdlab/common.hpp"

namespace sdlab {

enum class ScheduleKind { linear, scaled_linear };
enum class WeightKind { uniform, one_minus_alpha_bar };

/// Discrete DDPM timetable. Timesteps run 1..T; alpha_bar(0) == 1 so that
/// t = 0 means "no noise".
class NoiseSchedule {
 public:
  NoiseSchedule(int max_timestep, Vector betas);

  int max_timestep() const noexcept { return max_timestep_; }

  /// beta_t for 1 <= t <= T.
  double beta(int t) const;
  /// Cumulative product of (1 - beta_i), i = 1..t, for 0 <= t <= T.
  double alpha_bar(int t) const;

  /// betas()[t - 1] == beta(t).
  std::span<const double> betas() const noexcept { return betas_; }
  /// alpha_bars()[t] == alpha_bar(t), size T + 1.
  std::span<const double> alpha_bars() const noexcept { return alpha_bars_; }

  void require_timestep(int t, int min_t = 0) const;

  bool operator==(const NoiseSchedule&) const = default;

 private:
  int max_timestep_;
  Vector betas_;
  Vector alpha_bars_;
};

/// `linear` interpolates beta from beta_min to beta_max; `scaled_linear`
/// interpolates sqrt(beta) and squares.
NoiseSchedule build_schedule(int max_timestep, double beta_min, double beta_max,
                             ScheduleKind kind = ScheduleKind::linear);

/// Distribution coefficient: 1 above the cutoff, 1 - alpha_bar(t) at or below.
double dca_coefficient(const NoiseSchedule& sched, int t, int cutoff);

double sds_weight(const NoiseSchedule& sched, int t, WeightKind kind);

std::string_view to_string(ScheduleKind kind);
std::string_view to_string(WeightKind kind);
ScheduleKind parse_schedule_kind(std::string_view name);
WeightKind parse_weight_kind(std::string_view name);

}  // namespace sdlab
