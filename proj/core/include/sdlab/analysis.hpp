#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "sdlab/common.hpp"
#include "sdlab/degradation.hpp"
#include "sdlab/distill.hpp"
#include "sdlab/schedule.hpp"
#include "sdlab/score_model.hpp"

namespace sdlab {

struct CurveReport {
  std::vector<int> timesteps;
  Vector values;
  Vector stderrs;
  std::size_t trials = 0;

  void validate() const;
};

/// CSV with header `t,value,stderr,trials`.
void write_curve_csv(std::ostream& out, const CurveReport& report);

enum class X0Source { fixed, mixture_draws };

/// cosine: mean per-trial cosine(eps, e(x_t)).
/// abs_cosine: mean of its absolute value.
/// pearson: per-coordinate Pearson correlation across trials, |r| averaged
/// over coordinates.
enum class CorrelationMetric { cosine, abs_cosine, pearson };

struct CurveOptions {
  std::string condition = std::string(kNullCondition);
  X0Source x0_source = X0Source::mixture_draws;
  Vector fixed_x0;  // used when x0_source == fixed
  std::size_t trials = 1000;
  std::uint64_t seed = 0;
  unsigned threads = 1;
};

CurveReport correlation_curve(const ConditionedMixture& model, const NoiseSchedule& sched,
                              std::span<const int> t_grid, const CurveOptions& options,
                              CorrelationMetric metric = CorrelationMetric::cosine);

/// Per-coordinate variance of e(x_t) across trials, averaged over coordinates.
CurveReport variance_curve(const ConditionedMixture& model, const NoiseSchedule& sched,
                           std::span<const int> t_grid, const CurveOptions& options);

/// Spearman rank correlation (average ranks for ties).
double spearman(std::span<const double> a, std::span<const double> b);

struct GridSpec {
  std::size_t points = 4096;
  /// Half-width of the default box in units of the widest relevant std.
  double half_width = 8.0;
  /// Explicit per-axis box; when unset the box is mean +- half_width * std
  /// around the diffused render distribution.
  std::optional<std::pair<double, double>> bounds;
};

/// Thrown when the grid leaves more than 1e-6 of probability mass outside.
class CoverageError : public InvalidArgument {
 public:
  using InvalidArgument::InvalidArgument;
};

/// KL( N(sqrt(abar_t) theta, (1 - abar_t) I) || p_t(. | cond) ) by midpoint
/// quadrature on a tensor grid, for dimension 1 or 2.
double kl_quadrature(std::span<const double> theta, const ConditionedMixture& model,
                     const NoiseSchedule& sched, int t, std::string_view cond,
                     const GridSpec& grid = {}, unsigned threads = 1);

using Box = std::vector<std::pair<double, double>>;

/// KL(q || p) for two log-densities on a 1-D or 2-D box (one [lo, hi] per
/// axis), midpoint rule with `points` cells per axis.
double kl_grid(const std::function<double(std::span<const double>)>& log_q,
               const std::function<double(std::span<const double>)>& log_p, const Box& box,
               std::size_t points, unsigned threads = 1);

/// Central differences, one coordinate at a time.
Vector finite_diff(const std::function<double(std::span<const double>)>& fn,
                   std::span<const double> params, double h);

/// Euclidean distance from x to the closest component mean of `cond`.
double nearest_mode_distance(const ConditionedMixture& model, std::string_view cond,
                             std::span<const double> x);

struct AblationRow {
  OperatorVariant variant = OperatorVariant::nonlinear;
  double final_mode_dist = 0.0;
  double final_op_loss = 0.0;
  std::uint64_t seed = 0;
};

/// Mean operator loss over the last `window` trajectory records.
double tail_op_loss(const Trajectory& traj, std::size_t window = 100);

/// One VDM distillation per variant on a pixel-field problem (identity
/// renderer), all from the same initial theta and seed. Rows come back in
/// the order nonlinear, linear, nonlinear_plus_noise.
std::vector<AblationRow> ablation_degradation(const DistillConfig& cfg,
                                              const ConditionedMixture& model,
                                              const NoiseSchedule& sched,
                                              const OperatorSpec& base,
                                              std::span<const double> theta0);

/// CSV with header `variant,final_mode_dist,final_op_loss,seed`.
void write_ablation_csv(std::ostream& out, std::span<const AblationRow> rows);

/// Operator regression on a fixed nonlinear map of the input,
///   target_i = tanh(2 u_i) - 0.5 u_{i+1} + 0.3 u_i u_{i+1},  u ~ N(0, I),
/// indices cyclic. Trains with minibatch Adam and returns the mean loss on a
/// held-out set. Data draws depend only on `seed`, so variants are paired.
struct SyntheticFitOptions {
  std::size_t dim = 4;
  std::size_t steps = 3000;
  std::size_t batch = 32;
  std::size_t holdout = 2000;
  double lr = 0.01;
  std::uint64_t seed = 0;
};

Vector synthetic_degradation_target(std::span<const double> u);

double synthetic_degradation_fit(OperatorVariant variant, const OperatorSpec& base,
                                 const SyntheticFitOptions& options);

std::string_view to_string(X0Source s);
X0Source parse_x0_source(std::string_view name);
std::string_view to_string(CorrelationMetric m);
CorrelationMetric parse_correlation_metric(std::string_view name);

}  // namespace sdlab
