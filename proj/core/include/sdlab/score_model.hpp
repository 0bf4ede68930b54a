#pragma once

#include <map>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "sdlab/common.hpp"
#include "sdlab/schedule.hpp"

namespace sdlab {

inline constexpr std::string_view kNullCondition = "null";

enum class SampleRole { clean, noisy, noise, prediction };

/// A point in sample space tagged with what it represents (x_0, x_t, a noise
/// draw, or a model prediction).
struct Sample {
  SampleRole role = SampleRole::clean;
  Vector values;

  std::size_t size() const noexcept { return values.size(); }
  double operator[](std::size_t i) const { return values[i]; }
  double& operator[](std::size_t i) { return values[i]; }
  operator std::span<const double>() const noexcept { return values; }
};

/// Isotropic Gaussian mixture with named component masks. Each condition
/// selects a subset of components whose weights are renormalised; the
/// reserved `null` condition selects every component and plays the role of
/// the unconditional model.
class ConditionedMixture {
 public:
  using ConditionMap = std::map<std::string, std::vector<std::size_t>, std::less<>>;

  ConditionedMixture(std::size_t dim, double sigma, Vector weights,
                     std::vector<Vector> means, ConditionMap conditions = {});

  std::size_t dim() const noexcept { return dim_; }
  double sigma() const noexcept { return sigma_; }
  std::size_t component_count() const noexcept { return weights_.size(); }
  double weight(std::size_t k) const { return weights_.at(k); }
  const Vector& mean(std::size_t k) const { return means_.at(k); }
  const ConditionMap& conditions() const noexcept { return conditions_; }
  bool has_condition(std::string_view name) const;

  /// Component indices selected by `name`, in ascending order.
  const std::vector<std::size_t>& components(std::string_view name) const;
  /// log of the renormalised weights, aligned with components(name).
  const Vector& log_weights(std::string_view name) const;

 private:
  std::size_t dim_;
  double sigma_;
  Vector weights_;
  std::vector<Vector> means_;
  ConditionMap conditions_;
  std::map<std::string, Vector, std::less<>> log_weights_;
};

/// sqrt(abar_t) x0 + sqrt(1 - abar_t) eps.
Sample diffuse(std::span<const double> x0, int t, std::span<const double> eps,
               const NoiseSchedule& sched);

/// log p_t(x_t | cond) of the diffused conditional mixture.
double log_density(const ConditionedMixture& model, std::span<const double> x_t, int t,
                   std::string_view cond, const NoiseSchedule& sched);

/// grad_x log p_t(x | cond); defined for 0 <= t <= T.
Vector score(const ConditionedMixture& model, std::span<const double> x_t, int t,
             std::string_view cond, const NoiseSchedule& sched);

/// Exact noise prediction -sqrt(1 - abar_t) * score, for 1 <= t <= T.
Sample eps_predict(const ConditionedMixture& model, std::span<const double> x_t, int t,
                   std::string_view cond, const NoiseSchedule& sched);

/// Classifier-free guidance: e(cond) + s * (e(cond) - e(null)).
Sample eps_cfg(const ConditionedMixture& model, std::span<const double> x_t, int t,
               std::string_view cond, double scale, const NoiseSchedule& sched);

/// DDPM ancestral sampling from x_T ~ N(0, I) with fixed posterior variance
/// (1 - abar_{t-1}) / (1 - abar_t) * beta_t.
Sample ancestral_sample(const ConditionedMixture& model, std::string_view cond,
                        const NoiseSchedule& sched, Rng& rng);

/// Exact draw x_0 ~ p(x | cond) from the undiffused mixture.
Sample draw_clean(const ConditionedMixture& model, std::string_view cond, Rng& rng);

}  // namespace sdlab
