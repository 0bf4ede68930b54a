#include "sdlab/score_model.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

namespace sdlab {

namespace {

struct Diffused {
  double mean_scale;  // sqrt(abar_t)
  double variance;    // abar_t sigma^2 + 1 - abar_t
};

Diffused diffused_params(const ConditionedMixture& model, int t, const NoiseSchedule& sched) {
  const double ab = sched.alpha_bar(t);
  return {std::sqrt(ab), ab * model.sigma() * model.sigma() + (1.0 - ab)};
}

// Unnormalised log responsibilities (log w_k - |x - m_k|^2 / 2v) for the
// masked components; returns their log-sum-exp.
double masked_log_terms(const ConditionedMixture& model, std::span<const double> x,
                        const Diffused& p, std::string_view cond, Vector& terms) {
  const auto& comps = model.components(cond);
  const auto& logw = model.log_weights(cond);
  terms.resize(comps.size());
  double peak = -std::numeric_limits<double>::infinity();
  for (std::size_t j = 0; j < comps.size(); ++j) {
    const Vector& mu = model.mean(comps[j]);
    double sq = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
      const double d = x[i] - p.mean_scale * mu[i];
      sq += d * d;
    }
    terms[j] = logw[j] - 0.5 * sq / p.variance;
    peak = std::max(peak, terms[j]);
  }
  double acc = 0.0;
  for (double v : terms) acc += std::exp(v - peak);
  return peak + std::log(acc);
}

}  // namespace

ConditionedMixture::ConditionedMixture(std::size_t dim, double sigma, Vector weights,
                                       std::vector<Vector> means, ConditionMap conditions)
    : dim_(dim),
      sigma_(sigma),
      weights_(std::move(weights)),
      means_(std::move(means)),
      conditions_(std::move(conditions)) {
  if (dim_ == 0) throw InvalidArgument("mixture: dim must be >= 1");
  if (!(sigma_ > 0.0) || !std::isfinite(sigma_)) throw InvalidArgument("mixture: sigma must be > 0");
  if (weights_.empty()) throw InvalidArgument("mixture: need at least one component");
  require_dim(means_.size(), weights_.size(), "mixture means");
  double total = 0.0;
  for (double w : weights_) {
    if (!(w > 0.0)) throw InvalidArgument("mixture: weights must be positive");
    total += w;
  }
  if (std::abs(total - 1.0) > 1e-12) throw InvalidArgument("mixture: weights must sum to 1");
  for (const auto& mu : means_) require_dim(mu.size(), dim_, "mixture mean");

  std::vector<std::size_t> all(weights_.size());
  for (std::size_t k = 0; k < all.size(); ++k) all[k] = k;
  if (auto it = conditions_.find(kNullCondition); it != conditions_.end()) {
    auto given = it->second;
    std::sort(given.begin(), given.end());
    if (given != all) throw InvalidArgument("mixture: condition 'null' must select every component");
  }
  conditions_[std::string(kNullCondition)] = all;

  for (auto& [name, comps] : conditions_) {
    if (comps.empty()) throw InvalidArgument("mixture: condition '" + name + "' selects no component");
    std::sort(comps.begin(), comps.end());
    comps.erase(std::unique(comps.begin(), comps.end()), comps.end());
    double mass = 0.0;
    for (std::size_t k : comps) {
      if (k >= weights_.size()) {
        throw InvalidArgument("mixture: condition '" + name + "' references component " +
                              std::to_string(k));
      }
      mass += weights_[k];
    }
    Vector logw;
    logw.reserve(comps.size());
    for (std::size_t k : comps) logw.push_back(std::log(weights_[k] / mass));
    log_weights_[name] = std::move(logw);
  }
}

bool ConditionedMixture::has_condition(std::string_view name) const {
  return conditions_.find(name) != conditions_.end();
}

const std::vector<std::size_t>& ConditionedMixture::components(std::string_view name) const {
  auto it = conditions_.find(name);
  if (it == conditions_.end()) throw InvalidArgument("unknown condition '" + std::string(name) + "'");
  return it->second;
}

const Vector& ConditionedMixture::log_weights(std::string_view name) const {
  auto it = log_weights_.find(name);
  if (it == log_weights_.end()) throw InvalidArgument("unknown condition '" + std::string(name) + "'");
  return it->second;
}

Sample diffuse(std::span<const double> x0, int t, std::span<const double> eps,
               const NoiseSchedule& sched) {
  require_dim(eps.size(), x0.size(), "diffuse");
  const double ab = sched.alpha_bar(t);
  const double a = std::sqrt(ab);
  const double b = std::sqrt(1.0 - ab);
  Sample out{SampleRole::noisy, Vector(x0.size())};
  for (std::size_t i = 0; i < x0.size(); ++i) out.values[i] = a * x0[i] + b * eps[i];
  return out;
}

double log_density(const ConditionedMixture& model, std::span<const double> x_t, int t,
                   std::string_view cond, const NoiseSchedule& sched) {
  require_dim(x_t.size(), model.dim(), "log_density");
  model.components(cond);
  const Diffused p = diffused_params(model, t, sched);
  Vector terms;
  const double lse = masked_log_terms(model, x_t, p, cond, terms);
  const double d = static_cast<double>(model.dim());
  return lse - 0.5 * d * std::log(2.0 * std::numbers::pi * p.variance);
}

Vector score(const ConditionedMixture& model, std::span<const double> x_t, int t,
             std::string_view cond, const NoiseSchedule& sched) {
  require_dim(x_t.size(), model.dim(), "score");
  const Diffused p = diffused_params(model, t, sched);
  Vector terms;
  const double lse = masked_log_terms(model, x_t, p, cond, terms);
  const auto& comps = model.components(cond);
  // sum_k r_k (sqrt(abar) mu_k - x) / v
  Vector out(x_t.size(), 0.0);
  for (std::size_t j = 0; j < comps.size(); ++j) {
    const double r = std::exp(terms[j] - lse);
    if (r == 0.0) continue;
    const Vector& mu = model.mean(comps[j]);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += r * p.mean_scale * mu[i];
  }
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = (out[i] - x_t[i]) / p.variance;
  return out;
}

Sample eps_predict(const ConditionedMixture& model, std::span<const double> x_t, int t,
                   std::string_view cond, const NoiseSchedule& sched) {
  sched.require_timestep(t, 1);
  Vector s = score(model, x_t, t, cond, sched);
  const double scale = -std::sqrt(1.0 - sched.alpha_bar(t));
  for (double& v : s) v *= scale;
  return {SampleRole::prediction, std::move(s)};
}

Sample eps_cfg(const ConditionedMixture& model, std::span<const double> x_t, int t,
               std::string_view cond, double scale, const NoiseSchedule& sched) {
  Sample conditional = eps_predict(model, x_t, t, cond, sched);
  const Sample unconditional = eps_predict(model, x_t, t, kNullCondition, sched);
  for (std::size_t i = 0; i < conditional.size(); ++i) {
    conditional[i] = conditional[i] + scale * (conditional[i] - unconditional[i]);
  }
  return conditional;
}

Sample ancestral_sample(const ConditionedMixture& model, std::string_view cond,
                        const NoiseSchedule& sched, Rng& rng) {
  model.components(cond);
  const std::size_t d = model.dim();
  Vector x = standard_normal(rng, d);
  Vector z(d);
  for (int t = sched.max_timestep(); t >= 1; --t) {
    const Sample eps = eps_predict(model, x, t, cond, sched);
    const double beta = sched.beta(t);
    const double ab = sched.alpha_bar(t);
    const double coeff = beta / std::sqrt(1.0 - ab);
    const double inv_sqrt_alpha = 1.0 / std::sqrt(1.0 - beta);
    for (std::size_t i = 0; i < d; ++i) x[i] = inv_sqrt_alpha * (x[i] - coeff * eps[i]);
    if (t > 1) {
      const double var = (1.0 - sched.alpha_bar(t - 1)) / (1.0 - ab) * beta;
      const double sd = std::sqrt(var);
      fill_standard_normal(rng, z);
      for (std::size_t i = 0; i < d; ++i) x[i] += sd * z[i];
    }
  }
  return {SampleRole::clean, std::move(x)};
}

Sample draw_clean(const ConditionedMixture& model, std::string_view cond, Rng& rng) {
  const auto& comps = model.components(cond);
  const auto& logw = model.log_weights(cond);
  Vector probs(logw.size());
  for (std::size_t j = 0; j < logw.size(); ++j) probs[j] = std::exp(logw[j]);
  std::discrete_distribution<std::size_t> pick(probs.begin(), probs.end());
  const Vector& mu = model.mean(comps[pick(rng)]);
  Sample out{SampleRole::clean, standard_normal(rng, model.dim())};
  for (std::size_t i = 0; i < mu.size(); ++i) out[i] = mu[i] + model.sigma() * out[i];
  return out;
}

}  // namespace sdlab
