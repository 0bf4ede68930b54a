#include <cmath>
#include <numbers>

#include "commands.hpp"

namespace sdlab::cli {

namespace {

// max_i |a_i - b_i| relative to the largest reference component.
double rel_error(std::span<const double> analytic, std::span<const double> reference) {
  double diff = 0.0, scale = 0.0;
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    diff = std::max(diff, std::abs(analytic[i] - reference[i]));
    scale = std::max(scale, std::abs(reference[i]));
  }
  return scale > 0.0 ? diff / scale : diff;
}

std::string pick_condition(const ConditionedMixture& model, Rng& rng) {
  const auto& conds = model.conditions();
  std::uniform_int_distribution<std::size_t> pick(0, conds.size() - 1);
  auto it = conds.begin();
  std::advance(it, static_cast<std::ptrdiff_t>(pick(rng)));
  return it->first;
}

}  // namespace

CheckResult check_score(const ExperimentConfig& cfg, std::size_t probes, std::uint64_t seed) {
  const NoiseSchedule sched = make_schedule(cfg);
  const ConditionedMixture model = make_mixture(cfg);
  Rng rng(seed);
  std::uniform_int_distribution<int> pick_t(1, sched.max_timestep());
  CheckResult res{"score", probes, 0.0, 1e-5, true};
  for (std::size_t p = 0; p < probes; ++p) {
    const std::string cond = pick_condition(model, rng);
    const int t = pick_t(rng);
    const Sample x0 = draw_clean(model, cond, rng);
    const Vector eps = standard_normal(rng, model.dim());
    const Sample xt = diffuse(x0, t, eps, sched);
    const double ab = sched.alpha_bar(t);
    const double h = 1e-3 * std::sqrt(ab * model.sigma() * model.sigma() + 1.0 - ab);
    Vector fd = finite_diff([&](std::span<const double> x) { return log_density(model, x, t, cond, sched); },
                            xt.values, h);
    for (double& v : fd) v *= -std::sqrt(1.0 - ab);
    const Sample e = eps_predict(model, xt, t, cond, sched);
    res.max_error = std::max(res.max_error, rel_error(e.values, fd));
  }
  res.passed = res.max_error < res.tolerance;
  return res;
}

CheckResult check_cfg(const ExperimentConfig& cfg, std::size_t probes, std::uint64_t seed) {
  const NoiseSchedule sched = make_schedule(cfg);
  const ConditionedMixture model = make_mixture(cfg);
  Rng rng(seed);
  std::uniform_int_distribution<int> pick_t(1, sched.max_timestep());
  std::uniform_real_distribution<double> pick_s(0.0, 15.0);
  CheckResult res{"cfg", probes, 0.0, 0.0, true};
  for (std::size_t p = 0; p < probes; ++p) {
    const std::string cond = pick_condition(model, rng);
    const int t = pick_t(rng);
    const double s = pick_s(rng);
    const Vector xt = standard_normal(rng, model.dim());
    const Vector c = eps_predict(model, xt, t, cond, sched).values;
    const Vector u = eps_predict(model, xt, t, kNullCondition, sched).values;
    const Vector g = eps_cfg(model, xt, t, cond, s, sched).values;
    const Vector g0 = eps_cfg(model, xt, t, cond, 0.0, sched).values;
    for (std::size_t i = 0; i < c.size(); ++i) {
      res.max_error = std::max(res.max_error, std::abs(g[i] - (c[i] + s * (c[i] - u[i]))));
      res.max_error = std::max(res.max_error, std::abs(g0[i] - c[i]));
    }
  }
  res.passed = res.max_error <= res.tolerance;
  return res;
}

CheckResult check_renderer(std::size_t probes, std::uint64_t seed, bool corrupt) {
  Rng rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> normal(0.0, 1.0);
  CheckResult res{"renderer", probes, 0.0, 1e-4, true};
  for (std::size_t p = 0; p < probes; ++p) {
    SplatScene scene;
    scene.canvas = {8, 8, p % 2 == 0 ? std::size_t{1} : std::size_t{3}};
    for (int i = 0; i < 2; ++i) {
      Splat s;
      s.mu = {0.25 + 0.5 * unit(rng), 0.25 + 0.5 * unit(rng)};
      s.log_scale = {std::log(0.08 + 0.12 * unit(rng)), std::log(0.08 + 0.12 * unit(rng))};
      s.angle = std::numbers::pi * unit(rng);
      s.color.resize(scene.canvas.channels);
      for (double& c : s.color) c = 0.2 + 0.6 * unit(rng);
      s.opacity_logit = normal(rng);
      scene.splats.push_back(s);
    }
    View view{{0.1 * (unit(rng) - 0.5), 0.1 * (unit(rng) - 0.5)}, 0.8 + 0.45 * unit(rng)};
    const Vector up = standard_normal(rng, scene.canvas.size());
    Vector analytic = render_grad(scene, view, up);
    if (corrupt) {
      for (double& g : analytic) g *= 1.01;
    }
    SplatScene work = scene;
    const Vector fd = finite_diff(
        [&](std::span<const double> theta) {
          unflatten(work, theta);
          return dot(render(work, view).values, up);
        },
        flatten(scene), 1e-6);
    res.max_error = std::max(res.max_error, rel_error(analytic, fd));
  }
  res.passed = res.max_error < res.tolerance;
  return res;
}

CheckResult check_operator(std::size_t probes, std::uint64_t seed) {
  Rng rng(seed);
  CheckResult res{"operator", probes, 0.0, 1e-5, true};
  for (std::size_t p = 0; p < probes; ++p) {
    const bool offset = p % 3 == 2;
    DegradationOperator op({4, 16, 4}, Activation::tanh, offset);
    for (double& w : op.parameters()) w = 0.5 * standard_normal(rng, 1)[0];
    std::vector<Vector> in, tgt;
    for (int i = 0; i < 3; ++i) {
      in.push_back(standard_normal(rng, 4));
      tgt.push_back(standard_normal(rng, 4));
    }
    std::vector<OperatorPair> pairs;
    for (int i = 0; i < 3; ++i) pairs.push_back({in[i], tgt[i]});
    const Vector analytic = operator_grad(op, pairs);
    DegradationOperator work = op;
    const Vector fd = finite_diff(
        [&](std::span<const double> psi) {
          std::copy(psi.begin(), psi.end(), work.parameters().begin());
          double l = 0.0;
          for (int i = 0; i < 3; ++i) l += operator_loss(work, in[i], tgt[i]);
          return l / 3.0;
        },
        op.parameters(), 1e-6);
    res.max_error = std::max(res.max_error, rel_error(analytic, fd));
  }
  res.passed = res.max_error < res.tolerance;
  return res;
}

}  // namespace sdlab::cli
