#include "sdlab/analysis.hpp"

#include <algorithm>
#include <cstdio>
#include <limits>
#include <numbers>
#include <cmath>
#include <numeric>
#include <ostream>

namespace sdlab {

namespace {

double mean_of(std::span<const double> v) {
  return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

// Sample standard error of the mean.
double stderr_of(std::span<const double> v) {
  const std::size_t n = v.size();
  if (n < 2) return 0.0;
  const double m = mean_of(v);
  double ss = 0.0;
  for (double x : v) ss += (x - m) * (x - m);
  return std::sqrt(ss / static_cast<double>(n - 1) / static_cast<double>(n));
}

// Serial draws of (x0, eps) for one timestep, then parallel predictions.
struct TrialBatch {
  std::vector<Vector> eps;
  std::vector<Vector> pred;
};

TrialBatch run_trials(const ConditionedMixture& model, const NoiseSchedule& sched, int t,
                      const CurveOptions& opt, Rng& rng) {
  const std::size_t d = model.dim();
  std::vector<Vector> x0(opt.trials);
  TrialBatch tb{std::vector<Vector>(opt.trials, Vector(d)), std::vector<Vector>(opt.trials)};
  for (std::size_t i = 0; i < opt.trials; ++i) {
    x0[i] = opt.x0_source == X0Source::fixed ? opt.fixed_x0 : draw_clean(model, opt.condition, rng).values;
    fill_standard_normal(rng, tb.eps[i]);
  }
  parallel_for(opt.trials, opt.threads, [&](std::size_t i) {
    const Sample xt = diffuse(x0[i], t, tb.eps[i], sched);
    tb.pred[i] = eps_predict(model, xt, t, opt.condition, sched).values;
  });
  return tb;
}

void check_curve_inputs(const ConditionedMixture& model, const NoiseSchedule& sched,
                        std::span<const int> t_grid, const CurveOptions& opt) {
  if (opt.trials < 30) throw InvalidArgument("curve: need at least 30 trials");
  if (!model.has_condition(opt.condition)) {
    throw InvalidArgument("unknown condition '" + opt.condition + "'");
  }
  if (opt.x0_source == X0Source::fixed) require_dim(opt.fixed_x0.size(), model.dim(), "fixed x0");
  for (int t : t_grid) sched.require_timestep(t, 1);
}

double pearson(std::span<const double> a, std::span<const double> b) {
  const double ma = mean_of(a);
  const double mb = mean_of(b);
  double sab = 0.0, saa = 0.0, sbb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sab += (a[i] - ma) * (b[i] - mb);
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
  }
  if (saa == 0.0 || sbb == 0.0) return 0.0;
  return sab / std::sqrt(saa * sbb);
}

Vector ranks(std::span<const double> v) {
  std::vector<std::size_t> idx(v.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  Vector r(v.size());
  std::size_t i = 0;
  while (i < idx.size()) {
    std::size_t j = i;
    while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) ++j;
    const double avg = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) r[idx[k]] = avg;
    i = j + 1;
  }
  return r;
}

double normal_cdf(double z) { return 0.5 * std::erfc(-z / std::sqrt(2.0)); }

}  // namespace

void CurveReport::validate() const {
  if (values.size() != timesteps.size() || stderrs.size() != timesteps.size()) {
    throw DimensionMismatch("curve report: list lengths differ");
  }
}

void write_curve_csv(std::ostream& out, const CurveReport& report) {
  report.validate();
  char buf[128];
  out << "t,value,stderr,trials\n";
  for (std::size_t i = 0; i < report.timesteps.size(); ++i) {
    std::snprintf(buf, sizeof buf, "%d,%.17g,%.17g,%zu\n", report.timesteps[i], report.values[i],
                  report.stderrs[i], report.trials);
    out << buf;
  }
}

CurveReport correlation_curve(const ConditionedMixture& model, const NoiseSchedule& sched,
                              std::span<const int> t_grid, const CurveOptions& options,
                              CorrelationMetric metric) {
  check_curve_inputs(model, sched, t_grid, options);
  Rng rng(options.seed);
  CurveReport rep;
  rep.trials = options.trials;
  const std::size_t d = model.dim();
  for (int t : t_grid) {
    const TrialBatch tb = run_trials(model, sched, t, options, rng);
    double value = 0.0, se = 0.0;
    if (metric == CorrelationMetric::pearson) {
      Vector r(d);
      Vector a(options.trials), b(options.trials);
      for (std::size_t j = 0; j < d; ++j) {
        for (std::size_t i = 0; i < options.trials; ++i) {
          a[i] = tb.eps[i][j];
          b[i] = tb.pred[i][j];
        }
        r[j] = std::abs(pearson(a, b));
      }
      value = mean_of(r);
      se = d > 1 ? stderr_of(r)
                 : (1.0 - value * value) / std::sqrt(static_cast<double>(options.trials - 1));
    } else {
      Vector c(options.trials);
      for (std::size_t i = 0; i < options.trials; ++i) {
        c[i] = cosine_similarity(tb.eps[i], tb.pred[i]);
        if (metric == CorrelationMetric::abs_cosine) c[i] = std::abs(c[i]);
      }
      value = mean_of(c);
      se = stderr_of(c);
    }
    rep.timesteps.push_back(t);
    rep.values.push_back(value);
    rep.stderrs.push_back(se);
  }
  return rep;
}

CurveReport variance_curve(const ConditionedMixture& model, const NoiseSchedule& sched,
                           std::span<const int> t_grid, const CurveOptions& options) {
  check_curve_inputs(model, sched, t_grid, options);
  Rng rng(options.seed);
  CurveReport rep;
  rep.trials = options.trials;
  const std::size_t d = model.dim();
  const auto n = static_cast<double>(options.trials);
  for (int t : t_grid) {
    const TrialBatch tb = run_trials(model, sched, t, options, rng);
    Vector var(d);
    for (std::size_t j = 0; j < d; ++j) {
      double m = 0.0;
      for (const Vector& p : tb.pred) m += p[j];
      m /= n;
      double ss = 0.0;
      for (const Vector& p : tb.pred) ss += (p[j] - m) * (p[j] - m);
      var[j] = ss / (n - 1.0);
    }
    const double value = mean_of(var);
    // Gaussian approximation to the sampling error of s^2, coordinates
    // treated as independent.
    const double se = value * std::sqrt(2.0 / (n - 1.0)) / std::sqrt(static_cast<double>(d));
    rep.timesteps.push_back(t);
    rep.values.push_back(value);
    rep.stderrs.push_back(se);
  }
  return rep;
}

double spearman(std::span<const double> a, std::span<const double> b) {
  require_dim(b.size(), a.size(), "spearman");
  if (a.size() < 2) throw InvalidArgument("spearman: need at least 2 points");
  const Vector ra = ranks(a);
  const Vector rb = ranks(b);
  return pearson(ra, rb);
}

double kl_grid(const std::function<double(std::span<const double>)>& log_q,
               const std::function<double(std::span<const double>)>& log_p, const Box& box,
               std::size_t points, unsigned threads) {
  const std::size_t dim = box.size();
  if (dim < 1 || dim > 2) throw InvalidArgument("kl_grid: dimension must be 1 or 2");
  if (points < 2) throw InvalidArgument("kl_grid: need at least 2 points per axis");
  for (const auto& [lo, hi] : box) {
    if (!(lo < hi)) throw InvalidArgument("kl_grid: empty box");
  }
  Vector step(dim);
  for (std::size_t a = 0; a < dim; ++a) step[a] = (box[a].second - box[a].first) / static_cast<double>(points);
  const double cell = dim == 1 ? step[0] : step[0] * step[1];
  const std::size_t rows = dim == 1 ? 1 : points;
  Vector partial(rows, 0.0);
  parallel_for(rows, threads, [&](std::size_t r) {
    double x[2];
    if (dim == 2) x[1] = box[1].first + (static_cast<double>(r) + 0.5) * step[1];
    double acc = 0.0;
    for (std::size_t i = 0; i < points; ++i) {
      x[0] = box[0].first + (static_cast<double>(i) + 0.5) * step[0];
      const std::span<const double> pt(x, dim);
      const double lq = log_q(pt);
      const double q = std::exp(lq);
      if (q == 0.0) continue;
      acc += q * (lq - log_p(pt));
    }
    partial[r] = acc;
  });
  double total = 0.0;
  for (double v : partial) total += v;
  return total * cell;
}

double kl_quadrature(std::span<const double> theta, const ConditionedMixture& model,
                     const NoiseSchedule& sched, int t, std::string_view cond, const GridSpec& grid,
                     unsigned threads) {
  const std::size_t d = model.dim();
  if (d > 2) throw InvalidArgument("kl_quadrature: dimension must be <= 2");
  require_dim(theta.size(), d, "kl_quadrature theta");
  sched.require_timestep(t, 1);
  if (!model.has_condition(cond)) throw InvalidArgument("unknown condition '" + std::string(cond) + "'");
  if (!(grid.half_width > 0.0)) throw InvalidArgument("kl_quadrature: half_width must be > 0");

  const double ab = sched.alpha_bar(t);
  const double var_q = 1.0 - ab;
  const double sd_q = std::sqrt(var_q);
  Vector mean_q(d);
  for (std::size_t i = 0; i < d; ++i) mean_q[i] = std::sqrt(ab) * theta[i];

  Box box(d);
  double tail = 0.0;
  for (std::size_t i = 0; i < d; ++i) {
    box[i] = grid.bounds ? *grid.bounds
                         : std::pair{mean_q[i] - grid.half_width * sd_q, mean_q[i] + grid.half_width * sd_q};
    tail += normal_cdf((box[i].first - mean_q[i]) / sd_q) + normal_cdf((mean_q[i] - box[i].second) / sd_q);
  }
  if (tail > 1e-6) {
    throw CoverageError("kl_quadrature: grid leaves " + std::to_string(tail) + " of q's mass outside");
  }

  const double log_norm = -0.5 * static_cast<double>(d) * std::log(2.0 * std::numbers::pi * var_q);
  auto log_q = [&](std::span<const double> x) {
    double ss = 0.0;
    for (std::size_t i = 0; i < d; ++i) ss += (x[i] - mean_q[i]) * (x[i] - mean_q[i]);
    return log_norm - 0.5 * ss / var_q;
  };
  const std::string cond_name(cond);
  auto log_p = [&](std::span<const double> x) { return log_density(model, x, t, cond_name, sched); };
  return kl_grid(log_q, log_p, box, grid.points, threads);
}

Vector finite_diff(const std::function<double(std::span<const double>)>& fn,
                   std::span<const double> params, double h) {
  if (!(h > 0.0)) throw InvalidArgument("finite_diff: h must be > 0");
  Vector x(params.begin(), params.end());
  Vector g(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double keep = x[i];
    x[i] = keep + h;
    const double up = fn(x);
    x[i] = keep - h;
    const double down = fn(x);
    x[i] = keep;
    g[i] = (up - down) / (2.0 * h);
  }
  return g;
}

double nearest_mode_distance(const ConditionedMixture& model, std::string_view cond,
                             std::span<const double> x) {
  require_dim(x.size(), model.dim(), "nearest_mode_distance");
  double best = std::numeric_limits<double>::infinity();
  for (std::size_t k : model.components(cond)) {
    const Vector& m = model.mean(k);
    double ss = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) ss += (x[i] - m[i]) * (x[i] - m[i]);
    best = std::min(best, ss);
  }
  return std::sqrt(best);
}

double tail_op_loss(const Trajectory& traj, std::size_t window) {
  const auto& rec = traj.records;
  if (rec.empty()) return 0.0;
  const std::size_t n = std::min(window == 0 ? rec.size() : window, rec.size());
  double s = 0.0;
  for (std::size_t i = rec.size() - n; i < rec.size(); ++i) s += rec[i].op_loss;
  return s / static_cast<double>(n);
}

std::vector<AblationRow> ablation_degradation(const DistillConfig& cfg,
                                              const ConditionedMixture& model,
                                              const NoiseSchedule& sched,
                                              const OperatorSpec& base,
                                              std::span<const double> theta0) {
  if (cfg.loss_kind != LossKind::vdm) throw InvalidArgument("ablation: loss_kind must be vdm");
  require_dim(theta0.size(), model.dim(), "ablation theta0");
  std::vector<AblationRow> rows;
  for (OperatorVariant v :
       {OperatorVariant::nonlinear, OperatorVariant::linear, OperatorVariant::nonlinear_plus_noise}) {
    Rng op_rng(cfg.seed ^ 0x6f70u);
    auto op = DegradationOperator::create(spec_for_variant(v, base), op_rng);
    Representation scene = PixelField{Vector(theta0.begin(), theta0.end())};
    const DistillResult res = run_distillation(cfg, model, sched, std::move(scene), std::move(op));
    const Vector theta = parameters(res.scene);
    rows.push_back({v, nearest_mode_distance(model, cfg.condition, theta), tail_op_loss(res.trajectory),
                    cfg.seed});
  }
  return rows;
}

void write_ablation_csv(std::ostream& out, std::span<const AblationRow> rows) {
  char buf[160];
  out << "variant,final_mode_dist,final_op_loss,seed\n";
  for (const AblationRow& r : rows) {
    std::snprintf(buf, sizeof buf, "%s,%.17g,%.17g,%llu\n", std::string(to_string(r.variant)).c_str(),
                  r.final_mode_dist, r.final_op_loss, static_cast<unsigned long long>(r.seed));
    out << buf;
  }
}

Vector synthetic_degradation_target(std::span<const double> u) {
  const std::size_t d = u.size();
  Vector y(d);
  for (std::size_t i = 0; i < d; ++i) {
    const double next = u[(i + 1) % d];
    y[i] = std::tanh(2.0 * u[i]) - 0.5 * next + 0.3 * u[i] * next;
  }
  return y;
}

double synthetic_degradation_fit(OperatorVariant variant, const OperatorSpec& base,
                                 const SyntheticFitOptions& options) {
  if (options.dim == 0 || options.batch == 0 || options.holdout == 0) {
    throw InvalidArgument("synthetic fit: dim, batch and holdout must be >= 1");
  }
  OperatorSpec spec = base;
  spec.dim = options.dim;
  spec = spec_for_variant(variant, spec);
  Rng op_rng(options.seed ^ 0x6f70u);
  DegradationOperator op = DegradationOperator::create(spec, op_rng);
  OptimizerState state(op.param_count(), AdamConfig{.lr = options.lr});

  Rng data(options.seed);
  auto draw = [&](std::vector<Vector>& in, std::vector<Vector>& tgt, std::size_t n) {
    in.assign(n, Vector(options.dim));
    tgt.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
      fill_standard_normal(data, in[i]);
      tgt[i] = synthetic_degradation_target(in[i]);
    }
  };
  std::vector<Vector> hold_in, hold_tgt;
  draw(hold_in, hold_tgt, options.holdout);

  std::vector<Vector> in, tgt;
  std::vector<OperatorPair> pairs(options.batch);
  for (std::size_t step = 0; step < options.steps; ++step) {
    draw(in, tgt, options.batch);
    for (std::size_t i = 0; i < options.batch; ++i) pairs[i] = {in[i], tgt[i]};
    optimizer_step(state, op, operator_grad(op, pairs));
  }
  double loss = 0.0;
  for (std::size_t i = 0; i < options.holdout; ++i) loss += operator_loss(op, hold_in[i], hold_tgt[i]);
  return loss / static_cast<double>(options.holdout);
}

std::string_view to_string(X0Source s) { return s == X0Source::fixed ? "fixed" : "mixture_draws"; }

X0Source parse_x0_source(std::string_view name) {
  if (name == "fixed") return X0Source::fixed;
  if (name == "mixture_draws") return X0Source::mixture_draws;
  throw InvalidArgument("unknown x0 source '" + std::string(name) + "'");
}

std::string_view to_string(CorrelationMetric m) {
  switch (m) {
    case CorrelationMetric::cosine:
      return "cosine";
    case CorrelationMetric::abs_cosine:
      return "abs_cosine";
    case CorrelationMetric::pearson:
      return "pearson";
  }
  return "cosine";
}

CorrelationMetric parse_correlation_metric(std::string_view name) {
  if (name == "cosine") return CorrelationMetric::cosine;
  if (name == "abs_cosine") return CorrelationMetric::abs_cosine;
  if (name == "pearson") return CorrelationMetric::pearson;
  throw InvalidArgument("unknown correlation metric '" + std::string(name) + "'");
}

}  // namespace sdlab
