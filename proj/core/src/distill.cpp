#include "sdlab/distill.hpp"

#include <chrono>
#include <cmath>

namespace sdlab {

namespace {

// Output of one batch item, filled by a worker.
struct ItemResult {
  Vector grad;
  double loss = 0.0;
  Vector op_input;
  double op_loss = 0.0;
};

void scale_in_place(Vector& v, double s) {
  for (double& x : v) x *= s;
}

}  // namespace

void DistillConfig::validate(const NoiseSchedule& sched) const {
  if (iterations < 1) throw InvalidArgument("distill: iterations must be >= 1");
  if (batch_size < 1) throw InvalidArgument("distill: batch_size must be >= 1");
  if (!(cfg_scale >= 0.0)) throw InvalidArgument("distill: cfg_scale must be >= 0");
  if (!(scene_lr > 0.0)) throw InvalidArgument("distill: scene_lr must be > 0");
  if (!(operator_lr > 0.0)) throw InvalidArgument("distill: operator_lr must be > 0");
  if (!(neg_weight >= 0.0)) throw InvalidArgument("distill: neg_weight must be >= 0");
  if (loss_kind == LossKind::neg_prompt && negative_condition.empty()) {
    throw InvalidArgument("distill: neg_prompt requires negative_condition");
  }
  if (dca_cutoff < 0 || dca_cutoff > sched.max_timestep()) {
    throw OutOfRange("distill: dca_cutoff outside [0, T]");
  }
  const int hi = t_max == 0 ? sched.max_timestep() : t_max;
  if (t_min < 1 || hi > sched.max_timestep() || t_min > hi) {
    throw OutOfRange("distill: need 1 <= t_min <= t_max <= T");
  }
  if (snapshot_every < 0) throw InvalidArgument("distill: snapshot_every must be >= 0");
}

Vector sds_residual(const ConditionedMixture& model, const NoiseSchedule& sched,
                    std::span<const double> x_t, int t, std::span<const double> eps,
                    std::string_view cond, double scale, WeightKind weight) {
  require_dim(eps.size(), x_t.size(), "sds eps");
  Vector r = eps_cfg(model, x_t, t, cond, scale, sched).values;
  const double w = sds_weight(sched, t, weight);
  for (std::size_t i = 0; i < r.size(); ++i) r[i] = w * (r[i] - eps[i]);
  return r;
}

Vector neg_prompt_residual(const ConditionedMixture& model, const NoiseSchedule& sched,
                           std::span<const double> x_t, int t, std::string_view cond,
                           std::string_view neg_cond, double neg_weight, double scale,
                           WeightKind weight) {
  if (neg_weight < 0.0) throw InvalidArgument("neg_prompt: neg_weight must be >= 0");
  const Vector e_y = eps_predict(model, x_t, t, cond, sched).values;
  const Vector e_neg = eps_predict(model, x_t, t, neg_cond, sched).values;
  const Vector e_null = eps_predict(model, x_t, t, kNullCondition, sched).values;
  const double w = sds_weight(sched, t, weight);
  Vector r(e_y.size());
  for (std::size_t i = 0; i < r.size(); ++i) {
    r[i] = w * ((e_y[i] - neg_weight * e_neg[i]) + scale * (e_y[i] - e_null[i]));
  }
  return r;
}

Vector vdm_operator_input(const ConditionedMixture& model, const NoiseSchedule& sched,
                          std::span<const double> x_t, int t, std::string_view cond, double scale,
                          OperatorInput input) {
  if (input == OperatorInput::cfg) return eps_cfg(model, x_t, t, cond, scale, sched).values;
  return eps_predict(model, x_t, t, cond, sched).values;
}

Vector vdm_residual(const ConditionedMixture& model, const NoiseSchedule& sched,
                    const DegradationOperator& op, std::span<const double> x_t, int t,
                    std::string_view cond, double scale, int dca_cutoff,
                    const VdmOptions& options) {
  const Vector e_y = eps_predict(model, x_t, t, cond, sched).values;
  const Vector in = options.input == OperatorInput::conditional
                        ? e_y
                        : eps_cfg(model, x_t, t, cond, scale, sched).values;
  const Vector m = sdlab::apply(op, in).values;
  const double lambda = dca_coefficient(sched, t, dca_cutoff);
  const double w = sds_weight(sched, t, options.weight);
  Vector r(e_y.size());
  for (std::size_t i = 0; i < r.size(); ++i) r[i] = e_y[i] - lambda * m[i];
  if (options.guidance && scale != 0.0) {
    const Vector e_null = eps_predict(model, x_t, t, kNullCondition, sched).values;
    for (std::size_t i = 0; i < r.size(); ++i) r[i] += scale * (e_y[i] - e_null[i]);
  }
  scale_in_place(r, w);
  return r;
}

Vector sds_gradient(const ConditionedMixture& model, const NoiseSchedule& sched,
                    const Representation& scene, const View& view, int t,
                    std::span<const double> eps, std::string_view cond, double scale,
                    WeightKind weight) {
  const Sample x0 = render(scene, view);
  const Sample xt = diffuse(x0, t, eps, sched);
  const Vector r = sds_residual(model, sched, xt, t, eps, cond, scale, weight);
  return render_grad(scene, view, r);
}

Vector neg_prompt_gradient(const ConditionedMixture& model, const NoiseSchedule& sched,
                           const Representation& scene, const View& view, int t,
                           std::span<const double> eps, std::string_view cond,
                           std::string_view neg_cond, double neg_weight, double scale,
                           WeightKind weight) {
  const Sample x0 = render(scene, view);
  const Sample xt = diffuse(x0, t, eps, sched);
  const Vector r = neg_prompt_residual(model, sched, xt, t, cond, neg_cond, neg_weight, scale, weight);
  return render_grad(scene, view, r);
}

Vector vdm_gradient(const ConditionedMixture& model, const NoiseSchedule& sched,
                    const DegradationOperator& op, const Representation& scene, const View& view,
                    int t, std::span<const double> eps, std::string_view cond, double scale,
                    int dca_cutoff, const VdmOptions& options) {
  const Sample x0 = render(scene, view);
  const Sample xt = diffuse(x0, t, eps, sched);
  Vector r = vdm_residual(model, sched, op, xt, t, cond, scale, dca_cutoff, options);
  if (options.xt_jacobian) scale_in_place(r, std::sqrt(sched.alpha_bar(t)));
  return render_grad(scene, view, r);
}

DistillResult run_distillation(const DistillConfig& cfg, const ConditionedMixture& model,
                               const NoiseSchedule& sched, Representation scene_init,
                               std::optional<DegradationOperator> op_init,
                               const ViewSampler& views, const RecordObserver& observer) {
  cfg.validate(sched);
  views.validate();
  if (!model.has_condition(cfg.condition)) {
    throw InvalidArgument("unknown condition '" + cfg.condition + "'");
  }
  if (cfg.loss_kind == LossKind::neg_prompt && !model.has_condition(cfg.negative_condition)) {
    throw InvalidArgument("unknown condition '" + cfg.negative_condition + "'");
  }
  if (output_dim(scene_init) != model.dim()) {
    throw DimensionMismatch("distill: rendered dimension " + std::to_string(output_dim(scene_init)) +
                            " != model dimension " + std::to_string(model.dim()));
  }
  const bool use_op = cfg.loss_kind == LossKind::vdm;
  if (use_op) {
    if (!op_init) throw InvalidArgument("distill: vdm needs a degradation operator");
    require_dim(op_init->dim(), model.dim(), "operator dimension");
  }

  DistillResult result{{}, std::move(scene_init), std::move(op_init)};
  Representation& scene = result.scene;
  Rng rng(cfg.seed);
  const int t_hi = cfg.t_max == 0 ? sched.max_timestep() : cfg.t_max;
  std::uniform_int_distribution<int> t_dist(cfg.t_min, t_hi);

  Vector theta = parameters(scene);
  OptimizerState scene_opt(theta.size(), AdamConfig{.lr = cfg.scene_lr});
  std::optional<OptimizerState> op_opt;
  if (use_op) op_opt.emplace(result.op->param_count(), AdamConfig{.lr = cfg.operator_lr});

  VdmOptions vdm_opts{cfg.vdm_guidance, cfg.operator_input, cfg.xt_jacobian, cfg.weight};
  const auto batch = static_cast<std::size_t>(cfg.batch_size);
  const std::size_t dim = model.dim();
  std::vector<View> batch_views(batch);
  std::vector<Vector> batch_eps(batch, Vector(dim));
  std::vector<ItemResult> items(batch);
  result.trajectory.records.reserve(static_cast<std::size_t>(cfg.iterations));

  using clock = std::chrono::steady_clock;
  for (int iter = 1; iter <= cfg.iterations; ++iter) {
    const auto start = clock::now();
    // Draws are serial and in a fixed order so threads never touch the RNG.
    for (auto& v : batch_views) v = sample_view(views, rng);
    const int t = t_dist(rng);
    for (auto& e : batch_eps) fill_standard_normal(rng, e);

    const double root_ab = std::sqrt(sched.alpha_bar(t));
    parallel_for(batch, cfg.threads, [&](std::size_t b) {
      ItemResult& out = items[b];
      const Sample x0 = render(scene, batch_views[b]);
      const Sample xt = diffuse(x0, t, batch_eps[b], sched);
      Vector r;
      double jac = 1.0;
      switch (cfg.loss_kind) {
        case LossKind::sds:
          r = sds_residual(model, sched, xt, t, batch_eps[b], cfg.condition, cfg.cfg_scale, cfg.weight);
          break;
        case LossKind::neg_prompt:
          r = neg_prompt_residual(model, sched, xt, t, cfg.condition, cfg.negative_condition,
                                  cfg.neg_weight, cfg.cfg_scale, cfg.weight);
          break;
        case LossKind::vdm:
          out.op_input = vdm_operator_input(model, sched, xt, t, cfg.condition, cfg.cfg_scale,
                                            cfg.operator_input);
          out.op_loss = operator_loss(*result.op, out.op_input, batch_eps[b]);
          r = vdm_residual(model, sched, *result.op, xt, t, cfg.condition, cfg.cfg_scale,
                           cfg.dca_cutoff, vdm_opts);
          if (cfg.xt_jacobian) jac = root_ab;
          break;
      }
      out.loss = 0.5 * squared_norm(r);
      scale_in_place(r, jac);
      out.grad = render_grad(scene, batch_views[b], r);
    });

    Vector grad(theta.size(), 0.0);
    double loss = 0.0;
    double op_loss = 0.0;
    const double inv = 1.0 / static_cast<double>(batch);
    for (const ItemResult& it : items) {
      axpy(inv, it.grad, grad);
      loss += inv * it.loss;
      op_loss += inv * it.op_loss;
    }
    const double grad_norm = norm(grad);
    if (!std::isfinite(loss) || !std::isfinite(grad_norm) || !std::isfinite(op_loss)) {
      throw NumericalAbort("distill: non-finite value at iteration " + std::to_string(iter) +
                           " (t=" + std::to_string(t) + ", loss=" + std::to_string(loss) +
                           ", grad_norm=" + std::to_string(grad_norm) +
                           ", op_loss=" + std::to_string(op_loss) + ")");
    }

    if (use_op) {
      std::vector<OperatorPair> pairs;
      pairs.reserve(batch);
      for (std::size_t b = 0; b < batch; ++b) pairs.push_back({items[b].op_input, batch_eps[b]});
      const Vector op_grad = operator_grad(*result.op, pairs);
      if (!all_finite(op_grad)) {
        throw NumericalAbort("distill: non-finite operator gradient at iteration " + std::to_string(iter));
      }
      optimizer_step(*op_opt, *result.op, op_grad);
    }
    scene_opt.step(theta, grad);
    set_parameters(scene, theta);

    TrajectoryRecord rec{iter, t, loss, grad_norm, use_op ? op_loss : 0.0,
                         std::chrono::duration<double, std::milli>(clock::now() - start).count()};
    result.trajectory.records.push_back(rec);
    if (observer) observer(rec);
    if (cfg.snapshot_every > 0 && iter % cfg.snapshot_every == 0) {
      result.trajectory.snapshots.push_back({iter, theta});
    }
  }
  return result;
}

std::string_view to_string(LossKind k) {
  switch (k) {
    case LossKind::sds:
      return "sds";
    case LossKind::neg_prompt:
      return "neg_prompt";
    case LossKind::vdm:
      return "vdm";
  }
  return "vdm";
}

std::string_view to_string(OperatorInput i) {
  return i == OperatorInput::conditional ? "conditional" : "cfg";
}

LossKind parse_loss_kind(std::string_view name) {
  if (name == "sds") return LossKind::sds;
  if (name == "neg_prompt") return LossKind::neg_prompt;
  if (name == "vdm") return LossKind::vdm;
  throw InvalidArgument("unknown loss kind '" + std::string(name) + "'");
}

OperatorInput parse_operator_input(std::string_view name) {
  if (name == "conditional") return OperatorInput::conditional;
  if (name == "cfg") return OperatorInput::cfg;
  throw InvalidArgument("unknown operator input '" + std::string(name) + "'");
}

}  // namespace sdlab
