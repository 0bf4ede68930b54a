#include <cmath>

#include "doctest.h"
#include "sdlab/distill.hpp"

using namespace sdlab;

namespace {

const NoiseSchedule& sched() {
  static const NoiseSchedule s = build_schedule(1000, 1e-4, 0.02);
  return s;
}

// Three components in 2-D: a, b and a shared one; "neg" picks the last.
ConditionedMixture tri_mixture() {
  return ConditionedMixture(2, 0.3, {0.3, 0.3, 0.4}, {{1.0, 0.0}, {-1.0, 0.5}, {0.0, -1.5}},
                            {{"pos", {0, 1}}, {"neg", {2}}});
}

ConditionedMixture bimodal() {
  return ConditionedMixture(1, 0.2, {0.5, 0.5}, {{-2.0}, {2.0}}, {{"neg", {0}}, {"pos", {1}}});
}

Vector ep(const ConditionedMixture& m, const Vector& x, int t, const char* c) {
  return eps_predict(m, x, t, c, sched()).values;
}

DegradationOperator identity_op(std::size_t d) {
  Rng rng(0);
  OperatorSpec spec = default_operator_spec(d);
  spec.hidden_dims.clear();
  spec.init = OperatorInit::identity;
  return DegradationOperator::create(spec, rng);
}

DegradationOperator zero_op(std::size_t d) {
  Rng rng(0);
  return DegradationOperator::create(default_operator_spec(d), rng);
}

bool same_records(const Trajectory& a, const Trajectory& b) {
  if (a.records.size() != b.records.size()) return false;
  for (std::size_t i = 0; i < a.records.size(); ++i) {
    const auto &x = a.records[i], &y = b.records[i];
    if (x.iter != y.iter || x.t != y.t || x.loss != y.loss || x.grad_norm != y.grad_norm ||
        x.op_loss != y.op_loss)
      return false;
  }
  return true;
}

}  // namespace

TEST_CASE("sds: zero residual when the prediction equals the noise") {
  // a point mass at theta predicts the injected noise exactly
  const ConditionedMixture m(2, 1e-9, {1.0}, {{0.0, 0.0}});
  const Representation rep = PixelField{{0.0, 0.0}};
  Rng rng(1);
  for (int t : {1, 200, 1000}) {
    const Vector eps = standard_normal(rng, 2);
    for (double g : sds_gradient(m, sched(), rep, View{}, t, eps, "null", 7.5)) CHECK(std::abs(g) < 1e-12);
  }
}

TEST_CASE("sds: residual recomposes into unconditional and guidance parts") {
  const auto m = tri_mixture();
  Rng rng(2);
  for (int t : {5, 300, 900}) {
    const Vector x = standard_normal(rng, 2), eps = standard_normal(rng, 2);
    const double s = 3.0;
    const Vector r = sds_residual(m, sched(), x, t, eps, "pos", s);
    const Vector c = ep(m, x, t, "pos"), u = ep(m, x, t, "null");
    for (int i = 0; i < 2; ++i) CHECK(r[i] == doctest::Approx(c[i] + s * (c[i] - u[i]) - eps[i]).epsilon(1e-13));
    const Vector rw = sds_residual(m, sched(), x, t, eps, "pos", s, WeightKind::one_minus_alpha_bar);
    for (int i = 0; i < 2; ++i) CHECK(rw[i] == doctest::Approx((1 - sched().alpha_bar(t)) * r[i]).epsilon(1e-13));
  }
}

TEST_CASE("sds: guidance scale is irrelevant when the condition is null") {
  const auto m = tri_mixture();
  const Representation rep = PixelField{{0.4, -0.3}};
  const Vector eps{0.2, 1.1};
  const Vector a = sds_gradient(m, sched(), rep, View{}, 400, eps, "null", 0.0);
  const Vector b = sds_gradient(m, sched(), rep, View{}, 400, eps, "null", 50.0);
  CHECK(a == b);
}

TEST_CASE("sds: identity renderer gradient is the residual") {
  const auto m = tri_mixture();
  const Vector theta{0.4, -0.3}, eps{0.2, 1.1};
  const Representation rep = PixelField{theta};
  const Vector g = sds_gradient(m, sched(), rep, View{}, 250, eps, "pos", 2.0);
  const Vector r = sds_residual(m, sched(), diffuse(theta, 250, eps, sched()), 250, eps, "pos", 2.0);
  CHECK(g == r);
}

TEST_CASE("sds: the noise term averages to zero") {
  Rng rng(3);
  const int n = 100000;
  Vector acc(3, 0.0);
  for (int i = 0; i < n; ++i) axpy(-1.0, standard_normal(rng, 3), acc);
  for (double& a : acc) a /= n;
  // SE of each coordinate is 1/sqrt(n); the norm of the mean has SE sqrt(3/n)
  CHECK(norm(acc) < 3.0 * std::sqrt(3.0 / n));
}

TEST_CASE("negative prompt residual") {
  const auto m = tri_mixture();
  Rng rng(4);
  const Vector x = standard_normal(rng, 2);
  const int t = 350;
  const Vector c = ep(m, x, t, "pos"), n = ep(m, x, t, "neg"), u = ep(m, x, t, "null");
  const Vector r = neg_prompt_residual(m, sched(), x, t, "pos", "neg", 0.7, 2.5);
  for (int i = 0; i < 2; ++i) CHECK(r[i] == doctest::Approx((c[i] - 0.7 * n[i]) + 2.5 * (c[i] - u[i])).epsilon(1e-13));
  // neg = cond with unit weight leaves only guidance
  const Vector g = neg_prompt_residual(m, sched(), x, t, "pos", "pos", 1.0, 2.5);
  for (int i = 0; i < 2; ++i) CHECK(g[i] == doctest::Approx(2.5 * (c[i] - u[i])).epsilon(1e-13));
  CHECK_THROWS_AS(neg_prompt_residual(m, sched(), x, t, "pos", "nope", 1.0, 1.0), InvalidArgument);
}

TEST_CASE("negative prompt with no weight and no guidance matches sds in expectation") {
  const auto m = tri_mixture();
  const Vector theta{0.3, 0.2};
  const Representation rep = PixelField{theta};
  const int t = 300, n = 100000;
  Rng rng(5);
  Vector a(2, 0.0), b(2, 0.0), sq(2, 0.0);
  for (int i = 0; i < n; ++i) {
    const Vector eps = standard_normal(rng, 2);
    const Vector ga = neg_prompt_gradient(m, sched(), rep, View{}, t, eps, "pos", "neg", 0.0, 0.0);
    const Vector gb = sds_gradient(m, sched(), rep, View{}, t, eps, "pos", 0.0);
    for (int k = 0; k < 2; ++k) {
      a[k] += ga[k] / n;
      b[k] += gb[k] / n;
      sq[k] += (ga[k] - gb[k]) * (ga[k] - gb[k]) / n;
    }
  }
  for (int k = 0; k < 2; ++k) {
    const double se = std::sqrt(sq[k] / n);
    CHECK(std::abs(a[k] - b[k]) < 4.0 * se);
  }
}

TEST_CASE("vdm: zero operator without guidance gives the conditional prediction") {
  const auto m = tri_mixture();
  const auto op = zero_op(2);
  Rng rng(6);
  const Vector x = standard_normal(rng, 2);
  VdmOptions o;
  o.guidance = false;
  const Vector r = vdm_residual(m, sched(), op, x, 700, "pos", 7.5, 300, o);
  CHECK(r == ep(m, x, 700, "pos"));
  // s = 0 with guidance on is the same thing
  CHECK(vdm_residual(m, sched(), op, x, 700, "pos", 0.0, 300) == r);
}

TEST_CASE("vdm: identity operator above the cutoff leaves pure guidance") {
  const auto m = tri_mixture();
  const auto op = identity_op(2);
  Rng rng(7);
  const Vector x = standard_normal(rng, 2);
  const Vector r = vdm_residual(m, sched(), op, x, 700, "pos", 4.0, 300);
  const Vector c = ep(m, x, 700, "pos"), u = ep(m, x, 700, "null");
  for (int i = 0; i < 2; ++i) CHECK(r[i] == doctest::Approx(4.0 * (c[i] - u[i])).epsilon(1e-12).scale(1e-12));
  // below the cutoff lambda = 1 - abar
  const int t = 100;
  const double lam = 1.0 - sched().alpha_bar(t);
  const Vector r2 = vdm_residual(m, sched(), op, x, t, "pos", 4.0, 300);
  const Vector c2 = ep(m, x, t, "pos"), u2 = ep(m, x, t, "null");
  for (int i = 0; i < 2; ++i)
    CHECK(r2[i] == doctest::Approx((1 - lam) * c2[i] + 4.0 * (c2[i] - u2[i])).epsilon(1e-12));
}

TEST_CASE("vdm: cfg operator input") {
  const auto m = tri_mixture();
  Rng rng(8);
  const Vector x = standard_normal(rng, 2);
  const Vector in = vdm_operator_input(m, sched(), x, 200, "pos", 2.0, OperatorInput::cfg);
  CHECK(in == eps_cfg(m, x, 200, "pos", 2.0, sched()).values);
  CHECK(vdm_operator_input(m, sched(), x, 200, "pos", 2.0, OperatorInput::conditional) == ep(m, x, 200, "pos"));
}

TEST_CASE("vdm: gradient carries the sqrt(abar) factor") {
  const auto m = tri_mixture();
  Rng rng(9);
  const auto op = DegradationOperator::create(default_operator_spec(2), rng);
  const Vector theta{0.1, 0.9}, eps{-0.4, 0.3};
  const Representation rep = PixelField{theta};
  const int t = 450;
  const Vector xt = diffuse(theta, t, eps, sched()).values;
  const Vector r = vdm_residual(m, sched(), op, xt, t, "pos", 1.5, 300);
  const Vector g = vdm_gradient(m, sched(), op, rep, View{}, t, eps, "pos", 1.5, 300);
  for (int i = 0; i < 2; ++i) CHECK(g[i] == doctest::Approx(std::sqrt(sched().alpha_bar(t)) * r[i]).epsilon(1e-13));
  VdmOptions o;
  o.xt_jacobian = false;
  CHECK(vdm_gradient(m, sched(), op, rep, View{}, t, eps, "pos", 1.5, 300, o) == r);
}

TEST_CASE("vdm: cutoff does not matter above it") {
  const auto m = tri_mixture();
  Rng rng(10);
  auto op = DegradationOperator::create(default_operator_spec(2), rng);
  std::normal_distribution<double> n(0.0, 0.3);
  for (double& w : op.parameters()) w = n(rng);
  const Vector x = standard_normal(rng, 2);
  CHECK(vdm_residual(m, sched(), op, x, 800, "pos", 2.0, 100) == vdm_residual(m, sched(), op, x, 800, "pos", 2.0, 700));
}

TEST_CASE("vdm: trained operator approaches the affine optimum") {
  // single Gaussian, fixed theta: the best map from eps_pred back to eps is affine
  const ConditionedMixture m(2, 0.5, {1.0}, {{0.0, 0.0}});
  const Vector theta{0.6, -0.4};
  const int t = 200;
  Rng rng(11);
  OperatorSpec spec = spec_for_variant(OperatorVariant::linear, default_operator_spec(2));
  auto op = DegradationOperator::create(spec, rng);
  OptimizerState st(op.param_count(), AdamConfig{.lr = 0.01});
  for (int step = 0; step < 4000; ++step) {
    std::vector<Vector> in, tgt;
    for (int b = 0; b < 16; ++b) {
      tgt.push_back(standard_normal(rng, 2));
      in.push_back(ep(m, diffuse(theta, t, tgt.back(), sched()).values, t, "null"));
    }
    std::vector<OperatorPair> pairs;
    for (int b = 0; b < 16; ++b) pairs.push_back({in[b], tgt[b]});
    optimizer_step(st, op, operator_grad(op, pairs));
  }
  std::vector<Vector> in, tgt;
  for (int b = 0; b < 200; ++b) {
    tgt.push_back(standard_normal(rng, 2));
    in.push_back(ep(m, diffuse(theta, t, tgt.back(), sched()).values, t, "null"));
  }
  const AffineMap best = affine_fit_oracle(in, tgt);
  Vector w(op.weights(0).begin(), op.weights(0).end());
  for (int i = 0; i < 4; ++i) CHECK(std::abs(w[i] - best.matrix[i]) < 0.05 * std::abs(best.matrix[0]));
  // unconditional part of the residual is (1 - lambda) times the prediction on average
  const double lam = 1.0 - sched().alpha_bar(t);
  Vector mean_r(2, 0.0), mean_e(2, 0.0);
  VdmOptions o;
  o.guidance = false;
  for (std::size_t b = 0; b < in.size(); ++b) {
    const Vector x = diffuse(theta, t, tgt[b], sched()).values;
    axpy(1.0 / in.size(), vdm_residual(m, sched(), op, x, t, "null", 0.0, 300, o), mean_r);
    axpy(1.0 / in.size(), in[b], mean_e);
  }
  // M(e_pred) ~ eps on average, whose mean is ~0, so the residual mean tracks
  // e_pred minus lambda times (A mean_e + b), which for the affine optimum is exact
  const Vector fit_mean = best.apply(mean_e);
  for (int i = 0; i < 2; ++i)
    CHECK(mean_r[i] == doctest::Approx(mean_e[i] - lam * fit_mean[i]).epsilon(0.05).scale(0.05));
}

TEST_CASE("run_distillation: validation") {
  const auto m = bimodal();
  DistillConfig cfg;
  cfg.iterations = 0;
  CHECK_THROWS_AS(run_distillation(cfg, m, sched(), PixelField{{0.0}}, zero_op(1)), InvalidArgument);
  cfg.iterations = 1;
  cfg.batch_size = 0;
  CHECK_THROWS_AS(run_distillation(cfg, m, sched(), PixelField{{0.0}}, zero_op(1)), InvalidArgument);
  cfg.batch_size = 1;
  cfg.cfg_scale = -1;
  CHECK_THROWS_AS(run_distillation(cfg, m, sched(), PixelField{{0.0}}, zero_op(1)), InvalidArgument);
  cfg.cfg_scale = 0;
  cfg.loss_kind = LossKind::neg_prompt;
  CHECK_THROWS_AS(run_distillation(cfg, m, sched(), PixelField{{0.0}}, std::nullopt), InvalidArgument);
  cfg.loss_kind = LossKind::vdm;
  CHECK_THROWS_AS(run_distillation(cfg, m, sched(), PixelField{{0.0}}, std::nullopt), InvalidArgument);
  CHECK_THROWS_AS(run_distillation(cfg, m, sched(), PixelField{{0.0, 0.0}}, zero_op(1)), DimensionMismatch);
  cfg.condition = "missing";
  CHECK_THROWS_AS(run_distillation(cfg, m, sched(), PixelField{{0.0}}, zero_op(1)), InvalidArgument);
}

TEST_CASE("run_distillation: one iteration, one record") {
  const auto m = bimodal();
  DistillConfig cfg;
  cfg.iterations = 1;
  int seen = 0;
  const auto res = run_distillation(cfg, m, sched(), PixelField{{0.3}}, zero_op(1), {},
                                    [&](const TrajectoryRecord& r) { seen += r.iter; });
  CHECK(res.trajectory.records.size() == 1);
  CHECK(seen == 1);
  CHECK(res.trajectory.records[0].t >= 1);
  CHECK(res.trajectory.records[0].t <= 1000);
}

TEST_CASE("run_distillation: deterministic across runs and thread counts") {
  const auto m = bimodal();
  for (auto kind : {LossKind::sds, LossKind::neg_prompt, LossKind::vdm}) {
    DistillConfig cfg;
    cfg.loss_kind = kind;
    cfg.condition = "pos";
    cfg.negative_condition = "neg";
    cfg.iterations = 50;
    cfg.seed = 42;
    cfg.snapshot_every = 10;
    Rng r1(5), r2(5);
    auto op1 = DegradationOperator::create(default_operator_spec(1), r1);
    auto op2 = DegradationOperator::create(default_operator_spec(1), r2);
    const auto a = run_distillation(cfg, m, sched(), PixelField{{0.1}}, op1);
    cfg.threads = 4;
    const auto b = run_distillation(cfg, m, sched(), PixelField{{0.1}}, op2);
    CHECK(same_records(a.trajectory, b.trajectory));
    CHECK(a.scene == b.scene);
    CHECK(a.trajectory.snapshots.size() == 5);
    CHECK(a.trajectory.snapshots[2].iter == 30);
    if (kind == LossKind::vdm) {
      CHECK(a.op.has_value());
      CHECK(*a.op == *b.op);
      CHECK(a.trajectory.records.back().op_loss > 0.0);
    } else {
      // operator untouched
      CHECK(*a.op == op1);
      for (const auto& r : a.trajectory.records) CHECK(r.op_loss == 0.0);
    }
  }
}

TEST_CASE("run_distillation: t range is respected") {
  const auto m = bimodal();
  DistillConfig cfg;
  cfg.loss_kind = LossKind::sds;
  cfg.iterations = 200;
  cfg.t_min = 20;
  cfg.t_max = 30;
  const auto res = run_distillation(cfg, m, sched(), PixelField{{0.0}}, std::nullopt);
  for (const auto& r : res.trajectory.records) {
    CHECK(r.t >= 20);
    CHECK(r.t <= 30);
  }
}

TEST_CASE("run_distillation: non-finite values abort") {
  const auto m = bimodal();
  DistillConfig cfg;
  cfg.loss_kind = LossKind::sds;
  cfg.iterations = 3;
  CHECK_THROWS_AS(run_distillation(cfg, m, sched(), PixelField{{std::nan("")}}, std::nullopt), NumericalAbort);
}

TEST_CASE("run_distillation: vdm drifts toward a mode and sds stays central") {
  const auto m = bimodal();
  auto run = [&](LossKind kind, std::uint64_t seed) {
    DistillConfig cfg;
    cfg.loss_kind = kind;
    cfg.cfg_scale = 0.0;
    cfg.iterations = 2000;
    cfg.weight = WeightKind::one_minus_alpha_bar;
    cfg.seed = seed;
    Rng r(seed + 1000);
    const double theta0 = 0.1 * std::normal_distribution<double>(0.0, 1.0)(r);
    Rng orng(seed);
    const auto res = run_distillation(cfg, m, sched(), PixelField{{theta0}},
                                      DegradationOperator::create(default_operator_spec(1), orng));
    const double th = std::get<PixelField>(res.scene).theta[0];
    return std::min(std::abs(th - 2.0), std::abs(th + 2.0));
  };
  double vdm = 0.0, sds = 0.0;
  for (std::uint64_t s = 0; s < 3; ++s) {
    vdm += run(LossKind::vdm, s) / 3;
    sds += run(LossKind::sds, s) / 3;
  }
  CHECK(vdm < 0.5);
  CHECK(vdm < sds);
}

TEST_CASE("enum names") {
  for (auto k : {LossKind::sds, LossKind::neg_prompt, LossKind::vdm}) CHECK(parse_loss_kind(to_string(k)) == k);
  for (auto i : {OperatorInput::conditional, OperatorInput::cfg})
    CHECK(parse_operator_input(to_string(i)) == i);
  CHECK_THROWS_AS(parse_loss_kind("vsd"), InvalidArgument);
}
