#include <benchmark/benchmark.h>

#include "sdlab/degradation.hpp"
#include "sdlab/distill.hpp"
#include "sdlab/renderer.hpp"
#include "sdlab/schedule.hpp"
#include "sdlab/score_model.hpp"

namespace {

using namespace sdlab;

const NoiseSchedule& schedule() {
  static const NoiseSchedule s = build_schedule(1000, 1e-4, 0.02);
  return s;
}

ConditionedMixture templates(const Canvas& cv) {
  const char* names[] = {"disc", "ring", "square", "cross", "bar_h", "bar_v"};
  std::vector<Vector> means;
  ConditionedMixture::ConditionMap conds;
  for (std::size_t i = 0; i < 6; ++i) {
    means.push_back(make_template_image(names[i], cv));
    conds[names[i]] = {i};
  }
  Vector w(6, 1.0 / 6.0);
  w.back() = 1.0 - 5.0 / 6.0;
  return ConditionedMixture(cv.size(), 0.1, w, means, conds);
}

void BM_EpsPredict(benchmark::State& state) {
  const Canvas cv{16, 16, 1};
  const auto model = templates(cv);
  Rng rng(1);
  const Vector x = standard_normal(rng, cv.size());
  for (auto _ : state) {
    benchmark::DoNotOptimize(eps_predict(model, x, 300, "disc", schedule()));
  }
}
BENCHMARK(BM_EpsPredict);

void BM_EpsCfg(benchmark::State& state) {
  const Canvas cv{16, 16, 1};
  const auto model = templates(cv);
  Rng rng(1);
  const Vector x = standard_normal(rng, cv.size());
  for (auto _ : state) {
    benchmark::DoNotOptimize(eps_cfg(model, x, 300, "disc", 7.5, schedule()));
  }
}
BENCHMARK(BM_EpsCfg);

void BM_Render(benchmark::State& state) {
  const auto side = static_cast<std::size_t>(state.range(0));
  Rng rng(2);
  const SplatScene scene = init_scene({side, side, 1}, SceneInit{}, rng);
  for (auto _ : state) benchmark::DoNotOptimize(render(scene, View{}));
}
BENCHMARK(BM_Render)->Arg(16)->Arg(32)->Arg(64);

void BM_RenderGrad(benchmark::State& state) {
  const auto side = static_cast<std::size_t>(state.range(0));
  Rng rng(2);
  const SplatScene scene = init_scene({side, side, 1}, SceneInit{}, rng);
  const Vector up = standard_normal(rng, scene.canvas.size());
  for (auto _ : state) benchmark::DoNotOptimize(render_grad(scene, View{}, up));
}
BENCHMARK(BM_RenderGrad)->Arg(16)->Arg(32)->Arg(64);

void BM_OperatorGrad(benchmark::State& state) {
  const auto d = static_cast<std::size_t>(state.range(0));
  Rng rng(3);
  OperatorSpec spec = default_operator_spec(d);
  spec.init = OperatorInit::identity;
  const auto op = DegradationOperator::create(spec, rng);
  std::vector<Vector> in, tgt;
  std::vector<OperatorPair> pairs;
  for (int i = 0; i < 4; ++i) {
    in.push_back(standard_normal(rng, d));
    tgt.push_back(standard_normal(rng, d));
  }
  for (int i = 0; i < 4; ++i) pairs.push_back({in[i], tgt[i]});
  for (auto _ : state) benchmark::DoNotOptimize(operator_grad(op, pairs));
}
BENCHMARK(BM_OperatorGrad)->Arg(1)->Arg(16)->Arg(256);

void BM_DistillIteration(benchmark::State& state) {
  ConditionedMixture model(1, 0.2, {0.5, 0.5}, {{-2.0}, {2.0}});
  Rng rng(4);
  const auto op = DegradationOperator::create(default_operator_spec(1), rng);
  DistillConfig cfg;
  cfg.cfg_scale = 0.0;
  cfg.iterations = 100;
  for (auto _ : state) {
    benchmark::DoNotOptimize(run_distillation(cfg, model, schedule(), PixelField{{0.1}}, op));
  }
  state.SetItemsProcessed(state.iterations() * cfg.iterations);
}
BENCHMARK(BM_DistillIteration);

}  // namespace

BENCHMARK_MAIN();
