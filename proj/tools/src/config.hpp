#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "sdlab/analysis.hpp"
#include "sdlab/degradation.hpp"
#include "sdlab/distill.hpp"
#include "sdlab/renderer.hpp"
#include "sdlab/schedule.hpp"
#include "sdlab/score_model.hpp"

namespace sdlab::cli {

class ConfigError : public Error {
 public:
  using Error::Error;
};

struct ScheduleConfig {
  ScheduleKind kind = ScheduleKind::linear;
  int T = 1000;
  double beta_min = 1e-4;
  double beta_max = 0.02;
};

// Presets: bimodal (+-separation along the all-ones direction), single
// (one component at the origin), templates (one component per shape image),
// custom (explicit components).
struct MixtureConfig {
  std::string preset = "bimodal";
  std::size_t dim = 1;
  double sigma = 0.2;
  double separation = 2.0;
  Vector weights;
  std::vector<Vector> means;
  ConditionedMixture::ConditionMap conditions;
  std::vector<std::string> templates{"disc", "ring", "square", "cross", "bar_h", "bar_v"};
};

struct OperatorConfig {
  std::optional<std::vector<std::size_t>> hidden_dims;  // unset = 4d, 4d
  Activation activation = Activation::tanh;
  OperatorInit init = OperatorInit::zero_final;
  OperatorVariant variant = OperatorVariant::nonlinear;
  double init_std = 0.05;
};

struct RendererConfig {
  std::string kind = "pixel";  // pixel | splat
  Vector init;                 // pixel: explicit theta0, empty = random
  double init_std = 0.1;       // pixel: theta0 ~ N(0, init_std^2)
  Canvas canvas;
  SceneInit scene;
  ViewSampler views;
};

struct AnalysisConfig {
  std::vector<int> t_grid{1, 10, 50, 100, 200, 300, 500, 700, 900, 1000};
  std::size_t trials = 1000;
  X0Source x0_source = X0Source::mixture_draws;
  Vector fixed_x0;
  CorrelationMetric metric = CorrelationMetric::cosine;
  std::string condition;  // empty = distill.condition
  Vector kl_theta;        // empty = zeros
  std::vector<std::uint64_t> seeds;  // empty = {seed}
  std::size_t grid_points = 4096;
};

struct GradcheckConfig {
  std::vector<std::string> checks{"score", "cfg", "renderer", "operator"};
  std::size_t probes = 100;
};

struct SampleConfig {
  std::size_t count = 1;
  std::string condition;  // empty = distill.condition
};

struct ExperimentConfig {
  std::uint64_t seed = 0;
  std::string output_dir = "out";
  ScheduleConfig schedule;
  MixtureConfig mixture;
  OperatorConfig op;
  RendererConfig renderer;
  DistillConfig distill;
  AnalysisConfig analysis;
  GradcheckConfig gradcheck;
  SampleConfig sample;
};

ExperimentConfig parse_config(std::string_view text, std::string_view source = "<string>");
ExperimentConfig load_config(const std::string& path);

/// Builds every derived object once; throws ConfigError on any inconsistency.
void validate(const ExperimentConfig& cfg);

/// Resolved config in the same format, numbers printed round-trip exact.
std::string manifest(const ExperimentConfig& cfg);

NoiseSchedule make_schedule(const ExperimentConfig& cfg);
ConditionedMixture make_mixture(const ExperimentConfig& cfg);
OperatorSpec make_operator_spec(const ExperimentConfig& cfg);
DegradationOperator make_operator(const ExperimentConfig& cfg);
Representation make_scene(const ExperimentConfig& cfg);
bool image_regime(const ExperimentConfig& cfg);
Canvas sample_canvas(const ExperimentConfig& cfg);

/// Seeds for the independent streams derived from the master seed.
std::uint64_t scene_seed(std::uint64_t seed);
std::uint64_t operator_seed(std::uint64_t seed);

}  // namespace sdlab::cli
