#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "sdlab/common.hpp"
#include "sdlab/degradation.hpp"
#include "sdlab/renderer.hpp"
#include "sdlab/schedule.hpp"
#include "sdlab/score_model.hpp"

namespace sdlab {

enum class LossKind { sds, neg_prompt, vdm };

/// What the operator sees: the conditional prediction, or the guided one.
enum class OperatorInput { conditional, cfg };

struct DistillConfig {
  LossKind loss_kind = LossKind::vdm;
  double cfg_scale = 7.5;
  int dca_cutoff = 300;
  int iterations = 5000;
  int batch_size = 4;
  double scene_lr = 0.01;
  double operator_lr = 0.01;
  std::string condition = std::string(kNullCondition);
  std::string negative_condition;  // empty = unset
  double neg_weight = 1.0;
  std::uint64_t seed = 0;
  WeightKind weight = WeightKind::uniform;
  int t_min = 1;
  int t_max = 0;  // 0 = T
  int snapshot_every = 0;  // 0 = never
  bool vdm_guidance = true;
  OperatorInput operator_input = OperatorInput::conditional;
  bool xt_jacobian = true;
  unsigned threads = 1;

  void validate(const NoiseSchedule& sched) const;
};

struct TrajectoryRecord {
  int iter = 0;
  int t = 0;
  double loss = 0.0;
  double grad_norm = 0.0;
  double op_loss = 0.0;
  double wall_ms = 0.0;
};

struct Snapshot {
  int iter = 0;
  Vector parameters;
};

struct Trajectory {
  std::vector<TrajectoryRecord> records;
  std::vector<Snapshot> snapshots;
};

struct DistillResult {
  Trajectory trajectory;
  Representation scene;
  std::optional<DegradationOperator> op;
};

/// Residuals below are already multiplied by w(t) and are in sample space.

/// w(t) (eps_cfg - eps).
Vector sds_residual(const ConditionedMixture& model, const NoiseSchedule& sched,
                    std::span<const double> x_t, int t, std::span<const double> eps,
                    std::string_view cond, double scale, WeightKind weight = WeightKind::uniform);

/// w(t) [(e(y) - l_s e(y_neg)) + s (e(y) - e(null))].
Vector neg_prompt_residual(const ConditionedMixture& model, const NoiseSchedule& sched,
                           std::span<const double> x_t, int t, std::string_view cond,
                           std::string_view neg_cond, double neg_weight, double scale,
                           WeightKind weight = WeightKind::uniform);

struct VdmOptions {
  bool guidance = true;
  OperatorInput input = OperatorInput::conditional;
  bool xt_jacobian = true;
  WeightKind weight = WeightKind::uniform;
};

/// Operator input for the given options: e(y) or eps_cfg(y, s).
Vector vdm_operator_input(const ConditionedMixture& model, const NoiseSchedule& sched,
                          std::span<const double> x_t, int t, std::string_view cond, double scale,
                          OperatorInput input);

/// w(t) [(e(y) - lambda_t M(in)) + s (e(y) - e(null))]; the guidance term is
/// dropped when options.guidance is false.
Vector vdm_residual(const ConditionedMixture& model, const NoiseSchedule& sched,
                    const DegradationOperator& op, std::span<const double> x_t, int t,
                    std::string_view cond, double scale, int dca_cutoff,
                    const VdmOptions& options = {});

/// Full estimators for one (view, t, eps): render, diffuse, residual,
/// back through the renderer. Gradients are over the representation's flat
/// parameters.
Vector sds_gradient(const ConditionedMixture& model, const NoiseSchedule& sched,
                    const Representation& scene, const View& view, int t,
                    std::span<const double> eps, std::string_view cond, double scale,
                    WeightKind weight = WeightKind::uniform);

Vector neg_prompt_gradient(const ConditionedMixture& model, const NoiseSchedule& sched,
                           const Representation& scene, const View& view, int t,
                           std::span<const double> eps, std::string_view cond,
                           std::string_view neg_cond, double neg_weight, double scale,
                           WeightKind weight = WeightKind::uniform);

/// dx_t/dtheta = sqrt(abar_t) dx_0/dtheta when options.xt_jacobian is set.
Vector vdm_gradient(const ConditionedMixture& model, const NoiseSchedule& sched,
                    const DegradationOperator& op, const Representation& scene, const View& view,
                    int t, std::span<const double> eps, std::string_view cond, double scale,
                    int dca_cutoff, const VdmOptions& options = {});

using RecordObserver = std::function<void(const TrajectoryRecord&)>;

/// One operator step then one scene step per iteration. Deterministic for a
/// given seed regardless of cfg.threads. Throws NumericalAbort on a
/// non-finite loss or gradient.
DistillResult run_distillation(const DistillConfig& cfg, const ConditionedMixture& model,
                               const NoiseSchedule& sched, Representation scene_init,
                               std::optional<DegradationOperator> op_init,
                               const ViewSampler& views = {},
                               const RecordObserver& observer = {});

std::string_view to_string(LossKind k);
std::string_view to_string(OperatorInput i);
LossKind parse_loss_kind(std::string_view name);
OperatorInput parse_operator_input(std::string_view name);

}  // namespace sdlab
