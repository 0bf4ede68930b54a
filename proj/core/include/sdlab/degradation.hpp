#pragma once

#include <cstdint>
#include <iosfwd>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "sdlab/common.hpp"
#include "sdlab/score_model.hpp"

namespace sdlab {

enum class Activation { tanh, relu };
enum class OperatorInit { zero_final, identity };
enum class OperatorVariant { nonlinear, linear, nonlinear_plus_noise };

struct OperatorSpec {
  std::size_t dim = 1;
  std::vector<std::size_t> hidden_dims;
  Activation activation = Activation::tanh;
  OperatorInit init = OperatorInit::zero_final;
  /// Adds a learnable constant vector to the output (the "observation noise"
  /// ablation arm).
  bool learnable_offset = false;
  /// Keeps the offset pinned at its initial value (zero).
  bool freeze_offset = false;
  double init_std = 0.05;
};

/// d -> 4d -> 4d -> d, tanh, zero final layer.
OperatorSpec default_operator_spec(std::size_t dim);

/// Applies the ablation variant on top of `base`: `linear` drops every hidden
/// layer, `nonlinear_plus_noise` enables the learnable offset.
OperatorSpec spec_for_variant(OperatorVariant variant, OperatorSpec base);

/// Multilayer perceptron acting on noise space (an endomorphism of R^d).
///
/// Parameters live in one flat buffer: for each layer the weight matrix
/// (row-major, out x in) followed by its bias, then the optional offset.
/// Gradients returned by operator_grad use the same layout.
class DegradationOperator {
 public:
  DegradationOperator(std::vector<std::size_t> layer_dims, Activation activation,
                      bool has_offset = false, bool freeze_offset = false);

  static DegradationOperator create(const OperatorSpec& spec, Rng& rng);

  std::size_t dim() const noexcept { return dims_.front(); }
  std::size_t layer_count() const noexcept { return dims_.size() - 1; }
  const std::vector<std::size_t>& layer_dims() const noexcept { return dims_; }
  Activation activation() const noexcept { return activation_; }
  bool has_offset() const noexcept { return has_offset_; }
  bool offset_frozen() const noexcept { return freeze_offset_; }
  std::size_t param_count() const noexcept { return params_.size(); }

  std::span<double> parameters() noexcept { return params_; }
  std::span<const double> parameters() const noexcept { return params_; }

  std::span<double> weights(std::size_t layer);
  std::span<const double> weights(std::size_t layer) const;
  std::span<double> bias(std::size_t layer);
  std::span<const double> bias(std::size_t layer) const;
  std::span<double> offset();
  std::span<const double> offset() const;

  std::size_t weight_offset(std::size_t layer) const { return weight_offsets_.at(layer); }
  std::size_t bias_offset(std::size_t layer) const { return bias_offsets_.at(layer); }
  std::size_t offset_index() const noexcept { return offset_index_; }

  bool operator==(const DegradationOperator&) const = default;

 private:
  std::vector<std::size_t> dims_;
  Activation activation_;
  bool has_offset_;
  bool freeze_offset_;
  Vector params_;
  std::vector<std::size_t> weight_offsets_;
  std::vector<std::size_t> bias_offsets_;
  std::size_t offset_index_ = 0;
};

/// Forward pass M(v).
Sample apply(const DegradationOperator& op, std::span<const double> v);

/// |M(eps_pred) - eps|^2
double operator_loss(const DegradationOperator& op, std::span<const double> eps_pred,
                     std::span<const double> eps);

struct OperatorPair {
  std::span<const double> input;
  std::span<const double> target;
};

/// Mean over the batch of grad_psi operator_loss. Inputs are constants: no
/// derivative flows back into whatever produced them.
Vector operator_grad(const DegradationOperator& op, std::span<const OperatorPair> batch);

struct AdamConfig {
  double lr = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

/// Adam moments for a flat parameter vector.
class OptimizerState {
 public:
  OptimizerState(std::size_t param_count, AdamConfig config = {});

  void step(std::span<double> params, std::span<const double> grads);

  std::size_t param_count() const noexcept { return first_.size(); }
  std::int64_t step_count() const noexcept { return steps_; }
  const AdamConfig& config() const noexcept { return config_; }
  void set_learning_rate(double lr) { config_.lr = lr; }
  std::span<const double> first_moment() const noexcept { return first_; }
  std::span<const double> second_moment() const noexcept { return second_; }

 private:
  AdamConfig config_;
  Vector first_;
  Vector second_;
  std::int64_t steps_ = 0;
};

void optimizer_step(OptimizerState& state, DegradationOperator& op, std::span<const double> grads);

/// y = A x + b with A stored row-major (out x in).
struct AffineMap {
  std::size_t in_dim = 0;
  std::size_t out_dim = 0;
  Vector matrix;
  Vector bias;

  Vector apply(std::span<const double> x) const;
};

/// Least-squares affine regression through the normal equations.
AffineMap affine_fit_oracle(std::span<const Vector> inputs, std::span<const Vector> targets);

/// Mean over pairs of |A in + b - target|^2.
double affine_fit_loss(const AffineMap& map, std::span<const Vector> inputs,
                       std::span<const Vector> targets);

/// Binary layout: "VDMOP1", int32 layer-dim count, int32 layer dims, int32
/// flags (bit 0 relu, bit 1 offset present), then float64 weights and biases
/// per layer, then the offset. All little-endian.
void save_operator(const DegradationOperator& op, std::ostream& out);
DegradationOperator load_operator(std::istream& in);
void save_operator(const DegradationOperator& op, const std::string& path);
DegradationOperator load_operator(const std::string& path);

std::string_view to_string(Activation a);
std::string_view to_string(OperatorInit i);
std::string_view to_string(OperatorVariant v);
Activation parse_activation(std::string_view name);
OperatorInit parse_operator_init(std::string_view name);
OperatorVariant parse_operator_variant(std::string_view name);

}  // namespace sdlab
