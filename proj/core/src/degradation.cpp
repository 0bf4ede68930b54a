#include "sdlab/degradation.hpp"

#include <Eigen/Dense>
#include <cmath>
#include <fstream>

#include "sdlab/binary_io.hpp"

namespace sdlab {

namespace {

constexpr std::string_view kOperatorMagic = "VDMOP1";

double activate(Activation a, double z) {
  return a == Activation::tanh ? std::tanh(z) : (z > 0.0 ? z : 0.0);
}

// Derivative expressed through the pre-activation z and activation h.
double activate_grad(Activation a, double z, double h) {
  return a == Activation::tanh ? 1.0 - h * h : (z > 0.0 ? 1.0 : 0.0);
}

// Per-layer activations kept for the backward pass. acts[0] is the input.
struct ForwardCache {
  std::vector<Vector> pre;
  std::vector<Vector> acts;
};

Vector forward(const DegradationOperator& op, std::span<const double> v, ForwardCache* cache) {
  require_dim(v.size(), op.dim(), "degradation operator input");
  const auto& dims = op.layer_dims();
  const std::size_t layers = op.layer_count();
  Vector current(v.begin(), v.end());
  if (cache) {
    cache->pre.assign(layers, {});
    cache->acts.assign(layers + 1, {});
    cache->acts[0] = current;
  }
  for (std::size_t l = 0; l < layers; ++l) {
    const std::size_t in = dims[l];
    const std::size_t out = dims[l + 1];
    const auto w = op.weights(l);
    const auto b = op.bias(l);
    Vector z(out);
    for (std::size_t r = 0; r < out; ++r) {
      double acc = b[r];
      const double* row = w.data() + r * in;
      for (std::size_t c = 0; c < in; ++c) acc += row[c] * current[c];
      z[r] = acc;
    }
    const bool hidden = l + 1 < layers;
    Vector h = z;
    if (hidden) {
      for (double& x : h) x = activate(op.activation(), x);
    }
    if (cache) {
      cache->pre[l] = std::move(z);
      cache->acts[l + 1] = h;
    }
    current = std::move(h);
  }
  if (op.has_offset()) {
    const auto off = op.offset();
    for (std::size_t i = 0; i < current.size(); ++i) current[i] += off[i];
  }
  return current;
}

}  // namespace

OperatorSpec default_operator_spec(std::size_t dim) {
  OperatorSpec spec;
  spec.dim = dim;
  spec.hidden_dims = {4 * dim, 4 * dim};
  return spec;
}

OperatorSpec spec_for_variant(OperatorVariant variant, OperatorSpec base) {
  switch (variant) {
    case OperatorVariant::nonlinear:
      base.learnable_offset = false;
      break;
    case OperatorVariant::linear:
      base.hidden_dims.clear();
      base.learnable_offset = false;
      break;
    case OperatorVariant::nonlinear_plus_noise:
      base.learnable_offset = true;
      break;
  }
  return base;
}

DegradationOperator::DegradationOperator(std::vector<std::size_t> layer_dims, Activation activation,
                                         bool has_offset, bool freeze_offset)
    : dims_(std::move(layer_dims)),
      activation_(activation),
      has_offset_(has_offset),
      freeze_offset_(freeze_offset) {
  if (dims_.size() < 2) throw InvalidArgument("degradation operator: need at least one layer");
  if (dims_.front() != dims_.back()) {
    throw DimensionMismatch("degradation operator: input and output dimension must match");
  }
  for (std::size_t d : dims_) {
    if (d == 0) throw InvalidArgument("degradation operator: zero-width layer");
  }
  std::size_t n = 0;
  for (std::size_t l = 0; l + 1 < dims_.size(); ++l) {
    weight_offsets_.push_back(n);
    n += dims_[l] * dims_[l + 1];
    bias_offsets_.push_back(n);
    n += dims_[l + 1];
  }
  offset_index_ = n;
  if (has_offset_) n += dims_.back();
  params_.assign(n, 0.0);
}

DegradationOperator DegradationOperator::create(const OperatorSpec& spec, Rng& rng) {
  if (spec.dim == 0) throw InvalidArgument("degradation operator: dim must be >= 1");
  std::vector<std::size_t> dims;
  dims.push_back(spec.dim);
  dims.insert(dims.end(), spec.hidden_dims.begin(), spec.hidden_dims.end());
  dims.push_back(spec.dim);
  DegradationOperator op(dims, spec.activation, spec.learnable_offset, spec.freeze_offset);
  const std::size_t layers = op.layer_count();
  const std::size_t d = spec.dim;

  if (spec.init == OperatorInit::zero_final) {
    std::normal_distribution<double> normal(0.0, spec.init_std);
    for (std::size_t l = 0; l + 1 < layers; ++l) {
      for (double& w : op.weights(l)) w = normal(rng);
    }
    return op;
  }

  // Identity: with no hidden layer the single affine map is I. Otherwise the
  // first layer scales into the linear regime of the activation, hidden
  // layers pass the leading d units through, and the last layer undoes the
  // scale, so M(v) ~= v for small |v|.
  if (layers == 1) {
    auto w = op.weights(0);
    for (std::size_t i = 0; i < d; ++i) w[i * d + i] = 1.0;
    return op;
  }
  if (spec.activation != Activation::tanh) {
    throw InvalidArgument("identity initialisation requires tanh hidden layers");
  }
  for (std::size_t l = 0; l + 1 < layers; ++l) {
    if (dims[l + 1] < d) throw InvalidArgument("identity initialisation needs hidden widths >= dim");
  }
  constexpr double kGain = 0.1;
  for (std::size_t l = 0; l < layers; ++l) {
    const std::size_t in = dims[l];
    auto w = op.weights(l);
    const double diag = l == 0 ? kGain : (l + 1 == layers ? 1.0 / kGain : 1.0);
    for (std::size_t i = 0; i < d; ++i) w[i * in + i] = diag;
  }
  return op;
}

std::span<double> DegradationOperator::weights(std::size_t layer) {
  return std::span<double>(params_).subspan(weight_offsets_.at(layer), dims_[layer] * dims_[layer + 1]);
}
std::span<const double> DegradationOperator::weights(std::size_t layer) const {
  return std::span<const double>(params_).subspan(weight_offsets_.at(layer),
                                                  dims_[layer] * dims_[layer + 1]);
}
std::span<double> DegradationOperator::bias(std::size_t layer) {
  return std::span<double>(params_).subspan(bias_offsets_.at(layer), dims_[layer + 1]);
}
std::span<const double> DegradationOperator::bias(std::size_t layer) const {
  return std::span<const double>(params_).subspan(bias_offsets_.at(layer), dims_[layer + 1]);
}
std::span<double> DegradationOperator::offset() {
  if (!has_offset_) return {};
  return std::span<double>(params_).subspan(offset_index_, dims_.back());
}
std::span<const double> DegradationOperator::offset() const {
  if (!has_offset_) return {};
  return std::span<const double>(params_).subspan(offset_index_, dims_.back());
}

Sample apply(const DegradationOperator& op, std::span<const double> v) {
  return {SampleRole::prediction, forward(op, v, nullptr)};
}

double operator_loss(const DegradationOperator& op, std::span<const double> eps_pred,
                     std::span<const double> eps) {
  require_dim(eps.size(), op.dim(), "operator_loss target");
  const Vector y = forward(op, eps_pred, nullptr);
  double acc = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) {
    const double r = y[i] - eps[i];
    acc += r * r;
  }
  return acc;
}

Vector operator_grad(const DegradationOperator& op, std::span<const OperatorPair> batch) {
  if (batch.empty()) throw InvalidArgument("operator_grad: empty batch");
  const auto& dims = op.layer_dims();
  const std::size_t layers = op.layer_count();
  Vector grad(op.param_count(), 0.0);
  const double inv_n = 1.0 / static_cast<double>(batch.size());
  ForwardCache cache;
  for (const OperatorPair& pair : batch) {
    require_dim(pair.target.size(), op.dim(), "operator_grad target");
    const Vector y = forward(op, pair.input, &cache);
    Vector delta(y.size());
    for (std::size_t i = 0; i < y.size(); ++i) delta[i] = 2.0 * (y[i] - pair.target[i]) * inv_n;
    if (op.has_offset() && !op.offset_frozen()) {
      for (std::size_t i = 0; i < delta.size(); ++i) grad[op.offset_index() + i] += delta[i];
    }
    for (std::size_t l = layers; l-- > 0;) {
      const std::size_t in = dims[l];
      const std::size_t out = dims[l + 1];
      if (l + 1 < layers) {
        const Vector& z = cache.pre[l];
        const Vector& h = cache.acts[l + 1];
        for (std::size_t r = 0; r < out; ++r) delta[r] *= activate_grad(op.activation(), z[r], h[r]);
      }
      const Vector& a = cache.acts[l];
      double* gw = grad.data() + op.weight_offset(l);
      double* gb = grad.data() + op.bias_offset(l);
      for (std::size_t r = 0; r < out; ++r) {
        gb[r] += delta[r];
        double* row = gw + r * in;
        for (std::size_t c = 0; c < in; ++c) row[c] += delta[r] * a[c];
      }
      if (l > 0) {
        const auto w = op.weights(l);
        Vector next(in, 0.0);
        for (std::size_t r = 0; r < out; ++r) {
          const double* row = w.data() + r * in;
          for (std::size_t c = 0; c < in; ++c) next[c] += row[c] * delta[r];
        }
        delta = std::move(next);
      }
    }
  }
  return grad;
}

OptimizerState::OptimizerState(std::size_t param_count, AdamConfig config)
    : config_(config), first_(param_count, 0.0), second_(param_count, 0.0) {
  if (!(config_.lr > 0.0)) throw InvalidArgument("optimizer: learning rate must be > 0");
}

void OptimizerState::step(std::span<double> params, std::span<const double> grads) {
  require_dim(params.size(), first_.size(), "optimizer parameters");
  require_dim(grads.size(), first_.size(), "optimizer gradients");
  ++steps_;
  const double b1 = config_.beta1;
  const double b2 = config_.beta2;
  const double k = static_cast<double>(steps_);
  const double c1 = 1.0 - std::pow(b1, k);
  const double c2 = 1.0 - std::pow(b2, k);
  for (std::size_t i = 0; i < params.size(); ++i) {
    const double g = grads[i];
    first_[i] = b1 * first_[i] + (1.0 - b1) * g;
    second_[i] = b2 * second_[i] + (1.0 - b2) * g * g;
    const double m_hat = first_[i] / c1;
    const double v_hat = second_[i] / c2;
    params[i] -= config_.lr * m_hat / (std::sqrt(v_hat) + config_.epsilon);
  }
}

void optimizer_step(OptimizerState& state, DegradationOperator& op, std::span<const double> grads) {
  state.step(op.parameters(), grads);
}

Vector AffineMap::apply(std::span<const double> x) const {
  require_dim(x.size(), in_dim, "affine map input");
  Vector y(bias);
  for (std::size_t r = 0; r < out_dim; ++r) {
    for (std::size_t c = 0; c < in_dim; ++c) y[r] += matrix[r * in_dim + c] * x[c];
  }
  return y;
}

AffineMap affine_fit_oracle(std::span<const Vector> inputs, std::span<const Vector> targets) {
  require_dim(targets.size(), inputs.size(), "affine_fit_oracle pair count");
  if (inputs.empty()) throw InvalidArgument("affine_fit_oracle: no pairs");
  const std::size_t din = inputs.front().size();
  const std::size_t dout = targets.front().size();
  const std::size_t p = din + 1;
  if (inputs.size() < p) throw InvalidArgument("affine_fit_oracle: rank deficient (too few pairs)");

  Eigen::MatrixXd gram = Eigen::MatrixXd::Zero(p, p);
  Eigen::MatrixXd rhs = Eigen::MatrixXd::Zero(p, dout);
  Eigen::VectorXd row(p);
  for (std::size_t n = 0; n < inputs.size(); ++n) {
    require_dim(inputs[n].size(), din, "affine_fit_oracle input");
    require_dim(targets[n].size(), dout, "affine_fit_oracle target");
    for (std::size_t i = 0; i < din; ++i) row[i] = inputs[n][i];
    row[din] = 1.0;
    gram.noalias() += row * row.transpose();
    for (std::size_t j = 0; j < dout; ++j) rhs.col(j) += targets[n][j] * row;
  }
  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(gram);
  qr.setThreshold(1e-12);
  if (qr.rank() < static_cast<Eigen::Index>(p)) {
    throw InvalidArgument("affine_fit_oracle: rank-deficient design");
  }
  const Eigen::MatrixXd sol = qr.solve(rhs);  // p x dout

  AffineMap map;
  map.in_dim = din;
  map.out_dim = dout;
  map.matrix.resize(dout * din);
  map.bias.resize(dout);
  for (std::size_t r = 0; r < dout; ++r) {
    for (std::size_t c = 0; c < din; ++c) map.matrix[r * din + c] = sol(static_cast<Eigen::Index>(c), r);
    map.bias[r] = sol(static_cast<Eigen::Index>(din), r);
  }
  return map;
}

double affine_fit_loss(const AffineMap& map, std::span<const Vector> inputs,
                       std::span<const Vector> targets) {
  require_dim(targets.size(), inputs.size(), "affine_fit_loss pair count");
  if (inputs.empty()) return 0.0;
  double acc = 0.0;
  for (std::size_t n = 0; n < inputs.size(); ++n) {
    const Vector y = map.apply(inputs[n]);
    for (std::size_t i = 0; i < y.size(); ++i) {
      const double r = y[i] - targets[n][i];
      acc += r * r;
    }
  }
  return acc / static_cast<double>(inputs.size());
}

void save_operator(const DegradationOperator& op, std::ostream& out) {
  binary::write_magic(out, kOperatorMagic);
  binary::write_i32(out, static_cast<std::int32_t>(op.layer_dims().size()));
  for (std::size_t d : op.layer_dims()) binary::write_i32(out, static_cast<std::int32_t>(d));
  std::int32_t flags = 0;
  if (op.activation() == Activation::relu) flags |= 1;
  if (op.has_offset()) flags |= 2;
  binary::write_i32(out, flags);
  for (double v : op.parameters()) binary::write_f64(out, v);
  if (!out) throw Error("save_operator: write failed");
}

DegradationOperator load_operator(std::istream& in) {
  binary::expect_magic(in, kOperatorMagic);
  const std::int32_t count = binary::read_i32(in);
  if (count < 2 || count > 1024) throw Error("load_operator: bad layer count");
  std::vector<std::size_t> dims;
  for (std::int32_t i = 0; i < count; ++i) {
    const std::int32_t d = binary::read_i32(in);
    if (d <= 0) throw Error("load_operator: bad layer width");
    dims.push_back(static_cast<std::size_t>(d));
  }
  const std::int32_t flags = binary::read_i32(in);
  DegradationOperator op(dims, (flags & 1) ? Activation::relu : Activation::tanh, (flags & 2) != 0);
  for (double& v : op.parameters()) v = binary::read_f64(in);
  return op;
}

void save_operator(const DegradationOperator& op, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot open " + path + " for writing");
  save_operator(op, out);
}

DegradationOperator load_operator(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path);
  return load_operator(in);
}

std::string_view to_string(Activation a) { return a == Activation::tanh ? "tanh" : "relu"; }

std::string_view to_string(OperatorInit i) {
  return i == OperatorInit::zero_final ? "zero_final" : "identity";
}

std::string_view to_string(OperatorVariant v) {
  switch (v) {
    case OperatorVariant::nonlinear:
      return "nonlinear";
    case OperatorVariant::linear:
      return "linear";
    case OperatorVariant::nonlinear_plus_noise:
      return "nonlinear_plus_noise";
  }
  return "nonlinear";
}

Activation parse_activation(std::string_view name) {
  if (name == "tanh") return Activation::tanh;
  if (name == "relu") return Activation::relu;
  throw InvalidArgument("unknown activation '" + std::string(name) + "'");
}

OperatorInit parse_operator_init(std::string_view name) {
  if (name == "zero_final" || name == "zero") return OperatorInit::zero_final;
  if (name == "identity") return OperatorInit::identity;
  throw InvalidArgument("unknown operator init '" + std::string(name) + "'");
}

OperatorVariant parse_operator_variant(std::string_view name) {
  if (name == "nonlinear") return OperatorVariant::nonlinear;
  if (name == "linear") return OperatorVariant::linear;
  if (name == "nonlinear_plus_noise") return OperatorVariant::nonlinear_plus_noise;
  throw InvalidArgument("unknown operator variant '" + std::string(name) + "'");
}

}  // namespace sdlab
