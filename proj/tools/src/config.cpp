#include "config.hpp"

#include <cinttypes>
#include <cstdio>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#define TOML_EXCEPTIONS 1
#include "toml.hpp"

namespace sdlab::cli {

namespace {

// Tables whose entries are free-form names rather than config keys.
const std::set<std::string, std::less<>> kOpaqueTables{"mixture.conditions"};

class KeyReader {
 public:
  KeyReader(const toml::table& root, std::string source) : source_(std::move(source)) {
    collect(root, "");
  }

  const toml::node* take(const std::string& key) {
    auto it = leaves_.find(key);
    if (it == leaves_.end()) return nullptr;
    used_.insert(key);
    return it->second;
  }

  // First of `key` or `alias` present; both present is an error.
  const toml::node* take(const std::string& key, const std::string& alias) {
    const toml::node* a = take(key);
    const toml::node* b = take(alias);
    if (a && b) fail("both '" + key + "' and '" + alias + "' are set");
    return a ? a : b;
  }

  [[noreturn]] void fail(const std::string& msg) const { throw ConfigError(source_ + ": " + msg); }

  void finish() const {
    for (const auto& [key, node] : leaves_) {
      if (!used_.contains(key)) fail("unknown key '" + key + "'");
    }
  }

  double as_double(const toml::node& n, const std::string& key) const {
    if (!n.is_number()) fail("'" + key + "' must be a number");
    return *n.value<double>();
  }

  std::int64_t as_int(const toml::node& n, const std::string& key) const {
    if (!n.is_integer()) fail("'" + key + "' must be an integer");
    return *n.value<std::int64_t>();
  }

  std::string as_string(const toml::node& n, const std::string& key) const {
    if (!n.is_string()) fail("'" + key + "' must be a string");
    return *n.value<std::string>();
  }

  bool as_bool(const toml::node& n, const std::string& key) const {
    if (!n.is_boolean()) fail("'" + key + "' must be a boolean");
    return *n.value<bool>();
  }

  const toml::array& as_array(const toml::node& n, const std::string& key) const {
    if (!n.is_array()) fail("'" + key + "' must be an array");
    return *n.as_array();
  }

  Vector as_vector(const toml::node& n, const std::string& key) const {
    Vector out;
    for (const toml::node& e : as_array(n, key)) out.push_back(as_double(e, key + "[]"));
    return out;
  }

  std::vector<std::int64_t> as_ints(const toml::node& n, const std::string& key) const {
    std::vector<std::int64_t> out;
    for (const toml::node& e : as_array(n, key)) out.push_back(as_int(e, key + "[]"));
    return out;
  }

  std::int64_t non_negative(const toml::node& n, const std::string& key) const {
    const std::int64_t v = as_int(n, key);
    if (v < 0) fail("'" + key + "' must be >= 0");
    return v;
  }

  void get(const std::string& key, double& out) {
    if (auto* n = take(key)) out = as_double(*n, key);
  }
  void get(const std::string& key, int& out) {
    if (auto* n = take(key)) out = static_cast<int>(as_int(*n, key));
  }
  void get(const std::string& key, std::size_t& out) {
    if (auto* n = take(key)) out = static_cast<std::size_t>(non_negative(*n, key));
  }
  void get(const std::string& key, std::string& out) {
    if (auto* n = take(key)) out = as_string(*n, key);
  }
  void get(const std::string& key, bool& out) {
    if (auto* n = take(key)) out = as_bool(*n, key);
  }
  void get(const std::string& key, Vector& out) {
    if (auto* n = take(key)) out = as_vector(*n, key);
  }
  void get(const std::string& key, std::array<double, 2>& out) {
    if (auto* n = take(key)) {
      const Vector v = as_vector(*n, key);
      if (v.size() != 2) fail("'" + key + "' must have 2 entries");
      out = {v[0], v[1]};
    }
  }
  template <class Enum, class Parse>
  void get_enum(const std::string& key, Enum& out, Parse parse) {
    if (auto* n = take(key)) {
      try {
        out = parse(as_string(*n, key));
      } catch (const InvalidArgument& e) {
        fail(e.what());
      }
    }
  }

 private:
  void collect(const toml::table& t, const std::string& prefix) {
    for (auto&& [k, v] : t) {
      const std::string key = prefix.empty() ? std::string(k.str()) : prefix + "." + std::string(k.str());
      if (v.is_table() && !kOpaqueTables.contains(key)) {
        collect(*v.as_table(), key);
      } else {
        leaves_[key] = &v;
      }
    }
  }

  std::string source_;
  std::map<std::string, const toml::node*> leaves_;
  std::set<std::string> used_;
};

std::string num(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  std::string s(buf);
  // Keep floats recognisable as floats when re-read.
  if (s.find_first_of(".eEn") == std::string::npos) s += ".0";
  return s;
}

std::string quoted(std::string_view s) {
  std::string out = "\"";
  for (char c : s) {
    if (c == '"' || c == '\\') out += '\\';
    out += c;
  }
  return out + '"';
}

template <class T, class F>
std::string list(const std::vector<T>& v, F fmt) {
  std::string out = "[";
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) out += ", ";
    out += fmt(v[i]);
  }
  return out + "]";
}

std::string numbers(const Vector& v) { return list(v, num); }

template <class I>
std::string integers(const std::vector<I>& v) {
  return list(v, [](I x) { return std::to_string(x); });
}

std::uint64_t splitmix(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

void read_mixture(KeyReader& r, MixtureConfig& m) {
  r.get("mixture.preset", m.preset);
  r.get("mixture.dim", m.dim);
  r.get("mixture.sigma", m.sigma);
  r.get("mixture.separation", m.separation);
  if (auto* n = r.take("mixture.templates")) {
    m.templates.clear();
    for (const toml::node& e : r.as_array(*n, "mixture.templates")) {
      m.templates.push_back(r.as_string(e, "mixture.templates[]"));
    }
  }
  if (auto* n = r.take("mixture.components")) {
    m.weights.clear();
    m.means.clear();
    for (const toml::node& e : r.as_array(*n, "mixture.components")) {
      const toml::table* t = e.as_table();
      if (!t) r.fail("mixture.components entries must be tables {weight, mean}");
      for (auto&& [k, v] : *t) {
        if (k.str() != "weight" && k.str() != "mean") {
          r.fail("unknown key 'mixture.components[]." + std::string(k.str()) + "'");
        }
      }
      const toml::node* w = t->get("weight");
      const toml::node* mu = t->get("mean");
      if (!w || !mu) r.fail("mixture.components entries need weight and mean");
      m.weights.push_back(r.as_double(*w, "mixture.components[].weight"));
      m.means.push_back(r.as_vector(*mu, "mixture.components[].mean"));
    }
  }
  if (auto* n = r.take("mixture.conditions")) {
    const toml::table* t = n->as_table();
    if (!t) r.fail("'mixture.conditions' must be a table of name = [indices]");
    m.conditions.clear();
    for (auto&& [k, v] : *t) {
      std::vector<std::size_t> idx;
      for (std::int64_t i : r.as_ints(v, "mixture.conditions." + std::string(k.str()))) {
        if (i < 0) r.fail("condition indices must be >= 0");
        idx.push_back(static_cast<std::size_t>(i));
      }
      m.conditions[std::string(k.str())] = std::move(idx);
    }
  }
}

void read_distill(KeyReader& r, ExperimentConfig& c) {
  DistillConfig& d = c.distill;
  r.get_enum("distill.loss_kind", d.loss_kind, parse_loss_kind);
  r.get("distill.cfg_scale", d.cfg_scale);
  if (auto* n = r.take("dca.cutoff", "distill.dca_cutoff")) d.dca_cutoff = static_cast<int>(r.as_int(*n, "dca.cutoff"));
  r.get("distill.iterations", d.iterations);
  r.get("distill.batch_size", d.batch_size);
  r.get("distill.scene_lr", d.scene_lr);
  if (auto* n = r.take("operator.lr", "distill.operator_lr")) d.operator_lr = r.as_double(*n, "operator.lr");
  r.get("distill.condition", d.condition);
  r.get("distill.negative_condition", d.negative_condition);
  r.get("distill.neg_weight", d.neg_weight);
  if (auto* n = r.take("weight.kind", "distill.weight")) {
    try {
      d.weight = parse_weight_kind(r.as_string(*n, "weight.kind"));
    } catch (const InvalidArgument& e) {
      r.fail(e.what());
    }
  }
  r.get("distill.t_min", d.t_min);
  r.get("distill.t_max", d.t_max);
  r.get("distill.snapshot_every", d.snapshot_every);
  r.get("distill.vdm_guidance", d.vdm_guidance);
  r.get_enum("distill.operator_input", d.operator_input, parse_operator_input);
  r.get("distill.xt_jacobian", d.xt_jacobian);
}

}  // namespace

ExperimentConfig parse_config(std::string_view text, std::string_view source) {
  toml::table root;
  try {
    root = toml::parse(text, source);
  } catch (const toml::parse_error& e) {
    std::ostringstream msg;
    msg << source << ":" << e.source().begin.line << ":" << e.source().begin.column << ": "
        << e.description();
    throw ConfigError(msg.str());
  }
  KeyReader r(root, std::string(source));
  ExperimentConfig c;

  if (auto* n = r.take("seed", "distill.seed")) {
    c.seed = static_cast<std::uint64_t>(r.non_negative(*n, "seed"));
  }
  r.get("output_dir", c.output_dir);

  r.get_enum("schedule.kind", c.schedule.kind, parse_schedule_kind);
  r.get("schedule.T", c.schedule.T);
  r.get("schedule.beta_min", c.schedule.beta_min);
  r.get("schedule.beta_max", c.schedule.beta_max);

  read_mixture(r, c.mixture);

  if (auto* n = r.take("operator.hidden_dims")) {
    std::vector<std::size_t> dims;
    for (std::int64_t v : r.as_ints(*n, "operator.hidden_dims")) {
      if (v <= 0) r.fail("operator.hidden_dims entries must be >= 1");
      dims.push_back(static_cast<std::size_t>(v));
    }
    c.op.hidden_dims = dims;
  }
  r.get_enum("operator.activation", c.op.activation, parse_activation);
  r.get_enum("operator.init", c.op.init, parse_operator_init);
  r.get_enum("operator.variant", c.op.variant, parse_operator_variant);
  r.get("operator.init_std", c.op.init_std);

  RendererConfig& rc = c.renderer;
  r.get("renderer.kind", rc.kind);
  r.get("renderer.init", rc.init);
  r.get("renderer.init_std", rc.init_std);
  r.get("renderer.height", rc.canvas.height);
  r.get("renderer.width", rc.canvas.width);
  r.get("renderer.channels", rc.canvas.channels);
  r.get("renderer.splats", rc.scene.count);
  r.get("renderer.center_std", rc.scene.center_std);
  r.get("renderer.scale", rc.scene.scale);
  r.get("renderer.scale_jitter", rc.scene.scale_jitter);
  r.get("renderer.color", rc.scene.color);
  r.get("renderer.color_jitter", rc.scene.color_jitter);
  r.get("renderer.opacity", rc.scene.opacity);
  r.get("renderer.translation_min", rc.views.translation_min);
  r.get("renderer.translation_max", rc.views.translation_max);
  r.get("renderer.zoom_min", rc.views.zoom_min);
  r.get("renderer.zoom_max", rc.views.zoom_max);

  read_distill(r, c);

  AnalysisConfig& a = c.analysis;
  if (auto* n = r.take("analysis.t_grid")) {
    a.t_grid.clear();
    for (std::int64_t t : r.as_ints(*n, "analysis.t_grid")) a.t_grid.push_back(static_cast<int>(t));
  }
  r.get("analysis.trials", a.trials);
  r.get_enum("analysis.x0_source", a.x0_source, parse_x0_source);
  r.get("analysis.fixed_x0", a.fixed_x0);
  r.get_enum("analysis.metric", a.metric, parse_correlation_metric);
  r.get("analysis.condition", a.condition);
  r.get("analysis.kl_theta", a.kl_theta);
  if (auto* n = r.take("analysis.seeds")) {
    a.seeds.clear();
    for (std::int64_t s : r.as_ints(*n, "analysis.seeds")) {
      if (s < 0) r.fail("analysis.seeds entries must be >= 0");
      a.seeds.push_back(static_cast<std::uint64_t>(s));
    }
  }
  r.get("analysis.grid_points", a.grid_points);

  if (auto* n = r.take("gradcheck.checks")) {
    c.gradcheck.checks.clear();
    for (const toml::node& e : r.as_array(*n, "gradcheck.checks")) {
      c.gradcheck.checks.push_back(r.as_string(e, "gradcheck.checks[]"));
    }
  }
  r.get("gradcheck.probes", c.gradcheck.probes);

  r.get("sample.count", c.sample.count);
  r.get("sample.condition", c.sample.condition);

  r.finish();
  if (c.mixture.preset == "templates") c.mixture.dim = c.renderer.canvas.size();
  return c;
}

ExperimentConfig load_config(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot read config '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str(), path);
}

std::uint64_t scene_seed(std::uint64_t seed) { return splitmix(seed ^ 0x5343454e45ull); }
std::uint64_t operator_seed(std::uint64_t seed) { return splitmix(seed ^ 0x4f50455241ull); }

NoiseSchedule make_schedule(const ExperimentConfig& cfg) {
  return build_schedule(cfg.schedule.T, cfg.schedule.beta_min, cfg.schedule.beta_max, cfg.schedule.kind);
}

ConditionedMixture make_mixture(const ExperimentConfig& cfg) {
  const MixtureConfig& m = cfg.mixture;
  if (m.preset == "bimodal") {
    if (m.dim == 0) throw ConfigError("mixture.dim must be >= 1");
    return ConditionedMixture(m.dim, m.sigma, {0.5, 0.5},
                              {Vector(m.dim, -m.separation), Vector(m.dim, m.separation)},
                              {{"neg", {0}}, {"pos", {1}}});
  }
  if (m.preset == "single") {
    if (m.dim == 0) throw ConfigError("mixture.dim must be >= 1");
    return ConditionedMixture(m.dim, m.sigma, {1.0}, {Vector(m.dim, 0.0)});
  }
  if (m.preset == "templates") {
    if (m.templates.empty()) throw ConfigError("mixture.templates is empty");
    const Canvas canvas = cfg.renderer.canvas;
    std::vector<Vector> means;
    ConditionedMixture::ConditionMap conds;
    for (std::size_t i = 0; i < m.templates.size(); ++i) {
      means.push_back(make_template_image(m.templates[i], canvas));
      conds[m.templates[i]] = {i};
    }
    const double w = 1.0 / static_cast<double>(m.templates.size());
    Vector weights(m.templates.size(), w);
    // Renormalise so the weights sum to one at double precision.
    double total = 0.0;
    for (double x : weights) total += x;
    weights.back() += 1.0 - total;
    return ConditionedMixture(canvas.size(), m.sigma, weights, means, conds);
  }
  if (m.preset == "custom") {
    return ConditionedMixture(m.dim, m.sigma, m.weights, m.means, m.conditions);
  }
  throw ConfigError("unknown mixture.preset '" + m.preset + "'");
}

OperatorSpec make_operator_spec(const ExperimentConfig& cfg) {
  OperatorSpec spec = default_operator_spec(cfg.mixture.dim);
  if (cfg.op.hidden_dims) spec.hidden_dims = *cfg.op.hidden_dims;
  spec.activation = cfg.op.activation;
  spec.init = cfg.op.init;
  spec.init_std = cfg.op.init_std;
  return spec_for_variant(cfg.op.variant, spec);
}

DegradationOperator make_operator(const ExperimentConfig& cfg) {
  Rng rng(operator_seed(cfg.seed));
  return DegradationOperator::create(make_operator_spec(cfg), rng);
}

Representation make_scene(const ExperimentConfig& cfg) {
  Rng rng(scene_seed(cfg.seed));
  if (cfg.renderer.kind == "pixel") {
    if (!cfg.renderer.init.empty()) return PixelField{cfg.renderer.init};
    Vector theta(cfg.mixture.dim);
    fill_standard_normal(rng, theta);
    for (double& v : theta) v *= cfg.renderer.init_std;
    return PixelField{theta};
  }
  if (cfg.renderer.kind == "splat") return init_scene(cfg.renderer.canvas, cfg.renderer.scene, rng);
  throw ConfigError("unknown renderer.kind '" + cfg.renderer.kind + "'");
}

bool image_regime(const ExperimentConfig& cfg) {
  return cfg.renderer.kind == "splat" || cfg.mixture.preset == "templates";
}

Canvas sample_canvas(const ExperimentConfig& cfg) { return cfg.renderer.canvas; }

void validate(const ExperimentConfig& cfg) {
  try {
    const NoiseSchedule sched = make_schedule(cfg);
    const ConditionedMixture model = make_mixture(cfg);
    if (cfg.mixture.preset != "templates" && model.dim() != cfg.mixture.dim) {
      throw ConfigError("mixture.dim does not match the component means");
    }
    const Representation scene = make_scene(cfg);
    if (output_dim(scene) != model.dim()) {
      throw ConfigError("renderer output dimension " + std::to_string(output_dim(scene)) +
                        " != mixture dimension " + std::to_string(model.dim()));
    }
    if (auto* s = std::get_if<SplatScene>(&scene)) s->validate();
    if (cfg.renderer.kind == "pixel" && cfg.renderer.init.empty() && !(cfg.renderer.init_std >= 0.0)) {
      throw ConfigError("renderer.init_std must be >= 0");
    }
    cfg.renderer.views.validate();
    cfg.distill.validate(sched);
    if (!model.has_condition(cfg.distill.condition)) {
      throw ConfigError("unknown distill.condition '" + cfg.distill.condition + "'");
    }
    if (!cfg.distill.negative_condition.empty() && !model.has_condition(cfg.distill.negative_condition)) {
      throw ConfigError("unknown distill.negative_condition '" + cfg.distill.negative_condition + "'");
    }
    (void)make_operator(cfg);
    for (int t : cfg.analysis.t_grid) sched.require_timestep(t, 1);
    if (cfg.analysis.trials < 30) throw ConfigError("analysis.trials must be >= 30");
    if (!cfg.analysis.condition.empty() && !model.has_condition(cfg.analysis.condition)) {
      throw ConfigError("unknown analysis.condition '" + cfg.analysis.condition + "'");
    }
    if (!cfg.sample.condition.empty() && !model.has_condition(cfg.sample.condition)) {
      throw ConfigError("unknown sample.condition '" + cfg.sample.condition + "'");
    }
  } catch (const ConfigError&) {
    throw;
  } catch (const InvalidArgument& e) {
    throw ConfigError(e.what());
  }
}

std::string manifest(const ExperimentConfig& c) {
  std::ostringstream o;
  o << "seed = " << c.seed << "\n";
  o << "output_dir = " << quoted(c.output_dir) << "\n";

  o << "\n[schedule]\n";
  o << "kind = " << quoted(to_string(c.schedule.kind)) << "\n";
  o << "T = " << c.schedule.T << "\n";
  o << "beta_min = " << num(c.schedule.beta_min) << "\n";
  o << "beta_max = " << num(c.schedule.beta_max) << "\n";

  o << "\n[dca]\ncutoff = " << c.distill.dca_cutoff << "\n";
  o << "\n[weight]\nkind = " << quoted(to_string(c.distill.weight)) << "\n";

  const MixtureConfig& m = c.mixture;
  o << "\n[mixture]\n";
  o << "preset = " << quoted(m.preset) << "\n";
  o << "dim = " << m.dim << "\n";
  o << "sigma = " << num(m.sigma) << "\n";
  o << "separation = " << num(m.separation) << "\n";
  o << "templates = " << list(m.templates, [](const std::string& s) { return quoted(s); }) << "\n";
  if (m.preset == "custom") {
    o << "components = [\n";
    for (std::size_t k = 0; k < m.weights.size(); ++k) {
      o << "  { weight = " << num(m.weights[k]) << ", mean = " << numbers(m.means.at(k)) << " },\n";
    }
    o << "]\n";
    o << "conditions = {";
    bool first = true;
    for (const auto& [name, idx] : m.conditions) {
      o << (first ? " " : ", ") << quoted(name) << " = " << integers(idx);
      first = false;
    }
    o << (first ? "}" : " }") << "\n";
  }

  o << "\n[operator]\n";
  const OperatorSpec spec = make_operator_spec(c);
  std::vector<std::size_t> hidden = c.op.hidden_dims ? *c.op.hidden_dims : default_operator_spec(m.dim).hidden_dims;
  o << "hidden_dims = " << integers(hidden) << "\n";
  o << "activation = " << quoted(to_string(c.op.activation)) << "\n";
  o << "init = " << quoted(to_string(c.op.init)) << "\n";
  o << "variant = " << quoted(to_string(c.op.variant)) << "\n";
  o << "init_std = " << num(c.op.init_std) << "\n";
  o << "lr = " << num(c.distill.operator_lr) << "\n";
  (void)spec;

  const RendererConfig& r = c.renderer;
  o << "\n[renderer]\n";
  o << "kind = " << quoted(r.kind) << "\n";
  o << "init = " << numbers(r.init) << "\n";
  o << "init_std = " << num(r.init_std) << "\n";
  o << "height = " << r.canvas.height << "\n";
  o << "width = " << r.canvas.width << "\n";
  o << "channels = " << r.canvas.channels << "\n";
  o << "splats = " << r.scene.count << "\n";
  o << "center_std = " << num(r.scene.center_std) << "\n";
  o << "scale = " << num(r.scene.scale) << "\n";
  o << "scale_jitter = " << num(r.scene.scale_jitter) << "\n";
  o << "color = " << num(r.scene.color) << "\n";
  o << "color_jitter = " << num(r.scene.color_jitter) << "\n";
  o << "opacity = " << num(r.scene.opacity) << "\n";
  o << "translation_min = " << numbers({r.views.translation_min[0], r.views.translation_min[1]}) << "\n";
  o << "translation_max = " << numbers({r.views.translation_max[0], r.views.translation_max[1]}) << "\n";
  o << "zoom_min = " << num(r.views.zoom_min) << "\n";
  o << "zoom_max = " << num(r.views.zoom_max) << "\n";

  const DistillConfig& d = c.distill;
  o << "\n[distill]\n";
  o << "loss_kind = " << quoted(to_string(d.loss_kind)) << "\n";
  o << "cfg_scale = " << num(d.cfg_scale) << "\n";
  o << "iterations = " << d.iterations << "\n";
  o << "batch_size = " << d.batch_size << "\n";
  o << "scene_lr = " << num(d.scene_lr) << "\n";
  o << "condition = " << quoted(d.condition) << "\n";
  o << "negative_condition = " << quoted(d.negative_condition) << "\n";
  o << "neg_weight = " << num(d.neg_weight) << "\n";
  o << "t_min = " << d.t_min << "\n";
  o << "t_max = " << d.t_max << "\n";
  o << "snapshot_every = " << d.snapshot_every << "\n";
  o << "vdm_guidance = " << (d.vdm_guidance ? "true" : "false") << "\n";
  o << "operator_input = " << quoted(to_string(d.operator_input)) << "\n";
  o << "xt_jacobian = " << (d.xt_jacobian ? "true" : "false") << "\n";

  const AnalysisConfig& a = c.analysis;
  o << "\n[analysis]\n";
  o << "t_grid = " << integers(a.t_grid) << "\n";
  o << "trials = " << a.trials << "\n";
  o << "x0_source = " << quoted(to_string(a.x0_source)) << "\n";
  o << "fixed_x0 = " << numbers(a.fixed_x0) << "\n";
  o << "metric = " << quoted(to_string(a.metric)) << "\n";
  o << "condition = " << quoted(a.condition) << "\n";
  o << "kl_theta = " << numbers(a.kl_theta) << "\n";
  o << "seeds = " << integers(a.seeds) << "\n";
  o << "grid_points = " << a.grid_points << "\n";

  o << "\n[gradcheck]\n";
  o << "checks = " << list(c.gradcheck.checks, [](const std::string& s) { return quoted(s); }) << "\n";
  o << "probes = " << c.gradcheck.probes << "\n";

  o << "\n[sample]\n";
  o << "count = " << c.sample.count << "\n";
  o << "condition = " << quoted(c.sample.condition) << "\n";
  return o.str();
}

}  // namespace sdlab::cli
