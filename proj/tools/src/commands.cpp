#include "commands.hpp"

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <ostream>

#include "CLI11.hpp"

namespace sdlab::cli {

namespace fs = std::filesystem;

namespace {

std::ofstream open_out(const fs::path& p) {
  std::ofstream f(p, std::ios::binary);
  if (!f) throw ConfigError("cannot write " + p.string());
  return f;
}

void make_dir(const fs::path& p) {
  std::error_code ec;
  fs::create_directories(p, ec);
  if (ec) throw ConfigError("cannot create output directory " + p.string() + ": " + ec.message());
}

std::string row(std::span<const double> v) {
  std::string s;
  char buf[40];
  for (std::size_t i = 0; i < v.size(); ++i) {
    std::snprintf(buf, sizeof buf, "%s%.17g", i ? "," : "", v[i]);
    s += buf;
  }
  return s;
}

std::string header(const char* prefix, std::size_t n) {
  std::string s;
  for (std::size_t i = 0; i < n; ++i) s += (i ? "," : "") + std::string(prefix) + std::to_string(i);
  return s;
}

const char* image_ext(const Canvas& c) { return c.channels == 3 ? ".ppm" : ".pgm"; }

std::string numbered(const char* stem, long long i, int width, const char* ext) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%s%0*lld%s", stem, width, i, ext);
  return buf;
}

void save_representation(const Representation& rep, const fs::path& dir, const std::string& stem) {
  if (const auto* s = std::get_if<SplatScene>(&rep)) {
    save_scene(*s, (dir / (stem + ".splat")).string());
    if (s->canvas.channels == 1 || s->canvas.channels == 3) {
      write_image((dir / (stem + image_ext(s->canvas))).string(), render(*s, View{}).values, s->canvas);
    }
  }
}

// Wraps a command body so config problems and numerical aborts map to the
// documented exit codes.
template <class F>
int guarded(std::ostream& err, F&& body) {
  try {
    return body();
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const NumericalAbort& e) {
    err << "numerical abort: " << e.what() << "\n";
    return kExitNumerical;
  } catch (const InvalidArgument& e) {
    err << "invalid argument: " << e.what() << "\n";
    return kExitConfig;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitCheckFailed;
  }
}

}  // namespace

unsigned resolve_threads(const std::optional<unsigned>& flag) {
  if (flag && *flag > 0) return *flag;
  if (const char* env = std::getenv("SDLAB_THREADS")) {
    char* end = nullptr;
    const long v = std::strtol(env, &end, 10);
    if (end != env && *end == '\0' && v > 0) return static_cast<unsigned>(v);
  }
  return default_thread_count();
}

ExperimentConfig resolve_config(const CliOptions& opts) {
  ExperimentConfig cfg = opts.config_path.empty() ? ExperimentConfig{} : load_config(opts.config_path);
  if (opts.seed) cfg.seed = *opts.seed;
  if (opts.out) cfg.output_dir = *opts.out;
  cfg.distill.seed = cfg.seed;
  cfg.distill.threads = resolve_threads(opts.threads);
  validate(cfg);
  return cfg;
}

int cmd_distill(const CliOptions& opts, std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    const ExperimentConfig cfg = resolve_config(opts);
    const fs::path dir(cfg.output_dir);
    make_dir(dir);
    {
      auto m = open_out(dir / "manifest");
      m << manifest(cfg);
    }
    const NoiseSchedule sched = make_schedule(cfg);
    const ConditionedMixture model = make_mixture(cfg);
    std::optional<DegradationOperator> op;
    if (cfg.distill.loss_kind == LossKind::vdm) op = make_operator(cfg);

    auto csv = open_out(dir / "trajectory.csv");
    csv << "iter,t,loss,grad_norm,op_loss,wall_ms\n";
    char line[256];
    const bool timing = opts.timing;
    auto observer = [&](const TrajectoryRecord& r) {
      std::snprintf(line, sizeof line, "%d,%d,%.17g,%.17g,%.17g,%.17g\n", r.iter, r.t, r.loss, r.grad_norm,
                    r.op_loss, timing ? r.wall_ms : 0.0);
      csv << line;
    };

    DistillResult res;
    try {
      res = run_distillation(cfg.distill, model, sched, make_scene(cfg), std::move(op), cfg.renderer.views,
                             observer);
    } catch (const NumericalAbort&) {
      csv.flush();
      throw;
    }
    csv.close();

    const Trajectory& traj = res.trajectory;
    if (!traj.snapshots.empty()) {
      if (std::holds_alternative<SplatScene>(res.scene)) {
        const fs::path snap = dir / "snapshots";
        make_dir(snap);
        SplatScene s = std::get<SplatScene>(res.scene);
        for (const Snapshot& sn : traj.snapshots) {
          unflatten(s, sn.parameters);
          save_representation(s, snap, numbered("scene_", sn.iter, 6, ""));
        }
      } else {
        auto f = open_out(dir / "snapshots.csv");
        f << "iter," << header("theta", model.dim()) << "\n";
        for (const Snapshot& sn : traj.snapshots) f << sn.iter << "," << row(sn.parameters) << "\n";
      }
    }
    if (std::holds_alternative<SplatScene>(res.scene)) {
      save_representation(res.scene, dir, "scene");
    } else {
      auto f = open_out(dir / "theta.csv");
      f << header("theta", model.dim()) << "\n" << row(parameters(res.scene)) << "\n";
    }
    if (res.op) save_operator(*res.op, (dir / "operator.vdmop").string());

    const TrajectoryRecord& last = traj.records.back();
    out << "distill: " << traj.records.size() << " iterations, final loss " << last.loss << ", grad_norm "
        << last.grad_norm << "; wrote " << dir.string() << "\n";
    return kExitOk;
  });
}

int cmd_sample(const CliOptions& opts, std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    const ExperimentConfig cfg = resolve_config(opts);
    const std::size_t count = opts.count.value_or(cfg.sample.count);
    std::string cond = opts.condition.value_or(cfg.sample.condition);
    if (cond.empty()) cond = cfg.distill.condition;
    const NoiseSchedule sched = make_schedule(cfg);
    const ConditionedMixture model = make_mixture(cfg);
    if (!model.has_condition(cond)) throw ConfigError("unknown condition '" + cond + "'");
    if (count == 0) {
      out << "sample: nothing to do\n";
      return kExitOk;
    }
    const fs::path dir(cfg.output_dir);
    make_dir(dir);
    Rng rng(cfg.seed);
    std::vector<Vector> samples;
    for (std::size_t i = 0; i < count; ++i) samples.push_back(ancestral_sample(model, cond, sched, rng).values);
    if (image_regime(cfg)) {
      const Canvas canvas = sample_canvas(cfg);
      if (canvas.size() != model.dim()) throw ConfigError("canvas does not match mixture dimension");
      for (std::size_t i = 0; i < count; ++i) {
        write_image((dir / numbered("sample_", static_cast<long long>(i), 3, image_ext(canvas))).string(),
                    samples[i], canvas);
      }
    } else {
      auto f = open_out(dir / "samples.csv");
      f << header("x", model.dim()) << "\n";
      for (const Vector& s : samples) f << row(s) << "\n";
    }
    out << "sample: wrote " << count << " samples to " << dir.string() << "\n";
    return kExitOk;
  });
}

int cmd_analyze(const CliOptions& opts, std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    const std::string& which = opts.which;
    if (which != "correlation" && which != "variance" && which != "kl" && which != "ablation") {
      throw ConfigError("unknown --which '" + which + "' (correlation, variance, kl, ablation)");
    }
    const ExperimentConfig cfg = resolve_config(opts);
    const NoiseSchedule sched = make_schedule(cfg);
    const ConditionedMixture model = make_mixture(cfg);
    const AnalysisConfig& a = cfg.analysis;
    const std::string cond = a.condition.empty() ? cfg.distill.condition : a.condition;
    const fs::path dir(cfg.output_dir);
    make_dir(dir);

    if (which == "correlation" || which == "variance") {
      CurveOptions co;
      co.condition = cond;
      co.x0_source = a.x0_source;
      co.fixed_x0 = a.fixed_x0;
      co.trials = a.trials;
      co.seed = cfg.seed;
      co.threads = cfg.distill.threads;
      const CurveReport rep = which == "correlation" ? correlation_curve(model, sched, a.t_grid, co, a.metric)
                                                     : variance_curve(model, sched, a.t_grid, co);
      auto f = open_out(dir / (which + ".csv"));
      write_curve_csv(f, rep);
      write_curve_csv(out, rep);
    } else if (which == "kl") {
      if (model.dim() > 2) throw ConfigError("kl needs mixture dimension <= 2");
      const Vector theta = a.kl_theta.empty() ? Vector(model.dim(), 0.0) : a.kl_theta;
      if (theta.size() != model.dim()) throw ConfigError("analysis.kl_theta has the wrong length");
      GridSpec grid;
      grid.points = a.grid_points;
      auto f = open_out(dir / "kl.csv");
      f << "t,kl\n";
      out << "t,kl\n";
      char buf[64];
      for (int t : a.t_grid) {
        const double kl = kl_quadrature(theta, model, sched, t, cond, grid, cfg.distill.threads);
        std::snprintf(buf, sizeof buf, "%d,%.17g\n", t, kl);
        f << buf;
        out << buf;
      }
    } else {
      if (cfg.renderer.kind != "pixel") throw ConfigError("ablation runs on the pixel renderer");
      std::vector<std::uint64_t> seeds = a.seeds.empty() ? std::vector<std::uint64_t>{cfg.seed} : a.seeds;
      std::vector<AblationRow> rows;
      for (std::uint64_t s : seeds) {
        ExperimentConfig run = cfg;
        run.seed = s;
        run.distill.seed = s;
        run.distill.loss_kind = LossKind::vdm;
        const Vector theta0 = parameters(make_scene(run));
        OperatorConfig base_cfg = cfg.op;
        base_cfg.variant = OperatorVariant::nonlinear;
        run.op = base_cfg;
        const auto r = ablation_degradation(run.distill, model, sched, make_operator_spec(run), theta0);
        rows.insert(rows.end(), r.begin(), r.end());
      }
      auto f = open_out(dir / "ablation.csv");
      write_ablation_csv(f, rows);
      write_ablation_csv(out, rows);
    }
    return kExitOk;
  });
}

int cmd_gradcheck(const CliOptions& opts, std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    const ExperimentConfig cfg = resolve_config(opts);
    const auto& checks = cfg.gradcheck.checks;
    if (checks.empty()) throw ConfigError("gradcheck.checks is empty");
    for (const std::string& c : checks) {
      if (c != "score" && c != "cfg" && c != "renderer" && c != "operator") {
        throw ConfigError("unknown check '" + c + "'");
      }
    }
    const std::size_t probes = cfg.gradcheck.probes;
    if (probes == 0) throw ConfigError("gradcheck.probes must be >= 1");
    bool all = true;
    char buf[160];
    std::snprintf(buf, sizeof buf, "%-10s %7s %14s %10s  %s\n", "check", "probes", "max_rel_err", "tol", "result");
    out << buf;
    for (const std::string& c : checks) {
      CheckResult r;
      if (c == "score") r = check_score(cfg, probes, cfg.seed);
      if (c == "cfg") r = check_cfg(cfg, probes, cfg.seed);
      if (c == "renderer") r = check_renderer(probes, cfg.seed, opts.corrupt_render_grad);
      if (c == "operator") r = check_operator(probes, cfg.seed);
      std::snprintf(buf, sizeof buf, "%-10s %7zu %14.3e %10.1e  %s\n", r.name.c_str(), r.probes, r.max_error,
                    r.tolerance, r.passed ? "PASS" : "FAIL");
      out << buf;
      all = all && r.passed;
    }
    return all ? kExitOk : kExitCheckFailed;
  });
}

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"score distillation lab"};
  app.require_subcommand(1);
  app.fallthrough();
  CliOptions opts;
  std::uint64_t seed = 0;
  std::string outdir;
  unsigned threads = 0;
  app.add_option("--config", opts.config_path, "config file (TOML)");
  auto* seed_opt = app.add_option("--seed", seed, "override the config seed");
  auto* out_opt = app.add_option("--out", outdir, "output directory");
  auto* threads_opt = app.add_option("--threads", threads, "worker threads (default: SDLAB_THREADS or all cores)")
                          ->check(CLI::PositiveNumber);

  auto* distill = app.add_subcommand("distill", "run the distillation loop");
  distill->add_flag("--timing", opts.timing, "record wall-clock time per iteration");
  auto* sample = app.add_subcommand("sample", "draw reference samples by ancestral sampling");
  std::size_t count = 0;
  std::string condition;
  auto* count_opt = sample->add_option("--count", count, "number of samples");
  auto* cond_opt = sample->add_option("--condition", condition, "condition name");
  auto* analyze = app.add_subcommand("analyze", "correlation / variance / kl / ablation reports");
  analyze->add_option("--which", opts.which, "correlation, variance, kl or ablation")->required();
  auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference checks of every analytic gradient");
  gradcheck->add_flag("--corrupt-render-grad", opts.corrupt_render_grad, "test hook: perturb the renderer gradient");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << e.what() << "\n";
    return kExitConfig;
  }
  if (*seed_opt) opts.seed = seed;
  if (*out_opt) opts.out = outdir;
  if (*threads_opt) opts.threads = threads;
  if (*count_opt) opts.count = count;
  if (*cond_opt) opts.condition = condition;

  if (distill->parsed()) return cmd_distill(opts, out, err);
  if (sample->parsed()) return cmd_sample(opts, out, err);
  if (analyze->parsed()) return cmd_analyze(opts, out, err);
  return cmd_gradcheck(opts, out, err);
}

}  // namespace sdlab::cli
