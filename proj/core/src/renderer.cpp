#include "sdlab/renderer.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>

#include "sdlab/binary_io.hpp"

namespace sdlab {

namespace {

constexpr std::string_view kSceneMagic = "SPLAT1";
constexpr double kTaperStart = 16.0;
constexpr double kTaperEnd = 25.0;

// 6u^3 - 8u^4 + 3u^5: P(0)=P'(0)=P''(0)=0, P(1)=P'(1)=1, P''(1)=0.
double blend(double u) { return u * u * u * (6.0 + u * (-8.0 + 3.0 * u)); }
double blend_derivative(double u) { return u * u * (18.0 + u * (-32.0 + 15.0 * u)); }

double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

struct SplatGeometry {
  double cx, cy;      // centre in scene coordinates
  double cos_a, sin_a;
  double inv_s0_sq, inv_s1_sq;
  double opacity;
};

SplatGeometry geometry(const Splat& s) {
  const double s0 = std::exp(s.log_scale[0]);
  const double s1 = std::exp(s.log_scale[1]);
  return {s.mu[0], s.mu[1], std::cos(s.angle), std::sin(s.angle),
          1.0 / (s0 * s0), 1.0 / (s1 * s1), sigmoid(s.opacity_logit)};
}

// Pixel index range [lo, hi) whose centres may fall inside the 5-sigma
// support of the splat once drawn under the view.
struct PixelBox {
  std::size_t row_lo, row_hi, col_lo, col_hi;
};

PixelBox support_box(const Splat& s, const View& view, const Canvas& canvas) {
  const double radius = 5.0 * std::exp(std::max(s.log_scale[0], s.log_scale[1])) * view.zoom;
  const double cx = 0.5 + view.zoom * (s.mu[0] - 0.5) + view.translation[0];
  const double cy = 0.5 + view.zoom * (s.mu[1] - 0.5) + view.translation[1];
  auto range = [](double c, double r, std::size_t n) {
    const double lo = std::floor((c - r) * static_cast<double>(n) - 0.5) - 1.0;
    const double hi = std::ceil((c + r) * static_cast<double>(n) - 0.5) + 2.0;
    const double nn = static_cast<double>(n);
    const auto a = static_cast<std::size_t>(std::clamp(lo, 0.0, nn));
    const auto b = static_cast<std::size_t>(std::clamp(hi, 0.0, nn));
    return std::pair{a, b};
  };
  const auto [c0, c1] = range(cx, radius, canvas.width);
  const auto [r0, r1] = range(cy, radius, canvas.height);
  return {r0, r1, c0, c1};
}

// Pixel centre mapped into scene coordinates under the view.
std::array<double, 2> scene_point(std::size_t row, std::size_t col, const View& view,
                                  const Canvas& canvas) {
  const double px = (static_cast<double>(col) + 0.5) / static_cast<double>(canvas.width);
  const double py = (static_cast<double>(row) + 0.5) / static_cast<double>(canvas.height);
  return {0.5 + (px - 0.5 - view.translation[0]) / view.zoom,
          0.5 + (py - 0.5 - view.translation[1]) / view.zoom};
}

Vector accumulate(const SplatScene& scene, const View& view) {
  const Canvas& cv = scene.canvas;
  Vector sum(cv.size(), 0.0);
  for (const Splat& s : scene.splats) {
    const SplatGeometry g = geometry(s);
    const PixelBox box = support_box(s, view, cv);
    for (std::size_t r = box.row_lo; r < box.row_hi; ++r) {
      for (std::size_t c = box.col_lo; c < box.col_hi; ++c) {
        const auto p = scene_point(r, c, view, cv);
        const double dx = p[0] - g.cx;
        const double dy = p[1] - g.cy;
        const double u0 = g.cos_a * dx + g.sin_a * dy;
        const double u1 = -g.sin_a * dx + g.cos_a * dy;
        const double q = u0 * u0 * g.inv_s0_sq + u1 * u1 * g.inv_s1_sq;
        const double k = splat_kernel(q);
        if (k == 0.0) continue;
        double* px = sum.data() + (r * cv.width + c) * cv.channels;
        for (std::size_t ch = 0; ch < cv.channels; ++ch) px[ch] += g.opacity * s.color[ch] * k;
      }
    }
  }
  return sum;
}

}  // namespace

void SplatScene::validate() const {
  if (canvas.height == 0 || canvas.width == 0 || canvas.channels == 0) {
    throw InvalidArgument("splat scene: empty canvas");
  }
  for (const Splat& s : splats) {
    require_dim(s.color.size(), canvas.channels, "splat color");
    const double vals[] = {s.mu[0], s.mu[1], s.log_scale[0], s.log_scale[1], s.angle, s.opacity_logit};
    for (double v : vals) {
      if (!std::isfinite(v)) throw InvalidArgument("splat scene: non-finite parameter");
    }
  }
}

void ViewSampler::validate() const {
  for (int i = 0; i < 2; ++i) {
    if (translation_min[i] > translation_max[i]) throw InvalidArgument("view sampler: empty translation box");
  }
  if (!(zoom_min > 0.0 && zoom_min <= zoom_max)) throw InvalidArgument("view sampler: bad zoom range");
}

View sample_view(const ViewSampler& sampler, Rng& rng) {
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const double u0 = unit(rng);
  const double u1 = unit(rng);
  const double u2 = unit(rng);
  View v;
  v.translation[0] = sampler.translation_min[0] + u0 * (sampler.translation_max[0] - sampler.translation_min[0]);
  v.translation[1] = sampler.translation_min[1] + u1 * (sampler.translation_max[1] - sampler.translation_min[1]);
  const double lo = std::log(sampler.zoom_min);
  const double hi = std::log(sampler.zoom_max);
  v.zoom = sampler.zoom_min == sampler.zoom_max ? sampler.zoom_min : std::exp(lo + u2 * (hi - lo));
  return v;
}

double smooth_clamp(double x) {
  constexpr double h = kClampMargin;
  if (x <= 0.0) return 0.0;
  if (x >= 1.0) return 1.0;
  if (x < h) return h * blend(x / h);
  if (x > 1.0 - h) return 1.0 - h * blend((1.0 - x) / h);
  return x;
}

double smooth_clamp_derivative(double x) {
  constexpr double h = kClampMargin;
  if (x <= 0.0 || x >= 1.0) return 0.0;
  if (x < h) return blend_derivative(x / h);
  if (x > 1.0 - h) return blend_derivative((1.0 - x) / h);
  return 1.0;
}

double splat_kernel(double q) {
  if (q >= kTaperEnd) return 0.0;
  const double g = std::exp(-0.5 * q);
  if (q <= kTaperStart) return g;
  const double s = (q - kTaperStart) / (kTaperEnd - kTaperStart);
  const double window = 1.0 - s * s * s * (10.0 + s * (-15.0 + 6.0 * s));
  return g * window;
}

double splat_kernel_derivative(double q) {
  if (q >= kTaperEnd) return 0.0;
  const double g = std::exp(-0.5 * q);
  if (q <= kTaperStart) return -0.5 * g;
  const double s = (q - kTaperStart) / (kTaperEnd - kTaperStart);
  const double window = 1.0 - s * s * s * (10.0 + s * (-15.0 + 6.0 * s));
  const double dwindow = -30.0 * s * s * (1.0 - s) * (1.0 - s) / (kTaperEnd - kTaperStart);
  return g * (-0.5 * window + dwindow);
}

Sample render(const SplatScene& scene, const View& view) {
  Vector sum = accumulate(scene, view);
  for (double& v : sum) v = smooth_clamp(v);
  return {SampleRole::clean, std::move(sum)};
}

Vector render_grad(const SplatScene& scene, const View& view, std::span<const double> upstream) {
  const Canvas& cv = scene.canvas;
  require_dim(upstream.size(), cv.size(), "render_grad upstream");
  Vector dsum = accumulate(scene, view);
  for (std::size_t i = 0; i < dsum.size(); ++i) dsum[i] = upstream[i] * smooth_clamp_derivative(dsum[i]);

  const std::size_t stride = scene.params_per_splat();
  const std::size_t nch = cv.channels;
  Vector grad(scene.param_count(), 0.0);
  for (std::size_t i = 0; i < scene.splats.size(); ++i) {
    const Splat& s = scene.splats[i];
    const SplatGeometry g = geometry(s);
    const PixelBox box = support_box(s, view, cv);
    double g_mu0 = 0, g_mu1 = 0, g_ls0 = 0, g_ls1 = 0, g_angle = 0, g_op = 0;
    Vector g_color(nch, 0.0);
    for (std::size_t r = box.row_lo; r < box.row_hi; ++r) {
      for (std::size_t c = box.col_lo; c < box.col_hi; ++c) {
        const auto p = scene_point(r, c, view, cv);
        const double dx = p[0] - g.cx;
        const double dy = p[1] - g.cy;
        const double u0 = g.cos_a * dx + g.sin_a * dy;
        const double u1 = -g.sin_a * dx + g.cos_a * dy;
        const double a0 = u0 * g.inv_s0_sq;
        const double a1 = u1 * g.inv_s1_sq;
        const double q = u0 * a0 + u1 * a1;
        if (q >= kTaperEnd) continue;
        const double k = splat_kernel(q);
        const double dk = splat_kernel_derivative(q);
        const double* up = dsum.data() + (r * cv.width + c) * nch;
        // sum over channels of dL/dS_c * color_c
        double weighted = 0.0;
        for (std::size_t ch = 0; ch < nch; ++ch) {
          weighted += up[ch] * s.color[ch];
          g_color[ch] += up[ch] * g.opacity * k;
        }
        if (weighted == 0.0) continue;
        g_op += weighted * k;
        // dL/dq
        const double gq = weighted * g.opacity * dk;
        // dq/dmu = -2 R diag(1/s^2) u
        g_mu0 += gq * (-2.0) * (g.cos_a * a0 - g.sin_a * a1);
        g_mu1 += gq * (-2.0) * (g.sin_a * a0 + g.cos_a * a1);
        g_ls0 += gq * (-2.0) * u0 * a0;
        g_ls1 += gq * (-2.0) * u1 * a1;
        g_angle += gq * 2.0 * u0 * u1 * (g.inv_s0_sq - g.inv_s1_sq);
      }
    }
    double* out = grad.data() + i * stride;
    out[0] = g_mu0;
    out[1] = g_mu1;
    out[2] = g_ls0;
    out[3] = g_ls1;
    out[4] = g_angle;
    for (std::size_t ch = 0; ch < nch; ++ch) out[5 + ch] = g_color[ch];
    out[5 + nch] = g_op * g.opacity * (1.0 - g.opacity);
  }
  return grad;
}

Vector flatten(const SplatScene& scene) {
  Vector out;
  out.reserve(scene.param_count());
  for (const Splat& s : scene.splats) {
    out.push_back(s.mu[0]);
    out.push_back(s.mu[1]);
    out.push_back(s.log_scale[0]);
    out.push_back(s.log_scale[1]);
    out.push_back(s.angle);
    out.insert(out.end(), s.color.begin(), s.color.end());
    out.push_back(s.opacity_logit);
  }
  return out;
}

void unflatten(SplatScene& scene, std::span<const double> params) {
  require_dim(params.size(), scene.param_count(), "splat parameters");
  const std::size_t nch = scene.canvas.channels;
  std::size_t k = 0;
  for (Splat& s : scene.splats) {
    s.mu = {params[k], params[k + 1]};
    s.log_scale = {params[k + 2], params[k + 3]};
    s.angle = params[k + 4];
    s.color.assign(params.begin() + static_cast<std::ptrdiff_t>(k + 5),
                   params.begin() + static_cast<std::ptrdiff_t>(k + 5 + nch));
    s.opacity_logit = params[k + 5 + nch];
    k += 6 + nch;
  }
}

Sample identity_render(std::span<const double> theta) {
  return {SampleRole::clean, Vector(theta.begin(), theta.end())};
}

Vector identity_grad(std::span<const double> upstream) { return Vector(upstream.begin(), upstream.end()); }

SplatScene init_scene(const Canvas& canvas, const SceneInit& init, Rng& rng) {
  if (!(init.scale > 0.0)) throw InvalidArgument("scene init: scale must be > 0");
  if (!(init.opacity > 0.0 && init.opacity < 1.0)) throw InvalidArgument("scene init: opacity in (0,1)");
  SplatScene scene;
  scene.canvas = canvas;
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const double logit = std::log(init.opacity / (1.0 - init.opacity));
  for (std::size_t i = 0; i < init.count; ++i) {
    Splat s;
    s.mu = {0.5 + init.center_std * normal(rng), 0.5 + init.center_std * normal(rng)};
    const double base = std::log(init.scale);
    s.log_scale = {base + init.scale_jitter * normal(rng), base + init.scale_jitter * normal(rng)};
    s.angle = std::numbers::pi * unit(rng);
    s.color.resize(canvas.channels);
    for (double& c : s.color) c = init.color + init.color_jitter * normal(rng);
    s.opacity_logit = logit;
    scene.splats.push_back(std::move(s));
  }
  return scene;
}

std::size_t output_dim(const Representation& rep) {
  return std::visit(
      [](const auto& r) -> std::size_t {
        if constexpr (std::is_same_v<std::decay_t<decltype(r)>, PixelField>) {
          return r.theta.size();
        } else {
          return r.canvas.size();
        }
      },
      rep);
}

std::size_t param_count(const Representation& rep) {
  return std::visit(
      [](const auto& r) -> std::size_t {
        if constexpr (std::is_same_v<std::decay_t<decltype(r)>, PixelField>) {
          return r.theta.size();
        } else {
          return r.param_count();
        }
      },
      rep);
}

Sample render(const Representation& rep, const View& view) {
  if (const auto* px = std::get_if<PixelField>(&rep)) return identity_render(px->theta);
  return render(std::get<SplatScene>(rep), view);
}

Vector render_grad(const Representation& rep, const View& view, std::span<const double> upstream) {
  if (const auto* px = std::get_if<PixelField>(&rep)) {
    require_dim(upstream.size(), px->theta.size(), "identity_grad upstream");
    return identity_grad(upstream);
  }
  return render_grad(std::get<SplatScene>(rep), view, upstream);
}

Vector parameters(const Representation& rep) {
  if (const auto* px = std::get_if<PixelField>(&rep)) return px->theta;
  return flatten(std::get<SplatScene>(rep));
}

void set_parameters(Representation& rep, std::span<const double> params) {
  if (auto* px = std::get_if<PixelField>(&rep)) {
    require_dim(params.size(), px->theta.size(), "pixel parameters");
    std::copy(params.begin(), params.end(), px->theta.begin());
    return;
  }
  unflatten(std::get<SplatScene>(rep), params);
}

void write_image(std::ostream& out, std::span<const double> pixels, const Canvas& canvas) {
  require_dim(pixels.size(), canvas.size(), "write_image");
  if (canvas.channels != 1 && canvas.channels != 3) {
    throw InvalidArgument("write_image: only 1 or 3 channels are supported");
  }
  out << (canvas.channels == 3 ? "P6" : "P5") << '\n'
      << canvas.width << ' ' << canvas.height << '\n'
      << 255 << '\n';
  std::string bytes(pixels.size(), '\0');
  for (std::size_t i = 0; i < pixels.size(); ++i) {
    const double v = std::clamp(pixels[i], 0.0, 1.0);
    bytes[i] = static_cast<char>(static_cast<unsigned char>(std::lround(v * 255.0)));
  }
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error("write_image: write failed");
}

void write_image(const std::string& path, std::span<const double> pixels, const Canvas& canvas) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot open " + path + " for writing");
  write_image(out, pixels, canvas);
}

void save_scene(const SplatScene& scene, std::ostream& out) {
  binary::write_magic(out, kSceneMagic);
  binary::write_i32(out, static_cast<std::int32_t>(scene.splats.size()));
  binary::write_i32(out, static_cast<std::int32_t>(scene.canvas.height));
  binary::write_i32(out, static_cast<std::int32_t>(scene.canvas.width));
  binary::write_i32(out, static_cast<std::int32_t>(scene.canvas.channels));
  for (double v : flatten(scene)) binary::write_f64(out, v);
  if (!out) throw Error("save_scene: write failed");
}

SplatScene load_scene(std::istream& in) {
  binary::expect_magic(in, kSceneMagic);
  const std::int32_t n = binary::read_i32(in);
  const std::int32_t h = binary::read_i32(in);
  const std::int32_t w = binary::read_i32(in);
  const std::int32_t c = binary::read_i32(in);
  if (n < 0 || h <= 0 || w <= 0 || c <= 0) throw Error("load_scene: bad header");
  SplatScene scene;
  scene.canvas = {static_cast<std::size_t>(h), static_cast<std::size_t>(w), static_cast<std::size_t>(c)};
  scene.splats.resize(static_cast<std::size_t>(n));
  for (Splat& s : scene.splats) s.color.resize(scene.canvas.channels);
  Vector params(scene.param_count());
  for (double& v : params) v = binary::read_f64(in);
  unflatten(scene, params);
  return scene;
}

void save_scene(const SplatScene& scene, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot open " + path + " for writing");
  save_scene(scene, out);
}

SplatScene load_scene(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path);
  return load_scene(in);
}

Vector make_template_image(std::string_view name, const Canvas& canvas) {
  std::function<bool(double, double)> inside;
  std::array<double, 3> tint{0.9, 0.9, 0.9};
  if (name == "disc") {
    inside = [](double x, double y) { return std::hypot(x - 0.5, y - 0.5) < 0.28; };
    tint = {0.9, 0.3, 0.2};
  } else if (name == "ring") {
    inside = [](double x, double y) {
      const double r = std::hypot(x - 0.5, y - 0.5);
      return r > 0.2 && r < 0.36;
    };
    tint = {0.2, 0.8, 0.3};
  } else if (name == "square") {
    inside = [](double x, double y) { return std::abs(x - 0.5) < 0.25 && std::abs(y - 0.5) < 0.25; };
    tint = {0.2, 0.3, 0.9};
  } else if (name == "cross") {
    inside = [](double x, double y) {
      const double ax = std::abs(x - 0.5);
      const double ay = std::abs(y - 0.5);
      return (ax < 0.09 && ay < 0.36) || (ay < 0.09 && ax < 0.36);
    };
    tint = {0.9, 0.8, 0.2};
  } else if (name == "bar_h") {
    inside = [](double x, double y) { return std::abs(x - 0.5) < 0.36 && std::abs(y - 0.5) < 0.1; };
    tint = {0.8, 0.2, 0.8};
  } else if (name == "bar_v") {
    inside = [](double x, double y) { return std::abs(x - 0.5) < 0.1 && std::abs(y - 0.5) < 0.36; };
    tint = {0.2, 0.8, 0.8};
  } else {
    throw InvalidArgument("unknown template '" + std::string(name) + "'");
  }
  constexpr int kSuper = 4;
  Vector img(canvas.size(), 0.0);
  for (std::size_t r = 0; r < canvas.height; ++r) {
    for (std::size_t c = 0; c < canvas.width; ++c) {
      int hits = 0;
      for (int sy = 0; sy < kSuper; ++sy) {
        for (int sx = 0; sx < kSuper; ++sx) {
          const double x = (static_cast<double>(c) + (sx + 0.5) / kSuper) / static_cast<double>(canvas.width);
          const double y = (static_cast<double>(r) + (sy + 0.5) / kSuper) / static_cast<double>(canvas.height);
          hits += inside(x, y) ? 1 : 0;
        }
      }
      const double cover = static_cast<double>(hits) / (kSuper * kSuper);
      for (std::size_t ch = 0; ch < canvas.channels; ++ch) {
        const double level = canvas.channels == 3 ? tint[ch] : 0.9;
        img[(r * canvas.width + c) * canvas.channels + ch] = cover * level;
      }
    }
  }
  return img;
}

}  // namespace sdlab
