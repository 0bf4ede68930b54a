#pragma once

#include <array>
#include <iosfwd>
#include <span>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "sdlab/common.hpp"
#include "sdlab/score_model.hpp"

namespace sdlab {

struct Canvas {
  std::size_t height = 16;
  std::size_t width = 16;
  std::size_t channels = 1;

  std::size_t pixel_count() const noexcept { return height * width; }
  /// Rendered sample dimension; samples are laid out row-major, channels
  /// interleaved: index = (row * width + col) * channels + channel.
  std::size_t size() const noexcept { return height * width * channels; }
  bool operator==(const Canvas&) const = default;
};

/// One anisotropic 2D Gaussian. Fields are listed in serialisation order.
struct Splat {
  std::array<double, 2> mu{0.5, 0.5};
  std::array<double, 2> log_scale{-3.0, -3.0};
  double angle = 0.0;
  Vector color;
  double opacity_logit = 0.0;

  bool operator==(const Splat&) const = default;
};

struct SplatScene {
  Canvas canvas;
  std::vector<Splat> splats;

  /// Parameters per splat: 2 + 2 + 1 + channels + 1.
  std::size_t params_per_splat() const noexcept { return 6 + canvas.channels; }
  std::size_t param_count() const noexcept { return splats.size() * params_per_splat(); }
  void validate() const;
  bool operator==(const SplatScene&) const = default;
};

/// Camera analog: the scene is drawn translated and zoomed about the canvas
/// centre, so a splat at mu appears at c + zoom * (mu - c) + translation.
struct View {
  std::array<double, 2> translation{0.0, 0.0};
  double zoom = 1.0;
};

struct ViewSampler {
  std::array<double, 2> translation_min{0.0, 0.0};
  std::array<double, 2> translation_max{0.0, 0.0};
  double zoom_min = 1.0;
  double zoom_max = 1.0;

  void validate() const;
};

/// Translation uniform in the box, zoom log-uniform. Always consumes three
/// uniform draws so RNG streams stay aligned across configurations.
View sample_view(const ViewSampler& sampler, Rng& rng);

/// Saturating map onto [0, 1]: identity on [h, 1 - h], 0 below 0, 1 above 1,
/// quintic blends in between so the value and its first two derivatives are
/// continuous. h = kClampMargin.
inline constexpr double kClampMargin = 0.05;
double smooth_clamp(double x);
double smooth_clamp_derivative(double x);

/// Gaussian kernel exp(-q/2) on squared Mahalanobis distance q, tapered to
/// exactly zero between q = 16 (4 sigma) and q = 25 (5 sigma).
double splat_kernel(double q);
double splat_kernel_derivative(double q);

/// value(p) = clamp(sum_i opacity_i * color_i * kernel_i(p')).
Sample render(const SplatScene& scene, const View& view);

/// Vector-Jacobian product: d<upstream, render>/d(theta), flat in
/// serialisation order (mu, log_scale, angle, color, opacity_logit per splat).
Vector render_grad(const SplatScene& scene, const View& view, std::span<const double> upstream);

Vector flatten(const SplatScene& scene);
void unflatten(SplatScene& scene, std::span<const double> params);

Sample identity_render(std::span<const double> theta);
Vector identity_grad(std::span<const double> upstream);

struct SceneInit {
  std::size_t count = 64;
  double center_std = 0.1;
  double scale = 0.06;
  double scale_jitter = 0.2;
  double color = 0.5;
  double color_jitter = 0.1;
  double opacity = 0.3;
};

/// Centres drawn from a low-variance Gaussian about the canvas centre.
SplatScene init_scene(const Canvas& canvas, const SceneInit& init, Rng& rng);

/// The image itself as the optimised representation (pixel regime).
struct PixelField {
  Vector theta;
  bool operator==(const PixelField&) const = default;
};

using Representation = std::variant<PixelField, SplatScene>;

std::size_t output_dim(const Representation& rep);
std::size_t param_count(const Representation& rep);
Sample render(const Representation& rep, const View& view);
Vector render_grad(const Representation& rep, const View& view, std::span<const double> upstream);
Vector parameters(const Representation& rep);
void set_parameters(Representation& rep, std::span<const double> params);

/// Binary PPM (P6) for 3 channels, PGM (P5) for 1; values clamped to [0, 1]
/// and scaled to 0..255.
void write_image(std::ostream& out, std::span<const double> pixels, const Canvas& canvas);
void write_image(const std::string& path, std::span<const double> pixels, const Canvas& canvas);

/// "SPLAT1", then N, H, W, C as int32, then float64 parameters per splat in
/// field order. All little-endian.
void save_scene(const SplatScene& scene, std::ostream& out);
SplatScene load_scene(std::istream& in);
void save_scene(const SplatScene& scene, const std::string& path);
SplatScene load_scene(const std::string& path);

/// Anti-aliased shape templates used to build image-space mixtures:
/// disc, ring, square, cross, bar_h, bar_v.
Vector make_template_image(std::string_view name, const Canvas& canvas);

}  // namespace sdlab
