#include <algorithm>
#include <cmath>
#include <numbers>
#include <sstream>

#include "doctest.h"
#include "sdlab/renderer.hpp"

using namespace sdlab;

namespace {

double sig(double x) { return 1.0 / (1.0 + std::exp(-x)); }

Splat make_splat(double x, double y, double scale, double color, double logit, std::size_t channels = 1) {
  Splat s;
  s.mu = {x, y};
  s.log_scale = {std::log(scale), std::log(scale)};
  s.angle = 0.0;
  s.color.assign(channels, color);
  s.opacity_logit = logit;
  return s;
}

SplatScene random_scene(Rng& rng, std::size_t n, const Canvas& cv) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  SplatScene sc;
  sc.canvas = cv;
  for (std::size_t i = 0; i < n; ++i) {
    Splat s;
    s.mu = {0.2 + 0.6 * u(rng), 0.2 + 0.6 * u(rng)};
    s.log_scale = {std::log(0.08 + 0.15 * u(rng)), std::log(0.08 + 0.15 * u(rng))};
    s.angle = std::numbers::pi * u(rng);
    s.color.resize(cv.channels);
    for (double& c : s.color) c = 0.1 + 0.3 * u(rng);
    s.opacity_logit = -1.0 + 2.0 * u(rng);
    sc.splats.push_back(s);
  }
  return sc;
}

}  // namespace

TEST_CASE("empty scene renders black") {
  SplatScene sc;
  sc.canvas = {5, 7, 3};
  const Sample img = render(sc, View{});
  CHECK(img.size() == 105);
  for (double v : img.values) CHECK(v == 0.0);
}

TEST_CASE("single isotropic splat follows the analytic bump") {
  SplatScene sc;
  sc.canvas = {16, 16, 1};
  // centred on a pixel centre so the peak is sampled exactly
  const double cx = 8.5 / 16, cy = 7.5 / 16, sd = 0.1;
  sc.splats.push_back(make_splat(cx, cy, sd, 0.6, 5.0));
  const Sample img = render(sc, View{});
  CHECK(std::abs(img[7 * 16 + 8] - 0.6 * sig(5.0)) < 1e-6);
  for (std::size_t r = 0; r < 16; ++r) {
    for (std::size_t c = 0; c < 16; ++c) {
      const double dx = (c + 0.5) / 16 - cx, dy = (r + 0.5) / 16 - cy;
      const double q = (dx * dx + dy * dy) / (sd * sd);
      double expect = 0.6 * sig(5.0) * std::exp(-0.5 * q);
      if (expect < kClampMargin) continue;  // clamp toe
      CHECK(img[r * 16 + c] == doctest::Approx(expect).epsilon(1e-12));
    }
  }
}

TEST_CASE("translated view shifts the image") {
  SplatScene sc;
  sc.canvas = {32, 32, 1};
  sc.splats.push_back(make_splat(10.5 / 32, 12.5 / 32, 0.02, 0.8, 4.0));
  auto peak = [](const Sample& img) {
    return static_cast<std::size_t>(std::max_element(img.values.begin(), img.values.end()) - img.values.begin());
  };
  const std::size_t p0 = peak(render(sc, View{}));
  View v;
  v.translation = {5.0 / 32, -3.0 / 32};
  const Sample moved = render(sc, v);
  const std::size_t p1 = peak(moved);
  CHECK(p0 == 12 * 32 + 10);
  CHECK(p1 == 9 * 32 + 15);
  // cross-correlation peak sits at the same offset
  const Sample base = render(sc, View{});
  int best_dx = 0, best_dy = 0;
  double best = -1.0;
  for (int dy = -6; dy <= 6; ++dy) {
    for (int dx = -6; dx <= 6; ++dx) {
      double acc = 0.0;
      for (int r = 0; r < 32; ++r)
        for (int c = 0; c < 32; ++c) {
          const int rr = r + dy, cc = c + dx;
          if (rr < 0 || rr >= 32 || cc < 0 || cc >= 32) continue;
          acc += base[r * 32 + c] * moved[rr * 32 + cc];
        }
      if (acc > best) {
        best = acc;
        best_dx = dx;
        best_dy = dy;
      }
    }
  }
  CHECK(best_dx == 5);
  CHECK(best_dy == -3);
}

TEST_CASE("zoom scales about the canvas centre") {
  SplatScene sc;
  sc.canvas = {32, 32, 1};
  sc.splats.push_back(make_splat(0.5 + 4.0 / 32, 0.5, 0.02, 0.8, 4.0));
  View v;
  v.zoom = 2.0;
  const Sample img = render(sc, v);
  const auto at = std::max_element(img.values.begin(), img.values.end()) - img.values.begin();
  // centre at pixel column 16 + 8 = 24 boundary: peak straddles columns 23/24
  CHECK((at == 16 * 32 + 24 || at == 16 * 32 + 23 || at == 15 * 32 + 24 || at == 15 * 32 + 23));
}

TEST_CASE("output stays in the unit interval") {
  Rng rng(1);
  SplatScene sc = random_scene(rng, 30, {12, 12, 3});
  for (Splat& s : sc.splats) {
    s.color = {3.0, -2.0, 0.5};
    s.opacity_logit = 3.0;
  }
  for (double v : render(sc, View{}).values) {
    CHECK(v >= 0.0);
    CHECK(v <= 1.0);
  }
}

TEST_CASE("smooth clamp is C2 and exact in the middle") {
  CHECK(smooth_clamp(-1.0) == 0.0);
  CHECK(smooth_clamp(2.0) == 1.0);
  CHECK(smooth_clamp(0.5) == 0.5);
  CHECK(smooth_clamp(0.2) == 0.2);
  for (double x : {0.0, kClampMargin, 1.0 - kClampMargin, 1.0}) {
    const double h = 1e-7;
    CHECK(smooth_clamp(x - h) == doctest::Approx(smooth_clamp(x + h)).epsilon(1e-6));
    CHECK(smooth_clamp_derivative(x - h) == doctest::Approx(smooth_clamp_derivative(x + h)).epsilon(1e-5));
  }
  for (double x = 0.001; x < 1.0; x += 0.0123) {
    const double h = 1e-6;
    const double fd = (smooth_clamp(x + h) - smooth_clamp(x - h)) / (2 * h);
    CHECK(smooth_clamp_derivative(x) == doctest::Approx(fd).epsilon(1e-6));
    CHECK(smooth_clamp_derivative(x) >= 0.0);
  }
}

TEST_CASE("kernel taper") {
  CHECK(splat_kernel(0.0) == 1.0);
  CHECK(splat_kernel(9.0) == std::exp(-4.5));
  CHECK(splat_kernel(25.0) == 0.0);
  CHECK(splat_kernel(30.0) == 0.0);
  for (double q = 0.1; q < 26.0; q += 0.37) {
    const double h = 1e-6;
    const double fd = (splat_kernel(q + h) - splat_kernel(q - h)) / (2 * h);
    CHECK(splat_kernel_derivative(q) == doctest::Approx(fd).epsilon(1e-6).scale(1e-9));
  }
}

TEST_CASE("locality of a tiny splat") {
  SplatScene sc;
  sc.canvas = {40, 40, 1};
  const double sd = 0.004;
  sc.splats.push_back(make_splat(0.31, 0.62, sd, 0.9, 2.0));
  const Sample img = render(sc, View{});
  for (std::size_t r = 0; r < 40; ++r)
    for (std::size_t c = 0; c < 40; ++c) {
      const double d = std::hypot((c + 0.5) / 40 - 0.31, (r + 0.5) / 40 - 0.62);
      if (d > 5 * sd) CHECK(std::abs(img[r * 40 + c]) <= 1e-10);
    }
}

TEST_CASE("render_grad: zero upstream") {
  Rng rng(2);
  const SplatScene sc = random_scene(rng, 3, {8, 8, 3});
  for (double g : render_grad(sc, View{}, Vector(sc.canvas.size(), 0.0))) CHECK(g == 0.0);
  CHECK_THROWS_AS(render_grad(sc, View{}, Vector(5, 0.0)), DimensionMismatch);
}

TEST_CASE("render_grad matches central differences") {
  Rng rng(3);
  std::uniform_real_distribution<double> u(-0.02, 0.02);
  std::normal_distribution<double> n(0.0, 1.0);
  for (int trial = 0; trial < 20; ++trial) {
    const Canvas cv{8, 8, trial % 2 == 0 ? std::size_t{1} : std::size_t{3}};
    SplatScene sc = random_scene(rng, 2, cv);
    View view;
    view.translation = {u(rng), u(rng)};
    view.zoom = 1.0 + 2 * u(rng);
    Vector up(cv.size());
    for (double& x : up) x = n(rng);
    const Vector g = render_grad(sc, view, up);
    Vector p = flatten(sc);
    double worst = 0.0, scale = 0.0;
    for (std::size_t k = 0; k < p.size(); ++k) {
      const double keep = p[k], h = 1e-6;
      auto f = [&](double val) {
        p[k] = val;
        SplatScene s2 = sc;
        unflatten(s2, p);
        return dot(up, render(s2, view).values);
      };
      const double fd = (f(keep + h) - f(keep - h)) / (2 * h);
      p[k] = keep;
      worst = std::max(worst, std::abs(fd - g[k]));
      scale = std::max(scale, std::abs(fd));
    }
    CHECK(worst / scale < 1e-4);
  }
}

TEST_CASE("opacity gradient sign on a single splat") {
  SplatScene sc;
  sc.canvas = {8, 8, 1};
  sc.splats.push_back(make_splat(0.5, 0.5, 0.15, 0.4, 0.0));
  Rng rng(4);
  std::normal_distribution<double> n(0.0, 1.0);
  for (int trial = 0; trial < 10; ++trial) {
    Vector up(64);
    for (double& x : up) x = n(rng);
    const Vector g = render_grad(sc, View{}, up);
    // hand expansion; the clamp slope enters per pixel
    double s = 0.0;
    for (std::size_t r = 0; r < 8; ++r)
      for (std::size_t c = 0; c < 8; ++c) {
        const double dx = (c + 0.5) / 8 - 0.5, dy = (r + 0.5) / 8 - 0.5;
        const double k = std::exp(-0.5 * (dx * dx + dy * dy) / 0.0225);
        s += up[r * 8 + c] * smooth_clamp_derivative(0.4 * 0.5 * k) * 0.4 * k * 0.25;
      }
    if (std::abs(s) > 1e-3) CHECK((g[6] > 0) == (s > 0));
  }
}

TEST_CASE("identity renderer") {
  const Vector theta{0.1, -2.0, 3.5};
  CHECK(identity_render(theta).values == theta);
  CHECK(identity_grad(theta) == theta);
  Representation rep = PixelField{theta};
  CHECK(render(rep, View{}).values == theta);
  CHECK(render_grad(rep, View{}, theta) == theta);
  CHECK(output_dim(rep) == 3);
  set_parameters(rep, Vector{1.0, 2.0, 3.0});
  CHECK(parameters(rep) == Vector{1.0, 2.0, 3.0});
}

TEST_CASE("view sampling") {
  ViewSampler fixed;
  Rng rng(5);
  for (int i = 0; i < 10; ++i) {
    const View v = sample_view(fixed, rng);
    CHECK(v.translation[0] == 0.0);
    CHECK(v.translation[1] == 0.0);
    CHECK(v.zoom == 1.0);
  }
  ViewSampler box;
  box.translation_min = {-0.1, 0.0};
  box.translation_max = {0.3, 0.2};
  box.zoom_min = 0.8;
  box.zoom_max = 1.25;
  const int n = 10000;
  double sx = 0, sy = 0, slz = 0;
  for (int i = 0; i < n; ++i) {
    const View v = sample_view(box, rng);
    CHECK(v.zoom >= 0.8);
    CHECK(v.zoom <= 1.25);
    sx += v.translation[0];
    sy += v.translation[1];
    slz += std::log(v.zoom);
  }
  const double se_x = 0.4 / std::sqrt(12.0 * n), se_y = 0.2 / std::sqrt(12.0 * n);
  CHECK(std::abs(sx / n - 0.1) < 3 * se_x);
  CHECK(std::abs(sy / n - 0.1) < 3 * se_y);
  const double se_lz = (std::log(1.25) - std::log(0.8)) / std::sqrt(12.0 * n);
  CHECK(std::abs(slz / n - 0.5 * (std::log(1.25) + std::log(0.8))) < 3 * se_lz);
  Rng a(6), b(6);
  for (int i = 0; i < 20; ++i) {
    const View va = sample_view(box, a), vb = sample_view(box, b);
    CHECK(va.translation == vb.translation);
    CHECK(va.zoom == vb.zoom);
  }
  box.zoom_min = 0.0;
  CHECK_THROWS_AS(box.validate(), InvalidArgument);
}

TEST_CASE("scene initialisation") {
  Rng rng(7);
  const SplatScene sc = init_scene({16, 16, 3}, SceneInit{}, rng);
  CHECK(sc.splats.size() == 64);
  CHECK(sc.param_count() == 64 * 9);
  double mx = 0, my = 0;
  for (const Splat& s : sc.splats) {
    mx += s.mu[0];
    my += s.mu[1];
    CHECK(sig(s.opacity_logit) == doctest::Approx(0.3));
  }
  CHECK(std::abs(mx / 64 - 0.5) < 0.05);
  CHECK(std::abs(my / 64 - 0.5) < 0.05);
}

TEST_CASE("flatten round trip and scene file") {
  Rng rng(8);
  SplatScene sc = random_scene(rng, 4, {6, 5, 3});
  const Vector p = flatten(sc);
  CHECK(p.size() == sc.param_count());
  SplatScene copy = sc;
  unflatten(copy, p);
  CHECK(copy == sc);
  std::stringstream ss;
  save_scene(sc, ss);
  const std::string bytes = ss.str();
  CHECK(bytes.substr(0, 6) == "SPLAT1");
  CHECK(bytes.size() == 6 + 16 + 8 * sc.param_count());
  CHECK(load_scene(ss) == sc);
  std::stringstream bad("SPLATX");
  CHECK_THROWS(load_scene(bad));
}

TEST_CASE("image writer") {
  std::stringstream ss;
  write_image(ss, Vector{0.0, 1.0, 0.5, 2.0}, Canvas{2, 2, 1});
  const std::string s = ss.str();
  CHECK(s.substr(0, 11) == "P5\n2 2\n255\n");
  CHECK(static_cast<unsigned char>(s[11]) == 0);
  CHECK(static_cast<unsigned char>(s[12]) == 255);
  CHECK(static_cast<unsigned char>(s[13]) == 128);
  CHECK(static_cast<unsigned char>(s[14]) == 255);
  std::stringstream rgb;
  write_image(rgb, Vector(12, 0.0), Canvas{2, 2, 3});
  CHECK(rgb.str().substr(0, 2) == "P6");
  CHECK(rgb.str().size() == 11 + 12);
}

TEST_CASE("templates") {
  const Canvas cv{16, 16, 1};
  const Vector disc = make_template_image("disc", cv);
  CHECK(disc[8 * 16 + 8] == doctest::Approx(0.9));
  CHECK(disc[0] == 0.0);
  double area = 0.0;
  for (double v : disc) area += v / 0.9;
  CHECK(area / 256 == doctest::Approx(std::numbers::pi * 0.28 * 0.28).epsilon(0.05));
  for (const char* name : {"ring", "square", "cross", "bar_h", "bar_v"}) {
    const Vector img = make_template_image(name, cv);
    CHECK(norm(img) > 0.0);
    CHECK(norm(img) != doctest::Approx(norm(disc)));
  }
  const Vector hb = make_template_image("bar_h", cv), vb = make_template_image("bar_v", cv);
  for (std::size_t r = 0; r < 16; ++r)
    for (std::size_t c = 0; c < 16; ++c) CHECK(hb[r * 16 + c] == doctest::Approx(vb[c * 16 + r]));
  CHECK_THROWS_AS(make_template_image("star", cv), InvalidArgument);
}
