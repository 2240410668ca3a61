// SPDX-License-Identifier: Apache-2.0
#include "cbn/clevr/render.hpp"

#include <algorithm>
#include <cmath>

#include "cbn/error.hpp"

namespace cbn::clevr {

Rgb color_rgb(Color color) {
  switch (color) {
    case Color::red: return {0.86f, 0.16f, 0.14f};
    case Color::green: return {0.16f, 0.66f, 0.22f};
    case Color::blue: return {0.15f, 0.30f, 0.88f};
    case Color::yellow: return {0.95f, 0.83f, 0.10f};
    case Color::cyan: return {0.10f, 0.78f, 0.84f};
    case Color::purple: return {0.55f, 0.20f, 0.75f};
  }
  throw IndexError("unknown color");
}

namespace {

bool covers(const SceneObject& o, double cx, double cy, double px, double py) {
  const double dx = px - cx;
  const double dy = py - cy;
  const double r = o.radius;
  switch (o.shape) {
    case ShapeKind::circle: return dx * dx + dy * dy <= r * r;
    case ShapeKind::square: {
      const double h = r / std::sqrt(2.0);
      return std::abs(dx) <= h && std::abs(dy) <= h;
    }
    case ShapeKind::triangle: {
      // Apex at (0, -r), base at y = r/2 with half-width r*sqrt(3)/2.
      if (dy > r / 2.0 || dy < -r) return false;
      const double half_width = (dy + r) / std::sqrt(3.0);
      return std::abs(dx) <= half_width;
    }
  }
  return false;
}

}  // namespace

void render_into(const Scene& scene, std::size_t image_size, std::span<float> out) {
  const std::size_t plane = image_size * image_size;
  if (out.size() != 3 * plane) throw ShapeError("render buffer must hold 3*S*S values");
  for (std::size_t c = 0; c < 3; ++c) std::fill_n(out.begin() + static_cast<std::ptrdiff_t>(c * plane), plane, kBackground[c]);
  const double s = static_cast<double>(image_size);
  auto paint = [&](std::size_t row, std::size_t col, const Rgb& rgb) {
    for (std::size_t c = 0; c < 3; ++c) out[c * plane + row * image_size + col] = rgb[c];
  };
  for (const auto& o : scene.objects) {
    const double cx = o.x * s;
    const double cy = o.y * s;
    const Rgb rgb = color_rgb(o.color);
    const auto lo_row = static_cast<std::size_t>(std::max(0.0, std::floor(cy - o.radius)));
    const auto hi_row = std::min(image_size - 1, static_cast<std::size_t>(std::max(0.0, std::ceil(cy + o.radius))));
    const auto lo_col = static_cast<std::size_t>(std::max(0.0, std::floor(cx - o.radius)));
    const auto hi_col = std::min(image_size - 1, static_cast<std::size_t>(std::max(0.0, std::ceil(cx + o.radius))));
    for (std::size_t row = lo_row; row <= hi_row; ++row) {
      for (std::size_t col = lo_col; col <= hi_col; ++col) {
        if (covers(o, cx, cy, static_cast<double>(col) + 0.5, static_cast<double>(row) + 0.5)) paint(row, col, rgb);
      }
    }
    if (o.material == Material::shiny) {
      const auto px = static_cast<std::size_t>(std::floor(cx));
      const auto py = static_cast<std::size_t>(std::floor(cy));
      for (std::size_t row = py; row < std::min(py + 2, image_size); ++row) {
        for (std::size_t col = px; col < std::min(px + 2, image_size); ++col) paint(row, col, kHighlight);
      }
    }
  }
}

Tensor<float> render(const Scene& scene, std::size_t image_size) {
  if (image_size < 32) throw ContractError("render requires an image size of at least 32");
  Tensor<float> image({3, image_size, image_size}, 0.0f);
  render_into(scene, image_size, image.data());
  return image;
}

}  // namespace cbn::clevr
