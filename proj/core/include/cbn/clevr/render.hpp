// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <span>

#include "cbn/clevr/scene.hpp"
#include "cbn/tensor.hpp"

namespace cbn::clevr {

using Rgb = std::array<float, 3>;

inline constexpr Rgb kBackground = {0.85f, 0.85f, 0.85f};
inline constexpr Rgb kHighlight = {1.0f, 1.0f, 1.0f};
Rgb color_rgb(Color color);

/// Rasterizes into a channel-major [3, S, S] buffer with values in [0, 1].
/// Shapes are filled without anti-aliasing; squares have half-side r/sqrt(2),
/// triangles point up and are inscribed in the radius-r circle. A shiny
/// object gets a white 2x2 highlight whose top-left pixel contains its center.
void render_into(const Scene& scene, std::size_t image_size, std::span<float> out);

/// Same as render_into; requires image_size >= 32.
Tensor<float> render(const Scene& scene, std::size_t image_size);

}  // namespace cbn::clevr
