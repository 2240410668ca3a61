// SPDX-License-Identifier: Apache-2.0
//
// Symbolic 2D scenes: the ground truth behind every rendered image.
#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

namespace cbn::clevr {

enum class ShapeKind { circle, square, triangle };
enum class Color { red, green, blue, yellow, cyan, purple };
enum class Size { small, large };
enum class Material { matte, shiny };

/// Attributes in the canonical filter order used by programs and templates.
enum class Attribute { size, color, material, shape };

inline constexpr std::array<Attribute, 4> kAttributes = {Attribute::size, Attribute::color, Attribute::material,
                                                         Attribute::shape};

/// Number of values an attribute can take.
int attribute_cardinality(Attribute attribute);
std::string_view attribute_name(Attribute attribute);
Attribute attribute_from_name(std::string_view name);
/// Canonical word for an attribute value ("red", "large", "triangle", ...).
std::string_view value_name(Attribute attribute, int value);
/// Inverse of value_name; throws IndexError for unknown words.
int value_from_name(Attribute attribute, std::string_view name);

struct SceneObject {
  ShapeKind shape = ShapeKind::circle;
  Color color = Color::red;
  Size size = Size::small;
  Material material = Material::matte;
  double x = 0.0;  // center, normalized to [0, 1); x grows rightwards
  double y = 0.0;  // y grows downwards, so "above" means smaller y
  double radius = 0.0;  // pixels

  int value(Attribute attribute) const;
  bool operator==(const SceneObject&) const = default;
};

struct Scene {
  std::vector<SceneObject> objects;
  std::uint64_t seed = 0;
  std::size_t image_size = 0;

  bool operator==(const Scene&) const = default;
};

inline constexpr std::size_t kMinObjects = 3;
inline constexpr std::size_t kMaxObjects = 6;
/// Minimum center separation along each axis, in pixels, so that every
/// spatial relation between two objects is visually unambiguous.
inline constexpr double kAxisSeparation = 3.0;

/// Object radius in pixels for a given size class and image extent.
double object_radius(Size size, std::size_t image_size);

/// Deterministic in (seed, image_size). Objects never overlap (center
/// distance exceeds the radius sum by more than one pixel), lie fully inside
/// the image and are separated by kAxisSeparation on both axes. After 1000
/// failed placements the object count is reduced, so this never fails.
Scene sample_scene(std::uint64_t seed, std::size_t image_size);

/// True when every placement invariant holds.
bool scene_valid(const Scene& scene);

}  // namespace cbn::clevr
