// SPDX-License-Identifier: Apache-2.0
#include "cbn/clevr/scene.hpp"

#include <cmath>
#include <random>
#include <span>

#include "cbn/error.hpp"

namespace cbn::clevr {

namespace {

constexpr std::array<std::string_view, 2> kSizeNames = {"small", "large"};
constexpr std::array<std::string_view, 6> kColorNames = {"red", "green", "blue", "yellow", "cyan", "purple"};
constexpr std::array<std::string_view, 2> kMaterialNames = {"matte", "shiny"};
constexpr std::array<std::string_view, 3> kShapeNames = {"circle", "square", "triangle"};
constexpr std::array<std::string_view, 4> kAttributeNames = {"size", "color", "material", "shape"};

std::span<const std::string_view> names_of(Attribute attribute) {
  switch (attribute) {
    case Attribute::size: return kSizeNames;
    case Attribute::color: return kColorNames;
    case Attribute::material: return kMaterialNames;
    case Attribute::shape: return kShapeNames;
  }
  throw IndexError("unknown attribute");
}

constexpr int kMaxPlacementAttempts = 1000;

}  // namespace

int attribute_cardinality(Attribute attribute) { return static_cast<int>(names_of(attribute).size()); }

std::string_view attribute_name(Attribute attribute) { return kAttributeNames.at(static_cast<std::size_t>(attribute)); }

Attribute attribute_from_name(std::string_view name) {
  for (std::size_t i = 0; i < kAttributeNames.size(); ++i) {
    if (kAttributeNames[i] == name) return static_cast<Attribute>(i);
  }
  throw IndexError("unknown attribute '" + std::string(name) + "'");
}

std::string_view value_name(Attribute attribute, int value) {
  const auto names = names_of(attribute);
  if (value < 0 || static_cast<std::size_t>(value) >= names.size()) {
    throw IndexError("value " + std::to_string(value) + " out of range for " + std::string(attribute_name(attribute)));
  }
  return names[static_cast<std::size_t>(value)];
}

int value_from_name(Attribute attribute, std::string_view name) {
  const auto names = names_of(attribute);
  for (std::size_t i = 0; i < names.size(); ++i) {
    if (names[i] == name) return static_cast<int>(i);
  }
  throw IndexError("'" + std::string(name) + "' is not a " + std::string(attribute_name(attribute)));
}

int SceneObject::value(Attribute attribute) const {
  switch (attribute) {
    case Attribute::size: return static_cast<int>(size);
    case Attribute::color: return static_cast<int>(color);
    case Attribute::material: return static_cast<int>(material);
    case Attribute::shape: return static_cast<int>(shape);
  }
  throw IndexError("unknown attribute");
}

double object_radius(Size size, std::size_t image_size) {
  const double s = static_cast<double>(image_size);
  return size == Size::small ? s / 12.0 : s / 7.0;
}

namespace {

bool fits(const SceneObject& a, const SceneObject& b, double s) {
  const double dx = (a.x - b.x) * s;
  const double dy = (a.y - b.y) * s;
  return std::hypot(dx, dy) > a.radius + b.radius + 1.0 && std::abs(dx) >= kAxisSeparation &&
         std::abs(dy) >= kAxisSeparation;
}

bool inside(const SceneObject& o, double s) {
  const double cx = o.x * s;
  const double cy = o.y * s;
  return cx - o.radius >= 0.0 && cx + o.radius <= s && cy - o.radius >= 0.0 && cy + o.radius <= s && o.x < 1.0 &&
         o.y < 1.0;
}

}  // namespace

Scene sample_scene(std::uint64_t seed, std::size_t image_size) {
  if (image_size < 8) throw ContractError("scene image size must be at least 8");
  std::mt19937_64 rng(seed);
  const double s = static_cast<double>(image_size);
  std::uniform_int_distribution<int> count_dist(static_cast<int>(kMinObjects), static_cast<int>(kMaxObjects));
  std::uniform_int_distribution<int> shape_dist(0, 2), color_dist(0, 5), binary_dist(0, 1);

  std::size_t target = static_cast<std::size_t>(count_dist(rng));
  Scene scene{{}, seed, image_size};
  while (true) {
    scene.objects.clear();
    int attempts = 0;
    while (scene.objects.size() < target && attempts < kMaxPlacementAttempts) {
      SceneObject o;
      o.shape = static_cast<ShapeKind>(shape_dist(rng));
      o.color = static_cast<Color>(color_dist(rng));
      o.size = static_cast<Size>(binary_dist(rng));
      o.material = static_cast<Material>(binary_dist(rng));
      o.radius = object_radius(o.size, image_size);
      std::uniform_real_distribution<double> pos((o.radius + 1.0) / s, 1.0 - (o.radius + 1.0) / s);
      bool placed = false;
      while (!placed && attempts < kMaxPlacementAttempts) {
        ++attempts;
        o.x = pos(rng);
        o.y = pos(rng);
        placed = true;
        for (const auto& other : scene.objects) {
          if (!fits(o, other, s)) {
            placed = false;
            break;
          }
        }
      }
      if (placed) scene.objects.push_back(o);
    }
    if (scene.objects.size() == target) return scene;
    if (target > kMinObjects) --target;
  }
}

bool scene_valid(const Scene& scene) {
  if (scene.objects.size() < kMinObjects || scene.objects.size() > kMaxObjects) return false;
  const double s = static_cast<double>(scene.image_size);
  for (std::size_t i = 0; i < scene.objects.size(); ++i) {
    if (!inside(scene.objects[i], s)) return false;
    for (std::size_t j = 0; j < i; ++j) {
      if (!fits(scene.objects[i], scene.objects[j], s)) return false;
    }
  }
  return true;
}

}  // namespace cbn::clevr
