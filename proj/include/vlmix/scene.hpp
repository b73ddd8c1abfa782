#pragma once

// Synthetic scenes: colored shapes on a 2x2 grid of cells, their rendering,
// templated descriptions and the checkers that verify text against a scene.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "vlmix/tensor.hpp"
#include "vlmix/vocab.hpp"

namespace vlmix {

enum class Color : std::uint8_t { Red, Green, Blue, Yellow, Purple, Cyan };
enum class ShapeKind : std::uint8_t { Circle, Square, Triangle, Cross, Diamond };

inline constexpr std::array<const char*, 6> kColorNames{"red", "green", "blue", "yellow", "purple", "cyan"};
inline constexpr std::array<const char*, 5> kShapeNames{"circle", "square", "triangle", "cross", "diamond"};
inline constexpr std::array<std::array<float, 3>, 6> kPalette{{
    {1.0f, 0.0f, 0.0f},
    {0.0f, 1.0f, 0.0f},
    {0.0f, 0.0f, 1.0f},
    {1.0f, 1.0f, 0.0f},
    {0.6f, 0.0f, 0.8f},
    {0.0f, 1.0f, 1.0f},
}};
inline constexpr std::array<float, 3> kBackground{0.0f, 0.0f, 0.0f};
inline constexpr std::array<const char*, 2> kRowNames{"top", "bottom"};
inline constexpr std::array<const char*, 2> kColNames{"left", "right"};
inline constexpr std::array<const char*, 3> kNeutralAttributes{"shiny", "small", "wooden"};

inline std::string color_name(Color c) { return kColorNames[static_cast<std::size_t>(c)]; }
inline std::string shape_name(ShapeKind s) { return kShapeNames[static_cast<std::size_t>(s)]; }

inline std::optional<Color> parse_color(const std::string& w) {
  for (std::size_t i = 0; i < kColorNames.size(); ++i)
    if (w == kColorNames[i]) return static_cast<Color>(i);
  return std::nullopt;
}

inline std::optional<ShapeKind> parse_shape(const std::string& w) {
  for (std::size_t i = 0; i < kShapeNames.size(); ++i)
    if (w == kShapeNames[i]) return static_cast<ShapeKind>(i);
  return std::nullopt;
}

struct SceneObject {
  ShapeKind shape = ShapeKind::Circle;
  Color color = Color::Red;
  int row = 0;
  int col = 0;
  bool operator==(const SceneObject&) const = default;
};

struct SyntheticScene {
  static constexpr int kGrid = 2;
  static constexpr std::size_t kCanvas = 32;
  static constexpr std::size_t kChannels = 3;
  static constexpr std::size_t kCell = kCanvas / kGrid;
  static constexpr std::size_t kMargin = 2;

  std::vector<SceneObject> objects;  // kept in reading order (row, then col)

  bool operator==(const SyntheticScene&) const = default;

  void sort_reading_order() {
    std::sort(objects.begin(), objects.end(),
              [](const SceneObject& a, const SceneObject& b) { return a.row != b.row ? a.row < b.row : a.col < b.col; });
  }

  const SceneObject* find(Color c, ShapeKind s) const {
    for (const auto& o : objects)
      if (o.color == c && o.shape == s) return &o;
    return nullptr;
  }
  std::size_t count_shape(ShapeKind s) const {
    return static_cast<std::size_t>(std::count_if(objects.begin(), objects.end(), [s](auto& o) { return o.shape == s; }));
  }
  std::size_t count_color(Color c) const {
    return static_cast<std::size_t>(std::count_if(objects.begin(), objects.end(), [c](auto& o) { return o.color == c; }));
  }
};

// Channel-major pixels in [0, 1].
struct Image {
  std::size_t channels = 0;
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<float> pixels;

  float at(std::size_t c, std::size_t y, std::size_t x) const { return pixels[(c * height + y) * width + x]; }
  bool operator==(const Image&) const = default;
};

// Whether local pixel (u, v) of a shape box of side `side` is inside the shape.
inline bool shape_covers(ShapeKind s, double u, double v, double side) {
  const double c = (side - 1) / 2.0;
  const double du = u - c, dv = v - c;
  switch (s) {
    case ShapeKind::Square: return true;
    case ShapeKind::Circle: return du * du + dv * dv <= (side / 2.0) * (side / 2.0);
    case ShapeKind::Triangle: return std::abs(du) <= (v + 1) / 2.0;
    case ShapeKind::Cross: return std::abs(du) <= side / 6.0 || std::abs(dv) <= side / 6.0;
    case ShapeKind::Diamond: return std::abs(du) + std::abs(dv) <= side / 2.0;
  }
  return false;
}

inline void validate_scene(const SyntheticScene& scene) {
  for (std::size_t i = 0; i < scene.objects.size(); ++i) {
    const auto& o = scene.objects[i];
    if (o.row < 0 || o.row >= SyntheticScene::kGrid || o.col < 0 || o.col >= SyntheticScene::kGrid) {
      throw ValidationError("object at cell (" + std::to_string(o.row) + "," + std::to_string(o.col) +
                            ") lies outside the canvas");
    }
    for (std::size_t j = 0; j < i; ++j) {
      if (scene.objects[j].row == o.row && scene.objects[j].col == o.col) {
        throw ValidationError("two objects share cell (" + std::to_string(o.row) + "," + std::to_string(o.col) + ")");
      }
    }
  }
}

inline Image render_scene(const SyntheticScene& scene) {
  validate_scene(scene);
  using S = SyntheticScene;
  Image img{S::kChannels, S::kCanvas, S::kCanvas, {}};
  img.pixels.resize(S::kChannels * S::kCanvas * S::kCanvas);
  for (std::size_t c = 0; c < S::kChannels; ++c)
    std::fill_n(img.pixels.begin() + static_cast<std::ptrdiff_t>(c * S::kCanvas * S::kCanvas), S::kCanvas * S::kCanvas,
                kBackground[c]);
  const std::size_t side = S::kCell - 2 * S::kMargin;
  for (const auto& o : scene.objects) {
    const std::size_t y0 = static_cast<std::size_t>(o.row) * S::kCell + S::kMargin;
    const std::size_t x0 = static_cast<std::size_t>(o.col) * S::kCell + S::kMargin;
    const auto& rgb = kPalette[static_cast<std::size_t>(o.color)];
    for (std::size_t v = 0; v < side; ++v) {
      for (std::size_t u = 0; u < side; ++u) {
        if (!shape_covers(o.shape, double(u), double(v), double(side))) continue;
        for (std::size_t c = 0; c < S::kChannels; ++c)
          img.pixels[(c * S::kCanvas + y0 + v) * S::kCanvas + x0 + u] = rgb[c];
      }
    }
  }
  return img;
}

inline std::string object_phrase(const SceneObject& o) { return color_name(o.color) + " " + shape_name(o.shape); }

inline std::string cell_phrase(const SceneObject& o) {
  return std::string(kRowNames[static_cast<std::size_t>(o.row)]) + " " + kColNames[static_cast<std::size_t>(o.col)];
}

// Canonical caption. Objects are described in reading order.
inline std::string describe(SyntheticScene scene) {
  scene.sort_reading_order();
  const auto& obj = scene.objects;
  if (obj.empty()) return "";
  if (obj.size() == 1) return "a " + object_phrase(obj[0]) + " at the " + cell_phrase(obj[0]);
  const auto& a = obj[0];
  const auto& b = obj[1];
  std::string rel = "and";
  if (a.col == b.col) rel = "above";
  else if (a.row == b.row) rel = "left of";
  return "a " + object_phrase(a) + " " + rel + " a " + object_phrase(b);
}

// Parses a caption produced by the grammar above and checks every claim
// against the scene.
inline bool check_caption(const SyntheticScene& scene, const std::string& caption) {
  const auto w = split_words(caption);
  auto obj_at = [&](std::size_t i) -> const SceneObject* {
    if (i + 3 > w.size() || w[i] != "a") return nullptr;
    auto c = parse_color(w[i + 1]);
    auto s = parse_shape(w[i + 2]);
    if (!c || !s) return nullptr;
    return scene.find(*c, *s);
  };
  if (scene.objects.empty()) return w.empty();
  if (scene.objects.size() == 1) {
    if (w.size() != 7 || w[3] != "at" || w[4] != "the") return false;
    const SceneObject* o = obj_at(0);
    return o && w[5] == kRowNames[static_cast<std::size_t>(o->row)] && w[6] == kColNames[static_cast<std::size_t>(o->col)];
  }
  if (scene.objects.size() != 2 || w.size() < 7) return false;
  const SceneObject* a = obj_at(0);
  if (!a) return false;
  std::size_t next = 4;
  std::string rel = w[3];
  if (rel == "left") {
    if (w.size() != 8 || w[4] != "of") return false;
    next = 5;
  } else if (w.size() != 7) {
    return false;
  }
  const SceneObject* b = obj_at(next);
  if (!b || a == b) return false;
  if (rel == "above") return a->col == b->col && a->row < b->row;
  if (rel == "left") return a->row == b->row && a->col < b->col;
  if (rel == "and") return a->row != b->row && a->col != b->col && (a->row < b->row);
  return false;
}

// Every word the generators can emit, including prompt words and labels.
inline std::vector<std::string> synthetic_lexicon() {
  std::vector<std::string> words{
      // captions
      "a", "at", "the", "above", "left", "of", "and", "top", "bottom", "right",
      // questions and answers
      "what", "color", "is", "shape", "one", "how", "many", "shapes", "are", "there", "two", "yes", "no", "where",
      // entailment hypotheses and labels
      "entailment", "neutral", "contradiction",
      // prompt words
      "answer", ":", "photo", "relationship"};
  for (auto* c : kColorNames) words.emplace_back(c);
  for (auto* s : kShapeNames) words.emplace_back(s);
  for (auto* a : kNeutralAttributes) words.emplace_back(a);
  return words;
}

}  // namespace vlmix
