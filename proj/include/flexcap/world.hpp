#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "flexcap/geometry.hpp"

namespace flexcap::world {

// ---------------------------------------------------------------------------
// Object attributes. Enum order is load-bearing: it is the class id used by
// region-classification voting tie-breaks and the color/size tables below.
// ---------------------------------------------------------------------------

enum class Shape { circle, square, triangle, star, diamond, cross };
enum class Color { red, green, blue, yellow, orange, purple, cyan, white };
enum class Size { small, medium, large };

inline constexpr int kNumShapes = 6;
inline constexpr int kNumColors = 8;
inline constexpr int kNumSizes = 3;
inline constexpr int kCanvas = 64;  // rendered image is kCanvas x kCanvas x 3

extern const std::array<const char*, kNumShapes> kShapeWords;
extern const std::array<const char*, kNumColors> kColorWords;
extern const std::array<const char*, kNumSizes> kSizeWords;
extern const std::array<const char*, 5> kRegionWords;  // left right top bottom center
extern const std::array<std::array<float, 3>, kNumColors> kColorRgb;
extern const std::array<double, kNumSizes> kSizeSide;  // bounding-square side

const char* shape_word(Shape s);
const char* color_word(Color c);
const char* size_word(Size z);

struct ObjectSpec {
    Shape shape = Shape::circle;
    Color color = Color::red;
    Size size = Size::small;
    double cx = 0.0, cy = 0.0;  // center, normalized [0,1]

    double side() const;  // bounding-square side length
    Box box() const;      // tight bounding square, center form
};

struct Scene {
    uint64_t seed = 0;
    std::vector<ObjectSpec> objects;
};

struct WorldConfig {
    int min_objects = 2;
    int max_objects = 5;
    // restrict the sampled lexicon (first k entries of each table)
    int num_shapes = kNumShapes;
    int num_colors = kNumColors;
    int num_sizes = kNumSizes;
    double max_overlap_iou = 0.1;  // placement rejects candidates above this
    int max_rejections = 1000;     // per object-count attempt
};

// Deterministic scene synthesis: same (seed, config) -> same scene, always.
// Placement is rejection sampling; if a target object count cannot be placed
// within the rejection budget the count is reduced by one and retried.
// Throws std::runtime_error only if even a single object cannot be placed.
Scene generate_scene(uint64_t seed, const WorldConfig& cfg = {});

// ---------------------------------------------------------------------------
// Rendering: flat-shaded shapes on black, no anti-aliasing. A pixel belongs
// to a shape iff its center point is inside; objects are painted in index
// order so later objects overwrite earlier ones on (rare) residual overlap.
// ---------------------------------------------------------------------------

struct Image {
    int size = 0;             // width == height
    std::vector<float> data;  // size*size*3, row-major, RGB in [0,1]

    float at(int x, int y, int c) const {
        return data[(static_cast<size_t>(y) * size + x) * 3 + c];
    }
};

Image render(const Scene& scene);

// True iff the normalized point (px, py) lies inside the object's shape.
bool contains(const ObjectSpec& obj, double px, double py);

// ---------------------------------------------------------------------------
// Language: deterministic caption grammar over 1..8 word lengths plus three
// 4-word attribute forms. Regions partition the canvas into a 3x3-ish layout:
// left / right thirds by x, then top / bottom thirds by y, else center.
// ---------------------------------------------------------------------------

std::string region_word(double cx, double cy);

// Index of the object nearest to objects[idx] by center distance (ties ->
// lower index); -1 for single-object scenes.
int nearest_neighbor(const Scene& scene, int idx);

// The grammar caption of exactly `length` words (1..8) for one object, or
// nullopt when that length is unavailable (lengths 6..8 need a neighbor).
// Throws std::out_of_range / std::invalid_argument on bad index / length.
std::optional<std::vector<std::string>> caption_for(const Scene& scene,
                                                    int object_index,
                                                    int length);

enum class AttrForm { color, size, shape };

// 4-word attribute caption, e.g. {"the","color","is","red"}.
std::vector<std::string> attribute_caption(const ObjectSpec& obj, AttrForm form);

// Highest caption length available for this object in this scene (5 or 8).
int max_caption_length(const Scene& scene, int object_index);

// Scene-level alt-text stand-in: one caption per object at a seeded random
// available length, joined with " and ".
std::string alt_text(const Scene& scene, uint64_t seed);

// ---------------------------------------------------------------------------
// Serialization: one JSON object per line, floats at 6 decimal places.
// generate_scene quantizes centers to 6 decimals so round-trips are exact.
// ---------------------------------------------------------------------------

std::string scene_to_json(const Scene& scene);
Scene scene_from_json(const std::string& line);
void write_scenes(const std::vector<Scene>& scenes, const std::string& path);
std::vector<Scene> read_scenes(const std::string& path);

}  // namespace flexcap::world
