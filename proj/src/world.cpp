#include "flexcap/world.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "flexcap/rng.hpp"
#include "json.hpp"

namespace flexcap::world {

const std::array<const char*, kNumShapes> kShapeWords = {
    "circle", "square", "triangle", "star", "diamond", "cross"};
const std::array<const char*, kNumColors> kColorWords = {
    "red", "green", "blue", "yellow", "orange", "purple", "cyan", "white"};
const std::array<const char*, kNumSizes> kSizeWords = {"small", "medium",
                                                       "large"};
const std::array<const char*, 5> kRegionWords = {"left", "right", "top",
                                                 "bottom", "center"};

const std::array<std::array<float, 3>, kNumColors> kColorRgb = {{
    {1.0f, 0.0f, 0.0f},  // red
    {0.0f, 1.0f, 0.0f},  // green
    {0.0f, 0.0f, 1.0f},  // blue
    {1.0f, 1.0f, 0.0f},  // yellow
    {1.0f, 0.5f, 0.0f},  // orange
    {0.5f, 0.0f, 1.0f},  // purple
    {0.0f, 1.0f, 1.0f},  // cyan
    {1.0f, 1.0f, 1.0f},  // white
}};

const std::array<double, kNumSizes> kSizeSide = {0.15, 0.25, 0.40};

const char* shape_word(Shape s) { return kShapeWords[static_cast<int>(s)]; }
const char* color_word(Color c) { return kColorWords[static_cast<int>(c)]; }
const char* size_word(Size z) { return kSizeWords[static_cast<int>(z)]; }

double ObjectSpec::side() const { return kSizeSide[static_cast<int>(size)]; }

Box ObjectSpec::box() const { return {cx, cy, side(), side()}; }

// ---------------------------------------------------------------------------
// Scene synthesis
// ---------------------------------------------------------------------------

namespace {

// Quantize to 6 decimals so the %.6f serialization round-trips bit-exactly.
double q6(double v) { return std::round(v * 1e6) / 1e6; }

ObjectSpec sample_object(Rng& rng, const WorldConfig& cfg) {
    ObjectSpec o;
    o.shape = static_cast<Shape>(rng.uniform_int(cfg.num_shapes));
    o.color = static_cast<Color>(rng.uniform_int(cfg.num_colors));
    o.size = static_cast<Size>(rng.uniform_int(cfg.num_sizes));
    double half = o.side() / 2.0;
    // quantize first, clamp second: clamp bounds are exact at 6 decimals
    o.cx = std::clamp(q6(rng.uniform(half, 1.0 - half)), half, 1.0 - half);
    o.cy = std::clamp(q6(rng.uniform(half, 1.0 - half)), half, 1.0 - half);
    return o;
}

}  // namespace

Scene generate_scene(uint64_t seed, const WorldConfig& cfg) {
    if (cfg.min_objects < 1 || cfg.max_objects < cfg.min_objects)
        throw std::invalid_argument("generate_scene: bad object count range");
    if (cfg.num_shapes < 1 || cfg.num_shapes > kNumShapes ||
        cfg.num_colors < 1 || cfg.num_colors > kNumColors ||
        cfg.num_sizes < 1 || cfg.num_sizes > kNumSizes)
        throw std::invalid_argument("generate_scene: bad lexicon sizes");
    Scene scene;
    scene.seed = seed;
    Rng rng(mix_seed(seed, /*tag=*/1));
    int span = cfg.max_objects - cfg.min_objects + 1;
    int want = cfg.min_objects + static_cast<int>(rng.uniform_int(span));
    for (int target = want; target >= 1; --target) {
        scene.objects.clear();
        int rejections = 0;
        while (static_cast<int>(scene.objects.size()) < target) {
            ObjectSpec cand = sample_object(rng, cfg);
            bool ok = true;
            for (const auto& o : scene.objects) {
                if (iou(cand.box(), o.box()) > cfg.max_overlap_iou) {
                    ok = false;
                    break;
                }
            }
            if (ok) {
                scene.objects.push_back(cand);
            } else if (++rejections >= cfg.max_rejections) {
                break;  // reduce object count and retry
            }
        }
        if (static_cast<int>(scene.objects.size()) == target) return scene;
    }
    throw std::runtime_error("generate_scene: could not place any object");
}

// ---------------------------------------------------------------------------
// Rendering
// ---------------------------------------------------------------------------

namespace {

double cross2(double ax, double ay, double bx, double by) {
    return ax * by - ay * bx;
}

// Point-in-triangle via consistent edge-sign test (boundary counts inside).
bool in_triangle(double px, double py, double ax, double ay, double bx,
                 double by, double cx, double cy) {
    double d1 = cross2(bx - ax, by - ay, px - ax, py - ay);
    double d2 = cross2(cx - bx, cy - by, px - bx, py - by);
    double d3 = cross2(ax - cx, ay - cy, px - cx, py - cy);
    bool has_neg = d1 < 0 || d2 < 0 || d3 < 0;
    bool has_pos = d1 > 0 || d2 > 0 || d3 > 0;
    return !(has_neg && has_pos);
}

}  // namespace

bool contains(const ObjectSpec& obj, double px, double py) {
    double s = obj.side() / 2.0;  // half-extent of the bounding square
    double dx = px - obj.cx, dy = py - obj.cy;
    switch (obj.shape) {
        case Shape::circle:
            return dx * dx + dy * dy <= s * s;
        case Shape::square:
            return std::fabs(dx) <= s && std::fabs(dy) <= s;
        case Shape::triangle:  // apex up
            return in_triangle(px, py, obj.cx, obj.cy - s, obj.cx - s,
                               obj.cy + s, obj.cx + s, obj.cy + s);
        case Shape::star:  // hexagram: up-triangle OR down-triangle
            return in_triangle(px, py, obj.cx, obj.cy - s, obj.cx - s,
                               obj.cy + s / 2, obj.cx + s, obj.cy + s / 2) ||
                   in_triangle(px, py, obj.cx, obj.cy + s, obj.cx - s,
                               obj.cy - s / 2, obj.cx + s, obj.cy - s / 2);
        case Shape::diamond:
            return std::fabs(dx) + std::fabs(dy) <= s;
        case Shape::cross:  // two bars, each one third of the extent wide
            return (std::fabs(dx) <= s / 3 && std::fabs(dy) <= s) ||
                   (std::fabs(dy) <= s / 3 && std::fabs(dx) <= s);
    }
    return false;
}

Image render(const Scene& scene) {
    Image img;
    img.size = kCanvas;
    img.data.assign(static_cast<size_t>(kCanvas) * kCanvas * 3, 0.0f);
    for (const auto& obj : scene.objects) {
        const auto& rgb = kColorRgb[static_cast<int>(obj.color)];
        double s = obj.side() / 2.0;
        int x0 = std::max(0, static_cast<int>(std::floor((obj.cx - s) * kCanvas)));
        int x1 = std::min(kCanvas - 1,
                          static_cast<int>(std::ceil((obj.cx + s) * kCanvas)));
        int y0 = std::max(0, static_cast<int>(std::floor((obj.cy - s) * kCanvas)));
        int y1 = std::min(kCanvas - 1,
                          static_cast<int>(std::ceil((obj.cy + s) * kCanvas)));
        for (int y = y0; y <= y1; ++y) {
            double py = (y + 0.5) / kCanvas;
            for (int x = x0; x <= x1; ++x) {
                double px = (x + 0.5) / kCanvas;
                if (contains(obj, px, py)) {
                    float* p = img.data.data() +
                               (static_cast<size_t>(y) * kCanvas + x) * 3;
                    p[0] = rgb[0];
                    p[1] = rgb[1];
                    p[2] = rgb[2];
                }
            }
        }
    }
    return img;
}

// ---------------------------------------------------------------------------
// Language
// ---------------------------------------------------------------------------

std::string region_word(double cx, double cy) {
    if (cx < 1.0 / 3.0) return "left";
    if (cx > 2.0 / 3.0) return "right";
    if (cy < 1.0 / 3.0) return "top";
    if (cy > 2.0 / 3.0) return "bottom";
    return "center";
}

int nearest_neighbor(const Scene& scene, int idx) {
    int best = -1;
    double best_d2 = 0.0;
    const auto& me = scene.objects[idx];
    for (int j = 0; j < static_cast<int>(scene.objects.size()); ++j) {
        if (j == idx) continue;
        double dx = scene.objects[j].cx - me.cx;
        double dy = scene.objects[j].cy - me.cy;
        double d2 = dx * dx + dy * dy;
        if (best < 0 || d2 < best_d2) {  // strict: ties keep the lower index
            best = j;
            best_d2 = d2;
        }
    }
    return best;
}

std::optional<std::vector<std::string>> caption_for(const Scene& scene,
                                                    int object_index,
                                                    int length) {
    if (object_index < 0 ||
        object_index >= static_cast<int>(scene.objects.size()))
        throw std::out_of_range("caption_for: object index out of range");
    if (length < 1 || length > 8)
        throw std::invalid_argument("caption_for: length must be in 1..8");
    const auto& o = scene.objects[object_index];
    int nb = nearest_neighbor(scene, object_index);
    if (length >= 6 && nb < 0) return std::nullopt;
    std::string sh = shape_word(o.shape);
    std::string co = color_word(o.color);
    std::string sz = size_word(o.size);
    std::string rg = region_word(o.cx, o.cy);
    std::string sh2, co2;
    if (nb >= 0) {
        sh2 = shape_word(scene.objects[nb].shape);
        co2 = color_word(scene.objects[nb].color);
    }
    switch (length) {
        case 1: return {{sh}};
        case 2: return {{co, sh}};
        case 3: return {{sz, co, sh}};
        case 4: return {{co, sh, "at", rg}};
        case 5: return {{sz, co, sh, "at", rg}};
        case 6: return {{sz, co, sh, "near", "the", sh2}};
        case 7: return {{sz, co, sh, "near", "the", co2, sh2}};
        case 8: return {{sz, co, sh, "at", rg, "near", "the", sh2}};
    }
    return std::nullopt;  // unreachable
}

std::vector<std::string> attribute_caption(const ObjectSpec& obj,
                                           AttrForm form) {
    switch (form) {
        case AttrForm::color: return {"the", "color", "is", color_word(obj.color)};
        case AttrForm::size: return {"the", "size", "is", size_word(obj.size)};
        case AttrForm::shape: return {"the", "shape", "is", shape_word(obj.shape)};
    }
    return {};
}

int max_caption_length(const Scene& scene, int object_index) {
    (void)object_index;
    return scene.objects.size() >= 2 ? 8 : 5;
}

std::string alt_text(const Scene& scene, uint64_t seed) {
    Rng rng(mix_seed(seed, scene.seed));
    std::string out;
    for (int i = 0; i < static_cast<int>(scene.objects.size()); ++i) {
        int max_len = max_caption_length(scene, i);
        int len = 1 + static_cast<int>(rng.uniform_int(max_len));
        auto words = caption_for(scene, i, len);
        if (!words) continue;  // unreachable given max_len, kept defensive
        if (!out.empty()) out += " and ";
        for (size_t w = 0; w < words->size(); ++w) {
            if (w) out += ' ';
            out += (*words)[w];
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Serialization
// ---------------------------------------------------------------------------

namespace {

std::string f6(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.6f", v);
    return buf;
}

template <typename Table>
int word_index(const Table& table, const std::string& word, const char* what) {
    for (int i = 0; i < static_cast<int>(table.size()); ++i)
        if (word == table[i]) return i;
    throw std::runtime_error(std::string("unknown ") + what + ": " + word);
}

}  // namespace

std::string scene_to_json(const Scene& scene) {
    std::string out = "{\"kind\":\"scene\",\"seed\":" +
                      std::to_string(scene.seed) + ",\"objects\":[";
    for (size_t i = 0; i < scene.objects.size(); ++i) {
        const auto& o = scene.objects[i];
        if (i) out += ',';
        out += "{\"shape\":\"";
        out += shape_word(o.shape);
        out += "\",\"color\":\"";
        out += color_word(o.color);
        out += "\",\"size\":\"";
        out += size_word(o.size);
        out += "\",\"cx\":" + f6(o.cx) + ",\"cy\":" + f6(o.cy) + "}";
    }
    out += "]}";
    return out;
}

Scene scene_from_json(const std::string& line) {
    nlohmann::json j = nlohmann::json::parse(line);
    Scene scene;
    scene.seed = j.at("seed").get<uint64_t>();
    for (const auto& jo : j.at("objects")) {
        ObjectSpec o;
        o.shape = static_cast<Shape>(
            word_index(kShapeWords, jo.at("shape").get<std::string>(), "shape"));
        o.color = static_cast<Color>(
            word_index(kColorWords, jo.at("color").get<std::string>(), "color"));
        o.size = static_cast<Size>(
            word_index(kSizeWords, jo.at("size").get<std::string>(), "size"));
        o.cx = jo.at("cx").get<double>();
        o.cy = jo.at("cy").get<double>();
        scene.objects.push_back(o);
    }
    return scene;
}

void write_scenes(const std::vector<Scene>& scenes, const std::string& path) {
    std::ofstream f(path);
    if (!f) throw std::runtime_error("cannot open for write: " + path);
    for (const auto& s : scenes) f << scene_to_json(s) << '\n';
    if (!f) throw std::runtime_error("write failed: " + path);
}

std::vector<Scene> read_scenes(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("cannot open for read: " + path);
    std::vector<Scene> out;
    std::string line;
    while (std::getline(f, line)) {
        if (line.empty()) continue;
        out.push_back(scene_from_json(line));
    }
    return out;
}

}  // namespace flexcap::world
