#pragma once

#include <algorithm>
#include <cmath>

namespace flexcap {

// Axis-aligned box in normalized image coordinates, center form.
// (cx, cy) is the center, (w, h) the full extent; all in [0, 1].
struct Box {
    double cx = 0.0, cy = 0.0, w = 0.0, h = 0.0;
};

inline bool operator==(const Box& a, const Box& b) {
    return a.cx == b.cx && a.cy == b.cy && a.w == b.w && a.h == b.h;
}

// Corner form (x0, y0) top-left, (x1, y1) bottom-right. Derived on demand;
// center form stays canonical (FP corner round-trips are only ~1e-12 exact).
struct Corners {
    double x0 = 0.0, y0 = 0.0, x1 = 0.0, y1 = 0.0;
};

inline Corners to_corners(const Box& b) {
    return {b.cx - b.w / 2.0, b.cy - b.h / 2.0,
            b.cx + b.w / 2.0, b.cy + b.h / 2.0};
}

inline Box box_from_corners(const Corners& c) {
    return {(c.x0 + c.x1) / 2.0, (c.y0 + c.y1) / 2.0, c.x1 - c.x0, c.y1 - c.y0};
}

// Intersection-over-union of two boxes. Degenerate (zero-area) inputs give 0.
// Areas come from the same corner subtractions as the intersection so that
// identical boxes score exactly 1.0.
inline double iou(const Box& a, const Box& b) {
    Corners ca = to_corners(a), cb = to_corners(b);
    double ix = std::max(0.0, std::min(ca.x1, cb.x1) - std::max(ca.x0, cb.x0));
    double iy = std::max(0.0, std::min(ca.y1, cb.y1) - std::max(ca.y0, cb.y0));
    double inter = ix * iy;
    double area_a = (ca.x1 - ca.x0) * (ca.y1 - ca.y0);
    double area_b = (cb.x1 - cb.x0) * (cb.y1 - cb.y0);
    double uni = area_a + area_b - inter;
    return uni > 0.0 ? inter / uni : 0.0;
}

inline Box clamp_box(const Box& b) {
    Corners c = to_corners(b);
    c.x0 = std::clamp(c.x0, 0.0, 1.0);
    c.y0 = std::clamp(c.y0, 0.0, 1.0);
    c.x1 = std::clamp(c.x1, 0.0, 1.0);
    c.y1 = std::clamp(c.y1, 0.0, 1.0);
    return box_from_corners(c);
}

}  // namespace flexcap
