#include "rsmpod/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace rsmpod {

Box Box::validated(double cx, double cy, double w, double h) {
    auto bad = [](const char* what, double v) {
        throw ValidationError(std::string("box: ") + what + " out of range: " + std::to_string(v));
    };
    if (!(cx >= 0.0 && cx <= 1.0)) bad("cx", cx);
    if (!(cy >= 0.0 && cy <= 1.0)) bad("cy", cy);
    if (!(w > 0.0 && w <= 1.0)) bad("w", w);
    if (!(h > 0.0 && h <= 1.0)) bad("h", h);
    return Box{cx, cy, w, h};
}

Box xyxy_to_box(double x1, double y1, double x2, double y2) {
    return Box{(x1 + x2) / 2, (y1 + y2) / 2, x2 - x1, y2 - y1};
}

double iou_xyxy(double ax1, double ay1, double ax2, double ay2, double bx1, double by1,
                double bx2, double by2) {
    double ix = std::max(0.0, std::min(ax2, bx2) - std::max(ax1, bx1));
    double iy = std::max(0.0, std::min(ay2, by2) - std::max(ay1, by1));
    double inter = ix * iy;
    double uni = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter;
    return uni > 0.0 ? inter / uni : 0.0;
}

double giou_xyxy(double ax1, double ay1, double ax2, double ay2, double bx1, double by1,
                 double bx2, double by2) {
    double ix = std::max(0.0, std::min(ax2, bx2) - std::max(ax1, bx1));
    double iy = std::max(0.0, std::min(ay2, by2) - std::max(ay1, by1));
    double inter = ix * iy;
    double uni = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter;
    double ex = std::max(ax2, bx2) - std::min(ax1, bx1);
    double ey = std::max(ay2, by2) - std::min(ay1, by1);
    double enc = ex * ey;
    double i = uni > 0.0 ? inter / uni : 0.0;
    return enc > 0.0 ? i - (enc - uni) / enc : i;
}

double iou(const Box& a, const Box& b) {
    auto A = a.xyxy(), B = b.xyxy();
    return iou_xyxy(A[0], A[1], A[2], A[3], B[0], B[1], B[2], B[3]);
}

double giou(const Box& a, const Box& b) {
    auto A = a.xyxy(), B = b.xyxy();
    return giou_xyxy(A[0], A[1], A[2], A[3], B[0], B[1], B[2], B[3]);
}

namespace {

struct CornerT {
    Tensor x1, y1, x2, y2;
};

CornerT corners(const Tensor& b) {
    Tensor cx = index(b, 0), cy = index(b, 1), w = index(b, 2), h = index(b, 3);
    Tensor hw = scale(w, 0.5), hh = scale(h, 0.5);
    return {sub(cx, hw), sub(cy, hh), add(cx, hw), add(cy, hh)};
}

}  // namespace

Tensor giou_t(const Tensor& pred, const Tensor& target) {
    if (pred.size() != 4 || target.size() != 4)
        throw DimensionError("giou_t: boxes must be 4-vectors");
    CornerT a = corners(pred), b = corners(target);
    Tensor zero = Tensor::scalar(0.0);
    Tensor ix = max_elem(sub(min_elem(a.x2, b.x2), max_elem(a.x1, b.x1)), zero);
    Tensor iy = max_elem(sub(min_elem(a.y2, b.y2), max_elem(a.y1, b.y1)), zero);
    Tensor inter = mul(ix, iy);
    Tensor area_a = mul(sub(a.x2, a.x1), sub(a.y2, a.y1));
    Tensor area_b = mul(sub(b.x2, b.x1), sub(b.y2, b.y1));
    Tensor uni = sub(add(area_a, area_b), inter);
    Tensor enc = mul(sub(max_elem(a.x2, b.x2), min_elem(a.x1, b.x1)),
                     sub(max_elem(a.y2, b.y2), min_elem(a.y1, b.y1)));
    Tensor uni_c = clamp_min(uni, 1e-12);
    Tensor enc_c = clamp_min(enc, 1e-12);
    return sub(div(inter, uni_c), div(sub(enc_c, uni_c), enc_c));
}

Tensor l1_box_t(const Tensor& pred, const Tensor& target) {
    if (pred.size() != 4 || target.size() != 4)
        throw DimensionError("l1_box_t: boxes must be 4-vectors");
    Tensor pf = pred.rank() == 1 ? pred : reshape(pred, {4});
    Tensor tf = target.rank() == 1 ? target : reshape(target, {4});
    return sum(abs_t(sub(pf, tf)));
}

Tensor box_pe(const Box& b, int d) {
    if (d % 8 != 0) throw ConfigError("box_pe: d must be divisible by 8, got " + std::to_string(d));
    int m = d / 4;
    const double coords[4] = {b.cx, b.cy, b.w, b.h};
    constexpr double two_pi = 6.283185307179586;
    std::vector<double> pe(static_cast<size_t>(d));
    for (int c = 0; c < 4; ++c) {
        for (int j = 0; j < m / 2; ++j) {
            double freq = two_pi / std::pow(10000.0, (2.0 * j) / m);
            pe[static_cast<size_t>(c) * m + 2 * j] = std::sin(freq * coords[c]);
            pe[static_cast<size_t>(c) * m + 2 * j + 1] = std::cos(freq * coords[c]);
        }
    }
    return Tensor::from_values({d}, std::move(pe));
}

}  // namespace rsmpod
