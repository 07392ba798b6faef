#pragma once
#include <array>

#include "rsmpod/tensor.hpp"

namespace rsmpod {

// Normalized center-format box; cx,cy in [0,1], w,h in (0,1].
struct Box {
    double cx = 0.5, cy = 0.5, w = 1.0, h = 1.0;

    // Throws ValidationError when outside the normalized range.
    static Box validated(double cx, double cy, double w, double h);
    std::array<double, 4> xyxy() const { return {cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2}; }
};

Box xyxy_to_box(double x1, double y1, double x2, double y2);

// IoU / GIoU on corner coordinates; pure math, no range restriction.
double iou_xyxy(double ax1, double ay1, double ax2, double ay2, double bx1, double by1,
                double bx2, double by2);
double giou_xyxy(double ax1, double ay1, double ax2, double ay2, double bx1, double by1,
                 double bx2, double by2);

double iou(const Box& a, const Box& b);
double giou(const Box& a, const Box& b);

// Differentiable GIoU on (cx,cy,w,h) 4-vectors; subgradients at coincident
// edges follow the min/max composition.
Tensor giou_t(const Tensor& pred, const Tensor& target);
// Differentiable 4-coordinate L1 distance in center format.
Tensor l1_box_t(const Tensor& pred, const Tensor& target);

// Sinusoidal encoding of (cx,cy,w,h); d must be divisible by 8. Each
// coordinate block holds m=d/4 dims of interleaved sin/cos pairs with
// frequency 2*pi / 10000^(2j/m). Constant (non-grad) output.
Tensor box_pe(const Box& b, int d);

}  // namespace rsmpod
