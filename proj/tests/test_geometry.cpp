#include <doctest.h>

#include <cmath>
#include <set>

#include "rsmpod/geometry.hpp"
#include "rsmpod/gradcheck.hpp"
#include "rsmpod/param_store.hpp"
#include "rsmpod/rng.hpp"

using namespace rsmpod;

TEST_CASE("corner conversion basics and round-trip") {
    Box b{0.5, 0.5, 1.0, 1.0};
    auto c = b.xyxy();
    CHECK(c[0] == doctest::Approx(0.0));
    CHECK(c[1] == doctest::Approx(0.0));
    CHECK(c[2] == doctest::Approx(1.0));
    CHECK(c[3] == doctest::Approx(1.0));

    Box b2{0.5, 0.5, 0.2, 0.2};
    auto c2 = b2.xyxy();
    CHECK(c2[0] == doctest::Approx(0.4));
    CHECK(c2[3] == doctest::Approx(0.6));

    Rng rng(3);
    double worst = 0.0;
    for (int i = 0; i < 1000; ++i) {
        double w = rng.uniform(0.05, 0.9), h = rng.uniform(0.05, 0.9);
        double cx = rng.uniform(w / 2, 1 - w / 2), cy = rng.uniform(h / 2, 1 - h / 2);
        Box in{cx, cy, w, h};
        auto xy = in.xyxy();
        Box out = xyxy_to_box(xy[0], xy[1], xy[2], xy[3]);
        worst = std::max({worst, std::fabs(out.cx - cx), std::fabs(out.cy - cy),
                          std::fabs(out.w - w), std::fabs(out.h - h)});
    }
    CHECK(worst < 1e-15);
}

TEST_CASE("box validation") {
    CHECK_NOTHROW(Box::validated(0.5, 0.5, 0.3, 0.3));
    CHECK_THROWS_AS(Box::validated(1.2, 0.5, 0.3, 0.3), ValidationError);
    CHECK_THROWS_AS(Box::validated(0.5, 0.5, 0.0, 0.3), ValidationError);
}

TEST_CASE("iou fixtures") {
    Box a{0.5, 0.5, 0.4, 0.4};
    CHECK(iou(a, a) == doctest::Approx(1.0).epsilon(1e-15));

    Box l{0.2, 0.2, 0.1, 0.1}, r{0.8, 0.8, 0.1, 0.1};
    CHECK(iou(l, r) == 0.0);

    // corner boxes (0,0,2,2) and (1,1,3,3) in xyxy: inter 1, union 7
    CHECK(iou_xyxy(0, 0, 2, 2, 1, 1, 3, 3) == doctest::Approx(1.0 / 7).epsilon(1e-15));
}

TEST_CASE("giou hand-computed fixtures") {
    Box a{0.5, 0.5, 0.4, 0.4};
    CHECK(giou(a, a) == doctest::Approx(1.0).epsilon(1e-12));

    // corner-touching unit boxes: IoU 0, enclosing 4, union 2 -> -0.5
    CHECK(giou_xyxy(0, 0, 1, 1, 1, 1, 2, 2) == doctest::Approx(-0.5).epsilon(1e-12));

    // 1/7 - 2/9 = -5/63
    CHECK(giou_xyxy(0, 0, 2, 2, 1, 1, 3, 3) == doctest::Approx(-5.0 / 63).epsilon(1e-12));
}

TEST_CASE("giou bounds, symmetry, relation to iou") {
    Rng rng(17);
    for (int i = 0; i < 20000; ++i) {
        double w1 = rng.uniform(0.02, 0.9), h1 = rng.uniform(0.02, 0.9);
        double w2 = rng.uniform(0.02, 0.9), h2 = rng.uniform(0.02, 0.9);
        Box a{rng.uniform(w1 / 2, 1 - w1 / 2), rng.uniform(h1 / 2, 1 - h1 / 2), w1, h1};
        Box b{rng.uniform(w2 / 2, 1 - w2 / 2), rng.uniform(h2 / 2, 1 - h2 / 2), w2, h2};
        double i1 = iou(a, b), g1 = giou(a, b);
        CHECK(i1 >= 0.0);
        CHECK(i1 <= 1.0);
        CHECK(g1 <= i1 + 1e-15);
        CHECK(g1 > -1.0);
        CHECK(g1 <= 1.0);
        CHECK(giou(b, a) == doctest::Approx(g1).epsilon(1e-14));
    }
}

TEST_CASE("differentiable giou agrees with the plain version") {
    Rng rng(19);
    for (int i = 0; i < 200; ++i) {
        double w1 = rng.uniform(0.05, 0.8), h1 = rng.uniform(0.05, 0.8);
        double w2 = rng.uniform(0.05, 0.8), h2 = rng.uniform(0.05, 0.8);
        Box a{rng.uniform(w1 / 2, 1 - w1 / 2), rng.uniform(h1 / 2, 1 - h1 / 2), w1, h1};
        Box b{rng.uniform(w2 / 2, 1 - w2 / 2), rng.uniform(h2 / 2, 1 - h2 / 2), w2, h2};
        Tensor ta = Tensor::from_values({4}, {a.cx, a.cy, a.w, a.h});
        Tensor tb = Tensor::from_values({4}, {b.cx, b.cy, b.w, b.h});
        CHECK(giou_t(ta, tb).item() == doctest::Approx(giou(a, b)).epsilon(1e-12));
    }
}

TEST_CASE("giou gradients wrt both boxes") {
    ParamStore ps;
    ps.create("pa", Tensor::from_values({4}, {0.42, 0.37, 0.31, 0.23}, true));
    ps.create("pb", Tensor::from_values({4}, {0.55, 0.52, 0.27, 0.33}, true));
    auto f = [](ParamStore& p) { return giou_t(p.at("pa"), p.at("pb")); };
    CHECK(finite_diff_check(f, ps, 1e-5) < 1e-6);
}

TEST_CASE("box_pe zero coordinate and norm per block") {
    int d = 32;  // m = 8 per coordinate
    Tensor pe0 = box_pe(Box{0.0, 0.3, 0.2, 0.1}, d);
    // first coordinate block (cx = 0): sin entries 0, cos entries 1
    for (int j = 0; j < d / 4; j += 2) {
        CHECK(pe0.at(j) == doctest::Approx(0.0));
        CHECK(pe0.at(j + 1) == doctest::Approx(1.0));
    }
    // every coordinate block has norm sqrt(m/2)
    Tensor pe = box_pe(Box{0.37, 0.81, 0.25, 0.4}, d);
    int m = d / 4;
    for (int c = 0; c < 4; ++c) {
        double sq = 0.0;
        for (int j = 0; j < m; ++j) sq += pe.at(static_cast<size_t>(c) * m + j) * pe.at(static_cast<size_t>(c) * m + j);
        CHECK(std::sqrt(sq) == doctest::Approx(std::sqrt(m / 2.0)).epsilon(1e-12));
    }
}

TEST_CASE("box_pe matches independent formula evaluation") {
    int d = 64, m = d / 4;
    Box b{0.5, 0.5, 0.5, 0.5};
    Tensor pe = box_pe(b, d);
    const double coords[4] = {b.cx, b.cy, b.w, b.h};
    for (int c = 0; c < 4; ++c)
        for (int j = 0; j < m / 2; ++j) {
            double arg = 2.0 * M_PI * coords[c] / std::pow(10000.0, 2.0 * j / m);
            CHECK(pe.at(static_cast<size_t>(c) * m + 2 * j) == doctest::Approx(std::sin(arg)).epsilon(1e-12));
            CHECK(pe.at(static_cast<size_t>(c) * m + 2 * j + 1) == doctest::Approx(std::cos(arg)).epsilon(1e-12));
        }
    CHECK_THROWS_AS(box_pe(b, 20), ConfigError);
}

TEST_CASE("box_pe is injective on a coarse grid") {
    // distinct boxes on a 0.01-spaced sub-grid produce distinct encodings
    int d = 32;
    std::set<std::vector<double>> seen;
    int count = 0;
    for (double cx = 0.1; cx <= 0.9; cx += 0.16)
        for (double cy = 0.1; cy <= 0.9; cy += 0.16)
            for (double w = 0.05; w <= 0.5; w += 0.11)
                for (double h = 0.05; h <= 0.5; h += 0.11) {
                    // snap to the 0.01 grid
                    Box b{std::round(cx * 100) / 100, std::round(cy * 100) / 100,
                          std::round(w * 100) / 100, std::round(h * 100) / 100};
                    seen.insert(box_pe(b, d).values());
                    ++count;
                }
    CHECK(static_cast<int>(seen.size()) == count);
}
