#include "rsmpod/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include <json.hpp>

#include "rsmpod/rng.hpp"

namespace rsmpod {

namespace {

constexpr int kSize = 64;

double shape_sdf(const std::string& kind, double dx, double dy, double r) {
    if (kind == "square") {
        return std::max(std::fabs(dx), std::fabs(dy)) - r;
    }
    if (kind == "disk") {
        return std::sqrt(dx * dx + dy * dy) - r;
    }
    if (kind == "ring") {
        return std::fabs(std::sqrt(dx * dx + dy * dy) - 0.72 * r) - 0.28 * r;
    }
    if (kind == "cross") {
        double hw = 0.34 * r;
        auto bar = [&](double ax, double ay, double bx, double by) {
            double qx = std::fabs(ax) - bx, qy = std::fabs(ay) - by;
            double ox = std::max(qx, 0.0), oy = std::max(qy, 0.0);
            return std::sqrt(ox * ox + oy * oy) + std::min(std::max(qx, qy), 0.0);
        };
        return std::min(bar(dx, dy, r, hw), bar(dx, dy, hw, r));
    }
    if (kind == "triangle") {
        // upward isoceles triangle: apex (0,-r), base corners (+-0.9r, 0.75r)
        const double vx[3] = {0.0, -0.9 * r, 0.9 * r};
        const double vy[3] = {-r, 0.75 * r, 0.75 * r};
        double d2 = 1e30, inside_sign = 1.0;
        double s = (vx[1] - vx[0]) * (vx[0] - vx[2]) * 0 + 1;  // triangle winding handled below
        (void)s;
        double min_cross = 1e30, max_cross = -1e30;
        for (int i = 0; i < 3; ++i) {
            int j = (i + 1) % 3;
            double ex = vx[j] - vx[i], ey = vy[j] - vy[i];
            double wx = dx - vx[i], wy = dy - vy[i];
            double t = std::clamp((wx * ex + wy * ey) / (ex * ex + ey * ey), 0.0, 1.0);
            double qx = wx - t * ex, qy = wy - t * ey;
            d2 = std::min(d2, qx * qx + qy * qy);
            double cross = wx * ey - wy * ex;
            min_cross = std::min(min_cross, cross);
            max_cross = std::max(max_cross, cross);
        }
        inside_sign = (min_cross >= 0.0 || max_cross <= 0.0) ? -1.0 : 1.0;
        return inside_sign * std::sqrt(d2);
    }
    throw ValidationError("unknown shape kind: " + kind);
}

}  // namespace

void DatasetSpec::validate() const {
    if (categories.size() < 2) throw ValidationError("dataset spec: need at least 2 categories");
    if (scenes < 1) throw ValidationError("dataset spec: scenes must be positive");
    if (objects_min < 1 || objects_max < objects_min)
        throw ValidationError("dataset spec: bad objects min/max");
    for (const auto& c : categories) {
        if (c.name.empty()) throw ValidationError("dataset spec: empty category name");
        shape_sdf(c.shape, 0, 0, 1);  // throws on unknown kind
    }
}

SyntheticScene generate_scene(const DatasetSpec& spec, int index) {
    if (index < 0 || index >= spec.scenes)
        throw ValidationError("generate_scene: index out of range");
    uint64_t seed = mix_seed(spec.master_seed, static_cast<uint64_t>(index));
    Rng rng(seed);

    // low-frequency background: coarse grid bilinearly upsampled
    const int grid = 9;
    double base = rng.uniform(0.3, 0.55);
    std::array<std::vector<double>, 3> coarse;
    for (auto& ch : coarse) {
        ch.resize(grid * grid);
        for (auto& v : ch) v = base + spec.noise_amplitude * rng.uniform(-1.0, 1.0);
    }
    std::vector<double> img(static_cast<size_t>(kSize) * kSize * 3);
    for (int y = 0; y < kSize; ++y)
        for (int x = 0; x < kSize; ++x) {
            double gx = (x + 0.5) / kSize * (grid - 1), gy = (y + 0.5) / kSize * (grid - 1);
            int x0 = std::min(static_cast<int>(gx), grid - 2);
            int y0 = std::min(static_cast<int>(gy), grid - 2);
            double tx = gx - x0, ty = gy - y0;
            for (int c = 0; c < 3; ++c) {
                const auto& g = coarse[static_cast<size_t>(c)];
                double v = (1 - ty) * ((1 - tx) * g[y0 * grid + x0] + tx * g[y0 * grid + x0 + 1]) +
                           ty * ((1 - tx) * g[(y0 + 1) * grid + x0] + tx * g[(y0 + 1) * grid + x0 + 1]);
                img[(static_cast<size_t>(y) * kSize + x) * 3 + c] = std::clamp(v, 0.0, 1.0);
            }
        }

    int count = spec.objects_min +
                static_cast<int>(rng.next_below(static_cast<uint64_t>(spec.objects_max - spec.objects_min + 1)));
    std::vector<Annotation> annotations;
    std::vector<Box> placed;
    for (int obj = 0; obj < count; ++obj) {
        const auto& cat = spec.categories[rng.next_below(spec.categories.size())];
        double r = rng.uniform(4.5, 10.0);  // pixels
        double cx = 0, cy = 0;
        for (int attempt = 0; attempt < 12; ++attempt) {
            cx = rng.uniform(r + 1.5, kSize - r - 1.5);
            cy = rng.uniform(r + 1.5, kSize - r - 1.5);
            Box cand{cx / kSize, cy / kSize, 2 * r / kSize, 2 * r / kSize};
            bool ok = true;
            for (const auto& other : placed)
                if (iou(cand, other) > 0.2) ok = false;
            if (ok) break;
        }
        std::array<double, 3> color;
        for (int c = 0; c < 3; ++c)
            color[static_cast<size_t>(c)] =
                std::clamp(cat.color[static_cast<size_t>(c)] + cat.color_jitter * rng.uniform(-1.0, 1.0),
                           0.05, 0.95);

        // rasterize with 1px smoothing; track covered pixel bounds
        int min_x = kSize, max_x = -1, min_y = kSize, max_y = -1;
        int lo_y = std::max(0, static_cast<int>(cy - r - 2)), hi_y = std::min(kSize - 1, static_cast<int>(cy + r + 2));
        int lo_x = std::max(0, static_cast<int>(cx - r - 2)), hi_x = std::min(kSize - 1, static_cast<int>(cx + r + 2));
        for (int y = lo_y; y <= hi_y; ++y)
            for (int x = lo_x; x <= hi_x; ++x) {
                double sdf = shape_sdf(cat.shape, x + 0.5 - cx, y + 0.5 - cy, r);
                double alpha = std::clamp(0.5 - sdf, 0.0, 1.0);
                if (alpha <= 0.0) continue;
                for (int c = 0; c < 3; ++c) {
                    double& px = img[(static_cast<size_t>(y) * kSize + x) * 3 + c];
                    px = (1 - alpha) * px + alpha * color[static_cast<size_t>(c)];
                }
                if (alpha >= 0.5) {
                    min_x = std::min(min_x, x);
                    max_x = std::max(max_x, x);
                    min_y = std::min(min_y, y);
                    max_y = std::max(max_y, y);
                }
            }
        if (max_x < min_x || max_x - min_x + 1 < 4 || max_y - min_y + 1 < 4) continue;

        Box bb = xyxy_to_box(min_x / 64.0, min_y / 64.0, (max_x + 1) / 64.0, (max_y + 1) / 64.0);
        placed.push_back(bb);
        annotations.push_back(Annotation{cat.name, bb});
    }
    if (annotations.empty()) {
        // degenerate draw; place one guaranteed object deterministically
        const auto& cat = spec.categories[0];
        double r = 8.0, cx = kSize / 2.0, cy = kSize / 2.0;
        for (int y = 0; y < kSize; ++y)
            for (int x = 0; x < kSize; ++x) {
                double alpha = std::clamp(0.5 - shape_sdf(cat.shape, x + 0.5 - cx, y + 0.5 - cy, r), 0.0, 1.0);
                for (int c = 0; c < 3; ++c) {
                    double& px = img[(static_cast<size_t>(y) * kSize + x) * 3 + c];
                    px = (1 - alpha) * px + alpha * cat.color[static_cast<size_t>(c)];
                }
            }
        annotations.push_back(Annotation{cat.name, Box{0.5, 0.5, 2 * r / kSize, 2 * r / kSize}});
    }

    SyntheticScene scene;
    scene.image = Tensor::from_values({kSize, kSize, 3}, std::move(img));
    scene.annotations = std::move(annotations);
    scene.seed = seed;
    scene.index = index;
    return scene;
}

Dataset stream_dataset(const DatasetSpec& spec) {
    spec.validate();
    Dataset ds;
    ds.spec = spec;
    ds.scenes.reserve(static_cast<size_t>(spec.scenes));
    for (int i = 0; i < spec.scenes; ++i) ds.scenes.push_back(generate_scene(spec, i));
    return ds;
}

namespace {

nlohmann::ordered_json spec_to_json(const DatasetSpec& spec) {
    nlohmann::ordered_json cats = nlohmann::ordered_json::array();
    for (const auto& c : spec.categories)
        cats.push_back({{"name", c.name},
                        {"shape", c.shape},
                        {"color", c.color},
                        {"color_jitter", c.color_jitter}});
    return {{"categories", std::move(cats)},
            {"scenes", spec.scenes},
            {"objects_min", spec.objects_min},
            {"objects_max", spec.objects_max},
            {"noise_amplitude", spec.noise_amplitude},
            {"master_seed", spec.master_seed}};
}

DatasetSpec spec_from_json(const nlohmann::json& j) {
    DatasetSpec spec;
    for (const auto& c : j.at("categories")) {
        CategorySpec cs;
        cs.name = c.at("name").get<std::string>();
        cs.shape = c.at("shape").get<std::string>();
        auto col = c.at("color").get<std::vector<double>>();
        if (col.size() != 3) throw IoError("dataset spec: color must have 3 channels");
        std::copy(col.begin(), col.end(), cs.color.begin());
        cs.color_jitter = c.value("color_jitter", 0.08);
        spec.categories.push_back(std::move(cs));
    }
    spec.scenes = j.at("scenes").get<int>();
    spec.objects_min = j.at("objects_min").get<int>();
    spec.objects_max = j.at("objects_max").get<int>();
    spec.noise_amplitude = j.at("noise_amplitude").get<double>();
    spec.master_seed = j.at("master_seed").get<uint64_t>();
    return spec;
}

std::string scene_stem(int index) {
    char buf[16];
    std::snprintf(buf, sizeof(buf), "%06d", index);
    return buf;
}

}  // namespace

void export_dataset(const DatasetSpec& spec, const std::string& dir) {
    spec.validate();
    namespace fs = std::filesystem;
    fs::create_directories(fs::path(dir) / "scenes");
    {
        nlohmann::ordered_json manifest;
        manifest["version"] = 1;
        manifest["spec"] = spec_to_json(spec);
        std::ofstream os(fs::path(dir) / "manifest.json");
        if (!os) throw IoError("cannot write manifest in " + dir);
        os << manifest.dump(2) << "\n";
    }
    for (int i = 0; i < spec.scenes; ++i) {
        SyntheticScene scene = generate_scene(spec, i);
        std::string stem = scene_stem(i);
        fs::path bin = fs::path(dir) / "scenes" / (stem + ".bin");
        {
            std::ofstream os(bin, std::ios::binary);
            os.write(reinterpret_cast<const char*>(scene.image.values().data()),
                     static_cast<std::streamsize>(scene.image.size() * 8));
            if (!os) throw IoError("cannot write scene payload " + bin.string());
        }
        uint64_t checksum = fnv1a(scene.image.values().data(), scene.image.size() * 8);
        nlohmann::ordered_json rec;
        rec["index"] = i;
        rec["seed"] = scene.seed;
        rec["checksum"] = checksum;
        nlohmann::ordered_json anns = nlohmann::ordered_json::array();
        for (const auto& a : scene.annotations)
            anns.push_back({{"category", a.category},
                            {"box", {a.box.cx, a.box.cy, a.box.w, a.box.h}}});
        rec["annotations"] = std::move(anns);
        std::ofstream os(fs::path(dir) / "scenes" / (stem + ".json"));
        os << rec.dump(2) << "\n";
        if (!os) throw IoError("cannot write scene record " + stem);
    }
}

Dataset load_dataset(const std::string& dir) {
    namespace fs = std::filesystem;
    std::ifstream ms(fs::path(dir) / "manifest.json");
    if (!ms) throw IoError("cannot open manifest in " + dir);
    nlohmann::json manifest;
    try {
        ms >> manifest;
    } catch (const nlohmann::json::exception& e) {
        throw IoError(std::string("manifest parse error: ") + e.what());
    }
    if (manifest.value("version", 0) != 1)
        throw IoError("dataset version mismatch in " + dir);
    Dataset ds;
    ds.spec = spec_from_json(manifest.at("spec"));
    for (int i = 0; i < ds.spec.scenes; ++i) {
        std::string stem = scene_stem(i);
        fs::path bin = fs::path(dir) / "scenes" / (stem + ".bin");
        std::ifstream is(bin, std::ios::binary);
        if (!is) throw IoError("missing scene payload " + bin.string());
        std::vector<double> pixels(static_cast<size_t>(kSize) * kSize * 3);
        is.read(reinterpret_cast<char*>(pixels.data()),
                static_cast<std::streamsize>(pixels.size() * 8));
        if (!is || is.peek() != EOF)
            throw IoError("corrupt scene payload " + bin.string());

        std::ifstream js(fs::path(dir) / "scenes" / (stem + ".json"));
        if (!js) throw IoError("missing scene record " + stem + ".json");
        nlohmann::json rec;
        try {
            js >> rec;
        } catch (const nlohmann::json::exception& e) {
            throw IoError("corrupt scene record " + stem + ".json: " + e.what());
        }
        uint64_t checksum = fnv1a(pixels.data(), pixels.size() * 8);
        if (rec.at("checksum").get<uint64_t>() != checksum)
            throw IoError("checksum mismatch in scene " + stem);

        SyntheticScene scene;
        scene.index = i;
        scene.seed = rec.at("seed").get<uint64_t>();
        scene.image = Tensor::from_values({kSize, kSize, 3}, std::move(pixels));
        for (const auto& a : rec.at("annotations")) {
            auto b = a.at("box").get<std::vector<double>>();
            scene.annotations.push_back(
                Annotation{a.at("category").get<std::string>(), Box{b[0], b[1], b[2], b[3]}});
        }
        ds.scenes.push_back(std::move(scene));
    }
    return ds;
}

DatasetSpec reference_spec(int scenes, uint64_t master_seed) {
    DatasetSpec spec;
    spec.categories = {
        {"red square", "square", {0.85, 0.20, 0.20}, 0.08},
        {"blue disk", "disk", {0.20, 0.30, 0.85}, 0.08},
        {"green triangle", "triangle", {0.15, 0.75, 0.30}, 0.08},
        {"yellow cross", "cross", {0.90, 0.85, 0.20}, 0.08},
        {"magenta ring", "ring", {0.80, 0.25, 0.80}, 0.08},
    };
    spec.scenes = scenes;
    spec.objects_min = 1;
    spec.objects_max = 4;
    spec.noise_amplitude = 0.08;
    spec.master_seed = master_seed;
    return spec;
}

}  // namespace rsmpod
