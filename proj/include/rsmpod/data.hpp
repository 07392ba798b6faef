#pragma once
#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "rsmpod/geometry.hpp"
#include "rsmpod/tensor.hpp"

namespace rsmpod {

struct CategorySpec {
    std::string name;
    std::string shape;            // square | disk | triangle | cross | ring
    std::array<double, 3> color;  // base RGB in [0,1]
    double color_jitter = 0.08;
};

struct DatasetSpec {
    std::vector<CategorySpec> categories;
    int scenes = 100;
    int objects_min = 1;
    int objects_max = 4;
    double noise_amplitude = 0.08;
    uint64_t master_seed = 1;

    void validate() const;
};

struct Annotation {
    std::string category;
    Box box;
};

struct SyntheticScene {
    Tensor image;  // [64,64,3] in [0,1]
    std::vector<Annotation> annotations;
    uint64_t seed = 0;
    int index = 0;
};

// Pure function of (spec, index); anti-aliased shapes over a low-frequency
// noise background, annotations are the exact rasterization bounds.
SyntheticScene generate_scene(const DatasetSpec& spec, int index);

struct Dataset {
    DatasetSpec spec;
    std::vector<SyntheticScene> scenes;
};

// Generates every scene in memory, no disk involved.
Dataset stream_dataset(const DatasetSpec& spec);

// Directory layout: manifest.json + scenes/NNNNNN.bin (LE f64 pixels)
// + scenes/NNNNNN.json (annotations + checksum).
void export_dataset(const DatasetSpec& spec, const std::string& dir);
Dataset load_dataset(const std::string& dir);

// 5-category reference spec used by the acceptance runs.
DatasetSpec reference_spec(int scenes, uint64_t master_seed);

}  // namespace rsmpod
