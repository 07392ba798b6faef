#pragma once
#include <string>
#include <vector>

#include "rsmpod/data.hpp"
#include "rsmpod/model_config.hpp"
#include "rsmpod/training.hpp"

namespace rsmpod {

// Batch run configuration: a single JSON file, dotted-path CLI overrides win.
struct RunConfig {
    DatasetSpec train_spec;
    DatasetSpec test_spec;
    ModelConfig model;
    StageConfig stage1, stage2, stage3;
    std::string prompt_mode = "text";  // text | visual | multimodal | avg_baseline
    int visual_prompt_count = 32;
    double conf_threshold = 0.0;
    uint64_t seed = 42;
    std::string out_dir = "out";
    std::vector<int> stages = {1, 2, 3};  // stages the train command runs

    static RunConfig defaults();
    static RunConfig from_file(const std::string& path);
    static RunConfig from_json_text(const std::string& text);
    std::string to_json_text() const;

    // FNV-1a hex digest of the canonical JSON dump.
    std::string config_hash() const;

    // "a.b.c=value" override; throws ConfigError naming the field path.
    void apply_override(const std::string& assignment);
};

}  // namespace rsmpod
