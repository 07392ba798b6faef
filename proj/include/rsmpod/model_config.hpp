#pragma once
#include <string>
#include <vector>

namespace rsmpod {

// Architecture constants for the prompt-conditioned detector. Desk-scale
// defaults; everything trains on a CPU in minutes.
struct ModelConfig {
    int d = 64;              // model width
    int heads = 4;
    int enc_layers = 2;
    int dec_layers = 2;
    int num_queries = 20;
    int levels = 3;          // feature strides 4/8/16
    int ffn_mult = 4;
    int vocab_size = 1024;
    int deform_points = 4;   // sampling points per head per level
    int image_size = 64;
    double tau = 0.1;        // classification temperature
    double lambda_cls = 2.0, lambda_l1 = 5.0, lambda_giou = 2.0;
    double background_coef = 0.1;
    std::string text_reduce = "max";  // token-sequence similarity reduction: max | mean
    std::vector<double> ref_extents = {0.15, 0.3, 0.5};  // initial ref box size per level

    int backbone_stem_channels() const { return d / 2 < 8 ? 8 : d / 2; }
};

}  // namespace rsmpod
