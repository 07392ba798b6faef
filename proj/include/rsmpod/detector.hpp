#pragma once
#include <string>
#include <vector>

#include "rsmpod/geometry.hpp"
#include "rsmpod/model_config.hpp"
#include "rsmpod/param_store.hpp"
#include "rsmpod/prompts.hpp"
#include "rsmpod/tensor.hpp"

namespace rsmpod {

struct MultiScaleFeatures {
    std::vector<Tensor> levels;  // [h,w,d] per level, strides 4/8/16
};

struct Query {
    Tensor content;  // [d]
    Box ref_box;
    int level = 0, row = 0, col = 0;
    double score = 0.0;
};

struct Detection {
    Box box;
    std::vector<double> scores;  // foreground categories, in prompt order
    int label = 0;               // argmax foreground index
    std::string category;
    double confidence = 0.0;     // max foreground score
};

// Registers every model parameter (detector + prompt encoders + background
// prompt); init is a pure function of (path, seed).
void register_model_params(ParamStore& ps, const ModelConfig& cfg, uint64_t seed);

// 64x64x3 image -> 3 levels at strides 4/8/16 via stride-2 3x3 convs + GELU.
MultiScaleFeatures backbone_forward(const Tensor& image, ParamStore& ps, const ModelConfig& cfg);

// Flattens levels into tokens, adds level + 2D sinusoidal position encodings,
// runs dense self-attention layers. Prompt-independent by construction.
MultiScaleFeatures encoder_forward(const MultiScaleFeatures& f, ParamStore& ps,
                                   const ModelConfig& cfg);

// Flat [num_tokens, d] view of the levels, level-major then row-major.
Tensor flatten_tokens(const MultiScaleFeatures& f);
// Constant positional + level encodings aligned with flatten_tokens.
Tensor token_pos_encoding(const MultiScaleFeatures& f, const ModelConfig& cfg);

// cos(x, prompt); token-sequence prompts reduce over tokens (max or mean).
Tensor category_similarity(const Tensor& x, const CategoryPrompt& p, const ModelConfig& cfg);
double category_similarity_value(const std::vector<double>& x, const CategoryPrompt& p,
                                 const ModelConfig& cfg);

std::vector<Query> select_queries(const MultiScaleFeatures& enc,
                                  const std::vector<CategoryPrompt>& prompts, ParamStore& ps,
                                  const ModelConfig& cfg);

// Self-attention + cross-attention + FFN layers; returns refined [Q,d].
Tensor decoder_forward(const std::vector<Query>& queries, const MultiScaleFeatures& enc,
                       ParamStore& ps, const ModelConfig& cfg);

// [1,d] query row -> (cx,cy,w,h) via MLP + per-coordinate sigmoid.
Tensor predict_box(const Tensor& query_row, ParamStore& ps, const ModelConfig& cfg);

// Softmax over K foreground prompts + the learnable background slot.
Tensor classify(const Tensor& query_row, const std::vector<CategoryPrompt>& prompts, double tau,
                ParamStore& ps, const ModelConfig& cfg);

// Everything the training loop and detect() need from one image pass.
struct DetectorForward {
    MultiScaleFeatures encoded;
    std::vector<Query> queries;
    Tensor refined;              // [Q,d]
    std::vector<Tensor> probs;   // per query, [K+1]
    std::vector<Tensor> boxes;   // per query, [4]
};
DetectorForward run_detector(const Tensor& image, const std::vector<CategoryPrompt>& prompts,
                             ParamStore& ps, const ModelConfig& cfg);

std::vector<Detection> detect(const Tensor& image, const std::vector<CategoryPrompt>& prompts,
                              double tau, double conf_threshold, ParamStore& ps,
                              const ModelConfig& cfg);

}  // namespace rsmpod
