#pragma once
#include <array>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "rsmpod/data.hpp"
#include "rsmpod/detector.hpp"
#include "rsmpod/model_config.hpp"
#include "rsmpod/prompts.hpp"

namespace rsmpod {

struct MatchResult {
    std::vector<std::pair<int, int>> pairs;  // (query index, gt index), sorted by query
    std::vector<int> unmatched_queries;
};

struct LossBreakdown {
    double cls = 0, l1 = 0, giou = 0, total = 0;
    double lambda_cls = 2.0, lambda_l1 = 5.0, lambda_giou = 2.0;
};

struct StageConfig {
    int stage = 1;  // 1 | 2 | 3
    int epochs = 10;
    double lr = 1e-3;
    int batch_size = 4;
    int instances_per_category = 1;             // stage 2 exemplars per category
    bool freeze_detector = true;                // stage 2 ablation knob
    std::string fusion_train_prompt_count = "32";  // stage 3: "1" | "random" | "32"
    double grad_clip = 1.0;
};

// cost[i][j] = l_cls*(1 - score_i[y_j]) + l_1*||b_i - b_j||_1 + l_giou*(1 - GIoU)
std::vector<std::vector<double>> match_cost(const std::vector<std::vector<double>>& scores,
                                            const std::vector<Box>& pred_boxes,
                                            const std::vector<int>& gt_labels,
                                            const std::vector<Box>& gt_boxes,
                                            const ModelConfig& cfg);

// Minimum-cost assignment of every ground truth to a distinct query; among
// equal-cost optima the lexicographically smallest (query, gt) pairing wins.
MatchResult hungarian_match(const std::vector<std::vector<double>>& cost);

// Per-image loss terms as graph nodes; pooled across a batch before the mean.
struct LossTerms {
    std::vector<Tensor> cls_matched;    // -log p[y] per matched pair
    std::vector<Tensor> cls_unmatched;  // -log p[background] per unmatched query
    std::vector<Tensor> l1;             // per matched pair
    std::vector<Tensor> giou;           // 1 - GIoU per matched pair
};

// Matches predictions to ground truth (or uses a pinned match) and appends
// this image's loss terms.
MatchResult image_loss_terms(const DetectorForward& fw, const std::vector<Annotation>& gts,
                             const std::vector<std::string>& prompt_names, const ModelConfig& cfg,
                             LossTerms& terms, const MatchResult* pinned_match = nullptr);

struct BatchLoss {
    Tensor total;  // scalar graph node
    LossBreakdown breakdown;
};
BatchLoss finalize_loss(const LossTerms& terms, const ModelConfig& cfg);

// Exemplar sampling for visual prompt training: per category present, up to
// m boxes without replacement.
std::vector<std::pair<std::string, std::vector<Box>>> sample_stage2_instances(
    const std::vector<Annotation>& annotations, int m, Rng& rng);

struct StageResult {
    std::vector<std::array<double, 5>> loss_log;  // step, cls, l1, giou, total
};

// Runs one training stage over the dataset; freezing, prompt construction,
// and per-step RNG derive from cfg and the seed.
StageResult run_stage(const StageConfig& cfg, ParamStore& ps, const Dataset& train,
                      const ModelConfig& model, const PromptCache* cache, uint64_t seed);

// Frozen path prefixes per stage (stage 2 honors the freeze_detector knob).
std::set<std::string> stage_frozen_prefixes(const StageConfig& cfg);

}  // namespace rsmpod
