#pragma once
#include <string>
#include <vector>

#include "rsmpod/eval.hpp"
#include "rsmpod/run_config.hpp"

namespace rsmpod {

// Runs the frozen image pipeline + visual prompt encoder over every annotated
// instance and collects the embeddings per category.
PromptCache build_cache(const Dataset& train, ParamStore& ps, const ModelConfig& cfg);

// Inference-time prompt construction for one mode. Visual/multimodal modes
// sample n cached prompts per category with a deterministic per-category RNG.
// avg_baseline adds the aggregated visual prompt to each textual token and
// mean-pools the result.
std::vector<CategoryPrompt> make_eval_prompts(const std::string& mode,
                                              const std::vector<std::string>& categories,
                                              ParamStore& ps, const ModelConfig& cfg,
                                              const PromptCache* cache, int n, uint64_t seed);

// Runs detect() over every scene; image ids are zero-padded indices.
std::vector<DetRecord> detect_scenes(const Dataset& ds,
                                     const std::vector<CategoryPrompt>& prompts, ParamStore& ps,
                                     const ModelConfig& cfg, double conf_threshold);

std::vector<GroundTruthImage> ground_truth_of(const Dataset& ds);

// Convenience: prompts + detect + evaluate for one mode.
APResult evaluate_mode(const std::string& mode, const Dataset& test, ParamStore& ps,
                       const ModelConfig& cfg, const PromptCache* cache, int n, uint64_t seed,
                       double conf_threshold);

// Scoped all-parameter freeze so inference passes skip gradient bookkeeping.
class InferenceGuard {
public:
    explicit InferenceGuard(ParamStore& ps);
    ~InferenceGuard();
    InferenceGuard(const InferenceGuard&) = delete;
    InferenceGuard& operator=(const InferenceGuard&) = delete;

private:
    ParamStore& ps_;
    std::set<std::string> saved_;
};

// One row of the ablation report.
struct AblateRow {
    int table = 0;                 // 4, 5, 6, 7 or 8
    std::string prompt_mode;       // text | visual | multimodal | avg_baseline
    int n = 0;                     // inference-time visual prompt count (0 = n/a)
    bool frozen = true;            // stage-2 detector freezing
    std::string fusion = "";       // fusion | avg (table 6)
    int stage2_m = 1;              // instances per category (table 7)
    std::string stage3_count = ""; // fusion training prompt count (table 8)
    double ap50 = 0.0, map = 0.0;
};

// Trains the stage-2/3 variants the selected tables need (starting from the
// given stage-1 parameters) and evaluates every grid cell. Deterministic in
// (inputs, seed).
std::vector<AblateRow> run_ablation(const ParamStore& stage1, const Dataset& train,
                                    const Dataset& test, const RunConfig& rc,
                                    const std::vector<int>& tables);

void write_ablation_csv(const std::string& path, const std::vector<AblateRow>& rows);

// ---- artifact writers (timestamp-free, deterministic bytes) ----

void write_metrics_json(const std::string& path, const APResult& ap,
                        const std::string& config_hash, uint64_t seed);
void write_detections_jsonl(const std::string& path, const std::vector<DetRecord>& dets,
                            const std::string& config_hash, uint64_t seed);
void write_loss_log_csv(const std::string& path, const StageResult& result);
void write_pr_csv(const std::string& path, const APResult& ap);

}  // namespace rsmpod
