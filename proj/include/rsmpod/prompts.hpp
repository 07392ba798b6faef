#pragma once
#include <cstdint>
#include <map>
#include <string>
#include <variant>
#include <vector>

#include "rsmpod/geometry.hpp"
#include "rsmpod/model_config.hpp"
#include "rsmpod/param_store.hpp"
#include "rsmpod/rng.hpp"
#include "rsmpod/tensor.hpp"

namespace rsmpod {

struct TextualPrompt {
    std::string category_name;
    std::vector<int> tokens;
    Tensor features;  // [n_k, d]
};

struct VisualPrompt {
    std::string category_name;
    Tensor embedding;  // [d]
    std::string source;
};

struct FusedPrompt {
    std::string category_name;
    Tensor embedding;  // [d]
};

// Tagged union over the three prompt flavors; what the classifier consumes.
struct CategoryPrompt {
    std::variant<TextualPrompt, VisualPrompt, FusedPrompt> value;

    const std::string& name() const;
    bool is_text() const { return std::holds_alternative<TextualPrompt>(value); }
    static CategoryPrompt text(TextualPrompt p) { return {std::move(p)}; }
    static CategoryPrompt visual(VisualPrompt p) { return {std::move(p)}; }
    static CategoryPrompt fused(FusedPrompt p) { return {std::move(p)}; }
};

// Lowercases, splits on whitespace/hyphen/underscore, hashes each token with
// FNV-1a into the vocabulary.
std::vector<int> tokenize(const std::string& name, int vocab_size = 1024);

TextualPrompt encode_text(const std::string& name, ParamStore& ps, const ModelConfig& cfg);

// Aggregates multi-scale visual information around a reference box: per head
// and level, offsets and attention logits are linear in the query; offsets
// are scaled by half the box extent; weights are softmax-normalized per head.
Tensor deformable_attention(const Tensor& query, const Box& ref, const std::vector<Tensor>& feats,
                            ParamStore& ps, const ModelConfig& cfg);

VisualPrompt encode_visual(const Box& b, const std::vector<Tensor>& feats, ParamStore& ps,
                           const ModelConfig& cfg, const std::string& category_name = "",
                           const std::string& instance_id = "");

FusedPrompt fuse(const TextualPrompt& g, const VisualPrompt& v, ParamStore& ps,
                 const ModelConfig& cfg);

// Per-category store of instance-level visual prompt embeddings.
struct PromptCache {
    int version = 1;
    int dim = 0;
    // category -> ordered (instance id, embedding) pairs
    std::map<std::string, std::vector<std::pair<std::string, std::vector<double>>>> entries;

    void insert(const std::string& category, const std::string& instance_id,
                std::vector<double> embedding);
    void save(const std::string& file, const std::string& config_hash = "",
              uint64_t seed = 0) const;
    static PromptCache load(const std::string& file);
};

// Samples min(n, available) distinct cached embeddings and averages them.
VisualPrompt aggregate(const PromptCache& cache, const std::string& name, int n, Rng& rng);

// Registers text encoder, visual prompt encoder, and fusion parameters.
void register_prompt_params(ParamStore& ps, const ModelConfig& cfg, uint64_t master_seed);

}  // namespace rsmpod
