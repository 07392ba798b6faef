#include "rsmpod/prompts.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>

#include <json.hpp>

#include "rsmpod/nn.hpp"

namespace rsmpod {

const std::string& CategoryPrompt::name() const {
    return std::visit([](const auto& p) -> const std::string& { return p.category_name; }, value);
}

std::vector<int> tokenize(const std::string& name, int vocab_size) {
    if (name.empty()) throw ValidationError("tokenize: empty category name");
    std::vector<int> ids;
    std::string tok;
    auto flush = [&]() {
        if (!tok.empty()) {
            ids.push_back(static_cast<int>(fnv1a(tok) % static_cast<uint64_t>(vocab_size)));
            tok.clear();
        }
    };
    for (char c : name) {
        if (std::isspace(static_cast<unsigned char>(c)) || c == '-' || c == '_')
            flush();
        else
            tok.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
    }
    flush();
    if (ids.empty()) throw ValidationError("tokenize: no tokens in \"" + name + "\"");
    return ids;
}

TextualPrompt encode_text(const std::string& name, ParamStore& ps, const ModelConfig& cfg) {
    std::vector<int> ids = tokenize(name, cfg.vocab_size);
    Tensor x = gather_rows(ps.at("text.embed"), ids);  // [n_k, d]
    Tensor a = multi_head_attention(x, x, x, cfg.heads, attention_params(ps, "text.attn"));
    Tensor y = layer_norm(add(x, a), ps.at("text.ln1.gamma"), ps.at("text.ln1.beta"));
    Tensor ff = linear(gelu(linear(y, ps.at("text.ffn.l1.w"), ps.at("text.ffn.l1.b"))),
                       ps.at("text.ffn.l2.w"), ps.at("text.ffn.l2.b"));
    Tensor z = layer_norm(add(y, ff), ps.at("text.ln2.gamma"), ps.at("text.ln2.beta"));
    return TextualPrompt{name, std::move(ids), z};
}

Tensor deformable_attention(const Tensor& query, const Box& ref, const std::vector<Tensor>& feats,
                            ParamStore& ps, const ModelConfig& cfg) {
    if (feats.empty()) throw ConfigError("deformable_attention: empty feature list");
    int L = static_cast<int>(feats.size());
    int H = cfg.heads, P = cfg.deform_points;
    Tensor r = query.rank() == 1 ? reshape(query, {1, query.dim(0)}) : query;

    Tensor offsets = linear(r, ps.at("vpe.deform.w_off"), ps.at("vpe.deform.b_off"));  // [1,H*L*P*2]
    Tensor logits = linear(r, ps.at("vpe.deform.w_att"), ps.at("vpe.deform.b_att"));   // [1,H*L*P]

    std::vector<Tensor> head_outs;
    head_outs.reserve(static_cast<size_t>(H));
    for (int h = 0; h < H; ++h) {
        Tensor weights = softmax_rows(slice_cols(logits, h * L * P, L * P));  // [1, L*P]
        Tensor acc;
        for (int l = 0; l < L; ++l)
            for (int p = 0; p < P; ++p) {
                size_t o = (static_cast<size_t>(h) * L * P + static_cast<size_t>(l) * P + p) * 2;
                Tensor px = add_scalar(scale(index(offsets, o), ref.w / 2), ref.cx);
                Tensor py = add_scalar(scale(index(offsets, o + 1), ref.h / 2), ref.cy);
                Tensor sample = bilinear_sample(feats[static_cast<size_t>(l)], build_vector({px, py}));
                Tensor weighted = scale_t(sample, index(weights, static_cast<size_t>(l) * P + p));
                acc = acc.defined() ? add(acc, weighted) : weighted;
            }
        head_outs.push_back(reshape(acc, {1, cfg.d}));
    }
    Tensor cat = head_outs.size() == 1 ? head_outs[0] : concat_cols(head_outs);
    return linear(cat, ps.at("vpe.deform.out.w"), ps.at("vpe.deform.out.b"));  // [1,d]
}

VisualPrompt encode_visual(const Box& b, const std::vector<Tensor>& feats, ParamStore& ps,
                           const ModelConfig& cfg, const std::string& category_name,
                           const std::string& instance_id) {
    Box checked = Box::validated(b.cx, b.cy, b.w, b.h);
    Tensor pe = reshape(box_pe(checked, cfg.d), {1, cfg.d});
    Tensor e = linear(gelu(linear(pe, ps.at("vpe.pe_mlp.l1.w"), ps.at("vpe.pe_mlp.l1.b"))),
                      ps.at("vpe.pe_mlp.l2.w"), ps.at("vpe.pe_mlp.l2.b"));
    Tensor content = reshape(ps.at("vpe.content"), {1, cfg.d});
    Tensor r = linear(concat_cols({e, content}), ps.at("vpe.query_proj.w"),
                      ps.at("vpe.query_proj.b"));
    Tensor z = deformable_attention(r, checked, feats, ps, cfg);
    Tensor ff = linear(gelu(linear(z, ps.at("vpe.ffn.l1.w"), ps.at("vpe.ffn.l1.b"))),
                       ps.at("vpe.ffn.l2.w"), ps.at("vpe.ffn.l2.b"));
    Tensor v = layer_norm(add(z, ff), ps.at("vpe.ln.gamma"), ps.at("vpe.ln.beta"));
    return VisualPrompt{category_name, reshape(v, {cfg.d}), instance_id};
}

FusedPrompt fuse(const TextualPrompt& g, const VisualPrompt& v, ParamStore& ps,
                 const ModelConfig& cfg) {
    if (g.features.dim(1) != static_cast<int>(v.embedding.size()))
        throw DimensionError("fuse: textual width " + std::to_string(g.features.dim(1)) +
                             " vs visual width " + std::to_string(v.embedding.size()));
    Tensor S = concat_rows({g.features, reshape(v.embedding, {1, cfg.d})});  // [n_k+1, d]
    Tensor u = reshape(ps.at("fusion.u"), {1, cfg.d});
    Tensor att = multi_head_attention(u, S, S, cfg.heads, attention_params(ps, "fusion.attn"));
    Tensor fused = layer_norm(add(u, att), ps.at("fusion.ln.gamma"), ps.at("fusion.ln.beta"));
    return FusedPrompt{g.category_name, reshape(fused, {cfg.d})};
}

void PromptCache::insert(const std::string& category, const std::string& instance_id,
                         std::vector<double> embedding) {
    if (dim == 0) dim = static_cast<int>(embedding.size());
    if (static_cast<int>(embedding.size()) != dim)
        throw DimensionError("prompt cache: embedding width " + std::to_string(embedding.size()) +
                             " vs cache dim " + std::to_string(dim));
    auto& list = entries[category];
    for (const auto& [id, _] : list)
        if (id == instance_id)
            throw ValidationError("prompt cache: duplicate instance id " + instance_id +
                                  " in category " + category);
    list.emplace_back(instance_id, std::move(embedding));
}

void PromptCache::save(const std::string& file, const std::string& config_hash,
                       uint64_t seed) const {
    nlohmann::ordered_json j;
    j["version"] = version;
    j["dim"] = dim;
    nlohmann::ordered_json ent = nlohmann::ordered_json::object();
    for (const auto& [cat, list] : entries) {
        nlohmann::ordered_json arr = nlohmann::ordered_json::array();
        for (const auto& [id, vec] : list) arr.push_back({{"id", id}, {"vec", vec}});
        ent[cat] = std::move(arr);
    }
    j["entries"] = std::move(ent);
    if (!config_hash.empty()) j["meta"] = {{"config_hash", config_hash}, {"seed", seed}};
    std::ofstream os(file);
    if (!os) throw IoError("cannot write prompt cache: " + file);
    os << j.dump(2) << "\n";
}

PromptCache PromptCache::load(const std::string& file) {
    std::ifstream is(file);
    if (!is) throw IoError("cannot open prompt cache: " + file);
    nlohmann::json j;
    try {
        is >> j;
    } catch (const nlohmann::json::exception& e) {
        throw IoError("prompt cache parse error in " + file + ": " + e.what());
    }
    PromptCache cache;
    if (!j.contains("version") || j["version"].get<int>() != 1)
        throw IoError("prompt cache: unsupported version in " + file);
    cache.dim = j.at("dim").get<int>();
    for (const auto& [cat, arr] : j.at("entries").items()) {
        for (const auto& item : arr) {
            auto vec = item.at("vec").get<std::vector<double>>();
            cache.insert(cat, item.at("id").get<std::string>(), std::move(vec));
        }
        if (cache.entries[cat].empty())
            throw ValidationError("prompt cache: empty category " + cat);
    }
    return cache;
}

VisualPrompt aggregate(const PromptCache& cache, const std::string& name, int n, Rng& rng) {
    if (n < 1) throw ValidationError("aggregate: n must be >= 1");
    auto it = cache.entries.find(name);
    if (it == cache.entries.end()) throw LookupError("aggregate: unknown category " + name);
    const auto& list = it->second;
    auto picks = rng.sample_without_replacement(list.size(), static_cast<size_t>(n));
    std::sort(picks.begin(), picks.end());
    std::vector<double> mean_vec(static_cast<size_t>(cache.dim), 0.0);
    for (size_t i : picks)
        for (size_t j = 0; j < mean_vec.size(); ++j) mean_vec[j] += list[i].second[j];
    for (auto& v : mean_vec) v /= static_cast<double>(picks.size());
    return VisualPrompt{name, Tensor::from_values({cache.dim}, std::move(mean_vec)),
                        "aggregated(" + std::to_string(n) + ")"};
}

void register_prompt_params(ParamStore& ps, const ModelConfig& cfg, uint64_t seed) {
    int d = cfg.d;
    // textual prompt encoder
    ps.create("text.embed", xavier_uniform({cfg.vocab_size, d}, d, d,
                                           mix_seed(seed, fnv1a("text.embed"))));
    register_attention(ps, "text.attn", d, seed);
    register_layer_norm(ps, "text.ln1", d);
    register_linear(ps, "text.ffn.l1", d, cfg.ffn_mult * d, seed);
    register_linear(ps, "text.ffn.l2", cfg.ffn_mult * d, d, seed);
    register_layer_norm(ps, "text.ln2", d);

    // visual prompt encoder
    register_linear(ps, "vpe.pe_mlp.l1", d, d, seed);
    register_linear(ps, "vpe.pe_mlp.l2", d, d, seed);
    register_vector(ps, "vpe.content", d, seed);
    register_linear(ps, "vpe.query_proj", 2 * d, d, seed);
    int H = cfg.heads, L = cfg.levels, P = cfg.deform_points;
    // offsets start on a fixed per-point pattern inside the box; weights start uniform
    ps.create("vpe.deform.w_off", Tensor::zeros({d, H * L * P * 2}, true));
    {
        std::vector<double> b_off(static_cast<size_t>(H * L * P * 2));
        for (int h = 0; h < H; ++h)
            for (int l = 0; l < L; ++l)
                for (int p = 0; p < P; ++p) {
                    double radius = H > 1 ? 0.3 + 0.4 * h / (H - 1) : 0.5;
                    double angle = 6.283185307179586 * (p + 0.5) / P;
                    size_t o = (static_cast<size_t>(h) * L * P + static_cast<size_t>(l) * P + p) * 2;
                    b_off[o] = radius * std::cos(angle);
                    b_off[o + 1] = radius * std::sin(angle);
                }
        ps.create("vpe.deform.b_off", Tensor::from_values({H * L * P * 2}, std::move(b_off), true));
    }
    ps.create("vpe.deform.w_att", Tensor::zeros({d, H * L * P}, true));
    ps.create("vpe.deform.b_att", Tensor::zeros({H * L * P}, true));
    register_linear(ps, "vpe.deform.out", H * d, d, seed);
    register_linear(ps, "vpe.ffn.l1", d, cfg.ffn_mult * d, seed);
    register_linear(ps, "vpe.ffn.l2", cfg.ffn_mult * d, d, seed);
    register_layer_norm(ps, "vpe.ln", d);

    // multimodal fusion
    register_vector(ps, "fusion.u", d, seed);
    register_attention(ps, "fusion.attn", d, seed);
    register_layer_norm(ps, "fusion.ln", d);
}

}  // namespace rsmpod
