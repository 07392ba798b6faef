#include "rsmpod/detector.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "rsmpod/nn.hpp"

namespace rsmpod {

namespace {

Tensor conv_stage(const Tensor& x, ParamStore& ps, const std::string& prefix) {
    const Tensor& w = ps.at(prefix + ".w");  // [9*c_in, c_out]
    int h = x.dim(0), wdt = x.dim(1);
    int c_out = w.dim(1);
    Tensor cols = im2col(x, 3, 2, 1);
    Tensor y = gelu(linear(cols, w, ps.at(prefix + ".b")));
    return reshape(y, {(h + 1) / 2, (wdt + 1) / 2, c_out});
}

// 2D sinusoidal encoding for an h x w grid of token centers.
std::vector<double> grid_pos_encoding(int h, int w, int d) {
    int half = d / 2;
    int pairs = half / 2;
    constexpr double two_pi = 6.283185307179586;
    std::vector<double> out(static_cast<size_t>(h) * w * d);
    for (int r = 0; r < h; ++r)
        for (int c = 0; c < w; ++c) {
            double x = (c + 0.5) / w, y = (r + 0.5) / h;
            double* row = out.data() + (static_cast<size_t>(r) * w + c) * d;
            for (int j = 0; j < pairs; ++j) {
                double freq = two_pi / std::pow(10000.0, (2.0 * j) / half);
                row[2 * j] = std::sin(freq * x);
                row[2 * j + 1] = std::cos(freq * x);
                row[half + 2 * j] = std::sin(freq * y);
                row[half + 2 * j + 1] = std::cos(freq * y);
            }
        }
    return out;
}

Tensor encoder_block(const Tensor& x, ParamStore& ps, const std::string& prefix, int heads) {
    Tensor a = multi_head_attention(x, x, x, heads, attention_params(ps, prefix + ".attn"));
    Tensor y = layer_norm(add(x, a), ps.at(prefix + ".ln1.gamma"), ps.at(prefix + ".ln1.beta"));
    Tensor ff = linear(gelu(linear(y, ps.at(prefix + ".ffn.l1.w"), ps.at(prefix + ".ffn.l1.b"))),
                       ps.at(prefix + ".ffn.l2.w"), ps.at(prefix + ".ffn.l2.b"));
    return layer_norm(add(y, ff), ps.at(prefix + ".ln2.gamma"), ps.at(prefix + ".ln2.beta"));
}

}  // namespace

void register_model_params(ParamStore& ps, const ModelConfig& cfg, uint64_t seed) {
    int d = cfg.d, stem = cfg.backbone_stem_channels();
    register_linear(ps, "backbone.conv1", 9 * 3, stem, seed);
    register_linear(ps, "backbone.conv2", 9 * stem, d, seed);
    register_linear(ps, "backbone.conv3", 9 * d, d, seed);
    register_linear(ps, "backbone.conv4", 9 * d, d, seed);

    ps.create("encoder.level_embed",
              xavier_uniform({cfg.levels, d}, d, d, mix_seed(seed, fnv1a("encoder.level_embed"))));
    for (int i = 0; i < cfg.enc_layers; ++i) {
        std::string prefix = "encoder.layer" + std::to_string(i);
        register_attention(ps, prefix + ".attn", d, seed);
        register_layer_norm(ps, prefix + ".ln1", d);
        register_linear(ps, prefix + ".ffn.l1", d, cfg.ffn_mult * d, seed);
        register_linear(ps, prefix + ".ffn.l2", cfg.ffn_mult * d, d, seed);
        register_layer_norm(ps, prefix + ".ln2", d);
    }
    for (int i = 0; i < cfg.dec_layers; ++i) {
        std::string prefix = "decoder.layer" + std::to_string(i);
        register_attention(ps, prefix + ".self", d, seed);
        register_layer_norm(ps, prefix + ".ln1", d);
        register_attention(ps, prefix + ".cross", d, seed);
        register_layer_norm(ps, prefix + ".ln2", d);
        register_linear(ps, prefix + ".ffn.l1", d, cfg.ffn_mult * d, seed);
        register_linear(ps, prefix + ".ffn.l2", cfg.ffn_mult * d, d, seed);
        register_layer_norm(ps, prefix + ".ln3", d);
    }
    register_linear(ps, "box_head.l1", d, d, seed);
    register_linear(ps, "box_head.l2", d, d, seed);
    register_linear(ps, "box_head.l3", d, 4, seed, /*zero_init=*/true);
    register_vector(ps, "bg_prompt", d, seed);

    register_prompt_params(ps, cfg, seed);
}

MultiScaleFeatures backbone_forward(const Tensor& image, ParamStore& ps, const ModelConfig& cfg) {
    if (image.rank() != 3 || image.dim(0) != cfg.image_size || image.dim(1) != cfg.image_size ||
        image.dim(2) != 3)
        throw DimensionError("backbone: expected [" + std::to_string(cfg.image_size) + "," +
                             std::to_string(cfg.image_size) + ",3], got " +
                             shape_str(image.shape()));
    Tensor stem = conv_stage(image, ps, "backbone.conv1");   // 32x32
    Tensor l1 = conv_stage(stem, ps, "backbone.conv2");      // 16x16, stride 4
    Tensor l2 = conv_stage(l1, ps, "backbone.conv3");        // 8x8, stride 8
    Tensor l3 = conv_stage(l2, ps, "backbone.conv4");        // 4x4, stride 16
    return MultiScaleFeatures{{l1, l2, l3}};
}

Tensor flatten_tokens(const MultiScaleFeatures& f) {
    std::vector<Tensor> parts;
    parts.reserve(f.levels.size());
    for (const auto& lvl : f.levels)
        parts.push_back(reshape(lvl, {lvl.dim(0) * lvl.dim(1), lvl.dim(2)}));
    return parts.size() == 1 ? parts[0] : concat_rows(parts);
}

Tensor token_pos_encoding(const MultiScaleFeatures& f, const ModelConfig& cfg) {
    std::vector<double> all;
    for (const auto& lvl : f.levels) {
        auto pe = grid_pos_encoding(lvl.dim(0), lvl.dim(1), cfg.d);
        all.insert(all.end(), pe.begin(), pe.end());
    }
    int rows = static_cast<int>(all.size()) / cfg.d;
    return Tensor::from_values({rows, cfg.d}, std::move(all));
}

namespace {

// tokens + positional + per-level embedding, aligned with flatten_tokens
Tensor tokens_with_encodings(const MultiScaleFeatures& f, ParamStore& ps, const ModelConfig& cfg) {
    Tensor level_embed = ps.at("encoder.level_embed");
    std::vector<Tensor> parts;
    for (size_t l = 0; l < f.levels.size(); ++l) {
        const auto& lvl = f.levels[l];
        Tensor flat = reshape(lvl, {lvl.dim(0) * lvl.dim(1), lvl.dim(2)});
        Tensor emb = reshape(slice_rows(level_embed, static_cast<int>(l), 1), {cfg.d});
        parts.push_back(add_rowvec(flat, emb));
    }
    Tensor tokens = parts.size() == 1 ? parts[0] : concat_rows(parts);
    return add(tokens, token_pos_encoding(f, cfg));
}

}  // namespace

MultiScaleFeatures encoder_forward(const MultiScaleFeatures& f, ParamStore& ps,
                                   const ModelConfig& cfg) {
    Tensor x = tokens_with_encodings(f, ps, cfg);
    for (int i = 0; i < cfg.enc_layers; ++i)
        x = encoder_block(x, ps, "encoder.layer" + std::to_string(i), cfg.heads);
    MultiScaleFeatures out;
    int row = 0;
    for (const auto& lvl : f.levels) {
        int n = lvl.dim(0) * lvl.dim(1);
        out.levels.push_back(reshape(slice_rows(x, row, n), lvl.shape()));
        row += n;
    }
    return out;
}

Tensor category_similarity(const Tensor& x, const CategoryPrompt& p, const ModelConfig& cfg) {
    if (const auto* t = std::get_if<TextualPrompt>(&p.value)) {
        int n_k = t->features.dim(0);
        Tensor best;
        std::vector<Tensor> sims;
        for (int j = 0; j < n_k; ++j) {
            Tensor sim = cosine(x, reshape(slice_rows(t->features, j, 1), {cfg.d}));
            if (cfg.text_reduce == "mean")
                sims.push_back(sim);
            else
                best = best.defined() ? max_elem(best, sim) : sim;
        }
        if (cfg.text_reduce == "mean") return mean(build_vector(sims));
        return best;
    }
    if (const auto* v = std::get_if<VisualPrompt>(&p.value)) return cosine(x, v->embedding);
    return cosine(x, std::get<FusedPrompt>(p.value).embedding);
}

double category_similarity_value(const std::vector<double>& x, const CategoryPrompt& p,
                                 const ModelConfig& cfg) {
    auto cos_v = [&](const double* e, size_t n) {
        double dot = 0, nx = 0, ne = 0;
        for (size_t i = 0; i < n; ++i) {
            dot += x[i] * e[i];
            nx += x[i] * x[i];
            ne += e[i] * e[i];
        }
        return dot / (std::max(std::sqrt(nx), 1e-12) * std::max(std::sqrt(ne), 1e-12));
    };
    if (const auto* t = std::get_if<TextualPrompt>(&p.value)) {
        const auto& feat = t->features;
        int n_k = feat.dim(0), d = feat.dim(1);
        double acc = cfg.text_reduce == "mean" ? 0.0 : -2.0;
        for (int j = 0; j < n_k; ++j) {
            double s = cos_v(feat.values().data() + static_cast<size_t>(j) * d,
                             static_cast<size_t>(d));
            acc = cfg.text_reduce == "mean" ? acc + s / n_k : std::max(acc, s);
        }
        return acc;
    }
    if (const auto* v = std::get_if<VisualPrompt>(&p.value))
        return cos_v(v->embedding.values().data(), v->embedding.size());
    const auto& e = std::get<FusedPrompt>(p.value).embedding;
    return cos_v(e.values().data(), e.size());
}

std::vector<Query> select_queries(const MultiScaleFeatures& enc,
                                  const std::vector<CategoryPrompt>& prompts, ParamStore& ps,
                                  const ModelConfig& cfg) {
    (void)ps;
    if (prompts.empty()) throw ValidationError("select_queries: empty prompt list");
    Tensor tokens = flatten_tokens(enc);
    int n_tokens = tokens.dim(0), d = tokens.dim(1);
    if (cfg.num_queries > n_tokens)
        throw ConfigError("select_queries: more queries than tokens");

    std::vector<double> score(static_cast<size_t>(n_tokens), -2.0);
    std::vector<double> feat(static_cast<size_t>(d));
    for (int t = 0; t < n_tokens; ++t) {
        std::copy(tokens.values().begin() + static_cast<size_t>(t) * d,
                  tokens.values().begin() + static_cast<size_t>(t + 1) * d, feat.begin());
        for (const auto& p : prompts)
            score[t] = std::max(score[t], category_similarity_value(feat, p, cfg));
    }
    std::vector<int> order(static_cast<size_t>(n_tokens));
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](int a, int b) {
        if (score[a] != score[b]) return score[a] > score[b];
        return a < b;  // tie-break: lower flat token index
    });

    // flat index -> (level, row, col)
    std::vector<int> level_start;
    int acc = 0;
    for (const auto& lvl : enc.levels) {
        level_start.push_back(acc);
        acc += lvl.dim(0) * lvl.dim(1);
    }
    std::vector<Query> queries;
    queries.reserve(static_cast<size_t>(cfg.num_queries));
    for (int qi = 0; qi < cfg.num_queries; ++qi) {
        int flat = order[qi];
        int level = static_cast<int>(enc.levels.size()) - 1;
        while (level > 0 && flat < level_start[level]) --level;
        int local = flat - level_start[level];
        int w = enc.levels[level].dim(1);
        int row = local / w, col = local % w;
        double extent = cfg.ref_extents[static_cast<size_t>(level)];
        Box ref{(col + 0.5) / w, (row + 0.5) / enc.levels[level].dim(0), extent, extent};
        Tensor content = reshape(gather_rows(tokens, {flat}), {d});
        queries.push_back(Query{content, ref, level, row, col, score[flat]});
    }
    return queries;
}

Tensor decoder_forward(const std::vector<Query>& queries, const MultiScaleFeatures& enc,
                       ParamStore& ps, const ModelConfig& cfg) {
    if (queries.empty()) throw ValidationError("decoder_forward: no queries");
    std::vector<Tensor> rows;
    rows.reserve(queries.size());
    for (const auto& q : queries) rows.push_back(reshape(q.content, {1, cfg.d}));
    Tensor x = rows.size() == 1 ? rows[0] : concat_rows(rows);
    Tensor kv = tokens_with_encodings(enc, ps, cfg);
    for (int i = 0; i < cfg.dec_layers; ++i) {
        std::string prefix = "decoder.layer" + std::to_string(i);
        Tensor sa = multi_head_attention(x, x, x, cfg.heads, attention_params(ps, prefix + ".self"));
        x = layer_norm(add(x, sa), ps.at(prefix + ".ln1.gamma"), ps.at(prefix + ".ln1.beta"));
        Tensor ca = multi_head_attention(x, kv, kv, cfg.heads, attention_params(ps, prefix + ".cross"));
        x = layer_norm(add(x, ca), ps.at(prefix + ".ln2.gamma"), ps.at(prefix + ".ln2.beta"));
        Tensor ff = linear(gelu(linear(x, ps.at(prefix + ".ffn.l1.w"), ps.at(prefix + ".ffn.l1.b"))),
                           ps.at(prefix + ".ffn.l2.w"), ps.at(prefix + ".ffn.l2.b"));
        x = layer_norm(add(x, ff), ps.at(prefix + ".ln3.gamma"), ps.at(prefix + ".ln3.beta"));
    }
    return x;
}

Tensor predict_box(const Tensor& query_row, ParamStore& ps, const ModelConfig& cfg) {
    (void)cfg;
    Tensor h1 = gelu(linear(query_row, ps.at("box_head.l1.w"), ps.at("box_head.l1.b")));
    Tensor h2 = gelu(linear(h1, ps.at("box_head.l2.w"), ps.at("box_head.l2.b")));
    Tensor out = sigmoid(linear(h2, ps.at("box_head.l3.w"), ps.at("box_head.l3.b")));
    return reshape(out, {4});
}

Tensor classify(const Tensor& query_row, const std::vector<CategoryPrompt>& prompts, double tau,
                ParamStore& ps, const ModelConfig& cfg) {
    if (tau <= 0.0) throw ConfigError("classify: temperature must be positive");
    Tensor q = query_row.rank() == 2 ? reshape(query_row, {cfg.d}) : query_row;
    std::vector<Tensor> sims;
    sims.reserve(prompts.size() + 1);
    for (const auto& p : prompts) sims.push_back(category_similarity(q, p, cfg));
    sims.push_back(cosine(q, ps.at("bg_prompt")));
    Tensor logits = scale(build_vector(sims), 1.0 / tau);
    return softmax_rows(logits);  // [K+1]
}

DetectorForward run_detector(const Tensor& image, const std::vector<CategoryPrompt>& prompts,
                             ParamStore& ps, const ModelConfig& cfg) {
    DetectorForward fw;
    fw.encoded = encoder_forward(backbone_forward(image, ps, cfg), ps, cfg);
    fw.queries = select_queries(fw.encoded, prompts, ps, cfg);
    fw.refined = decoder_forward(fw.queries, fw.encoded, ps, cfg);
    int Q = fw.refined.dim(0);
    fw.probs.reserve(static_cast<size_t>(Q));
    fw.boxes.reserve(static_cast<size_t>(Q));
    for (int i = 0; i < Q; ++i) {
        Tensor row = slice_rows(fw.refined, i, 1);
        fw.probs.push_back(classify(row, prompts, cfg.tau, ps, cfg));
        fw.boxes.push_back(predict_box(row, ps, cfg));
    }
    return fw;
}

std::vector<Detection> detect(const Tensor& image, const std::vector<CategoryPrompt>& prompts,
                              double tau, double conf_threshold, ParamStore& ps,
                              const ModelConfig& cfg) {
    ModelConfig run_cfg = cfg;
    run_cfg.tau = tau;
    DetectorForward fw = run_detector(image, prompts, ps, run_cfg);
    std::vector<Detection> dets;
    int K = static_cast<int>(prompts.size());
    for (size_t i = 0; i < fw.probs.size(); ++i) {
        const auto& probs = fw.probs[i].values();
        int best = 0;
        for (int k = 1; k < K; ++k)
            if (probs[k] > probs[best]) best = k;
        double conf = probs[best];
        if (conf < conf_threshold) continue;
        const auto& bv = fw.boxes[i].values();
        Detection det;
        det.box = Box{bv[0], bv[1], bv[2], bv[3]};
        det.scores.assign(probs.begin(), probs.begin() + K);
        det.label = best;
        det.category = prompts[static_cast<size_t>(best)].name();
        det.confidence = conf;
        dets.push_back(std::move(det));
    }
    return dets;
}

}  // namespace rsmpod
