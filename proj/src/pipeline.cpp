#include "rsmpod/pipeline.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>

#include <json.hpp>

namespace rsmpod {

namespace {

std::string image_id_of(int index) {
    char buf[16];
    std::snprintf(buf, sizeof(buf), "%06d", index);
    return buf;
}

}  // namespace

InferenceGuard::InferenceGuard(ParamStore& ps) : ps_(ps), saved_(ps.frozen_prefixes()) {
    ps_.set_frozen_prefixes({""});  // empty prefix matches every path
}

InferenceGuard::~InferenceGuard() { ps_.set_frozen_prefixes(saved_); }

PromptCache build_cache(const Dataset& train, ParamStore& ps, const ModelConfig& cfg) {
    if (train.scenes.empty()) throw ValidationError("build_cache: empty dataset");
    InferenceGuard guard(ps);
    PromptCache cache;
    cache.dim = cfg.d;
    for (const auto& scene : train.scenes) {
        MultiScaleFeatures enc = encoder_forward(backbone_forward(scene.image, ps, cfg), ps, cfg);
        for (size_t a = 0; a < scene.annotations.size(); ++a) {
            const auto& ann = scene.annotations[a];
            std::string id = image_id_of(scene.index) + "/" + std::to_string(a);
            VisualPrompt vp = encode_visual(ann.box, enc.levels, ps, cfg, ann.category, id);
            cache.insert(ann.category, id, vp.embedding.values());
        }
    }
    return cache;
}

std::vector<CategoryPrompt> make_eval_prompts(const std::string& mode,
                                              const std::vector<std::string>& categories,
                                              ParamStore& ps, const ModelConfig& cfg,
                                              const PromptCache* cache, int n, uint64_t seed) {
    auto need_cache = [&]() {
        if (!cache)
            throw ConfigError("prompt mode \"" + mode + "\" requires a prompt cache");
        return cache;
    };
    auto category_rng = [&](const std::string& name) {
        return Rng(mix_seed(mix_seed(seed, static_cast<uint64_t>(n)), fnv1a(name)));
    };
    std::vector<CategoryPrompt> prompts;
    for (const auto& name : categories) {
        if (mode == "text") {
            prompts.push_back(CategoryPrompt::text(encode_text(name, ps, cfg)));
        } else if (mode == "visual") {
            Rng rng = category_rng(name);
            prompts.push_back(CategoryPrompt::visual(aggregate(*need_cache(), name, n, rng)));
        } else if (mode == "multimodal") {
            Rng rng = category_rng(name);
            TextualPrompt g = encode_text(name, ps, cfg);
            VisualPrompt v = aggregate(*need_cache(), name, n, rng);
            prompts.push_back(CategoryPrompt::fused(fuse(g, v, ps, cfg)));
        } else if (mode == "avg_baseline") {
            // non-learnable fusion: add the visual prompt to every token
            // feature, then mean-pool over tokens
            Rng rng = category_rng(name);
            TextualPrompt g = encode_text(name, ps, cfg);
            VisualPrompt v = aggregate(*need_cache(), name, n, rng);
            Tensor shifted = add_rowvec(g.features, v.embedding);
            int n_k = shifted.dim(0);
            Tensor pooled = scale(matmul(Tensor::full({1, n_k}, 1.0), shifted),
                                  1.0 / static_cast<double>(n_k));
            prompts.push_back(CategoryPrompt::fused(FusedPrompt{name, reshape(pooled, {cfg.d})}));
        } else {
            throw ConfigError("unknown prompt mode: " + mode);
        }
    }
    return prompts;
}

std::vector<DetRecord> detect_scenes(const Dataset& ds,
                                     const std::vector<CategoryPrompt>& prompts, ParamStore& ps,
                                     const ModelConfig& cfg, double conf_threshold) {
    InferenceGuard guard(ps);
    std::vector<DetRecord> records;
    for (const auto& scene : ds.scenes) {
        auto dets = detect(scene.image, prompts, cfg.tau, conf_threshold, ps, cfg);
        for (const auto& d : dets)
            records.push_back(DetRecord{image_id_of(scene.index), d.category, d.box, d.confidence});
    }
    return records;
}

std::vector<GroundTruthImage> ground_truth_of(const Dataset& ds) {
    std::vector<GroundTruthImage> gts;
    gts.reserve(ds.scenes.size());
    for (const auto& scene : ds.scenes)
        gts.push_back(GroundTruthImage{image_id_of(scene.index), scene.annotations});
    return gts;
}

APResult evaluate_mode(const std::string& mode, const Dataset& test, ParamStore& ps,
                       const ModelConfig& cfg, const PromptCache* cache, int n, uint64_t seed,
                       double conf_threshold) {
    InferenceGuard guard(ps);
    std::vector<std::string> categories;
    for (const auto& c : test.spec.categories) categories.push_back(c.name);
    auto prompts = make_eval_prompts(mode, categories, ps, cfg, cache, n, seed);
    auto dets = detect_scenes(test, prompts, ps, cfg, conf_threshold);
    return evaluate(dets, ground_truth_of(test), categories);
}

std::vector<AblateRow> run_ablation(const ParamStore& stage1, const Dataset& train,
                                    const Dataset& test, const RunConfig& rc,
                                    const std::vector<int>& tables) {
    auto wants = [&](int t) {
        return std::find(tables.begin(), tables.end(), t) != tables.end();
    };
    const ModelConfig& model = rc.model;
    const int n_mm = rc.visual_prompt_count;

    // default stage-2 (frozen) + cache; almost every table needs it
    ParamStore ps2 = deep_copy(stage1);
    run_stage(rc.stage2, ps2, train, model, nullptr, rc.seed);
    PromptCache cache2 = build_cache(train, ps2, model);

    // default stage-3 fusion (lazily trained)
    ParamStore ps3;
    bool have_ps3 = false;
    auto ensure_ps3 = [&]() -> ParamStore& {
        if (!have_ps3) {
            ps3 = deep_copy(ps2);
            run_stage(rc.stage3, ps3, train, model, &cache2, rc.seed);
            have_ps3 = true;
        }
        return ps3;
    };

    std::vector<AblateRow> rows;
    auto eval_visual = [&](ParamStore& ps, const PromptCache& cache, int n) {
        return evaluate_mode("visual", test, ps, model, &cache, n, rc.seed, rc.conf_threshold);
    };

    if (wants(4)) {
        APResult text = evaluate_mode("text", test, ps2, model, nullptr, 1, rc.seed,
                                      rc.conf_threshold);
        rows.push_back({4, "text", 0, true, "", rc.stage2.instances_per_category, "", text.ap50,
                        text.map});
        for (int n : {1, 4, 8, 16, 32}) {
            APResult r = eval_visual(ps2, cache2, n);
            rows.push_back({4, "visual", n, true, "", rc.stage2.instances_per_category, "",
                            r.ap50, r.map});
        }
        APResult mm = evaluate_mode("multimodal", test, ensure_ps3(), model, &cache2, n_mm,
                                    rc.seed, rc.conf_threshold);
        rows.push_back({4, "multimodal", n_mm, true, "fusion", rc.stage2.instances_per_category,
                        rc.stage3.fusion_train_prompt_count, mm.ap50, mm.map});
    }
    if (wants(5)) {
        APResult frozen = eval_visual(ps2, cache2, 32);
        rows.push_back({5, "visual", 32, true, "", rc.stage2.instances_per_category, "",
                        frozen.ap50, frozen.map});
        ParamStore psu = deep_copy(stage1);
        StageConfig unfrozen_cfg = rc.stage2;
        unfrozen_cfg.freeze_detector = false;
        run_stage(unfrozen_cfg, psu, train, model, nullptr, rc.seed);
        PromptCache cache_u = build_cache(train, psu, model);
        APResult unfrozen = eval_visual(psu, cache_u, 32);
        rows.push_back({5, "visual", 32, false, "", rc.stage2.instances_per_category, "",
                        unfrozen.ap50, unfrozen.map});
    }
    if (wants(6)) {
        APResult fusion = evaluate_mode("multimodal", test, ensure_ps3(), model, &cache2, n_mm,
                                        rc.seed, rc.conf_threshold);
        rows.push_back({6, "multimodal", n_mm, true, "fusion", rc.stage2.instances_per_category,
                        rc.stage3.fusion_train_prompt_count, fusion.ap50, fusion.map});
        APResult avg = evaluate_mode("avg_baseline", test, ps2, model, &cache2, n_mm, rc.seed,
                                     rc.conf_threshold);
        rows.push_back({6, "multimodal", n_mm, true, "avg", rc.stage2.instances_per_category, "",
                        avg.ap50, avg.map});
    }
    if (wants(7)) {
        for (int m : {1, 4, 8}) {
            if (m == rc.stage2.instances_per_category) {
                APResult r = eval_visual(ps2, cache2, 32);
                rows.push_back({7, "visual", 32, true, "", m, "", r.ap50, r.map});
            } else {
                ParamStore psm = deep_copy(stage1);
                StageConfig cfg_m = rc.stage2;
                cfg_m.instances_per_category = m;
                run_stage(cfg_m, psm, train, model, nullptr, rc.seed);
                PromptCache cache_m = build_cache(train, psm, model);
                APResult r = eval_visual(psm, cache_m, 32);
                rows.push_back({7, "visual", 32, true, "", m, "", r.ap50, r.map});
            }
        }
    }
    if (wants(8)) {
        for (const std::string count : {"1", "random", "32"}) {
            if (count == rc.stage3.fusion_train_prompt_count) {
                APResult r = evaluate_mode("multimodal", test, ensure_ps3(), model, &cache2, n_mm,
                                           rc.seed, rc.conf_threshold);
                rows.push_back({8, "multimodal", n_mm, true, "fusion",
                                rc.stage2.instances_per_category, count, r.ap50, r.map});
            } else {
                ParamStore psc = deep_copy(ps2);
                StageConfig cfg_c = rc.stage3;
                cfg_c.fusion_train_prompt_count = count;
                run_stage(cfg_c, psc, train, model, &cache2, rc.seed);
                APResult r = evaluate_mode("multimodal", test, psc, model, &cache2, n_mm, rc.seed,
                                           rc.conf_threshold);
                rows.push_back({8, "multimodal", n_mm, true, "fusion",
                                rc.stage2.instances_per_category, count, r.ap50, r.map});
            }
        }
    }
    return rows;
}

void write_ablation_csv(const std::string& path, const std::vector<AblateRow>& rows) {
    std::ofstream os(path);
    if (!os) throw IoError("cannot write ablation report: " + path);
    os << "table,prompt_mode,n,frozen,fusion,stage2_m,stage3_count,ap50,map\n";
    char buf[256];
    for (const auto& r : rows) {
        std::snprintf(buf, sizeof(buf), "%d,%s,%d,%s,%s,%d,%s,%.6f,%.6f\n", r.table,
                      r.prompt_mode.c_str(), r.n, r.frozen ? "true" : "false", r.fusion.c_str(),
                      r.stage2_m, r.stage3_count.c_str(), r.ap50, r.map);
        os << buf;
    }
}

void write_metrics_json(const std::string& path, const APResult& ap,
                        const std::string& config_hash, uint64_t seed) {
    nlohmann::ordered_json j;
    j["config_hash"] = config_hash;
    j["seed"] = seed;
    j["ap50"] = ap.ap50;
    j["map"] = ap.map;
    nlohmann::ordered_json per = nlohmann::ordered_json::object();
    for (const auto& [cat, ce] : ap.per_category)
        per[cat] = {{"ap50", ce.ap50}, {"ap", ce.ap_mean}, {"num_gt", ce.num_gt}};
    j["per_category"] = std::move(per);
    std::ofstream os(path);
    if (!os) throw IoError("cannot write metrics: " + path);
    os << j.dump(2) << "\n";
}

void write_detections_jsonl(const std::string& path, const std::vector<DetRecord>& dets,
                            const std::string& config_hash, uint64_t seed) {
    std::ofstream os(path);
    if (!os) throw IoError("cannot write detections: " + path);
    nlohmann::ordered_json meta;
    meta["meta"] = {{"config_hash", config_hash}, {"seed", seed}};
    os << meta.dump() << "\n";
    for (const auto& d : dets) {
        nlohmann::ordered_json j;
        j["image"] = d.image_id;
        j["category"] = d.category;
        j["box"] = {d.box.cx, d.box.cy, d.box.w, d.box.h};
        j["score"] = d.confidence;
        os << j.dump() << "\n";
    }
}

void write_loss_log_csv(const std::string& path, const StageResult& result) {
    std::ofstream os(path);
    if (!os) throw IoError("cannot write loss log: " + path);
    os << "step,cls,l1,giou,total\n";
    char buf[160];
    for (const auto& row : result.loss_log) {
        std::snprintf(buf, sizeof(buf), "%d,%.17g,%.17g,%.17g,%.17g\n",
                      static_cast<int>(row[0]), row[1], row[2], row[3], row[4]);
        os << buf;
    }
}

void write_pr_csv(const std::string& path, const APResult& ap) {
    std::ofstream os(path);
    if (!os) throw IoError("cannot write PR curve: " + path);
    os << "category,recall,precision\n";
    char buf[160];
    for (const auto& [cat, ce] : ap.per_category)
        for (const auto& p : ce.pr50) {
            std::snprintf(buf, sizeof(buf), "%s,%.17g,%.17g\n", cat.c_str(), p.recall, p.precision);
            os << buf;
        }
}

}  // namespace rsmpod
