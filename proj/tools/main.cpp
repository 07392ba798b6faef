#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "rsmpod/gradcheck.hpp"
#include "rsmpod/pipeline.hpp"

namespace fs = std::filesystem;
using namespace rsmpod;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitConfig = 2;
constexpr int kExitMissing = 3;
constexpr int kExitCheckFailed = 4;

struct Cli {
    std::string config_path;
    std::string out_dir;
    uint64_t seed = 0;
    bool seed_set = false;
    std::vector<std::string> overrides;
};

RunConfig load_config(const Cli& cli) {
    RunConfig rc = cli.config_path.empty() ? RunConfig::defaults()
                                           : RunConfig::from_file(cli.config_path);
    if (cli.seed_set) rc.apply_override("seed=" + std::to_string(cli.seed));
    if (!cli.out_dir.empty()) rc.apply_override("out_dir=" + cli.out_dir);
    for (const auto& o : cli.overrides) rc.apply_override(o);
    return rc;
}

std::string ckpt_path(const RunConfig& rc, int stage) {
    return rc.out_dir + "/stage" + std::to_string(stage) + ".ckpt";
}

std::string cache_path(const RunConfig& rc) { return rc.out_dir + "/cache.json"; }

// timestamps live only here, never in artifacts
void append_log(const RunConfig& rc, const std::string& line) {
    std::ofstream os(rc.out_dir + "/run.log", std::ios::app);
    auto now = std::chrono::system_clock::now().time_since_epoch();
    os << std::chrono::duration_cast<std::chrono::seconds>(now).count() << " " << line << "\n";
}

void write_run_meta(const RunConfig& rc) {
    fs::create_directories(rc.out_dir);
    nlohmann::ordered_json j;
    j["config_hash"] = rc.config_hash();
    j["seed"] = rc.seed;
    j["config"] = nlohmann::json::parse(rc.to_json_text());
    std::ofstream os(rc.out_dir + "/run_meta.json");
    os << j.dump(2) << "\n";
}

void save_ckpt_with_meta(const RunConfig& rc, const ParamStore& ps, int stage) {
    ps.save(ckpt_path(rc, stage));
    nlohmann::ordered_json j;
    j["config_hash"] = rc.config_hash();
    j["seed"] = rc.seed;
    j["stage"] = stage;
    std::ofstream os(ckpt_path(rc, stage) + ".meta.json");
    os << j.dump(2) << "\n";
}

ParamStore load_checkpoint_or_die(const RunConfig& rc, int stage, const std::string& why) {
    std::string path = ckpt_path(rc, stage);
    if (!fs::exists(path))
        throw IoError("missing prerequisite checkpoint " + path + " (" + why +
                      "); run `rsmpod train` first");
    ParamStore ps;
    register_model_params(ps, rc.model, rc.seed);
    ps.load(path);
    return ps;
}

PromptCache load_cache_or_die(const RunConfig& rc) {
    std::string path = cache_path(rc);
    if (!fs::exists(path))
        throw IoError("missing prompt cache " + path + "; run `rsmpod build-cache` first");
    return PromptCache::load(path);
}

int checkpoint_stage_for_mode(const std::string& mode) {
    if (mode == "text") return 1;
    if (mode == "visual" || mode == "avg_baseline") return 2;
    return 3;  // multimodal
}

int cmd_gen_data(const RunConfig& rc) {
    write_run_meta(rc);
    export_dataset(rc.train_spec, rc.out_dir + "/dataset_train");
    export_dataset(rc.test_spec, rc.out_dir + "/dataset_test");
    std::printf("wrote %s/dataset_train (%d scenes) and %s/dataset_test (%d scenes)\n",
                rc.out_dir.c_str(), rc.train_spec.scenes, rc.out_dir.c_str(), rc.test_spec.scenes);
    return kExitOk;
}

int cmd_train(const RunConfig& rc) {
    write_run_meta(rc);
    Dataset train = stream_dataset(rc.train_spec);
    std::vector<int> stages = rc.stages;
    std::sort(stages.begin(), stages.end());
    for (int s : stages)
        if (s < 1 || s > 3) throw ConfigError("train: stage must be 1..3");

    ParamStore ps;
    if (!stages.empty() && stages.front() == 1) {
        register_model_params(ps, rc.model, rc.seed);
    } else if (!stages.empty()) {
        ps = load_checkpoint_or_die(rc, stages.front() - 1,
                                    "stage " + std::to_string(stages.front()) + " resumes from it");
    }

    for (int s : stages) {
        const StageConfig& sc = s == 1 ? rc.stage1 : (s == 2 ? rc.stage2 : rc.stage3);
        PromptCache cache;
        const PromptCache* cache_ptr = nullptr;
        if (s == 3) {
            cache = load_cache_or_die(rc);
            cache_ptr = &cache;
        }
        append_log(rc, "stage " + std::to_string(s) + " start");
        StageResult result = run_stage(sc, ps, train, rc.model, cache_ptr, rc.seed);
        save_ckpt_with_meta(rc, ps, s);
        write_loss_log_csv(rc.out_dir + "/stage" + std::to_string(s) + "_loss.csv", result);
        append_log(rc, "stage " + std::to_string(s) + " done, " +
                           std::to_string(result.loss_log.size()) + " steps");
        std::printf("stage %d: %zu steps, final loss %.4f -> %s\n", s, result.loss_log.size(),
                    result.loss_log.empty() ? 0.0 : result.loss_log.back()[4],
                    ckpt_path(rc, s).c_str());
    }
    return kExitOk;
}

int cmd_build_cache(const RunConfig& rc) {
    write_run_meta(rc);
    ParamStore ps = load_checkpoint_or_die(rc, 2, "the cache needs the trained visual encoder");
    Dataset train = stream_dataset(rc.train_spec);
    PromptCache cache = build_cache(train, ps, rc.model);
    cache.save(cache_path(rc), rc.config_hash(), rc.seed);
    size_t total = 0;
    for (const auto& [cat, list] : cache.entries) total += list.size();
    std::printf("cached %zu instance prompts over %zu categories -> %s\n", total,
                cache.entries.size(), cache_path(rc).c_str());
    return kExitOk;
}

int cmd_detect(const RunConfig& rc) {
    write_run_meta(rc);
    ParamStore ps = load_checkpoint_or_die(rc, checkpoint_stage_for_mode(rc.prompt_mode),
                                           "prompt mode " + rc.prompt_mode);
    PromptCache cache;
    const PromptCache* cache_ptr = nullptr;
    if (rc.prompt_mode != "text") {
        cache = load_cache_or_die(rc);
        cache_ptr = &cache;
    }
    Dataset test = stream_dataset(rc.test_spec);
    std::vector<std::string> categories;
    for (const auto& c : test.spec.categories) categories.push_back(c.name);
    auto prompts = make_eval_prompts(rc.prompt_mode, categories, ps, rc.model, cache_ptr,
                                     rc.visual_prompt_count, rc.seed);
    auto dets = detect_scenes(test, prompts, ps, rc.model, rc.conf_threshold);
    write_detections_jsonl(rc.out_dir + "/detections.jsonl", dets, rc.config_hash(), rc.seed);
    std::printf("%zu detections over %d scenes -> %s/detections.jsonl\n", dets.size(),
                test.spec.scenes, rc.out_dir.c_str());
    return kExitOk;
}

int cmd_eval(const RunConfig& rc) {
    write_run_meta(rc);
    ParamStore ps = load_checkpoint_or_die(rc, checkpoint_stage_for_mode(rc.prompt_mode),
                                           "prompt mode " + rc.prompt_mode);
    PromptCache cache;
    const PromptCache* cache_ptr = nullptr;
    if (rc.prompt_mode != "text") {
        cache = load_cache_or_die(rc);
        cache_ptr = &cache;
    }
    Dataset test = stream_dataset(rc.test_spec);
    APResult ap = evaluate_mode(rc.prompt_mode, test, ps, rc.model, cache_ptr,
                                rc.visual_prompt_count, rc.seed, rc.conf_threshold);
    write_metrics_json(rc.out_dir + "/metrics.json", ap, rc.config_hash(), rc.seed);
    write_pr_csv(rc.out_dir + "/pr_curve.csv", ap);
    std::printf("mode %-12s AP50 %.4f  mAP %.4f -> %s/metrics.json\n", rc.prompt_mode.c_str(),
                ap.ap50, ap.map, rc.out_dir.c_str());
    return kExitOk;
}

int cmd_ablate(const RunConfig& rc, const std::string& tables_arg) {
    write_run_meta(rc);
    std::vector<int> tables;
    {
        std::stringstream ss(tables_arg);
        std::string tok;
        while (std::getline(ss, tok, ',')) tables.push_back(std::stoi(tok));
    }
    Dataset train = stream_dataset(rc.train_spec);
    Dataset test = stream_dataset(rc.test_spec);

    ParamStore stage1;
    if (fs::exists(ckpt_path(rc, 1))) {
        stage1 = load_checkpoint_or_die(rc, 1, "ablation baseline");
    } else {
        append_log(rc, "ablate: training stage 1 from scratch");
        register_model_params(stage1, rc.model, rc.seed);
        run_stage(rc.stage1, stage1, train, rc.model, nullptr, rc.seed);
        save_ckpt_with_meta(rc, stage1, 1);
    }
    auto rows = run_ablation(stage1, train, test, rc, tables);
    write_ablation_csv(rc.out_dir + "/ablation.csv", rows);
    for (const auto& r : rows)
        std::printf("table %d  %-12s n=%-3d frozen=%-5s fusion=%-6s m=%d count=%-6s AP50 %.4f mAP %.4f\n",
                    r.table, r.prompt_mode.c_str(), r.n, r.frozen ? "true" : "false",
                    r.fusion.c_str(), r.stage2_m, r.stage3_count.c_str(), r.ap50, r.map);
    std::printf("-> %s/ablation.csv\n", rc.out_dir.c_str());
    return kExitOk;
}

int cmd_gradcheck(const RunConfig& rc, int elems_per_param, double eps, double tol) {
    write_run_meta(rc);
    ParamStore ps;
    register_model_params(ps, rc.model, rc.seed);
    DatasetSpec spec = rc.train_spec;
    spec.scenes = 1;
    SyntheticScene scene = generate_scene(spec, 0);
    std::vector<std::string> names;
    for (const auto& c : spec.categories) names.push_back(c.name);

    // composite objective touching every module: fused prompts built from the
    // image's own exemplars, full detection loss on top
    auto build_loss = [&](ParamStore& p) {
        MultiScaleFeatures enc =
            encoder_forward(backbone_forward(scene.image, p, rc.model), p, rc.model);
        Rng ex_rng(7);
        auto exemplars = sample_stage2_instances(scene.annotations, 1, ex_rng);
        std::vector<CategoryPrompt> prompts;
        std::vector<std::string> prompt_names;
        for (const auto& name : names) {
            TextualPrompt g = encode_text(name, p, rc.model);
            const Box* ex = nullptr;
            for (const auto& [cat, boxes] : exemplars)
                if (cat == name) ex = &boxes[0];
            if (ex) {
                VisualPrompt v = encode_visual(*ex, enc.levels, p, rc.model, name);
                prompts.push_back(CategoryPrompt::fused(fuse(g, v, p, rc.model)));
            } else {
                prompts.push_back(CategoryPrompt::text(std::move(g)));
            }
            prompt_names.push_back(name);
        }
        DetectorForward fw;
        fw.encoded = enc;
        fw.queries = select_queries(enc, prompts, p, rc.model);
        fw.refined = decoder_forward(fw.queries, enc, p, rc.model);
        for (int i = 0; i < fw.refined.dim(0); ++i) {
            Tensor row = slice_rows(fw.refined, i, 1);
            fw.probs.push_back(classify(row, prompts, rc.model.tau, p, rc.model));
            fw.boxes.push_back(predict_box(row, p, rc.model));
        }
        return fw;
    };
    // pin the matching so the objective is smooth under perturbations
    LossTerms warm;
    DetectorForward fw0 = build_loss(ps);
    MatchResult pinned = image_loss_terms(fw0, scene.annotations, names, rc.model, warm);

    auto f = [&](ParamStore& p) {
        DetectorForward fw = build_loss(p);
        LossTerms terms;
        image_loss_terms(fw, scene.annotations, names, rc.model, terms, &pinned);
        return finalize_loss(terms, rc.model).total;
    };

    GradCheckReport report;
    finite_diff_check(f, ps, eps, elems_per_param, &report);

    std::map<std::string, double> per_module;
    for (const auto& e : report.entries) {
        std::string module = e.path.substr(0, e.path.find('.'));
        per_module[module] = std::max(per_module[module], e.max_rel_err);
        std::printf("  %-40s rel_err %.3e (%d elems)\n", e.path.c_str(), e.max_rel_err, e.checked);
    }
    bool ok = true;
    for (const auto& [module, err] : per_module) {
        std::printf("module %-12s max rel err %.3e %s\n", module.c_str(), err,
                    err < tol ? "OK" : "FAIL");
        if (err >= tol) ok = false;
    }
    std::printf("gradcheck %s: %zu paths, worst %.3e (%s)\n", ok ? "PASSED" : "FAILED",
                report.entries.size(), report.max_rel_err, report.worst_path.c_str());
    return ok ? kExitOk : kExitCheckFailed;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"prompt-conditioned open-vocabulary detector on synthetic shapes"};
    app.require_subcommand(1);

    Cli cli;
    app.add_option("--config", cli.config_path, "run configuration JSON");
    app.add_option("--out", cli.out_dir, "output directory (overrides config)");
    auto* seed_opt = app.add_option("--seed", cli.seed, "master seed (overrides config)");
    app.add_option("--set", cli.overrides, "dotted-path override, e.g. model.tau=0.2")
        ->take_all();

    auto* gen = app.add_subcommand("gen-data", "export train/test datasets to disk");
    auto* train = app.add_subcommand("train", "run the configured training stages");
    auto* cache = app.add_subcommand("build-cache", "extract per-category visual prompt cache");
    auto* detect_cmd = app.add_subcommand("detect", "write detections for the test split");
    auto* eval_cmd = app.add_subcommand("eval", "evaluate AP50/mAP on the test split");
    auto* ablate = app.add_subcommand("ablate", "run the ablation sweeps");
    std::string tables = "4,5,6,7,8";
    ablate->add_option("--tables", tables, "comma-separated table ids (default 4,5,6,7,8)");
    auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference check of every module");
    int gc_elems = 4;
    double gc_eps = 1e-3, gc_tol = 1e-4;
    gradcheck->add_option("--elements", gc_elems, "probed elements per parameter");
    gradcheck->add_option("--eps", gc_eps, "central difference step");
    gradcheck->add_option("--tol", gc_tol, "max relative error");

    CLI11_PARSE(app, argc, argv);
    cli.seed_set = seed_opt->count() > 0;

    try {
        RunConfig rc = load_config(cli);
        fs::create_directories(rc.out_dir);
        if (gen->parsed()) return cmd_gen_data(rc);
        if (train->parsed()) return cmd_train(rc);
        if (cache->parsed()) return cmd_build_cache(rc);
        if (detect_cmd->parsed()) return cmd_detect(rc);
        if (eval_cmd->parsed()) return cmd_eval(rc);
        if (ablate->parsed()) return cmd_ablate(rc, tables);
        if (gradcheck->parsed()) return cmd_gradcheck(rc, gc_elems, gc_eps, gc_tol);
    } catch (const ConfigError& e) {
        std::fprintf(stderr, "config error: %s\n", e.what());
        return kExitConfig;
    } catch (const ValidationError& e) {
        std::fprintf(stderr, "invalid input: %s\n", e.what());
        return kExitConfig;
    } catch (const LookupError& e) {
        std::fprintf(stderr, "missing prerequisite: %s\n", e.what());
        return kExitMissing;
    } catch (const IoError& e) {
        std::fprintf(stderr, "missing prerequisite or I/O failure: %s\n", e.what());
        return kExitMissing;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return kExitOk;
}
