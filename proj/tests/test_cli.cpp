#include <doctest.h>

#include <cmath>
#include <set>
#include <tuple>

#include "rsmpod/gradcheck.hpp"
#include "rsmpod/pipeline.hpp"

using namespace rsmpod;

namespace {

RunConfig tiny_run_config() {
    RunConfig rc = RunConfig::defaults();
    rc.model.d = 16;
    rc.model.heads = 2;
    rc.model.enc_layers = 1;
    rc.model.dec_layers = 1;
    rc.model.num_queries = 6;
    rc.model.vocab_size = 64;
    rc.model.image_size = 32;
    rc.train_spec = reference_spec(6, 31);
    rc.train_spec.categories.resize(3);
    rc.test_spec = reference_spec(3, 32);
    rc.test_spec.categories.resize(3);
    rc.stage1 = StageConfig{1, 1, 1e-3, 3, 1, true, "32", 1.0};
    rc.stage2 = StageConfig{2, 1, 1e-3, 3, 1, true, "32", 1.0};
    rc.stage3 = StageConfig{3, 1, 1e-3, 3, 1, true, "4", 1.0};
    rc.visual_prompt_count = 2;
    rc.seed = 909;
    return rc;
}

}  // namespace

TEST_CASE("run config round-trips through JSON") {
    RunConfig rc = RunConfig::defaults();
    RunConfig back = RunConfig::from_json_text(rc.to_json_text());
    CHECK(back.to_json_text() == rc.to_json_text());
    CHECK(back.config_hash() == rc.config_hash());
    CHECK(back.model.d == 64);
    CHECK(back.stage1.epochs == 30);
    CHECK(back.stage2.epochs == 10);
    CHECK(back.train_spec.scenes == 500);
    CHECK(back.test_spec.scenes == 100);
    CHECK(back.train_spec.categories.size() == 5);
}

TEST_CASE("run config overrides by dotted path") {
    RunConfig rc = RunConfig::defaults();
    std::string hash_before = rc.config_hash();
    rc.apply_override("model.tau=0.25");
    CHECK(rc.model.tau == doctest::Approx(0.25));
    rc.apply_override("stages.2.freeze_detector=false");
    CHECK_FALSE(rc.stage2.freeze_detector);
    rc.apply_override("dataset.train.scenes=42");
    CHECK(rc.train_spec.scenes == 42);
    rc.apply_override("seed=77");
    CHECK(rc.seed == 77);
    rc.apply_override("train_stages=[1,3]");
    CHECK(rc.stages == std::vector<int>{1, 3});
    CHECK(rc.config_hash() != hash_before);

    CHECK_THROWS_AS(rc.apply_override("no_such_field=1"), ConfigError);
    CHECK_THROWS_AS(rc.apply_override("model.no_field=1"), ConfigError);
    CHECK_THROWS_AS(rc.apply_override("missing_equals"), ConfigError);
}

TEST_CASE("run config rejects invalid values") {
    CHECK_THROWS_AS(RunConfig::from_json_text("{ not json"), ConfigError);
    CHECK_THROWS_AS(RunConfig::from_json_text(R"({"model":{"tau":-0.5}})"), ConfigError);
    CHECK_THROWS_AS(RunConfig::from_json_text(R"({"prompt_mode":"bogus"})"), ConfigError);
    CHECK_THROWS_AS(RunConfig::from_json_text(R"({"visual_prompt_count":0})"), ConfigError);
    CHECK_THROWS_AS(
        RunConfig::from_json_text(R"({"stages":{"3":{"epochs":1,"lr":1e-3,"fusion_train_prompt_count":"maybe"}}})"),
        ConfigError);
    CHECK_THROWS_AS(RunConfig::from_file("/tmp/rsmpod_no_config.json"), ConfigError);
}

TEST_CASE("make_eval_prompts covers every mode and validates prerequisites") {
    RunConfig rc = tiny_run_config();
    ParamStore ps;
    register_model_params(ps, rc.model, rc.seed);
    PromptCache cache;
    cache.dim = rc.model.d;
    std::vector<std::string> cats;
    for (const auto& c : rc.test_spec.categories) cats.push_back(c.name);
    Rng rng(3);
    for (const auto& c : cats) {
        std::vector<double> v(static_cast<size_t>(rc.model.d));
        for (auto& x : v) x = rng.uniform(-1, 1);
        cache.insert(c, c + "/0", v);
    }

    for (const std::string mode : {"text", "visual", "multimodal", "avg_baseline"}) {
        auto prompts = make_eval_prompts(mode, cats, ps, rc.model, &cache, 1, rc.seed);
        CHECK(prompts.size() == cats.size());
        for (size_t i = 0; i < prompts.size(); ++i) CHECK(prompts[i].name() == cats[i]);
    }
    CHECK_THROWS_AS(make_eval_prompts("visual", cats, ps, rc.model, nullptr, 1, rc.seed),
                    ConfigError);
    CHECK_THROWS_AS(make_eval_prompts("warp", cats, ps, rc.model, &cache, 1, rc.seed),
                    ConfigError);

    // avg baseline: mean over tokens of (token + visual prompt)
    auto avg = make_eval_prompts("avg_baseline", cats, ps, rc.model, &cache, 1, rc.seed);
    TextualPrompt g = encode_text(cats[0], ps, rc.model);
    const auto& vp = cache.entries.at(cats[0])[0].second;
    int n_k = g.features.dim(0), d = rc.model.d;
    for (int j = 0; j < d; ++j) {
        double want = 0;
        for (int t = 0; t < n_k; ++t) want += g.features.at(static_cast<size_t>(t) * d + j) + vp[static_cast<size_t>(j)];
        want /= n_k;
        CHECK(std::get<FusedPrompt>(avg[0].value).embedding.at(j) ==
              doctest::Approx(want).epsilon(1e-12));
    }
}

TEST_CASE("tiny full pipeline is deterministic end to end") {
    RunConfig rc = tiny_run_config();
    Dataset train = stream_dataset(rc.train_spec);
    Dataset test = stream_dataset(rc.test_spec);

    auto run_once = [&]() {
        ParamStore ps;
        register_model_params(ps, rc.model, rc.seed);
        run_stage(rc.stage1, ps, train, rc.model, nullptr, rc.seed);
        run_stage(rc.stage2, ps, train, rc.model, nullptr, rc.seed);
        PromptCache cache = build_cache(train, ps, rc.model);
        run_stage(rc.stage3, ps, train, rc.model, &cache, rc.seed);
        APResult mm = evaluate_mode("multimodal", test, ps, rc.model, &cache,
                                    rc.visual_prompt_count, rc.seed, 0.0);
        std::vector<std::vector<double>> params;
        for (const auto& [path, t] : ps.params()) params.push_back(t.values());
        return std::make_tuple(params, cache.entries, mm.ap50, mm.map);
    };
    auto a = run_once();
    auto b = run_once();
    CHECK(std::get<0>(a) == std::get<0>(b));
    CHECK(std::get<1>(a) == std::get<1>(b));
    CHECK(std::get<2>(a) == std::get<2>(b));
    CHECK(std::get<3>(a) == std::get<3>(b));
}

TEST_CASE("ablation emits exactly the configured grid without duplicates") {
    RunConfig rc = tiny_run_config();
    Dataset train = stream_dataset(rc.train_spec);
    Dataset test = stream_dataset(rc.test_spec);
    ParamStore stage1;
    register_model_params(stage1, rc.model, rc.seed);
    run_stage(rc.stage1, stage1, train, rc.model, nullptr, rc.seed);

    auto rows = run_ablation(stage1, train, test, rc, {4, 5, 6});
    // table 4: text + 5 visual-N + multimodal; table 5: frozen/unfrozen;
    // table 6: fusion + avg
    CHECK(rows.size() == 7 + 2 + 2);
    std::set<std::string> keys;
    int avg_rows = 0, fusion_rows = 0;
    for (const auto& r : rows) {
        CHECK(r.ap50 >= 0.0);
        CHECK(r.ap50 <= 1.0);
        CHECK(r.map >= 0.0);
        CHECK(r.map <= 1.0);
        keys.insert(std::to_string(r.table) + "|" + r.prompt_mode + "|" + std::to_string(r.n) +
                    "|" + (r.frozen ? "f" : "u") + "|" + r.fusion + "|" + r.stage3_count);
        if (r.table == 6 && r.fusion == "avg") ++avg_rows;
        if (r.table == 6 && r.fusion == "fusion") ++fusion_rows;
    }
    CHECK(keys.size() == rows.size());  // no duplicates
    CHECK(avg_rows == 1);
    CHECK(fusion_rows == 1);

    // visual-N rows cover the sweep
    std::set<int> ns;
    for (const auto& r : rows)
        if (r.table == 4 && r.prompt_mode == "visual") ns.insert(r.n);
    CHECK(ns == std::set<int>{1, 4, 8, 16, 32});
}

TEST_CASE("corrupted backward is caught by the finite-difference harness") {
    // negative control: a hand-built node whose backward is wrong by 2x
    ParamStore ps;
    ps.create("w", Tensor::from_values({1}, {1.3}, true));
    auto f = [](ParamStore& p) {
        Tensor w = p.at("w");
        auto node = std::make_shared<TensorNode>();
        node->shape = {1};
        node->value = {w.at(0) * w.at(0)};
        node->requires_grad = true;
        node->parents = {w.node()};
        node->backward_fn = [](TensorNode& self) {
            auto& parent = *self.parents[0];
            parent.ensure_grad();
            parent.grad[0] += self.grad[0] * 4.0 * parent.value[0];  // should be 2x
        };
        return Tensor(node);
    };
    double err = finite_diff_check(f, ps, 1e-4);
    CHECK(err > 1e-2);
}
