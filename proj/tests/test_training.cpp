#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>

#include "rsmpod/gradcheck.hpp"
#include "rsmpod/nn.hpp"
#include "rsmpod/training.hpp"

using namespace rsmpod;

namespace {

// exhaustive assignment oracle: minimum total over all injections gt -> query
double brute_force_min(const std::vector<std::vector<double>>& cost) {
    size_t Q = cost.size(), G = cost[0].size();
    std::vector<int> qs(Q);
    double best = 1e30;
    std::vector<int> pick;
    std::function<void(size_t, double, unsigned)> rec = [&](size_t g, double acc, unsigned used) {
        if (acc >= best) return;
        if (g == G) {
            best = acc;
            return;
        }
        for (size_t q = 0; q < Q; ++q)
            if (!(used & (1u << q))) rec(g + 1, acc + cost[q][g], used | (1u << q));
    };
    rec(0, 0.0, 0);
    return best;
}

ModelConfig tiny_cfg() {
    ModelConfig cfg;
    cfg.d = 16;
    cfg.heads = 2;
    cfg.enc_layers = 1;
    cfg.dec_layers = 1;
    cfg.num_queries = 6;
    cfg.vocab_size = 64;
    cfg.image_size = 32;
    return cfg;
}

DatasetSpec tiny_spec(int scenes, uint64_t seed) {
    DatasetSpec spec = reference_spec(scenes, seed);
    spec.categories.resize(3);
    spec.objects_max = 2;
    return spec;
}

// fabricated forward output: probs from given similarity logits, fixed boxes
DetectorForward fake_forward(const std::vector<std::vector<double>>& sims, double tau,
                             const std::vector<Box>& boxes) {
    DetectorForward fw;
    for (size_t i = 0; i < sims.size(); ++i) {
        std::vector<double> logits(sims[i]);
        for (auto& v : logits) v /= tau;
        fw.probs.push_back(softmax_rows(Tensor::from_values(
            {static_cast<int>(logits.size())}, logits)));
        fw.boxes.push_back(Tensor::from_values(
            {4}, {boxes[i].cx, boxes[i].cy, boxes[i].w, boxes[i].h}));
    }
    return fw;
}

}  // namespace

TEST_CASE("match_cost fixtures") {
    ModelConfig cfg;
    Box b{0.5, 0.5, 0.2, 0.2};
    // perfect prediction: score 1 on the true class, identical box
    auto cost = match_cost({{1.0, 0.0}}, {b}, {0}, {b}, cfg);
    CHECK(cost[0][0] == doctest::Approx(0.0).epsilon(1e-15));

    // non-negativity on a random instance + independent recomputation
    Rng rng(3);
    std::vector<std::vector<double>> scores;
    std::vector<Box> preds, gts;
    std::vector<int> labels;
    for (int i = 0; i < 4; ++i) {
        std::vector<double> s(4);
        double z = 0;
        for (auto& v : s) {
            v = rng.uniform(0.01, 1.0);
            z += v;
        }
        for (auto& v : s) v /= z;
        scores.push_back(s);
        double w = rng.uniform(0.1, 0.4);
        preds.push_back(Box{rng.uniform(0.2, 0.8), rng.uniform(0.2, 0.8), w, w});
    }
    for (int j = 0; j < 3; ++j) {
        double w = rng.uniform(0.1, 0.4);
        gts.push_back(Box{rng.uniform(0.2, 0.8), rng.uniform(0.2, 0.8), w, w});
        labels.push_back(j);
    }
    auto c = match_cost(scores, preds, labels, gts, cfg);
    for (size_t i = 0; i < 4; ++i)
        for (size_t j = 0; j < 3; ++j) {
            CHECK(c[i][j] >= 0.0);
            double l1 = std::fabs(preds[i].cx - gts[j].cx) + std::fabs(preds[i].cy - gts[j].cy) +
                        std::fabs(preds[i].w - gts[j].w) + std::fabs(preds[i].h - gts[j].h);
            double want = cfg.lambda_cls * (1 - scores[i][static_cast<size_t>(labels[j])]) +
                          cfg.lambda_l1 * l1 + cfg.lambda_giou * (1 - giou(preds[i], gts[j]));
            CHECK(c[i][j] == doctest::Approx(want).epsilon(1e-12));
        }

    CHECK_THROWS_AS(match_cost(scores, preds, {7}, {gts[0]}, cfg), ValidationError);
}

TEST_CASE("hungarian_match fixtures") {
    auto r1 = hungarian_match({{1, 2}, {2, 1}});
    REQUIRE(r1.pairs.size() == 2);
    CHECK(r1.pairs[0] == std::pair<int, int>{0, 0});
    CHECK(r1.pairs[1] == std::pair<int, int>{1, 1});

    auto r2 = hungarian_match({{0, 5, 5}, {5, 0, 5}, {5, 5, 0}});
    for (int i = 0; i < 3; ++i) CHECK(r2.pairs[static_cast<size_t>(i)] == std::pair<int, int>{i, i});

    // more queries than ground truths: one query stays unmatched
    auto r3 = hungarian_match({{3, 1}, {1, 3}, {9, 9}});
    CHECK(r3.pairs.size() == 2);
    CHECK(r3.unmatched_queries == std::vector<int>{2});

    CHECK_THROWS_AS(hungarian_match({{1.0, std::nan("")}}), ValidationError);
    CHECK_THROWS_AS(hungarian_match({}), ValidationError);
}

TEST_CASE("hungarian_match equals brute force on random matrices") {
    Rng rng(17);
    for (int trial = 0; trial < 500; ++trial) {
        int q = 1 + static_cast<int>(rng.next_below(7));
        int g = 1 + static_cast<int>(rng.next_below(static_cast<uint64_t>(q)));
        std::vector<std::vector<double>> cost(static_cast<size_t>(q),
                                              std::vector<double>(static_cast<size_t>(g)));
        for (auto& row : cost)
            for (auto& v : row) v = rng.uniform(0.0, 10.0);
        auto match = hungarian_match(cost);
        double total = 0;
        for (auto& [i, j] : match.pairs) total += cost[static_cast<size_t>(i)][static_cast<size_t>(j)];
        CHECK(total == doctest::Approx(brute_force_min(cost)).epsilon(1e-9));
        CHECK(match.pairs.size() == static_cast<size_t>(g));
    }
}

TEST_CASE("hungarian_match breaks ties lexicographically") {
    // every assignment costs 2: the lexicographically smallest pairing wins
    auto r = hungarian_match({{1, 1}, {1, 1}});
    CHECK(r.pairs[0] == std::pair<int, int>{0, 0});
    CHECK(r.pairs[1] == std::pair<int, int>{1, 1});

    auto r2 = hungarian_match({{0, 0, 0}, {0, 0, 0}, {0, 0, 0}});
    CHECK(r2.pairs[0] == std::pair<int, int>{0, 0});
    CHECK(r2.pairs[1] == std::pair<int, int>{1, 1});
    CHECK(r2.pairs[2] == std::pair<int, int>{2, 2});
}

TEST_CASE("loss_cls matches hand-computed values") {
    ModelConfig cfg;
    cfg.tau = 1.0;
    cfg.lambda_cls = 1.0;
    cfg.lambda_l1 = 0.0;
    cfg.lambda_giou = 0.0;
    Box b{0.5, 0.5, 0.2, 0.2};

    // K=1 plus background, sims (1, 0), tau=1 -> -log(e/(e+1))
    DetectorForward fw = fake_forward({{1.0, 0.0}}, 1.0, {b});
    LossTerms terms;
    MatchResult pinned;
    pinned.pairs = {{0, 0}};
    image_loss_terms(fw, {Annotation{"a", b}}, {"a"}, cfg, terms, &pinned);
    BatchLoss loss = finalize_loss(terms, cfg);
    double e = std::exp(1.0);
    CHECK(loss.breakdown.cls == doctest::Approx(-std::log(e / (e + 1))).epsilon(1e-12));
    CHECK(loss.breakdown.cls == doctest::Approx(0.31326168751822286).epsilon(1e-10));
    CHECK(loss.breakdown.l1 == doctest::Approx(0.0));
    CHECK(loss.breakdown.giou == doctest::Approx(0.0).epsilon(1e-12));

    // uniform sims over K+1=3 slots -> -log(1/3)
    DetectorForward fw3 = fake_forward({{0.4, 0.4, 0.4}}, 1.0, {b});
    LossTerms t3;
    image_loss_terms(fw3, {Annotation{"a", b}}, {"a", "b"}, cfg, t3, &pinned);
    CHECK(finalize_loss(t3, cfg).breakdown.cls == doctest::Approx(std::log(3.0)).epsilon(1e-12));
}

TEST_CASE("unmatched queries are supervised toward background") {
    ModelConfig cfg;
    cfg.lambda_cls = 1.0;
    cfg.lambda_l1 = 0.0;
    cfg.lambda_giou = 0.0;
    Box b{0.5, 0.5, 0.2, 0.2};
    // two queries, no ground truth: background-only loss, weighted 0.1
    DetectorForward fw = fake_forward({{0.0, 0.0}, {0.0, 0.0}}, 1.0, {b, b});
    LossTerms terms;
    image_loss_terms(fw, {}, {"a"}, cfg, terms);
    BatchLoss loss = finalize_loss(terms, cfg);
    CHECK(terms.cls_matched.empty());
    CHECK(terms.cls_unmatched.size() == 2);
    CHECK(loss.breakdown.cls == doctest::Approx(0.1 * std::log(2.0)).epsilon(1e-12));
}

TEST_CASE("box losses match hand-computed fixtures") {
    // L1: single coordinate shift of 0.1
    Tensor pred = Tensor::from_values({4}, {0.6, 0.5, 0.2, 0.2});
    Tensor gt = Tensor::from_values({4}, {0.5, 0.5, 0.2, 0.2});
    CHECK(l1_box_t(pred, gt).item() == doctest::Approx(0.1).epsilon(1e-12));

    // GIoU loss on corner-touching unit boxes: 1 - (-0.5) = 1.5
    Tensor a = Tensor::from_values({4}, {0.5, 0.5, 1.0, 1.0});
    Tensor b = Tensor::from_values({4}, {1.5, 1.5, 1.0, 1.0});
    CHECK(sub(Tensor::scalar(1.0), giou_t(a, b)).item() == doctest::Approx(1.5).epsilon(1e-12));

    // exact boxes -> zero loss for both terms
    CHECK(l1_box_t(gt, gt).item() == 0.0);
    CHECK(sub(Tensor::scalar(1.0), giou_t(gt, gt)).item() == doctest::Approx(0.0).epsilon(1e-12));

    // GIoU loss range stays in [0, 2)
    Rng rng(23);
    for (int i = 0; i < 500; ++i) {
        double w1 = rng.uniform(0.05, 0.9), h1 = rng.uniform(0.05, 0.9);
        double w2 = rng.uniform(0.05, 0.9), h2 = rng.uniform(0.05, 0.9);
        Tensor p = Tensor::from_values({4}, {rng.uniform(w1 / 2, 1 - w1 / 2),
                                             rng.uniform(h1 / 2, 1 - h1 / 2), w1, h1});
        Tensor g = Tensor::from_values({4}, {rng.uniform(w2 / 2, 1 - w2 / 2),
                                             rng.uniform(h2 / 2, 1 - h2 / 2), w2, h2});
        double v = sub(Tensor::scalar(1.0), giou_t(p, g)).item();
        CHECK(v >= 0.0);
        CHECK(v < 2.0);
    }
}

TEST_CASE("total loss recomposes exactly from its parts") {
    ModelConfig cfg;  // defaults 2/5/2
    LossTerms terms;
    terms.cls_matched.push_back(Tensor::scalar(1.0));
    terms.l1.push_back(Tensor::scalar(1.0));
    terms.giou.push_back(Tensor::scalar(1.0));
    BatchLoss loss = finalize_loss(terms, cfg);
    CHECK(loss.breakdown.total == doctest::Approx(9.0).epsilon(1e-15));
    CHECK(std::fabs(loss.breakdown.total -
                    (cfg.lambda_cls * loss.breakdown.cls + cfg.lambda_l1 * loss.breakdown.l1 +
                     cfg.lambda_giou * loss.breakdown.giou)) < 1e-12);

    // lambda = 0 makes the total independent of that term
    ModelConfig cfg0 = cfg;
    cfg0.lambda_l1 = 0.0;
    LossTerms t2;
    t2.cls_matched.push_back(Tensor::scalar(1.0));
    t2.l1.push_back(Tensor::scalar(123.0));
    t2.giou.push_back(Tensor::scalar(1.0));
    CHECK(finalize_loss(t2, cfg0).breakdown.total == doctest::Approx(4.0));
}

TEST_CASE("permuting ground-truth order changes neither match total nor loss") {
    ModelConfig cfg;
    cfg.tau = 1.0;
    Box b1{0.3, 0.3, 0.2, 0.2}, b2{0.7, 0.7, 0.25, 0.25};
    Box p1{0.32, 0.3, 0.2, 0.2}, p2{0.7, 0.68, 0.25, 0.25}, p3{0.5, 0.5, 0.3, 0.3};
    std::vector<std::vector<double>> sims{{0.9, 0.1, 0.0}, {0.1, 0.9, 0.0}, {0.2, 0.2, 0.0}};
    DetectorForward fw = fake_forward(sims, 1.0, {p1, p2, p3});

    LossTerms ta;
    image_loss_terms(fw, {{"a", b1}, {"b", b2}}, {"a", "b"}, cfg, ta);
    LossTerms tb;
    image_loss_terms(fw, {{"b", b2}, {"a", b1}}, {"a", "b"}, cfg, tb);
    CHECK(finalize_loss(ta, cfg).breakdown.total ==
          doctest::Approx(finalize_loss(tb, cfg).breakdown.total).epsilon(1e-12));
}

TEST_CASE("loss gradients match finite differences end to end") {
    ModelConfig cfg = tiny_cfg();
    ParamStore ps;
    register_model_params(ps, cfg, 71);
    Dataset ds = stream_dataset(tiny_spec(2, 5));
    std::vector<std::string> names;
    for (const auto& c : ds.spec.categories) names.push_back(c.name);

    // pin the match so the objective stays smooth under perturbation
    std::vector<CategoryPrompt> prompts;
    for (const auto& n : names) prompts.push_back(CategoryPrompt::text(encode_text(n, ps, cfg)));
    DetectorForward fw0 = run_detector(ds.scenes[0].image, prompts, ps, cfg);
    LossTerms warm;
    MatchResult pinned = image_loss_terms(fw0, ds.scenes[0].annotations, names, cfg, warm);

    auto f = [&](ParamStore& p) {
        std::vector<CategoryPrompt> pr;
        for (const auto& n : names) pr.push_back(CategoryPrompt::text(encode_text(n, p, cfg)));
        DetectorForward fw = run_detector(ds.scenes[0].image, pr, p, cfg);
        LossTerms terms;
        image_loss_terms(fw, ds.scenes[0].annotations, names, cfg, terms, &pinned);
        return finalize_loss(terms, cfg).total;
    };
    CHECK(finite_diff_check(f, ps, 1e-3, 2) < 1e-4);
}

TEST_CASE("sample_stage2_instances contracts") {
    std::vector<Annotation> anns{{"a", Box{0.2, 0.2, 0.1, 0.1}},
                                 {"b", Box{0.5, 0.5, 0.1, 0.1}},
                                 {"a", Box{0.8, 0.8, 0.1, 0.1}}};
    Rng rng(7);
    auto picks = sample_stage2_instances(anns, 1, rng);
    REQUIRE(picks.size() == 2);  // categories a and b
    CHECK(picks[0].first == "a");
    CHECK(picks[0].second.size() == 1);
    CHECK(picks[1].first == "b");
    // the only b instance is forced
    CHECK(picks[1].second[0].cx == doctest::Approx(0.5));

    // m larger than available: all instances of the category
    Rng rng2(7);
    auto all = sample_stage2_instances(anns, 5, rng2);
    CHECK(all[0].second.size() == 2);

    CHECK_THROWS_AS(sample_stage2_instances({}, 1, rng), ValidationError);
}

TEST_CASE("sample_stage2_instances is uniform over instances") {
    std::vector<Annotation> anns{{"a", Box{0.2, 0.2, 0.1, 0.1}},
                                 {"a", Box{0.5, 0.5, 0.1, 0.1}},
                                 {"a", Box{0.8, 0.8, 0.1, 0.1}}};
    Rng rng(12345);
    int counts[3] = {0, 0, 0};
    const int trials = 10000;
    for (int t = 0; t < trials; ++t) {
        auto picks = sample_stage2_instances(anns, 1, rng);
        double cx = picks[0].second[0].cx;
        counts[cx < 0.3 ? 0 : (cx < 0.6 ? 1 : 2)]++;
    }
    double sigma = std::sqrt((1.0 / 3) * (2.0 / 3) / trials);
    for (int c : counts)
        CHECK(std::fabs(c / static_cast<double>(trials) - 1.0 / 3) < 3 * sigma + 1e-9);
}

TEST_CASE("run_stage freezing and determinism on a tiny problem") {
    ModelConfig cfg = tiny_cfg();
    DatasetSpec spec = tiny_spec(6, 77);
    Dataset ds = stream_dataset(spec);

    ParamStore ps;
    register_model_params(ps, cfg, 99);
    StageConfig s1{1, 1, 1e-3, 3, 1, true, "32", 1.0};
    StageResult log1 = run_stage(s1, ps, ds, cfg, nullptr, 4242);
    CHECK(log1.loss_log.size() == 2);  // 6 scenes / batch 3

    // identical seed + config reproduce the loss log bit for bit
    ParamStore ps2;
    register_model_params(ps2, cfg, 99);
    StageResult log2 = run_stage(s1, ps2, ds, cfg, nullptr, 4242);
    REQUIRE(log1.loss_log.size() == log2.loss_log.size());
    for (size_t i = 0; i < log1.loss_log.size(); ++i)
        for (int j = 0; j < 5; ++j) CHECK(log1.loss_log[i][j] == log2.loss_log[i][j]);

    // stage 2 leaves every detector/text parameter bit-identical
    std::map<std::string, std::vector<double>> before;
    for (const auto& [path, t] : ps.params()) before[path] = t.values();
    StageConfig s2{2, 1, 1e-3, 3, 1, true, "32", 1.0};
    run_stage(s2, ps, ds, cfg, nullptr, 4242);
    auto frozen = stage_frozen_prefixes(s2);
    bool any_vpe_changed = false;
    for (const auto& [path, t] : ps.params()) {
        bool is_frozen = false;
        for (const auto& pre : frozen)
            if (path.rfind(pre, 0) == 0) is_frozen = true;
        if (is_frozen)
            CHECK(t.values() == before[path]);
        else if (t.values() != before[path])
            any_vpe_changed = true;
    }
    CHECK(any_vpe_changed);

    // stage 3 requires a cache
    StageConfig s3{3, 1, 1e-3, 3, 1, true, "32", 1.0};
    CHECK_THROWS_AS(run_stage(s3, ps, ds, cfg, nullptr, 1), ConfigError);
}
