#include "rsmpod/training.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "rsmpod/nn.hpp"

namespace rsmpod {

std::vector<std::vector<double>> match_cost(const std::vector<std::vector<double>>& scores,
                                            const std::vector<Box>& pred_boxes,
                                            const std::vector<int>& gt_labels,
                                            const std::vector<Box>& gt_boxes,
                                            const ModelConfig& cfg) {
    size_t Q = pred_boxes.size(), G = gt_boxes.size();
    if (Q == 0 || G == 0) throw ValidationError("match_cost: empty predictions or ground truth");
    if (scores.size() != Q) throw ValidationError("match_cost: scores/boxes length mismatch");
    std::vector<std::vector<double>> cost(Q, std::vector<double>(G));
    size_t foreground = scores[0].size() - 1;  // last slot is background
    for (size_t j = 0; j < G; ++j)
        if (gt_labels[j] < 0 || static_cast<size_t>(gt_labels[j]) >= foreground)
            throw ValidationError("match_cost: label " + std::to_string(gt_labels[j]) +
                                  " out of range");
    for (size_t i = 0; i < Q; ++i) {
        const Box& pb = pred_boxes[i];
        for (size_t j = 0; j < G; ++j) {
            const Box& gb = gt_boxes[j];
            double l1 = std::fabs(pb.cx - gb.cx) + std::fabs(pb.cy - gb.cy) +
                        std::fabs(pb.w - gb.w) + std::fabs(pb.h - gb.h);
            cost[i][j] = cfg.lambda_cls * (1.0 - scores[i][static_cast<size_t>(gt_labels[j])]) +
                         cfg.lambda_l1 * l1 + cfg.lambda_giou * (1.0 - giou(pb, gb));
        }
    }
    return cost;
}

namespace {

// Jonker-Volgenant style shortest augmenting path solver on a square matrix.
// Returns the minimal total cost.
double solve_square(const std::vector<std::vector<double>>& a, std::vector<int>& row_to_col) {
    int n = static_cast<int>(a.size());
    std::vector<double> u(static_cast<size_t>(n) + 1), v(static_cast<size_t>(n) + 1);
    std::vector<int> p(static_cast<size_t>(n) + 1), way(static_cast<size_t>(n) + 1);
    for (int i = 1; i <= n; ++i) {
        p[0] = i;
        int j0 = 0;
        std::vector<double> minv(static_cast<size_t>(n) + 1, std::numeric_limits<double>::infinity());
        std::vector<char> used(static_cast<size_t>(n) + 1, 0);
        do {
            used[static_cast<size_t>(j0)] = 1;
            int i0 = p[static_cast<size_t>(j0)], j1 = 0;
            double delta = std::numeric_limits<double>::infinity();
            for (int j = 1; j <= n; ++j)
                if (!used[static_cast<size_t>(j)]) {
                    double cur = a[static_cast<size_t>(i0 - 1)][static_cast<size_t>(j - 1)] -
                                 u[static_cast<size_t>(i0)] - v[static_cast<size_t>(j)];
                    if (cur < minv[static_cast<size_t>(j)]) {
                        minv[static_cast<size_t>(j)] = cur;
                        way[static_cast<size_t>(j)] = j0;
                    }
                    if (minv[static_cast<size_t>(j)] < delta) {
                        delta = minv[static_cast<size_t>(j)];
                        j1 = j;
                    }
                }
            for (int j = 0; j <= n; ++j) {
                if (used[static_cast<size_t>(j)]) {
                    u[static_cast<size_t>(p[static_cast<size_t>(j)])] += delta;
                    v[static_cast<size_t>(j)] -= delta;
                } else {
                    minv[static_cast<size_t>(j)] -= delta;
                }
            }
            j0 = j1;
        } while (p[static_cast<size_t>(j0)] != 0);
        do {
            int j1 = way[static_cast<size_t>(j0)];
            p[static_cast<size_t>(j0)] = p[static_cast<size_t>(j1)];
            j0 = j1;
        } while (j0);
    }
    row_to_col.assign(static_cast<size_t>(n), -1);
    double total = 0.0;
    for (int j = 1; j <= n; ++j)
        if (p[static_cast<size_t>(j)]) {
            row_to_col[static_cast<size_t>(p[static_cast<size_t>(j)] - 1)] = j - 1;
            total += a[static_cast<size_t>(p[static_cast<size_t>(j)] - 1)][static_cast<size_t>(j - 1)];
        }
    return total;
}

// Minimum assignment cost over the free rows/columns (excluded ones removed),
// padding to square with zero-cost dummy cells.
double solve_remaining(const std::vector<std::vector<double>>& cost,
                       const std::vector<char>& row_used, const std::vector<char>& col_used) {
    std::vector<int> rows, cols;
    for (size_t i = 0; i < cost.size(); ++i)
        if (!row_used[i]) rows.push_back(static_cast<int>(i));
    for (size_t j = 0; j < cost[0].size(); ++j)
        if (!col_used[j]) cols.push_back(static_cast<int>(j));
    if (cols.empty()) return 0.0;
    if (rows.size() < cols.size())
        throw ValidationError("hungarian_match: fewer free queries than ground truths");
    int n = static_cast<int>(rows.size());
    std::vector<std::vector<double>> sq(static_cast<size_t>(n),
                                        std::vector<double>(static_cast<size_t>(n), 0.0));
    for (int i = 0; i < n; ++i)
        for (size_t j = 0; j < cols.size(); ++j)
            sq[static_cast<size_t>(i)][j] =
                cost[static_cast<size_t>(rows[static_cast<size_t>(i)])][static_cast<size_t>(cols[j])];
    std::vector<int> assignment;
    return solve_square(sq, assignment);
}

}  // namespace

MatchResult hungarian_match(const std::vector<std::vector<double>>& cost) {
    if (cost.empty() || cost[0].empty())
        throw ValidationError("hungarian_match: empty cost matrix");
    size_t Q = cost.size(), G = cost[0].size();
    for (const auto& row : cost) {
        if (row.size() != G) throw ValidationError("hungarian_match: ragged cost matrix");
        for (double c : row)
            if (!std::isfinite(c)) throw ValidationError("hungarian_match: non-finite cost");
    }

    std::vector<char> row_used(Q, 0), col_used(G, 0);
    double optimum = solve_remaining(cost, row_used, col_used);
    double tol = 1e-9 * std::max(1.0, std::fabs(optimum));

    // Greedy lexicographic refinement: fix the smallest (query, gt) pair that
    // still achieves the optimal total, then recurse on the remainder.
    MatchResult result;
    size_t to_match = std::min(Q, G);
    double fixed_cost = 0.0;
    for (size_t i = 0; i < Q && result.pairs.size() < to_match; ++i) {
        for (size_t j = 0; j < G; ++j) {
            if (col_used[j]) continue;
            row_used[i] = 1;
            col_used[j] = 1;
            double with = fixed_cost + cost[i][j] + solve_remaining(cost, row_used, col_used);
            if (std::fabs(with - optimum) <= tol) {
                fixed_cost += cost[i][j];
                result.pairs.emplace_back(static_cast<int>(i), static_cast<int>(j));
                break;
            }
            row_used[i] = 0;
            col_used[j] = 0;
        }
    }
    for (size_t i = 0; i < Q; ++i)
        if (!row_used[i]) result.unmatched_queries.push_back(static_cast<int>(i));
    return result;
}

MatchResult image_loss_terms(const DetectorForward& fw, const std::vector<Annotation>& gts,
                             const std::vector<std::string>& prompt_names, const ModelConfig& cfg,
                             LossTerms& terms, const MatchResult* pinned_match) {
    size_t Q = fw.probs.size();
    std::vector<int> labels;
    std::vector<Box> gt_boxes;
    for (const auto& a : gts) {
        auto it = std::find(prompt_names.begin(), prompt_names.end(), a.category);
        if (it == prompt_names.end())
            throw ValidationError("image_loss_terms: no prompt for category " + a.category);
        labels.push_back(static_cast<int>(it - prompt_names.begin()));
        gt_boxes.push_back(a.box);
    }

    MatchResult match;
    if (pinned_match) {
        match = *pinned_match;
    } else if (!gts.empty()) {
        std::vector<std::vector<double>> scores;
        std::vector<Box> pred_boxes;
        scores.reserve(Q);
        for (size_t i = 0; i < Q; ++i) {
            scores.push_back(fw.probs[i].values());
            const auto& bv = fw.boxes[i].values();
            pred_boxes.push_back(Box{bv[0], bv[1], bv[2], bv[3]});
        }
        match = hungarian_match(match_cost(scores, pred_boxes, labels, gt_boxes, cfg));
    } else {
        for (size_t i = 0; i < Q; ++i) match.unmatched_queries.push_back(static_cast<int>(i));
    }

    int bg_slot = static_cast<int>(prompt_names.size());
    for (const auto& [qi, gj] : match.pairs) {
        Tensor p_y = index(fw.probs[static_cast<size_t>(qi)], static_cast<size_t>(labels[static_cast<size_t>(gj)]));
        terms.cls_matched.push_back(neg(log_t(clamp_min(p_y, 1e-300))));
        Tensor gt_box = Tensor::from_values({4}, {gt_boxes[static_cast<size_t>(gj)].cx,
                                                  gt_boxes[static_cast<size_t>(gj)].cy,
                                                  gt_boxes[static_cast<size_t>(gj)].w,
                                                  gt_boxes[static_cast<size_t>(gj)].h});
        terms.l1.push_back(l1_box_t(fw.boxes[static_cast<size_t>(qi)], gt_box));
        terms.giou.push_back(sub(Tensor::scalar(1.0), giou_t(fw.boxes[static_cast<size_t>(qi)], gt_box)));
    }
    for (int qi : match.unmatched_queries) {
        Tensor p_bg = index(fw.probs[static_cast<size_t>(qi)], static_cast<size_t>(bg_slot));
        terms.cls_unmatched.push_back(neg(log_t(clamp_min(p_bg, 1e-300))));
    }
    return match;
}

namespace {

Tensor mean_of(const std::vector<Tensor>& xs) {
    if (xs.empty()) return Tensor::scalar(0.0);
    Tensor s = xs[0];
    for (size_t i = 1; i < xs.size(); ++i) s = add(s, xs[i]);
    return scale(s, 1.0 / static_cast<double>(xs.size()));
}

}  // namespace

BatchLoss finalize_loss(const LossTerms& terms, const ModelConfig& cfg) {
    Tensor cls = add(mean_of(terms.cls_matched), scale(mean_of(terms.cls_unmatched), cfg.background_coef));
    Tensor l1 = mean_of(terms.l1);
    Tensor gi = mean_of(terms.giou);
    Tensor total = add(add(scale(cls, cfg.lambda_cls), scale(l1, cfg.lambda_l1)),
                       scale(gi, cfg.lambda_giou));
    BatchLoss out;
    out.total = total;
    out.breakdown = LossBreakdown{cls.item(), l1.item(), gi.item(), total.item(),
                                  cfg.lambda_cls, cfg.lambda_l1, cfg.lambda_giou};
    return out;
}

std::vector<std::pair<std::string, std::vector<Box>>> sample_stage2_instances(
    const std::vector<Annotation>& annotations, int m, Rng& rng) {
    if (annotations.empty())
        throw ValidationError("sample_stage2_instances: image has no annotations");
    if (m < 1) throw ValidationError("sample_stage2_instances: m must be >= 1");
    // preserve first-appearance order of categories for determinism
    std::vector<std::string> cats;
    for (const auto& a : annotations)
        if (std::find(cats.begin(), cats.end(), a.category) == cats.end())
            cats.push_back(a.category);
    std::vector<std::pair<std::string, std::vector<Box>>> out;
    for (const auto& cat : cats) {
        std::vector<Box> pool;
        for (const auto& a : annotations)
            if (a.category == cat) pool.push_back(a.box);
        auto picks = rng.sample_without_replacement(pool.size(), static_cast<size_t>(m));
        std::sort(picks.begin(), picks.end());
        std::vector<Box> chosen;
        for (size_t p : picks) chosen.push_back(pool[p]);
        out.emplace_back(cat, std::move(chosen));
    }
    return out;
}

std::set<std::string> stage_frozen_prefixes(const StageConfig& cfg) {
    if (cfg.stage == 1) return {};
    if (cfg.stage == 2) {
        if (!cfg.freeze_detector) return {};
        return {"backbone.", "encoder.", "decoder.", "box_head.", "text.", "bg_prompt"};
    }
    return {"backbone.", "encoder.", "decoder.", "box_head.", "text.", "bg_prompt", "vpe."};
}

StageResult run_stage(const StageConfig& cfg, ParamStore& ps, const Dataset& train,
                      const ModelConfig& model, const PromptCache* cache, uint64_t seed) {
    if (cfg.stage < 1 || cfg.stage > 3) throw ConfigError("run_stage: stage must be 1, 2 or 3");
    if (cfg.stage == 3 && cache == nullptr)
        throw ConfigError("run_stage: stage 3 requires a prompt cache");
    if (train.scenes.empty()) throw ValidationError("run_stage: empty dataset");

    ps.set_frozen_prefixes(stage_frozen_prefixes(cfg));
    Adam adam(cfg.lr);
    Rng rng(mix_seed(seed, static_cast<uint64_t>(cfg.stage)));

    std::vector<std::string> all_names;
    for (const auto& c : train.spec.categories) all_names.push_back(c.name);

    StageResult result;
    int step = 0;
    std::vector<size_t> order(train.scenes.size());
    std::iota(order.begin(), order.end(), 0);
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        // deterministic shuffle
        for (size_t i = order.size(); i > 1; --i)
            std::swap(order[i - 1], order[rng.next_below(i)]);
        for (size_t start = 0; start < order.size(); start += static_cast<size_t>(cfg.batch_size)) {
            size_t end = std::min(order.size(), start + static_cast<size_t>(cfg.batch_size));
            ps.zero_all_grads();
            LossTerms terms;

            // stage-1 and stage-3 prompts are shared across the batch
            std::vector<CategoryPrompt> shared_prompts;
            bool visual_iteration = cfg.stage == 2 && (cfg.freeze_detector || step % 2 == 1);
            if (cfg.stage == 1 || (cfg.stage == 2 && !visual_iteration)) {
                for (const auto& name : all_names)
                    shared_prompts.push_back(CategoryPrompt::text(encode_text(name, ps, model)));
            } else if (cfg.stage == 3) {
                int n;
                if (cfg.fusion_train_prompt_count == "random")
                    n = 1 + static_cast<int>(rng.next_below(32));
                else
                    n = std::stoi(cfg.fusion_train_prompt_count);
                for (const auto& name : all_names) {
                    TextualPrompt g = encode_text(name, ps, model);
                    VisualPrompt v = aggregate(*cache, name, n, rng);
                    shared_prompts.push_back(CategoryPrompt::fused(fuse(g, v, ps, model)));
                }
            }

            for (size_t b = start; b < end; ++b) {
                const SyntheticScene& scene = train.scenes[order[b]];
                if (visual_iteration) {
                    // visual prompts from exemplars of this very image
                    MultiScaleFeatures enc =
                        encoder_forward(backbone_forward(scene.image, ps, model), ps, model);
                    auto exemplars =
                        sample_stage2_instances(scene.annotations, cfg.instances_per_category, rng);
                    std::vector<CategoryPrompt> prompts;
                    std::vector<std::string> names;
                    for (const auto& [cat, boxes] : exemplars) {
                        std::vector<Tensor> embs;
                        for (const Box& ex : boxes)
                            embs.push_back(encode_visual(ex, enc.levels, ps, model, cat).embedding);
                        Tensor e = embs[0];
                        for (size_t k = 1; k < embs.size(); ++k) e = add(e, embs[k]);
                        e = scale(e, 1.0 / static_cast<double>(embs.size()));
                        prompts.push_back(CategoryPrompt::visual(VisualPrompt{cat, e, "exemplar"}));
                        names.push_back(cat);
                    }
                    DetectorForward fw;
                    fw.encoded = enc;
                    fw.queries = select_queries(enc, prompts, ps, model);
                    fw.refined = decoder_forward(fw.queries, enc, ps, model);
                    for (int i = 0; i < fw.refined.dim(0); ++i) {
                        Tensor row = slice_rows(fw.refined, i, 1);
                        fw.probs.push_back(classify(row, prompts, model.tau, ps, model));
                        fw.boxes.push_back(predict_box(row, ps, model));
                    }
                    image_loss_terms(fw, scene.annotations, names, model, terms);
                } else {
                    DetectorForward fw = run_detector(scene.image, shared_prompts, ps, model);
                    image_loss_terms(fw, scene.annotations, all_names, model, terms);
                }
            }

            BatchLoss loss = finalize_loss(terms, model);
            loss.total.backward();
            clip_global_grad_norm(ps, cfg.grad_clip);
            adam.step(ps);
            result.loss_log.push_back({static_cast<double>(step), loss.breakdown.cls,
                                       loss.breakdown.l1, loss.breakdown.giou,
                                       loss.breakdown.total});
            ++step;
        }
    }
    return result;
}

}  // namespace rsmpod
