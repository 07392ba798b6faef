#include "rsmpod/eval.hpp"

#include <algorithm>
#include <cmath>
#include <set>

namespace rsmpod {

std::vector<double> default_iou_thresholds() {
    std::vector<double> t;
    for (int i = 0; i < 10; ++i) t.push_back(0.5 + 0.05 * i);
    return t;
}

std::vector<char> match_detections(std::vector<DetRecord>& dets,
                                   const std::map<std::string, std::vector<Box>>& gts_by_image,
                                   double iou_thresh) {
    std::sort(dets.begin(), dets.end(), [](const DetRecord& a, const DetRecord& b) {
        if (a.confidence != b.confidence) return a.confidence > b.confidence;
        if (a.image_id != b.image_id) return a.image_id < b.image_id;
        auto ka = std::array<double, 4>{a.box.cx, a.box.cy, a.box.w, a.box.h};
        auto kb = std::array<double, 4>{b.box.cx, b.box.cy, b.box.w, b.box.h};
        return ka < kb;
    });
    std::map<std::string, std::vector<char>> used;
    for (const auto& [id, boxes] : gts_by_image) used[id].assign(boxes.size(), 0);

    std::vector<char> tp(dets.size(), 0);
    for (size_t i = 0; i < dets.size(); ++i) {
        auto it = gts_by_image.find(dets[i].image_id);
        if (it == gts_by_image.end()) continue;
        const auto& boxes = it->second;
        auto& flags = used[dets[i].image_id];
        int best = -1;
        double best_iou = 0.0;
        for (size_t g = 0; g < boxes.size(); ++g) {
            if (flags[g]) continue;
            double v = iou(dets[i].box, boxes[g]);
            if (v >= iou_thresh && v > best_iou) {
                best = static_cast<int>(g);
                best_iou = v;
            }
        }
        if (best >= 0) {
            flags[static_cast<size_t>(best)] = 1;
            tp[i] = 1;
        }
    }
    return tp;
}

double average_precision(const std::vector<char>& tp_flags, int num_gt) {
    if (num_gt < 1) throw ValidationError("average_precision: num_gt must be >= 1");
    if (tp_flags.empty()) return 0.0;
    size_t n = tp_flags.size();
    std::vector<double> precision(n), recall(n);
    int tp = 0;
    for (size_t i = 0; i < n; ++i) {
        tp += tp_flags[i] ? 1 : 0;
        precision[i] = static_cast<double>(tp) / static_cast<double>(i + 1);
        recall[i] = static_cast<double>(tp) / num_gt;
    }
    // all-point interpolation: running max of precision from the right
    for (size_t i = n - 1; i > 0; --i) precision[i - 1] = std::max(precision[i - 1], precision[i]);
    double ap = 0.0, prev_recall = 0.0;
    for (size_t i = 0; i < n; ++i) {
        ap += (recall[i] - prev_recall) * precision[i];
        prev_recall = recall[i];
    }
    return ap;
}

APResult evaluate(const std::vector<DetRecord>& dets, const std::vector<GroundTruthImage>& gts,
                  const std::vector<std::string>& categories,
                  const std::vector<double>& thresholds) {
    if (gts.empty()) throw ValidationError("evaluate: empty dataset");
    std::set<std::string> known(categories.begin(), categories.end());
    for (const auto& d : dets)
        if (!known.count(d.category))
            throw ValidationError("evaluate: detection references unknown category " + d.category);

    APResult result;
    double sum_ap50 = 0.0, sum_map = 0.0;
    int counted = 0;
    std::vector<std::string> sorted_cats = categories;
    std::sort(sorted_cats.begin(), sorted_cats.end());
    for (const auto& cat : sorted_cats) {
        std::map<std::string, std::vector<Box>> cat_gts;
        int num_gt = 0;
        for (const auto& img : gts)
            for (const auto& a : img.annotations)
                if (a.category == cat) {
                    cat_gts[img.image_id].push_back(a.box);
                    ++num_gt;
                }
        if (num_gt == 0) continue;  // excluded from the means

        std::vector<DetRecord> cat_dets;
        for (const auto& d : dets)
            if (d.category == cat) cat_dets.push_back(d);

        CategoryEval ce;
        ce.num_gt = num_gt;
        double thresh_sum = 0.0;
        for (double t : thresholds) {
            auto work = cat_dets;
            auto flags = match_detections(work, cat_gts, t);
            double ap = average_precision(flags, num_gt);
            ce.ap_by_thresh[t] = ap;
            thresh_sum += ap;
            if (std::fabs(t - 0.5) < 1e-12) {
                ce.ap50 = ap;
                int tp = 0;
                for (size_t i = 0; i < flags.size(); ++i) {
                    tp += flags[i] ? 1 : 0;
                    ce.pr50.push_back({static_cast<double>(tp) / num_gt,
                                       static_cast<double>(tp) / static_cast<double>(i + 1)});
                }
            }
        }
        ce.ap_mean = thresh_sum / static_cast<double>(thresholds.size());
        sum_ap50 += ce.ap50;
        sum_map += ce.ap_mean;
        ++counted;
        result.per_category[cat] = std::move(ce);
    }
    if (counted > 0) {
        result.ap50 = sum_ap50 / counted;
        result.map = sum_map / counted;
    }
    return result;
}

}  // namespace rsmpod
