#pragma once
#include <map>
#include <string>
#include <vector>

#include "rsmpod/data.hpp"
#include "rsmpod/detector.hpp"

namespace rsmpod {

// One detection flattened for metric computation.
struct DetRecord {
    std::string image_id;
    std::string category;
    Box box;
    double confidence = 0.0;
};

struct GroundTruthImage {
    std::string image_id;
    std::vector<Annotation> annotations;
};

// Sorts dets by descending confidence (ties: image id, then box coordinates)
// and greedily matches each to the highest-IoU unmatched same-image ground
// truth with IoU >= thresh. Returns TP flags aligned with the sorted order.
std::vector<char> match_detections(std::vector<DetRecord>& dets,
                                   const std::map<std::string, std::vector<Box>>& gts_by_image,
                                   double iou_thresh);

// All-point interpolated AP from confidence-ordered TP flags.
double average_precision(const std::vector<char>& tp_flags, int num_gt);

struct PrPoint {
    double recall = 0.0, precision = 0.0;
};

struct CategoryEval {
    std::map<double, double> ap_by_thresh;
    double ap50 = 0.0;
    double ap_mean = 0.0;          // mean over thresholds
    std::vector<PrPoint> pr50;     // PR curve at IoU 0.5
    int num_gt = 0;
};

struct APResult {
    std::map<std::string, CategoryEval> per_category;
    double ap50 = 0.0;  // mean over categories at IoU 0.5
    double map = 0.0;   // mean over categories and thresholds
};

// COCO-style thresholds 0.5:0.05:0.95.
std::vector<double> default_iou_thresholds();

APResult evaluate(const std::vector<DetRecord>& dets,
                  const std::vector<GroundTruthImage>& gts,
                  const std::vector<std::string>& categories,
                  const std::vector<double>& thresholds = default_iou_thresholds());

}  // namespace rsmpod
