#pragma once

#include "pcdf/schema.hpp"

#include <map>
#include <string>
#include <vector>

namespace pcdf {

/// Scored detection for evaluation.
struct Detection {
    OrientedBox box;
    double score = 0;
};

double box_area(const OrientedBox& b);

/// Corners in drawing order (counter-clockwise in a y-up frame).
std::array<std::array<double, 2>, 4> box_corners(const OrientedBox& b);

/// Intersection-over-union of two rotated rectangles via convex polygon
/// clipping. Degenerate (zero-area) boxes give 0.
double rotated_iou(const OrientedBox& a, const OrientedBox& b);

/// Greedy matching at a fixed IoU threshold: detections sorted by descending
/// score (ties: earlier input index first); each matches the unmatched
/// same-class ground truth with the highest IoU >= thresh. Returns per input
/// detection whether it is a true positive, plus the sort order used.
struct MatchResult {
    std::vector<bool> tp;       // indexed like the input detections
    std::vector<int> order;     // input indices in descending-score order
};
MatchResult match_detections(const std::vector<Detection>& dets,
                             const std::vector<OrientedBox>& gts,
                             double iou_thresh = 0.5);

/// All-point interpolated average precision. `tp` is ordered by descending
/// score. gt_count = 0 has no defined AP; callers must exclude such classes.
double average_precision(const std::vector<bool>& tp, int gt_count);

/// Detections and ground truth of one evaluated image pair.
struct SampleEval {
    std::vector<Detection> detections;
    std::vector<OrientedBox> ground_truth;
    ConditionRecord condition;
};

struct ApCell {
    double map50 = 0;
    int sample_count = 0;
    int gt_count = 0;
    bool defined = false;  // false: no ground truth in the cell (n/a, never 0.0)
};

struct EvalReport {
    std::map<int, double> per_class_ap;        // classes with >= 1 ground truth
    double map50 = 0;
    bool defined = false;
    int sample_count = 0;
    // per attribute (canonical order), per bucket label
    std::array<std::map<std::string, ApCell>, kNumAttributes> per_condition;
};

/// Computes AP per class over the sample set; map50 = mean over classes with
/// ground truth.
ApCell evaluate_samples(const std::vector<const SampleEval*>& samples,
                        double iou_thresh,
                        std::map<int, double>* per_class_out);

/// Full report: global metrics plus per-condition cells (samples grouped by
/// each attribute's bucket; every sample lands in exactly one cell per
/// attribute).
EvalReport condition_report(const std::vector<SampleEval>& samples,
                            double iou_thresh = 0.5);

/// Renders the report as a fixed-layout text table (attribute rows AL, AN,
/// TI, WE, IL, SC). Cells without ground truth print "n/a".
std::string render_report(const EvalReport& report);

/// Line-delimited machine-readable form, canonical float rendering.
std::string serialize_report(const EvalReport& report);

} // namespace pcdf
