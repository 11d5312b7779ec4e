#pragma once

#include <map>
#include <string>
#include <vector>

#include "dadet/adaptation.hpp"
#include "dadet/boxes.hpp"
#include "dadet/detector.hpp"
#include "dadet/synthdata.hpp"

namespace dadet {

// One detection flattened out of its image, already reduced to a single
// class. Used by the per-class AP computation.
struct ClassDetection {
  int image = 0;
  float score = 0;
  Box box;
};

// Area under the precision-recall curve for one class, all-points
// interpolation. Detections are stable-sorted by descending score (ties keep
// input order); matching walks that order greedily, pairing each detection
// with the highest-IoU ground truth of its image, and counts a true positive
// only when that overlap reaches iou_thresh and the ground truth is still
// unmatched. Returns -1 when gt_per_image holds no boxes at all; callers
// exclude such classes from aggregate scores.
double average_precision(std::vector<ClassDetection> detections,
                         const std::vector<std::vector<Box>>& gt_per_image,
                         float iou_thresh = 0.5f);

// Single-image convenience wrapper.
double average_precision(const std::vector<ScoredBox>& detections,
                         const std::vector<Box>& gt_boxes,
                         float iou_thresh = 0.5f);

struct EvalReport {
  // Class label -> AP; only classes with at least one ground-truth instance.
  std::map<int, float> per_class_ap;
  float mean_ap = 0.0f;
  int detection_count = 0;
  std::string dataset_digest;
  std::string checkpoint_digest;
};

EvalReport evaluate_detections(
    const std::vector<std::vector<Detection>>& dets_per_image,
    const Dataset& ds, float iou_thresh = 0.5f);

// Runs detect() over every sample. The dataset must carry annotations; for
// target-domain data that is legitimate here and only here.
EvalReport evaluate_model(const DetectorParams& params,
                          const DetectorConfig& cfg, const Dataset& ds,
                          float iou_thresh = 0.5f);

// For each ground-truth box, the best IoU among the image's top_p proposals
// (proposal lists are assumed score-ordered); averaged over every ground
// truth in the dataset. No ground truth anywhere -> 0.
double mean_best_overlap(
    const std::vector<std::vector<Box>>& proposals_per_image,
    const std::vector<std::vector<Box>>& gt_per_image, int top_p);

// Score-ordered post-NMS proposal boxes for one image.
std::vector<Box> collect_proposals(const DetectorParams& params,
                                   const DetectorConfig& cfg,
                                   const Tensor& image);

double model_mean_best_overlap(const DetectorParams& params,
                               const DetectorConfig& cfg, const Dataset& ds,
                               int top_p);

struct ErrorTaxonomy {
  int correct = 0;
  int mislocalized = 0;
  int background = 0;
  int total() const { return correct + mislocalized + background; }
};

// Buckets the top_r detections dataset-wide by their best IoU against
// same-image ground truths of the predicted class: above 0.5 correct, the
// closed band [0.3, 0.5] mislocalized, below 0.3 background. Both band edges
// land in mislocalized; the interval is read as inclusive.
ErrorTaxonomy categorize_detections(
    const std::vector<std::vector<Detection>>& dets_per_image,
    const Dataset& ds, int top_r = 500);

struct AblationRow {
  std::string name;
  bool adapted = false;  // false marks the source-only baseline row
  AblationMask mask;
  EvalReport report;
};

// CSV and aligned-text renderings of the adaptation ablation. Mask columns
// show an x where the component is enabled and stay empty on the baseline.
std::string ablation_table_csv(const std::vector<AblationRow>& rows);
std::string ablation_table_text(const std::vector<AblationRow>& rows);

struct SweepPoint {
  std::string model;
  float scale = 1.0f;
  float mean_ap = 0.0f;
};

// Header: model,scale,map. One row per (model, scale) pair, input order.
std::string scale_sweep_csv(const std::vector<SweepPoint>& points);

}  // namespace dadet
