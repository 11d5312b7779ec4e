#pragma once

#include <array>
#include <vector>

namespace dadet {

// Axis-aligned box in pixel units, corners (x1,y1) top-left and (x2,y2)
// bottom-right, end-exclusive for area purposes.
struct Box {
  float x1 = 0, y1 = 0, x2 = 0, y2 = 0;

  float width() const { return x2 - x1; }
  float height() const { return y2 - y1; }
  float area() const { return width() * height(); }
  float cx() const { return 0.5f * (x1 + x2); }
  float cy() const { return 0.5f * (y1 + y2); }
  bool valid() const { return x1 <= x2 && y1 <= y2; }
};

float iou(const Box& a, const Box& b);

Box clip_box(const Box& b, float img_w, float img_h);

struct AnchorConfig {
  float base_size = 8.0f;
  std::vector<float> scales = {1.0f, 2.0f, 4.0f};
  std::vector<float> aspect_ratios = {1.0f};
  int feature_stride = 4;

  int anchors_per_location() const {
    return static_cast<int>(scales.size() * aspect_ratios.size());
  }
  void validate() const;
};

// One anchor per (location, scale, ratio), centered on the feature cell.
// Order: locations row-major, then scales, then ratios. Anchors near the
// border may extend outside the image; they are clipped at proposal time,
// not here.
std::vector<Box> generate_anchors(const AnchorConfig& cfg, int h_f, int w_f);

// (tx, ty, tw, th): center offsets normalized by anchor size, log size ratios.
std::array<float, 4> encode_deltas(const Box& anchor, const Box& gt);

// Inverse of encode_deltas; log-ratios are clamped to |t| <= 4 before
// exponentiation so wild regression outputs cannot overflow.
Box decode_deltas(const Box& anchor, const std::array<float, 4>& d);

enum class AnchorLabel { kNegative = 0, kPositive = 1, kIgnore = 2 };

struct AnchorAssignment {
  std::vector<AnchorLabel> labels;
  // Index into gt_boxes of the best-overlap gt, -1 where no gt overlaps.
  std::vector<int> matched_gt;
};

// Threshold rule plus the argmax rule: the best anchor of each gt is positive
// even below pos_iou, so no gt with any overlap goes unsupervised.
AnchorAssignment assign_anchor_targets(const std::vector<Box>& anchors,
                                       const std::vector<Box>& gt_boxes,
                                       float pos_iou, float neg_iou);

struct ScoredBox {
  Box box;
  float score = 0;
};

// Greedy NMS. Keeps in descending score order (ties: lower index first) and
// suppresses boxes with IoU strictly greater than the threshold against any
// kept box. Returns kept indices into the input, in keep order.
std::vector<int> nms(const std::vector<ScoredBox>& boxes, float iou_threshold);

}  // namespace dadet
