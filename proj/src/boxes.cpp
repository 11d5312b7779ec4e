#include "dadet/boxes.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace dadet {

float iou(const Box& a, const Box& b) {
  float ix1 = std::max(a.x1, b.x1);
  float iy1 = std::max(a.y1, b.y1);
  float ix2 = std::min(a.x2, b.x2);
  float iy2 = std::min(a.y2, b.y2);
  float iw = ix2 - ix1;
  float ih = iy2 - iy1;
  if (iw <= 0.0f || ih <= 0.0f) return 0.0f;
  float inter = iw * ih;
  float uni = a.area() + b.area() - inter;
  if (uni <= 0.0f) return 0.0f;
  return inter / uni;
}

Box clip_box(const Box& b, float img_w, float img_h) {
  Box c;
  c.x1 = std::min(std::max(b.x1, 0.0f), img_w);
  c.y1 = std::min(std::max(b.y1, 0.0f), img_h);
  c.x2 = std::min(std::max(b.x2, 0.0f), img_w);
  c.y2 = std::min(std::max(b.y2, 0.0f), img_h);
  return c;
}

void AnchorConfig::validate() const {
  if (base_size <= 0.0f || feature_stride <= 0)
    throw std::invalid_argument("anchor base size and stride must be positive");
  if (scales.empty() || aspect_ratios.empty())
    throw std::invalid_argument("anchor scales and aspect ratios must be non-empty");
  for (float s : scales)
    if (s <= 0.0f) throw std::invalid_argument("anchor scales must be positive");
  for (float r : aspect_ratios)
    if (r <= 0.0f) throw std::invalid_argument("anchor aspect ratios must be positive");
}

std::vector<Box> generate_anchors(const AnchorConfig& cfg, int h_f, int w_f) {
  cfg.validate();
  if (h_f <= 0 || w_f <= 0) throw std::invalid_argument("anchor grid extents must be positive");
  std::vector<Box> anchors;
  anchors.reserve(static_cast<std::size_t>(h_f) * w_f * cfg.anchors_per_location());
  for (int v = 0; v < h_f; ++v) {
    for (int u = 0; u < w_f; ++u) {
      float cx = (static_cast<float>(u) + 0.5f) * static_cast<float>(cfg.feature_stride);
      float cy = (static_cast<float>(v) + 0.5f) * static_cast<float>(cfg.feature_stride);
      for (float scale : cfg.scales) {
        for (float ratio : cfg.aspect_ratios) {
          float sr = std::sqrt(ratio);
          float w = cfg.base_size * scale * sr;
          float h = cfg.base_size * scale / sr;
          anchors.push_back({cx - 0.5f * w, cy - 0.5f * h, cx + 0.5f * w, cy + 0.5f * h});
        }
      }
    }
  }
  return anchors;
}

std::array<float, 4> encode_deltas(const Box& anchor, const Box& gt) {
  float aw = anchor.width(), ah = anchor.height();
  if (aw <= 0.0f || ah <= 0.0f) throw std::invalid_argument("anchor with non-positive size");
  float gw = gt.width(), gh = gt.height();
  if (gw <= 0.0f || gh <= 0.0f) throw std::invalid_argument("gt box with non-positive size");
  return {(gt.cx() - anchor.cx()) / aw, (gt.cy() - anchor.cy()) / ah,
          std::log(gw / aw), std::log(gh / ah)};
}

Box decode_deltas(const Box& anchor, const std::array<float, 4>& d) {
  float aw = anchor.width(), ah = anchor.height();
  if (aw <= 0.0f || ah <= 0.0f) throw std::invalid_argument("anchor with non-positive size");
  float tw = std::min(std::max(d[2], -4.0f), 4.0f);
  float th = std::min(std::max(d[3], -4.0f), 4.0f);
  float cx = anchor.cx() + d[0] * aw;
  float cy = anchor.cy() + d[1] * ah;
  float w = aw * std::exp(tw);
  float h = ah * std::exp(th);
  return {cx - 0.5f * w, cy - 0.5f * h, cx + 0.5f * w, cy + 0.5f * h};
}

AnchorAssignment assign_anchor_targets(const std::vector<Box>& anchors,
                                       const std::vector<Box>& gt_boxes,
                                       float pos_iou, float neg_iou) {
  if (!(0.0f <= neg_iou && neg_iou <= pos_iou && pos_iou <= 1.0f))
    throw std::invalid_argument("anchor target thresholds must satisfy 0 <= neg <= pos <= 1");
  std::size_t n = anchors.size();
  AnchorAssignment out;
  out.labels.assign(n, AnchorLabel::kNegative);
  out.matched_gt.assign(n, -1);
  if (gt_boxes.empty()) return out;

  std::vector<float> best_iou(n, 0.0f);
  std::vector<float> gt_best(gt_boxes.size(), 0.0f);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t g = 0; g < gt_boxes.size(); ++g) {
      float v = iou(anchors[i], gt_boxes[g]);
      if (v > best_iou[i]) {
        best_iou[i] = v;
        out.matched_gt[i] = static_cast<int>(g);
      }
      gt_best[g] = std::max(gt_best[g], v);
    }
    if (best_iou[i] >= pos_iou)
      out.labels[i] = AnchorLabel::kPositive;
    else if (best_iou[i] >= neg_iou)
      out.labels[i] = AnchorLabel::kIgnore;
  }
  // Argmax rule: every overlapped gt keeps its best anchor(s) positive, even
  // when that overlap is under the threshold.
  for (std::size_t g = 0; g < gt_boxes.size(); ++g) {
    if (gt_best[g] <= 0.0f) continue;
    for (std::size_t i = 0; i < n; ++i) {
      if (iou(anchors[i], gt_boxes[g]) == gt_best[g]) {
        out.labels[i] = AnchorLabel::kPositive;
        if (out.matched_gt[i] < 0) out.matched_gt[i] = static_cast<int>(g);
      }
    }
  }
  return out;
}

std::vector<int> nms(const std::vector<ScoredBox>& boxes, float iou_threshold) {
  for (const ScoredBox& b : boxes)
    if (!std::isfinite(b.score)) throw std::invalid_argument("nms requires finite scores");
  std::vector<int> order(boxes.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    return boxes[static_cast<std::size_t>(a)].score > boxes[static_cast<std::size_t>(b)].score;
  });
  std::vector<int> kept;
  std::vector<char> suppressed(boxes.size(), 0);
  for (int idx : order) {
    if (suppressed[static_cast<std::size_t>(idx)]) continue;
    kept.push_back(idx);
    for (int other : order) {
      if (other == idx || suppressed[static_cast<std::size_t>(other)]) continue;
      if (iou(boxes[static_cast<std::size_t>(idx)].box,
              boxes[static_cast<std::size_t>(other)].box) > iou_threshold)
        suppressed[static_cast<std::size_t>(other)] = 1;
    }
  }
  return kept;
}

}  // namespace dadet
