#pragma once

#include <array>
#include <string>
#include <utility>
#include <vector>

#include "dadet/boxes.hpp"
#include "dadet/common.hpp"
#include "dadet/synthdata.hpp"
#include "dadet/tensor.hpp"

namespace dadet {

struct Proposal {
  Box box;              // clipped to image bounds
  float objectness = 0; // sigmoid of the RPN logit, in [0,1]
  int image_index = 0;
};

struct Detection {
  Box box;
  int category = 0;  // 1..K; background (0) is never emitted
  float score = 0;
};

struct DetectorConfig {
  int num_classes = 3;  // foreground classes; class 0 is background
  AnchorConfig anchors{};
  float pos_iou = 0.7f;
  float neg_iou = 0.3f;
  int rpn_batch = 32;
  float rpn_fg_fraction = 0.5f;
  int roi_batch = 16;
  float roi_fg_fraction = 0.5f;
  float roi_fg_iou = 0.5f;
  int pre_nms_top_n = 200;
  float rpn_nms_iou = 0.7f;
  int post_nms_top_n = 64;
  int roi_size = 4;  // pooled grid is roi_size x roi_size
  float cls_nms_iou = 0.3f;
  float score_floor = 0.05f;

  void validate() const;
  int roi_feature_dim() const { return 64 * roi_size * roi_size; }
};

// All learnable tensors of the detector. The backbone is four 3x3 convs with
// two 2x2 max-pools (feature stride 4, 64 channels out); the RPN is a 3x3
// hidden conv with 1x1 objectness/delta heads; the ROI head is two FC layers
// feeding classification and per-class box regression.
struct DetectorParams {
  Tensor c1w, c1b, c2w, c2b, c3w, c3b, c4w, c4b;
  Tensor rpn_w, rpn_b, obj_w, obj_b, del_w, del_b;
  Tensor fc1_w, fc1_b, fc2_w, fc2_b, cls_w, cls_b, box_w, box_b;

  // Stable name -> tensor view used by the optimizer and checkpoints.
  std::vector<std::pair<std::string, Tensor>> named() const;
  void set_requires_grad(bool value);

  static DetectorParams init(const DetectorConfig& cfg, SplitMix64& rng);
};

// One forward pass of the detection pipeline on a single image. Tensors stay
// attached to the tape so losses can be built on top.
struct DetectionForward {
  Tensor features;    // [1, 64, H_f, W_f]
  Tensor rpn_obj;     // [N_anchors] objectness logits, anchor order
  Tensor rpn_deltas;  // [N_anchors, 4] box deltas, anchor order
  std::vector<Box> anchors;
  std::vector<Proposal> proposals;  // detached from the graph
  int num_gt_proposals = 0;         // trailing proposals copied from gt
  Tensor roi_fc2;      // [R, 128] shared ROI trunk
  Tensor cls_logits;   // [R, K+1]
  Tensor box_deltas;   // [R, 4*(K+1)]
  int image_h = 0, image_w = 0;
};

Tensor backbone_features(Tape& tape, const DetectorParams& p, const Tensor& image);

// Max-pool the feature map over a box mapped to feature coordinates by
// integer rounding. Bins that round to nothing yield 0; gradients route to
// each bin's argmax cell. fm is [1,C,H,W]; the result is [C, out_h, out_w].
Tensor roi_pool(Tape& tape, const Tensor& fm, const Box& box, int out_h,
                int out_w, int stride);

// Decode, clip, score-sort, NMS. When gt_boxes is non-null (training) the gt
// boxes are appended as extra proposals so the ROI head always sees positives.
std::vector<Proposal> select_proposals(const std::vector<Box>& anchors,
                                       const Tensor& rpn_obj,
                                       const Tensor& rpn_deltas,
                                       const DetectorConfig& cfg, int image_w,
                                       int image_h,
                                       const std::vector<Box>* gt_boxes);

DetectionForward forward_detection(Tape& tape, const DetectorParams& p,
                                   const DetectorConfig& cfg,
                                   const Tensor& image,
                                   const std::vector<Box>* gt_boxes);

std::vector<Detection> detect(const Tensor& image, const DetectorParams& p,
                              const DetectorConfig& cfg);

// (L_rpn, L_roi): RPN objectness cross-entropy over a sampled anchor batch
// plus smooth-L1 on positive-anchor deltas, and ROI (K+1)-way cross-entropy
// over sampled proposals plus smooth-L1 on foreground deltas. Regression
// terms are normalized by their sample counts. Source-domain samples only.
std::pair<Tensor, Tensor> compute_detection_loss(Tape& tape,
                                                 const DetectorConfig& cfg,
                                                 const DetectionForward& fwd,
                                                 const Sample& sample,
                                                 SplitMix64& rng);

}  // namespace dadet
