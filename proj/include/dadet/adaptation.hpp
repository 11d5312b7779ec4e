#pragma once

#include <string>
#include <utility>
#include <vector>

#include "dadet/common.hpp"
#include "dadet/tensor.hpp"

namespace dadet {

// Domain labels: 0 = source, 1 = target.

// Image-level domain head: gradient reversal on the feature map, then two
// 1x1 convolutions (64 -> 32 -> 1) with relu between and sigmoid out, so each
// feature-map activation gets its own domain probability.
struct ImageHeadParams {
  Tensor w1, b1, w2, b2;

  std::vector<std::pair<std::string, Tensor>> named() const;
  void set_requires_grad(bool value);
  static ImageHeadParams init(SplitMix64& rng, int in_channels = 64);
};

// Instance-level domain head: gradient reversal on each pooled ROI vector
// after the detector's FC trunk, then two affine layers (128 -> 32 -> 1) and
// sigmoid, one probability per ROI.
struct InstanceHeadParams {
  Tensor w1, b1, w2, b2;

  std::vector<std::pair<std::string, Tensor>> named() const;
  void set_requires_grad(bool value);
  static InstanceHeadParams init(SplitMix64& rng, int in_dim = 128);
};

// features [1,C,H,W] -> probabilities [1,1,H,W] in (0,1).
Tensor image_domain_probs(Tape& tape, const ImageHeadParams& p, const Tensor& features);

// roi_fc2 [R,D] -> probabilities [R] in (0,1).
Tensor instance_domain_probs(Tape& tape, const InstanceHeadParams& p, const Tensor& roi_fc2);

// Binary cross-entropy of per-activation domain probabilities against one
// domain label per image: -sum [D log p + (1-D) log(1-p)], averaged over all
// activations (or summed, behind the switch). Probabilities are clamped to
// [1e-7, 1-1e-7] inside the log.
Tensor image_domain_loss(Tape& tape, const std::vector<Tensor>& prob_maps,
                         const std::vector<int>& labels,
                         Reduction reduction = Reduction::kMean);

// Same cross-entropy over per-ROI probabilities ([R_i] each; an undefined
// tensor stands for an image with no ROIs). Zero ROIs in total gives loss 0
// and sets *empty (when provided) instead of erroring.
Tensor instance_domain_loss(Tape& tape, const std::vector<Tensor>& instance_probs,
                            const std::vector<int>& labels,
                            Reduction reduction = Reduction::kMean,
                            bool* empty = nullptr);

// sum_{i,j} | mean_{u,v} p_i(u,v) - p_{i,j} | / count. Gradients flow into
// both heads unless stop_image_side treats the per-image mean as a constant.
Tensor consistency_loss(Tape& tape, const std::vector<Tensor>& prob_maps,
                        const std::vector<Tensor>& instance_probs,
                        bool stop_image_side = false);

struct AblationMask {
  bool img = true;
  bool ins = true;
  bool cst = true;
};

struct LossBreakdown {
  float l_rpn = 0, l_roi = 0, l_img = 0, l_ins = 0, l_cst = 0;
  float total = 0;
};

// total = l_rpn + l_roi + lambda * (l_img + l_ins + l_cst), with masked or
// absent terms contributing nothing (and, in the graph form, receiving no
// gradient). Null pointers mean the term is absent.
Tensor total_loss(Tape& tape, const Tensor* l_rpn, const Tensor* l_roi,
                  const Tensor* l_img, const Tensor* l_ins, const Tensor* l_cst,
                  float lambda, const AblationMask& mask);

LossBreakdown loss_breakdown(const Tensor* l_rpn, const Tensor* l_roi,
                             const Tensor* l_img, const Tensor* l_ins,
                             const Tensor* l_cst, float lambda,
                             const AblationMask& mask);

struct HDivergenceEstimate {
  float err_source = 0;
  float err_target = 0;
  float d_h = 0;
};

// Proxy for d_H(S,T) = 2 (1 - min_h (err_S + err_T)): split each domain's
// vectors 50/50 into train/held-out halves, fit a logistic classifier on the
// train halves, and score the held-out halves at threshold 0.5. Needs at
// least 10 vectors per domain. Diagnostic only; never part of training.
HDivergenceEstimate estimate_h_divergence(const std::vector<std::vector<float>>& feats_source,
                                          const std::vector<std::vector<float>>& feats_target);

}  // namespace dadet
