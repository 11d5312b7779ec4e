#include "dadet/detector.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace dadet {

namespace {

float stable_sigmoid_value(float z) {
  if (z >= 0.0f) {
    float e = std::exp(-z);
    return 1.0f / (1.0f + e);
  }
  float e = std::exp(z);
  return e / (1.0f + e);
}

Tensor he_conv(SplitMix64& rng, int out_c, int in_c, int k, float scale) {
  Tensor w = Tensor::zeros({out_c, in_c, k, k});
  float std = scale * std::sqrt(2.0f / static_cast<float>(in_c * k * k));
  for (std::size_t i = 0; i < w.numel(); ++i) w.data()[i] = rng.normal() * std;
  return w;
}

Tensor he_linear(SplitMix64& rng, int in_d, int out_d, float scale) {
  Tensor w = Tensor::zeros({in_d, out_d});
  float std = scale * std::sqrt(2.0f / static_cast<float>(in_d));
  for (std::size_t i = 0; i < w.numel(); ++i) w.data()[i] = rng.normal() * std;
  return w;
}

}  // namespace

void DetectorConfig::validate() const {
  anchors.validate();
  if (num_classes < 1) throw std::invalid_argument("num_classes must be >= 1");
  if (!(neg_iou >= 0.0f && neg_iou <= pos_iou && pos_iou <= 1.0f)) {
    throw std::invalid_argument("need 0 <= neg_iou <= pos_iou <= 1");
  }
  if (rpn_batch < 1 || roi_batch < 1) throw std::invalid_argument("batch sizes must be >= 1");
  if (!(rpn_fg_fraction > 0.0f && rpn_fg_fraction <= 1.0f) ||
      !(roi_fg_fraction > 0.0f && roi_fg_fraction <= 1.0f)) {
    throw std::invalid_argument("fg fractions must be in (0, 1]");
  }
  if (!(roi_fg_iou > 0.0f && roi_fg_iou <= 1.0f)) {
    throw std::invalid_argument("roi_fg_iou must be in (0, 1]");
  }
  if (pre_nms_top_n < 1 || post_nms_top_n < 1) {
    throw std::invalid_argument("proposal counts must be >= 1");
  }
  if (roi_size < 1) throw std::invalid_argument("roi_size must be >= 1");
  if (!(rpn_nms_iou >= 0.0f && rpn_nms_iou <= 1.0f) ||
      !(cls_nms_iou >= 0.0f && cls_nms_iou <= 1.0f)) {
    throw std::invalid_argument("nms thresholds must be in [0, 1]");
  }
  if (!(score_floor >= 0.0f)) throw std::invalid_argument("score_floor must be >= 0");
}

std::vector<std::pair<std::string, Tensor>> DetectorParams::named() const {
  return {
      {"c1w", c1w}, {"c1b", c1b}, {"c2w", c2w}, {"c2b", c2b},
      {"c3w", c3w}, {"c3b", c3b}, {"c4w", c4w}, {"c4b", c4b},
      {"rpn_w", rpn_w}, {"rpn_b", rpn_b}, {"obj_w", obj_w}, {"obj_b", obj_b},
      {"del_w", del_w}, {"del_b", del_b},
      {"fc1_w", fc1_w}, {"fc1_b", fc1_b}, {"fc2_w", fc2_w}, {"fc2_b", fc2_b},
      {"cls_w", cls_w}, {"cls_b", cls_b}, {"box_w", box_w}, {"box_b", box_b},
  };
}

void DetectorParams::set_requires_grad(bool value) {
  for (auto& [name, t] : named()) {
    (void)name;
    Tensor copy = t;  // shallow; flips the shared flag
    copy.set_requires_grad(value);
  }
}

DetectorParams DetectorParams::init(const DetectorConfig& cfg, SplitMix64& rng) {
  cfg.validate();
  const int a = cfg.anchors.anchors_per_location();
  const int k1 = cfg.num_classes + 1;
  DetectorParams p;
  p.c1w = he_conv(rng, 8, 3, 3, 1.0f);
  p.c1b = Tensor::zeros({8});
  p.c2w = he_conv(rng, 16, 8, 3, 1.0f);
  p.c2b = Tensor::zeros({16});
  p.c3w = he_conv(rng, 32, 16, 3, 1.0f);
  p.c3b = Tensor::zeros({32});
  p.c4w = he_conv(rng, 64, 32, 3, 1.0f);
  p.c4b = Tensor::zeros({64});
  p.rpn_w = he_conv(rng, 64, 64, 3, 1.0f);
  p.rpn_b = Tensor::zeros({64});
  // Output heads start near zero so early proposals and scores are bland
  // rather than saturated.
  p.obj_w = he_conv(rng, a, 64, 1, 0.1f);
  p.obj_b = Tensor::zeros({a});
  p.del_w = he_conv(rng, 4 * a, 64, 1, 0.1f);
  p.del_b = Tensor::zeros({4 * a});
  p.fc1_w = he_linear(rng, cfg.roi_feature_dim(), 128, 1.0f);
  p.fc1_b = Tensor::zeros({128});
  p.fc2_w = he_linear(rng, 128, 128, 1.0f);
  p.fc2_b = Tensor::zeros({128});
  p.cls_w = he_linear(rng, 128, k1, 0.1f);
  p.cls_b = Tensor::zeros({k1});
  p.box_w = he_linear(rng, 128, 4 * k1, 0.1f);
  p.box_b = Tensor::zeros({4 * k1});
  return p;
}

Tensor backbone_features(Tape& tape, const DetectorParams& p, const Tensor& image) {
  if (image.ndim() != 3 || image.dim(0) != 3) {
    throw std::invalid_argument("backbone expects a [3,H,W] image");
  }
  if (image.dim(1) < 8 || image.dim(2) < 8) {
    throw std::invalid_argument("image too small for the backbone");
  }
  Tensor x = reshape(tape, image, {1, 3, image.dim(1), image.dim(2)});
  x = relu(tape, conv2d(tape, x, p.c1w, p.c1b, 1, 1));
  x = relu(tape, conv2d(tape, x, p.c2w, p.c2b, 1, 1));
  x = max_pool2d(tape, x, 2, 2);
  x = relu(tape, conv2d(tape, x, p.c3w, p.c3b, 1, 1));
  x = relu(tape, conv2d(tape, x, p.c4w, p.c4b, 1, 1));
  x = max_pool2d(tape, x, 2, 2);
  return x;
}

Tensor roi_pool(Tape& tape, const Tensor& fm, const Box& box, int out_h,
                int out_w, int stride) {
  if (fm.ndim() != 4 || fm.dim(0) != 1) {
    throw std::invalid_argument("roi_pool expects a [1,C,H,W] feature map");
  }
  if (out_h < 1 || out_w < 1 || stride < 1) {
    throw std::invalid_argument("roi_pool output dims and stride must be >= 1");
  }
  if (!box.valid() || box.area() <= 0.0f) {
    throw std::invalid_argument("roi_pool on a degenerate box");
  }
  const int c = fm.dim(1), h = fm.dim(2), w = fm.dim(3);
  const float inv = 1.0f / static_cast<float>(stride);
  int fx1 = static_cast<int>(std::lround(box.x1 * inv));
  int fy1 = static_cast<int>(std::lround(box.y1 * inv));
  int fx2 = static_cast<int>(std::lround(box.x2 * inv));
  int fy2 = static_cast<int>(std::lround(box.y2 * inv));
  int bw = std::max(1, fx2 - fx1);
  int bh = std::max(1, fy2 - fy1);

  const std::size_t out_n = static_cast<std::size_t>(c) * out_h * out_w;
  std::vector<float> vals(out_n, 0.0f);
  std::vector<int> argmax(out_n, -1);
  const float* src = fm.data();
  for (int by = 0; by < out_h; ++by) {
    int gy0 = std::max(0, fy1 + (by * bh) / out_h);
    int gy1 = std::min(h, fy1 + (((by + 1) * bh + out_h - 1) / out_h));
    for (int bx = 0; bx < out_w; ++bx) {
      int gx0 = std::max(0, fx1 + (bx * bw) / out_w);
      int gx1 = std::min(w, fx1 + (((bx + 1) * bw + out_w - 1) / out_w));
      if (gy0 >= gy1 || gx0 >= gx1) continue;  // bin off the map: stays 0
      for (int ci = 0; ci < c; ++ci) {
        const float* plane = src + static_cast<std::size_t>(ci) * h * w;
        float best = plane[gy0 * w + gx0];
        int best_idx = ci * h * w + gy0 * w + gx0;
        for (int y = gy0; y < gy1; ++y) {
          for (int x = gx0; x < gx1; ++x) {
            float v = plane[y * w + x];
            if (v > best) {
              best = v;
              best_idx = ci * h * w + y * w + x;
            }
          }
        }
        vals[static_cast<std::size_t>((ci * out_h + by) * out_w + bx)] = best;
        argmax[static_cast<std::size_t>((ci * out_h + by) * out_w + bx)] = best_idx;
      }
    }
  }

  bool rg = tape.enabled() && fm.requires_grad();
  Tensor out({c, out_h, out_w}, std::move(vals), rg);
  if (rg) {
    Tensor fmi = fm, outo = out;
    auto idx = std::make_shared<std::vector<int>>(std::move(argmax));
    tape.record([fmi, outo, idx]() mutable {
      const float* g = outo.grad();
      float* gf = fmi.grad();
      for (std::size_t i = 0; i < outo.numel(); ++i) {
        if ((*idx)[i] >= 0) gf[(*idx)[i]] += g[i];
      }
    });
  }
  return out;
}

std::vector<Proposal> select_proposals(const std::vector<Box>& anchors,
                                       const Tensor& rpn_obj,
                                       const Tensor& rpn_deltas,
                                       const DetectorConfig& cfg, int image_w,
                                       int image_h,
                                       const std::vector<Box>* gt_boxes) {
  const int n = static_cast<int>(anchors.size());
  if (rpn_obj.ndim() != 1 || static_cast<int>(rpn_obj.numel()) != n ||
      rpn_deltas.ndim() != 2 || rpn_deltas.dim(0) != n || rpn_deltas.dim(1) != 4) {
    throw std::invalid_argument("rpn output shapes do not match the anchor count");
  }

  struct Cand {
    Box box;
    float score;
    int index;
  };
  std::vector<Cand> cands;
  cands.reserve(static_cast<std::size_t>(n));
  const float* obj = rpn_obj.data();
  const float* del = rpn_deltas.data();
  for (int i = 0; i < n; ++i) {
    std::array<float, 4> d = {del[i * 4 + 0], del[i * 4 + 1], del[i * 4 + 2],
                              del[i * 4 + 3]};
    Box b = clip_box(decode_deltas(anchors[static_cast<std::size_t>(i)], d),
                     static_cast<float>(image_w), static_cast<float>(image_h));
    if (b.width() < 1.0f || b.height() < 1.0f) continue;
    cands.push_back({b, stable_sigmoid_value(obj[i]), i});
  }
  std::stable_sort(cands.begin(), cands.end(), [](const Cand& a, const Cand& b) {
    return a.score > b.score;
  });
  if (static_cast<int>(cands.size()) > cfg.pre_nms_top_n) {
    cands.resize(static_cast<std::size_t>(cfg.pre_nms_top_n));
  }

  std::vector<ScoredBox> scored(cands.size());
  for (std::size_t i = 0; i < cands.size(); ++i) scored[i] = {cands[i].box, cands[i].score};
  std::vector<int> kept = nms(scored, cfg.rpn_nms_iou);
  if (static_cast<int>(kept.size()) > cfg.post_nms_top_n) {
    kept.resize(static_cast<std::size_t>(cfg.post_nms_top_n));
  }

  std::vector<Proposal> out;
  out.reserve(kept.size() + (gt_boxes ? gt_boxes->size() : 0));
  for (int k : kept) {
    out.push_back({cands[static_cast<std::size_t>(k)].box,
                   cands[static_cast<std::size_t>(k)].score, 0});
  }
  if (gt_boxes) {
    // Appended as-is: rendered annotations already sit inside the frame, and
    // exact gt proposals give the ROI head clean positives from step one.
    for (const Box& g : *gt_boxes) {
      if (g.width() < 1.0f || g.height() < 1.0f) continue;
      out.push_back({g, 1.0f, 0});
    }
  }
  return out;
}

DetectionForward forward_detection(Tape& tape, const DetectorParams& p,
                                   const DetectorConfig& cfg,
                                   const Tensor& image,
                                   const std::vector<Box>* gt_boxes) {
  cfg.validate();
  DetectionForward fwd;
  fwd.image_h = image.dim(1);
  fwd.image_w = image.dim(2);
  fwd.features = backbone_features(tape, p, image);
  const int hf = fwd.features.dim(2);
  const int wf = fwd.features.dim(3);

  Tensor hidden = relu(tape, conv2d(tape, fwd.features, p.rpn_w, p.rpn_b, 1, 1));
  Tensor obj_map = conv2d(tape, hidden, p.obj_w, p.obj_b, 1, 0);    // [1,A,hf,wf]
  Tensor del_map = conv2d(tape, hidden, p.del_w, p.del_b, 1, 0);    // [1,4A,hf,wf]

  fwd.anchors = generate_anchors(cfg.anchors, hf, wf);
  const int a = cfg.anchors.anchors_per_location();
  const int n = static_cast<int>(fwd.anchors.size());
  const int plane = hf * wf;

  // Conv layout is channel-major; anchors are location-major. Gather into
  // anchor order so losses can index anchors directly.
  std::vector<int> obj_idx(static_cast<std::size_t>(n));
  std::vector<int> del_idx(static_cast<std::size_t>(n) * 4);
  int i = 0;
  for (int v = 0; v < hf; ++v) {
    for (int u = 0; u < wf; ++u) {
      for (int ai = 0; ai < a; ++ai, ++i) {
        obj_idx[static_cast<std::size_t>(i)] = ai * plane + v * wf + u;
        for (int k = 0; k < 4; ++k) {
          del_idx[static_cast<std::size_t>(i) * 4 + k] =
              ((ai * 4 + k) * hf + v) * wf + u;
        }
      }
    }
  }
  fwd.rpn_obj = gather(tape, obj_map, obj_idx, {n});
  fwd.rpn_deltas = gather(tape, del_map, del_idx, {n, 4});

  fwd.proposals = select_proposals(fwd.anchors, fwd.rpn_obj, fwd.rpn_deltas,
                                   cfg, fwd.image_w, fwd.image_h, gt_boxes);
  fwd.num_gt_proposals = 0;
  if (gt_boxes) {
    for (const Box& g : *gt_boxes) {
      if (g.width() >= 1.0f && g.height() >= 1.0f) ++fwd.num_gt_proposals;
    }
  }

  if (!fwd.proposals.empty()) {
    std::vector<Tensor> pooled;
    pooled.reserve(fwd.proposals.size());
    for (const Proposal& pr : fwd.proposals) {
      Tensor roi = roi_pool(tape, fwd.features, pr.box, cfg.roi_size,
                            cfg.roi_size, cfg.anchors.feature_stride);
      pooled.push_back(flatten(tape, roi));
    }
    Tensor roi_flat = stack_rows(tape, pooled);  // [R, roi_feature_dim]
    Tensor fc1 = relu(tape, linear(tape, roi_flat, p.fc1_w, p.fc1_b));
    fwd.roi_fc2 = relu(tape, linear(tape, fc1, p.fc2_w, p.fc2_b));
    fwd.cls_logits = linear(tape, fwd.roi_fc2, p.cls_w, p.cls_b);
    fwd.box_deltas = linear(tape, fwd.roi_fc2, p.box_w, p.box_b);
  }
  return fwd;
}

std::vector<Detection> detect(const Tensor& image, const DetectorParams& p,
                              const DetectorConfig& cfg) {
  Tape tape(false);
  DetectionForward fwd = forward_detection(tape, p, cfg, image, nullptr);
  std::vector<Detection> dets;
  if (fwd.proposals.empty()) return dets;

  const int r = static_cast<int>(fwd.proposals.size());
  const int k1 = cfg.num_classes + 1;
  const float* logits = fwd.cls_logits.data();
  const float* deltas = fwd.box_deltas.data();

  std::vector<float> probs(static_cast<std::size_t>(r) * k1);
  for (int i = 0; i < r; ++i) {
    const float* row = logits + i * k1;
    float mx = row[0];
    for (int c = 1; c < k1; ++c) mx = std::max(mx, row[c]);
    double denom = 0.0;
    for (int c = 0; c < k1; ++c) denom += std::exp(static_cast<double>(row[c] - mx));
    for (int c = 0; c < k1; ++c) {
      probs[static_cast<std::size_t>(i) * k1 + c] =
          static_cast<float>(std::exp(static_cast<double>(row[c] - mx)) / denom);
    }
  }

  for (int c = 1; c < k1; ++c) {
    std::vector<ScoredBox> cand;
    cand.reserve(static_cast<std::size_t>(r));
    for (int i = 0; i < r; ++i) {
      float score = probs[static_cast<std::size_t>(i) * k1 + c];
      if (score < cfg.score_floor) continue;
      std::array<float, 4> d = {
          deltas[i * 4 * k1 + 4 * c + 0], deltas[i * 4 * k1 + 4 * c + 1],
          deltas[i * 4 * k1 + 4 * c + 2], deltas[i * 4 * k1 + 4 * c + 3]};
      Box b = clip_box(decode_deltas(fwd.proposals[static_cast<std::size_t>(i)].box, d),
                       static_cast<float>(fwd.image_w), static_cast<float>(fwd.image_h));
      if (b.width() < 1.0f || b.height() < 1.0f) continue;
      cand.push_back({b, score});
    }
    std::vector<int> kept = nms(cand, cfg.cls_nms_iou);
    for (int k : kept) {
      dets.push_back({cand[static_cast<std::size_t>(k)].box, c,
                      cand[static_cast<std::size_t>(k)].score});
    }
  }
  std::stable_sort(dets.begin(), dets.end(), [](const Detection& a, const Detection& b) {
    return a.score > b.score;
  });
  return dets;
}

std::pair<Tensor, Tensor> compute_detection_loss(Tape& tape,
                                                 const DetectorConfig& cfg,
                                                 const DetectionForward& fwd,
                                                 const Sample& sample,
                                                 SplitMix64& rng) {
  if (sample.domain != 0) {
    throw std::invalid_argument(
        "detection loss requires a source-domain sample; target labels are "
        "off limits");
  }
  const std::vector<Box>& gt = sample.boxes();
  const std::vector<int>& gt_labels = sample.labels();

  // --- RPN term -------------------------------------------------------
  AnchorAssignment assign =
      assign_anchor_targets(fwd.anchors, gt, cfg.pos_iou, cfg.neg_iou);
  std::vector<int> pos, neg;
  for (int i = 0; i < static_cast<int>(assign.labels.size()); ++i) {
    if (assign.labels[static_cast<std::size_t>(i)] == AnchorLabel::kPositive) {
      pos.push_back(i);
    } else if (assign.labels[static_cast<std::size_t>(i)] == AnchorLabel::kNegative) {
      neg.push_back(i);
    }
  }
  shuffle(pos, rng);
  shuffle(neg, rng);
  int max_pos = static_cast<int>(static_cast<float>(cfg.rpn_batch) * cfg.rpn_fg_fraction);
  if (static_cast<int>(pos.size()) > max_pos) pos.resize(static_cast<std::size_t>(max_pos));
  int want_neg = cfg.rpn_batch - static_cast<int>(pos.size());
  if (static_cast<int>(neg.size()) > want_neg) neg.resize(static_cast<std::size_t>(want_neg));

  std::vector<int> sampled = pos;
  sampled.insert(sampled.end(), neg.begin(), neg.end());
  if (sampled.empty()) throw std::logic_error("rpn sampling produced no anchors");
  std::vector<float> rpn_labels(sampled.size(), 0.0f);
  for (std::size_t i = 0; i < pos.size(); ++i) rpn_labels[i] = 1.0f;

  Tensor rpn_logits = gather(tape, fwd.rpn_obj, sampled,
                             {static_cast<int>(sampled.size())});
  Tensor l_rpn = sigmoid_cross_entropy(tape, rpn_logits, rpn_labels, Reduction::kMean);

  if (!pos.empty()) {
    Tensor pred = take_rows(tape, fwd.rpn_deltas, pos);  // [P,4]
    Tensor target = Tensor::zeros({static_cast<int>(pos.size()), 4});
    for (std::size_t i = 0; i < pos.size(); ++i) {
      int gi = assign.matched_gt[static_cast<std::size_t>(pos[i])];
      std::array<float, 4> d =
          encode_deltas(fwd.anchors[static_cast<std::size_t>(pos[i])],
                        gt[static_cast<std::size_t>(gi)]);
      for (int k = 0; k < 4; ++k) target.data()[i * 4 + static_cast<std::size_t>(k)] = d[k];
    }
    Tensor reg = mul_scalar(tape, smooth_l1(tape, pred, target),
                            1.0f / static_cast<float>(pos.size()));
    l_rpn = add(tape, l_rpn, reg);
  }

  // --- ROI term -------------------------------------------------------
  const int r = static_cast<int>(fwd.proposals.size());
  Tensor l_roi = Tensor::scalar(0.0f);
  if (r > 0) {
    std::vector<int> roi_label(static_cast<std::size_t>(r), 0);
    std::vector<int> roi_match(static_cast<std::size_t>(r), -1);
    std::vector<int> fg, bg;
    for (int i = 0; i < r; ++i) {
      float best = 0.0f;
      int best_gt = -1;
      for (int g = 0; g < static_cast<int>(gt.size()); ++g) {
        float v = iou(fwd.proposals[static_cast<std::size_t>(i)].box,
                      gt[static_cast<std::size_t>(g)]);
        if (v > best) {
          best = v;
          best_gt = g;
        }
      }
      if (best_gt >= 0 && best >= cfg.roi_fg_iou) {
        roi_label[static_cast<std::size_t>(i)] =
            gt_labels[static_cast<std::size_t>(best_gt)];
        roi_match[static_cast<std::size_t>(i)] = best_gt;
        fg.push_back(i);
      } else {
        bg.push_back(i);
      }
    }
    shuffle(fg, rng);
    shuffle(bg, rng);
    int max_fg = static_cast<int>(static_cast<float>(cfg.roi_batch) * cfg.roi_fg_fraction);
    if (static_cast<int>(fg.size()) > max_fg) fg.resize(static_cast<std::size_t>(max_fg));
    int want_bg = cfg.roi_batch - static_cast<int>(fg.size());
    if (static_cast<int>(bg.size()) > want_bg) bg.resize(static_cast<std::size_t>(want_bg));

    std::vector<int> chosen = fg;
    chosen.insert(chosen.end(), bg.begin(), bg.end());
    std::vector<int> chosen_labels(chosen.size());
    for (std::size_t i = 0; i < chosen.size(); ++i) {
      chosen_labels[i] = roi_label[static_cast<std::size_t>(chosen[i])];
    }
    Tensor roi_logits = take_rows(tape, fwd.cls_logits, chosen);
    l_roi = softmax_cross_entropy(tape, roi_logits, chosen_labels, Reduction::kMean);

    if (!fg.empty()) {
      const int k1 = cfg.num_classes + 1;
      std::vector<int> delta_idx;
      delta_idx.reserve(fg.size() * 4);
      Tensor target = Tensor::zeros({static_cast<int>(fg.size()), 4});
      for (std::size_t i = 0; i < fg.size(); ++i) {
        int pi = fg[i];
        int cls = roi_label[static_cast<std::size_t>(pi)];
        for (int k = 0; k < 4; ++k) delta_idx.push_back(pi * 4 * k1 + 4 * cls + k);
        std::array<float, 4> d = encode_deltas(
            fwd.proposals[static_cast<std::size_t>(pi)].box,
            gt[static_cast<std::size_t>(roi_match[static_cast<std::size_t>(pi)])]);
        for (int k = 0; k < 4; ++k) target.data()[i * 4 + static_cast<std::size_t>(k)] = d[k];
      }
      Tensor pred = gather(tape, fwd.box_deltas, delta_idx,
                           {static_cast<int>(fg.size()), 4});
      Tensor reg = mul_scalar(tape, smooth_l1(tape, pred, target),
                              1.0f / static_cast<float>(fg.size()));
      l_roi = add(tape, l_roi, reg);
    }
  }
  return {l_rpn, l_roi};
}

}  // namespace dadet
