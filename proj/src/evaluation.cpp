#include "dadet/evaluation.hpp"

#include <algorithm>
#include <cstdio>
#include <set>
#include <stdexcept>

#include "dadet/tensor.hpp"

namespace dadet {

namespace {

// Greedy matching over score-sorted detections. tp[k] is 1 when detection k
// matched a previously unmatched ground truth at IoU >= thresh.
std::vector<int> match_detections(const std::vector<ClassDetection>& dets,
                                  const std::vector<std::vector<Box>>& gt,
                                  float thresh) {
  std::vector<std::vector<char>> used(gt.size());
  for (std::size_t i = 0; i < gt.size(); ++i) used[i].assign(gt[i].size(), 0);
  std::vector<int> tp(dets.size(), 0);
  for (std::size_t k = 0; k < dets.size(); ++k) {
    const ClassDetection& d = dets[k];
    if (d.image < 0 || static_cast<std::size_t>(d.image) >= gt.size()) {
      throw std::invalid_argument("detection image index out of range");
    }
    const std::vector<Box>& cand = gt[static_cast<std::size_t>(d.image)];
    float best = 0.0f;
    int best_j = -1;
    for (std::size_t j = 0; j < cand.size(); ++j) {
      float v = iou(d.box, cand[j]);
      if (v > best) {
        best = v;
        best_j = static_cast<int>(j);
      }
    }
    if (best_j >= 0 && best >= thresh &&
        !used[static_cast<std::size_t>(d.image)][static_cast<std::size_t>(best_j)]) {
      used[static_cast<std::size_t>(d.image)][static_cast<std::size_t>(best_j)] = 1;
      tp[k] = 1;
    }
  }
  return tp;
}

void sort_by_score(std::vector<ClassDetection>& dets) {
  std::stable_sort(dets.begin(), dets.end(),
                   [](const ClassDetection& a, const ClassDetection& b) {
                     return a.score > b.score;
                   });
}

std::string format_float(float v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.4f", static_cast<double>(v));
  return buf;
}

std::vector<int> row_classes(const std::vector<AblationRow>& rows) {
  std::set<int> cls;
  for (const AblationRow& r : rows) {
    for (const auto& [c, ap] : r.report.per_class_ap) {
      (void)ap;
      cls.insert(c);
    }
  }
  return {cls.begin(), cls.end()};
}

}  // namespace

double average_precision(std::vector<ClassDetection> detections,
                         const std::vector<std::vector<Box>>& gt_per_image,
                         float iou_thresh) {
  std::size_t n_gt = 0;
  for (const auto& g : gt_per_image) n_gt += g.size();
  if (n_gt == 0) return -1.0;
  if (detections.empty()) return 0.0;

  sort_by_score(detections);
  std::vector<int> tp = match_detections(detections, gt_per_image, iou_thresh);

  const std::size_t n = detections.size();
  std::vector<double> prec(n), rec(n);
  int hits = 0;
  for (std::size_t k = 0; k < n; ++k) {
    hits += tp[k];
    prec[k] = static_cast<double>(hits) / static_cast<double>(k + 1);
    rec[k] = static_cast<double>(hits) / static_cast<double>(n_gt);
  }
  std::vector<double> env(n);
  env[n - 1] = prec[n - 1];
  for (std::size_t k = n - 1; k-- > 0;) env[k] = std::max(prec[k], env[k + 1]);

  double ap = 0.0, prev = 0.0;
  for (std::size_t k = 0; k < n; ++k) {
    if (rec[k] > prev) {
      ap += (rec[k] - prev) * env[k];
      prev = rec[k];
    }
  }
  return ap;
}

double average_precision(const std::vector<ScoredBox>& detections,
                         const std::vector<Box>& gt_boxes, float iou_thresh) {
  std::vector<ClassDetection> flat;
  flat.reserve(detections.size());
  for (const ScoredBox& d : detections) flat.push_back({0, d.score, d.box});
  return average_precision(std::move(flat), {gt_boxes}, iou_thresh);
}

EvalReport evaluate_detections(
    const std::vector<std::vector<Detection>>& dets_per_image,
    const Dataset& ds, float iou_thresh) {
  if (dets_per_image.size() != ds.samples.size()) {
    throw std::invalid_argument("one detection list per sample required");
  }
  EvalReport rep;
  rep.dataset_digest = hex64(ds.digest);
  for (const auto& dets : dets_per_image) {
    rep.detection_count += static_cast<int>(dets.size());
  }

  double sum = 0.0;
  int counted = 0;
  for (int c = 1; c <= ds.spec.num_classes; ++c) {
    std::vector<ClassDetection> dets;
    std::vector<std::vector<Box>> gt(ds.samples.size());
    std::size_t n_gt = 0;
    for (std::size_t i = 0; i < ds.samples.size(); ++i) {
      const Sample& s = ds.samples[i];
      for (std::size_t j = 0; j < s.boxes().size(); ++j) {
        if (s.labels()[j] == c) {
          gt[i].push_back(s.boxes()[j]);
          ++n_gt;
        }
      }
      for (const Detection& d : dets_per_image[i]) {
        if (d.category == c) {
          dets.push_back({static_cast<int>(i), d.score, d.box});
        }
      }
    }
    if (n_gt == 0) continue;
    double ap = average_precision(std::move(dets), gt, iou_thresh);
    rep.per_class_ap[c] = static_cast<float>(ap);
    sum += ap;
    ++counted;
  }
  rep.mean_ap = counted > 0 ? static_cast<float>(sum / counted) : 0.0f;
  return rep;
}

EvalReport evaluate_model(const DetectorParams& params,
                          const DetectorConfig& cfg, const Dataset& ds,
                          float iou_thresh) {
  std::vector<std::vector<Detection>> dets;
  dets.reserve(ds.samples.size());
  for (const Sample& s : ds.samples) {
    dets.push_back(detect(s.image, params, cfg));
  }
  return evaluate_detections(dets, ds, iou_thresh);
}

double mean_best_overlap(
    const std::vector<std::vector<Box>>& proposals_per_image,
    const std::vector<std::vector<Box>>& gt_per_image, int top_p) {
  if (proposals_per_image.size() != gt_per_image.size()) {
    throw std::invalid_argument("proposal/gt image counts differ");
  }
  if (top_p <= 0) throw std::invalid_argument("top_p must be positive");
  double sum = 0.0;
  std::size_t count = 0;
  for (std::size_t i = 0; i < gt_per_image.size(); ++i) {
    const auto& props = proposals_per_image[i];
    const std::size_t limit =
        std::min(props.size(), static_cast<std::size_t>(top_p));
    for (const Box& g : gt_per_image[i]) {
      float best = 0.0f;
      for (std::size_t p = 0; p < limit; ++p) {
        best = std::max(best, iou(props[p], g));
      }
      sum += static_cast<double>(best);
      ++count;
    }
  }
  return count > 0 ? sum / static_cast<double>(count) : 0.0;
}

std::vector<Box> collect_proposals(const DetectorParams& params,
                                   const DetectorConfig& cfg,
                                   const Tensor& image) {
  Tape tape(false);
  DetectionForward fwd = forward_detection(tape, params, cfg, image, nullptr);
  std::vector<Box> out;
  out.reserve(fwd.proposals.size());
  for (const Proposal& p : fwd.proposals) out.push_back(p.box);
  return out;
}

double model_mean_best_overlap(const DetectorParams& params,
                               const DetectorConfig& cfg, const Dataset& ds,
                               int top_p) {
  std::vector<std::vector<Box>> props, gt;
  props.reserve(ds.samples.size());
  gt.reserve(ds.samples.size());
  for (const Sample& s : ds.samples) {
    props.push_back(collect_proposals(params, cfg, s.image));
    gt.push_back(s.boxes());
  }
  return mean_best_overlap(props, gt, top_p);
}

ErrorTaxonomy categorize_detections(
    const std::vector<std::vector<Detection>>& dets_per_image,
    const Dataset& ds, int top_r) {
  if (dets_per_image.size() != ds.samples.size()) {
    throw std::invalid_argument("one detection list per sample required");
  }
  if (top_r <= 0) throw std::invalid_argument("top_r must be positive");

  struct Ranked {
    int image;
    Detection det;
  };
  std::vector<Ranked> ranked;
  for (std::size_t i = 0; i < dets_per_image.size(); ++i) {
    for (const Detection& d : dets_per_image[i]) {
      ranked.push_back({static_cast<int>(i), d});
    }
  }
  std::stable_sort(ranked.begin(), ranked.end(),
                   [](const Ranked& a, const Ranked& b) {
                     return a.det.score > b.det.score;
                   });
  if (ranked.size() > static_cast<std::size_t>(top_r)) {
    ranked.resize(static_cast<std::size_t>(top_r));
  }

  ErrorTaxonomy tx;
  for (const Ranked& r : ranked) {
    const Sample& s = ds.samples[static_cast<std::size_t>(r.image)];
    float best = 0.0f;
    for (std::size_t j = 0; j < s.boxes().size(); ++j) {
      if (s.labels()[j] != r.det.category) continue;
      best = std::max(best, iou(r.det.box, s.boxes()[j]));
    }
    if (best > 0.5f) {
      ++tx.correct;
    } else if (best >= 0.3f) {
      ++tx.mislocalized;
    } else {
      ++tx.background;
    }
  }
  return tx;
}

std::string ablation_table_csv(const std::vector<AblationRow>& rows) {
  std::vector<int> classes = row_classes(rows);
  std::string out = "config,img,ins,cst";
  for (int c : classes) out += ",class" + std::to_string(c) + "_ap";
  out += ",map\n";
  for (const AblationRow& r : rows) {
    out += r.name;
    out += r.adapted && r.mask.img ? ",x" : ",";
    out += r.adapted && r.mask.ins ? ",x" : ",";
    out += r.adapted && r.mask.cst ? ",x" : ",";
    for (int c : classes) {
      auto it = r.report.per_class_ap.find(c);
      out += ",";
      if (it != r.report.per_class_ap.end()) out += format_float(it->second);
    }
    out += "," + format_float(r.report.mean_ap) + "\n";
  }
  return out;
}

std::string ablation_table_text(const std::vector<AblationRow>& rows) {
  std::vector<int> classes = row_classes(rows);
  std::vector<std::string> headers = {"config", "img", "ins", "cst"};
  for (int c : classes) headers.push_back("class" + std::to_string(c));
  headers.push_back("mAP");

  std::vector<std::vector<std::string>> cells;
  for (const AblationRow& r : rows) {
    std::vector<std::string> row = {r.name,
                                    r.adapted && r.mask.img ? "x" : "",
                                    r.adapted && r.mask.ins ? "x" : "",
                                    r.adapted && r.mask.cst ? "x" : ""};
    for (int c : classes) {
      auto it = r.report.per_class_ap.find(c);
      row.push_back(it != r.report.per_class_ap.end() ? format_float(it->second)
                                                      : "-");
    }
    row.push_back(format_float(r.report.mean_ap));
    cells.push_back(std::move(row));
  }

  std::vector<std::size_t> widths(headers.size());
  for (std::size_t c = 0; c < headers.size(); ++c) {
    widths[c] = headers[c].size();
    for (const auto& row : cells) widths[c] = std::max(widths[c], row[c].size());
  }
  auto emit_row = [&](const std::vector<std::string>& row) {
    std::string line;
    for (std::size_t c = 0; c < row.size(); ++c) {
      if (c) line += "  ";
      line += row[c];
      line.append(widths[c] - row[c].size(), ' ');
    }
    while (!line.empty() && line.back() == ' ') line.pop_back();
    return line + "\n";
  };
  std::string out = emit_row(headers);
  out.append(out.size() - 1, '-');
  out += "\n";
  for (const auto& row : cells) out += emit_row(row);
  return out;
}

std::string scale_sweep_csv(const std::vector<SweepPoint>& points) {
  std::string out = "model,scale,map\n";
  for (const SweepPoint& p : points) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.3g", static_cast<double>(p.scale));
    out += p.model;
    out += ",";
    out += buf;
    out += "," + format_float(p.mean_ap) + "\n";
  }
  return out;
}

}  // namespace dadet
