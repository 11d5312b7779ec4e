#include "dadet/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <numeric>
#include <stdexcept>

#include "dadet/evaluation.hpp"
#include "json.hpp"

namespace dadet {

using nlohmann::json;

namespace {

constexpr char kMagic[4] = {'D', 'A', 'F', 'R'};
constexpr std::uint16_t kCheckpointVersion = 1;
// Init draws from a far-off stream index so iteration streams never collide.
constexpr std::uint64_t kInitStream = 1ull << 40;

json detector_config_json(const DetectorConfig& cfg) {
  json j;
  j["num_classes"] = cfg.num_classes;
  j["anchor_base_size"] = cfg.anchors.base_size;
  j["anchor_scales"] = cfg.anchors.scales;
  j["anchor_aspect_ratios"] = cfg.anchors.aspect_ratios;
  j["feature_stride"] = cfg.anchors.feature_stride;
  j["pos_iou"] = cfg.pos_iou;
  j["neg_iou"] = cfg.neg_iou;
  j["rpn_batch"] = cfg.rpn_batch;
  j["rpn_fg_fraction"] = cfg.rpn_fg_fraction;
  j["roi_batch"] = cfg.roi_batch;
  j["roi_fg_fraction"] = cfg.roi_fg_fraction;
  j["roi_fg_iou"] = cfg.roi_fg_iou;
  j["pre_nms_top_n"] = cfg.pre_nms_top_n;
  j["rpn_nms_iou"] = cfg.rpn_nms_iou;
  j["post_nms_top_n"] = cfg.post_nms_top_n;
  j["roi_size"] = cfg.roi_size;
  j["cls_nms_iou"] = cfg.cls_nms_iou;
  j["score_floor"] = cfg.score_floor;
  return j;
}

DetectorConfig detector_config_from_json(const json& j) {
  DetectorConfig cfg;
  cfg.num_classes = j.at("num_classes").get<int>();
  cfg.anchors.base_size = j.at("anchor_base_size").get<float>();
  cfg.anchors.scales = j.at("anchor_scales").get<std::vector<float>>();
  cfg.anchors.aspect_ratios =
      j.at("anchor_aspect_ratios").get<std::vector<float>>();
  cfg.anchors.feature_stride = j.at("feature_stride").get<int>();
  cfg.pos_iou = j.at("pos_iou").get<float>();
  cfg.neg_iou = j.at("neg_iou").get<float>();
  cfg.rpn_batch = j.at("rpn_batch").get<int>();
  cfg.rpn_fg_fraction = j.at("rpn_fg_fraction").get<float>();
  cfg.roi_batch = j.at("roi_batch").get<int>();
  cfg.roi_fg_fraction = j.at("roi_fg_fraction").get<float>();
  cfg.roi_fg_iou = j.at("roi_fg_iou").get<float>();
  cfg.pre_nms_top_n = j.at("pre_nms_top_n").get<int>();
  cfg.rpn_nms_iou = j.at("rpn_nms_iou").get<float>();
  cfg.post_nms_top_n = j.at("post_nms_top_n").get<int>();
  cfg.roi_size = j.at("roi_size").get<int>();
  cfg.cls_nms_iou = j.at("cls_nms_iou").get<float>();
  cfg.score_floor = j.at("score_floor").get<float>();
  return cfg;
}

FullModel clone_model(const FullModel& src, const DetectorConfig& dcfg) {
  SplitMix64 scratch(0);
  FullModel dst = FullModel::init(dcfg, scratch);
  auto s = src.named();
  auto d = dst.named();
  if (s.size() != d.size()) throw std::logic_error("model layout mismatch");
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (s[i].second.shape() != d[i].second.shape()) {
      throw std::invalid_argument("checkpoint tensor shape mismatch: " +
                                  s[i].first);
    }
    std::memcpy(d[i].second.data(), s[i].second.data(),
                s[i].second.numel() * sizeof(float));
  }
  return dst;
}

// Top-scored proposal rows fed to the instance-level domain path. Undefined
// when the image produced no proposals.
Tensor instance_rows(Tape& tape, const InstanceHeadParams& head,
                     const Tensor& roi_fc2, int cap) {
  if (!roi_fc2.defined() || roi_fc2.dim(0) == 0) return Tensor();
  int n = std::min(roi_fc2.dim(0), cap);
  std::vector<int> idx(static_cast<std::size_t>(n));
  std::iota(idx.begin(), idx.end(), 0);
  Tensor rows = take_rows(tape, roi_fc2, idx);
  return instance_domain_probs(tape, head, rows);
}

std::string format_g(float v) {
  char buf[48];
  std::snprintf(buf, sizeof(buf), "%.9g", static_cast<double>(v));
  return buf;
}

}  // namespace

void TrainConfig::validate() const {
  if (!(lambda >= 0.0f)) throw std::invalid_argument("lambda must be >= 0");
  if (!(lr_initial > 0.0f) || !(lr_reduced > 0.0f)) {
    throw std::invalid_argument("learning rates must be positive");
  }
  if (total_iters < 1) throw std::invalid_argument("total_iters must be >= 1");
  if (lr_drop_iter < 0 || lr_drop_iter > total_iters) {
    throw std::invalid_argument("lr_drop_iter must lie in [0, total_iters]");
  }
  if (!(momentum >= 0.0f) || momentum >= 1.0f) {
    throw std::invalid_argument("momentum must lie in [0, 1)");
  }
  if (!(weight_decay >= 0.0f)) {
    throw std::invalid_argument("weight_decay must be >= 0");
  }
  if (!(grad_clip >= 0.0f)) throw std::invalid_argument("grad_clip must be >= 0");
  if (eval_every < 0) throw std::invalid_argument("eval_every must be >= 0");
  if (adapt_rois < 1) throw std::invalid_argument("adapt_rois must be >= 1");
  if (ablation.cst && !(ablation.img && ablation.ins)) {
    throw std::invalid_argument(
        "the consistency term needs both domain heads enabled");
  }
}

std::string TrainConfig::to_json() const {
  json j;
  j["lambda"] = lambda;
  j["lr_initial"] = lr_initial;
  j["lr_reduced"] = lr_reduced;
  j["lr_drop_iter"] = lr_drop_iter;
  j["total_iters"] = total_iters;
  j["momentum"] = momentum;
  j["weight_decay"] = weight_decay;
  j["grad_clip"] = grad_clip;
  j["use_img"] = ablation.img;
  j["use_ins"] = ablation.ins;
  j["use_cst"] = ablation.cst;
  j["seed"] = seed;
  j["eval_every"] = eval_every;
  j["adapt_rois"] = adapt_rois;
  return j.dump();
}

TrainConfig TrainConfig::from_json(const std::string& text) {
  json j = json::parse(text);
  TrainConfig cfg;
  cfg.lambda = j.at("lambda").get<float>();
  cfg.lr_initial = j.at("lr_initial").get<float>();
  cfg.lr_reduced = j.at("lr_reduced").get<float>();
  cfg.lr_drop_iter = j.at("lr_drop_iter").get<int>();
  cfg.total_iters = j.at("total_iters").get<int>();
  cfg.momentum = j.at("momentum").get<float>();
  cfg.weight_decay = j.at("weight_decay").get<float>();
  cfg.grad_clip = j.at("grad_clip").get<float>();
  cfg.ablation.img = j.at("use_img").get<bool>();
  cfg.ablation.ins = j.at("use_ins").get<bool>();
  cfg.ablation.cst = j.at("use_cst").get<bool>();
  cfg.seed = j.at("seed").get<std::uint64_t>();
  cfg.eval_every = j.at("eval_every").get<int>();
  cfg.adapt_rois = j.at("adapt_rois").get<int>();
  cfg.validate();
  return cfg;
}

std::vector<std::pair<std::string, Tensor>> FullModel::named() const {
  auto out = det.named();
  for (auto& p : img.named()) out.push_back(std::move(p));
  for (auto& p : ins.named()) out.push_back(std::move(p));
  return out;
}

void FullModel::set_requires_grad(bool value) {
  det.set_requires_grad(value);
  img.set_requires_grad(value);
  ins.set_requires_grad(value);
}

void FullModel::zero_grad() {
  for (auto& [name, t] : named()) {
    (void)name;
    if (t.requires_grad()) t.zero_grad();
  }
}

FullModel FullModel::init(const DetectorConfig& cfg, SplitMix64& rng) {
  FullModel m;
  m.det = DetectorParams::init(cfg, rng);
  m.img = ImageHeadParams::init(rng);
  m.ins = InstanceHeadParams::init(rng);
  return m;
}

FullModel initial_model(const TrainConfig& cfg, const DetectorConfig& dcfg) {
  SplitMix64 rng(mix_seed(cfg.seed, kInitStream));
  return FullModel::init(dcfg, rng);
}

float lr_at(int iter, const TrainConfig& cfg) {
  if (iter < 0 || iter >= cfg.total_iters) {
    throw std::out_of_range("iteration outside the schedule");
  }
  return iter < cfg.lr_drop_iter ? cfg.lr_initial : cfg.lr_reduced;
}

void sgd_step(const std::vector<std::pair<std::string, Tensor>>& params,
              std::vector<std::vector<float>>& velocity, float lr,
              float momentum, float weight_decay) {
  if (velocity.size() != params.size()) {
    throw std::invalid_argument("one velocity buffer per parameter required");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor t = params[i].second;
    if (velocity[i].size() != t.numel()) {
      throw std::invalid_argument("velocity shape mismatch: " + params[i].first);
    }
    float* w = t.data();
    const float* g = t.grad();
    float* v = velocity[i].data();
    for (std::size_t j = 0; j < t.numel(); ++j) {
      float adjusted = g[j] + weight_decay * w[j];
      v[j] = momentum * v[j] + adjusted;
      w[j] -= lr * v[j];
    }
  }
}

double global_grad_norm(
    const std::vector<std::pair<std::string, Tensor>>& params) {
  double sq = 0.0;
  for (const auto& [name, t] : params) {
    (void)name;
    const float* g = t.grad();
    for (std::size_t j = 0; j < t.numel(); ++j) {
      sq += static_cast<double>(g[j]) * static_cast<double>(g[j]);
    }
  }
  return std::sqrt(sq);
}

double clip_gradients(const std::vector<std::pair<std::string, Tensor>>& params,
                      double max_norm) {
  double norm = global_grad_norm(params);
  if (max_norm > 0.0 && norm > max_norm) {
    float scale = static_cast<float>(max_norm / norm);
    for (const auto& [name, handle] : params) {
      (void)name;
      Tensor t = handle;
      float* g = t.grad();
      for (std::size_t j = 0; j < t.numel(); ++j) g[j] *= scale;
    }
  }
  return norm;
}

Batch compose_batch(const Dataset& source, const Dataset& target, int iter,
                    std::uint64_t seed) {
  if (source.samples.empty() || target.samples.empty()) {
    throw std::invalid_argument("both datasets must be non-empty");
  }
  if (iter < 0) throw std::invalid_argument("iter must be >= 0");
  auto pick = [&](const Dataset& ds, std::uint64_t tag) {
    const int n = static_cast<int>(ds.samples.size());
    const int epoch = iter / n;
    std::vector<int> idx(static_cast<std::size_t>(n));
    std::iota(idx.begin(), idx.end(), 0);
    SplitMix64 rng =
        SplitMix64(mix_seed(seed, static_cast<std::uint64_t>(epoch))).fork(tag);
    shuffle(idx, rng);
    return idx[static_cast<std::size_t>(iter % n)];
  };
  Batch b;
  b.source_index = pick(source, 1);
  b.target_index = pick(target, 2);
  b.source = source.samples[static_cast<std::size_t>(b.source_index)];
  b.target = target.samples[static_cast<std::size_t>(b.target_index)];
  b.target.strip_annotations();
  return b;
}

std::string log_csv_header() {
  return "iter,lr,l_rpn,l_roi,l_img,l_ins,l_cst,total\n";
}

std::string log_csv_row(const LogRow& row) {
  std::string out = std::to_string(row.iter);
  out += "," + format_g(row.lr);
  out += "," + format_g(row.losses.l_rpn);
  out += "," + format_g(row.losses.l_roi);
  out += "," + format_g(row.losses.l_img);
  out += "," + format_g(row.losses.l_ins);
  out += "," + format_g(row.losses.l_cst);
  out += "," + format_g(row.losses.total);
  out += "\n";
  return out;
}

void save_checkpoint(const Checkpoint& ck, const std::string& path) {
  auto params = ck.model.named();
  if (ck.velocity.size() != params.size()) {
    throw std::invalid_argument("one velocity buffer per parameter required");
  }

  std::string payload;
  for (const auto& [name, t] : params) {
    (void)name;
    append_f32_span(payload, t.data(), t.numel());
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (ck.velocity[i].size() != params[i].second.numel()) {
      throw std::invalid_argument("velocity shape mismatch: " + params[i].first);
    }
    append_f32_span(payload, ck.velocity[i].data(), ck.velocity[i].size());
  }

  json header;
  header["iteration"] = ck.iteration;
  header["config"] = json::parse(ck.config.to_json());
  header["detector"] = detector_config_json(ck.det_cfg);
  header["source_digest"] = ck.source_digest;
  header["target_digest"] = ck.target_digest;
  header["payload_digest"] = hex64(fnv1a(payload.data(), payload.size()));
  json tensors = json::array();
  for (const auto& [name, t] : params) {
    json e;
    e["name"] = name;
    e["shape"] = t.shape();
    tensors.push_back(e);
  }
  header["tensors"] = tensors;
  std::string head = header.dump();

  std::string blob;
  blob.append(kMagic, 4);
  append_u16le(blob, kCheckpointVersion);
  append_u32le(blob, static_cast<std::uint32_t>(head.size()));
  blob += head;
  blob += payload;

  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("cannot open for writing: " + path);
  f.write(blob.data(), static_cast<std::streamsize>(blob.size()));
  if (!f) throw std::runtime_error("write failed: " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open: " + path);
  std::string buf((std::istreambuf_iterator<char>(f)),
                  std::istreambuf_iterator<char>());

  ByteReader r(buf);
  if (std::memcmp(r.read_bytes(4).data(), kMagic, 4) != 0) {
    throw std::runtime_error("not a checkpoint file: " + path);
  }
  if (r.read_u16le() != kCheckpointVersion) {
    throw std::runtime_error("unsupported checkpoint version");
  }
  std::uint32_t head_len = r.read_u32le();
  json header = json::parse(r.read_bytes(head_len));

  Checkpoint ck;
  ck.iteration = header.at("iteration").get<int>();
  ck.config = TrainConfig::from_json(header.at("config").dump());
  ck.det_cfg = detector_config_from_json(header.at("detector"));
  ck.det_cfg.validate();
  ck.source_digest = header.at("source_digest").get<std::string>();
  ck.target_digest = header.at("target_digest").get<std::string>();

  SplitMix64 scratch(0);
  ck.model = FullModel::init(ck.det_cfg, scratch);
  auto params = ck.model.named();
  const json& tensors = header.at("tensors");
  if (tensors.size() != params.size()) {
    throw std::runtime_error("checkpoint tensor list mismatch");
  }
  std::size_t payload_floats = 0;
  for (std::size_t i = 0; i < params.size(); ++i) {
    const json& e = tensors[i];
    if (e.at("name").get<std::string>() != params[i].first ||
        e.at("shape").get<Shape>() != params[i].second.shape()) {
      throw std::runtime_error("checkpoint tensor layout mismatch: " +
                               params[i].first);
    }
    payload_floats += params[i].second.numel();
  }

  const std::size_t payload_start = r.pos;
  const std::size_t payload_bytes = 2 * payload_floats * sizeof(float);
  if (buf.size() - r.pos != payload_bytes) {
    throw std::runtime_error("checkpoint payload size mismatch");
  }
  std::uint64_t digest = fnv1a(buf.data() + payload_start, payload_bytes);
  if (hex64(digest) != header.at("payload_digest").get<std::string>()) {
    throw std::runtime_error("checkpoint digest mismatch");
  }

  for (auto& [name, t] : params) {
    (void)name;
    r.read_f32_span(t.data(), t.numel());
  }
  ck.velocity.resize(params.size());
  for (std::size_t i = 0; i < params.size(); ++i) {
    ck.velocity[i].resize(params[i].second.numel());
    r.read_f32_span(ck.velocity[i].data(), ck.velocity[i].size());
  }
  if (!r.exhausted()) throw std::runtime_error("trailing bytes in checkpoint");
  return ck;
}

TrainResult train(const TrainConfig& cfg, const DetectorConfig& dcfg,
                  const Dataset& source, const Dataset& target,
                  const TrainOptions& opts) {
  cfg.validate();
  dcfg.validate();
  if (source.samples.empty() || target.samples.empty()) {
    throw std::invalid_argument("both datasets must be non-empty");
  }

  TrainResult res;
  FullModel model;
  std::vector<std::vector<float>> velocity;
  int start = 0;

  if (opts.resume) {
    const Checkpoint& ck = *opts.resume;
    if (ck.iteration > cfg.total_iters) {
      throw std::invalid_argument("checkpoint is past total_iters");
    }
    model = clone_model(ck.model, dcfg);
    velocity = ck.velocity;
    start = ck.iteration;
    const AblationMask& a = ck.config.ablation;
    const AblationMask& b = cfg.ablation;
    if (a.img != b.img || a.ins != b.ins || a.cst != b.cst) {
      res.warnings.push_back(
          "checkpoint was trained under a different ablation mask");
    }
    if (ck.source_digest != hex64(source.digest) ||
        ck.target_digest != hex64(target.digest)) {
      res.warnings.push_back("checkpoint was trained on different datasets");
    }
  } else {
    model = initial_model(cfg, dcfg);
  }

  model.set_requires_grad(true);
  auto params = model.named();
  if (velocity.empty()) {
    velocity.resize(params.size());
    for (std::size_t i = 0; i < params.size(); ++i) {
      velocity[i].assign(params[i].second.numel(), 0.0f);
    }
  }

  std::ofstream log_file;
  if (!opts.log_path.empty()) {
    log_file.open(opts.log_path, std::ios::trunc);
    if (!log_file) {
      throw std::runtime_error("cannot open for writing: " + opts.log_path);
    }
    log_file << log_csv_header();
  }

  const AblationMask& mask = cfg.ablation;
  const bool any_adapt = mask.img || mask.ins || mask.cst;

  for (int i = start; i < cfg.total_iters; ++i) {
    const float lr = lr_at(i, cfg);
    Batch batch = compose_batch(source, target, i, cfg.seed);
    try {
    SplitMix64 det_rng =
        SplitMix64(mix_seed(cfg.seed, static_cast<std::uint64_t>(i))).fork(1);

    model.zero_grad();
    Tape tape;
    DetectionForward fs = forward_detection(tape, model.det, dcfg,
                                            batch.source.image,
                                            &batch.source.boxes());
    auto [l_rpn, l_roi] = compute_detection_loss(tape, dcfg, fs, batch.source,
                                                 det_rng);

    Tensor l_img, l_ins, l_cst;
    if (any_adapt) {
      DetectionForward ft =
          forward_detection(tape, model.det, dcfg, batch.target.image, nullptr);
      Tensor ps, pt, rs, rt;
      if (mask.img || mask.cst) {
        ps = image_domain_probs(tape, model.img, fs.features);
        pt = image_domain_probs(tape, model.img, ft.features);
      }
      if (mask.ins || mask.cst) {
        rs = instance_rows(tape, model.ins, fs.roi_fc2, cfg.adapt_rois);
        rt = instance_rows(tape, model.ins, ft.roi_fc2, cfg.adapt_rois);
      }
      if (mask.img) l_img = image_domain_loss(tape, {ps, pt}, {0, 1});
      if (mask.ins) l_ins = instance_domain_loss(tape, {rs, rt}, {0, 1});
      if (mask.cst) l_cst = consistency_loss(tape, {ps, pt}, {rs, rt});
    }

    const Tensor* p_img = l_img.defined() ? &l_img : nullptr;
    const Tensor* p_ins = l_ins.defined() ? &l_ins : nullptr;
    const Tensor* p_cst = l_cst.defined() ? &l_cst : nullptr;
    Tensor total = total_loss(tape, &l_rpn, &l_roi, p_img, p_ins, p_cst,
                              cfg.lambda, mask);
    LossBreakdown losses =
        loss_breakdown(&l_rpn, &l_roi, p_img, p_ins, p_cst, cfg.lambda, mask);

    tape.backward(total);
    double norm = clip_gradients(params, static_cast<double>(cfg.grad_clip));

    if (!std::isfinite(losses.total) || !std::isfinite(norm)) {
      char msg[256];
      std::snprintf(msg, sizeof(msg),
                    "non-finite loss: rpn=%g roi=%g img=%g ins=%g cst=%g "
                    "grad_norm=%g",
                    static_cast<double>(losses.l_rpn),
                    static_cast<double>(losses.l_roi),
                    static_cast<double>(losses.l_img),
                    static_cast<double>(losses.l_ins),
                    static_cast<double>(losses.l_cst), norm);
      throw std::runtime_error(msg);
    }

    sgd_step(params, velocity, lr, cfg.momentum, cfg.weight_decay);

    LogRow row{i, lr, losses};
    res.log.push_back(row);
    if (log_file.is_open()) {
      log_file << log_csv_row(row);
      log_file.flush();
    }

    if (opts.eval_ds && cfg.eval_every > 0 &&
        ((i + 1) % cfg.eval_every == 0 || i + 1 == cfg.total_iters)) {
      EvalReport rep = evaluate_model(model.det, dcfg, *opts.eval_ds);
      res.snapshots.push_back({i + 1, rep.mean_ap});
    }
    } catch (const std::exception& e) {
      char msg[512];
      std::snprintf(msg, sizeof(msg),
                    "training aborted at iter %d (source %d, target %d): %s",
                    i, batch.source_index, batch.target_index, e.what());
      throw std::runtime_error(msg);
    }
  }

  res.checkpoint.model = model;
  res.checkpoint.velocity = std::move(velocity);
  res.checkpoint.iteration = cfg.total_iters;
  res.checkpoint.config = cfg;
  res.checkpoint.det_cfg = dcfg;
  res.checkpoint.source_digest = hex64(source.digest);
  res.checkpoint.target_digest = hex64(target.digest);
  if (!opts.checkpoint_path.empty()) {
    save_checkpoint(res.checkpoint, opts.checkpoint_path);
  }
  return res;
}

}  // namespace dadet
