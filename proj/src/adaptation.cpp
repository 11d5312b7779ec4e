#include "dadet/adaptation.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <stdexcept>

namespace dadet {

namespace {

constexpr float kProbEps = 1e-7f;

Tensor he_tensor(SplitMix64& rng, Shape shape, int fan_in, float scale) {
  Tensor w = Tensor::zeros(std::move(shape));
  float std = scale * std::sqrt(2.0f / static_cast<float>(fan_in));
  for (std::size_t i = 0; i < w.numel(); ++i) w.data()[i] = rng.normal() * std;
  return w;
}

float clamp_prob(float p) {
  return std::min(1.0f - kProbEps, std::max(kProbEps, p));
}

void check_labels(const std::vector<int>& labels, std::size_t n) {
  if (labels.size() != n) {
    throw std::invalid_argument("one domain label per image is required");
  }
  for (int d : labels) {
    if (d != 0 && d != 1) throw std::invalid_argument("domain labels are 0 or 1");
  }
}

// Shared core of the two domain losses: probabilities in, bernoulli
// cross-entropy out, with the backward rule writing straight into the prob
// tensors' gradients.
Tensor domain_bce(Tape& tape, const std::vector<Tensor>& probs,
                  const std::vector<int>& labels, Reduction reduction,
                  std::size_t total) {
  double acc = 0.0;
  bool rg = false;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    if (!probs[i].defined()) continue;
    float y = static_cast<float>(labels[i]);
    const float* p = probs[i].data();
    for (std::size_t e = 0; e < probs[i].numel(); ++e) {
      float pc = clamp_prob(p[e]);
      acc -= static_cast<double>(y) * std::log(static_cast<double>(pc)) +
             static_cast<double>(1.0f - y) * std::log(static_cast<double>(1.0f - pc));
    }
    if (tape.enabled() && probs[i].requires_grad()) rg = true;
  }
  float norm = reduction == Reduction::kMean ? 1.0f / static_cast<float>(total) : 1.0f;
  Tensor out = Tensor::scalar(static_cast<float>(acc) * norm);
  if (rg) {
    out.set_requires_grad(true);
    std::vector<Tensor> pr = probs;
    std::vector<int> lab = labels;
    Tensor o = out;
    tape.record([pr, lab, norm, o]() mutable {
      float seed = o.grad()[0];
      for (std::size_t i = 0; i < pr.size(); ++i) {
        if (!pr[i].defined() || !pr[i].requires_grad()) continue;
        float y = static_cast<float>(lab[i]);
        const float* p = pr[i].data();
        float* g = pr[i].grad();
        for (std::size_t e = 0; e < pr[i].numel(); ++e) {
          float pc = clamp_prob(p[e]);
          g[e] += seed * norm * (-(y / pc) + (1.0f - y) / (1.0f - pc));
        }
      }
    });
  }
  return out;
}

}  // namespace

std::vector<std::pair<std::string, Tensor>> ImageHeadParams::named() const {
  return {{"img_w1", w1}, {"img_b1", b1}, {"img_w2", w2}, {"img_b2", b2}};
}

void ImageHeadParams::set_requires_grad(bool value) {
  for (auto& [name, t] : named()) {
    (void)name;
    Tensor copy = t;
    copy.set_requires_grad(value);
  }
}

ImageHeadParams ImageHeadParams::init(SplitMix64& rng, int in_channels) {
  ImageHeadParams p;
  p.w1 = he_tensor(rng, {32, in_channels, 1, 1}, in_channels, 1.0f);
  p.b1 = Tensor::zeros({32});
  p.w2 = he_tensor(rng, {1, 32, 1, 1}, 32, 0.1f);
  p.b2 = Tensor::zeros({1});
  return p;
}

std::vector<std::pair<std::string, Tensor>> InstanceHeadParams::named() const {
  return {{"ins_w1", w1}, {"ins_b1", b1}, {"ins_w2", w2}, {"ins_b2", b2}};
}

void InstanceHeadParams::set_requires_grad(bool value) {
  for (auto& [name, t] : named()) {
    (void)name;
    Tensor copy = t;
    copy.set_requires_grad(value);
  }
}

InstanceHeadParams InstanceHeadParams::init(SplitMix64& rng, int in_dim) {
  InstanceHeadParams p;
  p.w1 = he_tensor(rng, {in_dim, 32}, in_dim, 1.0f);
  p.b1 = Tensor::zeros({32});
  p.w2 = he_tensor(rng, {32, 1}, 32, 0.1f);
  p.b2 = Tensor::zeros({1});
  return p;
}

Tensor image_domain_probs(Tape& tape, const ImageHeadParams& p, const Tensor& features) {
  if (features.ndim() != 4 || features.dim(0) != 1 || features.dim(1) != p.w1.dim(1)) {
    throw std::invalid_argument("image head expects [1,C,H,W] features matching its width");
  }
  Tensor x = grad_reverse(tape, features);
  x = relu(tape, conv2d(tape, x, p.w1, p.b1, 1, 0));
  x = conv2d(tape, x, p.w2, p.b2, 1, 0);
  return sigmoid(tape, x);  // [1,1,H,W]
}

Tensor instance_domain_probs(Tape& tape, const InstanceHeadParams& p, const Tensor& roi_fc2) {
  if (roi_fc2.ndim() != 2 || roi_fc2.dim(1) != p.w1.dim(0)) {
    throw std::invalid_argument("instance head expects [R,D] features matching its width");
  }
  Tensor x = grad_reverse(tape, roi_fc2);
  x = relu(tape, linear(tape, x, p.w1, p.b1));
  x = linear(tape, x, p.w2, p.b2);           // [R,1]
  x = reshape(tape, x, {roi_fc2.dim(0)});    // [R]
  return sigmoid(tape, x);
}

Tensor image_domain_loss(Tape& tape, const std::vector<Tensor>& prob_maps,
                         const std::vector<int>& labels, Reduction reduction) {
  if (prob_maps.empty()) throw std::invalid_argument("image_domain_loss needs >= 1 map");
  check_labels(labels, prob_maps.size());
  std::size_t total = 0;
  for (const Tensor& m : prob_maps) {
    if (!m.defined() || m.ndim() != 4 || m.dim(0) != 1 || m.dim(1) != 1) {
      throw std::invalid_argument("prob maps must be [1,1,H,W]");
    }
    total += m.numel();
  }
  return domain_bce(tape, prob_maps, labels, reduction, total);
}

Tensor instance_domain_loss(Tape& tape, const std::vector<Tensor>& instance_probs,
                            const std::vector<int>& labels, Reduction reduction,
                            bool* empty) {
  check_labels(labels, instance_probs.size());
  std::size_t total = 0;
  for (const Tensor& t : instance_probs) {
    if (!t.defined()) continue;
    if (t.ndim() != 1) throw std::invalid_argument("instance probs must be 1-D per image");
    total += t.numel();
  }
  if (empty) *empty = total == 0;
  if (total == 0) return Tensor::scalar(0.0f);
  return domain_bce(tape, instance_probs, labels, reduction, total);
}

Tensor consistency_loss(Tape& tape, const std::vector<Tensor>& prob_maps,
                        const std::vector<Tensor>& instance_probs,
                        bool stop_image_side) {
  if (prob_maps.size() != instance_probs.size()) {
    throw std::invalid_argument("need one prob map per instance-prob row");
  }
  std::vector<Tensor> means(prob_maps.size());
  std::size_t total = 0;
  for (std::size_t i = 0; i < prob_maps.size(); ++i) {
    if (!prob_maps[i].defined() || prob_maps[i].ndim() != 4 ||
        prob_maps[i].dim(0) != 1 || prob_maps[i].dim(1) != 1) {
      throw std::invalid_argument("prob maps must be [1,1,H,W]");
    }
    if (instance_probs[i].defined()) total += instance_probs[i].numel();
    means[i] = mean(tape, prob_maps[i]);
  }
  if (total == 0) return Tensor::scalar(0.0f);

  double acc = 0.0;
  bool rg = false;
  auto signs = std::make_shared<std::vector<std::vector<float>>>(prob_maps.size());
  for (std::size_t i = 0; i < prob_maps.size(); ++i) {
    if (!instance_probs[i].defined()) continue;
    float m = means[i].value();
    const float* p = instance_probs[i].data();
    (*signs)[i].resize(instance_probs[i].numel());
    for (std::size_t j = 0; j < instance_probs[i].numel(); ++j) {
      float d = m - p[j];
      acc += std::fabs(static_cast<double>(d));
      (*signs)[i][j] = d > 0.0f ? 1.0f : (d < 0.0f ? -1.0f : 0.0f);
    }
    if (tape.enabled() &&
        ((means[i].requires_grad() && !stop_image_side) || instance_probs[i].requires_grad())) {
      rg = true;
    }
  }
  float norm = 1.0f / static_cast<float>(total);
  Tensor out = Tensor::scalar(static_cast<float>(acc) * norm);
  if (rg) {
    out.set_requires_grad(true);
    std::vector<Tensor> ms = means;
    std::vector<Tensor> ps = instance_probs;
    Tensor o = out;
    bool stop = stop_image_side;
    tape.record([ms, ps, signs, o, norm, stop]() mutable {
      float seed = o.grad()[0];
      for (std::size_t i = 0; i < ms.size(); ++i) {
        if (!ps[i].defined()) continue;
        const auto& s = (*signs)[i];
        if (!stop && ms[i].requires_grad()) {
          float sum = 0.0f;
          for (float v : s) sum += v;
          ms[i].grad()[0] += seed * norm * sum;
        }
        if (ps[i].requires_grad()) {
          float* g = ps[i].grad();
          for (std::size_t j = 0; j < s.size(); ++j) g[j] -= seed * norm * s[j];
        }
      }
    });
  }
  return out;
}

Tensor total_loss(Tape& tape, const Tensor* l_rpn, const Tensor* l_roi,
                  const Tensor* l_img, const Tensor* l_ins, const Tensor* l_cst,
                  float lambda, const AblationMask& mask) {
  if (!(lambda >= 0.0f)) throw std::invalid_argument("lambda must be >= 0");
  Tensor acc = Tensor::scalar(0.0f);
  auto accumulate = [&](const Tensor* t, float w) {
    if (!t || !t->defined() || w == 0.0f) return;
    acc = add(tape, acc, w == 1.0f ? *t : mul_scalar(tape, *t, w));
  };
  accumulate(l_rpn, 1.0f);
  accumulate(l_roi, 1.0f);
  accumulate(l_img, mask.img ? lambda : 0.0f);
  accumulate(l_ins, mask.ins ? lambda : 0.0f);
  accumulate(l_cst, mask.cst ? lambda : 0.0f);
  return acc;
}

LossBreakdown loss_breakdown(const Tensor* l_rpn, const Tensor* l_roi,
                             const Tensor* l_img, const Tensor* l_ins,
                             const Tensor* l_cst, float lambda,
                             const AblationMask& mask) {
  auto val = [](const Tensor* t) {
    return t && t->defined() ? t->value() : 0.0f;
  };
  LossBreakdown b;
  b.l_rpn = val(l_rpn);
  b.l_roi = val(l_roi);
  b.l_img = mask.img ? val(l_img) : 0.0f;
  b.l_ins = mask.ins ? val(l_ins) : 0.0f;
  b.l_cst = mask.cst ? val(l_cst) : 0.0f;
  b.total = b.l_rpn + b.l_roi + lambda * (b.l_img + b.l_ins + b.l_cst);
  return b;
}

HDivergenceEstimate estimate_h_divergence(const std::vector<std::vector<float>>& feats_source,
                                          const std::vector<std::vector<float>>& feats_target) {
  if (feats_source.size() < 10 || feats_target.size() < 10) {
    throw std::invalid_argument("need >= 10 feature vectors per domain");
  }
  const std::size_t dim = feats_source[0].size();
  if (dim == 0) throw std::invalid_argument("empty feature vectors");
  for (const auto& v : feats_source) {
    if (v.size() != dim) throw std::invalid_argument("feature dimension mismatch");
  }
  for (const auto& v : feats_target) {
    if (v.size() != dim) throw std::invalid_argument("feature dimension mismatch");
  }

  const std::size_t ns_train = feats_source.size() / 2;
  const std::size_t nt_train = feats_target.size() / 2;

  // Standardize with train-half statistics so the logistic fit is scale-free.
  std::vector<double> mu(dim, 0.0), sd(dim, 0.0);
  for (std::size_t i = 0; i < ns_train; ++i) {
    for (std::size_t d = 0; d < dim; ++d) mu[d] += feats_source[i][d];
  }
  for (std::size_t i = 0; i < nt_train; ++i) {
    for (std::size_t d = 0; d < dim; ++d) mu[d] += feats_target[i][d];
  }
  const double n_train = static_cast<double>(ns_train + nt_train);
  for (std::size_t d = 0; d < dim; ++d) mu[d] /= n_train;
  for (std::size_t i = 0; i < ns_train; ++i) {
    for (std::size_t d = 0; d < dim; ++d) {
      double c = feats_source[i][d] - mu[d];
      sd[d] += c * c;
    }
  }
  for (std::size_t i = 0; i < nt_train; ++i) {
    for (std::size_t d = 0; d < dim; ++d) {
      double c = feats_target[i][d] - mu[d];
      sd[d] += c * c;
    }
  }
  for (std::size_t d = 0; d < dim; ++d) sd[d] = std::max(1e-8, std::sqrt(sd[d] / n_train));

  auto norm_at = [&](const std::vector<float>& v, std::size_t d) {
    return (static_cast<double>(v[d]) - mu[d]) / sd[d];
  };

  // Full-batch logistic regression, zero init: deterministic.
  std::vector<double> w(dim, 0.0);
  double b = 0.0;
  const double lr = 0.5;
  const int epochs = 300;
  auto predict = [&](const std::vector<float>& v) {
    double z = b;
    for (std::size_t d = 0; d < dim; ++d) z += w[d] * norm_at(v, d);
    return 1.0 / (1.0 + std::exp(-z));
  };
  std::vector<double> gw(dim);
  for (int e = 0; e < epochs; ++e) {
    std::fill(gw.begin(), gw.end(), 0.0);
    double gb = 0.0;
    for (std::size_t i = 0; i < ns_train; ++i) {
      double err = predict(feats_source[i]) - 0.0;
      for (std::size_t d = 0; d < dim; ++d) gw[d] += err * norm_at(feats_source[i], d);
      gb += err;
    }
    for (std::size_t i = 0; i < nt_train; ++i) {
      double err = predict(feats_target[i]) - 1.0;
      for (std::size_t d = 0; d < dim; ++d) gw[d] += err * norm_at(feats_target[i], d);
      gb += err;
    }
    for (std::size_t d = 0; d < dim; ++d) w[d] -= lr * gw[d] / n_train;
    b -= lr * gb / n_train;
  }

  std::size_t src_wrong = 0, src_held = feats_source.size() - ns_train;
  for (std::size_t i = ns_train; i < feats_source.size(); ++i) {
    if (predict(feats_source[i]) >= 0.5) ++src_wrong;
  }
  std::size_t tgt_wrong = 0, tgt_held = feats_target.size() - nt_train;
  for (std::size_t i = nt_train; i < feats_target.size(); ++i) {
    if (predict(feats_target[i]) < 0.5) ++tgt_wrong;
  }

  HDivergenceEstimate est;
  est.err_source = static_cast<float>(src_wrong) / static_cast<float>(src_held);
  est.err_target = static_cast<float>(tgt_wrong) / static_cast<float>(tgt_held);
  float d_h = 2.0f * (1.0f - (est.err_source + est.err_target));
  est.d_h = std::min(2.0f, std::max(0.0f, d_h));
  return est;
}

}  // namespace dadet
