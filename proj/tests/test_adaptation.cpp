#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstring>
#include <vector>

#include "dadet/adaptation.hpp"
#include "dadet/detector.hpp"

using namespace dadet;

namespace {

Tensor prob_map(std::vector<float> vals, int h, int w) {
  Tensor t = Tensor::zeros({1, 1, h, w});
  std::copy(vals.begin(), vals.end(), t.data());
  return t;
}

Tensor prob_row(std::vector<float> vals) {
  Tensor t = Tensor::zeros({static_cast<int>(vals.size())});
  std::copy(vals.begin(), vals.end(), t.data());
  return t;
}

constexpr float kLn2 = 0.6931472f;

}  // namespace

TEST_CASE("image domain loss fixtures") {
  Tape tape;
  SUBCASE("confident correct prediction vanishes") {
    Tensor m = prob_map({0.999999f}, 1, 1);
    Tensor l = image_domain_loss(tape, {m}, {1});
    CHECK(l.value() < 2e-6f);
  }
  SUBCASE("uninformed prediction costs ln 2") {
    Tensor m = prob_map({0.5f}, 1, 1);
    Tensor l = image_domain_loss(tape, {m}, {0});
    CHECK(std::fabs(l.value() - kLn2) < 1e-6f);
  }
  SUBCASE("mean reduction over activations") {
    Tensor m = prob_map({0.5f, 0.5f}, 1, 2);
    Tensor l = image_domain_loss(tape, {m}, {0});
    CHECK(std::fabs(l.value() - kLn2) < 1e-6f);
    Tensor s = image_domain_loss(tape, {m}, {0}, Reduction::kSum);
    CHECK(std::fabs(s.value() - 2.0f * kLn2) < 1e-6f);
  }
  SUBCASE("joint mean over a two-image batch") {
    Tensor a = prob_map({0.5f}, 1, 1);
    Tensor b = prob_map({0.5f}, 1, 1);
    Tensor l = image_domain_loss(tape, {a, b}, {0, 1});
    CHECK(std::fabs(l.value() - kLn2) < 1e-6f);
  }
  SUBCASE("validation") {
    CHECK_THROWS(image_domain_loss(tape, {}, {}));
    Tensor m = prob_map({0.5f}, 1, 1);
    CHECK_THROWS(image_domain_loss(tape, {m}, {2}));
    CHECK_THROWS(image_domain_loss(tape, {m}, {0, 1}));
    CHECK_THROWS(image_domain_loss(tape, {prob_row({0.5f})}, {0}));
  }
  SUBCASE("extreme probabilities stay finite") {
    Tensor m = prob_map({0.0f, 1.0f}, 1, 2);
    m.set_requires_grad(true);
    Tape t2;
    Tensor l = image_domain_loss(t2, {m}, {0});
    CHECK(std::isfinite(l.value()));
    t2.backward(l);
    CHECK(std::isfinite(m.grad_at(0)));
    CHECK(std::isfinite(m.grad_at(1)));
  }
}

TEST_CASE("instance domain loss fixtures") {
  Tape tape;
  SUBCASE("single roi hand values") {
    Tensor r = prob_row({0.25f});
    Tensor l = instance_domain_loss(tape, {r}, {1});
    CHECK(std::fabs(l.value() - 1.3862944f) < 1e-6f);
  }
  SUBCASE("mixed batch symmetry") {
    Tensor a = prob_row({0.5f});
    Tensor b = prob_row({0.5f});
    Tensor l = instance_domain_loss(tape, {a, b}, {0, 1});
    CHECK(std::fabs(l.value() - kLn2) < 1e-6f);
  }
  SUBCASE("confident correct roi vanishes") {
    Tensor r = prob_row({0.999999f});
    Tensor l = instance_domain_loss(tape, {r}, {1});
    CHECK(l.value() < 2e-6f);
  }
  SUBCASE("no rois anywhere gives zero with a flag") {
    bool empty = false;
    Tensor l = instance_domain_loss(tape, {Tensor(), Tensor()}, {0, 1},
                                    Reduction::kMean, &empty);
    CHECK(l.value() == 0.0f);
    CHECK(empty);
    Tensor r = prob_row({0.5f});
    empty = true;
    instance_domain_loss(tape, {r, Tensor()}, {0, 1}, Reduction::kMean, &empty);
    CHECK_FALSE(empty);
  }
  SUBCASE("sum reduction") {
    Tensor r = prob_row({0.5f, 0.5f});
    Tensor l = instance_domain_loss(tape, {r}, {1}, Reduction::kSum);
    CHECK(std::fabs(l.value() - 2.0f * kLn2) < 1e-6f);
  }
}

TEST_CASE("consistency loss fixtures") {
  Tape tape;
  SUBCASE("agreement costs nothing") {
    Tensor m = prob_map({0.7f, 0.7f, 0.7f, 0.7f}, 2, 2);
    Tensor l = consistency_loss(tape, {m}, {prob_row({0.7f})});
    CHECK(l.value() == 0.0f);
  }
  SUBCASE("absolute gap") {
    Tensor m = prob_map({0.8f, 0.8f, 0.8f, 0.8f}, 2, 2);
    Tensor l = consistency_loss(tape, {m}, {prob_row({0.5f})});
    CHECK(std::fabs(l.value() - 0.3f) < 1e-6f);
  }
  SUBCASE("averaged over instances") {
    Tensor m = prob_map({0.8f}, 1, 1);
    Tensor l = consistency_loss(tape, {m}, {prob_row({0.6f, 1.0f})});
    CHECK(std::fabs(l.value() - 0.2f) < 1e-6f);
  }
  SUBCASE("images without rois contribute nothing") {
    Tensor a = prob_map({0.9f}, 1, 1);
    Tensor b = prob_map({0.1f}, 1, 1);
    Tensor l = consistency_loss(tape, {a, b}, {Tensor(), prob_row({0.1f})});
    CHECK(l.value() == 0.0f);
    Tensor none = consistency_loss(tape, {a}, {Tensor()});
    CHECK(none.value() == 0.0f);
  }
  SUBCASE("gradients reach both sides unless the image side is stopped") {
    // Both rois sit below the map mean of 0.75 so the per-roi sign terms
    // cannot cancel on the image side.
    Tensor m = prob_map({0.8f, 0.6f, 0.9f, 0.7f}, 2, 2);
    Tensor r = prob_row({0.5f, 0.6f});
    m.set_requires_grad(true);
    r.set_requires_grad(true);
    {
      Tape t2;
      Tensor l = consistency_loss(t2, {m}, {r});
      t2.backward(l);
      float msum = 0, rsum = 0;
      for (int i = 0; i < 4; ++i) msum += std::fabs(m.grad_at(static_cast<std::size_t>(i)));
      for (int i = 0; i < 2; ++i) rsum += std::fabs(r.grad_at(static_cast<std::size_t>(i)));
      CHECK(msum > 0.0f);
      CHECK(rsum > 0.0f);
    }
    m.zero_grad();
    r.zero_grad();
    {
      Tape t3;
      Tensor l = consistency_loss(t3, {m}, {r}, true);
      t3.backward(l);
      float msum = 0, rsum = 0;
      for (int i = 0; i < 4; ++i) msum += std::fabs(m.grad_at(static_cast<std::size_t>(i)));
      for (int i = 0; i < 2; ++i) rsum += std::fabs(r.grad_at(static_cast<std::size_t>(i)));
      CHECK(msum == 0.0f);
      CHECK(rsum > 0.0f);
    }
  }
  SUBCASE("validation") {
    Tensor m = prob_map({0.5f}, 1, 1);
    CHECK_THROWS(consistency_loss(tape, {m}, {}));
    CHECK_THROWS(consistency_loss(tape, {prob_row({0.5f})}, {prob_row({0.5f})}));
  }
}

TEST_CASE("total loss and breakdown") {
  Tape tape;
  Tensor l_rpn = Tensor::scalar(0.6f, true);
  Tensor l_roi = Tensor::scalar(0.4f, true);
  Tensor l_img = Tensor::scalar(0.5f, true);
  Tensor l_ins = Tensor::scalar(0.5f, true);
  Tensor l_cst = Tensor::scalar(0.5f, true);
  AblationMask full;

  SUBCASE("trade-off arithmetic") {
    Tensor t = total_loss(tape, &l_rpn, &l_roi, &l_img, &l_ins, &l_cst, 0.1f, full);
    CHECK(std::fabs(t.value() - 1.15f) < 1e-6f);
    LossBreakdown b = loss_breakdown(&l_rpn, &l_roi, &l_img, &l_ins, &l_cst, 0.1f, full);
    CHECK(std::fabs(b.total - 1.15f) < 1e-6f);
    CHECK(b.l_img == 0.5f);
  }
  SUBCASE("lambda zero reduces to the detection loss") {
    Tensor t = total_loss(tape, &l_rpn, &l_roi, &l_img, &l_ins, &l_cst, 0.0f, full);
    CHECK(std::fabs(t.value() - 1.0f) < 1e-6f);
  }
  SUBCASE("masks drop terms from value and graph") {
    AblationMask img_only{true, false, false};
    Tape t2;
    Tensor t = total_loss(t2, &l_rpn, &l_roi, &l_img, &l_ins, &l_cst, 0.1f, img_only);
    CHECK(std::fabs(t.value() - 1.05f) < 1e-6f);
    t2.backward(t);
    CHECK(l_img.grad_at(0) == doctest::Approx(0.1f));
    CHECK(l_ins.grad_at(0) == 0.0f);
    CHECK(l_cst.grad_at(0) == 0.0f);
    CHECK(l_rpn.grad_at(0) == 1.0f);
    l_rpn.zero_grad();
    l_img.zero_grad();
  }
  SUBCASE("breakdown recomputes under every mask") {
    for (int m = 0; m < 8; ++m) {
      AblationMask mask{(m & 1) != 0, (m & 2) != 0, (m & 4) != 0};
      LossBreakdown b = loss_breakdown(&l_rpn, &l_roi, &l_img, &l_ins, &l_cst, 0.1f, mask);
      float recomputed = b.l_rpn + b.l_roi + 0.1f * (b.l_img + b.l_ins + b.l_cst);
      CHECK(std::fabs(b.total - recomputed) < 1e-5f);
      CHECK(b.l_rpn >= 0.0f);
      CHECK(b.l_img >= 0.0f);
    }
  }
  SUBCASE("absent detection terms for target-only steps") {
    Tensor t = total_loss(tape, nullptr, nullptr, &l_img, &l_ins, &l_cst, 0.1f, full);
    CHECK(std::fabs(t.value() - 0.15f) < 1e-6f);
    CHECK_THROWS(total_loss(tape, &l_rpn, &l_roi, &l_img, &l_ins, &l_cst, -1.0f, full));
  }
}

TEST_CASE("domain heads") {
  SplitMix64 rng(31);
  ImageHeadParams img = ImageHeadParams::init(rng);
  InstanceHeadParams ins = InstanceHeadParams::init(rng);
  Tape tape;

  Tensor feats = Tensor::zeros({1, 64, 6, 5});
  for (std::size_t i = 0; i < feats.numel(); ++i) {
    feats.data()[i] = 0.3f * std::sin(static_cast<float>(i) * 0.13f);
  }
  Tensor pmap = image_domain_probs(tape, img, feats);
  CHECK(pmap.shape() == Shape{1, 1, 6, 5});
  for (std::size_t i = 0; i < pmap.numel(); ++i) {
    CHECK(pmap.at(i) > 0.0f);
    CHECK(pmap.at(i) < 1.0f);
  }

  Tensor roi = Tensor::zeros({5, 128});
  for (std::size_t i = 0; i < roi.numel(); ++i) {
    roi.data()[i] = 0.2f * std::cos(static_cast<float>(i) * 0.07f);
  }
  Tensor probs = instance_domain_probs(tape, ins, roi);
  CHECK(probs.shape() == Shape{5});
  for (std::size_t i = 0; i < probs.numel(); ++i) {
    CHECK(probs.at(i) > 0.0f);
    CHECK(probs.at(i) < 1.0f);
  }

  CHECK_THROWS(image_domain_probs(tape, img, Tensor::zeros({1, 32, 4, 4})));
  CHECK_THROWS(instance_domain_probs(tape, ins, Tensor::zeros({5, 64})));
}

TEST_CASE("adversarial gradient identity") {
  // lambda * l_img differentiated through the reversal must equal minus the
  // gradient of the same graph without the reversal, for the backbone; the
  // head itself sees identical gradients either way.
  const float lambda = 0.1f;
  SplitMix64 rng(17);
  Tensor conv_w = Tensor::zeros({2, 3, 3, 3});
  for (std::size_t i = 0; i < conv_w.numel(); ++i) conv_w.data()[i] = rng.normal() * 0.3f;
  Tensor conv_b = Tensor::zeros({2});
  ImageHeadParams head = ImageHeadParams::init(rng, 2);

  Tensor image = Tensor::zeros({1, 3, 6, 6});
  for (std::size_t i = 0; i < image.numel(); ++i) image.data()[i] = rng.uniform(0.0f, 1.0f);

  auto run = [&](bool reversed) {
    conv_w.set_requires_grad(true);
    conv_b.set_requires_grad(true);
    head.set_requires_grad(true);
    conv_w.zero_grad();
    conv_b.zero_grad();
    for (auto& [n, t] : head.named()) {
      (void)n;
      Tensor c = t;
      c.zero_grad();
    }
    Tape tape;
    Tensor feat = relu(tape, conv2d(tape, image, conv_w, conv_b, 1, 1));
    Tensor probs;
    if (reversed) {
      probs = image_domain_probs(tape, head, feat);
    } else {
      Tensor x = relu(tape, conv2d(tape, feat, head.w1, head.b1, 1, 0));
      x = conv2d(tape, x, head.w2, head.b2, 1, 0);
      probs = sigmoid(tape, x);
    }
    Tensor loss = mul_scalar(tape, image_domain_loss(tape, {probs}, {1}), lambda);
    tape.backward(loss);
    std::vector<float> gw(conv_w.grad(), conv_w.grad() + conv_w.numel());
    std::vector<float> gh(head.w1.grad(), head.w1.grad() + head.w1.numel());
    return std::make_pair(gw, gh);
  };

  auto [gw_rev, gh_rev] = run(true);
  auto [gw_fwd, gh_fwd] = run(false);
  float max_err = 0.0f, max_mag = 0.0f;
  for (std::size_t i = 0; i < gw_rev.size(); ++i) {
    max_err = std::max(max_err, std::fabs(gw_rev[i] + gw_fwd[i]));
    max_mag = std::max(max_mag, std::fabs(gw_rev[i]));
  }
  CHECK(max_err < 1e-4f);
  CHECK(max_mag > 0.0f);  // the identity is not vacuous
  for (std::size_t i = 0; i < gh_rev.size(); ++i) {
    CHECK(std::fabs(gh_rev[i] - gh_fwd[i]) < 1e-6f);
  }
}

TEST_CASE("gradient isolation between detection and domain paths") {
  DetectorConfig cfg;
  DatasetSpec dspec;
  dspec.num_images = 1;
  dspec.seed = 5;
  Sample s = render_scene(dspec, 0);

  SplitMix64 rng(41);
  DetectorParams det = DetectorParams::init(cfg, rng);
  ImageHeadParams img = ImageHeadParams::init(rng);
  InstanceHeadParams ins = InstanceHeadParams::init(rng);
  det.set_requires_grad(true);
  img.set_requires_grad(true);
  ins.set_requires_grad(true);

  auto head_grad_sum = [&]() {
    float sum = 0.0f;
    for (auto& [n, t] : img.named()) {
      (void)n;
      for (std::size_t i = 0; i < t.numel(); ++i) sum += std::fabs(t.grad_at(i));
    }
    for (auto& [n, t] : ins.named()) {
      (void)n;
      for (std::size_t i = 0; i < t.numel(); ++i) sum += std::fabs(t.grad_at(i));
    }
    return sum;
  };
  auto zero_all = [&]() {
    for (auto& [n, t] : det.named()) {
      (void)n;
      Tensor c = t;
      c.zero_grad();
    }
    for (auto& [n, t] : img.named()) {
      (void)n;
      Tensor c = t;
      c.zero_grad();
    }
    for (auto& [n, t] : ins.named()) {
      (void)n;
      Tensor c = t;
      c.zero_grad();
    }
  };

  // Detection-only step: the domain heads stay untouched.
  zero_all();
  {
    Tape tape;
    DetectionForward fwd = forward_detection(tape, det, cfg, s.image, &s.boxes());
    SplitMix64 lrng(3);
    auto [l_rpn, l_roi] = compute_detection_loss(tape, cfg, fwd, s, lrng);
    Tensor total = total_loss(tape, &l_rpn, &l_roi, nullptr, nullptr, nullptr, 0.1f, {});
    tape.backward(total);
    CHECK(head_grad_sum() == 0.0f);
    float det_sum = 0.0f;
    for (std::size_t i = 0; i < det.c1w.numel(); ++i) det_sum += std::fabs(det.c1w.grad_at(i));
    CHECK(det_sum > 0.0f);
  }

  // Full adversarial step: heads and backbone both receive gradients.
  zero_all();
  {
    Tape tape;
    DetectionForward fwd = forward_detection(tape, det, cfg, s.image, &s.boxes());
    SplitMix64 lrng(3);
    auto [l_rpn, l_roi] = compute_detection_loss(tape, cfg, fwd, s, lrng);
    Tensor pmap = image_domain_probs(tape, img, fwd.features);
    Tensor iprobs = instance_domain_probs(tape, ins, fwd.roi_fc2);
    Tensor l_img = image_domain_loss(tape, {pmap}, {0});
    Tensor l_ins = instance_domain_loss(tape, {iprobs}, {0});
    Tensor l_cst = consistency_loss(tape, {pmap}, {iprobs});
    Tensor total =
        total_loss(tape, &l_rpn, &l_roi, &l_img, &l_ins, &l_cst, 0.1f, {});
    tape.backward(total);
    CHECK(head_grad_sum() > 0.0f);
    float det_sum = 0.0f;
    for (std::size_t i = 0; i < det.c1w.numel(); ++i) det_sum += std::fabs(det.c1w.grad_at(i));
    CHECK(det_sum > 0.0f);
  }
}

TEST_CASE("h divergence estimator") {
  SUBCASE("well separated domains approach 2") {
    SplitMix64 rng(7);
    std::vector<std::vector<float>> src, tgt;
    for (int i = 0; i < 20; ++i) {
      std::vector<float> a(4), b(4);
      for (int d = 0; d < 4; ++d) {
        a[static_cast<std::size_t>(d)] = rng.normal();
        b[static_cast<std::size_t>(d)] = rng.normal() + 100.0f;
      }
      src.push_back(a);
      tgt.push_back(b);
    }
    HDivergenceEstimate est = estimate_h_divergence(src, tgt);
    CHECK(est.d_h > 1.6f);
    CHECK(est.err_source <= 0.1f);
    CHECK(est.err_target <= 0.1f);
  }
  SUBCASE("identical distributions approach 0") {
    float sum = 0.0f;
    for (std::uint64_t seed = 1; seed <= 5; ++seed) {
      SplitMix64 rng(seed);
      std::vector<std::vector<float>> src, tgt;
      for (int i = 0; i < 40; ++i) {
        std::vector<float> a(4), b(4);
        for (int d = 0; d < 4; ++d) {
          a[static_cast<std::size_t>(d)] = rng.normal();
          b[static_cast<std::size_t>(d)] = rng.normal();
        }
        src.push_back(a);
        tgt.push_back(b);
      }
      HDivergenceEstimate est = estimate_h_divergence(src, tgt);
      CHECK(est.d_h >= 0.0f);
      CHECK(est.d_h <= 2.0f);
      sum += est.d_h;
    }
    CHECK(sum / 5.0f <= 0.4f);
  }
  SUBCASE("formula and clamp hold on every estimate") {
    SplitMix64 rng(99);
    std::vector<std::vector<float>> src, tgt;
    for (int i = 0; i < 12; ++i) {
      src.push_back({rng.normal(), rng.normal()});
      tgt.push_back({rng.normal() + 0.5f, rng.normal()});
    }
    HDivergenceEstimate est = estimate_h_divergence(src, tgt);
    float raw = 2.0f * (1.0f - (est.err_source + est.err_target));
    float clamped = std::min(2.0f, std::max(0.0f, raw));
    CHECK(est.d_h == clamped);
  }
  SUBCASE("validation") {
    std::vector<std::vector<float>> few(5, std::vector<float>(3, 0.0f));
    std::vector<std::vector<float>> ok(12, std::vector<float>(3, 0.0f));
    CHECK_THROWS(estimate_h_divergence(few, ok));
    std::vector<std::vector<float>> bad = ok;
    bad[3] = {1.0f, 2.0f};
    CHECK_THROWS(estimate_h_divergence(ok, bad));
  }
}
