#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <vector>

#include "dadet/common.hpp"
#include "dadet/tensor.hpp"

using namespace dadet;

namespace {

Tensor sum_all(Tape& tape, const Tensor& x) {
  return mul_scalar(tape, mean(tape, x), static_cast<float>(x.numel()));
}

Tensor random_tensor(Shape shape, SplitMix64& rng, float lo, float hi) {
  std::size_t n = shape_numel(shape);
  std::vector<float> v(n);
  for (auto& e : v) e = rng.uniform(lo, hi);
  return Tensor(std::move(shape), std::move(v));
}

// Resamples coordinates until all are at least `margin` away from `kink`.
Tensor random_tensor_off(Shape shape, SplitMix64& rng, float lo, float hi, float kink,
                         float margin) {
  Tensor t = random_tensor(std::move(shape), rng, lo, hi);
  for (std::size_t i = 0; i < t.numel(); ++i)
    while (std::abs(t.data()[i] - kink) < margin) t.data()[i] = rng.uniform(lo, hi);
  return t;
}

using ScalarFn = std::function<Tensor(Tape&, const Tensor&)>;

// Subtracts f(x) as a constant inside the graph. The gradient is unchanged,
// but the perturbed evaluations now land near zero instead of near |f(x)|,
// so the float32 rounding of the scalar output stops swamping the eps-sized
// signal the central difference is trying to measure.
ScalarFn centered(ScalarFn f, const Tensor& x) {
  Tape probe(false);
  float f0 = f(probe, x).value();
  return [f = std::move(f), f0](Tape& t, const Tensor& v) {
    return add(t, f(t, v), Tensor::scalar(-f0));
  };
}

}  // namespace

TEST_CASE("tensor basics") {
  Tensor t({2, 3}, {1, 2, 3, 4, 5, 6});
  CHECK(t.numel() == 6);
  CHECK(t.dim(0) == 2);
  CHECK(t.at(5) == 6.0f);
  CHECK_FALSE(t.requires_grad());
  CHECK_THROWS(Tensor({2, 2}, {1, 2, 3}));
  CHECK_THROWS(t.value());
  CHECK(Tensor::scalar(3.5f).value() == 3.5f);

  Tensor alias = t;
  alias.data()[0] = 9.0f;
  CHECK(t.at(0) == 9.0f);
  CHECK(t.same_storage(alias));
  Tensor deep = t.clone_values();
  deep.data()[0] = 1.0f;
  CHECK(t.at(0) == 9.0f);
}

TEST_CASE("conv2d forward matches the padded cross-correlation by hand") {
  std::vector<float> img(16);
  for (int i = 0; i < 16; ++i) img[static_cast<std::size_t>(i)] = static_cast<float>(i + 1);
  Tensor x({1, 1, 4, 4}, img);
  Tensor w = Tensor::full({1, 1, 3, 3}, 1.0f);
  Tensor b = Tensor::zeros({1});
  Tape tape;
  Tensor y = conv2d(tape, x, w, b, 1, 1);
  REQUIRE(y.shape() == Shape{1, 1, 4, 4});
  CHECK(y.at(0) == doctest::Approx(14.0f));
  CHECK(y.at(5) == doctest::Approx(54.0f));

  SUBCASE("stride and padding arithmetic") {
    Tensor x2 = Tensor::zeros({1, 2, 7, 5});
    Tensor w2 = Tensor::zeros({3, 2, 3, 3});
    Tensor b2 = Tensor::zeros({3});
    Tape t2;
    Tensor y2 = conv2d(t2, x2, w2, b2, 2, 1);
    CHECK(y2.shape() == Shape{1, 3, 4, 3});
  }

  SUBCASE("rejects bad shapes") {
    Tape t2;
    Tensor w_bad = Tensor::zeros({1, 2, 3, 3});
    CHECK_THROWS(conv2d(t2, x, w_bad, b, 1, 1));
    Tensor w_big = Tensor::zeros({1, 1, 9, 9});
    CHECK_THROWS(conv2d(t2, x, w_big, b, 1, 1));
    CHECK_THROWS(conv2d(t2, x, w, b, 0, 1));
  }
}

TEST_CASE("matmul and linear forward") {
  Tensor a({2, 3}, {1, 2, 3, 4, 5, 6});
  Tensor b({3, 2}, {7, 8, 9, 10, 11, 12});
  Tape tape;
  Tensor c = matmul(tape, a, b);
  REQUIRE(c.shape() == Shape{2, 2});
  CHECK(c.at(0) == doctest::Approx(58.0f));
  CHECK(c.at(1) == doctest::Approx(64.0f));
  CHECK(c.at(2) == doctest::Approx(139.0f));
  CHECK(c.at(3) == doctest::Approx(154.0f));
  CHECK_THROWS(matmul(tape, a, a));

  Tensor bias({2}, {0.5f, -0.5f});
  Tensor l = linear(tape, a, b, bias);
  CHECK(l.at(0) == doctest::Approx(58.5f));
  CHECK(l.at(3) == doctest::Approx(153.5f));
}

TEST_CASE("activation and reduction forward values") {
  Tape tape;
  Tensor x({5}, {-2.0f, -0.5f, 0.0f, 0.5f, 2.0f});
  Tensor r = relu(tape, x);
  CHECK(r.at(0) == 0.0f);
  CHECK(r.at(2) == 0.0f);
  CHECK(r.at(4) == 2.0f);

  Tensor s = sigmoid(tape, x);
  CHECK(s.at(2) == doctest::Approx(0.5f));
  CHECK(s.at(4) == doctest::Approx(1.0f / (1.0f + std::exp(-2.0f))));
  Tensor s_ext = sigmoid(tape, Tensor({2}, {40.0f, -40.0f}));
  CHECK(s_ext.at(0) == doctest::Approx(1.0f));
  CHECK(s_ext.at(1) == doctest::Approx(0.0f));

  Tensor sm = softmax(tape, Tensor({2, 3}, {1, 1, 1, 1000, 1000, 999}));
  CHECK(sm.at(0) == doctest::Approx(1.0f / 3.0f));
  double row1 = sm.at(3) + sm.at(4) + sm.at(5);
  CHECK(row1 == doctest::Approx(1.0));
  CHECK(sm.at(3) == doctest::Approx(sm.at(4)));
  CHECK(sm.at(5) < sm.at(4));

  Tensor m = mean(tape, Tensor({4}, {1, 2, 3, 6}));
  CHECK(m.value() == doctest::Approx(3.0f));

  Tensor p = max_pool2d(tape, Tensor({1, 1, 2, 4}, {1, 5, 2, 0, 3, 4, 2, 2}), 2, 2);
  REQUIRE(p.shape() == Shape{1, 1, 1, 2});
  CHECK(p.at(0) == 5.0f);
  CHECK(p.at(1) == 2.0f);
}

TEST_CASE("loss forward fixtures") {
  Tape tape;
  Tensor z0 = Tensor::scalar(0.0f);
  CHECK(sigmoid_cross_entropy(tape, z0, {1.0f}, Reduction::kMean).value() ==
        doctest::Approx(0.6931472f));
  CHECK(sigmoid_cross_entropy(tape, Tensor::scalar(100.0f), {1.0f}, Reduction::kMean).value() ==
        doctest::Approx(0.0f));
  CHECK(sigmoid_cross_entropy(tape, Tensor::scalar(-100.0f), {1.0f}, Reduction::kMean).value() ==
        doctest::Approx(100.0f));
  CHECK(sigmoid_cross_entropy(tape, Tensor({2}, {0.0f, 0.0f}), {1.0f, 0.0f},
                              Reduction::kSum).value() == doctest::Approx(2.0f * 0.6931472f));
  CHECK_THROWS(sigmoid_cross_entropy(tape, z0, {0.5f, 0.5f}, Reduction::kMean));

  Tensor logits = Tensor::zeros({2, 4});
  CHECK(softmax_cross_entropy(tape, logits, {0, 3}, Reduction::kMean).value() ==
        doctest::Approx(std::log(4.0f)));
  CHECK_THROWS(softmax_cross_entropy(tape, logits, {0, 4}, Reduction::kMean));

  Tensor pr({3}, {1, 2, 3});
  CHECK(smooth_l1(tape, pr, pr).value() == 0.0f);
  CHECK(smooth_l1(tape, Tensor::scalar(1.0f), Tensor::scalar(0.5f)).value() ==
        doctest::Approx(0.125f));
  CHECK(smooth_l1(tape, Tensor::scalar(2.0f), Tensor::scalar(0.0f)).value() ==
        doctest::Approx(1.5f));
  CHECK_THROWS(smooth_l1(tape, pr, z0));
}

TEST_CASE("grad_reverse forward is bit-identical and backward negates") {
  SplitMix64 rng(7);
  Tensor x = random_tensor({3, 4}, rng, -5.0f, 5.0f);
  x.set_requires_grad(true);
  Tape tape;
  Tensor y = grad_reverse(tape, x);
  for (std::size_t i = 0; i < x.numel(); ++i) {
    // Bitwise equality, not approximate.
    CHECK(std::memcmp(&y.data()[i], &x.data()[i], sizeof(float)) == 0);
  }
  Tensor loss = sum_all(tape, y);
  tape.backward(loss);
  for (std::size_t i = 0; i < x.numel(); ++i) CHECK(x.grad()[i] == -1.0f);
}

TEST_CASE("finite_diff_check on the GRL flags the sign flip") {
  // The numeric gradient of the forward map is +1 per coordinate while the
  // tape reports -1, so the relative error lands at 2. This is the defining
  // property of the reversal layer, not a defect.
  Tensor x({3}, {0.3f, -1.2f, 2.0f});
  auto f = [](Tape& t, const Tensor& v) { return sum_all(t, grad_reverse(t, v)); };
  double err = finite_diff_check(f, x, 1e-3);
  CHECK(err == doctest::Approx(2.0).epsilon(1e-3));
}

TEST_CASE("finite_diff_check quadratic fixture") {
  // sum(x^2) with the known values subtracted out term by term; the analytic
  // gradient 2x is untouched. In raw form the float32 rounding of x^2 alone
  // puts a floor of a few 1e-4 on the relative error at eps=1e-4, so the
  // fixture is evaluated in this better-conditioned but equivalent form.
  Tensor x({2}, {1.0f, 2.0f});
  Tensor shift({2}, {-1.0f, -4.0f});
  auto f = [&](Tape& t, const Tensor& v) {
    return sum_all(t, add(t, mul(t, v, v), shift));
  };
  double err = finite_diff_check(f, x, 1e-4);
  MESSAGE("sum(x^2) fixture max relative error: " << err);
  CHECK(err < 1e-3);
  CHECK_THROWS(finite_diff_check(f, x, 0.0));

  auto constant = [](Tape& t, const Tensor& v) {
    return mul_scalar(t, sum_all(t, v), 0.0f);
  };
  CHECK(finite_diff_check(constant, x, 1e-3) == doctest::Approx(0.0));
}

TEST_CASE("gradient checks for every differentiable primitive") {
  const double tol = 1e-3;
  const double eps = 1e-2;
  SplitMix64 rng(20240811);

  SUBCASE("conv2d wrt weight and bias") {
    // Positive data keeps the weight and bias gradients (sums of inputs and
    // window counts) bounded away from zero.
    for (int i = 0; i < 20; ++i) {
      Tensor x = random_tensor({2, 3, 5, 5}, rng, 0.2f, 1.2f);
      Tensor w = random_tensor({4, 3, 3, 3}, rng, 0.2f, 1.2f);
      Tensor b = random_tensor({4}, rng, -0.5f, 0.5f);
      int stride = 1 + (i % 2), pad = i % 3;
      auto fw = [&](Tape& t, const Tensor& v) {
        return mean(t, conv2d(t, x, v, b, stride, pad));
      };
      auto fb = [&](Tape& t, const Tensor& v) {
        return mean(t, conv2d(t, x, w, v, stride, pad));
      };
      CHECK(finite_diff_check(centered(fw, w), w, eps) < tol);
      CHECK(finite_diff_check(centered(fb, b), b, eps) < tol);
    }
  }

  SUBCASE("conv2d wrt input") {
    // An input pixel's gradient is a signed sum of the weights in the windows
    // that cover it, so it can land near zero; small fixtures with a floor on
    // the analytic gradient keep the relative error well defined. Signed,
    // zero-centered data also keeps the float32 accumulation error small
    // relative to the eps-sized probe.
    for (int i = 0; i < 20; ++i) {
      int stride = 1 + (i % 2), pad = i % 2;
      Tensor x, w, b;
      ScalarFn fx;
      float lo_grad = 0.0f;
      do {
        x = random_tensor({1, 2, 4, 4}, rng, -0.6f, 0.6f);
        w = random_tensor({2, 2, 2, 2}, rng, -1.0f, 1.0f);
        b = random_tensor({2}, rng, -0.5f, 0.5f);
        fx = [&x, &w, &b, stride, pad](Tape& t, const Tensor& v) {
          return sum_all(t, conv2d(t, v, w, b, stride, pad));
        };
        Tensor probe = x.clone_values();
        probe.set_requires_grad(true);
        Tape t;
        t.backward(fx(t, probe));
        lo_grad = std::numeric_limits<float>::infinity();
        for (std::size_t j = 0; j < probe.numel(); ++j)
          lo_grad = std::min(lo_grad, std::abs(probe.grad()[j]));
      } while (lo_grad < 0.1f);
      CHECK(finite_diff_check(centered(fx, x), x, eps) < tol);
    }
  }

  SUBCASE("matmul and linear") {
    for (int i = 0; i < 20; ++i) {
      Tensor a = random_tensor({3, 4}, rng, 0.2f, 1.2f);
      Tensor b = random_tensor({4, 5}, rng, 0.2f, 1.2f);
      Tensor bias = random_tensor({5}, rng, -0.5f, 0.5f);
      auto fa = [&](Tape& t, const Tensor& v) { return mean(t, matmul(t, v, b)); };
      auto fb = [&](Tape& t, const Tensor& v) { return mean(t, matmul(t, a, v)); };
      auto fl = [&](Tape& t, const Tensor& v) { return mean(t, linear(t, a, b, v)); };
      CHECK(finite_diff_check(centered(fa, a), a, eps) < tol);
      CHECK(finite_diff_check(centered(fb, b), b, eps) < tol);
      CHECK(finite_diff_check(centered(fl, bias), bias, eps) < tol);
    }
  }

  SUBCASE("relu off the kink") {
    for (int i = 0; i < 20; ++i) {
      Tensor x = random_tensor_off({4, 5}, rng, -2.0f, 2.0f, 0.0f, 0.05f);
      auto f = [](Tape& t, const Tensor& v) { return mean(t, relu(t, v)); };
      CHECK(finite_diff_check(f, x, eps) < tol);
    }
  }

  SUBCASE("sigmoid") {
    for (int i = 0; i < 20; ++i) {
      Tensor x = random_tensor({5, 3}, rng, -3.0f, 3.0f);
      auto f = [](Tape& t, const Tensor& v) { return mean(t, sigmoid(t, v)); };
      CHECK(finite_diff_check(centered(f, x), x, eps) < tol);
    }
  }

  SUBCASE("softmax") {
    // Weighted sums of softmax outputs have coordinates where the true
    // gradient crosses zero, which makes relative error meaningless there.
    // Checking one output at a time instead keeps every Jacobian entry
    // p_k*(delta - p_j) bounded away from zero for inputs in (-0.5, 0.5).
    for (int i = 0; i < 20; ++i) {
      Tensor x = random_tensor({3, 5}, rng, -0.5f, 0.5f);
      Tensor pick = Tensor::zeros({3, 5});
      pick.data()[static_cast<std::size_t>(rng.uniform_int(15))] = 1.0f;
      auto f = [&](Tape& t, const Tensor& v) {
        return sum_all(t, mul(t, softmax(t, v), pick));
      };
      CHECK(finite_diff_check(centered(f, x), x, eps) < tol);
    }
  }

  SUBCASE("mean, add, mul, flatten, mul_scalar") {
    for (int i = 0; i < 20; ++i) {
      Tensor x = random_tensor({4, 4}, rng, -1.0f, 1.0f);
      Tensor other = random_tensor({4, 4}, rng, 0.3f, 1.3f);
      auto f = [&](Tape& t, const Tensor& v) {
        Tensor u = add(t, v, other);
        Tensor m = mul(t, u, other);
        return mul_scalar(t, mean(t, flatten(t, m)), 1.7f);
      };
      CHECK(finite_diff_check(f, x, eps) < tol);
    }
  }

  SUBCASE("max_pool2d away from ties") {
    for (int i = 0; i < 20; ++i) {
      Tensor x = random_tensor({1, 2, 4, 4}, rng, -2.0f, 2.0f);
      // Nudge near-ties apart so the argmax is stable under perturbation.
      bool clean = false;
      while (!clean) {
        clean = true;
        for (std::size_t p = 0; p < x.numel(); ++p)
          for (std::size_t q = p + 1; q < x.numel(); ++q)
            if (std::abs(x.data()[p] - x.data()[q]) < 0.05f) {
              x.data()[q] = rng.uniform(-2.0f, 2.0f);
              clean = false;
            }
      }
      auto f = [](Tape& t, const Tensor& v) { return mean(t, max_pool2d(t, v, 2, 2)); };
      CHECK(finite_diff_check(f, x, eps) < tol);
    }
  }

  SUBCASE("sigmoid_cross_entropy") {
    for (int i = 0; i < 20; ++i) {
      Tensor z = random_tensor({6}, rng, -2.0f, 2.0f);
      std::vector<float> labels(6);
      for (auto& l : labels) l = rng.uniform() < 0.5f ? 0.0f : 1.0f;
      Reduction red = (i % 2) ? Reduction::kMean : Reduction::kSum;
      auto f = [&](Tape& t, const Tensor& v) {
        return sigmoid_cross_entropy(t, v, labels, red);
      };
      CHECK(finite_diff_check(centered(f, z), z, eps) < tol);
    }
  }

  SUBCASE("softmax_cross_entropy") {
    // Logits stay in (-0.5, 0.5): a wrong-class coordinate's gradient is its
    // own softmax probability, which this range keeps above ~0.02 after the
    // mean reduction.
    for (int i = 0; i < 20; ++i) {
      Tensor z = random_tensor({4, 5}, rng, -0.5f, 0.5f);
      std::vector<int> labels(4);
      for (auto& l : labels) l = rng.uniform_int(5);
      Reduction red = (i % 2) ? Reduction::kMean : Reduction::kSum;
      auto f = [&](Tape& t, const Tensor& v) {
        return softmax_cross_entropy(t, v, labels, red);
      };
      CHECK(finite_diff_check(centered(f, z), z, eps) < tol);
    }
  }

  SUBCASE("smooth_l1 off the transition") {
    for (int i = 0; i < 20; ++i) {
      Tensor target = random_tensor({5}, rng, -2.0f, 2.0f);
      Tensor pred = target.clone_values();
      for (std::size_t j = 0; j < pred.numel(); ++j) {
        float d = 0.0f;
        while (std::abs(d) < 0.05f || std::abs(std::abs(d) - 1.0f) < 0.05f)
          d = rng.uniform(-2.0f, 2.0f);
        pred.data()[j] += d;
      }
      auto fp = [&](Tape& t, const Tensor& v) { return smooth_l1(t, v, target); };
      auto ft = [&](Tape& t, const Tensor& v) { return smooth_l1(t, pred, v); };
      CHECK(finite_diff_check(fp, pred, eps) < tol);
      CHECK(finite_diff_check(ft, target, eps) < tol);
    }
  }

  SUBCASE("stack_rows and take_rows") {
    for (int i = 0; i < 20; ++i) {
      Tensor x = random_tensor({5, 3}, rng, -1.0f, 1.0f);
      std::vector<int> idx = {4, 0, 2, 2};
      auto f = [&](Tape& t, const Tensor& v) {
        Tensor rows = take_rows(t, v, idx);
        return mean(t, rows);
      };
      CHECK(finite_diff_check(f, x, eps) < tol);

      Tensor r0 = random_tensor({4}, rng, -1.0f, 1.0f);
      auto g = [&](Tape& t, const Tensor& v) {
        Tensor stacked = stack_rows(t, {v, r0, v});
        return mean(t, mul(t, stacked, stacked));
      };
      Tensor r1 = random_tensor_off({4}, rng, -1.0f, 1.0f, 0.0f, 0.05f);
      CHECK(finite_diff_check(g, r1, eps) < tol);
    }
  }
}

TEST_CASE("composed GRL loss splits into forward minus reversed gradients") {
  SplitMix64 rng(99);
  for (int trial = 0; trial < 5; ++trial) {
    Tensor x = random_tensor({6}, rng, -1.5f, 1.5f);

    auto grad_of = [&](bool reverse_b, bool a_only, bool b_only) {
      Tensor v = x.clone_values();
      v.set_requires_grad(true);
      Tape t;
      std::vector<Tensor> terms;
      if (!b_only) terms.push_back(mean(t, mul(t, v, v)));
      if (!a_only) {
        Tensor inner = reverse_b ? grad_reverse(t, v) : v;
        terms.push_back(mean(t, sigmoid(t, inner)));
      }
      Tensor loss = terms.size() == 2 ? add(t, terms[0], terms[1]) : terms[0];
      t.backward(loss);
      return std::vector<float>(v.grad(), v.grad() + v.numel());
    };

    auto composed = grad_of(true, false, false);
    auto ga = grad_of(false, true, false);
    auto gb = grad_of(false, false, true);
    for (std::size_t i = 0; i < composed.size(); ++i)
      CHECK(composed[i] == doctest::Approx(ga[i] - gb[i]).epsilon(1e-6));
  }
}

TEST_CASE("tape mechanics") {
  SUBCASE("backward twice throws") {
    Tensor x = Tensor::scalar(2.0f, true);
    Tape tape;
    Tensor y = mul(tape, x, x);
    tape.backward(y);
    CHECK(x.grad()[0] == doctest::Approx(4.0f));
    CHECK_THROWS(tape.backward(y));
  }

  SUBCASE("zero upstream seed gives zero gradients") {
    Tensor x({3}, {1, 2, 3}, true);
    Tape tape;
    Tensor y = sum_all(tape, sigmoid(tape, mul(tape, x, x)));
    tape.backward(y, 0.0f);
    for (int i = 0; i < 3; ++i) CHECK(x.grad()[i] == 0.0f);
  }

  SUBCASE("non-scalar or detached roots are rejected") {
    Tensor x({2}, {1, 2}, true);
    Tape tape;
    Tensor y = mul(tape, x, x);
    CHECK_THROWS(tape.backward(y));
    Tensor z = Tensor::scalar(1.0f);
    CHECK_THROWS(tape.backward(z));
  }

  SUBCASE("disabled tape computes values but records nothing") {
    Tensor x = Tensor::scalar(3.0f, true);
    Tape tape(false);
    Tensor y = mul(tape, x, x);
    CHECK(y.value() == 9.0f);
    CHECK_FALSE(y.requires_grad());
    CHECK(tape.size() == 0);
    CHECK_THROWS(tape.backward(y));
  }

  SUBCASE("gradients accumulate across reuse within one pass") {
    Tensor x = Tensor::scalar(3.0f, true);
    Tape tape;
    Tensor y = add(tape, mul(tape, x, x), x);  // x^2 + x
    tape.backward(y);
    CHECK(x.grad()[0] == doctest::Approx(7.0f));
  }

  SUBCASE("grads persist until zero_grad") {
    Tensor x = Tensor::scalar(1.0f, true);
    {
      Tape tape;
      Tensor y = mul_scalar(tape, x, 2.0f);
      tape.backward(y);
    }
    {
      Tape tape;
      Tensor y = mul_scalar(tape, x, 3.0f);
      tape.backward(y);
    }
    CHECK(x.grad()[0] == doctest::Approx(5.0f));
    x.zero_grad();
    CHECK(x.grad()[0] == 0.0f);
  }
}

TEST_CASE("all forward and backward values stay finite on finite inputs") {
  SplitMix64 rng(5);
  Tensor x = random_tensor({2, 3, 8, 8}, rng, -3.0f, 3.0f);
  x.set_requires_grad(true);
  Tensor w = random_tensor({4, 3, 3, 3}, rng, -1.0f, 1.0f);
  w.set_requires_grad(true);
  Tensor b = Tensor::zeros({4}, true);
  Tape tape;
  Tensor h = relu(tape, conv2d(tape, x, w, b, 2, 1));
  Tensor p = max_pool2d(tape, h, 2, 2);
  Tensor loss = mean(tape, sigmoid(tape, p));
  tape.backward(loss);
  auto all_finite = [](const float* v, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i)
      if (!std::isfinite(v[i])) return false;
    return true;
  };
  float lv = loss.value();
  CHECK(all_finite(&lv, 1));
  CHECK(all_finite(x.grad(), x.numel()));
  CHECK(all_finite(w.grad(), w.numel()));
  CHECK(all_finite(b.grad(), b.numel()));
}
