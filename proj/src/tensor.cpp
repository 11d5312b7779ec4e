#include "dadet/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace dadet {

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (int d : shape) {
    if (d < 0) throw std::invalid_argument("negative dimension in shape " + shape_str(shape));
    n *= static_cast<std::size_t>(d);
  }
  return n;
}

std::string shape_str(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

Tensor::Tensor(Shape shape, std::vector<float> values, bool requires_grad) {
  std::size_t n = shape_numel(shape);
  if (values.size() != n)
    throw std::invalid_argument("tensor data size " + std::to_string(values.size()) +
                                " does not match shape " + shape_str(shape));
  impl_ = std::make_shared<detail::TensorImpl>();
  impl_->shape = std::move(shape);
  impl_->data = std::move(values);
  if (requires_grad) set_requires_grad(true);
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  std::size_t n = shape_numel(shape);
  return Tensor(std::move(shape), std::vector<float>(n, 0.0f), requires_grad);
}

Tensor Tensor::full(Shape shape, float value, bool requires_grad) {
  std::size_t n = shape_numel(shape);
  return Tensor(std::move(shape), std::vector<float>(n, value), requires_grad);
}

Tensor Tensor::scalar(float value, bool requires_grad) {
  return Tensor(Shape{1}, std::vector<float>{value}, requires_grad);
}

void Tensor::require_defined() const {
  if (!impl_) throw std::runtime_error("use of an undefined tensor");
}

const Shape& Tensor::shape() const {
  require_defined();
  return impl_->shape;
}

int Tensor::dim(int i) const {
  require_defined();
  if (i < 0 || i >= static_cast<int>(impl_->shape.size()))
    throw std::invalid_argument("dim index " + std::to_string(i) + " out of range for " +
                                shape_str(impl_->shape));
  return impl_->shape[static_cast<std::size_t>(i)];
}

int Tensor::ndim() const {
  require_defined();
  return static_cast<int>(impl_->shape.size());
}

std::size_t Tensor::numel() const {
  require_defined();
  return impl_->data.size();
}

float* Tensor::data() {
  require_defined();
  return impl_->data.data();
}

const float* Tensor::data() const {
  require_defined();
  return impl_->data.data();
}

float* Tensor::grad() {
  require_defined();
  if (!impl_->requires_grad) throw std::runtime_error("tensor does not require grad");
  return impl_->grad.data();
}

const float* Tensor::grad() const {
  require_defined();
  if (!impl_->requires_grad) throw std::runtime_error("tensor does not require grad");
  return impl_->grad.data();
}

bool Tensor::requires_grad() const {
  require_defined();
  return impl_->requires_grad;
}

void Tensor::set_requires_grad(bool value) {
  require_defined();
  impl_->requires_grad = value;
  if (value) {
    impl_->grad.assign(impl_->data.size(), 0.0f);
  } else {
    impl_->grad.clear();
  }
}

void Tensor::zero_grad() {
  require_defined();
  std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0f);
}

float Tensor::value() const {
  require_defined();
  if (impl_->data.size() != 1)
    throw std::runtime_error("value() on non-scalar tensor " + shape_str(impl_->shape));
  return impl_->data[0];
}

float Tensor::at(std::size_t i) const {
  require_defined();
  if (i >= impl_->data.size()) throw std::invalid_argument("index out of range");
  return impl_->data[i];
}

float Tensor::grad_at(std::size_t i) const {
  require_defined();
  if (!impl_->requires_grad || i >= impl_->grad.size())
    throw std::invalid_argument("grad index out of range");
  return impl_->grad[i];
}

Tensor Tensor::clone_values() const {
  require_defined();
  return Tensor(impl_->shape, impl_->data, false);
}

void Tape::record(std::function<void()> rule) {
  if (!enabled_) return;
  rules_.push_back(std::move(rule));
}

void Tape::backward(const Tensor& root, float seed) {
  if (!enabled_) throw std::runtime_error("backward on a disabled tape");
  if (backward_ran_) throw std::runtime_error("backward already ran on this tape");
  if (!root.defined() || root.numel() != 1)
    throw std::invalid_argument("backward root must be a defined scalar");
  if (!root.requires_grad())
    throw std::invalid_argument("backward root does not require grad");
  backward_ran_ = true;
  Tensor r = root;
  r.grad()[0] = seed;
  for (auto it = rules_.rbegin(); it != rules_.rend(); ++it) (*it)();
}

namespace {

bool wants_grad(Tape& tape, std::initializer_list<const Tensor*> inputs) {
  if (!tape.enabled()) return false;
  for (const Tensor* t : inputs)
    if (t->defined() && t->requires_grad()) return true;
  return false;
}

Tensor make_output(Shape shape, std::vector<float> data, bool requires_grad) {
  return Tensor(std::move(shape), std::move(data), requires_grad);
}

float stable_sigmoid(float x) {
  if (x >= 0.0f) {
    return 1.0f / (1.0f + std::exp(-x));
  }
  float e = std::exp(x);
  return e / (1.0f + e);
}

}  // namespace

Tensor grad_reverse(Tape& tape, const Tensor& x) {
  bool rg = wants_grad(tape, {&x});
  std::vector<float> out(x.data(), x.data() + x.numel());
  Tensor y = make_output(x.shape(), std::move(out), rg);
  if (rg) {
    Tensor xi = x, yo = y;
    tape.record([xi, yo]() mutable {
      if (!xi.requires_grad()) return;
      const float* g = yo.grad();
      float* gx = xi.grad();
      for (std::size_t i = 0; i < xi.numel(); ++i) gx[i] -= g[i];
    });
  }
  return y;
}

namespace {

struct ConvDims {
  int n, c, h, w, f, kh, kw, oh, ow, k, m;
};

ConvDims conv_dims(const Tensor& x, const Tensor& w, const Tensor& b, int stride, int pad) {
  if (x.ndim() != 4) throw std::invalid_argument("conv2d input must be 4-D, got " + shape_str(x.shape()));
  if (w.ndim() != 4) throw std::invalid_argument("conv2d weight must be 4-D, got " + shape_str(w.shape()));
  if (b.ndim() != 1 || b.dim(0) != w.dim(0))
    throw std::invalid_argument("conv2d bias must be [F], got " + shape_str(b.shape()));
  if (w.dim(1) != x.dim(1))
    throw std::invalid_argument("conv2d channel mismatch: input " + shape_str(x.shape()) +
                                " weight " + shape_str(w.shape()));
  if (stride < 1) throw std::invalid_argument("conv2d stride must be >= 1");
  if (pad < 0) throw std::invalid_argument("conv2d pad must be >= 0");
  ConvDims d{};
  d.n = x.dim(0);
  d.c = x.dim(1);
  d.h = x.dim(2);
  d.w = x.dim(3);
  d.f = w.dim(0);
  d.kh = w.dim(2);
  d.kw = w.dim(3);
  if (d.h + 2 * pad < d.kh || d.w + 2 * pad < d.kw)
    throw std::invalid_argument("conv2d kernel exceeds padded input");
  d.oh = (d.h + 2 * pad - d.kh) / stride + 1;
  d.ow = (d.w + 2 * pad - d.kw) / stride + 1;
  d.k = d.c * d.kh * d.kw;
  d.m = d.oh * d.ow;
  return d;
}

// Unfolds one image into a [K, M] patch matrix. Out-of-bounds taps are zero.
void im2col(const float* img, const ConvDims& d, int stride, int pad, float* cols) {
  for (int c = 0; c < d.c; ++c) {
    for (int ky = 0; ky < d.kh; ++ky) {
      for (int kx = 0; kx < d.kw; ++kx) {
        float* row = cols + (static_cast<std::size_t>(c) * d.kh * d.kw +
                             static_cast<std::size_t>(ky) * d.kw + kx) *
                                d.m;
        for (int oy = 0; oy < d.oh; ++oy) {
          int iy = oy * stride + ky - pad;
          for (int ox = 0; ox < d.ow; ++ox) {
            int ix = ox * stride + kx - pad;
            float v = 0.0f;
            if (iy >= 0 && iy < d.h && ix >= 0 && ix < d.w)
              v = img[(static_cast<std::size_t>(c) * d.h + iy) * d.w + ix];
            row[oy * d.ow + ox] = v;
          }
        }
      }
    }
  }
}

void col2im_add(const float* cols, const ConvDims& d, int stride, int pad, float* img) {
  for (int c = 0; c < d.c; ++c) {
    for (int ky = 0; ky < d.kh; ++ky) {
      for (int kx = 0; kx < d.kw; ++kx) {
        const float* row = cols + (static_cast<std::size_t>(c) * d.kh * d.kw +
                                   static_cast<std::size_t>(ky) * d.kw + kx) *
                                      d.m;
        for (int oy = 0; oy < d.oh; ++oy) {
          int iy = oy * stride + ky - pad;
          if (iy < 0 || iy >= d.h) continue;
          for (int ox = 0; ox < d.ow; ++ox) {
            int ix = ox * stride + kx - pad;
            if (ix < 0 || ix >= d.w) continue;
            img[(static_cast<std::size_t>(c) * d.h + iy) * d.w + ix] += row[oy * d.ow + ox];
          }
        }
      }
    }
  }
}

}  // namespace

Tensor conv2d(Tape& tape, const Tensor& x, const Tensor& w, const Tensor& b,
              int stride, int pad) {
  ConvDims d = conv_dims(x, w, b, stride, pad);
  bool rg = wants_grad(tape, {&x, &w, &b});

  std::size_t plane = static_cast<std::size_t>(d.k) * d.m;
  // Patch matrices are kept for the backward pass; at this model's sizes they
  // are a few hundred KB at most.
  auto cols_all = std::make_shared<std::vector<float>>(static_cast<std::size_t>(d.n) * plane);
  std::vector<float> out(static_cast<std::size_t>(d.n) * d.f * d.m, 0.0f);

  const float* wp = w.data();
  const float* bp = b.data();
  for (int n = 0; n < d.n; ++n) {
    float* cols = cols_all->data() + static_cast<std::size_t>(n) * plane;
    im2col(x.data() + static_cast<std::size_t>(n) * d.c * d.h * d.w, d, stride, pad, cols);
    float* on = out.data() + static_cast<std::size_t>(n) * d.f * d.m;
    for (int f = 0; f < d.f; ++f) {
      float* orow = on + static_cast<std::size_t>(f) * d.m;
      std::fill(orow, orow + d.m, bp[f]);
      const float* wrow = wp + static_cast<std::size_t>(f) * d.k;
      for (int k = 0; k < d.k; ++k) {
        float a = wrow[k];
        if (a == 0.0f) continue;
        const float* crow = cols + static_cast<std::size_t>(k) * d.m;
        for (int m = 0; m < d.m; ++m) orow[m] += a * crow[m];
      }
    }
  }

  Tensor y = make_output({d.n, d.f, d.oh, d.ow}, std::move(out), rg);
  if (rg) {
    Tensor xi = x, wi = w, bi = b, yo = y;
    tape.record([xi, wi, bi, yo, cols_all, d, stride, pad]() mutable {
      std::size_t plane = static_cast<std::size_t>(d.k) * d.m;
      std::vector<float> gcols;
      if (xi.requires_grad()) gcols.resize(plane);
      for (int n = 0; n < d.n; ++n) {
        const float* g = yo.grad() + static_cast<std::size_t>(n) * d.f * d.m;
        const float* cols = cols_all->data() + static_cast<std::size_t>(n) * plane;
        if (bi.requires_grad()) {
          float* gb = bi.grad();
          for (int f = 0; f < d.f; ++f) {
            double s = 0.0;
            const float* grow = g + static_cast<std::size_t>(f) * d.m;
            for (int m = 0; m < d.m; ++m) s += grow[m];
            gb[f] += static_cast<float>(s);
          }
        }
        if (wi.requires_grad()) {
          float* gw = wi.grad();
          for (int f = 0; f < d.f; ++f) {
            const float* grow = g + static_cast<std::size_t>(f) * d.m;
            float* gwrow = gw + static_cast<std::size_t>(f) * d.k;
            for (int k = 0; k < d.k; ++k) {
              const float* crow = cols + static_cast<std::size_t>(k) * d.m;
              float s = 0.0f;
              for (int m = 0; m < d.m; ++m) s += grow[m] * crow[m];
              gwrow[k] += s;
            }
          }
        }
        if (xi.requires_grad()) {
          std::fill(gcols.begin(), gcols.end(), 0.0f);
          const float* wp = wi.data();
          for (int f = 0; f < d.f; ++f) {
            const float* grow = g + static_cast<std::size_t>(f) * d.m;
            const float* wrow = wp + static_cast<std::size_t>(f) * d.k;
            for (int k = 0; k < d.k; ++k) {
              float a = wrow[k];
              if (a == 0.0f) continue;
              float* gcrow = gcols.data() + static_cast<std::size_t>(k) * d.m;
              for (int m = 0; m < d.m; ++m) gcrow[m] += a * grow[m];
            }
          }
          col2im_add(gcols.data(), d, stride, pad,
                     xi.grad() + static_cast<std::size_t>(n) * d.c * d.h * d.w);
        }
      }
    });
  }
  return y;
}

Tensor matmul(Tape& tape, const Tensor& a, const Tensor& b) {
  if (a.ndim() != 2 || b.ndim() != 2 || a.dim(1) != b.dim(0))
    throw std::invalid_argument("matmul shape mismatch: " + shape_str(a.shape()) + " x " +
                                shape_str(b.shape()));
  int n = a.dim(0), k = a.dim(1), m = b.dim(1);
  bool rg = wants_grad(tape, {&a, &b});
  std::vector<float> out(static_cast<std::size_t>(n) * m, 0.0f);
  const float* ap = a.data();
  const float* bp = b.data();
  for (int i = 0; i < n; ++i) {
    float* orow = out.data() + static_cast<std::size_t>(i) * m;
    const float* arow = ap + static_cast<std::size_t>(i) * k;
    for (int j = 0; j < k; ++j) {
      float v = arow[j];
      if (v == 0.0f) continue;
      const float* brow = bp + static_cast<std::size_t>(j) * m;
      for (int c = 0; c < m; ++c) orow[c] += v * brow[c];
    }
  }
  Tensor y = make_output({n, m}, std::move(out), rg);
  if (rg) {
    Tensor ai = a, bi = b, yo = y;
    tape.record([ai, bi, yo, n, k, m]() mutable {
      const float* g = yo.grad();
      if (ai.requires_grad()) {
        float* ga = ai.grad();
        const float* bp = bi.data();
        for (int i = 0; i < n; ++i) {
          const float* grow = g + static_cast<std::size_t>(i) * m;
          float* garow = ga + static_cast<std::size_t>(i) * k;
          for (int j = 0; j < k; ++j) {
            const float* brow = bp + static_cast<std::size_t>(j) * m;
            float s = 0.0f;
            for (int c = 0; c < m; ++c) s += grow[c] * brow[c];
            garow[j] += s;
          }
        }
      }
      if (bi.requires_grad()) {
        float* gb = bi.grad();
        const float* ap = ai.data();
        for (int i = 0; i < n; ++i) {
          const float* grow = g + static_cast<std::size_t>(i) * m;
          const float* arow = ap + static_cast<std::size_t>(i) * k;
          for (int j = 0; j < k; ++j) {
            float v = arow[j];
            if (v == 0.0f) continue;
            float* gbrow = gb + static_cast<std::size_t>(j) * m;
            for (int c = 0; c < m; ++c) gbrow[c] += v * grow[c];
          }
        }
      }
    });
  }
  return y;
}

Tensor linear(Tape& tape, const Tensor& x, const Tensor& w, const Tensor& b) {
  if (x.ndim() != 2 || w.ndim() != 2 || b.ndim() != 1 || x.dim(1) != w.dim(0) ||
      b.dim(0) != w.dim(1))
    throw std::invalid_argument("linear shape mismatch: x " + shape_str(x.shape()) + " w " +
                                shape_str(w.shape()) + " b " + shape_str(b.shape()));
  Tensor y = matmul(tape, x, w);
  int n = y.dim(0), m = y.dim(1);
  bool rg = wants_grad(tape, {&y, &b});
  std::vector<float> out(y.data(), y.data() + y.numel());
  const float* bp = b.data();
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < m; ++j) out[static_cast<std::size_t>(i) * m + j] += bp[j];
  Tensor z = make_output({n, m}, std::move(out), rg);
  if (rg) {
    Tensor yi = y, bi = b, zo = z;
    tape.record([yi, bi, zo, n, m]() mutable {
      const float* g = zo.grad();
      if (yi.requires_grad()) {
        float* gy = yi.grad();
        for (std::size_t i = 0; i < zo.numel(); ++i) gy[i] += g[i];
      }
      if (bi.requires_grad()) {
        float* gb = bi.grad();
        for (int j = 0; j < m; ++j) {
          double s = 0.0;
          for (int i = 0; i < n; ++i) s += g[static_cast<std::size_t>(i) * m + j];
          gb[j] += static_cast<float>(s);
        }
      }
    });
  }
  return z;
}

Tensor add(Tape& tape, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape())
    throw std::invalid_argument("add shape mismatch: " + shape_str(a.shape()) + " vs " +
                                shape_str(b.shape()));
  bool rg = wants_grad(tape, {&a, &b});
  std::vector<float> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
  Tensor y = make_output(a.shape(), std::move(out), rg);
  if (rg) {
    Tensor ai = a, bi = b, yo = y;
    tape.record([ai, bi, yo]() mutable {
      const float* g = yo.grad();
      if (ai.requires_grad()) {
        float* ga = ai.grad();
        for (std::size_t i = 0; i < yo.numel(); ++i) ga[i] += g[i];
      }
      if (bi.requires_grad()) {
        float* gb = bi.grad();
        for (std::size_t i = 0; i < yo.numel(); ++i) gb[i] += g[i];
      }
    });
  }
  return y;
}

Tensor mul(Tape& tape, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape())
    throw std::invalid_argument("mul shape mismatch: " + shape_str(a.shape()) + " vs " +
                                shape_str(b.shape()));
  bool rg = wants_grad(tape, {&a, &b});
  std::vector<float> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
  Tensor y = make_output(a.shape(), std::move(out), rg);
  if (rg) {
    Tensor ai = a, bi = b, yo = y;
    tape.record([ai, bi, yo]() mutable {
      const float* g = yo.grad();
      // a and b may alias; read both values before writing either gradient.
      for (std::size_t i = 0; i < yo.numel(); ++i) {
        float av = ai.data()[i], bv = bi.data()[i];
        if (ai.requires_grad()) ai.grad()[i] += bv * g[i];
        if (bi.requires_grad()) bi.grad()[i] += av * g[i];
      }
    });
  }
  return y;
}

Tensor mul_scalar(Tape& tape, const Tensor& a, float s) {
  bool rg = wants_grad(tape, {&a});
  std::vector<float> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * s;
  Tensor y = make_output(a.shape(), std::move(out), rg);
  if (rg) {
    Tensor ai = a, yo = y;
    tape.record([ai, yo, s]() mutable {
      if (!ai.requires_grad()) return;
      const float* g = yo.grad();
      float* ga = ai.grad();
      for (std::size_t i = 0; i < yo.numel(); ++i) ga[i] += s * g[i];
    });
  }
  return y;
}

Tensor relu(Tape& tape, const Tensor& x) {
  bool rg = wants_grad(tape, {&x});
  std::vector<float> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.data()[i] > 0.0f ? x.data()[i] : 0.0f;
  Tensor y = make_output(x.shape(), std::move(out), rg);
  if (rg) {
    Tensor xi = x, yo = y;
    tape.record([xi, yo]() mutable {
      if (!xi.requires_grad()) return;
      const float* g = yo.grad();
      float* gx = xi.grad();
      const float* xv = xi.data();
      for (std::size_t i = 0; i < yo.numel(); ++i)
        if (xv[i] > 0.0f) gx[i] += g[i];
    });
  }
  return y;
}

Tensor sigmoid(Tape& tape, const Tensor& x) {
  bool rg = wants_grad(tape, {&x});
  std::vector<float> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = stable_sigmoid(x.data()[i]);
  Tensor y = make_output(x.shape(), std::move(out), rg);
  if (rg) {
    Tensor xi = x, yo = y;
    tape.record([xi, yo]() mutable {
      if (!xi.requires_grad()) return;
      const float* g = yo.grad();
      const float* s = yo.data();
      float* gx = xi.grad();
      for (std::size_t i = 0; i < yo.numel(); ++i) gx[i] += s[i] * (1.0f - s[i]) * g[i];
    });
  }
  return y;
}

Tensor softmax(Tape& tape, const Tensor& x) {
  if (x.ndim() < 1 || x.ndim() > 2)
    throw std::invalid_argument("softmax expects a 1-D or 2-D tensor, got " + shape_str(x.shape()));
  int rows = x.ndim() == 2 ? x.dim(0) : 1;
  int cols = x.ndim() == 2 ? x.dim(1) : x.dim(0);
  if (cols == 0) throw std::invalid_argument("softmax over empty axis");
  bool rg = wants_grad(tape, {&x});
  std::vector<float> out(x.numel());
  for (int r = 0; r < rows; ++r) {
    const float* row = x.data() + static_cast<std::size_t>(r) * cols;
    float* orow = out.data() + static_cast<std::size_t>(r) * cols;
    float mx = row[0];
    for (int c = 1; c < cols; ++c) mx = std::max(mx, row[c]);
    double sum = 0.0;
    for (int c = 0; c < cols; ++c) {
      float e = std::exp(row[c] - mx);
      orow[c] = e;
      sum += e;
    }
    float inv = static_cast<float>(1.0 / sum);
    for (int c = 0; c < cols; ++c) orow[c] *= inv;
  }
  Tensor y = make_output(x.shape(), std::move(out), rg);
  if (rg) {
    Tensor xi = x, yo = y;
    tape.record([xi, yo, rows, cols]() mutable {
      if (!xi.requires_grad()) return;
      const float* g = yo.grad();
      const float* p = yo.data();
      float* gx = xi.grad();
      for (int r = 0; r < rows; ++r) {
        const float* grow = g + static_cast<std::size_t>(r) * cols;
        const float* prow = p + static_cast<std::size_t>(r) * cols;
        float* gxrow = gx + static_cast<std::size_t>(r) * cols;
        double dot = 0.0;
        for (int c = 0; c < cols; ++c) dot += static_cast<double>(grow[c]) * prow[c];
        for (int c = 0; c < cols; ++c)
          gxrow[c] += prow[c] * (grow[c] - static_cast<float>(dot));
      }
    });
  }
  return y;
}

Tensor mean(Tape& tape, const Tensor& x) {
  if (x.numel() == 0) throw std::invalid_argument("mean of an empty tensor");
  bool rg = wants_grad(tape, {&x});
  double sum = 0.0;
  for (std::size_t i = 0; i < x.numel(); ++i) sum += x.data()[i];
  Tensor y = make_output({1}, {static_cast<float>(sum / static_cast<double>(x.numel()))}, rg);
  if (rg) {
    Tensor xi = x, yo = y;
    tape.record([xi, yo]() mutable {
      if (!xi.requires_grad()) return;
      float scale = yo.grad()[0] / static_cast<float>(xi.numel());
      float* gx = xi.grad();
      for (std::size_t i = 0; i < xi.numel(); ++i) gx[i] += scale;
    });
  }
  return y;
}

Tensor max_pool2d(Tape& tape, const Tensor& x, int k, int stride) {
  if (x.ndim() != 4)
    throw std::invalid_argument("max_pool2d input must be 4-D, got " + shape_str(x.shape()));
  if (k < 1 || stride < 1) throw std::invalid_argument("max_pool2d window and stride must be >= 1");
  int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (h < k || w < k) throw std::invalid_argument("max_pool2d window exceeds input");
  int oh = (h - k) / stride + 1;
  int ow = (w - k) / stride + 1;
  bool rg = wants_grad(tape, {&x});
  std::vector<float> out(static_cast<std::size_t>(n) * c * oh * ow);
  auto argmax = std::make_shared<std::vector<std::size_t>>(out.size());
  const float* xp = x.data();
  std::size_t oi = 0;
  for (int ni = 0; ni < n; ++ni) {
    for (int ci = 0; ci < c; ++ci) {
      const float* plane = xp + (static_cast<std::size_t>(ni) * c + ci) * h * w;
      std::size_t base = (static_cast<std::size_t>(ni) * c + ci) * h * w;
      for (int oy = 0; oy < oh; ++oy) {
        for (int ox = 0; ox < ow; ++ox, ++oi) {
          int iy0 = oy * stride, ix0 = ox * stride;
          float best = plane[static_cast<std::size_t>(iy0) * w + ix0];
          std::size_t besti = base + static_cast<std::size_t>(iy0) * w + ix0;
          for (int dy = 0; dy < k; ++dy) {
            for (int dx = 0; dx < k; ++dx) {
              std::size_t idx = static_cast<std::size_t>(iy0 + dy) * w + (ix0 + dx);
              if (plane[idx] > best) {
                best = plane[idx];
                besti = base + idx;
              }
            }
          }
          out[oi] = best;
          (*argmax)[oi] = besti;
        }
      }
    }
  }
  Tensor y = make_output({n, c, oh, ow}, std::move(out), rg);
  if (rg) {
    Tensor xi = x, yo = y;
    tape.record([xi, yo, argmax]() mutable {
      if (!xi.requires_grad()) return;
      const float* g = yo.grad();
      float* gx = xi.grad();
      for (std::size_t i = 0; i < yo.numel(); ++i) gx[(*argmax)[i]] += g[i];
    });
  }
  return y;
}

Tensor flatten(Tape& tape, const Tensor& x) {
  bool rg = wants_grad(tape, {&x});
  std::vector<float> out(x.data(), x.data() + x.numel());
  Tensor y = make_output({static_cast<int>(x.numel())}, std::move(out), rg);
  if (rg) {
    Tensor xi = x, yo = y;
    tape.record([xi, yo]() mutable {
      if (!xi.requires_grad()) return;
      const float* g = yo.grad();
      float* gx = xi.grad();
      for (std::size_t i = 0; i < yo.numel(); ++i) gx[i] += g[i];
    });
  }
  return y;
}

Tensor reshape(Tape& tape, const Tensor& x, Shape new_shape) {
  if (shape_numel(new_shape) != x.numel()) {
    throw std::invalid_argument("reshape cannot change the element count: " +
                                shape_str(x.shape()) + " -> " + shape_str(new_shape));
  }
  bool rg = wants_grad(tape, {&x});
  std::vector<float> out(x.data(), x.data() + x.numel());
  Tensor y = make_output(std::move(new_shape), std::move(out), rg);
  if (rg) {
    Tensor xi = x, yo = y;
    tape.record([xi, yo]() mutable {
      if (!xi.requires_grad()) return;
      const float* g = yo.grad();
      float* gx = xi.grad();
      for (std::size_t i = 0; i < yo.numel(); ++i) gx[i] += g[i];
    });
  }
  return y;
}

Tensor stack_rows(Tape& tape, const std::vector<Tensor>& rows) {
  if (rows.empty()) throw std::invalid_argument("stack_rows of an empty list");
  int d = static_cast<int>(rows[0].numel());
  bool rg = false;
  for (const Tensor& r : rows) {
    if (r.ndim() != 1 || static_cast<int>(r.numel()) != d)
      throw std::invalid_argument("stack_rows expects equal-length 1-D tensors");
    if (tape.enabled() && r.requires_grad()) rg = true;
  }
  int n = static_cast<int>(rows.size());
  std::vector<float> out(static_cast<std::size_t>(n) * d);
  for (int i = 0; i < n; ++i)
    std::copy(rows[static_cast<std::size_t>(i)].data(),
              rows[static_cast<std::size_t>(i)].data() + d,
              out.begin() + static_cast<std::size_t>(i) * d);
  Tensor y = make_output({n, d}, std::move(out), rg);
  if (rg) {
    std::vector<Tensor> ri = rows;
    Tensor yo = y;
    tape.record([ri, yo, d]() mutable {
      const float* g = yo.grad();
      for (std::size_t i = 0; i < ri.size(); ++i) {
        if (!ri[i].requires_grad()) continue;
        float* gr = ri[i].grad();
        const float* grow = g + i * static_cast<std::size_t>(d);
        for (int j = 0; j < d; ++j) gr[j] += grow[j];
      }
    });
  }
  return y;
}

Tensor take_rows(Tape& tape, const Tensor& x, const std::vector<int>& idx) {
  if (x.ndim() != 2)
    throw std::invalid_argument("take_rows input must be 2-D, got " + shape_str(x.shape()));
  int n = x.dim(0), d = x.dim(1);
  for (int i : idx)
    if (i < 0 || i >= n) throw std::invalid_argument("take_rows index out of range");
  bool rg = wants_grad(tape, {&x});
  std::vector<float> out(idx.size() * static_cast<std::size_t>(d));
  for (std::size_t r = 0; r < idx.size(); ++r)
    std::copy(x.data() + static_cast<std::size_t>(idx[r]) * d,
              x.data() + static_cast<std::size_t>(idx[r]) * d + d,
              out.begin() + r * static_cast<std::size_t>(d));
  Tensor y = make_output({static_cast<int>(idx.size()), d}, std::move(out), rg);
  if (rg) {
    Tensor xi = x, yo = y;
    std::vector<int> ii = idx;
    tape.record([xi, yo, ii, d]() mutable {
      if (!xi.requires_grad()) return;
      const float* g = yo.grad();
      float* gx = xi.grad();
      for (std::size_t r = 0; r < ii.size(); ++r) {
        float* gxrow = gx + static_cast<std::size_t>(ii[r]) * d;
        const float* grow = g + r * static_cast<std::size_t>(d);
        for (int j = 0; j < d; ++j) gxrow[j] += grow[j];
      }
    });
  }
  return y;
}

Tensor gather(Tape& tape, const Tensor& x, const std::vector<int>& idx, Shape out_shape) {
  if (shape_numel(out_shape) != idx.size())
    throw std::invalid_argument("gather output shape " + shape_str(out_shape) +
                                " does not hold " + std::to_string(idx.size()) + " indices");
  for (int i : idx)
    if (i < 0 || static_cast<std::size_t>(i) >= x.numel())
      throw std::invalid_argument("gather index out of range");
  bool rg = wants_grad(tape, {&x});
  std::vector<float> out(idx.size());
  for (std::size_t j = 0; j < idx.size(); ++j) out[j] = x.data()[static_cast<std::size_t>(idx[j])];
  Tensor y = make_output(std::move(out_shape), std::move(out), rg);
  if (rg) {
    Tensor xi = x, yo = y;
    std::vector<int> ii = idx;
    tape.record([xi, yo, ii]() mutable {
      if (!xi.requires_grad()) return;
      const float* g = yo.grad();
      float* gx = xi.grad();
      for (std::size_t j = 0; j < ii.size(); ++j) gx[static_cast<std::size_t>(ii[j])] += g[j];
    });
  }
  return y;
}

Tensor sigmoid_cross_entropy(Tape& tape, const Tensor& logits,
                             const std::vector<float>& labels, Reduction red) {
  if (labels.size() != logits.numel())
    throw std::invalid_argument("sigmoid_cross_entropy label count mismatch");
  if (labels.empty()) throw std::invalid_argument("sigmoid_cross_entropy on empty input");
  for (float y : labels)
    if (y < 0.0f || y > 1.0f)
      throw std::invalid_argument("sigmoid_cross_entropy labels must lie in [0,1]");
  bool rg = wants_grad(tape, {&logits});
  double total = 0.0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    double z = logits.data()[i];
    double y = labels[i];
    total += std::max(z, 0.0) - z * y + std::log1p(std::exp(-std::abs(z)));
  }
  std::size_t n = labels.size();
  if (red == Reduction::kMean) total /= static_cast<double>(n);
  Tensor out = make_output({1}, {static_cast<float>(total)}, rg);
  if (rg) {
    Tensor li = logits, oo = out;
    std::vector<float> yl = labels;
    tape.record([li, oo, yl, red]() mutable {
      if (!li.requires_grad()) return;
      float scale = oo.grad()[0];
      if (red == Reduction::kMean) scale /= static_cast<float>(yl.size());
      float* gz = li.grad();
      for (std::size_t i = 0; i < yl.size(); ++i)
        gz[i] += scale * (stable_sigmoid(li.data()[i]) - yl[i]);
    });
  }
  return out;
}

Tensor softmax_cross_entropy(Tape& tape, const Tensor& logits,
                             const std::vector<int>& labels, Reduction red) {
  if (logits.ndim() != 2)
    throw std::invalid_argument("softmax_cross_entropy logits must be [N,C], got " +
                                shape_str(logits.shape()));
  int n = logits.dim(0), c = logits.dim(1);
  if (static_cast<int>(labels.size()) != n)
    throw std::invalid_argument("softmax_cross_entropy label count mismatch");
  if (n == 0) throw std::invalid_argument("softmax_cross_entropy on empty input");
  for (int y : labels)
    if (y < 0 || y >= c) throw std::invalid_argument("softmax_cross_entropy label out of range");
  bool rg = wants_grad(tape, {&logits});
  double total = 0.0;
  for (int r = 0; r < n; ++r) {
    const float* row = logits.data() + static_cast<std::size_t>(r) * c;
    double mx = row[0];
    for (int j = 1; j < c; ++j) mx = std::max(mx, static_cast<double>(row[j]));
    double sum = 0.0;
    for (int j = 0; j < c; ++j) sum += std::exp(row[j] - mx);
    total += mx + std::log(sum) - row[labels[static_cast<std::size_t>(r)]];
  }
  if (red == Reduction::kMean) total /= static_cast<double>(n);
  Tensor out = make_output({1}, {static_cast<float>(total)}, rg);
  if (rg) {
    Tensor li = logits, oo = out;
    std::vector<int> yl = labels;
    tape.record([li, oo, yl, n, c, red]() mutable {
      if (!li.requires_grad()) return;
      float scale = oo.grad()[0];
      if (red == Reduction::kMean) scale /= static_cast<float>(n);
      float* gz = li.grad();
      for (int r = 0; r < n; ++r) {
        const float* row = li.data() + static_cast<std::size_t>(r) * c;
        float mx = row[0];
        for (int j = 1; j < c; ++j) mx = std::max(mx, row[j]);
        double sum = 0.0;
        for (int j = 0; j < c; ++j) sum += std::exp(row[j] - mx);
        for (int j = 0; j < c; ++j) {
          float p = static_cast<float>(std::exp(row[j] - mx) / sum);
          float ind = (j == yl[static_cast<std::size_t>(r)]) ? 1.0f : 0.0f;
          gz[static_cast<std::size_t>(r) * c + j] += scale * (p - ind);
        }
      }
    });
  }
  return out;
}

Tensor smooth_l1(Tape& tape, const Tensor& pred, const Tensor& target) {
  if (pred.shape() != target.shape())
    throw std::invalid_argument("smooth_l1 shape mismatch: " + shape_str(pred.shape()) + " vs " +
                                shape_str(target.shape()));
  bool rg = wants_grad(tape, {&pred, &target});
  double total = 0.0;
  for (std::size_t i = 0; i < pred.numel(); ++i) {
    double dd = static_cast<double>(pred.data()[i]) - target.data()[i];
    double a = std::abs(dd);
    total += a < 1.0 ? 0.5 * dd * dd : a - 0.5;
  }
  Tensor out = make_output({1}, {static_cast<float>(total)}, rg);
  if (rg) {
    Tensor pi = pred, ti = target, oo = out;
    tape.record([pi, ti, oo]() mutable {
      float g = oo.grad()[0];
      for (std::size_t i = 0; i < pi.numel(); ++i) {
        float dd = pi.data()[i] - ti.data()[i];
        float deriv = dd < -1.0f ? -1.0f : (dd > 1.0f ? 1.0f : dd);
        if (pi.requires_grad()) pi.grad()[i] += g * deriv;
        if (ti.requires_grad()) ti.grad()[i] -= g * deriv;
      }
    });
  }
  return out;
}

double finite_diff_check(const std::function<Tensor(Tape&, const Tensor&)>& f,
                         const Tensor& x, double eps) {
  if (eps <= 0.0) throw std::invalid_argument("finite_diff_check eps must be positive");
  Tensor probe = x.clone_values();
  probe.set_requires_grad(true);
  Tape tape;
  Tensor y = f(tape, probe);
  if (y.numel() != 1)
    throw std::invalid_argument("finite_diff_check expects a scalar-valued function");
  tape.backward(y, 1.0f);
  std::vector<float> analytic(probe.grad(), probe.grad() + probe.numel());

  Tensor work = x.clone_values();
  double max_err = 0.0;
  for (std::size_t i = 0; i < work.numel(); ++i) {
    float orig = work.data()[i];
    // Snap the step to representable floats and divide by the step that was
    // actually taken; with float32 storage the nominal 2*eps can differ from
    // the realized perturbation enough to matter.
    float hi = static_cast<float>(static_cast<double>(orig) + eps);
    float lo = static_cast<float>(static_cast<double>(orig) - eps);
    work.data()[i] = hi;
    Tape tp(false);
    double fp = f(tp, work).value();
    work.data()[i] = lo;
    Tape tm(false);
    double fm = f(tm, work).value();
    work.data()[i] = orig;
    double step = static_cast<double>(hi) - static_cast<double>(lo);
    double numeric = (fp - fm) / step;
    double a = analytic[i];
    double err = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), 1e-8});
    max_err = std::max(max_err, err);
  }
  return max_err;
}

}  // namespace dadet
