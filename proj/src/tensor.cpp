#include "ofit/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <stdexcept>

#include "ofit/common.hpp"

namespace ofit {

struct Tensor::Impl {
  std::vector<int64_t> shape;
  std::vector<double> data;
  bool requires_grad = false;
  std::vector<double> grad;  // empty means absent
};

namespace {

int64_t shape_product(const std::vector<int64_t>& shape) {
  int64_t p = 1;
  for (int64_t d : shape) p *= d;
  return p;
}

void check_shape(const std::vector<int64_t>& shape, size_t data_size) {
  for (int64_t d : shape) {
    if (d <= 0) {
      throw std::invalid_argument("Tensor: dimension sizes must be positive, got " +
                                  shape_to_string(shape));
    }
  }
  if (shape_product(shape) != static_cast<int64_t>(data_size)) {
    throw std::invalid_argument("Tensor: shape " + shape_to_string(shape) +
                                " does not match data length " +
                                std::to_string(data_size));
  }
}

}  // namespace

Tensor::Tensor() = default;

Tensor::Tensor(std::vector<int64_t> shape, std::vector<double> data,
               bool requires_grad) {
  check_shape(shape, data.size());
  impl_ = std::make_shared<Impl>();
  impl_->shape = std::move(shape);
  impl_->data = std::move(data);
  impl_->requires_grad = requires_grad;
}

Tensor Tensor::zeros(std::vector<int64_t> shape, bool requires_grad) {
  std::vector<double> d(static_cast<size_t>(shape_product(shape)), 0.0);
  return Tensor(std::move(shape), std::move(d), requires_grad);
}

Tensor Tensor::constant(std::vector<int64_t> shape, double value) {
  std::vector<double> d(static_cast<size_t>(shape_product(shape)), value);
  return Tensor(std::move(shape), std::move(d));
}

Tensor Tensor::scalar(double value) { return Tensor({1}, {value}); }

const std::vector<int64_t>& Tensor::shape() const { return impl_->shape; }

int64_t Tensor::size() const {
  return static_cast<int64_t>(impl_->data.size());
}

int64_t Tensor::dim(size_t axis) const { return impl_->shape.at(axis); }

size_t Tensor::rank() const { return impl_->shape.size(); }

std::span<const double> Tensor::data() const { return impl_->data; }

std::span<double> Tensor::data() { return impl_->data; }

bool Tensor::requires_grad() const { return impl_->requires_grad; }

void Tensor::set_requires_grad(bool value) { impl_->requires_grad = value; }

bool Tensor::has_grad() const { return !impl_->grad.empty(); }

std::span<const double> Tensor::grad() const {
  if (impl_->grad.empty()) {
    throw std::logic_error("Tensor::grad: no gradient present");
  }
  return impl_->grad;
}

std::span<double> Tensor::grad_mut() {
  if (impl_->grad.empty()) impl_->grad.assign(impl_->data.size(), 0.0);
  return impl_->grad;
}

void Tensor::zero_grad() {
  std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0);
}

void Tensor::drop_grad() { impl_->grad.clear(); }

double Tensor::item() const {
  if (size() != 1) {
    throw std::invalid_argument("Tensor::item: tensor has " +
                                std::to_string(size()) + " elements");
  }
  return impl_->data[0];
}

Tensor Tensor::clone() const {
  return Tensor(impl_->shape, impl_->data, impl_->requires_grad);
}

Tensor Tensor::reshaped(std::vector<int64_t> new_shape) const {
  if (shape_product(new_shape) != size()) {
    throw std::invalid_argument("Tensor::reshaped: " + shape_to_string(new_shape) +
                                " incompatible with " + std::to_string(size()) +
                                " elements");
  }
  Tensor t;
  t.impl_ = std::make_shared<Impl>(*impl_);
  t.impl_->shape = std::move(new_shape);
  return t;
}

const void* Tensor::id() const { return impl_.get(); }

bool Tensor::defined() const { return impl_ != nullptr; }

std::string shape_to_string(const std::vector<int64_t>& shape) {
  std::ostringstream os;
  os << '(';
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ')';
  return os.str();
}

// ---------------------------------------------------------------------------
// Tape

namespace {
thread_local Tape* g_active_tape = nullptr;
}

TapeScope::TapeScope(Tape& tape) : previous_(g_active_tape) {
  g_active_tape = &tape;
}

TapeScope::~TapeScope() { g_active_tape = previous_; }

Tape* active_tape() { return g_active_tape; }

namespace {

/// Marks the output differentiable and records the node when a tape is
/// active and some input wants gradients.
void maybe_record(const char* op, std::vector<Tensor> inputs, Tensor& out,
                  std::function<void()> backprop) {
  bool any = false;
  for (const Tensor& t : inputs) {
    if (t.requires_grad()) {
      any = true;
      break;
    }
  }
  if (!any) return;
  out.set_requires_grad(true);
  if (Tape* tape = active_tape()) {
    tape->record({op, std::move(inputs), out, std::move(backprop)});
  }
}

[[noreturn]] void shape_error(const char* op, const Tensor& a, const Tensor& b) {
  throw std::invalid_argument(std::string(op) + ": incompatible shapes " +
                              shape_to_string(a.shape()) + " and " +
                              shape_to_string(b.shape()));
}

[[noreturn]] void shape_error(const char* op, const Tensor& a) {
  throw std::invalid_argument(std::string(op) + ": invalid input shape " +
                              shape_to_string(a.shape()));
}

}  // namespace

// ---------------------------------------------------------------------------
// Operators

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    shape_error("matmul", a, b);
  }
  const int64_t n = a.dim(0), k = a.dim(1), m = b.dim(1);
  Tensor out = Tensor::zeros({n, m});
  {
    const double* pa = a.data().data();
    const double* pb = b.data().data();
    double* pc = out.data().data();
    for (int64_t i = 0; i < n; ++i) {
      for (int64_t kk = 0; kk < k; ++kk) {
        const double av = pa[i * k + kk];
        const double* brow = pb + kk * m;
        double* crow = pc + i * m;
        for (int64_t j = 0; j < m; ++j) crow[j] += av * brow[j];
      }
    }
  }
  Tensor ac = a, bc = b;
  maybe_record("matmul", {a, b}, out, [ac, bc, out]() mutable {
    const int64_t n = ac.dim(0), k = ac.dim(1), m = bc.dim(1);
    auto go = out.grad();
    if (ac.requires_grad()) {
      auto ga = ac.grad_mut();
      const double* pb = bc.data().data();
      for (int64_t i = 0; i < n; ++i) {
        for (int64_t j = 0; j < m; ++j) {
          const double g = go[static_cast<size_t>(i * m + j)];
          if (g == 0.0) continue;
          const double* brow = pb + j;
          for (int64_t kk = 0; kk < k; ++kk) {
            ga[static_cast<size_t>(i * k + kk)] += g * brow[kk * m];
          }
        }
      }
    }
    if (bc.requires_grad()) {
      auto gb = bc.grad_mut();
      const double* pa = ac.data().data();
      for (int64_t kk = 0; kk < k; ++kk) {
        for (int64_t i = 0; i < n; ++i) {
          const double av = pa[i * k + kk];
          if (av == 0.0) continue;
          const double* grow = go.data() + i * m;
          double* gbrow = gb.data() + kk * m;
          for (int64_t j = 0; j < m; ++j) gbrow[j] += av * grow[j];
        }
      }
    }
  });
  return out;
}

Tensor add(const Tensor& a, const Tensor& b) {
  const bool same = a.shape() == b.shape();
  const bool bias = b.rank() == 1 && a.rank() >= 1 &&
                    a.shape().back() == b.dim(0) && !same;
  if (!same && !bias) shape_error("add", a, b);
  Tensor out = Tensor::zeros(a.shape());
  {
    auto pa = a.data();
    auto pb = b.data();
    auto po = out.data();
    if (same) {
      for (size_t i = 0; i < po.size(); ++i) po[i] = pa[i] + pb[i];
    } else {
      const size_t c = pb.size();
      for (size_t i = 0; i < po.size(); ++i) po[i] = pa[i] + pb[i % c];
    }
  }
  Tensor ac = a, bc = b;
  maybe_record("add", {a, b}, out, [ac, bc, out, same]() mutable {
    auto go = out.grad();
    if (ac.requires_grad()) {
      auto ga = ac.grad_mut();
      for (size_t i = 0; i < go.size(); ++i) ga[i] += go[i];
    }
    if (bc.requires_grad()) {
      auto gb = bc.grad_mut();
      if (same) {
        for (size_t i = 0; i < go.size(); ++i) gb[i] += go[i];
      } else {
        const size_t c = gb.size();
        for (size_t i = 0; i < go.size(); ++i) gb[i % c] += go[i];
      }
    }
  });
  return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) shape_error("mul", a, b);
  Tensor out = Tensor::zeros(a.shape());
  {
    auto pa = a.data();
    auto pb = b.data();
    auto po = out.data();
    for (size_t i = 0; i < po.size(); ++i) po[i] = pa[i] * pb[i];
  }
  Tensor ac = a, bc = b;
  maybe_record("mul", {a, b}, out, [ac, bc, out]() mutable {
    auto go = out.grad();
    if (ac.requires_grad()) {
      auto ga = ac.grad_mut();
      auto pb = bc.data();
      for (size_t i = 0; i < go.size(); ++i) ga[i] += go[i] * pb[i];
    }
    if (bc.requires_grad()) {
      auto gb = bc.grad_mut();
      auto pa = ac.data();
      for (size_t i = 0; i < go.size(); ++i) gb[i] += go[i] * pa[i];
    }
  });
  return out;
}

Tensor scale(const Tensor& x, double factor) {
  Tensor out = Tensor::zeros(x.shape());
  {
    auto px = x.data();
    auto po = out.data();
    for (size_t i = 0; i < po.size(); ++i) po[i] = px[i] * factor;
  }
  Tensor xc = x;
  maybe_record("scale", {x}, out, [xc, out, factor]() mutable {
    if (!xc.requires_grad()) return;
    auto go = out.grad();
    auto gx = xc.grad_mut();
    for (size_t i = 0; i < go.size(); ++i) gx[i] += go[i] * factor;
  });
  return out;
}

Tensor relu(const Tensor& x) {
  Tensor out = Tensor::zeros(x.shape());
  {
    auto px = x.data();
    auto po = out.data();
    for (size_t i = 0; i < po.size(); ++i) po[i] = px[i] > 0.0 ? px[i] : 0.0;
  }
  Tensor xc = x;
  maybe_record("relu", {x}, out, [xc, out]() mutable {
    if (!xc.requires_grad()) return;
    auto go = out.grad();
    auto gx = xc.grad_mut();
    auto px = xc.data();
    for (size_t i = 0; i < go.size(); ++i) {
      if (px[i] > 0.0) gx[i] += go[i];
    }
  });
  return out;
}

namespace {

struct ConvDims {
  int64_t n, h, w, ci, kh, kw, co, oh, ow, pt, pl;
};

ConvDims conv_dims(const Tensor& x, const Tensor& f, Padding padding) {
  if (x.rank() != 4 || f.rank() != 4 || x.dim(3) != f.dim(2)) {
    shape_error("conv2d", x, f);
  }
  ConvDims d{};
  d.n = x.dim(0);
  d.h = x.dim(1);
  d.w = x.dim(2);
  d.ci = x.dim(3);
  d.kh = f.dim(0);
  d.kw = f.dim(1);
  d.co = f.dim(3);
  if (padding == Padding::valid) {
    d.oh = d.h - d.kh + 1;
    d.ow = d.w - d.kw + 1;
    d.pt = 0;
    d.pl = 0;
    if (d.oh <= 0 || d.ow <= 0) shape_error("conv2d", x, f);
  } else {
    d.oh = d.h;
    d.ow = d.w;
    d.pt = (d.kh - 1) / 2;
    d.pl = (d.kw - 1) / 2;
  }
  return d;
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& filters, Padding padding) {
  const ConvDims d = conv_dims(x, filters, padding);
  Tensor out = Tensor::zeros({d.n, d.oh, d.ow, d.co});
  {
    const double* px = x.data().data();
    const double* pf = filters.data().data();
    double* po = out.data().data();
    for (int64_t im = 0; im < d.n; ++im) {
      for (int64_t oh = 0; oh < d.oh; ++oh) {
        for (int64_t ow = 0; ow < d.ow; ++ow) {
          double* orow = po + ((im * d.oh + oh) * d.ow + ow) * d.co;
          for (int64_t kh = 0; kh < d.kh; ++kh) {
            const int64_t ih = oh + kh - d.pt;
            if (ih < 0 || ih >= d.h) continue;
            for (int64_t kw = 0; kw < d.kw; ++kw) {
              const int64_t iw = ow + kw - d.pl;
              if (iw < 0 || iw >= d.w) continue;
              const double* xrow = px + ((im * d.h + ih) * d.w + iw) * d.ci;
              const double* frow = pf + (kh * d.kw + kw) * d.ci * d.co;
              for (int64_t ci = 0; ci < d.ci; ++ci) {
                const double xv = xrow[ci];
                if (xv == 0.0) continue;
                const double* fr = frow + ci * d.co;
                for (int64_t co = 0; co < d.co; ++co) orow[co] += xv * fr[co];
              }
            }
          }
        }
      }
    }
  }
  Tensor xc = x, fc = filters;
  maybe_record("conv2d", {x, filters}, out, [xc, fc, out, d]() mutable {
    auto go = out.grad();
    const double* pg = go.data();
    if (xc.requires_grad()) {
      auto gx = xc.grad_mut();
      const double* pf = fc.data().data();
      for (int64_t im = 0; im < d.n; ++im) {
        for (int64_t oh = 0; oh < d.oh; ++oh) {
          for (int64_t ow = 0; ow < d.ow; ++ow) {
            const double* grow = pg + ((im * d.oh + oh) * d.ow + ow) * d.co;
            for (int64_t kh = 0; kh < d.kh; ++kh) {
              const int64_t ih = oh + kh - d.pt;
              if (ih < 0 || ih >= d.h) continue;
              for (int64_t kw = 0; kw < d.kw; ++kw) {
                const int64_t iw = ow + kw - d.pl;
                if (iw < 0 || iw >= d.w) continue;
                double* gxrow = gx.data() + ((im * d.h + ih) * d.w + iw) * d.ci;
                const double* frow = pf + (kh * d.kw + kw) * d.ci * d.co;
                for (int64_t ci = 0; ci < d.ci; ++ci) {
                  const double* fr = frow + ci * d.co;
                  double acc = 0.0;
                  for (int64_t co = 0; co < d.co; ++co) acc += fr[co] * grow[co];
                  gxrow[ci] += acc;
                }
              }
            }
          }
        }
      }
    }
    if (fc.requires_grad()) {
      auto gf = fc.grad_mut();
      const double* px = xc.data().data();
      for (int64_t im = 0; im < d.n; ++im) {
        for (int64_t oh = 0; oh < d.oh; ++oh) {
          for (int64_t ow = 0; ow < d.ow; ++ow) {
            const double* grow = pg + ((im * d.oh + oh) * d.ow + ow) * d.co;
            for (int64_t kh = 0; kh < d.kh; ++kh) {
              const int64_t ih = oh + kh - d.pt;
              if (ih < 0 || ih >= d.h) continue;
              for (int64_t kw = 0; kw < d.kw; ++kw) {
                const int64_t iw = ow + kw - d.pl;
                if (iw < 0 || iw >= d.w) continue;
                const double* xrow = px + ((im * d.h + ih) * d.w + iw) * d.ci;
                double* gfrow = gf.data() + (kh * d.kw + kw) * d.ci * d.co;
                for (int64_t ci = 0; ci < d.ci; ++ci) {
                  const double xv = xrow[ci];
                  if (xv == 0.0) continue;
                  double* gr = gfrow + ci * d.co;
                  for (int64_t co = 0; co < d.co; ++co) gr[co] += xv * grow[co];
                }
              }
            }
          }
        }
      }
    }
  });
  return out;
}

Tensor maxpool2d(const Tensor& x) {
  if (x.rank() != 4) shape_error("maxpool2d", x);
  const int64_t n = x.dim(0), h = x.dim(1), w = x.dim(2), c = x.dim(3);
  const int64_t oh = h / 2, ow = w / 2;
  if (oh == 0 || ow == 0) shape_error("maxpool2d", x);
  Tensor out = Tensor::zeros({n, oh, ow, c});
  auto argmax = std::make_shared<std::vector<int64_t>>(
      static_cast<size_t>(out.size()));
  {
    const double* px = x.data().data();
    double* po = out.data().data();
    int64_t* pa = argmax->data();
    for (int64_t im = 0; im < n; ++im) {
      for (int64_t i = 0; i < oh; ++i) {
        for (int64_t j = 0; j < ow; ++j) {
          for (int64_t ch = 0; ch < c; ++ch) {
            double best = -1.0 / 0.0;
            int64_t best_idx = -1;
            for (int64_t di = 0; di < 2; ++di) {
              for (int64_t dj = 0; dj < 2; ++dj) {
                const int64_t idx =
                    ((im * h + 2 * i + di) * w + 2 * j + dj) * c + ch;
                // First max in scan order wins ties.
                if (px[idx] > best) {
                  best = px[idx];
                  best_idx = idx;
                }
              }
            }
            const int64_t odx = ((im * oh + i) * ow + j) * c + ch;
            po[odx] = best;
            pa[static_cast<size_t>(odx)] = best_idx;
          }
        }
      }
    }
  }
  Tensor xc = x;
  maybe_record("maxpool2d", {x}, out, [xc, out, argmax]() mutable {
    if (!xc.requires_grad()) return;
    auto go = out.grad();
    auto gx = xc.grad_mut();
    const int64_t* pa = argmax->data();
    for (size_t i = 0; i < go.size(); ++i) {
      gx[static_cast<size_t>(pa[i])] += go[i];
    }
  });
  return out;
}

namespace {

struct BnDims {
  int64_t rows;  // n or n*h*w
  int64_t c;
};

BnDims bn_dims(const Tensor& x) {
  if (x.rank() == 2) return {x.dim(0), x.dim(1)};
  if (x.rank() == 4) return {x.dim(0) * x.dim(1) * x.dim(2), x.dim(3)};
  shape_error("batchnorm", x);
}

}  // namespace

Tensor batchnorm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                 BatchNormState& state, bool training) {
  const BnDims d = bn_dims(x);
  if (gamma.rank() != 1 || gamma.dim(0) != d.c || beta.shape() != gamma.shape()) {
    shape_error("batchnorm", x, gamma);
  }
  if (state.running_mean.size() != static_cast<size_t>(d.c)) {
    throw std::invalid_argument("batchnorm: state not initialized for " +
                                std::to_string(d.c) + " channels");
  }
  const double eps = state.eps;
  Tensor out = Tensor::zeros(x.shape());

  auto mean = std::make_shared<std::vector<double>>(static_cast<size_t>(d.c), 0.0);
  auto var = std::make_shared<std::vector<double>>(static_cast<size_t>(d.c), 0.0);
  const double* px = x.data().data();
  const double* pg = gamma.data().data();
  const double* pb = beta.data().data();
  double* po = out.data().data();

  if (training) {
    for (int64_t r = 0; r < d.rows; ++r) {
      const double* row = px + r * d.c;
      for (int64_t c = 0; c < d.c; ++c) (*mean)[static_cast<size_t>(c)] += row[c];
    }
    for (int64_t c = 0; c < d.c; ++c) (*mean)[static_cast<size_t>(c)] /= d.rows;
    for (int64_t r = 0; r < d.rows; ++r) {
      const double* row = px + r * d.c;
      for (int64_t c = 0; c < d.c; ++c) {
        const double dv = row[c] - (*mean)[static_cast<size_t>(c)];
        (*var)[static_cast<size_t>(c)] += dv * dv;
      }
    }
    for (int64_t c = 0; c < d.c; ++c) (*var)[static_cast<size_t>(c)] /= d.rows;
    for (int64_t c = 0; c < d.c; ++c) {
      state.running_mean[static_cast<size_t>(c)] =
          state.momentum * state.running_mean[static_cast<size_t>(c)] +
          (1.0 - state.momentum) * (*mean)[static_cast<size_t>(c)];
      state.running_var[static_cast<size_t>(c)] =
          state.momentum * state.running_var[static_cast<size_t>(c)] +
          (1.0 - state.momentum) * (*var)[static_cast<size_t>(c)];
    }
  } else {
    *mean = state.running_mean;
    *var = state.running_var;
  }

  for (int64_t r = 0; r < d.rows; ++r) {
    const double* row = px + r * d.c;
    double* orow = po + r * d.c;
    for (int64_t c = 0; c < d.c; ++c) {
      const size_t sc = static_cast<size_t>(c);
      const double xhat = (row[c] - (*mean)[sc]) / std::sqrt((*var)[sc] + eps);
      orow[c] = pg[c] * xhat + pb[c];
    }
  }

  Tensor xc = x, gc = gamma, bc = beta;
  maybe_record("batchnorm", {x, gamma, beta}, out,
               [xc, gc, bc, out, mean, var, eps, d, training]() mutable {
    auto go = out.grad();
    const double* pgo = go.data();
    const double* px = xc.data().data();
    const double* pg = gc.data().data();
    const int64_t rows = d.rows, C = d.c;

    std::vector<double> sum_dy(static_cast<size_t>(C), 0.0);
    std::vector<double> sum_dy_xhat(static_cast<size_t>(C), 0.0);
    std::vector<double> inv_std(static_cast<size_t>(C));
    for (int64_t c = 0; c < C; ++c) {
      inv_std[static_cast<size_t>(c)] =
          1.0 / std::sqrt((*var)[static_cast<size_t>(c)] + eps);
    }
    for (int64_t r = 0; r < rows; ++r) {
      const double* grow = pgo + r * C;
      const double* xrow = px + r * C;
      for (int64_t c = 0; c < C; ++c) {
        const size_t sc = static_cast<size_t>(c);
        const double xhat = (xrow[c] - (*mean)[sc]) * inv_std[sc];
        sum_dy[sc] += grow[c];
        sum_dy_xhat[sc] += grow[c] * xhat;
      }
    }
    if (gc.requires_grad()) {
      auto gg = gc.grad_mut();
      for (int64_t c = 0; c < C; ++c) gg[static_cast<size_t>(c)] += sum_dy_xhat[static_cast<size_t>(c)];
    }
    if (bc.requires_grad()) {
      auto gb = bc.grad_mut();
      for (int64_t c = 0; c < C; ++c) gb[static_cast<size_t>(c)] += sum_dy[static_cast<size_t>(c)];
    }
    if (xc.requires_grad()) {
      auto gx = xc.grad_mut();
      if (training) {
        // Gradient through the batch statistics.
        for (int64_t r = 0; r < rows; ++r) {
          const double* grow = pgo + r * C;
          const double* xrow = px + r * C;
          double* gxrow = gx.data() + r * C;
          for (int64_t c = 0; c < C; ++c) {
            const size_t sc = static_cast<size_t>(c);
            const double xhat = (xrow[c] - (*mean)[sc]) * inv_std[sc];
            gxrow[c] += pg[c] * inv_std[sc] / rows *
                        (rows * grow[c] - sum_dy[sc] - xhat * sum_dy_xhat[sc]);
          }
        }
      } else {
        // Running statistics are constants.
        for (int64_t r = 0; r < rows; ++r) {
          const double* grow = pgo + r * C;
          double* gxrow = gx.data() + r * C;
          for (int64_t c = 0; c < C; ++c) {
            gxrow[c] += pg[c] * inv_std[static_cast<size_t>(c)] * grow[c];
          }
        }
      }
    }
  });
  return out;
}

Tensor dropout(const Tensor& x, double rate, bool training, uint64_t seed) {
  if (rate < 0.0 || rate >= 1.0) {
    throw std::invalid_argument("dropout: rate must be in [0,1), got " +
                                std::to_string(rate));
  }
  if (!training || rate == 0.0) {
    // Identity in eval mode; still a fresh tensor so the graph stays acyclic.
    Tensor out = Tensor(x.shape(), {x.data().begin(), x.data().end()});
    Tensor xc = x;
    maybe_record("dropout", {x}, out, [xc, out]() mutable {
      if (!xc.requires_grad()) return;
      auto go = out.grad();
      auto gx = xc.grad_mut();
      for (size_t i = 0; i < go.size(); ++i) gx[i] += go[i];
    });
    return out;
  }
  const double keep = 1.0 - rate;
  auto mask = std::make_shared<std::vector<double>>(
      static_cast<size_t>(x.size()));
  {
    Rng rng(seed);
    for (double& m : *mask) m = rng.bernoulli(keep) ? 1.0 / keep : 0.0;
  }
  Tensor out = Tensor::zeros(x.shape());
  {
    auto px = x.data();
    auto po = out.data();
    for (size_t i = 0; i < po.size(); ++i) po[i] = px[i] * (*mask)[i];
  }
  Tensor xc = x;
  maybe_record("dropout", {x}, out, [xc, out, mask]() mutable {
    if (!xc.requires_grad()) return;
    auto go = out.grad();
    auto gx = xc.grad_mut();
    for (size_t i = 0; i < go.size(); ++i) gx[i] += go[i] * (*mask)[i];
  });
  return out;
}

Tensor flatten(const Tensor& x) {
  if (x.rank() < 2) shape_error("flatten", x);
  int64_t rest = 1;
  for (size_t i = 1; i < x.rank(); ++i) rest *= x.dim(i);
  Tensor out = Tensor(std::vector<int64_t>{x.dim(0), rest},
                      {x.data().begin(), x.data().end()});
  Tensor xc = x;
  maybe_record("flatten", {x}, out, [xc, out]() mutable {
    if (!xc.requires_grad()) return;
    auto go = out.grad();
    auto gx = xc.grad_mut();
    for (size_t i = 0; i < go.size(); ++i) gx[i] += go[i];
  });
  return out;
}

Tensor softmax_cross_entropy(const Tensor& logits, std::span<const int> labels) {
  if (logits.rank() != 2) shape_error("softmax_cross_entropy", logits);
  const int64_t n = logits.dim(0), k = logits.dim(1);
  if (static_cast<int64_t>(labels.size()) != n) {
    throw std::invalid_argument(
        "softmax_cross_entropy: " + std::to_string(labels.size()) +
        " labels for " + std::to_string(n) + " rows");
  }
  for (int lbl : labels) {
    if (lbl < 0 || lbl >= k) {
      throw std::invalid_argument("softmax_cross_entropy: label " +
                                  std::to_string(lbl) + " out of range [0," +
                                  std::to_string(k) + ")");
    }
  }
  // Save softmax probabilities for backward.
  auto probs = std::make_shared<std::vector<double>>(
      static_cast<size_t>(logits.size()));
  double total = 0.0;
  {
    const double* pl = logits.data().data();
    for (int64_t i = 0; i < n; ++i) {
      const double* row = pl + i * k;
      double mx = row[0];
      for (int64_t j = 1; j < k; ++j) mx = std::max(mx, row[j]);
      double sum = 0.0;
      for (int64_t j = 0; j < k; ++j) sum += std::exp(row[j] - mx);
      const double lse = mx + std::log(sum);
      total += lse - row[labels[static_cast<size_t>(i)]];
      double* prow = probs->data() + i * k;
      for (int64_t j = 0; j < k; ++j) prow[j] = std::exp(row[j] - lse);
    }
  }
  Tensor out = Tensor::scalar(total / static_cast<double>(n));
  Tensor lc = logits;
  std::vector<int> lab(labels.begin(), labels.end());
  maybe_record("softmax_cross_entropy", {logits}, out,
               [lc, out, probs, lab, n, k]() mutable {
    if (!lc.requires_grad()) return;
    const double g = out.grad()[0] / static_cast<double>(n);
    auto gl = lc.grad_mut();
    for (int64_t i = 0; i < n; ++i) {
      const double* prow = probs->data() + i * k;
      double* grow = gl.data() + i * k;
      for (int64_t j = 0; j < k; ++j) grow[j] += g * prow[j];
      grow[lab[static_cast<size_t>(i)]] -= g;
    }
  });
  return out;
}

Tensor sum(const Tensor& x) {
  double total = 0.0;
  for (double v : x.data()) total += v;
  Tensor out = Tensor::scalar(total);
  Tensor xc = x;
  maybe_record("sum", {x}, out, [xc, out]() mutable {
    if (!xc.requires_grad()) return;
    const double g = out.grad()[0];
    auto gx = xc.grad_mut();
    for (size_t i = 0; i < gx.size(); ++i) gx[i] += g;
  });
  return out;
}

Tensor forward(std::string_view op_kind, std::span<const Tensor> inputs,
               const OpAttrs& attrs) {
  auto need = [&](size_t n) {
    if (inputs.size() != n) {
      throw std::invalid_argument(std::string(op_kind) + ": expected " +
                                  std::to_string(n) + " inputs, got " +
                                  std::to_string(inputs.size()));
    }
  };
  if (op_kind == "matmul") {
    need(2);
    return matmul(inputs[0], inputs[1]);
  }
  if (op_kind == "add") {
    need(2);
    return add(inputs[0], inputs[1]);
  }
  if (op_kind == "mul") {
    need(2);
    return mul(inputs[0], inputs[1]);
  }
  if (op_kind == "scale") {
    need(1);
    return scale(inputs[0], attrs.factor);
  }
  if (op_kind == "relu") {
    need(1);
    return relu(inputs[0]);
  }
  if (op_kind == "conv2d") {
    need(2);
    return conv2d(inputs[0], inputs[1], attrs.padding);
  }
  if (op_kind == "maxpool2d") {
    need(1);
    return maxpool2d(inputs[0]);
  }
  if (op_kind == "batchnorm") {
    need(3);
    if (!attrs.bn_state) {
      throw std::invalid_argument("batchnorm: attrs.bn_state is required");
    }
    return batchnorm(inputs[0], inputs[1], inputs[2], *attrs.bn_state,
                     attrs.training);
  }
  if (op_kind == "dropout") {
    need(1);
    return dropout(inputs[0], attrs.rate, attrs.training, attrs.seed);
  }
  if (op_kind == "flatten") {
    need(1);
    return flatten(inputs[0]);
  }
  if (op_kind == "softmax_cross_entropy") {
    need(1);
    return softmax_cross_entropy(inputs[0], attrs.labels);
  }
  if (op_kind == "sum") {
    need(1);
    return sum(inputs[0]);
  }
  throw std::invalid_argument("forward: unknown op_kind '" +
                              std::string(op_kind) + "'");
}

void backward(const Tensor& loss, Tape& tape) {
  if (loss.size() != 1) {
    throw std::invalid_argument("backward: loss must be scalar, got shape " +
                                shape_to_string(loss.shape()));
  }
  bool found = false;
  for (const Tape::Node& node : tape.nodes()) {
    if (node.output.id() == loss.id()) {
      found = true;
      break;
    }
  }
  if (!found) {
    throw std::invalid_argument("backward: loss was not produced on this tape");
  }
  Tensor seed = loss;
  seed.grad_mut()[0] += 1.0;
  const auto& nodes = tape.nodes();
  for (auto it = nodes.rbegin(); it != nodes.rend(); ++it) {
    if (it->output.has_grad()) it->backprop();
  }
}

Tensor input_gradient(const std::function<Tensor(const Tensor&)>& scalar_fn,
                      const Tensor& x) {
  Tensor probe = x.clone();
  probe.set_requires_grad(true);
  Tape tape;
  {
    TapeScope scope(tape);
    Tensor loss = scalar_fn(probe);
    backward(loss, tape);
  }
  if (!probe.has_grad()) {
    return Tensor::zeros(x.shape());
  }
  auto g = probe.grad();
  return Tensor(x.shape(), {g.begin(), g.end()});
}

}  // namespace ofit
