#include "nexus/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "gemm.hpp"

namespace nexus {

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << "]";
  return os.str();
}

int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int64_t d : s) n *= d;
  return n;
}

static void check_shape_valid(const Shape& s) {
  for (int64_t d : s)
    if (d <= 0) throw ShapeError("tensor extents must be positive, got " + shape_str(s));
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  check_shape_valid(shape);
  Tensor t;
  t.impl_ = std::make_shared<Node>();
  t.impl_->values.assign(size_t(shape_numel(shape)), 0.0);
  t.impl_->shape = std::move(shape);
  t.impl_->requires_grad = requires_grad;
  return t;
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  Tensor t = zeros(std::move(shape), requires_grad);
  std::fill(t.impl_->values.begin(), t.impl_->values.end(), value);
  return t;
}

Tensor Tensor::from_data(Shape shape, std::vector<double> values, bool requires_grad) {
  check_shape_valid(shape);
  if (int64_t(values.size()) != shape_numel(shape))
    throw ShapeError("data length " + std::to_string(values.size()) +
                     " does not match shape " + shape_str(shape));
  Tensor t;
  t.impl_ = std::make_shared<Node>();
  t.impl_->shape = std::move(shape);
  t.impl_->values = std::move(values);
  t.impl_->requires_grad = requires_grad;
  return t;
}

Tensor Tensor::scalar(double value) { return from_data({}, {value}); }

std::vector<double>& Tensor::grad() {
  if (!impl_) throw ShapeError("grad() on empty tensor");
  if (impl_->grad.empty()) impl_->grad.assign(impl_->values.size(), 0.0);
  return impl_->grad;
}

const std::vector<double>& Tensor::grad_const() const {
  if (!has_grad()) throw ShapeError("tensor has no gradient");
  return impl_->grad;
}

// ---- tape ----------------------------------------------------------------

static thread_local Tape* g_active_tape = nullptr;

Tape::Tape() {
  if (g_active_tape)
    throw std::runtime_error("a tape is already active on this thread");
  g_active_tape = this;
}

Tape::~Tape() {
  if (g_active_tape == this) g_active_tape = nullptr;
}

Tape* Tape::active() { return g_active_tape; }
bool Tape::recording() { return g_active_tape != nullptr; }

void Tape::record(std::function<void()> backward_fn) {
  entries_.push_back(std::move(backward_fn));
}

void Tape::backward(const Tensor& root) {
  if (replayed_)
    throw std::runtime_error("tape already replayed; call reset() before another backward");
  if (!root.defined() || root.numel() != 1)
    throw ShapeError("backward() root must be a scalar, got shape " +
                     (root.defined() ? shape_str(root.shape()) : std::string("<empty>")));
  replayed_ = true;
  Tensor r = root;
  r.grad()[0] += 1.0;
  for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) (*it)();
}

void Tape::reset() {
  entries_.clear();
  replayed_ = false;
}

void backward(const Tensor& root) {
  if (!Tape::recording()) throw std::runtime_error("backward() with no active tape");
  Tape::active()->backward(root);
}

// ---- helpers -------------------------------------------------------------

static bool track(const Tensor& a) { return Tape::recording() && a.requires_grad(); }
static bool track(const Tensor& a, const Tensor& b) {
  return Tape::recording() && (a.requires_grad() || b.requires_grad());
}

bool all_finite(const Tensor& t) {
  for (double v : t.values())
    if (!std::isfinite(v)) return false;
  return true;
}

// Broadcast classification for elementwise ops.
enum class Bcast { same, scalar, channel };

static std::pair<Bcast, int64_t> classify_bcast(const Shape& a, const Shape& b,
                                                const char* op) {
  if (a == b) return {Bcast::same, 0};
  if (shape_numel(b) == 1) return {Bcast::scalar, 0};
  if (b.size() == 1) {
    if (a.size() == 2 && a[1] == b[0]) return {Bcast::channel, 1};
    if (a.size() == 3 && a[0] == b[0]) return {Bcast::channel, 0};
    if (a.size() == 4 && a[1] == b[0]) return {Bcast::channel, 1};
  }
  throw ShapeError(std::string(op) + ": incompatible shapes " + shape_str(a) +
                   " and " + shape_str(b));
}

// Per-channel layout: lhs viewed as [outer, C, inner].
static void channel_extents(const Shape& a, int64_t ch_dim, int64_t& outer,
                            int64_t& C, int64_t& inner) {
  outer = 1;
  inner = 1;
  for (int64_t i = 0; i < ch_dim; ++i) outer *= a[size_t(i)];
  C = a[size_t(ch_dim)];
  for (size_t i = size_t(ch_dim) + 1; i < a.size(); ++i) inner *= a[i];
}

template <class Fwd, class DA, class DB>
static Tensor elementwise_binary(const Tensor& a, const Tensor& b, const char* name,
                                 Fwd fwd, DA da, DB db) {
  auto [kind, ch_dim] = classify_bcast(a.shape(), b.shape(), name);
  Tensor out = Tensor::zeros(a.shape());
  const double* pa = a.data();
  const double* pb = b.data();
  double* po = out.data();
  int64_t n = a.numel();
  if (kind == Bcast::same) {
    for (int64_t i = 0; i < n; ++i) po[i] = fwd(pa[i], pb[i]);
  } else if (kind == Bcast::scalar) {
    double s = pb[0];
    for (int64_t i = 0; i < n; ++i) po[i] = fwd(pa[i], s);
  } else {
    int64_t outer, C, inner;
    channel_extents(a.shape(), ch_dim, outer, C, inner);
    for (int64_t o = 0; o < outer; ++o)
      for (int64_t c = 0; c < C; ++c) {
        double s = pb[c];
        double* row = po + (o * C + c) * inner;
        const double* arow = pa + (o * C + c) * inner;
        for (int64_t i = 0; i < inner; ++i) row[i] = fwd(arow[i], s);
      }
  }
  if (track(a, b)) {
    out.set_requires_grad(true);
    Tensor ta = a, tb = b, to = out;
    Bcast k = kind;
    int64_t cd = ch_dim;
    Tape::active()->record([ta, tb, to, k, cd, da, db]() mutable {
      if (!to.has_grad()) return;
      const auto& g = to.grad_const();
      const double* pa = ta.data();
      const double* pb = tb.data();
      int64_t n = ta.numel();
      if (ta.requires_grad()) {
        auto& ga = ta.grad();
        if (k == Bcast::same) {
          for (int64_t i = 0; i < n; ++i) ga[size_t(i)] += g[size_t(i)] * da(pa[i], pb[i]);
        } else if (k == Bcast::scalar) {
          double s = pb[0];
          for (int64_t i = 0; i < n; ++i) ga[size_t(i)] += g[size_t(i)] * da(pa[i], s);
        } else {
          int64_t outer, C, inner;
          channel_extents(ta.shape(), cd, outer, C, inner);
          for (int64_t o = 0; o < outer; ++o)
            for (int64_t c = 0; c < C; ++c) {
              double s = pb[c];
              int64_t base = (o * C + c) * inner;
              for (int64_t i = 0; i < inner; ++i)
                ga[size_t(base + i)] += g[size_t(base + i)] * da(pa[base + i], s);
            }
        }
      }
      if (tb.requires_grad()) {
        auto& gb = tb.grad();
        if (k == Bcast::same) {
          for (int64_t i = 0; i < n; ++i) gb[size_t(i)] += g[size_t(i)] * db(pa[i], pb[i]);
        } else if (k == Bcast::scalar) {
          double s = pb[0];
          double acc = 0.0;
          for (int64_t i = 0; i < n; ++i) acc += g[size_t(i)] * db(pa[i], s);
          gb[0] += acc;
        } else {
          int64_t outer, C, inner;
          channel_extents(ta.shape(), cd, outer, C, inner);
          for (int64_t o = 0; o < outer; ++o)
            for (int64_t c = 0; c < C; ++c) {
              double s = pb[c];
              int64_t base = (o * C + c) * inner;
              double acc = 0.0;
              for (int64_t i = 0; i < inner; ++i)
                acc += g[size_t(base + i)] * db(pa[base + i], s);
              gb[size_t(c)] += acc;
            }
        }
      }
    });
  }
  return out;
}

Tensor add(const Tensor& a, const Tensor& b) {
  return elementwise_binary(
      a, b, "add", [](double x, double y) { return x + y; },
      [](double, double) { return 1.0; }, [](double, double) { return 1.0; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return elementwise_binary(
      a, b, "sub", [](double x, double y) { return x - y; },
      [](double, double) { return 1.0; }, [](double, double) { return -1.0; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return elementwise_binary(
      a, b, "mul", [](double x, double y) { return x * y; },
      [](double, double y) { return y; }, [](double x, double) { return x; });
}

Tensor scale(const Tensor& a, double s) {
  Tensor out = Tensor::zeros(a.shape());
  const double* pa = a.data();
  double* po = out.data();
  for (int64_t i = 0; i < a.numel(); ++i) po[i] = pa[i] * s;
  if (track(a)) {
    out.set_requires_grad(true);
    Tensor ta = a, to = out;
    Tape::active()->record([ta, to, s]() mutable {
      if (!to.has_grad()) return;
      const auto& g = to.grad_const();
      auto& ga = ta.grad();
      for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * s;
    });
  }
  return out;
}

Tensor add_scalar(const Tensor& a, double s) {
  Tensor out = Tensor::zeros(a.shape());
  const double* pa = a.data();
  double* po = out.data();
  for (int64_t i = 0; i < a.numel(); ++i) po[i] = pa[i] + s;
  if (track(a)) {
    out.set_requires_grad(true);
    Tensor ta = a, to = out;
    Tape::active()->record([ta, to]() mutable {
      if (!to.has_grad()) return;
      const auto& g = to.grad_const();
      auto& ga = ta.grad();
      for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    });
  }
  return out;
}

Tensor relu(const Tensor& a) {
  Tensor out = Tensor::zeros(a.shape());
  const double* pa = a.data();
  double* po = out.data();
  for (int64_t i = 0; i < a.numel(); ++i) po[i] = pa[i] > 0.0 ? pa[i] : 0.0;
  if (track(a)) {
    out.set_requires_grad(true);
    Tensor ta = a, to = out;
    Tape::active()->record([ta, to]() mutable {
      if (!to.has_grad()) return;
      const auto& g = to.grad_const();
      const double* pa = ta.data();
      auto& ga = ta.grad();
      for (size_t i = 0; i < g.size(); ++i)
        if (pa[i] > 0.0) ga[i] += g[i];
    });
  }
  return out;
}

Tensor reshape(const Tensor& a, Shape shape) {
  check_shape_valid(shape);
  if (shape_numel(shape) != a.numel())
    throw ShapeError("reshape: cannot view " + shape_str(a.shape()) + " as " +
                     shape_str(shape));
  Tensor out = Tensor::from_data(std::move(shape), a.values());
  if (track(a)) {
    out.set_requires_grad(true);
    Tensor ta = a, to = out;
    Tape::active()->record([ta, to]() mutable {
      if (!to.has_grad()) return;
      const auto& g = to.grad_const();
      auto& ga = ta.grad();
      for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    });
  }
  return out;
}

Tensor transpose(const Tensor& a) {
  if (a.rank() != 2) throw ShapeError("transpose expects rank 2, got " + shape_str(a.shape()));
  int64_t m = a.dim(0), n = a.dim(1);
  Tensor out = Tensor::zeros({n, m});
  const double* pa = a.data();
  double* po = out.data();
  for (int64_t i = 0; i < m; ++i)
    for (int64_t j = 0; j < n; ++j) po[j * m + i] = pa[i * n + j];
  if (track(a)) {
    out.set_requires_grad(true);
    Tensor ta = a, to = out;
    Tape::active()->record([ta, to, m, n]() mutable {
      if (!to.has_grad()) return;
      const auto& g = to.grad_const();
      auto& ga = ta.grad();
      for (int64_t i = 0; i < m; ++i)
        for (int64_t j = 0; j < n; ++j) ga[size_t(i * n + j)] += g[size_t(j * m + i)];
    });
  }
  return out;
}

static Tensor reduce(const Tensor& a, bool take_mean) {
  double acc = 0.0;
  const double* pa = a.data();
  for (int64_t i = 0; i < a.numel(); ++i) acc += pa[i];
  double denom = take_mean ? double(a.numel()) : 1.0;
  Tensor out = Tensor::scalar(acc / denom);
  if (track(a)) {
    out.set_requires_grad(true);
    Tensor ta = a, to = out;
    Tape::active()->record([ta, to, denom]() mutable {
      if (!to.has_grad()) return;
      double g = to.grad_const()[0] / denom;
      auto& ga = ta.grad();
      for (size_t i = 0; i < ga.size(); ++i) ga[i] += g;
    });
  }
  return out;
}

Tensor sum(const Tensor& a) { return reduce(a, false); }
Tensor mean(const Tensor& a) { return reduce(a, true); }

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
    throw ShapeError("matmul: incompatible shapes " + shape_str(a.shape()) + " and " +
                     shape_str(b.shape()));
  int64_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor out = Tensor::zeros({m, n});
  kern::gemm_nn(m, k, n, a.data(), b.data(), out.data(), false);
  if (track(a, b)) {
    out.set_requires_grad(true);
    Tensor ta = a, tb = b, to = out;
    Tape::active()->record([ta, tb, to, m, k, n]() mutable {
      if (!to.has_grad()) return;
      const double* g = to.grad_const().data();
      if (ta.requires_grad())  // dA = dC * B^T
        kern::gemm_nt(m, n, k, g, tb.data(), ta.grad().data(), true);
      if (tb.requires_grad())  // dB = A^T * dC
        kern::gemm_tn(k, m, n, ta.data(), g, tb.grad().data(), true);
    });
  }
  return out;
}

Tensor softmax_rows(const Tensor& a) {
  if (a.rank() != 2) throw ShapeError("softmax_rows expects rank 2, got " + shape_str(a.shape()));
  for (double v : a.values())
    if (std::isnan(v)) throw NumericError("softmax_rows: NaN in input");
  int64_t m = a.dim(0), n = a.dim(1);
  Tensor out = Tensor::zeros({m, n});
  const double* pa = a.data();
  double* po = out.data();
  for (int64_t i = 0; i < m; ++i) {
    const double* row = pa + i * n;
    double mx = row[0];
    for (int64_t j = 1; j < n; ++j) mx = std::max(mx, row[j]);
    double z = 0.0;
    for (int64_t j = 0; j < n; ++j) z += std::exp(row[j] - mx);
    for (int64_t j = 0; j < n; ++j) po[i * n + j] = std::exp(row[j] - mx) / z;
  }
  if (track(a)) {
    out.set_requires_grad(true);
    Tensor ta = a, to = out;
    Tape::active()->record([ta, to, m, n]() mutable {
      if (!to.has_grad()) return;
      const auto& g = to.grad_const();
      const double* y = to.data();
      auto& ga = ta.grad();
      // dx_j = y_j * (g_j - sum_i g_i y_i)
      for (int64_t i = 0; i < m; ++i) {
        double dot = 0.0;
        for (int64_t j = 0; j < n; ++j) dot += g[size_t(i * n + j)] * y[i * n + j];
        for (int64_t j = 0; j < n; ++j)
          ga[size_t(i * n + j)] += y[i * n + j] * (g[size_t(i * n + j)] - dot);
      }
    });
  }
  return out;
}

Tensor select0(const Tensor& a, int64_t i) {
  if (a.rank() < 1) throw ShapeError("select0 expects rank >= 1");
  if (i < 0 || i >= a.dim(0))
    throw ShapeError("select0: index " + std::to_string(i) + " out of range for " +
                     shape_str(a.shape()));
  Shape out_shape(a.shape().begin() + 1, a.shape().end());
  int64_t stride = shape_numel(out_shape);
  std::vector<double> vals(a.values().begin() + i * stride,
                           a.values().begin() + (i + 1) * stride);
  Tensor out = Tensor::from_data(out_shape, std::move(vals));
  if (track(a)) {
    out.set_requires_grad(true);
    Tensor ta = a, to = out;
    Tape::active()->record([ta, to, i, stride]() mutable {
      if (!to.has_grad()) return;
      const auto& g = to.grad_const();
      auto& ga = ta.grad();
      for (int64_t j = 0; j < stride; ++j) ga[size_t(i * stride + j)] += g[size_t(j)];
    });
  }
  return out;
}

Tensor stack0(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ShapeError("stack0: empty input");
  const Shape& s0 = parts[0].shape();
  for (const Tensor& p : parts)
    if (p.shape() != s0)
      throw ShapeError("stack0: mismatched shapes " + shape_str(s0) + " and " +
                       shape_str(p.shape()));
  int64_t stride = shape_numel(s0);
  Shape out_shape;
  out_shape.push_back(int64_t(parts.size()));
  out_shape.insert(out_shape.end(), s0.begin(), s0.end());
  Tensor out = Tensor::zeros(out_shape);
  double* po = out.data();
  for (size_t i = 0; i < parts.size(); ++i)
    std::copy(parts[i].data(), parts[i].data() + stride, po + int64_t(i) * stride);
  bool any_rg = false;
  for (const Tensor& p : parts) any_rg |= p.requires_grad();
  if (Tape::recording() && any_rg) {
    out.set_requires_grad(true);
    std::vector<Tensor> tp = parts;
    Tensor to = out;
    Tape::active()->record([tp, to, stride]() mutable {
      if (!to.has_grad()) return;
      const auto& g = to.grad_const();
      for (size_t i = 0; i < tp.size(); ++i) {
        if (!tp[i].requires_grad()) continue;
        auto& gp = tp[i].grad();
        for (int64_t j = 0; j < stride; ++j)
          gp[size_t(j)] += g[size_t(int64_t(i) * stride + j)];
      }
    });
  }
  return out;
}

Tensor concat_channels(const Tensor& a, const Tensor& b) {
  if (a.rank() != 4 || b.rank() != 4 || a.dim(0) != b.dim(0) || a.dim(2) != b.dim(2) ||
      a.dim(3) != b.dim(3))
    throw ShapeError("concat_channels: incompatible shapes " + shape_str(a.shape()) +
                     " and " + shape_str(b.shape()));
  int64_t N = a.dim(0), Ca = a.dim(1), Cb = b.dim(1), H = a.dim(2), W = a.dim(3);
  int64_t hw = H * W;
  Tensor out = Tensor::zeros({N, Ca + Cb, H, W});
  double* po = out.data();
  for (int64_t n = 0; n < N; ++n) {
    std::copy(a.data() + n * Ca * hw, a.data() + (n + 1) * Ca * hw,
              po + n * (Ca + Cb) * hw);
    std::copy(b.data() + n * Cb * hw, b.data() + (n + 1) * Cb * hw,
              po + n * (Ca + Cb) * hw + Ca * hw);
  }
  if (track(a, b)) {
    out.set_requires_grad(true);
    Tensor ta = a, tb = b, to = out;
    Tape::active()->record([ta, tb, to, N, Ca, Cb, hw]() mutable {
      if (!to.has_grad()) return;
      const auto& g = to.grad_const();
      if (ta.requires_grad()) {
        auto& ga = ta.grad();
        for (int64_t n = 0; n < N; ++n)
          for (int64_t i = 0; i < Ca * hw; ++i)
            ga[size_t(n * Ca * hw + i)] += g[size_t(n * (Ca + Cb) * hw + i)];
      }
      if (tb.requires_grad()) {
        auto& gb = tb.grad();
        for (int64_t n = 0; n < N; ++n)
          for (int64_t i = 0; i < Cb * hw; ++i)
            gb[size_t(n * Cb * hw + i)] += g[size_t(n * (Ca + Cb) * hw + Ca * hw + i)];
      }
    });
  }
  return out;
}

}  // namespace nexus
