#include "nexus/nn.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

#include "gemm.hpp"

namespace nexus {

// ---- conv2d --------------------------------------------------------------

namespace {

struct ConvDims {
  int64_t N, C, H, W, Cout, k, stride, groups, pad, Ho, Wo;
};

ConvDims conv_dims(const Tensor& x, const Tensor& w, int64_t stride, int64_t groups) {
  if (x.rank() != 4) throw ShapeError("conv2d input must be [N,C,H,W], got " + shape_str(x.shape()));
  if (w.rank() != 4) throw ShapeError("conv2d weight must be [out,in/G,k,k], got " + shape_str(w.shape()));
  ConvDims d;
  d.N = x.dim(0); d.C = x.dim(1); d.H = x.dim(2); d.W = x.dim(3);
  d.Cout = w.dim(0); d.k = w.dim(2); d.stride = stride; d.groups = groups;
  if (d.k != w.dim(3) || (d.k != 1 && d.k != 3))
    throw ShapeError("conv2d kernel must be 1x1 or 3x3, got " + shape_str(w.shape()));
  if (stride != 1 && stride != 2) throw ShapeError("conv2d stride must be 1 or 2");
  if (groups < 1 || d.C % groups || d.Cout % groups)
    throw ShapeError("conv2d groups must divide in and out channels: C=" + std::to_string(d.C) +
                     " out=" + std::to_string(d.Cout) + " G=" + std::to_string(groups));
  if (w.dim(1) != d.C / groups)
    throw ShapeError("conv2d weight " + shape_str(w.shape()) + " does not match input " +
                     shape_str(x.shape()) + " with G=" + std::to_string(groups));
  if (stride == 2 && (d.H % 2 || d.W % 2))
    throw ShapeError("conv2d stride 2 requires even H,W, got " + shape_str(x.shape()));
  d.pad = d.k / 2;
  d.Ho = (d.H + 2 * d.pad - d.k) / stride + 1;
  d.Wo = (d.W + 2 * d.pad - d.k) / stride + 1;
  return d;
}

// cols: [C*k*k, Ho*Wo], row index (c*k + kh)*k + kw
void im2col(const double* x, const ConvDims& d, double* cols) {
  int64_t P = d.Ho * d.Wo;
  for (int64_t c = 0; c < d.C; ++c) {
    for (int64_t kh = 0; kh < d.k; ++kh) {
      for (int64_t kw = 0; kw < d.k; ++kw) {
        double* row = cols + ((c * d.k + kh) * d.k + kw) * P;
        for (int64_t oy = 0; oy < d.Ho; ++oy) {
          int64_t iy = oy * d.stride + kh - d.pad;
          if (iy < 0 || iy >= d.H) {
            std::memset(row + oy * d.Wo, 0, size_t(d.Wo) * sizeof(double));
            continue;
          }
          const double* src = x + (c * d.H + iy) * d.W;
          for (int64_t ox = 0; ox < d.Wo; ++ox) {
            int64_t ix = ox * d.stride + kw - d.pad;
            row[oy * d.Wo + ox] = (ix >= 0 && ix < d.W) ? src[ix] : 0.0;
          }
        }
      }
    }
  }
}

void col2im_acc(const double* cols, const ConvDims& d, double* dx) {
  int64_t P = d.Ho * d.Wo;
  for (int64_t c = 0; c < d.C; ++c) {
    for (int64_t kh = 0; kh < d.k; ++kh) {
      for (int64_t kw = 0; kw < d.k; ++kw) {
        const double* row = cols + ((c * d.k + kh) * d.k + kw) * P;
        for (int64_t oy = 0; oy < d.Ho; ++oy) {
          int64_t iy = oy * d.stride + kh - d.pad;
          if (iy < 0 || iy >= d.H) continue;
          double* dst = dx + (c * d.H + iy) * d.W;
          for (int64_t ox = 0; ox < d.Wo; ++ox) {
            int64_t ix = ox * d.stride + kw - d.pad;
            if (ix >= 0 && ix < d.W) dst[ix] += row[oy * d.Wo + ox];
          }
        }
      }
    }
  }
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, int64_t stride,
              int64_t groups) {
  ConvDims d = conv_dims(x, w, stride, groups);
  if (b.rank() != 1 || b.dim(0) != d.Cout)
    throw ShapeError("conv2d bias must be [out], got " + shape_str(b.shape()));
  int64_t P = d.Ho * d.Wo;
  int64_t Kg = (d.C / d.groups) * d.k * d.k;  // cols rows per group
  int64_t Mg = d.Cout / d.groups;
  Tensor out = Tensor::zeros({d.N, d.Cout, d.Ho, d.Wo});
  static thread_local std::vector<double> cols;
  cols.resize(size_t(d.C * d.k * d.k * P));
  for (int64_t n = 0; n < d.N; ++n) {
    im2col(x.data() + n * d.C * d.H * d.W, d, cols.data());
    double* y = out.data() + n * d.Cout * P;
    for (int64_t g = 0; g < d.groups; ++g) {
      kern::gemm_nn(Mg, Kg, P, w.data() + g * Mg * Kg, cols.data() + g * Kg * P,
                    y + g * Mg * P, false);
    }
    for (int64_t co = 0; co < d.Cout; ++co) {
      double bv = b.data()[co];
      double* row = y + co * P;
      for (int64_t p = 0; p < P; ++p) row[p] += bv;
    }
  }
  bool rg = Tape::recording() && (x.requires_grad() || w.requires_grad() || b.requires_grad());
  if (rg) {
    out.set_requires_grad(true);
    Tensor tx = x, tw = w, tb = b, to = out;
    Tape::active()->record([tx, tw, tb, to, d, P, Kg, Mg]() mutable {
      if (!to.has_grad()) return;
      const double* gy = to.grad_const().data();
      static thread_local std::vector<double> cols_b, dcols;
      if (tb.requires_grad()) {
        auto& gb = tb.grad();
        for (int64_t n = 0; n < d.N; ++n)
          for (int64_t co = 0; co < d.Cout; ++co) {
            const double* row = gy + (n * d.Cout + co) * P;
            double acc = 0.0;
            for (int64_t p = 0; p < P; ++p) acc += row[p];
            gb[size_t(co)] += acc;
          }
      }
      if (tw.requires_grad() || tx.requires_grad()) {
        cols_b.resize(size_t(d.C * d.k * d.k * P));
        if (tx.requires_grad()) dcols.resize(size_t(d.C * d.k * d.k * P));
        for (int64_t n = 0; n < d.N; ++n) {
          const double* gyn = gy + n * d.Cout * P;
          if (tw.requires_grad()) {
            im2col(tx.data() + n * d.C * d.H * d.W, d, cols_b.data());
            auto& gw = tw.grad();
            for (int64_t g = 0; g < d.groups; ++g)
              kern::gemm_nt(Mg, P, Kg, gyn + g * Mg * P, cols_b.data() + g * Kg * P,
                            gw.data() + g * Mg * Kg, true);
          }
          if (tx.requires_grad()) {
            for (int64_t g = 0; g < d.groups; ++g)
              kern::gemm_tn(Kg, Mg, P, tw.data() + g * Mg * Kg, gyn + g * Mg * P,
                            dcols.data() + g * Kg * P, false);
            col2im_acc(dcols.data(), d, tx.grad().data() + n * d.C * d.H * d.W);
          }
        }
      }
    });
  }
  return out;
}

// ---- group_norm ----------------------------------------------------------

Tensor group_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  int64_t num_groups, double eps) {
  if (x.rank() != 4) throw ShapeError("group_norm input must be [N,C,H,W], got " + shape_str(x.shape()));
  int64_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  if (num_groups < 1 || C % num_groups)
    throw ConfigError("group_norm: channels " + std::to_string(C) +
                      " not divisible by groups " + std::to_string(num_groups));
  if (gamma.numel() != C || beta.numel() != C)
    throw ShapeError("group_norm affine params must be [C]");
  int64_t cg = C / num_groups;      // channels per group
  int64_t M = cg * H * W;           // elements per group
  Tensor out = Tensor::zeros(x.shape());
  std::vector<double> means(size_t(N * num_groups)), inv_stds(size_t(N * num_groups));
  const double* px = x.data();
  double* po = out.data();
  for (int64_t n = 0; n < N; ++n) {
    for (int64_t g = 0; g < num_groups; ++g) {
      const double* xs = px + (n * C + g * cg) * H * W;
      double m = 0.0;
      for (int64_t i = 0; i < M; ++i) m += xs[i];
      m /= double(M);
      double v = 0.0;
      for (int64_t i = 0; i < M; ++i) {
        double dlt = xs[i] - m;
        v += dlt * dlt;
      }
      v /= double(M);
      double istd = 1.0 / std::sqrt(v + eps);
      means[size_t(n * num_groups + g)] = m;
      inv_stds[size_t(n * num_groups + g)] = istd;
      double* ys = po + (n * C + g * cg) * H * W;
      for (int64_t c = 0; c < cg; ++c) {
        double ga = gamma.data()[g * cg + c];
        double be = beta.data()[g * cg + c];
        const double* xc = xs + c * H * W;
        double* yc = ys + c * H * W;
        for (int64_t i = 0; i < H * W; ++i) yc[i] = ga * (xc[i] - m) * istd + be;
      }
    }
  }
  bool rg = Tape::recording() &&
            (x.requires_grad() || gamma.requires_grad() || beta.requires_grad());
  if (rg) {
    out.set_requires_grad(true);
    Tensor tx = x, tg = gamma, tb = beta, to = out;
    Tape::active()->record([tx, tg, tb, to, N, C, H, W, num_groups, cg, M, means,
                            inv_stds]() mutable {
      if (!to.has_grad()) return;
      const double* gy = to.grad_const().data();
      const double* px = tx.data();
      for (int64_t n = 0; n < N; ++n) {
        for (int64_t g = 0; g < num_groups; ++g) {
          double m = means[size_t(n * num_groups + g)];
          double istd = inv_stds[size_t(n * num_groups + g)];
          const double* xs = px + (n * C + g * cg) * H * W;
          const double* gys = gy + (n * C + g * cg) * H * W;
          if (tg.requires_grad() || tb.requires_grad()) {
            for (int64_t c = 0; c < cg; ++c) {
              double acc_g = 0.0, acc_b = 0.0;
              for (int64_t i = 0; i < H * W; ++i) {
                double xhat = (xs[c * H * W + i] - m) * istd;
                acc_g += gys[c * H * W + i] * xhat;
                acc_b += gys[c * H * W + i];
              }
              if (tg.requires_grad()) tg.grad()[size_t(g * cg + c)] += acc_g;
              if (tb.requires_grad()) tb.grad()[size_t(g * cg + c)] += acc_b;
            }
          }
          if (tx.requires_grad()) {
            // dx = istd * (dxhat - mean(dxhat) - xhat * mean(dxhat*xhat))
            double sum_dxh = 0.0, sum_dxh_xh = 0.0;
            for (int64_t c = 0; c < cg; ++c) {
              double ga = tg.data()[g * cg + c];
              for (int64_t i = 0; i < H * W; ++i) {
                double dxh = gys[c * H * W + i] * ga;
                double xhat = (xs[c * H * W + i] - m) * istd;
                sum_dxh += dxh;
                sum_dxh_xh += dxh * xhat;
              }
            }
            double mean_dxh = sum_dxh / double(M);
            double mean_dxh_xh = sum_dxh_xh / double(M);
            auto& gx = tx.grad();
            int64_t base = (n * C + g * cg) * H * W;
            for (int64_t c = 0; c < cg; ++c) {
              double ga = tg.data()[g * cg + c];
              for (int64_t i = 0; i < H * W; ++i) {
                double dxh = gys[c * H * W + i] * ga;
                double xhat = (xs[c * H * W + i] - m) * istd;
                gx[size_t(base + c * H * W + i)] +=
                    istd * (dxh - mean_dxh - xhat * mean_dxh_xh);
              }
            }
          }
        }
      }
    });
  }
  return out;
}

// ---- pixel shuffle -------------------------------------------------------

Tensor pixel_unshuffle(const Tensor& x, int64_t r) {
  if (x.rank() != 4) throw ShapeError("pixel_unshuffle input must be [N,C,H,W]");
  if (r < 1) throw ShapeError("pixel_unshuffle factor must be >= 1");
  int64_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  if (H % r || W % r)
    throw ShapeError("pixel_unshuffle: H,W " + shape_str(x.shape()) +
                     " not divisible by r=" + std::to_string(r));
  int64_t Ho = H / r, Wo = W / r;
  Tensor out = Tensor::zeros({N, C * r * r, Ho, Wo});
  const double* px = x.data();
  double* po = out.data();
  for (int64_t n = 0; n < N; ++n)
    for (int64_t c = 0; c < C; ++c)
      for (int64_t i = 0; i < r; ++i)
        for (int64_t j = 0; j < r; ++j) {
          int64_t co = c * r * r + i * r + j;
          for (int64_t y = 0; y < Ho; ++y)
            for (int64_t xx = 0; xx < Wo; ++xx)
              po[((n * C * r * r + co) * Ho + y) * Wo + xx] =
                  px[((n * C + c) * H + y * r + i) * W + xx * r + j];
        }
  if (Tape::recording() && x.requires_grad()) {
    out.set_requires_grad(true);
    Tensor tx = x, to = out;
    Tape::active()->record([tx, to, N, C, H, W, r, Ho, Wo]() mutable {
      if (!to.has_grad()) return;
      const auto& g = to.grad_const();
      auto& gx = tx.grad();
      for (int64_t n = 0; n < N; ++n)
        for (int64_t c = 0; c < C; ++c)
          for (int64_t i = 0; i < r; ++i)
            for (int64_t j = 0; j < r; ++j) {
              int64_t co = c * r * r + i * r + j;
              for (int64_t y = 0; y < Ho; ++y)
                for (int64_t xx = 0; xx < Wo; ++xx)
                  gx[size_t(((n * C + c) * H + y * r + i) * W + xx * r + j)] +=
                      g[size_t(((n * C * r * r + co) * Ho + y) * Wo + xx)];
            }
    });
  }
  return out;
}

Tensor pixel_shuffle(const Tensor& x, int64_t r) {
  if (x.rank() != 4) throw ShapeError("pixel_shuffle input must be [N,C,H,W]");
  int64_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  if (C % (r * r)) throw ShapeError("pixel_shuffle: channels not divisible by r^2");
  int64_t Co = C / (r * r);
  Tensor out = Tensor::zeros({N, Co, H * r, W * r});
  const double* px = x.data();
  double* po = out.data();
  for (int64_t n = 0; n < N; ++n)
    for (int64_t c = 0; c < Co; ++c)
      for (int64_t i = 0; i < r; ++i)
        for (int64_t j = 0; j < r; ++j) {
          int64_t ci = c * r * r + i * r + j;
          for (int64_t y = 0; y < H; ++y)
            for (int64_t xx = 0; xx < W; ++xx)
              po[((n * Co + c) * H * r + y * r + i) * W * r + xx * r + j] =
                  px[((n * C + ci) * H + y) * W + xx];
        }
  if (Tape::recording() && x.requires_grad()) {
    out.set_requires_grad(true);
    Tensor tx = x, to = out;
    Tape::active()->record([tx, to, N, C, Co, H, W, r]() mutable {
      if (!to.has_grad()) return;
      const auto& g = to.grad_const();
      auto& gx = tx.grad();
      for (int64_t n = 0; n < N; ++n)
        for (int64_t c = 0; c < Co; ++c)
          for (int64_t i = 0; i < r; ++i)
            for (int64_t j = 0; j < r; ++j) {
              int64_t ci = c * r * r + i * r + j;
              for (int64_t y = 0; y < H; ++y)
                for (int64_t xx = 0; xx < W; ++xx)
                  gx[size_t(((n * C + ci) * H + y) * W + xx)] +=
                      g[size_t(((n * Co + c) * H * r + y * r + i) * W * r + xx * r + j)];
            }
    });
  }
  return out;
}

Tensor upsample_nearest2x(const Tensor& x) {
  if (x.rank() != 4) throw ShapeError("upsample_nearest2x input must be [N,C,H,W]");
  int64_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  Tensor out = Tensor::zeros({N, C, H * 2, W * 2});
  const double* px = x.data();
  double* po = out.data();
  for (int64_t nc = 0; nc < N * C; ++nc)
    for (int64_t y = 0; y < H * 2; ++y)
      for (int64_t xx = 0; xx < W * 2; ++xx)
        po[(nc * H * 2 + y) * W * 2 + xx] = px[(nc * H + y / 2) * W + xx / 2];
  if (Tape::recording() && x.requires_grad()) {
    out.set_requires_grad(true);
    Tensor tx = x, to = out;
    Tape::active()->record([tx, to, N, C, H, W]() mutable {
      if (!to.has_grad()) return;
      const auto& g = to.grad_const();
      auto& gx = tx.grad();
      for (int64_t nc = 0; nc < N * C; ++nc)
        for (int64_t y = 0; y < H * 2; ++y)
          for (int64_t xx = 0; xx < W * 2; ++xx)
            gx[size_t((nc * H + y / 2) * W + xx / 2)] +=
                g[size_t((nc * H * 2 + y) * W * 2 + xx)];
    });
  }
  return out;
}

Tensor add_channel_bias(const Tensor& x, const Tensor& b) {
  if (x.rank() != 4) throw ShapeError("add_channel_bias input must be [N,C,H,W]");
  int64_t N = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
  bool per_sample = b.rank() == 2;
  if (!((b.rank() == 1 && b.dim(0) == C) ||
        (per_sample && b.dim(0) == N && b.dim(1) == C)))
    throw ShapeError("add_channel_bias: bias " + shape_str(b.shape()) +
                     " incompatible with " + shape_str(x.shape()));
  Tensor out = Tensor::zeros(x.shape());
  const double* px = x.data();
  const double* pb = b.data();
  double* po = out.data();
  for (int64_t n = 0; n < N; ++n)
    for (int64_t c = 0; c < C; ++c) {
      double bv = per_sample ? pb[n * C + c] : pb[c];
      const double* xs = px + (n * C + c) * HW;
      double* ys = po + (n * C + c) * HW;
      for (int64_t i = 0; i < HW; ++i) ys[i] = xs[i] + bv;
    }
  if (Tape::recording() && (x.requires_grad() || b.requires_grad())) {
    out.set_requires_grad(true);
    Tensor tx = x, tb = b, to = out;
    Tape::active()->record([tx, tb, to, N, C, HW]() mutable {
      if (!to.has_grad()) return;
      const auto& g = to.grad_const();
      if (tx.requires_grad()) {
        auto& gx = tx.grad();
        for (size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
      }
      if (tb.requires_grad()) {
        auto& gb = tb.grad();
        bool per_sample = tb.rank() == 2;
        for (int64_t n = 0; n < N; ++n)
          for (int64_t c = 0; c < C; ++c) {
            double acc = 0.0;
            for (int64_t i = 0; i < HW; ++i) acc += g[size_t((n * C + c) * HW + i)];
            gb[size_t(per_sample ? n * C + c : c)] += acc;
          }
      }
    });
  }
  return out;
}

// ---- layers --------------------------------------------------------------

Conv2dLayer::Conv2dLayer(int64_t in, int64_t out, int64_t k, int64_t stride_,
                         int64_t groups_)
    : in_channels(in), out_channels(out), kernel(k), stride(stride_), groups(groups_) {
  if (k != 1 && k != 3) throw ConfigError("conv kernel must be 1 or 3");
  if (stride != 1 && stride != 2) throw ConfigError("conv stride must be 1 or 2");
  if (groups < 1 || in % groups || out % groups)
    throw ConfigError("conv groups " + std::to_string(groups) + " must divide channels " +
                      std::to_string(in) + "->" + std::to_string(out));
  weight = Tensor::zeros({out, in / groups, k, k}, true);
  bias = Tensor::zeros({out}, true);
}

int64_t Conv2dLayer::param_count() const {
  return out_channels * (in_channels / groups) * kernel * kernel + out_channels;
}

void Conv2dLayer::init_he(Rng& rng) {
  double fan_in = double((in_channels / groups) * kernel * kernel);
  double sd = std::sqrt(2.0 / fan_in);
  for (auto& v : weight.values()) v = rng.normal() * sd;
  std::fill(bias.values().begin(), bias.values().end(), 0.0);
}

void Conv2dLayer::init_zero() {
  std::fill(weight.values().begin(), weight.values().end(), 0.0);
  std::fill(bias.values().begin(), bias.values().end(), 0.0);
}

void Conv2dLayer::collect(const std::string& prefix, ParamMap& out) {
  out.emplace_back(prefix + ".weight", weight);
  out.emplace_back(prefix + ".bias", bias);
}

NormLayer::NormLayer(int64_t channels) : num_channels(channels) {
  num_groups = std::min<int64_t>(32, channels);
  if (channels % num_groups)
    throw ConfigError("norm channels " + std::to_string(channels) +
                      " not divisible by groups " + std::to_string(num_groups));
  gamma = Tensor::full({channels}, 1.0, true);
  beta = Tensor::zeros({channels}, true);
}

void NormLayer::collect(const std::string& prefix, ParamMap& out) {
  out.emplace_back(prefix + ".gamma", gamma);
  out.emplace_back(prefix + ".beta", beta);
}

LinearLayer::LinearLayer(int64_t in, int64_t out)
    : in_features(in), out_features(out) {
  weight = Tensor::zeros({in, out}, true);
  bias = Tensor::zeros({out}, true);
}

Tensor LinearLayer::forward(const Tensor& x) const {
  return add(matmul(x, weight), bias);
}

void LinearLayer::init_he(Rng& rng) {
  double sd = std::sqrt(2.0 / double(in_features));
  for (auto& v : weight.values()) v = rng.normal() * sd;
  std::fill(bias.values().begin(), bias.values().end(), 0.0);
}

void LinearLayer::init_zero() {
  std::fill(weight.values().begin(), weight.values().end(), 0.0);
  std::fill(bias.values().begin(), bias.values().end(), 0.0);
}

void LinearLayer::collect(const std::string& prefix, ParamMap& out) {
  out.emplace_back(prefix + ".weight", weight);
  out.emplace_back(prefix + ".bias", bias);
}

void set_requires_grad(ParamMap& params, bool value) {
  for (auto& [name, t] : params) t.set_requires_grad(value);
}

int64_t total_params(const ParamMap& params) {
  int64_t n = 0;
  for (const auto& [name, t] : params) n += t.numel();
  return n;
}

uint64_t param_checksum(const ParamMap& params) {
  uint64_t sum = 0;
  for (const auto& [name, t] : params) {
    uint64_t h = 1469598103934665603ull;  // FNV offset
    for (char c : name) h = (h ^ uint64_t(uint8_t(c))) * 1099511628211ull;
    for (double v : t.values()) {
      uint64_t bits;
      std::memcpy(&bits, &v, sizeof bits);
      h = (h ^ bits) * 1099511628211ull;
    }
    sum ^= h;
  }
  return sum;
}

}  // namespace nexus
