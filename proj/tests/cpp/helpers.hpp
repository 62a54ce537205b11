#pragma once
#include <cmath>
#include <cstdint>
#include <functional>
#include <vector>

#include "nexus/rng.hpp"
#include "nexus/tensor.hpp"

namespace testutil {

inline nexus::Tensor random_tensor(nexus::Shape shape, nexus::Rng& rng,
                                   bool requires_grad = false, double lo = -1.0,
                                   double hi = 1.0) {
  auto t = nexus::Tensor::zeros(shape, requires_grad);
  for (auto& v : t.values()) v = rng.uniform(lo, hi);
  return t;
}

// Random values kept away from zero so relu kinks do not poison finite
// differences.
inline nexus::Tensor random_tensor_off_zero(nexus::Shape shape, nexus::Rng& rng,
                                            bool requires_grad = false) {
  auto t = nexus::Tensor::zeros(shape, requires_grad);
  for (auto& v : t.values()) {
    double m = rng.uniform(0.1, 1.0);
    v = rng.uniform() < 0.5 ? -m : m;
  }
  return t;
}

// a[m x k] * b[k x n], plain triple loop. Reference path, no shared code with
// the library kernels.
inline std::vector<double> naive_matmul(const std::vector<double>& a,
                                        const std::vector<double>& b, int64_t m,
                                        int64_t k, int64_t n) {
  std::vector<double> c(size_t(m * n), 0.0);
  for (int64_t i = 0; i < m; ++i)
    for (int64_t j = 0; j < n; ++j) {
      double acc = 0.0;
      for (int64_t t = 0; t < k; ++t) acc += a[size_t(i * k + t)] * b[size_t(t * n + j)];
      c[size_t(i * n + j)] = acc;
    }
  return c;
}

// Direct grouped convolution, six nested loops over output and kernel.
inline std::vector<double> naive_conv2d(const std::vector<double>& x,
                                        const std::vector<double>& w,
                                        const std::vector<double>& bias, int64_t N,
                                        int64_t C, int64_t H, int64_t W, int64_t Cout,
                                        int64_t k, int64_t stride, int64_t G) {
  int64_t pad = k / 2;
  int64_t Ho = (H + 2 * pad - k) / stride + 1;
  int64_t Wo = (W + 2 * pad - k) / stride + 1;
  int64_t Cg = C / G, Cog = Cout / G;
  std::vector<double> y(size_t(N * Cout * Ho * Wo), 0.0);
  for (int64_t n = 0; n < N; ++n)
    for (int64_t co = 0; co < Cout; ++co) {
      int64_t g = co / Cog;
      for (int64_t oy = 0; oy < Ho; ++oy)
        for (int64_t ox = 0; ox < Wo; ++ox) {
          double acc = bias[size_t(co)];
          for (int64_t ci = 0; ci < Cg; ++ci)
            for (int64_t kh = 0; kh < k; ++kh)
              for (int64_t kw = 0; kw < k; ++kw) {
                int64_t iy = oy * stride + kh - pad;
                int64_t ix = ox * stride + kw - pad;
                if (iy < 0 || iy >= H || ix < 0 || ix >= W) continue;
                acc += x[size_t(((n * C + g * Cg + ci) * H + iy) * W + ix)] *
                       w[size_t(((co * Cg + ci) * k + kh) * k + kw)];
              }
          y[size_t(((n * Cout + co) * Ho + oy) * Wo + ox)] = acc;
        }
    }
  return y;
}

struct GradCheckResult {
  double max_rel_err = 0.0;
  int64_t checked = 0;
};

inline double rel_err(double a, double b) {
  double denom = std::max({std::fabs(a), std::fabs(b), 1e-6});
  return std::fabs(a - b) / denom;
}

// Central finite differences against tape gradients. forward() must rebuild
// the graph from current parameter values and return the scalar loss value.
inline GradCheckResult check_gradients(std::vector<nexus::Tensor> params,
                                       const std::function<nexus::Tensor()>& forward,
                                       nexus::Rng& rng, int64_t samples_per_tensor = 6,
                                       double h = 1e-5) {
  for (auto& p : params) p.zero_grad();
  {
    nexus::Tape tape;
    nexus::Tensor loss = forward();
    tape.backward(loss);
  }
  GradCheckResult res;
  for (auto& p : params) {
    int64_t n = p.numel();
    for (int64_t s = 0; s < samples_per_tensor; ++s) {
      int64_t idx = n <= samples_per_tensor ? s : int64_t(rng.uniform_int(uint64_t(n)));
      if (idx >= n) break;
      double saved = p.data()[idx];
      p.data()[idx] = saved + h;
      double f1 = forward().data()[0];
      p.data()[idx] = saved - h;
      double f2 = forward().data()[0];
      p.data()[idx] = saved;
      double fd = (f1 - f2) / (2 * h);
      double an = p.has_grad() ? p.grad_const()[size_t(idx)] : 0.0;
      // Denominator floor sits above the fd cancellation noise, roughly
      // ulp(loss)/2h. Parameters with exactly zero gradient (per-channel
      // shifts feeding per-channel norms) otherwise fail on rounding dust.
      auto score = [&](double g) {
        return std::fabs(an - g) / std::max({std::fabs(an), std::fabs(g), 1e-4});
      };
      double re = score(fd);
      if (re > 5e-4) {
        // A window straddling a relu kink reads a mix of both slopes. Retry
        // with a 100x finer step: that resolves the local slope, and any
        // probe reaching this branch has |fd| far above the noise floor.
        double hs = h / 100;
        p.data()[idx] = saved + hs;
        double g1 = forward().data()[0];
        p.data()[idx] = saved - hs;
        double g2 = forward().data()[0];
        p.data()[idx] = saved;
        re = std::min(re, score((g1 - g2) / (2 * hs)));
      }
      res.max_rel_err = std::max(res.max_rel_err, re);
      res.checked++;
    }
  }
  return res;
}

}  // namespace testutil
