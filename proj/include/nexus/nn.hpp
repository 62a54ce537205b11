#pragma once
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "nexus/rng.hpp"
#include "nexus/tensor.hpp"

namespace nexus {

// Named parameter list; layers append "<prefix>.<local>" entries.
using ParamMap = std::vector<std::pair<std::string, Tensor>>;

// ---- functional primitives ----------------------------------------------

// x: [N,C,H,W], w: [Cout, C/G, k, k], b: [Cout]. padding = k/2.
// stride 2 requires H and W divisible by 2.
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, int64_t stride,
              int64_t groups);

// Group normalization over [C/G,H,W] slices, eps inside the sqrt.
Tensor group_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  int64_t num_groups, double eps);

// out[n, c*r*r + i*r + j, y, x] = in[n, c, y*r + i, x*r + j]
Tensor pixel_unshuffle(const Tensor& x, int64_t r);
Tensor pixel_shuffle(const Tensor& x, int64_t r);  // inverse

Tensor upsample_nearest2x(const Tensor& x);

// b is [C] or [N,C]; added per channel to x [N,C,H,W].
Tensor add_channel_bias(const Tensor& x, const Tensor& b);

// ---- layers --------------------------------------------------------------

struct Conv2dLayer {
  int64_t in_channels = 0;
  int64_t out_channels = 0;
  int64_t kernel = 3;   // 1 or 3
  int64_t stride = 1;   // 1 or 2
  int64_t groups = 1;
  Tensor weight;  // [out, in/G, k, k]
  Tensor bias;    // [out]

  Conv2dLayer() = default;
  Conv2dLayer(int64_t in, int64_t out, int64_t k, int64_t stride, int64_t groups);

  Tensor forward(const Tensor& x) const { return conv2d(x, weight, bias, stride, groups); }
  int64_t param_count() const;
  void init_he(Rng& rng);
  void init_zero();
  void collect(const std::string& prefix, ParamMap& out);
};

struct NormLayer {
  int64_t num_channels = 0;
  int64_t num_groups = 0;  // min(32, C)
  double eps = 1e-5;
  Tensor gamma;  // [C], init 1
  Tensor beta;   // [C], init 0

  NormLayer() = default;
  explicit NormLayer(int64_t channels);
  Tensor forward(const Tensor& x) const {
    return group_norm(x, gamma, beta, num_groups, eps);
  }
  void collect(const std::string& prefix, ParamMap& out);
};

struct LinearLayer {
  int64_t in_features = 0;
  int64_t out_features = 0;
  Tensor weight;  // [in, out]
  Tensor bias;    // [out]

  LinearLayer() = default;
  LinearLayer(int64_t in, int64_t out);
  Tensor forward(const Tensor& x) const;  // x: [m, in] -> [m, out]
  void init_he(Rng& rng);
  void init_zero();
  void collect(const std::string& prefix, ParamMap& out);
};

void set_requires_grad(ParamMap& params, bool value);
int64_t total_params(const ParamMap& params);
// Order-insensitive content digest used by freeze tests.
uint64_t param_checksum(const ParamMap& params);

}  // namespace nexus
