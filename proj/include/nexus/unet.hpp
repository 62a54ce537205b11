#pragma once

#include <optional>
#include <string>
#include <vector>

#include "nexus/adapter.hpp"
#include "nexus/nn.hpp"
#include "nexus/rng.hpp"
#include "nexus/tensor.hpp"

namespace nexus {

struct UNetConfig {
  int64_t base = 32;
  std::vector<int64_t> mults = {1, 2, 4, 4};
  int64_t num_res_blocks = 2;
  std::vector<int64_t> attn_scales = {3, 4};  // 1-indexed encoder scales
  int64_t temb_dim = 128;
  int64_t img_channels = 3;
  int64_t img_size = 32;

  void validate() const;
  int64_t scales() const { return int64_t(mults.size()); }
  int64_t channels_at(int64_t scale) const {  // 1-indexed
    return base * mults[size_t(scale - 1)];
  }
  bool attn_at(int64_t scale) const;
};

// Encoder feature shapes [C,h,w] per scale; the fusion contract requires these
// to equal the adapter's stage output shapes.
std::vector<Shape> unet_encoder_shapes(const UNetConfig& cfg);

// sin/cos features of an integer timestep, length dim
std::vector<double> timestep_features(int64_t t, int64_t dim);

// U^k (entry of each encoder scale) and the fused variant actually consumed.
struct FusionTrace {
  std::vector<Tensor> pre;
  std::vector<Tensor> post;
};

class UNet {
 public:
  UNet(const UNetConfig& cfg, int64_t d_text, Rng& rng);

  // x: [N,C,S,S]; ts: one timestep per sample; text: [n,d_text] shared by the
  // batch; adapter_features: optional E^k per scale, each [N,C_k,h_k,w_k].
  Tensor forward(const Tensor& x, const std::vector<int64_t>& ts,
                 const Tensor& text,
                 const std::vector<Tensor>* adapter_features = nullptr,
                 FusionTrace* trace = nullptr) const;
  Tensor forward1(const Tensor& x, int64_t t, const Tensor& text,
                  const std::vector<Tensor>* adapter_features = nullptr) const;

  void freeze_backbone(bool frozen);
  bool frozen() const { return frozen_; }

  const UNetConfig& config() const { return cfg_; }
  int64_t d_text() const { return d_text_; }
  ParamMap params(const std::string& prefix) const;
  int64_t param_count() const;

 private:
  struct ResBlock {
    NormLayer norm1;
    Conv2dLayer conv1;
    LinearLayer temb_proj;
    NormLayer norm2;
    Conv2dLayer conv2;
    std::optional<Conv2dLayer> skip;  // 1x1 when channels change

    ResBlock() = default;
    ResBlock(int64_t in, int64_t out, int64_t temb_dim, Rng& rng);
    Tensor forward(const Tensor& x, const Tensor& emb) const;
    void collect(const std::string& prefix, ParamMap& out);
  };

  struct AttnBlock {
    NormLayer norm;
    CrossAttentionBridge bridge;

    AttnBlock() = default;
    AttnBlock(int64_t channels, int64_t d_text, Rng& rng);
    Tensor forward(const Tensor& x, const Tensor& text) const;
    void collect(const std::string& prefix, ParamMap& out);
  };

  struct Scale {
    std::optional<Conv2dLayer> down;  // absent at scale 1
    std::vector<ResBlock> blocks;
    std::optional<AttnBlock> attn;
  };

  struct DecScale {
    std::vector<ResBlock> blocks;  // first consumes the concat skip
    std::optional<AttnBlock> attn;
    std::optional<Conv2dLayer> up;  // conv after nearest-2x, absent at scale 1
  };

  UNetConfig cfg_;
  int64_t d_text_ = 0;
  bool frozen_ = false;

  LinearLayer temb_lin1_, temb_lin2_;
  Conv2dLayer conv_in_;
  std::vector<Scale> enc_;
  ResBlock mid1_, mid2_;
  AttnBlock mid_attn_;
  std::vector<DecScale> dec_;
  NormLayer out_norm_;
  Conv2dLayer conv_out_;

  Tensor embed_timesteps(const std::vector<int64_t>& ts) const;
};

}  // namespace nexus
