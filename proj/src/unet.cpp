#include "nexus/unet.hpp"

#include <algorithm>
#include <cmath>

namespace nexus {

void UNetConfig::validate() const {
  if (base < 1) throw ConfigError("unet base channels must be positive");
  if (mults.empty()) throw ConfigError("unet needs at least one scale");
  if (num_res_blocks < 1) throw ConfigError("num_res_blocks must be >= 1");
  if (temb_dim < 2 || temb_dim % 2)
    throw ConfigError("temb_dim must be even and >= 2");
  int64_t div = int64_t(1) << (scales() - 1);
  if (img_size % div)
    throw ConfigError("img_size " + std::to_string(img_size) +
                      " must be divisible by " + std::to_string(div));
  for (int64_t s : attn_scales)
    if (s < 1 || s > scales())
      throw ConfigError("attention scale " + std::to_string(s) + " out of range");
}

bool UNetConfig::attn_at(int64_t scale) const {
  return std::find(attn_scales.begin(), attn_scales.end(), scale) !=
         attn_scales.end();
}

std::vector<Shape> unet_encoder_shapes(const UNetConfig& cfg) {
  cfg.validate();
  std::vector<Shape> out;
  int64_t s = cfg.img_size;
  for (int64_t k = 1; k <= cfg.scales(); ++k) {
    out.push_back({cfg.channels_at(k), s, s});
    s /= 2;
  }
  return out;
}

std::vector<double> timestep_features(int64_t t, int64_t dim) {
  int64_t half = dim / 2;
  std::vector<double> f(static_cast<size_t>(dim));
  for (int64_t i = 0; i < half; ++i) {
    double freq = std::exp(-std::log(10000.0) * double(i) / double(half));
    f[size_t(i)] = std::sin(double(t) * freq);
    f[size_t(half + i)] = std::cos(double(t) * freq);
  }
  return f;
}

UNet::ResBlock::ResBlock(int64_t in, int64_t out, int64_t temb_dim, Rng& rng)
    : norm1(in), conv1(in, out, 3, 1, 1), temb_proj(temb_dim, out), norm2(out),
      conv2(out, out, 3, 1, 1) {
  conv1.init_he(rng);
  temb_proj.init_he(rng);
  conv2.init_he(rng);
  if (in != out) {
    skip.emplace(in, out, 1, 1, 1);
    skip->init_he(rng);
  }
}

Tensor UNet::ResBlock::forward(const Tensor& x, const Tensor& emb) const {
  Tensor h = conv1.forward(relu(norm1.forward(x)));
  // Timestep shift goes after norm2. With min(32,C) groups the narrow configs
  // normalize per channel, and a per-channel bias added before the norm would
  // be cancelled exactly.
  h = add_channel_bias(norm2.forward(h), temb_proj.forward(emb));
  h = conv2.forward(relu(h));
  Tensor s = skip ? skip->forward(x) : x;
  return add(h, s);
}

void UNet::ResBlock::collect(const std::string& prefix, ParamMap& out) {
  norm1.collect(prefix + "norm1", out);
  conv1.collect(prefix + "conv1", out);
  temb_proj.collect(prefix + "temb", out);
  norm2.collect(prefix + "norm2", out);
  conv2.collect(prefix + "conv2", out);
  if (skip) skip->collect(prefix + "skip", out);
}

UNet::AttnBlock::AttnBlock(int64_t channels, int64_t d_text, Rng& rng)
    : norm(channels), bridge(channels, d_text, channels, false, rng) {}

Tensor UNet::AttnBlock::forward(const Tensor& x, const Tensor& text) const {
  return add(x, bridge.forward(norm.forward(x), text));
}

void UNet::AttnBlock::collect(const std::string& prefix, ParamMap& out) {
  norm.collect(prefix + "norm", out);
  bridge.collect(prefix + "bridge.", out);
}

UNet::UNet(const UNetConfig& cfg, int64_t d_text, Rng& rng)
    : cfg_(cfg), d_text_(d_text) {
  cfg_.validate();
  temb_lin1_ = LinearLayer(cfg_.temb_dim, cfg_.temb_dim);
  temb_lin2_ = LinearLayer(cfg_.temb_dim, cfg_.temb_dim);
  temb_lin1_.init_he(rng);
  temb_lin2_.init_he(rng);
  conv_in_ = Conv2dLayer(cfg_.img_channels, cfg_.channels_at(1), 3, 1, 1);
  conv_in_.init_he(rng);
  for (int64_t k = 1; k <= cfg_.scales(); ++k) {
    Scale sc;
    if (k > 1) {
      sc.down.emplace(cfg_.channels_at(k - 1), cfg_.channels_at(k), 3, 2, 1);
      sc.down->init_he(rng);
    }
    for (int64_t b = 0; b < cfg_.num_res_blocks; ++b)
      sc.blocks.emplace_back(cfg_.channels_at(k), cfg_.channels_at(k),
                             cfg_.temb_dim, rng);
    if (cfg_.attn_at(k)) sc.attn.emplace(cfg_.channels_at(k), d_text, rng);
    enc_.push_back(std::move(sc));
  }
  int64_t cmid = cfg_.channels_at(cfg_.scales());
  mid1_ = ResBlock(cmid, cmid, cfg_.temb_dim, rng);
  mid_attn_ = AttnBlock(cmid, d_text, rng);
  mid2_ = ResBlock(cmid, cmid, cfg_.temb_dim, rng);
  for (int64_t k = cfg_.scales(); k >= 1; --k) {
    DecScale dc;
    int64_t c = cfg_.channels_at(k);
    dc.blocks.emplace_back(2 * c, c, cfg_.temb_dim, rng);  // consumes the skip
    for (int64_t b = 1; b < cfg_.num_res_blocks; ++b)
      dc.blocks.emplace_back(c, c, cfg_.temb_dim, rng);
    if (cfg_.attn_at(k)) dc.attn.emplace(c, d_text, rng);
    if (k > 1) {
      dc.up.emplace(c, cfg_.channels_at(k - 1), 3, 1, 1);
      dc.up->init_he(rng);
    }
    dec_.push_back(std::move(dc));
  }
  out_norm_ = NormLayer(cfg_.channels_at(1));
  conv_out_ = Conv2dLayer(cfg_.channels_at(1), cfg_.img_channels, 3, 1, 1);
  conv_out_.init_he(rng);
}

Tensor UNet::embed_timesteps(const std::vector<int64_t>& ts) const {
  int64_t n = int64_t(ts.size());
  std::vector<double> feats;
  feats.reserve(size_t(n * cfg_.temb_dim));
  for (int64_t i = 0; i < n; ++i) {
    auto f = timestep_features(ts[size_t(i)], cfg_.temb_dim);
    feats.insert(feats.end(), f.begin(), f.end());
  }
  Tensor sin_feats = Tensor::from_data({n, cfg_.temb_dim}, std::move(feats));
  return relu(temb_lin2_.forward(relu(temb_lin1_.forward(sin_feats))));
}

Tensor UNet::forward(const Tensor& x, const std::vector<int64_t>& ts,
                     const Tensor& text,
                     const std::vector<Tensor>* adapter_features,
                     FusionTrace* trace) const {
  if (x.rank() != 4)
    throw ShapeError("unet input must be [N,C,H,W], got " + shape_str(x.shape()));
  if (int64_t(ts.size()) != x.shape()[0])
    throw ShapeError("timestep count " + std::to_string(ts.size()) +
                     " != batch " + std::to_string(x.shape()[0]));
  if (adapter_features && int64_t(adapter_features->size()) != cfg_.scales())
    throw ShapeError("expected " + std::to_string(cfg_.scales()) +
                     " adapter feature maps, got " +
                     std::to_string(adapter_features->size()));
  Tensor emb = embed_timesteps(ts);
  Tensor h = conv_in_.forward(x);
  std::vector<Tensor> skips;
  for (int64_t k = 1; k <= cfg_.scales(); ++k) {
    const Scale& sc = enc_[size_t(k - 1)];
    if (sc.down) h = sc.down->forward(h);
    if (trace) trace->pre.push_back(h);
    if (adapter_features) {
      const Tensor& e = (*adapter_features)[size_t(k - 1)];
      if (e.shape() != h.shape())
        throw ShapeError("fusion shape mismatch at scale " + std::to_string(k) +
                         ": backbone " + shape_str(h.shape()) + " vs adapter " +
                         shape_str(e.shape()));
      h = add(h, e);
    }
    if (trace) trace->post.push_back(h);
    for (const auto& rb : sc.blocks) h = rb.forward(h, emb);
    if (sc.attn) h = sc.attn->forward(h, text);
    skips.push_back(h);
  }
  h = mid1_.forward(h, emb);
  h = mid_attn_.forward(h, text);
  h = mid2_.forward(h, emb);
  for (int64_t k = cfg_.scales(); k >= 1; --k) {
    const DecScale& dc = dec_[size_t(cfg_.scales() - k)];
    h = concat_channels(h, skips[size_t(k - 1)]);
    for (const auto& rb : dc.blocks) h = rb.forward(h, emb);
    if (dc.attn) h = dc.attn->forward(h, text);
    if (dc.up) h = dc.up->forward(upsample_nearest2x(h));
  }
  return conv_out_.forward(relu(out_norm_.forward(h)));
}

Tensor UNet::forward1(const Tensor& x, int64_t t, const Tensor& text,
                      const std::vector<Tensor>* adapter_features) const {
  std::vector<int64_t> ts(size_t(x.shape()[0]), t);
  return forward(x, ts, text, adapter_features);
}

void UNet::freeze_backbone(bool frozen) {
  frozen_ = frozen;
  ParamMap pm = params("");
  set_requires_grad(pm, !frozen);
}

ParamMap UNet::params(const std::string& prefix) const {
  ParamMap out;
  auto* self = const_cast<UNet*>(this);
  self->temb_lin1_.collect(prefix + "temb.lin1", out);
  self->temb_lin2_.collect(prefix + "temb.lin2", out);
  self->conv_in_.collect(prefix + "conv_in", out);
  for (size_t k = 0; k < enc_.size(); ++k) {
    std::string p = prefix + "enc" + std::to_string(k + 1) + ".";
    Scale& sc = self->enc_[k];
    if (sc.down) sc.down->collect(p + "down", out);
    for (size_t b = 0; b < sc.blocks.size(); ++b)
      sc.blocks[b].collect(p + "rb" + std::to_string(b + 1) + ".", out);
    if (sc.attn) sc.attn->collect(p + "attn.", out);
  }
  self->mid1_.collect(prefix + "mid.rb1.", out);
  self->mid_attn_.collect(prefix + "mid.attn.", out);
  self->mid2_.collect(prefix + "mid.rb2.", out);
  for (size_t i = 0; i < dec_.size(); ++i) {
    std::string p = prefix + "dec" + std::to_string(dec_.size() - i) + ".";
    DecScale& dc = self->dec_[i];
    for (size_t b = 0; b < dc.blocks.size(); ++b)
      dc.blocks[b].collect(p + "rb" + std::to_string(b + 1) + ".", out);
    if (dc.attn) dc.attn->collect(p + "attn.", out);
    if (dc.up) dc.up->collect(p + "up", out);
  }
  self->out_norm_.collect(prefix + "out.norm", out);
  self->conv_out_.collect(prefix + "out.conv", out);
  return out;
}

int64_t UNet::param_count() const { return total_params(params("")); }

}  // namespace nexus
