#pragma once

#include <optional>
#include <string>
#include <vector>

#include "nexus/nn.hpp"
#include "nexus/rng.hpp"
#include "nexus/tensor.hpp"

namespace nexus {

// Single-head text-to-feature attention. Queries come from flattened spatial
// positions, keys/values from the prompt embedding rows. forward returns the
// attention term only; callers add the residual.
struct CrossAttentionBridge {
  int64_t channels = 0;
  int64_t d_text = 0;
  int64_t d_attn = 0;
  LinearLayer wq;  // C -> d_attn
  LinearLayer wk;  // d_text -> d_attn
  LinearLayer wv;  // d_text -> d_attn
  LinearLayer wo;  // d_attn -> C

  CrossAttentionBridge() = default;
  CrossAttentionBridge(int64_t channels, int64_t d_text, int64_t d_attn,
                       bool zero_init_out, Rng& rng);

  // x: [C,H,W] or [N,C,H,W]; text: [n,d_text]. Result shape equals x.
  Tensor forward(const Tensor& x, const Tensor& text) const;
  int64_t param_count() const;
  void collect(const std::string& prefix, ParamMap& out);
};

// Dense variant block: two conv pairs (3x3 then 1x1), norm, attention residual.
struct PrimeBlock {
  int64_t in_channels = 0, out_channels = 0;
  Conv2dLayer conv3a, conv1a, conv3b, conv1b;
  NormLayer norm;
  CrossAttentionBridge attn;

  PrimeBlock() = default;
  PrimeBlock(int64_t in, int64_t out, int64_t d_text, int64_t d_attn,
             bool zero_init_attn_out, Rng& rng);
  Tensor forward(const Tensor& x, const Tensor& text) const;
  int64_t param_count() const;
  void collect(const std::string& prefix, ParamMap& out);
};

// Grouped variant block: two transformation units, each built around a
// grouped 3x3 conv, glued by pointwise convs; residual ReLU after unit one.
struct SlimBlock {
  int64_t in_channels = 0, out_channels = 0, groups = 2;
  std::optional<Conv2dLayer> entry;  // 1x1 channel map when in != out
  Conv2dLayer dw1, pw1, pw2, dw2, pw3, pw4;
  NormLayer norm;
  CrossAttentionBridge attn;

  SlimBlock() = default;
  SlimBlock(int64_t in, int64_t out, int64_t groups, int64_t d_text,
            int64_t d_attn, bool zero_init_attn_out, Rng& rng);
  Tensor forward(const Tensor& x, const Tensor& text) const;
  int64_t param_count() const;
  void collect(const std::string& prefix, ParamMap& out);
};

enum class AdapterVariant { Prime, Slim };

std::string to_string(AdapterVariant v);
AdapterVariant adapter_variant_from_string(const std::string& s);

struct AdapterConfig {
  AdapterVariant variant = AdapterVariant::Prime;
  int64_t stages = 4;
  std::vector<int64_t> schedule = {32, 64, 128, 128};
  int64_t r = 1;        // pixel-unshuffle factor on the condition image
  int64_t groups = 2;   // Slim only
  std::string d_a_policy = "match-channels";
  bool zero_init_attn_out = true;
  int64_t attn_heads = 1;

  void validate() const;
  int64_t d_attn_for(int64_t channels) const;
  int64_t entry_channels() const { return 3 * r * r; }

  std::string to_json() const;
  // Exact field names; unknown keys are an error.
  static AdapterConfig from_json(const std::string& json_text);

  static AdapterConfig toy32(AdapterVariant v = AdapterVariant::Prime);
  static AdapterConfig toy128(AdapterVariant v = AdapterVariant::Prime);
  static AdapterConfig full_prime();
  static AdapterConfig full_slim(int64_t groups = 2);
};

// Expected output shapes ([C,h,w] per stage) for a given condition size,
// without building the network.
std::vector<Shape> adapter_output_shapes(const AdapterConfig& cfg, int64_t h,
                                         int64_t w);

// K-stage pipeline: unshuffle, blocks, inter-stage stride-2 downsample.
class Adapter {
 public:
  Adapter(const AdapterConfig& cfg, int64_t d_text, Rng& rng);

  // ic: [3,H,W] or [N,3,H,W]; text: [n,d_text]. Returns E^1..E^K with ranks
  // matching the input.
  std::vector<Tensor> forward(const Tensor& ic, const Tensor& text) const;

  const AdapterConfig& config() const { return cfg_; }
  int64_t d_text() const { return d_text_; }
  ParamMap params(const std::string& prefix) const;
  int64_t param_count() const;

  std::vector<PrimeBlock>& prime_blocks() { return prime_; }
  std::vector<SlimBlock>& slim_blocks() { return slim_; }
  std::vector<Conv2dLayer>& downsamples() { return phi_; }

 private:
  AdapterConfig cfg_;
  int64_t d_text_ = 0;
  std::vector<PrimeBlock> prime_;
  std::vector<SlimBlock> slim_;
  std::vector<Conv2dLayer> phi_;  // K-1 channel-preserving stride-2 convs
};

}  // namespace nexus
