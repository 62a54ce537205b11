#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "nexus/adapter.hpp"
#include "nexus/data.hpp"
#include "nexus/diffusion.hpp"
#include "nexus/metrics.hpp"
#include "nexus/text_encoder.hpp"
#include "nexus/unet.hpp"

namespace nexus {

// Entry point for the nexus CLI. Returns the process exit code:
// 0 success, 2 usage/config error, 3 numerical failure.
int run_cli(int argc, char** argv);

// ---- training configs -----------------------------------------------------
// JSON keys equal the field names; unknown keys are rejected.

struct PretrainConfig {
  int64_t steps = 4000;
  double lr = 1e-4;
  int64_t warmup = 500;
  int64_t batch = 1;  // samples are processed one at a time; batch*accum
  int64_t accum = 1;  // draws accumulate into each optimizer step
  double cond_dropout = 0.1;
  int64_t timesteps = 200;
  int64_t base = 16;
  std::vector<int64_t> mults = {1, 2, 4, 4};
  int64_t num_res_blocks = 1;
  std::vector<int64_t> attn_scales = {3, 4};
  int64_t temb_dim = 64;
  int64_t text_steps = 3000;
  uint64_t seed = 0;

  UNetConfig unet_config(int64_t image_size) const;
  std::string to_json() const;
  static PretrainConfig from_json(const std::string& text);
};

struct AdapterTrainConfig {
  std::string variant = "prime";
  int64_t stages = 4;  // adapter blocks; missing scales fuse zeros
  int64_t groups = 2;
  int64_t r = 1;
  int64_t steps = 4000;
  double lr = 1e-4;
  int64_t warmup = 500;
  int64_t batch = 1;
  int64_t accum = 1;
  double cond_dropout = 0.1;
  bool prompt_to_adapter = true;
  bool prompt_to_sd = true;
  uint64_t seed = 1;

  // Stage widths follow the backbone's encoder channels.
  AdapterConfig adapter_config(const UNetConfig& unet) const;
  std::string to_json() const;
  static AdapterTrainConfig from_json(const std::string& text);
};

// Full-scale hyperparameters as published; echoed by --dry-run, never run.
AdapterTrainConfig sd_paper_preset();

// ---- pipeline -------------------------------------------------------------

// The generative stack: frozen prompt encoder, denoiser, noise schedule.
struct Backbone {
  TextEncoder text;
  UNet unet;
  DiffusionSchedule sched;
  int64_t image_size = 0;
  Tensor null_text;  // cached encode("")

  Backbone(TextEncoder te, UNet un, DiffusionSchedule sc, int64_t img_size);
};

// Untrained stack; captions seed the text encoder's skip-gram pretraining.
Backbone build_backbone(const PretrainConfig& cfg, int64_t image_size,
                        const std::vector<std::string>& corpus);

// Denoising training of the UNet on (image, caption) pairs. The text encoder
// must already be frozen. Returns the per-step mean losses; progress lines go
// to log when given.
std::vector<double> pretrain_backbone(Backbone& bb, const Dataset& data,
                                      const PretrainConfig& cfg,
                                      std::ostream* log = nullptr);

void save_backbone(const std::string& path, const Backbone& bb,
                   const PretrainConfig& cfg);

// Adapter training against a frozen backbone; returns the trained adapter.
// The backbone's UNet must have been frozen first.
Adapter train_adapter(const Backbone& bb, const Dataset& data,
                      const AdapterTrainConfig& cfg,
                      std::vector<double>* losses = nullptr,
                      std::ostream* log = nullptr);

// Bundle checkpoints hold text.*, unet.* and optionally adapter.* parameters
// plus enough metadata to rebuild every module.
void save_bundle(const std::string& path, const Backbone& bb,
                 const PretrainConfig& pre, const Adapter* adapter,
                 const AdapterTrainConfig* atc);

struct Bundle {
  Backbone backbone;
  std::optional<Adapter> adapter;
  std::optional<AdapterTrainConfig> adapter_cfg;
  PretrainConfig pretrain_cfg;
};
Bundle load_bundle(const std::string& path);

// One [3,S,S] image by classifier-free guided ancestral sampling. Adapter
// features are computed once per branch and reused across timesteps. Passing
// no adapter leaves the backbone unfused; an empty prompt is the
// unconditional model.
Tensor sample_image(const Backbone& bb, const Adapter* adapter,
                    const Tensor* condition, const std::string& prompt,
                    const SampleConfig& cfg, Rng& rng, bool prompt_to_sd = true,
                    bool prompt_to_adapter = true);

struct EvalOptions {
  int64_t limit = -1;  // conditions scored; -1 means the whole set
  int64_t steps = 35;
  double guidance = 7.5;
  uint64_t seed = 0;
  bool use_adapter = true;
  bool use_prompt = true;          // false samples the unconditional model
  bool scramble_prompts = false;   // rotate captions against conditions
  bool compute_frechet = true;
  bool prompt_to_sd = true;
  bool prompt_to_adapter = true;
};

// Samples one image per dataset condition and averages the metrics. Scores
// judge the prompt actually used for sampling, so scrambled runs measure how
// much generated color tracks a mismatched prompt.
EvalReport evaluate(const Backbone& bb, const Adapter* adapter,
                    const Dataset& data, const EvalOptions& opt,
                    std::ostream* log = nullptr);

// P6, 8-bit, round((x+1)*127.5) clamped to [0,255].
void write_ppm(const std::string& path, const Tensor& image);

// ---- gradcheck ------------------------------------------------------------

struct GradCheckRow {
  std::string name;
  double max_rel_err = 0.0;
  double tolerance = 0.0;
  bool pass = false;
};

// scope: "primitives", "blocks" or "end2end".
std::vector<GradCheckRow> run_gradcheck(const std::string& scope);

}  // namespace nexus
