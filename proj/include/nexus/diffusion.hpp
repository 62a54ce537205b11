#pragma once

#include <functional>
#include <string>
#include <vector>

#include "nexus/nn.hpp"
#include "nexus/rng.hpp"
#include "nexus/serialize.hpp"
#include "nexus/tensor.hpp"

namespace nexus {

// Variance schedule with the cumulative products precomputed. beta_tilde is
// the posterior variance of the unit-stride chain; index 0 is 0 (the final
// denoising step draws no noise).
struct DiffusionSchedule {
  int64_t T = 0;
  std::vector<double> beta;
  std::vector<double> alpha;       // 1 - beta
  std::vector<double> alpha_bar;   // running product of alpha
  std::vector<double> beta_tilde;

  static DiffusionSchedule linear(int64_t T, double beta_start = 1e-4,
                                  double beta_end = 0.02);
};

// x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps
Tensor q_sample(const Tensor& x0, int64_t t, const Tensor& eps,
                const DiffusionSchedule& sched);

// mean((a - b)^2), recorded on the active tape
Tensor mse(const Tensor& a, const Tensor& b);

// One training example. Draws, in this order: t uniform in [0,T), the
// null-conditioning coin (probability cond_dropout), eps elementwise normal.
// model(x_t, t, use_null) returns the predicted noise; the result is the mse
// against the drawn eps.
Tensor ddpm_loss_sample(
    const std::function<Tensor(const Tensor& xt, int64_t t, bool use_null)>& model,
    const Tensor& x0, double cond_dropout, const DiffusionSchedule& sched,
    Rng& rng);

// eps_u + s (eps_c - eps_u). s = 0 and s = 1 return the branch tensor itself
// so the identities hold exactly, not just to rounding.
Tensor classifier_free_mix(const Tensor& uncond, const Tensor& cond, double s);

// Evenly spaced descending subset of {0..T-1}; always visits T-1 and, for
// steps > 1, ends at 0.
std::vector<int64_t> sample_timesteps(int64_t T, int64_t steps);

struct SampleConfig {
  int64_t steps = 35;
  double guidance = 7.5;
  bool clamp_denoised = true;  // clamp the x0 estimate to [-1, 1] each step
};

// model(x, t, conditional) -> predicted noise, same shape as x. The
// conditional branch is never evaluated at guidance 0, nor the unconditional
// branch at guidance 1.
using EpsModel = std::function<Tensor(const Tensor& x, int64_t t, bool conditional)>;

// Ancestral sampler over the strided subset, posterior variance of the
// strided chain (reduces to beta_tilde at stride 1). Runs without autodiff.
Tensor p_sample_loop(const EpsModel& model, const Shape& shape,
                     const DiffusionSchedule& sched, const SampleConfig& cfg,
                     Rng& rng);

struct AdamWConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-2;  // decoupled
  int64_t warmup = 500;        // linear ramp in steps, 0 disables
};

class AdamW {
 public:
  AdamW(ParamMap params, AdamWConfig cfg);

  void zero_grad();
  // Applies one update from the current grads. Throws NumericError naming the
  // parameter if any gradient is non-finite.
  void step();

  int64_t steps_done() const { return t_; }
  // lr after warmup scaling, as of the NEXT step
  double current_lr() const;

  // Moment buffers as named tensors ("<param>.adam_m" / "<param>.adam_v");
  // the returned handles alias internal state, so load_into restores in place.
  ParamMap state_tensors();
  void set_steps_done(int64_t t) { t_ = t; }

 private:
  ParamMap params_;
  AdamWConfig cfg_;
  std::vector<Tensor> m_, v_;
  int64_t t_ = 0;
};

}  // namespace nexus
