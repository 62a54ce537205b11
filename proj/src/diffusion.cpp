#include "nexus/diffusion.hpp"

#include <algorithm>
#include <cmath>

namespace nexus {

DiffusionSchedule DiffusionSchedule::linear(int64_t T, double beta_start,
                                            double beta_end) {
  if (T < 1) throw ConfigError("schedule needs at least one step");
  DiffusionSchedule s;
  s.T = T;
  s.beta.resize(size_t(T));
  s.alpha.resize(size_t(T));
  s.alpha_bar.resize(size_t(T));
  s.beta_tilde.resize(size_t(T));
  double prod = 1.0;
  for (int64_t t = 0; t < T; ++t) {
    double b = T == 1 ? beta_start
                      : beta_start + (beta_end - beta_start) * double(t) /
                                         double(T - 1);
    s.beta[size_t(t)] = b;
    s.alpha[size_t(t)] = 1.0 - b;
    prod *= 1.0 - b;
    s.alpha_bar[size_t(t)] = prod;
  }
  s.beta_tilde[0] = 0.0;
  for (int64_t t = 1; t < T; ++t)
    s.beta_tilde[size_t(t)] = (1.0 - s.alpha_bar[size_t(t - 1)]) /
                              (1.0 - s.alpha_bar[size_t(t)]) * s.beta[size_t(t)];
  return s;
}

Tensor q_sample(const Tensor& x0, int64_t t, const Tensor& eps,
                const DiffusionSchedule& sched) {
  if (t < 0 || t >= sched.T)
    throw ConfigError("timestep " + std::to_string(t) + " outside schedule of " +
                      std::to_string(sched.T));
  double ab = sched.alpha_bar[size_t(t)];
  return add(scale(x0, std::sqrt(ab)), scale(eps, std::sqrt(1.0 - ab)));
}

Tensor mse(const Tensor& a, const Tensor& b) {
  Tensor d = sub(a, b);
  return mean(mul(d, d));
}

Tensor ddpm_loss_sample(
    const std::function<Tensor(const Tensor& xt, int64_t t, bool use_null)>& model,
    const Tensor& x0, double cond_dropout, const DiffusionSchedule& sched,
    Rng& rng) {
  int64_t t = int64_t(rng.uniform_int(uint64_t(sched.T)));
  // the coin is drawn even at rate 0 so the stream layout never depends on it
  bool use_null = rng.uniform() < cond_dropout;
  Tensor eps = Tensor::zeros(x0.shape());
  for (auto& v : eps.values()) v = rng.normal();
  Tensor xt = q_sample(x0, t, eps, sched);
  return mse(model(xt, t, use_null), eps);
}

Tensor classifier_free_mix(const Tensor& uncond, const Tensor& cond, double s) {
  if (s == 0.0) return uncond;
  if (s == 1.0) return cond;
  return add(uncond, scale(sub(cond, uncond), s));
}

std::vector<int64_t> sample_timesteps(int64_t T, int64_t steps) {
  if (steps < 1 || steps > T)
    throw ConfigError("sample steps " + std::to_string(steps) +
                      " must lie in [1, " + std::to_string(T) + "]");
  if (steps == 1) return {T - 1};
  std::vector<int64_t> out;
  out.reserve(size_t(steps));
  for (int64_t i = 0; i < steps; ++i)
    out.push_back(llround(double(T - 1) * double(steps - 1 - i) /
                          double(steps - 1)));
  return out;
}

Tensor p_sample_loop(const EpsModel& model, const Shape& shape,
                     const DiffusionSchedule& sched, const SampleConfig& cfg,
                     Rng& rng) {
  auto ts = sample_timesteps(sched.T, cfg.steps);
  // draw order: the initial state takes numel normals in flat index order,
  // then every step except the last takes numel more
  Tensor x = Tensor::zeros(shape);
  for (auto& v : x.values()) v = rng.normal();
  for (size_t k = 0; k < ts.size(); ++k) {
    int64_t t = ts[k];
    int64_t tp = k + 1 < ts.size() ? ts[k + 1] : -1;
    Tensor eh;
    if (cfg.guidance == 0.0) {
      eh = model(x, t, false);
    } else if (cfg.guidance == 1.0) {
      eh = model(x, t, true);
    } else {
      Tensor u = model(x, t, false);
      Tensor c = model(x, t, true);
      eh = classifier_free_mix(u, c, cfg.guidance);
    }
    if (eh.shape() != x.shape())
      throw ShapeError("noise prediction " + shape_str(eh.shape()) +
                       " does not match state " + shape_str(x.shape()));
    double ab = sched.alpha_bar[size_t(t)];
    double abp = tp >= 0 ? sched.alpha_bar[size_t(tp)] : 1.0;
    double aeff = ab / abp;
    double beff = 1.0 - aeff;
    double s_ab = std::sqrt(ab);
    double s_1ab = std::sqrt(1.0 - ab);
    double c0 = std::sqrt(abp) * beff / (1.0 - ab);
    double cx = std::sqrt(aeff) * (1.0 - abp) / (1.0 - ab);
    double sigma = tp >= 0 ? std::sqrt((1.0 - abp) / (1.0 - ab) * beff) : 0.0;
    Tensor next = Tensor::zeros(shape);
    for (int64_t i = 0; i < x.numel(); ++i) {
      double x0h = (x.data()[i] - s_1ab * eh.data()[i]) / s_ab;
      if (cfg.clamp_denoised) x0h = std::min(1.0, std::max(-1.0, x0h));
      next.data()[i] = c0 * x0h + cx * x.data()[i];
    }
    if (tp >= 0)
      for (int64_t i = 0; i < next.numel(); ++i)
        next.data()[i] += sigma * rng.normal();
    x = next;
  }
  return x;
}

AdamW::AdamW(ParamMap params, AdamWConfig cfg)
    : params_(std::move(params)), cfg_(cfg) {
  m_.reserve(params_.size());
  v_.reserve(params_.size());
  for (auto& [name, p] : params_) {
    m_.push_back(Tensor::zeros(p.shape()));
    v_.push_back(Tensor::zeros(p.shape()));
  }
}

void AdamW::zero_grad() {
  for (auto& [name, p] : params_) p.zero_grad();
}

void AdamW::step() {
  for (auto& [name, p] : params_)
    if (p.has_grad())
      for (double g : p.grad_const())
        if (!std::isfinite(g))
          throw NumericError("non-finite gradient in " + name);
  ++t_;
  double lr = cfg_.lr;
  if (cfg_.warmup > 0) lr *= std::min(1.0, double(t_) / double(cfg_.warmup));
  double bc1 = 1.0 - std::pow(cfg_.beta1, double(t_));
  double bc2 = 1.0 - std::pow(cfg_.beta2, double(t_));
  for (size_t i = 0; i < params_.size(); ++i) {
    Tensor& p = params_[i].second;
    const double* g = p.has_grad() ? p.grad_const().data() : nullptr;
    double* m = m_[i].data();
    double* v = v_[i].data();
    double* w = p.data();
    for (int64_t j = 0; j < p.numel(); ++j) {
      double gj = g ? g[j] : 0.0;
      m[j] = cfg_.beta1 * m[j] + (1.0 - cfg_.beta1) * gj;
      v[j] = cfg_.beta2 * v[j] + (1.0 - cfg_.beta2) * gj * gj;
      double mh = m[j] / bc1;
      double vh = v[j] / bc2;
      w[j] -= lr * (mh / (std::sqrt(vh) + cfg_.eps) + cfg_.weight_decay * w[j]);
    }
  }
}

double AdamW::current_lr() const {
  double lr = cfg_.lr;
  if (cfg_.warmup > 0)
    lr *= std::min(1.0, double(t_ + 1) / double(cfg_.warmup));
  return lr;
}

ParamMap AdamW::state_tensors() {
  ParamMap out;
  out.reserve(params_.size() * 2);
  for (size_t i = 0; i < params_.size(); ++i) {
    out.emplace_back(params_[i].first + ".adam_m", m_[i]);
    out.emplace_back(params_[i].first + ".adam_v", v_[i]);
  }
  return out;
}

}  // namespace nexus
