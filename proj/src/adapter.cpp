#include "nexus/adapter.hpp"

#include <cmath>

#include <json.hpp>

namespace nexus {

using nlohmann::json;

namespace {

// blocks and the bridge accept [C,H,W] or [N,C,H,W]; run the core batched
Tensor ensure_batched(const Tensor& x, bool* was_rank3) {
  if (x.rank() == 4) {
    *was_rank3 = false;
    return x;
  }
  if (x.rank() != 3)
    throw ShapeError("expected rank 3 or 4 feature, got " + shape_str(x.shape()));
  *was_rank3 = true;
  return reshape(x, {1, x.shape()[0], x.shape()[1], x.shape()[2]});
}

Tensor restore_rank(const Tensor& y, bool was_rank3) {
  if (!was_rank3) return y;
  return reshape(y, {y.shape()[1], y.shape()[2], y.shape()[3]});
}

}  // namespace

CrossAttentionBridge::CrossAttentionBridge(int64_t channels_, int64_t d_text_,
                                           int64_t d_attn_, bool zero_init_out,
                                           Rng& rng)
    : channels(channels_), d_text(d_text_), d_attn(d_attn_),
      wq(channels_, d_attn_), wk(d_text_, d_attn_), wv(d_text_, d_attn_),
      wo(d_attn_, channels_) {
  wq.init_he(rng);
  wk.init_he(rng);
  wv.init_he(rng);
  if (zero_init_out)
    wo.init_zero();
  else
    wo.init_he(rng);
}

Tensor CrossAttentionBridge::forward(const Tensor& x, const Tensor& text) const {
  if (text.rank() != 2 || text.shape()[1] != d_text)
    throw ShapeError("text embedding " + shape_str(text.shape()) +
                     " does not match bridge d_text " + std::to_string(d_text));
  bool was3 = false;
  Tensor xb = ensure_batched(x, &was3);
  if (xb.shape()[1] != channels)
    throw ShapeError("feature channels " + std::to_string(xb.shape()[1]) +
                     " != bridge channels " + std::to_string(channels));
  int64_t N = xb.shape()[0], C = channels, H = xb.shape()[2], W = xb.shape()[3];
  double inv_sqrt = 1.0 / std::sqrt(double(d_attn));
  Tensor keys = wk.forward(text);
  Tensor vals = wv.forward(text);
  Tensor keys_t = transpose(keys);
  std::vector<Tensor> per_sample;
  per_sample.reserve(size_t(N));
  for (int64_t s = 0; s < N; ++s) {
    Tensor f = select0(xb, s);                       // [C,H,W]
    Tensor ft = transpose(reshape(f, {C, H * W}));   // positions as rows
    Tensor q = wq.forward(ft);
    Tensor att = softmax_rows(scale(matmul(q, keys_t), inv_sqrt));
    Tensor o = wo.forward(matmul(att, vals));        // [HW, C]
    per_sample.push_back(reshape(transpose(o), {C, H, W}));
  }
  Tensor out = stack0(per_sample);
  return restore_rank(out, was3);
}

int64_t CrossAttentionBridge::param_count() const {
  return wq.weight.numel() + wq.bias.numel() + wk.weight.numel() + wk.bias.numel() +
         wv.weight.numel() + wv.bias.numel() + wo.weight.numel() + wo.bias.numel();
}

void CrossAttentionBridge::collect(const std::string& prefix, ParamMap& out) {
  wq.collect(prefix + "wq", out);
  wk.collect(prefix + "wk", out);
  wv.collect(prefix + "wv", out);
  wo.collect(prefix + "wo", out);
}

PrimeBlock::PrimeBlock(int64_t in, int64_t out, int64_t d_text, int64_t d_attn,
                       bool zero_init_attn_out, Rng& rng)
    : in_channels(in), out_channels(out),
      conv3a(in, out, 3, 1, 1), conv1a(out, out, 1, 1, 1),
      conv3b(out, out, 3, 1, 1), conv1b(out, out, 1, 1, 1), norm(out),
      attn(out, d_text, d_attn, zero_init_attn_out, rng) {
  conv3a.init_he(rng);
  conv1a.init_he(rng);
  conv3b.init_he(rng);
  conv1b.init_he(rng);
}

Tensor PrimeBlock::forward(const Tensor& x, const Tensor& text) const {
  bool was3 = false;
  Tensor xb = ensure_batched(x, &was3);
  Tensor p1 = relu(conv3a.forward(xb));
  Tensor p2 = conv1a.forward(p1);
  Tensor p3 = relu(conv3b.forward(p2));
  Tensor p4 = conv1b.forward(p3);
  Tensor fn = norm.forward(p4);
  Tensor out = add(fn, attn.forward(fn, text));
  return restore_rank(out, was3);
}

int64_t PrimeBlock::param_count() const {
  return conv3a.param_count() + conv1a.param_count() + conv3b.param_count() +
         conv1b.param_count() + norm.gamma.numel() + norm.beta.numel() +
         attn.param_count();
}

void PrimeBlock::collect(const std::string& prefix, ParamMap& out) {
  conv3a.collect(prefix + "conv3a", out);
  conv1a.collect(prefix + "conv1a", out);
  conv3b.collect(prefix + "conv3b", out);
  conv1b.collect(prefix + "conv1b", out);
  norm.collect(prefix + "norm", out);
  attn.collect(prefix + "attn.", out);
}

SlimBlock::SlimBlock(int64_t in, int64_t out, int64_t groups_, int64_t d_text,
                     int64_t d_attn, bool zero_init_attn_out, Rng& rng)
    : in_channels(in), out_channels(out), groups(groups_),
      dw1(out, out, 3, 1, groups_), pw1(out, out, 1, 1, 1),
      pw2(out, out, 1, 1, 1), dw2(out, out, 3, 1, groups_),
      pw3(out, out, 1, 1, 1), pw4(out, out, 1, 1, 1), norm(out),
      attn(out, d_text, d_attn, zero_init_attn_out, rng) {
  if (in != out) {
    entry.emplace(in, out, 1, 1, 1);
    entry->init_he(rng);
  }
  dw1.init_he(rng);
  pw1.init_he(rng);
  pw2.init_he(rng);
  dw2.init_he(rng);
  pw3.init_he(rng);
  pw4.init_he(rng);
}

Tensor SlimBlock::forward(const Tensor& x, const Tensor& text) const {
  bool was3 = false;
  Tensor xb = ensure_batched(x, &was3);
  Tensor xp = entry ? entry->forward(xb) : xb;
  Tensor s1 = dw1.forward(xp);
  Tensor s2 = pw1.forward(s1);
  Tensor s3 = relu(add(s1, s2));
  Tensor s4 = pw2.forward(s3);
  Tensor s5 = dw2.forward(s4);
  Tensor s6 = relu(pw3.forward(s5));
  Tensor s7 = pw4.forward(s6);
  Tensor fn = norm.forward(s7);
  Tensor out = add(fn, attn.forward(fn, text));
  return restore_rank(out, was3);
}

int64_t SlimBlock::param_count() const {
  int64_t n = dw1.param_count() + pw1.param_count() + pw2.param_count() +
              dw2.param_count() + pw3.param_count() + pw4.param_count() +
              norm.gamma.numel() + norm.beta.numel() + attn.param_count();
  if (entry) n += entry->param_count();
  return n;
}

void SlimBlock::collect(const std::string& prefix, ParamMap& out) {
  if (entry) entry->collect(prefix + "entry", out);
  dw1.collect(prefix + "dw1", out);
  pw1.collect(prefix + "pw1", out);
  pw2.collect(prefix + "pw2", out);
  dw2.collect(prefix + "dw2", out);
  pw3.collect(prefix + "pw3", out);
  pw4.collect(prefix + "pw4", out);
  norm.collect(prefix + "norm", out);
  attn.collect(prefix + "attn.", out);
}

std::string to_string(AdapterVariant v) {
  return v == AdapterVariant::Prime ? "Prime" : "Slim";
}

AdapterVariant adapter_variant_from_string(const std::string& s) {
  if (s == "Prime") return AdapterVariant::Prime;
  if (s == "Slim") return AdapterVariant::Slim;
  throw ConfigError("unknown adapter variant: " + s + " (expected Prime or Slim)");
}

void AdapterConfig::validate() const {
  if (stages != 0 && stages != 2 && stages != 3 && stages != 4)
    throw ConfigError("stages must be one of {2,3,4}, got " + std::to_string(stages));
  if (int64_t(schedule.size()) != stages)
    throw ConfigError("schedule length " + std::to_string(schedule.size()) +
                      " != stages " + std::to_string(stages));
  for (int64_t c : schedule)
    if (c <= 0) throw ConfigError("schedule entries must be positive");
  if (stages == 4) {
    if (schedule[1] != 2 * schedule[0] || schedule[2] != 2 * schedule[1] ||
        schedule[3] != schedule[2])
      throw ConfigError("4-stage schedule must double twice then hold: got " +
                        shape_str(Shape(schedule.begin(), schedule.end())));
  }
  if (r < 1) throw ConfigError("unshuffle factor r must be >= 1");
  if (groups != 1 && groups != 2 && groups != 4 && groups != 8)
    throw ConfigError("groups must be one of {1,2,4,8}, got " + std::to_string(groups));
  if (variant == AdapterVariant::Slim)
    for (int64_t c : schedule)
      if (c % groups != 0)
        throw ConfigError("groups " + std::to_string(groups) +
                          " does not divide channel count " + std::to_string(c));
  if (d_a_policy != "match-channels")
    throw ConfigError("unsupported d_a_policy: " + d_a_policy);
  if (attn_heads != 1)
    throw ConfigError("only single-head attention is supported (attn_heads=1)");
}

int64_t AdapterConfig::d_attn_for(int64_t channels) const { return channels; }

std::string AdapterConfig::to_json() const {
  json j;
  j["variant"] = to_string(variant);
  j["stages"] = stages;
  j["schedule"] = schedule;
  j["r"] = r;
  j["groups"] = groups;
  j["d_a_policy"] = d_a_policy;
  j["zero_init_attn_out"] = zero_init_attn_out;
  j["attn_heads"] = attn_heads;
  return j.dump(2);
}

AdapterConfig AdapterConfig::from_json(const std::string& json_text) {
  json j;
  try {
    j = json::parse(json_text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("invalid adapter config json: ") + e.what());
  }
  static const std::vector<std::string> known = {
      "variant", "stages", "schedule", "r", "groups",
      "d_a_policy", "zero_init_attn_out", "attn_heads"};
  for (auto it = j.begin(); it != j.end(); ++it) {
    bool ok = false;
    for (const auto& k : known) ok = ok || it.key() == k;
    if (!ok) throw ConfigError("unknown adapter config key: " + it.key());
  }
  AdapterConfig cfg;
  if (j.contains("variant")) cfg.variant = adapter_variant_from_string(j["variant"]);
  if (j.contains("stages")) cfg.stages = j["stages"];
  if (j.contains("schedule")) cfg.schedule = j["schedule"].get<std::vector<int64_t>>();
  if (j.contains("r")) cfg.r = j["r"];
  if (j.contains("groups")) cfg.groups = j["groups"];
  if (j.contains("d_a_policy")) cfg.d_a_policy = j["d_a_policy"];
  if (j.contains("zero_init_attn_out")) cfg.zero_init_attn_out = j["zero_init_attn_out"];
  if (j.contains("attn_heads")) cfg.attn_heads = j["attn_heads"];
  cfg.validate();
  return cfg;
}

AdapterConfig AdapterConfig::toy32(AdapterVariant v) {
  AdapterConfig cfg;
  cfg.variant = v;
  cfg.schedule = {32, 64, 128, 128};
  cfg.r = 1;
  return cfg;
}

AdapterConfig AdapterConfig::toy128(AdapterVariant v) {
  AdapterConfig cfg;
  cfg.variant = v;
  cfg.schedule = {32, 64, 128, 128};
  cfg.r = 4;
  return cfg;
}

AdapterConfig AdapterConfig::full_prime() {
  AdapterConfig cfg;
  cfg.variant = AdapterVariant::Prime;
  cfg.schedule = {320, 640, 1280, 1280};
  cfg.r = 8;
  return cfg;
}

AdapterConfig AdapterConfig::full_slim(int64_t groups) {
  AdapterConfig cfg = full_prime();
  cfg.variant = AdapterVariant::Slim;
  cfg.groups = groups;
  return cfg;
}

std::vector<Shape> adapter_output_shapes(const AdapterConfig& cfg, int64_t h,
                                         int64_t w) {
  cfg.validate();
  int64_t div = cfg.r * (int64_t(1) << (cfg.stages > 0 ? cfg.stages - 1 : 0));
  if (h % div != 0 || w % div != 0)
    throw ShapeError("condition resolution " + std::to_string(h) + "x" +
                     std::to_string(w) + " must be divisible by " +
                     std::to_string(div));
  std::vector<Shape> out;
  int64_t hh = h / cfg.r, ww = w / cfg.r;
  for (int64_t k = 0; k < cfg.stages; ++k) {
    out.push_back({cfg.schedule[size_t(k)], hh, ww});
    hh /= 2;
    ww /= 2;
  }
  return out;
}

Adapter::Adapter(const AdapterConfig& cfg, int64_t d_text, Rng& rng)
    : cfg_(cfg), d_text_(d_text) {
  cfg_.validate();
  int64_t in = cfg_.entry_channels();
  for (int64_t k = 0; k < cfg_.stages; ++k) {
    int64_t out = cfg_.schedule[size_t(k)];
    int64_t da = cfg_.d_attn_for(out);
    if (cfg_.variant == AdapterVariant::Prime)
      prime_.emplace_back(in, out, d_text, da, cfg_.zero_init_attn_out, rng);
    else
      slim_.emplace_back(in, out, cfg_.groups, d_text, da, cfg_.zero_init_attn_out,
                         rng);
    if (k + 1 < cfg_.stages) {
      int64_t g = cfg_.variant == AdapterVariant::Slim ? out : 1;
      phi_.emplace_back(out, out, 3, 2, g);
      phi_.back().init_he(rng);
    }
    in = out;
  }
}

std::vector<Tensor> Adapter::forward(const Tensor& ic, const Tensor& text) const {
  bool was3 = false;
  Tensor xb = ensure_batched(ic, &was3);
  if (xb.shape()[1] != 3)
    throw ShapeError("condition image must have 3 channels, got " +
                     std::to_string(xb.shape()[1]));
  // validates divisibility and reports the required divisor
  (void)adapter_output_shapes(cfg_, xb.shape()[2], xb.shape()[3]);
  Tensor x = pixel_unshuffle(xb, cfg_.r);
  std::vector<Tensor> es;
  es.reserve(size_t(cfg_.stages));
  for (int64_t k = 0; k < cfg_.stages; ++k) {
    Tensor e = cfg_.variant == AdapterVariant::Prime
                   ? prime_[size_t(k)].forward(x, text)
                   : slim_[size_t(k)].forward(x, text);
    es.push_back(restore_rank(e, was3));
    if (k + 1 < cfg_.stages) x = phi_[size_t(k)].forward(e);
  }
  return es;
}

ParamMap Adapter::params(const std::string& prefix) const {
  ParamMap out;
  for (size_t k = 0; k < prime_.size(); ++k)
    const_cast<PrimeBlock&>(prime_[k]).collect(
        prefix + "block" + std::to_string(k) + ".", out);
  for (size_t k = 0; k < slim_.size(); ++k)
    const_cast<SlimBlock&>(slim_[k]).collect(
        prefix + "block" + std::to_string(k) + ".", out);
  for (size_t k = 0; k < phi_.size(); ++k)
    const_cast<Conv2dLayer&>(phi_[k]).collect(prefix + "phi" + std::to_string(k),
                                              out);
  return out;
}

int64_t Adapter::param_count() const {
  int64_t n = 0;
  for (const auto& b : prime_) n += b.param_count();
  for (const auto& b : slim_) n += b.param_count();
  for (const auto& p : phi_) n += p.param_count();
  return n;
}

}  // namespace nexus
