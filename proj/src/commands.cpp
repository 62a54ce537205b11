// Subcommand dispatch plus the training/sampling pipeline the acceptance
// binary reuses directly.
#include "nexus/commands.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "nexus/complexity.hpp"
#include "nexus/serialize.hpp"

namespace nexus {
namespace {

using nlohmann::json;
namespace fs = std::filesystem;

json parse_json(const std::string& text, const std::string& what) {
  try {
    return json::parse(text);
  } catch (const json::exception& e) {
    throw ConfigError(what + ": " + e.what());
  }
}

void reject_unknown_keys(const json& j, const std::string& what,
                         const std::vector<std::string>& allowed) {
  if (!j.is_object()) throw ConfigError(what + ": expected a JSON object");
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (std::find(allowed.begin(), allowed.end(), it.key()) == allowed.end())
      throw ConfigError(what + ": unknown key \"" + it.key() + "\"");
  }
}

template <class T>
void get_if(const json& j, const char* key, T& out, const std::string& what) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw ConfigError(what + "." + key + ": " + e.what());
  }
}

AdapterVariant variant_of(const std::string& s) {
  if (s == "prime" || s == "Prime") return AdapterVariant::Prime;
  if (s == "slim" || s == "Slim") return AdapterVariant::Slim;
  throw ConfigError("adapter config: unknown variant \"" + s +
                    "\" (prime or slim)");
}

// Independent deterministic streams per role, all forked off the config seed.
enum SeedRole : uint64_t {
  kSeedTextInit = 1,
  kSeedUNetInit = 2,
  kSeedTextPretrain = 3,
  kSeedUNetTrain = 10,
  kSeedAdapterInit = 20,
  kSeedAdapterTrain = 21,
};

}  // namespace

// ---- configs --------------------------------------------------------------

UNetConfig PretrainConfig::unet_config(int64_t image_size) const {
  UNetConfig u;
  u.base = base;
  u.mults = mults;
  u.num_res_blocks = num_res_blocks;
  u.attn_scales = attn_scales;
  u.temb_dim = temb_dim;
  u.img_channels = 3;
  u.img_size = image_size;
  return u;
}

std::string PretrainConfig::to_json() const {
  json j{{"steps", steps},
         {"lr", lr},
         {"warmup", warmup},
         {"batch", batch},
         {"accum", accum},
         {"cond_dropout", cond_dropout},
         {"timesteps", timesteps},
         {"base", base},
         {"mults", mults},
         {"num_res_blocks", num_res_blocks},
         {"attn_scales", attn_scales},
         {"temb_dim", temb_dim},
         {"text_steps", text_steps},
         {"seed", seed}};
  return j.dump();
}

PretrainConfig PretrainConfig::from_json(const std::string& text) {
  json j = parse_json(text, "pretrain config");
  reject_unknown_keys(j, "pretrain config",
                      {"steps", "lr", "warmup", "batch", "accum",
                       "cond_dropout", "timesteps", "base", "mults",
                       "num_res_blocks", "attn_scales", "temb_dim",
                       "text_steps", "seed"});
  PretrainConfig c;
  const std::string w = "pretrain config";
  get_if(j, "steps", c.steps, w);
  get_if(j, "lr", c.lr, w);
  get_if(j, "warmup", c.warmup, w);
  get_if(j, "batch", c.batch, w);
  get_if(j, "accum", c.accum, w);
  get_if(j, "cond_dropout", c.cond_dropout, w);
  get_if(j, "timesteps", c.timesteps, w);
  get_if(j, "base", c.base, w);
  get_if(j, "mults", c.mults, w);
  get_if(j, "num_res_blocks", c.num_res_blocks, w);
  get_if(j, "attn_scales", c.attn_scales, w);
  get_if(j, "temb_dim", c.temb_dim, w);
  get_if(j, "text_steps", c.text_steps, w);
  get_if(j, "seed", c.seed, w);
  if (c.steps < 0 || c.text_steps < 0)
    throw ConfigError("pretrain config: negative step counts");
  if (c.batch < 1 || c.accum < 1)
    throw ConfigError("pretrain config: batch and accum must be >= 1");
  if (c.timesteps < 1) throw ConfigError("pretrain config: timesteps must be >= 1");
  if (!(c.lr > 0.0) || !std::isfinite(c.lr))
    throw ConfigError("pretrain config: lr must be positive and finite");
  if (!(c.cond_dropout >= 0.0 && c.cond_dropout < 1.0))
    throw ConfigError("pretrain config: cond_dropout must be in [0,1)");
  return c;
}

AdapterConfig AdapterTrainConfig::adapter_config(const UNetConfig& unet) const {
  AdapterConfig a;
  a.variant = variant_of(variant);
  if (stages < 1 || stages > unet.scales())
    throw ConfigError("adapter config: stages must be in [1, " +
                      std::to_string(unet.scales()) + "]");
  a.stages = stages;
  a.schedule.clear();
  for (int64_t k = 1; k <= stages; ++k) a.schedule.push_back(unet.channels_at(k));
  a.r = r;
  a.groups = groups;
  return a;
}

std::string AdapterTrainConfig::to_json() const {
  json j{{"variant", variant},
         {"stages", stages},
         {"groups", groups},
         {"r", r},
         {"steps", steps},
         {"lr", lr},
         {"warmup", warmup},
         {"batch", batch},
         {"accum", accum},
         {"cond_dropout", cond_dropout},
         {"prompt_to_adapter", prompt_to_adapter},
         {"prompt_to_sd", prompt_to_sd},
         {"seed", seed}};
  return j.dump();
}

AdapterTrainConfig AdapterTrainConfig::from_json(const std::string& text) {
  json j = parse_json(text, "adapter config");
  reject_unknown_keys(j, "adapter config",
                      {"variant", "stages", "groups", "r", "steps", "lr",
                       "warmup", "batch", "accum", "cond_dropout",
                       "prompt_to_adapter", "prompt_to_sd", "seed"});
  AdapterTrainConfig c;
  const std::string w = "adapter config";
  get_if(j, "variant", c.variant, w);
  get_if(j, "stages", c.stages, w);
  get_if(j, "groups", c.groups, w);
  get_if(j, "r", c.r, w);
  get_if(j, "steps", c.steps, w);
  get_if(j, "lr", c.lr, w);
  get_if(j, "warmup", c.warmup, w);
  get_if(j, "batch", c.batch, w);
  get_if(j, "accum", c.accum, w);
  get_if(j, "cond_dropout", c.cond_dropout, w);
  get_if(j, "prompt_to_adapter", c.prompt_to_adapter, w);
  get_if(j, "prompt_to_sd", c.prompt_to_sd, w);
  get_if(j, "seed", c.seed, w);
  variant_of(c.variant);  // validates
  if (c.steps < 0) throw ConfigError("adapter config: negative steps");
  if (c.batch < 1 || c.accum < 1)
    throw ConfigError("adapter config: batch and accum must be >= 1");
  if (!(c.lr > 0.0) || !std::isfinite(c.lr))
    throw ConfigError("adapter config: lr must be positive and finite");
  if (!(c.cond_dropout >= 0.0 && c.cond_dropout < 1.0))
    throw ConfigError("adapter config: cond_dropout must be in [0,1)");
  return c;
}

AdapterTrainConfig sd_paper_preset() {
  AdapterTrainConfig c;
  c.variant = "prime";
  c.stages = 4;
  c.groups = 2;
  c.r = 8;
  c.steps = 200000;
  c.lr = 5e-6;
  c.warmup = 500;
  c.batch = 2;
  c.accum = 4;
  c.cond_dropout = 0.1;
  c.seed = 0;
  return c;
}

// ---- pipeline -------------------------------------------------------------

Backbone::Backbone(TextEncoder te, UNet un, DiffusionSchedule sc,
                   int64_t img_size)
    : text(std::move(te)),
      unet(std::move(un)),
      sched(std::move(sc)),
      image_size(img_size) {
  null_text = text.encode("");
}

Backbone build_backbone(const PretrainConfig& cfg, int64_t image_size,
                        const std::vector<std::string>& corpus) {
  UNetConfig ucfg = cfg.unet_config(image_size);
  ucfg.validate();
  Rng root(cfg.seed);
  Rng trng = root.split(kSeedTextInit);
  Rng urng = root.split(kSeedUNetInit);
  Rng prng = root.split(kSeedTextPretrain);
  TextEncoder text(Vocabulary::toy(), TextEncoderConfig{}, trng);
  if (cfg.text_steps > 0 && !corpus.empty())
    text.pretrain_and_freeze(corpus, cfg.text_steps, prng);
  else
    text.freeze();
  UNet unet(ucfg, text.dim(), urng);
  return Backbone(std::move(text), std::move(unet),
                  DiffusionSchedule::linear(cfg.timesteps), image_size);
}

namespace {

// Zero tensors for encoder scales the adapter does not cover; fusing zeros
// leaves those scales untouched.
void pad_features(std::vector<Tensor>& feats, const UNetConfig& ucfg,
                  int64_t n) {
  auto shapes = unet_encoder_shapes(ucfg);
  for (size_t k = feats.size(); k < shapes.size(); ++k)
    feats.push_back(
        Tensor::zeros({n, shapes[k][0], shapes[k][1], shapes[k][2]}));
}

Tensor as_batch1(const Tensor& t) {
  Shape s = t.shape();
  s.insert(s.begin(), 1);
  return reshape(t, s);
}

void log_step(std::ostream* log, int64_t step, int64_t total, double loss) {
  if (!log) return;
  if (step % 50 == 0 || step == total)
    *log << "step " << step << "/" << total << " loss " << loss << "\n";
}

}  // namespace

std::vector<double> pretrain_backbone(Backbone& bb, const Dataset& data,
                                      const PretrainConfig& cfg,
                                      std::ostream* log) {
  if (data.size() == 0) throw ConfigError("pretrain: empty dataset");
  if (data.image_size != bb.image_size)
    throw ConfigError("pretrain: dataset image size " +
                      std::to_string(data.image_size) +
                      " does not match the backbone's " +
                      std::to_string(bb.image_size));
  if (!bb.text.frozen())
    throw ConfigError("pretrain: text encoder must be frozen first");

  ParamMap up = bb.unet.params("unet.");
  set_requires_grad(up, true);
  AdamWConfig oc;
  oc.lr = cfg.lr;
  oc.warmup = cfg.warmup;
  AdamW opt(up, oc);
  Rng rng = Rng(cfg.seed).split(kSeedUNetTrain);

  std::vector<Tensor> emb(data.size());
  auto text_of = [&](size_t i) -> const Tensor& {
    if (!emb[i].defined()) emb[i] = bb.text.encode(data.samples[i].caption);
    return emb[i];
  };

  const int64_t micro = cfg.batch * cfg.accum;
  std::vector<double> losses;
  losses.reserve(size_t(cfg.steps));
  for (int64_t s = 1; s <= cfg.steps; ++s) {
    opt.zero_grad();
    double acc = 0.0;
    for (int64_t m = 0; m < micro; ++m) {
      size_t i = size_t(rng.uniform_int(uint64_t(data.size())));
      Tensor x0 = as_batch1(data.samples[i].image);
      const Tensor& te = text_of(i);
      Tape tape;
      Tensor loss = ddpm_loss_sample(
          [&](const Tensor& xt, int64_t t, bool use_null) {
            return bb.unet.forward1(xt, t, use_null ? bb.null_text : te);
          },
          x0, cfg.cond_dropout, bb.sched, rng);
      if (!all_finite(loss))
        throw NumericError("pretrain: non-finite loss at step " +
                           std::to_string(s));
      tape.backward(scale(loss, 1.0 / double(micro)));
      acc += loss.values()[0];
    }
    opt.step();
    losses.push_back(acc / double(micro));
    log_step(log, s, cfg.steps, losses.back());
  }
  return losses;
}

Adapter train_adapter(const Backbone& bb, const Dataset& data,
                      const AdapterTrainConfig& cfg,
                      std::vector<double>* losses, std::ostream* log) {
  if (data.size() == 0) throw ConfigError("train-adapter: empty dataset");
  if (data.image_size != bb.image_size)
    throw ConfigError("train-adapter: dataset image size " +
                      std::to_string(data.image_size) +
                      " does not match the backbone's " +
                      std::to_string(bb.image_size));
  if (!bb.unet.frozen())
    throw ConfigError("train-adapter: backbone must be frozen first");

  const UNetConfig& ucfg = bb.unet.config();
  AdapterConfig acfg = cfg.adapter_config(ucfg);
  acfg.validate();
  auto want = adapter_output_shapes(acfg, bb.image_size, bb.image_size);
  auto have = unet_encoder_shapes(ucfg);
  for (size_t k = 0; k < want.size(); ++k)
    if (want[k] != have[k])
      throw ConfigError("train-adapter: stage " + std::to_string(k + 1) +
                        " produces " + shape_str(want[k]) +
                        " but the encoder expects " + shape_str(have[k]));

  Rng init = Rng(cfg.seed).split(kSeedAdapterInit);
  Adapter ad(acfg, bb.text.dim(), init);
  ParamMap ap = ad.params("adapter.");
  AdamWConfig oc;
  oc.lr = cfg.lr;
  oc.warmup = cfg.warmup;
  AdamW opt(ap, oc);
  Rng rng = Rng(cfg.seed).split(kSeedAdapterTrain);

  std::vector<Tensor> emb(data.size());
  auto text_of = [&](size_t i) -> const Tensor& {
    if (!emb[i].defined()) emb[i] = bb.text.encode(data.samples[i].caption);
    return emb[i];
  };

  const int64_t micro = cfg.batch * cfg.accum;
  for (int64_t s = 1; s <= cfg.steps; ++s) {
    opt.zero_grad();
    double acc = 0.0;
    for (int64_t m = 0; m < micro; ++m) {
      size_t i = size_t(rng.uniform_int(uint64_t(data.size())));
      Tensor x0 = as_batch1(data.samples[i].image);
      Tensor cond = as_batch1(data.samples[i].condition);
      const Tensor& te = text_of(i);
      Tape tape;
      Tensor loss = ddpm_loss_sample(
          [&](const Tensor& xt, int64_t t, bool use_null) {
            const Tensor& tsd =
                (use_null || !cfg.prompt_to_sd) ? bb.null_text : te;
            const Tensor& tad =
                (use_null || !cfg.prompt_to_adapter) ? bb.null_text : te;
            auto feats = ad.forward(cond, tad);
            pad_features(feats, ucfg, 1);
            return bb.unet.forward1(xt, t, tsd, &feats);
          },
          x0, cfg.cond_dropout, bb.sched, rng);
      if (!all_finite(loss))
        throw NumericError("train-adapter: non-finite loss at step " +
                           std::to_string(s));
      tape.backward(scale(loss, 1.0 / double(micro)));
      acc += loss.values()[0];
    }
    opt.step();
    if (losses) losses->push_back(acc / double(micro));
    log_step(log, s, cfg.steps, acc / double(micro));
  }
  return ad;
}

void save_bundle(const std::string& path, const Backbone& bb,
                 const PretrainConfig& pre, const Adapter* adapter,
                 const AdapterTrainConfig* atc) {
  ParamMap params = bb.text.params("text.");
  ParamMap up = bb.unet.params("unet.");
  params.insert(params.end(), up.begin(), up.end());
  if (adapter) {
    ParamMap ap = adapter->params("adapter.");
    params.insert(params.end(), ap.begin(), ap.end());
  }

  int64_t attn_layers = 0;
  for (const auto& [name, t] : params) {
    if (name.rfind("text.attn", 0) != 0) continue;
    size_t dot = name.find('.', 9);
    attn_layers = std::max(
        attn_layers, int64_t(1 + std::stoll(name.substr(9, dot - 9))));
  }

  const UNetConfig& u = bb.unet.config();
  json meta{{"kind", adapter ? "bundle" : "backbone"},
            {"image_size", bb.image_size},
            {"timesteps", bb.sched.T},
            {"vocab", bb.text.vocab().words},
            {"text",
             {{"context", bb.text.context()},
              {"dim", bb.text.dim()},
              {"attn_layers", attn_layers}}},
            {"unet",
             {{"base", u.base},
              {"mults", u.mults},
              {"num_res_blocks", u.num_res_blocks},
              {"attn_scales", u.attn_scales},
              {"temb_dim", u.temb_dim}}},
            {"pretrain", json::parse(pre.to_json())}};
  if (adapter) {
    meta["adapter"] = json::parse(adapter->config().to_json());
    meta["adapter_train"] = json::parse(atc->to_json());
  }
  write_checkpoint(path, params, meta.dump());
}

Bundle load_bundle(const std::string& path) {
  Checkpoint ck = read_checkpoint(path);
  json meta = parse_json(ck.meta_json, "checkpoint meta");
  try {
    int64_t image_size = meta.at("image_size");
    int64_t T = meta.at("timesteps");
    Vocabulary vocab =
        Vocabulary::from_words(meta.at("vocab").get<std::vector<std::string>>());
    TextEncoderConfig tcfg;
    tcfg.context = meta.at("text").at("context");
    tcfg.dim = meta.at("text").at("dim");
    tcfg.attn_layers = meta.at("text").at("attn_layers");
    UNetConfig ucfg;
    ucfg.base = meta.at("unet").at("base");
    ucfg.mults = meta.at("unet").at("mults").get<std::vector<int64_t>>();
    ucfg.num_res_blocks = meta.at("unet").at("num_res_blocks");
    ucfg.attn_scales =
        meta.at("unet").at("attn_scales").get<std::vector<int64_t>>();
    ucfg.temb_dim = meta.at("unet").at("temb_dim");
    ucfg.img_channels = 3;
    ucfg.img_size = image_size;

    Rng r0(0), r1(0);
    TextEncoder text(std::move(vocab), tcfg, r0);
    UNet unet(ucfg, tcfg.dim, r1);
    ParamMap tp = text.params("text.");
    load_into(ck, tp);
    set_requires_grad(tp, false);
    text.freeze();
    ParamMap up = unet.params("unet.");
    load_into(ck, up);
    unet.freeze_backbone(true);

    Backbone bb(std::move(text), std::move(unet), DiffusionSchedule::linear(T),
                image_size);
    Bundle out{std::move(bb), std::nullopt, std::nullopt,
               PretrainConfig::from_json(meta.at("pretrain").dump())};
    if (meta.at("kind") == "bundle") {
      AdapterConfig acfg = AdapterConfig::from_json(meta.at("adapter").dump());
      Rng r2(0);
      Adapter ad(acfg, tcfg.dim, r2);
      ParamMap ap = ad.params("adapter.");
      load_into(ck, ap);
      out.adapter.emplace(std::move(ad));
      out.adapter_cfg =
          AdapterTrainConfig::from_json(meta.at("adapter_train").dump());
    }
    return out;
  } catch (const json::exception& e) {
    throw IoError(path + ": malformed checkpoint meta: " + e.what());
  }
}

Tensor sample_image(const Backbone& bb, const Adapter* adapter,
                    const Tensor* condition, const std::string& prompt,
                    const SampleConfig& cfg, Rng& rng, bool prompt_to_sd,
                    bool prompt_to_adapter) {
  const int64_t s = bb.image_size;
  if (adapter && !condition)
    throw ConfigError("sample: the adapter needs a condition image");
  if (!adapter && condition)
    throw ConfigError("sample: a condition was given but there is no adapter");

  const Tensor text_emb =
      prompt.empty() ? bb.null_text : bb.text.encode(prompt);

  // Adapter features are fixed per sample: computed here once per branch and
  // reused by every denoising step.
  std::vector<Tensor> fc, fn;
  if (adapter) {
    Shape want{3, s, s};
    if (condition->shape() != want)
      throw ShapeError("sample: condition is " + shape_str(condition->shape()) +
                       ", expected " + shape_str(want));
    Tensor c4 = as_batch1(*condition);
    bool null_to_adapter = prompt.empty() || !prompt_to_adapter;
    fc = adapter->forward(c4, null_to_adapter ? bb.null_text : text_emb);
    pad_features(fc, bb.unet.config(), 1);
    if (null_to_adapter) {
      fn = fc;
    } else {
      fn = adapter->forward(c4, bb.null_text);
      pad_features(fn, bb.unet.config(), 1);
    }
  }

  const Tensor& tsd = prompt_to_sd ? text_emb : bb.null_text;
  EpsModel model = [&](const Tensor& x, int64_t t, bool conditional) {
    if (conditional)
      return bb.unet.forward1(x, t, tsd, adapter ? &fc : nullptr);
    return bb.unet.forward1(x, t, bb.null_text, adapter ? &fn : nullptr);
  };
  Tensor x = p_sample_loop(model, {1, 3, s, s}, bb.sched, cfg, rng);
  return reshape(x, {3, s, s});
}

EvalReport evaluate(const Backbone& bb, const Adapter* adapter,
                    const Dataset& data, const EvalOptions& opt,
                    std::ostream* log) {
  const int64_t n_all = data.size();
  if (n_all == 0) throw ConfigError("evaluate: empty dataset");
  int64_t limit = opt.limit < 0 ? n_all : std::min(opt.limit, n_all);
  if (limit < 1) throw ConfigError("evaluate: limit must be >= 1");
  if (opt.use_adapter && !adapter)
    throw ConfigError("evaluate: no adapter to evaluate");

  SampleConfig sc;
  sc.steps = opt.steps;
  sc.guidance = opt.guidance;
  Rng master(opt.seed);

  std::vector<Tensor> generated, reference;
  double f1_sum = 0.0, color_sum = 0.0;
  for (int64_t i = 0; i < limit; ++i) {
    const DataSample& smp = data.samples[size_t(i)];
    std::string prompt;
    if (opt.use_prompt)
      prompt = opt.scramble_prompts
                   ? data.samples[size_t((i + 1) % n_all)].caption
                   : smp.caption;
    Rng rng = master.split(uint64_t(i));
    Tensor img = sample_image(bb, opt.use_adapter ? adapter : nullptr,
                              opt.use_adapter ? &smp.condition : nullptr,
                              prompt, sc, rng, opt.prompt_to_sd,
                              opt.prompt_to_adapter);
    Tensor edges = data.condition_kind == "edge"
                       ? smp.condition
                       : extract_edges(render_scene(data.scenes[size_t(i)],
                                                    data.image_size));
    f1_sum += edge_f1(img, edges);
    color_sum += color_accuracy(img, data.scenes[size_t(i)], prompt);
    generated.push_back(img);
    reference.push_back(smp.image);
    if (log && ((i + 1) % 10 == 0 || i + 1 == limit))
      *log << "eval " << (i + 1) << "/" << limit << "\n";
  }

  EvalReport rep;
  rep.n = limit;
  rep.edge_f1 = f1_sum / double(limit);
  rep.color_accuracy = color_sum / double(limit);
  rep.frechet = (opt.compute_frechet && limit >= 2)
                    ? frechet_fixed_features(generated, reference)
                    : 0.0;
  json echo{{"limit", limit},
            {"steps", opt.steps},
            {"guidance", opt.guidance},
            {"seed", opt.seed},
            {"use_adapter", opt.use_adapter},
            {"use_prompt", opt.use_prompt},
            {"scramble_prompts", opt.scramble_prompts},
            {"compute_frechet", opt.compute_frechet},
            {"prompt_to_sd", opt.prompt_to_sd},
            {"prompt_to_adapter", opt.prompt_to_adapter}};
  rep.config_json = echo.dump();
  return rep;
}

void write_ppm(const std::string& path, const Tensor& image) {
  if (image.rank() != 3 || image.dim(0) != 3)
    throw ShapeError("write_ppm: image is " + shape_str(image.shape()) +
                     ", expected [3,H,W]");
  const int64_t h = image.dim(1), w = image.dim(2);
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("write_ppm: cannot open " + path);
  os << "P6\n" << w << " " << h << "\n255\n";
  const double* p = image.data();
  const int64_t plane = h * w;
  for (int64_t i = 0; i < plane; ++i) {
    for (int64_t c = 0; c < 3; ++c) {
      long v = std::lround((p[c * plane + i] + 1.0) * 127.5);
      v = std::clamp(v, 0l, 255l);
      os.put(char(static_cast<unsigned char>(v)));
    }
  }
  if (!os) throw IoError("write_ppm: short write to " + path);
}

// ---- gradcheck ------------------------------------------------------------

namespace {

double gc_rel_err(double a, double b) {
  double d = std::max({std::fabs(a), std::fabs(b), 1e-4});
  return std::fabs(a - b) / d;
}

Tensor gc_rand(Shape s, Rng& rng, bool requires_grad = true) {
  Tensor t = Tensor::zeros(std::move(s), requires_grad);
  for (auto& v : t.values()) v = rng.normal() * 0.5;
  return t;
}

struct Probe {
  std::string name;
  std::function<Tensor()> loss;  // rebuilt from current leaf values
  std::vector<Tensor> leaves;
  double tol = 1e-4;
};

GradCheckRow check_probe(const Probe& p, int64_t max_coords, Rng& rng) {
  for (const Tensor& t : p.leaves) const_cast<Tensor&>(t).zero_grad();
  {
    Tape tape;
    Tensor root = p.loss();
    tape.backward(root);
  }
  std::vector<std::vector<double>> analytic;
  for (const Tensor& t : p.leaves)
    analytic.push_back(t.has_grad()
                           ? t.grad_const()
                           : std::vector<double>(size_t(t.numel()), 0.0));

  double worst = 0.0;
  for (size_t li = 0; li < p.leaves.size(); ++li) {
    Tensor leaf = p.leaves[li];
    std::vector<int64_t> coords;
    if (leaf.numel() <= max_coords) {
      for (int64_t c = 0; c < leaf.numel(); ++c) coords.push_back(c);
    } else {
      for (int64_t k = 0; k < max_coords; ++k)
        coords.push_back(int64_t(rng.uniform_int(uint64_t(leaf.numel()))));
    }
    for (int64_t c : coords) {
      double orig = leaf.values()[size_t(c)];
      auto slope = [&](double h) {
        leaf.values()[size_t(c)] = orig + h;
        double fp = p.loss().values()[0];
        leaf.values()[size_t(c)] = orig - h;
        double fm = p.loss().values()[0];
        leaf.values()[size_t(c)] = orig;
        return (fp - fm) / (2.0 * h);
      };
      double h = 1e-5 * std::max(1.0, std::fabs(orig));
      double err = gc_rel_err(analytic[li][size_t(c)], slope(h));
      if (err > p.tol) {
        // a kink between the stencil points contaminates the quotient; a much
        // smaller step disambiguates honest mismatches
        err = std::min(err, gc_rel_err(analytic[li][size_t(c)], slope(h / 100.0)));
      }
      worst = std::max(worst, err);
    }
  }
  return {p.name, worst, p.tol, worst < p.tol};
}

std::vector<Probe> primitive_probes(Rng& rng) {
  std::vector<Probe> ps;
  auto mse_probe = [&](std::string name, std::function<Tensor()> out,
                       std::vector<Tensor> leaves, Shape out_shape) {
    Tensor tgt = gc_rand(std::move(out_shape), rng, false);
    ps.push_back({std::move(name),
                  [out = std::move(out), tgt] { return mse(out(), tgt); },
                  std::move(leaves), 1e-4});
  };

  {
    Tensor a = gc_rand({2, 3}, rng), b = gc_rand({3}, rng);
    mse_probe("add.channel", [a, b] { return add(a, b); }, {a, b}, {2, 3});
  }
  {
    Tensor a = gc_rand({2, 3}, rng), b = gc_rand({2, 3}, rng);
    mse_probe("sub.mul.scale",
              [a, b] { return scale(mul(sub(a, b), a), 1.3); }, {a, b}, {2, 3});
  }
  {
    Tensor a = gc_rand({3, 4}, rng);
    mse_probe("add_scalar.relu", [a] { return relu(add_scalar(a, 0.1)); }, {a},
              {3, 4});
  }
  {
    Tensor a = gc_rand({3, 4}, rng), b = gc_rand({4, 2}, rng);
    mse_probe("matmul", [a, b] { return matmul(a, b); }, {a, b}, {3, 2});
  }
  {
    Tensor a = gc_rand({3, 5}, rng);
    mse_probe("softmax_rows", [a] { return softmax_rows(a); }, {a}, {3, 5});
  }
  {
    Tensor a = gc_rand({3, 4}, rng);
    mse_probe("transpose.reshape",
              [a] { return reshape(transpose(a), {2, 6}); }, {a}, {2, 6});
  }
  {
    Tensor x = gc_rand({1, 3, 6, 6}, rng), w = gc_rand({4, 3, 3, 3}, rng),
           b = gc_rand({4}, rng);
    mse_probe("conv2d.3x3", [x, w, b] { return conv2d(x, w, b, 1, 1); },
              {x, w, b}, {1, 4, 6, 6});
  }
  {
    Tensor x = gc_rand({1, 4, 6, 6}, rng), w = gc_rand({6, 4, 1, 1}, rng),
           b = gc_rand({6}, rng);
    mse_probe("conv2d.1x1.stride2", [x, w, b] { return conv2d(x, w, b, 2, 1); },
              {x, w, b}, {1, 6, 3, 3});
  }
  {
    Tensor x = gc_rand({1, 4, 6, 6}, rng), w = gc_rand({4, 2, 3, 3}, rng),
           b = gc_rand({4}, rng);
    mse_probe("conv2d.grouped", [x, w, b] { return conv2d(x, w, b, 1, 2); },
              {x, w, b}, {1, 4, 6, 6});
  }
  {
    Tensor x = gc_rand({1, 6, 4, 4}, rng);
    Tensor g = Tensor::full({6}, 1.0, true), b = gc_rand({6}, rng);
    for (auto& v : g.values()) v += 0.1 * rng.normal();
    mse_probe("group_norm", [x, g, b] { return group_norm(x, g, b, 3, 1e-5); },
              {x, g, b}, {1, 6, 4, 4});
  }
  {
    Tensor x = gc_rand({1, 3, 4, 4}, rng);
    mse_probe("pixel_unshuffle", [x] { return pixel_unshuffle(x, 2); }, {x},
              {1, 12, 2, 2});
  }
  {
    Tensor x = gc_rand({1, 8, 2, 2}, rng);
    mse_probe("pixel_shuffle", [x] { return pixel_shuffle(x, 2); }, {x},
              {1, 2, 4, 4});
  }
  {
    Tensor x = gc_rand({1, 3, 3, 3}, rng);
    mse_probe("upsample_nearest2x", [x] { return upsample_nearest2x(x); }, {x},
              {1, 3, 6, 6});
  }
  {
    Tensor x = gc_rand({2, 4, 3, 3}, rng), b = gc_rand({2, 4}, rng);
    mse_probe("add_channel_bias", [x, b] { return add_channel_bias(x, b); },
              {x, b}, {2, 4, 3, 3});
  }
  {
    Tensor a = gc_rand({1, 2, 2, 2}, rng), b = gc_rand({1, 3, 2, 2}, rng);
    mse_probe("concat_channels", [a, b] { return concat_channels(a, b); },
              {a, b}, {1, 5, 2, 2});
  }
  {
    LinearLayer lin(5, 3);
    lin.init_he(rng);
    Tensor x = gc_rand({2, 5}, rng);
    mse_probe("linear", [lin, x] { return lin.forward(x); },
              {x, lin.weight, lin.bias}, {2, 3});
  }
  {
    Tensor a = gc_rand({2, 3}, rng), b = gc_rand({4}, rng);
    ps.push_back({"sum.mean",
                  [a, b] { return add(sum(mul(a, a)), mean(b)); },
                  {a, b},
                  1e-4});
  }
  return ps;
}

std::vector<Probe> block_probes(Rng& rng) {
  std::vector<Probe> ps;
  auto add_params = [](std::vector<Tensor>& leaves, ParamMap pm) {
    for (auto& [name, t] : pm) leaves.push_back(t);
  };

  {
    auto br = std::make_shared<CrossAttentionBridge>(6, 12, 8, false, rng);
    Tensor x = gc_rand({1, 6, 4, 4}, rng), text = gc_rand({3, 12}, rng);
    Tensor tgt = gc_rand({1, 6, 4, 4}, rng, false);
    std::vector<Tensor> leaves{x, text};
    ParamMap pm;
    br->collect("br", pm);
    add_params(leaves, pm);
    ps.push_back({"bridge",
                  [br, x, text, tgt] { return mse(br->forward(x, text), tgt); },
                  std::move(leaves), 1e-3});
  }
  {
    auto blk = std::make_shared<PrimeBlock>(4, 6, 12, 6, false, rng);
    Tensor x = gc_rand({1, 4, 5, 5}, rng), text = gc_rand({2, 12}, rng);
    Tensor tgt = gc_rand({1, 6, 5, 5}, rng, false);
    std::vector<Tensor> leaves{x, text};
    ParamMap pm;
    blk->collect("b", pm);
    add_params(leaves, pm);
    ps.push_back({"prime_block",
                  [blk, x, text, tgt] { return mse(blk->forward(x, text), tgt); },
                  std::move(leaves), 1e-3});
  }
  {
    auto blk = std::make_shared<SlimBlock>(4, 6, 2, 12, 6, false, rng);
    Tensor x = gc_rand({1, 4, 5, 5}, rng), text = gc_rand({2, 12}, rng);
    Tensor tgt = gc_rand({1, 6, 5, 5}, rng, false);
    std::vector<Tensor> leaves{x, text};
    ParamMap pm;
    blk->collect("b", pm);
    add_params(leaves, pm);
    ps.push_back({"slim_block.entry",
                  [blk, x, text, tgt] { return mse(blk->forward(x, text), tgt); },
                  std::move(leaves), 1e-3});
  }
  {
    auto blk = std::make_shared<SlimBlock>(6, 6, 2, 12, 6, false, rng);
    Tensor x = gc_rand({1, 6, 4, 4}, rng), text = gc_rand({2, 12}, rng);
    Tensor tgt = gc_rand({1, 6, 4, 4}, rng, false);
    std::vector<Tensor> leaves{x, text};
    ParamMap pm;
    blk->collect("b", pm);
    add_params(leaves, pm);
    ps.push_back({"slim_block.identity",
                  [blk, x, text, tgt] { return mse(blk->forward(x, text), tgt); },
                  std::move(leaves), 1e-3});
  }
  return ps;
}

std::vector<Probe> end2end_probes(Rng& rng) {
  std::vector<Probe> ps;
  for (AdapterVariant v : {AdapterVariant::Prime, AdapterVariant::Slim}) {
    UNetConfig ucfg;
    ucfg.base = 4;
    ucfg.mults = {1, 2};
    ucfg.num_res_blocks = 1;
    ucfg.attn_scales = {2};
    ucfg.temb_dim = 16;
    ucfg.img_size = 16;
    Rng ur = rng.split(v == AdapterVariant::Prime ? 1 : 2);
    auto unet = std::make_shared<UNet>(ucfg, 12, ur);

    AdapterConfig acfg;
    acfg.variant = v;
    acfg.stages = 2;
    acfg.schedule = {4, 8};
    acfg.r = 1;
    acfg.groups = 2;
    Rng ar = rng.split(v == AdapterVariant::Prime ? 3 : 4);
    auto ad = std::make_shared<Adapter>(acfg, 12, ar);

    Tensor x = gc_rand({1, 3, 16, 16}, rng, false);
    Tensor cond = gc_rand({1, 3, 16, 16}, rng, false);
    Tensor text = gc_rand({2, 12}, rng, false);
    Tensor tgt = Tensor::zeros({1, 3, 16, 16});
    std::vector<Tensor> leaves;
    for (auto& [name, t] : ad->params("")) leaves.push_back(t);
    ps.push_back(
        {std::string("end2end.") + to_string(v),
         [unet, ad, ucfg, x, cond, text, tgt] {
           auto feats = ad->forward(cond, text);
           pad_features(feats, ucfg, 1);
           return mse(unet->forward1(x, 5, text, &feats), tgt);
         },
         std::move(leaves), 1e-3});
  }
  return ps;
}

}  // namespace

std::vector<GradCheckRow> run_gradcheck(const std::string& scope) {
  Rng rng(0x67726164u);
  std::vector<Probe> probes;
  int64_t max_coords = 0;
  if (scope == "primitives") {
    probes = primitive_probes(rng);
    max_coords = 6;
  } else if (scope == "blocks") {
    probes = block_probes(rng);
    max_coords = 4;
  } else if (scope == "end2end") {
    probes = end2end_probes(rng);
    max_coords = 3;
  } else {
    throw ConfigError("gradcheck: unknown scope \"" + scope +
                      "\" (primitives, blocks, end2end)");
  }
  std::vector<GradCheckRow> rows;
  for (const auto& p : probes) rows.push_back(check_probe(p, max_coords, rng));
  return rows;
}

// ---- cli ------------------------------------------------------------------

namespace {

std::optional<uint64_t> env_seed() {
  const char* s = std::getenv("NEXUS_SEED");
  if (!s) return std::nullopt;
  uint64_t v = 0;
  const char* end = s + std::strlen(s);
  auto [ptr, ec] = std::from_chars(s, end, v);
  if (ec != std::errc{} || ptr != end)
    throw ConfigError("NEXUS_SEED: \"" + std::string(s) +
                      "\" is not an unsigned integer");
  return v;
}

// Accepts either a bare config object or a previous run.json for the same
// command (its "config" member is used).
json load_config_file(const std::string& path, const std::string& cmd) {
  json j = parse_json(read_text_file(path), "config " + path);
  if (j.is_object() && j.contains("command")) {
    std::string c;
    try {
      c = j.at("command").get<std::string>();
    } catch (const json::exception& e) {
      throw ConfigError("config " + path + ": " + e.what());
    }
    if (c != cmd)
      throw ConfigError("config " + path + " replays command '" + c +
                        "', not '" + cmd + "'");
    j = j.at("config");
  }
  return j;
}

std::string join_out(const std::string& dir, const std::string& name) {
  return (fs::path(dir) / name).string();
}

void write_run_json(const std::string& out_dir, const std::string& cmd,
                    const json& config, const std::vector<std::string>& artifacts,
                    const std::vector<double>* losses = nullptr) {
  json r{{"command", cmd}, {"config", config}, {"artifacts", artifacts}};
  if (losses) r["losses"] = *losses;
  write_text_file(join_out(out_dir, "run.json"), r.dump(2) + "\n");
}

void ensure_out(const std::string& out_dir) {
  if (out_dir.empty()) throw ConfigError("--out is required");
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec) throw IoError("cannot create output directory " + out_dir);
}

// gen ----------------------------------------------------------------------

struct GenConfig {
  int64_t n = 1000;
  int64_t image_size = 32;
  std::string condition_kind = "edge";
  uint64_t seed = 0;
};

json gen_to_json(const GenConfig& c) {
  return json{{"n", c.n},
              {"image_size", c.image_size},
              {"condition_kind", c.condition_kind},
              {"seed", c.seed}};
}

GenConfig gen_from_json(const json& j) {
  reject_unknown_keys(j, "gen config", {"n", "image_size", "condition_kind", "seed"});
  GenConfig c;
  const std::string w = "gen config";
  get_if(j, "n", c.n, w);
  get_if(j, "image_size", c.image_size, w);
  get_if(j, "condition_kind", c.condition_kind, w);
  get_if(j, "seed", c.seed, w);
  return c;
}

struct CliState {
  int rc = 0;
};

void setup_gen(CLI::App& app, CliState& st) {
  auto* sub = app.add_subcommand("gen", "Generate a synthetic scene dataset");
  auto opts = std::make_shared<GenConfig>();
  auto config_path = std::make_shared<std::string>();
  auto out_dir = std::make_shared<std::string>();
  auto* on = sub->add_option("--n", opts->n, "Number of samples");
  auto* os = sub->add_option("--image-size", opts->image_size, "32, 64 or 128");
  auto* ok = sub->add_option("--condition-kind", opts->condition_kind,
                             "edge or depth");
  auto* od = sub->add_option("--seed", opts->seed, "Dataset seed");
  sub->add_option("--config", *config_path, "JSON config (or a prior run.json)");
  sub->add_option("--out", *out_dir, "Output directory")->required();
  sub->callback([&st, opts, config_path, out_dir, on, os, ok, od] {
    GenConfig cfg;
    if (!config_path->empty()) cfg = gen_from_json(load_config_file(*config_path, "gen"));
    if (on->count()) cfg.n = opts->n;
    if (os->count()) cfg.image_size = opts->image_size;
    if (ok->count()) cfg.condition_kind = opts->condition_kind;
    if (od->count()) cfg.seed = opts->seed;
    if (auto e = env_seed()) cfg.seed = *e;
    ensure_out(*out_dir);
    Dataset ds = generate_dataset(cfg.n, cfg.image_size, cfg.condition_kind,
                                  cfg.seed);
    write_dataset(ds, join_out(*out_dir, "dataset.bin"));
    write_run_json(*out_dir, "gen", gen_to_json(cfg), {"dataset.bin"});
    std::cout << "gen: " << cfg.n << " samples at " << cfg.image_size << "x"
              << cfg.image_size << " (" << cfg.condition_kind << ") -> "
              << join_out(*out_dir, "dataset.bin") << "\n";
    st.rc = 0;
  });
}

// pretrain -----------------------------------------------------------------

void setup_pretrain(CLI::App& app, CliState& st) {
  auto* sub = app.add_subcommand("pretrain", "Train the denoising backbone");
  struct Args {
    PretrainConfig flags;
    std::string config_path, data_path, out_dir;
  };
  auto a = std::make_shared<Args>();
  auto* o_steps = sub->add_option("--steps", a->flags.steps);
  auto* o_lr = sub->add_option("--lr", a->flags.lr);
  auto* o_warm = sub->add_option("--warmup", a->flags.warmup);
  auto* o_batch = sub->add_option("--batch", a->flags.batch);
  auto* o_accum = sub->add_option("--accum", a->flags.accum);
  auto* o_T = sub->add_option("--timesteps", a->flags.timesteps);
  auto* o_base = sub->add_option("--base", a->flags.base);
  auto* o_ts = sub->add_option("--text-steps", a->flags.text_steps);
  auto* o_seed = sub->add_option("--seed", a->flags.seed);
  sub->add_option("--config", a->config_path, "JSON config (or a prior run.json)");
  sub->add_option("--data", a->data_path, "Dataset file")->required();
  sub->add_option("--out", a->out_dir, "Output directory")->required();
  sub->callback([&st, a, o_steps, o_lr, o_warm, o_batch, o_accum, o_T, o_base,
                 o_ts, o_seed] {
    PretrainConfig cfg;
    if (!a->config_path.empty())
      cfg = PretrainConfig::from_json(
          load_config_file(a->config_path, "pretrain").dump());
    if (o_steps->count()) cfg.steps = a->flags.steps;
    if (o_lr->count()) cfg.lr = a->flags.lr;
    if (o_warm->count()) cfg.warmup = a->flags.warmup;
    if (o_batch->count()) cfg.batch = a->flags.batch;
    if (o_accum->count()) cfg.accum = a->flags.accum;
    if (o_T->count()) cfg.timesteps = a->flags.timesteps;
    if (o_base->count()) cfg.base = a->flags.base;
    if (o_ts->count()) cfg.text_steps = a->flags.text_steps;
    if (o_seed->count()) cfg.seed = a->flags.seed;
    if (auto e = env_seed()) cfg.seed = *e;

    Dataset data = read_dataset(a->data_path);
    std::vector<std::string> corpus;
    for (const auto& s : data.samples) corpus.push_back(s.caption);
    Backbone bb = build_backbone(cfg, data.image_size, corpus);
    std::vector<double> losses = pretrain_backbone(bb, data, cfg, &std::cout);
    bb.unet.freeze_backbone(true);
    ensure_out(a->out_dir);
    save_bundle(join_out(a->out_dir, "backbone.ckpt"), bb, cfg, nullptr,
                nullptr);
    write_run_json(a->out_dir, "pretrain",
                   json::parse(cfg.to_json()), {"backbone.ckpt"}, &losses);
    std::cout << "pretrain: " << cfg.steps << " steps -> "
              << join_out(a->out_dir, "backbone.ckpt") << "\n";
    st.rc = 0;
  });
}

// train-adapter ------------------------------------------------------------

void setup_train_adapter(CLI::App& app, CliState& st) {
  auto* sub = app.add_subcommand(
      "train-adapter", "Train a structural adapter against a frozen backbone");
  struct Args {
    AdapterTrainConfig flags;
    std::string config_path, backbone_path, data_path, out_dir, preset;
    std::string p2a = "on", p2sd = "on";
    bool dry_run = false;
  };
  auto a = std::make_shared<Args>();
  auto* o_var = sub->add_option("--variant", a->flags.variant, "prime or slim")
                    ->check(CLI::IsMember({"prime", "slim"}));
  auto* o_blocks = sub->add_option("--blocks", a->flags.stages,
                                   "Adapter block count K");
  auto* o_groups = sub->add_option("--groups", a->flags.groups, "Slim groups G");
  auto* o_r = sub->add_option("--r", a->flags.r, "Condition unshuffle factor");
  auto* o_steps = sub->add_option("--steps", a->flags.steps);
  auto* o_lr = sub->add_option("--lr", a->flags.lr);
  auto* o_warm = sub->add_option("--warmup", a->flags.warmup);
  auto* o_batch = sub->add_option("--batch", a->flags.batch);
  auto* o_accum = sub->add_option("--accum", a->flags.accum);
  auto* o_seed = sub->add_option("--seed", a->flags.seed);
  auto* o_p2a = sub->add_option("--prompt-to-adapter", a->p2a, "on or off")
                    ->check(CLI::IsMember({"on", "off"}));
  auto* o_p2sd = sub->add_option("--prompt-to-sd", a->p2sd, "on or off")
                     ->check(CLI::IsMember({"on", "off"}));
  sub->add_option("--preset", a->preset, "Named preset (sd-paper)")
      ->check(CLI::IsMember({"sd-paper"}));
  sub->add_flag("--dry-run", a->dry_run, "Echo the resolved config and exit");
  sub->add_option("--config", a->config_path, "JSON config (or a prior run.json)");
  sub->add_option("--backbone", a->backbone_path, "Backbone checkpoint");
  sub->add_option("--data", a->data_path, "Dataset file");
  sub->add_option("--out", a->out_dir, "Output directory")->required();
  sub->callback([&st, a, o_var, o_blocks, o_groups, o_r, o_steps, o_lr, o_warm,
                 o_batch, o_accum, o_seed, o_p2a, o_p2sd] {
    AdapterTrainConfig cfg;
    if (a->preset == "sd-paper") cfg = sd_paper_preset();
    if (!a->config_path.empty())
      cfg = AdapterTrainConfig::from_json(
          load_config_file(a->config_path, "train-adapter").dump());
    if (o_var->count()) cfg.variant = a->flags.variant;
    if (o_blocks->count()) cfg.stages = a->flags.stages;
    if (o_groups->count()) cfg.groups = a->flags.groups;
    if (o_r->count()) cfg.r = a->flags.r;
    if (o_steps->count()) cfg.steps = a->flags.steps;
    if (o_lr->count()) cfg.lr = a->flags.lr;
    if (o_warm->count()) cfg.warmup = a->flags.warmup;
    if (o_batch->count()) cfg.batch = a->flags.batch;
    if (o_accum->count()) cfg.accum = a->flags.accum;
    if (o_seed->count()) cfg.seed = a->flags.seed;
    if (o_p2a->count()) cfg.prompt_to_adapter = (a->p2a == "on");
    if (o_p2sd->count()) cfg.prompt_to_sd = (a->p2sd == "on");
    if (auto e = env_seed()) cfg.seed = *e;

    json echo = json::parse(cfg.to_json());
    if (a->dry_run) {
      ensure_out(a->out_dir);
      write_run_json(a->out_dir, "train-adapter", echo, {});
      std::cout << "dry run: resolved config\n" << echo.dump(2) << "\n";
      st.rc = 0;
      return;
    }
    if (a->preset == "sd-paper")
      throw ConfigError(
          "preset sd-paper describes the full-scale run and is echo-only; "
          "pass --dry-run");
    if (a->backbone_path.empty() || a->data_path.empty())
      throw ConfigError("train-adapter needs --backbone and --data");

    Bundle bundle = load_bundle(a->backbone_path);
    Dataset data = read_dataset(a->data_path);
    std::vector<double> losses;
    Adapter ad =
        train_adapter(bundle.backbone, data, cfg, &losses, &std::cout);
    ensure_out(a->out_dir);
    save_bundle(join_out(a->out_dir, "adapter.ckpt"), bundle.backbone,
                bundle.pretrain_cfg, &ad, &cfg);
    write_run_json(a->out_dir, "train-adapter", echo, {"adapter.ckpt"},
                   &losses);
    std::cout << "train-adapter: " << cfg.steps << " steps -> "
              << join_out(a->out_dir, "adapter.ckpt") << "\n";
    st.rc = 0;
  });
}

// sample -------------------------------------------------------------------

void setup_sample(CLI::App& app, CliState& st) {
  auto* sub = app.add_subcommand("sample", "Draw images from a checkpoint");
  struct Args {
    std::string ckpt, condition, data, prompt, out_dir, config_path;
    int64_t index = 0, count = 1;
    SampleConfig sc;
    uint64_t seed = 0;
  };
  auto a = std::make_shared<Args>();
  sub->add_option("--ckpt", a->ckpt, "Backbone or adapter checkpoint");
  sub->add_option("--condition", a->condition, "Condition tensor file (.nxtn)");
  sub->add_option("--data", a->data, "Dataset file to take the condition from");
  auto* o_index = sub->add_option("--index", a->index, "Sample index in --data");
  auto* o_prompt = sub->add_option("--prompt", a->prompt, "Text prompt");
  auto* o_count = sub->add_option("--n", a->count, "Number of images");
  auto* o_steps = sub->add_option("--steps", a->sc.steps, "Denoising steps");
  auto* o_guid = sub->add_option("--guidance", a->sc.guidance, "Guidance scale");
  auto* o_seed = sub->add_option("--seed", a->seed);
  sub->add_option("--config", a->config_path, "JSON config (or a prior run.json)");
  sub->add_option("--out", a->out_dir, "Output directory")->required();
  sub->callback([&st, a, o_index, o_prompt, o_count, o_steps, o_guid, o_seed] {
    if (!a->config_path.empty()) {
      json j = load_config_file(a->config_path, "sample");
      reject_unknown_keys(j, "sample config",
                          {"ckpt", "condition", "data", "index", "prompt", "n",
                           "steps", "guidance", "seed"});
      const std::string w = "sample config";
      if (a->ckpt.empty()) get_if(j, "ckpt", a->ckpt, w);
      if (a->condition.empty()) get_if(j, "condition", a->condition, w);
      if (a->data.empty()) get_if(j, "data", a->data, w);
      if (!o_index->count()) get_if(j, "index", a->index, w);
      if (!o_prompt->count()) get_if(j, "prompt", a->prompt, w);
      if (!o_count->count()) get_if(j, "n", a->count, w);
      if (!o_steps->count()) get_if(j, "steps", a->sc.steps, w);
      if (!o_guid->count()) get_if(j, "guidance", a->sc.guidance, w);
      if (!o_seed->count()) get_if(j, "seed", a->seed, w);
    }
    if (auto e = env_seed()) a->seed = *e;
    if (a->ckpt.empty()) throw ConfigError("sample needs --ckpt");
    if (a->count < 1) throw ConfigError("sample: --n must be >= 1");
    if (!a->condition.empty() && !a->data.empty())
      throw ConfigError("sample: pass --condition or --data, not both");

    Bundle bundle = load_bundle(a->ckpt);
    std::optional<Tensor> cond;
    if (!a->condition.empty()) {
      cond = load_tensor(a->condition);
    } else if (!a->data.empty()) {
      Dataset data = read_dataset(a->data);
      if (a->index < 0 || a->index >= data.size())
        throw ConfigError("sample: --index out of range");
      cond = data.samples[size_t(a->index)].condition;
    }
    if (cond && !bundle.adapter)
      throw ConfigError(
          "sample: checkpoint has no adapter to consume the condition");
    const Adapter* ad = cond ? &*bundle.adapter : nullptr;
    bool p2sd = true, p2a = true;
    if (bundle.adapter_cfg) {
      p2sd = bundle.adapter_cfg->prompt_to_sd;
      p2a = bundle.adapter_cfg->prompt_to_adapter;
    }

    ensure_out(a->out_dir);
    Rng master(a->seed);
    std::vector<std::string> artifacts;
    for (int64_t i = 0; i < a->count; ++i) {
      Rng rng = master.split(uint64_t(i));
      Tensor img = sample_image(bundle.backbone, ad, cond ? &*cond : nullptr,
                                a->prompt, a->sc, rng, p2sd, p2a);
      if (a->sc.guidance == 0.0) {
        // the mix at s=0 returns the unconditional branch tensor itself, so
        // an explicitly unconditional chain must reproduce the draw bit for
        // bit
        Rng check = master.split(uint64_t(i));
        SampleConfig unc = a->sc;
        unc.guidance = 1.0;
        Tensor ref = sample_image(bundle.backbone, ad, cond ? &*cond : nullptr,
                                  "", unc, check, p2sd, p2a);
        if (img.values() != ref.values())
          throw NumericError("guidance 0 sample diverged from the "
                             "unconditional chain");
        std::cout << "guidance 0: output identical to the unconditional "
                     "chain (" << a->sc.steps << " steps): PASS\n";
      }
      char name[32];
      std::snprintf(name, sizeof name, "sample_%03d.ppm", int(i));
      write_ppm(join_out(a->out_dir, name), img);
      artifacts.emplace_back(name);
    }
    json echo{{"ckpt", a->ckpt},      {"condition", a->condition},
              {"data", a->data},      {"index", a->index},
              {"prompt", a->prompt},  {"n", a->count},
              {"steps", a->sc.steps}, {"guidance", a->sc.guidance},
              {"seed", a->seed}};
    write_run_json(a->out_dir, "sample", echo, artifacts);
    std::cout << "sample: " << a->count << " image(s) -> " << a->out_dir
              << "\n";
    st.rc = 0;
  });
}

// count --------------------------------------------------------------------

void setup_count(CLI::App& app, CliState& st) {
  auto* sub = app.add_subcommand(
      "count", "Analytic parameter/MAC audit of an adapter config");
  struct Args {
    std::string preset, config_path, csv, out_dir;
    int64_t d_text = 768, image_size = 512;
    double flops_per_mac = 1.0;
  };
  auto a = std::make_shared<Args>();
  sub->add_option("--preset", a->preset,
                  "prime-full, slim-full, slim-full-g4, slim-full-g8, toy32, "
                  "toy128, t2i");
  sub->add_option("--config", a->config_path, "Adapter config JSON file");
  sub->add_option("--d-text", a->d_text, "Prompt embedding width");
  sub->add_option("--image-size", a->image_size, "Input resolution");
  sub->add_option("--flops-per-mac", a->flops_per_mac,
                  "FLOP accounting convention (2 counts mul and add apart)");
  sub->add_option("--csv", a->csv, "Also write the table as CSV");
  sub->add_option("--out", a->out_dir, "Optional run.json directory");
  sub->callback([&st, a] {
    if (a->preset.empty() == a->config_path.empty())
      throw ConfigError("count: pass exactly one of --preset / --config");
    ComplexityReport rep;
    if (a->preset == "t2i") {
      rep = t2i_reference_count(a->image_size, a->image_size, a->flops_per_mac);
    } else {
      AdapterConfig cfg;
      if (!a->config_path.empty()) {
        cfg = AdapterConfig::from_json(read_text_file(a->config_path));
      } else if (a->preset == "prime-full") {
        cfg = AdapterConfig::full_prime();
      } else if (a->preset == "slim-full") {
        cfg = AdapterConfig::full_slim(2);
      } else if (a->preset == "slim-full-g4") {
        cfg = AdapterConfig::full_slim(4);
      } else if (a->preset == "slim-full-g8") {
        cfg = AdapterConfig::full_slim(8);
      } else if (a->preset == "toy32") {
        cfg = AdapterConfig::toy32();
      } else if (a->preset == "toy128") {
        cfg = AdapterConfig::toy128();
      } else {
        throw ConfigError("count: unknown preset \"" + a->preset + "\"");
      }
      rep = count_flops(cfg, a->image_size, a->image_size, a->d_text, 16,
                        a->flops_per_mac);
    }
    std::cout << rep.to_text();
    if (!a->csv.empty()) write_text_file(a->csv, rep.to_csv());
    if (!a->out_dir.empty()) {
      ensure_out(a->out_dir);
      json echo{{"preset", a->preset},
                {"config", a->config_path},
                {"d_text", a->d_text},
                {"image_size", a->image_size},
                {"flops_per_mac", a->flops_per_mac}};
      write_run_json(a->out_dir, "count", echo, {});
    }
    st.rc = 0;
  });
}

// gradcheck ----------------------------------------------------------------

void setup_gradcheck(CLI::App& app, CliState& st) {
  auto* sub = app.add_subcommand(
      "gradcheck", "Finite-difference audit of the autodiff engine");
  auto scope = std::make_shared<std::string>();
  auto out_dir = std::make_shared<std::string>();
  sub->add_option("--scope", *scope, "primitives, blocks or end2end")
      ->required();
  sub->add_option("--out", *out_dir, "Optional run.json directory");
  sub->callback([&st, scope, out_dir] {
    auto rows = run_gradcheck(*scope);
    bool all_pass = true;
    std::ostringstream table;
    table << std::left << std::setw(24) << "check" << std::right
          << std::setw(14) << "max_rel_err" << std::setw(10) << "tol"
          << "  result\n";
    for (const auto& r : rows) {
      all_pass = all_pass && r.pass;
      table << std::left << std::setw(24) << r.name << std::right
            << std::setw(14) << std::scientific << std::setprecision(3)
            << r.max_rel_err << std::setw(10) << r.tolerance << "  "
            << (r.pass ? "pass" : "FAIL") << "\n";
    }
    std::cout << table.str();
    if (!out_dir->empty()) {
      ensure_out(*out_dir);
      write_run_json(*out_dir, "gradcheck", json{{"scope", *scope}}, {});
    }
    st.rc = all_pass ? 0 : 3;
  });
}

// eval ---------------------------------------------------------------------

void setup_eval(CLI::App& app, CliState& st) {
  auto* sub = app.add_subcommand(
      "eval", "Sample against a dataset's conditions and score the results");
  struct Args {
    std::string ckpt, data, out_dir, config_path;
    EvalOptions opt;
    bool no_adapter = false, no_prompt = false, no_frechet = false;
  };
  auto a = std::make_shared<Args>();
  sub->add_option("--ckpt", a->ckpt, "Checkpoint");
  sub->add_option("--data", a->data, "Held-out dataset");
  auto* o_limit = sub->add_option("--limit", a->opt.limit, "Conditions scored");
  auto* o_steps = sub->add_option("--steps", a->opt.steps);
  auto* o_guid = sub->add_option("--guidance", a->opt.guidance);
  auto* o_seed = sub->add_option("--seed", a->opt.seed);
  sub->add_flag("--no-adapter", a->no_adapter, "Ignore the adapter");
  sub->add_flag("--no-prompt", a->no_prompt, "Sample unconditionally");
  sub->add_flag("--scramble-prompts", a->opt.scramble_prompts,
                "Rotate captions against conditions");
  sub->add_flag("--no-frechet", a->no_frechet, "Skip the feature distance");
  sub->add_option("--config", a->config_path, "JSON config (or a prior run.json)");
  sub->add_option("--out", a->out_dir, "Output directory")->required();
  sub->callback([&st, a, o_limit, o_steps, o_guid, o_seed] {
    if (!a->config_path.empty()) {
      json j = load_config_file(a->config_path, "eval");
      reject_unknown_keys(j, "eval config",
                          {"ckpt", "data", "limit", "steps", "guidance", "seed",
                           "use_adapter", "use_prompt", "scramble_prompts",
                           "compute_frechet"});
      const std::string w = "eval config";
      if (a->ckpt.empty()) get_if(j, "ckpt", a->ckpt, w);
      if (a->data.empty()) get_if(j, "data", a->data, w);
      if (!o_limit->count()) get_if(j, "limit", a->opt.limit, w);
      if (!o_steps->count()) get_if(j, "steps", a->opt.steps, w);
      if (!o_guid->count()) get_if(j, "guidance", a->opt.guidance, w);
      if (!o_seed->count()) get_if(j, "seed", a->opt.seed, w);
      bool ua = true, up = true, fr = true;
      get_if(j, "use_adapter", ua, w);
      get_if(j, "use_prompt", up, w);
      get_if(j, "compute_frechet", fr, w);
      get_if(j, "scramble_prompts", a->opt.scramble_prompts, w);
      if (!ua) a->no_adapter = true;
      if (!up) a->no_prompt = true;
      if (!fr) a->no_frechet = true;
    }
    if (auto e = env_seed()) a->opt.seed = *e;
    if (a->ckpt.empty() || a->data.empty())
      throw ConfigError("eval needs --ckpt and --data");
    a->opt.use_adapter = !a->no_adapter;
    a->opt.use_prompt = !a->no_prompt;
    a->opt.compute_frechet = !a->no_frechet;

    Bundle bundle = load_bundle(a->ckpt);
    if (a->opt.use_adapter && !bundle.adapter)
      throw ConfigError(
          "eval: checkpoint has no adapter; pass --no-adapter to score the "
          "bare backbone");
    if (bundle.adapter_cfg) {
      a->opt.prompt_to_sd = bundle.adapter_cfg->prompt_to_sd;
      a->opt.prompt_to_adapter = bundle.adapter_cfg->prompt_to_adapter;
    }
    Dataset data = read_dataset(a->data);
    EvalReport rep = evaluate(bundle.backbone,
                              bundle.adapter ? &*bundle.adapter : nullptr,
                              data, a->opt, &std::cout);
    ensure_out(a->out_dir);
    write_text_file(join_out(a->out_dir, "eval.json"), rep.to_json() + "\n");
    json echo = parse_json(rep.config_json, "eval echo");
    echo["ckpt"] = a->ckpt;
    echo["data"] = a->data;
    write_run_json(a->out_dir, "eval", echo, {"eval.json"});
    std::cout << "eval: n " << rep.n << " edge_f1 " << rep.edge_f1
              << " color_accuracy " << rep.color_accuracy << " frechet "
              << rep.frechet << "\n";
    st.rc = 0;
  });
}

}  // namespace

int run_cli(int argc, char** argv) {
  CLI::App app{"Prompt-guided structural adapters on a toy diffusion stack"};
  app.require_subcommand(1);
  CliState st;
  setup_gen(app, st);
  setup_pretrain(app, st);
  setup_train_adapter(app, st);
  setup_sample(app, st);
  setup_count(app, st);
  setup_gradcheck(app, st);
  setup_eval(app, st);
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    return code == 0 ? 0 : 2;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const IoError& e) {
    std::cerr << "io error: " << e.what() << "\n";
    return 2;
  } catch (const ShapeError& e) {
    std::cerr << "shape error: " << e.what() << "\n";
    return 2;
  } catch (const NumericError& e) {
    std::cerr << "numeric error: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  }
  return st.rc;
}

}  // namespace nexus
