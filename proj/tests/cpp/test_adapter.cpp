#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstring>
#include <set>
#include <vector>

#include "helpers.hpp"
#include "nexus/adapter.hpp"

using namespace nexus;
using testutil::random_tensor;

namespace {

bool bytes_equal(const Tensor& a, const Tensor& b) {
  return a.shape() == b.shape() &&
         std::memcmp(a.data(), b.data(), size_t(a.numel()) * sizeof(double)) == 0;
}

// straight-line reference pieces, raw vectors only
std::vector<double> ref_relu(std::vector<double> v) {
  for (auto& x : v) x = x > 0 ? x : 0;
  return v;
}

std::vector<double> ref_group_norm(const std::vector<double>& x, int64_t C,
                                   int64_t HW, const std::vector<double>& gamma,
                                   const std::vector<double>& beta) {
  int64_t G = std::min<int64_t>(32, C), Cg = C / G;
  std::vector<double> y(x.size());
  for (int64_t g = 0; g < G; ++g) {
    double m = 0, v = 0;
    for (int64_t c = 0; c < Cg; ++c)
      for (int64_t i = 0; i < HW; ++i) m += x[size_t((g * Cg + c) * HW + i)];
    m /= double(Cg * HW);
    for (int64_t c = 0; c < Cg; ++c)
      for (int64_t i = 0; i < HW; ++i) {
        double d = x[size_t((g * Cg + c) * HW + i)] - m;
        v += d * d;
      }
    v /= double(Cg * HW);
    double istd = 1.0 / std::sqrt(v + 1e-5);
    for (int64_t c = 0; c < Cg; ++c)
      for (int64_t i = 0; i < HW; ++i) {
        size_t idx = size_t((g * Cg + c) * HW + i);
        y[idx] = (x[idx] - m) * istd * gamma[size_t(g * Cg + c)] + beta[size_t(g * Cg + c)];
      }
  }
  return y;
}

// attention term for one sample, matching the bridge contract
std::vector<double> ref_attention(const std::vector<double>& fn, int64_t C,
                                  int64_t HW, const Tensor& text,
                                  const CrossAttentionBridge& br) {
  int64_t n = text.shape()[0], dt = text.shape()[1], da = br.d_attn;
  auto lin = [](const std::vector<double>& x, int64_t rows, int64_t in,
                const LinearLayer& l) {
    std::vector<double> y(size_t(rows * l.out_features));
    for (int64_t i = 0; i < rows; ++i)
      for (int64_t j = 0; j < l.out_features; ++j) {
        double acc = l.bias.data()[j];
        for (int64_t t = 0; t < in; ++t)
          acc += x[size_t(i * in + t)] * l.weight.data()[t * l.out_features + j];
        y[size_t(i * l.out_features + j)] = acc;
      }
    return y;
  };
  std::vector<double> ft(size_t(HW * C));  // positions as rows
  for (int64_t c = 0; c < C; ++c)
    for (int64_t i = 0; i < HW; ++i) ft[size_t(i * C + c)] = fn[size_t(c * HW + i)];
  std::vector<double> q = lin(ft, HW, C, br.wq);
  std::vector<double> tv(text.values());
  std::vector<double> k = lin(tv, n, dt, br.wk);
  std::vector<double> v = lin(tv, n, dt, br.wv);
  std::vector<double> mix(size_t(HW * da));
  for (int64_t i = 0; i < HW; ++i) {
    std::vector<double> s(static_cast<size_t>(n));
    double mx = -1e300;
    for (int64_t j = 0; j < n; ++j) {
      double acc = 0;
      for (int64_t t = 0; t < da; ++t) acc += q[size_t(i * da + t)] * k[size_t(j * da + t)];
      s[size_t(j)] = acc / std::sqrt(double(da));
      mx = std::max(mx, s[size_t(j)]);
    }
    double z = 0;
    for (auto& e : s) {
      e = std::exp(e - mx);
      z += e;
    }
    for (int64_t t = 0; t < da; ++t) {
      double acc = 0;
      for (int64_t j = 0; j < n; ++j) acc += s[size_t(j)] / z * v[size_t(j * da + t)];
      mix[size_t(i * da + t)] = acc;
    }
  }
  std::vector<double> o = lin(mix, HW, da, br.wo);
  std::vector<double> term(size_t(C * HW));
  for (int64_t i = 0; i < HW; ++i)
    for (int64_t c = 0; c < C; ++c) term[size_t(c * HW + i)] = o[size_t(i * C + c)];
  return term;
}

}  // namespace

TEST_CASE("single-key attention ignores the query") {
  Rng rng(211);
  CrossAttentionBridge br(4, 8, 4, false, rng);
  Tensor text = random_tensor({1, 8}, rng);
  Tensor f1 = random_tensor({4, 6, 6}, rng);
  Tensor f2 = random_tensor({4, 6, 6}, rng);
  Tensor t1 = br.forward(f1, text);
  Tensor t2 = br.forward(f2, text);
  CHECK(bytes_equal(t1, t2));
  // and the term is constant across spatial positions
  for (int64_t c = 0; c < 4; ++c)
    for (int64_t i = 1; i < 36; ++i)
      CHECK(t1.data()[c * 36 + i] == doctest::Approx(t1.data()[c * 36]).epsilon(1e-12));
}

TEST_CASE("zero-initialized output projection gives an exactly zero term") {
  Rng rng(223);
  CrossAttentionBridge br(8, 16, 8, true, rng);
  Tensor text = random_tensor({16, 16}, rng);
  Tensor f = random_tensor({8, 4, 4}, rng);
  Tensor term = br.forward(f, text);
  for (int64_t i = 0; i < term.numel(); ++i) CHECK(term.data()[i] == 0.0);
}

TEST_CASE("2x2 feature with two tokens and identity projections, hand-computed") {
  Rng rng(227);
  CrossAttentionBridge br(2, 2, 2, false, rng);
  // overwrite projections with exact identities
  for (auto* l : {&br.wq, &br.wk, &br.wv, &br.wo}) {
    std::fill(l->weight.values().begin(), l->weight.values().end(), 0.0);
    std::fill(l->bias.values().begin(), l->bias.values().end(), 0.0);
    l->weight.data()[0] = 1.0;
    l->weight.data()[3] = 1.0;
  }
  Tensor f = Tensor::from_data({2, 2, 2}, {0.5, -1.0, 2.0, 0.0, 1.0, 0.25, -0.5, 3.0});
  Tensor text = Tensor::from_data({2, 2}, {1.0, -1.0, 0.5, 2.0});
  Tensor term = br.forward(f, text);
  double inv = 1.0 / std::sqrt(2.0);
  for (int64_t pos = 0; pos < 4; ++pos) {
    double q0 = f.data()[pos], q1 = f.data()[4 + pos];
    double s0 = (q0 * 1.0 + q1 * -1.0) * inv;
    double s1 = (q0 * 0.5 + q1 * 2.0) * inv;
    double m = std::max(s0, s1);
    double e0 = std::exp(s0 - m), e1 = std::exp(s1 - m);
    double a0 = e0 / (e0 + e1), a1 = e1 / (e0 + e1);
    double o0 = a0 * 1.0 + a1 * 0.5;
    double o1 = a0 * -1.0 + a1 * 2.0;
    CHECK(std::fabs(term.data()[pos] - o0) < 1e-12);
    CHECK(std::fabs(term.data()[4 + pos] - o1) < 1e-12);
  }
}

TEST_CASE("attention weights per query position sum to one") {
  Rng rng(229);
  CrossAttentionBridge br(4, 8, 4, false, rng);
  // constant value rows: output equals that constant iff each row of the
  // attention matrix sums to exactly 1
  std::fill(br.wv.weight.values().begin(), br.wv.weight.values().end(), 0.0);
  br.wv.bias = Tensor::from_data({4}, {0.3, -0.7, 1.1, 0.05});
  std::fill(br.wo.weight.values().begin(), br.wo.weight.values().end(), 0.0);
  for (int64_t i = 0; i < 4; ++i) br.wo.weight.data()[i * 4 + i] = 1.0;
  std::fill(br.wo.bias.values().begin(), br.wo.bias.values().end(), 0.0);
  Tensor text = random_tensor({16, 8}, rng);
  Tensor f = random_tensor({4, 5, 5}, rng);
  Tensor term = br.forward(f, text);
  for (int64_t c = 0; c < 4; ++c)
    for (int64_t i = 0; i < 25; ++i)
      CHECK(std::fabs(term.data()[c * 25 + i] - br.wv.bias.data()[c]) < 1e-9);
}

TEST_CASE("batched bridge forward equals stacked per-sample forwards") {
  Rng rng(233);
  CrossAttentionBridge br(4, 8, 4, false, rng);
  Tensor text = random_tensor({5, 8}, rng);
  Tensor x = random_tensor({3, 4, 4, 4}, rng);
  Tensor batched = br.forward(x, text);
  REQUIRE(batched.shape() == x.shape());
  for (int64_t s = 0; s < 3; ++s) {
    Tensor xi = Tensor::from_data({4, 4, 4},
                                  std::vector<double>(x.data() + s * 64, x.data() + (s + 1) * 64));
    Tensor ti = br.forward(xi, text);
    CHECK(std::memcmp(batched.data() + s * 64, ti.data(), 64 * sizeof(double)) == 0);
  }
}

TEST_CASE("prime block with all-zero parameters returns exact zeros") {
  Rng rng(239);
  PrimeBlock b(3, 8, 16, 8, true, rng);
  for (auto* c : {&b.conv3a, &b.conv1a, &b.conv3b, &b.conv1b}) c->init_zero();
  std::fill(b.norm.beta.values().begin(), b.norm.beta.values().end(), 0.0);
  Tensor x = random_tensor({3, 8, 8}, rng);
  Tensor text = random_tensor({4, 16}, rng);
  Tensor y = b.forward(x, text);
  REQUIRE(y.shape() == Shape{8, 8, 8});
  for (int64_t i = 0; i < y.numel(); ++i) CHECK(y.data()[i] == 0.0);
}

TEST_CASE("prime block shape contract in both ranks") {
  Rng rng(241);
  PrimeBlock b(32, 64, 16, 64, true, rng);
  Tensor text = random_tensor({4, 16}, rng);
  CHECK(b.forward(random_tensor({32, 16, 16}, rng), text).shape() == Shape{64, 16, 16});
  CHECK(b.forward(random_tensor({2, 32, 16, 16}, rng), text).shape() ==
        Shape{2, 64, 16, 16});
}

TEST_CASE("prime block forward matches a straight-line reimplementation") {
  Rng rng(251);
  PrimeBlock b(3, 4, 8, 4, false, rng);
  for (auto& v : b.norm.gamma.values()) v = rng.uniform(0.5, 1.5);
  for (auto& v : b.norm.beta.values()) v = rng.uniform(-0.3, 0.3);
  Tensor x = random_tensor({3, 8, 8}, rng);
  Tensor text = random_tensor({3, 8}, rng);
  Tensor y = b.forward(x, text);

  auto p1 = ref_relu(testutil::naive_conv2d(x.values(), b.conv3a.weight.values(),
                                            b.conv3a.bias.values(), 1, 3, 8, 8, 4, 3, 1, 1));
  auto p2 = testutil::naive_conv2d(p1, b.conv1a.weight.values(), b.conv1a.bias.values(),
                                   1, 4, 8, 8, 4, 1, 1, 1);
  auto p3 = ref_relu(testutil::naive_conv2d(p2, b.conv3b.weight.values(),
                                            b.conv3b.bias.values(), 1, 4, 8, 8, 4, 3, 1, 1));
  auto p4 = testutil::naive_conv2d(p3, b.conv1b.weight.values(), b.conv1b.bias.values(),
                                   1, 4, 8, 8, 4, 1, 1, 1);
  auto fn = ref_group_norm(p4, 4, 64, b.norm.gamma.values(), b.norm.beta.values());
  auto term = ref_attention(fn, 4, 64, text, b.attn);
  for (size_t i = 0; i < fn.size(); ++i)
    CHECK(std::fabs(y.data()[int64_t(i)] - (fn[i] + term[i])) < 1e-12);
}

TEST_CASE("slim block with all-zero parameters returns exact zeros") {
  Rng rng(257);
  SlimBlock b(3, 8, 2, 16, 8, true, rng);
  REQUIRE(b.entry.has_value());
  b.entry->init_zero();
  for (auto* c : {&b.dw1, &b.pw1, &b.pw2, &b.dw2, &b.pw3, &b.pw4}) c->init_zero();
  Tensor x = random_tensor({3, 8, 8}, rng);
  Tensor text = random_tensor({4, 16}, rng);
  Tensor y = b.forward(x, text);
  for (int64_t i = 0; i < y.numel(); ++i) CHECK(y.data()[i] == 0.0);
}

TEST_CASE("slim block is strictly smaller than prime at equal channels") {
  Rng rng(263);
  for (int64_t G : {2, 4, 8}) {
    SlimBlock s(16, 16, G, 8, 16, true, rng);
    PrimeBlock p(16, 16, 8, 16, true, rng);
    CHECK(s.param_count() < p.param_count());
  }
  // grouped share scales as 1/G
  SlimBlock g2(16, 16, 2, 8, 16, true, rng);
  SlimBlock g4(16, 16, 4, 8, 16, true, rng);
  CHECK(g2.dw1.weight.numel() == 2 * g4.dw1.weight.numel());
}

TEST_CASE("slim block forward matches a straight-line reimplementation") {
  Rng rng(269);
  SlimBlock b(3, 4, 2, 8, 4, false, rng);
  for (auto& v : b.norm.gamma.values()) v = rng.uniform(0.5, 1.5);
  for (auto& v : b.norm.beta.values()) v = rng.uniform(-0.3, 0.3);
  Tensor x = random_tensor({3, 8, 8}, rng);
  Tensor text = random_tensor({3, 8}, rng);
  Tensor y = b.forward(x, text);

  REQUIRE(b.entry.has_value());
  auto xp = testutil::naive_conv2d(x.values(), b.entry->weight.values(),
                                   b.entry->bias.values(), 1, 3, 8, 8, 4, 1, 1, 1);
  auto s1 = testutil::naive_conv2d(xp, b.dw1.weight.values(), b.dw1.bias.values(),
                                   1, 4, 8, 8, 4, 3, 1, 2);
  auto s2 = testutil::naive_conv2d(s1, b.pw1.weight.values(), b.pw1.bias.values(),
                                   1, 4, 8, 8, 4, 1, 1, 1);
  std::vector<double> s3(s1.size());
  for (size_t i = 0; i < s1.size(); ++i) s3[i] = std::max(0.0, s1[i] + s2[i]);
  auto s4 = testutil::naive_conv2d(s3, b.pw2.weight.values(), b.pw2.bias.values(),
                                   1, 4, 8, 8, 4, 1, 1, 1);
  auto s5 = testutil::naive_conv2d(s4, b.dw2.weight.values(), b.dw2.bias.values(),
                                   1, 4, 8, 8, 4, 3, 1, 2);
  auto s6 = ref_relu(testutil::naive_conv2d(s5, b.pw3.weight.values(), b.pw3.bias.values(),
                                            1, 4, 8, 8, 4, 1, 1, 1));
  auto s8 = testutil::naive_conv2d(s6, b.pw4.weight.values(), b.pw4.bias.values(),
                                   1, 4, 8, 8, 4, 1, 1, 1);
  auto fn = ref_group_norm(s8, 4, 64, b.norm.gamma.values(), b.norm.beta.values());
  auto term = ref_attention(fn, 4, 64, text, b.attn);
  for (size_t i = 0; i < fn.size(); ++i)
    CHECK(std::fabs(y.data()[int64_t(i)] - (fn[i] + term[i])) < 1e-12);
}

TEST_CASE("stage output shapes for the published and toy configurations") {
  auto full = adapter_output_shapes(AdapterConfig::full_prime(), 512, 512);
  REQUIRE(full.size() == 4);
  CHECK(full[0] == Shape{320, 64, 64});
  CHECK(full[1] == Shape{640, 32, 32});
  CHECK(full[2] == Shape{1280, 16, 16});
  CHECK(full[3] == Shape{1280, 8, 8});

  auto toy = adapter_output_shapes(AdapterConfig::toy128(), 128, 128);
  REQUIRE(toy.size() == 4);
  CHECK(toy[0] == Shape{32, 32, 32});
  CHECK(toy[1] == Shape{64, 16, 16});
  CHECK(toy[2] == Shape{128, 8, 8});
  CHECK(toy[3] == Shape{128, 4, 4});
}

TEST_CASE("toy-128 adapter forward produces the declared shapes") {
  Rng rng(271);
  AdapterConfig cfg = AdapterConfig::toy128();
  Adapter ad(cfg, 16, rng);
  Tensor ic = random_tensor({3, 128, 128}, rng);
  Tensor text = random_tensor({4, 16}, rng);
  auto es = ad.forward(ic, text);
  auto want = adapter_output_shapes(cfg, 128, 128);
  REQUIRE(es.size() == want.size());
  for (size_t k = 0; k < es.size(); ++k) {
    CHECK(es[k].shape() == want[k]);
    CHECK(all_finite(es[k]));
  }
  // batched run agrees shape-wise
  Tensor icb = random_tensor({2, 3, 128, 128}, rng);
  auto esb = ad.forward(icb, text);
  CHECK(esb[0].shape() == Shape{2, 32, 32, 32});
  CHECK(esb[3].shape() == Shape{2, 128, 4, 4});
}

TEST_CASE("indivisible condition resolution reports the required divisor") {
  Rng rng(277);
  Adapter ad(AdapterConfig::toy128(), 16, rng);
  Tensor text = random_tensor({4, 16}, rng);
  try {
    ad.forward(random_tensor({3, 80, 80}, rng), text);  // 80 not divisible by 32
    FAIL("expected ShapeError");
  } catch (const ShapeError& e) {
    CHECK(std::string(e.what()).find("32") != std::string::npos);
  }
}

TEST_CASE("zeroed last convs and attention output give all-zero stages") {
  Rng rng(281);
  AdapterConfig cfg = AdapterConfig::toy32();
  cfg.schedule = {8, 16, 32, 32};
  Adapter ad(cfg, 16, rng);
  for (auto& b : ad.prime_blocks()) b.conv1b.init_zero();
  Tensor ic = random_tensor({3, 32, 32}, rng);
  Tensor text = random_tensor({4, 16}, rng);
  auto es = ad.forward(ic, text);
  for (auto& e : es)
    for (int64_t i = 0; i < e.numel(); ++i) CHECK(e.data()[i] == 0.0);
}

TEST_CASE("end-to-end adapter gradients match finite differences") {
  Rng rng(283);
  AdapterConfig cfg;
  cfg.variant = AdapterVariant::Prime;
  cfg.schedule = {4, 8, 16, 16};
  cfg.r = 1;
  cfg.zero_init_attn_out = false;
  Adapter ad(cfg, 8, rng);
  Tensor ic = random_tensor({3, 16, 16}, rng);
  Tensor text = random_tensor({3, 8}, rng);
  ParamMap pm = ad.params("a.");
  set_requires_grad(pm, true);
  auto f = [&] {
    auto es = ad.forward(ic, text);
    Tensor loss = sum(mul(es[0], es[0]));
    for (size_t k = 1; k < es.size(); ++k) loss = add(loss, sum(mul(es[k], es[k])));
    return loss;
  };
  // >= 20 parameters across the pipeline
  std::vector<Tensor> probes;
  for (size_t i = 0; i < pm.size(); i += 3) probes.push_back(pm[i].second);
  auto res = testutil::check_gradients(probes, f, rng, 2);
  CHECK(res.checked >= 20);
  CHECK(res.max_rel_err < 1e-3);

  // slim variant as well
  AdapterConfig scfg = cfg;
  scfg.variant = AdapterVariant::Slim;
  scfg.groups = 2;
  Adapter sad(scfg, 8, rng);
  ParamMap spm = sad.params("s.");
  set_requires_grad(spm, true);
  auto sf = [&] {
    auto es = sad.forward(ic, text);
    Tensor loss = sum(mul(es[0], es[0]));
    for (size_t k = 1; k < es.size(); ++k) loss = add(loss, sum(mul(es[k], es[k])));
    return loss;
  };
  std::vector<Tensor> sprobes;
  for (size_t i = 0; i < spm.size(); i += 4) sprobes.push_back(spm[i].second);
  auto sres = testutil::check_gradients(sprobes, sf, rng, 2);
  CHECK(sres.checked >= 20);
  CHECK(sres.max_rel_err < 1e-3);
}

TEST_CASE("prompt changes the outputs, PAD replacement is the ablation path") {
  Rng rng(293);
  AdapterConfig cfg;
  cfg.schedule = {4, 8, 16, 16};
  cfg.r = 1;
  cfg.zero_init_attn_out = false;
  Adapter ad(cfg, 8, rng);
  Tensor ic = random_tensor({3, 16, 16}, rng);
  Tensor t1 = random_tensor({3, 8}, rng);
  Tensor t2 = random_tensor({3, 8}, rng);
  auto e1 = ad.forward(ic, t1);
  auto e2 = ad.forward(ic, t2);
  double l2 = 0;
  for (size_t k = 0; k < e1.size(); ++k)
    for (int64_t i = 0; i < e1[k].numel(); ++i) {
      double d = e1[k].data()[i] - e2[k].data()[i];
      l2 += d * d;
    }
  CHECK(l2 > 0.0);
  // PAD-for-prompt substitution is deterministic and reproducible
  Tensor pad_rows = Tensor::zeros({3, 8});
  auto a1 = ad.forward(ic, pad_rows);
  auto a2 = ad.forward(ic, pad_rows);
  for (size_t k = 0; k < a1.size(); ++k) CHECK(bytes_equal(a1[k], a2[k]));
}

TEST_CASE("prime and slim share output shapes under one config") {
  Rng rng(307);
  AdapterConfig cfg;
  cfg.schedule = {4, 8, 16, 16};
  cfg.r = 1;
  Adapter prime(cfg, 8, rng);
  AdapterConfig scfg = cfg;
  scfg.variant = AdapterVariant::Slim;
  Adapter slim(scfg, 8, rng);
  Tensor ic = random_tensor({3, 16, 16}, rng);
  Tensor text = random_tensor({3, 8}, rng);
  auto ep = prime.forward(ic, text);
  auto es = slim.forward(ic, text);
  REQUIRE(ep.size() == es.size());
  for (size_t k = 0; k < ep.size(); ++k) CHECK(ep[k].shape() == es[k].shape());
}

TEST_CASE("config json round-trips with exact field names") {
  AdapterConfig cfg = AdapterConfig::full_slim(4);
  std::string js = cfg.to_json();
  for (const char* key : {"variant", "stages", "schedule", "r", "groups",
                          "d_a_policy", "zero_init_attn_out"})
    CHECK(js.find(key) != std::string::npos);
  AdapterConfig back = AdapterConfig::from_json(js);
  CHECK(back.variant == AdapterVariant::Slim);
  CHECK(back.stages == 4);
  CHECK(back.schedule == std::vector<int64_t>{320, 640, 1280, 1280});
  CHECK(back.r == 8);
  CHECK(back.groups == 4);
  CHECK(back.zero_init_attn_out == true);
}

TEST_CASE("config validation rejects malformed settings") {
  CHECK_THROWS_AS(AdapterConfig::from_json("{\"variant\":\"Prime\",\"bogus\":1}"),
                  ConfigError);
  AdapterConfig bad;
  bad.schedule = {32, 64, 128};  // length != stages
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  AdapterConfig pat;
  pat.schedule = {32, 64, 100, 100};  // breaks the doubling pattern
  CHECK_THROWS_AS(pat.validate(), ConfigError);
  AdapterConfig heads;
  heads.attn_heads = 2;
  CHECK_THROWS_AS(heads.validate(), ConfigError);
  AdapterConfig pol;
  pol.d_a_policy = "fixed-64";
  CHECK_THROWS_AS(pol.validate(), ConfigError);
  CHECK_THROWS_AS(adapter_variant_from_string("Dense"), ConfigError);
}

TEST_CASE("parameter names are unique and count matches enumeration") {
  Rng rng(311);
  Adapter ad(AdapterConfig::toy32(AdapterVariant::Slim), 16, rng);
  ParamMap pm = ad.params("adapter.");
  std::set<std::string> names;
  for (auto& [name, t] : pm) names.insert(name);
  CHECK(names.size() == pm.size());
  CHECK(total_params(pm) == ad.param_count());
}
