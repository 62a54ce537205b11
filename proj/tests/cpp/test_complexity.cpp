#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "helpers.hpp"
#include "nexus/complexity.hpp"

using namespace nexus;

namespace {

AdapterConfig tiny_cfg(AdapterVariant v = AdapterVariant::Prime) {
  AdapterConfig cfg;
  cfg.variant = v;
  cfg.schedule = {4, 8, 16, 16};
  cfg.r = 1;
  return cfg;
}

}  // namespace

TEST_CASE("hand-enumerated tiny dense config") {
  // stage1 (3->4): 112+20+148+20 convs, 8 norm, 112 attention = 420
  // phi1 148; stage2 (4->8) 1328; phi2 584; stage3 (8->16) 4896; phi3 2320;
  // stage4 (16->16) 6048; total 15744
  ComplexityReport rep = count_params(tiny_cfg(), 8);
  CHECK(rep.total_params == 15744);
  int64_t row_sum = 0;
  for (const auto& r : rep.rows) row_sum += r.params;
  CHECK(row_sum == rep.total_params);
  REQUIRE(rep.find("stage1.conv3a") != nullptr);
  CHECK(rep.find("stage1.conv3a")->params == 112);
  REQUIRE(rep.find("phi1") != nullptr);
  CHECK(rep.find("phi1")->params == 148);
  REQUIRE(rep.find("stage4.attn.wq") != nullptr);
  CHECK(rep.find("stage4.attn.wq")->params == 16 * 16 + 16);
}

TEST_CASE("analytic count equals instantiated enumeration") {
  Rng rng(401);
  std::vector<AdapterConfig> cfgs = {
      tiny_cfg(), tiny_cfg(AdapterVariant::Slim), AdapterConfig::toy32(),
      AdapterConfig::toy32(AdapterVariant::Slim), AdapterConfig::toy128()};
  cfgs.back().variant = AdapterVariant::Prime;
  AdapterConfig s4 = AdapterConfig::toy32(AdapterVariant::Slim);
  s4.groups = 4;
  cfgs.push_back(s4);
  AdapterConfig k2 = tiny_cfg();
  k2.stages = 2;
  k2.schedule = {4, 8};
  cfgs.push_back(k2);
  AdapterConfig k3 = tiny_cfg(AdapterVariant::Slim);
  k3.stages = 3;
  k3.schedule = {4, 8, 16};
  cfgs.push_back(k3);
  for (const auto& cfg : cfgs) {
    Adapter built(cfg, 16, rng);
    CHECK(count_params(cfg, 16).total_params == built.param_count());
  }
}

TEST_CASE("zero-stage config counts zero parameters") {
  AdapterConfig cfg;
  cfg.stages = 0;
  cfg.schedule = {};
  CHECK(count_params(cfg, 768).total_params == 0);
}

TEST_CASE("published-scale presets hit the frozen totals") {
  ComplexityReport prime = count_params(AdapterConfig::full_prime(), 768);
  CHECK(prime.total_params == 98566720);
  ComplexityReport slim = count_params(AdapterConfig::full_slim(2), 768);
  CHECK(slim.total_params == 63391040);
  // tolerance bands around the published numbers
  CHECK(std::fabs(double(prime.total_params) - 85.82e6) / 85.82e6 < 0.15);
  CHECK(std::fabs(double(slim.total_params) - 59.29e6) / 59.29e6 < 0.15);
}

TEST_CASE("published-scale flop totals at 512x512") {
  ComplexityReport prime = count_flops(AdapterConfig::full_prime(), 512, 512, 768);
  CHECK(prime.total_macs == 27698135040);
  CHECK(std::fabs(prime.gflops() - 33.32) / 33.32 < 0.20);
  ComplexityReport slim = count_flops(AdapterConfig::full_slim(2), 512, 512, 768);
  CHECK(slim.total_macs == 21286010880);
  CHECK(std::fabs(slim.gflops() - 23.77) / 23.77 < 0.20);
  // convention switch scales the derived figure only
  ComplexityReport doubled =
      count_flops(AdapterConfig::full_prime(), 512, 512, 768, 16, 2.0);
  CHECK(doubled.total_macs == prime.total_macs);
  CHECK(doubled.gflops() == doctest::Approx(2.0 * prime.gflops()));
}

TEST_CASE("grouped share is exactly affine in 1/G") {
  auto total = [](int64_t g) {
    return count_params(AdapterConfig::full_slim(g), 768).total_params;
  };
  int64_t p1 = total(1), p2 = total(2), p4 = total(4), p8 = total(8);
  // slope from G=2,4 must reproduce G=1 and G=8 with integer exactness
  int64_t B = 4 * (p2 - p4);
  int64_t A = p2 - B / 2;
  CHECK(p1 == A + B);
  CHECK(p8 == A + B / 8);
  CHECK(std::fabs(double(B) - 68.24e6) / 68.24e6 < 0.15);
}

TEST_CASE("published group ablation points obey the same law to 0.1 percent") {
  double p2 = 59.29e6, p4 = 42.23e6, p8 = 33.71e6;
  double B = (p2 - p4) / (1.0 / 2 - 1.0 / 4);
  double A = p2 - B / 2;
  double pred8 = A + B / 8;
  CHECK(std::fabs(pred8 - p8) / p8 < 0.001);
}

TEST_CASE("reference-model deltas match the published gaps") {
  ComplexityReport t2i = t2i_reference_count();
  CHECK(t2i.total_params == 77369280);
  CHECK(t2i.total_macs == 29947330560);
  int64_t row_params = 0, row_macs = 0;
  for (const auto& r : t2i.rows) {
    row_params += r.params;
    row_macs += r.macs;
  }
  CHECK(row_params == t2i.total_params);
  CHECK(row_macs == t2i.total_macs);
  double prime_minus_t2i = 85.82e6 - double(t2i.total_params);
  double t2i_minus_slim = double(t2i.total_params) - 59.29e6;
  CHECK(prime_minus_t2i >= 7e6);
  CHECK(prime_minus_t2i <= 10e6);
  CHECK(t2i_minus_slim >= 16e6);
  CHECK(t2i_minus_slim <= 20e6);
}

TEST_CASE("pointwise conv rows follow the closed form") {
  AdapterConfig cfg = tiny_cfg();
  ComplexityReport rep = count_flops(cfg, 16, 16, 8);
  // stage1 conv1a: 4 channels in and out at full 16x16 resolution
  REQUIRE(rep.find("stage1.conv1a") != nullptr);
  CHECK(rep.find("stage1.conv1a")->macs == 4 * 4 * 16 * 16);
  // stage2 runs at half resolution
  REQUIRE(rep.find("stage2.conv1a") != nullptr);
  CHECK(rep.find("stage2.conv1a")->macs == 8 * 8 * 8 * 8);
}

TEST_CASE("halving the input resolution divides conv MACs by four") {
  AdapterConfig cfg = AdapterConfig::toy128();
  ComplexityReport hi = count_flops(cfg, 128, 128, 16);
  ComplexityReport lo = count_flops(cfg, 64, 64, 16);
  for (const auto& row : hi.rows) {
    if (row.name.find("conv") == std::string::npos &&
        row.name.find("phi") == std::string::npos)
      continue;
    const ComplexityRow* other = lo.find(row.name);
    REQUIRE(other != nullptr);
    CHECK(row.macs == 4 * other->macs);
  }
}

TEST_CASE("flop count grows with channel width") {
  AdapterConfig narrow = tiny_cfg();
  AdapterConfig wide = tiny_cfg();
  wide.schedule = {8, 16, 32, 32};
  CHECK(count_flops(wide, 16, 16, 8).total_macs >
        count_flops(narrow, 16, 16, 8).total_macs);
  CHECK(count_params(wide, 8).total_params > count_params(narrow, 8).total_params);
}

TEST_CASE("report serializations carry every row") {
  ComplexityReport rep = count_params(tiny_cfg(), 8);
  std::string csv = rep.to_csv();
  CHECK(csv.find("layer,params,macs") == 0);
  size_t lines = size_t(std::count(csv.begin(), csv.end(), '\n'));
  CHECK(lines == rep.rows.size() + 2);  // header + rows + total
  std::string text = rep.to_text();
  CHECK(text.find("total") != std::string::npos);
  CHECK(text.find("15744") != std::string::npos);
}
