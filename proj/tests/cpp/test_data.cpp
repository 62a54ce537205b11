#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <set>
#include <string>
#include <vector>

#include "helpers.hpp"
#include "nexus/data.hpp"
#include "nexus/serialize.hpp"
#include "nexus/text_encoder.hpp"

using namespace nexus;

static std::string tmp_path(const std::string& name) {
  return (std::filesystem::temp_directory_path() / name).string();
}

static std::string file_bytes(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  REQUIRE(bool(is));
  return std::string(std::istreambuf_iterator<char>(is),
                     std::istreambuf_iterator<char>());
}

static double px(const Tensor& img, int64_t c, int64_t i, int64_t j) {
  int64_t S = img.shape()[1];
  return img.data()[c * S * S + i * S + j];
}

static Scene one_prim_scene(PrimShape sh, PrimColor co, double cx, double cy,
                            double size, bool synonym = false) {
  Scene s;
  s.background = -0.5;
  s.prims.push_back({sh, co, cx, cy, size, synonym});
  return s;
}

// Count pixels whose 3 channels equal the given color exactly.
static int64_t count_color(const Tensor& img, const std::array<double, 3>& rgb) {
  int64_t S = img.shape()[1], n = 0;
  for (int64_t i = 0; i < S; ++i)
    for (int64_t j = 0; j < S; ++j)
      if (px(img, 0, i, j) == rgb[0] && px(img, 1, i, j) == rgb[1] &&
          px(img, 2, i, j) == rgb[2])
        ++n;
  return n;
}

TEST_CASE("primitive containment matches hand-picked points") {
  Primitive circ{PrimShape::Circle, PrimColor::Red, 0.5, 0.5, 0.25, false};
  CHECK(circ.contains(0.5, 0.5));
  CHECK(circ.contains(0.74, 0.5));
  CHECK_FALSE(circ.contains(0.76, 0.5));
  CHECK(circ.contains(0.67, 0.67));       // dist^2 = 0.0578 < 0.0625
  CHECK_FALSE(circ.contains(0.68, 0.68)); // dist^2 = 0.0648
  CHECK(circ.area() == doctest::Approx(M_PI * 0.0625).epsilon(1e-12));

  Primitive sq{PrimShape::Square, PrimColor::Green, 0.5, 0.5, 0.25, false};
  CHECK(sq.contains(0.74, 0.74));
  CHECK_FALSE(sq.contains(0.76, 0.5));
  CHECK_FALSE(sq.contains(0.5, 0.76));
  CHECK(sq.area() == doctest::Approx(0.25).epsilon(1e-12));

  // apex up at (cx, cy-size), base at cy+size
  Primitive tri{PrimShape::Triangle, PrimColor::Blue, 0.5, 0.5, 0.25, false};
  CHECK(tri.contains(0.5, 0.5));
  CHECK(tri.contains(0.62, 0.5));        // half-width at y=0.5 is 0.125
  CHECK_FALSE(tri.contains(0.63, 0.5));
  CHECK_FALSE(tri.contains(0.5, 0.2));   // above apex
  CHECK(tri.contains(0.74, 0.74));       // half-width at y=0.74 is 0.245
  CHECK_FALSE(tri.contains(0.5, 0.76));  // below base
  CHECK(tri.area() == doctest::Approx(0.125).epsilon(1e-12));
}

TEST_CASE("color table and caption words") {
  CHECK(color_rgb(PrimColor::Red) == std::array<double, 3>{1.0, -1.0, -1.0});
  CHECK(color_rgb(PrimColor::Green) == std::array<double, 3>{-1.0, 1.0, -1.0});
  CHECK(color_rgb(PrimColor::Blue) == std::array<double, 3>{-1.0, -1.0, 1.0});
  CHECK(color_rgb(PrimColor::Yellow) == std::array<double, 3>{1.0, 1.0, -1.0});

  CHECK(color_word(PrimColor::Red, false) == "red");
  CHECK(color_word(PrimColor::Red, true) == "crimson");
  CHECK(color_word(PrimColor::Green, true) == "emerald");
  CHECK(color_word(PrimColor::Blue, true) == "azure");
  CHECK(color_word(PrimColor::Yellow, true) == "golden");
  CHECK(shape_word(PrimShape::Circle) == "circle");
  CHECK(shape_word(PrimShape::Square) == "square");
  CHECK(shape_word(PrimShape::Triangle) == "triangle");

  for (auto sh : {PrimShape::Circle, PrimShape::Square, PrimShape::Triangle})
    CHECK(prim_shape_from_string(to_string(sh)) == sh);
  for (auto co : {PrimColor::Red, PrimColor::Green, PrimColor::Blue,
                  PrimColor::Yellow})
    CHECK(prim_color_from_string(to_string(co)) == co);
  CHECK_THROWS_AS(prim_shape_from_string("hexagon"), ConfigError);
  CHECK_THROWS_AS(prim_color_from_string("mauve"), ConfigError);
}

TEST_CASE("a centered red circle renders with the documented channel pattern") {
  Scene s = one_prim_scene(PrimShape::Circle, PrimColor::Red, 0.5, 0.5, 0.25);
  Tensor img = render_scene(s, 64);
  REQUIRE(img.shape() == Shape{3, 64, 64});

  // center pixel: red channel at max, others at min
  CHECK(px(img, 0, 32, 32) == 1.0);
  CHECK(px(img, 1, 32, 32) == -1.0);
  CHECK(px(img, 2, 32, 32) == -1.0);
  // far corner is background on every channel
  CHECK(px(img, 0, 2, 2) == -0.5);
  CHECK(px(img, 1, 2, 2) == -0.5);
  CHECK(px(img, 2, 2, 2) == -0.5);

  Tensor again = render_scene(s, 64);
  CHECK(img.values() == again.values());
}

TEST_CASE("rasterized areas track the analytic ones") {
  auto red = color_rgb(PrimColor::Red);
  // pixel-center counts for radius 0.25 at each supported size
  struct Row { int64_t S; int64_t count; };
  for (Row r : {Row{32, 208}, Row{64, 812}, Row{128, 3228}}) {
    Scene s = one_prim_scene(PrimShape::Circle, PrimColor::Red, 0.5, 0.5, 0.25);
    Tensor img = render_scene(s, r.S);
    int64_t n = count_color(img, red);
    CHECK(n == r.count);
    double rho = 0.25 * double(r.S);
    CHECK(std::fabs(double(n) - M_PI * rho * rho) <= 0.05 * M_PI * rho * rho);
  }

  // the half-integer grid cuts this square into exactly 32x32 pixels
  Scene sq = one_prim_scene(PrimShape::Square, PrimColor::Green, 0.5, 0.5, 0.25);
  Tensor simg = render_scene(sq, 64);
  CHECK(count_color(simg, color_rgb(PrimColor::Green)) == 1024);
  CHECK(px(simg, 1, 16, 16) == 1.0);
  CHECK(px(simg, 1, 16, 15) == -0.5);
  CHECK(px(simg, 1, 47, 47) == 1.0);
  CHECK(px(simg, 1, 48, 47) == -0.5);

  Scene tr = one_prim_scene(PrimShape::Triangle, PrimColor::Blue, 0.5, 0.5, 0.25);
  Tensor timg = render_scene(tr, 64);
  int64_t tn = count_color(timg, color_rgb(PrimColor::Blue));
  CHECK(tn == 512);  // analytic area 2 * 0.25^2 lands exactly on this grid
  CHECK(px(timg, 2, 19, 32) == 1.0);   // inside, above center
  CHECK(px(timg, 2, 19, 20) == -0.5);  // same row, outside the slope
  CHECK(px(timg, 2, 48, 32) == -0.5);  // below the base
}

TEST_CASE("sobel step response matches the hand computation") {
  // channel 0 steps from -1 to +1 between columns 2 and 3; rows constant.
  // With clamp-to-edge borders the kernel reads 4*(c(j+1)-c(j-1)), so only
  // the two columns touching the step reach magnitude 8.
  std::vector<double> v(3 * 5 * 5, -1.0);
  for (int64_t i = 0; i < 5; ++i)
    for (int64_t j = 3; j < 5; ++j) v[i * 5 + j] = 1.0;
  Tensor img = Tensor::from_data({3, 5, 5}, v);
  Tensor e = extract_edges(img);
  REQUIRE(e.shape() == Shape{3, 5, 5});
  for (int64_t c = 0; c < 3; ++c)
    for (int64_t i = 0; i < 5; ++i)
      for (int64_t j = 0; j < 5; ++j)
        CHECK(px(e, c, i, j) == ((j == 2 || j == 3) ? 1.0 : -1.0));

  // a step of height 0.4 peaks at magnitude 1.6, below the 2.0 threshold
  std::vector<double> w(3 * 5 * 5, 0.0);
  for (int64_t i = 0; i < 5; ++i)
    for (int64_t j = 3; j < 5; ++j) w[i * 5 + j] = 0.4;
  Tensor weak = extract_edges(Tensor::from_data({3, 5, 5}, w));
  for (double x : weak.values()) CHECK(x == -1.0);
}

TEST_CASE("constant images produce empty edge maps") {
  for (double value : {-1.0, 0.0, 0.37}) {
    Tensor e = extract_edges(Tensor::full({3, 16, 16}, value));
    for (double x : e.values()) CHECK(x == -1.0);
  }
}

TEST_CASE("edge map marks square sides within one pixel") {
  Scene s = one_prim_scene(PrimShape::Square, PrimColor::Green, 0.5, 0.5, 0.25);
  Tensor e = extract_edges(render_scene(s, 64));

  // sides sit between pixel columns/rows 15|16 and 47|48
  auto near_boundary = [](double a, double b) {
    return std::fabs(a - 16.0) <= 1.5 || std::fabs(a - 48.0) <= 1.5 ||
           std::fabs(b - 16.0) <= 1.5 || std::fabs(b - 48.0) <= 1.5;
  };
  for (int64_t i = 0; i < 64; ++i) {
    for (int64_t j = 0; j < 64; ++j) {
      double y = double(i) + 0.5, x = double(j) + 0.5;
      double mark = px(e, 0, i, j);
      CHECK((mark == 1.0 || mark == -1.0));
      CHECK(px(e, 1, i, j) == mark);
      CHECK(px(e, 2, i, j) == mark);
      bool in_band = near_boundary(x, y) && 14.5 <= x && x <= 49.5 &&
                     14.5 <= y && y <= 49.5;
      if (mark == 1.0) CHECK(in_band);
    }
  }
  // the rings just inside and just outside each side must fire
  for (int64_t k = 17; k <= 46; ++k) {
    for (int64_t edge : {15, 16, 47, 48}) {
      CHECK(px(e, 0, k, edge) == 1.0);
      CHECK(px(e, 0, edge, k) == 1.0);
    }
  }
}

TEST_CASE("edges of an edge map stay against the original edges") {
  Scene s = one_prim_scene(PrimShape::Circle, PrimColor::Yellow, 0.5, 0.5, 0.2);
  Tensor e1 = extract_edges(render_scene(s, 32));
  Tensor e2 = extract_edges(e1);
  for (double x : e2.values()) CHECK((x == 1.0 || x == -1.0));
  // a 3x3 window two pixels away from every marked pixel is constant, so
  // second-pass marks can only hug the first-pass bands
  for (int64_t i = 0; i < 32; ++i) {
    for (int64_t j = 0; j < 32; ++j) {
      if (px(e2, 0, i, j) != 1.0) continue;
      bool near = false;
      for (int64_t di = -1; di <= 1 && !near; ++di)
        for (int64_t dj = -1; dj <= 1 && !near; ++dj) {
          int64_t a = i + di, b = j + dj;
          if (a >= 0 && a < 32 && b >= 0 && b < 32 && px(e1, 0, a, b) == 1.0)
            near = true;
        }
      CHECK(near);
    }
  }
}

TEST_CASE("depth maps follow z order") {
  Scene empty;
  empty.background = -0.5;  // depth ignores the shade, background reads -1
  Tensor d0 = extract_depth(empty, 16);
  REQUIRE(d0.shape() == Shape{3, 16, 16});
  for (double x : d0.values()) CHECK(x == -1.0);

  // far square then near circle, overlapping around x in [0.4, 0.6]
  Scene s;
  s.background = -0.5;
  s.prims.push_back({PrimShape::Square, PrimColor::Red, 0.4, 0.5, 0.2, false});
  s.prims.push_back({PrimShape::Circle, PrimColor::Blue, 0.6, 0.5, 0.2, false});
  Tensor d = extract_depth(s, 64);
  CHECK(px(d, 0, 32, 19) == 0.5);   // square only
  CHECK(px(d, 0, 32, 48) == 1.0);   // circle only
  CHECK(px(d, 0, 32, 32) == 1.0);   // overlap, the nearer circle wins
  CHECK(px(d, 0, 2, 2) == -1.0);
  std::set<double> distinct(d.values().begin(), d.values().end());
  CHECK(distinct == std::set<double>{-1.0, 0.5, 1.0});
  for (int64_t c = 0; c < 3; ++c)
    for (int64_t i = 0; i < 64; ++i)
      for (int64_t j = 0; j < 64; ++j) CHECK(px(d, c, i, j) == px(d, 0, i, j));

  // sampled scenes: the value under each pixel is fixed by the topmost prim
  int64_t multi = 0;
  for (uint64_t seed = 900; seed < 940; ++seed) {
    Scene sc = sample_scene(seed);
    int64_t n = int64_t(sc.prims.size());
    if (n >= 2) ++multi;
    Tensor dep = extract_depth(sc, 32);
    std::set<double> seen;
    for (int64_t i = 0; i < 32; ++i) {
      for (int64_t j = 0; j < 32; ++j) {
        double x = (double(j) + 0.5) / 32.0, y = (double(i) + 0.5) / 32.0;
        int64_t top = -1;
        for (int64_t k = n - 1; k >= 0; --k)
          if (sc.prims[size_t(k)].contains(x, y)) { top = k; break; }
        double want = top < 0 ? -1.0 : 1.0 - 0.5 * double(n - 1 - top);
        CHECK(px(dep, 0, i, j) == want);
        seen.insert(px(dep, 0, i, j));
      }
    }
    // every prim keeps at least half its area visible, background survives too
    CHECK(int64_t(seen.size()) == n + 1);
  }
  CHECK(multi > 5);
}

TEST_CASE("scene sampling respects the documented constraints") {
  std::set<size_t> counts;
  for (uint64_t seed = 0; seed < 300; ++seed) {
    Scene s = sample_scene(seed);
    CHECK(s.seed == seed);
    REQUIRE(s.prims.size() >= 1);
    REQUIRE(s.prims.size() <= 3);
    counts.insert(s.prims.size());
    CHECK(s.background >= -1.0);
    CHECK(s.background <= -0.2);
    CHECK(double(float(s.background)) == s.background);
    for (const Primitive& p : s.prims) {
      CHECK(p.size >= 0.05);
      CHECK(p.size <= 0.30);
      CHECK(p.cx - p.size >= 0.0199);
      CHECK(p.cx + p.size <= 0.9801);
      CHECK(p.cy - p.size >= 0.0199);
      CHECK(p.cy + p.size <= 0.9801);
    }
    // pairwise overlap on the 64x64 analysis grid
    for (size_t a = 0; a < s.prims.size(); ++a) {
      for (size_t b = a + 1; b < s.prims.size(); ++b) {
        int64_t na = 0, nb = 0, both = 0;
        for (int64_t i = 0; i < 64; ++i) {
          for (int64_t j = 0; j < 64; ++j) {
            double x = (double(j) + 0.5) / 64.0, y = (double(i) + 0.5) / 64.0;
            bool ia = s.prims[a].contains(x, y), ib = s.prims[b].contains(x, y);
            na += ia; nb += ib; both += ia && ib;
          }
        }
        REQUIRE(std::min(na, nb) > 0);
        CHECK(double(both) <= 0.25 * double(std::min(na, nb)) + 1e-9);
      }
    }
  }
  CHECK(counts == std::set<size_t>{1, 2, 3});

  CHECK(sample_scene(77).to_json() == sample_scene(77).to_json());
  CHECK(sample_scene(77).to_json() != sample_scene(78).to_json());
}

TEST_CASE("captions follow the grammar and tokenize") {
  Scene s = one_prim_scene(PrimShape::Circle, PrimColor::Red, 0.5, 0.5, 0.2);
  CHECK(caption(s) == "a red circle");
  s.prims[0].synonym = true;
  CHECK(caption(s) == "a crimson circle");
  s.prims.push_back({PrimShape::Square, PrimColor::Blue, 0.2, 0.2, 0.1, false});
  CHECK(caption(s) == "a crimson circle and a blue square");

  Rng rng(31);
  TextEncoder enc(Vocabulary::toy(), TextEncoderConfig{}, rng);
  std::string corpus;
  for (uint64_t seed = 1000; seed < 1400; ++seed) {
    std::string cap = caption(sample_scene(seed));
    std::vector<int64_t> toks = enc.tokenize(cap);
    CHECK(int64_t(toks.size()) == enc.context());
    CHECK(std::count(toks.begin(), toks.end(), Vocabulary::kEos) == 1);
    corpus += cap + "\n";
  }
  // both halves of each color pair show up across the corpus
  for (const char* word : {"red", "crimson", "green", "emerald", "blue",
                           "azure", "yellow", "golden"})
    CHECK(corpus.find(word) != std::string::npos);
}

TEST_CASE("scene json round trips exactly") {
  Scene s = sample_scene(4242);
  std::string j = s.to_json();
  Scene t = Scene::from_json(j);
  CHECK(t.to_json() == j);
  CHECK(t.seed == s.seed);
  CHECK(t.background == s.background);
  REQUIRE(t.prims.size() == s.prims.size());
  for (size_t k = 0; k < s.prims.size(); ++k) {
    CHECK(t.prims[k].shape == s.prims[k].shape);
    CHECK(t.prims[k].color == s.prims[k].color);
    CHECK(t.prims[k].cx == s.prims[k].cx);
    CHECK(t.prims[k].cy == s.prims[k].cy);
    CHECK(t.prims[k].size == s.prims[k].size);
    CHECK(t.prims[k].synonym == s.prims[k].synonym);
  }
  CHECK_THROWS_AS(
      Scene::from_json("{\"seed\":1,\"background\":-0.5,\"prims\":[],\"x\":0}"),
      ConfigError);
  CHECK_THROWS_AS(Scene::from_json("{\"seed\":1}"), ConfigError);
}

TEST_CASE("dataset generation is pure and prefix stable") {
  Dataset a = generate_dataset(5, 32, "edge", 123);
  Dataset b = generate_dataset(5, 32, "edge", 123);
  Dataset c = generate_dataset(3, 32, "edge", 123);
  REQUIRE(a.size() == 5);
  CHECK(a.image_size == 32);
  CHECK(a.condition_kind == "edge");
  CHECK(a.seed == 123);
  for (int64_t i = 0; i < 5; ++i) {
    CHECK(a.samples[size_t(i)].image.values() ==
          b.samples[size_t(i)].image.values());
    CHECK(a.samples[size_t(i)].condition.values() ==
          b.samples[size_t(i)].condition.values());
    CHECK(a.samples[size_t(i)].caption == b.samples[size_t(i)].caption);
    CHECK(a.scenes[size_t(i)].to_json() == b.scenes[size_t(i)].to_json());
    CHECK(a.samples[size_t(i)].condition_kind == "edge");
  }
  for (int64_t i = 0; i < 3; ++i) {
    CHECK(a.scenes[size_t(i)].to_json() == c.scenes[size_t(i)].to_json());
    CHECK(a.samples[size_t(i)].image.values() ==
          c.samples[size_t(i)].image.values());
  }

  // stored tensors recompute from the scene alone, and survive f32
  for (int64_t i = 0; i < a.size(); ++i) {
    const DataSample& smp = a.samples[size_t(i)];
    const Scene& sc = a.scenes[size_t(i)];
    CHECK(smp.image.values() == render_scene(sc, 32).values());
    CHECK(smp.condition.values() == condition_for(sc, "edge", 32).values());
    CHECK(smp.caption == caption(sc));
    for (double v : smp.image.values()) CHECK(double(float(v)) == v);
    for (double v : smp.condition.values()) {
      CHECK(double(float(v)) == v);
      CHECK((v == 1.0 || v == -1.0));
    }
  }

  Dataset d = generate_dataset(2, 32, "depth", 9);
  for (const DataSample& smp : d.samples) {
    CHECK(smp.condition_kind == "depth");
    for (double v : smp.condition.values()) CHECK(double(float(v)) == v);
  }
  CHECK(d.samples[0].condition.values() ==
        extract_depth(d.scenes[0], 32).values());

  CHECK_THROWS_AS(generate_dataset(-1, 32, "edge", 0), ConfigError);
  CHECK_THROWS_AS(generate_dataset(1, 48, "edge", 0), ConfigError);
  CHECK_THROWS_AS(generate_dataset(1, 32, "sketch", 0), ConfigError);
}

TEST_CASE("dataset files round trip bit exactly") {
  std::string path = tmp_path("nexus_ds_test.bin");
  Dataset a = generate_dataset(4, 32, "depth", 55);
  write_dataset(a, path);
  Dataset r = read_dataset(path);
  CHECK(r.image_size == a.image_size);
  CHECK(r.condition_kind == a.condition_kind);
  CHECK(r.seed == a.seed);
  REQUIRE(r.size() == a.size());
  for (int64_t i = 0; i < a.size(); ++i) {
    CHECK(r.samples[size_t(i)].image.values() ==
          a.samples[size_t(i)].image.values());
    CHECK(r.samples[size_t(i)].condition.values() ==
          a.samples[size_t(i)].condition.values());
    CHECK(r.samples[size_t(i)].caption == a.samples[size_t(i)].caption);
    CHECK(r.samples[size_t(i)].condition_kind == "depth");
    CHECK(r.scenes[size_t(i)].to_json() == a.scenes[size_t(i)].to_json());
  }

  // regenerating and rewriting yields the identical file
  std::string again = tmp_path("nexus_ds_test2.bin");
  write_dataset(generate_dataset(4, 32, "depth", 55), again);
  CHECK(file_bytes(path) == file_bytes(again));

  std::string empty_path = tmp_path("nexus_ds_empty.bin");
  write_dataset(generate_dataset(0, 64, "edge", 1), empty_path);
  Dataset e = read_dataset(empty_path);
  CHECK(e.size() == 0);
  CHECK(e.image_size == 64);

  std::string bad = tmp_path("nexus_ds_bad.bin");
  write_text_file(bad, "not a dataset");
  CHECK_THROWS_AS(read_dataset(bad), IoError);
  CHECK_THROWS_AS(read_dataset(tmp_path("nexus_ds_missing.bin")), IoError);

  std::filesystem::remove(path);
  std::filesystem::remove(again);
  std::filesystem::remove(empty_path);
  std::filesystem::remove(bad);
}
