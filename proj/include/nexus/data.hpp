#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "nexus/rng.hpp"
#include "nexus/tensor.hpp"

namespace nexus {

enum class PrimShape { Circle, Square, Triangle };
enum class PrimColor { Red, Green, Blue, Yellow };

std::string to_string(PrimShape s);
std::string to_string(PrimColor c);
PrimShape prim_shape_from_string(const std::string& s);
PrimColor prim_color_from_string(const std::string& s);

// Channel values in [-1,1] space; exactly one of +-1 per channel.
std::array<double, 3> color_rgb(PrimColor c);

// Caption word for a color: the base word or its synonym.
std::string color_word(PrimColor c, bool synonym);
std::string shape_word(PrimShape s);

// One filled shape on the unit canvas. size is the circle radius, the square
// half-side, or the triangle half-base; every shape fits inside the box
// [cx-size, cx+size] x [cy-size, cy+size].
struct Primitive {
  PrimShape shape = PrimShape::Circle;
  PrimColor color = PrimColor::Red;
  double cx = 0.5, cy = 0.5;
  double size = 0.2;
  bool synonym = false;  // caption uses the alternate color word

  // Pixel-center containment test in canvas coordinates, boundary inclusive.
  bool contains(double x, double y) const;
  double area() const;
};

// prims are in draw order: index 0 is farthest, the last entry is nearest
// and wins where shapes overlap. background is one shade on all channels,
// rounded to f32 so rendered tensors survive f32 storage bit-exactly.
struct Scene {
  uint64_t seed = 0;
  double background = -1.0;
  std::vector<Primitive> prims;

  std::string to_json() const;
  // Exact field names; unknown keys are an error.
  static Scene from_json(const std::string& json_text);
};

// Deterministic scene draw: 1-3 primitives, each fitting the canvas with a
// small margin, pairwise overlap at most 25% of the smaller shape's area
// (measured on a fixed 64x64 analysis grid).
Scene sample_scene(uint64_t seed);

// [3,S,S] in [-1,1]. Hard edges: a pixel takes the color of the nearest
// primitive containing its center, else the background shade.
Tensor render_scene(const Scene& scene, int64_t size);

// Sobel gradient magnitude per channel with clamp-to-edge borders, max over
// channels, thresholded to {-1,+1} and replicated to 3 channels.
Tensor extract_edges(const Tensor& image, double threshold = 2.0);

// Per-primitive constant depth from z-order: the nearest primitive reads 1.0
// and each step farther subtracts 0.5; background is -1. [3,S,S], replicated.
Tensor extract_depth(const Scene& scene, int64_t size);

// "a <color> <shape>" joined with "and", one clause per primitive in draw
// order. Every word is in Vocabulary::toy().
std::string caption(const Scene& scene);

struct DataSample {
  Tensor image;            // [3,S,S]
  Tensor condition;        // [3,S,S]
  std::string caption;
  std::string condition_kind;  // "edge" | "depth"
};

struct Dataset {
  int64_t image_size = 0;
  std::string condition_kind;
  uint64_t seed = 0;
  std::vector<Scene> scenes;
  std::vector<DataSample> samples;

  int64_t size() const { return int64_t(samples.size()); }
};

// Condition tensor for a scene: extract_edges(render) or extract_depth.
Tensor condition_for(const Scene& scene, const std::string& kind, int64_t size);

// Pure function of the arguments; sample i is drawn from a stream forked off
// the master seed, so prefixes agree across different n.
Dataset generate_dataset(int64_t n, int64_t image_size, const std::string& kind,
                         uint64_t seed);

// File layout: u64-LE header length, JSON header (count, image_size,
// condition_kind, seed, scenes, captions), then per sample an image and a
// condition NXTN record, both f32. Round trips are bit-exact because every
// generated value is f32-representable.
void write_dataset(const Dataset& ds, const std::string& path);
Dataset read_dataset(const std::string& path);

}  // namespace nexus
