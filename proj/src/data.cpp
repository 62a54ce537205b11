#include "nexus/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "nexus/serialize.hpp"

using nlohmann::json;

namespace nexus {

namespace {

double f32_round(double x) { return double(float(x)); }

// Grid the overlap invariant is defined on; tests measure on the same grid.
constexpr int64_t kOverlapGrid = 64;

double overlap_fraction(const Primitive& a, const Primitive& b) {
  int64_t na = 0, nb = 0, both = 0;
  for (int64_t i = 0; i < kOverlapGrid; ++i) {
    double y = (double(i) + 0.5) / double(kOverlapGrid);
    for (int64_t j = 0; j < kOverlapGrid; ++j) {
      double x = (double(j) + 0.5) / double(kOverlapGrid);
      bool ia = a.contains(x, y), ib = b.contains(x, y);
      na += ia;
      nb += ib;
      both += ia && ib;
    }
  }
  int64_t small = std::min(na, nb);
  if (small == 0) return 1.0;
  return double(both) / double(small);
}

void check_image_size(int64_t size) {
  if (size != 32 && size != 64 && size != 128)
    throw ConfigError("image size must be 32, 64 or 128, got " +
                      std::to_string(size));
}

void check_condition_kind(const std::string& kind) {
  if (kind != "edge" && kind != "depth")
    throw ConfigError("condition kind must be 'edge' or 'depth', got '" + kind +
                      "'");
}

void put_u64(std::ostream& os, uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = (unsigned char)(v >> (8 * i));
  os.write(reinterpret_cast<const char*>(b), 8);
}

uint64_t get_u64(std::istream& is) {
  unsigned char b[8];
  is.read(reinterpret_cast<char*>(b), 8);
  if (!is) throw IoError("unexpected end of file reading u64");
  uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= uint64_t(b[i]) << (8 * i);
  return v;
}

}  // namespace

std::string to_string(PrimShape s) {
  switch (s) {
    case PrimShape::Circle: return "circle";
    case PrimShape::Square: return "square";
    case PrimShape::Triangle: return "triangle";
  }
  throw ConfigError("invalid primitive shape value");
}

std::string to_string(PrimColor c) {
  switch (c) {
    case PrimColor::Red: return "red";
    case PrimColor::Green: return "green";
    case PrimColor::Blue: return "blue";
    case PrimColor::Yellow: return "yellow";
  }
  throw ConfigError("invalid primitive color value");
}

PrimShape prim_shape_from_string(const std::string& s) {
  if (s == "circle") return PrimShape::Circle;
  if (s == "square") return PrimShape::Square;
  if (s == "triangle") return PrimShape::Triangle;
  throw ConfigError("unknown primitive shape '" + s + "'");
}

PrimColor prim_color_from_string(const std::string& s) {
  if (s == "red") return PrimColor::Red;
  if (s == "green") return PrimColor::Green;
  if (s == "blue") return PrimColor::Blue;
  if (s == "yellow") return PrimColor::Yellow;
  throw ConfigError("unknown primitive color '" + s + "'");
}

std::array<double, 3> color_rgb(PrimColor c) {
  switch (c) {
    case PrimColor::Red: return {1.0, -1.0, -1.0};
    case PrimColor::Green: return {-1.0, 1.0, -1.0};
    case PrimColor::Blue: return {-1.0, -1.0, 1.0};
    case PrimColor::Yellow: return {1.0, 1.0, -1.0};
  }
  throw ConfigError("invalid primitive color value");
}

std::string color_word(PrimColor c, bool synonym) {
  switch (c) {
    case PrimColor::Red: return synonym ? "crimson" : "red";
    case PrimColor::Green: return synonym ? "emerald" : "green";
    case PrimColor::Blue: return synonym ? "azure" : "blue";
    case PrimColor::Yellow: return synonym ? "golden" : "yellow";
  }
  throw ConfigError("invalid primitive color value");
}

std::string shape_word(PrimShape s) { return to_string(s); }

bool Primitive::contains(double x, double y) const {
  double dx = x - cx, dy = y - cy;
  switch (shape) {
    case PrimShape::Circle:
      return dx * dx + dy * dy <= size * size;
    case PrimShape::Square:
      return std::max(std::fabs(dx), std::fabs(dy)) <= size;
    case PrimShape::Triangle:
      // apex at (cx, cy-size), base corners at (cx +/- size, cy+size)
      return dy >= -size && dy <= size && std::fabs(dx) <= (dy + size) / 2.0;
  }
  return false;
}

double Primitive::area() const {
  switch (shape) {
    case PrimShape::Circle: return M_PI * size * size;
    case PrimShape::Square: return 4.0 * size * size;
    case PrimShape::Triangle: return 2.0 * size * size;
  }
  return 0.0;
}

std::string Scene::to_json() const {
  json j;
  j["seed"] = seed;
  j["background"] = background;
  json arr = json::array();
  for (const Primitive& p : prims) {
    json pj;
    pj["shape"] = nexus::to_string(p.shape);
    pj["color"] = nexus::to_string(p.color);
    pj["cx"] = p.cx;
    pj["cy"] = p.cy;
    pj["size"] = p.size;
    pj["synonym"] = p.synonym;
    arr.push_back(pj);
  }
  j["prims"] = arr;
  return j.dump();
}

namespace {

void require_exact_keys(const json& j, const std::vector<std::string>& keys,
                        const char* what) {
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (std::find(keys.begin(), keys.end(), it.key()) == keys.end())
      throw ConfigError(std::string("unknown key '") + it.key() + "' in " +
                        what);
  }
  for (const std::string& k : keys)
    if (!j.contains(k))
      throw ConfigError(std::string("missing key '") + k + "' in " + what);
}

}  // namespace

Scene Scene::from_json(const std::string& json_text) {
  json j;
  try {
    j = json::parse(json_text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("invalid scene json: ") + e.what());
  }
  try {
    require_exact_keys(j, {"seed", "background", "prims"}, "scene");
    Scene s;
    s.seed = j["seed"].get<uint64_t>();
    s.background = j["background"].get<double>();
    for (const json& pj : j["prims"]) {
      require_exact_keys(pj, {"shape", "color", "cx", "cy", "size", "synonym"},
                         "primitive");
      Primitive p;
      p.shape = prim_shape_from_string(pj["shape"].get<std::string>());
      p.color = prim_color_from_string(pj["color"].get<std::string>());
      p.cx = pj["cx"].get<double>();
      p.cy = pj["cy"].get<double>();
      p.size = pj["size"].get<double>();
      p.synonym = pj["synonym"].get<bool>();
      s.prims.push_back(p);
    }
    return s;
  } catch (const json::exception& e) {
    throw ConfigError(std::string("invalid scene json: ") + e.what());
  }
}

// Stream layout: background, primitive count, then per slot up to 64 trials
// of (shape, color, size, cx, cy, synonym coin). A slot that cannot be placed
// without excess overlap is dropped, so scenes can come up short but never
// empty: the first slot always places.
Scene sample_scene(uint64_t seed) {
  Rng rng(seed);
  Scene s;
  s.seed = seed;
  s.background = f32_round(rng.uniform(-1.0, -0.2));
  int64_t want = 1 + int64_t(rng.uniform_int(3));
  for (int64_t k = 0; k < want; ++k) {
    for (int attempt = 0; attempt < 64; ++attempt) {
      Primitive p;
      p.shape = PrimShape(rng.uniform_int(3));
      p.color = PrimColor(rng.uniform_int(4));
      p.size = rng.uniform(0.10, 0.25);
      p.cx = rng.uniform(p.size + 0.02, 1.0 - p.size - 0.02);
      p.cy = rng.uniform(p.size + 0.02, 1.0 - p.size - 0.02);
      p.synonym = rng.uniform() < 0.5;
      bool ok = true;
      for (const Primitive& q : s.prims)
        if (overlap_fraction(p, q) > 0.25) {
          ok = false;
          break;
        }
      if (ok) {
        s.prims.push_back(p);
        break;
      }
    }
  }
  return s;
}

Tensor render_scene(const Scene& scene, int64_t size) {
  check_image_size(size);
  Tensor img = Tensor::zeros({3, size, size});
  double* d = img.data();
  int64_t plane = size * size;
  for (int64_t i = 0; i < size; ++i) {
    double y = (double(i) + 0.5) / double(size);
    for (int64_t j = 0; j < size; ++j) {
      double x = (double(j) + 0.5) / double(size);
      std::array<double, 3> rgb = {scene.background, scene.background,
                                   scene.background};
      for (int64_t k = int64_t(scene.prims.size()) - 1; k >= 0; --k) {
        if (scene.prims[size_t(k)].contains(x, y)) {
          rgb = color_rgb(scene.prims[size_t(k)].color);
          break;
        }
      }
      for (int64_t c = 0; c < 3; ++c) d[c * plane + i * size + j] = rgb[c];
    }
  }
  return img;
}

Tensor extract_edges(const Tensor& image, double threshold) {
  const Shape& sh = image.shape();
  if (sh.size() != 3 || sh[0] != 3)
    throw ShapeError("extract_edges expects a [3,H,W] image, got " +
                     shape_str(sh));
  int64_t H = sh[1], W = sh[2], plane = H * W;
  const double* src = image.data();
  auto at = [&](int64_t c, int64_t i, int64_t j) {
    i = std::clamp(i, int64_t(0), H - 1);
    j = std::clamp(j, int64_t(0), W - 1);
    return src[c * plane + i * W + j];
  };
  Tensor out = Tensor::zeros({3, H, W});
  double* dst = out.data();
  for (int64_t i = 0; i < H; ++i) {
    for (int64_t j = 0; j < W; ++j) {
      double best = 0.0;
      for (int64_t c = 0; c < 3; ++c) {
        double gx = -at(c, i - 1, j - 1) - 2.0 * at(c, i, j - 1) -
                    at(c, i + 1, j - 1) + at(c, i - 1, j + 1) +
                    2.0 * at(c, i, j + 1) + at(c, i + 1, j + 1);
        double gy = -at(c, i - 1, j - 1) - 2.0 * at(c, i - 1, j) -
                    at(c, i - 1, j + 1) + at(c, i + 1, j - 1) +
                    2.0 * at(c, i + 1, j) + at(c, i + 1, j + 1);
        best = std::max(best, std::sqrt(gx * gx + gy * gy));
      }
      double v = best >= threshold ? 1.0 : -1.0;
      dst[i * W + j] = v;
      dst[plane + i * W + j] = v;
      dst[2 * plane + i * W + j] = v;
    }
  }
  return out;
}

Tensor extract_depth(const Scene& scene, int64_t size) {
  if (size <= 0)
    throw ConfigError("depth map size must be positive, got " +
                      std::to_string(size));
  int64_t n = int64_t(scene.prims.size());
  int64_t plane = size * size;
  Tensor out = Tensor::zeros({3, size, size});
  double* d = out.data();
  for (int64_t i = 0; i < size; ++i) {
    double y = (double(i) + 0.5) / double(size);
    for (int64_t j = 0; j < size; ++j) {
      double x = (double(j) + 0.5) / double(size);
      double v = -1.0;
      for (int64_t k = n - 1; k >= 0; --k) {
        if (scene.prims[size_t(k)].contains(x, y)) {
          v = 1.0 - 0.5 * double(n - 1 - k);
          break;
        }
      }
      d[i * size + j] = v;
      d[plane + i * size + j] = v;
      d[2 * plane + i * size + j] = v;
    }
  }
  return out;
}

std::string caption(const Scene& scene) {
  std::string out;
  for (size_t k = 0; k < scene.prims.size(); ++k) {
    if (k) out += " and ";
    const Primitive& p = scene.prims[k];
    out += "a " + color_word(p.color, p.synonym) + " " + shape_word(p.shape);
  }
  return out;
}

Tensor condition_for(const Scene& scene, const std::string& kind,
                     int64_t size) {
  check_condition_kind(kind);
  if (kind == "edge") return extract_edges(render_scene(scene, size));
  return extract_depth(scene, size);
}

Dataset generate_dataset(int64_t n, int64_t image_size, const std::string& kind,
                         uint64_t seed) {
  if (n < 0)
    throw ConfigError("sample count must be nonnegative, got " +
                      std::to_string(n));
  check_image_size(image_size);
  check_condition_kind(kind);
  Dataset ds;
  ds.image_size = image_size;
  ds.condition_kind = kind;
  ds.seed = seed;
  Rng master(seed);
  for (int64_t i = 0; i < n; ++i) {
    Scene sc = sample_scene(master.split(uint64_t(i)).state());
    DataSample smp;
    smp.image = render_scene(sc, image_size);
    smp.condition = condition_for(sc, kind, image_size);
    smp.caption = caption(sc);
    smp.condition_kind = kind;
    ds.scenes.push_back(std::move(sc));
    ds.samples.push_back(std::move(smp));
  }
  return ds;
}

void write_dataset(const Dataset& ds, const std::string& path) {
  json j;
  j["format"] = "nexus-dataset";
  j["version"] = 1;
  j["count"] = ds.size();
  j["image_size"] = ds.image_size;
  j["condition_kind"] = ds.condition_kind;
  j["seed"] = ds.seed;
  json scenes = json::array();
  json captions = json::array();
  for (int64_t i = 0; i < ds.size(); ++i) {
    scenes.push_back(json::parse(ds.scenes[size_t(i)].to_json()));
    captions.push_back(ds.samples[size_t(i)].caption);
  }
  j["scenes"] = scenes;
  j["captions"] = captions;
  std::string header = j.dump();

  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open '" + path + "' for writing");
  put_u64(os, header.size());
  os.write(header.data(), std::streamsize(header.size()));
  for (const DataSample& smp : ds.samples) {
    write_nxtn(os, smp.image, kNxtnF32);
    write_nxtn(os, smp.condition, kNxtnF32);
  }
  if (!os) throw IoError("short write to '" + path + "'");
}

Dataset read_dataset(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open '" + path + "'");
  uint64_t hlen = get_u64(is);
  if (hlen > (1ull << 30)) throw IoError("implausible dataset header length");
  std::string header(size_t(hlen), '\0');
  is.read(header.data(), std::streamsize(hlen));
  if (!is) throw IoError("unexpected end of file reading dataset header");
  json j;
  try {
    j = json::parse(header);
  } catch (const json::exception& e) {
    throw IoError(std::string("invalid dataset header: ") + e.what());
  }
  if (!j.contains("format") || j["format"] != "nexus-dataset")
    throw IoError("not a dataset file: '" + path + "'");
  if (!j.contains("version") || j["version"].get<int64_t>() != 1)
    throw IoError("unsupported dataset version");

  Dataset ds;
  int64_t count = 0;
  try {
    count = j["count"].get<int64_t>();
    ds.image_size = j["image_size"].get<int64_t>();
    ds.condition_kind = j["condition_kind"].get<std::string>();
    ds.seed = j["seed"].get<uint64_t>();
    for (const json& sj : j["scenes"])
      ds.scenes.push_back(Scene::from_json(sj.dump()));
    for (int64_t i = 0; i < count; ++i) {
      DataSample smp;
      smp.image = read_nxtn(is);
      smp.condition = read_nxtn(is);
      smp.caption = j["captions"][size_t(i)].get<std::string>();
      smp.condition_kind = ds.condition_kind;
      ds.samples.push_back(std::move(smp));
    }
  } catch (const json::exception& e) {
    throw IoError(std::string("invalid dataset header: ") + e.what());
  }
  if (int64_t(ds.scenes.size()) != count)
    throw IoError("dataset scene list does not match the sample count");
  return ds;
}

}  // namespace nexus
