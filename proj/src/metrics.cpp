#include "nexus/metrics.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "nexus/nn.hpp"

using nlohmann::json;

namespace nexus {

namespace {

void check_edge_map(const Tensor& m, const char* what) {
  const Shape& sh = m.shape();
  if (sh.size() != 3 || sh[0] != 3)
    throw ShapeError(std::string(what) + " must be [3,H,W], got " +
                     shape_str(sh));
}

// Pixels with a positive channel-0 value count as edges.
std::vector<std::pair<int64_t, int64_t>> edge_points(const Tensor& m) {
  int64_t H = m.shape()[1], W = m.shape()[2];
  std::vector<std::pair<int64_t, int64_t>> pts;
  for (int64_t i = 0; i < H; ++i)
    for (int64_t j = 0; j < W; ++j)
      if (m.data()[i * W + j] > 0.0) pts.push_back({i, j});
  return pts;
}

// Boolean grid holding the Chebyshev dilation of a point set.
std::vector<char> dilate(const std::vector<std::pair<int64_t, int64_t>>& pts,
                         int64_t H, int64_t W, int64_t dilation) {
  std::vector<char> g(size_t(H * W), 0);
  for (auto [i, j] : pts)
    for (int64_t a = std::max<int64_t>(0, i - dilation);
         a <= std::min(H - 1, i + dilation); ++a)
      for (int64_t b = std::max<int64_t>(0, j - dilation);
           b <= std::min(W - 1, j + dilation); ++b)
        g[size_t(a * W + b)] = 1;
  return g;
}

double matched_fraction(const std::vector<std::pair<int64_t, int64_t>>& pts,
                        const std::vector<char>& grid, int64_t W) {
  int64_t hit = 0;
  for (auto [i, j] : pts) hit += grid[size_t(i * W + j)];
  return double(hit) / double(pts.size());
}

const std::array<PrimColor, 4> kAllColors = {PrimColor::Red, PrimColor::Green,
                                             PrimColor::Blue, PrimColor::Yellow};

}  // namespace

double edge_f1_maps(const Tensor& pred_map, const Tensor& ref_map,
                    int64_t dilation) {
  check_edge_map(pred_map, "prediction map");
  check_edge_map(ref_map, "reference map");
  if (pred_map.shape() != ref_map.shape())
    throw ShapeError("edge maps differ in shape: " +
                     shape_str(pred_map.shape()) + " vs " +
                     shape_str(ref_map.shape()));
  if (dilation < 0) throw ConfigError("dilation must be nonnegative");

  auto pred = edge_points(pred_map);
  auto ref = edge_points(ref_map);
  if (pred.empty() && ref.empty()) return 1.0;
  if (pred.empty() || ref.empty()) return 0.0;

  int64_t H = pred_map.shape()[1], W = pred_map.shape()[2];
  double p = matched_fraction(pred, dilate(ref, H, W, dilation), W);
  double r = matched_fraction(ref, dilate(pred, H, W, dilation), W);
  if (p + r == 0.0) return 0.0;
  return 2.0 * p * r / (p + r);
}

double edge_f1(const Tensor& generated, const Tensor& condition_edges,
               int64_t dilation) {
  return edge_f1_maps(extract_edges(generated), condition_edges, dilation);
}

double color_accuracy(const Tensor& generated, const Scene& scene,
                      const std::string& prompt) {
  const Shape& sh = generated.shape();
  if (sh.size() != 3 || sh[0] != 3)
    throw ShapeError("generated image must be [3,H,W], got " + shape_str(sh));
  int64_t H = sh[1], W = sh[2], plane = H * W;

  // color words of the prompt, in order; other words are ignored
  std::vector<PrimColor> want;
  std::istringstream ss(prompt);
  std::string word;
  while (ss >> word) {
    std::transform(word.begin(), word.end(), word.begin(),
                   [](unsigned char c) { return char(std::tolower(c)); });
    for (PrimColor c : kAllColors)
      if (word == color_word(c, false) || word == color_word(c, true)) {
        want.push_back(c);
        break;
      }
  }

  int64_t n = int64_t(scene.prims.size());
  int64_t counted = 0, correct = 0;
  for (int64_t k = 0; k < n && k < int64_t(want.size()); ++k) {
    double sum[3] = {0.0, 0.0, 0.0};
    int64_t cnt = 0;
    for (int64_t i = 0; i < H; ++i) {
      double y = (double(i) + 0.5) / double(H);
      for (int64_t j = 0; j < W; ++j) {
        double x = (double(j) + 0.5) / double(W);
        if (!scene.prims[size_t(k)].contains(x, y)) continue;
        bool covered = false;
        for (int64_t l = k + 1; l < n && !covered; ++l)
          covered = scene.prims[size_t(l)].contains(x, y);
        if (covered) continue;
        for (int64_t c = 0; c < 3; ++c)
          sum[c] += generated.data()[c * plane + i * W + j];
        ++cnt;
      }
    }
    if (cnt == 0) continue;  // fully occluded, nothing to judge

    double best = 0.0;
    PrimColor cls = PrimColor::Red;
    bool first = true;
    for (PrimColor c : kAllColors) {
      std::array<double, 3> proto = color_rgb(c);
      double d2 = 0.0;
      for (int64_t ch = 0; ch < 3; ++ch) {
        double diff = sum[ch] / double(cnt) - proto[size_t(ch)];
        d2 += diff * diff;
      }
      if (first || d2 < best) {
        best = d2;
        cls = c;
        first = false;
      }
    }
    ++counted;
    correct += cls == want[size_t(k)];
  }
  if (counted == 0) return 1.0;  // nothing scoreable counts as vacuously right
  return double(correct) / double(counted);
}

// ---- fixed feature net ----------------------------------------------------

namespace {

struct FeatureNet {
  Conv2dLayer c1, c2, c3;
  FeatureNet() {
    Rng rng(0x66656174u);  // pinned; changing it invalidates stored scores
    c1 = Conv2dLayer(3, 16, 3, 2, 1);
    c1.init_he(rng);
    c2 = Conv2dLayer(16, 32, 3, 2, 1);
    c2.init_he(rng);
    c3 = Conv2dLayer(32, 64, 3, 2, 1);
    c3.init_he(rng);
  }
};

const FeatureNet& feature_net() {
  static FeatureNet net;
  return net;
}

}  // namespace

Tensor eval_features(const Tensor& image) {
  const Shape& sh = image.shape();
  if (sh.size() != 3 || sh[0] != 3 || sh[1] < 8 || sh[2] < 8 ||
      sh[1] % 8 != 0 || sh[2] % 8 != 0)
    throw ShapeError(
        "eval_features expects [3,H,W] with sides divisible by 8, got " +
        shape_str(sh));
  const FeatureNet& net = feature_net();
  Tensor h = reshape(image, {1, 3, sh[1], sh[2]});
  h = relu(net.c1.forward(h));
  h = relu(net.c2.forward(h));
  h = net.c3.forward(h);
  int64_t hw = h.shape()[2] * h.shape()[3];
  Tensor out = Tensor::zeros({64});
  for (int64_t c = 0; c < 64; ++c) {
    double s = 0.0;
    for (int64_t k = 0; k < hw; ++k) s += h.data()[c * hw + k];
    out.data()[c] = s / double(hw);
  }
  return out;
}

void symmetric_eigen(const std::vector<double>& a, int64_t d,
                     std::vector<double>& eigenvalues,
                     std::vector<double>& eigenvectors) {
  if (int64_t(a.size()) != d * d)
    throw ShapeError("matrix size does not match dimension");
  std::vector<double> m = a;
  eigenvectors.assign(size_t(d * d), 0.0);
  for (int64_t i = 0; i < d; ++i) eigenvectors[size_t(i * d + i)] = 1.0;

  // cyclic Jacobi sweeps until the off-diagonal mass is negligible
  for (int sweep = 0; sweep < 100; ++sweep) {
    double off = 0.0;
    for (int64_t i = 0; i < d; ++i)
      for (int64_t j = i + 1; j < d; ++j)
        off += m[size_t(i * d + j)] * m[size_t(i * d + j)];
    if (off < 1e-26) break;
    for (int64_t p = 0; p < d; ++p) {
      for (int64_t q = p + 1; q < d; ++q) {
        double apq = m[size_t(p * d + q)];
        if (std::fabs(apq) < 1e-300) continue;
        double app = m[size_t(p * d + p)], aqq = m[size_t(q * d + q)];
        double theta = (aqq - app) / (2.0 * apq);
        double t = (theta >= 0.0 ? 1.0 : -1.0) /
                   (std::fabs(theta) + std::sqrt(theta * theta + 1.0));
        double c = 1.0 / std::sqrt(t * t + 1.0), s = t * c;
        for (int64_t k = 0; k < d; ++k) {
          double mkp = m[size_t(k * d + p)], mkq = m[size_t(k * d + q)];
          m[size_t(k * d + p)] = c * mkp - s * mkq;
          m[size_t(k * d + q)] = s * mkp + c * mkq;
        }
        for (int64_t k = 0; k < d; ++k) {
          double mpk = m[size_t(p * d + k)], mqk = m[size_t(q * d + k)];
          m[size_t(p * d + k)] = c * mpk - s * mqk;
          m[size_t(q * d + k)] = s * mpk + c * mqk;
        }
        for (int64_t k = 0; k < d; ++k) {
          double vkp = eigenvectors[size_t(k * d + p)];
          double vkq = eigenvectors[size_t(k * d + q)];
          eigenvectors[size_t(k * d + p)] = c * vkp - s * vkq;
          eigenvectors[size_t(k * d + q)] = s * vkp + c * vkq;
        }
      }
    }
  }
  eigenvalues.assign(size_t(d), 0.0);
  for (int64_t i = 0; i < d; ++i) eigenvalues[size_t(i)] = m[size_t(i * d + i)];
}

namespace {

// V diag(sqrt(clamp(w,0))) V^T for a symmetric PSD-up-to-noise matrix.
std::vector<double> sqrt_psd(const std::vector<double>& a, int64_t d) {
  std::vector<double> w, v;
  symmetric_eigen(a, d, w, v);
  std::vector<double> out(size_t(d * d), 0.0);
  for (int64_t k = 0; k < d; ++k) {
    double lam = std::sqrt(std::max(0.0, w[size_t(k)]));
    for (int64_t i = 0; i < d; ++i)
      for (int64_t j = 0; j < d; ++j)
        out[size_t(i * d + j)] +=
            v[size_t(i * d + k)] * lam * v[size_t(j * d + k)];
  }
  return out;
}

void moments(const Tensor& feats, std::vector<double>& mu,
             std::vector<double>& cov) {
  int64_t n = feats.shape()[0], d = feats.shape()[1];
  mu.assign(size_t(d), 0.0);
  for (int64_t i = 0; i < n; ++i)
    for (int64_t j = 0; j < d; ++j) mu[size_t(j)] += feats.data()[i * d + j];
  for (int64_t j = 0; j < d; ++j) mu[size_t(j)] /= double(n);
  cov.assign(size_t(d * d), 0.0);
  for (int64_t i = 0; i < n; ++i) {
    for (int64_t a = 0; a < d; ++a) {
      double da = feats.data()[i * d + a] - mu[size_t(a)];
      for (int64_t b = 0; b < d; ++b) {
        double db = feats.data()[i * d + b] - mu[size_t(b)];
        cov[size_t(a * d + b)] += da * db;
      }
    }
  }
  for (double& x : cov) x /= double(n - 1);
}

}  // namespace

double frechet_gaussian(const Tensor& feats_a, const Tensor& feats_b) {
  if (feats_a.rank() != 2 || feats_b.rank() != 2)
    throw ShapeError("feature matrices must be [N,d]");
  if (feats_a.shape()[1] != feats_b.shape()[1])
    throw ShapeError("feature dimensions differ: " +
                     shape_str(feats_a.shape()) + " vs " +
                     shape_str(feats_b.shape()));
  if (feats_a.shape()[0] < 2 || feats_b.shape()[0] < 2)
    throw ConfigError("need at least 2 samples per set to fit a covariance");
  int64_t d = feats_a.shape()[1];

  std::vector<double> mu_a, mu_b, cov_a, cov_b;
  moments(feats_a, mu_a, cov_a);
  moments(feats_b, mu_b, cov_b);

  double dist = 0.0;
  for (int64_t j = 0; j < d; ++j) {
    double diff = mu_a[size_t(j)] - mu_b[size_t(j)];
    dist += diff * diff;
  }
  for (int64_t j = 0; j < d; ++j)
    dist += cov_a[size_t(j * d + j)] + cov_b[size_t(j * d + j)];

  // tr((Sa Sb)^1/2) via the symmetric form Sb^1/2 Sa Sb^1/2
  std::vector<double> b_half = sqrt_psd(cov_b, d);
  std::vector<double> tmp(size_t(d * d), 0.0), inner(size_t(d * d), 0.0);
  for (int64_t i = 0; i < d; ++i)
    for (int64_t k = 0; k < d; ++k) {
      double x = b_half[size_t(i * d + k)];
      if (x == 0.0) continue;
      for (int64_t j = 0; j < d; ++j)
        tmp[size_t(i * d + j)] += x * cov_a[size_t(k * d + j)];
    }
  for (int64_t i = 0; i < d; ++i)
    for (int64_t k = 0; k < d; ++k) {
      double x = tmp[size_t(i * d + k)];
      if (x == 0.0) continue;
      for (int64_t j = 0; j < d; ++j)
        inner[size_t(i * d + j)] += x * b_half[size_t(k * d + j)];
    }
  // symmetrize against roundoff before the eigensolve
  for (int64_t i = 0; i < d; ++i)
    for (int64_t j = i + 1; j < d; ++j) {
      double avg = 0.5 * (inner[size_t(i * d + j)] + inner[size_t(j * d + i)]);
      inner[size_t(i * d + j)] = avg;
      inner[size_t(j * d + i)] = avg;
    }
  std::vector<double> w, v;
  symmetric_eigen(inner, d, w, v);
  for (int64_t k = 0; k < d; ++k)
    dist -= 2.0 * std::sqrt(std::max(0.0, w[size_t(k)]));

  return std::max(0.0, dist);
}

double frechet_fixed_features(const std::vector<Tensor>& a,
                              const std::vector<Tensor>& b) {
  if (a.size() < 2 || b.size() < 2)
    throw ConfigError("need at least 2 images per set");
  auto pack = [](const std::vector<Tensor>& imgs) {
    Tensor out = Tensor::zeros({int64_t(imgs.size()), 64});
    for (size_t i = 0; i < imgs.size(); ++i) {
      Tensor f = eval_features(imgs[i]);
      for (int64_t j = 0; j < 64; ++j)
        out.data()[int64_t(i) * 64 + j] = f.data()[j];
    }
    return out;
  };
  return frechet_gaussian(pack(a), pack(b));
}

std::string EvalReport::to_json() const {
  json j;
  j["edge_f1"] = edge_f1;
  j["color_accuracy"] = color_accuracy;
  j["frechet"] = frechet;
  j["n"] = n;
  try {
    j["config"] = json::parse(config_json);
  } catch (const json::exception&) {
    j["config"] = config_json;  // keep unparseable echoes as a string
  }
  return j.dump(2);
}

}  // namespace nexus
