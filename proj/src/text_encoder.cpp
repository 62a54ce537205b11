#include "nexus/text_encoder.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <sstream>

namespace nexus {

Vocabulary Vocabulary::from_words(std::vector<std::string> ws) {
  Vocabulary v;
  v.words = std::move(ws);
  for (size_t i = 0; i < v.words.size(); ++i) v.ids[v.words[i]] = int64_t(i);
  return v;
}

Vocabulary Vocabulary::toy() {
  return from_words({"<pad>", "<eos>", "a", "and", "red", "crimson", "green",
                     "emerald", "blue", "azure", "yellow", "golden", "circle",
                     "square", "triangle"});
}

int64_t Vocabulary::id(const std::string& word) const {
  auto it = ids.find(word);
  if (it == ids.end()) throw ConfigError("word not in vocabulary: " + word);
  return it->second;
}

bool Vocabulary::contains(const std::string& word) const {
  return ids.count(word) != 0;
}

TextEncoder::TextEncoder(Vocabulary vocab, TextEncoderConfig cfg, Rng& rng)
    : vocab_(std::move(vocab)), cfg_(cfg) {
  int64_t V = vocab_.size(), d = cfg_.dim;
  embed_ = Tensor::zeros({V, d});
  double scale = 1.0 / std::sqrt(double(d));
  for (auto& v : embed_.values()) v = rng.normal() * scale;
  // attention stack is frozen random from construction on
  for (int64_t l = 0; l < cfg_.attn_layers; ++l) {
    AttnLayer layer;
    auto init = [&](int64_t rows, int64_t cols) {
      Tensor t = Tensor::zeros({rows, cols});
      double s = 1.0 / std::sqrt(double(rows));
      for (auto& v : t.values()) v = rng.normal() * s;
      return t;
    };
    layer.wq = init(d, d);
    layer.wk = init(d, d);
    layer.wv = init(d, d);
    layer.wo = init(d, d);
    layer.bq = Tensor::zeros({d});
    layer.bk = Tensor::zeros({d});
    layer.bv = Tensor::zeros({d});
    layer.bo = Tensor::zeros({d});
    layers_.push_back(std::move(layer));
  }
  pos_.assign(size_t(cfg_.context * d), 0.0);
  for (int64_t i = 0; i < cfg_.context; ++i)
    for (int64_t j = 0; j < d; ++j) {
      double freq = std::pow(10000.0, -double(2 * (j / 2)) / double(d));
      pos_[size_t(i * d + j)] =
          (j % 2 == 0) ? std::sin(double(i) * freq) : std::cos(double(i) * freq);
    }
}

std::vector<int64_t> TextEncoder::tokenize(const std::string& prompt) const {
  std::vector<int64_t> toks;
  std::istringstream ss(prompt);
  std::string word;
  while (ss >> word) {
    std::transform(word.begin(), word.end(), word.begin(),
                   [](unsigned char c) { return char(std::tolower(c)); });
    toks.push_back(vocab_.id(word));
  }
  if (!toks.empty()) {
    if (int64_t(toks.size()) >= cfg_.context)
      throw ConfigError("prompt longer than context length " +
                        std::to_string(cfg_.context));
    toks.push_back(Vocabulary::kEos);
  }
  toks.resize(size_t(cfg_.context), Vocabulary::kPad);
  return toks;
}

Tensor TextEncoder::encode(const std::string& prompt) const {
  return encode_tokens(tokenize(prompt));
}

Tensor TextEncoder::encode_tokens(const std::vector<int64_t>& toks) const {
  int64_t n = cfg_.context, d = cfg_.dim;
  if (int64_t(toks.size()) != n)
    throw ShapeError("token sequence length " + std::to_string(toks.size()) +
                     " != context " + std::to_string(n));
  std::vector<double> h(size_t(n * d));
  for (int64_t i = 0; i < n; ++i) {
    const double* e = embed_.data() + toks[size_t(i)] * d;
    for (int64_t j = 0; j < d; ++j) h[size_t(i * d + j)] = e[j] + pos_[size_t(i * d + j)];
  }
  // full self-attention over all positions, single head, residual per layer
  double inv_sqrt_d = 1.0 / std::sqrt(double(d));
  std::vector<double> q(size_t(n * d)), k(size_t(n * d)), v(size_t(n * d)),
      scores(size_t(n * n)), mix(size_t(n * d)), out(size_t(n * d));
  for (const AttnLayer& layer : layers_) {
    auto project = [&](const Tensor& w, const Tensor& b, std::vector<double>& dst) {
      for (int64_t i = 0; i < n; ++i)
        for (int64_t j = 0; j < d; ++j) {
          double acc = b.data()[j];
          for (int64_t t = 0; t < d; ++t)
            acc += h[size_t(i * d + t)] * w.data()[t * d + j];
          dst[size_t(i * d + j)] = acc;
        }
    };
    project(layer.wq, layer.bq, q);
    project(layer.wk, layer.bk, k);
    project(layer.wv, layer.bv, v);
    for (int64_t i = 0; i < n; ++i) {
      double mx = -1e300;
      for (int64_t j = 0; j < n; ++j) {
        double s = 0;
        for (int64_t t = 0; t < d; ++t)
          s += q[size_t(i * d + t)] * k[size_t(j * d + t)];
        s *= inv_sqrt_d;
        scores[size_t(i * n + j)] = s;
        mx = std::max(mx, s);
      }
      double z = 0;
      for (int64_t j = 0; j < n; ++j) {
        double e = std::exp(scores[size_t(i * n + j)] - mx);
        scores[size_t(i * n + j)] = e;
        z += e;
      }
      for (int64_t j = 0; j < n; ++j) scores[size_t(i * n + j)] /= z;
    }
    for (int64_t i = 0; i < n; ++i)
      for (int64_t t = 0; t < d; ++t) {
        double acc = 0;
        for (int64_t j = 0; j < n; ++j)
          acc += scores[size_t(i * n + j)] * v[size_t(j * d + t)];
        mix[size_t(i * d + t)] = acc;
      }
    for (int64_t i = 0; i < n; ++i)
      for (int64_t j = 0; j < d; ++j) {
        double acc = layer.bo.data()[j];
        for (int64_t t = 0; t < d; ++t)
          acc += mix[size_t(i * d + t)] * layer.wo.data()[t * d + j];
        out[size_t(i * d + j)] = acc;
      }
    for (size_t i = 0; i < h.size(); ++i) h[i] += out[i];
  }
  // PAD rows are reset to the raw PAD embedding: downstream consumers rely on
  // the null prompt being exactly n copies of one vector
  for (int64_t i = 0; i < n; ++i)
    if (toks[size_t(i)] == Vocabulary::kPad) {
      const double* e = embed_.data() + Vocabulary::kPad * d;
      for (int64_t j = 0; j < d; ++j) h[size_t(i * d + j)] = e[j];
    }
  return Tensor::from_data({n, d}, std::move(h));
}

void TextEncoder::pretrain_and_freeze(const std::vector<std::string>& corpus,
                                      int64_t steps, Rng& rng) {
  if (corpus.empty()) throw ConfigError("pretrain corpus is empty");
  if (frozen_) throw ConfigError("encoder already frozen");
  int64_t V = vocab_.size(), d = cfg_.dim;
  std::vector<std::vector<int64_t>> seqs;
  for (const auto& caption : corpus) {
    std::vector<int64_t> s;
    std::istringstream ss(caption);
    std::string w;
    while (ss >> w) s.push_back(vocab_.id(w));
    if (!s.empty()) seqs.push_back(std::move(s));
  }
  // skip-gram with negative sampling; context vectors are discarded at freeze
  std::vector<double> ctx(size_t(V * d));
  double s0 = 1.0 / std::sqrt(double(d));
  for (auto& c : ctx) c = rng.normal() * s0;
  const double lr = 0.05;
  const int kNeg = 4, kWindow = 2;
  for (int64_t step = 0; step < steps; ++step) {
    const auto& seq = seqs[rng.uniform_int(int64_t(seqs.size()))];
    int64_t center = rng.uniform_int(int64_t(seq.size()));
    int64_t off = rng.uniform_int(2 * kWindow + 1) - kWindow;
    int64_t other = center + off;
    if (off == 0 || other < 0 || other >= int64_t(seq.size())) continue;
    double* wc = embed_.data() + seq[size_t(center)] * d;
    auto update = [&](int64_t target, double label) {
      double* wo = ctx.data() + target * d;
      double dot = 0;
      for (int64_t j = 0; j < d; ++j) dot += wc[j] * wo[j];
      double g = lr * (label - 1.0 / (1.0 + std::exp(-dot)));
      for (int64_t j = 0; j < d; ++j) {
        double wcj = wc[j];
        wc[j] += g * wo[j];
        wo[j] += g * wcj;
      }
    };
    update(seq[size_t(other)], 1.0);
    for (int i = 0; i < kNeg; ++i) {
      // negatives drawn from real words only
      int64_t neg = 2 + rng.uniform_int(V - 2);
      if (neg != seq[size_t(other)]) update(neg, 0.0);
    }
  }
  frozen_ = true;
}

ParamMap TextEncoder::params(const std::string& prefix) const {
  ParamMap out;
  out.emplace_back(prefix + "embed", embed_);
  for (size_t l = 0; l < layers_.size(); ++l) {
    const AttnLayer& a = layers_[l];
    std::string p = prefix + "attn" + std::to_string(l) + ".";
    out.emplace_back(p + "wq", a.wq);
    out.emplace_back(p + "bq", a.bq);
    out.emplace_back(p + "wk", a.wk);
    out.emplace_back(p + "bk", a.bk);
    out.emplace_back(p + "wv", a.wv);
    out.emplace_back(p + "bv", a.bv);
    out.emplace_back(p + "wo", a.wo);
    out.emplace_back(p + "bo", a.bo);
  }
  return out;
}

}  // namespace nexus
