#pragma once

#include <string>
#include <unordered_map>
#include <vector>

#include "nexus/nn.hpp"
#include "nexus/rng.hpp"
#include "nexus/tensor.hpp"

namespace nexus {

// Closed word list for the caption grammar. Ids are dense, PAD is always 0.
struct Vocabulary {
  std::vector<std::string> words;
  std::unordered_map<std::string, int64_t> ids;

  static constexpr int64_t kPad = 0;
  static constexpr int64_t kEos = 1;

  // Colors with one synonym each, shapes, and the glue words of the grammar.
  static Vocabulary toy();
  static Vocabulary from_words(std::vector<std::string> ws);

  int64_t id(const std::string& word) const;
  bool contains(const std::string& word) const;
  int64_t size() const { return int64_t(words.size()); }
};

struct TextEncoderConfig {
  int64_t context = 16;
  int64_t dim = 64;
  int64_t attn_layers = 2;
};

// Frozen prompt encoder: embedding lookup + sinusoidal positions + a fixed
// stack of randomly initialized self-attention layers. Only the embedding
// table is trained (skip-gram); everything is immutable after freeze().
class TextEncoder {
 public:
  TextEncoder(Vocabulary vocab, TextEncoderConfig cfg, Rng& rng);

  // Whitespace tokenization, lowercased, padded to the context length with
  // EOS then PAD. Unknown words raise ConfigError naming the word.
  std::vector<int64_t> tokenize(const std::string& prompt) const;

  // [context, dim]; rows at PAD positions are exactly the PAD embedding.
  Tensor encode(const std::string& prompt) const;
  Tensor encode_tokens(const std::vector<int64_t>& toks) const;

  // Skip-gram with negative sampling over the caption corpus, then freeze.
  void pretrain_and_freeze(const std::vector<std::string>& corpus, int64_t steps,
                           Rng& rng);
  void freeze() { frozen_ = true; }
  bool frozen() const { return frozen_; }

  // Parameter names are prefix + {embed, attnI.{wq,bq,wk,bk,wv,bv,wo,bo}}.
  ParamMap params(const std::string& prefix) const;

  const Vocabulary& vocab() const { return vocab_; }
  int64_t context() const { return cfg_.context; }
  int64_t dim() const { return cfg_.dim; }
  const Tensor& embedding_table() const { return embed_; }

 private:
  struct AttnLayer {
    Tensor wq, bq, wk, bk, wv, bv, wo, bo;
  };

  Vocabulary vocab_;
  TextEncoderConfig cfg_;
  Tensor embed_;                  // [|V|, dim]
  std::vector<AttnLayer> layers_; // frozen at construction
  std::vector<double> pos_;       // [context * dim] sinusoidal table
  bool frozen_ = false;
};

}  // namespace nexus
