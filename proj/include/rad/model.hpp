#pragma once

// Decoder-only causal Transformer (pre-LN, learned absolute positions) with
// an incremental key/value cache. The same backbone serves as a language
// model (vocabulary logits) or as a unidirectional reward model (one
// sigmoid-squashed scalar per position).

#include <cstdint>
#include <filesystem>
#include <span>
#include <optional>
#include <vector>

#include "rad/corpus.hpp"
#include "rad/tensor.hpp"

namespace rad {

enum class HeadKind : std::uint32_t { Lm = 0, Reward = 1 };

const char* to_string(HeadKind kind);

struct ModelConfig {
  std::size_t n_layer = 2;
  std::size_t d_model = 64;
  std::size_t n_head = 2;
  std::size_t d_ff = 256;
  std::size_t vocab = Vocabulary::kSize;
  std::size_t max_ctx = 64;
  HeadKind head = HeadKind::Lm;

  // Throws ConfigError on an inconsistent shape.
  void validate() const;
  std::size_t out_dim() const { return head == HeadKind::Lm ? vocab : 1; }

  static ModelConfig default_lm();
  static ModelConfig default_rm();

  bool operator==(const ModelConfig&) const = default;
};

template <class T>
struct LayerWeights {
  ad::Tensor<T> ln1_g, ln1_b;
  ad::Tensor<T> w_qkv, b_qkv;
  ad::Tensor<T> w_attn_out, b_attn_out;
  ad::Tensor<T> ln2_g, ln2_b;
  ad::Tensor<T> w_fc, b_fc;
  ad::Tensor<T> w_proj, b_proj;
};

// Parameter tensors are shared handles: copying a Weights aliases the same
// storage. Use clone() for an independent copy.
template <class T>
struct Weights {
  ad::Tensor<T> tok_emb;  // [vocab x d]
  ad::Tensor<T> pos_emb;  // [max_ctx x d]
  std::vector<LayerWeights<T>> layers;
  ad::Tensor<T> lnf_g, lnf_b;
  ad::Tensor<T> head_w;  // [d x out_dim]
  ad::Tensor<T> head_b;  // [out_dim]

  // Declared order; this is also the checkpoint payload order.
  std::vector<ad::Tensor<T>*> params();
  std::vector<const ad::Tensor<T>*> params() const;
  std::size_t scalar_count() const;
  Weights clone(bool requires_grad = false) const;
};

// Small-normal init (std 0.02, residual projections scaled by 1/sqrt(2L)).
template <class T>
Weights<T> init_weights(const ModelConfig& cfg, std::uint64_t seed);

template <class To, class From>
Weights<To> convert_weights(const Weights<From>& w);

// Shape check of `w` against `cfg`; throws DimensionError.
template <class T>
void check_weights(const ModelConfig& cfg, const Weights<T>& w);

// Counts token positions pushed through a model.
struct TokenCounter {
  std::uint64_t token_forwards = 0;
};

template <class T>
class KvCache {
 public:
  KvCache() = default;
  KvCache(std::size_t n_layer, std::size_t d_model, std::size_t capacity);

  std::size_t length() const { return length_; }
  std::size_t capacity() const { return capacity_; }
  std::size_t n_layer() const { return keys_.size(); }
  std::size_t d_model() const { return d_model_; }

  // [length x d] row-major views of one layer.
  std::span<const T> keys(std::size_t layer) const;
  std::span<const T> values(std::size_t layer) const;

  // Appends one position; each span holds n_layer rows of d values.
  void append(std::span<const T> keys_by_layer, std::span<const T> values_by_layer);

  // FNV-1a over the live key/value bytes.
  std::uint64_t content_hash() const;

  bool operator==(const KvCache&) const = default;

 private:
  std::size_t d_model_ = 0;
  std::size_t capacity_ = 0;
  std::size_t length_ = 0;
  std::vector<std::vector<T>> keys_;
  std::vector<std::vector<T>> values_;
};

// k one-token extensions of a shared base cache.
template <class T>
class CandidateBatch {
 public:
  std::span<const TokenId> tokens() const { return tokens_; }
  std::size_t size() const { return tokens_.size(); }
  const KvCache<T>& base() const { return base_; }
  bool scored() const { return scored_; }
  bool promoted() const { return promoted_; }
  std::span<const T> rewards() const { return rewards_; }

 private:
  template <class>
  friend class Transformer;

  KvCache<T> base_;
  TokenSequence tokens_;
  // [k x n_layer x d] freshly computed rows per candidate.
  std::vector<T> new_keys_, new_values_;
  std::vector<T> rewards_;
  std::uint64_t base_hash_ = 0;
  bool verify_ = false;
  bool scored_ = false;
  bool promoted_ = false;
};

// Graph-building forward used by training; keys/values are captured per
// layer as [len x d] tensors.
template <class T>
struct GraphForward {
  ad::Tensor<T> head;  // [len x out_dim]; rewards already squashed
  std::vector<ad::Tensor<T>> keys, values;
};

template <class T>
GraphForward<T> forward_graph(const ModelConfig& cfg, const Weights<T>& w,
                              std::span<const TokenId> tokens);

template <class T>
struct FullForward {
  std::size_t out_dim = 0;
  std::vector<T> head;  // [len x out_dim]
  KvCache<T> cache;

  std::span<const T> at(std::size_t position) const {
    return std::span<const T>(head).subspan(position * out_dim, out_dim);
  }
};

template <class T>
class Transformer {
 public:
  Transformer(ModelConfig cfg, const Weights<T>& weights,
              std::uint64_t vocab_hash = Vocabulary::hash());

  const ModelConfig& config() const { return cfg_; }
  const Weights<T>& weights() const { return weights_; }
  std::uint64_t vocab_hash() const { return vocab_hash_; }

  KvCache<T> empty_cache() const;

  // Whole-sequence causal forward; counter advances by tokens.size().
  FullForward<T> forward_full(std::span<const TokenId> tokens, TokenCounter* counter = nullptr) const;

  // Processes one token on top of `cache` (extended in place) and returns the
  // head output at the new position. Counter advances by exactly one.
  std::vector<T> forward_incremental(KvCache<T>& cache, TokenId token,
                                     TokenCounter* counter = nullptr) const;

  // Takes ownership of `base` for the lifetime of the batch. With `verify`
  // the base content hash is recorded and re-checked on promotion.
  CandidateBatch<T> make_batch(KvCache<T> base, std::span<const TokenId> candidates,
                               bool verify = false) const;

  // Reward of each base;candidate sequence; counter advances by k. The base
  // cache is not touched.
  std::span<const T> score_candidates(CandidateBatch<T>& batch, TokenCounter* counter = nullptr) const;

  // Moves the base cache out of the batch, extended by candidate j's
  // already-computed state. No forward computation. One promotion per batch.
  KvCache<T> promote(CandidateBatch<T>& batch, std::size_t j) const;

 private:
  void extend(const KvCache<T>& base, std::span<const TokenId> tokens, std::vector<T>& new_keys,
              std::vector<T>& new_values, std::vector<T>& head_out) const;

  ModelConfig cfg_;
  Weights<T> weights_;
  std::uint64_t vocab_hash_;
};

// ---------------------------------------------------------------------------
// checkpoints

enum class PayloadType : std::uint32_t { F32 = 4, F64 = 8 };

struct Checkpoint {
  ModelConfig cfg;
  Weights<double> weights;
  std::uint64_t vocab_hash = 0;
  // FNV-1a of the payload bytes; identifies the parameters.
  std::uint64_t content_hash = 0;
  PayloadType payload = PayloadType::F32;
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

// Little-endian header (magic, version, config, vocab hash, payload type,
// scalar count) followed by the raw parameters in declared order.
void save_checkpoint(const std::filesystem::path& path, const ModelConfig& cfg,
                     const Weights<double>& weights, PayloadType payload = PayloadType::F32);

// Throws ParseError on a malformed or truncated file, CompatibilityError on a
// version/vocabulary mismatch or when `expected_head` differs.
Checkpoint load_checkpoint(const std::filesystem::path& path,
                           std::optional<HeadKind> expected_head = std::nullopt);

template <class T>
Transformer<T> make_transformer(const Checkpoint& ckpt) {
  return Transformer<T>(ckpt.cfg, convert_weights<T>(ckpt.weights), ckpt.vocab_hash);
}

}  // namespace rad
