#include "rad/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>

#include "eigen_util.hpp"
#include "rad/errors.hpp"
#include "rad/rng.hpp"

namespace rad {

using detail::ConstMatMap;
using detail::ConstStridedMap;
using detail::MatMap;
using detail::RowMat;

const char* to_string(HeadKind kind) { return kind == HeadKind::Lm ? "lm" : "reward"; }

void ModelConfig::validate() const {
  if (n_layer == 0 || d_model == 0 || n_head == 0 || d_ff == 0 || vocab == 0) {
    throw ConfigError("model dimensions must be positive");
  }
  if (d_model % n_head != 0) {
    throw ConfigError("d_model " + std::to_string(d_model) + " not divisible by n_head " +
                      std::to_string(n_head));
  }
  if (max_ctx < 1) throw ConfigError("max_ctx must be at least 1");
}

ModelConfig ModelConfig::default_lm() {
  return {.n_layer = 4, .d_model = 128, .n_head = 4, .d_ff = 512, .max_ctx = 64,
          .head = HeadKind::Lm};
}

ModelConfig ModelConfig::default_rm() {
  return {.n_layer = 2, .d_model = 64, .n_head = 2, .d_ff = 256, .max_ctx = 64,
          .head = HeadKind::Reward};
}

// ---------------------------------------------------------------------------
// Weights

template <class T>
std::vector<ad::Tensor<T>*> Weights<T>::params() {
  std::vector<ad::Tensor<T>*> out{&tok_emb, &pos_emb};
  for (auto& l : layers) {
    for (auto* p : {&l.ln1_g, &l.ln1_b, &l.w_qkv, &l.b_qkv, &l.w_attn_out, &l.b_attn_out,
                    &l.ln2_g, &l.ln2_b, &l.w_fc, &l.b_fc, &l.w_proj, &l.b_proj}) {
      out.push_back(p);
    }
  }
  for (auto* p : {&lnf_g, &lnf_b, &head_w, &head_b}) out.push_back(p);
  return out;
}

template <class T>
std::vector<const ad::Tensor<T>*> Weights<T>::params() const {
  auto mut = const_cast<Weights*>(this)->params();
  return {mut.begin(), mut.end()};
}

template <class T>
std::size_t Weights<T>::scalar_count() const {
  std::size_t n = 0;
  for (const auto* p : params()) n += p->numel();
  return n;
}

template <class T>
Weights<T> Weights<T>::clone(bool requires_grad) const {
  Weights out = *this;
  for (auto* p : out.params()) *p = p->detach(requires_grad);
  return out;
}

namespace {

template <class T>
ad::Tensor<T> normal_tensor(ad::Shape shape, double stddev, Rng& rng) {
  std::vector<T> v(ad::numel(shape));
  for (auto& x : v) x = static_cast<T>(rng.normal() * stddev);
  return ad::Tensor<T>::from(std::move(shape), std::move(v));
}

template <class T>
ad::Tensor<T> filled(ad::Shape shape, T value) {
  return ad::Tensor<T>::from(shape, std::vector<T>(ad::numel(shape), value));
}

}  // namespace

template <class T>
Weights<T> init_weights(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Rng rng(seed);
  const std::size_t d = cfg.d_model;
  const double std_base = 0.02;
  const double std_resid = 0.02 / std::sqrt(2.0 * static_cast<double>(cfg.n_layer));
  Weights<T> w;
  w.tok_emb = normal_tensor<T>({cfg.vocab, d}, std_base, rng);
  w.pos_emb = normal_tensor<T>({cfg.max_ctx, d}, std_base, rng);
  for (std::size_t l = 0; l < cfg.n_layer; ++l) {
    LayerWeights<T> lw;
    lw.ln1_g = filled<T>({d}, T(1));
    lw.ln1_b = filled<T>({d}, T(0));
    lw.w_qkv = normal_tensor<T>({d, 3 * d}, std_base, rng);
    lw.b_qkv = filled<T>({3 * d}, T(0));
    lw.w_attn_out = normal_tensor<T>({d, d}, std_resid, rng);
    lw.b_attn_out = filled<T>({d}, T(0));
    lw.ln2_g = filled<T>({d}, T(1));
    lw.ln2_b = filled<T>({d}, T(0));
    lw.w_fc = normal_tensor<T>({d, cfg.d_ff}, std_base, rng);
    lw.b_fc = filled<T>({cfg.d_ff}, T(0));
    lw.w_proj = normal_tensor<T>({cfg.d_ff, d}, std_resid, rng);
    lw.b_proj = filled<T>({d}, T(0));
    w.layers.push_back(std::move(lw));
  }
  w.lnf_g = filled<T>({d}, T(1));
  w.lnf_b = filled<T>({d}, T(0));
  w.head_w = normal_tensor<T>({d, cfg.out_dim()}, std_base, rng);
  w.head_b = filled<T>({cfg.out_dim()}, T(0));
  return w;
}

template <class To, class From>
Weights<To> convert_weights(const Weights<From>& src) {
  auto cast = [](const ad::Tensor<From>& t) {
    std::vector<To> v(t.data().begin(), t.data().end());
    return ad::Tensor<To>::from(t.shape(), std::move(v));
  };
  Weights<To> w;
  w.tok_emb = cast(src.tok_emb);
  w.pos_emb = cast(src.pos_emb);
  for (const auto& l : src.layers) {
    w.layers.push_back({cast(l.ln1_g), cast(l.ln1_b), cast(l.w_qkv), cast(l.b_qkv),
                        cast(l.w_attn_out), cast(l.b_attn_out), cast(l.ln2_g), cast(l.ln2_b),
                        cast(l.w_fc), cast(l.b_fc), cast(l.w_proj), cast(l.b_proj)});
  }
  w.lnf_g = cast(src.lnf_g);
  w.lnf_b = cast(src.lnf_b);
  w.head_w = cast(src.head_w);
  w.head_b = cast(src.head_b);
  return w;
}

template <class T>
void check_weights(const ModelConfig& cfg, const Weights<T>& w) {
  cfg.validate();
  const std::size_t d = cfg.d_model;
  auto expect = [](const ad::Tensor<T>& t, ad::Shape shape, const char* name) {
    if (!t.defined() || t.shape() != shape) {
      throw DimensionError(std::string("parameter ") + name + " expected " + ad::to_string(shape) +
                           ", got " + (t.defined() ? ad::to_string(t.shape()) : "<undefined>"));
    }
  };
  expect(w.tok_emb, {cfg.vocab, d}, "tok_emb");
  expect(w.pos_emb, {cfg.max_ctx, d}, "pos_emb");
  if (w.layers.size() != cfg.n_layer) throw DimensionError("layer count does not match config");
  for (const auto& l : w.layers) {
    expect(l.ln1_g, {d}, "ln1_g");
    expect(l.ln1_b, {d}, "ln1_b");
    expect(l.w_qkv, {d, 3 * d}, "w_qkv");
    expect(l.b_qkv, {3 * d}, "b_qkv");
    expect(l.w_attn_out, {d, d}, "w_attn_out");
    expect(l.b_attn_out, {d}, "b_attn_out");
    expect(l.ln2_g, {d}, "ln2_g");
    expect(l.ln2_b, {d}, "ln2_b");
    expect(l.w_fc, {d, cfg.d_ff}, "w_fc");
    expect(l.b_fc, {cfg.d_ff}, "b_fc");
    expect(l.w_proj, {cfg.d_ff, d}, "w_proj");
    expect(l.b_proj, {d}, "b_proj");
  }
  expect(w.lnf_g, {d}, "lnf_g");
  expect(w.lnf_b, {d}, "lnf_b");
  expect(w.head_w, {d, cfg.out_dim()}, "head_w");
  expect(w.head_b, {cfg.out_dim()}, "head_b");
}

// ---------------------------------------------------------------------------
// KvCache

template <class T>
KvCache<T>::KvCache(std::size_t n_layer, std::size_t d_model, std::size_t capacity)
    : d_model_(d_model), capacity_(capacity), keys_(n_layer), values_(n_layer) {
  for (std::size_t l = 0; l < n_layer; ++l) {
    keys_[l].reserve(capacity * d_model);
    values_[l].reserve(capacity * d_model);
  }
}

template <class T>
std::span<const T> KvCache<T>::keys(std::size_t layer) const {
  return keys_.at(layer);
}

template <class T>
std::span<const T> KvCache<T>::values(std::size_t layer) const {
  return values_.at(layer);
}

template <class T>
void KvCache<T>::append(std::span<const T> keys_by_layer, std::span<const T> values_by_layer) {
  const std::size_t n = n_layer() * d_model_;
  if (keys_by_layer.size() != n || values_by_layer.size() != n) {
    throw DimensionError("cache append expects " + std::to_string(n) + " values per side");
  }
  if (length_ >= capacity_) {
    throw CapacityError("key/value cache full at " + std::to_string(capacity_) + " positions");
  }
  for (std::size_t l = 0; l < n_layer(); ++l) {
    const auto k = keys_by_layer.subspan(l * d_model_, d_model_);
    const auto v = values_by_layer.subspan(l * d_model_, d_model_);
    keys_[l].insert(keys_[l].end(), k.begin(), k.end());
    values_[l].insert(values_[l].end(), v.begin(), v.end());
  }
  ++length_;
}

template <class T>
std::uint64_t KvCache<T>::content_hash() const {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto feed = [&h](const std::vector<T>& v) {
    const auto* bytes = reinterpret_cast<const unsigned char*>(v.data());
    for (std::size_t i = 0; i < v.size() * sizeof(T); ++i) {
      h ^= bytes[i];
      h *= 0x100000001b3ULL;
    }
  };
  for (std::size_t l = 0; l < n_layer(); ++l) {
    feed(keys_[l]);
    feed(values_[l]);
  }
  return h ^ length_;
}

// ---------------------------------------------------------------------------
// graph forward

template <class T>
GraphForward<T> forward_graph(const ModelConfig& cfg, const Weights<T>& w,
                              std::span<const TokenId> tokens) {
  const std::size_t len = tokens.size();
  if (len == 0) throw ContractError("forward over an empty token sequence");
  if (len > cfg.max_ctx) {
    throw CapacityError("sequence of " + std::to_string(len) + " tokens exceeds max_ctx " +
                        std::to_string(cfg.max_ctx));
  }
  const std::size_t d = cfg.d_model;
  std::vector<TokenId> positions(len);
  for (std::size_t i = 0; i < len; ++i) positions[i] = static_cast<TokenId>(i);

  GraphForward<T> out;
  auto x = ad::add(ad::embedding(w.tok_emb, tokens), ad::embedding(w.pos_emb, positions));
  for (const auto& l : w.layers) {
    auto h = ad::layer_norm(x, l.ln1_g, l.ln1_b);
    auto qkv = ad::add(ad::matmul(h, l.w_qkv), l.b_qkv);
    auto q = ad::slice(qkv, 1, 0, d);
    auto k = ad::slice(qkv, 1, d, 2 * d);
    auto v = ad::slice(qkv, 1, 2 * d, 3 * d);
    auto a = ad::causal_attention(q, k, v, cfg.n_head);
    x = ad::add(x, ad::add(ad::matmul(a, l.w_attn_out), l.b_attn_out));
    h = ad::layer_norm(x, l.ln2_g, l.ln2_b);
    auto f = ad::gelu(ad::add(ad::matmul(h, l.w_fc), l.b_fc));
    x = ad::add(x, ad::add(ad::matmul(f, l.w_proj), l.b_proj));
    out.keys.push_back(std::move(k));
    out.values.push_back(std::move(v));
  }
  x = ad::layer_norm(x, w.lnf_g, w.lnf_b);
  out.head = ad::add(ad::matmul(x, w.head_w), w.head_b);
  if (cfg.head == HeadKind::Reward) out.head = ad::sigmoid(out.head);
  return out;
}

// ---------------------------------------------------------------------------
// Transformer

template <class T>
Transformer<T>::Transformer(ModelConfig cfg, const Weights<T>& weights, std::uint64_t vocab_hash)
    : cfg_(cfg), weights_(weights.clone(false)), vocab_hash_(vocab_hash) {
  check_weights(cfg_, weights_);
}

template <class T>
KvCache<T> Transformer<T>::empty_cache() const {
  return KvCache<T>(cfg_.n_layer, cfg_.d_model, cfg_.max_ctx);
}

template <class T>
FullForward<T> Transformer<T>::forward_full(std::span<const TokenId> tokens,
                                            TokenCounter* counter) const {
  FullForward<T> out;
  out.out_dim = cfg_.out_dim();
  out.cache = empty_cache();
  if (tokens.empty()) return out;
  auto g = forward_graph(cfg_, weights_, tokens);
  out.head.assign(g.head.data().begin(), g.head.data().end());
  const std::size_t d = cfg_.d_model;
  std::vector<T> k_row(cfg_.n_layer * d), v_row(cfg_.n_layer * d);
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    for (std::size_t l = 0; l < cfg_.n_layer; ++l) {
      std::copy_n(g.keys[l].data().begin() + static_cast<std::ptrdiff_t>(i * d), d,
                  k_row.begin() + static_cast<std::ptrdiff_t>(l * d));
      std::copy_n(g.values[l].data().begin() + static_cast<std::ptrdiff_t>(i * d), d,
                  v_row.begin() + static_cast<std::ptrdiff_t>(l * d));
    }
    out.cache.append(k_row, v_row);
  }
  if (counter) counter->token_forwards += tokens.size();
  return out;
}

namespace {

// Row-wise layer norm of a [rows x d] block, matching ad::layer_norm.
template <class T>
void layer_norm_rows(T* x, std::size_t rows, std::size_t d, std::span<const T> g,
                     std::span<const T> b, T* out) {
  const T eps = T(1e-5);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* row = x + r * d;
    T mu = T(0);
    for (std::size_t j = 0; j < d; ++j) mu += row[j];
    mu /= static_cast<T>(d);
    T var = T(0);
    for (std::size_t j = 0; j < d; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<T>(d);
    const T rstd = T(1) / std::sqrt(var + eps);
    for (std::size_t j = 0; j < d; ++j) out[r * d + j] = (row[j] - mu) * rstd * g[j] + b[j];
  }
}

template <class T>
T gelu_scalar(T v) {
  constexpr T c = T(0.7978845608028654);
  constexpr T a = T(0.044715);
  return T(0.5) * v * (T(1) + std::tanh(c * (v + a * v * v * v)));
}

template <class T>
T sigmoid_scalar(T v) {
  if (v >= T(0)) return T(1) / (T(1) + std::exp(-v));
  const T e = std::exp(v);
  return e / (T(1) + e);
}

template <class T>
Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>> row_vec(const ad::Tensor<T>& t) {
  return {t.data().data(), static_cast<Eigen::Index>(t.numel())};
}

}  // namespace

template <class T>
void Transformer<T>::extend(const KvCache<T>& base, std::span<const TokenId> tokens,
                            std::vector<T>& new_keys, std::vector<T>& new_values,
                            std::vector<T>& head_out) const {
  const std::size_t kc = tokens.size();
  const std::size_t d = cfg_.d_model, L = cfg_.n_layer, H = cfg_.n_head, dh = d / H;
  const std::size_t pos = base.length();
  if (kc == 0) throw ContractError("extension needs at least one token");
  if (pos >= cfg_.max_ctx) {
    throw CapacityError("context of " + std::to_string(pos) + " tokens is at max_ctx " +
                        std::to_string(cfg_.max_ctx));
  }
  const T inv_sqrt = T(1) / std::sqrt(static_cast<T>(dh));
  const auto& w = weights_;

  RowMat<T> x(kc, d);
  const auto tok = w.tok_emb.data();
  const auto pe = w.pos_emb.data();
  for (std::size_t j = 0; j < kc; ++j) {
    const TokenId t = tokens[j];
    if (t < 0 || static_cast<std::size_t>(t) >= cfg_.vocab) {
      throw DimensionError("token id " + std::to_string(t) + " outside vocabulary");
    }
    for (std::size_t c = 0; c < d; ++c) {
      x(j, c) = tok[static_cast<std::size_t>(t) * d + c] + pe[pos * d + c];
    }
  }
  new_keys.assign(kc * L * d, T(0));
  new_values.assign(kc * L * d, T(0));

  RowMat<T> h(kc, d), qkv(kc, 3 * d), attn(kc, d), scores(kc, pos + 1), f(kc, cfg_.d_ff);
  const Eigen::OuterStride<> cstride(static_cast<Eigen::Index>(d));
  const Eigen::OuterStride<> qstride(static_cast<Eigen::Index>(3 * d));
  for (std::size_t l = 0; l < L; ++l) {
    const auto& lw = w.layers[l];
    layer_norm_rows<T>(x.data(), kc, d, lw.ln1_g.data(), lw.ln1_b.data(), h.data());
    qkv.noalias() = h * ConstMatMap<T>(lw.w_qkv.data().data(), d, 3 * d);
    qkv.rowwise() += row_vec(lw.b_qkv);
    for (std::size_t j = 0; j < kc; ++j) {
      std::copy_n(qkv.data() + j * 3 * d + d, d, new_keys.data() + (j * L + l) * d);
      std::copy_n(qkv.data() + j * 3 * d + 2 * d, d, new_values.data() + (j * L + l) * d);
    }
    const auto kb = base.keys(l);
    const auto vb = base.values(l);
    for (std::size_t hd = 0; hd < H; ++hd) {
      ConstStridedMap<T> qh(qkv.data() + hd * dh, kc, dh, qstride);
      ConstStridedMap<T> kself(qkv.data() + d + hd * dh, kc, dh, qstride);
      ConstStridedMap<T> vself(qkv.data() + 2 * d + hd * dh, kc, dh, qstride);
      if (pos > 0) {
        ConstStridedMap<T> kh(kb.data() + hd * dh, pos, dh, cstride);
        scores.leftCols(pos).noalias() = (qh * kh.transpose()) * inv_sqrt;
      }
      for (std::size_t j = 0; j < kc; ++j) {
        scores(j, pos) = qh.row(j).dot(kself.row(j)) * inv_sqrt;
        T mx = -std::numeric_limits<T>::infinity();
        for (std::size_t i = 0; i <= pos; ++i) mx = std::max(mx, scores(j, i));
        T z = T(0);
        for (std::size_t i = 0; i <= pos; ++i) {
          scores(j, i) = std::exp(scores(j, i) - mx);
          z += scores(j, i);
        }
        for (std::size_t i = 0; i <= pos; ++i) scores(j, i) /= z;
      }
      auto out_h = attn.middleCols(hd * dh, dh);
      if (pos > 0) {
        ConstStridedMap<T> vh(vb.data() + hd * dh, pos, dh, cstride);
        out_h.noalias() = scores.leftCols(pos) * vh;
      } else {
        out_h.setZero();
      }
      for (std::size_t j = 0; j < kc; ++j) out_h.row(j) += scores(j, pos) * vself.row(j);
    }
    x.noalias() += attn * ConstMatMap<T>(lw.w_attn_out.data().data(), d, d);
    x.rowwise() += row_vec(lw.b_attn_out);
    layer_norm_rows<T>(x.data(), kc, d, lw.ln2_g.data(), lw.ln2_b.data(), h.data());
    f.noalias() = h * ConstMatMap<T>(lw.w_fc.data().data(), d, cfg_.d_ff);
    f.rowwise() += row_vec(lw.b_fc);
    f = f.unaryExpr([](T v) { return gelu_scalar(v); });
    x.noalias() += f * ConstMatMap<T>(lw.w_proj.data().data(), cfg_.d_ff, d);
    x.rowwise() += row_vec(lw.b_proj);
  }
  layer_norm_rows<T>(x.data(), kc, d, w.lnf_g.data(), w.lnf_b.data(), h.data());
  const std::size_t od = cfg_.out_dim();
  head_out.assign(kc * od, T(0));
  MatMap<T> head(head_out.data(), kc, od);
  head.noalias() = h * ConstMatMap<T>(w.head_w.data().data(), d, od);
  head.rowwise() += row_vec(w.head_b);
  if (cfg_.head == HeadKind::Reward) {
    for (auto& v : head_out) v = sigmoid_scalar(v);
  }
}

template <class T>
std::vector<T> Transformer<T>::forward_incremental(KvCache<T>& cache, TokenId token,
                                                   TokenCounter* counter) const {
  if (cache.n_layer() != cfg_.n_layer || cache.d_model() != cfg_.d_model) {
    throw CompatibilityError("cache layout does not belong to this model");
  }
  std::vector<T> nk, nv, head;
  const TokenId toks[1] = {token};
  extend(cache, toks, nk, nv, head);
  cache.append(nk, nv);
  if (counter) ++counter->token_forwards;
  return head;
}

template <class T>
CandidateBatch<T> Transformer<T>::make_batch(KvCache<T> base, std::span<const TokenId> candidates,
                                             bool verify) const {
  if (candidates.empty()) throw ContractError("candidate batch needs k >= 1");
  if (base.n_layer() != cfg_.n_layer || base.d_model() != cfg_.d_model) {
    throw CompatibilityError("cache layout does not belong to this model");
  }
  CandidateBatch<T> batch;
  batch.base_ = std::move(base);
  batch.tokens_.assign(candidates.begin(), candidates.end());
  batch.verify_ = verify;
  if (verify) batch.base_hash_ = batch.base_.content_hash();
  return batch;
}

template <class T>
std::span<const T> Transformer<T>::score_candidates(CandidateBatch<T>& batch,
                                                    TokenCounter* counter) const {
  if (cfg_.head != HeadKind::Reward) throw ContractError("score_candidates needs a reward head");
  if (batch.promoted_) throw ContractError("candidate batch already promoted");
  extend(batch.base_, batch.tokens_, batch.new_keys_, batch.new_values_, batch.rewards_);
  batch.scored_ = true;
  if (counter) counter->token_forwards += batch.tokens_.size();
  return batch.rewards_;
}

template <class T>
KvCache<T> Transformer<T>::promote(CandidateBatch<T>& batch, std::size_t j) const {
  if (batch.promoted_) throw ContractError("candidate batch already promoted");
  if (!batch.scored_) throw ContractError("promote before score_candidates");
  if (j >= batch.tokens_.size()) {
    throw std::out_of_range("candidate index " + std::to_string(j) + " outside batch of " +
                            std::to_string(batch.tokens_.size()));
  }
  if (batch.verify_ && batch.base_.content_hash() != batch.base_hash_) {
    throw ContractError("base cache changed while candidates were pending");
  }
  const std::size_t n = cfg_.n_layer * cfg_.d_model;
  KvCache<T> out = std::move(batch.base_);
  out.append(std::span<const T>(batch.new_keys_).subspan(j * n, n),
             std::span<const T>(batch.new_values_).subspan(j * n, n));
  batch.promoted_ = true;
  return out;
}

// ---------------------------------------------------------------------------

#define RAD_INSTANTIATE(T)                                                               \
  template struct Weights<T>;                                                           \
  template Weights<T> init_weights<T>(const ModelConfig&, std::uint64_t);               \
  template void check_weights<T>(const ModelConfig&, const Weights<T>&);                \
  template class KvCache<T>;                                                            \
  template GraphForward<T> forward_graph<T>(const ModelConfig&, const Weights<T>&,      \
                                            std::span<const TokenId>);                  \
  template class Transformer<T>;

RAD_INSTANTIATE(float)
RAD_INSTANTIATE(double)
#undef RAD_INSTANTIATE

template Weights<float> convert_weights<float, double>(const Weights<double>&);
template Weights<double> convert_weights<double, float>(const Weights<float>&);
template Weights<double> convert_weights<double, double>(const Weights<double>&);
template Weights<float> convert_weights<float, float>(const Weights<float>&);

}  // namespace rad
