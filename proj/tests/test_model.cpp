#include <doctest.h>

#include <fstream>

#include "rad/errors.hpp"
#include "rad/model.hpp"
#include "test_util.hpp"

using namespace rad;

namespace {

ModelConfig small_cfg(HeadKind head, std::size_t max_ctx = 64) {
  ModelConfig c;
  c.n_layer = 2;
  c.d_model = 32;
  c.n_head = 4;
  c.d_ff = 64;
  c.max_ctx = max_ctx;
  c.head = head;
  return c;
}

// Init weights plus a perturbation so attention is far from uniform.
Weights<double> busy_weights(const ModelConfig& cfg, std::uint64_t seed) {
  auto w = init_weights<double>(cfg, seed);
  std::uint64_t s = seed * 1000;
  for (auto* p : w.params()) {
    auto d = p->mutable_data();
    const auto r = test::random_values(d.size(), ++s, 0.1);
    for (std::size_t i = 0; i < d.size(); ++i) d[i] += r[i];
  }
  return w;
}

TokenSequence random_tokens(std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  TokenSequence t(n);
  for (auto& x : t) x = static_cast<TokenId>(rng.below(Vocabulary::kSize));
  return t;
}

template <class T>
Transformer<T> make(const ModelConfig& cfg, std::uint64_t seed) {
  return Transformer<T>(cfg, convert_weights<T>(busy_weights(cfg, seed)));
}

// |a - b| relative to the larger magnitude, floored at 1 for values near 0.
double mixed_err(double a, double b) { return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1.0}); }

template <class T>
double max_err(std::span<const T> a, std::span<const T> b) {
  REQUIRE(a.size() == b.size());
  double e = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) e = std::max(e, mixed_err(a[i], b[i]));
  return e;
}

}  // namespace

TEST_CASE("config validation") {
  auto c = small_cfg(HeadKind::Lm);
  c.n_head = 5;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = small_cfg(HeadKind::Lm);
  c.max_ctx = 0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  CHECK_NOTHROW(ModelConfig::default_lm().validate());
  CHECK(ModelConfig::default_lm().n_layer == 4);
  CHECK(ModelConfig::default_lm().d_model == 128);
  CHECK(ModelConfig::default_rm().n_layer == 2);
  CHECK(ModelConfig::default_rm().d_model == 64);
}

TEST_CASE("reward head output lies in (0, 1)") {
  const auto cfg = small_cfg(HeadKind::Reward);
  for (std::uint64_t s = 0; s < 10; ++s) {
    const auto rm = make<double>(cfg, s + 1);
    const auto out = rm.forward_full(random_tokens(20, s));
    for (double r : out.head) {
      CHECK(r > 0.0);
      CHECK(r < 1.0);
    }
  }
}

TEST_CASE("causality under fuzzed suffix edits") {
  const auto cfg = small_cfg(HeadKind::Lm);
  const auto lm = make<double>(cfg, 3);
  Rng rng(9);
  for (int trial = 0; trial < 20; ++trial) {
    auto toks = random_tokens(24, 100 + trial);
    const auto base = lm.forward_full(toks);
    const std::size_t cut = 1 + rng.below(toks.size() - 1);
    for (std::size_t i = cut; i < toks.size(); ++i) toks[i] = static_cast<TokenId>(rng.below(Vocabulary::kSize));
    const auto edited = lm.forward_full(toks);
    for (std::size_t pos = 0; pos < cut; ++pos) {
      const auto a = base.at(pos), b = edited.at(pos);
      CHECK(std::equal(a.begin(), a.end(), b.begin()));
    }
  }
}

TEST_CASE("prefix consistency in 32-bit") {
  const auto cfg = small_cfg(HeadKind::Lm);
  const auto lm = make<float>(cfg, 4);
  const auto xy = random_tokens(30, 5);
  const auto x = TokenSequence(xy.begin(), xy.begin() + 12);
  const auto full = lm.forward_full(xy);
  const auto pre = lm.forward_full(x);
  for (std::size_t pos = 0; pos < x.size(); ++pos) CHECK(max_err(full.at(pos), pre.at(pos)) < 1e-5);
}

TEST_CASE("forward_full contracts") {
  const auto cfg = small_cfg(HeadKind::Lm, 8);
  const auto lm = make<double>(cfg, 1);
  CHECK_THROWS_AS(lm.forward_full(random_tokens(9, 1)), CapacityError);
  TokenCounter c;
  const auto out = lm.forward_full(random_tokens(8, 1), &c);
  CHECK(c.token_forwards == 8);
  CHECK(out.cache.length() == 8);
  CHECK_THROWS_AS(lm.forward_full(TokenSequence{300}), DimensionError);
}

TEST_CASE("incremental matches full recompute at every prefix") {
  auto check = [](auto tag, double tol) {
    using T = decltype(tag);
    for (HeadKind head : {HeadKind::Lm, HeadKind::Reward}) {
      const auto cfg = small_cfg(head);
      const auto m = make<T>(cfg, 7);
      const auto toks = random_tokens(50, 8);
      auto cache = m.empty_cache();
      TokenCounter c;
      for (std::size_t t = 0; t < toks.size(); ++t) {
        const auto before = c.token_forwards;
        const auto inc = m.forward_incremental(cache, toks[t], &c);
        CHECK(c.token_forwards == before + 1);
        CHECK(cache.length() == t + 1);
        const auto full = m.forward_full(std::span<const TokenId>(toks).first(t + 1));
        CHECK(max_err(std::span<const T>(inc), full.at(t)) < tol);
      }
      CHECK(c.token_forwards == toks.size());
    }
  };
  check(float{}, 1e-5);
  check(double{}, 1e-10);
}

TEST_CASE("empty-prefix incremental equals a one-token forward") {
  const auto m = make<double>(small_cfg(HeadKind::Lm), 2);
  auto cache = m.empty_cache();
  const auto inc = m.forward_incremental(cache, 65);
  const auto full = m.forward_full(TokenSequence{65});
  CHECK(max_err(std::span<const double>(inc), full.at(0)) < 1e-12);
  CHECK(cache.length() == 1);
  for (std::size_t l = 0; l < cache.n_layer(); ++l) {
    CHECK(max_err(cache.keys(l), full.cache.keys(l)) < 1e-12);
    CHECK(max_err(cache.values(l), full.cache.values(l)) < 1e-12);
  }
}

TEST_CASE("cache append leaves earlier positions bitwise unchanged") {
  const auto m = make<float>(small_cfg(HeadKind::Reward), 3);
  auto cache = m.forward_full(random_tokens(10, 4)).cache;
  std::vector<std::vector<float>> keys, vals;
  for (std::size_t l = 0; l < cache.n_layer(); ++l) {
    keys.emplace_back(cache.keys(l).begin(), cache.keys(l).end());
    vals.emplace_back(cache.values(l).begin(), cache.values(l).end());
  }
  m.forward_incremental(cache, 17);
  for (std::size_t l = 0; l < cache.n_layer(); ++l) {
    CHECK(std::equal(keys[l].begin(), keys[l].end(), cache.keys(l).begin()));
    CHECK(std::equal(vals[l].begin(), vals[l].end(), cache.values(l).begin()));
  }
}

TEST_CASE("incremental overflow is a capacity error") {
  const auto m = make<double>(small_cfg(HeadKind::Lm, 4), 1);
  auto cache = m.forward_full(random_tokens(4, 1)).cache;
  CHECK_THROWS_AS(m.forward_incremental(cache, 3), CapacityError);
}

TEST_CASE("score_candidates matches independent full recomputation") {
  auto check = [](auto tag, double tol) {
    using T = decltype(tag);
    const auto rm = make<T>(small_cfg(HeadKind::Reward), 11);
    for (int trial = 0; trial < 10; ++trial) {
      const auto prefix = random_tokens(1 + trial * 3, 200 + trial);
      const auto cands = random_tokens(7, 300 + trial);
      auto base = rm.forward_full(prefix).cache;
      const auto base_copy = base;
      auto batch = rm.make_batch(std::move(base), cands, true);
      TokenCounter c;
      const auto r = rm.score_candidates(batch, &c);
      CHECK(c.token_forwards == cands.size());
      CHECK(batch.base() == base_copy);
      for (std::size_t j = 0; j < cands.size(); ++j) {
        auto seq = prefix;
        seq.push_back(cands[j]);
        const double want = rm.forward_full(seq).at(seq.size() - 1)[0];
        CHECK(std::abs(r[j] - want) / want < tol);
      }
    }
  };
  check(float{}, 1e-5);
  check(double{}, 1e-10);
}

TEST_CASE("single and duplicated candidates") {
  const auto rm = make<double>(small_cfg(HeadKind::Reward), 12);
  const auto prefix = random_tokens(6, 1);
  auto cache = rm.forward_full(prefix).cache;
  auto inc_cache = cache;
  const double inc = rm.forward_incremental(inc_cache, 42)[0];
  auto b1 = rm.make_batch(cache, TokenSequence{42});
  CHECK(std::abs(rm.score_candidates(b1)[0] - inc) < 1e-12);

  auto b2 = rm.make_batch(cache, TokenSequence{9, 42, 9, 42});
  const auto r = rm.score_candidates(b2);
  CHECK(r[0] == r[2]);
  CHECK(r[1] == r[3]);
}

TEST_CASE("promote adopts the candidate state without recomputation") {
  const auto rm = make<double>(small_cfg(HeadKind::Reward), 13);
  const auto prefix = random_tokens(5, 2);
  const auto cands = random_tokens(6, 3);
  TokenCounter c;
  auto batch = rm.make_batch(rm.forward_full(prefix).cache, cands, true);
  rm.score_candidates(batch, &c);
  const auto before = c.token_forwards;
  auto promoted = rm.promote(batch, 4);
  CHECK(c.token_forwards == before);
  CHECK(promoted.length() == prefix.size() + 1);

  auto seq = prefix;
  seq.push_back(cands[4]);
  CHECK(max_err(promoted.keys(1), rm.forward_full(seq).cache.keys(1)) < 1e-12);
  const double next = rm.forward_incremental(promoted, 77)[0];
  seq.push_back(77);
  const double want = rm.forward_full(seq).at(seq.size() - 1)[0];
  CHECK(std::abs(next - want) < 1e-12);

  CHECK_THROWS_AS(rm.promote(batch, 4), ContractError);
  CHECK_THROWS_AS(rm.promote(batch, 0), ContractError);
}

TEST_CASE("promote contracts") {
  const auto rm = make<double>(small_cfg(HeadKind::Reward), 14);
  auto batch = rm.make_batch(rm.forward_full(random_tokens(3, 1)).cache, TokenSequence{1, 2});
  CHECK_THROWS_AS(rm.promote(batch, 0), ContractError);  // not scored yet
  rm.score_candidates(batch);
  CHECK_THROWS_AS(rm.promote(batch, 2), std::out_of_range);
  CHECK_NOTHROW(rm.promote(batch, 1));
  CHECK_THROWS_AS(rm.make_batch(rm.empty_cache(), TokenSequence{}), ContractError);

  const auto lm = make<double>(small_cfg(HeadKind::Lm), 14);
  auto lb = lm.make_batch(lm.empty_cache(), TokenSequence{1});
  CHECK_THROWS_AS(lm.score_candidates(lb), ContractError);
}

TEST_CASE("candidate batch at context capacity") {
  const auto rm = make<double>(small_cfg(HeadKind::Reward, 4), 15);
  auto batch = rm.make_batch(rm.forward_full(random_tokens(4, 1)).cache, TokenSequence{1, 2});
  CHECK_THROWS_AS(rm.score_candidates(batch), CapacityError);
}

TEST_CASE("checkpoint round trip is bit exact") {
  const auto dir = test::fresh_dir("ckpt");
  const auto cfg = small_cfg(HeadKind::Reward);
  const auto w = busy_weights(cfg, 21);

  save_checkpoint(dir / "a64.ckpt", cfg, w, PayloadType::F64);
  const auto c64 = load_checkpoint(dir / "a64.ckpt");
  CHECK(c64.cfg == cfg);
  CHECK(c64.payload == PayloadType::F64);
  const auto src = w.params();
  const auto got = c64.weights.params();
  REQUIRE(src.size() == got.size());
  for (std::size_t i = 0; i < src.size(); ++i) {
    CHECK(std::equal(src[i]->data().begin(), src[i]->data().end(), got[i]->data().begin()));
  }

  save_checkpoint(dir / "a32.ckpt", cfg, w, PayloadType::F32);
  const auto c32 = load_checkpoint(dir / "a32.ckpt");
  const auto got32 = c32.weights.params();
  for (std::size_t i = 0; i < src.size(); ++i) {
    for (std::size_t j = 0; j < src[i]->numel(); ++j) {
      CHECK(got32[i]->at(j) == static_cast<double>(static_cast<float>(src[i]->at(j))));
    }
  }
  // Saving what was loaded reproduces the file byte for byte.
  save_checkpoint(dir / "b32.ckpt", c32.cfg, c32.weights, PayloadType::F32);
  CHECK(test::slurp(dir / "a32.ckpt") == test::slurp(dir / "b32.ckpt"));
  CHECK(c32.content_hash == load_checkpoint(dir / "b32.ckpt").content_hash);
  CHECK(c32.content_hash != c64.content_hash);
}

TEST_CASE("checkpoint faults") {
  const auto dir = test::fresh_dir("ckpt_faults");
  const auto cfg = small_cfg(HeadKind::Reward);
  save_checkpoint(dir / "rm.ckpt", cfg, busy_weights(cfg, 22));
  const auto bytes = test::slurp(dir / "rm.ckpt");

  CHECK_THROWS_AS(load_checkpoint(dir / "rm.ckpt", HeadKind::Lm), CompatibilityError);
  CHECK_NOTHROW(load_checkpoint(dir / "rm.ckpt", HeadKind::Reward));

  const auto write = [&](const std::string& name, const std::string& data) {
    std::ofstream(dir / name, std::ios::binary) << data;
    return dir / name;
  };
  for (std::size_t cut : {0ul, 5ul, 30ul, 59ul, 61ul, bytes.size() / 2, bytes.size() - 1}) {
    CAPTURE(cut);
    CHECK_THROWS_AS(load_checkpoint(write("trunc.ckpt", bytes.substr(0, cut))), ParseError);
  }
  auto bad = bytes;
  bad[8] = 2;  // version
  CHECK_THROWS_AS(load_checkpoint(write("version.ckpt", bad)), CompatibilityError);
  bad = bytes;
  bad[41] ^= 1;  // vocabulary hash
  CHECK_THROWS_AS(load_checkpoint(write("vocab.ckpt", bad)), CompatibilityError);
  bad = bytes;
  bad[100] ^= 0x40;  // payload
  CHECK_THROWS_AS(load_checkpoint(write("payload.ckpt", bad)), ParseError);
  bad = bytes;
  bad[0] = 'X';
  CHECK_THROWS_AS(load_checkpoint(write("magic.ckpt", bad)), ParseError);
  bad = bytes;
  bad[20] = 0x7f;  // d_model inflated: count no longer matches
  CHECK_THROWS_AS(load_checkpoint(write("dims.ckpt", bad)), ParseError);
  CHECK_THROWS_AS(load_checkpoint(write("trail.ckpt", bytes + "x")), ParseError);
  CHECK_THROWS_AS(load_checkpoint(dir / "missing.ckpt"), ParseError);
}

TEST_CASE("transformer rejects mismatched weights") {
  const auto cfg = small_cfg(HeadKind::Lm);
  auto other = cfg;
  other.d_model = 16;
  CHECK_THROWS_AS(Transformer<double>(cfg, init_weights<double>(other, 1)), DimensionError);
}
