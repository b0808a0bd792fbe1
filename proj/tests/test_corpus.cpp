#include <doctest.h>

#include <fstream>
#include <numeric>

#include "rad/corpus.hpp"
#include "rad/errors.hpp"
#include "rad/rng.hpp"
#include "test_util.hpp"

using namespace rad;

TEST_CASE("encode examples") {
  CHECK(encode("").empty());
  CHECK(encode("AB") == TokenSequence{65, 66});
  for (TokenId t : encode("\xff\x00\x80" + std::string(1, '\0'))) CHECK_FALSE(Vocabulary::is_special(t));
}

TEST_CASE("byte round trip on random strings") {
  Rng rng(1);
  for (int i = 0; i < 1000; ++i) {
    std::string s(rng.below(40), '\0');
    for (auto& c : s) c = static_cast<char>(rng.below(256));
    const auto toks = encode(s);
    CHECK(toks.size() == s.size());
    for (TokenId t : toks) CHECK(t != Vocabulary::kEos);
    CHECK(decode(toks) == s);
  }
}

TEST_CASE("vocabulary layout") {
  CHECK(Vocabulary::kSize == 259);
  CHECK(Vocabulary::kBos != Vocabulary::kEos);
  CHECK(Vocabulary::kEos != Vocabulary::kPad);
  CHECK(decode(TokenSequence{Vocabulary::kBos, 104, 105, Vocabulary::kEos}) == "hi");
}

namespace {

// Independent label oracle: counts words against the lexicon as a rational.
std::pair<std::size_t, std::size_t> count_positive(const std::string& text,
                                                   const std::vector<std::string>& pos) {
  std::size_t p = 0, n = 0;
  std::size_t start = 0;
  while (start <= text.size()) {
    const auto end = text.find(' ', start);
    const auto word = text.substr(start, end == std::string::npos ? std::string::npos : end - start);
    ++n;
    p += std::find(pos.begin(), pos.end(), word) != pos.end();
    if (end == std::string::npos) break;
    start = end + 1;
  }
  return {p, n};
}

SynthConfig base_config() {
  SynthConfig c;
  c.seed = 5;
  c.n_examples = 500;
  c.lexicon_pos = default_positive_lexicon();
  c.lexicon_neg = default_negative_lexicon();
  return c;
}

}  // namespace

TEST_CASE("synthetic labels equal the lexicon count ratio exactly") {
  const auto cfg = base_config();
  const auto data = synth_attribute_corpus(cfg);
  REQUIRE(data.size() == cfg.n_examples);
  for (const auto& ex : data) {
    const auto [p, n] = count_positive(ex.text, cfg.lexicon_pos);
    CHECK(n >= cfg.min_words);
    CHECK(n <= cfg.max_words);
    CHECK(ex.label == static_cast<double>(p) / static_cast<double>(n));
  }
}

TEST_CASE("synthetic degenerate mixes") {
  auto cfg = base_config();
  cfg.mix_law = {MixLaw::Kind::FixedRatio, 1.0};
  for (const auto& ex : synth_attribute_corpus(cfg)) CHECK(ex.label == 1.0);
  cfg.mix_law = {MixLaw::Kind::FixedRatio, 0.0};
  for (const auto& ex : synth_attribute_corpus(cfg)) CHECK(ex.label == 0.0);

  const std::vector<std::string> pos{"good", "great", "happy"};
  const auto [p, n] = count_positive("good great bad happy", pos);
  CHECK(static_cast<double>(p) / static_cast<double>(n) == 0.75);
}

TEST_CASE("synthetic corpus is deterministic and seed dependent") {
  auto cfg = base_config();
  const auto a = synth_attribute_corpus(cfg);
  const auto b = synth_attribute_corpus(cfg);
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].text == b[i].text);
    CHECK(a[i].label == b[i].label);
  }
  cfg.seed = 6;
  const auto c = synth_attribute_corpus(cfg);
  std::size_t same = 0;
  for (std::size_t i = 0; i < a.size(); ++i) same += a[i].text == c[i].text;
  CHECK(same < a.size() / 10);
}

TEST_CASE("overlapping lexicons are rejected") {
  auto cfg = base_config();
  cfg.lexicon_neg.push_back("good");
  CHECK_THROWS_AS(synth_attribute_corpus(cfg), ConfigError);
  cfg = base_config();
  cfg.lexicon_pos.clear();
  CHECK_THROWS_AS(synth_attribute_corpus(cfg), ConfigError);
}

TEST_CASE("synthetic prompts carry majority tags") {
  const auto& pos = default_positive_lexicon();
  const auto ps = synth_prompts(3, 200, pos, default_negative_lexicon());
  for (const auto& p : ps) {
    REQUIRE(p.tag.has_value());
    CHECK(p.text.back() == ' ');
    const auto [np, n] = count_positive(p.text.substr(0, p.text.size() - 1), pos);
    const long bal = 2 * static_cast<long>(np) - static_cast<long>(n);
    const PromptTag want = bal > 0 ? PromptTag::Positive : bal < 0 ? PromptTag::Negative : PromptTag::Neutral;
    CHECK(*p.tag == want);
  }
}

TEST_CASE("reward JSONL loading") {
  const auto dir = test::fresh_dir("jsonl");
  const auto path = dir / "a.jsonl";
  {
    std::ofstream out(path);
    out << R"({"text":"abc","label":0.5})" << '\n';
  }
  const auto got = load_reward_jsonl(path);
  REQUIRE(got.size() == 1);
  CHECK(got[0].text == "abc");
  CHECK(got[0].label == 0.5);

  {
    std::ofstream out(path);
    out << R"({"text":"abc","label":0.5})" << '\n' << R"({"text":"x","label":1.5})" << '\n';
  }
  try {
    load_reward_jsonl(path);
    FAIL("expected a validation error");
  } catch (const ValidationError& e) {
    CHECK(std::string(e.what()).find(":2:") != std::string::npos);
  }

  {
    std::ofstream out(path);
    out << R"({"text":"abc","label":0.5})" << '\n' << '\n' << R"({"text": "abc", )" << '\n';
  }
  try {
    load_reward_jsonl(path);
    FAIL("expected a parse error");
  } catch (const ParseError& e) {
    CHECK(std::string(e.what()).find(":3:") != std::string::npos);
  }

  {
    std::ofstream out(path);
    out << R"({"text":"","label":0.5})" << '\n';
  }
  CHECK_THROWS_AS(load_reward_jsonl(path), ValidationError);
  CHECK_THROWS_AS(load_reward_jsonl(dir / "missing.jsonl"), ParseError);
}

TEST_CASE("10k-line reward file round trips unchanged") {
  auto cfg = base_config();
  cfg.n_examples = 10000;
  auto data = synth_attribute_corpus(cfg);
  // A few arbitrary byte strings exercise escaping.
  data[0].text = "quote \" backslash \\ tab \t newline \n";
  data[1].text = "caf\xc3\xa9";
  const auto dir = test::fresh_dir("roundtrip");
  save_reward_jsonl(dir / "r.jsonl", data);
  const auto back = load_reward_jsonl(dir / "r.jsonl");
  REQUIRE(back.size() == data.size());
  for (std::size_t i = 0; i < data.size(); ++i) {
    CHECK(back[i].text == data[i].text);
    CHECK(back[i].label == data[i].label);
  }
}

TEST_CASE("prompt JSONL round trip and tag validation") {
  const auto dir = test::fresh_dir("prompts");
  PromptSet ps{{"good ", PromptTag::Positive}, {"hello", std::nullopt}, {"bad sad ", PromptTag::Negative}};
  save_prompts_jsonl(dir / "p.jsonl", ps);
  const auto back = load_prompts_jsonl(dir / "p.jsonl");
  REQUIRE(back.size() == 3);
  for (std::size_t i = 0; i < 3; ++i) {
    CHECK(back[i].text == ps[i].text);
    CHECK(back[i].tag == ps[i].tag);
  }
  {
    std::ofstream out(dir / "bad.jsonl");
    out << R"({"prompt":"x","tag":"angry"})" << '\n';
  }
  CHECK_THROWS_AS(load_prompts_jsonl(dir / "bad.jsonl"), ValidationError);
  {
    std::ofstream out(dir / "empty.jsonl");
    out << R"({"prompt":""})" << '\n';
  }
  CHECK_THROWS_AS(load_prompts_jsonl(dir / "empty.jsonl"), ValidationError);
}

TEST_CASE("text JSONL ignores labels") {
  const auto dir = test::fresh_dir("texts");
  {
    std::ofstream out(dir / "t.jsonl");
    out << R"({"text":"one"})" << '\n' << R"({"text":"two","label":0.25})" << '\n';
  }
  CHECK(load_texts_jsonl(dir / "t.jsonl") == std::vector<std::string>{"one", "two"});
}
