#include "rad/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>

#include <nlohmann/json.hpp>

#include "rad/errors.hpp"
#include "rad/rng.hpp"

namespace rad {

using nlohmann::json;

std::uint64_t Vocabulary::hash() {
  // FNV-1a over the layout description.
  const std::string desc = "byte-level/256+bos256+eos257+pad258/size259";
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : desc) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

TokenSequence encode(std::string_view text) {
  TokenSequence out;
  out.reserve(text.size());
  for (unsigned char c : text) out.push_back(static_cast<TokenId>(c));
  return out;
}

std::string decode(std::span<const TokenId> tokens) {
  std::string out;
  out.reserve(tokens.size());
  for (TokenId t : tokens) {
    if (t >= 0 && t < 256) out.push_back(static_cast<char>(static_cast<unsigned char>(t)));
  }
  return out;
}

std::string_view to_string(PromptTag tag) {
  switch (tag) {
    case PromptTag::Positive: return "positive";
    case PromptTag::Negative: return "negative";
    case PromptTag::Neutral: return "neutral";
  }
  return "neutral";
}

std::optional<PromptTag> parse_prompt_tag(std::string_view s) {
  if (s == "positive") return PromptTag::Positive;
  if (s == "negative") return PromptTag::Negative;
  if (s == "neutral") return PromptTag::Neutral;
  return std::nullopt;
}

const std::vector<std::string>& default_positive_lexicon() {
  static const std::vector<std::string> words{"good", "great", "happy", "love",
                                              "nice", "kind",  "warm",  "joy"};
  return words;
}

const std::vector<std::string>& default_negative_lexicon() {
  static const std::vector<std::string> words{"bad",  "sad",  "poor", "awful",
                                              "cold", "mean", "ugly", "dull"};
  return words;
}

namespace {

void check_lexicons(const std::vector<std::string>& pos, const std::vector<std::string>& neg) {
  if (pos.empty() || neg.empty()) throw ConfigError("lexicons must be non-empty");
  const std::set<std::string> p(pos.begin(), pos.end());
  for (const auto& w : neg) {
    if (p.count(w)) throw ConfigError("lexicons overlap on word '" + w + "'");
  }
  for (const auto* lex : {&pos, &neg}) {
    for (const auto& w : *lex) {
      if (w.empty() || w.find(' ') != std::string::npos) {
        throw ConfigError("lexicon words must be non-empty and contain no spaces");
      }
    }
  }
}

}  // namespace

std::vector<RewardExample> synth_attribute_corpus(const SynthConfig& cfg) {
  check_lexicons(cfg.lexicon_pos, cfg.lexicon_neg);
  if (cfg.min_words == 0 || cfg.min_words > cfg.max_words) {
    throw ConfigError("synthetic corpus needs 1 <= min_words <= max_words");
  }
  Rng rng(cfg.seed);
  std::vector<RewardExample> out;
  out.reserve(cfg.n_examples);
  for (std::size_t e = 0; e < cfg.n_examples; ++e) {
    const auto n_words =
        cfg.min_words + static_cast<std::size_t>(rng.below(cfg.max_words - cfg.min_words + 1));
    const double ratio =
        cfg.mix_law.kind == MixLaw::Kind::UniformRatio ? rng.uniform() : cfg.mix_law.ratio;
    std::size_t n_pos = 0;
    std::string text;
    for (std::size_t w = 0; w < n_words; ++w) {
      const bool positive = rng.uniform() < ratio;
      const auto& lex = positive ? cfg.lexicon_pos : cfg.lexicon_neg;
      if (w) text.push_back(' ');
      text += lex[rng.below(lex.size())];
      n_pos += positive;
    }
    out.push_back({std::move(text), static_cast<double>(n_pos) / static_cast<double>(n_words)});
  }
  return out;
}

PromptSet synth_prompts(std::uint64_t seed, std::size_t n_prompts,
                        const std::vector<std::string>& lexicon_pos,
                        const std::vector<std::string>& lexicon_neg, std::size_t min_words,
                        std::size_t max_words) {
  check_lexicons(lexicon_pos, lexicon_neg);
  if (min_words == 0 || min_words > max_words) {
    throw ConfigError("prompt generator needs 1 <= min_words <= max_words");
  }
  Rng rng(seed);
  PromptSet out;
  for (std::size_t i = 0; i < n_prompts; ++i) {
    const auto n_words = min_words + static_cast<std::size_t>(rng.below(max_words - min_words + 1));
    std::string text;
    long balance = 0;
    for (std::size_t w = 0; w < n_words; ++w) {
      const bool positive = rng.uniform() < 0.5;
      const auto& lex = positive ? lexicon_pos : lexicon_neg;
      text += lex[rng.below(lex.size())];
      text.push_back(' ');
      balance += positive ? 1 : -1;
    }
    const PromptTag tag = balance > 0   ? PromptTag::Positive
                          : balance < 0 ? PromptTag::Negative
                                        : PromptTag::Neutral;
    out.push_back({std::move(text), tag});
  }
  return out;
}

void validate(const RewardExample& example) {
  if (example.text.empty()) throw ValidationError("reward example has empty text");
  if (!(example.label >= 0.0 && example.label <= 1.0)) {
    throw ValidationError("label " + std::to_string(example.label) + " outside [0, 1]");
  }
}

namespace {

template <class F>
void for_each_line(const std::filesystem::path& path, F&& f) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ParseError("cannot open " + path.string());
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.find_first_not_of(" \t") == std::string::npos) continue;
    json obj;
    try {
      obj = json::parse(line);
    } catch (const json::parse_error& e) {
      throw ParseError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
    if (!obj.is_object()) {
      throw ParseError(path.string() + ":" + std::to_string(lineno) + ": expected a JSON object");
    }
    try {
      f(obj, lineno);
    } catch (const ValidationError& e) {
      throw ValidationError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    } catch (const json::exception& e) {
      throw ParseError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
}

std::ofstream open_out(const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw ParseError("cannot write " + path.string());
  return out;
}

}  // namespace

std::vector<RewardExample> load_reward_jsonl(const std::filesystem::path& path) {
  std::vector<RewardExample> out;
  for_each_line(path, [&](const json& obj, std::size_t) {
    if (!obj.contains("text") || !obj["text"].is_string()) {
      throw ValidationError("missing string field 'text'");
    }
    if (!obj.contains("label") || !obj["label"].is_number()) {
      throw ValidationError("missing numeric field 'label'");
    }
    RewardExample ex{obj["text"].get<std::string>(), obj["label"].get<double>()};
    validate(ex);
    out.push_back(std::move(ex));
  });
  return out;
}

void save_reward_jsonl(const std::filesystem::path& path, std::span<const RewardExample> examples) {
  auto out = open_out(path);
  for (const auto& ex : examples) {
    json obj{{"text", ex.text}, {"label", ex.label}};
    out << obj.dump(-1, ' ', false, json::error_handler_t::replace) << '\n';
  }
}

std::vector<std::string> load_texts_jsonl(const std::filesystem::path& path) {
  std::vector<std::string> out;
  for_each_line(path, [&](const json& obj, std::size_t) {
    if (!obj.contains("text") || !obj["text"].is_string()) {
      throw ValidationError("missing string field 'text'");
    }
    auto text = obj["text"].get<std::string>();
    if (text.empty()) throw ValidationError("empty text");
    out.push_back(std::move(text));
  });
  return out;
}

PromptSet load_prompts_jsonl(const std::filesystem::path& path) {
  PromptSet out;
  for_each_line(path, [&](const json& obj, std::size_t) {
    if (!obj.contains("prompt") || !obj["prompt"].is_string()) {
      throw ValidationError("missing string field 'prompt'");
    }
    Prompt p{obj["prompt"].get<std::string>(), std::nullopt};
    if (p.text.empty()) throw ValidationError("empty prompt");
    if (obj.contains("tag") && !obj["tag"].is_null()) {
      const auto tag = parse_prompt_tag(obj["tag"].get<std::string>());
      if (!tag) throw ValidationError("unknown tag '" + obj["tag"].get<std::string>() + "'");
      p.tag = tag;
    }
    out.push_back(std::move(p));
  });
  return out;
}

void save_prompts_jsonl(const std::filesystem::path& path, const PromptSet& prompts) {
  auto out = open_out(path);
  for (const auto& p : prompts) {
    json obj{{"prompt", p.text}};
    if (p.tag) obj["tag"] = std::string(to_string(*p.tag));
    out << obj.dump(-1, ' ', false, json::error_handler_t::replace) << '\n';
  }
}

}  // namespace rad
