#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace rad {

using TokenId = std::int32_t;
using TokenSequence = std::vector<TokenId>;

// Byte-level vocabulary shared by every language model and reward model.
// Ids 0..255 are raw bytes; the three specials follow.
struct Vocabulary {
  static constexpr TokenId kBos = 256;
  static constexpr TokenId kEos = 257;
  static constexpr TokenId kPad = 258;
  static constexpr std::size_t kSize = 259;

  static bool is_special(TokenId id) { return id >= kBos; }
  // Fingerprint recorded in checkpoints and compared at decode time.
  static std::uint64_t hash();
};

// One token per byte; never emits specials.
TokenSequence encode(std::string_view text);
// Inverse of encode; special tokens are dropped.
std::string decode(std::span<const TokenId> tokens);

struct RewardExample {
  std::string text;
  double label = 0.0;
};

enum class PromptTag { Positive, Negative, Neutral };

std::string_view to_string(PromptTag tag);
std::optional<PromptTag> parse_prompt_tag(std::string_view s);

struct Prompt {
  std::string text;
  std::optional<PromptTag> tag;
};

using PromptSet = std::vector<Prompt>;

// How each synthetic example picks its share of positive words.
struct MixLaw {
  enum class Kind {
    UniformRatio,  // per-example ratio ~ U(0, 1), then each word Bernoulli(ratio)
    FixedRatio,    // each word positive with probability `ratio`
  };
  Kind kind = Kind::UniformRatio;
  double ratio = 0.5;
};

struct SynthConfig {
  std::uint64_t seed = 0;
  std::size_t n_examples = 2000;
  std::vector<std::string> lexicon_pos;
  std::vector<std::string> lexicon_neg;
  MixLaw mix_law;
  std::size_t min_words = 3;
  std::size_t max_words = 8;
};

const std::vector<std::string>& default_positive_lexicon();
const std::vector<std::string>& default_negative_lexicon();

// Space-separated word sequences; label = positive words / total words.
std::vector<RewardExample> synth_attribute_corpus(const SynthConfig& cfg);

// Prompts of a few lexicon words ending in a space, tagged by majority.
PromptSet synth_prompts(std::uint64_t seed, std::size_t n_prompts,
                        const std::vector<std::string>& lexicon_pos,
                        const std::vector<std::string>& lexicon_neg,
                        std::size_t min_words = 1, std::size_t max_words = 3);

// JSONL interchange. Errors name the 1-based line number.
std::vector<RewardExample> load_reward_jsonl(const std::filesystem::path& path);
void save_reward_jsonl(const std::filesystem::path& path, std::span<const RewardExample> examples);
// Only the "text" field of each line; labels, if any, are ignored.
std::vector<std::string> load_texts_jsonl(const std::filesystem::path& path);
PromptSet load_prompts_jsonl(const std::filesystem::path& path);
void save_prompts_jsonl(const std::filesystem::path& path, const PromptSet& prompts);

// Throws ValidationError unless the example satisfies 0 <= label <= 1 and
// has non-empty text.
void validate(const RewardExample& example);

}  // namespace rad
