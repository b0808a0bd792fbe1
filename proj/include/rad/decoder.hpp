#pragma once

// Reward-augmented decoding: at every step the k most likely next tokens are
// scored by a unidirectional reward model as one-token extensions of the
// current text, their logits are shifted by beta * reward, and the next
// token is sampled from the renormalized top-k distribution.

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "rad/corpus.hpp"
#include "rad/model.hpp"
#include "rad/rng.hpp"

namespace rad {

enum class DecodeMode { Rad, TopK, Nucleus, Greedy };

const char* to_string(DecodeMode mode);
std::optional<DecodeMode> parse_decode_mode(std::string_view s);

struct DecodeConfig {
  std::size_t k = 20;
  double beta = 0.0;
  std::size_t max_new_tokens = 20;
  std::uint64_t seed = 0;
  TokenId eos_id = Vocabulary::kEos;
  DecodeMode mode = DecodeMode::Rad;
  double top_p = 0.9;        // Nucleus only
  double temperature = 1.0;  // baseline modes only; RAD has no temperature
  // Score only BOS + generated tokens instead of BOS + prompt + generated.
  bool score_generation_only = false;
  bool rm_prepend_bos = true;
  // false recomputes every candidate from scratch (reference mode).
  bool use_cache = true;
  bool record_trace = true;
  // Hash the shared reward cache before scoring and re-check at promotion.
  bool verify_cache = false;

  void validate(std::size_t vocab) const;
};

struct TopK {
  std::vector<TokenId> ids;
  std::vector<double> logits;
};

// k largest logits, descending; ties broken toward the lower token id.
template <class T>
TopK topk_select(std::span<const T> logits, std::size_t k);

// softmax(z + beta * rho), max-subtracted.
std::vector<double> reweight(std::span<const double> z, std::span<const double> rho, double beta);

// Inverse CDF over p in stored order with one uniform u in [0, 1): the first
// index whose cumulative mass exceeds u.
std::size_t sample_categorical(std::span<const double> p, double u);
std::size_t sample_categorical(std::span<const double> p, Rng& rng);

struct StepTrace {
  std::size_t t = 0;  // 1-based generation step
  std::vector<TokenId> ids;
  std::vector<double> logits;
  std::vector<double> rewards;  // empty when no reward model ran
  std::vector<double> probs;
  std::size_t chosen_rank = 0;
  TokenId chosen = 0;
  std::optional<double> chosen_reward;
};

enum class Termination { Eos, Budget };

struct TokenCounts {
  std::uint64_t lm_tokens = 0;
  std::uint64_t rm_tokens = 0;
  std::size_t lm_prompt_len = 0;  // tokens the LM saw before step 1 (BOS + prompt)
  std::size_t rm_prompt_len = 0;  // tokens the RM context held before step 1
  std::size_t k = 0;
  std::size_t steps = 0;
  bool cached = true;
  bool rm_used = false;
};

struct DecodeResult {
  TokenSequence generated;  // includes EOS when sampled
  Termination terminated = Termination::Budget;
  std::vector<StepTrace> trace;
  std::optional<TokenCounts> counts;
};

// `rm` may be null in baseline modes. Both models must share one vocabulary.
template <class T>
DecodeResult decode(const Transformer<T>& lm, const Transformer<T>* rm,
                    std::span<const TokenId> prompt, const DecodeConfig& cfg);

struct GenerationRecord {
  std::size_t prompt_idx = 0;
  std::size_t cont_idx = 0;
  std::string text;
  TokenSequence token_ids;
  Termination terminated = Termination::Budget;
  std::optional<std::string> error;
  std::optional<std::string> trace_path;
  std::vector<StepTrace> trace;
  std::optional<TokenCounts> counts;
};

// Seed of continuation j of prompt i; independent of every other record.
std::uint64_t continuation_seed(std::uint64_t master, std::size_t prompt_idx, std::size_t cont_idx);

// n_continuations records per prompt in (prompt, continuation) order. A
// failing record carries its error instead of aborting the batch. Output is
// identical for any worker count.
template <class T>
std::vector<GenerationRecord> batch_generate(const Transformer<T>& lm, const Transformer<T>* rm,
                                             const PromptSet& prompts, std::size_t n_continuations,
                                             const DecodeConfig& cfg, std::size_t workers = 1);

// Worker count from RAD_THREADS, default 1.
std::size_t worker_count_from_env();

void write_generations_jsonl(const std::filesystem::path& path,
                             std::span<const GenerationRecord> records);
std::vector<GenerationRecord> read_generations_jsonl(const std::filesystem::path& path);

// Columns t,rank,token_id,logit,reward,prob,chosen; one row per candidate.
void write_trace_csv(std::ostream& out, std::span<const StepTrace> trace);
void write_trace_csv(const std::filesystem::path& path, std::span<const StepTrace> trace);

}  // namespace rad
