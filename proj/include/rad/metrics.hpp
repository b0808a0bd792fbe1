#pragma once

// Evaluation of steered generations against a held-out oracle reward model:
// expected maximum score, exceed rate, distinct-n and conditional perplexity.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "rad/corpus.hpp"
#include "rad/decoder.hpp"
#include "rad/model.hpp"

namespace rad {

struct ScoredContinuation {
  TokenSequence tokens;
  double score = 0.0;
};

struct GenerationGroup {
  std::string prompt;
  std::vector<ScoredContinuation> continuations;
};

// Mean over groups of the maximum continuation score. ContractError on an
// empty group or no groups.
double avg_max_score(std::span<const GenerationGroup> groups);
// Fraction of groups with any score strictly above the threshold.
double exceed_rate(std::span<const GenerationGroup> groups, double threshold = 0.5);
// Mean over every continuation.
double mean_score(std::span<const GenerationGroup> groups);

// NgramCount divides by the number of n-grams (L - n + 1); TokenLength by L.
enum class DistinctNorm { NgramCount, TokenLength };

// Distinct n-grams over the normalizer; 1.0 when the sequence is shorter than n.
double distinct_n(std::span<const TokenId> tokens, std::size_t n,
                  DistinctNorm norm = DistinctNorm::NgramCount);
// Per-continuation distinct_n averaged over all continuations.
double corpus_distinct_n(std::span<const GenerationGroup> groups, std::size_t n,
                         DistinctNorm norm = DistinctNorm::NgramCount);

// exp of the mean negative log-probability of the continuation tokens given
// BOS + prompt + the preceding continuation tokens.
template <class T>
double conditional_perplexity(const Transformer<T>& eval_lm, std::span<const TokenId> prompt,
                              std::span<const TokenId> continuation);

// Held-out scorer: reward at the final position of BOS + text.
class Oracle {
 public:
  Oracle(Transformer<double> rm, std::uint64_t checkpoint_hash, bool prepend_bos = true);
  static Oracle from_checkpoint(const Checkpoint& ckpt, bool prepend_bos = true);

  // Special tokens are ignored; text longer than the context keeps its tail.
  double score(std::span<const TokenId> text) const;
  std::uint64_t checkpoint_hash() const { return hash_; }
  const Transformer<double>& model() const { return rm_; }

 private:
  Transformer<double> rm_;
  std::uint64_t hash_;
  bool prepend_bos_;
};

// ConfigError when the oracle is the steering reward model itself.
void check_not_self_grading(std::uint64_t oracle_hash, std::uint64_t steering_hash);

struct MetricReport {
  double avg_max_score = 0.0;
  double exceed_rate = 0.0;
  double mean_score = 0.0;
  double dist2 = 0.0;
  double dist3 = 0.0;
  std::optional<double> perplexity;
  std::size_t n_prompts = 0;
  std::size_t n_continuations = 0;
  // Continuations with no text tokens; scored on the prompt alone.
  std::size_t empty_generations = 0;
  std::size_t failed_records = 0;
};

struct PromptRow {
  std::size_t prompt_idx = 0;
  std::size_t n = 0;
  double max_score = 0.0;
  double mean_score = 0.0;
  bool exceeds = false;
  double dist2 = 0.0;
  double dist3 = 0.0;
  std::optional<double> perplexity;
};

struct EvalOptions {
  double threshold = 0.5;
  DistinctNorm norm = DistinctNorm::NgramCount;
  std::size_t workers = 1;
};

struct Evaluation {
  MetricReport report;
  std::vector<PromptRow> rows;
  std::vector<GenerationGroup> groups;
  std::vector<std::size_t> group_prompt_idx;
  // Per-record oracle score and perplexity in record order (NaN for failures).
  std::vector<double> record_scores;
  std::vector<double> record_perplexity;
};

// Failed records are counted and skipped. Without an evaluator the
// perplexity fields stay empty.
Evaluation evaluate_generations(std::span<const GenerationRecord> records, const PromptSet& prompts,
                                const Oracle& oracle, const Transformer<double>* eval_lm,
                                const EvalOptions& options = {});

nlohmann::ordered_json to_json(const MetricReport& report);
void write_metrics_json(const std::filesystem::path& path, const MetricReport& report,
                        const nlohmann::ordered_json& config_echo);
void write_per_prompt_csv(const std::filesystem::path& path, std::span<const PromptRow> rows);

}  // namespace rad
