#pragma once

// Analytic FLOPs-per-token accounting for guided decoding methods. All
// quantities are exact integers; rounding happens only when formatting.

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "rad/decoder.hpp"

namespace rad::cost {

struct CostSpec {
  std::string name;
  std::uint64_t n_layer = 1;
  std::uint64_t d_model = 1;
  // 0 selects the context-free approximation.
  std::uint64_t n_ctx = 0;

  void validate() const;
};

// 12 * n_layer * d_model^2
std::uint64_t nonembedding_params(const CostSpec& spec);
// 2N + 2 * n_layer * n_ctx * d_model
std::uint64_t forward_flops(const CostSpec& spec);
// 6 * d_model + C_forward, or 2N under the approximation.
std::uint64_t rm_flops(const CostSpec& spec, bool approximate = true);
// k * C_RM
std::uint64_t rad_flops(const CostSpec& rm_spec, std::uint64_t k, bool approximate = true);

enum class Method { Rad, Pplm, Gedi, Dexperts, Retrain };

const char* to_string(Method m);
std::optional<Method> parse_method(std::string_view s);

struct MethodCost {
  std::uint64_t c_lm = 0;
  std::uint64_t c_method = 0;  // extra decoding cost per token
  std::uint64_t total = 0;     // TC = C_LM + C_method
};

// aux is the reward model for RAD and the guide model for GeDi/DExperts;
// ConfigError when one of those lacks it.
MethodCost method_total(Method method, const CostSpec& lm, const std::optional<CostSpec>& aux,
                        std::uint64_t k = 20, bool approximate = true);

// Default guide models: GPT-2 Medium for GeDi, GPT-2 Large for DExperts.
std::optional<CostSpec> default_aux(Method method);

namespace presets {
CostSpec gpt2_small();
CostSpec gpt2_medium();
CostSpec gpt2_large();
CostSpec llama_7b();
CostSpec llama_13b();
CostSpec llama_33b();
CostSpec llama_65b();
std::vector<CostSpec> table_lms();
std::optional<CostSpec> by_name(std::string_view name);
}  // namespace presets

// Giga-FLOPs with two decimals. The value is first rounded half-up to
// 0.001G, then to 0.01G, which is how the published table was produced
// (12,884,901,888 prints as 12.89G).
std::string format_giga(std::uint64_t flops);
// num/den rounded half-up to `decimals` places, exact.
std::string format_ratio(std::uint64_t num, std::uint64_t den, int decimals);

// Model table and overhead table as aligned text or CSV.
std::string model_table_text(std::uint64_t k = 20);
std::string model_table_csv(std::uint64_t k = 20);
std::string overhead_table_text(std::uint64_t k = 20);
std::string overhead_table_csv(std::uint64_t k = 20);

struct MeasuredCounts {
  std::uint64_t lm_tokens = 0;
  std::uint64_t rm_tokens = 0;
};

// Throws InstrumentationError when the run carries no counters.
MeasuredCounts measured_token_counts(const DecodeResult& run);

// Closed forms: cached prompt_len + k*m; uncached sum_{t=1..m} k (prompt_len + t).
std::uint64_t expected_rm_tokens(std::uint64_t prompt_len, std::uint64_t k, std::uint64_t m, bool cached);
std::uint64_t expected_lm_tokens(std::uint64_t prompt_len, std::uint64_t m);

}  // namespace rad::cost
