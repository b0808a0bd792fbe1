#include "rad/cost_model.hpp"

#include <fmt/format.h>

#include "rad/errors.hpp"

namespace rad::cost {

using u128 = unsigned __int128;

namespace {

std::uint64_t checked(u128 v) {
  if (v > UINT64_MAX) throw ContractError("FLOP count overflows 64 bits");
  return static_cast<std::uint64_t>(v);
}

// round(num / den) with halves going up.
u128 round_div(u128 num, u128 den) { return (2 * num + den) / (2 * den); }

}  // namespace

void CostSpec::validate() const {
  if (n_layer < 1 || d_model < 1) throw ConfigError("cost spec needs n_layer >= 1 and d_model >= 1");
}

std::uint64_t nonembedding_params(const CostSpec& s) {
  s.validate();
  return checked(u128{12} * s.n_layer * s.d_model * s.d_model);
}

std::uint64_t forward_flops(const CostSpec& s) {
  return checked(u128{2} * nonembedding_params(s) + u128{2} * s.n_layer * s.n_ctx * s.d_model);
}

std::uint64_t rm_flops(const CostSpec& s, bool approximate) {
  if (approximate) return checked(u128{2} * nonembedding_params(s));
  return checked(u128{6} * s.d_model + forward_flops(s));
}

std::uint64_t rad_flops(const CostSpec& rm_spec, std::uint64_t k, bool approximate) {
  if (k < 1) throw ConfigError("k must be at least 1");
  return checked(u128{k} * rm_flops(rm_spec, approximate));
}

const char* to_string(Method m) {
  switch (m) {
    case Method::Rad: return "RAD";
    case Method::Pplm: return "PPLM";
    case Method::Gedi: return "GeDi";
    case Method::Dexperts: return "DExperts";
    case Method::Retrain: return "Retrain";
  }
  return "RAD";
}

std::optional<Method> parse_method(std::string_view s) {
  if (s == "rad" || s == "RAD") return Method::Rad;
  if (s == "pplm" || s == "PPLM") return Method::Pplm;
  if (s == "gedi" || s == "GeDi") return Method::Gedi;
  if (s == "dexperts" || s == "DExperts") return Method::Dexperts;
  if (s == "retrain" || s == "Retrain") return Method::Retrain;
  return std::nullopt;
}

MethodCost method_total(Method method, const CostSpec& lm, const std::optional<CostSpec>& aux,
                        std::uint64_t k, bool approximate) {
  MethodCost c;
  c.c_lm = approximate ? rm_flops(lm, true) : forward_flops(lm);
  const auto need_aux = [&]() -> const CostSpec& {
    if (!aux) throw ConfigError(fmt::format("{} cost needs an auxiliary model spec", to_string(method)));
    return *aux;
  };
  switch (method) {
    case Method::Rad:
      c.c_method = rad_flops(need_aux(), k, approximate);
      break;
    case Method::Pplm:
      // Two forwards and one backward (twice a forward) beyond the plain pass.
      c.c_method = checked(u128{3} * c.c_lm);
      break;
    case Method::Gedi:
    case Method::Dexperts: {
      const auto& g = need_aux();
      c.c_method = checked(u128{2} * (approximate ? rm_flops(g, true) : forward_flops(g)));
      break;
    }
    case Method::Retrain:
      c.c_method = 0;
      break;
  }
  c.total = checked(u128{c.c_lm} + c.c_method);
  return c;
}

std::optional<CostSpec> default_aux(Method method) {
  switch (method) {
    case Method::Rad: return presets::gpt2_small();
    case Method::Gedi: return presets::gpt2_medium();
    case Method::Dexperts: return presets::gpt2_large();
    default: return std::nullopt;
  }
}

namespace presets {
CostSpec gpt2_small() { return {"GPT2-small", 12, 768, 0}; }
CostSpec gpt2_medium() { return {"GPT2-medium", 24, 1024, 0}; }
CostSpec gpt2_large() { return {"GPT-2 Large", 36, 1280, 0}; }
CostSpec llama_7b() { return {"LLaMA 7B", 32, 4096, 0}; }
CostSpec llama_13b() { return {"LLaMA 13B", 40, 5120, 0}; }
CostSpec llama_33b() { return {"LLaMA 33B", 60, 6656, 0}; }
CostSpec llama_65b() { return {"LLaMA 65B", 80, 8192, 0}; }

std::vector<CostSpec> table_lms() {
  return {gpt2_large(), llama_7b(), llama_13b(), llama_33b(), llama_65b()};
}

std::optional<CostSpec> by_name(std::string_view name) {
  const std::pair<std::string_view, CostSpec (*)()> table[] = {
      {"gpt2-small", gpt2_small}, {"gpt2-medium", gpt2_medium}, {"gpt2-large", gpt2_large},
      {"llama-7b", llama_7b},     {"llama-13b", llama_13b},     {"llama-33b", llama_33b},
      {"llama-65b", llama_65b},
  };
  for (const auto& [key, fn] : table) {
    if (key == name) return fn();
  }
  return std::nullopt;
}
}  // namespace presets

std::string format_giga(std::uint64_t flops) {
  const u128 thousandths = round_div(flops, 1'000'000);
  const auto hundredths = static_cast<std::uint64_t>(round_div(thousandths, 10));
  return fmt::format("{}.{:02}G", hundredths / 100, hundredths % 100);
}

std::string format_ratio(std::uint64_t num, std::uint64_t den, int decimals) {
  if (den == 0) throw ContractError("ratio with zero denominator");
  if (decimals < 0 || decimals > 9) throw ContractError("ratio decimals outside [0, 9]");
  u128 scale = 1;
  for (int i = 0; i < decimals; ++i) scale *= 10;
  const auto v = static_cast<std::uint64_t>(round_div(u128{num} * scale, den));
  const auto s = static_cast<std::uint64_t>(scale);
  if (decimals == 0) return fmt::format("{}", v);
  return fmt::format("{}.{:0{}}", v / s, v % s, decimals);
}

namespace {

struct OverheadRow {
  Method method;
  MethodCost large, llama;
};

std::vector<OverheadRow> overhead_rows(std::uint64_t k) {
  std::vector<OverheadRow> rows;
  for (Method m : {Method::Pplm, Method::Gedi, Method::Dexperts, Method::Rad, Method::Retrain}) {
    rows.push_back({m, method_total(m, presets::gpt2_large(), default_aux(m), k),
                    method_total(m, presets::llama_65b(), default_aux(m), k)});
  }
  return rows;
}

}  // namespace

std::string model_table_text(std::uint64_t k) {
  std::string out = fmt::format("{:<14}{:>9}{:>9}{:>12}\n", "RM", "n_layer", "d_model", "C_RAD");
  const auto rm = presets::gpt2_small();
  out += fmt::format("{:<14}{:>9}{:>9}{:>12}\n", rm.name, rm.n_layer, rm.d_model,
                     format_giga(rad_flops(rm, k)));
  out += fmt::format("{:<14}{:>9}{:>9}{:>12}\n", "LM", "n_layer", "d_model", "C_LM");
  for (const auto& lm : presets::table_lms()) {
    out += fmt::format("{:<14}{:>9}{:>9}{:>12}\n", lm.name, lm.n_layer, lm.d_model,
                       format_giga(rm_flops(lm)));
  }
  return out;
}

std::string model_table_csv(std::uint64_t k) {
  std::string out = "role,model,n_layer,d_model,flops,display\n";
  const auto rm = presets::gpt2_small();
  const auto c_rad = rad_flops(rm, k);
  out += fmt::format("rm,{},{},{},{},{}\n", rm.name, rm.n_layer, rm.d_model, c_rad, format_giga(c_rad));
  for (const auto& lm : presets::table_lms()) {
    const auto c = rm_flops(lm);
    out += fmt::format("lm,{},{},{},{},{}\n", lm.name, lm.n_layer, lm.d_model, c, format_giga(c));
  }
  return out;
}

std::string overhead_table_text(std::uint64_t k) {
  std::string out = fmt::format("{:<10}{:>12}{:>12}{:>14}{:>14}\n", "Method", "GPT-2 Large", "LLaMA 65B",
                                "TC GPT-2 L", "TC LLaMA 65B");
  for (const auto& r : overhead_rows(k)) {
    const bool retrain = r.method == Method::Retrain;
    const auto large = retrain ? std::string("1") : format_ratio(r.large.total, r.large.c_lm, 1);
    const auto llama = retrain ? std::string("1") : format_ratio(r.llama.total, r.llama.c_lm, 2);
    out += fmt::format("{:<10}{:>12}{:>12}{:>14}{:>14}\n", to_string(r.method), large + "x", llama + "x",
                       format_giga(r.large.total), format_giga(r.llama.total));
  }
  return out;
}

std::string overhead_table_csv(std::uint64_t k) {
  std::string out =
      "method,lm,c_lm,c_method,tc,tc_display,ratio_1dp,ratio_2dp\n";
  for (const auto& r : overhead_rows(k)) {
    for (const auto& [name, c] : {std::pair{presets::gpt2_large().name, r.large},
                                  std::pair{presets::llama_65b().name, r.llama}}) {
      out += fmt::format("{},{},{},{},{},{},{},{}\n", to_string(r.method), name, c.c_lm, c.c_method, c.total,
                         format_giga(c.total), format_ratio(c.total, c.c_lm, 1),
                         format_ratio(c.total, c.c_lm, 2));
    }
  }
  return out;
}

MeasuredCounts measured_token_counts(const DecodeResult& run) {
  if (!run.counts) throw InstrumentationError("decode run carries no token counters");
  return {run.counts->lm_tokens, run.counts->rm_tokens};
}

std::uint64_t expected_rm_tokens(std::uint64_t prompt_len, std::uint64_t k, std::uint64_t m, bool cached) {
  if (cached) return prompt_len + k * m;
  // sum_{t=1..m} k (p + t) = k (m p + m (m + 1) / 2)
  return k * (m * prompt_len + m * (m + 1) / 2);
}

std::uint64_t expected_lm_tokens(std::uint64_t prompt_len, std::uint64_t m) { return prompt_len + m; }

}  // namespace rad::cost
