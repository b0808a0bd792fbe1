#include "rad/decoder.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <numeric>
#include <thread>

#include <fmt/format.h>
#include <nlohmann/json.hpp>

#include "rad/errors.hpp"

namespace rad {

const char* to_string(DecodeMode mode) {
  switch (mode) {
    case DecodeMode::Rad: return "rad";
    case DecodeMode::TopK: return "topk";
    case DecodeMode::Nucleus: return "nucleus";
    case DecodeMode::Greedy: return "greedy";
  }
  return "rad";
}

std::optional<DecodeMode> parse_decode_mode(std::string_view s) {
  if (s == "rad") return DecodeMode::Rad;
  if (s == "topk") return DecodeMode::TopK;
  if (s == "nucleus") return DecodeMode::Nucleus;
  if (s == "greedy") return DecodeMode::Greedy;
  return std::nullopt;
}

void DecodeConfig::validate(std::size_t vocab) const {
  if (k < 1) throw ConfigError("k must be at least 1");
  if (k > vocab) throw ContractError(fmt::format("k = {} exceeds vocabulary size {}", k, vocab));
  if (!(beta >= 0.0) || !std::isfinite(beta)) throw ConfigError("beta must be finite and >= 0");
  if (max_new_tokens < 1) throw ConfigError("max_new_tokens must be at least 1");
  if (mode == DecodeMode::Nucleus && !(top_p > 0.0 && top_p <= 1.0)) {
    throw ConfigError("nucleus p must lie in (0, 1]");
  }
  if (!(temperature > 0.0) || !std::isfinite(temperature)) {
    throw ConfigError("temperature must be finite and > 0");
  }
  if (eos_id < 0 || static_cast<std::size_t>(eos_id) >= vocab) throw ConfigError("eos id outside vocabulary");
}

template <class T>
TopK topk_select(std::span<const T> logits, std::size_t k) {
  if (k > logits.size()) {
    throw ContractError(fmt::format("top-k with k = {} over {} logits", k, logits.size()));
  }
  std::vector<TokenId> order(logits.size());
  std::iota(order.begin(), order.end(), 0);
  const auto better = [&](TokenId a, TokenId b) {
    if (logits[a] != logits[b]) return logits[a] > logits[b];
    return a < b;
  };
  std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k), order.end(), better);
  TopK out;
  out.ids.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k));
  out.logits.reserve(k);
  for (TokenId id : out.ids) out.logits.push_back(static_cast<double>(logits[id]));
  return out;
}

template TopK topk_select<float>(std::span<const float>, std::size_t);
template TopK topk_select<double>(std::span<const double>, std::size_t);

namespace {

std::vector<double> softmax(std::span<const double> s) {
  const double mx = *std::max_element(s.begin(), s.end());
  std::vector<double> p(s.size());
  double total = 0.0;
  for (std::size_t i = 0; i < s.size(); ++i) {
    p[i] = std::exp(s[i] - mx);
    total += p[i];
  }
  for (double& x : p) x /= total;
  return p;
}

}  // namespace

std::vector<double> reweight(std::span<const double> z, std::span<const double> rho, double beta) {
  if (z.size() != rho.size()) throw ContractError("reweight: logits and rewards differ in length");
  if (z.empty()) throw ContractError("reweight over zero candidates");
  std::vector<double> s(z.size());
  for (std::size_t i = 0; i < z.size(); ++i) s[i] = z[i] + beta * rho[i];
  return softmax(s);
}

std::size_t sample_categorical(std::span<const double> p, double u) {
  if (p.empty()) throw ContractError("sampling from an empty distribution");
  double total = 0.0;
  for (double x : p) {
    if (!std::isfinite(x) || x < 0.0) throw ContractError("non-finite or negative probability");
    total += x;
  }
  if (std::abs(total - 1.0) > 1e-6) throw ContractError(fmt::format("probabilities sum to {}", total));
  double c = 0.0;
  std::size_t last = 0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (p[i] > 0.0) last = i;
    c += p[i];
    if (u < c) return i;
  }
  // Rounding left the total just below u.
  return last;
}

std::size_t sample_categorical(std::span<const double> p, Rng& rng) {
  return sample_categorical(p, rng.uniform());
}

namespace {

struct Step {
  std::vector<TokenId> ids;
  std::vector<double> logits;
  std::vector<double> probs;
};

template <class T>
Step nucleus_step(std::span<const T> logits, double top_p, double temperature) {
  const auto all = topk_select(logits, logits.size());
  std::vector<double> s(all.logits.size());
  for (std::size_t i = 0; i < s.size(); ++i) s[i] = all.logits[i] / temperature;
  const auto p = softmax(s);
  std::size_t keep = 0;
  double c = 0.0;
  while (keep < p.size()) {
    c += p[keep++];
    if (c >= top_p) break;
  }
  Step st;
  st.ids.assign(all.ids.begin(), all.ids.begin() + static_cast<std::ptrdiff_t>(keep));
  st.logits.assign(all.logits.begin(), all.logits.begin() + static_cast<std::ptrdiff_t>(keep));
  st.probs.assign(p.begin(), p.begin() + static_cast<std::ptrdiff_t>(keep));
  for (double& x : st.probs) x /= c;
  return st;
}

}  // namespace

template <class T>
DecodeResult decode(const Transformer<T>& lm, const Transformer<T>* rm,
                    std::span<const TokenId> prompt, const DecodeConfig& cfg) {
  const auto& lc = lm.config();
  if (lc.head != HeadKind::Lm) throw ConfigError("decode needs a language-model head");
  cfg.validate(lc.vocab);
  const bool use_rm = cfg.mode == DecodeMode::Rad;
  if (use_rm) {
    if (rm == nullptr) throw ConfigError("RAD decoding needs a reward model");
    if (rm->config().head != HeadKind::Reward) throw ConfigError("steering model lacks a reward head");
    if (rm->vocab_hash() != lm.vocab_hash() || rm->config().vocab != lc.vocab) {
      throw CompatibilityError("language model and reward model vocabularies differ");
    }
  }
  for (TokenId t : prompt) {
    if (t < 0 || static_cast<std::size_t>(t) >= lc.vocab) throw ValidationError("prompt token outside vocabulary");
  }

  TokenSequence lm_prompt;
  lm_prompt.reserve(prompt.size() + 1);
  lm_prompt.push_back(Vocabulary::kBos);
  lm_prompt.insert(lm_prompt.end(), prompt.begin(), prompt.end());
  if (lm_prompt.size() + cfg.max_new_tokens > lc.max_ctx) {
    throw CapacityError(fmt::format("prompt of {} tokens plus {} new exceeds language-model context {}",
                                    lm_prompt.size(), cfg.max_new_tokens, lc.max_ctx));
  }

  TokenSequence rm_context;
  if (use_rm) {
    if (cfg.rm_prepend_bos) rm_context.push_back(Vocabulary::kBos);
    if (!cfg.score_generation_only) rm_context.insert(rm_context.end(), prompt.begin(), prompt.end());
    if (rm_context.size() + cfg.max_new_tokens > rm->config().max_ctx) {
      throw CapacityError(fmt::format("reward context of {} tokens plus {} new exceeds context {}",
                                      rm_context.size(), cfg.max_new_tokens, rm->config().max_ctx));
    }
  }

  TokenCounter lm_count, rm_count;
  TokenCounts counts;
  counts.lm_prompt_len = lm_prompt.size();
  counts.rm_prompt_len = rm_context.size();
  counts.k = cfg.k;
  counts.cached = cfg.use_cache;
  counts.rm_used = use_rm;

  auto lm_full = lm.forward_full(lm_prompt, &lm_count);
  KvCache<T> lm_cache = std::move(lm_full.cache);
  std::vector<T> logits(lm_full.at(lm_prompt.size() - 1).begin(), lm_full.at(lm_prompt.size() - 1).end());
  lm_full.head.clear();

  KvCache<T> rm_cache;
  if (use_rm && cfg.use_cache) {
    rm_cache = rm_context.empty() ? rm->empty_cache() : rm->forward_full(rm_context, &rm_count).cache;
  }

  Rng rng(cfg.seed);
  DecodeResult res;
  for (std::size_t t = 1; t <= cfg.max_new_tokens; ++t) {
    Step st;
    std::vector<double> rho;
    std::optional<CandidateBatch<T>> batch;
    const std::span<const T> lg(logits);
    switch (cfg.mode) {
      case DecodeMode::Rad: {
        auto top = topk_select(lg, cfg.k);
        st.ids = std::move(top.ids);
        st.logits = std::move(top.logits);
        rho.resize(cfg.k);
        if (cfg.use_cache) {
          batch.emplace(rm->make_batch(std::move(rm_cache), st.ids, cfg.verify_cache));
          const auto r = rm->score_candidates(*batch, &rm_count);
          for (std::size_t j = 0; j < cfg.k; ++j) rho[j] = static_cast<double>(r[j]);
        } else {
          TokenSequence seq = rm_context;
          seq.push_back(0);
          for (std::size_t j = 0; j < cfg.k; ++j) {
            seq.back() = st.ids[j];
            const auto out = rm->forward_full(seq, &rm_count);
            rho[j] = static_cast<double>(out.at(seq.size() - 1)[0]);
          }
        }
        st.probs = reweight(st.logits, rho, cfg.beta);
        break;
      }
      case DecodeMode::TopK: {
        auto top = topk_select(lg, cfg.k);
        st.ids = std::move(top.ids);
        st.logits = std::move(top.logits);
        std::vector<double> s(st.logits.size());
        for (std::size_t j = 0; j < s.size(); ++j) s[j] = st.logits[j] / cfg.temperature;
        st.probs = softmax(s);
        break;
      }
      case DecodeMode::Nucleus:
        st = nucleus_step(lg, cfg.top_p, cfg.temperature);
        break;
      case DecodeMode::Greedy: {
        auto top = topk_select(lg, 1);
        st.ids = std::move(top.ids);
        st.logits = std::move(top.logits);
        st.probs = {1.0};
        break;
      }
    }

    const std::size_t j = cfg.mode == DecodeMode::Greedy ? 0 : sample_categorical(st.probs, rng);
    const TokenId x = st.ids[j];
    if (use_rm) {
      if (cfg.use_cache) {
        rm_cache = rm->promote(*batch, j);
      } else {
        rm_context.push_back(x);
      }
    }
    res.generated.push_back(x);
    if (cfg.record_trace) {
      StepTrace tr;
      tr.t = t;
      tr.ids = std::move(st.ids);
      tr.logits = std::move(st.logits);
      tr.probs = std::move(st.probs);
      tr.chosen_rank = j;
      tr.chosen = x;
      if (use_rm) {
        tr.chosen_reward = rho[j];
        tr.rewards = std::move(rho);
      }
      res.trace.push_back(std::move(tr));
    }
    logits = lm.forward_incremental(lm_cache, x, &lm_count);
    ++counts.steps;
    if (x == cfg.eos_id) {
      res.terminated = Termination::Eos;
      break;
    }
  }
  counts.lm_tokens = lm_count.token_forwards;
  counts.rm_tokens = rm_count.token_forwards;
  res.counts = counts;
  return res;
}

template DecodeResult decode<float>(const Transformer<float>&, const Transformer<float>*,
                                    std::span<const TokenId>, const DecodeConfig&);
template DecodeResult decode<double>(const Transformer<double>&, const Transformer<double>*,
                                     std::span<const TokenId>, const DecodeConfig&);

std::uint64_t continuation_seed(std::uint64_t master, std::size_t prompt_idx, std::size_t cont_idx) {
  return derive_seed(master, prompt_idx, cont_idx);
}

std::size_t worker_count_from_env() {
  const char* s = std::getenv("RAD_THREADS");
  if (s == nullptr || *s == '\0') return 1;
  char* end = nullptr;
  const long v = std::strtol(s, &end, 10);
  if (*end != '\0' || v < 1) throw ConfigError(fmt::format("RAD_THREADS must be a positive integer, got '{}'", s));
  return static_cast<std::size_t>(v);
}

template <class T>
std::vector<GenerationRecord> batch_generate(const Transformer<T>& lm, const Transformer<T>* rm,
                                             const PromptSet& prompts, std::size_t n_continuations,
                                             const DecodeConfig& cfg, std::size_t workers) {
  cfg.validate(lm.config().vocab);
  if (cfg.mode == DecodeMode::Rad && rm != nullptr && rm->vocab_hash() != lm.vocab_hash()) {
    throw CompatibilityError("language model and reward model vocabularies differ");
  }
  const std::size_t total = prompts.size() * n_continuations;
  std::vector<GenerationRecord> out(total);
  std::vector<TokenSequence> encoded;
  encoded.reserve(prompts.size());
  for (const auto& p : prompts) encoded.push_back(encode(p.text));

  std::atomic<std::size_t> next{0};
  const auto work = [&] {
    for (std::size_t i = next++; i < total; i = next++) {
      auto& rec = out[i];
      rec.prompt_idx = i / n_continuations;
      rec.cont_idx = i % n_continuations;
      DecodeConfig c = cfg;
      c.seed = continuation_seed(cfg.seed, rec.prompt_idx, rec.cont_idx);
      try {
        auto r = decode(lm, rm, encoded[rec.prompt_idx], c);
        rec.token_ids = std::move(r.generated);
        rec.text = rad::decode(rec.token_ids);
        rec.terminated = r.terminated;
        rec.trace = std::move(r.trace);
        rec.counts = r.counts;
      } catch (const Error& e) {
        rec.error = e.what();
      }
    }
  };
  workers = std::max<std::size_t>(1, std::min(workers, total));
  if (workers == 1) {
    work();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(work);
    for (auto& th : pool) th.join();
  }
  return out;
}

template std::vector<GenerationRecord> batch_generate<float>(const Transformer<float>&,
                                                             const Transformer<float>*,
                                                             const PromptSet&, std::size_t,
                                                             const DecodeConfig&, std::size_t);
template std::vector<GenerationRecord> batch_generate<double>(const Transformer<double>&,
                                                              const Transformer<double>*,
                                                              const PromptSet&, std::size_t,
                                                              const DecodeConfig&, std::size_t);

namespace {

const char* termination_name(const GenerationRecord& r) {
  if (r.error) return "error";
  return r.terminated == Termination::Eos ? "eos" : "budget";
}

}  // namespace

void write_generations_jsonl(const std::filesystem::path& path,
                             std::span<const GenerationRecord> records) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ValidationError(fmt::format("cannot write {}", path.string()));
  for (const auto& r : records) {
    nlohmann::ordered_json j;
    j["prompt_idx"] = r.prompt_idx;
    j["cont_idx"] = r.cont_idx;
    j["text"] = r.text;
    j["token_ids"] = r.token_ids;
    j["terminated"] = termination_name(r);
    if (r.trace_path) j["trace_path"] = *r.trace_path;
    if (r.error) j["error"] = *r.error;
    out << j.dump(-1, ' ', false, nlohmann::json::error_handler_t::replace) << '\n';
  }
  if (!out) throw ValidationError(fmt::format("write failed: {}", path.string()));
}

std::vector<GenerationRecord> read_generations_jsonl(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError(fmt::format("cannot open {}", path.string()));
  std::vector<GenerationRecord> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto where = fmt::format("{}:{}", path.string(), lineno);
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(fmt::format("{}: {}", where, e.what()));
    }
    GenerationRecord r;
    try {
      r.prompt_idx = j.at("prompt_idx").get<std::size_t>();
      r.cont_idx = j.at("cont_idx").get<std::size_t>();
      r.text = j.at("text").get<std::string>();
      r.token_ids = j.at("token_ids").get<TokenSequence>();
      const auto term = j.at("terminated").get<std::string>();
      if (term == "eos") {
        r.terminated = Termination::Eos;
      } else if (term == "budget") {
        r.terminated = Termination::Budget;
      } else if (term != "error") {
        throw ValidationError(fmt::format("{}: unknown termination '{}'", where, term));
      }
      if (j.contains("trace_path")) r.trace_path = j["trace_path"].get<std::string>();
      if (j.contains("error")) {
        r.error = j["error"].get<std::string>();
      } else if (term == "error") {
        r.error = "unspecified";
      }
    } catch (const nlohmann::json::exception& e) {
      throw ValidationError(fmt::format("{}: {}", where, e.what()));
    }
    for (TokenId t : r.token_ids) {
      if (t < 0 || static_cast<std::size_t>(t) >= Vocabulary::kSize) {
        throw ValidationError(fmt::format("{}: token id {} outside vocabulary", where, t));
      }
    }
    out.push_back(std::move(r));
  }
  return out;
}

void write_trace_csv(std::ostream& out, std::span<const StepTrace> trace) {
  out << "t,rank,token_id,logit,reward,prob,chosen\n";
  for (const auto& st : trace) {
    for (std::size_t r = 0; r < st.ids.size(); ++r) {
      out << st.t << ',' << r << ',' << st.ids[r] << ',' << fmt::format("{}", st.logits[r]) << ',';
      if (!st.rewards.empty()) out << fmt::format("{}", st.rewards[r]);
      out << ',' << fmt::format("{}", st.probs[r]) << ',' << (r == st.chosen_rank ? 1 : 0) << '\n';
    }
  }
}

void write_trace_csv(const std::filesystem::path& path, std::span<const StepTrace> trace) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ValidationError(fmt::format("cannot write {}", path.string()));
  write_trace_csv(out, trace);
}

}  // namespace rad
