#include "rad/metrics.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <fstream>
#include <limits>
#include <map>
#include <set>
#include <thread>

#include <fmt/format.h>

#include "rad/errors.hpp"

namespace rad {

namespace {

void require_groups(std::span<const GenerationGroup> groups) {
  if (groups.empty()) throw ContractError("metrics over zero groups");
  for (const auto& g : groups) {
    if (g.continuations.empty()) throw ContractError("generation group without continuations");
  }
}

TokenSequence text_tokens(std::span<const TokenId> tokens) {
  TokenSequence out;
  for (TokenId t : tokens) {
    if (!Vocabulary::is_special(t)) out.push_back(t);
  }
  return out;
}

}  // namespace

double avg_max_score(std::span<const GenerationGroup> groups) {
  require_groups(groups);
  double total = 0.0;
  for (const auto& g : groups) {
    double mx = g.continuations.front().score;
    for (const auto& c : g.continuations) mx = std::max(mx, c.score);
    total += mx;
  }
  return total / static_cast<double>(groups.size());
}

double exceed_rate(std::span<const GenerationGroup> groups, double threshold) {
  if (!(threshold > 0.0 && threshold < 1.0)) throw ContractError("exceed threshold outside (0, 1)");
  require_groups(groups);
  std::size_t hits = 0;
  for (const auto& g : groups) {
    const bool any = std::any_of(g.continuations.begin(), g.continuations.end(),
                                 [&](const ScoredContinuation& c) { return c.score > threshold; });
    hits += any ? 1 : 0;
  }
  return static_cast<double>(hits) / static_cast<double>(groups.size());
}

double mean_score(std::span<const GenerationGroup> groups) {
  require_groups(groups);
  double total = 0.0;
  std::size_t n = 0;
  for (const auto& g : groups) {
    for (const auto& c : g.continuations) {
      total += c.score;
      ++n;
    }
  }
  return total / static_cast<double>(n);
}

double distinct_n(std::span<const TokenId> tokens, std::size_t n, DistinctNorm norm) {
  if (n < 1) throw ContractError("distinct-n needs n >= 1");
  if (tokens.size() < n) return 1.0;
  std::set<std::vector<TokenId>> seen;
  const std::size_t count = tokens.size() - n + 1;
  for (std::size_t i = 0; i < count; ++i) seen.emplace(tokens.begin() + i, tokens.begin() + i + n);
  const double denom = norm == DistinctNorm::NgramCount ? static_cast<double>(count)
                                                        : static_cast<double>(tokens.size());
  return static_cast<double>(seen.size()) / denom;
}

double corpus_distinct_n(std::span<const GenerationGroup> groups, std::size_t n, DistinctNorm norm) {
  require_groups(groups);
  double total = 0.0;
  std::size_t count = 0;
  for (const auto& g : groups) {
    for (const auto& c : g.continuations) {
      total += distinct_n(c.tokens, n, norm);
      ++count;
    }
  }
  return total / static_cast<double>(count);
}

template <class T>
double conditional_perplexity(const Transformer<T>& eval_lm, std::span<const TokenId> prompt,
                              std::span<const TokenId> continuation) {
  if (continuation.empty()) throw ContractError("perplexity of an empty continuation");
  if (eval_lm.config().head != HeadKind::Lm) throw ConfigError("evaluator needs a language-model head");
  TokenSequence seq;
  seq.reserve(prompt.size() + continuation.size() + 1);
  seq.push_back(Vocabulary::kBos);
  seq.insert(seq.end(), prompt.begin(), prompt.end());
  seq.insert(seq.end(), continuation.begin(), continuation.end());
  const std::size_t inputs = seq.size() - 1;
  if (inputs > eval_lm.config().max_ctx) {
    throw CapacityError(fmt::format("evaluator context {} shorter than {} tokens", eval_lm.config().max_ctx,
                                    inputs));
  }
  const auto out = eval_lm.forward_full(std::span<const TokenId>(seq).first(inputs));
  const std::size_t first = 1 + prompt.size();
  double nll = 0.0;
  for (std::size_t pos = first; pos < seq.size(); ++pos) {
    const auto row = out.at(pos - 1);
    double mx = -std::numeric_limits<double>::infinity();
    for (T v : row) mx = std::max(mx, static_cast<double>(v));
    double s = 0.0;
    for (T v : row) s += std::exp(static_cast<double>(v) - mx);
    nll -= static_cast<double>(row[static_cast<std::size_t>(seq[pos])]) - mx - std::log(s);
  }
  return std::exp(nll / static_cast<double>(continuation.size()));
}

template double conditional_perplexity<float>(const Transformer<float>&, std::span<const TokenId>,
                                              std::span<const TokenId>);
template double conditional_perplexity<double>(const Transformer<double>&, std::span<const TokenId>,
                                               std::span<const TokenId>);

Oracle::Oracle(Transformer<double> rm, std::uint64_t checkpoint_hash, bool prepend_bos)
    : rm_(std::move(rm)), hash_(checkpoint_hash), prepend_bos_(prepend_bos) {
  if (rm_.config().head != HeadKind::Reward) throw ConfigError("oracle needs a reward head");
}

Oracle Oracle::from_checkpoint(const Checkpoint& ckpt, bool prepend_bos) {
  return Oracle(make_transformer<double>(ckpt), ckpt.content_hash, prepend_bos);
}

double Oracle::score(std::span<const TokenId> text) const {
  TokenSequence body = text_tokens(text);
  const std::size_t room = rm_.config().max_ctx - (prepend_bos_ ? 1 : 0);
  if (body.size() > room) body.erase(body.begin(), body.end() - static_cast<std::ptrdiff_t>(room));
  TokenSequence seq;
  if (prepend_bos_) seq.push_back(Vocabulary::kBos);
  seq.insert(seq.end(), body.begin(), body.end());
  if (seq.empty()) throw ContractError("oracle score of an empty input");
  return rm_.forward_full(seq).at(seq.size() - 1)[0];
}

void check_not_self_grading(std::uint64_t oracle_hash, std::uint64_t steering_hash) {
  if (oracle_hash == steering_hash) {
    throw ConfigError("oracle checkpoint is the steering reward model; refusing to self-grade");
  }
}

Evaluation evaluate_generations(std::span<const GenerationRecord> records, const PromptSet& prompts,
                                const Oracle& oracle, const Transformer<double>* eval_lm,
                                const EvalOptions& options) {
  const double nan = std::numeric_limits<double>::quiet_NaN();
  const std::size_t n = records.size();
  std::vector<TokenSequence> prompt_tokens;
  prompt_tokens.reserve(prompts.size());
  for (const auto& p : prompts) prompt_tokens.push_back(encode(p.text));
  for (const auto& r : records) {
    if (r.prompt_idx >= prompts.size()) {
      throw ValidationError(fmt::format("record prompt_idx {} but only {} prompts", r.prompt_idx,
                                        prompts.size()));
    }
  }

  Evaluation ev;
  ev.record_scores.assign(n, nan);
  ev.record_perplexity.assign(n, nan);
  std::vector<char> empty(n, 0);
  std::atomic<std::size_t> next{0};
  std::vector<std::string> errors(n);
  const auto work = [&] {
    for (std::size_t i = next++; i < n; i = next++) {
      const auto& r = records[i];
      if (r.error) continue;
      try {
        const auto body = text_tokens(r.token_ids);
        if (body.empty()) {
          empty[i] = 1;
          ev.record_scores[i] = oracle.score(prompt_tokens[r.prompt_idx]);
        } else {
          ev.record_scores[i] = oracle.score(body);
        }
        if (eval_lm != nullptr && !r.token_ids.empty()) {
          ev.record_perplexity[i] = conditional_perplexity(*eval_lm, prompt_tokens[r.prompt_idx], r.token_ids);
        }
      } catch (const Error& e) {
        errors[i] = e.what();
      }
    }
  };
  const std::size_t workers = std::max<std::size_t>(1, std::min(options.workers, n));
  if (workers == 1) {
    work();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(work);
    for (auto& t : pool) t.join();
  }
  for (std::size_t i = 0; i < n; ++i) {
    if (!errors[i].empty()) throw EvaluationError(fmt::format("record {}: {}", i, errors[i]));
  }

  std::map<std::size_t, std::vector<std::size_t>> by_prompt;
  for (std::size_t i = 0; i < n; ++i) {
    if (records[i].error) {
      ++ev.report.failed_records;
      continue;
    }
    by_prompt[records[i].prompt_idx].push_back(i);
  }
  if (by_prompt.empty()) throw EvaluationError("no successful generations to evaluate");

  double ppl_total = 0.0;
  std::size_t ppl_count = 0;
  for (const auto& [pidx, idxs] : by_prompt) {
    GenerationGroup g;
    g.prompt = prompts[pidx].text;
    PromptRow row;
    row.prompt_idx = pidx;
    row.n = idxs.size();
    double row_ppl = 0.0;
    std::size_t row_ppl_n = 0;
    for (std::size_t i : idxs) {
      g.continuations.push_back({text_tokens(records[i].token_ids), ev.record_scores[i]});
      ev.report.empty_generations += empty[i];
      if (!std::isnan(ev.record_perplexity[i])) {
        row_ppl += ev.record_perplexity[i];
        ++row_ppl_n;
      }
    }
    const GenerationGroup* one = &g;
    const std::span<const GenerationGroup> single(one, 1);
    row.max_score = avg_max_score(single);
    row.mean_score = mean_score(single);
    row.exceeds = exceed_rate(single, options.threshold) > 0.0;
    row.dist2 = corpus_distinct_n(single, 2, options.norm);
    row.dist3 = corpus_distinct_n(single, 3, options.norm);
    if (row_ppl_n > 0) row.perplexity = row_ppl / static_cast<double>(row_ppl_n);
    ppl_total += row_ppl;
    ppl_count += row_ppl_n;
    ev.rows.push_back(row);
    ev.groups.push_back(std::move(g));
    ev.group_prompt_idx.push_back(pidx);
  }

  auto& rep = ev.report;
  rep.avg_max_score = avg_max_score(ev.groups);
  rep.exceed_rate = exceed_rate(ev.groups, options.threshold);
  rep.mean_score = mean_score(ev.groups);
  rep.dist2 = corpus_distinct_n(ev.groups, 2, options.norm);
  rep.dist3 = corpus_distinct_n(ev.groups, 3, options.norm);
  if (ppl_count > 0) rep.perplexity = ppl_total / static_cast<double>(ppl_count);
  rep.n_prompts = ev.groups.size();
  rep.n_continuations = n - rep.failed_records;
  return ev;
}

nlohmann::ordered_json to_json(const MetricReport& r) {
  nlohmann::ordered_json j;
  j["avg_max_score"] = r.avg_max_score;
  j["exceed_rate"] = r.exceed_rate;
  j["mean_score"] = r.mean_score;
  j["dist2"] = r.dist2;
  j["dist3"] = r.dist3;
  j["perplexity"] = r.perplexity ? nlohmann::ordered_json(*r.perplexity) : nlohmann::ordered_json(nullptr);
  j["n_prompts"] = r.n_prompts;
  j["n_continuations"] = r.n_continuations;
  j["empty_generations"] = r.empty_generations;
  j["failed_records"] = r.failed_records;
  return j;
}

void write_metrics_json(const std::filesystem::path& path, const MetricReport& report,
                        const nlohmann::ordered_json& config_echo) {
  auto j = to_json(report);
  j["config"] = config_echo;
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ValidationError(fmt::format("cannot write {}", path.string()));
  out << j.dump(2) << '\n';
}

void write_per_prompt_csv(const std::filesystem::path& path, std::span<const PromptRow> rows) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ValidationError(fmt::format("cannot write {}", path.string()));
  out << "prompt_idx,n,max_score,mean_score,exceeds,dist2,dist3,perplexity\n";
  for (const auto& r : rows) {
    out << fmt::format("{},{},{},{},{},{},{},", r.prompt_idx, r.n, r.max_score, r.mean_score,
                       r.exceeds ? 1 : 0, r.dist2, r.dist3);
    if (r.perplexity) out << fmt::format("{}", *r.perplexity);
    out << '\n';
  }
}

}  // namespace rad
