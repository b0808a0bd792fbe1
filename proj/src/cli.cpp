#include "rad/cli.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>
#include <fmt/format.h>
#include <fmt/ostream.h>

#include "rad/corpus.hpp"
#include "rad/cost_model.hpp"
#include "rad/decoder.hpp"
#include "rad/errors.hpp"
#include "rad/metrics.hpp"
#include "rad/model.hpp"
#include "rad/reward_training.hpp"
#include "rad/training.hpp"

namespace fs = std::filesystem;

namespace rad {

namespace {

struct UsageError : Error {
  using Error::Error;
};

struct Common {
  std::uint64_t seed = 0;
  std::string out_dir;
  std::string config;
};

void add_common(CLI::App* sub, Common& c) {
  sub->add_option("--seed", c.seed, "master seed");
  sub->add_option("--out-dir", c.out_dir, "output directory");
  sub->add_option("--config", c.config, "key=value file; command-line flags take precedence");
}

fs::path prepare_out_dir(const Common& c) {
  fs::path dir = c.out_dir.empty() ? fs::path(".") : fs::path(c.out_dir);
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw ValidationError(fmt::format("cannot create {}: {}", dir.string(), ec.message()));
  return dir;
}

void write_text(const fs::path& path, std::string_view text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw ValidationError(fmt::format("cannot write {}", path.string()));
  out << text;
}

// Resolved values of every option, readable back through --config.
void write_resolved_config(const CLI::App* sub, const fs::path& dir) {
  std::string text = fmt::format("# rad {}\n", sub->get_name());
  for (const CLI::Option* opt : sub->get_options()) {
    const auto name = opt->get_single_name();
    if (name.empty() || name == "help" || name == "config") continue;
    std::string value;
    if (opt->get_type_size_max() == 0) {
      value = opt->count() > 0 ? (opt->as<bool>() ? "true" : "false") : opt->get_default_str();
    } else {
      value = opt->count() > 0 ? opt->results().back() : opt->get_default_str();
    }
    text += fmt::format("{}={}\n", name, value);
  }
  write_text(dir / fmt::format("{}.config", sub->get_name()), text);
}

std::vector<std::string> config_tokens(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw UsageError(fmt::format("cannot open config file {}", path.string()));
  std::vector<std::string> out;
  std::string line;
  std::size_t lineno = 0;
  const auto trim = [](std::string s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return std::string();
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
  };
  while (std::getline(in, line)) {
    ++lineno;
    line = trim(line);
    if (line.empty() || line[0] == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw UsageError(fmt::format("{}:{}: expected key=value", path.string(), lineno));
    }
    const auto key = trim(line.substr(0, eq));
    const auto value = trim(line.substr(eq + 1));
    if (key.empty()) throw UsageError(fmt::format("{}:{}: empty key", path.string(), lineno));
    if (key == "config") continue;
    out.push_back(fmt::format("--{}={}", key, value));
  }
  return out;
}

// Config-file values are spliced in right after the subcommand so that any
// flag given on the command line, parsed later, wins.
std::vector<std::string> expand_config(std::vector<std::string> args) {
  std::optional<std::string> path;
  for (std::size_t i = 0; i < args.size(); ++i) {
    if (args[i] == "--config" && i + 1 < args.size()) path = args[i + 1];
    if (args[i].rfind("--config=", 0) == 0) path = args[i].substr(9);
  }
  if (!path || args.empty()) return args;
  auto tokens = config_tokens(*path);
  args.insert(args.begin() + 1, tokens.begin(), tokens.end());
  return args;
}

std::vector<double> parse_double_list(const std::string& s, std::string_view what) {
  std::vector<double> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      std::size_t used = 0;
      out.push_back(std::stod(item, &used));
      if (used != item.size()) throw std::invalid_argument(item);
    } catch (const std::exception&) {
      throw UsageError(fmt::format("bad {} list entry '{}'", what, item));
    }
  }
  if (out.empty()) throw UsageError(fmt::format("empty {} list", what));
  return out;
}

std::vector<std::size_t> parse_size_list(const std::string& s, std::string_view what) {
  std::vector<std::size_t> out;
  for (double v : parse_double_list(s, what)) {
    if (v < 1 || v != static_cast<double>(static_cast<std::size_t>(v))) {
      throw UsageError(fmt::format("bad {} list entry {}", what, v));
    }
    out.push_back(static_cast<std::size_t>(v));
  }
  return out;
}

CLI::Option* add_bool_flag(CLI::App* sub, const std::string& name, bool& v, const std::string& desc) {
  return sub->add_flag(name, v, desc)->default_str(v ? "true" : "false");
}

std::string hex(std::uint64_t v) { return fmt::format("{:016x}", v); }

// ---------------------------------------------------------------------------
// shared flag groups

struct ModelFlags {
  std::size_t n_layer, d_model, n_head, d_ff, max_ctx;
  explicit ModelFlags(const ModelConfig& c)
      : n_layer(c.n_layer), d_model(c.d_model), n_head(c.n_head), d_ff(c.d_ff), max_ctx(c.max_ctx) {}
  ModelConfig to_config(HeadKind head) const {
    ModelConfig c;
    c.n_layer = n_layer;
    c.d_model = d_model;
    c.n_head = n_head;
    c.d_ff = d_ff;
    c.max_ctx = max_ctx;
    c.head = head;
    c.validate();
    return c;
  }
};

void add_model_flags(CLI::App* sub, ModelFlags& m) {
  sub->add_option("--n-layer", m.n_layer, "transformer blocks");
  sub->add_option("--d-model", m.d_model, "hidden width");
  sub->add_option("--n-head", m.n_head, "attention heads");
  sub->add_option("--d-ff", m.d_ff, "feed-forward width");
  sub->add_option("--max-ctx", m.max_ctx, "context length");
}

struct TrainFlags {
  TrainConfig cfg;
  std::string optimizer;
  std::string payload = "f32";
};

void add_train_flags(CLI::App* sub, TrainFlags& t) {
  sub->add_option("--epochs", t.cfg.epochs, "passes over the data");
  sub->add_option("--lr", t.cfg.learning_rate, "learning rate");
  sub->add_option("--batch-size", t.cfg.batch_size, "examples per update");
  sub->add_option("--weight-decay", t.cfg.weight_decay, "decoupled weight decay");
  sub->add_option("--optimizer", t.optimizer, "sgd or adamw")->check(CLI::IsMember({"sgd", "adamw"}));
  sub->add_option("--max-len", t.cfg.max_len, "text tokens kept per example");
  sub->add_option("--grad-clip", t.cfg.grad_clip, "global gradient-norm clip, 0 disables");
  sub->add_option("--payload", t.payload, "checkpoint precision")->check(CLI::IsMember({"f32", "f64"}));
}

TrainConfig finish_train(TrainFlags& t, std::uint64_t seed) {
  TrainConfig c = t.cfg;
  c.seed = seed;
  c.optimizer = t.optimizer == "adamw" ? OptimizerKind::AdamW : OptimizerKind::Sgd;
  return c;
}

PayloadType payload_of(const TrainFlags& t) { return t.payload == "f64" ? PayloadType::F64 : PayloadType::F32; }

void write_train_log(const fs::path& path, const TrainResult& r) {
  std::string text;
  const auto line = [&](std::size_t epoch, std::size_t step, double loss) {
    nlohmann::ordered_json j;
    j["epoch"] = epoch;
    j["step"] = step;
    j["loss"] = loss;
    text += j.dump() + "\n";
  };
  // Epochs and steps count from 1; step 0 is the loss before any update.
  line(0, 0, r.initial_loss);
  for (const auto& s : r.steps) line(s.epoch + 1, s.step + 1, s.loss);
  write_text(path, text);
}

struct CorpusFlags {
  std::string corpus;
  std::size_t synthetic = 0;
  std::uint64_t synth_seed = 0;
  bool synth_seed_set = false;
};

void add_corpus_flags(CLI::App* sub, CorpusFlags& c) {
  sub->add_option("--corpus", c.corpus, "JSONL corpus")->check(CLI::ExistingFile);
  sub->add_option("--synthetic", c.synthetic, "generate this many synthetic lexicon examples instead");
  sub->add_option("--synth-seed", c.synth_seed, "seed of the synthetic corpus");
}

std::vector<RewardExample> synthetic_examples(const CorpusFlags& c, std::uint64_t seed) {
  SynthConfig sc;
  sc.seed = c.synth_seed != 0 ? c.synth_seed : derive_seed(seed, 0xc0);
  sc.n_examples = c.synthetic;
  sc.lexicon_pos = default_positive_lexicon();
  sc.lexicon_neg = default_negative_lexicon();
  return synth_attribute_corpus(sc);
}

void require_corpus(const CorpusFlags& c) {
  if (c.corpus.empty() == (c.synthetic == 0)) throw UsageError("give exactly one of --corpus or --synthetic");
}

struct DecodeFlags {
  std::size_t k = 20;
  double beta = 0.0;
  std::size_t max_new = 20;
  std::string baseline = "rad";
  double p = 0.9;
  double temperature = 1.0;
  bool score_generation_only = false;
  bool rm_bos = true;
  bool no_cache = false;
  std::string precision = "f32";
};

void add_decode_flags(CLI::App* sub, DecodeFlags& d) {
  sub->add_option("--k", d.k, "candidate tokens per step");
  sub->add_option("--beta", d.beta, "steering strength");
  sub->add_option("--max-new", d.max_new, "new-token budget");
  sub->add_option("--baseline", d.baseline, "rad, topk, nucleus or greedy")
      ->check(CLI::IsMember({"rad", "topk", "nucleus", "greedy"}));
  sub->add_option("--p", d.p, "nucleus mass");
  sub->add_option("--temperature", d.temperature, "baseline modes only");
  add_bool_flag(sub, "--score-generation-only", d.score_generation_only, "reward model sees BOS + generation only");
  add_bool_flag(sub, "--rm-bos,!--no-rm-bos", d.rm_bos, "prepend BOS to reward inputs");
  add_bool_flag(sub, "--no-cache", d.no_cache, "recompute every candidate from scratch");
  sub->add_option("--precision", d.precision, "inference precision")->check(CLI::IsMember({"f32", "f64"}));
}

DecodeConfig to_decode_config(const DecodeFlags& d, std::uint64_t seed) {
  DecodeConfig c;
  c.k = d.k;
  c.beta = d.beta;
  c.max_new_tokens = d.max_new;
  c.seed = seed;
  c.mode = *parse_decode_mode(d.baseline);
  c.top_p = d.p;
  c.temperature = d.temperature;
  c.score_generation_only = d.score_generation_only;
  c.rm_prepend_bos = d.rm_bos;
  c.use_cache = !d.no_cache;
  return c;
}

Checkpoint load_required(const std::string& path, HeadKind head, std::string_view flag) {
  if (path.empty()) throw UsageError(fmt::format("{} is required", flag));
  return load_checkpoint(path, head);
}

// ---------------------------------------------------------------------------
// commands

struct TrainLmCmd {
  Common common;
  CorpusFlags corpus;
  ModelFlags model{ModelConfig::default_lm()};
  TrainFlags train;
  TrainLmCmd() {
    train.cfg.learning_rate = 3e-3;
    train.cfg.epochs = 2;
    train.optimizer = "adamw";
  }

  void run(const CLI::App* sub, std::ostream& out) {
    require_corpus(corpus);
    std::vector<std::string> texts;
    if (!corpus.corpus.empty()) {
      texts = load_texts_jsonl(corpus.corpus);
    } else {
      for (auto& ex : synthetic_examples(corpus, common.seed)) texts.push_back(std::move(ex.text));
    }
    if (texts.empty()) throw ValidationError("corpus is empty");
    const auto cfg = model.to_config(HeadKind::Lm);
    const auto tc = finish_train(train, common.seed);
    const auto dir = prepare_out_dir(common);
    const auto init = init_weights<double>(cfg, derive_seed(common.seed, 1));
    const auto res = train_lm(cfg, init, texts, tc);
    const auto ckpt_path = dir / "lm.ckpt";
    save_checkpoint(ckpt_path, cfg, res.weights, payload_of(train));
    write_train_log(dir / "train_log.jsonl", res);
    const auto ck = load_checkpoint(ckpt_path, HeadKind::Lm);
    const double ppl = lm_perplexity(make_transformer<double>(ck), texts, tc.max_len);
    nlohmann::ordered_json j;
    j["checkpoint"] = ckpt_path.filename().string();
    j["content_hash"] = hex(ck.content_hash);
    j["initial_loss"] = res.initial_loss;
    j["final_epoch_loss"] = res.epoch_loss.back();
    j["train_perplexity"] = ppl;
    write_text(dir / "train_summary.json", j.dump(2) + "\n");
    write_resolved_config(sub, dir);
    fmt::print(out, "lm checkpoint {} hash {} train perplexity {:.4f}\n", ckpt_path.string(),
               hex(ck.content_hash), ppl);
  }
};

struct TrainRmCmd {
  Common common;
  CorpusFlags corpus;
  ModelFlags model{ModelConfig::default_rm()};
  TrainFlags train;
  std::string test_corpus;
  std::size_t synthetic_test = 0;
  bool no_bos = false;
  TrainRmCmd() {
    train.cfg.learning_rate = 0.1;
    train.cfg.epochs = 5;
    train.optimizer = "sgd";
  }

  void run(const CLI::App* sub, std::ostream& out) {
    require_corpus(corpus);
    const auto data = !corpus.corpus.empty() ? load_reward_jsonl(corpus.corpus)
                                             : synthetic_examples(corpus, common.seed);
    if (data.empty()) throw ValidationError("corpus is empty");
    const auto cfg = model.to_config(HeadKind::Reward);
    auto tc = finish_train(train, common.seed);
    tc.prepend_bos = !no_bos;
    const auto dir = prepare_out_dir(common);
    const auto init = init_weights<double>(cfg, derive_seed(common.seed, 1));
    const auto res = train_rm(cfg, init, data, tc);
    const auto ckpt_path = dir / "rm.ckpt";
    save_checkpoint(ckpt_path, cfg, res.weights, payload_of(train));
    write_train_log(dir / "train_log.jsonl", res);
    const auto ck = load_checkpoint(ckpt_path, HeadKind::Reward);
    nlohmann::ordered_json j;
    j["checkpoint"] = ckpt_path.filename().string();
    j["content_hash"] = hex(ck.content_hash);
    j["initial_loss"] = res.initial_loss;
    j["final_epoch_loss"] = res.epoch_loss.back();

    std::vector<RewardExample> test;
    if (!test_corpus.empty()) {
      test = load_reward_jsonl(test_corpus);
    } else if (synthetic_test > 0) {
      CorpusFlags tf;
      tf.synthetic = synthetic_test;
      tf.synth_seed = derive_seed(common.seed, 0x7e57);
      test = synthetic_examples(tf, common.seed);
    }
    if (!test.empty()) {
      const auto ev = eval_rm(make_transformer<double>(ck), test, tc.max_len, tc.prepend_bos);
      j["test_full_seq_mse"] = ev.full_seq_mse;
      std::string csv = "t,mse,count\n";
      for (std::size_t t = 0; t < ev.prefix_mse.size(); ++t) {
        if (ev.prefix_count[t] == 0) continue;
        csv += fmt::format("{},{},{}\n", t + 1, ev.prefix_mse[t], ev.prefix_count[t]);
      }
      write_text(dir / "prefix_mse.csv", csv);
      fmt::print(out, "test full-sequence mse {:.5f}\n", ev.full_seq_mse);
    }
    write_text(dir / "train_summary.json", j.dump(2) + "\n");
    write_resolved_config(sub, dir);
    fmt::print(out, "rm checkpoint {} hash {}\n", ckpt_path.string(), hex(ck.content_hash));
  }
};

struct SynthCmd {
  Common common;
  std::string what = "corpus";
  std::size_t n = 2000;
  std::size_t min_words = 0, max_words = 0;

  void run(const CLI::App* sub, std::ostream& out) {
    const auto dir = prepare_out_dir(common);
    if (what == "corpus") {
      SynthConfig sc;
      sc.seed = common.seed;
      sc.n_examples = n;
      sc.lexicon_pos = default_positive_lexicon();
      sc.lexicon_neg = default_negative_lexicon();
      if (min_words) sc.min_words = min_words;
      if (max_words) sc.max_words = max_words;
      save_reward_jsonl(dir / "corpus.jsonl", synth_attribute_corpus(sc));
      fmt::print(out, "wrote {}\n", (dir / "corpus.jsonl").string());
    } else {
      const auto prompts = synth_prompts(common.seed, n, default_positive_lexicon(), default_negative_lexicon(),
                                         min_words ? min_words : 1, max_words ? max_words : 3);
      save_prompts_jsonl(dir / "prompts.jsonl", prompts);
      fmt::print(out, "wrote {}\n", (dir / "prompts.jsonl").string());
    }
    write_resolved_config(sub, dir);
  }
};

template <class T>
std::vector<GenerationRecord> generate_records(const Checkpoint& lm_ck, const std::optional<Checkpoint>& rm_ck,
                                               const PromptSet& prompts, std::size_t n,
                                               const DecodeConfig& cfg) {
  const auto lm = make_transformer<T>(lm_ck);
  std::optional<Transformer<T>> rm;
  if (rm_ck) rm.emplace(make_transformer<T>(*rm_ck));
  return batch_generate(lm, rm ? &*rm : nullptr, prompts, n, cfg, worker_count_from_env());
}

struct GenerateCmd {
  Common common;
  DecodeFlags decode;
  std::string lm, rm, prompts;
  std::size_t n_continuations = 25;
  bool traces = false;

  void run(const CLI::App* sub, std::ostream& out, std::ostream& err) {
    const auto cfg = to_decode_config(decode, common.seed);
    const auto lm_ck = load_required(lm, HeadKind::Lm, "--lm");
    std::optional<Checkpoint> rm_ck;
    if (cfg.mode == DecodeMode::Rad) rm_ck = load_required(rm, HeadKind::Reward, "--rm");
    if (prompts.empty()) throw UsageError("--prompts is required");
    const auto ps = load_prompts_jsonl(prompts);
    auto c = cfg;
    c.record_trace = traces;
    auto records = decode.precision == "f64" ? generate_records<double>(lm_ck, rm_ck, ps, n_continuations, c)
                                             : generate_records<float>(lm_ck, rm_ck, ps, n_continuations, c);
    const auto dir = prepare_out_dir(common);
    if (traces) {
      fs::create_directories(dir / "traces");
      for (auto& r : records) {
        if (r.error) continue;
        const auto rel = fmt::format("traces/p{}_c{}.csv", r.prompt_idx, r.cont_idx);
        write_trace_csv(dir / rel, r.trace);
        r.trace_path = rel;
      }
    }
    write_generations_jsonl(dir / "generations.jsonl", records);
    write_resolved_config(sub, dir);
    const auto failed = std::count_if(records.begin(), records.end(), [](const auto& r) { return r.error.has_value(); });
    if (failed) fmt::print(err, "{} of {} records failed\n", failed, records.size());
    fmt::print(out, "wrote {} records to {}\n", records.size(), (dir / "generations.jsonl").string());
  }
};

struct EvalFlags {
  std::string oracle, eval_lm;
  double threshold = 0.5;
  std::string dist_norm = "ngram";
};

void add_eval_flags(CLI::App* sub, EvalFlags& e) {
  sub->add_option("--oracle", e.oracle, "held-out oracle reward model");
  sub->add_option("--eval-lm", e.eval_lm, "evaluator language model for perplexity");
  sub->add_option("--threshold", e.threshold, "exceed-rate threshold");
  sub->add_option("--dist-norm", e.dist_norm, "distinct-n normaliser: ngram or length")
      ->check(CLI::IsMember({"ngram", "length"}));
}

EvalOptions to_eval_options(const EvalFlags& e) {
  EvalOptions o;
  o.threshold = e.threshold;
  o.norm = e.dist_norm == "length" ? DistinctNorm::TokenLength : DistinctNorm::NgramCount;
  o.workers = worker_count_from_env();
  return o;
}

nlohmann::ordered_json eval_echo(const EvalFlags& e, const Checkpoint& oracle,
                                 const std::optional<Checkpoint>& eval_lm) {
  nlohmann::ordered_json j;
  j["oracle_hash"] = hex(oracle.content_hash);
  j["eval_lm_hash"] = eval_lm ? nlohmann::ordered_json(hex(eval_lm->content_hash)) : nlohmann::ordered_json(nullptr);
  j["threshold"] = e.threshold;
  j["dist_norm"] = e.dist_norm;
  return j;
}

struct EvaluateCmd {
  Common common;
  EvalFlags eval;
  std::string generations, prompts, rm;

  void run(const CLI::App* sub, std::ostream& out) {
    if (generations.empty()) throw UsageError("--generations is required");
    if (prompts.empty()) throw UsageError("--prompts is required");
    const auto oracle_ck = load_required(eval.oracle, HeadKind::Reward, "--oracle");
    if (!rm.empty()) check_not_self_grading(oracle_ck.content_hash, load_checkpoint(rm).content_hash);
    std::optional<Checkpoint> lm_ck;
    if (!eval.eval_lm.empty()) lm_ck = load_checkpoint(eval.eval_lm, HeadKind::Lm);
    const auto records = read_generations_jsonl(generations);
    const auto ps = load_prompts_jsonl(prompts);
    const auto oracle = Oracle::from_checkpoint(oracle_ck);
    std::optional<Transformer<double>> lm;
    if (lm_ck) lm.emplace(make_transformer<double>(*lm_ck));
    const auto ev = evaluate_generations(records, ps, oracle, lm ? &*lm : nullptr, to_eval_options(eval));
    auto echo = eval_echo(eval, oracle_ck, lm_ck);
    echo["n_records"] = records.size();
    const auto dir = prepare_out_dir(common);
    write_metrics_json(dir / "metrics.json", ev.report, echo);
    write_per_prompt_csv(dir / "per_prompt.csv", ev.rows);
    write_resolved_config(sub, dir);
    fmt::print(out, "{}\n", to_json(ev.report).dump());
  }
};

struct SweepCmd {
  Common common;
  DecodeFlags decode;
  EvalFlags eval;
  std::string lm, rm, prompts;
  std::string betas = "0,10,20,50,100";
  std::string ks = "20,50";
  std::size_t n_continuations = 25;
  bool save_generations = false;

  void run(const CLI::App* sub, std::ostream& out) {
    const auto beta_list = parse_double_list(betas, "beta");
    const auto k_list = parse_size_list(ks, "k");
    const auto lm_ck = load_required(lm, HeadKind::Lm, "--lm");
    const auto rm_ck = load_required(rm, HeadKind::Reward, "--rm");
    const auto oracle_ck = load_required(eval.oracle, HeadKind::Reward, "--oracle");
    check_not_self_grading(oracle_ck.content_hash, rm_ck.content_hash);
    std::optional<Checkpoint> elm_ck;
    if (!eval.eval_lm.empty()) elm_ck = load_checkpoint(eval.eval_lm, HeadKind::Lm);
    if (prompts.empty()) throw UsageError("--prompts is required");
    const auto ps = load_prompts_jsonl(prompts);
    const auto oracle = Oracle::from_checkpoint(oracle_ck);
    std::optional<Transformer<double>> elm;
    if (elm_ck) elm.emplace(make_transformer<double>(*elm_ck));
    const auto dir = prepare_out_dir(common);

    std::string csv = "k,beta,avg_max_score,mean_score,exceed_rate,dist2,dist3,perplexity,failed\n";
    std::string scores = "k,beta,prompt_idx,cont_idx,score,perplexity\n";
    for (std::size_t k : k_list) {
      for (double beta : beta_list) {
        auto flags = decode;
        flags.k = k;
        flags.beta = beta;
        flags.baseline = "rad";
        auto cfg = to_decode_config(flags, common.seed);
        cfg.record_trace = false;
        const auto records = decode.precision == "f64"
                                 ? generate_records<double>(lm_ck, rm_ck, ps, n_continuations, cfg)
                                 : generate_records<float>(lm_ck, rm_ck, ps, n_continuations, cfg);
        if (save_generations) {
          write_generations_jsonl(dir / fmt::format("generations_k{}_beta{}.jsonl", k, beta), records);
        }
        const auto ev = evaluate_generations(records, ps, oracle, elm ? &*elm : nullptr, to_eval_options(eval));
        const auto& r = ev.report;
        csv += fmt::format("{},{},{},{},{},{},{},{},{}\n", k, beta, r.avg_max_score, r.mean_score, r.exceed_rate,
                           r.dist2, r.dist3, r.perplexity ? fmt::format("{}", *r.perplexity) : std::string(),
                           r.failed_records);
        for (std::size_t i = 0; i < records.size(); ++i) {
          const double ppl = ev.record_perplexity[i];
          scores += fmt::format("{},{},{},{},{},{}\n", k, beta, records[i].prompt_idx, records[i].cont_idx,
                                ev.record_scores[i], std::isnan(ppl) ? std::string() : fmt::format("{}", ppl));
        }
        fmt::print(out, "k={} beta={} mean_score={:.4f} avg_max={:.4f} ppl={}\n", k, beta, r.mean_score,
                   r.avg_max_score, r.perplexity ? fmt::format("{:.4f}", *r.perplexity) : std::string("-"));
      }
    }
    write_text(dir / "sweep.csv", csv);
    write_text(dir / "sweep_scores.csv", scores);
    write_resolved_config(sub, dir);
  }
};

struct TraceCmd {
  Common common;
  DecodeFlags decode;
  std::string lm, rm, prompt;

  template <class T>
  DecodeResult run_decode(const Checkpoint& lm_ck, const std::optional<Checkpoint>& rm_ck,
                          const DecodeConfig& cfg) const {
    const auto l = make_transformer<T>(lm_ck);
    std::optional<Transformer<T>> r;
    if (rm_ck) r.emplace(make_transformer<T>(*rm_ck));
    return rad::decode(l, r ? &*r : nullptr, encode(prompt), cfg);
  }

  void run(const CLI::App* sub, std::ostream& out) {
    const auto cfg = to_decode_config(decode, common.seed);
    const auto lm_ck = load_required(lm, HeadKind::Lm, "--lm");
    std::optional<Checkpoint> rm_ck;
    if (cfg.mode == DecodeMode::Rad) rm_ck = load_required(rm, HeadKind::Reward, "--rm");
    const auto res = decode.precision == "f64" ? run_decode<double>(lm_ck, rm_ck, cfg)
                                               : run_decode<float>(lm_ck, rm_ck, cfg);
    const auto dir = prepare_out_dir(common);
    write_trace_csv(dir / "trace.csv", res.trace);
    write_resolved_config(sub, dir);
    fmt::print(out, "{}{}\n", prompt, rad::decode(res.generated));
  }
};

struct CostCmd {
  Common common;
  std::string preset = "all";
  std::string format = "text";
  std::uint64_t k = 20;
  std::string method, lm_spec, aux_spec;
  bool exact = false;

  static cost::CostSpec parse_spec(const std::string& s, std::string_view flag) {
    if (auto p = cost::presets::by_name(s)) return *p;
    const auto v = parse_double_list(s, flag);
    const bool whole = std::all_of(v.begin(), v.end(), [](double x) { return x >= 0 && x == std::floor(x); });
    if ((v.size() != 2 && v.size() != 3) || !whole) {
      throw UsageError(fmt::format("{} takes a preset name or n_layer,d_model[,n_ctx]", flag));
    }
    const auto u = [](double x) { return static_cast<std::uint64_t>(x); };
    return {s, u(v[0]), u(v[1]), v.size() == 3 ? u(v[2]) : 0};
  }

  void run(const CLI::App* sub, std::ostream& out) {
    std::string text;
    if (!method.empty()) {
      const auto m = cost::parse_method(method);
      if (!m) throw UsageError(fmt::format("unknown method '{}'", method));
      if (lm_spec.empty()) throw UsageError("--lm-spec is required with --method");
      const auto lm = parse_spec(lm_spec, "--lm-spec");
      const auto aux = aux_spec.empty() ? cost::default_aux(*m) : std::optional(parse_spec(aux_spec, "--aux-spec"));
      const auto c = cost::method_total(*m, lm, aux, k, !exact);
      if (format == "csv") {
        text = fmt::format("method,c_lm,c_method,tc,ratio_2dp\n{},{},{},{},{}\n", cost::to_string(*m), c.c_lm,
                           c.c_method, c.total, cost::format_ratio(c.total, c.c_lm, 2));
      } else {
        text = fmt::format("{} on {}: C_LM {} ({}), C_method {} ({}), TC {} ({}), ratio {}x\n", cost::to_string(*m),
                           lm.name, c.c_lm, cost::format_giga(c.c_lm), c.c_method,
                           cost::format_giga(c.c_method), c.total, cost::format_giga(c.total),
                           cost::format_ratio(c.total, c.c_lm, 2));
      }
    } else {
      const bool models = preset == "all" || preset == "models";
      const bool table2 = preset == "all" || preset == "table2";
      if (models) text += format == "csv" ? cost::model_table_csv(k) : cost::model_table_text(k);
      if (models && table2) text += "\n";
      if (table2) text += format == "csv" ? cost::overhead_table_csv(k) : cost::overhead_table_text(k);
    }
    out << text;
    if (!common.out_dir.empty()) {
      const auto dir = prepare_out_dir(common);
      write_text(dir / "cost_models.csv", cost::model_table_csv(k));
      write_text(dir / "cost_table2.csv", cost::overhead_table_csv(k));
      write_resolved_config(sub, dir);
    }
  }
};

int exit_code_for(const std::exception& e) {
  if (dynamic_cast<const UsageError*>(&e) || dynamic_cast<const ConfigError*>(&e) ||
      dynamic_cast<const ContractError*>(&e)) {
    return kExitUsage;
  }
  if (dynamic_cast<const TrainingError*>(&e) || dynamic_cast<const EvaluationError*>(&e) ||
      dynamic_cast<const DimensionError*>(&e)) {
    return kExitNumeric;
  }
  return kExitData;
}

}  // namespace

int run_cli(const std::vector<std::string>& raw_args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Reward-augmented decoding toolkit", "rad"};
  app.require_subcommand(1);
  app.option_defaults()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast)->always_capture_default();

  TrainLmCmd train_lm_cmd;
  TrainRmCmd train_rm_cmd;
  SynthCmd synth_cmd;
  GenerateCmd generate_cmd;
  EvaluateCmd evaluate_cmd;
  SweepCmd sweep_cmd;
  TraceCmd trace_cmd;
  CostCmd cost_cmd;
  std::function<void()> action;

  auto* s = app.add_subcommand("train-lm", "train a byte-level language model");
  add_common(s, train_lm_cmd.common);
  add_corpus_flags(s, train_lm_cmd.corpus);
  add_model_flags(s, train_lm_cmd.model);
  add_train_flags(s, train_lm_cmd.train);
  s->callback([&, s] { action = [&, s] { train_lm_cmd.run(s, out); }; });

  s = app.add_subcommand("train-rm", "train a unidirectional reward model");
  add_common(s, train_rm_cmd.common);
  add_corpus_flags(s, train_rm_cmd.corpus);
  add_model_flags(s, train_rm_cmd.model);
  add_train_flags(s, train_rm_cmd.train);
  s->add_option("--test", train_rm_cmd.test_corpus, "held-out reward JSONL")->check(CLI::ExistingFile);
  s->add_option("--synthetic-test", train_rm_cmd.synthetic_test, "held-out synthetic examples");
  add_bool_flag(s, "--no-bos", train_rm_cmd.no_bos, "train without a leading BOS");
  s->callback([&, s] { action = [&, s] { train_rm_cmd.run(s, out); }; });

  s = app.add_subcommand("synth", "write a synthetic corpus or prompt set");
  add_common(s, synth_cmd.common);
  s->add_option("--what", synth_cmd.what, "corpus or prompts")->check(CLI::IsMember({"corpus", "prompts"}));
  s->add_option("--n", synth_cmd.n, "number of lines");
  s->add_option("--min-words", synth_cmd.min_words, "words per line, lower bound");
  s->add_option("--max-words", synth_cmd.max_words, "words per line, upper bound");
  s->callback([&, s] { action = [&, s] { synth_cmd.run(s, out); }; });

  s = app.add_subcommand("generate", "sample continuations for a prompt set");
  add_common(s, generate_cmd.common);
  add_decode_flags(s, generate_cmd.decode);
  s->add_option("--lm", generate_cmd.lm, "language model checkpoint");
  s->add_option("--rm", generate_cmd.rm, "steering reward model checkpoint");
  s->add_option("--prompts", generate_cmd.prompts, "prompt JSONL");
  s->add_option("--n-continuations", generate_cmd.n_continuations, "continuations per prompt");
  add_bool_flag(s, "--traces", generate_cmd.traces, "write one trace CSV per generation");
  s->callback([&, s] { action = [&, s] { generate_cmd.run(s, out, err); }; });

  s = app.add_subcommand("evaluate", "score a generations file");
  add_common(s, evaluate_cmd.common);
  add_eval_flags(s, evaluate_cmd.eval);
  s->add_option("--generations", evaluate_cmd.generations, "generations JSONL");
  s->add_option("--prompts", evaluate_cmd.prompts, "prompt JSONL the generations came from");
  s->add_option("--rm", evaluate_cmd.rm, "steering reward model, checked against the oracle");
  s->callback([&, s] { action = [&, s] { evaluate_cmd.run(s, out); }; });

  s = app.add_subcommand("sweep", "generate and evaluate over a k by beta grid");
  add_common(s, sweep_cmd.common);
  add_decode_flags(s, sweep_cmd.decode);
  add_eval_flags(s, sweep_cmd.eval);
  s->add_option("--lm", sweep_cmd.lm, "language model checkpoint");
  s->add_option("--rm", sweep_cmd.rm, "steering reward model checkpoint");
  s->add_option("--prompts", sweep_cmd.prompts, "prompt JSONL");
  s->add_option("--betas", sweep_cmd.betas, "comma-separated beta grid");
  s->add_option("--ks", sweep_cmd.ks, "comma-separated k grid");
  s->add_option("--n-continuations", sweep_cmd.n_continuations, "continuations per prompt");
  add_bool_flag(s, "--save-generations", sweep_cmd.save_generations, "keep each cell's generations");
  s->callback([&, s] { action = [&, s] { sweep_cmd.run(s, out); }; });

  s = app.add_subcommand("trace", "per-step candidate rewards for one prompt");
  add_common(s, trace_cmd.common);
  add_decode_flags(s, trace_cmd.decode);
  s->add_option("--lm", trace_cmd.lm, "language model checkpoint");
  s->add_option("--rm", trace_cmd.rm, "steering reward model checkpoint");
  s->add_option("--prompt", trace_cmd.prompt, "prompt text");
  s->callback([&, s] { action = [&, s] { trace_cmd.run(s, out); }; });

  s = app.add_subcommand("cost", "FLOPs-per-token tables");
  add_common(s, cost_cmd.common);
  s->add_option("--preset", cost_cmd.preset, "models, table2 or all")
      ->check(CLI::IsMember({"models", "table2", "all"}));
  s->add_option("--format", cost_cmd.format, "text or csv")->check(CLI::IsMember({"text", "csv"}));
  s->add_option("--k", cost_cmd.k, "reward-model candidates")->check(CLI::PositiveNumber);
  s->add_option("--method", cost_cmd.method, "rad, pplm, gedi, dexperts or retrain");
  s->add_option("--lm-spec", cost_cmd.lm_spec, "preset name or n_layer,d_model[,n_ctx]");
  s->add_option("--aux-spec", cost_cmd.aux_spec, "reward or guide model spec");
  add_bool_flag(s, "--exact", cost_cmd.exact, "keep the 6 d_model and context terms");
  s->callback([&, s] { action = [&, s] { cost_cmd.run(s, out); }; });

  try {
    auto args = expand_config(raw_args);
    std::reverse(args.begin(), args.end());
    app.parse(args);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitUsage;
  } catch (const UsageError& e) {
    fmt::print(err, "error: {}\n", e.what());
    return kExitUsage;
  }

  try {
    action();
  } catch (const std::exception& e) {
    fmt::print(err, "error: {}\n", e.what());
    return exit_code_for(e);
  }
  return kExitOk;
}

}  // namespace rad
