#include "rad/training.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "rad/errors.hpp"
#include "rad/rng.hpp"

namespace rad {

TrainConfig TrainConfig::full_scale_preset() {
  TrainConfig cfg;
  cfg.learning_rate = 1e-5;
  cfg.weight_decay = 0.01;
  cfg.batch_size = 100;
  cfg.epochs = 5;
  return cfg;
}

void TrainConfig::validate(const ModelConfig& model) const {
  if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate)) {
    throw ConfigError("learning_rate must be finite and non-negative");
  }
  if (!(weight_decay >= 0.0)) throw ConfigError("weight_decay must be non-negative");
  if (batch_size == 0 || epochs == 0 || max_len == 0) {
    throw ConfigError("batch_size, epochs and max_len must be positive");
  }
  // BOS (and EOS for language models) ride on top of the text tokens.
  if (max_len + 2 > model.max_ctx + 1) {
    throw ConfigError("max_len " + std::to_string(max_len) + " does not fit model max_ctx " +
                      std::to_string(model.max_ctx));
  }
}

// ---------------------------------------------------------------------------

Optimizer::Optimizer(OptimizerKind kind, double learning_rate, double weight_decay, double grad_clip,
                     std::vector<ad::Tensor<double>*> params)
    : kind_(kind), lr_(learning_rate), wd_(weight_decay), clip_(grad_clip), params_(std::move(params)) {
  if (kind_ == OptimizerKind::AdamW) {
    for (auto* p : params_) {
      m_.emplace_back(p->numel(), 0.0);
      v_.emplace_back(p->numel(), 0.0);
    }
  }
}

void Optimizer::step() {
  double factor = 1.0;
  if (clip_ > 0.0) {
    double sq = 0.0;
    for (auto* p : params_) {
      for (double g : p->grad()) sq += g * g;
    }
    const double norm = std::sqrt(sq);
    if (norm > clip_) factor = clip_ / norm;
  }
  ++t_;
  const double b1 = 0.9, b2 = 0.999, eps = 1e-8;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto w = params_[i]->mutable_data();
    const auto g = params_[i]->grad();
    if (g.empty()) continue;
    for (std::size_t j = 0; j < w.size(); ++j) {
      const double gj = g[j] * factor;
      double update = gj;
      if (kind_ == OptimizerKind::AdamW) {
        m_[i][j] = b1 * m_[i][j] + (1.0 - b1) * gj;
        v_[i][j] = b2 * v_[i][j] + (1.0 - b2) * gj * gj;
        update = (m_[i][j] / c1) / (std::sqrt(v_[i][j] / c2) + eps);
      }
      w[j] -= lr_ * update + lr_ * wd_ * w[j];
    }
  }
}

// ---------------------------------------------------------------------------

TrainResult train_model(const ModelConfig& model, const Weights<double>& init, std::size_t n_examples,
                        const TrainConfig& cfg, const ExampleLoss& loss,
                        const std::function<void(const StepLog&)>& on_step) {
  cfg.validate(model);
  check_weights(model, init);
  if (n_examples == 0) throw ConfigError("training set is empty");

  TrainResult result;
  Weights<double> leaves = init.clone(true);
  auto params = leaves.params();
  for (auto* p : params) p->zero_grad();

  {
    const Weights<double> frozen = leaves.clone(false);
    double total = 0.0;
    for (std::size_t i = 0; i < n_examples; ++i) total += loss(frozen, i).item();
    result.initial_loss = total / static_cast<double>(n_examples);
  }

  Optimizer opt(cfg.optimizer, cfg.learning_rate, cfg.weight_decay, cfg.grad_clip, params);
  std::vector<std::size_t> order(n_examples);
  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng rng(derive_seed(cfg.seed, 0x5eed, epoch));
    rng.shuffle(order);
    double epoch_total = 0.0;
    for (std::size_t begin = 0; begin < n_examples; begin += cfg.batch_size) {
      const std::size_t end = std::min(n_examples, begin + cfg.batch_size);
      std::vector<std::size_t> batch(order.begin() + static_cast<std::ptrdiff_t>(begin),
                                     order.begin() + static_cast<std::ptrdiff_t>(end));
      std::sort(batch.begin(), batch.end());
      const double inv = 1.0 / static_cast<double>(batch.size());
      for (auto* p : params) p->zero_grad();
      double batch_total = 0.0;
      for (std::size_t idx : batch) {
        auto l = loss(leaves, idx);
        batch_total += l.item();
        ad::backward(ad::scale(l, inv));
      }
      const double batch_loss = batch_total * inv;
      if (!std::isfinite(batch_loss)) {
        throw TrainingError("non-finite loss at epoch " + std::to_string(epoch) + ", step " +
                            std::to_string(step));
      }
      opt.step();
      epoch_total += batch_total;
      StepLog log{epoch, step, batch_loss};
      result.steps.push_back(log);
      if (on_step) on_step(log);
      ++step;
    }
    result.epoch_loss.push_back(epoch_total / static_cast<double>(n_examples));
  }
  result.weights = leaves.clone(false);
  return result;
}

// ---------------------------------------------------------------------------

TokenSequence lm_sequence(std::string_view text, std::size_t max_len) {
  if (text.size() > max_len) text = text.substr(text.size() - max_len);
  TokenSequence seq{Vocabulary::kBos};
  const auto body = encode(text);
  seq.insert(seq.end(), body.begin(), body.end());
  seq.push_back(Vocabulary::kEos);
  return seq;
}

ad::Tensor<double> lm_sequence_loss(const ModelConfig& model, const Weights<double>& weights,
                                    std::span<const TokenId> seq) {
  if (seq.size() < 2) throw ContractError("language-model loss needs at least two tokens");
  const std::size_t n = seq.size() - 1;
  auto logits = forward_graph(model, weights, seq.first(n)).head;
  std::vector<double> onehot(n * model.vocab, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    onehot[i * model.vocab + static_cast<std::size_t>(seq[i + 1])] = 1.0;
  }
  auto target = ad::Tensor<double>::from({n, model.vocab}, std::move(onehot));
  auto logp = ad::log(ad::softmax(logits, 1));
  return ad::scale(ad::sum(ad::mul(logp, target)), -1.0 / static_cast<double>(n));
}

TrainResult train_lm(const ModelConfig& model, const Weights<double>& init,
                     std::span<const std::string> texts, const TrainConfig& cfg,
                     const std::function<void(const StepLog&)>& on_step) {
  if (model.head != HeadKind::Lm) throw ConfigError("train_lm needs a language-model head");
  std::vector<TokenSequence> seqs;
  seqs.reserve(texts.size());
  for (const auto& t : texts) seqs.push_back(lm_sequence(t, cfg.max_len));
  return train_model(
      model, init, seqs.size(), cfg,
      [&](const Weights<double>& w, std::size_t i) { return lm_sequence_loss(model, w, seqs[i]); },
      on_step);
}

double lm_perplexity(const Transformer<double>& lm, std::span<const std::string> texts,
                     std::size_t max_len) {
  double nll = 0.0;
  std::size_t count = 0;
  const std::size_t V = lm.config().vocab;
  for (const auto& t : texts) {
    const auto seq = lm_sequence(t, max_len);
    const auto out = lm.forward_full(std::span<const TokenId>(seq).first(seq.size() - 1));
    for (std::size_t i = 0; i + 1 < seq.size(); ++i) {
      const auto row = out.at(i);
      const double mx = *std::max_element(row.begin(), row.end());
      double z = 0.0;
      for (std::size_t v = 0; v < V; ++v) z += std::exp(row[v] - mx);
      nll -= row[static_cast<std::size_t>(seq[i + 1])] - mx - std::log(z);
      ++count;
    }
  }
  return std::exp(nll / static_cast<double>(count));
}

}  // namespace rad
