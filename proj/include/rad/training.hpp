#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "rad/model.hpp"

namespace rad {

enum class OptimizerKind { Sgd, AdamW };

// Shared by language-model and reward-model training.
struct TrainConfig {
  double learning_rate = 0.05;
  double weight_decay = 0.01;
  std::size_t batch_size = 16;
  std::size_t epochs = 10;
  std::uint64_t seed = 0;
  // Text tokens kept per example; longer texts lose their head, not their tail.
  std::size_t max_len = 48;
  OptimizerKind optimizer = OptimizerKind::Sgd;
  // Global gradient-norm clip; 0 disables.
  double grad_clip = 0.0;
  // Reward inputs start with BOS so position 0 scores the empty prefix.
  bool prepend_bos = true;

  // lr 1e-5, weight decay 0.01, batch 100, 5 epochs: the full-scale
  // reward-model recipe, impractical for from-scratch desk models.
  static TrainConfig full_scale_preset();

  void validate(const ModelConfig& model) const;
};

struct StepLog {
  std::size_t epoch = 0;
  std::size_t step = 0;
  double loss = 0.0;
};

struct TrainResult {
  Weights<double> weights;
  double initial_loss = 0.0;  // dataset mean before the first update
  std::vector<double> epoch_loss;
  std::vector<StepLog> steps;
};

// Gradient descent with decoupled weight decay; optionally Adam moments.
class Optimizer {
 public:
  Optimizer(OptimizerKind kind, double learning_rate, double weight_decay, double grad_clip,
            std::vector<ad::Tensor<double>*> params);
  void step();

 private:
  OptimizerKind kind_;
  double lr_, wd_, clip_;
  std::vector<ad::Tensor<double>*> params_;
  std::vector<std::vector<double>> m_, v_;
  std::size_t t_ = 0;
};

// Per-example scalar loss built on `weights` (leaves of the current step).
using ExampleLoss = std::function<ad::Tensor<double>(const Weights<double>& weights, std::size_t index)>;

// Epoch loop: fixed per-epoch shuffle from the seed, batches summed in
// ascending example order, batch loss = mean of per-example losses.
// Throws TrainingError naming the step on a non-finite loss.
TrainResult train_model(const ModelConfig& model, const Weights<double>& init, std::size_t n_examples,
                        const TrainConfig& cfg, const ExampleLoss& loss,
                        const std::function<void(const StepLog&)>& on_step = {});

// BOS + text tail + EOS, the layout every language model is trained on.
TokenSequence lm_sequence(std::string_view text, std::size_t max_len);

// Mean next-token negative log-likelihood over seq[1..].
ad::Tensor<double> lm_sequence_loss(const ModelConfig& model, const Weights<double>& weights,
                                    std::span<const TokenId> seq);

TrainResult train_lm(const ModelConfig& model, const Weights<double>& init,
                     std::span<const std::string> texts, const TrainConfig& cfg,
                     const std::function<void(const StepLog&)>& on_step = {});

// exp(token-weighted mean NLL) of the texts under the model.
double lm_perplexity(const Transformer<double>& lm, std::span<const std::string> texts,
                     std::size_t max_len);

}  // namespace rad
