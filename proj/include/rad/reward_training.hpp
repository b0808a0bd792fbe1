#pragma once

#include <span>
#include <vector>

#include "rad/corpus.hpp"
#include "rad/model.hpp"
#include "rad/training.hpp"

namespace rad {

// Prefix-weighted squared error:
//   L(r, y) = sum_t t * (r_t - y)^2 / S_l,  S_l = l (l + 1) / 2.
// Later prefixes carry more weight but every prefix is pulled toward y.
double cumulative_loss(std::span<const double> predictions, double label);

// Same loss on a graph tensor of l predictions (any shape with l entries).
ad::Tensor<double> cumulative_loss(const ad::Tensor<double>& predictions, double label);

// Reward-model input: optional BOS + the last max_len text tokens.
TokenSequence reward_sequence(std::string_view text, std::size_t max_len, bool prepend_bos = true);

// Per-prefix predictions r_1..r_l of one example, kept on the graph.
ad::Tensor<double> prefix_predictions(const ModelConfig& model, const Weights<double>& weights,
                                      std::span<const TokenId> seq, bool prepend_bos);

TrainResult train_rm(const ModelConfig& model, const Weights<double>& init,
                     std::span<const RewardExample> dataset, const TrainConfig& cfg,
                     const std::function<void(const StepLog&)>& on_step = {});

struct RmEvaluation {
  // Mean over examples of (r_l - y)^2 at each example's final prefix.
  double full_seq_mse = 0.0;
  // Entry t-1 averages (r_t - y)^2 over examples with at least t tokens.
  std::vector<double> prefix_mse;
  std::vector<std::size_t> prefix_count;
};

RmEvaluation eval_rm(const Transformer<double>& rm, std::span<const RewardExample> dataset,
                     std::size_t max_len, bool prepend_bos = true);

}  // namespace rad
