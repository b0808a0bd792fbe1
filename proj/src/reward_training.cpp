#include "rad/reward_training.hpp"

#include "rad/errors.hpp"

namespace rad {

double cumulative_loss(std::span<const double> predictions, double label) {
  if (predictions.empty()) throw ContractError("cumulative loss over zero predictions");
  if (!(label >= 0.0 && label <= 1.0)) throw ContractError("label outside [0, 1]");
  const double l = static_cast<double>(predictions.size());
  double total = 0.0;
  for (std::size_t t = 0; t < predictions.size(); ++t) {
    const double e = predictions[t] - label;
    total += static_cast<double>(t + 1) * e * e;
  }
  return total / (l * (l + 1.0) / 2.0);
}

ad::Tensor<double> cumulative_loss(const ad::Tensor<double>& predictions, double label) {
  const std::size_t l = predictions.numel();
  if (l == 0) throw ContractError("cumulative loss over zero predictions");
  if (!(label >= 0.0 && label <= 1.0)) throw ContractError("label outside [0, 1]");
  const double s_l = static_cast<double>(l) * static_cast<double>(l + 1) / 2.0;
  std::vector<double> weights(l);
  for (std::size_t t = 0; t < l; ++t) weights[t] = static_cast<double>(t + 1) / s_l;
  const auto target = ad::Tensor<double>::from(predictions.shape(), std::vector<double>(l, label));
  const auto diff = ad::sub(predictions, target);
  const auto w = ad::Tensor<double>::from(predictions.shape(), std::move(weights));
  return ad::sum(ad::mul(ad::mul(diff, diff), w));
}

TokenSequence reward_sequence(std::string_view text, std::size_t max_len, bool prepend_bos) {
  if (text.size() > max_len) text = text.substr(text.size() - max_len);
  TokenSequence seq;
  if (prepend_bos) seq.push_back(Vocabulary::kBos);
  const auto body = encode(text);
  seq.insert(seq.end(), body.begin(), body.end());
  return seq;
}

ad::Tensor<double> prefix_predictions(const ModelConfig& model, const Weights<double>& weights,
                                      std::span<const TokenId> seq, bool prepend_bos) {
  auto head = forward_graph(model, weights, seq).head;
  const std::size_t skip = prepend_bos ? 1 : 0;
  if (seq.size() <= skip) throw ContractError("reward sequence has no text tokens");
  return ad::slice(head, 0, skip, seq.size());
}

TrainResult train_rm(const ModelConfig& model, const Weights<double>& init,
                     std::span<const RewardExample> dataset, const TrainConfig& cfg,
                     const std::function<void(const StepLog&)>& on_step) {
  if (model.head != HeadKind::Reward) throw ConfigError("train_rm needs a reward head");
  std::vector<TokenSequence> seqs;
  seqs.reserve(dataset.size());
  for (const auto& ex : dataset) {
    validate(ex);
    seqs.push_back(reward_sequence(ex.text, cfg.max_len, cfg.prepend_bos));
  }
  return train_model(
      model, init, seqs.size(), cfg,
      [&](const Weights<double>& w, std::size_t i) {
        return cumulative_loss(prefix_predictions(model, w, seqs[i], cfg.prepend_bos),
                               dataset[i].label);
      },
      on_step);
}

RmEvaluation eval_rm(const Transformer<double>& rm, std::span<const RewardExample> dataset,
                     std::size_t max_len, bool prepend_bos) {
  if (dataset.empty()) throw ContractError("eval_rm over an empty dataset");
  if (rm.config().head != HeadKind::Reward) throw ConfigError("eval_rm needs a reward head");
  RmEvaluation ev;
  ev.prefix_mse.assign(max_len, 0.0);
  ev.prefix_count.assign(max_len, 0);
  const std::size_t skip = prepend_bos ? 1 : 0;
  double total = 0.0;
  for (const auto& ex : dataset) {
    const auto seq = reward_sequence(ex.text, max_len, prepend_bos);
    const auto out = rm.forward_full(seq);
    const std::size_t l = seq.size() - skip;
    for (std::size_t t = 0; t < l; ++t) {
      const double e = out.at(t + skip)[0] - ex.label;
      ev.prefix_mse[t] += e * e;
      ++ev.prefix_count[t];
    }
    const double e = out.at(seq.size() - 1)[0] - ex.label;
    total += e * e;
  }
  for (std::size_t t = 0; t < max_len; ++t) {
    if (ev.prefix_count[t]) ev.prefix_mse[t] /= static_cast<double>(ev.prefix_count[t]);
  }
  ev.full_seq_mse = total / static_cast<double>(dataset.size());
  return ev;
}

}  // namespace rad
