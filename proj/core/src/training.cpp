#include "tact/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <numeric>

#include <json.hpp>

#include "tact/io.hpp"

namespace tact {

template <typename S>
SgdOptimizer<S>::SgdOptimizer(NamedTensors<S> params, S learning_rate, S momentum)
    : params_(std::move(params)), lr_(learning_rate), momentum_(momentum) {
  velocity_.reserve(params_.size());
  for (const auto& [name, t] : params_) velocity_.emplace_back(t.size(), S{0});
}

template <typename S>
void SgdOptimizer<S>::step() {
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto& [name, t] = params_[i];
    if (!t.has_grad()) {
      throw NumericError("sgd_step: parameter '" + name + "' has no gradient");
    }
  }
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Tensor<S>& t = params_[i].second;
    std::vector<S>& v = velocity_[i];
    const S* g = t.grad().data();
    S* theta = t.values().data();
    for (std::size_t j = 0; j < v.size(); ++j) {
      v[j] = momentum_ * v[j] + g[j];
      theta[j] -= lr_ * v[j];
    }
    t.clear_grad();
  }
}

template <typename S>
NamedTensors<S> SgdOptimizer<S>::state_tensors() const {
  NamedTensors<S> out;
  for (std::size_t i = 0; i < params_.size(); ++i) {
    out.emplace_back("opt." + params_[i].first,
                     Tensor<S>::from_values(params_[i].second.shape(),
                                            std::vector<S>(velocity_[i])));
  }
  return out;
}

template <typename S>
void SgdOptimizer<S>::load_state(const NamedTensors<S>& state) {
  std::map<std::string, const Tensor<S>*> by_name;
  for (const auto& [name, t] : state) by_name.emplace(name, &t);
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto it = by_name.find("opt." + params_[i].first);
    if (it == by_name.end()) {
      throw ParseError("checkpoint has no optimizer state for '" + params_[i].first + "'");
    }
    if (it->second->shape() != params_[i].second.shape()) {
      throw ParseError("optimizer state shape mismatch for '" + params_[i].first + "'");
    }
    std::copy(it->second->values().begin(), it->second->values().end(), velocity_[i].begin());
  }
}

void TrainConfig::validate() const {
  if (batch_size < 1) throw ConfigError("train config: batch_size must be >= 1");
  if (epochs < 1) throw ConfigError("train config: epochs must be >= 1");
  if (learning_rate <= 0) throw ConfigError("train config: learning_rate must be positive");
  if (momentum < 0 || momentum >= 1) throw ConfigError("train config: momentum must be in [0, 1)");
  if (eql_gamma < 0 || eql_gamma > 1) throw ConfigError("train config: eql_gamma must be in [0, 1]");
  if (checkpoint_every < 0) throw ConfigError("train config: checkpoint_every must be >= 0");
}

HeadLossConfigs make_head_loss_configs(const ActionSpace& space, double gamma, double lambda) {
  auto head = [&](Task t) {
    double lam = lambda;
    if (lam < 0) {
      lam = space.n_train > 0 ? static_cast<double>(space.tail_threshold(t)) /
                                    static_cast<double>(space.n_train)
                              : 0.0;
    }
    return EqlConfig::make(gamma, lam, space.freq(t));
  };
  HeadLossConfigs cfgs;
  cfgs.verb = head(Task::verb);
  cfgs.noun = head(Task::noun);
  cfgs.action = head(Task::action);
  return cfgs;
}

// ---------------------------------------------------------------------------
// Trainer
// ---------------------------------------------------------------------------

namespace {

template <typename S>
[[noreturn]] void abort_non_finite(const ModelParams<S>& params, int epoch,
                                   std::uint64_t step) {
  std::string culprit = "loss";
  for (const auto& [name, t] : params.named_parameters()) {
    bool bad = false;
    for (S v : t.values()) {
      if (!std::isfinite(static_cast<double>(v))) {
        bad = true;
        break;
      }
    }
    if (!bad && t.has_grad()) {
      for (S v : t.grad()) {
        if (!std::isfinite(static_cast<double>(v))) {
          bad = true;
          break;
        }
      }
    }
    if (bad) {
      culprit = name;
      break;
    }
  }
  throw NumericError("non-finite loss at epoch " + std::to_string(epoch) + ", step " +
                     std::to_string(step) + "; first non-finite tensor: " + culprit);
}

}  // namespace

template <typename S>
Trainer<S>::Trainer(const Dataset& dataset, const ModelConfig& model_cfg, const TrainConfig& cfg,
                    HeadLossConfigs loss_cfgs)
    : dataset_(dataset), cfg_(cfg), loss_cfgs_(std::move(loss_cfgs)),
      params_(ModelParams<S>::init(model_cfg, cfg.seed)) {
  cfg_.validate();
  train_idx_ = dataset_.indices(Split::train);
  if (train_idx_.empty()) throw ConfigError("train: the train split is empty");
  init_optimizer();
}

template <typename S>
Trainer<S>::Trainer(const Dataset& dataset, Checkpoint<S> checkpoint, const TrainConfig& cfg,
                    HeadLossConfigs loss_cfgs)
    : dataset_(dataset), cfg_(cfg), loss_cfgs_(std::move(loss_cfgs)),
      params_(std::move(checkpoint.params)),
      epochs_completed_(static_cast<int>(checkpoint.epochs_completed)),
      global_step_(checkpoint.global_step) {
  cfg_.validate();
  params_.set_requires_grad(true);
  train_idx_ = dataset_.indices(Split::train);
  if (train_idx_.empty()) throw ConfigError("train: the train split is empty");
  init_optimizer();
  opt_->load_state(checkpoint.extra);
}

template <typename S>
void Trainer<S>::init_optimizer() {
  opt_ = std::make_unique<SgdOptimizer<S>>(params_.named_parameters(),
                                           static_cast<S>(cfg_.learning_rate),
                                           static_cast<S>(cfg_.momentum));
}

template <typename S>
EpochRecord Trainer<S>::run_epoch() {
  const int epoch = epochs_completed_ + 1;
  std::vector<int> order = train_idx_;
  {
    Rng shuffle_rng(Rng::mix(cfg_.seed, "shuffle", static_cast<std::uint64_t>(epoch)));
    shuffle_rng.shuffle(order);
  }

  const int n_blocks = static_cast<int>(params_.blocks.size());
  double loss_sum = 0.0;
  // Visit-time predictions, for the epoch record.
  std::vector<std::vector<double>> verb_rows, noun_rows, action_rows;
  std::vector<int> verb_targets, noun_targets, action_targets;

  Tape<S> tape;
  for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg_.batch_size)) {
    const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(cfg_.batch_size));
    const int bsz = static_cast<int>(end - start);

    std::vector<std::vector<Tensor<S>>> per_block_verb(static_cast<std::size_t>(n_blocks));
    std::vector<std::vector<Tensor<S>>> per_block_noun(static_cast<std::size_t>(n_blocks));
    std::vector<Tensor<S>> action_logits;
    std::vector<int> bv, bn, ba;
    for (std::size_t s = start; s < end; ++s) {
      const auto& sample = dataset_.samples[static_cast<std::size_t>(order[s])];
      const auto streams = sample_to_streams<S>(sample, params_.config);
      ForwardOutput<S> out = model_forward(tape, params_, streams);
      for (int i = 0; i < n_blocks; ++i) {
        per_block_verb[static_cast<std::size_t>(i)].push_back(out.verb_logits[static_cast<std::size_t>(i)]);
        per_block_noun[static_cast<std::size_t>(i)].push_back(out.noun_logits[static_cast<std::size_t>(i)]);
      }
      action_logits.push_back(out.action_logits);
      bv.push_back(sample.verb);
      bn.push_back(sample.noun);
      ba.push_back(sample.action);

      auto to_double = [](const Tensor<S>& t) {
        return std::vector<double>(t.values().begin(), t.values().end());
      };
      verb_rows.push_back(softmax_vec(to_double(out.verb_logits.back())));
      noun_rows.push_back(softmax_vec(to_double(out.noun_logits.back())));
      action_rows.push_back(softmax_vec(to_double(out.action_logits)));
      verb_targets.push_back(sample.verb);
      noun_targets.push_back(sample.noun);
      action_targets.push_back(sample.action);
    }

    BatchLogits<S> batch;
    for (int i = 0; i < n_blocks; ++i) {
      batch.verb.push_back(bsz == 1 ? per_block_verb[static_cast<std::size_t>(i)][0]
                                    : concat(tape, per_block_verb[static_cast<std::size_t>(i)], 0));
      batch.noun.push_back(bsz == 1 ? per_block_noun[static_cast<std::size_t>(i)][0]
                                    : concat(tape, per_block_noun[static_cast<std::size_t>(i)], 0));
    }
    batch.action = bsz == 1 ? action_logits[0] : concat(tape, action_logits, 0);

    Rng gate_rng(Rng::mix(cfg_.seed, "eql", global_step_));
    Tensor<S> loss = composite_loss(tape, batch, bv, bn, ba, loss_cfgs_, gate_rng);
    const double loss_value = static_cast<double>(loss.item());
    if (!std::isfinite(loss_value)) abort_non_finite(params_, epoch, global_step_);
    loss_sum += loss_value * bsz;

    tape.backward(loss);
    opt_->step();
    tape.clear();
    ++global_step_;
  }

  epochs_completed_ = epoch;
  EpochRecord rec;
  rec.epoch = epoch;
  rec.loss = loss_sum / static_cast<double>(order.size());
  const int n_verbs = params_.config.n_verbs;
  const int n_nouns = params_.config.n_nouns;
  const int n_actions = params_.config.n_actions;
  auto classes = [](int n) {
    std::vector<int> v(static_cast<std::size_t>(n));
    std::iota(v.begin(), v.end(), 0);
    return v;
  };
  const int k = 5;
  auto recall = [&](const std::vector<std::vector<double>>& rows, const std::vector<int>& targets,
                    int n_classes) {
    const auto cls = classes(n_classes);
    const int kk = std::min(k, n_classes);
    return mean_topk_recall(rows, targets, kk, cls).value_or(0.0);
  };
  rec.verb_recall5 = recall(verb_rows, verb_targets, n_verbs);
  rec.noun_recall5 = recall(noun_rows, noun_targets, n_nouns);
  rec.action_recall5 = recall(action_rows, action_targets, n_actions);
  rec.verb_acc1 = top1_accuracy(verb_rows, verb_targets);
  rec.noun_acc1 = top1_accuracy(noun_rows, noun_targets);
  return rec;
}

template <typename S>
void Trainer<S>::save(const std::filesystem::path& path) const {
  save_checkpoint(path, params_, static_cast<std::uint32_t>(epochs_completed_), global_step_,
                  opt_->state_tensors());
}

// ---------------------------------------------------------------------------
// Top-level loop
// ---------------------------------------------------------------------------

template <typename S>
TrainResult<S> train(const Dataset& dataset, const ModelConfig& model_cfg, const TrainConfig& cfg,
                     const HeadLossConfigs& loss_cfgs, const std::filesystem::path& out_dir) {
  Trainer<S> trainer(dataset, model_cfg, cfg, loss_cfgs);

  std::filesystem::create_directories(out_dir / "checkpoints");
  std::filesystem::create_directories(out_dir / "logs");
  const auto metrics_path = out_dir / "logs" / "metrics.jsonl";
  std::ofstream metrics(metrics_path, std::ios::trunc);
  if (!metrics) throw ParseError("cannot open metrics log: " + metrics_path.string());

  TrainResult<S> result;
  result.metrics_path = metrics_path;
  for (int e = 0; e < cfg.epochs; ++e) {
    EpochRecord rec = trainer.run_epoch();
    nlohmann::ordered_json j;
    j["epoch"] = rec.epoch;
    j["split"] = "train";
    j["loss"] = rec.loss;
    j["verb_recall5"] = rec.verb_recall5;
    j["noun_recall5"] = rec.noun_recall5;
    j["action_recall5"] = rec.action_recall5;
    j["verb_acc1"] = rec.verb_acc1;
    j["noun_acc1"] = rec.noun_acc1;
    metrics << j.dump() << '\n';
    result.last = rec;
    result.epochs_run = rec.epoch;

    const bool last_epoch = e + 1 == cfg.epochs;
    const bool reached_acc = cfg.early_stop_train_acc > 0 &&
                             std::min(rec.verb_acc1, rec.noun_acc1) >= cfg.early_stop_train_acc;
    if (cfg.checkpoint_every > 0 && rec.epoch % cfg.checkpoint_every == 0 && !last_epoch &&
        !reached_acc) {
      char buf[32];
      std::snprintf(buf, sizeof(buf), "epoch_%04d.tacp", rec.epoch);
      const auto path = out_dir / "checkpoints" / buf;
      trainer.save(path);
      result.checkpoints.push_back(path);
    }
    if (reached_acc) break;
  }
  metrics.close();

  result.final_checkpoint = out_dir / "checkpoints" / "final.tacp";
  trainer.save(result.final_checkpoint);
  result.checkpoints.push_back(result.final_checkpoint);
  result.params = trainer.params();
  return result;
}

#define TACT_INSTANTIATE(S)                                                                   \
  template class SgdOptimizer<S>;                                                            \
  template class Trainer<S>;                                                                 \
  template TrainResult<S> train<S>(const Dataset&, const ModelConfig&, const TrainConfig&,   \
                                   const HeadLossConfigs&, const std::filesystem::path&);

TACT_INSTANTIATE(float)
TACT_INSTANTIATE(double)

#undef TACT_INSTANTIATE

}  // namespace tact
