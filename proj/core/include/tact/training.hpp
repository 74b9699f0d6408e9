#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <vector>

#include "tact/evaluation.hpp"
#include "tact/losses.hpp"
#include "tact/model.hpp"

namespace tact {

// SGD with momentum: v <- mu*v + g; theta <- theta - eta*v. Velocity buffers
// are zero-initialized, one per parameter.
template <typename S>
class SgdOptimizer {
 public:
  explicit SgdOptimizer(NamedTensors<S> params, S learning_rate = static_cast<S>(0.01),
                        S momentum = static_cast<S>(0.9));

  // Every parameter must carry a populated gradient; gradients are cleared
  // after the update.
  void step();

  S learning_rate() const { return lr_; }
  S momentum() const { return momentum_; }
  const NamedTensors<S>& params() const { return params_; }

  // Velocity buffers as "opt.<param>" named tensors, for checkpointing.
  NamedTensors<S> state_tensors() const;
  void load_state(const NamedTensors<S>& state);

 private:
  NamedTensors<S> params_;
  std::vector<std::vector<S>> velocity_;
  S lr_, momentum_;
};

struct TrainConfig {
  int batch_size = 16;  // desk-scale default; the reference setting is 128
  int epochs = 50;
  std::uint64_t seed = 0;
  double learning_rate = 0.01;
  double momentum = 0.9;
  double eql_gamma = 0.9;
  // Relative-frequency rarity threshold; < 0 selects the per-head
  // bottom-quartile boundary, 0 disables gating (plain cross-entropy).
  double eql_lambda = -1.0;
  int checkpoint_every = 0;  // epochs between checkpoints, 0 = final only
  double early_stop_train_acc = -1.0;  // stop once min(verb, noun) top-1 reaches this

  void validate() const;
};

HeadLossConfigs make_head_loss_configs(const ActionSpace& space, double gamma, double lambda);

struct EpochRecord {
  int epoch = 0;
  double loss = 0.0;
  double verb_recall5 = 0.0, noun_recall5 = 0.0, action_recall5 = 0.0;
  double verb_acc1 = 0.0, noun_acc1 = 0.0;
};

// Owns the model, optimizer and batching for one training run. All
// stochastic streams are derived from (seed, epoch/step), so resuming from
// a checkpoint reproduces an uninterrupted run bit for bit.
template <typename S>
class Trainer {
 public:
  Trainer(const Dataset& dataset, const ModelConfig& model_cfg, const TrainConfig& cfg,
          HeadLossConfigs loss_cfgs);
  Trainer(const Dataset& dataset, Checkpoint<S> checkpoint, const TrainConfig& cfg,
          HeadLossConfigs loss_cfgs);

  EpochRecord run_epoch();

  const ModelParams<S>& params() const { return params_; }
  int epochs_completed() const { return epochs_completed_; }
  std::uint64_t global_step() const { return global_step_; }

  void save(const std::filesystem::path& path) const;

 private:
  void init_optimizer();

  const Dataset& dataset_;
  TrainConfig cfg_;
  HeadLossConfigs loss_cfgs_;
  ModelParams<S> params_;
  std::unique_ptr<SgdOptimizer<S>> opt_;
  std::vector<int> train_idx_;
  int epochs_completed_ = 0;
  std::uint64_t global_step_ = 0;
};

template <typename S>
struct TrainResult {
  ModelParams<S> params;
  std::vector<std::filesystem::path> checkpoints;
  std::filesystem::path final_checkpoint;
  std::filesystem::path metrics_path;
  int epochs_run = 0;
  EpochRecord last;
};

// Epoch loop with seeded shuffling, cadenced checkpoints under
// <out_dir>/checkpoints/ and a JSON-lines metrics log (one record per epoch)
// under <out_dir>/logs/metrics.jsonl.
template <typename S>
TrainResult<S> train(const Dataset& dataset, const ModelConfig& model_cfg, const TrainConfig& cfg,
                     const HeadLossConfigs& loss_cfgs, const std::filesystem::path& out_dir);

// Uniform probability averaging over models (verb/noun from the last block's
// heads, action per mode).
template <typename S>
TaskScores ensemble_predict(const std::vector<ModelParams<S>>& models, const Dataset& dataset,
                            std::span<const int> idx,
                            ActionScoreMode mode = ActionScoreMode::head) {
  return ensemble_scores(models, dataset, idx, mode);
}

}  // namespace tact
