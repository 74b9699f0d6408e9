#pragma once

#include <array>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "tact/data.hpp"
#include "tact/model.hpp"

namespace tact {

std::vector<double> softmax_vec(std::span<const double> logits);

// The k best class indices ordered by (score descending, class ascending);
// deterministic under ties.
std::vector<int> tie_break_topk(std::span<const double> scores, int k);

struct ClassRecall {
  int cls = 0;
  int instances = 0;
  double recall = 0.0;
};

// Per-class recall@k over the given rows, for the classes in class_set that
// have at least one instance; other classes are omitted.
std::vector<ClassRecall> topk_recall_per_class(const std::vector<std::vector<double>>& scores,
                                               const std::vector<int>& targets, int k,
                                               std::span<const int> class_set);

// Macro average of the per-class recalls; empty when no class in class_set
// has an instance.
std::optional<double> mean_topk_recall(const std::vector<std::vector<double>>& scores,
                                       const std::vector<int>& targets, int k,
                                       std::span<const int> class_set);

double top1_accuracy(const std::vector<std::vector<double>>& scores,
                     const std::vector<int>& targets);

enum class ActionScoreMode { head, product };
ActionScoreMode parse_action_score_mode(std::string_view name);
std::string_view action_score_mode_name(ActionScoreMode m);

// head: softmax of the dedicated action head. product: verb_probs[v] *
// noun_probs[n] for every action observed in training, renormalized over
// that table (diagnostic composition).
std::vector<double> action_scores(std::span<const double> verb_probs,
                                  std::span<const double> noun_probs,
                                  std::span<const double> action_logits, ActionScoreMode mode,
                                  const ActionSpace& space);

// One model's per-sample probabilities; verb/noun from the last block's
// heads, action per the selected mode.
struct SampleScores {
  std::vector<double> verb, noun, action;
};

template <typename S>
SampleScores predict_sample(const ModelParams<S>& params, const ModalitySample& sample,
                            ActionScoreMode mode, const ActionSpace& space);

// Uniform average of per-model probabilities, row per sample in idx order.
struct TaskScores {
  std::vector<std::vector<double>> verb, noun, action;
};

template <typename S>
TaskScores ensemble_scores(const std::vector<ModelParams<S>>& models, const Dataset& dataset,
                           std::span<const int> idx, ActionScoreMode mode);

struct EvalCell {
  bool present = false;
  double value_pct = 0.0;  // mean top-k recall, percent
  int n_classes = 0;       // classes contributing to the macro mean
  int n_samples = 0;       // samples eligible for the cell
};

// Rows: overall / unseen / tail; columns: verb / noun / action. The unseen
// cell restricts the sample set (unseen participants), the tail cell
// restricts the class set (train-frequency tail).
struct EvalReport {
  int k = 5;
  int n_models = 0;
  int n_samples = 0;
  std::string mode;
  std::array<std::array<EvalCell, 3>, 3> cells;  // [partition][task]

  static constexpr std::array<std::string_view, 3> kPartitions{"overall", "unseen", "tail"};
};

template <typename S>
EvalReport evaluate_models(const std::vector<ModelParams<S>>& models, const Dataset& dataset,
                           std::span<const int> eval_idx, ActionScoreMode mode, int k = 5);

// Leaderboard-style aligned text table, one row per labelled report.
std::string render_report_table(std::span<const std::pair<std::string, EvalReport>> rows);

void write_report_json(const std::filesystem::path& path,
                       std::span<const std::pair<std::string, EvalReport>> rows);

}  // namespace tact
