#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "tact/tensor.hpp"

namespace tact {

enum class Split { train, val, test };
std::string_view split_name(Split s);
Split parse_split(std::string_view s);

enum class Task { verb = 0, noun = 1, action = 2 };
inline constexpr std::array<std::string_view, 3> kTaskNames{"verb", "noun", "action"};

// One anticipation instance: three frame-feature sequences plus labels.
// Feature payloads are stored in file precision (32-bit) regardless of the
// compute precision selected for the model.
struct ModalitySample {
  std::string sample_id;
  Tensor<float> rgb;   // [N x d_rgb]
  Tensor<float> flow;  // [N x d_flow]
  Tensor<float> obj;   // [N x d_obj]
  int verb = 0;
  int noun = 0;
  int action = 0;
  std::string participant_id;
  Split split = Split::train;
};

// Vocabularies, train-split statistics and the tail/unseen partitions.
// All statistics come from the train split only.
struct ActionSpace {
  int n_verbs = 0;
  int n_nouns = 0;
  int n_actions = 0;

  // action index -> (verb, noun) for pairs observed in training; (-1, -1)
  // for action ids that never occur in the train split.
  std::vector<std::pair<int, int>> action_to_pair;

  std::int64_t n_train = 0;
  std::vector<std::int64_t> verb_freq, noun_freq, action_freq;

  // Tail: classes with train count strictly below the threshold. The
  // default threshold is the bottom-quartile boundary, i.e. the ascending
  // count order statistic at index C/4 (empty tail when C < 4 ties it to
  // the minimum).
  std::vector<std::uint8_t> verb_tail, noun_tail, action_tail;
  std::int64_t verb_tail_threshold = 0, noun_tail_threshold = 0, action_tail_threshold = 0;

  // Participants with no train samples.
  std::vector<std::string> unseen_participants;

  const std::vector<std::int64_t>& freq(Task t) const;
  const std::vector<std::uint8_t>& tail(Task t) const;
  std::int64_t tail_threshold(Task t) const;
  int n_classes(Task t) const;
  bool is_unseen(const std::string& participant) const;

  // explicit_tail_count >= 0 replaces the quartile boundary for all tasks.
  static ActionSpace build(std::span<const ModalitySample> samples,
                           std::int64_t explicit_tail_count = -1);
};

struct Dataset {
  std::vector<ModalitySample> samples;
  ActionSpace space;
  int n_frames = 0;
  int d_rgb = 0, d_flow = 0, d_obj = 0;

  std::vector<int> indices(Split split) const;
};

// Binary feature container, magic "TACT": header(u16 version, u32 n_samples,
// n_frames, d_rgb, d_flow, d_obj), then per sample a u16-length-prefixed
// UTF-8 id followed by the rgb/flow/obj payloads as row-major f32 LE.
// Annotations travel separately as CSV: sample_id,participant,verb,noun,action,split.
Dataset load_dataset(const std::filesystem::path& feature_file,
                     const std::filesystem::path& annotation_file);
void write_dataset(const Dataset& dataset, const std::filesystem::path& feature_file,
                   const std::filesystem::path& annotation_file);

struct SyntheticConfig {
  std::uint64_t seed = 0;
  int n_samples = 256;
  int n_frames = 8;
  int d_rgb = 32, d_flow = 32, d_obj = 32;
  int n_verbs = 12, n_nouns = 24, n_actions = 48;
  double zipf_exponent = 1.2;
  int n_participants = 8;
  double unseen_fraction = 0.25;
  double val_fraction = 0.15;
  double test_fraction = 0.15;
  double noise_sigma = 0.25;
  double signal_strength = 1.0;
};

// Draws actions from a Zipf-like distribution (rank 0 most frequent),
// assigns each action a distinct (verb, noun) pair, and plants a
// class-conditional signal at the first frame of otherwise-Gaussian
// sequences. A trailing fraction of participants appears only in val/test.
// Pure function of the config.
Dataset generate_synthetic(const SyntheticConfig& cfg);

// Normalized 1/(rank+1)^exponent probabilities.
std::vector<double> zipf_probabilities(int n, double exponent);

// Index sets over `eval_idx` (positions into dataset.samples):
// overall = all, unseen = samples of unseen participants, tail[t] = samples
// whose task-t class is in the tail mask.
struct EvalPartitions {
  std::vector<int> overall;
  std::vector<int> unseen;
  std::array<std::vector<int>, 3> tail;
};
EvalPartitions partition_eval(std::span<const ModalitySample> samples,
                              std::span<const int> eval_idx, const ActionSpace& space);

}  // namespace tact
