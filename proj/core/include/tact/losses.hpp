#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "tact/rng.hpp"
#include "tact/tensor.hpp"

namespace tact {

// Configuration of the equalization loss for one prediction head.
// A class is "rare" when its relative train frequency (count / total) is
// strictly below lambda; gamma is the probability that a rare, non-target
// class is dropped from the softmax denominator for a given sample.
struct EqlConfig {
  double gamma = 0.0;
  double lambda = 0.0;
  std::vector<std::int64_t> class_frequencies;

  bool is_rare(int cls) const;
  static EqlConfig make(double gamma, double lambda, std::vector<std::int64_t> frequencies);
};

// Mean over the batch of -log softmax(logits)[target].
template <typename S>
Tensor<S> cross_entropy(Tape<S>& tape, const Tensor<S>& logits, const std::vector<int>& targets);

// Per sample, each rare non-target class k keeps weight
//   w_k = 1 - beta_k          with beta_k ~ Bernoulli(gamma),
// and the per-class probability becomes e^{z_j} / sum_k w_k e^{z_k}; the
// target class is always kept. Gradients flow through the denominator only
// for classes with w_k = 1. Reduces exactly to cross_entropy when gamma = 0
// or when no class is rare.
template <typename S>
Tensor<S> equalization_loss(Tape<S>& tape, const Tensor<S>& logits,
                            const std::vector<int>& targets, const EqlConfig& cfg, Rng& rng);

// As equalization_loss but with the Bernoulli gates supplied explicitly
// (row-major [B x C], 1 keeps the class). Used by tests and by the rng-driven
// entry point above.
template <typename S>
Tensor<S> gated_cross_entropy(Tape<S>& tape, const Tensor<S>& logits,
                              const std::vector<int>& targets,
                              const std::vector<std::uint8_t>& keep);

// Draws the per-sample, per-class keep gates for one batch.
std::vector<std::uint8_t> draw_eql_gates(int batch, int classes, const std::vector<int>& targets,
                                         const EqlConfig& cfg, Rng& rng);

// Per-head loss configuration for the composite objective.
struct HeadLossConfigs {
  EqlConfig verb;
  EqlConfig noun;
  EqlConfig action;
};

// Logits for a batch, collected across the cascade: one [B x V] / [B x O]
// tensor per block plus the final [B x C_a] action logits.
template <typename S>
struct BatchLogits {
  std::vector<Tensor<S>> verb;
  std::vector<Tensor<S>> noun;
  Tensor<S> action;
};

// Sum over blocks of EQL(verb) + EQL(noun), plus EQL(action); all terms
// unit-weighted, each a batch mean.
template <typename S>
Tensor<S> composite_loss(Tape<S>& tape, const BatchLogits<S>& logits,
                         const std::vector<int>& verb_targets,
                         const std::vector<int>& noun_targets,
                         const std::vector<int>& action_targets, const HeadLossConfigs& cfgs,
                         Rng& rng);

// Text frequency table, one line per class: "class_index<TAB>count".
std::vector<std::int64_t> read_frequency_table(const std::filesystem::path& path);
void write_frequency_table(const std::filesystem::path& path,
                           const std::vector<std::int64_t>& counts);

}  // namespace tact
