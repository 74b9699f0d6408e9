#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "tact/attention.hpp"
#include "tact/data.hpp"
#include "tact/tensor.hpp"

namespace tact {

// Architecture hyper-parameters plus the ablation wiring flags. d_ff <= 0
// selects the per-layer default of 2*d_in. Modality/CMA/SA flags are byte
// members of the checkpoint header so a saved ablation variant loads back as
// the same wiring.
struct ModelConfig {
  int d_rgb = 32, d_flow = 32, d_obj = 32;
  int n_frames = 8;
  int n_blocks = 2;
  int heads = 4;
  int d_ff = 0;
  int n_verbs = 12, n_nouns = 24, n_actions = 48;

  bool use_rgb = true, use_flow = true, use_obj = true;
  bool use_cma = true, use_sa = true;

  std::vector<int> active_dims() const;
  std::vector<std::string> active_names() const;
  int d_sum() const;
  void validate() const;

  bool operator==(const ModelConfig&) const = default;

  // RULSTM-style feature widths at EPIC scale; vocabulary sizes still come
  // from the dataset.
  static ModelConfig epic_preset();
};

enum class AblationVariant { full, tsa_only_rgb, tsa_only_flow, tsa_only_obj, no_cma, no_sa };
AblationVariant parse_ablation_variant(std::string_view name);
std::string_view ablation_variant_name(AblationVariant v);
// Rewires the config for a Table-style ablation: single-modality variants
// drop the other streams together with CMA and SA; no_cma / no_sa replace
// that stage by the identity (its parameters are not allocated).
ModelConfig apply_ablation(ModelConfig cfg, AblationVariant v);

// One cascade block. In the first block the per-modality temporal encoders
// are shared between the verb and noun branches (tsa_noun aliases
// tsa_verb's tensors); later blocks own separate encoders per branch since
// the branch streams have diverged.
template <typename S>
struct BlockParams {
  std::vector<EncoderLayerParams<S>> tsa_verb, tsa_noun;  // one per active modality
  std::optional<EncoderLayerParams<S>> cma_verb, cma_noun;
  std::optional<EncoderLayerParams<S>> sa;
  Tensor<S> verb_head_w, verb_head_b;  // [d_sum x V], [V]
  Tensor<S> noun_head_w, noun_head_b;  // [d_sum x O], [O]
};

// Per-block verb/noun logits plus the final action logits, all row vectors
// [1 x C]. The last block's verb/noun heads are the model's inference-time
// prediction; earlier blocks feed the loss only.
template <typename S>
struct ForwardOutput {
  std::vector<Tensor<S>> verb_logits;
  std::vector<Tensor<S>> noun_logits;
  Tensor<S> action_logits;
};

// Optional probe filled during forward passes; tests use it to pin the
// wiring (e.g. the symbiotic stage consuming 2N rows).
struct ForwardDebug {
  std::vector<Shape> sa_input_shapes;
};

template <typename S>
struct BlockResult {
  std::vector<Tensor<S>> verb_streams, noun_streams;  // channel re-split for the next block
  Tensor<S> verb_feat, noun_feat;                     // [N x d_sum]
};

template <typename S>
struct ModelParams {
  ModelConfig config;
  std::vector<BlockParams<S>> blocks;
  EncoderLayerParams<S> final_tsa;  // over 2*d_sum channels
  Tensor<S> action_head_w, action_head_b;

  static ModelParams init(const ModelConfig& cfg, std::uint64_t seed);

  // Stable name -> tensor list in initialization order; storage shared
  // across branches appears once.
  NamedTensors<S> named_parameters() const;
  std::size_t param_count() const;
  void set_requires_grad(bool v);
};

// Converts one sample's active modality features to compute precision.
template <typename S>
std::vector<Tensor<S>> sample_to_streams(const ModalitySample& sample, const ModelConfig& cfg);

// Stage order: per-modality temporal encoder (positional embedding iff
// first block), channel concat + cross-modality encoder per branch, time
// concat of both branches through the symbiotic encoder (rows split back at
// N), then channel re-split into next-block streams.
template <typename S>
BlockResult<S> block_forward(Tape<S>& tape, const BlockParams<S>& block, const ModelConfig& cfg,
                             const std::vector<Tensor<S>>& verb_streams,
                             const std::vector<Tensor<S>>& noun_streams, bool first_block,
                             ForwardDebug* dbg = nullptr);

// Runs the cascade; both branches start from the same streams.
template <typename S>
ForwardOutput<S> model_forward(Tape<S>& tape, const ModelParams<S>& params,
                               const std::vector<Tensor<S>>& streams,
                               ForwardDebug* dbg = nullptr);

// Branch-separated entry point (diagnostics: feeding the branches different
// inputs exposes whether the symbiotic stage couples them).
template <typename S>
ForwardOutput<S> model_forward_branched(Tape<S>& tape, const ModelParams<S>& params,
                                        const std::vector<Tensor<S>>& verb_streams,
                                        const std::vector<Tensor<S>>& noun_streams,
                                        ForwardDebug* dbg = nullptr);

// ---------------------------------------------------------------------------
// Checkpoint container, magic "TACP": u16 version; config header as u32
// little-endian fields (d_rgb, d_flow, d_obj, n_frames, n_blocks, heads,
// d_ff, n_verbs, n_nouns, n_actions, modality mask, use_cma, use_sa);
// u32 epochs_completed; u64 global_step; u32 tensor count; per tensor a
// u16-length-prefixed name, u32 rank, u32 dims, then f32 LE payload; a
// trailing u64 FNV-1a checksum of all preceding bytes. Extra tensors
// (optimizer state) are named "opt.<parameter>".
// ---------------------------------------------------------------------------

template <typename S>
struct Checkpoint {
  ModelParams<S> params;
  std::uint32_t epochs_completed = 0;
  std::uint64_t global_step = 0;
  NamedTensors<S> extra;
};

template <typename S>
void save_checkpoint(const std::filesystem::path& path, const ModelParams<S>& params,
                     std::uint32_t epochs_completed = 0, std::uint64_t global_step = 0,
                     const NamedTensors<S>& extra = {});

template <typename S>
Checkpoint<S> load_checkpoint(const std::filesystem::path& path, bool requires_grad);

ModelConfig peek_checkpoint_config(const std::filesystem::path& path);

}  // namespace tact
