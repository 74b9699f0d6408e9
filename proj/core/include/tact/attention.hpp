#pragma once

#include <cstdint>
#include <utility>
#include <vector>

#include "tact/rng.hpp"
#include "tact/tensor.hpp"

namespace tact {

template <typename S>
using NamedTensors = std::vector<std::pair<std::string, Tensor<S>>>;

// Projection matrices of one attention unit. d_k and d_v are the total
// projected widths, sliced evenly across heads; d_k == d_v is enforced.
template <typename S>
struct AttentionParams {
  Tensor<S> w_q;  // [d_in x d_k]
  Tensor<S> w_k;  // [d_in x d_k]
  Tensor<S> w_v;  // [d_in x d_v]
  Tensor<S> w_o;  // [d_v x d_in], recombines the concatenated heads
  int heads = 1;

  int d_in() const { return w_q.dim(0); }
  int d_k() const { return w_q.dim(1); }
  int d_v() const { return w_v.dim(1); }

  static AttentionParams init(int d_in, int d_k, int d_v, int heads, Rng& rng);
  std::size_t param_count() const;
  void collect(const std::string& prefix, NamedTensors<S>& out) const;
};

// One full encoder layer: attention, then a two-layer relu MLP, each
// followed by a residual add and layer norm.
//
// Parameter count is a pure function of the extents:
//   2*d_in*(d_k + d_v)            attention projections + output matrix
//   + 2*d_in*d_ff + d_ff + d_in   MLP weights and biases
//   + 4*d_in                      two layer-norm gain/bias pairs
template <typename S>
struct EncoderLayerParams {
  AttentionParams<S> attn;
  Tensor<S> mlp_w1;  // [d_in x d_ff]
  Tensor<S> mlp_b1;  // [d_ff]
  Tensor<S> mlp_w2;  // [d_ff x d_in]
  Tensor<S> mlp_b2;  // [d_in]
  Tensor<S> ln1_gain, ln1_bias;  // [d_in]
  Tensor<S> ln2_gain, ln2_bias;  // [d_in]
  S eps = static_cast<S>(1e-5);

  int d_in() const { return mlp_w1.dim(0); }
  int d_ff() const { return mlp_w1.dim(1); }

  // d_k = d_v = d_in; d_ff <= 0 selects the default 2*d_in.
  static EncoderLayerParams init(int d_in, int heads, int d_ff, Rng& rng);
  std::size_t param_count() const;
  static std::size_t param_count_for(int d_in, int d_k, int d_v, int d_ff);
  void collect(const std::string& prefix, NamedTensors<S>& out) const;
};

// PE[pos, 2i]   = sin(pos / 10000^(2i/d_model))
// PE[pos, 2i+1] = cos(pos / 10000^(2i/d_model))
// Not trainable. d_model must be even.
template <typename S>
Tensor<S> sinusoidal_pe(int n_positions, int d_model);

// softmax(q k^T / sqrt(d_k)) v for a single head. If weights_out is given it
// receives the row-stochastic attention weight matrix.
template <typename S>
Tensor<S> scaled_attention(Tape<S>& tape, const Tensor<S>& q, const Tensor<S>& k,
                           const Tensor<S>& v, Tensor<S>* weights_out = nullptr);

// Projects x_q/x_kv, runs scaled attention per head on even channel slices,
// concatenates the heads and applies w_o. Output is [N_q x d_in].
template <typename S>
Tensor<S> multi_head_attention(Tape<S>& tape, const Tensor<S>& x_q, const Tensor<S>& x_kv,
                               const AttentionParams<S>& p);

// x' = x + PE (if add_pe); f = norm(attention(x') + x'); out = norm(mlp(f) + f).
template <typename S>
Tensor<S> encoder_layer(Tape<S>& tape, const Tensor<S>& x, const EncoderLayerParams<S>& p,
                        bool add_pe);

// Uniform init in [-1/sqrt(fan_in), 1/sqrt(fan_in)], fan_in = rows.
template <typename S>
Tensor<S> init_weight(int rows, int cols, Rng& rng);

}  // namespace tact
