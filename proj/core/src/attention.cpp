#include "tact/attention.hpp"

#include <cmath>

namespace tact {

template <typename S>
Tensor<S> init_weight(int rows, int cols, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(rows));
  std::vector<S> v(static_cast<std::size_t>(rows) * cols);
  for (auto& x : v) x = static_cast<S>(rng.uniform(-bound, bound));
  return Tensor<S>::from_values({rows, cols}, std::move(v), /*requires_grad=*/true);
}

template <typename S>
AttentionParams<S> AttentionParams<S>::init(int d_in, int d_k, int d_v, int heads, Rng& rng) {
  if (d_k != d_v) {
    throw ConfigError("attention: d_k (" + std::to_string(d_k) + ") must equal d_v (" +
                      std::to_string(d_v) + ")");
  }
  if (heads < 1 || d_k % heads != 0) {
    throw ConfigError("attention: d_k=" + std::to_string(d_k) + " not divisible by heads=" +
                      std::to_string(heads));
  }
  AttentionParams p;
  p.w_q = init_weight<S>(d_in, d_k, rng);
  p.w_k = init_weight<S>(d_in, d_k, rng);
  p.w_v = init_weight<S>(d_in, d_v, rng);
  p.w_o = init_weight<S>(d_v, d_in, rng);
  p.heads = heads;
  return p;
}

template <typename S>
std::size_t AttentionParams<S>::param_count() const {
  return w_q.size() + w_k.size() + w_v.size() + w_o.size();
}

template <typename S>
void AttentionParams<S>::collect(const std::string& prefix, NamedTensors<S>& out) const {
  out.emplace_back(prefix + ".wq", w_q);
  out.emplace_back(prefix + ".wk", w_k);
  out.emplace_back(prefix + ".wv", w_v);
  out.emplace_back(prefix + ".wo", w_o);
}

template <typename S>
EncoderLayerParams<S> EncoderLayerParams<S>::init(int d_in, int heads, int d_ff, Rng& rng) {
  if (d_ff <= 0) d_ff = 2 * d_in;
  EncoderLayerParams p;
  p.attn = AttentionParams<S>::init(d_in, d_in, d_in, heads, rng);
  p.ln1_gain = Tensor<S>::full({d_in}, S{1}, true);
  p.ln1_bias = Tensor<S>::zeros({d_in}, true);
  p.mlp_w1 = init_weight<S>(d_in, d_ff, rng);
  p.mlp_b1 = Tensor<S>::zeros({d_ff}, true);
  p.mlp_w2 = init_weight<S>(d_ff, d_in, rng);
  p.mlp_b2 = Tensor<S>::zeros({d_in}, true);
  p.ln2_gain = Tensor<S>::full({d_in}, S{1}, true);
  p.ln2_bias = Tensor<S>::zeros({d_in}, true);
  return p;
}

template <typename S>
std::size_t EncoderLayerParams<S>::param_count_for(int d_in, int d_k, int d_v, int d_ff) {
  const auto di = static_cast<std::size_t>(d_in);
  const auto dk = static_cast<std::size_t>(d_k);
  const auto dv = static_cast<std::size_t>(d_v);
  const auto df = static_cast<std::size_t>(d_ff);
  return 2 * di * (dk + dv) + 2 * di * df + df + di + 4 * di;
}

template <typename S>
std::size_t EncoderLayerParams<S>::param_count() const {
  return attn.param_count() + mlp_w1.size() + mlp_b1.size() + mlp_w2.size() + mlp_b2.size() +
         ln1_gain.size() + ln1_bias.size() + ln2_gain.size() + ln2_bias.size();
}

template <typename S>
void EncoderLayerParams<S>::collect(const std::string& prefix, NamedTensors<S>& out) const {
  attn.collect(prefix + ".attn", out);
  out.emplace_back(prefix + ".ln1.gain", ln1_gain);
  out.emplace_back(prefix + ".ln1.bias", ln1_bias);
  out.emplace_back(prefix + ".mlp.w1", mlp_w1);
  out.emplace_back(prefix + ".mlp.b1", mlp_b1);
  out.emplace_back(prefix + ".mlp.w2", mlp_w2);
  out.emplace_back(prefix + ".mlp.b2", mlp_b2);
  out.emplace_back(prefix + ".ln2.gain", ln2_gain);
  out.emplace_back(prefix + ".ln2.bias", ln2_bias);
}

template <typename S>
Tensor<S> sinusoidal_pe(int n_positions, int d_model) {
  if (d_model % 2 != 0) {
    throw ConfigError("sinusoidal_pe: d_model must be even, got " + std::to_string(d_model));
  }
  std::vector<S> v(static_cast<std::size_t>(n_positions) * d_model);
  for (int pos = 0; pos < n_positions; ++pos) {
    for (int i = 0; i < d_model / 2; ++i) {
      const double angle =
          pos / std::pow(10000.0, (2.0 * i) / static_cast<double>(d_model));
      v[static_cast<std::size_t>(pos) * d_model + 2 * i] = static_cast<S>(std::sin(angle));
      v[static_cast<std::size_t>(pos) * d_model + 2 * i + 1] = static_cast<S>(std::cos(angle));
    }
  }
  return Tensor<S>::from_values({n_positions, d_model}, std::move(v), /*requires_grad=*/false);
}

template <typename S>
Tensor<S> scaled_attention(Tape<S>& tape, const Tensor<S>& q, const Tensor<S>& k,
                           const Tensor<S>& v, Tensor<S>* weights_out) {
  if (q.rank() != 2 || k.rank() != 2 || v.rank() != 2 || q.dim(1) != k.dim(1) ||
      k.dim(0) != v.dim(0)) {
    throw ShapeError("scaled_attention: inconsistent shapes q=" + shape_str(q.shape()) +
                     " k=" + shape_str(k.shape()) + " v=" + shape_str(v.shape()));
  }
  const S inv_sqrt_dk = static_cast<S>(1.0 / std::sqrt(static_cast<double>(q.dim(1))));
  Tensor<S> scores = scale(tape, matmul(tape, q, transpose_last_two(tape, k)), inv_sqrt_dk);
  Tensor<S> weights = softmax_rows(tape, scores);
  if (weights_out) *weights_out = weights;
  return matmul(tape, weights, v);
}

template <typename S>
Tensor<S> multi_head_attention(Tape<S>& tape, const Tensor<S>& x_q, const Tensor<S>& x_kv,
                               const AttentionParams<S>& p) {
  const int h = p.heads;
  if (h < 1) throw ConfigError("multi_head_attention: heads must be >= 1");
  if (p.d_k() % h != 0 || p.d_v() % h != 0) {
    throw ConfigError("multi_head_attention: d_k=" + std::to_string(p.d_k()) +
                      " not divisible by heads=" + std::to_string(h));
  }
  Tensor<S> q = matmul(tape, x_q, p.w_q);
  Tensor<S> k = matmul(tape, x_kv, p.w_k);
  Tensor<S> v = matmul(tape, x_kv, p.w_v);
  std::vector<Tensor<S>> outs;
  if (h == 1) {
    outs.push_back(scaled_attention(tape, q, k, v));
  } else {
    const std::vector<int> k_sizes(static_cast<std::size_t>(h), p.d_k() / h);
    const std::vector<int> v_sizes(static_cast<std::size_t>(h), p.d_v() / h);
    auto qs = split(tape, q, k_sizes, 1);
    auto ks = split(tape, k, k_sizes, 1);
    auto vs = split(tape, v, v_sizes, 1);
    outs.reserve(static_cast<std::size_t>(h));
    for (int i = 0; i < h; ++i) {
      outs.push_back(scaled_attention(tape, qs[static_cast<std::size_t>(i)],
                                      ks[static_cast<std::size_t>(i)],
                                      vs[static_cast<std::size_t>(i)]));
    }
  }
  Tensor<S> heads_cat = outs.size() == 1 ? outs[0] : concat(tape, outs, 1);
  return matmul(tape, heads_cat, p.w_o);
}

template <typename S>
Tensor<S> encoder_layer(Tape<S>& tape, const Tensor<S>& x, const EncoderLayerParams<S>& p,
                        bool add_pe) {
  if (x.rank() != 2 || x.dim(1) != p.d_in()) {
    throw ShapeError("encoder_layer: expected [N x " + std::to_string(p.d_in()) + "], got " +
                     shape_str(x.shape()));
  }
  Tensor<S> xin = x;
  if (add_pe) {
    xin = add(tape, x, sinusoidal_pe<S>(x.dim(0), x.dim(1)));
  }
  Tensor<S> attended = multi_head_attention(tape, xin, xin, p.attn);
  Tensor<S> f = layer_norm(tape, add(tape, attended, xin), p.ln1_gain, p.ln1_bias, p.eps);
  Tensor<S> hidden = relu(tape, add(tape, matmul(tape, f, p.mlp_w1), p.mlp_b1));
  Tensor<S> mlp_out = add(tape, matmul(tape, hidden, p.mlp_w2), p.mlp_b2);
  return layer_norm(tape, add(tape, mlp_out, f), p.ln2_gain, p.ln2_bias, p.eps);
}

#define TACT_INSTANTIATE(S)                                                                   \
  template struct AttentionParams<S>;                                                        \
  template struct EncoderLayerParams<S>;                                                     \
  template Tensor<S> sinusoidal_pe<S>(int, int);                                             \
  template Tensor<S> scaled_attention<S>(Tape<S>&, const Tensor<S>&, const Tensor<S>&,       \
                                         const Tensor<S>&, Tensor<S>*);                      \
  template Tensor<S> multi_head_attention<S>(Tape<S>&, const Tensor<S>&, const Tensor<S>&,   \
                                             const AttentionParams<S>&);                     \
  template Tensor<S> encoder_layer<S>(Tape<S>&, const Tensor<S>&, const EncoderLayerParams<S>&, \
                                      bool);                                                 \
  template Tensor<S> init_weight<S>(int, int, Rng&);

TACT_INSTANTIATE(float)
TACT_INSTANTIATE(double)

#undef TACT_INSTANTIATE

}  // namespace tact
