#include "tact/model.hpp"

#include <algorithm>
#include <cstdio>
#include <map>
#include <set>

#include "tact/io.hpp"

namespace tact {

namespace {

constexpr char kCheckpointMagic[4] = {'T', 'A', 'C', 'P'};
constexpr std::uint16_t kCheckpointVersion = 1;

template <typename S>
Tensor<S> affine(Tape<S>& tape, const Tensor<S>& x, const Tensor<S>& w, const Tensor<S>& b) {
  return add(tape, matmul(tape, x, w), b);
}

template <typename S>
Tensor<S> pooled_row(Tape<S>& tape, const Tensor<S>& feat) {
  // [N x D] -> time mean -> [1 x D]
  return reshape(tape, mean_over_axis(tape, feat, 0), {1, feat.dim(1)});
}

}  // namespace

std::vector<int> ModelConfig::active_dims() const {
  std::vector<int> dims;
  if (use_rgb) dims.push_back(d_rgb);
  if (use_flow) dims.push_back(d_flow);
  if (use_obj) dims.push_back(d_obj);
  return dims;
}

std::vector<std::string> ModelConfig::active_names() const {
  std::vector<std::string> names;
  if (use_rgb) names.emplace_back("rgb");
  if (use_flow) names.emplace_back("flow");
  if (use_obj) names.emplace_back("obj");
  return names;
}

int ModelConfig::d_sum() const {
  int s = 0;
  for (int d : active_dims()) s += d;
  return s;
}

void ModelConfig::validate() const {
  const auto dims = active_dims();
  if (dims.empty()) throw ConfigError("model config: at least one modality must be active");
  if (n_frames < 1 || n_blocks < 1 || heads < 1 || n_verbs < 1 || n_nouns < 1 || n_actions < 1) {
    throw ConfigError("model config: all extents must be >= 1");
  }
  for (int d : dims) {
    if (d < 1) throw ConfigError("model config: modality widths must be >= 1");
    if (d % heads != 0) {
      throw ConfigError("model config: modality width " + std::to_string(d) +
                        " not divisible by heads=" + std::to_string(heads));
    }
    if (d % 2 != 0) {
      throw ConfigError("model config: modality width " + std::to_string(d) +
                        " must be even for the sinusoidal embedding");
    }
  }
}

ModelConfig ModelConfig::epic_preset() {
  ModelConfig cfg;
  cfg.d_rgb = 1024;
  cfg.d_flow = 1024;
  cfg.d_obj = 352;
  cfg.n_verbs = 97;
  cfg.n_nouns = 300;
  return cfg;
}

AblationVariant parse_ablation_variant(std::string_view name) {
  if (name == "full") return AblationVariant::full;
  if (name == "tsa_only_rgb") return AblationVariant::tsa_only_rgb;
  if (name == "tsa_only_flow") return AblationVariant::tsa_only_flow;
  if (name == "tsa_only_obj") return AblationVariant::tsa_only_obj;
  if (name == "no_cma") return AblationVariant::no_cma;
  if (name == "no_sa") return AblationVariant::no_sa;
  throw ConfigError("unknown ablation variant '" + std::string(name) +
                    "' (expected full, tsa_only_rgb, tsa_only_flow, tsa_only_obj, no_cma, no_sa)");
}

std::string_view ablation_variant_name(AblationVariant v) {
  switch (v) {
    case AblationVariant::full: return "full";
    case AblationVariant::tsa_only_rgb: return "tsa_only_rgb";
    case AblationVariant::tsa_only_flow: return "tsa_only_flow";
    case AblationVariant::tsa_only_obj: return "tsa_only_obj";
    case AblationVariant::no_cma: return "no_cma";
    case AblationVariant::no_sa: return "no_sa";
  }
  return "?";
}

ModelConfig apply_ablation(ModelConfig cfg, AblationVariant v) {
  switch (v) {
    case AblationVariant::full:
      break;
    case AblationVariant::tsa_only_rgb:
    case AblationVariant::tsa_only_flow:
    case AblationVariant::tsa_only_obj:
      cfg.use_rgb = v == AblationVariant::tsa_only_rgb;
      cfg.use_flow = v == AblationVariant::tsa_only_flow;
      cfg.use_obj = v == AblationVariant::tsa_only_obj;
      cfg.use_cma = false;
      cfg.use_sa = false;
      break;
    case AblationVariant::no_cma:
      cfg.use_cma = false;
      break;
    case AblationVariant::no_sa:
      cfg.use_sa = false;
      break;
  }
  return cfg;
}

// ---------------------------------------------------------------------------
// Parameters
// ---------------------------------------------------------------------------

template <typename S>
ModelParams<S> ModelParams<S>::init(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  ModelParams<S> p;
  p.config = cfg;
  Rng rng(seed);
  const auto dims = cfg.active_dims();
  const int d_sum = cfg.d_sum();
  const auto dff = [&cfg](int d_in) { return cfg.d_ff > 0 ? cfg.d_ff : 2 * d_in; };

  for (int i = 0; i < cfg.n_blocks; ++i) {
    BlockParams<S> b;
    for (int d : dims) b.tsa_verb.push_back(EncoderLayerParams<S>::init(d, cfg.heads, dff(d), rng));
    if (i == 0) {
      b.tsa_noun = b.tsa_verb;  // same storage: block-1 temporal encoders are branch-shared
    } else {
      for (int d : dims) b.tsa_noun.push_back(EncoderLayerParams<S>::init(d, cfg.heads, dff(d), rng));
    }
    if (cfg.use_cma) {
      b.cma_verb = EncoderLayerParams<S>::init(d_sum, cfg.heads, dff(d_sum), rng);
      b.cma_noun = EncoderLayerParams<S>::init(d_sum, cfg.heads, dff(d_sum), rng);
    }
    if (cfg.use_sa) {
      b.sa = EncoderLayerParams<S>::init(d_sum, cfg.heads, dff(d_sum), rng);
    }
    b.verb_head_w = init_weight<S>(d_sum, cfg.n_verbs, rng);
    b.verb_head_b = Tensor<S>::zeros({cfg.n_verbs}, true);
    b.noun_head_w = init_weight<S>(d_sum, cfg.n_nouns, rng);
    b.noun_head_b = Tensor<S>::zeros({cfg.n_nouns}, true);
    p.blocks.push_back(std::move(b));
  }
  p.final_tsa = EncoderLayerParams<S>::init(2 * d_sum, cfg.heads, dff(2 * d_sum), rng);
  p.action_head_w = init_weight<S>(2 * d_sum, cfg.n_actions, rng);
  p.action_head_b = Tensor<S>::zeros({cfg.n_actions}, true);
  return p;
}

template <typename S>
NamedTensors<S> ModelParams<S>::named_parameters() const {
  NamedTensors<S> out;
  const auto names = config.active_names();
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    const auto& b = blocks[i];
    const std::string prefix = "blocks." + std::to_string(i);
    if (i == 0) {
      for (std::size_t m = 0; m < names.size(); ++m) {
        b.tsa_verb[m].collect(prefix + ".tsa." + names[m], out);
      }
    } else {
      for (std::size_t m = 0; m < names.size(); ++m) {
        b.tsa_verb[m].collect(prefix + ".verb.tsa." + names[m], out);
      }
      for (std::size_t m = 0; m < names.size(); ++m) {
        b.tsa_noun[m].collect(prefix + ".noun.tsa." + names[m], out);
      }
    }
    if (b.cma_verb) b.cma_verb->collect(prefix + ".verb.cma", out);
    if (b.cma_noun) b.cma_noun->collect(prefix + ".noun.cma", out);
    if (b.sa) b.sa->collect(prefix + ".sa", out);
    out.emplace_back(prefix + ".verb_head.w", b.verb_head_w);
    out.emplace_back(prefix + ".verb_head.b", b.verb_head_b);
    out.emplace_back(prefix + ".noun_head.w", b.noun_head_w);
    out.emplace_back(prefix + ".noun_head.b", b.noun_head_b);
  }
  final_tsa.collect("final_tsa", out);
  out.emplace_back("action_head.w", action_head_w);
  out.emplace_back("action_head.b", action_head_b);

  std::set<const void*> seen;
  for (const auto& [name, t] : out) {
    if (!seen.insert(t.storage_id()).second) {
      throw Error("internal: duplicate parameter storage at '" + name + "'");
    }
  }
  return out;
}

template <typename S>
std::size_t ModelParams<S>::param_count() const {
  std::size_t n = 0;
  for (const auto& [name, t] : named_parameters()) n += t.size();
  return n;
}

template <typename S>
void ModelParams<S>::set_requires_grad(bool v) {
  for (auto& [name, t] : named_parameters()) {
    Tensor<S> handle = t;
    handle.set_requires_grad(v);
  }
}

// ---------------------------------------------------------------------------
// Forward
// ---------------------------------------------------------------------------

template <typename S>
std::vector<Tensor<S>> sample_to_streams(const ModalitySample& sample, const ModelConfig& cfg) {
  std::vector<Tensor<S>> streams;
  auto push = [&](const Tensor<float>& src, int expect_d, const char* name) {
    if (src.rank() != 2 || src.dim(0) != cfg.n_frames || src.dim(1) != expect_d) {
      throw ShapeError("sample '" + sample.sample_id + "': " + name + " features are " +
                       shape_str(src.shape()) + ", config expects [" +
                       std::to_string(cfg.n_frames) + "x" + std::to_string(expect_d) + "]");
    }
    std::vector<S> v(src.values().begin(), src.values().end());
    streams.push_back(Tensor<S>::from_values(src.shape(), std::move(v)));
  };
  if (cfg.use_rgb) push(sample.rgb, cfg.d_rgb, "rgb");
  if (cfg.use_flow) push(sample.flow, cfg.d_flow, "flow");
  if (cfg.use_obj) push(sample.obj, cfg.d_obj, "obj");
  return streams;
}

template <typename S>
BlockResult<S> block_forward(Tape<S>& tape, const BlockParams<S>& block, const ModelConfig& cfg,
                             const std::vector<Tensor<S>>& verb_streams,
                             const std::vector<Tensor<S>>& noun_streams, bool first_block,
                             ForwardDebug* dbg) {
  const auto dims = cfg.active_dims();
  if (verb_streams.size() != dims.size() || noun_streams.size() != dims.size() ||
      block.tsa_verb.size() != dims.size()) {
    throw ShapeError("block_forward: expected " + std::to_string(dims.size()) +
                     " modality streams per branch");
  }

  auto branch_feature = [&](const std::vector<Tensor<S>>& streams,
                            const std::vector<EncoderLayerParams<S>>& tsa,
                            const std::optional<EncoderLayerParams<S>>& cma) {
    std::vector<Tensor<S>> encoded;
    encoded.reserve(streams.size());
    for (std::size_t m = 0; m < streams.size(); ++m) {
      encoded.push_back(encoder_layer(tape, streams[m], tsa[m], first_block));
    }
    Tensor<S> fused = encoded.size() == 1 ? encoded[0] : concat(tape, encoded, 1);
    if (cma) fused = encoder_layer(tape, fused, *cma, false);
    return fused;
  };

  Tensor<S> verb_feat = branch_feature(verb_streams, block.tsa_verb, block.cma_verb);
  Tensor<S> noun_feat = branch_feature(noun_streams, block.tsa_noun, block.cma_noun);

  if (block.sa) {
    const int n = verb_feat.dim(0);
    Tensor<S> sa_in = concat(tape, {verb_feat, noun_feat}, 0);  // [2N x d_sum]
    if (dbg) dbg->sa_input_shapes.push_back(sa_in.shape());
    Tensor<S> sa_out = encoder_layer(tape, sa_in, *block.sa, false);
    auto halves = split(tape, sa_out, {n, n}, 0);
    verb_feat = halves[0];
    noun_feat = halves[1];
  }

  BlockResult<S> res;
  res.verb_feat = verb_feat;
  res.noun_feat = noun_feat;
  res.verb_streams = dims.size() == 1 ? std::vector<Tensor<S>>{verb_feat}
                                      : split(tape, verb_feat, dims, 1);
  res.noun_streams = dims.size() == 1 ? std::vector<Tensor<S>>{noun_feat}
                                      : split(tape, noun_feat, dims, 1);
  return res;
}

template <typename S>
ForwardOutput<S> model_forward_branched(Tape<S>& tape, const ModelParams<S>& params,
                                        const std::vector<Tensor<S>>& verb_streams,
                                        const std::vector<Tensor<S>>& noun_streams,
                                        ForwardDebug* dbg) {
  const ModelConfig& cfg = params.config;
  ForwardOutput<S> out;
  std::vector<Tensor<S>> vs = verb_streams, ns = noun_streams;
  Tensor<S> verb_feat, noun_feat;
  for (std::size_t i = 0; i < params.blocks.size(); ++i) {
    BlockResult<S> r = block_forward(tape, params.blocks[i], cfg, vs, ns, i == 0, dbg);
    const auto& b = params.blocks[i];
    out.verb_logits.push_back(
        affine(tape, pooled_row(tape, r.verb_feat), b.verb_head_w, b.verb_head_b));
    out.noun_logits.push_back(
        affine(tape, pooled_row(tape, r.noun_feat), b.noun_head_w, b.noun_head_b));
    vs = std::move(r.verb_streams);
    ns = std::move(r.noun_streams);
    verb_feat = r.verb_feat;
    noun_feat = r.noun_feat;
  }
  Tensor<S> fused = concat(tape, {verb_feat, noun_feat}, 1);  // [N x 2*d_sum]
  Tensor<S> final_feat = encoder_layer(tape, fused, params.final_tsa, false);
  out.action_logits =
      affine(tape, pooled_row(tape, final_feat), params.action_head_w, params.action_head_b);
  return out;
}

template <typename S>
ForwardOutput<S> model_forward(Tape<S>& tape, const ModelParams<S>& params,
                               const std::vector<Tensor<S>>& streams, ForwardDebug* dbg) {
  return model_forward_branched(tape, params, streams, streams, dbg);
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

namespace {

std::uint32_t modality_mask(const ModelConfig& cfg) {
  return (cfg.use_rgb ? 1u : 0u) | (cfg.use_flow ? 2u : 0u) | (cfg.use_obj ? 4u : 0u);
}

void write_config(ByteWriter& w, const ModelConfig& cfg) {
  w.u32(static_cast<std::uint32_t>(cfg.d_rgb));
  w.u32(static_cast<std::uint32_t>(cfg.d_flow));
  w.u32(static_cast<std::uint32_t>(cfg.d_obj));
  w.u32(static_cast<std::uint32_t>(cfg.n_frames));
  w.u32(static_cast<std::uint32_t>(cfg.n_blocks));
  w.u32(static_cast<std::uint32_t>(cfg.heads));
  w.u32(static_cast<std::uint32_t>(cfg.d_ff > 0 ? cfg.d_ff : 0));
  w.u32(static_cast<std::uint32_t>(cfg.n_verbs));
  w.u32(static_cast<std::uint32_t>(cfg.n_nouns));
  w.u32(static_cast<std::uint32_t>(cfg.n_actions));
  w.u32(modality_mask(cfg));
  w.u32(cfg.use_cma ? 1u : 0u);
  w.u32(cfg.use_sa ? 1u : 0u);
}

ModelConfig read_config(ByteReader& r) {
  ModelConfig cfg;
  cfg.d_rgb = static_cast<int>(r.u32());
  cfg.d_flow = static_cast<int>(r.u32());
  cfg.d_obj = static_cast<int>(r.u32());
  cfg.n_frames = static_cast<int>(r.u32());
  cfg.n_blocks = static_cast<int>(r.u32());
  cfg.heads = static_cast<int>(r.u32());
  cfg.d_ff = static_cast<int>(r.u32());
  cfg.n_verbs = static_cast<int>(r.u32());
  cfg.n_nouns = static_cast<int>(r.u32());
  cfg.n_actions = static_cast<int>(r.u32());
  const std::uint32_t mask = r.u32();
  cfg.use_rgb = (mask & 1u) != 0;
  cfg.use_flow = (mask & 2u) != 0;
  cfg.use_obj = (mask & 4u) != 0;
  cfg.use_cma = r.u32() != 0;
  cfg.use_sa = r.u32() != 0;
  return cfg;
}

template <typename S>
void write_tensor(ByteWriter& w, const std::string& name, const Tensor<S>& t) {
  if (name.size() > UINT16_MAX) throw ConfigError("tensor name too long: " + name);
  w.u16(static_cast<std::uint16_t>(name.size()));
  w.bytes(name);
  w.u32(static_cast<std::uint32_t>(t.shape().size()));
  for (int d : t.shape()) w.u32(static_cast<std::uint32_t>(d));
  for (S v : t.values()) w.f32(static_cast<float>(v));
}

void verify_magic_and_checksum(const std::string& bytes, const std::string& name) {
  if (bytes.size() < 12 || std::string_view(bytes).substr(0, 4) != std::string_view(kCheckpointMagic, 4)) {
    throw ParseError(name + ": bad magic, expected 'TACP'");
  }
  const std::string_view payload(bytes.data(), bytes.size() - 8);
  ByteReader tail(std::string_view(bytes).substr(bytes.size() - 8), name);
  const std::uint64_t stored = tail.u64();
  const std::uint64_t computed = fnv1a64(payload);
  if (stored != computed) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%016llx, computed %016llx",
                  static_cast<unsigned long long>(stored),
                  static_cast<unsigned long long>(computed));
    throw ParseError(name + ": checksum mismatch: stored " + buf);
  }
}

}  // namespace

template <typename S>
void save_checkpoint(const std::filesystem::path& path, const ModelParams<S>& params,
                     std::uint32_t epochs_completed, std::uint64_t global_step,
                     const NamedTensors<S>& extra) {
  ByteWriter w;
  w.bytes(std::string_view(kCheckpointMagic, 4));
  w.u16(kCheckpointVersion);
  write_config(w, params.config);
  w.u32(epochs_completed);
  w.u64(global_step);
  const NamedTensors<S> named = params.named_parameters();
  w.u32(static_cast<std::uint32_t>(named.size() + extra.size()));
  for (const auto& [name, t] : named) write_tensor(w, name, t);
  for (const auto& [name, t] : extra) write_tensor(w, name, t);
  const std::uint64_t checksum = fnv1a64(w.data());
  ByteWriter tail;
  tail.u64(checksum);
  std::string out = w.data();
  out += tail.data();
  write_binary_file(path, out);
}

template <typename S>
Checkpoint<S> load_checkpoint(const std::filesystem::path& path, bool requires_grad) {
  const std::string bytes = read_binary_file(path);
  verify_magic_and_checksum(bytes, path.string());
  ByteReader r(std::string_view(bytes).substr(0, bytes.size() - 8), path.string());
  r.raw(4);
  const std::uint16_t version = r.u16();
  if (version != kCheckpointVersion) {
    throw ParseError(path.string() + ": unsupported checkpoint version " + std::to_string(version));
  }
  Checkpoint<S> ck;
  ModelConfig cfg = read_config(r);
  ck.epochs_completed = r.u32();
  ck.global_step = r.u64();
  try {
    ck.params = ModelParams<S>::init(cfg, 0);
  } catch (const ConfigError& e) {
    throw ParseError(path.string() + ": invalid config header: " + e.what());
  }

  NamedTensors<S> named = ck.params.named_parameters();
  std::map<std::string, Tensor<S>> by_name;
  for (auto& [name, t] : named) by_name.emplace(name, t);
  std::set<std::string> filled;

  const std::uint32_t count = r.u32();
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::uint16_t name_len = r.u16();
    const std::string name(r.raw(name_len));
    const std::uint32_t rank = r.u32();
    Shape shape;
    for (std::uint32_t j = 0; j < rank; ++j) shape.push_back(static_cast<int>(r.u32()));
    std::vector<S> values(shape_numel(shape));
    for (auto& v : values) v = static_cast<S>(r.f32());

    if (name.starts_with("opt.")) {
      ck.extra.emplace_back(name, Tensor<S>::from_values(shape, std::move(values)));
      continue;
    }
    auto it = by_name.find(name);
    if (it == by_name.end()) {
      throw ParseError(path.string() + ": unknown parameter tensor '" + name + "'");
    }
    if (it->second.shape() != shape) {
      throw ParseError(path.string() + ": tensor '" + name + "' has shape " + shape_str(shape) +
                       ", model expects " + shape_str(it->second.shape()));
    }
    std::copy(values.begin(), values.end(), it->second.values().begin());
    filled.insert(name);
  }
  r.expect_end();
  if (filled.size() != by_name.size()) {
    for (const auto& [name, t] : by_name) {
      if (!filled.contains(name)) {
        throw ParseError(path.string() + ": missing parameter tensor '" + name + "'");
      }
    }
  }
  ck.params.set_requires_grad(requires_grad);
  return ck;
}

ModelConfig peek_checkpoint_config(const std::filesystem::path& path) {
  const std::string bytes = read_binary_file(path);
  verify_magic_and_checksum(bytes, path.string());
  ByteReader r(std::string_view(bytes).substr(0, bytes.size() - 8), path.string());
  r.raw(4);
  const std::uint16_t version = r.u16();
  if (version != kCheckpointVersion) {
    throw ParseError(path.string() + ": unsupported checkpoint version " + std::to_string(version));
  }
  return read_config(r);
}

#define TACT_INSTANTIATE(S)                                                                        \
  template struct ModelParams<S>;                                                                  \
  template std::vector<Tensor<S>> sample_to_streams<S>(const ModalitySample&, const ModelConfig&); \
  template BlockResult<S> block_forward<S>(Tape<S>&, const BlockParams<S>&, const ModelConfig&,    \
                                           const std::vector<Tensor<S>>&,                          \
                                           const std::vector<Tensor<S>>&, bool, ForwardDebug*);    \
  template ForwardOutput<S> model_forward<S>(Tape<S>&, const ModelParams<S>&,                      \
                                             const std::vector<Tensor<S>>&, ForwardDebug*);        \
  template ForwardOutput<S> model_forward_branched<S>(Tape<S>&, const ModelParams<S>&,             \
                                                      const std::vector<Tensor<S>>&,               \
                                                      const std::vector<Tensor<S>>&,               \
                                                      ForwardDebug*);                              \
  template void save_checkpoint<S>(const std::filesystem::path&, const ModelParams<S>&,            \
                                   std::uint32_t, std::uint64_t, const NamedTensors<S>&);          \
  template Checkpoint<S> load_checkpoint<S>(const std::filesystem::path&, bool);

TACT_INSTANTIATE(float)
TACT_INSTANTIATE(double)

#undef TACT_INSTANTIATE

}  // namespace tact
