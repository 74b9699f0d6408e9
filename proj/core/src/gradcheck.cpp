#include "tact/gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "tact/attention.hpp"
#include "tact/losses.hpp"
#include "tact/model.hpp"

namespace tact {

namespace {

Tensor<double> rand_tensor(const Shape& shape, Rng& rng, double lo, double hi,
                           bool requires_grad = true) {
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = rng.uniform(lo, hi);
  return Tensor<double>::from_values(shape, std::move(v), requires_grad);
}

// Values bounded away from zero, for the relu kink.
Tensor<double> rand_tensor_nonzero(const Shape& shape, Rng& rng) {
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) {
    const double mag = rng.uniform(0.2, 1.5);
    x = rng.bernoulli(0.5) ? mag : -mag;
  }
  return Tensor<double>::from_values(shape, std::move(v), true);
}

// Weighted sum against a fixed random matrix, so every output coordinate is
// probed with a distinct sensitivity.
Tensor<double> weighted_sum(Tape<double>& tape, const Tensor<double>& x, const Tensor<double>& r) {
  return sum_all(tape, mul(tape, x, r));
}

struct CaseBuilder {
  GradCheckOptions opts;
  Rng shape_rng;
  Rng probe_rng;
  std::vector<GradCheckCase> results;

  explicit CaseBuilder(const GradCheckOptions& o)
      : opts(o), shape_rng(Rng::mix(o.seed, "shapes")), probe_rng(Rng::mix(o.seed, "probes")) {}

  // fn(shape_rng) -> (leaves, loss closure)
  using CaseFn = std::function<std::pair<std::vector<Tensor<double>>,
                                         std::function<Tensor<double>(Tape<double>&)>>(Rng&)>;

  void run(const std::string& name, int shapes, const CaseFn& make) {
    GradCheckCase c;
    c.name = name;
    c.shapes = shapes;
    for (int s = 0; s < shapes; ++s) {
      auto [leaves, fn] = make(shape_rng);
      int probes = 0;
      const double err = finite_difference_check(std::move(leaves), fn, opts, probe_rng,
                                                 opts.max_probes_per_case, &probes);
      c.max_rel_err = std::max(c.max_rel_err, err);
      c.probes += probes;
    }
    results.push_back(std::move(c));
  }
};

}  // namespace

double finite_difference_check(std::vector<Tensor<double>> leaves,
                               const std::function<Tensor<double>(Tape<double>&)>& loss_fn,
                               const GradCheckOptions& opts, Rng& probe_rng, int max_probes,
                               int* probes_out) {
  for (auto& t : leaves) t.clear_grad();
  std::vector<std::vector<double>> analytic(leaves.size());
  {
    Tape<double> tape;
    Tensor<double> loss = loss_fn(tape);
    tape.backward(loss);
    for (std::size_t i = 0; i < leaves.size(); ++i) {
      analytic[i].assign(leaves[i].size(), 0.0);
      if (leaves[i].has_grad()) {
        std::copy(leaves[i].grad().begin(), leaves[i].grad().end(), analytic[i].begin());
      }
    }
  }

  std::vector<std::pair<std::size_t, std::size_t>> coords;
  for (std::size_t i = 0; i < leaves.size(); ++i) {
    for (std::size_t j = 0; j < leaves[i].size(); ++j) coords.emplace_back(i, j);
  }
  if (static_cast<int>(coords.size()) > max_probes) {
    probe_rng.shuffle(coords);
    coords.resize(static_cast<std::size_t>(max_probes));
  }

  double max_rel = 0.0;
  for (const auto& [i, j] : coords) {
    double& slot = leaves[i].values()[j];
    const double saved = slot;
    slot = saved + opts.h;
    double plus;
    {
      Tape<double> tape;
      plus = loss_fn(tape).item();
    }
    slot = saved - opts.h;
    double minus;
    {
      Tape<double> tape;
      minus = loss_fn(tape).item();
    }
    slot = saved;
    const double fd = (plus - minus) / (2.0 * opts.h);
    const double a = analytic[i][j];
    const double denom = std::max({std::fabs(a), std::fabs(fd), opts.denom_floor});
    max_rel = std::max(max_rel, std::fabs(a - fd) / denom);
  }
  if (probes_out) *probes_out = static_cast<int>(coords.size());
  return max_rel;
}

std::vector<GradCheckCase> run_gradcheck(const GradCheckOptions& opts) {
  CaseBuilder b(opts);
  const int ns = opts.shapes_per_op;

  b.run("matmul", ns, [](Rng& rng) {
    const int m = 1 + rng.uniform_int(4), k = 1 + rng.uniform_int(4), p = 1 + rng.uniform_int(4);
    auto a = rand_tensor({m, k}, rng, -2, 2);
    auto bb = rand_tensor({k, p}, rng, -2, 2);
    auto r = rand_tensor({m, p}, rng, -1, 1, false);
    return std::make_pair(std::vector<Tensor<double>>{a, bb},
                          std::function<Tensor<double>(Tape<double>&)>(
                              [a, bb, r](Tape<double>& tape) {
                                return weighted_sum(tape, matmul(tape, a, bb), r);
                              }));
  });

  b.run("transpose_last_two", ns, [](Rng& rng) {
    const int m = 1 + rng.uniform_int(4), n = 1 + rng.uniform_int(4);
    auto x = rand_tensor({m, n}, rng, -2, 2);
    auto r = rand_tensor({n, m}, rng, -1, 1, false);
    return std::make_pair(std::vector<Tensor<double>>{x},
                          std::function<Tensor<double>(Tape<double>&)>(
                              [x, r](Tape<double>& tape) {
                                return weighted_sum(tape, transpose_last_two(tape, x), r);
                              }));
  });

  b.run("add", ns, [](Rng& rng) {
    const int m = 1 + rng.uniform_int(4), n = 1 + rng.uniform_int(4);
    auto x = rand_tensor({m, n}, rng, -2, 2);
    auto y = rand_tensor({m, n}, rng, -2, 2);
    auto r = rand_tensor({m, n}, rng, -1, 1, false);
    return std::make_pair(std::vector<Tensor<double>>{x, y},
                          std::function<Tensor<double>(Tape<double>&)>(
                              [x, y, r](Tape<double>& tape) {
                                return weighted_sum(tape, add(tape, x, y), r);
                              }));
  });

  b.run("add_bias", ns, [](Rng& rng) {
    const int m = 1 + rng.uniform_int(4), n = 1 + rng.uniform_int(4);
    auto x = rand_tensor({m, n}, rng, -2, 2);
    auto bias = rand_tensor({n}, rng, -2, 2);
    auto r = rand_tensor({m, n}, rng, -1, 1, false);
    return std::make_pair(std::vector<Tensor<double>>{x, bias},
                          std::function<Tensor<double>(Tape<double>&)>(
                              [x, bias, r](Tape<double>& tape) {
                                return weighted_sum(tape, add(tape, x, bias), r);
                              }));
  });

  b.run("mul", ns, [](Rng& rng) {
    const int m = 1 + rng.uniform_int(4), n = 1 + rng.uniform_int(4);
    auto x = rand_tensor({m, n}, rng, -2, 2);
    auto y = rand_tensor({m, n}, rng, -2, 2);
    auto r = rand_tensor({m, n}, rng, -1, 1, false);
    return std::make_pair(std::vector<Tensor<double>>{x, y},
                          std::function<Tensor<double>(Tape<double>&)>(
                              [x, y, r](Tape<double>& tape) {
                                return weighted_sum(tape, mul(tape, x, y), r);
                              }));
  });

  b.run("scale", ns, [](Rng& rng) {
    const int m = 1 + rng.uniform_int(4), n = 1 + rng.uniform_int(4);
    auto x = rand_tensor({m, n}, rng, -2, 2);
    auto r = rand_tensor({m, n}, rng, -1, 1, false);
    const double c = rng.uniform(-3, 3);
    return std::make_pair(std::vector<Tensor<double>>{x},
                          std::function<Tensor<double>(Tape<double>&)>(
                              [x, r, c](Tape<double>& tape) {
                                return weighted_sum(tape, scale(tape, x, c), r);
                              }));
  });

  b.run("relu", ns, [](Rng& rng) {
    const int m = 1 + rng.uniform_int(4), n = 1 + rng.uniform_int(4);
    auto x = rand_tensor_nonzero({m, n}, rng);
    auto r = rand_tensor({m, n}, rng, -1, 1, false);
    return std::make_pair(std::vector<Tensor<double>>{x},
                          std::function<Tensor<double>(Tape<double>&)>(
                              [x, r](Tape<double>& tape) {
                                return weighted_sum(tape, relu(tape, x), r);
                              }));
  });

  b.run("softmax_rows", ns, [](Rng& rng) {
    const int m = 1 + rng.uniform_int(4), n = 2 + rng.uniform_int(4);
    auto x = rand_tensor({m, n}, rng, -2, 2);
    auto r = rand_tensor({m, n}, rng, -1, 1, false);
    return std::make_pair(std::vector<Tensor<double>>{x},
                          std::function<Tensor<double>(Tape<double>&)>(
                              [x, r](Tape<double>& tape) {
                                return weighted_sum(tape, softmax_rows(tape, x), r);
                              }));
  });

  b.run("layer_norm", ns, [](Rng& rng) {
    const int m = 1 + rng.uniform_int(4), n = 2 + rng.uniform_int(5);
    auto x = rand_tensor({m, n}, rng, -2, 2);
    auto gain = rand_tensor({n}, rng, 0.5, 1.5);
    auto bias = rand_tensor({n}, rng, -0.5, 0.5);
    auto r = rand_tensor({m, n}, rng, -1, 1, false);
    return std::make_pair(std::vector<Tensor<double>>{x, gain, bias},
                          std::function<Tensor<double>(Tape<double>&)>(
                              [x, gain, bias, r](Tape<double>& tape) {
                                return weighted_sum(tape, layer_norm(tape, x, gain, bias, 1e-5), r);
                              }));
  });

  b.run("concat", ns, [](Rng& rng) {
    const int axis = rng.uniform_int(2);
    const int m = 1 + rng.uniform_int(3), n = 1 + rng.uniform_int(3);
    Shape s1{m, n}, s2{m, n};
    s2[static_cast<std::size_t>(axis)] = 1 + rng.uniform_int(3);
    auto x = rand_tensor(s1, rng, -2, 2);
    auto y = rand_tensor(s2, rng, -2, 2);
    Shape so = s1;
    so[static_cast<std::size_t>(axis)] += s2[static_cast<std::size_t>(axis)];
    auto r = rand_tensor(so, rng, -1, 1, false);
    return std::make_pair(std::vector<Tensor<double>>{x, y},
                          std::function<Tensor<double>(Tape<double>&)>(
                              [x, y, r, axis](Tape<double>& tape) {
                                return weighted_sum(tape, concat(tape, {x, y}, axis), r);
                              }));
  });

  b.run("split", ns, [](Rng& rng) {
    const int axis = rng.uniform_int(2);
    Shape s{2 + rng.uniform_int(3), 2 + rng.uniform_int(3)};
    const int extent = s[static_cast<std::size_t>(axis)];
    const int cut = 1 + rng.uniform_int(extent - 1);
    auto x = rand_tensor(s, rng, -2, 2);
    Shape sa = s, sb = s;
    sa[static_cast<std::size_t>(axis)] = cut;
    sb[static_cast<std::size_t>(axis)] = extent - cut;
    auto ra = rand_tensor(sa, rng, -1, 1, false);
    auto rb = rand_tensor(sb, rng, -1, 1, false);
    std::vector<int> sizes{cut, extent - cut};
    return std::make_pair(std::vector<Tensor<double>>{x},
                          std::function<Tensor<double>(Tape<double>&)>(
                              [x, ra, rb, sizes, axis](Tape<double>& tape) {
                                auto parts = split(tape, x, sizes, axis);
                                return add(tape, weighted_sum(tape, parts[0], ra),
                                           weighted_sum(tape, parts[1], rb));
                              }));
  });

  b.run("mean_over_axis", ns, [](Rng& rng) {
    const int axis = rng.uniform_int(2);
    Shape s{1 + rng.uniform_int(4), 1 + rng.uniform_int(4)};
    auto x = rand_tensor(s, rng, -2, 2);
    Shape so{s[static_cast<std::size_t>(1 - axis)]};
    auto r = rand_tensor(so, rng, -1, 1, false);
    return std::make_pair(std::vector<Tensor<double>>{x},
                          std::function<Tensor<double>(Tape<double>&)>(
                              [x, r, axis](Tape<double>& tape) {
                                return weighted_sum(tape, mean_over_axis(tape, x, axis), r);
                              }));
  });

  b.run("reshape", ns, [](Rng& rng) {
    const int m = 1 + rng.uniform_int(4), n = 1 + rng.uniform_int(4);
    auto x = rand_tensor({m, n}, rng, -2, 2);
    auto r = rand_tensor({m * n}, rng, -1, 1, false);
    return std::make_pair(std::vector<Tensor<double>>{x},
                          std::function<Tensor<double>(Tape<double>&)>(
                              [x, r, m, n](Tape<double>& tape) {
                                return weighted_sum(tape, reshape(tape, x, {m * n}), r);
                              }));
  });

  b.run("cross_entropy", ns, [](Rng& rng) {
    const int bsz = 1 + rng.uniform_int(4), c = 2 + rng.uniform_int(6);
    auto logits = rand_tensor({bsz, c}, rng, -2, 2);
    std::vector<int> targets(static_cast<std::size_t>(bsz));
    for (auto& t : targets) t = rng.uniform_int(c);
    return std::make_pair(std::vector<Tensor<double>>{logits},
                          std::function<Tensor<double>(Tape<double>&)>(
                              [logits, targets](Tape<double>& tape) {
                                return cross_entropy(tape, logits, targets);
                              }));
  });

  b.run("equalization_loss", ns, [](Rng& rng) {
    const int bsz = 1 + rng.uniform_int(4), c = 3 + rng.uniform_int(5);
    auto logits = rand_tensor({bsz, c}, rng, -2, 2);
    std::vector<int> targets(static_cast<std::size_t>(bsz));
    for (auto& t : targets) t = rng.uniform_int(c);
    std::vector<std::int64_t> freqs(static_cast<std::size_t>(c));
    for (auto& f : freqs) f = 1 + rng.uniform_int(20);
    EqlConfig cfg = EqlConfig::make(0.7, 0.5, freqs);
    const std::uint64_t gate_seed = rng.next_u64();
    return std::make_pair(std::vector<Tensor<double>>{logits},
                          std::function<Tensor<double>(Tape<double>&)>(
                              [logits, targets, cfg, gate_seed](Tape<double>& tape) {
                                Rng gate_rng(gate_seed);  // identical gates on every evaluation
                                return equalization_loss(tape, logits, targets, cfg, gate_rng);
                              }));
  });

  b.run("scaled_attention", ns, [](Rng& rng) {
    const int nq = 1 + rng.uniform_int(3), nk = 1 + rng.uniform_int(3);
    const int dk = 1 + rng.uniform_int(3), dv = 1 + rng.uniform_int(3);
    auto q = rand_tensor({nq, dk}, rng, -1.5, 1.5);
    auto k = rand_tensor({nk, dk}, rng, -1.5, 1.5);
    auto v = rand_tensor({nk, dv}, rng, -1.5, 1.5);
    auto r = rand_tensor({nq, dv}, rng, -1, 1, false);
    return std::make_pair(std::vector<Tensor<double>>{q, k, v},
                          std::function<Tensor<double>(Tape<double>&)>(
                              [q, k, v, r](Tape<double>& tape) {
                                return weighted_sum(tape, scaled_attention(tape, q, k, v), r);
                              }));
  });

  b.run("multi_head_attention", ns, [](Rng& rng) {
    const int n = 2 + rng.uniform_int(3);
    const int heads = 1 + rng.uniform_int(2);
    const int d_in = heads * (2 + rng.uniform_int(2));
    AttentionParams<double> p = AttentionParams<double>::init(d_in, d_in, d_in, heads, rng);
    auto x = rand_tensor({n, d_in}, rng, -1.5, 1.5);
    auto r = rand_tensor({n, d_in}, rng, -1, 1, false);
    std::vector<Tensor<double>> leaves{x, p.w_q, p.w_k, p.w_v, p.w_o};
    return std::make_pair(std::move(leaves),
                          std::function<Tensor<double>(Tape<double>&)>(
                              [x, p, r](Tape<double>& tape) {
                                return weighted_sum(tape, multi_head_attention(tape, x, x, p), r);
                              }));
  });

  b.run("encoder_layer", ns, [](Rng& rng) {
    const int n = 2 + rng.uniform_int(3);
    const int heads = 1 + rng.uniform_int(2);
    const int d_in = 2 * heads * (1 + rng.uniform_int(2));  // even, divisible by heads
    EncoderLayerParams<double> p = EncoderLayerParams<double>::init(d_in, heads, 0, rng);
    auto x = rand_tensor({n, d_in}, rng, -1.5, 1.5);
    auto r = rand_tensor({n, d_in}, rng, -1, 1, false);
    const bool add_pe = rng.bernoulli(0.5);
    std::vector<Tensor<double>> leaves{x};
    NamedTensors<double> named;
    p.collect("p", named);
    for (auto& [name, t] : named) leaves.push_back(t);
    return std::make_pair(std::move(leaves),
                          std::function<Tensor<double>(Tape<double>&)>(
                              [x, p, r, add_pe](Tape<double>& tape) {
                                return weighted_sum(tape, encoder_layer(tape, x, p, add_pe), r);
                              }));
  });

  // Full cascade, composite loss, probes over the parameters.
  {
    GradCheckCase c;
    c.name = "model_end_to_end";
    c.shapes = 1;
    ModelConfig cfg;
    cfg.d_rgb = cfg.d_flow = cfg.d_obj = 8;
    cfg.n_frames = 4;
    cfg.n_blocks = 2;
    cfg.heads = 2;
    cfg.n_verbs = 5;
    cfg.n_nouns = 7;
    cfg.n_actions = 11;
    ModelParams<double> params = ModelParams<double>::init(cfg, Rng::mix(opts.seed, "model"));

    Rng data_rng(Rng::mix(opts.seed, "model_data"));
    std::vector<Tensor<double>> streams;
    for (int d : cfg.active_dims()) {
      streams.push_back(rand_tensor({cfg.n_frames, d}, data_rng, -1, 1, false));
    }
    const std::vector<int> verb_t{static_cast<int>(data_rng.uniform_int(cfg.n_verbs))};
    const std::vector<int> noun_t{static_cast<int>(data_rng.uniform_int(cfg.n_nouns))};
    const std::vector<int> action_t{static_cast<int>(data_rng.uniform_int(cfg.n_actions))};
    HeadLossConfigs lcfgs;
    std::vector<std::int64_t> vf(static_cast<std::size_t>(cfg.n_verbs), 4);
    vf[0] = 1;
    std::vector<std::int64_t> nf(static_cast<std::size_t>(cfg.n_nouns), 4);
    nf[0] = 1;
    std::vector<std::int64_t> af(static_cast<std::size_t>(cfg.n_actions), 4);
    af[0] = 1;
    lcfgs.verb = EqlConfig::make(0.5, 0.1, vf);
    lcfgs.noun = EqlConfig::make(0.5, 0.1, nf);
    lcfgs.action = EqlConfig::make(0.5, 0.1, af);
    const std::uint64_t gate_seed = Rng::mix(opts.seed, "model_gates");

    std::vector<Tensor<double>> leaves;
    for (auto& [name, t] : params.named_parameters()) leaves.push_back(t);
    auto fn = [params, streams, verb_t, noun_t, action_t, lcfgs, gate_seed](Tape<double>& tape) {
      ForwardOutput<double> out = model_forward(tape, params, streams);
      BatchLogits<double> batch;
      batch.verb = out.verb_logits;
      batch.noun = out.noun_logits;
      batch.action = out.action_logits;
      Rng gate_rng(gate_seed);
      return composite_loss(tape, batch, verb_t, noun_t, action_t, lcfgs, gate_rng);
    };
    int probes = 0;
    c.max_rel_err =
        finite_difference_check(std::move(leaves), fn, opts, b.probe_rng, opts.model_probes, &probes);
    c.probes = probes;
    b.results.push_back(std::move(c));
  }

  return b.results;
}

}  // namespace tact
