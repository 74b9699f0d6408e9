#include "tact/losses.hpp"

#include <charconv>
#include <cmath>
#include <numeric>
#include <sstream>

#include "tact/io.hpp"

namespace tact {

namespace {

template <typename S>
void validate_targets(const Tensor<S>& logits, const std::vector<int>& targets, const char* op) {
  if (logits.rank() != 2) {
    throw ShapeError(std::string(op) + ": logits must be [B x C], got " + shape_str(logits.shape()));
  }
  if (static_cast<int>(targets.size()) != logits.dim(0)) {
    throw ShapeError(std::string(op) + ": " + std::to_string(targets.size()) + " targets for " +
                     std::to_string(logits.dim(0)) + " logit rows");
  }
  for (int t : targets) {
    if (t < 0 || t >= logits.dim(1)) {
      throw ConfigError(std::string(op) + ": target " + std::to_string(t) + " out of range [0, " +
                        std::to_string(logits.dim(1)) + ")");
    }
  }
}

}  // namespace

bool EqlConfig::is_rare(int cls) const {
  if (cls < 0 || cls >= static_cast<int>(class_frequencies.size())) {
    throw ConfigError("EqlConfig::is_rare: class " + std::to_string(cls) +
                      " outside frequency table of size " +
                      std::to_string(class_frequencies.size()));
  }
  const double total = static_cast<double>(
      std::accumulate(class_frequencies.begin(), class_frequencies.end(), std::int64_t{0}));
  if (total <= 0) return false;
  return static_cast<double>(class_frequencies[static_cast<std::size_t>(cls)]) / total < lambda;
}

EqlConfig EqlConfig::make(double gamma, double lambda, std::vector<std::int64_t> frequencies) {
  if (gamma < 0.0 || gamma > 1.0) {
    throw ConfigError("EqlConfig: gamma must be in [0, 1], got " + std::to_string(gamma));
  }
  if (lambda < 0.0) throw ConfigError("EqlConfig: lambda must be >= 0");
  EqlConfig cfg;
  cfg.gamma = gamma;
  cfg.lambda = lambda;
  cfg.class_frequencies = std::move(frequencies);
  return cfg;
}

template <typename S>
Tensor<S> cross_entropy(Tape<S>& tape, const Tensor<S>& logits, const std::vector<int>& targets) {
  validate_targets(logits, targets, "cross_entropy");
  const int b = logits.dim(0), c = logits.dim(1);
  const S* z = logits.values().data();
  S loss_sum = 0;
  for (int r = 0; r < b; ++r) {
    const S* row = z + static_cast<std::size_t>(r) * c;
    S mx = row[0];
    for (int k = 1; k < c; ++k) mx = std::max(mx, row[k]);
    S sum = 0;
    for (int k = 0; k < c; ++k) sum += std::exp(row[k] - mx);
    loss_sum += mx + std::log(sum) - row[targets[static_cast<std::size_t>(r)]];
  }
  Tensor<S> out = Tensor<S>::scalar(loss_sum / static_cast<S>(b));
  if (logits.requires_grad()) {
    out.set_requires_grad(true);
    tape.record("cross_entropy", [logits = logits, targets, out = out, b, c]() mutable {
      if (!out.has_grad()) return;
      logits.ensure_grad();
      const S g = out.grad()[0] / static_cast<S>(b);
      const S* z = logits.values().data();
      S* zg = logits.grad().data();
      for (int r = 0; r < b; ++r) {
        const S* row = z + static_cast<std::size_t>(r) * c;
        S* grow = zg + static_cast<std::size_t>(r) * c;
        S mx = row[0];
        for (int k = 1; k < c; ++k) mx = std::max(mx, row[k]);
        S sum = 0;
        for (int k = 0; k < c; ++k) sum += std::exp(row[k] - mx);
        const int t = targets[static_cast<std::size_t>(r)];
        for (int k = 0; k < c; ++k) {
          S p = std::exp(row[k] - mx) / sum;
          grow[k] += g * (p - (k == t ? S{1} : S{0}));
        }
      }
    });
  }
  return out;
}

template <typename S>
Tensor<S> gated_cross_entropy(Tape<S>& tape, const Tensor<S>& logits,
                              const std::vector<int>& targets,
                              const std::vector<std::uint8_t>& keep) {
  validate_targets(logits, targets, "equalization_loss");
  const int b = logits.dim(0), c = logits.dim(1);
  if (keep.size() != static_cast<std::size_t>(b) * static_cast<std::size_t>(c)) {
    throw ShapeError("equalization_loss: gate buffer has " + std::to_string(keep.size()) +
                     " entries, expected " + std::to_string(b * c));
  }
  for (int r = 0; r < b; ++r) {
    if (!keep[static_cast<std::size_t>(r) * c + targets[static_cast<std::size_t>(r)]]) {
      throw ConfigError("equalization_loss: target class must always be kept");
    }
  }
  const S* z = logits.values().data();
  S loss_sum = 0;
  for (int r = 0; r < b; ++r) {
    const S* row = z + static_cast<std::size_t>(r) * c;
    const std::uint8_t* krow = keep.data() + static_cast<std::size_t>(r) * c;
    S mx = row[targets[static_cast<std::size_t>(r)]];
    for (int k = 0; k < c; ++k) {
      if (krow[k]) mx = std::max(mx, row[k]);
    }
    S sum = 0;
    for (int k = 0; k < c; ++k) {
      if (krow[k]) sum += std::exp(row[k] - mx);
    }
    loss_sum += mx + std::log(sum) - row[targets[static_cast<std::size_t>(r)]];
  }
  Tensor<S> out = Tensor<S>::scalar(loss_sum / static_cast<S>(b));
  if (logits.requires_grad()) {
    out.set_requires_grad(true);
    tape.record("equalization_loss", [logits = logits, targets, keep, out = out, b, c]() mutable {
      if (!out.has_grad()) return;
      logits.ensure_grad();
      const S g = out.grad()[0] / static_cast<S>(b);
      const S* z = logits.values().data();
      S* zg = logits.grad().data();
      for (int r = 0; r < b; ++r) {
        const S* row = z + static_cast<std::size_t>(r) * c;
        const std::uint8_t* krow = keep.data() + static_cast<std::size_t>(r) * c;
        S* grow = zg + static_cast<std::size_t>(r) * c;
        const int t = targets[static_cast<std::size_t>(r)];
        S mx = row[t];
        for (int k = 0; k < c; ++k) {
          if (krow[k]) mx = std::max(mx, row[k]);
        }
        S sum = 0;
        for (int k = 0; k < c; ++k) {
          if (krow[k]) sum += std::exp(row[k] - mx);
        }
        for (int k = 0; k < c; ++k) {
          if (!krow[k]) continue;  // dropped classes receive exactly zero gradient
          S p = std::exp(row[k] - mx) / sum;
          grow[k] += g * (p - (k == t ? S{1} : S{0}));
        }
      }
    });
  }
  return out;
}

std::vector<std::uint8_t> draw_eql_gates(int batch, int classes, const std::vector<int>& targets,
                                         const EqlConfig& cfg, Rng& rng) {
  if (!cfg.class_frequencies.empty() &&
      static_cast<int>(cfg.class_frequencies.size()) != classes) {
    throw ConfigError("equalization_loss: frequency table has " +
                      std::to_string(cfg.class_frequencies.size()) + " classes, logits have " +
                      std::to_string(classes));
  }
  std::vector<std::uint8_t> keep(static_cast<std::size_t>(batch) * classes, 1);
  if (cfg.gamma <= 0.0 || cfg.lambda <= 0.0 || cfg.class_frequencies.empty()) return keep;

  const double total = static_cast<double>(std::accumulate(
      cfg.class_frequencies.begin(), cfg.class_frequencies.end(), std::int64_t{0}));
  std::vector<std::uint8_t> rare(static_cast<std::size_t>(classes), 0);
  if (total > 0) {
    for (int k = 0; k < classes; ++k) {
      rare[static_cast<std::size_t>(k)] =
          static_cast<double>(cfg.class_frequencies[static_cast<std::size_t>(k)]) / total <
                  cfg.lambda
              ? 1
              : 0;
    }
  }
  for (int r = 0; r < batch; ++r) {
    const int t = targets[static_cast<std::size_t>(r)];
    std::uint8_t* krow = keep.data() + static_cast<std::size_t>(r) * classes;
    for (int k = 0; k < classes; ++k) {
      if (k != t && rare[static_cast<std::size_t>(k)] && rng.bernoulli(cfg.gamma)) krow[k] = 0;
    }
  }
  return keep;
}

template <typename S>
Tensor<S> equalization_loss(Tape<S>& tape, const Tensor<S>& logits,
                            const std::vector<int>& targets, const EqlConfig& cfg, Rng& rng) {
  validate_targets(logits, targets, "equalization_loss");
  auto keep = draw_eql_gates(logits.dim(0), logits.dim(1), targets, cfg, rng);
  return gated_cross_entropy(tape, logits, targets, keep);
}

template <typename S>
Tensor<S> composite_loss(Tape<S>& tape, const BatchLogits<S>& logits,
                         const std::vector<int>& verb_targets,
                         const std::vector<int>& noun_targets,
                         const std::vector<int>& action_targets, const HeadLossConfigs& cfgs,
                         Rng& rng) {
  if (logits.verb.size() != logits.noun.size()) {
    throw ShapeError("composite_loss: verb/noun block counts disagree");
  }
  Tensor<S> total;
  for (std::size_t i = 0; i < logits.verb.size(); ++i) {
    Tensor<S> lv = equalization_loss(tape, logits.verb[i], verb_targets, cfgs.verb, rng);
    Tensor<S> ln = equalization_loss(tape, logits.noun[i], noun_targets, cfgs.noun, rng);
    Tensor<S> block = add(tape, lv, ln);
    total = total.defined() ? add(tape, total, block) : block;
  }
  Tensor<S> la = equalization_loss(tape, logits.action, action_targets, cfgs.action, rng);
  return total.defined() ? add(tape, total, la) : la;
}

std::vector<std::int64_t> read_frequency_table(const std::filesystem::path& path) {
  std::string text = read_binary_file(path);
  std::istringstream in(text);
  std::string line;
  std::vector<std::int64_t> counts;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    auto tab = line.find('\t');
    if (tab == std::string::npos) {
      throw ParseError(path.string() + " line " + std::to_string(line_no) +
                       ": expected 'class_index<TAB>count'");
    }
    std::int64_t idx = -1, count = -1;
    auto r1 = std::from_chars(line.data(), line.data() + tab, idx);
    auto r2 = std::from_chars(line.data() + tab + 1, line.data() + line.size(), count);
    if (r1.ec != std::errc{} || r2.ec != std::errc{} ||
        r2.ptr != line.data() + line.size() || count < 0) {
      throw ParseError(path.string() + " line " + std::to_string(line_no) + ": bad entry '" + line +
                       "'");
    }
    if (idx != static_cast<std::int64_t>(counts.size())) {
      throw ParseError(path.string() + " line " + std::to_string(line_no) + ": class index " +
                       std::to_string(idx) + " out of order, expected " +
                       std::to_string(counts.size()));
    }
    counts.push_back(count);
  }
  return counts;
}

void write_frequency_table(const std::filesystem::path& path,
                           const std::vector<std::int64_t>& counts) {
  std::ostringstream out;
  for (std::size_t i = 0; i < counts.size(); ++i) out << i << '\t' << counts[i] << '\n';
  write_binary_file(path, out.str());
}

#define TACT_INSTANTIATE(S)                                                                       \
  template Tensor<S> cross_entropy<S>(Tape<S>&, const Tensor<S>&, const std::vector<int>&);      \
  template Tensor<S> gated_cross_entropy<S>(Tape<S>&, const Tensor<S>&, const std::vector<int>&, \
                                            const std::vector<std::uint8_t>&);                   \
  template Tensor<S> equalization_loss<S>(Tape<S>&, const Tensor<S>&, const std::vector<int>&,   \
                                          const EqlConfig&, Rng&);                               \
  template Tensor<S> composite_loss<S>(Tape<S>&, const BatchLogits<S>&, const std::vector<int>&, \
                                       const std::vector<int>&, const std::vector<int>&,         \
                                       const HeadLossConfigs&, Rng&);

TACT_INSTANTIATE(float)
TACT_INSTANTIATE(double)

#undef TACT_INSTANTIATE

}  // namespace tact
