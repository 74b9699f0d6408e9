#include "tact/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <sstream>

#include <json.hpp>

#include "tact/io.hpp"

namespace tact {

std::vector<double> softmax_vec(std::span<const double> logits) {
  std::vector<double> out(logits.size());
  double mx = logits[0];
  for (double v : logits) mx = std::max(mx, v);
  double sum = 0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    out[i] = std::exp(logits[i] - mx);
    sum += out[i];
  }
  for (auto& v : out) v /= sum;
  return out;
}

std::vector<int> tie_break_topk(std::span<const double> scores, int k) {
  const int c = static_cast<int>(scores.size());
  const int kk = std::min(k, c);
  std::vector<int> order(static_cast<std::size_t>(c));
  std::iota(order.begin(), order.end(), 0);
  std::partial_sort(order.begin(), order.begin() + kk, order.end(), [&scores](int a, int b) {
    if (scores[static_cast<std::size_t>(a)] != scores[static_cast<std::size_t>(b)]) {
      return scores[static_cast<std::size_t>(a)] > scores[static_cast<std::size_t>(b)];
    }
    return a < b;
  });
  order.resize(static_cast<std::size_t>(kk));
  return order;
}

std::vector<ClassRecall> topk_recall_per_class(const std::vector<std::vector<double>>& scores,
                                               const std::vector<int>& targets, int k,
                                               std::span<const int> class_set) {
  if (k < 1) throw ConfigError("topk_recall: k must be >= 1");
  if (scores.size() != targets.size()) {
    throw ShapeError("topk_recall: " + std::to_string(scores.size()) + " rows vs " +
                     std::to_string(targets.size()) + " targets");
  }
  if (!scores.empty() && k > static_cast<int>(scores[0].size())) {
    throw ConfigError("topk_recall: k=" + std::to_string(k) + " exceeds " +
                      std::to_string(scores[0].size()) + " classes");
  }
  std::map<int, std::pair<int, int>> per_class;  // cls -> (instances, hits)
  for (int cls : class_set) per_class.emplace(cls, std::make_pair(0, 0));
  for (std::size_t r = 0; r < scores.size(); ++r) {
    auto it = per_class.find(targets[r]);
    if (it == per_class.end()) continue;
    it->second.first += 1;
    const auto top = tie_break_topk(scores[r], k);
    if (std::find(top.begin(), top.end(), targets[r]) != top.end()) it->second.second += 1;
  }
  std::vector<ClassRecall> out;
  for (const auto& [cls, counts] : per_class) {
    if (counts.first == 0) continue;
    out.push_back({cls, counts.first, static_cast<double>(counts.second) / counts.first});
  }
  return out;
}

std::optional<double> mean_topk_recall(const std::vector<std::vector<double>>& scores,
                                       const std::vector<int>& targets, int k,
                                       std::span<const int> class_set) {
  const auto per_class = topk_recall_per_class(scores, targets, k, class_set);
  if (per_class.empty()) return std::nullopt;
  double sum = 0;
  for (const auto& c : per_class) sum += c.recall;
  return sum / static_cast<double>(per_class.size());
}

double top1_accuracy(const std::vector<std::vector<double>>& scores,
                     const std::vector<int>& targets) {
  if (scores.empty()) return 0.0;
  int hits = 0;
  for (std::size_t r = 0; r < scores.size(); ++r) {
    if (tie_break_topk(scores[r], 1)[0] == targets[r]) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(scores.size());
}

ActionScoreMode parse_action_score_mode(std::string_view name) {
  if (name == "head") return ActionScoreMode::head;
  if (name == "product") return ActionScoreMode::product;
  throw ConfigError("unknown action score mode '" + std::string(name) +
                    "' (expected head or product)");
}

std::string_view action_score_mode_name(ActionScoreMode m) {
  return m == ActionScoreMode::head ? "head" : "product";
}

std::vector<double> action_scores(std::span<const double> verb_probs,
                                  std::span<const double> noun_probs,
                                  std::span<const double> action_logits, ActionScoreMode mode,
                                  const ActionSpace& space) {
  if (mode == ActionScoreMode::head) return softmax_vec(action_logits);
  std::vector<double> out(action_logits.size(), 0.0);
  double total = 0;
  for (std::size_t a = 0; a < out.size() && a < space.action_to_pair.size(); ++a) {
    const auto& [v, n] = space.action_to_pair[a];
    if (v < 0) continue;  // action unobserved in training: no table entry
    out[a] = verb_probs[static_cast<std::size_t>(v)] * noun_probs[static_cast<std::size_t>(n)];
    total += out[a];
  }
  if (total > 0) {
    for (auto& x : out) x /= total;
  }
  return out;
}

template <typename S>
SampleScores predict_sample(const ModelParams<S>& params, const ModalitySample& sample,
                            ActionScoreMode mode, const ActionSpace& space) {
  Tape<S> tape;
  const auto streams = sample_to_streams<S>(sample, params.config);
  ForwardOutput<S> out = model_forward(tape, params, streams);
  auto to_double = [](const Tensor<S>& t) {
    return std::vector<double>(t.values().begin(), t.values().end());
  };
  SampleScores sc;
  sc.verb = softmax_vec(to_double(out.verb_logits.back()));
  sc.noun = softmax_vec(to_double(out.noun_logits.back()));
  sc.action = action_scores(sc.verb, sc.noun, to_double(out.action_logits), mode, space);
  return sc;
}

template <typename S>
TaskScores ensemble_scores(const std::vector<ModelParams<S>>& models, const Dataset& dataset,
                           std::span<const int> idx, ActionScoreMode mode) {
  if (models.empty()) throw ConfigError("ensemble: need at least one model");
  for (const auto& m : models) {
    if (m.config.n_verbs != models[0].config.n_verbs ||
        m.config.n_nouns != models[0].config.n_nouns ||
        m.config.n_actions != models[0].config.n_actions) {
      throw ConfigError("ensemble: model vocabularies disagree");
    }
  }
  TaskScores ts;
  const double inv = 1.0 / static_cast<double>(models.size());
  for (int i : idx) {
    const auto& sample = dataset.samples[static_cast<std::size_t>(i)];
    std::vector<double> verb, noun, action;
    for (const auto& m : models) {
      SampleScores sc = predict_sample(m, sample, mode, dataset.space);
      if (verb.empty()) {
        verb = std::move(sc.verb);
        noun = std::move(sc.noun);
        action = std::move(sc.action);
      } else {
        for (std::size_t j = 0; j < verb.size(); ++j) verb[j] += sc.verb[j];
        for (std::size_t j = 0; j < noun.size(); ++j) noun[j] += sc.noun[j];
        for (std::size_t j = 0; j < action.size(); ++j) action[j] += sc.action[j];
      }
    }
    for (auto& v : verb) v *= inv;
    for (auto& v : noun) v *= inv;
    for (auto& v : action) v *= inv;
    ts.verb.push_back(std::move(verb));
    ts.noun.push_back(std::move(noun));
    ts.action.push_back(std::move(action));
  }
  return ts;
}

namespace {

std::vector<int> all_classes(int n) {
  std::vector<int> v(static_cast<std::size_t>(n));
  std::iota(v.begin(), v.end(), 0);
  return v;
}

std::vector<int> tail_classes(const std::vector<std::uint8_t>& mask) {
  std::vector<int> v;
  for (std::size_t i = 0; i < mask.size(); ++i) {
    if (mask[i]) v.push_back(static_cast<int>(i));
  }
  return v;
}

}  // namespace

template <typename S>
EvalReport evaluate_models(const std::vector<ModelParams<S>>& models, const Dataset& dataset,
                           std::span<const int> eval_idx, ActionScoreMode mode, int k) {
  if (eval_idx.empty()) throw ConfigError("evaluate: eval split is empty");
  const ActionSpace& space = dataset.space;
  TaskScores scores = ensemble_scores(models, dataset, eval_idx, mode);
  EvalPartitions parts = partition_eval(dataset.samples, eval_idx, space);

  std::map<int, int> row_of;  // dataset index -> score row
  for (std::size_t r = 0; r < eval_idx.size(); ++r) row_of[eval_idx[r]] = static_cast<int>(r);

  EvalReport report;
  report.k = k;
  report.n_models = static_cast<int>(models.size());
  report.n_samples = static_cast<int>(eval_idx.size());
  report.mode = std::string(action_score_mode_name(mode));

  const std::array<const std::vector<std::vector<double>>*, 3> task_scores = {
      &scores.verb, &scores.noun, &scores.action};
  for (int t = 0; t < 3; ++t) {
    const Task task = static_cast<Task>(t);
    std::vector<int> targets;
    targets.reserve(eval_idx.size());
    for (int i : eval_idx) {
      const auto& s = dataset.samples[static_cast<std::size_t>(i)];
      targets.push_back(task == Task::verb ? s.verb : task == Task::noun ? s.noun : s.action);
    }
    const auto& rows = *task_scores[static_cast<std::size_t>(t)];

    auto fill_cell = [&](int partition, std::span<const int> sample_subset,
                         std::span<const int> class_set) {
      std::vector<std::vector<double>> sub_scores;
      std::vector<int> sub_targets;
      for (int i : sample_subset) {
        const int r = row_of.at(i);
        sub_scores.push_back(rows[static_cast<std::size_t>(r)]);
        sub_targets.push_back(targets[static_cast<std::size_t>(r)]);
      }
      EvalCell& cell = report.cells[static_cast<std::size_t>(partition)][static_cast<std::size_t>(t)];
      cell.n_samples = static_cast<int>(sample_subset.size());
      if (sub_scores.empty() || class_set.empty()) return;
      const auto per_class = topk_recall_per_class(sub_scores, sub_targets, k, class_set);
      if (per_class.empty()) return;
      double sum = 0;
      for (const auto& c : per_class) sum += c.recall;
      cell.present = true;
      cell.n_classes = static_cast<int>(per_class.size());
      cell.value_pct = 100.0 * sum / static_cast<double>(per_class.size());
    };

    const auto all = all_classes(space.n_classes(task));
    fill_cell(0, parts.overall, all);
    fill_cell(1, parts.unseen, all);
    fill_cell(2, parts.tail[static_cast<std::size_t>(t)], tail_classes(space.tail(task)));
  }
  return report;
}

std::string render_report_table(std::span<const std::pair<std::string, EvalReport>> rows) {
  std::ostringstream os;
  os << "Mean Top-" << (rows.empty() ? 5 : rows[0].second.k) << " Recall (%)\n";
  os << "  overall: all eval samples; unseen: samples of participants absent from train;\n";
  os << "  tail: class set restricted to classes below the train-frequency threshold\n\n";
  std::size_t label_w = std::string("method").size();
  for (const auto& [label, rep] : rows) label_w = std::max(label_w, label.size());

  auto pad = [&os](const std::string& s, std::size_t w) {
    os << s;
    for (std::size_t i = s.size(); i < w; ++i) os << ' ';
  };
  pad("method", label_w + 2);
  for (const char* part : {"Overall (%)", "Unseen (%)", "Tail (%)"}) {
    pad(part, 24);
  }
  os << '\n';
  pad("", label_w + 2);
  for (int p = 0; p < 3; ++p) {
    pad("Verb", 8);
    pad("Noun", 8);
    pad("Action", 8);
  }
  os << '\n';
  for (const auto& [label, rep] : rows) {
    pad(label, label_w + 2);
    for (int p = 0; p < 3; ++p) {
      for (int t = 0; t < 3; ++t) {
        const EvalCell& c = rep.cells[static_cast<std::size_t>(p)][static_cast<std::size_t>(t)];
        char buf[16];
        if (c.present) {
          std::snprintf(buf, sizeof(buf), "%.2f", c.value_pct);
        } else {
          std::snprintf(buf, sizeof(buf), "--");
        }
        pad(buf, 8);
      }
    }
    os << '\n';
  }
  return os.str();
}

void write_report_json(const std::filesystem::path& path,
                       std::span<const std::pair<std::string, EvalReport>> rows) {
  nlohmann::ordered_json root = nlohmann::ordered_json::array();
  for (const auto& [label, rep] : rows) {
    nlohmann::ordered_json entry;
    entry["method"] = label;
    entry["k"] = rep.k;
    entry["n_models"] = rep.n_models;
    entry["n_samples"] = rep.n_samples;
    entry["action_mode"] = rep.mode;
    for (int p = 0; p < 3; ++p) {
      for (int t = 0; t < 3; ++t) {
        const EvalCell& c = rep.cells[static_cast<std::size_t>(p)][static_cast<std::size_t>(t)];
        nlohmann::ordered_json cell;
        cell["present"] = c.present;
        if (c.present) cell["mean_topk_recall_pct"] = c.value_pct;
        cell["n_classes"] = c.n_classes;
        cell["n_samples"] = c.n_samples;
        entry[std::string(EvalReport::kPartitions[static_cast<std::size_t>(p)])]
             [std::string(kTaskNames[static_cast<std::size_t>(t)])] = cell;
      }
    }
    root.push_back(std::move(entry));
  }
  write_binary_file(path, root.dump(2) + "\n");
}

#define TACT_INSTANTIATE(S)                                                                      \
  template SampleScores predict_sample<S>(const ModelParams<S>&, const ModalitySample&,         \
                                          ActionScoreMode, const ActionSpace&);                 \
  template TaskScores ensemble_scores<S>(const std::vector<ModelParams<S>>&, const Dataset&,    \
                                         std::span<const int>, ActionScoreMode);                \
  template EvalReport evaluate_models<S>(const std::vector<ModelParams<S>>&, const Dataset&,    \
                                         std::span<const int>, ActionScoreMode, int);

TACT_INSTANTIATE(float)
TACT_INSTANTIATE(double)

#undef TACT_INSTANTIATE

}  // namespace tact
