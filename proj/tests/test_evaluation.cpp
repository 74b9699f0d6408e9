#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "tact/evaluation.hpp"
#include "tact/io.hpp"
#include "tact/rng.hpp"
#include "test_util.hpp"

using namespace tact;

namespace {

// Brute-force recomputation, independent of the library's top-k path: sort
// every (score, index) pair, walk the list.
std::vector<int> oracle_topk(const std::vector<double>& scores, int k) {
  std::vector<std::pair<double, int>> pairs;
  for (std::size_t i = 0; i < scores.size(); ++i) pairs.emplace_back(scores[i], static_cast<int>(i));
  std::stable_sort(pairs.begin(), pairs.end(), [](const auto& a, const auto& b) {
    if (a.first != b.first) return a.first > b.first;
    return a.second < b.second;
  });
  std::vector<int> out;
  for (int i = 0; i < k && i < static_cast<int>(pairs.size()); ++i) out.push_back(pairs[static_cast<std::size_t>(i)].second);
  return out;
}

double oracle_mean_recall(const std::vector<std::vector<double>>& scores,
                          const std::vector<int>& targets, int k, const std::vector<int>& classes) {
  double sum = 0;
  int n_classes = 0;
  for (int cls : classes) {
    int inst = 0, hit = 0;
    for (std::size_t r = 0; r < scores.size(); ++r) {
      if (targets[r] != cls) continue;
      ++inst;
      auto top = oracle_topk(scores[r], k);
      if (std::find(top.begin(), top.end(), cls) != top.end()) ++hit;
    }
    if (inst == 0) continue;
    ++n_classes;
    sum += static_cast<double>(hit) / inst;
  }
  return n_classes == 0 ? -1.0 : sum / n_classes;
}

std::vector<int> iota_classes(int n) {
  std::vector<int> v(static_cast<std::size_t>(n));
  std::iota(v.begin(), v.end(), 0);
  return v;
}

}  // namespace

TEST_CASE("tie-break: all-equal scores and a two-way tie") {
  CHECK(tie_break_topk(std::vector<double>{0.5, 0.5, 0.5}, 2) == std::vector<int>{0, 1});
  CHECK(tie_break_topk(std::vector<double>{0.1, 0.9, 0.9}, 1) == std::vector<int>{1});
  CHECK(tie_break_topk(std::vector<double>{0.1, 0.9, 0.9}, 2) == std::vector<int>{1, 2});
}

TEST_CASE("tie-break matches the exhaustive oracle on 1000 random rows") {
  Rng rng(404);
  for (int trial = 0; trial < 1000; ++trial) {
    const int c = 1 + rng.uniform_int(10);
    const int k = 1 + rng.uniform_int(c);
    std::vector<double> scores(static_cast<std::size_t>(c));
    // Coarse quantization forces frequent ties.
    for (auto& s : scores) s = rng.uniform_int(4) * 0.25;
    CHECK(tie_break_topk(scores, k) == oracle_topk(scores, k));
  }
}

TEST_CASE("recall@C is one for every instantiated class") {
  Rng rng(1);
  std::vector<std::vector<double>> scores;
  std::vector<int> targets;
  for (int r = 0; r < 30; ++r) {
    std::vector<double> row(6);
    for (auto& v : row) v = rng.uniform(0, 1);
    scores.push_back(row);
    targets.push_back(rng.uniform_int(6));
  }
  for (const auto& c : topk_recall_per_class(scores, targets, 6, iota_classes(6))) {
    CHECK(c.recall == 1.0);
  }
}

TEST_CASE("single class, two instances, one hit -> recall 0.5") {
  std::vector<std::vector<double>> scores = {
      {0.9, 0.05, 0.05},  // target 0 in top-1
      {0.0, 0.9, 0.1},    // target 0 outside top-1
  };
  std::vector<int> targets = {0, 0};
  auto per_class = topk_recall_per_class(scores, targets, 1, std::vector<int>{0});
  REQUIRE(per_class.size() == 1);
  CHECK(per_class[0].instances == 2);
  CHECK(per_class[0].recall == doctest::Approx(0.5));
}

TEST_CASE("macro mean over class recalls {1, 0.5, 0} is 0.5") {
  // class 0: one instance, hit; class 1: two instances, one hit; class 2: one miss.
  std::vector<std::vector<double>> scores = {
      {1.0, 0.0, 0.0},
      {0.0, 1.0, 0.0},
      {1.0, 0.0, 0.0},
      {0.0, 1.0, 0.0},
  };
  std::vector<int> targets = {0, 1, 1, 2};
  auto mean = mean_topk_recall(scores, targets, 1, iota_classes(3));
  REQUIRE(mean.has_value());
  CHECK(*mean == doctest::Approx(0.5));
}

TEST_CASE("k larger than the class count is rejected") {
  std::vector<std::vector<double>> scores = {{0.1, 0.9}};
  CHECK_THROWS_AS(topk_recall_per_class(scores, {0}, 3, iota_classes(2)), ConfigError);
}

TEST_CASE("macro semantics: duplicating one class's instances changes nothing") {
  Rng rng(17);
  std::vector<std::vector<double>> scores;
  std::vector<int> targets;
  for (int r = 0; r < 40; ++r) {
    std::vector<double> row(5);
    for (auto& v : row) v = rng.uniform(0, 1);
    scores.push_back(row);
    targets.push_back(rng.uniform_int(5));
  }
  const auto base = mean_topk_recall(scores, targets, 2, iota_classes(5));
  auto scores2 = scores;
  auto targets2 = targets;
  for (std::size_t r = 0; r < scores.size(); ++r) {
    if (targets[r] == 3) {  // duplicate every instance of class 3
      scores2.push_back(scores[r]);
      targets2.push_back(3);
    }
  }
  const auto dup = mean_topk_recall(scores2, targets2, 2, iota_classes(5));
  CHECK(*dup == doctest::Approx(*base).epsilon(1e-12));
}

TEST_CASE("recall is monotone in k and scale-invariant") {
  Rng rng(23);
  std::vector<std::vector<double>> scores;
  std::vector<int> targets;
  for (int r = 0; r < 50; ++r) {
    std::vector<double> row(7);
    for (auto& v : row) v = rng.uniform(0, 1);
    scores.push_back(row);
    targets.push_back(rng.uniform_int(7));
  }
  double prev = 0;
  for (int k = 1; k <= 7; ++k) {
    const double cur = *mean_topk_recall(scores, targets, k, iota_classes(7));
    CHECK(cur >= prev);
    prev = cur;
  }
  auto scaled = scores;
  for (auto& row : scaled) {
    for (auto& v : row) v *= 37.5;
  }
  for (std::size_t r = 0; r < scores.size(); ++r) {
    CHECK(tie_break_topk(scores[r], 3) == tie_break_topk(scaled[r], 3));
  }
}

TEST_CASE("metric matches the brute-force oracle on 1000 random instances") {
  Rng rng(808);
  for (int trial = 0; trial < 1000; ++trial) {
    const int c = 2 + rng.uniform_int(9);
    const int n = 1 + rng.uniform_int(50);
    const int k = 1 + rng.uniform_int(c);
    std::vector<std::vector<double>> scores;
    std::vector<int> targets;
    for (int r = 0; r < n; ++r) {
      std::vector<double> row(static_cast<std::size_t>(c));
      for (auto& v : row) v = rng.uniform_int(5) * 0.2;  // ties are common
      scores.push_back(std::move(row));
      targets.push_back(rng.uniform_int(c));
    }
    const auto mine = mean_topk_recall(scores, targets, k, iota_classes(c));
    const double oracle = oracle_mean_recall(scores, targets, k, iota_classes(c));
    REQUIRE(mine.has_value());
    CHECK(*mine == oracle);  // identical tie-breaking -> exact equality
  }
}

TEST_CASE("action scores: one-hot verb masses only matching actions, both modes normalize") {
  std::vector<ModalitySample> train;
  auto add = [&train](const std::string& id, int v, int n, int a) {
    ModalitySample s;
    s.sample_id = id;
    s.rgb = Tensor<float>::zeros({1, 1});
    s.flow = Tensor<float>::zeros({1, 1});
    s.obj = Tensor<float>::zeros({1, 1});
    s.verb = v;
    s.noun = n;
    s.action = a;
    s.participant_id = "P000";
    s.split = Split::train;
    train.push_back(s);
  };
  // 2 verbs x 2 nouns, 3 observed pairs.
  add("s0", 0, 0, 0);
  add("s1", 0, 1, 1);
  add("s2", 1, 0, 2);
  ActionSpace space = ActionSpace::build(train);

  const std::vector<double> verb_onehot = {1.0, 0.0};
  const std::vector<double> noun = {0.3, 0.7};
  const std::vector<double> action_logits = {0.0, 0.0, 0.0};

  auto product = action_scores(verb_onehot, noun, action_logits, ActionScoreMode::product, space);
  CHECK(product[2] == 0.0);  // verb 1 never fires
  CHECK(product[0] + product[1] == doctest::Approx(1.0).epsilon(1e-12));
  // Hand renormalization: 0.3 and 0.7 over the two verb-0 actions.
  CHECK(product[0] == doctest::Approx(0.3).epsilon(1e-12));
  CHECK(product[1] == doctest::Approx(0.7).epsilon(1e-12));

  // General hand case.
  const std::vector<double> verb2 = {0.6, 0.4};
  auto p2 = action_scores(verb2, noun, action_logits, ActionScoreMode::product, space);
  const double raw0 = 0.6 * 0.3, raw1 = 0.6 * 0.7, raw2 = 0.4 * 0.3;
  const double z = raw0 + raw1 + raw2;
  CHECK(p2[0] == doctest::Approx(raw0 / z).epsilon(1e-12));
  CHECK(p2[1] == doctest::Approx(raw1 / z).epsilon(1e-12));
  CHECK(p2[2] == doctest::Approx(raw2 / z).epsilon(1e-12));

  const std::vector<double> head_logits = {1.0, -0.5, 0.25};
  auto head = action_scores(verb2, noun, head_logits, ActionScoreMode::head, space);
  double sum = 0;
  for (double v : head) sum += v;
  CHECK(sum == doctest::Approx(1.0).epsilon(1e-6));

  CHECK_THROWS_AS(parse_action_score_mode("banana"), ConfigError);
}

TEST_CASE("report skeleton: perfect predictor reaches 100 everywhere, absent cells stay absent") {
  // Build a tiny dataset where the model is irrelevant: craft scores directly
  // through evaluate_models by training-free one-hot construction is not
  // possible, so exercise the cell logic via mean_topk_recall instead and the
  // report rendering via a hand-filled report.
  EvalReport rep;
  rep.k = 5;
  rep.n_models = 1;
  rep.n_samples = 10;
  rep.mode = "head";
  for (int p = 0; p < 3; ++p) {
    for (int t = 0; t < 3; ++t) {
      rep.cells[static_cast<std::size_t>(p)][static_cast<std::size_t>(t)] =
          p == 1 ? EvalCell{false, 0.0, 0, 0} : EvalCell{true, 100.0, 4, 10};
    }
  }
  std::vector<std::pair<std::string, EvalReport>> rows = {{"model", rep}};
  const std::string table = render_report_table(rows);
  CHECK(table.find("100.00") != std::string::npos);
  CHECK(table.find("--") != std::string::npos);
  CHECK(table.find("Overall") != std::string::npos);
  CHECK(table.find("Unseen") != std::string::npos);
  CHECK(table.find("Tail") != std::string::npos);

  test::TempDir dir("report");
  write_report_json(dir / "report.json", rows);
  const std::string json = read_binary_file(dir / "report.json");
  CHECK(json.find("\"present\": false") != std::string::npos);
  CHECK(json.find("\"mean_topk_recall_pct\": 100.0") != std::string::npos);
}
