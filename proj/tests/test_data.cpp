#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <set>

#include "tact/data.hpp"
#include "tact/io.hpp"
#include "tact/losses.hpp"
#include "tact/rng.hpp"
#include "test_util.hpp"

using namespace tact;

namespace {

ModalitySample make_sample(const std::string& id, int verb, int noun, int action, Split split,
                           const std::string& participant = "P000", int n = 2) {
  ModalitySample s;
  s.sample_id = id;
  s.rgb = Tensor<float>::full({n, 3}, 0.5f);
  s.flow = Tensor<float>::full({n, 2}, -1.25f);
  s.obj = Tensor<float>::full({n, 2}, 2.0f);
  s.verb = verb;
  s.noun = noun;
  s.action = action;
  s.participant_id = participant;
  s.split = split;
  return s;
}

Dataset tiny_dataset() {
  Dataset ds;
  ds.n_frames = 2;
  ds.d_rgb = 3;
  ds.d_flow = 2;
  ds.d_obj = 2;
  ds.samples = {
      make_sample("a0", 0, 0, 0, Split::train), make_sample("a1", 0, 0, 0, Split::train),
      make_sample("a2", 0, 0, 0, Split::train), make_sample("a3", 0, 0, 0, Split::train),
      make_sample("a4", 0, 0, 0, Split::train), make_sample("a5", 0, 0, 0, Split::train),
      make_sample("b0", 1, 1, 1, Split::train), make_sample("b1", 1, 1, 1, Split::train),
      make_sample("b2", 1, 1, 1, Split::train), make_sample("c0", 2, 2, 2, Split::train),
      make_sample("v0", 0, 0, 0, Split::val, "P009"), make_sample("v1", 2, 2, 2, Split::val),
  };
  ds.space = ActionSpace::build(ds.samples);
  return ds;
}

}  // namespace

TEST_CASE("train-split frequencies follow the counting oracle") {
  Dataset ds = tiny_dataset();
  CHECK(ds.space.verb_freq == std::vector<std::int64_t>{6, 3, 1});
  CHECK(ds.space.noun_freq == std::vector<std::int64_t>{6, 3, 1});
  CHECK(ds.space.action_freq == std::vector<std::int64_t>{6, 3, 1});
  CHECK(ds.space.n_train == 10);
  CHECK(ds.space.n_verbs == 3);
}

TEST_CASE("statistics come from the train split only") {
  Dataset ds = tiny_dataset();
  std::vector<ModalitySample> train_only;
  for (const auto& s : ds.samples) {
    if (s.split == Split::train) train_only.push_back(s);
  }
  ActionSpace sp = ActionSpace::build(train_only);
  CHECK(sp.verb_freq == ds.space.verb_freq);
  CHECK(sp.noun_freq == ds.space.noun_freq);
  CHECK(sp.action_freq == ds.space.action_freq);
  CHECK(sp.verb_tail == ds.space.verb_tail);
  CHECK(sp.action_tail == ds.space.action_tail);
}

TEST_CASE("unseen participants are those absent from train") {
  Dataset ds = tiny_dataset();
  CHECK(ds.space.unseen_participants == std::vector<std::string>{"P009"});
  CHECK(ds.space.is_unseen("P009"));
  CHECK(!ds.space.is_unseen("P000"));
}

TEST_CASE("action table is a checked bijection") {
  auto bad = tiny_dataset().samples;
  bad.push_back(make_sample("dup", 0, 1, 0, Split::train));  // action 0 with a second pair
  CHECK_THROWS_AS(ActionSpace::build(bad), ParseError);

  auto bad2 = tiny_dataset().samples;
  bad2.push_back(make_sample("inj", 0, 0, 5, Split::train));  // second action for pair (0,0)
  CHECK_THROWS_AS(ActionSpace::build(bad2), ParseError);
}

TEST_CASE("dataset file round trip is bitwise lossless") {
  test::TempDir dir("ds");
  Dataset ds = tiny_dataset();
  write_dataset(ds, dir / "f.tact", dir / "a.csv");
  Dataset loaded = load_dataset(dir / "f.tact", dir / "a.csv");
  REQUIRE(loaded.samples.size() == ds.samples.size());
  for (std::size_t i = 0; i < ds.samples.size(); ++i) {
    CHECK(loaded.samples[i].sample_id == ds.samples[i].sample_id);
    CHECK(test::bitwise_equal(loaded.samples[i].rgb, ds.samples[i].rgb));
    CHECK(test::bitwise_equal(loaded.samples[i].flow, ds.samples[i].flow));
    CHECK(test::bitwise_equal(loaded.samples[i].obj, ds.samples[i].obj));
    CHECK(loaded.samples[i].verb == ds.samples[i].verb);
    CHECK(loaded.samples[i].split == ds.samples[i].split);
    CHECK(loaded.samples[i].participant_id == ds.samples[i].participant_id);
  }
  // write -> read -> write byte-identical
  write_dataset(loaded, dir / "f2.tact", dir / "a2.csv");
  CHECK(read_binary_file(dir / "f.tact") == read_binary_file(dir / "f2.tact"));
  CHECK(read_binary_file(dir / "a.csv") == read_binary_file(dir / "a2.csv"));
}

TEST_CASE("corrupt files produce descriptive parse errors") {
  test::TempDir dir("ds_bad");
  Dataset ds = tiny_dataset();
  write_dataset(ds, dir / "f.tact", dir / "a.csv");
  const std::string bytes = read_binary_file(dir / "f.tact");

  SUBCASE("bad magic") {
    std::string bad = bytes;
    bad[0] = 'X';
    write_binary_file(dir / "bad.tact", bad);
    CHECK_THROWS_WITH_AS(load_dataset(dir / "bad.tact", dir / "a.csv"),
                         doctest::Contains("bad magic"), ParseError);
  }
  SUBCASE("truncated payload names expected and actual byte counts") {
    write_binary_file(dir / "trunc.tact", bytes.substr(0, bytes.size() - 7));
    try {
      load_dataset(dir / "trunc.tact", dir / "a.csv");
      FAIL("expected ParseError");
    } catch (const ParseError& e) {
      const std::string msg = e.what();
      CHECK(msg.find("truncated") != std::string::npos);
      CHECK(msg.find("expected") != std::string::npos);
    }
  }
  SUBCASE("negative label") {
    write_binary_file(dir / "neg.csv",
                      "sample_id,participant,verb,noun,action,split\n"
                      "a0,P000,-1,0,0,train\n");
    CHECK_THROWS_WITH_AS(load_dataset(dir / "f.tact", dir / "neg.csv"),
                         doctest::Contains("out of range"), ParseError);
  }
  SUBCASE("dangling annotation") {
    std::string csv = read_binary_file(dir / "a.csv");
    csv += "zz,P000,0,0,0,train\n";
    write_binary_file(dir / "extra.csv", csv);
    CHECK_THROWS_WITH_AS(load_dataset(dir / "f.tact", dir / "extra.csv"),
                         doctest::Contains("dangling"), ParseError);
  }
  SUBCASE("missing annotation") {
    write_binary_file(dir / "one.csv",
                      "sample_id,participant,verb,noun,action,split\n"
                      "a0,P000,0,0,0,train\n");
    CHECK_THROWS_WITH_AS(load_dataset(dir / "f.tact", dir / "one.csv"),
                         doctest::Contains("no annotation"), ParseError);
  }
  SUBCASE("bad split token names the line") {
    write_binary_file(dir / "split.csv",
                      "sample_id,participant,verb,noun,action,split\n"
                      "a0,P000,0,0,0,banana\n");
    CHECK_THROWS_WITH_AS(load_dataset(dir / "f.tact", dir / "split.csv"),
                         doctest::Contains("line 2"), ParseError);
  }
}

TEST_CASE("synthetic generation is a pure function of its config") {
  SyntheticConfig cfg;
  cfg.seed = 42;
  cfg.n_samples = 60;
  cfg.n_frames = 4;
  cfg.d_rgb = cfg.d_flow = cfg.d_obj = 6;
  cfg.n_verbs = 4;
  cfg.n_nouns = 5;
  cfg.n_actions = 10;

  test::TempDir dir("gen");
  Dataset a = generate_synthetic(cfg);
  Dataset b = generate_synthetic(cfg);
  write_dataset(a, dir / "a.tact", dir / "a.csv");
  write_dataset(b, dir / "b.tact", dir / "b.csv");
  CHECK(read_binary_file(dir / "a.tact") == read_binary_file(dir / "b.tact"));
  CHECK(read_binary_file(dir / "a.csv") == read_binary_file(dir / "b.csv"));
}

TEST_CASE("unseen participants appear only in val/test") {
  SyntheticConfig cfg;
  cfg.seed = 7;
  cfg.n_samples = 400;
  cfg.n_frames = 3;
  cfg.d_rgb = cfg.d_flow = cfg.d_obj = 4;
  cfg.n_participants = 8;
  cfg.unseen_fraction = 0.25;
  Dataset ds = generate_synthetic(cfg);
  CHECK(!ds.space.unseen_participants.empty());
  for (const auto& s : ds.samples) {
    if (s.split == Split::train) CHECK(!ds.space.is_unseen(s.participant_id));
  }
}

TEST_CASE("zipf exponent zero gives a uniform class distribution") {
  SyntheticConfig cfg;
  cfg.seed = 3;
  cfg.n_samples = 4000;
  cfg.n_frames = 2;
  cfg.d_rgb = cfg.d_flow = cfg.d_obj = 2;
  cfg.n_verbs = 3;
  cfg.n_nouns = 4;
  cfg.n_actions = 8;
  cfg.zipf_exponent = 0.0;
  cfg.val_fraction = cfg.test_fraction = 0.0;
  Dataset ds = generate_synthetic(cfg);
  const double p = 1.0 / cfg.n_actions;
  const double sigma = std::sqrt(cfg.n_samples * p * (1 - p));
  for (std::int64_t count : ds.space.action_freq) {
    CHECK(std::abs(static_cast<double>(count) - cfg.n_samples * p) <= 3 * sigma);
  }
}

TEST_CASE("zipf probabilities are normalized and decreasing") {
  auto p = zipf_probabilities(20, 1.5);
  double sum = 0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    sum += p[i];
    if (i > 0) CHECK(p[i] <= p[i - 1]);
  }
  CHECK(sum == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("planted signal: a linear probe beats chance on verb from frame means") {
  SyntheticConfig cfg;
  cfg.seed = 13;
  cfg.n_samples = 300;
  cfg.n_frames = 6;
  cfg.d_rgb = cfg.d_flow = cfg.d_obj = 8;
  cfg.n_verbs = 5;
  cfg.n_nouns = 6;
  cfg.n_actions = 12;
  cfg.val_fraction = cfg.test_fraction = 0.0;
  Dataset ds = generate_synthetic(cfg);

  // Multinomial logistic probe on frame-mean features via the library's own
  // autodiff, independent of the attention model.
  const int d = cfg.d_rgb + cfg.d_flow + cfg.d_obj;
  std::vector<double> xs;
  std::vector<int> ys;
  for (const auto& s : ds.samples) {
    for (const Tensor<float>* m : {&s.rgb, &s.flow, &s.obj}) {
      const int dm = m->dim(1);
      for (int j = 0; j < dm; ++j) {
        double mean = 0;
        for (int t = 0; t < cfg.n_frames; ++t) {
          mean += m->values()[static_cast<std::size_t>(t * dm + j)];
        }
        xs.push_back(mean / cfg.n_frames);
      }
    }
    ys.push_back(s.verb);
  }
  const int n = static_cast<int>(ys.size());
  auto x = Tensor<double>::from_values({n, d}, xs);
  auto w = Tensor<double>::zeros({d, cfg.n_verbs}, true);
  for (int step = 0; step < 200; ++step) {
    Tape<double> tape;
    auto loss = cross_entropy(tape, matmul(tape, x, w), ys);
    tape.backward(loss);
    auto g = w.grad();
    for (std::size_t i = 0; i < w.size(); ++i) w.values()[i] -= 0.5 * g[i];
    w.clear_grad();
  }
  Tape<double> tape;
  auto logits = matmul(tape, x, w);
  int hits = 0;
  for (int r = 0; r < n; ++r) {
    int best = 0;
    for (int c = 1; c < cfg.n_verbs; ++c) {
      if (logits.values()[static_cast<std::size_t>(r * cfg.n_verbs + c)] >
          logits.values()[static_cast<std::size_t>(r * cfg.n_verbs + best)]) {
        best = c;
      }
    }
    hits += best == ys[static_cast<std::size_t>(r)];
  }
  const double acc = static_cast<double>(hits) / n;
  CHECK(acc > 2.0 / cfg.n_verbs);  // well above the 1/V chance rate
}

TEST_CASE("eval partitions: subset laws and a hand-enumerated 6-sample case") {
  std::vector<ModalitySample> samples = {
      make_sample("t0", 0, 0, 0, Split::train), make_sample("t1", 0, 0, 0, Split::train),
      make_sample("t2", 0, 0, 0, Split::train), make_sample("t3", 0, 0, 0, Split::train),
      make_sample("t4", 1, 1, 1, Split::train),
      // eval samples below
      make_sample("e0", 0, 0, 0, Split::val, "P000"),
      make_sample("e1", 1, 1, 1, Split::val, "P007"),
      make_sample("e2", 1, 1, 1, Split::val, "P000"),
      make_sample("e3", 0, 0, 0, Split::val, "P007"),
      make_sample("e4", 1, 1, 1, Split::val, "P000"),
      make_sample("e5", 0, 0, 0, Split::val, "P000"),
  };
  // verb counts: {0: 4, 1: 1}; explicit threshold 2 marks class 1 as tail.
  ActionSpace space = ActionSpace::build(samples, 2);
  CHECK(space.verb_tail == std::vector<std::uint8_t>{0, 1});

  const std::vector<int> eval_idx = {5, 6, 7, 8, 9, 10};
  EvalPartitions parts = partition_eval(samples, eval_idx, space);
  CHECK(parts.overall == eval_idx);
  CHECK(parts.unseen == std::vector<int>{6, 8});
  CHECK(parts.tail[0] == std::vector<int>{6, 7, 9});  // verb task
  CHECK(parts.tail[1] == std::vector<int>{6, 7, 9});  // noun mirrors verb here
  CHECK(parts.tail[2] == std::vector<int>{6, 7, 9});

  // subset laws
  std::set<int> overall(parts.overall.begin(), parts.overall.end());
  for (int i : parts.unseen) CHECK(overall.contains(i));
  for (const auto& tail : parts.tail) {
    for (int i : tail) CHECK(overall.contains(i));
  }

  // empty unseen set when every participant trains
  ActionSpace space2 = ActionSpace::build(std::span<const ModalitySample>(samples.data(), 5), 2);
  EvalPartitions parts2 = partition_eval(samples, std::vector<int>{0, 1}, space2);
  CHECK(parts2.unseen.empty());
}

TEST_CASE("bottom-quartile tail threshold") {
  // 8 classes, ascending counts 1,1,2,3,5,8,13,21 -> order statistic at
  // index 2 is 2, so tail = classes with count < 2.
  std::vector<ModalitySample> samples;
  const std::vector<int> counts = {21, 13, 8, 5, 3, 2, 1, 1};
  int id = 0;
  for (int cls = 0; cls < 8; ++cls) {
    for (int i = 0; i < counts[static_cast<std::size_t>(cls)]; ++i) {
      samples.push_back(make_sample("s" + std::to_string(id++), cls, cls, cls, Split::train));
    }
  }
  ActionSpace space = ActionSpace::build(samples);
  CHECK(space.verb_tail_threshold == 2);
  CHECK(space.verb_tail == std::vector<std::uint8_t>{0, 0, 0, 0, 0, 0, 1, 1});
}
