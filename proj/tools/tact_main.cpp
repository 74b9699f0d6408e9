// tact: hierarchical-attention action anticipation at desk scale.
// Subcommands: generate, train, evaluate, gradcheck, ablate.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "tact/data.hpp"
#include "tact/evaluation.hpp"
#include "tact/gradcheck.hpp"
#include "tact/io.hpp"
#include "tact/losses.hpp"
#include "tact/model.hpp"
#include "tact/training.hpp"

namespace {

namespace fs = std::filesystem;

// Effective-config echo, in the format `tact --config <file> <subcommand>`
// accepts back; command-line flags override the file.
void echo_config(CLI::App* sub, const fs::path& out_dir) {
  fs::create_directories(out_dir);
  std::ofstream out(out_dir / "config.txt", std::ios::trunc);
  out << '[' << sub->get_name() << "]\n" << sub->config_to_str(true, true);
}

struct CommonTrainFlags {
  std::string features, annotations, out_dir;
  std::string variant = "full";
  std::string precision = "f32";
  int n_blocks = 2;
  int heads = 4;
  int d_ff = 0;
  tact::TrainConfig train;
  std::string verb_freqs, noun_freqs, action_freqs;
};

void add_train_flags(CLI::App* sub, CommonTrainFlags& f, bool with_variant) {
  sub->add_option("--features", f.features, "Feature file (TACT container)")->required();
  sub->add_option("--annotations", f.annotations, "Annotation CSV")->required();
  sub->add_option("--out-dir", f.out_dir, "Output directory (checkpoints/, logs/)")->required();
  if (with_variant) {
    sub->add_option("--variant", f.variant,
                    "Model wiring: full, tsa_only_rgb, tsa_only_flow, tsa_only_obj, no_cma, no_sa");
  }
  sub->add_option("--precision", f.precision, "Compute precision: f32 or f64")
      ->check(CLI::IsMember({"f32", "f64"}));
  sub->add_option("--n-blocks", f.n_blocks, "Cascade depth");
  sub->add_option("--heads", f.heads, "Attention heads per encoder");
  sub->add_option("--d-ff", f.d_ff, "MLP hidden width (0 = 2x layer width)");
  sub->add_option("--batch-size", f.train.batch_size, "Samples per optimizer step");
  sub->add_option("--epochs", f.train.epochs, "Training epochs");
  sub->add_option("--seed", f.train.seed, "Run seed");
  sub->add_option("--lr", f.train.learning_rate, "SGD learning rate");
  sub->add_option("--momentum", f.train.momentum, "SGD momentum");
  sub->add_option("--gamma", f.train.eql_gamma, "Equalization gate probability (0 = cross-entropy)");
  sub->add_option("--lambda", f.train.eql_lambda,
                  "Rarity threshold as relative frequency (<0 = bottom-quartile auto)");
  sub->add_option("--checkpoint-every", f.train.checkpoint_every,
                  "Epochs between checkpoints (0 = final only)");
  sub->add_option("--early-stop-acc", f.train.early_stop_train_acc,
                  "Stop when verb and noun train top-1 reach this (<=0 disables)");
  sub->add_option("--verb-freqs", f.verb_freqs, "Frequency table overriding the verb head");
  sub->add_option("--noun-freqs", f.noun_freqs, "Frequency table overriding the noun head");
  sub->add_option("--action-freqs", f.action_freqs, "Frequency table overriding the action head");
}

tact::ModelConfig model_config_for(const tact::Dataset& ds, const CommonTrainFlags& f) {
  tact::ModelConfig cfg;
  cfg.d_rgb = ds.d_rgb;
  cfg.d_flow = ds.d_flow;
  cfg.d_obj = ds.d_obj;
  cfg.n_frames = ds.n_frames;
  cfg.n_blocks = f.n_blocks;
  cfg.heads = f.heads;
  cfg.d_ff = f.d_ff;
  cfg.n_verbs = ds.space.n_verbs;
  cfg.n_nouns = ds.space.n_nouns;
  cfg.n_actions = ds.space.n_actions;
  return tact::apply_ablation(cfg, tact::parse_ablation_variant(f.variant));
}

tact::HeadLossConfigs loss_configs_for(const tact::Dataset& ds, const CommonTrainFlags& f) {
  tact::HeadLossConfigs cfgs =
      tact::make_head_loss_configs(ds.space, f.train.eql_gamma, f.train.eql_lambda);
  auto overridden = [&](const std::string& path, tact::EqlConfig& cfg, int classes,
                        const char* head) {
    if (path.empty()) return;
    auto counts = tact::read_frequency_table(path);
    if (static_cast<int>(counts.size()) != classes) {
      throw tact::ConfigError(std::string(head) + " frequency table has " +
                              std::to_string(counts.size()) + " classes, dataset has " +
                              std::to_string(classes));
    }
    cfg.class_frequencies = std::move(counts);
  };
  overridden(f.verb_freqs, cfgs.verb, ds.space.n_verbs, "verb");
  overridden(f.noun_freqs, cfgs.noun, ds.space.n_nouns, "noun");
  overridden(f.action_freqs, cfgs.action, ds.space.n_actions, "action");
  return cfgs;
}

void write_frequency_tables(const tact::Dataset& ds, const fs::path& out_dir) {
  tact::write_frequency_table(out_dir / "logs" / "verb_freq.tsv", ds.space.verb_freq);
  tact::write_frequency_table(out_dir / "logs" / "noun_freq.tsv", ds.space.noun_freq);
  tact::write_frequency_table(out_dir / "logs" / "action_freq.tsv", ds.space.action_freq);
}

template <typename S>
int run_train(const tact::Dataset& ds, const CommonTrainFlags& f) {
  const tact::ModelConfig model_cfg = model_config_for(ds, f);
  const tact::HeadLossConfigs loss_cfgs = loss_configs_for(ds, f);
  fs::create_directories(fs::path(f.out_dir) / "logs");
  write_frequency_tables(ds, f.out_dir);
  auto result = tact::train<S>(ds, model_cfg, f.train, loss_cfgs, f.out_dir);
  std::printf("trained %d epoch(s); final loss %.6f, verb acc %.3f, noun acc %.3f\n",
              result.epochs_run, result.last.loss, result.last.verb_acc1, result.last.noun_acc1);
  std::printf("final checkpoint: %s\n", result.final_checkpoint.string().c_str());
  return 0;
}

template <typename S>
tact::EvalReport evaluate_checkpoints(const std::vector<std::string>& checkpoint_paths,
                                      const tact::Dataset& ds, tact::Split split,
                                      tact::ActionScoreMode mode, int k) {
  std::vector<tact::ModelParams<S>> models;
  for (const auto& p : checkpoint_paths) {
    models.push_back(tact::load_checkpoint<S>(p, /*requires_grad=*/false).params);
  }
  for (const auto& m : models) {
    if (m.config.n_verbs != ds.space.n_verbs || m.config.n_nouns != ds.space.n_nouns ||
        m.config.n_actions != ds.space.n_actions) {
      throw tact::ConfigError("checkpoint vocabulary does not match the dataset");
    }
  }
  const auto idx = ds.indices(split);
  return tact::evaluate_models<S>(models, ds, idx, mode, k);
}

// The ablation grid: model rewirings plus the loss-side gamma=0 row.
struct AblationRow {
  std::string label;
  std::string variant;
  bool plain_ce = false;
};

const std::vector<AblationRow> kAblationGrid = {
    {"full", "full", false},
    {"tsa_only_rgb", "tsa_only_rgb", false},
    {"tsa_only_flow", "tsa_only_flow", false},
    {"tsa_only_obj", "tsa_only_obj", false},
    {"no_cma", "no_cma", false},
    {"no_sa", "no_sa", false},
    {"no_equal", "full", true},
};

template <typename S>
int run_ablate(const tact::Dataset& ds, const CommonTrainFlags& base, tact::Split eval_split,
               int k) {
  std::vector<std::pair<std::string, tact::EvalReport>> rows;
  for (const auto& row : kAblationGrid) {
    CommonTrainFlags f = base;
    f.variant = row.variant;
    if (row.plain_ce) f.train.eql_gamma = 0.0;
    f.out_dir = (fs::path(base.out_dir) / row.label).string();
    const tact::ModelConfig model_cfg = model_config_for(ds, f);
    const tact::HeadLossConfigs loss_cfgs = loss_configs_for(ds, f);
    fs::create_directories(fs::path(f.out_dir) / "logs");
    auto result = tact::train<S>(ds, model_cfg, f.train, loss_cfgs, f.out_dir);
    std::printf("[%s] trained %d epoch(s), final loss %.6f\n", row.label.c_str(),
                result.epochs_run, result.last.loss);
    rows.emplace_back(row.label,
                      evaluate_checkpoints<S>({result.final_checkpoint.string()}, ds, eval_split,
                                              tact::ActionScoreMode::head, k));
  }
  const std::string table = tact::render_report_table(rows);
  std::fputs(table.c_str(), stdout);
  const fs::path reports = fs::path(base.out_dir) / "reports";
  fs::create_directories(reports);
  tact::write_binary_file(reports / "ablation.txt", table);
  tact::write_report_json(reports / "ablation.json", rows);
  return 0;
}

int run_gradcheck_cmd(std::uint64_t seed, int shapes_per_op, int model_probes,
                      const std::string& out_dir, CLI::App* sub) {
  tact::GradCheckOptions opts;
  opts.seed = seed;
  opts.shapes_per_op = shapes_per_op;
  opts.model_probes = model_probes;
  const auto cases = tact::run_gradcheck(opts);
  bool ok = true;
  for (const auto& c : cases) {
    std::printf("%-22s max_rel_err %.3e  (%d probes over %d shapes)\n", c.name.c_str(),
                c.max_rel_err, c.probes, c.shapes);
    ok = ok && c.max_rel_err < 1e-4;
  }
  if (!out_dir.empty()) echo_config(sub, out_dir);
  if (!ok) {
    std::fprintf(stderr, "error: gradient check failed (relative error above 1e-4)\n");
    return 3;
  }
  std::printf("all gradients within 1e-4 of central finite differences\n");
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Hierarchical-attention action anticipation: synthetic data, training, evaluation"};
  app.require_subcommand(1);
  app.set_config("--config", "", "Read options from an effective-config echo");

  // generate ----------------------------------------------------------------
  auto* gen = app.add_subcommand("generate", "Emit a synthetic multimodal dataset");
  gen->configurable(true);
  gen->option_defaults()->always_capture_default(true);
  tact::SyntheticConfig gen_cfg;
  std::string gen_out;
  gen->add_option("--out-dir", gen_out, "Output directory")->required();
  gen->add_option("--seed", gen_cfg.seed, "Generator seed");
  gen->add_option("--n-samples", gen_cfg.n_samples, "Total samples");
  gen->add_option("--n-frames", gen_cfg.n_frames, "Frames per sequence");
  gen->add_option("--d-rgb", gen_cfg.d_rgb, "rgb feature width");
  gen->add_option("--d-flow", gen_cfg.d_flow, "flow feature width");
  gen->add_option("--d-obj", gen_cfg.d_obj, "obj feature width");
  gen->add_option("--verbs", gen_cfg.n_verbs, "Verb vocabulary size");
  gen->add_option("--nouns", gen_cfg.n_nouns, "Noun vocabulary size");
  gen->add_option("--actions", gen_cfg.n_actions, "Action vocabulary size");
  gen->add_option("--zipf-exponent", gen_cfg.zipf_exponent, "Long-tail skew (0 = uniform)");
  gen->add_option("--participants", gen_cfg.n_participants, "Participant count");
  gen->add_option("--unseen-fraction", gen_cfg.unseen_fraction,
                  "Fraction of participants reserved for val/test");
  gen->add_option("--val-fraction", gen_cfg.val_fraction, "Validation split fraction");
  gen->add_option("--test-fraction", gen_cfg.test_fraction, "Test split fraction");
  gen->add_option("--noise-sigma", gen_cfg.noise_sigma, "Feature noise level");
  gen->add_option("--signal-strength", gen_cfg.signal_strength, "Planted class-signal scale");

  // train -------------------------------------------------------------------
  auto* tr = app.add_subcommand("train", "Train the cascaded attention model");
  tr->configurable(true);
  tr->option_defaults()->always_capture_default(true);
  CommonTrainFlags tr_flags;
  add_train_flags(tr, tr_flags, /*with_variant=*/true);

  // evaluate ----------------------------------------------------------------
  auto* ev = app.add_subcommand("evaluate", "Mean top-5 recall over overall/unseen/tail");
  ev->configurable(true);
  ev->option_defaults()->always_capture_default(true);
  std::string ev_features, ev_annotations, ev_out, ev_split = "val", ev_mode = "head",
                                                   ev_precision = "f32", ev_label = "ensemble";
  std::vector<std::string> ev_checkpoints;
  int ev_k = 5;
  ev->add_option("--features", ev_features, "Feature file")->required();
  ev->add_option("--annotations", ev_annotations, "Annotation CSV")->required();
  ev->add_option("--checkpoints", ev_checkpoints, "Model checkpoints to ensemble")
      ->required()
      ->expected(-1);
  ev->add_option("--out-dir", ev_out, "Output directory (reports/)")->required();
  ev->add_option("--split", ev_split, "Evaluation split")->check(CLI::IsMember({"val", "test"}));
  ev->add_option("--mode", ev_mode, "Action scoring: head (dedicated head) or product");
  ev->add_option("--k", ev_k, "Recall cutoff");
  ev->add_option("--label", ev_label, "Row label in the report");
  ev->add_option("--precision", ev_precision, "f32 or f64")->check(CLI::IsMember({"f32", "f64"}));

  // gradcheck ---------------------------------------------------------------
  auto* gc = app.add_subcommand("gradcheck", "Finite-difference gradient verification at 64-bit");
  gc->configurable(true);
  gc->option_defaults()->always_capture_default(true);
  std::uint64_t gc_seed = 20240501;
  int gc_shapes = 12, gc_probes = 120;
  std::string gc_out;
  gc->add_option("--seed", gc_seed, "Probe seed");
  gc->add_option("--shapes-per-op", gc_shapes, "Random shapes per operation");
  gc->add_option("--model-probes", gc_probes, "Parameter probes for the end-to-end case");
  gc->add_option("--out-dir", gc_out, "Optional output directory for the config echo");

  // ablate ------------------------------------------------------------------
  auto* ab = app.add_subcommand("ablate", "Train and compare the ablation variant grid");
  ab->configurable(true);
  ab->option_defaults()->always_capture_default(true);
  CommonTrainFlags ab_flags;
  add_train_flags(ab, ab_flags, /*with_variant=*/false);
  std::string ab_split = "val";
  int ab_k = 5;
  ab->add_option("--split", ab_split, "Evaluation split")->check(CLI::IsMember({"val", "test"}));
  ab->add_option("--k", ab_k, "Recall cutoff");

  CLI11_PARSE(app, argc, argv);

  try {
    if (gen->parsed()) {
      tact::Dataset ds = tact::generate_synthetic(gen_cfg);
      fs::create_directories(gen_out);
      tact::write_dataset(ds, fs::path(gen_out) / "features.tact",
                          fs::path(gen_out) / "annotations.csv");
      echo_config(gen, gen_out);
      std::printf("wrote %zu samples (%zu train) to %s\n", ds.samples.size(),
                  ds.indices(tact::Split::train).size(), gen_out.c_str());
      return 0;
    }
    if (tr->parsed()) {
      tact::Dataset ds = tact::load_dataset(tr_flags.features, tr_flags.annotations);
      echo_config(tr, tr_flags.out_dir);
      return tr_flags.precision == "f64" ? run_train<double>(ds, tr_flags)
                                         : run_train<float>(ds, tr_flags);
    }
    if (ev->parsed()) {
      tact::Dataset ds = tact::load_dataset(ev_features, ev_annotations);
      const auto mode = tact::parse_action_score_mode(ev_mode);
      const auto split = tact::parse_split(ev_split);
      tact::EvalReport report =
          ev_precision == "f64"
              ? evaluate_checkpoints<double>(ev_checkpoints, ds, split, mode, ev_k)
              : evaluate_checkpoints<float>(ev_checkpoints, ds, split, mode, ev_k);
      std::vector<std::pair<std::string, tact::EvalReport>> rows = {{ev_label, report}};
      const std::string table = tact::render_report_table(rows);
      std::fputs(table.c_str(), stdout);
      const fs::path reports = fs::path(ev_out) / "reports";
      fs::create_directories(reports);
      tact::write_binary_file(reports / "report.txt", table);
      tact::write_report_json(reports / "report.json", rows);
      echo_config(ev, ev_out);
      return 0;
    }
    if (gc->parsed()) {
      return run_gradcheck_cmd(gc_seed, gc_shapes, gc_probes, gc_out, gc);
    }
    if (ab->parsed()) {
      tact::Dataset ds = tact::load_dataset(ab_flags.features, ab_flags.annotations);
      echo_config(ab, ab_flags.out_dir);
      const auto split = tact::parse_split(ab_split);
      return ab_flags.precision == "f64" ? run_ablate<double>(ds, ab_flags, split, ab_k)
                                         : run_ablate<float>(ds, ab_flags, split, ab_k);
    }
  } catch (const tact::ParseError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  } catch (const tact::NumericError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 3;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 1;
}
