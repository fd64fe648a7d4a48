// Command-line front end: data generation, training, the pooling-variant
// ladder, and the evaluation/analysis commands.

#include <CLI11.hpp>
#include <cstdio>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "llip/pipelines.hpp"

namespace fs = std::filesystem;
using namespace llip;

namespace {

struct CommonOpts {
  std::string config_file;
  std::vector<std::string> sets;
  // named shortcuts; applied after --set so flags win
  std::string seed, k, tau, variant, steps, batch, data_dir, out_dir;
};

void add_common(CLI::App* cmd, CommonOpts& o) {
  cmd->add_option("--config", o.config_file, "config file (key = value lines, # comments)");
  cmd->add_option("--set", o.sets, "extra key=value override; repeatable")->take_all();
  cmd->add_option("--seed", o.seed, "top-level seed");
  cmd->add_option("--K", o.k, "mixture token count");
  cmd->add_option("--tau", o.tau, "cross-attention softmax temperature");
  cmd->add_option("--variant", o.variant, "pooling variant: siglip|registers|average|learned-average|llip");
  cmd->add_option("--steps", o.steps, "training steps");
  cmd->add_option("--batch", o.batch, "batch size");
  cmd->add_option("--data", o.data_dir, "dataset directory");
  cmd->add_option("--out", o.out_dir, "output directory");
}

ExperimentConfig resolve(const CommonOpts& o, bool out_is_data_dir = false) {
  std::vector<std::pair<std::string, std::string>> overrides;
  for (const auto& kv : o.sets) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw config_error("--set expects key=value, got '" + kv + "'");
    overrides.emplace_back(kv.substr(0, eq), kv.substr(eq + 1));
  }
  const auto maybe = [&](const std::string& key, const std::string& v) {
    if (!v.empty()) overrides.emplace_back(key, v);
  };
  maybe("seed", o.seed);
  maybe("model.K", o.k);
  maybe("mixer.tau", o.tau);
  maybe("train.variant", o.variant);
  maybe("train.steps", o.steps);
  maybe("train.batch", o.batch);
  maybe("data.dir", o.data_dir);
  maybe(out_is_data_dir ? "data.dir" : "train.out", o.out_dir);
  std::optional<fs::path> file;
  if (!o.config_file.empty()) file = o.config_file;
  return load_config(file, overrides);
}

void print_and_maybe_write(const std::string& csv, const std::string& csv_path) {
  std::fputs(csv.c_str(), stdout);
  if (!csv_path.empty()) write_text_file(csv_path, csv);
}

data::Dataset load_train_dataset(const ExperimentConfig& cfg) {
  if (!fs::exists(fs::path(cfg.data_dir) / "manifest.jsonl"))
    throw io_error("no dataset at " + cfg.data_dir + " (run `llip gen-data` first)");
  return data::load_dataset(cfg.data_dir);
}

int cmd_gen_data(const CommonOpts& o, const std::string& n_flag) {
  CommonOpts opts = o;
  ExperimentConfig cfg = [&] {
    auto c = resolve(opts, /*out_is_data_dir=*/true);
    if (!n_flag.empty()) {
      long n = 0;
      if (!detail::parse_long(n_flag, n)) throw config_error("--n expects an integer");
      c.data_n = n;
      validate_config(c);
    }
    return c;
  }();
  data::generate_dataset(cfg.data_n, derive_seed(cfg.seed, "data"), cfg.data_dir);
  std::printf("wrote %ld scenes to %s\n", cfg.data_n, cfg.data_dir.c_str());
  return 0;
}

int cmd_train(const CommonOpts& o, const std::string& resume, long halt_at) {
  ExperimentConfig cfg = resolve(o);
  auto ds = load_train_dataset(cfg);
  auto model = build_model(cfg, ds.vocab.size());
  std::optional<fs::path> resume_path;
  if (!resume.empty()) resume_path = resume;
  auto result = train_run(model, cfg.train_config(), ds, cfg.out_dir, resume_path, halt_at);
  data::save_vocabulary(ds.vocab, fs::path(cfg.out_dir) / "vocab.txt");
  std::printf("trained %s for %ld steps, final loss %.6f\ncheckpoint: %s\n", cfg.variant.c_str(), result.steps_run,
              result.final_loss, result.checkpoint_path.c_str());
  return 0;
}

struct EvalOpts {
  std::string ckpt;
  std::string eval_data;
  std::string vocab;
  std::string csv;
  long samples = 0;
};

void add_eval(CLI::App* cmd, EvalOpts& e, bool with_samples = false) {
  cmd->add_option("--ckpt", e.ckpt, "checkpoint file")->required();
  cmd->add_option("--eval-data", e.eval_data, "dataset directory to evaluate on (default: <data.dir>_holdout)");
  cmd->add_option("--vocab", e.vocab, "vocabulary file (default: vocab.txt next to the checkpoint)");
  cmd->add_option("--csv", e.csv, "also write the metrics CSV here");
  if (with_samples) cmd->add_option("--samples", e.samples, "number of held-out samples");
}

struct EvalSetup {
  Model<float> model;
  data::Dataset eval_ds;
  data::Vocabulary vocab;
};

EvalSetup eval_setup(const ExperimentConfig& cfg, const EvalOpts& e, bool need_vocab = true) {
  EvalSetup s{model_from_checkpoint(load_checkpoint_file(e.ckpt)), {}, {}};
  const std::string eval_dir = e.eval_data.empty() ? cfg.data_dir + "_holdout" : e.eval_data;
  if (!fs::exists(fs::path(eval_dir) / "manifest.jsonl"))
    throw io_error("no dataset at " + eval_dir + " (run `llip gen-data --out " + eval_dir + "` first)");
  s.eval_ds = data::load_dataset(eval_dir);
  if (need_vocab) {
    const fs::path vocab_path = e.vocab.empty() ? fs::path(e.ckpt).parent_path() / "vocab.txt" : fs::path(e.vocab);
    s.vocab = data::load_vocabulary(vocab_path);
    if (s.vocab.size() != s.model.txt_cfg.vocab_size)
      throw compat_error("vocabulary size does not match the checkpoint's text encoder");
  }
  return s;
}

int cmd_eval(const CommonOpts& o, const EvalOpts& e) {
  ExperimentConfig cfg = resolve(o);
  auto s = eval_setup(cfg, e);
  const long n = e.samples > 0 ? e.samples : cfg.eval_samples;
  const double acc = holdout_accuracy(s.model, s.eval_ds, s.vocab, n, llip_threads());
  print_and_maybe_write(metrics_csv({{"zero_shot_shape_accuracy", acc}}), e.csv);
  return 0;
}

int cmd_retrieval(const CommonOpts& o, const EvalOpts& e) {
  ExperimentConfig cfg = resolve(o);
  auto s = eval_setup(cfg, e);
  const long n = e.samples > 0 ? e.samples : cfg.eval_samples;
  auto r = holdout_recall(s.model, s.eval_ds, s.vocab, n, cfg.seed, llip_threads());
  std::vector<std::pair<std::string, double>> metrics;
  for (long k : {1, 5, 10}) metrics.emplace_back("i2t_r@" + std::to_string(k), r.image_to_text.at(k));
  for (long k : {1, 5, 10}) metrics.emplace_back("t2i_r@" + std::to_string(k), r.text_to_image.at(k));
  print_and_maybe_write(metrics_csv(metrics), e.csv);
  return 0;
}

int cmd_spectrum(const CommonOpts& o, const EvalOpts& e) {
  ExperimentConfig cfg = resolve(o);
  auto s = eval_setup(cfg, e, /*need_vocab=*/false);
  const long n = std::min<long>(e.samples > 0 ? e.samples : 2000, s.eval_ds.size());
  auto images = holdout_images(s.eval_ds, n);
  auto tokens = encode_image_tiled(s.model, images, llip_threads());
  auto report = spectrum_from_features(fold_tokens(tokens), to_string(s.model.variant));
  print_and_maybe_write(metrics_csv({{"effective_rank", report.effective_rank},
                                     {"n_samples", static_cast<double>(report.n_samples)}}),
                        "");
  if (!e.csv.empty()) write_text_file(e.csv, spectrum_csv(report));
  return 0;
}

int cmd_flops(const CommonOpts& o, long classes, long images, long templates) {
  ExperimentConfig cfg = resolve(o);
  auto txt = cfg.text_config(/*vocab placeholder; cost does not depend on it*/ 64);
  auto f = flops_estimate(cfg.vit, txt, classes, templates);
  const double ratio = overhead_ratio(cfg.vit, txt, classes, static_cast<double>(images), templates);
  print_and_maybe_write(metrics_csv({{"backbone_macs_per_image", f.backbone},
                                     {"mixer_macs_per_image", f.mixer},
                                     {"text_macs_total", f.text},
                                     {"flops_per_image", f.per_image_flops(static_cast<double>(images))},
                                     {"overhead_ratio_vs_k1", ratio}}),
                        "");
  return 0;
}

int cmd_ablate(const CommonOpts& o) {
  ExperimentConfig cfg = resolve(o);
  if (!fs::exists(fs::path(cfg.data_dir) / "manifest.jsonl"))
    data::generate_dataset(cfg.data_n, derive_seed(cfg.seed, "data"), cfg.data_dir);
  const std::string holdout_dir = cfg.data_dir + "_holdout";
  if (!fs::exists(fs::path(holdout_dir) / "manifest.jsonl"))
    data::generate_dataset(cfg.holdout_n, derive_seed(cfg.seed, "holdout"), holdout_dir);
  auto train_ds = data::load_dataset(cfg.data_dir);
  auto holdout = data::load_dataset(holdout_dir);

  std::vector<AblationRow> rows;
  for (const auto& variant : ladder_variants()) {
    std::printf("training %s ...\n", variant.c_str());
    std::fflush(stdout);
    rows.push_back(run_ladder_rung(cfg, variant, train_ds, holdout, llip_threads()));
  }
  const std::string table = ablation_table(rows);
  std::fputs(table.c_str(), stdout);
  fs::create_directories(cfg.out_dir);
  write_text_file(fs::path(cfg.out_dir) / "ablation.txt", table);
  write_text_file(fs::path(cfg.out_dir) / "ablation.csv", ablation_csv(rows));
  return 0;
}

int cmd_gradcheck() {
  const auto report = run_gradcheck_battery();
  bool ok = true;
  for (const auto& [module, err] : report) {
    std::printf("%-20s max_rel_err %.3g\n", module.c_str(), err);
    ok = ok && err <= 1e-4;
  }
  std::printf(ok ? "gradcheck: all modules within 1e-4\n" : "gradcheck: FAILED\n");
  return ok ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"contrastive image-text models with text-conditioned token mixing"};
  app.require_subcommand(1);

  CommonOpts gen_o, train_o, eval_o, retr_o, spec_o, flops_o, ablate_o;
  std::string gen_n;
  std::string train_resume;
  long train_halt = -1;
  EvalOpts eval_e, retr_e, spec_e;
  long flops_classes = 1000, flops_images = 50000, flops_templates = 3;

  auto* gen = app.add_subcommand("gen-data", "render a synthetic scene dataset");
  add_common(gen, gen_o);
  gen->add_option("--n", gen_n, "number of scenes");

  auto* train = app.add_subcommand("train", "train one pooling variant");
  add_common(train, train_o);
  train->add_option("--resume", train_resume, "checkpoint to resume from");
  train->add_option("--halt-at", train_halt, "stop after this step (for staged runs)");

  auto* eval = app.add_subcommand("eval", "zero-shot shape classification");
  add_common(eval, eval_o);
  add_eval(eval, eval_e, true);

  auto* retr = app.add_subcommand("retrieval", "image/text retrieval recall");
  add_common(retr, retr_o);
  add_eval(retr, retr_e, true);

  auto* spec = app.add_subcommand("spectrum", "singular value spectrum of token features");
  add_common(spec, spec_o);
  add_eval(spec, spec_e, true);

  auto* flops = app.add_subcommand("flops", "analytic inference cost and overhead ratio");
  add_common(flops, flops_o);
  flops->add_option("--classes", flops_classes, "number of zero-shot classes");
  flops->add_option("--images", flops_images, "images to amortize prompt encoding over");
  flops->add_option("--templates", flops_templates, "templates per class");

  auto* ablate = app.add_subcommand("ablate", "train and compare all five pooling variants");
  add_common(ablate, ablate_o);

  app.add_subcommand("gradcheck", "finite-difference check of every module");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::fprintf(stderr, "%s\n", e.what());
    return 2;
  }

  try {
    if (gen->parsed()) return cmd_gen_data(gen_o, gen_n);
    if (train->parsed()) return cmd_train(train_o, train_resume, train_halt);
    if (eval->parsed()) return cmd_eval(eval_o, eval_e);
    if (retr->parsed()) return cmd_retrieval(retr_o, retr_e);
    if (spec->parsed()) return cmd_spectrum(spec_o, spec_e);
    if (flops->parsed()) return cmd_flops(flops_o, flops_classes, flops_images, flops_templates);
    if (ablate->parsed()) return cmd_ablate(ablate_o);
    return cmd_gradcheck();
  } catch (const config_error& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return 3;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
}
