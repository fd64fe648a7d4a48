#pragma once

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "llip/config.hpp"
#include "llip/core/gradcheck.hpp"
#include "llip/data.hpp"
#include "llip/evaluation.hpp"
#include "llip/training.hpp"

namespace llip {

inline Model<float> build_model(const ExperimentConfig& cfg, long vocab_size) {
  return init_model<float>(cfg.vit, cfg.text_config(vocab_size), cfg.mixer_heads, cfg.tau,
                           parse_variant(cfg.variant), cfg.seed);
}

// Rebuilds a model purely from a checkpoint's config echo and parameters;
// the optimizer state is ignored.
inline Model<float> model_from_checkpoint(const CheckpointData& c) {
  VitConfig vit;
  vit.image_size = static_cast<long>(c.scalar("cfg.vit.image_size"));
  vit.patch_size = static_cast<long>(c.scalar("cfg.vit.patch_size"));
  vit.width = static_cast<long>(c.scalar("cfg.vit.width"));
  vit.depth = static_cast<long>(c.scalar("cfg.vit.depth"));
  vit.heads = static_cast<long>(c.scalar("cfg.vit.heads"));
  vit.mixture_tokens = static_cast<long>(c.scalar("cfg.vit.mixture_tokens"));
  vit.emit_patch_tokens = c.scalar("cfg.vit.patch_tokens") != 0.0f;
  TextConfig txt;
  txt.vocab_size = static_cast<long>(c.scalar("cfg.txt.vocab"));
  txt.context_length = static_cast<long>(c.scalar("cfg.txt.context"));
  txt.width = static_cast<long>(c.scalar("cfg.txt.width"));
  txt.depth = static_cast<long>(c.scalar("cfg.txt.depth"));
  txt.heads = static_cast<long>(c.scalar("cfg.txt.heads"));
  const long mixer_heads = static_cast<long>(c.scalar("cfg.mixer.heads"));
  const double tau = static_cast<double>(c.scalar("cfg.mixer.tau"));
  const auto variant = static_cast<PoolingVariant>(static_cast<int>(c.scalar("cfg.variant")));

  Model<float> m = init_model<float>(vit, txt, mixer_heads, tau, variant, /*seed=*/0);
  visit_params(m, [&](const std::string& name, Tensor<float>& p) {
    const auto* e = c.find(name);
    if (!e) throw compat_error("checkpoint: missing parameter " + name);
    long n = 1;
    for (std::uint32_t d : e->dims) n *= d;
    if (n != p.numel()) throw compat_error("checkpoint: shape mismatch for " + name);
    p.values().assign(e->data.begin(), e->data.end());
  });
  return m;
}

// ---------------------------------------------------------------------------
// held-out evaluation
// ---------------------------------------------------------------------------

struct HoldoutMetrics {
  double zs_accuracy = 0;  // zero-shot shape classification
  RecallReport recall;     // aligned-pair retrieval at k in {1,5,10}
};

// One caption per scene, drawn with the same uniform rule as training but
// from an independent seed stream.
inline std::vector<std::string> holdout_captions(const data::Manifest& manifest, std::uint64_t seed) {
  std::vector<std::string> captions;
  captions.reserve(manifest.entries.size());
  for (std::size_t i = 0; i < manifest.entries.size(); ++i) {
    Rng rng(derive_seed(seed, "evalcap/" + std::to_string(i)));
    const auto& caps = manifest.entries[i].captions;
    captions.push_back(caps[rng.uniform_int(caps.size())]);
  }
  return captions;
}

inline Tensor<float> holdout_images(const data::Dataset& holdout, long n) {
  std::vector<long> idx(static_cast<std::size_t>(n));
  for (long i = 0; i < n; ++i) idx[static_cast<std::size_t>(i)] = i;
  return data::image_tensor(holdout, idx);
}

// Zero-shot shape classification accuracy over the first n held-out scenes.
inline double holdout_accuracy(Model<float>& model, const data::Dataset& holdout,
                               const data::Vocabulary& train_vocab, long n_samples, long workers = 1) {
  const long n = std::min<long>(n_samples, holdout.size());
  auto images = holdout_images(holdout, n);
  PromptSet prompts{data::shape_names(), default_templates()};
  auto pred = zero_shot_classify(model, images, prompts, train_vocab, workers);
  long hits = 0;
  for (long i = 0; i < n; ++i)
    hits += pred[static_cast<std::size_t>(i)] == holdout.manifest.entries[static_cast<std::size_t>(i)].aspects.shape;
  return static_cast<double>(hits) / static_cast<double>(n);
}

// Aligned-pair retrieval over the first n held-out scenes.
inline RecallReport holdout_recall(Model<float>& model, const data::Dataset& holdout,
                                   const data::Vocabulary& train_vocab, long n_samples, std::uint64_t seed,
                                   long workers = 1) {
  const long n = std::min<long>(n_samples, holdout.size());
  auto images = holdout_images(holdout, n);
  auto captions = holdout_captions(holdout.manifest, seed);
  captions.resize(static_cast<std::size_t>(n));
  auto tb = data::tokenize_batch(captions, train_vocab, model.txt_cfg.context_length);
  return retrieval_recall(model, images, tb, {1, 5, 10}, workers);
}

inline HoldoutMetrics evaluate_holdout(Model<float>& model, const data::Dataset& holdout,
                                       const data::Vocabulary& train_vocab, long n_samples, std::uint64_t seed,
                                       long workers = 1) {
  HoldoutMetrics out;
  out.zs_accuracy = holdout_accuracy(model, holdout, train_vocab, n_samples, workers);
  out.recall = holdout_recall(model, holdout, train_vocab, n_samples, seed, workers);
  return out;
}

// ---------------------------------------------------------------------------
// ablation ladder
// ---------------------------------------------------------------------------

struct AblationRow {
  std::string variant;
  double final_loss = 0;
  double zs_accuracy = 0;
  double i2t_r1 = 0;
  double t2i_r1 = 0;
  std::filesystem::path checkpoint;
};

inline const std::vector<std::string>& ladder_variants() {
  static const std::vector<std::string> v = {"siglip", "registers", "average", "learned-average", "llip"};
  return v;
}

// Trains one rung of the ladder under the shared config and evaluates it
// from its reloaded checkpoint, so every table row is reproducible from the
// artifact on disk.
inline AblationRow run_ladder_rung(const ExperimentConfig& base, const std::string& variant,
                                   const data::Dataset& train_ds, const data::Dataset& holdout, long workers = 1) {
  ExperimentConfig cfg = base;
  cfg.variant = variant;
  if (variant == "siglip") cfg.vit.mixture_tokens = 1;
  cfg.out_dir = (std::filesystem::path(base.out_dir) / variant).string();
  validate_config(cfg);

  auto model = build_model(cfg, train_ds.vocab.size());
  auto result = train_run(model, cfg.train_config(), train_ds, cfg.out_dir);
  data::save_vocabulary(train_ds.vocab, std::filesystem::path(cfg.out_dir) / "vocab.txt");

  auto reloaded = model_from_checkpoint(load_checkpoint_file(result.checkpoint_path));
  auto metrics = evaluate_holdout(reloaded, holdout, train_ds.vocab, cfg.eval_samples, cfg.seed, workers);

  AblationRow row;
  row.variant = variant;
  row.final_loss = result.final_loss;
  row.zs_accuracy = metrics.zs_accuracy;
  row.i2t_r1 = metrics.recall.image_to_text.at(1);
  row.t2i_r1 = metrics.recall.text_to_image.at(1);
  row.checkpoint = result.checkpoint_path;
  return row;
}

inline std::string ablation_table(const std::vector<AblationRow>& rows) {
  char line[160];
  std::string out;
  std::snprintf(line, sizeof(line), "%-16s %12s %10s %10s %10s\n", "variant", "final_loss", "zs_acc", "i2t_r@1",
                "t2i_r@1");
  out += line;
  for (const auto& r : rows) {
    std::snprintf(line, sizeof(line), "%-16s %12.4f %10.4f %10.4f %10.4f\n", r.variant.c_str(), r.final_loss,
                  r.zs_accuracy, r.i2t_r1, r.t2i_r1);
    out += line;
  }
  return out;
}

inline std::string ablation_csv(const std::vector<AblationRow>& rows) {
  std::string out = "variant,final_loss,zs_acc,i2t_r1,t2i_r1\n";
  char line[160];
  for (const auto& r : rows) {
    std::snprintf(line, sizeof(line), "%s,%.9g,%.9g,%.9g,%.9g\n", r.variant.c_str(), r.final_loss, r.zs_accuracy,
                  r.i2t_r1, r.t2i_r1);
    out += line;
  }
  return out;
}

// ---------------------------------------------------------------------------
// metric CSV helpers (9 significant digits)
// ---------------------------------------------------------------------------

inline std::string metrics_csv(const std::vector<std::pair<std::string, double>>& metrics) {
  std::string out = "metric,value\n";
  char line[128];
  for (const auto& [name, value] : metrics) {
    std::snprintf(line, sizeof(line), "%s,%.9g\n", name.c_str(), value);
    out += line;
  }
  return out;
}

inline std::string spectrum_csv(const SpectrumReport& report) {
  std::string out = "rank,singular_value\n";
  char line[64];
  for (std::size_t i = 0; i < report.singular_values.size(); ++i) {
    std::snprintf(line, sizeof(line), "%zu,%.9g\n", i + 1, report.singular_values[i]);
    out += line;
  }
  return out;
}

inline void write_text_file(const std::filesystem::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw io_error("cannot open " + path.string() + " for writing");
  f << text;
}

// ---------------------------------------------------------------------------
// gradient-check battery
// ---------------------------------------------------------------------------

// Per-module finite-difference sweep in double precision; returns the worst
// relative error per module.
inline std::vector<std::pair<std::string, double>> run_gradcheck_battery() {
  std::vector<std::pair<std::string, double>> report;
  Rng rng(20240);
  const auto randn = [&](Shape shape, double stddev, bool grad) {
    Tensor<double> t = Tensor<double>::zeros(std::move(shape));
    for (long i = 0; i < t.numel(); ++i) t.data()[i] = rng.normal() * stddev;
    t.set_requires_grad(grad);
    return t;
  };

  {  // numerics primitives, composite chain
    auto x = randn({3, 4, 6}, 1.0, true);
    auto y = randn({3, 4, 6}, 1.0, false);
    auto w = randn({6, 6}, 0.5, true);
    auto g = randn({6}, 0.3, true);
    auto b = randn({6}, 0.3, true);
    double worst = 0;
    worst = std::max(worst, finite_difference_check(
                                [&] { return sum(mul(l2_normalize(layer_norm(matmul(x, w), g, b)), y)); }, {x, w, g, b}));
    worst = std::max(worst, finite_difference_check(
                                [&] { return sum(mul(softmax_tau(x, 5.0), y)); }, {x}));
    worst = std::max(worst, finite_difference_check([&] { return sum(log_sigmoid(mul(x, x))); }, {x}));
    worst = std::max(worst, finite_difference_check([&] { return sum(mul(gelu(x), y)); }, {x}));
    report.emplace_back("numerics", worst);
  }
  {  // image encoder
    VitConfig cfg;
    cfg.image_size = 16;
    cfg.patch_size = 8;
    cfg.width = 8;
    cfg.depth = 1;
    cfg.heads = 2;
    cfg.mixture_tokens = 2;
    auto params = init_vit_params<double>(cfg, 31);
    Tensor<double> imgs = Tensor<double>::zeros({1, 3 * 16 * 16});
    for (long i = 0; i < imgs.numel(); ++i) imgs.data()[i] = rng.uniform();
    auto w = randn({1, 2, 8}, 1.0, false);
    std::vector<Tensor<double>> leaves;
    visit_params(params, [&](const std::string&, Tensor<double>& t) { leaves.push_back(t); });
    report.emplace_back("encoders.image", finite_difference_check(
                                              [&] { return sum(mul(encode_image(imgs, params, cfg), w)); }, leaves));
  }
  {  // text encoder
    TextConfig cfg;
    cfg.vocab_size = 9;
    cfg.context_length = 6;
    cfg.width = 8;
    cfg.depth = 1;
    cfg.heads = 2;
    auto params = init_text_params<double>(cfg, 32);
    TokenBatch tb{2, 6, {1, 5, 4, 2, 0, 0, 1, 7, 2, 0, 0, 0}};
    auto w = randn({2, 8}, 1.0, false);
    std::vector<Tensor<double>> leaves;
    visit_params(params, [&](const std::string&, Tensor<double>& t) { leaves.push_back(t); });
    report.emplace_back("encoders.text", finite_difference_check(
                                             [&] { return sum(mul(encode_text(tb, params, cfg), w)); }, leaves));
  }
  {  // contextualization head
    auto p = init_mixer_params<double>(8, 8, 2, 5.0, false, 33);
    auto h = randn({2, 3, 8}, 1.0, true);
    auto g = randn({2, 8}, 1.0, true);
    auto w = randn({2, 2}, 1.0, false);
    std::vector<Tensor<double>> leaves = {h, g, p.wq, p.wk, p.wv, p.wo, p.wt};
    report.emplace_back("contextualization",
                        finite_difference_check(
                            [&] { return sum(mul(pairwise_scores(contextualize(h, g, p)), w)); }, leaves));
  }
  {  // objectives
    auto p = init_mixer_params<double>(8, 8, 2, 5.0, false, 34);
    auto h = randn({3, 2, 8}, 1.0, true);
    auto g = randn({3, 8}, 1.0, true);
    auto lp = init_loss_params<double>();
    auto lt = Tensor<double>::scalar(1.0).set_requires_grad(true);
    double worst = 0;
    std::vector<Tensor<double>> leaves = {h, g, p.wq, p.wk, p.wv, p.wo, p.wt, lp.log_a, lp.b};
    worst = std::max(worst, finite_difference_check([&] { return llip_loss(contextualize(h, g, p), lp); }, leaves));
    worst = std::max(worst, finite_difference_check(
                                [&] { return siglip_loss(l2_normalize(g), l2_normalize(select_token(h, 0)), lp); },
                                {h, g, lp.log_a, lp.b}));
    worst = std::max(worst, finite_difference_check(
                                [&] { return infonce_loss(l2_normalize(g), l2_normalize(select_token(h, 0)), lt); },
                                {h, g, lt}));
    report.emplace_back("objectives", worst);
  }
  return report;
}

}  // namespace llip
