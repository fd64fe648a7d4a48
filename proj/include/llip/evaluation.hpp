#pragma once

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <map>
#include <string>
#include <thread>
#include <vector>

#include "llip/data.hpp"
#include "llip/training.hpp"

namespace llip {

// ---------------------------------------------------------------------------
// worker tiling
// ---------------------------------------------------------------------------

// Worker cap from LLIP_THREADS (default 1; deterministic for a fixed value
// because every tile writes a disjoint output range).
inline long llip_threads() {
  const char* env = std::getenv("LLIP_THREADS");
  if (!env || !*env) return 1;
  char* end = nullptr;
  const long v = std::strtol(env, &end, 10);
  if (end == env || *end != '\0' || v < 1 || v > 256) throw config_error("LLIP_THREADS must be an integer in [1,256]");
  return v;
}

namespace detail {

template <class F>
void parallel_blocks(long total, long workers, F&& fn) {
  workers = std::max(1L, std::min(workers, total));
  if (workers == 1) {
    fn(0L, total);
    return;
  }
  std::vector<std::thread> pool;
  const long chunk = (total + workers - 1) / workers;
  for (long w = 0; w < workers; ++w) {
    const long begin = w * chunk, end = std::min(total, begin + chunk);
    if (begin >= end) break;
    pool.emplace_back([&fn, begin, end] { fn(begin, end); });
  }
  for (auto& t : pool) t.join();
}

}  // namespace detail

// Encode a large image batch in row tiles. Pure forward, parameters shared
// read-only across workers.
template <class S>
Tensor<S> encode_image_tiled(Model<S>& m, const Tensor<S>& images, long workers) {
  const long n = images.dim(0);
  const long t_out = m.vit_cfg.output_tokens(), d = m.vit_cfg.width;
  Tensor<S> out = Tensor<S>::zeros({n, t_out, d});
  detail::parallel_blocks(n, workers, [&](long begin, long end) {
    Tensor<S> block = Tensor<S>::zeros({end - begin, images.dim(1)});
    std::copy(images.data() + begin * images.dim(1), images.data() + end * images.dim(1), block.data());
    auto h = encode_image(block, m.vit, m.vit_cfg);
    std::copy(h.data(), h.data() + h.numel(), out.data() + begin * t_out * d);
  });
  return out;
}

// ---------------------------------------------------------------------------
// zero-shot classification
// ---------------------------------------------------------------------------

struct PromptSet {
  std::vector<std::string> class_names;
  std::vector<std::string> templates;  // format strings with one "{}" slot
};

inline const std::vector<std::string>& default_templates() {
  static const std::vector<std::string> v = {"a photo of a {}", "an image of a {}", "a {} on a background"};
  return v;
}

inline std::string render_template(const std::string& tmpl, const std::string& name) {
  const auto slot = tmpl.find("{}");
  if (slot == std::string::npos) throw value_error("prompt template missing '{}' slot: " + tmpl);
  return tmpl.substr(0, slot) + name + tmpl.substr(slot + 2);
}

namespace detail {

// Mean over the template axis of per-prompt caption features:
// [C*T, D] -> [C, D] (one effective caption per class).
template <class S>
Tensor<S> average_templates(const Tensor<S>& g, long classes, long templates) {
  const long d = g.dim(1);
  Tensor<S> out = Tensor<S>::zeros({classes, d});
  for (long c = 0; c < classes; ++c) {
    S* dst = out.data() + c * d;
    for (long t = 0; t < templates; ++t) {
      const S* src = g.data() + (c * templates + t) * d;
      for (long i = 0; i < d; ++i) dst[i] += src[i];
    }
    for (long i = 0; i < d; ++i) dst[i] /= static_cast<S>(templates);
  }
  return out;
}

template <class S>
Tensor<S> rows_block(const Tensor<S>& x, long begin, long count) {
  Tensor<S> out = Tensor<S>::zeros({count, x.dim(1)});
  std::copy(x.data() + begin * x.dim(1), x.data() + (begin + count) * x.dim(1), out.data());
  return out;
}

// Variant-respecting [N, C] score grid against a caption feature matrix.
// Keys/values are projected once per image; the pairwise mixing is chunked
// over the caption axis to bound the [N, chunk, D] tensors.
template <class S>
Tensor<S> score_against_features(Model<S>& m, const Tensor<S>& tokens, const Tensor<S>& g) {
  const long n = tokens.dim(0), c = g.dim(0);
  Tensor<S> scores = Tensor<S>::zeros({n, c});
  auto zt = l2_normalize(matmul(g, m.mixer.wt));
  if (m.variant != PoolingVariant::llip) {
    auto pooled = pool_features(tokens, m.mixer, m.variant);
    auto s = matmul(pooled, transpose(zt));
    std::copy(s.data(), s.data() + s.numel(), scores.data());
    return scores;
  }
  auto q = matmul(g, m.mixer.wq);
  auto k = matmul(tokens, m.mixer.wk);
  auto v = matmul(tokens, m.mixer.wv);
  const long chunk = 64;
  for (long c0 = 0; c0 < c; c0 += chunk) {
    const long cn = std::min(chunk, c - c0);
    auto phi = softmax_tau(mixer_scores(rows_block(q, c0, cn), k, m.mixer.heads), m.mixer.tau);
    auto z = l2_normalize(matmul(mixer_combine(phi, v), m.mixer.wo));
    auto s = pairwise_dot(z, rows_block(zt, c0, cn));
    for (long i = 0; i < n; ++i)
      std::copy(s.data() + i * cn, s.data() + (i + 1) * cn, scores.data() + i * c + c0);
  }
  return scores;
}

inline long argmax_row(const float* row, long n) {
  long best = 0;
  for (long j = 1; j < n; ++j)
    if (row[j] > row[best]) best = j;  // ties keep the lowest index
  return best;
}

}  // namespace detail

// Appendix-style protocol: every class is rendered under every template, the
// caption features are averaged over the template axis, and that averaged
// feature serves as both the cross-attention query and the scored text
// feature. Prediction is the argmax class, ties to the lowest index.
inline std::vector<long> zero_shot_classify(Model<float>& m, const Tensor<float>& images, const PromptSet& prompts,
                                            const data::Vocabulary& vocab, long workers = 1) {
  if (prompts.class_names.empty()) throw value_error("zero_shot_classify: empty class list");
  if (prompts.templates.empty()) throw value_error("zero_shot_classify: empty template list");
  std::vector<std::string> rendered;
  for (const auto& cls : prompts.class_names)
    for (const auto& tmpl : prompts.templates) rendered.push_back(render_template(tmpl, cls));

  auto tb = data::tokenize_batch(rendered, vocab, m.txt_cfg.context_length);
  auto g_all = encode_text(tb, m.txt, m.txt_cfg);
  auto g = detail::average_templates(g_all, static_cast<long>(prompts.class_names.size()),
                                     static_cast<long>(prompts.templates.size()));

  auto h = encode_image_tiled(m, images, workers);
  auto scores = detail::score_against_features(m, h, g);
  std::vector<long> pred(static_cast<std::size_t>(images.dim(0)));
  for (long i = 0; i < images.dim(0); ++i)
    pred[static_cast<std::size_t>(i)] = detail::argmax_row(scores.data() + i * scores.dim(1), scores.dim(1));
  return pred;
}

// ---------------------------------------------------------------------------
// retrieval
// ---------------------------------------------------------------------------

struct RecallReport {
  std::map<long, double> image_to_text;
  std::map<long, double> text_to_image;
};

// Recall of the diagonal pairs from an [N, N] score grid. Equal scores rank
// by index, so duplicated captions resolve deterministically.
inline RecallReport recall_from_scores(const Tensor<float>& scores, const std::vector<long>& ks) {
  if (scores.rank() != 2 || scores.dim(0) != scores.dim(1)) throw shape_error("recall: need a square score grid");
  const long n = scores.dim(0);
  for (long k : ks)
    if (k < 1 || k > n) throw value_error("recall: k out of range");

  const auto rank_of = [&](long true_idx, auto&& score_at) {
    const float s_true = score_at(true_idx);
    long rank = 1;
    for (long o = 0; o < n; ++o) {
      if (o == true_idx) continue;
      const float s = score_at(o);
      if (s > s_true || (s == s_true && o < true_idx)) ++rank;
    }
    return rank;
  };

  RecallReport report;
  for (long k : ks) {
    report.image_to_text[k] = 0;
    report.text_to_image[k] = 0;
  }
  for (long i = 0; i < n; ++i) {
    const long r = rank_of(i, [&](long j) { return scores.at({i, j}); });
    for (long k : ks)
      if (r <= k) report.image_to_text[k] += 1.0;
  }
  for (long j = 0; j < n; ++j) {
    const long r = rank_of(j, [&](long i) { return scores.at({i, j}); });
    for (long k : ks)
      if (r <= k) report.text_to_image[k] += 1.0;
  }
  for (long k : ks) {
    report.image_to_text[k] /= static_cast<double>(n);
    report.text_to_image[k] /= static_cast<double>(n);
  }
  return report;
}

// Aligned-pair recall in both directions. The score of pair (i, j) always
// uses the visual feature contextualized by caption j.
inline RecallReport retrieval_recall(Model<float>& m, const Tensor<float>& images, const TokenBatch& captions,
                                     const std::vector<long>& ks, long workers = 1) {
  const long n = images.dim(0);
  if (captions.n != n) throw value_error("retrieval_recall: need aligned image/caption pairs");
  auto h = encode_image_tiled(m, images, workers);
  auto g = encode_text(captions, m.txt, m.txt_cfg);
  return recall_from_scores(detail::score_against_features(m, h, g), ks);
}

// ---------------------------------------------------------------------------
// singular value spectrum of the feature covariance
// ---------------------------------------------------------------------------

struct SpectrumReport {
  std::vector<double> singular_values;  // descending
  double effective_rank = 0;            // exp(entropy of the normalized spectrum)
  long n_samples = 0;
  std::string model_id;
};

// Cyclic Jacobi sweeps on a symmetric matrix (row-major d x d); returns the
// eigenvalues sorted descending. Plenty accurate for d <= a few hundred.
inline std::vector<double> jacobi_eigenvalues(std::vector<double> a, long d, double tol = 1e-10) {
  if (d < 1 || static_cast<long>(a.size()) != d * d) throw shape_error("jacobi_eigenvalues: bad matrix");
  double scale = 0;
  for (long i = 0; i < d; ++i) scale = std::max(scale, std::abs(a[i * d + i]));
  scale = std::max(scale, 1e-300);
  const double stop = tol * scale;
  for (int sweep = 0; sweep < 100; ++sweep) {
    double off = 0;
    for (long p = 0; p < d; ++p)
      for (long q = p + 1; q < d; ++q) off = std::max(off, std::abs(a[p * d + q]));
    if (off <= stop) break;
    for (long p = 0; p < d; ++p) {
      for (long q = p + 1; q < d; ++q) {
        const double apq = a[p * d + q];
        if (std::abs(apq) <= stop * 1e-3) continue;
        const double app = a[p * d + p], aqq = a[q * d + q];
        const double theta = 0.5 * (aqq - app) / apq;
        const double t = (theta >= 0 ? 1.0 : -1.0) / (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0), s = t * c;
        for (long i = 0; i < d; ++i) {
          const double aip = a[i * d + p], aiq = a[i * d + q];
          a[i * d + p] = c * aip - s * aiq;
          a[i * d + q] = s * aip + c * aiq;
        }
        for (long i = 0; i < d; ++i) {
          const double api = a[p * d + i], aqi = a[q * d + i];
          a[p * d + i] = c * api - s * aqi;
          a[q * d + i] = s * api + c * aqi;
        }
      }
    }
  }
  std::vector<double> eig(static_cast<std::size_t>(d));
  for (long i = 0; i < d; ++i) eig[static_cast<std::size_t>(i)] = std::max(0.0, a[i * d + i]);
  std::sort(eig.begin(), eig.end(), std::greater<>());
  return eig;
}

// Centered covariance spectrum of a [n, D] feature matrix. For mixture-token
// models pass the token outputs folded along the sample axis (raw encoder
// outputs, before any normalization).
template <class S>
SpectrumReport spectrum_from_features(const Tensor<S>& feats, std::string model_id = {}) {
  if (feats.rank() != 2) throw shape_error("spectrum: want [n, D] features");
  const long n = feats.dim(0), d = feats.dim(1);
  if (n < d) throw value_error("spectrum: needs at least as many samples as feature dimensions");

  std::vector<double> mean(static_cast<std::size_t>(d), 0.0);
  for (long i = 0; i < n; ++i)
    for (long j = 0; j < d; ++j) mean[static_cast<std::size_t>(j)] += static_cast<double>(feats.data()[i * d + j]);
  for (double& v : mean) v /= static_cast<double>(n);

  std::vector<double> cov(static_cast<std::size_t>(d * d), 0.0);
  std::vector<double> row(static_cast<std::size_t>(d));
  for (long i = 0; i < n; ++i) {
    for (long j = 0; j < d; ++j)
      row[static_cast<std::size_t>(j)] = static_cast<double>(feats.data()[i * d + j]) - mean[static_cast<std::size_t>(j)];
    for (long a = 0; a < d; ++a)
      for (long b = a; b < d; ++b) cov[a * d + b] += row[static_cast<std::size_t>(a)] * row[static_cast<std::size_t>(b)];
  }
  for (long a = 0; a < d; ++a)
    for (long b = a; b < d; ++b) {
      cov[a * d + b] /= static_cast<double>(n);
      cov[b * d + a] = cov[a * d + b];
    }

  SpectrumReport report;
  report.model_id = std::move(model_id);
  report.n_samples = n;
  report.singular_values = jacobi_eigenvalues(std::move(cov), d);

  double total = 0;
  for (double v : report.singular_values) total += v;
  double entropy = 0;
  if (total > 0) {
    for (double v : report.singular_values) {
      if (v <= 0) continue;
      const double p = v / total;
      entropy -= p * std::log(p);
    }
  }
  report.effective_rank = std::exp(entropy);
  return report;
}

// Token features for spectrum analysis: [N, T, D] -> [N*T, D].
template <class S>
Tensor<S> fold_tokens(const Tensor<S>& h) {
  if (h.rank() != 3) throw shape_error("fold_tokens: want [N, T, D]");
  return reshape(h, {h.dim(0) * h.dim(1), h.dim(2)});
}

// ---------------------------------------------------------------------------
// inference cost model
// ---------------------------------------------------------------------------

// Forward multiply-add counts for one zero-shot prediction pipeline. Mirrors
// the implemented compute exactly: FLOPs = 2 * MACs.
struct FlopsBreakdown {
  double backbone = 0;  // image encoder, per image
  double mixer = 0;     // kv projections + per-class mixing, per image
  double text = 0;      // prompt encoding + projections, per class set

  double per_image_macs(double amortize_images) const { return backbone + mixer + text / amortize_images; }
  double per_image_flops(double amortize_images) const { return 2.0 * per_image_macs(amortize_images); }
};

inline double transformer_block_macs(double tokens, double width) {
  return 12.0 * tokens * width * width + 2.0 * tokens * tokens * width;
}

inline FlopsBreakdown flops_estimate(const VitConfig& vit, const TextConfig& txt, long n_classes,
                                     long templates_per_class = 1) {
  vit.validate();
  txt.validate();
  if (n_classes < 1 || templates_per_class < 1) throw value_error("flops_estimate: bad class/template counts");
  const double d = static_cast<double>(vit.width), dt = static_cast<double>(txt.width);
  const double t_all = static_cast<double>(vit.token_count());
  const double t_out = static_cast<double>(vit.output_tokens());
  const double c = static_cast<double>(n_classes);
  const double l = static_cast<double>(txt.context_length);

  FlopsBreakdown f;
  f.backbone = static_cast<double>(vit.patches()) * static_cast<double>(vit.patch_dim()) * d +
               static_cast<double>(vit.depth) * transformer_block_macs(t_all, d);
  // per image: key/value projections once, then per class the head-wise
  // mixing (t_out*d each for scores and combine), output projection, cosine
  f.mixer = 2.0 * t_out * d * d + c * (2.0 * t_out * d + d * d + d);
  f.text = c * static_cast<double>(templates_per_class) * static_cast<double>(txt.depth) *
               transformer_block_macs(l, dt) +
           2.0 * c * dt * d;  // query and text projections of the averaged feature
  return f;
}

// Llip-over-baseline inference cost, the baseline being the same pipeline
// with a single mixture token.
inline double overhead_ratio(const VitConfig& vit, const TextConfig& txt, long n_classes, double amortize_images,
                             long templates_per_class = 1) {
  VitConfig base = vit;
  base.mixture_tokens = 1;
  const auto a = flops_estimate(vit, txt, n_classes, templates_per_class);
  const auto b = flops_estimate(base, txt, n_classes, templates_per_class);
  return a.per_image_macs(amortize_images) / b.per_image_macs(amortize_images);
}

// ---------------------------------------------------------------------------
// shortcut diagnostic
// ---------------------------------------------------------------------------

// Mean pairwise L2 distance between the contextual features of all images
// under one fixed caption. Near zero means the visual pathway is ignored.
// Normalization is guarded (zero vectors stay zero) so that a deliberately
// collapsed model can be measured instead of erroring out.
inline double shortcut_diagnostic(Model<float>& m, const Tensor<float>& images, const TokenBatch& caption,
                                  long workers = 1) {
  const long n = images.dim(0);
  if (n < 2) throw value_error("shortcut_diagnostic: needs at least two images");
  if (caption.n != 1) throw value_error("shortcut_diagnostic: exactly one caption");

  auto h = encode_image_tiled(m, images, workers);
  auto g = encode_text(caption, m.txt, m.txt_cfg);
  auto q = matmul(g, m.mixer.wq);
  auto k = matmul(h, m.mixer.wk);
  auto v = matmul(h, m.mixer.wv);
  auto phi = softmax_tau(mixer_scores(q, k, m.mixer.heads), m.mixer.tau);
  auto z = matmul(mixer_combine(phi, v), m.mixer.wo);  // [n, 1, D] unnormalized

  const long d = z.dim(2);
  std::vector<double> zhat(static_cast<std::size_t>(n * d));
  for (long i = 0; i < n; ++i) {
    double norm = 0;
    for (long c = 0; c < d; ++c) norm += static_cast<double>(z.data()[i * d + c]) * z.data()[i * d + c];
    norm = std::sqrt(norm);
    const double inv = norm > 1e-12 ? 1.0 / norm : 0.0;
    for (long c = 0; c < d; ++c) zhat[static_cast<std::size_t>(i * d + c)] = z.data()[i * d + c] * inv;
  }
  double total = 0;
  long pairs = 0;
  for (long i = 0; i < n; ++i)
    for (long j = i + 1; j < n; ++j) {
      double sq = 0;
      for (long c = 0; c < d; ++c) {
        const double diff = zhat[static_cast<std::size_t>(i * d + c)] - zhat[static_cast<std::size_t>(j * d + c)];
        sq += diff * diff;
      }
      total += std::sqrt(sq);
      ++pairs;
    }
  return total / static_cast<double>(pairs);
}

}  // namespace llip
