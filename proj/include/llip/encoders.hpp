#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "llip/core/ops.hpp"
#include "llip/core/rng.hpp"
#include "llip/core/tensor.hpp"
#include "llip/tokens.hpp"

namespace llip {

struct VitConfig {
  long image_size = 32;
  long patch_size = 8;
  long width = 64;
  long depth = 4;
  long heads = 4;
  long mixture_tokens = 16;  // K
  bool emit_patch_tokens = false;

  long patches() const { return (image_size / patch_size) * (image_size / patch_size); }
  long patch_dim() const { return 3 * patch_size * patch_size; }
  long token_count() const { return mixture_tokens + patches(); }
  long output_tokens() const { return emit_patch_tokens ? token_count() : mixture_tokens; }

  void validate() const {
    if (image_size < 1 || patch_size < 1 || image_size % patch_size != 0)
      throw config_error("vit: image_size must be a positive multiple of patch_size");
    if (mixture_tokens < 1) throw config_error("vit: mixture token count must be >= 1");
    if (width < 1 || heads < 1 || width % heads != 0) throw config_error("vit: width must be divisible by heads");
    if (depth < 1) throw config_error("vit: depth must be >= 1");
  }
};

struct TextConfig {
  long vocab_size = 0;  // filled from the dataset vocabulary
  long context_length = 16;
  long width = 64;
  long depth = 2;
  long heads = 4;

  void validate() const {
    if (vocab_size < 5) throw config_error("text: vocab too small (needs specials plus at least one word)");
    if (context_length < 3) throw config_error("text: context_length must be >= 3");
    if (width < 1 || heads < 1 || width % heads != 0) throw config_error("text: width must be divisible by heads");
    if (depth < 1) throw config_error("text: depth must be >= 1");
  }
};

template <class S>
struct BlockParams {
  Tensor<S> ln1_g, ln1_b;
  Tensor<S> wq, bq, wk, bk, wv, bv, wo, bo;
  Tensor<S> ln2_g, ln2_b;
  Tensor<S> w1, b1, w2, b2;
};

template <class S>
struct VitParams {
  Tensor<S> patch_w, patch_b;   // [patch_dim, D], [D]
  Tensor<S> mixture_tokens;     // [K, D]
  Tensor<S> pos;                // [K+P, D]
  std::vector<BlockParams<S>> blocks;
  Tensor<S> ln_f_g, ln_f_b;
};

template <class S>
struct TextParams {
  Tensor<S> token_embed;  // [V, D]
  Tensor<S> pos;          // [L, D]
  std::vector<BlockParams<S>> blocks;
  Tensor<S> ln_f_g, ln_f_b;
};

namespace detail {

template <class S>
Tensor<S> trunc_normal(Shape shape, Rng& rng, double stddev) {
  Tensor<S> t = Tensor<S>::zeros(std::move(shape));
  for (long i = 0; i < t.numel(); ++i) t.data()[i] = static_cast<S>(rng.truncated_normal(stddev));
  t.set_requires_grad(true);
  return t;
}

template <class S>
Tensor<S> param_zeros(Shape shape) {
  return Tensor<S>::zeros(std::move(shape)).set_requires_grad(true);
}

template <class S>
Tensor<S> param_ones(Shape shape) {
  return Tensor<S>::full(std::move(shape), S(1)).set_requires_grad(true);
}

template <class S>
BlockParams<S> init_block(long d, std::uint64_t seed, const std::string& label) {
  constexpr double w_std = 0.02;
  BlockParams<S> b;
  b.ln1_g = param_ones<S>({d});
  b.ln1_b = param_zeros<S>({d});
  Rng rq(derive_seed(seed, label + ".wq")), rk(derive_seed(seed, label + ".wk")), rv(derive_seed(seed, label + ".wv")),
      ro(derive_seed(seed, label + ".wo")), r1(derive_seed(seed, label + ".w1")), r2(derive_seed(seed, label + ".w2"));
  b.wq = trunc_normal<S>({d, d}, rq, w_std);
  b.bq = param_zeros<S>({d});
  b.wk = trunc_normal<S>({d, d}, rk, w_std);
  b.bk = param_zeros<S>({d});
  b.wv = trunc_normal<S>({d, d}, rv, w_std);
  b.bv = param_zeros<S>({d});
  b.wo = trunc_normal<S>({d, d}, ro, w_std);
  b.bo = param_zeros<S>({d});
  b.ln2_g = param_ones<S>({d});
  b.ln2_b = param_zeros<S>({d});
  b.w1 = trunc_normal<S>({d, 4 * d}, r1, w_std);
  b.b1 = param_zeros<S>({4 * d});
  b.w2 = trunc_normal<S>({4 * d, d}, r2, w_std);
  b.b2 = param_zeros<S>({d});
  return b;
}

template <class S, class F>
void visit_block(BlockParams<S>& b, const std::string& prefix, F&& f) {
  f(prefix + ".ln1.g", b.ln1_g);
  f(prefix + ".ln1.b", b.ln1_b);
  f(prefix + ".wq", b.wq);
  f(prefix + ".bq", b.bq);
  f(prefix + ".wk", b.wk);
  f(prefix + ".bk", b.bk);
  f(prefix + ".wv", b.wv);
  f(prefix + ".bv", b.bv);
  f(prefix + ".wo", b.wo);
  f(prefix + ".bo", b.bo);
  f(prefix + ".ln2.g", b.ln2_g);
  f(prefix + ".ln2.b", b.ln2_b);
  f(prefix + ".mlp.w1", b.w1);
  f(prefix + ".mlp.b1", b.b1);
  f(prefix + ".mlp.w2", b.w2);
  f(prefix + ".mlp.b2", b.b2);
}

}  // namespace detail

template <class S>
VitParams<S> init_vit_params(const VitConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  constexpr double w_std = 0.02;
  VitParams<S> p;
  Rng rp(derive_seed(seed, "vit.patch")), rt(derive_seed(seed, "vit.tokens")), rpos(derive_seed(seed, "vit.pos"));
  p.patch_w = detail::trunc_normal<S>({cfg.patch_dim(), cfg.width}, rp, w_std);
  p.patch_b = detail::param_zeros<S>({cfg.width});
  p.mixture_tokens = detail::trunc_normal<S>({cfg.mixture_tokens, cfg.width}, rt, w_std);
  p.pos = detail::trunc_normal<S>({cfg.token_count(), cfg.width}, rpos, w_std);
  for (long i = 0; i < cfg.depth; ++i)
    p.blocks.push_back(detail::init_block<S>(cfg.width, seed, "vit.blocks." + std::to_string(i)));
  p.ln_f_g = detail::param_ones<S>({cfg.width});
  p.ln_f_b = detail::param_zeros<S>({cfg.width});
  return p;
}

template <class S>
TextParams<S> init_text_params(const TextConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  constexpr double w_std = 0.02;
  TextParams<S> p;
  Rng re(derive_seed(seed, "txt.embed")), rpos(derive_seed(seed, "txt.pos"));
  p.token_embed = detail::trunc_normal<S>({cfg.vocab_size, cfg.width}, re, w_std);
  p.pos = detail::trunc_normal<S>({cfg.context_length, cfg.width}, rpos, w_std);
  for (long i = 0; i < cfg.depth; ++i)
    p.blocks.push_back(detail::init_block<S>(cfg.width, seed, "txt.blocks." + std::to_string(i)));
  p.ln_f_g = detail::param_ones<S>({cfg.width});
  p.ln_f_b = detail::param_zeros<S>({cfg.width});
  return p;
}

template <class S, class F>
void visit_params(VitParams<S>& p, F&& f) {
  f("vit.patch.w", p.patch_w);
  f("vit.patch.b", p.patch_b);
  f("vit.tokens", p.mixture_tokens);
  f("vit.pos", p.pos);
  for (std::size_t i = 0; i < p.blocks.size(); ++i)
    detail::visit_block(p.blocks[i], "vit.blocks." + std::to_string(i), f);
  f("vit.ln_f.g", p.ln_f_g);
  f("vit.ln_f.b", p.ln_f_b);
}

template <class S, class F>
void visit_params(TextParams<S>& p, F&& f) {
  f("txt.embed", p.token_embed);
  f("txt.pos", p.pos);
  for (std::size_t i = 0; i < p.blocks.size(); ++i)
    detail::visit_block(p.blocks[i], "txt.blocks." + std::to_string(i), f);
  f("txt.ln_f.g", p.ln_f_g);
  f("txt.ln_f.b", p.ln_f_b);
}

// Splits one [3,H,W] image into non-overlapping patch rows, row-major over
// the patch grid. Each row is channel-major: (c, py, px).
template <class S>
Tensor<S> patchify(const Tensor<S>& image, const VitConfig& cfg) {
  cfg.validate();
  if (image.rank() != 3 || image.dim(0) != 3 || image.dim(1) != cfg.image_size || image.dim(2) != cfg.image_size)
    throw value_error("patchify: expected a [3," + std::to_string(cfg.image_size) + "," +
                      std::to_string(cfg.image_size) + "] image");
  for (long i = 0; i < image.numel(); ++i) {
    const double v = static_cast<double>(image.data()[i]);
    if (v < -1e-6 || v > 1.0 + 1e-6) throw value_error("patchify: pixel values must lie in [0,1]");
  }
  const long s = cfg.image_size, ps = cfg.patch_size, g = s / ps;
  Tensor<S> out = Tensor<S>::zeros({g * g, cfg.patch_dim()});
  for (long py = 0; py < g; ++py)
    for (long px = 0; px < g; ++px) {
      S* row = out.data() + (py * g + px) * cfg.patch_dim();
      long o = 0;
      for (long c = 0; c < 3; ++c)
        for (long y = 0; y < ps; ++y)
          for (long x = 0; x < ps; ++x) row[o++] = image.data()[(c * s + py * ps + y) * s + px * ps + x];
    }
  return out;
}

// Batch variant over [N, 3*H*W] planar images; pure data movement.
template <class S>
Tensor<S> patchify_batch(const Tensor<S>& images, const VitConfig& cfg) {
  if (images.rank() != 2 || images.dim(1) != 3 * cfg.image_size * cfg.image_size)
    throw value_error("patchify_batch: expected [N, 3*H*W] images");
  const long n = images.dim(0), s = cfg.image_size, ps = cfg.patch_size, g = s / ps;
  Tensor<S> out = Tensor<S>::zeros({n, g * g, cfg.patch_dim()});
  for (long b = 0; b < n; ++b) {
    const S* img = images.data() + b * 3 * s * s;
    S* dst = out.data() + b * g * g * cfg.patch_dim();
    for (long py = 0; py < g; ++py)
      for (long px = 0; px < g; ++px) {
        S* row = dst + (py * g + px) * cfg.patch_dim();
        long o = 0;
        for (long c = 0; c < 3; ++c)
          for (long y = 0; y < ps; ++y)
            for (long x = 0; x < ps; ++x) row[o++] = img[(c * s + py * ps + y) * s + px * ps + x];
      }
  }
  return out;
}

template <class S>
Tensor<S> transformer_block(const Tensor<S>& x, const BlockParams<S>& blk, long heads, bool causal) {
  auto h = layer_norm(x, blk.ln1_g, blk.ln1_b);
  auto att = attention(linear(h, blk.wq, blk.bq), linear(h, blk.wk, blk.bk), linear(h, blk.wv, blk.bv), heads, causal);
  auto x1 = add(x, linear(att, blk.wo, blk.bo));
  auto m = layer_norm(x1, blk.ln2_g, blk.ln2_b);
  return add(x1, linear(gelu(linear(m, blk.w1, blk.b1)), blk.w2, blk.b2));
}

// Runs the pre-norm ViT over patch embeddings with the K learned mixture
// tokens prepended (positions 0..K-1). Returns [N, K, D] token outputs, or
// [N, K+P, D] when the patch outputs participate downstream too.
template <class S>
Tensor<S> encode_image(const Tensor<S>& images, const VitParams<S>& p, const VitConfig& cfg) {
  auto x = linear(patchify_batch(images, cfg), p.patch_w, p.patch_b);
  x = add_pos(concat_tokens(p.mixture_tokens, x), p.pos);
  for (const auto& blk : p.blocks) x = transformer_block(x, blk, cfg.heads, /*causal=*/false);
  x = layer_norm(x, p.ln_f_g, p.ln_f_b);
  if (!cfg.emit_patch_tokens) x = slice_tokens(x, 0, cfg.mixture_tokens);
  return x;
}

// Causal transformer over token embeddings; the pooled caption feature is
// the final-layer-norm output at the EOS position.
template <class S>
Tensor<S> encode_text(const TokenBatch& tokens, const TextParams<S>& p, const TextConfig& cfg) {
  if (tokens.len != cfg.context_length)
    throw value_error("encode_text: sequence length " + std::to_string(tokens.len) + " does not match context " +
                      std::to_string(cfg.context_length));
  std::vector<long> eos_pos(static_cast<std::size_t>(tokens.n), -1);
  for (long r = 0; r < tokens.n; ++r) {
    const int* row = tokens.ids.data() + r * tokens.len;
    if (row[0] != tok::bos) throw value_error("encode_text: sequence must start with <bos>");
    long count = 0;
    for (long i = 0; i < tokens.len; ++i) {
      if (row[i] == tok::eos) {
        eos_pos[static_cast<std::size_t>(r)] = i;
        ++count;
      }
    }
    if (count != 1) throw value_error("encode_text: sequence must contain exactly one <eos>");
  }
  auto x = add_pos(embedding(p.token_embed, tokens), p.pos);
  for (const auto& blk : p.blocks) x = transformer_block(x, blk, cfg.heads, /*causal=*/true);
  x = layer_norm(x, p.ln_f_g, p.ln_f_b);
  return select_positions(x, eos_pos);
}

}  // namespace llip
