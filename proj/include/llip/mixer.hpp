#pragma once

#include <cstdint>
#include <string>

#include "llip/core/ops.hpp"
#include "llip/core/rng.hpp"
#include "llip/encoders.hpp"

namespace llip {

// The five feature-aggregation strategies, from a plain first-token model to
// full text-conditioned mixing.
enum class PoolingVariant { siglip_cls, registers_first, uniform_average, learned_average, llip };

inline const char* to_string(PoolingVariant v) {
  switch (v) {
    case PoolingVariant::siglip_cls: return "siglip";
    case PoolingVariant::registers_first: return "registers";
    case PoolingVariant::uniform_average: return "average";
    case PoolingVariant::learned_average: return "learned-average";
    case PoolingVariant::llip: return "llip";
  }
  return "?";
}

inline PoolingVariant parse_variant(const std::string& s) {
  if (s == "siglip") return PoolingVariant::siglip_cls;
  if (s == "registers") return PoolingVariant::registers_first;
  if (s == "average") return PoolingVariant::uniform_average;
  if (s == "learned-average") return PoolingVariant::learned_average;
  if (s == "llip") return PoolingVariant::llip;
  throw config_error("unknown pooling variant '" + s + "'");
}

// Cross-attention head. Queries come from caption features, keys/values from
// the visual tokens; per-head weights are shared across tokens. No biases and
// no 1/sqrt(dh) scaling: the softmax temperature owns the sharpness.
template <class S>
struct MixerParams {
  Tensor<S> wq;             // [Dt, D]
  Tensor<S> wk;             // [D, D]
  Tensor<S> wv;             // [D, D]
  Tensor<S> wo;             // [D, D]
  Tensor<S> wt;             // [Dt, D]
  Tensor<S> learned_query;  // [1, Dt]; defined only for the learned-average variant
  S tau = S(5);
  long heads = 4;

  void validate(long d) const {
    if (!(tau > S(0))) throw config_error("mixer: tau must be positive");
    if (heads < 1 || d % heads != 0) throw config_error("mixer: width not divisible by heads");
  }
};

template <class S>
MixerParams<S> init_mixer_params(long text_width, long vis_width, long heads, S tau, bool with_learned_query,
                                 std::uint64_t seed) {
  constexpr double w_std = 0.02;
  MixerParams<S> p;
  p.tau = tau;
  p.heads = heads;
  Rng rq(derive_seed(seed, "mixer.wq")), rk(derive_seed(seed, "mixer.wk")), rv(derive_seed(seed, "mixer.wv")),
      ro(derive_seed(seed, "mixer.wo")), rt(derive_seed(seed, "mixer.wt")), rl(derive_seed(seed, "mixer.query"));
  p.wq = detail::trunc_normal<S>({text_width, vis_width}, rq, w_std);
  p.wk = detail::trunc_normal<S>({vis_width, vis_width}, rk, w_std);
  p.wv = detail::trunc_normal<S>({vis_width, vis_width}, rv, w_std);
  p.wo = detail::trunc_normal<S>({vis_width, vis_width}, ro, w_std);
  p.wt = detail::trunc_normal<S>({text_width, vis_width}, rt, w_std);
  if (with_learned_query) p.learned_query = detail::trunc_normal<S>({1, text_width}, rl, w_std);
  p.validate(vis_width);
  return p;
}

template <class S, class F>
void visit_params(MixerParams<S>& p, F&& f) {
  f("mixer.wq", p.wq);
  f("mixer.wk", p.wk);
  f("mixer.wv", p.wv);
  f("mixer.wo", p.wo);
  f("mixer.wt", p.wt);
  if (p.learned_query.defined()) f("mixer.query", p.learned_query);
}

// Pairwise contextual features. z[i][j] is the visual feature of image i
// mixed under caption j; every D-vector is unit length.
template <class S>
struct ContextualizedBatch {
  Tensor<S> z;       // [N_img, N_txt, D]
  Tensor<S> z_text;  // [N_txt, D]
};

// Per-head softmax weights over the tokens of one image for one caption.
// h: [T, D] token outputs, g: [Dt] caption feature -> [M, T].
template <class S>
Tensor<S> mixing_weights(const Tensor<S>& h, const Tensor<S>& g, const MixerParams<S>& p) {
  if (h.rank() != 2 || g.rank() != 1) throw shape_error("mixing_weights: want h[T,D], g[Dt]");
  p.validate(h.dim(1));
  auto q = matmul(reshape(g, {1, g.dim(0)}), p.wq);                 // [1, D]
  auto k = matmul(reshape(h, {1, h.dim(0), h.dim(1)}), p.wk);       // [1, T, D]
  auto phi = softmax_tau(mixer_scores(q, k, p.heads), p.tau);       // [1, 1, M, T]
  return reshape(phi, {p.heads, h.dim(0)});
}

// Full pairwise contextualization of a token batch against a caption batch.
template <class S>
ContextualizedBatch<S> contextualize(const Tensor<S>& tokens, const Tensor<S>& text, const MixerParams<S>& p) {
  if (tokens.rank() != 3 || text.rank() != 2) throw shape_error("contextualize: want tokens[I,T,D], text[J,Dt]");
  p.validate(tokens.dim(2));
  auto q = matmul(text, p.wq);                                  // [J, D]
  auto k = matmul(tokens, p.wk);                                // [I, T, D]
  auto v = matmul(tokens, p.wv);
  auto phi = softmax_tau(mixer_scores(q, k, p.heads), p.tau);   // [I, J, M, T]
  auto z = l2_normalize(matmul(mixer_combine(phi, v), p.wo));   // [I, J, D]
  auto zt = l2_normalize(matmul(text, p.wt));                   // [J, D]
  return {z, zt};
}

// Caption-independent pooled feature [I, D] for the non-contextual variants.
template <class S>
Tensor<S> pool_features(const Tensor<S>& tokens, const MixerParams<S>& p, PoolingVariant variant) {
  if (tokens.rank() != 3) throw shape_error("pool_features: want tokens[I,T,D]");
  p.validate(tokens.dim(2));
  switch (variant) {
    case PoolingVariant::siglip_cls:
      if (tokens.dim(1) != 1) throw config_error("siglip variant requires exactly one learned token");
      return l2_normalize(matmul(select_token(tokens, 0), p.wo));
    case PoolingVariant::registers_first:
      return l2_normalize(matmul(select_token(tokens, 0), p.wo));
    case PoolingVariant::uniform_average:
      return l2_normalize(matmul(mean_tokens(tokens), p.wo));
    case PoolingVariant::learned_average: {
      if (!p.learned_query.defined()) throw config_error("learned-average variant requires a learned query");
      auto q = matmul(p.learned_query, p.wq);                      // [1, D]
      auto k = matmul(tokens, p.wk);
      auto v = matmul(tokens, p.wv);
      auto phi = softmax_tau(mixer_scores(q, k, p.heads), p.tau);  // [I, 1, M, T]
      auto z = matmul(mixer_combine(phi, v), p.wo);                // [I, 1, D]
      return l2_normalize(select_token(z, 0));
    }
    case PoolingVariant::llip:
      throw value_error("pool_features: llip is caption-conditioned; use contextualize");
  }
  throw value_error("pool_features: bad variant");
}

// Variant-agnostic front door: every pooling path yields the same
// [I, J, D] + [J, D] normalized pair so downstream scoring code does not
// care which rung of the ladder produced it.
template <class S>
ContextualizedBatch<S> pool_variant(const Tensor<S>& tokens, const Tensor<S>& text, const MixerParams<S>& p,
                                    PoolingVariant variant) {
  if (variant == PoolingVariant::llip) return contextualize(tokens, text, p);
  auto pooled = pool_features(tokens, p, variant);
  return {replicate_ctx(pooled, text.dim(0)), l2_normalize(matmul(text, p.wt))};
}

// Cosine grid: score[i][j] = z[i][j] . z_text[j]; inputs are unit vectors.
template <class S>
Tensor<S> pairwise_scores(const ContextualizedBatch<S>& cb) {
  return pairwise_dot(cb.z, cb.z_text);
}

}  // namespace llip
