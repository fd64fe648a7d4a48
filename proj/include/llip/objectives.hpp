#pragma once

#include <cmath>

#include "llip/core/ops.hpp"
#include "llip/mixer.hpp"

namespace llip {

// Learnable scale/bias of the pairwise sigmoid objective. The scale is kept
// positive through its log; with log_a = ln(10) and b = -10 the logit of a
// zero-similarity pair starts at -10.
template <class S>
struct LossParams {
  Tensor<S> log_a;
  Tensor<S> b;
};

template <class S>
LossParams<S> init_loss_params() {
  LossParams<S> p;
  p.log_a = Tensor<S>::scalar(static_cast<S>(std::log(10.0))).set_requires_grad(true);
  p.b = Tensor<S>::scalar(S(-10)).set_requires_grad(true);
  return p;
}

template <class S, class F>
void visit_params(LossParams<S>& p, F&& f) {
  f("loss.log_a", p.log_a);
  f("loss.b", p.b);
}

namespace detail {

// Mean over the batch of per-pair binary log losses on an [N, N] cosine
// grid whose diagonal holds the matched pairs:
//   -(1/N) [ sum_i log s(a*s_ii + b) + sum_{i != j} log s(-(a*s_ij + b)) ].
template <class S>
Tensor<S> sigmoid_pair_loss(const Tensor<S>& scores, const LossParams<S>& lp) {
  if (scores.rank() != 2 || scores.dim(0) != scores.dim(1))
    throw value_error("sigmoid pair loss: need a square score matrix with matched pairs on the diagonal");
  const long n = scores.dim(0);
  if (n < 1) throw value_error("sigmoid pair loss: empty batch");
  Tensor<S> eye = Tensor<S>::zeros({n, n});
  Tensor<S> off = Tensor<S>::full({n, n}, S(1));
  for (long i = 0; i < n; ++i) {
    eye.data()[i * n + i] = S(1);
    off.data()[i * n + i] = S(0);
  }
  auto logits = add_scalar_t(mul_scalar_t(scores, llip::exp(lp.log_a)), lp.b);
  auto pos = sum(mul(log_sigmoid(logits), eye));
  auto neg = sum(mul(log_sigmoid(scale(logits, S(-1))), off));
  return scale(add(pos, neg), S(-1) / static_cast<S>(n));
}

}  // namespace detail

// Contextual pairwise objective over an aligned batch (pair (i,i) matches).
template <class S>
Tensor<S> llip_loss(const ContextualizedBatch<S>& cb, const LossParams<S>& lp) {
  if (cb.z.rank() != 3 || cb.z.dim(0) != cb.z.dim(1))
    throw value_error("llip_loss: batch must have equally many images and captions");
  return detail::sigmoid_pair_loss(pairwise_scores(cb), lp);
}

// Same objective on caption-independent pooled features.
template <class S>
Tensor<S> siglip_loss(const Tensor<S>& features_img, const Tensor<S>& features_txt, const LossParams<S>& lp) {
  if (features_img.rank() != 2 || features_txt.rank() != 2 || features_img.shape() != features_txt.shape())
    throw value_error("siglip_loss: need matching [N,D] feature matrices");
  return detail::sigmoid_pair_loss(matmul(features_img, transpose(features_txt)), lp);
}

// Symmetric cross-entropy baseline over the cosine grid, averaged over the
// image->text and text->image directions. log_inv_temp is learnable; the
// grid is multiplied by exp(log_inv_temp).
template <class S>
Tensor<S> infonce_loss(const Tensor<S>& features_img, const Tensor<S>& features_txt, const Tensor<S>& log_inv_temp) {
  if (features_img.rank() != 2 || features_txt.rank() != 2 || features_img.shape() != features_txt.shape())
    throw value_error("infonce_loss: need matching [N,D] feature matrices");
  const long n = features_img.dim(0);
  if (n < 2) throw value_error("infonce_loss: needs at least two pairs for negatives");
  Tensor<S> eye = Tensor<S>::zeros({n, n});
  for (long i = 0; i < n; ++i) eye.data()[i * n + i] = S(1);
  auto logits = mul_scalar_t(matmul(features_img, transpose(features_txt)), llip::exp(log_inv_temp));
  auto i2t = sum(mul(log_softmax(logits), eye));
  auto t2i = sum(mul(log_softmax(transpose(logits)), eye));
  return scale(add(i2t, t2i), S(-1) / static_cast<S>(2 * n));
}

}  // namespace llip
