#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "llip/core/gradcheck.hpp"
#include "llip/objectives.hpp"
#include "test_util.hpp"

using namespace llip;
using llip::testing::randn;

namespace {

template <class S>
LossParams<S> loss_params(double a, double b) {
  LossParams<S> p;
  p.log_a = Tensor<S>::scalar(static_cast<S>(std::log(a))).set_requires_grad(true);
  p.b = Tensor<S>::scalar(static_cast<S>(b)).set_requires_grad(true);
  return p;
}

// Batch whose every pairwise similarity is exactly `sim`, built from unit
// vectors in a 2-D plane.
ContextualizedBatch<double> constant_sim_batch(long n, double sim) {
  const double theta = std::acos(sim);
  ContextualizedBatch<double> cb;
  cb.z = Tensor<double>::zeros({n, n, 2});
  cb.z_text = Tensor<double>::zeros({n, 2});
  for (long j = 0; j < n; ++j) {
    cb.z_text.data()[j * 2 + 0] = 1.0;
    for (long i = 0; i < n; ++i) {
      cb.z.data()[(i * n + j) * 2 + 0] = std::cos(theta);
      cb.z.data()[(i * n + j) * 2 + 1] = std::sin(theta);
    }
  }
  return cb;
}

}  // namespace

TEST_CASE("llip_loss analytic values") {
  SUBCASE("N=2, zero similarities, a=1, b=0") {
    auto loss = llip_loss(constant_sim_batch(2, 0.0), loss_params<double>(1.0, 0.0));
    CHECK(std::abs(loss.item() - 2.0 * std::log(2.0)) <= 1e-4);
  }
  SUBCASE("N=1, similarity 1, a=1, b=0: only the positive term") {
    auto loss = llip_loss(constant_sim_batch(1, 1.0), loss_params<double>(1.0, 0.0));
    const double expected = -std::log(1.0 / (1.0 + std::exp(-1.0)));
    CHECK(std::abs(loss.item() - expected) <= 1e-4);
    CHECK(loss.item() == doctest::Approx(0.3132616875));
  }
  SUBCASE("N=2, zero similarities, a=1, b=-10") {
    auto loss = llip_loss(constant_sim_batch(2, 0.0), loss_params<double>(1.0, -10.0));
    CHECK(std::abs(loss.item() - 10.0000908) <= 1e-4);
  }
  SUBCASE("mismatched image/caption counts are rejected") {
    ContextualizedBatch<double> cb;
    cb.z = Tensor<double>::zeros({2, 3, 2});
    cb.z_text = Tensor<double>::zeros({3, 2});
    CHECK_THROWS_AS(llip_loss(cb, loss_params<double>(1.0, 0.0)), value_error);
  }
}

TEST_CASE("siglip_loss matches llip_loss on caption-independent features") {
  Rng rng(50);
  auto fi = l2_normalize(randn<double>({3, 6}, rng));
  auto ft = l2_normalize(randn<double>({3, 6}, rng));
  auto lp = loss_params<double>(4.0, -2.0);

  ContextualizedBatch<double> cb;
  cb.z = replicate_ctx(fi, 3);
  cb.z_text = ft;
  CHECK(siglip_loss(fi, ft, lp).item() == doctest::Approx(llip_loss(cb, lp).item()).epsilon(1e-12));

  auto zero = constant_sim_batch(2, 0.0);
  CHECK(siglip_loss(select_token(zero.z, 0), zero.z_text, loss_params<double>(1.0, 0.0)).item() ==
        doctest::Approx(2.0 * std::log(2.0)));
}

TEST_CASE("loss gradients match finite differences") {
  Rng rng(51);
  SUBCASE("siglip") {
    auto fi = randn<double>({3, 5}, rng, 1.0, true);
    auto ft = randn<double>({3, 5}, rng, 1.0, true);
    auto lp = loss_params<double>(3.0, -1.0);
    const double err = finite_difference_check(
        [&] { return siglip_loss(l2_normalize(fi), l2_normalize(ft), lp); }, {fi, ft, lp.log_a, lp.b});
    CHECK(err <= 1e-4);
  }
  SUBCASE("infonce") {
    auto fi = randn<double>({3, 5}, rng, 1.0, true);
    auto ft = randn<double>({3, 5}, rng, 1.0, true);
    auto lt = Tensor<double>::scalar(1.2).set_requires_grad(true);
    const double err = finite_difference_check(
        [&] { return infonce_loss(l2_normalize(fi), l2_normalize(ft), lt); }, {fi, ft, lt});
    CHECK(err <= 1e-4);
  }
  SUBCASE("llip end to end over the head") {
    auto p = init_mixer_params<double>(6, 6, 2, 5.0, false, 99);
    auto h = randn<double>({2, 3, 6}, rng, 1.0, true);
    auto g = randn<double>({2, 6}, rng, 1.0, true);
    auto lp = loss_params<double>(2.0, -3.0);
    std::vector<Tensor<double>> leaves = {h, g, p.wq, p.wk, p.wv, p.wo, p.wt, lp.log_a, lp.b};
    const double err =
        finite_difference_check([&] { return llip_loss(contextualize(h, g, p), lp); }, leaves);
    CHECK(err <= 1e-4);
  }
}

TEST_CASE("infonce analytic values") {
  SUBCASE("uniform zero logits give ln 2 at N=2") {
    auto fi = Tensor<double>::from({2, 4}, {1, 0, 0, 0, 0, 1, 0, 0});
    auto ft = Tensor<double>::from({2, 4}, {0, 0, 1, 0, 0, 0, 0, 1});
    auto lt = Tensor<double>::scalar(0.0);
    CHECK(infonce_loss(fi, ft, lt).item() == doctest::Approx(std::log(2.0)));
  }
  SUBCASE("saturated correct logits drive the loss to zero") {
    auto fi = Tensor<double>::from({2, 2}, {1, 0, 0, 1});
    auto lt = Tensor<double>::scalar(std::log(200.0));  // very low temperature
    CHECK(infonce_loss(fi, fi, lt).item() <= 1e-6);
  }
  SUBCASE("a single pair has no negatives") {
    auto fi = Tensor<double>::from({1, 2}, {1, 0});
    CHECK_THROWS_AS(infonce_loss(fi, fi, Tensor<double>::scalar(0.0)), value_error);
  }
}

TEST_CASE("loss is monotone in the right directions") {
  auto lp = loss_params<double>(2.0, -1.0);
  auto at = [&](long i, long j, double delta) {
    Tensor<double> s = Tensor<double>::zeros({3, 3});
    for (long a = 0; a < 3; ++a)
      for (long b = 0; b < 3; ++b) s.data()[a * 3 + b] = 0.1;
    s.data()[i * 3 + j] += delta;
    return llip::detail::sigmoid_pair_loss(s, lp).item();
  };
  // raising a matched-pair similarity lowers the loss
  CHECK(at(1, 1, 0.2) < at(1, 1, 0.0));
  CHECK(at(1, 1, -0.2) > at(1, 1, 0.0));
  // raising any mismatched similarity raises it
  CHECK(at(0, 2, 0.2) > at(0, 2, 0.0));
  CHECK(at(2, 1, 0.2) > at(2, 1, 0.0));
}

TEST_CASE("loss is invariant under joint permutation of images and captions") {
  Rng rng(52);
  auto p = init_mixer_params<double>(6, 6, 2, 5.0, false, 1);
  auto h = randn<double>({4, 3, 6}, rng);
  auto g = randn<double>({4, 6}, rng);
  auto lp = loss_params<double>(2.0, -2.0);
  const double base = llip_loss(contextualize(h, g, p), lp).item();

  const std::vector<long> pi = {3, 1, 0, 2};
  Tensor<double> hp = Tensor<double>::zeros({4, 3, 6});
  Tensor<double> gp = Tensor<double>::zeros({4, 6});
  for (long i = 0; i < 4; ++i) {
    std::copy_n(h.data() + pi[i] * 18, 18, hp.data() + i * 18);
    std::copy_n(g.data() + pi[i] * 6, 6, gp.data() + i * 6);
  }
  const double permuted = llip_loss(contextualize(hp, gp, p), lp).item();
  CHECK(std::abs(base - permuted) <= 1e-6);
}

TEST_CASE("negative pairs exert pressure on the image pathway") {
  Rng rng(53);
  auto p = init_mixer_params<double>(6, 6, 2, 5.0, false, 2);
  auto h = randn<double>({3, 4, 6}, rng, 1.0, true);
  auto g = randn<double>({3, 6}, rng);
  auto lp = loss_params<double>(1.0, 0.0);  // far from saturation
  Tape<double> tape;
  auto loss = llip_loss(contextualize(h, g, p), lp);
  backward(loss, tape);
  double norm = 0;
  for (double v : h.grad()) norm += v * v;
  CHECK(norm > 0.0);
}

TEST_CASE("one small gradient step lowers the loss") {
  Rng rng(54);
  auto p = init_mixer_params<double>(6, 6, 2, 5.0, false, 3);
  auto h = randn<double>({4, 3, 6}, rng, 1.0, true);
  auto g = randn<double>({4, 6}, rng, 1.0, true);
  auto lp = loss_params<double>(2.0, -4.0);
  std::vector<Tensor<double>> leaves = {h, g, p.wq, p.wk, p.wv, p.wo, p.wt, lp.log_a, lp.b};

  double before;
  {
    Tape<double> tape;
    auto loss = llip_loss(contextualize(h, g, p), lp);
    before = loss.item();
    backward(loss, tape);
  }
  for (auto& t : leaves) {
    if (!t.has_grad()) continue;
    for (long i = 0; i < t.numel(); ++i) t.data()[i] -= 1e-2 * t.grad()[static_cast<std::size_t>(i)];
    t.zero_grad();
  }
  const double after = llip_loss(contextualize(h, g, p), lp).item();
  CHECK(after < before);
}
