#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <map>

#include "llip/core/gradcheck.hpp"
#include "llip/encoders.hpp"
#include "test_util.hpp"

using namespace llip;
using llip::testing::bitwise_equal;
using llip::testing::randn;

namespace {

VitConfig tiny_vit() {
  VitConfig cfg;
  cfg.image_size = 32;
  cfg.patch_size = 8;
  cfg.width = 64;
  cfg.depth = 2;
  cfg.heads = 4;
  cfg.mixture_tokens = 4;
  return cfg;
}

TextConfig tiny_text(long vocab = 12) {
  TextConfig cfg;
  cfg.vocab_size = vocab;
  cfg.context_length = 6;
  cfg.width = 64;
  cfg.depth = 2;
  cfg.heads = 4;
  return cfg;
}

}  // namespace

TEST_CASE("patchify shapes and values") {
  VitConfig cfg = tiny_vit();
  auto img = Tensor<float>::full({3, 32, 32}, 0.5f);
  auto p = patchify(img, cfg);
  CHECK(p.shape() == Shape{16, 192});
  for (long i = 0; i < p.numel(); ++i) CHECK(p.data()[i] == 0.5f);

  cfg.patch_size = 16;
  CHECK(patchify(img, cfg).shape() == Shape{4, 768});

  cfg.patch_size = 7;
  CHECK_THROWS_AS(patchify(img, cfg), config_error);

  cfg = tiny_vit();
  CHECK_THROWS_AS(patchify(Tensor<float>::full({3, 32, 32}, 2.0f), cfg), value_error);
  CHECK_THROWS_AS(patchify(Tensor<float>::full({1, 32, 32}, 0.5f), cfg), value_error);
}

TEST_CASE("patchify preserves pixel placement") {
  VitConfig cfg = tiny_vit();
  auto img = Tensor<float>::zeros({3, 32, 32});
  // mark channel 2, pixel (y=9, x=17): patch row 1, col 2 -> patch index 6
  img.values()[(2 * 32 + 9) * 32 + 17] = 1.0f;
  auto p = patchify(img, cfg);
  // inside the patch: y=1, x=1 of channel 2 -> offset 2*64 + 1*8 + 1
  CHECK(p.at({6, 2 * 64 + 1 * 8 + 1}) == 1.0f);
  CHECK(p.values()[0] == 0.0f);
}

TEST_CASE("encode_image shape contract") {
  VitConfig cfg = tiny_vit();
  auto params = init_vit_params<float>(cfg, 42);
  Rng rng(1);
  auto imgs = Tensor<float>::zeros({2, 3 * 32 * 32});
  for (long i = 0; i < imgs.numel(); ++i) imgs.data()[i] = static_cast<float>(rng.uniform());

  auto h = encode_image(imgs, params, cfg);
  CHECK(h.shape() == Shape{2, 4, 64});

  cfg.emit_patch_tokens = true;
  auto h2 = encode_image(imgs, params, cfg);
  CHECK(h2.shape() == Shape{2, 20, 64});
}

TEST_CASE("identical images give bitwise identical token outputs") {
  VitConfig cfg = tiny_vit();
  auto params = init_vit_params<float>(cfg, 3);
  Rng rng(2);
  auto one = Tensor<float>::zeros({1, 3 * 32 * 32});
  for (long i = 0; i < one.numel(); ++i) one.data()[i] = static_cast<float>(rng.uniform());
  auto two = Tensor<float>::zeros({2, 3 * 32 * 32});
  for (long i = 0; i < one.numel(); ++i) {
    two.data()[i] = one.data()[i];
    two.data()[one.numel() + i] = one.data()[i];
  }
  auto h = encode_image(two, params, cfg);
  for (long i = 0; i < 4 * 64; ++i) CHECK(h.data()[i] == h.data()[4 * 64 + i]);
}

TEST_CASE("encode_text pooling and validation") {
  TextConfig cfg = tiny_text();
  auto params = init_text_params<float>(cfg, 7);

  SUBCASE("shape contract and determinism") {
    TokenBatch tb{3, 6, {1, 5, 4, 2, 0, 0, 1, 7, 2, 0, 0, 0, 1, 5, 4, 2, 0, 0}};
    auto g = encode_text(tb, params, cfg);
    CHECK(g.shape() == Shape{3, 64});
    for (long i = 0; i < 64; ++i) CHECK(g.data()[i] == g.data()[2 * 64 + i]);
  }
  SUBCASE("content after the EOS cannot influence the pooled feature") {
    TokenBatch a{1, 6, {1, 5, 2, 0, 0, 0}};
    TokenBatch b{1, 6, {1, 5, 2, 7, 9, 4}};
    CHECK(bitwise_equal(encode_text(a, params, cfg), encode_text(b, params, cfg)));
  }
  SUBCASE("missing EOS is an input error") {
    TokenBatch tb{1, 6, {1, 5, 4, 0, 0, 0}};
    CHECK_THROWS_AS(encode_text(tb, params, cfg), value_error);
  }
  SUBCASE("two EOS is an input error") {
    TokenBatch tb{1, 6, {1, 5, 2, 2, 0, 0}};
    CHECK_THROWS_AS(encode_text(tb, params, cfg), value_error);
  }
  SUBCASE("missing BOS is an input error") {
    TokenBatch tb{1, 6, {5, 4, 2, 0, 0, 0}};
    CHECK_THROWS_AS(encode_text(tb, params, cfg), value_error);
  }
  SUBCASE("wrong sequence length is an input error") {
    TokenBatch tb{1, 8, {1, 5, 4, 2, 0, 0, 0, 0}};
    CHECK_THROWS_AS(encode_text(tb, params, cfg), value_error);
  }
}

TEST_CASE("init is deterministic per seed and truncated") {
  VitConfig cfg = tiny_vit();
  auto collect = [&](std::uint64_t seed) {
    std::map<std::string, Tensor<float>> m;
    auto p = init_vit_params<float>(cfg, seed);
    visit_params(p, [&](const std::string& name, Tensor<float>& t) { m.emplace(name, t); });
    return m;
  };
  auto a = collect(11), b = collect(11), c = collect(12);

  bool any_diff_seed = false;
  for (auto& [name, t] : a) {
    CHECK(bitwise_equal(t, b.at(name)));
    any_diff_seed = any_diff_seed || !bitwise_equal(t, c.at(name));
    for (long i = 0; i < t.numel(); ++i) {
      const float v = t.data()[i];
      CHECK(std::isfinite(static_cast<double>(v)));
      // trunc-normal weights within 2*std; gains are exactly one, biases zero
      CHECK((std::abs(v) <= 2.0f * 0.02f + 1e-7f || v == 1.0f));
    }
  }
  CHECK(any_diff_seed);
}

TEST_CASE("full image encoder gradient matches finite differences") {
  VitConfig cfg;
  cfg.image_size = 16;
  cfg.patch_size = 8;
  cfg.width = 8;
  cfg.depth = 1;
  cfg.heads = 2;
  cfg.mixture_tokens = 2;
  auto params = init_vit_params<double>(cfg, 5);
  Rng rng(6);
  auto imgs = Tensor<double>::zeros({1, 3 * 16 * 16});
  for (long i = 0; i < imgs.numel(); ++i) imgs.data()[i] = rng.uniform();
  auto w = randn<double>({1, 2, 8}, rng);

  std::vector<Tensor<double>> leaves;
  visit_params(params, [&](const std::string&, Tensor<double>& t) { leaves.push_back(t); });
  const double err =
      finite_difference_check([&] { return sum(mul(encode_image(imgs, params, cfg), w)); }, leaves);
  MESSAGE("vit FD err = " << err);
  CHECK(err <= 1e-4);
}

TEST_CASE("full text encoder gradient matches finite differences") {
  TextConfig cfg = tiny_text(10);
  cfg.width = 8;
  cfg.depth = 1;
  cfg.heads = 2;
  auto params = init_text_params<double>(cfg, 9);
  TokenBatch tb{2, 6, {1, 5, 4, 2, 0, 0, 1, 7, 2, 0, 0, 0}};
  Rng rng(10);
  auto w = randn<double>({2, 8}, rng);

  std::vector<Tensor<double>> leaves;
  visit_params(params, [&](const std::string&, Tensor<double>& t) { leaves.push_back(t); });
  const double err = finite_difference_check([&] { return sum(mul(encode_text(tb, params, cfg), w)); }, leaves);
  MESSAGE("text FD err = " << err);
  CHECK(err <= 1e-4);
}
