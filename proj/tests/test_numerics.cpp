#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <doctest.h>

#include "llip/core/gradcheck.hpp"
#include "llip/core/ops.hpp"
#include "test_util.hpp"

using namespace llip;
using llip::testing::bitwise_equal;
using llip::testing::randn;

TEST_CASE("matmul basics") {
  auto eye = Tensor<double>::from({2, 2}, {1, 0, 0, 1});
  auto b = Tensor<double>::from({2, 2}, {2, 3, 4, 5});
  auto c = matmul(eye, b);
  CHECK(c.to_vector() == std::vector<double>{2, 3, 4, 5});

  auto r = matmul(Tensor<double>::from({1, 2}, {1, 2}), Tensor<double>::from({2, 1}, {3, 4}));
  CHECK(r.item() == doctest::Approx(11.0));

  CHECK_THROWS_AS(matmul(Tensor<double>::zeros({2, 3}), Tensor<double>::zeros({2, 3})), shape_error);
}

TEST_CASE("matmul gradient vs finite differences") {
  Rng rng(11);
  auto a = randn<double>({3, 4}, rng, 1.0, true);
  auto b = randn<double>({4, 2}, rng, 1.0, true);
  const double err = finite_difference_check([&] { return sum(matmul(a, b)); }, {a, b});
  CHECK(err <= 1e-6);
}

TEST_CASE("softmax_tau examples") {
  auto c = softmax_tau(Tensor<double>::from({3}, {0.7, 0.7, 0.7}), 3.0);
  for (long i = 0; i < 3; ++i) CHECK(c.data()[i] == doctest::Approx(1.0 / 3.0));

  auto s1 = softmax_tau(Tensor<double>::from({2}, {1, 0}), 1.0);
  CHECK(s1.data()[0] == doctest::Approx(0.7311).epsilon(0).scale(0).epsilon(1e-4));
  CHECK(s1.data()[0] == doctest::Approx(0.73105857863));
  CHECK(s1.data()[1] == doctest::Approx(0.26894142137));

  auto s5 = softmax_tau(Tensor<double>::from({2}, {1, 0}), 5.0);
  CHECK(std::abs(s5.data()[0] - 0.9933) < 1e-4);
  CHECK(std::abs(s5.data()[1] - 0.0067) < 1e-4);

  CHECK_THROWS_AS(softmax_tau(Tensor<double>::from({2}, {1, 0}), 0.0), value_error);
  CHECK_THROWS_AS(softmax_tau(Tensor<double>::from({2}, {1, 0}), -1.0), value_error);
}

TEST_CASE("softmax_tau rows sum to one over shapes and temperatures") {
  Rng rng(5);
  for (double tau : {0.1, 1.0, 5.0, 37.0, 100.0}) {
    for (Shape shape : {Shape{7}, Shape{3, 5}, Shape{2, 3, 8}}) {
      auto x = randn<double>(shape, rng, 2.0);
      auto y = softmax_tau(x, tau);
      const long k = y.dim(-1);
      for (long r = 0; r < y.numel() / k; ++r) {
        double s = 0;
        for (long i = 0; i < k; ++i) s += y.data()[r * k + i];
        CHECK(std::abs(s - 1.0) <= 1e-6);
      }
    }
  }
}

TEST_CASE("layer_norm examples") {
  auto g = Tensor<double>::from({3}, {1, 1, 1});
  auto b = Tensor<double>::from({3}, {0, 0, 0});
  auto y = layer_norm(Tensor<double>::from({3}, {1, 1, 1}), g, b);
  for (long i = 0; i < 3; ++i) CHECK(y.data()[i] == doctest::Approx(0.0));

  auto g2 = Tensor<double>::from({2}, {1, 1});
  auto b2 = Tensor<double>::from({2}, {0, 0});
  auto y2 = layer_norm(Tensor<double>::from({2}, {1, -1}), g2, b2);
  CHECK(std::abs(y2.data()[0] - 1.0) < 1e-3);
  CHECK(std::abs(y2.data()[1] + 1.0) < 1e-3);
}

TEST_CASE("layer_norm gradient vs finite differences") {
  Rng rng(7);
  auto x = randn<double>({4, 6}, rng, 1.0, true);
  auto g = randn<double>({6}, rng, 0.5, true);
  auto b = randn<double>({6}, rng, 0.5, true);
  const double err = finite_difference_check([&] { return sum(mul(layer_norm(x, g, b), layer_norm(x, g, b))); }, {x, g, b});
  CHECK(err <= 1e-4);
}

TEST_CASE("l2_normalize") {
  auto y = l2_normalize(Tensor<double>::from({2}, {3, 4}));
  CHECK(y.data()[0] == doctest::Approx(0.6));
  CHECK(y.data()[1] == doctest::Approx(0.8));

  auto u = Tensor<double>::from({2}, {1, 0});
  CHECK(bitwise_equal(l2_normalize(u), u));

  CHECK_THROWS_AS(l2_normalize(Tensor<double>::zeros({3})), value_error);

  Rng rng(3);
  auto x = randn<double>({3, 5}, rng, 1.0, true);
  auto w = randn<double>({3, 5}, rng);
  const double err = finite_difference_check([&] { return sum(mul(l2_normalize(x), w)); }, {x});
  CHECK(err <= 1e-4);
}

TEST_CASE("log_sigmoid examples") {
  auto y0 = log_sigmoid(Tensor<double>::scalar(0.0));
  CHECK(y0.item() == doctest::Approx(-std::log(2.0)));

  auto ym = log_sigmoid(Tensor<double>::scalar(-10.0));
  CHECK(ym.item() == doctest::Approx(-10.000045398899218));

  auto yp = log_sigmoid(Tensor<double>::scalar(50.0));
  CHECK(std::isfinite(yp.item()));
  CHECK(yp.item() == doctest::Approx(-1.9287498479639178e-22).epsilon(1e-3));

  CHECK(std::isfinite(log_sigmoid(Tensor<double>::scalar(-745.0)).item()));
}

TEST_CASE("backward basics") {
  SUBCASE("sum of 2x2 gives all-ones gradient") {
    auto x = Tensor<double>::from({2, 2}, {1, 2, 3, 4}).set_requires_grad(true);
    Tape<double> tape;
    auto loss = sum(x);
    backward(loss, tape);
    CHECK(std::vector<double>(x.grad().begin(), x.grad().end()) == std::vector<double>{1, 1, 1, 1});
  }
  SUBCASE("x squared at 3 gives 6") {
    auto x = Tensor<double>::scalar(3.0).set_requires_grad(true);
    Tape<double> tape;
    auto loss = mul(x, x);
    backward(loss, tape);
    CHECK(x.grad()[0] == doctest::Approx(6.0));
  }
  SUBCASE("non-scalar loss rejected") {
    auto x = Tensor<double>::from({2}, {1, 2}).set_requires_grad(true);
    Tape<double> tape;
    auto y = scale(x, 2.0);
    CHECK_THROWS_AS(backward(y, tape), value_error);
  }
}

TEST_CASE("finite_difference_check oracle sanity") {
  SUBCASE("quadratic form is near-exact") {
    Rng rng(21);
    auto x = randn<double>({1, 5}, rng, 1.0, true);
    auto a = randn<double>({5, 5}, rng);
    const double err = finite_difference_check([&] { return sum(mul(matmul(x, a), x)); }, {x});
    CHECK(err <= 1e-8);
  }
  SUBCASE("log-sigmoid of a dot product") {
    Rng rng(22);
    auto x = randn<double>({1, 6}, rng, 1.0, true);
    auto w = randn<double>({6, 1}, rng);
    const double err = finite_difference_check([&] { return sum(log_sigmoid(matmul(x, w))); }, {x});
    CHECK(err <= 1e-6);
  }
  SUBCASE("a gradient off by 2x is flagged with error 1.0") {
    // forward x*x but backward claims d/dx = x (half the true 2x)
    auto broken_square = [](const Tensor<double>& x) {
      Tensor<double> out = Tensor<double>::zeros(x.shape());
      for (long i = 0; i < x.numel(); ++i) out.data()[i] = x.data()[i] * x.data()[i];
      if (Tape<double>::active() && x.requires_grad()) {
        out.set_requires_grad(true);
        Tape<double>::active()->record("broken_square", [x, out]() mutable {
          const auto& go = out.grad();
          auto& gx = x.grad_buffer();
          for (std::size_t i = 0; i < go.size(); ++i) gx[i] += go[i] * x.data()[static_cast<long>(i)];
        });
      }
      return out;
    };
    auto x = Tensor<double>::scalar(3.0).set_requires_grad(true);
    const double err = finite_difference_check([&] { return sum(broken_square(x)); }, {x});
    CHECK(err == doctest::Approx(1.0).epsilon(1e-4));
  }
}

TEST_CASE("every primitive matches finite differences on randomized shapes") {
  Rng rng(1234);
  double worst = 0.0;
  auto run = [&](const char* name, double err) {
    INFO(name << " err=" << err);
    CHECK(err <= 1e-4);
    worst = std::max(worst, err);
  };

  for (int rep = 0; rep < 2; ++rep) {
    const long a = 2 + static_cast<long>(rng.uniform_int(7));  // up to 8
    const long b = 2 + static_cast<long>(rng.uniform_int(7));
    const long c = 2 + static_cast<long>(rng.uniform_int(7));

    auto x = randn<double>({a, b, c}, rng, 1.0, true);
    auto y = randn<double>({a, b, c}, rng, 1.0, true);
    auto w = randn<double>({c, c}, rng, 1.0, true);
    auto bias = randn<double>({c}, rng, 0.5, true);
    auto sc = randn<double>({}, rng, 1.0, true);

    run("add", finite_difference_check([&] { return sum(mul(add(x, y), y)); }, {x, y}));
    run("mul", finite_difference_check([&] { return sum(mul(x, y)); }, {x, y}));
    run("scale", finite_difference_check([&] { return sum(scale(x, 1.7)); }, {x}));
    run("mul_scalar_t", finite_difference_check([&] { return sum(mul(mul_scalar_t(x, sc), y)); }, {x, sc}));
    run("add_scalar_t", finite_difference_check([&] { return sum(mul(add_scalar_t(x, sc), y)); }, {x, sc}));
    run("exp", finite_difference_check([&] { return sum(llip::exp(scale(x, 0.3))); }, {x}));
    run("log_sigmoid", finite_difference_check([&] { return sum(log_sigmoid(x)); }, {x}));
    run("gelu", finite_difference_check([&] { return sum(mul(gelu(x), y)); }, {x}));
    run("matmul", finite_difference_check([&] { return sum(mul(matmul(x, w), y)); }, {x, w}));
    run("linear", finite_difference_check([&] { return sum(mul(linear(x, w, bias), y)); }, {x, w, bias}));
    run("softmax_tau", finite_difference_check([&] { return sum(mul(softmax_tau(x, 3.0), y)); }, {x}));
    run("log_softmax", finite_difference_check([&] { return sum(mul(log_softmax(x), y)); }, {x}));
    auto ln_g = randn<double>({c}, rng, 0.5, true);
    auto ln_b = randn<double>({c}, rng, 0.5, true);
    run("layer_norm",
        finite_difference_check([&] { return sum(mul(layer_norm(x, ln_g, ln_b), y)); }, {x, ln_g, ln_b}));
    run("l2_normalize", finite_difference_check([&] { return sum(mul(l2_normalize(x), y)); }, {x}));

    auto m2 = randn<double>({a, c}, rng, 1.0, true);
    auto m2w = randn<double>({c, a}, rng);
    run("transpose", finite_difference_check([&] { return sum(mul(transpose(m2), m2w)); }, {m2}));
  }

  // attention, both masked and unmasked
  for (bool causal : {false, true}) {
    const long n = 2, t = 4, d = 6, heads = 2;
    auto q = randn<double>({n, t, d}, rng, 0.7, true);
    auto k = randn<double>({n, t, d}, rng, 0.7, true);
    auto v = randn<double>({n, t, d}, rng, 0.7, true);
    auto w = randn<double>({n, t, d}, rng);
    run(causal ? "attention(causal)" : "attention",
        finite_difference_check([&] { return sum(mul(attention(q, k, v, heads, causal), w)); }, {q, k, v}));
  }

  // token plumbing
  {
    const long n = 2, p = 3, k = 2, d = 4;
    auto tokens = randn<double>({k, d}, rng, 1.0, true);
    auto patches = randn<double>({n, p, d}, rng, 1.0, true);
    auto w = randn<double>({n, k + p, d}, rng);
    run("concat_tokens",
        finite_difference_check([&] { return sum(mul(concat_tokens(tokens, patches), w)); }, {tokens, patches}));

    auto pos = randn<double>({k + p, d}, rng, 1.0, true);
    auto xt = randn<double>({n, k + p, d}, rng, 1.0, true);
    auto wslice = randn<double>({n, 2, d}, rng);
    run("add_pos", finite_difference_check([&] { return sum(mul(add_pos(xt, pos), w)); }, {xt, pos}));
    run("slice_tokens", finite_difference_check([&] { return sum(mul(slice_tokens(xt, 1, 2), wslice)); }, {xt}));
    auto w2 = randn<double>({n, d}, rng);
    run("select_token", finite_difference_check([&] { return sum(mul(select_token(xt, 2), w2)); }, {xt}));
    run("mean_tokens", finite_difference_check([&] { return sum(mul(mean_tokens(xt), w2)); }, {xt}));

    auto z2 = randn<double>({n, d}, rng, 1.0, true);
    auto w3 = randn<double>({n, 3, d}, rng);
    run("replicate_ctx", finite_difference_check([&] { return sum(mul(replicate_ctx(z2, 3), w3)); }, {z2}));

    TokenBatch tb{2, 3, {0, 2, 1, 3, 3, 0}};
    auto table = randn<double>({4, d}, rng, 1.0, true);
    auto w4 = randn<double>({2, 3, d}, rng);
    run("embedding", finite_difference_check([&] { return sum(mul(embedding(table, tb), w4)); }, {table}));

    auto xsel = randn<double>({n, 3, d}, rng, 1.0, true);
    run("select_positions",
        finite_difference_check([&] { return sum(mul(select_positions(xsel, {2, 0}), w2)); }, {xsel}));
  }

  // mixing kernels
  {
    const long i = 3, j = 2, t = 4, d = 6, heads = 2;
    auto q = randn<double>({j, d}, rng, 0.8, true);
    auto k = randn<double>({i, t, d}, rng, 0.8, true);
    auto v = randn<double>({i, t, d}, rng, 0.8, true);
    auto wms = randn<double>({i, j, heads, t}, rng);
    run("mixer_scores", finite_difference_check([&] { return sum(mul(mixer_scores(q, k, heads), wms)); }, {q, k}));

    auto phi = randn<double>({i, j, heads, t}, rng, 0.5, true);
    auto wmc = randn<double>({i, j, d}, rng);
    run("mixer_combine", finite_difference_check([&] { return sum(mul(mixer_combine(phi, v), wmc)); }, {phi, v}));

    auto z = randn<double>({i, j, d}, rng, 1.0, true);
    auto zt = randn<double>({j, d}, rng, 1.0, true);
    auto wpd = randn<double>({i, j}, rng);
    run("pairwise_dot", finite_difference_check([&] { return sum(mul(pairwise_dot(z, zt), wpd)); }, {z, zt}));
  }

  MESSAGE("worst primitive FD error: " << worst);
}

TEST_CASE("identical inputs give bitwise identical outputs") {
  auto once = [](std::uint64_t seed) {
    Rng rng(seed);
    auto x = randn<float>({4, 5, 8}, rng, 1.0);
    auto w = randn<float>({8, 8}, rng, 0.2);
    auto g = Tensor<float>::full({8}, 1.0f);
    auto b = Tensor<float>::zeros({8});
    return l2_normalize(layer_norm(matmul(softmax_tau(x, 5.0f), w), g, b));
  };
  CHECK(bitwise_equal(once(99), once(99)));
}

TEST_CASE("non-finite outputs are rejected") {
  CHECK_THROWS_AS(llip::exp(Tensor<double>::scalar(1000.0)), numeric_error);
  auto big = Tensor<float>::scalar(3e38f);
  CHECK_THROWS_AS(add(big, big), numeric_error);
}

TEST_CASE("tape visits each node exactly once and in order") {
  auto x = Tensor<double>::scalar(2.0).set_requires_grad(true);
  Tape<double> tape;
  auto y = mul(x, x);      // d/dx = 2x = 4
  auto z = mul(y, x);      // x^3, d/dx = 3x^2 = 12
  auto loss = sum(z);
  CHECK(tape.size() == 3);
  backward(loss, tape);
  CHECK(x.grad()[0] == doctest::Approx(12.0));
}
