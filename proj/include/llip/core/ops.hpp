#pragma once

#include <Eigen/Core>
#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <limits>
#include <vector>

#include "llip/core/tensor.hpp"

namespace llip {

// Forward multiply-accumulate counter for the dense kernels (matmul, linear,
// attention, mixing). Used by the inference-cost estimator's instrumented
// cross-check; relaxed atomic so read-only evaluation may run tiled.
inline std::atomic<std::uint64_t> g_forward_macs{0};
inline void reset_mac_count() { g_forward_macs.store(0, std::memory_order_relaxed); }
inline std::uint64_t mac_count() { return g_forward_macs.load(std::memory_order_relaxed); }
inline void count_macs(std::uint64_t n) { g_forward_macs.fetch_add(n, std::memory_order_relaxed); }

// Integer token id batch, row-major [n x len]. Ids are not differentiable and
// live outside the Tensor type.
struct TokenBatch {
  long n = 0;
  long len = 0;
  std::vector<int> ids;
};

namespace detail {

template <class S>
using EMat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class S>
using MapMat = Eigen::Map<EMat<S>>;
template <class S>
using CMapMat = Eigen::Map<const EMat<S>>;
template <class S>
using StrideMap = Eigen::Map<EMat<S>, 0, Eigen::OuterStride<>>;
template <class S>
using CStrideMap = Eigen::Map<const EMat<S>, 0, Eigen::OuterStride<>>;

template <class S>
bool recording() {
  return Tape<S>::active() != nullptr;
}

template <class S, class... Ts>
bool track(const Ts&... ts) {
  return recording<S>() && (ts.requires_grad() || ...);
}

// Every primitive checks its output; a NaN/Inf anywhere is a hard error.
template <class S>
void check_finite(const Tensor<S>& t, const char* op) {
  Eigen::Map<const Eigen::Array<S, Eigen::Dynamic, 1>> m(t.data(), t.numel());
  if (!m.allFinite()) throw numeric_error(std::string(op) + ": non-finite value in output");
}

template <class S>
Tensor<S> finish(Tensor<S> out, const char* op) {
  check_finite(out, op);
  return out;
}

inline void require(bool cond, const char* msg) {
  if (!cond) throw shape_error(msg);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// elementwise
// ---------------------------------------------------------------------------

template <class S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b) {
  if (a.shape() != b.shape()) throw shape_error("add: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  Tensor<S> out = Tensor<S>::zeros(a.shape());
  const long n = out.numel();
  for (long i = 0; i < n; ++i) out.data()[i] = a.data()[i] + b.data()[i];
  if (detail::track<S>(a, b)) {
    out.set_requires_grad(true);
    Tape<S>::active()->record("add", [a, b, out]() mutable {
      if (!out.has_grad()) return;
      const auto& go = out.grad();
      if (a.requires_grad()) {
        auto& ga = a.grad_buffer();
        for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i];
      }
      if (b.requires_grad()) {
        auto& gb = b.grad_buffer();
        for (std::size_t i = 0; i < go.size(); ++i) gb[i] += go[i];
      }
    });
  }
  return detail::finish(out, "add");
}

template <class S>
Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b) {
  if (a.shape() != b.shape()) throw shape_error("mul: shape mismatch");
  Tensor<S> out = Tensor<S>::zeros(a.shape());
  const long n = out.numel();
  for (long i = 0; i < n; ++i) out.data()[i] = a.data()[i] * b.data()[i];
  if (detail::track<S>(a, b)) {
    out.set_requires_grad(true);
    Tape<S>::active()->record("mul", [a, b, out]() mutable {
      if (!out.has_grad()) return;
      const auto& go = out.grad();
      if (a.requires_grad()) {
        auto& ga = a.grad_buffer();
        for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i] * b.data()[static_cast<long>(i)];
      }
      if (b.requires_grad()) {
        auto& gb = b.grad_buffer();
        for (std::size_t i = 0; i < go.size(); ++i) gb[i] += go[i] * a.data()[static_cast<long>(i)];
      }
    });
  }
  return detail::finish(out, "mul");
}

template <class S>
Tensor<S> scale(const Tensor<S>& a, S c) {
  Tensor<S> out = Tensor<S>::zeros(a.shape());
  const long n = out.numel();
  for (long i = 0; i < n; ++i) out.data()[i] = a.data()[i] * c;
  if (detail::track<S>(a)) {
    out.set_requires_grad(true);
    Tape<S>::active()->record("scale", [a, out, c]() mutable {
      if (!out.has_grad()) return;
      const auto& go = out.grad();
      auto& ga = a.grad_buffer();
      for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i] * c;
    });
  }
  return detail::finish(out, "scale");
}

// x * s with s a learnable scalar tensor, broadcast over x.
template <class S>
Tensor<S> mul_scalar_t(const Tensor<S>& x, const Tensor<S>& s) {
  if (s.numel() != 1) throw shape_error("mul_scalar_t: s must be a scalar tensor");
  Tensor<S> out = Tensor<S>::zeros(x.shape());
  const S sv = s.data()[0];
  const long n = out.numel();
  for (long i = 0; i < n; ++i) out.data()[i] = x.data()[i] * sv;
  if (detail::track<S>(x, s)) {
    out.set_requires_grad(true);
    Tape<S>::active()->record("mul_scalar_t", [x, s, out, sv]() mutable {
      if (!out.has_grad()) return;
      const auto& go = out.grad();
      if (x.requires_grad()) {
        auto& gx = x.grad_buffer();
        for (std::size_t i = 0; i < go.size(); ++i) gx[i] += go[i] * sv;
      }
      if (s.requires_grad()) {
        S acc = 0;
        for (std::size_t i = 0; i < go.size(); ++i) acc += go[i] * x.data()[static_cast<long>(i)];
        s.grad_buffer()[0] += acc;
      }
    });
  }
  return detail::finish(out, "mul_scalar_t");
}

template <class S>
Tensor<S> add_scalar_t(const Tensor<S>& x, const Tensor<S>& s) {
  if (s.numel() != 1) throw shape_error("add_scalar_t: s must be a scalar tensor");
  Tensor<S> out = Tensor<S>::zeros(x.shape());
  const S sv = s.data()[0];
  const long n = out.numel();
  for (long i = 0; i < n; ++i) out.data()[i] = x.data()[i] + sv;
  if (detail::track<S>(x, s)) {
    out.set_requires_grad(true);
    Tape<S>::active()->record("add_scalar_t", [x, s, out]() mutable {
      if (!out.has_grad()) return;
      const auto& go = out.grad();
      if (x.requires_grad()) {
        auto& gx = x.grad_buffer();
        for (std::size_t i = 0; i < go.size(); ++i) gx[i] += go[i];
      }
      if (s.requires_grad()) {
        S acc = 0;
        for (S g : go) acc += g;
        s.grad_buffer()[0] += acc;
      }
    });
  }
  return detail::finish(out, "add_scalar_t");
}

template <class S>
Tensor<S> exp(const Tensor<S>& x) {
  Tensor<S> out = Tensor<S>::zeros(x.shape());
  const long n = out.numel();
  for (long i = 0; i < n; ++i) out.data()[i] = std::exp(x.data()[i]);
  if (detail::track<S>(x)) {
    out.set_requires_grad(true);
    Tape<S>::active()->record("exp", [x, out]() mutable {
      if (!out.has_grad()) return;
      const auto& go = out.grad();
      auto& gx = x.grad_buffer();
      for (std::size_t i = 0; i < go.size(); ++i) gx[i] += go[i] * out.data()[static_cast<long>(i)];
    });
  }
  return detail::finish(out, "exp");
}

// log(sigmoid(x)) computed as -softplus(-x); finite even deep in the tails.
template <class S>
Tensor<S> log_sigmoid(const Tensor<S>& x) {
  Tensor<S> out = Tensor<S>::zeros(x.shape());
  const long n = out.numel();
  for (long i = 0; i < n; ++i) {
    const S v = x.data()[i];
    // -softplus(-x) = min(x, 0) - log1p(exp(-|x|))
    out.data()[i] = std::min(v, S(0)) - std::log1p(std::exp(-std::abs(v)));
  }
  if (detail::track<S>(x)) {
    out.set_requires_grad(true);
    Tape<S>::active()->record("log_sigmoid", [x, out]() mutable {
      if (!out.has_grad()) return;
      const auto& go = out.grad();
      auto& gx = x.grad_buffer();
      for (std::size_t i = 0; i < go.size(); ++i) {
        const S v = x.data()[static_cast<long>(i)];
        S sig;  // sigmoid(v), branch for stability
        if (v >= 0) {
          sig = S(1) / (S(1) + std::exp(-v));
        } else {
          const S e = std::exp(v);
          sig = e / (S(1) + e);
        }
        gx[i] += go[i] * (S(1) - sig);
      }
    });
  }
  return detail::finish(out, "log_sigmoid");
}

template <class S>
Tensor<S> gelu(const Tensor<S>& x) {
  constexpr double inv_sqrt2 = 0.7071067811865475244;
  constexpr double inv_sqrt2pi = 0.3989422804014326779;
  Tensor<S> out = Tensor<S>::zeros(x.shape());
  const long n = out.numel();
  for (long i = 0; i < n; ++i) {
    const double v = static_cast<double>(x.data()[i]);
    out.data()[i] = static_cast<S>(0.5 * v * (1.0 + std::erf(v * inv_sqrt2)));
  }
  if (detail::track<S>(x)) {
    out.set_requires_grad(true);
    Tape<S>::active()->record("gelu", [x, out]() mutable {
      if (!out.has_grad()) return;
      const auto& go = out.grad();
      auto& gx = x.grad_buffer();
      for (std::size_t i = 0; i < go.size(); ++i) {
        const double v = static_cast<double>(x.data()[static_cast<long>(i)]);
        const double cdf = 0.5 * (1.0 + std::erf(v * inv_sqrt2));
        const double pdf = inv_sqrt2pi * std::exp(-0.5 * v * v);
        gx[i] += go[i] * static_cast<S>(cdf + v * pdf);
      }
    });
  }
  return detail::finish(out, "gelu");
}

template <class S>
Tensor<S> sum(const Tensor<S>& x) {
  S acc = 0;
  const long n = x.numel();
  for (long i = 0; i < n; ++i) acc += x.data()[i];
  Tensor<S> out = Tensor<S>::scalar(acc);
  if (detail::track<S>(x)) {
    out.set_requires_grad(true);
    Tape<S>::active()->record("sum", [x, out]() mutable {
      if (!out.has_grad()) return;
      const S g = out.grad()[0];
      auto& gx = x.grad_buffer();
      for (S& v : gx) v += g;
    });
  }
  return detail::finish(out, "sum");
}

// ---------------------------------------------------------------------------
// dense linear algebra (Eigen-backed)
// ---------------------------------------------------------------------------

// a[..., k] . b[k, n] -> [..., n]; leading axes of a are folded into rows.
template <class S>
Tensor<S> matmul(const Tensor<S>& a, const Tensor<S>& b) {
  if (a.rank() < 2 || b.rank() != 2) throw shape_error("matmul: need a rank>=2 and b rank 2");
  const long k = a.dim(-1);
  if (k != b.dim(0))
    throw shape_error("matmul: inner dimensions disagree, " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  const long rows = a.numel() / k;
  const long n = b.dim(1);
  Shape out_shape = a.shape();
  out_shape.back() = n;
  Tensor<S> out = Tensor<S>::zeros(out_shape);
  detail::MapMat<S>(out.data(), rows, n).noalias() =
      detail::CMapMat<S>(a.data(), rows, k) * detail::CMapMat<S>(b.data(), k, n);
  count_macs(static_cast<std::uint64_t>(rows) * k * n);
  if (detail::track<S>(a, b)) {
    out.set_requires_grad(true);
    Tape<S>::active()->record("matmul", [a, b, out, rows, k, n]() mutable {
      if (!out.has_grad()) return;
      detail::CMapMat<S> gc(out.grad().data(), rows, n);
      if (a.requires_grad()) {
        detail::MapMat<S> ga(a.grad_buffer().data(), rows, k);
        ga.noalias() += gc * detail::CMapMat<S>(b.data(), k, n).transpose();
      }
      if (b.requires_grad()) {
        detail::MapMat<S> gb(b.grad_buffer().data(), k, n);
        gb.noalias() += detail::CMapMat<S>(a.data(), rows, k).transpose() * gc;
      }
    });
  }
  return detail::finish(out, "matmul");
}

// x[..., in] . w[in, out] + b[out]
template <class S>
Tensor<S> linear(const Tensor<S>& x, const Tensor<S>& w, const Tensor<S>& b) {
  if (x.rank() < 2 || w.rank() != 2 || b.rank() != 1) throw shape_error("linear: bad ranks");
  const long in = x.dim(-1);
  if (in != w.dim(0) || w.dim(1) != b.dim(0)) throw shape_error("linear: dimension mismatch");
  const long rows = x.numel() / in;
  const long n = w.dim(1);
  Shape out_shape = x.shape();
  out_shape.back() = n;
  Tensor<S> out = Tensor<S>::zeros(out_shape);
  detail::MapMat<S> om(out.data(), rows, n);
  om.noalias() = detail::CMapMat<S>(x.data(), rows, in) * detail::CMapMat<S>(w.data(), in, n);
  om.rowwise() += Eigen::Map<const Eigen::Matrix<S, 1, Eigen::Dynamic>>(b.data(), n);
  count_macs(static_cast<std::uint64_t>(rows) * in * n);
  if (detail::track<S>(x, w, b)) {
    out.set_requires_grad(true);
    Tape<S>::active()->record("linear", [x, w, b, out, rows, in, n]() mutable {
      if (!out.has_grad()) return;
      detail::CMapMat<S> gc(out.grad().data(), rows, n);
      if (x.requires_grad()) {
        detail::MapMat<S> gx(x.grad_buffer().data(), rows, in);
        gx.noalias() += gc * detail::CMapMat<S>(w.data(), in, n).transpose();
      }
      if (w.requires_grad()) {
        detail::MapMat<S> gw(w.grad_buffer().data(), in, n);
        gw.noalias() += detail::CMapMat<S>(x.data(), rows, in).transpose() * gc;
      }
      if (b.requires_grad()) {
        Eigen::Map<Eigen::Matrix<S, 1, Eigen::Dynamic>> gb(b.grad_buffer().data(), n);
        gb += gc.colwise().sum();
      }
    });
  }
  return detail::finish(out, "linear");
}

// Same data, new shape (row-major copy with gradient passthrough).
template <class S>
Tensor<S> reshape(const Tensor<S>& x, Shape shape) {
  if (numel_of(shape) != x.numel()) throw shape_error("reshape: element count mismatch");
  Tensor<S> out = Tensor<S>::zeros(std::move(shape));
  std::copy(x.values().begin(), x.values().end(), out.data());
  if (detail::track<S>(x)) {
    out.set_requires_grad(true);
    Tape<S>::active()->record("reshape", [x, out]() mutable {
      if (!out.has_grad()) return;
      const auto& go = out.grad();
      auto& gx = x.grad_buffer();
      for (std::size_t i = 0; i < go.size(); ++i) gx[i] += go[i];
    });
  }
  return out;  // values already checked by the producer
}

template <class S>
Tensor<S> transpose(const Tensor<S>& x) {
  if (x.rank() != 2) throw shape_error("transpose: rank-2 only");
  const long m = x.dim(0), n = x.dim(1);
  Tensor<S> out = Tensor<S>::zeros({n, m});
  detail::MapMat<S>(out.data(), n, m) = detail::CMapMat<S>(x.data(), m, n).transpose();
  if (detail::track<S>(x)) {
    out.set_requires_grad(true);
    Tape<S>::active()->record("transpose", [x, out, m, n]() mutable {
      if (!out.has_grad()) return;
      detail::MapMat<S>(x.grad_buffer().data(), m, n) += detail::CMapMat<S>(out.grad().data(), n, m).transpose();
    });
  }
  return detail::finish(out, "transpose");
}

// ---------------------------------------------------------------------------
// normalization and softmax
// ---------------------------------------------------------------------------

// Temperature softmax along the last axis. The exponent is tau * logit, so
// larger tau sharpens the distribution. Max-subtraction keeps it stable.
template <class S>
Tensor<S> softmax_tau(const Tensor<S>& x, S tau) {
  if (!(tau > S(0))) throw value_error("softmax_tau: tau must be positive");
  if (x.rank() < 1 || x.dim(-1) < 1) throw shape_error("softmax_tau: empty last axis");
  const long k = x.dim(-1);
  const long rows = x.numel() / k;
  Tensor<S> out = Tensor<S>::zeros(x.shape());
  for (long r = 0; r < rows; ++r) {
    const S* xi = x.data() + r * k;
    S* yi = out.data() + r * k;
    S m = xi[0];
    for (long i = 1; i < k; ++i) m = std::max(m, xi[i]);
    S z = 0;
    for (long i = 0; i < k; ++i) {
      yi[i] = std::exp(tau * (xi[i] - m));
      z += yi[i];
    }
    const S inv = S(1) / z;
    for (long i = 0; i < k; ++i) yi[i] *= inv;
  }
  if (detail::track<S>(x)) {
    out.set_requires_grad(true);
    Tape<S>::active()->record("softmax_tau", [x, out, tau, rows, k]() mutable {
      if (!out.has_grad()) return;
      const auto& go = out.grad();
      auto& gx = x.grad_buffer();
      for (long r = 0; r < rows; ++r) {
        const S* y = out.data() + r * k;
        const S* g = go.data() + r * k;
        S dot = 0;
        for (long i = 0; i < k; ++i) dot += y[i] * g[i];
        for (long i = 0; i < k; ++i) gx[r * k + i] += tau * y[i] * (g[i] - dot);
      }
    });
  }
  return detail::finish(out, "softmax_tau");
}

template <class S>
Tensor<S> log_softmax(const Tensor<S>& x) {
  if (x.rank() < 1 || x.dim(-1) < 1) throw shape_error("log_softmax: empty last axis");
  const long k = x.dim(-1);
  const long rows = x.numel() / k;
  Tensor<S> out = Tensor<S>::zeros(x.shape());
  for (long r = 0; r < rows; ++r) {
    const S* xi = x.data() + r * k;
    S* yi = out.data() + r * k;
    S m = xi[0];
    for (long i = 1; i < k; ++i) m = std::max(m, xi[i]);
    S z = 0;
    for (long i = 0; i < k; ++i) z += std::exp(xi[i] - m);
    const S lz = m + std::log(z);
    for (long i = 0; i < k; ++i) yi[i] = xi[i] - lz;
  }
  if (detail::track<S>(x)) {
    out.set_requires_grad(true);
    Tape<S>::active()->record("log_softmax", [x, out, rows, k]() mutable {
      if (!out.has_grad()) return;
      const auto& go = out.grad();
      auto& gx = x.grad_buffer();
      for (long r = 0; r < rows; ++r) {
        const S* y = out.data() + r * k;
        const S* g = go.data() + r * k;
        S gsum = 0;
        for (long i = 0; i < k; ++i) gsum += g[i];
        for (long i = 0; i < k; ++i) gx[r * k + i] += g[i] - std::exp(y[i]) * gsum;
      }
    });
  }
  return detail::finish(out, "log_softmax");
}

// Per-vector normalization over the last axis, then affine by gain/bias.
template <class S>
Tensor<S> layer_norm(const Tensor<S>& x, const Tensor<S>& gain, const Tensor<S>& bias) {
  constexpr S eps = S(1e-5);
  if (x.rank() < 1 || gain.rank() != 1 || bias.rank() != 1) throw shape_error("layer_norm: bad ranks");
  const long d = x.dim(-1);
  if (gain.dim(0) != d || bias.dim(0) != d) throw shape_error("layer_norm: gain/bias width mismatch");
  const long rows = x.numel() / d;
  Tensor<S> out = Tensor<S>::zeros(x.shape());
  std::vector<S> xhat(static_cast<std::size_t>(x.numel()));
  std::vector<S> inv_std(static_cast<std::size_t>(rows));
  for (long r = 0; r < rows; ++r) {
    const S* xi = x.data() + r * d;
    S mu = 0;
    for (long i = 0; i < d; ++i) mu += xi[i];
    mu /= static_cast<S>(d);
    S var = 0;
    for (long i = 0; i < d; ++i) {
      const S c = xi[i] - mu;
      var += c * c;
    }
    var /= static_cast<S>(d);
    const S inv = S(1) / std::sqrt(var + eps);
    inv_std[static_cast<std::size_t>(r)] = inv;
    S* yi = out.data() + r * d;
    for (long i = 0; i < d; ++i) {
      const S h = (xi[i] - mu) * inv;
      xhat[static_cast<std::size_t>(r * d + i)] = h;
      yi[i] = h * gain.data()[i] + bias.data()[i];
    }
  }
  if (detail::track<S>(x, gain, bias)) {
    out.set_requires_grad(true);
    Tape<S>::active()->record("layer_norm",
                              [x, gain, bias, out, rows, d, xhat = std::move(xhat), inv_std = std::move(inv_std)]() mutable {
      if (!out.has_grad()) return;
      const auto& go = out.grad();
      for (long r = 0; r < rows; ++r) {
        const S* g = go.data() + r * d;
        const S* h = xhat.data() + r * d;
        if (x.requires_grad()) {
          auto& gx = x.grad_buffer();
          S sum_dh = 0, sum_dh_h = 0;
          for (long i = 0; i < d; ++i) {
            const S dh = g[i] * gain.data()[i];
            sum_dh += dh;
            sum_dh_h += dh * h[i];
          }
          const S inv = inv_std[static_cast<std::size_t>(r)];
          const S inv_d = S(1) / static_cast<S>(d);
          for (long i = 0; i < d; ++i) {
            const S dh = g[i] * gain.data()[i];
            gx[r * d + i] += inv * (dh - sum_dh * inv_d - h[i] * sum_dh_h * inv_d);
          }
        }
        if (gain.requires_grad()) {
          auto& gg = gain.grad_buffer();
          for (long i = 0; i < d; ++i) gg[static_cast<std::size_t>(i)] += g[i] * h[i];
        }
        if (bias.requires_grad()) {
          auto& gb = bias.grad_buffer();
          for (long i = 0; i < d; ++i) gb[static_cast<std::size_t>(i)] += g[i];
        }
      }
    });
  }
  return detail::finish(out, "layer_norm");
}

// Unit L2 norm per vector along the last axis. Near-zero vectors are a
// degenerate input, not a silent epsilon.
template <class S>
Tensor<S> l2_normalize(const Tensor<S>& x) {
  constexpr double min_norm = 1e-12;
  const long d = x.dim(-1);
  const long rows = x.numel() / d;
  Tensor<S> out = Tensor<S>::zeros(x.shape());
  std::vector<S> inv_norm(static_cast<std::size_t>(rows));
  for (long r = 0; r < rows; ++r) {
    const S* xi = x.data() + r * d;
    S sq = 0;
    for (long i = 0; i < d; ++i) sq += xi[i] * xi[i];
    const S norm = std::sqrt(sq);
    if (!(static_cast<double>(norm) > min_norm)) throw value_error("l2_normalize: near-zero vector");
    const S inv = S(1) / norm;
    inv_norm[static_cast<std::size_t>(r)] = inv;
    S* yi = out.data() + r * d;
    for (long i = 0; i < d; ++i) yi[i] = xi[i] * inv;
  }
  if (detail::track<S>(x)) {
    out.set_requires_grad(true);
    Tape<S>::active()->record("l2_normalize", [x, out, rows, d, inv_norm = std::move(inv_norm)]() mutable {
      if (!out.has_grad()) return;
      const auto& go = out.grad();
      auto& gx = x.grad_buffer();
      for (long r = 0; r < rows; ++r) {
        const S* y = out.data() + r * d;
        const S* g = go.data() + r * d;
        S dot = 0;
        for (long i = 0; i < d; ++i) dot += y[i] * g[i];
        const S inv = inv_norm[static_cast<std::size_t>(r)];
        for (long i = 0; i < d; ++i) gx[r * d + i] += inv * (g[i] - y[i] * dot);
      }
    });
  }
  return detail::finish(out, "l2_normalize");
}

// ---------------------------------------------------------------------------
// attention and token plumbing
// ---------------------------------------------------------------------------

// Fused multi-head scaled dot-product attention over [N, T, D] inputs.
// Attention probabilities are kept for the backward pass.
template <class S>
Tensor<S> attention(const Tensor<S>& q, const Tensor<S>& k, const Tensor<S>& v, long heads, bool causal) {
  if (q.rank() != 3 || k.shape() != q.shape() || v.shape() != q.shape())
    throw shape_error("attention: q/k/v must share shape [N,T,D]");
  const long n = q.dim(0), t = q.dim(1), d = q.dim(2);
  if (heads < 1 || d % heads != 0) throw value_error("attention: width not divisible by heads");
  const long dh = d / heads;
  const S att_scale = S(1) / std::sqrt(static_cast<S>(dh));
  Tensor<S> out = Tensor<S>::zeros(q.shape());
  AlignedVec<S> probs(static_cast<std::size_t>(n * heads * t * t));
  detail::EMat<S> scores(t, t);
  for (long b = 0; b < n; ++b) {
    for (long h = 0; h < heads; ++h) {
      const long base = b * t * d + h * dh;
      detail::CStrideMap<S> qm(q.data() + base, t, dh, Eigen::OuterStride<>(d));
      detail::CStrideMap<S> km(k.data() + base, t, dh, Eigen::OuterStride<>(d));
      detail::CStrideMap<S> vm(v.data() + base, t, dh, Eigen::OuterStride<>(d));
      scores.noalias() = qm * km.transpose();
      scores *= att_scale;
      if (causal) {
        for (long i = 0; i < t; ++i)
          for (long j = i + 1; j < t; ++j) scores(i, j) = -std::numeric_limits<S>::infinity();
      }
      S* p = probs.data() + (b * heads + h) * t * t;
      for (long i = 0; i < t; ++i) {
        S m = scores(i, 0);
        for (long j = 1; j < t; ++j) m = std::max(m, scores(i, j));
        S z = 0;
        for (long j = 0; j < t; ++j) {
          const S e = std::exp(scores(i, j) - m);
          p[i * t + j] = e;
          z += e;
        }
        const S inv = S(1) / z;
        for (long j = 0; j < t; ++j) p[i * t + j] *= inv;
      }
      detail::StrideMap<S> om(out.data() + base, t, dh, Eigen::OuterStride<>(d));
      om.noalias() = detail::CMapMat<S>(p, t, t) * vm;
    }
  }
  count_macs(static_cast<std::uint64_t>(2) * n * t * t * d);
  if (detail::track<S>(q, k, v)) {
    out.set_requires_grad(true);
    Tape<S>::active()->record("attention",
                              [q, k, v, out, n, t, d, heads, dh, att_scale, probs = std::move(probs)]() mutable {
      if (!out.has_grad()) return;
      detail::EMat<S> dp(t, t), ds(t, t);
      for (long b = 0; b < n; ++b) {
        for (long h = 0; h < heads; ++h) {
          const long base = b * t * d + h * dh;
          detail::CStrideMap<S> gom(out.grad().data() + base, t, dh, Eigen::OuterStride<>(d));
          detail::CMapMat<S> pm(probs.data() + (b * heads + h) * t * t, t, t);
          detail::CStrideMap<S> qm(q.data() + base, t, dh, Eigen::OuterStride<>(d));
          detail::CStrideMap<S> km(k.data() + base, t, dh, Eigen::OuterStride<>(d));
          detail::CStrideMap<S> vm(v.data() + base, t, dh, Eigen::OuterStride<>(d));
          if (v.requires_grad()) {
            detail::StrideMap<S> gv(v.grad_buffer().data() + base, t, dh, Eigen::OuterStride<>(d));
            gv.noalias() += pm.transpose() * gom;
          }
          dp.noalias() = gom * vm.transpose();
          // softmax backward per row
          for (long i = 0; i < t; ++i) {
            S dot = 0;
            for (long j = 0; j < t; ++j) dot += dp(i, j) * pm(i, j);
            for (long j = 0; j < t; ++j) ds(i, j) = pm(i, j) * (dp(i, j) - dot);
          }
          ds *= att_scale;
          if (q.requires_grad()) {
            detail::StrideMap<S> gq(q.grad_buffer().data() + base, t, dh, Eigen::OuterStride<>(d));
            gq.noalias() += ds * km;
          }
          if (k.requires_grad()) {
            detail::StrideMap<S> gk(k.grad_buffer().data() + base, t, dh, Eigen::OuterStride<>(d));
            gk.noalias() += ds.transpose() * qm;
          }
        }
      }
    });
  }
  return detail::finish(out, "attention");
}

// Gather embedding rows for a token batch: table[V,D] -> [n, len, D].
template <class S>
Tensor<S> embedding(const Tensor<S>& table, const TokenBatch& tb) {
  if (table.rank() != 2) throw shape_error("embedding: table must be [V,D]");
  if (static_cast<long>(tb.ids.size()) != tb.n * tb.len) throw shape_error("embedding: id buffer size mismatch");
  const long v = table.dim(0), d = table.dim(1);
  Tensor<S> out = Tensor<S>::zeros({tb.n, tb.len, d});
  for (long i = 0; i < tb.n * tb.len; ++i) {
    const int id = tb.ids[static_cast<std::size_t>(i)];
    if (id < 0 || id >= v) throw value_error("embedding: token id out of range");
    const S* src = table.data() + static_cast<long>(id) * d;
    S* dst = out.data() + i * d;
    for (long j = 0; j < d; ++j) dst[j] = src[j];
  }
  if (detail::track<S>(table)) {
    out.set_requires_grad(true);
    Tape<S>::active()->record("embedding", [table, out, ids = tb.ids, d]() mutable {
      if (!out.has_grad()) return;
      const auto& go = out.grad();
      auto& gt = table.grad_buffer();
      for (std::size_t i = 0; i < ids.size(); ++i) {
        S* dst = gt.data() + static_cast<long>(ids[i]) * d;
        const S* src = go.data() + static_cast<long>(i) * d;
        for (long j = 0; j < d; ++j) dst[j] += src[j];
      }
    });
  }
  return detail::finish(out, "embedding");
}

// Pick one position per sequence: x[N,L,D], pos[N] -> [N,D].
template <class S>
Tensor<S> select_positions(const Tensor<S>& x, const std::vector<long>& pos) {
  if (x.rank() != 3) throw shape_error("select_positions: x must be [N,L,D]");
  const long n = x.dim(0), l = x.dim(1), d = x.dim(2);
  if (static_cast<long>(pos.size()) != n) throw shape_error("select_positions: one position per row required");
  Tensor<S> out = Tensor<S>::zeros({n, d});
  for (long i = 0; i < n; ++i) {
    if (pos[static_cast<std::size_t>(i)] < 0 || pos[static_cast<std::size_t>(i)] >= l)
      throw value_error("select_positions: position out of range");
    const S* src = x.data() + (i * l + pos[static_cast<std::size_t>(i)]) * d;
    for (long j = 0; j < d; ++j) out.data()[i * d + j] = src[j];
  }
  if (detail::track<S>(x)) {
    out.set_requires_grad(true);
    Tape<S>::active()->record("select_positions", [x, out, pos, l, d]() mutable {
      if (!out.has_grad()) return;
      const auto& go = out.grad();
      auto& gx = x.grad_buffer();
      const long n = out.dim(0);
      for (long i = 0; i < n; ++i) {
        S* dst = gx.data() + (i * l + pos[static_cast<std::size_t>(i)]) * d;
        for (long j = 0; j < d; ++j) dst[j] += go[static_cast<std::size_t>(i * d + j)];
      }
    });
  }
  return detail::finish(out, "select_positions");
}

// Prepend one shared set of learned tokens to every sample:
// tokens[K,D] + x[N,P,D] -> [N,K+P,D].
template <class S>
Tensor<S> concat_tokens(const Tensor<S>& tokens, const Tensor<S>& x) {
  if (tokens.rank() != 2 || x.rank() != 3 || tokens.dim(1) != x.dim(2))
    throw shape_error("concat_tokens: want tokens[K,D] and x[N,P,D]");
  const long kk = tokens.dim(0), n = x.dim(0), p = x.dim(1), d = x.dim(2);
  Tensor<S> out = Tensor<S>::zeros({n, kk + p, d});
  for (long b = 0; b < n; ++b) {
    S* dst = out.data() + b * (kk + p) * d;
    for (long i = 0; i < kk * d; ++i) dst[i] = tokens.data()[i];
    const S* src = x.data() + b * p * d;
    for (long i = 0; i < p * d; ++i) dst[kk * d + i] = src[i];
  }
  if (detail::track<S>(tokens, x)) {
    out.set_requires_grad(true);
    Tape<S>::active()->record("concat_tokens", [tokens, x, out, kk, n, p, d]() mutable {
      if (!out.has_grad()) return;
      const auto& go = out.grad();
      for (long b = 0; b < n; ++b) {
        const S* src = go.data() + b * (kk + p) * d;
        if (tokens.requires_grad()) {
          auto& gt = tokens.grad_buffer();
          for (long i = 0; i < kk * d; ++i) gt[static_cast<std::size_t>(i)] += src[i];
        }
        if (x.requires_grad()) {
          auto& gx = x.grad_buffer();
          S* dst = gx.data() + b * p * d;
          for (long i = 0; i < p * d; ++i) dst[i] += src[kk * d + i];
        }
      }
    });
  }
  return detail::finish(out, "concat_tokens");
}

// x[N,T,D] + pos[T,D] broadcast over the batch.
template <class S>
Tensor<S> add_pos(const Tensor<S>& x, const Tensor<S>& pos) {
  if (x.rank() != 3 || pos.rank() != 2 || x.dim(1) != pos.dim(0) || x.dim(2) != pos.dim(1))
    throw shape_error("add_pos: want x[N,T,D] and pos[T,D]");
  const long n = x.dim(0), td = x.dim(1) * x.dim(2);
  Tensor<S> out = Tensor<S>::zeros(x.shape());
  for (long b = 0; b < n; ++b) {
    const S* src = x.data() + b * td;
    S* dst = out.data() + b * td;
    for (long i = 0; i < td; ++i) dst[i] = src[i] + pos.data()[i];
  }
  if (detail::track<S>(x, pos)) {
    out.set_requires_grad(true);
    Tape<S>::active()->record("add_pos", [x, pos, out, n, td]() mutable {
      if (!out.has_grad()) return;
      const auto& go = out.grad();
      for (long b = 0; b < n; ++b) {
        const S* src = go.data() + b * td;
        if (x.requires_grad()) {
          S* dst = x.grad_buffer().data() + b * td;
          for (long i = 0; i < td; ++i) dst[i] += src[i];
        }
        if (pos.requires_grad()) {
          S* dst = pos.grad_buffer().data();
          for (long i = 0; i < td; ++i) dst[i] += src[i];
        }
      }
    });
  }
  return detail::finish(out, "add_pos");
}

// x[N,T,D] -> [N,len,D], tokens start..start+len-1.
template <class S>
Tensor<S> slice_tokens(const Tensor<S>& x, long start, long len) {
  if (x.rank() != 3) throw shape_error("slice_tokens: x must be [N,T,D]");
  const long n = x.dim(0), t = x.dim(1), d = x.dim(2);
  if (start < 0 || len < 1 || start + len > t) throw shape_error("slice_tokens: range out of bounds");
  Tensor<S> out = Tensor<S>::zeros({n, len, d});
  for (long b = 0; b < n; ++b) {
    const S* src = x.data() + (b * t + start) * d;
    S* dst = out.data() + b * len * d;
    for (long i = 0; i < len * d; ++i) dst[i] = src[i];
  }
  if (detail::track<S>(x)) {
    out.set_requires_grad(true);
    Tape<S>::active()->record("slice_tokens", [x, out, start, len, n, t, d]() mutable {
      if (!out.has_grad()) return;
      const auto& go = out.grad();
      auto& gx = x.grad_buffer();
      for (long b = 0; b < n; ++b) {
        S* dst = gx.data() + (b * t + start) * d;
        const S* src = go.data() + b * len * d;
        for (long i = 0; i < len * d; ++i) dst[i] += src[i];
      }
    });
  }
  return detail::finish(out, "slice_tokens");
}

// x[N,T,D] -> [N,D], one token index for the whole batch.
template <class S>
Tensor<S> select_token(const Tensor<S>& x, long idx) {
  if (x.rank() != 3) throw shape_error("select_token: x must be [N,T,D]");
  const long n = x.dim(0), t = x.dim(1), d = x.dim(2);
  if (idx < 0 || idx >= t) throw shape_error("select_token: index out of range");
  Tensor<S> out = Tensor<S>::zeros({n, d});
  for (long b = 0; b < n; ++b) {
    const S* src = x.data() + (b * t + idx) * d;
    for (long j = 0; j < d; ++j) out.data()[b * d + j] = src[j];
  }
  if (detail::track<S>(x)) {
    out.set_requires_grad(true);
    Tape<S>::active()->record("select_token", [x, out, idx, n, t, d]() mutable {
      if (!out.has_grad()) return;
      const auto& go = out.grad();
      auto& gx = x.grad_buffer();
      for (long b = 0; b < n; ++b) {
        S* dst = gx.data() + (b * t + idx) * d;
        for (long j = 0; j < d; ++j) dst[j] += go[static_cast<std::size_t>(b * d + j)];
      }
    });
  }
  return detail::finish(out, "select_token");
}

// x[N,T,D] -> [N,D] token mean.
template <class S>
Tensor<S> mean_tokens(const Tensor<S>& x) {
  if (x.rank() != 3) throw shape_error("mean_tokens: x must be [N,T,D]");
  const long n = x.dim(0), t = x.dim(1), d = x.dim(2);
  const S inv = S(1) / static_cast<S>(t);
  Tensor<S> out = Tensor<S>::zeros({n, d});
  for (long b = 0; b < n; ++b) {
    S* dst = out.data() + b * d;
    for (long i = 0; i < t; ++i) {
      const S* src = x.data() + (b * t + i) * d;
      for (long j = 0; j < d; ++j) dst[j] += src[j];
    }
    for (long j = 0; j < d; ++j) dst[j] *= inv;
  }
  if (detail::track<S>(x)) {
    out.set_requires_grad(true);
    Tape<S>::active()->record("mean_tokens", [x, out, n, t, d, inv]() mutable {
      if (!out.has_grad()) return;
      const auto& go = out.grad();
      auto& gx = x.grad_buffer();
      for (long b = 0; b < n; ++b) {
        const S* src = go.data() + b * d;
        for (long i = 0; i < t; ++i) {
          S* dst = gx.data() + (b * t + i) * d;
          for (long j = 0; j < d; ++j) dst[j] += src[j] * inv;
        }
      }
    });
  }
  return detail::finish(out, "mean_tokens");
}

// z[I,D] -> [I,J,D]: copy each row across a new middle axis.
template <class S>
Tensor<S> replicate_ctx(const Tensor<S>& z, long j) {
  if (z.rank() != 2) throw shape_error("replicate_ctx: z must be [I,D]");
  if (j < 1) throw value_error("replicate_ctx: j must be positive");
  const long i = z.dim(0), d = z.dim(1);
  Tensor<S> out = Tensor<S>::zeros({i, j, d});
  for (long a = 0; a < i; ++a) {
    const S* src = z.data() + a * d;
    for (long b = 0; b < j; ++b) {
      S* dst = out.data() + (a * j + b) * d;
      for (long c = 0; c < d; ++c) dst[c] = src[c];
    }
  }
  if (detail::track<S>(z)) {
    out.set_requires_grad(true);
    Tape<S>::active()->record("replicate_ctx", [z, out, i, j, d]() mutable {
      if (!out.has_grad()) return;
      const auto& go = out.grad();
      auto& gz = z.grad_buffer();
      for (long a = 0; a < i; ++a) {
        S* dst = gz.data() + a * d;
        for (long b = 0; b < j; ++b) {
          const S* src = go.data() + (a * j + b) * d;
          for (long c = 0; c < d; ++c) dst[c] += src[c];
        }
      }
    });
  }
  return detail::finish(out, "replicate_ctx");
}

// ---------------------------------------------------------------------------
// cross-attention mixing kernels
// ---------------------------------------------------------------------------

// Per-head dot products between projected caption queries and projected
// token keys: q[J,D], k[I,T,D] -> scores[I,J,M,T].
template <class S>
Tensor<S> mixer_scores(const Tensor<S>& q, const Tensor<S>& k, long heads) {
  if (q.rank() != 2 || k.rank() != 3 || q.dim(1) != k.dim(2))
    throw shape_error("mixer_scores: want q[J,D], k[I,T,D]");
  const long j = q.dim(0), d = q.dim(1), i = k.dim(0), t = k.dim(1);
  if (heads < 1 || d % heads != 0) throw value_error("mixer_scores: width not divisible by heads");
  const long dh = d / heads;
  Tensor<S> out = Tensor<S>::zeros({i, j, heads, t});
  for (long a = 0; a < i; ++a) {
    for (long m = 0; m < heads; ++m) {
      detail::CStrideMap<S> qm(q.data() + m * dh, j, dh, Eigen::OuterStride<>(d));
      detail::CStrideMap<S> km(k.data() + a * t * d + m * dh, t, dh, Eigen::OuterStride<>(d));
      detail::StrideMap<S> om(out.data() + (a * j) * heads * t + m * t, j, t, Eigen::OuterStride<>(heads * t));
      om.noalias() = qm * km.transpose();
    }
  }
  count_macs(static_cast<std::uint64_t>(i) * j * t * d);
  if (detail::track<S>(q, k)) {
    out.set_requires_grad(true);
    Tape<S>::active()->record("mixer_scores", [q, k, out, i, j, t, d, heads, dh]() mutable {
      if (!out.has_grad()) return;
      for (long a = 0; a < i; ++a) {
        for (long m = 0; m < heads; ++m) {
          detail::CStrideMap<S> gs(out.grad().data() + (a * j) * heads * t + m * t, j, t,
                                   Eigen::OuterStride<>(heads * t));
          if (q.requires_grad()) {
            detail::CStrideMap<S> km(k.data() + a * t * d + m * dh, t, dh, Eigen::OuterStride<>(d));
            detail::StrideMap<S> gq(q.grad_buffer().data() + m * dh, j, dh, Eigen::OuterStride<>(d));
            gq.noalias() += gs * km;
          }
          if (k.requires_grad()) {
            detail::CStrideMap<S> qm(q.data() + m * dh, j, dh, Eigen::OuterStride<>(d));
            detail::StrideMap<S> gk(k.grad_buffer().data() + a * t * d + m * dh, t, dh, Eigen::OuterStride<>(d));
            gk.noalias() += gs.transpose() * qm;
          }
        }
      }
    });
  }
  return detail::finish(out, "mixer_scores");
}

// Weighted per-head token mixing: phi[I,J,M,T], v[I,T,D] -> [I,J,D] with the
// head outputs written into their own column ranges (concatenation).
template <class S>
Tensor<S> mixer_combine(const Tensor<S>& phi, const Tensor<S>& v) {
  if (phi.rank() != 4 || v.rank() != 3) throw shape_error("mixer_combine: want phi[I,J,M,T], v[I,T,D]");
  const long i = phi.dim(0), j = phi.dim(1), heads = phi.dim(2), t = phi.dim(3);
  const long d = v.dim(2);
  if (v.dim(0) != i || v.dim(1) != t || d % heads != 0) throw shape_error("mixer_combine: shape mismatch");
  const long dh = d / heads;
  Tensor<S> out = Tensor<S>::zeros({i, j, d});
  for (long a = 0; a < i; ++a) {
    for (long m = 0; m < heads; ++m) {
      detail::CStrideMap<S> pm(phi.data() + (a * j) * heads * t + m * t, j, t, Eigen::OuterStride<>(heads * t));
      detail::CStrideMap<S> vm(v.data() + a * t * d + m * dh, t, dh, Eigen::OuterStride<>(d));
      detail::StrideMap<S> om(out.data() + a * j * d + m * dh, j, dh, Eigen::OuterStride<>(d));
      om.noalias() = pm * vm;
    }
  }
  count_macs(static_cast<std::uint64_t>(i) * j * t * d);
  if (detail::track<S>(phi, v)) {
    out.set_requires_grad(true);
    Tape<S>::active()->record("mixer_combine", [phi, v, out, i, j, t, d, heads, dh]() mutable {
      if (!out.has_grad()) return;
      for (long a = 0; a < i; ++a) {
        for (long m = 0; m < heads; ++m) {
          detail::CStrideMap<S> go(out.grad().data() + a * j * d + m * dh, j, dh, Eigen::OuterStride<>(d));
          if (phi.requires_grad()) {
            detail::CStrideMap<S> vm(v.data() + a * t * d + m * dh, t, dh, Eigen::OuterStride<>(d));
            detail::StrideMap<S> gp(phi.grad_buffer().data() + (a * j) * heads * t + m * t, j, t,
                                    Eigen::OuterStride<>(heads * t));
            gp.noalias() += go * vm.transpose();
          }
          if (v.requires_grad()) {
            detail::CStrideMap<S> pm(phi.data() + (a * j) * heads * t + m * t, j, t, Eigen::OuterStride<>(heads * t));
            detail::StrideMap<S> gv(v.grad_buffer().data() + a * t * d + m * dh, t, dh, Eigen::OuterStride<>(d));
            gv.noalias() += pm.transpose() * go;
          }
        }
      }
    });
  }
  return detail::finish(out, "mixer_combine");
}

// Row-of-pairs dot products: z[I,J,D], zt[J,D] -> [I,J] with
// out[i,j] = z[i,j,:] . zt[j,:].
template <class S>
Tensor<S> pairwise_dot(const Tensor<S>& z, const Tensor<S>& zt) {
  if (z.rank() != 3 || zt.rank() != 2 || z.dim(1) != zt.dim(0) || z.dim(2) != zt.dim(1))
    throw shape_error("pairwise_dot: want z[I,J,D], zt[J,D]");
  const long i = z.dim(0), j = z.dim(1), d = z.dim(2);
  Tensor<S> out = Tensor<S>::zeros({i, j});
  for (long a = 0; a < i; ++a) {
    for (long b = 0; b < j; ++b) {
      const S* zp = z.data() + (a * j + b) * d;
      const S* tp = zt.data() + b * d;
      S acc = 0;
      for (long c = 0; c < d; ++c) acc += zp[c] * tp[c];
      out.data()[a * j + b] = acc;
    }
  }
  count_macs(static_cast<std::uint64_t>(i) * j * d);
  if (detail::track<S>(z, zt)) {
    out.set_requires_grad(true);
    Tape<S>::active()->record("pairwise_dot", [z, zt, out, i, j, d]() mutable {
      if (!out.has_grad()) return;
      const auto& go = out.grad();
      for (long a = 0; a < i; ++a) {
        for (long b = 0; b < j; ++b) {
          const S g = go[static_cast<std::size_t>(a * j + b)];
          if (z.requires_grad()) {
            S* dst = z.grad_buffer().data() + (a * j + b) * d;
            const S* tp = zt.data() + b * d;
            for (long c = 0; c < d; ++c) dst[c] += g * tp[c];
          }
          if (zt.requires_grad()) {
            S* dst = zt.grad_buffer().data() + b * d;
            const S* zp = z.data() + (a * j + b) * d;
            for (long c = 0; c < d; ++c) dst[c] += g * zp[c];
          }
        }
      }
    });
  }
  return detail::finish(out, "pairwise_dot");
}

}  // namespace llip
