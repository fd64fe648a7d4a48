#pragma once

#include <vector>

#include "llip/core/rng.hpp"
#include "llip/core/tensor.hpp"
#include "llip/data.hpp"

namespace llip::testing {

// Dataset built straight in memory, no disk round-trip.
inline data::Dataset in_memory_dataset(long n, std::uint64_t seed) {
  data::Dataset ds;
  for (long i = 0; i < n; ++i) {
    data::SyntheticScene s = data::generate_scene(seed, i);
    ds.manifest.entries.push_back({"img/none.ppm", s.captions, s.aspects});
    ds.images.push_back(std::move(s.image));
  }
  ds.vocab = data::build_vocabulary(ds.manifest);
  return ds;
}

template <class S>
Tensor<S> randn(Shape shape, Rng& rng, double stddev = 1.0, bool requires_grad = false) {
  Tensor<S> t = Tensor<S>::zeros(std::move(shape));
  for (long i = 0; i < t.numel(); ++i) t.data()[i] = static_cast<S>(rng.normal() * stddev);
  t.set_requires_grad(requires_grad);
  return t;
}

template <class S>
bool bitwise_equal(const Tensor<S>& a, const Tensor<S>& b) {
  if (a.shape() != b.shape()) return false;
  for (long i = 0; i < a.numel(); ++i)
    if (a.data()[i] != b.data()[i]) return false;
  return true;
}

}  // namespace llip::testing
