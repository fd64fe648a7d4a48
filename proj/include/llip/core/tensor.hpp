#pragma once

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "llip/core/errors.hpp"

namespace llip {

// All tensor buffers share one 64-byte alignment so that vectorized kernels
// peel identical prologues on every run; heap placement must never change
// the rounding of a result.
template <class T, std::size_t Align = 64>
struct AlignedAllocator {
  using value_type = T;
  AlignedAllocator() = default;
  template <class U>
  AlignedAllocator(const AlignedAllocator<U, Align>&) noexcept {}
  template <class U>
  struct rebind {
    using other = AlignedAllocator<U, Align>;
  };
  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), std::align_val_t(Align))); }
  void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, std::align_val_t(Align)); }
  bool operator==(const AlignedAllocator&) const noexcept { return true; }
  bool operator!=(const AlignedAllocator&) const noexcept { return false; }
};

template <class T>
using AlignedVec = std::vector<T, AlignedAllocator<T>>;

using Shape = std::vector<long>;

inline long numel_of(const Shape& shape) {
  long n = 1;
  for (long d : shape) {
    if (d < 0) throw shape_error("negative dimension");
    n *= d;
  }
  return n;
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

// Dense row-major tensor of scalar S. Copies are shallow (shared storage);
// values are written once by the producing primitive, gradients accumulate
// in-place during backward.
template <class S>
class Tensor {
 public:
  struct Storage {
    Shape shape;
    AlignedVec<S> value;
    AlignedVec<S> grad;  // empty while no gradient has been accumulated
    bool requires_grad = false;
  };

  Tensor() = default;

  static Tensor zeros(Shape shape) {
    Tensor t;
    t.s_ = std::make_shared<Storage>();
    t.s_->shape = std::move(shape);
    t.s_->value.assign(static_cast<std::size_t>(numel_of(t.s_->shape)), S(0));
    return t;
  }

  static Tensor full(Shape shape, S v) {
    Tensor t = zeros(std::move(shape));
    for (S& x : t.s_->value) x = v;
    return t;
  }

  static Tensor from(Shape shape, const std::vector<S>& data) {
    if (numel_of(shape) != static_cast<long>(data.size()))
      throw shape_error("Tensor::from: data length " + std::to_string(data.size()) +
                        " does not match shape " + shape_str(shape));
    Tensor t;
    t.s_ = std::make_shared<Storage>();
    t.s_->shape = std::move(shape);
    t.s_->value.assign(data.begin(), data.end());
    return t;
  }

  static Tensor scalar(S v) { return from({}, {v}); }

  bool defined() const { return static_cast<bool>(s_); }

  const Shape& shape() const { return s_->shape; }
  long rank() const { return static_cast<long>(s_->shape.size()); }
  long dim(long i) const {
    const long r = rank();
    if (i < 0) i += r;
    if (i < 0 || i >= r) throw shape_error("Tensor::dim: axis out of range");
    return s_->shape[static_cast<std::size_t>(i)];
  }
  long numel() const { return static_cast<long>(s_->value.size()); }

  S* data() { return s_->value.data(); }
  const S* data() const { return s_->value.data(); }
  AlignedVec<S>& values() { return s_->value; }
  const AlignedVec<S>& values() const { return s_->value; }
  std::vector<S> to_vector() const { return std::vector<S>(s_->value.begin(), s_->value.end()); }

  S item() const {
    if (numel() != 1) throw value_error("Tensor::item: tensor is not a scalar");
    return s_->value[0];
  }

  S at(std::initializer_list<long> idx) const {
    return s_->value[static_cast<std::size_t>(offset_of(idx))];
  }

  bool requires_grad() const { return s_ && s_->requires_grad; }
  Tensor& set_requires_grad(bool b) {
    s_->requires_grad = b;
    return *this;
  }

  bool has_grad() const { return s_ && !s_->grad.empty(); }

  // Gradient buffer, created zero-filled on first use. Like the rest of the
  // handle, const-ness is shallow: accumulation goes through const handles.
  AlignedVec<S>& grad_buffer() const {
    if (s_->grad.empty()) s_->grad.assign(s_->value.size(), S(0));
    return s_->grad;
  }
  const AlignedVec<S>& grad() const {
    if (!has_grad()) throw value_error("Tensor::grad: no gradient present");
    return s_->grad;
  }
  void zero_grad() const {
    if (s_) s_->grad.clear();
  }

  Tensor clone() const {
    Tensor t;
    t.s_ = std::make_shared<Storage>(*s_);
    return t;
  }

  bool same_storage(const Tensor& o) const { return s_ == o.s_; }

 private:
  long offset_of(std::initializer_list<long> idx) const {
    if (static_cast<long>(idx.size()) != rank()) throw shape_error("Tensor::at: rank mismatch");
    long off = 0;
    std::size_t i = 0;
    for (long v : idx) {
      const long d = s_->shape[i];
      if (v < 0 || v >= d) throw shape_error("Tensor::at: index out of range");
      off = off * d + v;
      ++i;
    }
    return off;
  }

  std::shared_ptr<Storage> s_;
};

// Wengert list of recorded primitive applications. Ops record onto the
// innermost live Tape (execution order, hence topological order); backward
// replays the list once in reverse. Single-threaded by contract.
template <class S>
class Tape {
 public:
  Tape() {
    prev_ = active_;
    active_ = this;
  }
  ~Tape() { active_ = prev_; }
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  static Tape* active() { return active_; }

  void record(const char* op, std::function<void()> backward) {
    nodes_.push_back(Node{op, std::move(backward)});
  }

  std::size_t size() const { return nodes_.size(); }
  const char* op_name(std::size_t i) const { return nodes_[i].op; }

  // Runs every node's backward exactly once, newest first.
  void replay_backward() {
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) it->backward();
  }

 private:
  struct Node {
    const char* op;
    std::function<void()> backward;
  };
  std::vector<Node> nodes_;
  Tape* prev_ = nullptr;
  inline static thread_local Tape* active_ = nullptr;
};

// Seeds d(loss)/d(loss) = 1 and accumulates gradients onto every
// requires_grad tensor reachable through the tape.
template <class S>
void backward(Tensor<S>& loss, Tape<S>& tape) {
  if (loss.numel() != 1) throw value_error("backward: loss must be a scalar");
  loss.grad_buffer()[0] += S(1);
  tape.replay_backward();
}

}  // namespace llip
