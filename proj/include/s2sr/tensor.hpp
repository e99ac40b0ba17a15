#pragma once

// Dense row-major tensors with a reverse-mode tape.
//
// A Tensor is a handle to a Node holding the flat value array and, once
// backward has run, the gradient array. Operations executed while a Tape is
// active append one record each; records are already in topological order
// (inputs are created before outputs), so backward is a single reverse sweep
// that touches every recorded operation exactly once. Accumulation order is
// fixed, which keeps single-threaded runs bit-reproducible.
//
// Tensors are immutable after forward creation. Independent tapes may run on
// separate threads; nothing here is shared between graphs except the
// allocation statistics, which are atomic.

#include <atomic>
#include <cstring>
#include <functional>
#include <memory>
#include <utility>

#include "s2sr/common.hpp"

namespace s2sr {

// Process-wide high-water mark for tensor payload bytes (data + grad).
struct MemStats {
  static std::atomic<int64_t>& current() {
    static std::atomic<int64_t> v{0};
    return v;
  }
  static std::atomic<int64_t>& peak() {
    static std::atomic<int64_t> v{0};
    return v;
  }
  static void add(int64_t bytes) {
    int64_t now = current().fetch_add(bytes) + bytes;
    int64_t p = peak().load();
    while (now > p && !peak().compare_exchange_weak(p, now)) {
    }
  }
  static void sub(int64_t bytes) { current().fetch_sub(bytes); }
  static void reset_peak() { peak().store(current().load()); }
};

inline bool& finite_checks_flag() {
  thread_local bool on = true;
  return on;
}
inline void set_finite_checks(bool on) { finite_checks_flag() = on; }

template <class T>
struct Node {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // empty until first accumulation
  bool requires_grad = false;

  Node(Shape s, std::vector<T> d) : shape(std::move(s)), data(std::move(d)) {
    MemStats::add(int64_t(data.size() * sizeof(T)));
  }
  ~Node() { MemStats::sub(int64_t((data.size() + grad.size()) * sizeof(T))); }
  Node(const Node&) = delete;
  Node& operator=(const Node&) = delete;

  void ensure_grad() {
    if (grad.empty()) {
      grad.assign(data.size(), T(0));
      MemStats::add(int64_t(grad.size() * sizeof(T)));
    }
  }

  void release_grad() {
    if (!grad.empty()) {
      MemStats::sub(int64_t(grad.size() * sizeof(T)));
      grad.clear();
      grad.shrink_to_fit();
    }
  }
};

template <class T>
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node<T>> n) : n_(std::move(n)) {}

  static Tensor zeros(Shape s) {
    auto n = numel_of(s);
    return Tensor(std::make_shared<Node<T>>(std::move(s), std::vector<T>(size_t(n), T(0))));
  }
  static Tensor full(Shape s, T v) {
    auto n = numel_of(s);
    return Tensor(std::make_shared<Node<T>>(std::move(s), std::vector<T>(size_t(n), v)));
  }
  static Tensor from(Shape s, std::vector<T> d) {
    if (numel_of(s) != int64_t(d.size()))
      throw ShapeError("tensor data length " + std::to_string(d.size()) +
                       " does not match shape " + shape_str(s));
    return Tensor(std::move(s), std::move(d));
  }
  static Tensor scalar(T v) { return full({1}, v); }

  Tensor(Shape s, std::vector<T> d)
      : n_(std::make_shared<Node<T>>(std::move(s), std::move(d))) {}

  bool defined() const { return n_ != nullptr; }
  const Shape& shape() const { return n_->shape; }
  int64_t numel() const { return int64_t(n_->data.size()); }
  int64_t dim(int i) const {
    int r = int(n_->shape.size());
    return n_->shape[size_t(i < 0 ? i + r : i)];
  }
  int rank() const { return int(n_->shape.size()); }

  std::vector<T>& data() { return n_->data; }
  const std::vector<T>& data() const { return n_->data; }
  T* ptr() { return n_->data.data(); }
  const T* ptr() const { return n_->data.data(); }

  T item() const {
    if (numel() != 1) throw UsageError("item() on non-scalar tensor " + shape_str(shape()));
    return n_->data[0];
  }

  bool requires_grad() const { return n_->requires_grad; }
  Tensor& set_requires_grad(bool v) {
    n_->requires_grad = v;
    return *this;
  }

  bool has_grad() const { return !n_->grad.empty(); }
  const std::vector<T>& grad() const {
    if (n_->grad.empty()) throw UsageError("gradient not populated; run backward first");
    return n_->grad;
  }
  std::vector<T>& grad_ref() {
    n_->ensure_grad();
    return n_->grad;
  }
  void clear_grad() {
    if (!n_->grad.empty()) {
      MemStats::sub(int64_t(n_->grad.size() * sizeof(T)));
      n_->grad.clear();
      n_->grad.shrink_to_fit();
    }
  }

  std::shared_ptr<Node<T>> node() const { return n_; }

 private:
  std::shared_ptr<Node<T>> n_;
};

template <class T>
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // Installs this tape as the recording target for the current thread.
  class Scope {
   public:
    explicit Scope(Tape& t) : prev_(current_ptr()) { current_ptr() = &t; }
    ~Scope() { current_ptr() = prev_; }
    Scope(const Scope&) = delete;
    Scope& operator=(const Scope&) = delete;

   private:
    Tape* prev_;
  };

  static Tape* current() { return current_ptr(); }

  void record(std::shared_ptr<Node<T>> out, std::function<void()> backward) {
    records_.push_back({std::move(out), std::move(backward)});
  }

  size_t size() const { return records_.size(); }

  // Reverse sweep from a scalar root. Each record runs at most once; records
  // whose output never received a gradient are skipped. A record's output
  // gradient has no readers after the record itself runs (only earlier
  // records remain, and their outputs precede it), so it is released
  // immediately to bound peak memory. Leaf gradients are untouched: leaves
  // are never record outputs.
  void backward(const Tensor<T>& root) {
    if (root.numel() != 1)
      throw UsageError("backward requires a scalar root, got " + shape_str(root.shape()));
    root.node()->ensure_grad();
    root.node()->grad[0] = T(1);
    for (size_t i = records_.size(); i-- > 0;) {
      auto& r = records_[i];
      if (!r.out->grad.empty()) {
        r.backward();
        r.out->release_grad();
      }
    }
  }

  void clear() { records_.clear(); }

 private:
  struct Record {
    std::shared_ptr<Node<T>> out;
    std::function<void()> backward;
  };
  std::vector<Record> records_;

  static Tape*& current_ptr() {
    thread_local Tape* cur = nullptr;
    return cur;
  }
};

// True when the output of an op should join the autodiff graph.
template <class T>
inline bool tracing(std::initializer_list<const Tensor<T>*> inputs) {
  if (Tape<T>::current() == nullptr) return false;
  for (const auto* t : inputs)
    if (t->defined() && t->requires_grad()) return true;
  return false;
}

template <class T>
inline void check_finite(const Tensor<T>& t, const char* op) {
  if (!finite_checks_flag()) return;
  for (T v : t.data())
    if (!std::isfinite(double(v)))
      throw NumericError(std::string("non-finite value produced by ") + op);
}

}  // namespace s2sr
