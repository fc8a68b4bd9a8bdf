#pragma once

#include <cmath>
#include <cstring>
#include <functional>
#include <memory>
#include <random>
#include <utility>

#include "pkcam/common.hpp"

namespace pkcam {

// Dense n-dimensional array of doubles, row-major. Copies are shallow:
// they alias the same storage and gradient buffer, so a Tensor handle can
// be captured cheaply by backward closures and parameter registries.
// Storage is treated as immutable after construction except for explicit
// optimizer steps and gradient accumulation.
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape, double fill = 0.0) {
    validate_shape(shape);
    auto n = shape_numel(shape);
    impl_ = std::make_shared<Impl>();
    impl_->shape = std::move(shape);
    impl_->data.assign(static_cast<std::size_t>(n), fill);
  }

  Tensor(Shape shape, std::vector<double> values) {
    validate_shape(shape);
    if (shape_numel(shape) != static_cast<std::int64_t>(values.size()))
      throw ShapeError("tensor: " + std::to_string(values.size()) +
                       " values do not fill shape " + shape_str(shape));
    impl_ = std::make_shared<Impl>();
    impl_->shape = std::move(shape);
    impl_->data = std::move(values);
  }

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape), 0.0); }
  static Tensor ones(Shape shape) { return Tensor(std::move(shape), 1.0); }
  static Tensor full(Shape shape, double v) { return Tensor(std::move(shape), v); }
  static Tensor scalar(double v) { return Tensor(Shape{1}, {v}); }

  static Tensor vec(std::vector<double> values) {
    Shape s{static_cast<std::int64_t>(values.size())};
    return Tensor(std::move(s), std::move(values));
  }

  // He-style normal init, std = sqrt(2 / fan_in).
  static Tensor he_normal(Shape shape, std::int64_t fan_in, std::mt19937_64& rng) {
    Tensor t(shape);
    std::normal_distribution<double> d(0.0, std::sqrt(2.0 / static_cast<double>(fan_in)));
    for (auto& v : t.impl_->data) v = d(rng);
    return t;
  }

  static Tensor normal(Shape shape, double stddev, std::mt19937_64& rng) {
    Tensor t(shape);
    std::normal_distribution<double> d(0.0, stddev);
    for (auto& v : t.impl_->data) v = d(rng);
    return t;
  }

  static Tensor uniform(Shape shape, double lo, double hi, std::mt19937_64& rng) {
    Tensor t(shape);
    std::uniform_real_distribution<double> d(lo, hi);
    for (auto& v : t.impl_->data) v = d(rng);
    return t;
  }

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  int rank() const { return static_cast<int>(impl_->shape.size()); }
  std::int64_t dim(int i) const { return impl_->shape[static_cast<std::size_t>(i)]; }
  std::int64_t numel() const { return static_cast<std::int64_t>(impl_->data.size()); }

  double* data() { return impl_->data.data(); }
  const double* data() const { return impl_->data.data(); }
  const std::vector<double>& values() const { return impl_->data; }

  double& operator[](std::int64_t i) { return impl_->data[static_cast<std::size_t>(i)]; }
  double operator[](std::int64_t i) const { return impl_->data[static_cast<std::size_t>(i)]; }

  // 2-D accessor [N,C].
  double& at(std::int64_t n, std::int64_t c) {
    return impl_->data[static_cast<std::size_t>(n * dim(1) + c)];
  }
  double at(std::int64_t n, std::int64_t c) const {
    return impl_->data[static_cast<std::size_t>(n * dim(1) + c)];
  }
  // 4-D accessor [N,C,H,W].
  double& at(std::int64_t n, std::int64_t c, std::int64_t h, std::int64_t w) {
    return impl_->data[static_cast<std::size_t>(((n * dim(1) + c) * dim(2) + h) * dim(3) + w)];
  }
  double at(std::int64_t n, std::int64_t c, std::int64_t h, std::int64_t w) const {
    return impl_->data[static_cast<std::size_t>(((n * dim(1) + c) * dim(2) + h) * dim(3) + w)];
  }

  bool requires_grad() const { return impl_ && impl_->requires_grad; }
  Tensor& set_requires_grad(bool v) {
    impl_->requires_grad = v;
    return *this;
  }

  bool has_grad() const { return impl_ && !impl_->grad.empty(); }
  void ensure_grad() {
    if (impl_->grad.empty()) impl_->grad.assign(impl_->data.size(), 0.0);
  }
  void zero_grad() {
    if (!impl_->grad.empty()) std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0);
  }
  double* grad() {
    ensure_grad();
    return impl_->grad.data();
  }
  const double* grad() const { return impl_->grad.data(); }

  // Deep copy of the gradient as a plain tensor (for reporting).
  Tensor grad_clone() const {
    Tensor t(impl_->shape);
    if (!impl_->grad.empty()) t.impl_->data = impl_->grad;
    return t;
  }

  // Deep copy of the values; no grad, no requires_grad.
  Tensor clone() const {
    Tensor t(impl_->shape);
    t.impl_->data = impl_->data;
    return t;
  }

  bool same_storage(const Tensor& o) const { return impl_ == o.impl_; }

 private:
  struct Impl {
    Shape shape;
    std::vector<double> data;
    std::vector<double> grad;  // empty until first use
    bool requires_grad = false;
  };

  static void validate_shape(const Shape& s) {
    if (s.empty()) throw ShapeError("tensor: rank-0 shapes are not supported");
    for (std::size_t i = 0; i < s.size(); ++i)
      if (s[i] < 1)
        throw ShapeError("tensor: axis " + std::to_string(i) + " has illegal extent " +
                         std::to_string(s[i]));
  }

  std::shared_ptr<Impl> impl_;
};

// Reverse-mode tape. Construction makes the tape active for the current
// thread; destruction restores the previous one, so tapes nest and
// independent tapes on different threads do not interact. Each forward op
// that sees an active tape and a grad-requiring input records one adjoint
// step; backward() replays the steps exactly once in reverse order.
class GradTape {
 public:
  GradTape() : prev_(active_ref()) { active_ref() = this; }
  ~GradTape() { active_ref() = prev_; }
  GradTape(const GradTape&) = delete;
  GradTape& operator=(const GradTape&) = delete;

  static GradTape* active() { return active_ref(); }

  std::size_t size() const { return steps_.size(); }
  bool consumed() const { return consumed_; }

  void record(std::function<void()> fn) { steps_.push_back(std::move(fn)); }

  void backward(Tensor loss) {
    if (consumed_)
      throw ContractError("backward: tape already consumed; run forward again");
    if (loss.numel() != 1)
      throw ContractError("backward: loss must be scalar, got shape " +
                          shape_str(loss.shape()));
    loss.ensure_grad();
    loss.grad()[0] += 1.0;
    for (auto it = steps_.rbegin(); it != steps_.rend(); ++it) (*it)();
    consumed_ = true;
    steps_.clear();
  }

 private:
  static GradTape*& active_ref() {
    thread_local GradTape* tape = nullptr;
    return tape;
  }

  std::vector<std::function<void()>> steps_;
  GradTape* prev_;
  bool consumed_ = false;
};

namespace detail {

// True when the op must record an adjoint step for this input set.
inline bool tracing(std::initializer_list<const Tensor*> inputs) {
  GradTape* t = GradTape::active();
  if (!t || t->consumed()) return false;
  for (const Tensor* in : inputs)
    if (in->requires_grad()) return true;
  return false;
}

#if !defined(NDEBUG) || defined(PKCAM_FORCE_FINITE_CHECKS)
inline constexpr bool kFiniteChecks = true;
#else
inline constexpr bool kFiniteChecks = false;
#endif

inline void check_finite(const Tensor& t, const char* op) {
  if constexpr (kFiniteChecks) {
    const double* p = t.data();
    for (std::int64_t i = 0; i < t.numel(); ++i)
      if (!std::isfinite(p[i]))
        throw NumericError(std::string(op) + ": non-finite value at flat index " +
                           std::to_string(i));
  }
}

}  // namespace detail
}  // namespace pkcam
