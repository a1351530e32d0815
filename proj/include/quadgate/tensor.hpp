#pragma once

#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "quadgate/error.hpp"

namespace qg {

// Dense row-major tensor of 64-bit floats with an optional gradient buffer.
// A Tensor is a cheap handle onto shared storage, so accessors are const on
// the handle while the payload stays mutable; ops treat values as immutable
// once produced and only accumulate into gradients.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(std::vector<int> shape, bool requires_grad = false);
  static Tensor full(std::vector<int> shape, double value, bool requires_grad = false);
  static Tensor from(std::vector<int> shape, std::vector<double> values,
                     bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return d_ != nullptr; }
  const std::vector<int>& shape() const { return d_->shape; }
  int rank() const { return static_cast<int>(d_->shape.size()); }
  int dim(int axis) const { return d_->shape[static_cast<std::size_t>(axis)]; }
  int size() const { return static_cast<int>(d_->values.size()); }

  std::vector<double>& values() const { return d_->values; }
  double* data() const { return d_->values.data(); }

  bool requires_grad() const { return d_->requires_grad; }
  void set_requires_grad(bool rg) const { d_->requires_grad = rg; }

  bool has_grad() const { return !d_->grad.empty(); }
  std::vector<double>& grad() const { return d_->grad; }

  // Allocates a zero gradient buffer on first use.
  std::vector<double>& ensure_grad() const {
    if (d_->grad.empty()) d_->grad.assign(d_->values.size(), 0.0);
    return d_->grad;
  }
  void drop_grad() const { d_->grad.clear(); }

  // Value of a single-element tensor.
  double item() const;

  bool same_storage(const Tensor& other) const { return d_ == other.d_; }

 private:
  struct Impl {
    std::vector<int> shape;
    std::vector<double> values;
    std::vector<double> grad;
    bool requires_grad = false;
  };
  std::shared_ptr<Impl> d_;
};

std::string shape_str(const std::vector<int>& shape);

// Ordered record of executed operations. Ops append their backward rule as
// they run, so the record is topologically sorted by construction; backward
// walks it exactly once in reverse. One tape per thread; rebuilt per forward.
class Tape {
 public:
  static Tape& active();

  bool recording() const { return recording_; }
  void push(std::function<void()> backward_rule) {
    nodes_.push_back(std::move(backward_rule));
  }
  void clear() { nodes_.clear(); }
  std::size_t size() const { return nodes_.size(); }

  // Runs all recorded backward rules in reverse order.
  void run_backward();

 private:
  friend struct NoGradGuard;
  friend struct TapeScope;
  std::vector<std::function<void()>> nodes_;
  bool recording_ = true;
};

// Disables recording on the active tape for the guard's lifetime.
struct NoGradGuard {
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

// Swaps in a fresh tape for an isolated forward/backward, e.g. inside the
// finite-difference checker. Restores the previous tape on destruction.
struct TapeScope {
  TapeScope();
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

  Tape tape;

 private:
  Tape* prev_;
};

// Seeds d(loss)/d(loss) = 1 and applies the chain rule over the active tape
// in reverse topological order. Gradients accumulate (+=) on shared inputs.
void backward(Tensor loss);

}  // namespace qg
