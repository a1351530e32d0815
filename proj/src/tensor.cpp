#include "quadgate/tensor.hpp"

#include <sstream>

namespace qg {

namespace {

std::size_t checked_numel(const std::vector<int>& shape) {
  if (shape.empty()) throw dim_error("tensor shape must have at least one axis");
  std::size_t n = 1;
  for (int d : shape) {
    if (d <= 0) throw dim_error("tensor shape must be positive, got " + shape_str(shape));
    n *= static_cast<std::size_t>(d);
  }
  return n;
}

thread_local Tape t_tape;
thread_local Tape* t_active = &t_tape;

}  // namespace

std::string shape_str(const std::vector<int>& shape) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << "x";
    os << shape[i];
  }
  os << "]";
  return os.str();
}

Tensor Tensor::zeros(std::vector<int> shape, bool requires_grad) {
  std::size_t n = checked_numel(shape);
  Tensor t;
  t.d_ = std::make_shared<Impl>();
  t.d_->shape = std::move(shape);
  t.d_->values.assign(n, 0.0);
  t.d_->requires_grad = requires_grad;
  return t;
}

Tensor Tensor::full(std::vector<int> shape, double value, bool requires_grad) {
  Tensor t = zeros(std::move(shape), requires_grad);
  for (double& v : t.values()) v = value;
  return t;
}

Tensor Tensor::from(std::vector<int> shape, std::vector<double> values, bool requires_grad) {
  std::size_t n = checked_numel(shape);
  if (n != values.size()) {
    throw dim_error("value count " + std::to_string(values.size()) +
                    " does not match shape " + shape_str(shape));
  }
  Tensor t;
  t.d_ = std::make_shared<Impl>();
  t.d_->shape = std::move(shape);
  t.d_->values = std::move(values);
  t.d_->requires_grad = requires_grad;
  return t;
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return from({1}, {value}, requires_grad);
}

double Tensor::item() const {
  if (!defined() || size() != 1) {
    throw contract_error("item() requires a single-element tensor, got " +
                         (defined() ? shape_str(shape()) : std::string("<empty>")));
  }
  return d_->values[0];
}

Tape& Tape::active() { return *t_active; }

void Tape::run_backward() {
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) (*it)();
}

NoGradGuard::NoGradGuard() : prev_(t_active->recording_) { t_active->recording_ = false; }
NoGradGuard::~NoGradGuard() { t_active->recording_ = prev_; }

TapeScope::TapeScope() : prev_(t_active) { t_active = &tape; }
TapeScope::~TapeScope() { t_active = prev_; }

void backward(Tensor loss) {
  if (!loss.defined() || loss.size() != 1) {
    throw contract_error("backward() requires a scalar loss, got " +
                         (loss.defined() ? shape_str(loss.shape()) : std::string("<empty>")));
  }
  if (Tape::active().size() == 0) {
    throw contract_error("backward() on an empty tape; run a recorded forward first");
  }
  loss.ensure_grad()[0] = 1.0;
  Tape::active().run_backward();
}

}  // namespace qg
