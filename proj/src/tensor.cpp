#include "mma/tensor.hpp"

#include <algorithm>
#include <map>
#include <mutex>
#include <sstream>
#include <unordered_set>

#include "mma/errors.hpp"

namespace mma {

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t extent : shape) n *= extent;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) out << (i ? "x" : "") << shape[i];
  out << ']';
  return out.str();
}

Tensor::Tensor(Shape shape, bool requires_grad) : impl_(std::make_shared<Impl>()) {
  for (std::size_t extent : shape) {
    if (extent == 0) throw ShapeMismatch("zero extent in shape " + shape_str(shape));
  }
  impl_->data.assign(shape_numel(shape), 0.0);
  impl_->shape = std::move(shape);
  impl_->requires_grad = requires_grad;
}

Tensor::Tensor(Shape shape, std::vector<double> values, bool requires_grad)
    : impl_(std::make_shared<Impl>()) {
  for (std::size_t extent : shape) {
    if (extent == 0) throw ShapeMismatch("zero extent in shape " + shape_str(shape));
  }
  if (shape_numel(shape) != values.size()) {
    throw ShapeMismatch(shape_str(shape) + " needs " + std::to_string(shape_numel(shape)) +
                        " values, got " + std::to_string(values.size()));
  }
  impl_->shape = std::move(shape);
  impl_->data = std::move(values);
  impl_->requires_grad = requires_grad;
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return Tensor({1}, {value}, requires_grad);
}

Tensor Tensor::from_rows(std::initializer_list<std::initializer_list<double>> rows,
                         bool requires_grad) {
  const std::size_t r = rows.size();
  const std::size_t c = r ? rows.begin()->size() : 0;
  std::vector<double> values;
  values.reserve(r * c);
  for (const auto& row : rows) {
    if (row.size() != c) throw ShapeMismatch("ragged rows");
    values.insert(values.end(), row.begin(), row.end());
  }
  return Tensor({r, c}, std::move(values), requires_grad);
}

const Shape& Tensor::shape() const { return impl_->shape; }

std::size_t Tensor::dim(std::size_t axis) const {
  if (axis >= rank()) throw ShapeMismatch("axis out of range for " + shape_str(shape()));
  return impl_->shape[axis];
}

std::size_t Tensor::numel() const { return impl_->data.size(); }

std::size_t Tensor::rows() const { return rank() == 1 ? 1 : numel() / impl_->shape.back(); }

std::size_t Tensor::cols() const { return impl_->shape.back(); }

std::span<double> Tensor::data() { return impl_->data; }
std::span<const double> Tensor::data() const { return impl_->data; }

double Tensor::item() const {
  if (numel() != 1) throw NotScalar("tensor of shape " + shape_str(shape()) + " is not a scalar");
  return impl_->data[0];
}

bool Tensor::requires_grad() const { return impl_->requires_grad; }

void Tensor::set_requires_grad(bool on) {
  impl_->requires_grad = on;
  if (!on) impl_->grad.clear();
}

bool Tensor::has_grad() const { return !impl_->grad.empty(); }

std::span<double> Tensor::grad() const {
  if (impl_->grad.empty()) impl_->grad.assign(impl_->data.size(), 0.0);
  return impl_->grad;
}

void Tensor::zero_grad() const { std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0); }

Tensor Tensor::clone() const {
  Tensor out(impl_->shape, impl_->data, false);
  return out;
}

// ---------------------------------------------------------------------------

namespace {

thread_local Tape* g_active = nullptr;

std::mutex g_fault_mutex;
std::map<std::string, double, std::less<>> g_faults;

double fault_factor(std::string_view op) {
  std::lock_guard lock(g_fault_mutex);
  auto it = g_faults.find(op);
  return it == g_faults.end() ? 1.0 : it->second;
}

}  // namespace

Tape* active_tape() { return g_active; }

TapeScope::TapeScope(Tape& tape) : previous_(g_active) { g_active = &tape; }
TapeScope::~TapeScope() { g_active = previous_; }

NoGradScope::NoGradScope() : previous_(g_active) { g_active = nullptr; }
NoGradScope::~NoGradScope() { g_active = previous_; }

void Tape::record(std::string_view op, std::vector<Tensor> inputs, Tensor output, BackwardFn fn) {
  const double factor = fault_factor(op);
  if (factor != 1.0) {
    fn = [inner = std::move(fn), output, factor]() {
      for (double& g : output.grad()) g *= factor;
      inner();
    };
  }
  records_.push_back(Record{std::string(op), std::move(inputs), std::move(output), std::move(fn)});
}

void Tape::backward(const Tensor& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    throw NotScalar("backward needs a single-element loss, got " +
                    (loss.defined() ? shape_str(loss.shape()) : std::string("undefined")));
  }
  if (!loss.requires_grad()) return;
  loss.grad()[0] += 1.0;
  for (auto it = records_.rbegin(); it != records_.rend(); ++it) {
    if (!it->output.has_grad()) continue;
    it->backward();
  }
}

void Tape::clear() {
  for (const Record& r : records_) {
    r.output.zero_grad();
    for (const Tensor& t : r.inputs) t.zero_grad();
  }
  records_.clear();
}

void backward(const Tensor& loss, Tape& tape) { tape.backward(loss); }

namespace debug {

void set_backward_fault(std::string_view op, double factor) {
  std::lock_guard lock(g_fault_mutex);
  g_faults[std::string(op)] = factor;
}

void clear_backward_faults() {
  std::lock_guard lock(g_fault_mutex);
  g_faults.clear();
}

}  // namespace debug

}  // namespace mma
