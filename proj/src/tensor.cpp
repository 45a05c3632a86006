#include "stlab/tensor.hpp"

#include <cmath>
#include <numeric>
#include <sstream>

#include "stlab/error.hpp"

namespace stlab {

namespace {

thread_local Tape* g_active_tape = nullptr;

bool all_finite(const std::vector<double>& v) {
  for (double x : v) {
    if (!std::isfinite(x)) return false;
  }
  return true;
}

}  // namespace

std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

Tensor::Tensor(Shape shape, std::vector<double> values, bool requires_grad) {
  for (auto extent : shape) {
    if (extent == 0) throw ShapeError("tensor extents must be positive, got " + shape_str(shape));
  }
  if (shape_numel(shape) != values.size()) {
    throw ShapeError("tensor of shape " + shape_str(shape) + " needs " +
                     std::to_string(shape_numel(shape)) + " values, got " +
                     std::to_string(values.size()));
  }
  node_ = std::make_shared<detail::Node>();
  node_->shape = std::move(shape);
  node_->value = std::move(values);
  node_->requires_grad = requires_grad;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  auto n = shape_numel(shape);
  return Tensor(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  auto n = shape_numel(shape);
  return Tensor(std::move(shape), std::vector<double>(n, value), requires_grad);
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return Tensor(Shape{1}, {value}, requires_grad);
}

Tensor Tensor::wrap(std::shared_ptr<detail::Node> node) {
  Tensor t;
  t.node_ = std::move(node);
  return t;
}

const Shape& Tensor::shape() const {
  if (!node_) throw Error("use of an undefined tensor");
  return node_->shape;
}

std::size_t Tensor::dim(std::size_t axis) const {
  const auto& s = shape();
  if (axis >= s.size()) {
    throw ShapeError("axis " + std::to_string(axis) + " out of range for shape " + shape_str(s));
  }
  return s[axis];
}

std::size_t Tensor::size() const { return shape_numel(shape()); }

std::span<const double> Tensor::values() const {
  shape();
  return node_->value;
}

std::span<double> Tensor::values_mut() {
  shape();
  if (node_->tape_id) throw Error("cannot mutate a recorded tensor (op " + node_->op + ")");
  return node_->value;
}

double Tensor::item() const {
  if (size() != 1) throw ShapeError("item() on non-scalar tensor " + shape_str(shape()));
  return node_->value[0];
}

double Tensor::at(std::initializer_list<std::size_t> index) const {
  const auto& s = shape();
  if (index.size() != s.size()) throw ShapeError("index rank mismatch for " + shape_str(s));
  std::size_t flat = 0;
  std::size_t axis = 0;
  for (auto i : index) {
    if (i >= s[axis]) throw ShapeError("index out of range for " + shape_str(s));
    flat = flat * s[axis] + i;
    ++axis;
  }
  return node_->value[flat];
}

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }
bool Tensor::has_grad() const { return node_ && !node_->grad.empty(); }

std::span<const double> Tensor::grad() const {
  if (!has_grad()) throw Error("tensor has no gradient buffer");
  return node_->grad;
}

std::span<double> Tensor::grad_mut() {
  shape();
  return node_->grad_buffer();
}

void Tensor::zero_grad() {
  if (node_ && !node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
}

void Tensor::clear_grad() {
  if (node_) node_->grad.clear();
}

std::optional<std::size_t> Tensor::tape_id() const { return node_ ? node_->tape_id : std::nullopt; }

const std::string& Tensor::op_name() const {
  shape();
  return node_->op;
}

Tensor Tensor::detach() const { return Tensor(shape(), node_->value, false); }

// ---------------------------------------------------------------------------

Tape* Tape::active() { return g_active_tape; }

std::size_t Tape::append(std::shared_ptr<detail::Node> out,
                         std::vector<std::shared_ptr<detail::Node>> inputs,
                         detail::BackwardFn fn) {
  if (consumed_) throw Error("tape already consumed by backward(); call reset()");
  auto id = records_.size();
  out->tape_id = id;
  records_.push_back(Record{std::move(out), std::move(inputs), std::move(fn)});
  return id;
}

void Tape::backward(const Tensor& loss) {
  if (consumed_) throw Error("backward() called twice on the same tape without reset()");
  if (!loss.defined() || loss.size() != 1) {
    throw ShapeError("backward() needs a scalar loss, got " +
                     (loss.defined() ? shape_str(loss.shape()) : std::string("undefined")));
  }
  if (!std::isfinite(loss.item())) {
    for (const auto& r : records_) {
      if (!all_finite(r.out->value)) {
        throw NumericError("non-finite value first produced by node #" +
                           std::to_string(*r.out->tape_id) + " (" + r.out->op + ")");
      }
    }
    throw NumericError("non-finite loss");
  }
  if (!loss.node()->tape_id || *loss.node()->tape_id >= records_.size() ||
      records_[*loss.node()->tape_id].out.get() != loss.node()) {
    throw Error("loss was not recorded on this tape");
  }
  consumed_ = true;
  loss.node()->grad_buffer()[0] += 1.0;

  std::vector<detail::Node*> inputs;
  for (auto it = records_.rbegin(); it != records_.rend(); ++it) {
    auto& out = *it->out;
    if (out.grad.empty()) continue;
    if (!all_finite(out.grad)) {
      throw NumericError("non-finite gradient at node #" + std::to_string(*out.tape_id) + " (" +
                         out.op + ")");
    }
    inputs.clear();
    for (auto& in : it->inputs) inputs.push_back(in.get());
    it->fn(out, inputs);
  }
}

void Tape::reset() {
  for (auto& r : records_) r.out->tape_id.reset();
  records_.clear();
  consumed_ = false;
}

TapeScope::TapeScope(Tape& tape) : previous_(g_active_tape) { g_active_tape = &tape; }
TapeScope::~TapeScope() { g_active_tape = previous_; }

namespace detail {

namespace {

Tensor record_impl(std::string op, Shape shape, std::vector<double> value,
                   std::span<const Tensor> inputs, BackwardFn fn) {
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  node->op = std::move(op);
  Tape* tape = Tape::active();
  bool needs = false;
  for (const auto& in : inputs) needs = needs || in.requires_grad();
  if (tape && needs) {
    node->requires_grad = true;
    std::vector<std::shared_ptr<Node>> parents;
    parents.reserve(inputs.size());
    for (const auto& in : inputs) parents.push_back(in.node_ptr());
    tape->append(node, std::move(parents), std::move(fn));
  }
  return Tensor::wrap(std::move(node));
}

}  // namespace

Tensor record(std::string op, Shape shape, std::vector<double> value,
              std::initializer_list<Tensor> inputs, BackwardFn fn) {
  return record_impl(std::move(op), std::move(shape), std::move(value),
                     std::span<const Tensor>(inputs.begin(), inputs.size()), std::move(fn));
}

Tensor record(std::string op, Shape shape, std::vector<double> value,
              const std::vector<Tensor>& inputs, BackwardFn fn) {
  return record_impl(std::move(op), std::move(shape), std::move(value), inputs, std::move(fn));
}

}  // namespace detail

}  // namespace stlab
