#pragma once

// Dense row-major f64 tensors with tape-based reverse-mode differentiation.
//
// A Tensor is a cheap handle onto an immutable value node. Operations executed
// while a Tape is active (see TapeScope) and touching at least one
// gradient-requiring input are appended to that tape; Tape::backward then
// walks the records in reverse append order exactly once.

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace stlab {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;  // empty until first accumulation
  bool requires_grad = false;
  std::string op = "leaf";
  std::optional<std::size_t> tape_id;

  std::vector<double>& grad_buffer() {
    if (grad.empty()) grad.assign(value.size(), 0.0);
    return grad;
  }
};

using BackwardFn = std::function<void(Node& out, std::span<Node* const> inputs)>;

}  // namespace detail

class Tensor {
 public:
  Tensor() = default;
  Tensor(Shape shape, std::vector<double> values, bool requires_grad = false);

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t size() const;

  std::span<const double> values() const;
  // Only leaves may be written in place; recorded values are immutable.
  std::span<double> values_mut();
  double item() const;
  double at(std::initializer_list<std::size_t> index) const;

  bool requires_grad() const;
  bool has_grad() const;
  std::span<const double> grad() const;
  std::span<double> grad_mut();
  void zero_grad();
  void clear_grad();

  std::optional<std::size_t> tape_id() const;
  const std::string& op_name() const;

  // Copy of the value with no history and no gradient requirement.
  Tensor detach() const;

  detail::Node* node() const { return node_.get(); }
  const std::shared_ptr<detail::Node>& node_ptr() const { return node_; }
  static Tensor wrap(std::shared_ptr<detail::Node> node);

 private:
  std::shared_ptr<detail::Node> node_;
};

class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  std::size_t size() const { return records_.size(); }
  bool consumed() const { return consumed_; }

  // Seeds d(loss)/d(loss) = 1 and propagates to every recorded input.
  // Throws on non-scalar or non-finite loss, on a non-finite gradient, and
  // when called a second time without reset().
  void backward(const Tensor& loss);
  void reset();

  std::size_t append(std::shared_ptr<detail::Node> out,
                     std::vector<std::shared_ptr<detail::Node>> inputs,
                     detail::BackwardFn fn);

  static Tape* active();

 private:
  friend class TapeScope;
  struct Record {
    std::shared_ptr<detail::Node> out;
    std::vector<std::shared_ptr<detail::Node>> inputs;
    detail::BackwardFn fn;
  };
  std::vector<Record> records_;
  bool consumed_ = false;
};

// Makes `tape` the recording target for the current thread until destruction.
class TapeScope {
 public:
  explicit TapeScope(Tape& tape);
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape* previous_;
};

namespace detail {

// Wraps a freshly computed value into a Tensor, recording it on the active
// tape when any input requires a gradient.
Tensor record(std::string op, Shape shape, std::vector<double> value,
              std::initializer_list<Tensor> inputs, BackwardFn fn);
Tensor record(std::string op, Shape shape, std::vector<double> value,
              const std::vector<Tensor>& inputs, BackwardFn fn);

}  // namespace detail

}  // namespace stlab
