#pragma once

// Dense NCHW tensors with define-by-run reverse-mode differentiation.
//
// A Tensor is an immutable value handle: ops never modify their inputs and
// always allocate a fresh result buffer. When a Tape is active on the current
// thread and at least one input requires a gradient, the op records a
// backward closure on that tape. Tapes are single-owner; build one per
// forward/backward pass.

#include <concepts>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

namespace crflow {

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class DomainError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

// Raised when an op would produce NaN or Inf.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

template <class T>
concept Real = std::same_as<T, float> || std::same_as<T, double>;

using Shape = std::vector<std::int64_t>;

std::int64_t numel_of(const Shape& shape);
std::string to_string(const Shape& shape);

using NodeId = std::uint64_t;

template <Real T>
class Tensor {
 public:
  Tensor() = default;
  Tensor(Shape shape, std::vector<T> values);

  static Tensor zeros(Shape shape);
  static Tensor full(Shape shape, T value);
  static Tensor scalar(T value);

  const Shape& shape() const { return shape_; }
  std::int64_t rank() const { return static_cast<std::int64_t>(shape_.size()); }
  std::int64_t dim(std::int64_t axis) const;
  std::int64_t numel() const { return data_ ? static_cast<std::int64_t>(data_->size()) : 0; }
  bool defined() const { return static_cast<bool>(data_); }

  std::span<const T> data() const;
  std::shared_ptr<const std::vector<T>> storage() const { return data_; }
  T item() const;
  T at(std::initializer_list<std::int64_t> index) const;

  // In-place access for parameter updates between passes. Never call this on
  // a tensor whose values are captured by a live tape.
  std::span<T> mutable_data();

  bool requires_grad() const { return requires_grad_; }
  NodeId id() const { return id_; }
  // Marks this handle as a differentiable leaf with a fresh node id.
  Tensor& set_requires_grad(bool on);
  // Same values, no gradient tracking.
  Tensor detach() const;

  // Used by op implementations to construct tape-tracked results.
  static Tensor from_node(Shape shape, std::shared_ptr<std::vector<T>> values, NodeId id);

 private:
  Shape shape_;
  std::shared_ptr<std::vector<T>> data_;
  NodeId id_ = 0;
  bool requires_grad_ = false;
};

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;

NodeId next_node_id();

// Accumulates gradients into the buffers of an op's inputs during replay.
template <Real T>
class GradSink {
 public:
  // Gradient buffer of input k, zero-initialized on first use, or nullptr if
  // input k does not require a gradient.
  std::vector<T>* acc(std::size_t k);

 private:
  template <Real>
  friend class Tape;
  std::vector<std::vector<T>*> slots_;
};

template <Real T>
using BackwardFn = std::function<void(std::span<const T> grad_out, GradSink<T>& sink)>;

template <Real T>
class Gradients {
 public:
  // d(loss)/d(t); zeros when t never reached the loss.
  Tensor<T> of(const Tensor<T>& t) const;
  bool contains(const Tensor<T>& t) const;

 private:
  template <Real>
  friend class Tape;
  std::unordered_map<NodeId, std::vector<T>> grads_;
};

template <Real T>
class Tape {
 public:
  // Becomes the active tape of the current thread until destroyed.
  Tape();
  ~Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  static Tape* active();

  void record(NodeId out, std::int64_t out_numel, std::vector<const Tensor<T>*> inputs,
              BackwardFn<T> fn);
  std::size_t size() const { return records_.size(); }

  // Replays the recorded ops in reverse. Consumes the tape.
  Gradients<T> backward(const Tensor<T>& loss);

 private:
  struct Record {
    NodeId out;
    std::int64_t out_numel;
    std::vector<NodeId> inputs;
    std::vector<std::int64_t> input_numel;
    BackwardFn<T> fn;
  };
  std::vector<Record> records_;
  Tape* previous_ = nullptr;
  bool consumed_ = false;
};

// Builds an op result: checks finiteness, then records `fn` on the active tape
// if any input requires a gradient. `fn` may be empty for non-differentiable
// results.
template <Real T>
Tensor<T> make_op(Shape shape, std::vector<T> values, std::vector<const Tensor<T>*> inputs,
                  BackwardFn<T> fn, const char* op_name);
// Same, for results whose buffer is also captured by the backward closure.
template <Real T>
Tensor<T> make_op_shared(Shape shape, std::shared_ptr<std::vector<T>> values,
                         std::vector<const Tensor<T>*> inputs, BackwardFn<T> fn, const char* op_name);

// True when a tape is active and any input requires a gradient.
template <Real T>
bool tracking(std::initializer_list<const Tensor<T>*> inputs);

}  // namespace crflow
