#include "crflow/tensor.hpp"

#include <atomic>
#include <cmath>
#include <sstream>

namespace crflow {

std::int64_t numel_of(const Shape& shape) {
  std::int64_t n = 1;
  for (auto d : shape) {
    if (d <= 0) throw ShapeError("non-positive dimension in shape " + to_string(shape));
    n *= d;
  }
  return n;
}

std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

NodeId next_node_id() {
  static std::atomic<NodeId> counter{1};
  return counter.fetch_add(1, std::memory_order_relaxed);
}

template <Real T>
Tensor<T>::Tensor(Shape shape, std::vector<T> values)
    : shape_(std::move(shape)), data_(std::make_shared<std::vector<T>>(std::move(values))) {
  if (numel_of(shape_) != static_cast<std::int64_t>(data_->size())) {
    throw ShapeError("shape " + to_string(shape_) + " does not match " +
                     std::to_string(data_->size()) + " values");
  }
}

template <Real T>
Tensor<T> Tensor<T>::zeros(Shape shape) {
  auto n = numel_of(shape);
  return Tensor(std::move(shape), std::vector<T>(static_cast<std::size_t>(n), T(0)));
}

template <Real T>
Tensor<T> Tensor<T>::full(Shape shape, T value) {
  auto n = numel_of(shape);
  return Tensor(std::move(shape), std::vector<T>(static_cast<std::size_t>(n), value));
}

template <Real T>
Tensor<T> Tensor<T>::scalar(T value) {
  return Tensor(Shape{}, std::vector<T>{value});
}

template <Real T>
std::int64_t Tensor<T>::dim(std::int64_t axis) const {
  if (axis < 0) axis += rank();
  if (axis < 0 || axis >= rank()) throw ShapeError("axis out of range for " + to_string(shape_));
  return shape_[static_cast<std::size_t>(axis)];
}

template <Real T>
std::span<const T> Tensor<T>::data() const {
  if (!data_) return {};
  return {data_->data(), data_->size()};
}

template <Real T>
std::span<T> Tensor<T>::mutable_data() {
  if (!data_) return {};
  return {data_->data(), data_->size()};
}

template <Real T>
T Tensor<T>::item() const {
  if (numel() != 1) throw ShapeError("item() on tensor of shape " + to_string(shape_));
  return (*data_)[0];
}

template <Real T>
T Tensor<T>::at(std::initializer_list<std::int64_t> index) const {
  if (static_cast<std::int64_t>(index.size()) != rank()) throw ShapeError("index rank mismatch");
  std::int64_t flat = 0;
  std::size_t k = 0;
  for (auto i : index) {
    if (i < 0 || i >= shape_[k]) throw ShapeError("index out of range");
    flat = flat * shape_[k] + i;
    ++k;
  }
  return (*data_)[static_cast<std::size_t>(flat)];
}

template <Real T>
Tensor<T>& Tensor<T>::set_requires_grad(bool on) {
  requires_grad_ = on;
  id_ = on ? next_node_id() : 0;
  return *this;
}

template <Real T>
Tensor<T> Tensor<T>::detach() const {
  Tensor out;
  out.shape_ = shape_;
  out.data_ = data_;
  return out;
}

template <Real T>
Tensor<T> Tensor<T>::from_node(Shape shape, std::shared_ptr<std::vector<T>> values, NodeId id) {
  Tensor out;
  out.shape_ = std::move(shape);
  out.data_ = std::move(values);
  out.id_ = id;
  out.requires_grad_ = id != 0;
  return out;
}

// ---------------------------------------------------------------------------

template <Real T>
std::vector<T>* GradSink<T>::acc(std::size_t k) {
  return k < slots_.size() ? slots_[k] : nullptr;
}

template <Real T>
Tensor<T> Gradients<T>::of(const Tensor<T>& t) const {
  if (t.requires_grad()) {
    auto it = grads_.find(t.id());
    if (it != grads_.end()) return Tensor<T>(t.shape(), it->second);
  }
  return Tensor<T>::zeros(t.shape());
}

template <Real T>
bool Gradients<T>::contains(const Tensor<T>& t) const {
  return t.requires_grad() && grads_.count(t.id()) > 0;
}

namespace {
template <Real T>
Tape<T>*& active_tape() {
  thread_local Tape<T>* tape = nullptr;
  return tape;
}
}  // namespace

template <Real T>
Tape<T>::Tape() : previous_(active_tape<T>()) {
  active_tape<T>() = this;
}

template <Real T>
Tape<T>::~Tape() {
  if (active_tape<T>() == this) active_tape<T>() = previous_;
}

template <Real T>
Tape<T>* Tape<T>::active() {
  return active_tape<T>();
}

template <Real T>
void Tape<T>::record(NodeId out, std::int64_t out_numel, std::vector<const Tensor<T>*> inputs,
                     BackwardFn<T> fn) {
  Record r{out, out_numel, {}, {}, std::move(fn)};
  r.inputs.reserve(inputs.size());
  for (const auto* in : inputs) {
    r.inputs.push_back(in && in->requires_grad() ? in->id() : 0);
    r.input_numel.push_back(in ? in->numel() : 0);
  }
  records_.push_back(std::move(r));
}

template <Real T>
Gradients<T> Tape<T>::backward(const Tensor<T>& loss) {
  if (consumed_) throw std::logic_error("tape already replayed");
  if (loss.numel() != 1) throw ShapeError("backward() needs a scalar loss, got " + to_string(loss.shape()));
  consumed_ = true;
  // Stop recording while replaying.
  if (active_tape<T>() == this) active_tape<T>() = previous_;

  Gradients<T> result;
  auto& grads = result.grads_;
  if (!loss.requires_grad()) return result;
  grads[loss.id()] = std::vector<T>{T(1)};

  for (auto it = records_.rbegin(); it != records_.rend(); ++it) {
    auto found = grads.find(it->out);
    if (found == grads.end() || !it->fn) continue;
    // Move the output gradient out so the map can rehash safely below.
    std::vector<T> g_out = std::move(found->second);
    GradSink<T> sink;
    sink.slots_.resize(it->inputs.size(), nullptr);
    for (std::size_t k = 0; k < it->inputs.size(); ++k) {
      NodeId in = it->inputs[k];
      if (in == 0) continue;
      auto& buf = grads[in];
      if (buf.empty()) buf.assign(static_cast<std::size_t>(it->input_numel[k]), T(0));
      sink.slots_[k] = &buf;
    }
    // Pointers into unordered_map values stay valid across inserts.
    it->fn(std::span<const T>(g_out), sink);
    grads[it->out] = std::move(g_out);
    it->fn = nullptr;
  }
  records_.clear();
  return result;
}

template <Real T>
bool tracking(std::initializer_list<const Tensor<T>*> inputs) {
  if (!Tape<T>::active()) return false;
  for (const auto* in : inputs)
    if (in && in->requires_grad()) return true;
  return false;
}

template <Real T>
Tensor<T> make_op(Shape shape, std::vector<T> values, std::vector<const Tensor<T>*> inputs,
                  BackwardFn<T> fn, const char* op_name) {
  return make_op_shared<T>(std::move(shape), std::make_shared<std::vector<T>>(std::move(values)),
                           std::move(inputs), std::move(fn), op_name);
}

template <Real T>
Tensor<T> make_op_shared(Shape shape, std::shared_ptr<std::vector<T>> storage,
                         std::vector<const Tensor<T>*> inputs, BackwardFn<T> fn, const char* op_name) {
  if (numel_of(shape) != static_cast<std::int64_t>(storage->size())) {
    throw ShapeError(std::string(op_name) + ": result size mismatch for shape " + to_string(shape));
  }
  for (const T& v : *storage) {
    if (!std::isfinite(v)) throw NumericError(std::string(op_name) + " produced a non-finite value");
  }
  auto* tape = Tape<T>::active();
  bool track = false;
  if (tape && fn) {
    for (const auto* in : inputs)
      if (in && in->requires_grad()) track = true;
  }
  if (!track) return Tensor<T>::from_node(std::move(shape), std::move(storage), 0);
  NodeId id = next_node_id();
  auto n = static_cast<std::int64_t>(storage->size());
  tape->record(id, n, std::move(inputs), std::move(fn));
  return Tensor<T>::from_node(std::move(shape), std::move(storage), id);
}

template class Tensor<float>;
template class Tensor<double>;
template class GradSink<float>;
template class GradSink<double>;
template class Gradients<float>;
template class Gradients<double>;
template class Tape<float>;
template class Tape<double>;
template bool tracking<float>(std::initializer_list<const Tensor<float>*>);
template bool tracking<double>(std::initializer_list<const Tensor<double>*>);
template Tensor<float> make_op<float>(Shape, std::vector<float>, std::vector<const Tensor<float>*>,
                                      BackwardFn<float>, const char*);
template Tensor<double> make_op<double>(Shape, std::vector<double>, std::vector<const Tensor<double>*>,
                                        BackwardFn<double>, const char*);
template Tensor<float> make_op_shared<float>(Shape, std::shared_ptr<std::vector<float>>,
                                             std::vector<const Tensor<float>*>, BackwardFn<float>, const char*);
template Tensor<double> make_op_shared<double>(Shape, std::shared_ptr<std::vector<double>>,
                                               std::vector<const Tensor<double>*>, BackwardFn<double>,
                                               const char*);

}  // namespace crflow
