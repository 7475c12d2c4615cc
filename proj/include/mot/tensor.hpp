#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <new>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

namespace mot {

using Shape = std::vector<std::size_t>;

// Error hierarchy shared by the whole library.
struct DimensionError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};
struct DomainError : std::domain_error {
  using std::domain_error::domain_error;
};
struct IndexError : std::out_of_range {
  using std::out_of_range::out_of_range;
};
struct ContractError : std::logic_error {
  using std::logic_error::logic_error;
};
struct ConfigError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};
struct FormatError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

inline std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

namespace detail {

inline std::uint64_t next_sequence() {
  static std::atomic<std::uint64_t> counter{0};
  return ++counter;
}

inline bool& grad_mode_flag() {
  thread_local bool enabled = true;
  return enabled;
}

}  // namespace detail

inline bool grad_enabled() { return detail::grad_mode_flag(); }

// Disables tape recording for the current thread while alive.
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_mode_flag()) {
    detail::grad_mode_flag() = false;
  }
  ~NoGradGuard() { detail::grad_mode_flag() = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

/// Allocator with cache-line alignment. Eigen's vectorized kernels peel
/// differently depending on where a buffer starts, so a fixed alignment keeps
/// results independent of heap addresses.
template <typename T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::size_t kAlignment = 64;

  AlignedAllocator() = default;
  template <typename U>
  AlignedAllocator(const AlignedAllocator<U>&) {}

  T* allocate(std::size_t n) {
    return static_cast<T*>(::operator new(n * sizeof(T), std::align_val_t{kAlignment}));
  }
  void deallocate(T* p, std::size_t) { ::operator delete(p, std::align_val_t{kAlignment}); }

  template <typename U>
  bool operator==(const AlignedAllocator<U>&) const { return true; }
};

template <typename T>
using Buffer = std::vector<T, AlignedAllocator<T>>;

template <typename T>
struct Node {
  Shape shape;
  Buffer<T> data;
  Buffer<T> grad;
  bool requires_grad = false;
  std::uint64_t sequence = 0;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward_fn;

  Buffer<T>& ensure_grad() {
    if (grad.empty()) grad.assign(data.size(), T(0));
    return grad;
  }
};

/// Dense row-major tensor with optional reverse-mode gradient tracking.
///
/// A Tensor is a handle: copies share one underlying buffer and gradient.
/// Use clone() for an independent copy.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  Tensor(Shape shape, std::initializer_list<T> data, bool requires_grad = false)
      : Tensor(std::move(shape), Buffer<T>(data), requires_grad) {}

  Tensor(Shape shape, const std::vector<T>& data, bool requires_grad = false)
      : Tensor(std::move(shape), Buffer<T>(data.begin(), data.end()), requires_grad) {}

  Tensor(Shape shape, Buffer<T> data, bool requires_grad = false)
      : node_(std::make_shared<Node<T>>()) {
    if (shape_numel(shape) != data.size()) {
      throw DimensionError("tensor shape " + mot::shape_string(shape) +
                           " does not match " + std::to_string(data.size()) +
                           " values");
    }
    for (auto d : shape) {
      if (d == 0) {
        throw DimensionError("tensor dimensions must be positive, got " +
                             mot::shape_string(shape));
      }
    }
    node_->shape = std::move(shape);
    node_->data = std::move(data);
    node_->requires_grad = requires_grad;
    node_->sequence = detail::next_sequence();
  }

  explicit Tensor(std::shared_ptr<Node<T>> node) : node_(std::move(node)) {}

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    const auto n = shape_numel(shape);
    return Tensor(std::move(shape), Buffer<T>(n, T(0)), requires_grad);
  }

  static Tensor full(Shape shape, T value, bool requires_grad = false) {
    const auto n = shape_numel(shape);
    return Tensor(std::move(shape), Buffer<T>(n, value), requires_grad);
  }

  static Tensor scalar(T value, bool requires_grad = false) {
    return Tensor(Shape{1}, Buffer<T>{value}, requires_grad);
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t numel() const { return node_->data.size(); }
  std::string shape_string() const { return mot::shape_string(shape()); }

  std::span<const T> data() const { return node_->data; }
  // Direct write access, intended for leaves (optimizer updates, probes).
  std::span<T> mutable_data() { return node_->data; }
  const Buffer<T>& values() const { return node_->data; }

  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const T> grad() const { return node_->grad; }
  std::span<T> mutable_grad() { return node_->ensure_grad(); }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool value) { node_->requires_grad = value; }
  void zero_grad() { node_->grad.clear(); }

  T item() const {
    if (numel() != 1) {
      throw ContractError("item() on tensor of shape " + shape_string());
    }
    return node_->data[0];
  }

  T at(std::initializer_list<std::size_t> index) const {
    return node_->data[offset(index)];
  }

  std::size_t offset(std::initializer_list<std::size_t> index) const {
    if (index.size() != rank()) {
      throw DimensionError("index rank mismatch for " + shape_string());
    }
    std::size_t flat = 0;
    std::size_t i = 0;
    for (auto v : index) {
      if (v >= node_->shape[i]) {
        throw IndexError("index out of range for " + shape_string());
      }
      flat = flat * node_->shape[i] + v;
      ++i;
    }
    return flat;
  }

  Tensor clone(bool requires_grad = false) const {
    return Tensor(shape(), node_->data, requires_grad);
  }

  Tensor detach() const { return clone(false); }

  const std::shared_ptr<Node<T>>& node() const { return node_; }

 private:
  std::shared_ptr<Node<T>> node_;
};

/// Ordered record of the operations reachable from a root, newest first.
template <typename T>
class Tape {
 public:
  using NodePtr = std::shared_ptr<Node<T>>;

  static Tape collect(const Tensor<T>& root) {
    Tape tape;
    std::unordered_set<const Node<T>*> seen;
    std::vector<NodePtr> stack{root.node()};
    seen.insert(root.node().get());
    while (!stack.empty()) {
      NodePtr node = std::move(stack.back());
      stack.pop_back();
      if (node->backward_fn) tape.ops_.push_back(node);
      for (const auto& in : node->inputs) {
        if (in->requires_grad && seen.insert(in.get()).second) {
          stack.push_back(in);
        }
      }
    }
    // Inputs always carry a smaller sequence number than their outputs.
    std::sort(tape.ops_.begin(), tape.ops_.end(),
              [](const NodePtr& a, const NodePtr& b) {
                return a->sequence > b->sequence;
              });
    return tape;
  }

  const std::vector<NodePtr>& operations() const { return ops_; }
  std::size_t size() const { return ops_.size(); }

  void replay() {
    for (auto& node : ops_) {
      if (node->grad.empty()) continue;
      node->backward_fn(*node);
    }
  }

  // Drops graph edges so intermediate buffers can be released.
  void release() {
    for (auto& node : ops_) {
      node->backward_fn = nullptr;
      node->inputs.clear();
    }
    ops_.clear();
  }

 private:
  std::vector<NodePtr> ops_;
};

/// Populates grad on every tracked tensor reachable from a scalar loss.
template <typename T>
void backward(const Tensor<T>& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    throw ContractError("backward requires a scalar loss, got shape " +
                        (loss.defined() ? loss.shape_string() : "<undefined>"));
  }
  if (!loss.requires_grad()) {
    throw ContractError("backward called on a tensor that is not on the tape");
  }
  auto tape = Tape<T>::collect(loss);
  loss.node()->ensure_grad()[0] += T(1);
  tape.replay();
  tape.release();
}

namespace detail {

template <typename T>
void check_finite([[maybe_unused]] const Node<T>& node) {
#ifndef NDEBUG
  for (const T& v : node.data) {
    if (!std::isfinite(v)) {
      throw NumericError(std::string("non-finite value produced by ") +
                         node.op + " with shape " + shape_string(node.shape));
    }
  }
#endif
}

// Builds an op result; records it on the tape when any input is tracked.
template <typename T>
Tensor<T> make_result(const char* op, Shape shape, Buffer<T> data,
                      std::initializer_list<const Tensor<T>*> inputs,
                      std::function<void(Node<T>&)> backward_fn) {
  auto node = std::make_shared<Node<T>>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  node->op = op;
  node->sequence = next_sequence();
  check_finite(*node);
  bool tracked = false;
  if (grad_enabled()) {
    for (const auto* in : inputs) tracked = tracked || in->requires_grad();
  }
  if (tracked) {
    node->requires_grad = true;
    for (const auto* in : inputs) node->inputs.push_back(in->node());
    node->backward_fn = std::move(backward_fn);
  }
  return Tensor<T>(std::move(node));
}

// Gradient buffer of an input, or nullptr when that input is untracked.
template <typename T>
T* grad_of(const std::shared_ptr<Node<T>>& node) {
  return node->requires_grad ? node->ensure_grad().data() : nullptr;
}

}  // namespace detail

}  // namespace mot
