#pragma once

#include <Eigen/Dense>

#include <atomic>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace groundseq {

using Index = Eigen::Index;
using Shape = std::vector<Index>;

template <typename Scalar>
using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Raised when an op produces NaN or Inf.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class TapeError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

inline std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

inline Index shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), Index{1}, std::multiplies<>());
}

#ifndef GROUNDSEQ_CHECK_FINITE
#define GROUNDSEQ_CHECK_FINITE 1
#endif

template <typename Scalar>
struct TensorNode {
  Shape shape;
  Matrix<Scalar> value;  // leading axes collapsed into rows, last axis is columns
  Matrix<Scalar> grad;
  bool requires_grad = false;
  bool grad_live = false;
  std::uint64_t tape_id = 0;
};

template <typename Scalar>
class Tape;

/// Dense row-major array that can take part in reverse-mode differentiation.
///
/// Storage is always a 2-D Eigen matrix: an n-d shape maps to
/// rows = product of all but the last extent, cols = last extent. A tensor
/// is a handle; copies share the same node.
template <typename Scalar>
class Tensor {
 public:
  using Node = TensorNode<Scalar>;

  Tensor() : node_(std::make_shared<Node>()) { node_->shape = {0}; }

  explicit Tensor(Matrix<Scalar> value) : node_(std::make_shared<Node>()) {
    node_->shape = {value.rows(), value.cols()};
    node_->value = std::move(value);
  }

  Tensor(Shape shape, Matrix<Scalar> value) : node_(std::make_shared<Node>()) {
    if (shape_numel(shape) != value.size()) {
      throw ShapeError("tensor shape " + shape_string(shape) + " does not match " +
                       std::to_string(value.size()) + " values");
    }
    const auto [r, c] = matrix_dims(shape);
    value.resize(r, c);
    node_->shape = std::move(shape);
    node_->value = std::move(value);
  }

  static Tensor zeros(Shape shape) {
    const auto [r, c] = matrix_dims(shape);
    return Tensor(std::move(shape), Matrix<Scalar>::Zero(r, c));
  }

  static Tensor from_values(Shape shape, const std::vector<Scalar>& values) {
    if (shape_numel(shape) != static_cast<Index>(values.size())) {
      throw ShapeError("tensor shape " + shape_string(shape) + " does not match " +
                       std::to_string(values.size()) + " values");
    }
    const auto [r, c] = matrix_dims(shape);
    Matrix<Scalar> m(r, c);
    std::copy(values.begin(), values.end(), m.data());
    return Tensor(std::move(shape), std::move(m));
  }

  static Tensor scalar(Scalar v) {
    Matrix<Scalar> m(1, 1);
    m(0, 0) = v;
    return Tensor(Shape{1}, std::move(m));
  }

  /// Leaf tensor that accumulates gradients.
  static Tensor parameter(Matrix<Scalar> value) {
    Tensor t(std::move(value));
    t.node_->requires_grad = true;
    return t;
  }

  static Tensor parameter(Shape shape, Matrix<Scalar> value) {
    Tensor t(std::move(shape), std::move(value));
    t.node_->requires_grad = true;
    return t;
  }

  const Shape& shape() const { return node_->shape; }
  Index rank() const { return static_cast<Index>(node_->shape.size()); }
  Index rows() const { return node_->value.rows(); }
  Index cols() const { return node_->value.cols(); }
  Index numel() const { return node_->value.size(); }
  bool is_scalar() const { return numel() == 1; }

  const Matrix<Scalar>& value() const { return node_->value; }
  /// Direct mutation is reserved for parameter initialization and optimizer updates.
  Matrix<Scalar>& mutable_value() { return node_->value; }
  Scalar item() const {
    if (!is_scalar()) throw ShapeError("item() on non-scalar tensor " + shape_string(shape()));
    return node_->value(0, 0);
  }
  const Scalar* data() const { return node_->value.data(); }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool on) { node_->requires_grad = on; }
  bool has_grad() const { return node_->grad.size() == node_->value.size() && node_->grad.size() > 0; }
  const Matrix<Scalar>& grad() const { return node_->grad; }
  void zero_grad() { node_->grad = Matrix<Scalar>::Zero(rows(), cols()); }
  std::uint64_t tape_id() const { return node_->tape_id; }

  /// Same values, no gradient history.
  Tensor detach() const { return Tensor(shape(), node_->value); }

  const std::shared_ptr<Node>& node() const { return node_; }

  static std::pair<Index, Index> matrix_dims(const Shape& shape) {
    if (shape.empty()) return {1, 1};
    for (Index e : shape) {
      if (e < 0) throw ShapeError("negative extent in shape " + shape_string(shape));
    }
    const Index cols = shape.back();
    const Index rows = shape_numel(Shape(shape.begin(), shape.end() - 1));
    return {rows, cols};
  }

 private:
  std::shared_ptr<Node> node_;
};

/// Single-use record of differentiable ops for one forward pass.
///
/// Ops record only while a tape is installed with TapeScope and at least one
/// input requires a gradient. Without an active tape everything runs in
/// inference mode.
template <typename Scalar>
class Tape {
 public:
  using NodePtr = std::shared_ptr<TensorNode<Scalar>>;

  Tape() : id_(next_id()) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  std::uint64_t id() const { return id_; }
  bool consumed() const { return consumed_; }
  std::size_t size() const { return entries_.size(); }

  void record(std::vector<NodePtr> touched, const NodePtr& output, std::function<void()> backward_fn) {
    if (consumed_) throw TapeError("recording onto a consumed tape");
    output->requires_grad = true;
    output->tape_id = id_;
    touched.push_back(output);
    entries_.push_back(Entry{std::move(touched), output, std::move(backward_fn)});
  }

  /// Populates grad on every requires_grad tensor recorded here; consumes the tape.
  void backward(const Tensor<Scalar>& loss) {
    if (consumed_) throw TapeError("backward called twice on the same tape");
    if (!loss.is_scalar()) {
      throw TapeError("backward needs a scalar loss, got shape " + shape_string(loss.shape()));
    }
    if (loss.tape_id() != id_) throw TapeError("loss was not recorded on this tape");

    for (auto& entry : entries_) {
      for (auto& node : entry.touched) {
        if (!node->requires_grad) continue;
        node->grad.setZero(node->value.rows(), node->value.cols());
        node->grad_live = false;
      }
    }
    auto& root = loss.node();
    root->grad.setOnes(1, 1);
    root->grad_live = true;

    for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
      if (!it->output->grad_live) continue;
      it->backward_fn();
      for (auto& node : it->touched) {
        if (node->requires_grad) node->grad_live = true;
      }
    }
    for (auto& entry : entries_) {
      for (auto& node : entry.touched) node->grad_live = false;
    }
    entries_.clear();
    consumed_ = true;
  }

  static Tape* active() { return active_; }

 private:
  template <typename>
  friend class TapeScope;

  struct Entry {
    std::vector<NodePtr> touched;
    NodePtr output;
    std::function<void()> backward_fn;
  };

  static std::uint64_t next_id() {
    static std::atomic<std::uint64_t> counter{1};
    return counter.fetch_add(1);
  }

  std::uint64_t id_;
  bool consumed_ = false;
  std::vector<Entry> entries_;
  inline static thread_local Tape* active_ = nullptr;
};

/// Installs a tape as the active one for the current thread.
template <typename Scalar>
class TapeScope {
 public:
  explicit TapeScope(Tape<Scalar>& tape) : previous_(Tape<Scalar>::active_) { Tape<Scalar>::active_ = &tape; }
  ~TapeScope() { Tape<Scalar>::active_ = previous_; }
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape<Scalar>* previous_;
};

/// Runs reverse mode on the active tape.
template <typename Scalar>
void backward(const Tensor<Scalar>& loss) {
  Tape<Scalar>* tape = Tape<Scalar>::active();
  if (tape == nullptr) throw TapeError("backward without an active tape");
  tape->backward(loss);
}

namespace detail {

template <typename Scalar>
void check_finite(const Matrix<Scalar>& m, const char* op) {
#if GROUNDSEQ_CHECK_FINITE
  if (!m.allFinite()) throw NumericError(std::string("non-finite value produced by ") + op);
#else
  (void)m;
  (void)op;
#endif
}

template <typename Scalar>
Tensor<Scalar> make_result(Shape shape, Matrix<Scalar> value, const char* op) {
  check_finite(value, op);
  return Tensor<Scalar>(std::move(shape), std::move(value));
}

/// Records `fn` when a tape is active and any input needs a gradient.
template <typename Scalar, typename Fn>
void record(const Tensor<Scalar>& out, std::initializer_list<Tensor<Scalar>> inputs, Fn&& fn) {
  Tape<Scalar>* tape = Tape<Scalar>::active();
  if (tape == nullptr) return;
  bool any = false;
  for (const auto& t : inputs) any = any || t.requires_grad();
  if (!any) return;
  std::vector<std::shared_ptr<TensorNode<Scalar>>> touched;
  touched.reserve(inputs.size());
  for (const auto& t : inputs) touched.push_back(t.node());
  tape->record(std::move(touched), out.node(), std::function<void()>(std::forward<Fn>(fn)));
}

template <typename Scalar, typename Fn>
void record(const Tensor<Scalar>& out, const std::vector<Tensor<Scalar>>& inputs, Fn&& fn) {
  Tape<Scalar>* tape = Tape<Scalar>::active();
  if (tape == nullptr) return;
  bool any = false;
  for (const auto& t : inputs) any = any || t.requires_grad();
  if (!any) return;
  std::vector<std::shared_ptr<TensorNode<Scalar>>> touched;
  touched.reserve(inputs.size());
  for (const auto& t : inputs) touched.push_back(t.node());
  tape->record(std::move(touched), out.node(), std::function<void()>(std::forward<Fn>(fn)));
}

}  // namespace detail
}  // namespace groundseq
