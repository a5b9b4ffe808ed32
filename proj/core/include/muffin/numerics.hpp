#pragma once

// Dense arrays and a reverse-mode tape for the small layer vocabulary the
// pronunciation model needs. Everything is 64-bit and row-major; ranks above
// two are not used anywhere in the model.

#include <cstddef>
#include <cstdint>
#include <deque>
#include <functional>
#include <initializer_list>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace muffin::num {

using Shape = std::vector<std::size_t>;

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class NonFiniteError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr double kLayerNormEps = 1e-5;
/// Row or column mask; nonzero keeps the entry. Bytes rather than bools so it can back a span.
using Mask = std::vector<std::uint8_t>;
inline constexpr double kDivisionGuard = 1e-12;

std::string shape_string(const Shape& shape);

class Array {
 public:
  Array() = default;
  explicit Array(Shape shape, double fill = 0.0);
  Array(Shape shape, std::vector<double> data);

  static Array scalar(double v) { return Array(Shape{}, std::vector<double>{v}); }
  static Array vector(std::vector<double> v);
  static Array matrix(std::size_t rows, std::size_t cols, std::initializer_list<double> values);
  static Array zeros_like(const Array& a) { return Array(a.shape_); }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  // Rank 0 and 1 arrays act as a single row in row-wise operations.
  std::size_t rows() const { return shape_.size() == 2 ? shape_[0] : 1; }
  std::size_t cols() const {
    if (shape_.size() == 2) return shape_[1];
    return shape_.empty() ? 1 : shape_[0];
  }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }
  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }

  double item() const;

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }
  std::span<const double> row(std::size_t r) const { return std::span<const double>(data_).subspan(r * cols(), cols()); }
  std::span<double> row(std::size_t r) { return std::span<double>(data_).subspan(r * cols(), cols()); }

  bool all_finite() const;
  Array& operator+=(const Array& other);

  friend bool operator==(const Array&, const Array&) = default;

 private:
  Shape shape_;
  std::vector<double> data_;
};

class Tape;

/// Handle to a node on a tape. Cheap to copy; valid while the tape lives.
class Var {
 public:
  Var() = default;
  const Array& value() const;
  const Shape& shape() const { return value().shape(); }
  Tape* tape() const { return tape_; }
  std::size_t id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  friend class Tape;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

/// Receives the gradient contributions of one node's backward rule.
class GradSink {
 public:
  explicit GradSink(std::span<Array*> slots) : slots_(slots) {}
  /// nullptr when input `k` does not need a gradient.
  Array* operator[](std::size_t k) const { return slots_[k]; }

 private:
  std::span<Array*> slots_;
};

using BackwardFn = std::function<void(const Array& grad_out, GradSink& sink)>;

class Gradients {
 public:
  Gradients() = default;
  explicit Gradients(std::vector<Array> grads) : grads_(std::move(grads)) {}
  /// Gradient of the loss w.r.t. `v`; zeros when `v` was not reached.
  Array of(const Var& v) const;
  bool reached(const Var& v) const { return v.id() < grads_.size() && !grads_[v.id()].empty(); }

 private:
  std::vector<Array> grads_;
};

/// Ordered record of primitive applications. One tape per training step.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var leaf(Array value);
  Var constant(Array value);
  Var record(std::string_view op, Array value, std::vector<Var> inputs, BackwardFn backward);

  const Array& value(std::size_t id) const { return nodes_[id].value; }
  bool needs_grad(const Var& v) const { return nodes_[v.id()].needs_grad; }
  std::size_t size() const { return nodes_.size(); }
  std::string_view op_name(std::size_t id) const { return nodes_[id].op; }

  /// Reverse sweep from a scalar loss. Does not mutate the tape, so replaying
  /// is deterministic.
  Gradients backward(const Var& loss) const;

 private:
  struct Node {
    std::string_view op;
    Array value;
    std::vector<std::size_t> inputs;
    BackwardFn backward;
    bool needs_grad = false;
  };
  std::deque<Node> nodes_;  // stable addresses: Var::value() references survive later records
};

// ---- primitives -----------------------------------------------------------

Var matmul(const Var& a, const Var& b);
Var transpose(const Var& a);
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
/// a[m×n] + bias broadcast over rows (bias has n entries).
Var add_bias(const Var& a, const Var& bias);
Var scale(const Var& a, double c);
/// c·a + offset elementwise.
Var affine(const Var& a, double c, double offset);
/// a multiplied by a one-element Var.
Var scale_by(const Var& a, const Var& s);
Var sum(const Var& a);
Var mean(const Var& a);
Var mean_rows(const Var& a);
Var square(const Var& a);
Var exp(const Var& a);
/// log(max(a, floor)); the gradient is zero where the floor is active.
Var log_clamped(const Var& a, double floor = kDivisionGuard);
Var sigmoid(const Var& a);
Var gelu(const Var& a);

/// Row-wise softmax. `col_mask` (optional) marks columns that may receive
/// mass; masked columns get exactly zero probability.
Var softmax_rows(const Var& a, std::span<const std::uint8_t> col_mask = {});
Var log_softmax_rows(const Var& a);
Var layer_norm_rows(const Var& x, const Var& gamma, const Var& beta);
/// Per-channel 1-D convolution with symmetric zero padding; kernel is [K×C], K odd.
Var depthwise_conv1d(const Var& x, const Var& kernel);

Var concat_cols(std::span<const Var> parts);
Var concat_rows(std::span<const Var> parts);
Var slice_rows(const Var& a, std::size_t begin, std::size_t end);
Var gather_rows(const Var& a, std::span<const std::size_t> rows);
/// out[i] = a(i, cols[i]).
Var pick(const Var& a, std::span<const std::size_t> cols);
/// Zeroes rows whose mask entry is zero.
Var mask_rows(const Var& a, std::span<const std::uint8_t> row_mask);
/// Euclidean norm of every row, guarded below by kDivisionGuard in the gradient.
Var row_norms(const Var& a);
Var normalize_rows(const Var& a);

/// softmax(q·kᵀ/√d) v with masked keys excluded. Throws if every key is masked.
Var single_head_attention(const Var& q, const Var& k, const Var& v, std::span<const std::uint8_t> key_mask = {});

}  // namespace muffin::num
