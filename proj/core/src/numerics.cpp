#include "muffin/numerics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

namespace muffin::num {

namespace {

std::size_t product(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

void require(bool ok, std::string_view op, const std::string& what) {
  if (!ok) throw ShapeError(std::string(op) + ": " + what);
}

Tape& tape_of(const Var& a) {
  if (!a.valid()) throw std::logic_error("operation on an unbound Var");
  return *a.tape();
}

Shape matrix_shape(std::size_t r, std::size_t c) { return Shape{r, c}; }

constexpr double kInvSqrt2 = 0.70710678118654752440;
constexpr double kInvSqrt2Pi = 0.39894228040143267794;

}  // namespace

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "×" : "") << shape[i];
  os << ']';
  return os.str();
}

// ---- Array ------------------------------------------------------------------

Array::Array(Shape shape, double fill) : shape_(std::move(shape)), data_(product(shape_), fill) {}

Array::Array(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
  if (product(shape_) != data_.size()) {
    throw ShapeError("Array: shape " + shape_string(shape_) + " does not match " + std::to_string(data_.size()) +
                     " values");
  }
}

Array Array::vector(std::vector<double> v) {
  Shape s{v.size()};
  return Array(std::move(s), std::move(v));
}

Array Array::matrix(std::size_t rows, std::size_t cols, std::initializer_list<double> values) {
  return Array(Shape{rows, cols}, std::vector<double>(values));
}

double Array::item() const {
  if (data_.size() != 1) throw ShapeError("item() on array of shape " + shape_string(shape_));
  return data_[0];
}

bool Array::all_finite() const {
  return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

Array& Array::operator+=(const Array& other) {
  if (other.data_.size() != data_.size()) throw ShapeError("+=: size mismatch");
  for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += other.data_[i];
  return *this;
}

// ---- Var / Tape ---------------------------------------------------------------

const Array& Var::value() const {
  if (!tape_) throw std::logic_error("value() on an unbound Var");
  return tape_->value(id_);
}

Array Gradients::of(const Var& v) const {
  if (reached(v)) return grads_[v.id()];
  return Array::zeros_like(v.value());
}

Var Tape::leaf(Array value) {
  if (!value.all_finite()) throw NonFiniteError("leaf: non-finite input");
  nodes_.push_back(Node{"leaf", std::move(value), {}, {}, true});
  return Var(this, nodes_.size() - 1);
}

Var Tape::constant(Array value) {
  if (!value.all_finite()) throw NonFiniteError("constant: non-finite input");
  nodes_.push_back(Node{"constant", std::move(value), {}, {}, false});
  return Var(this, nodes_.size() - 1);
}

Var Tape::record(std::string_view op, Array value, std::vector<Var> inputs, BackwardFn backward) {
  if (!value.all_finite()) throw NonFiniteError(std::string(op) + ": produced a non-finite value");
  Node node{op, std::move(value), {}, {}, false};
  node.inputs.reserve(inputs.size());
  for (const Var& in : inputs) {
    if (in.tape() != this) throw std::logic_error(std::string(op) + ": input from a different tape");
    node.inputs.push_back(in.id());
    node.needs_grad = node.needs_grad || nodes_[in.id()].needs_grad;
  }
  if (node.needs_grad) node.backward = std::move(backward);
  nodes_.push_back(std::move(node));
  return Var(this, nodes_.size() - 1);
}

Gradients Tape::backward(const Var& loss) const {
  if (loss.tape() != this) throw std::logic_error("backward: loss from a different tape");
  if (loss.value().size() != 1) throw ShapeError("backward: loss must be scalar, got " + shape_string(loss.shape()));
  std::vector<Array> grads(nodes_.size());
  grads[loss.id()] = Array(loss.shape(), 1.0);
  std::vector<Array*> slots;
  for (std::size_t i = loss.id() + 1; i-- > 0;) {
    const Node& node = nodes_[i];
    if (grads[i].empty() || !node.backward) continue;
    slots.assign(node.inputs.size(), nullptr);
    for (std::size_t k = 0; k < node.inputs.size(); ++k) {
      const std::size_t in = node.inputs[k];
      if (!nodes_[in].needs_grad) continue;
      if (grads[in].empty()) grads[in] = Array::zeros_like(nodes_[in].value);
      slots[k] = &grads[in];
    }
    GradSink sink(slots);
    node.backward(grads[i], sink);
  }
  return Gradients(std::move(grads));
}

// ---- primitives ---------------------------------------------------------------

Var matmul(const Var& a, const Var& b) {
  const Array& A = a.value();
  const Array& B = b.value();
  require(A.rank() == 2 && B.rank() == 2, "matmul", "operands must be matrices");
  const std::size_t m = A.rows(), k = A.cols(), n = B.cols();
  require(B.rows() == k, "matmul", "inner dimensions " + shape_string(A.shape()) + " vs " + shape_string(B.shape()));
  Array out(matrix_shape(m, n));
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = A(i, p);
      if (aip == 0.0) continue;
      for (std::size_t j = 0; j < n; ++j) out(i, j) += aip * B(p, j);
    }
  return tape_of(a).record("matmul", std::move(out), {a, b}, [a, b, m, k, n](const Array& g, GradSink& sink) {
    const Array& A = a.value();
    const Array& B = b.value();
    if (Array* ga = sink[0]) {
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          double acc = 0.0;
          for (std::size_t j = 0; j < n; ++j) acc += g(i, j) * B(p, j);
          (*ga)(i, p) += acc;
        }
    }
    if (Array* gb = sink[1]) {
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          const double aip = A(i, p);
          if (aip == 0.0) continue;
          for (std::size_t j = 0; j < n; ++j) (*gb)(p, j) += aip * g(i, j);
        }
    }
  });
}

Var transpose(const Var& a) {
  const Array& A = a.value();
  require(A.rank() == 2, "transpose", "operand must be a matrix");
  const std::size_t m = A.rows(), n = A.cols();
  Array out(matrix_shape(n, m));
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out(j, i) = A(i, j);
  return tape_of(a).record("transpose", std::move(out), {a}, [m, n](const Array& g, GradSink& sink) {
    Array* ga = sink[0];
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) (*ga)(i, j) += g(j, i);
  });
}

namespace {

template <typename Fwd, typename DA, typename DB>
Var binary_elementwise(std::string_view op, const Var& a, const Var& b, Fwd f, DA da, DB db) {
  const Array& A = a.value();
  const Array& B = b.value();
  require(A.shape() == B.shape(), op, shape_string(A.shape()) + " vs " + shape_string(B.shape()));
  Array out(A.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(A[i], B[i]);
  return tape_of(a).record(op, std::move(out), {a, b}, [a, b, da, db](const Array& g, GradSink& sink) {
    const Array& A = a.value();
    const Array& B = b.value();
    if (Array* ga = sink[0])
      for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i] * da(A[i], B[i]);
    if (Array* gb = sink[1])
      for (std::size_t i = 0; i < g.size(); ++i) (*gb)[i] += g[i] * db(A[i], B[i]);
  });
}

// Elementwise unary op whose derivative is expressed through (input, output).
template <typename Fwd, typename Deriv>
Var unary_elementwise(std::string_view op, const Var& a, Fwd f, Deriv d) {
  const Array& A = a.value();
  Array out(A.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(A[i]);
  Tape& tape = tape_of(a);
  const std::size_t out_id = tape.size();
  return tape.record(op, std::move(out), {a}, [a, &tape, out_id, d](const Array& g, GradSink& sink) {
    const Array& A = a.value();
    const Array& Y = tape.value(out_id);
    Array* ga = sink[0];
    for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i] * d(A[i], Y[i]);
  });
}

}  // namespace

Var add(const Var& a, const Var& b) {
  return binary_elementwise(
      "add", a, b, [](double x, double y) { return x + y; }, [](double, double) { return 1.0; },
      [](double, double) { return 1.0; });
}

Var sub(const Var& a, const Var& b) {
  return binary_elementwise(
      "sub", a, b, [](double x, double y) { return x - y; }, [](double, double) { return 1.0; },
      [](double, double) { return -1.0; });
}

Var mul(const Var& a, const Var& b) {
  return binary_elementwise(
      "mul", a, b, [](double x, double y) { return x * y; }, [](double, double y) { return y; },
      [](double x, double) { return x; });
}

Var add_bias(const Var& a, const Var& bias) {
  const Array& A = a.value();
  const Array& b = bias.value();
  const std::size_t m = A.rows(), n = A.cols();
  require(b.size() == n, "add_bias", "bias has " + std::to_string(b.size()) + " entries for " + std::to_string(n) +
                                         " columns");
  Array out = A;
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out(i, j) += b[j];
  return tape_of(a).record("add_bias", std::move(out), {a, bias}, [m, n](const Array& g, GradSink& sink) {
    if (Array* ga = sink[0]) *ga += g;
    if (Array* gb = sink[1])
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) (*gb)[j] += g(i, j);
  });
}

Var scale(const Var& a, double c) { return affine(a, c, 0.0); }

Var affine(const Var& a, double c, double offset) {
  Array out = a.value();
  for (double& v : out.data()) v = c * v + offset;
  return tape_of(a).record("affine", std::move(out), {a}, [c](const Array& g, GradSink& sink) {
    Array* ga = sink[0];
    for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += c * g[i];
  });
}

Var scale_by(const Var& a, const Var& s) {
  const double c = s.value().item();
  Array out = a.value();
  for (double& v : out.data()) v *= c;
  return tape_of(a).record("scale_by", std::move(out), {a, s}, [a, s](const Array& g, GradSink& sink) {
    const double c = s.value().item();
    if (Array* ga = sink[0])
      for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += c * g[i];
    if (Array* gs = sink[1]) {
      const Array& A = a.value();
      double acc = 0.0;
      for (std::size_t i = 0; i < g.size(); ++i) acc += g[i] * A[i];
      (*gs)[0] += acc;
    }
  });
}

Var sum(const Var& a) {
  double total = 0.0;
  for (double v : a.value().data()) total += v;
  return tape_of(a).record("sum", Array::scalar(total), {a}, [](const Array& g, GradSink& sink) {
    Array* ga = sink[0];
    const double gv = g[0];
    for (double& v : ga->data()) v += gv;
  });
}

Var mean(const Var& a) {
  const std::size_t n = a.value().size();
  require(n > 0, "mean", "empty operand");
  return scale(sum(a), 1.0 / static_cast<double>(n));
}

Var mean_rows(const Var& a) {
  const Array& A = a.value();
  const std::size_t m = A.rows(), n = A.cols();
  require(m > 0, "mean_rows", "no rows");
  Array out(matrix_shape(1, n));
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j] += A(i, j);
  const double inv = 1.0 / static_cast<double>(m);
  for (double& v : out.data()) v *= inv;
  return tape_of(a).record("mean_rows", std::move(out), {a}, [m, n, inv](const Array& g, GradSink& sink) {
    Array* ga = sink[0];
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) (*ga)(i, j) += g[j] * inv;
  });
}

Var square(const Var& a) {
  return unary_elementwise(
      "square", a, [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

Var exp(const Var& a) {
  return unary_elementwise(
      "exp", a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Var log_clamped(const Var& a, double floor) {
  return unary_elementwise(
      "log", a, [floor](double x) { return std::log(std::max(x, floor)); },
      [floor](double x, double) { return x > floor ? 1.0 / x : 0.0; });
}

Var sigmoid(const Var& a) {
  return unary_elementwise(
      "sigmoid", a,
      [](double x) {
        if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
        const double e = std::exp(x);
        return e / (1.0 + e);
      },
      [](double, double y) { return y * (1.0 - y); });
}

Var gelu(const Var& a) {
  return unary_elementwise(
      "gelu", a, [](double x) { return 0.5 * x * (1.0 + std::erf(x * kInvSqrt2)); },
      [](double x, double) {
        const double cdf = 0.5 * (1.0 + std::erf(x * kInvSqrt2));
        const double pdf = kInvSqrt2Pi * std::exp(-0.5 * x * x);
        return cdf + x * pdf;
      });
}

Var softmax_rows(const Var& a, std::span<const std::uint8_t> col_mask) {
  const Array& A = a.value();
  const std::size_t m = A.rows(), n = A.cols();
  require(n >= 1, "softmax", "empty axis");
  require(col_mask.empty() || col_mask.size() == n, "softmax", "mask length mismatch");
  auto allowed = [&](std::size_t j) { return col_mask.empty() || col_mask[j]; };
  Array out(A.shape());
  for (std::size_t i = 0; i < m; ++i) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < n; ++j)
      if (allowed(j)) mx = std::max(mx, A(i, j));
    require(std::isfinite(mx), "softmax", "every position is masked");
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      const double e = allowed(j) ? std::exp(A(i, j) - mx) : 0.0;
      out(i, j) = e;
      z += e;
    }
    for (std::size_t j = 0; j < n; ++j) out(i, j) /= z;
  }
  Tape& tape = tape_of(a);
  const std::size_t out_id = tape.size();
  return tape.record("softmax", std::move(out), {a}, [&tape, out_id, m, n](const Array& g, GradSink& sink) {
    const Array& Y = tape.value(out_id);
    Array* ga = sink[0];
    for (std::size_t i = 0; i < m; ++i) {
      double dot = 0.0;
      for (std::size_t j = 0; j < n; ++j) dot += g(i, j) * Y(i, j);
      for (std::size_t j = 0; j < n; ++j) (*ga)(i, j) += Y(i, j) * (g(i, j) - dot);
    }
  });
}

Var log_softmax_rows(const Var& a) {
  const Array& A = a.value();
  const std::size_t m = A.rows(), n = A.cols();
  require(n >= 1, "log_softmax", "empty axis");
  Array out(A.shape());
  for (std::size_t i = 0; i < m; ++i) {
    double mx = A(i, 0);
    for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, A(i, j));
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j) z += std::exp(A(i, j) - mx);
    const double lse = mx + std::log(z);
    for (std::size_t j = 0; j < n; ++j) out(i, j) = A(i, j) - lse;
  }
  Tape& tape = tape_of(a);
  const std::size_t out_id = tape.size();
  return tape.record("log_softmax", std::move(out), {a}, [&tape, out_id, m, n](const Array& g, GradSink& sink) {
    const Array& Y = tape.value(out_id);
    Array* ga = sink[0];
    for (std::size_t i = 0; i < m; ++i) {
      double gs = 0.0;
      for (std::size_t j = 0; j < n; ++j) gs += g(i, j);
      for (std::size_t j = 0; j < n; ++j) (*ga)(i, j) += g(i, j) - std::exp(Y(i, j)) * gs;
    }
  });
}

Var layer_norm_rows(const Var& x, const Var& gamma, const Var& beta) {
  const Array& X = x.value();
  const std::size_t m = X.rows(), n = X.cols();
  require(n >= 2, "layer_norm", "needs at least two features");
  require(gamma.value().size() == n && beta.value().size() == n, "layer_norm", "affine parameter size mismatch");
  const Array& G = gamma.value();
  const Array& B = beta.value();
  // xhat and 1/sigma per row are kept for the backward pass.
  Array xhat(X.shape());
  std::vector<double> inv_std(m);
  Array out(X.shape());
  for (std::size_t i = 0; i < m; ++i) {
    double mu = 0.0;
    for (std::size_t j = 0; j < n; ++j) mu += X(i, j);
    mu /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t j = 0; j < n; ++j) var += (X(i, j) - mu) * (X(i, j) - mu);
    var /= static_cast<double>(n);
    inv_std[i] = 1.0 / std::sqrt(var + kLayerNormEps);
    for (std::size_t j = 0; j < n; ++j) {
      xhat(i, j) = (X(i, j) - mu) * inv_std[i];
      out(i, j) = G[j] * xhat(i, j) + B[j];
    }
  }
  return tape_of(x).record(
      "layer_norm", std::move(out), {x, gamma, beta},
      [gamma, xhat = std::move(xhat), inv_std = std::move(inv_std), m, n](const Array& g, GradSink& sink) {
        const Array& G = gamma.value();
        if (Array* gx = sink[0]) {
          const double inv_n = 1.0 / static_cast<double>(n);
          for (std::size_t i = 0; i < m; ++i) {
            double s1 = 0.0, s2 = 0.0;
            for (std::size_t j = 0; j < n; ++j) {
              const double dy = g(i, j) * G[j];
              s1 += dy;
              s2 += dy * xhat(i, j);
            }
            for (std::size_t j = 0; j < n; ++j) {
              const double dy = g(i, j) * G[j];
              (*gx)(i, j) += inv_std[i] * (dy - inv_n * s1 - xhat(i, j) * inv_n * s2);
            }
          }
        }
        if (Array* gg = sink[1])
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) (*gg)[j] += g(i, j) * xhat(i, j);
        if (Array* gb = sink[2])
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) (*gb)[j] += g(i, j);
      });
}

Var depthwise_conv1d(const Var& x, const Var& kernel) {
  const Array& X = x.value();
  const Array& K = kernel.value();
  require(K.rank() == 2, "depthwise_conv1d", "kernel must be [K×C]");
  const std::size_t T = X.rows(), C = X.cols(), width = K.rows();
  require(width % 2 == 1, "depthwise_conv1d", "kernel width must be odd, got " + std::to_string(width));
  require(K.cols() == C, "depthwise_conv1d", "kernel channels " + std::to_string(K.cols()) + " vs input " +
                                                 std::to_string(C));
  const std::ptrdiff_t half = static_cast<std::ptrdiff_t>(width / 2);
  const auto Ts = static_cast<std::ptrdiff_t>(T);
  Array out(matrix_shape(T, C));
  for (std::ptrdiff_t t = 0; t < Ts; ++t)
    for (std::size_t w = 0; w < width; ++w) {
      const std::ptrdiff_t src = t + static_cast<std::ptrdiff_t>(w) - half;
      if (src < 0 || src >= Ts) continue;
      for (std::size_t c = 0; c < C; ++c) out(t, c) += K(w, c) * X(src, c);
    }
  return tape_of(x).record("depthwise_conv1d", std::move(out), {x, kernel},
                           [x, kernel, T, C, width, half](const Array& g, GradSink& sink) {
                             const Array& X = x.value();
                             const Array& K = kernel.value();
                             const auto Ts = static_cast<std::ptrdiff_t>(T);
                             Array* gx = sink[0];
                             Array* gk = sink[1];
                             for (std::ptrdiff_t t = 0; t < Ts; ++t)
                               for (std::size_t w = 0; w < width; ++w) {
                                 const std::ptrdiff_t src = t + static_cast<std::ptrdiff_t>(w) - half;
                                 if (src < 0 || src >= Ts) continue;
                                 for (std::size_t c = 0; c < C; ++c) {
                                   if (gx) (*gx)(src, c) += K(w, c) * g(t, c);
                                   if (gk) (*gk)(w, c) += X(src, c) * g(t, c);
                                 }
                               }
                           });
}

Var concat_cols(std::span<const Var> parts) {
  require(!parts.empty(), "concat_cols", "no parts");
  const std::size_t m = parts[0].value().rows();
  std::vector<std::size_t> offsets;
  std::size_t total = 0;
  for (const Var& p : parts) {
    require(p.value().rows() == m, "concat_cols", "row count mismatch");
    offsets.push_back(total);
    total += p.value().cols();
  }
  Array out(matrix_shape(m, total));
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const Array& P = parts[k].value();
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < P.cols(); ++j) out(i, offsets[k] + j) = P(i, j);
  }
  std::vector<Var> inputs(parts.begin(), parts.end());
  return tape_of(parts[0]).record("concat_cols", std::move(out), inputs,
                                  [offsets, m](const Array& g, GradSink& sink) {
                                    for (std::size_t k = 0; k < offsets.size(); ++k) {
                                      Array* gp = sink[k];
                                      if (!gp) continue;
                                      const std::size_t w = gp->cols();
                                      for (std::size_t i = 0; i < m; ++i)
                                        for (std::size_t j = 0; j < w; ++j) (*gp)(i, j) += g(i, offsets[k] + j);
                                    }
                                  });
}

Var concat_rows(std::span<const Var> parts) {
  require(!parts.empty(), "concat_rows", "no parts");
  const std::size_t n = parts[0].value().cols();
  std::vector<std::size_t> offsets;
  std::size_t total = 0;
  for (const Var& p : parts) {
    require(p.value().cols() == n, "concat_rows", "column count mismatch");
    offsets.push_back(total);
    total += p.value().rows();
  }
  Array out(matrix_shape(total, n));
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const Array& P = parts[k].value();
    std::copy(P.data().begin(), P.data().end(), out.data().begin() + static_cast<std::ptrdiff_t>(offsets[k] * n));
  }
  std::vector<Var> inputs(parts.begin(), parts.end());
  return tape_of(parts[0]).record("concat_rows", std::move(out), inputs, [offsets, n](const Array& g, GradSink& sink) {
    for (std::size_t k = 0; k < offsets.size(); ++k) {
      Array* gp = sink[k];
      if (!gp) continue;
      for (std::size_t i = 0; i < gp->size(); ++i) (*gp)[i] += g[offsets[k] * n + i];
    }
  });
}

Var slice_rows(const Var& a, std::size_t begin, std::size_t end) {
  std::vector<std::size_t> rows(end - begin);
  std::iota(rows.begin(), rows.end(), begin);
  return gather_rows(a, rows);
}

Var gather_rows(const Var& a, std::span<const std::size_t> rows) {
  const Array& A = a.value();
  const std::size_t n = A.cols();
  Array out(matrix_shape(rows.size(), n));
  for (std::size_t i = 0; i < rows.size(); ++i) {
    require(rows[i] < A.rows(), "gather_rows", "row index out of range");
    for (std::size_t j = 0; j < n; ++j) out(i, j) = A(rows[i], j);
  }
  std::vector<std::size_t> idx(rows.begin(), rows.end());
  return tape_of(a).record("gather_rows", std::move(out), {a}, [idx = std::move(idx), n](const Array& g, GradSink& sink) {
    Array* ga = sink[0];
    for (std::size_t i = 0; i < idx.size(); ++i)
      for (std::size_t j = 0; j < n; ++j) (*ga)(idx[i], j) += g(i, j);
  });
}

Var pick(const Var& a, std::span<const std::size_t> cols) {
  const Array& A = a.value();
  require(cols.size() == A.rows(), "pick", "one column index per row required");
  Array out(Shape{cols.size()});
  for (std::size_t i = 0; i < cols.size(); ++i) {
    require(cols[i] < A.cols(), "pick", "column index out of range");
    out[i] = A(i, cols[i]);
  }
  std::vector<std::size_t> idx(cols.begin(), cols.end());
  return tape_of(a).record("pick", std::move(out), {a}, [idx = std::move(idx)](const Array& g, GradSink& sink) {
    Array* ga = sink[0];
    for (std::size_t i = 0; i < idx.size(); ++i) (*ga)(i, idx[i]) += g[i];
  });
}

Var mask_rows(const Var& a, std::span<const std::uint8_t> row_mask) {
  const Array& A = a.value();
  require(row_mask.size() == A.rows(), "mask_rows", "mask length mismatch");
  Array out = A;
  const std::size_t n = A.cols();
  for (std::size_t i = 0; i < A.rows(); ++i)
    if (!row_mask[i])
      for (std::size_t j = 0; j < n; ++j) out(i, j) = 0.0;
  std::vector<bool> keep(row_mask.begin(), row_mask.end());
  return tape_of(a).record("mask_rows", std::move(out), {a}, [keep = std::move(keep), n](const Array& g, GradSink& sink) {
    Array* ga = sink[0];
    for (std::size_t i = 0; i < keep.size(); ++i)
      if (keep[i])
        for (std::size_t j = 0; j < n; ++j) (*ga)(i, j) += g(i, j);
  });
}

Var row_norms(const Var& a) {
  const Array& A = a.value();
  const std::size_t m = A.rows(), n = A.cols();
  Array out(Shape{m});
  for (std::size_t i = 0; i < m; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < n; ++j) s += A(i, j) * A(i, j);
    out[i] = std::sqrt(s);
  }
  Tape& tape = tape_of(a);
  const std::size_t out_id = tape.size();
  return tape.record("row_norms", std::move(out), {a}, [a, &tape, out_id, m, n](const Array& g, GradSink& sink) {
    const Array& A = a.value();
    const Array& N = tape.value(out_id);
    Array* ga = sink[0];
    for (std::size_t i = 0; i < m; ++i) {
      const double inv = 1.0 / std::max(N[i], kDivisionGuard);
      for (std::size_t j = 0; j < n; ++j) (*ga)(i, j) += g[i] * A(i, j) * inv;
    }
  });
}

Var normalize_rows(const Var& a) {
  const Array& A = a.value();
  const std::size_t m = A.rows(), n = A.cols();
  Array out(A.shape());
  std::vector<double> norms(m);
  for (std::size_t i = 0; i < m; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < n; ++j) s += A(i, j) * A(i, j);
    norms[i] = std::max(std::sqrt(s), kDivisionGuard);
    for (std::size_t j = 0; j < n; ++j) out(i, j) = A(i, j) / norms[i];
  }
  Tape& tape = tape_of(a);
  const std::size_t out_id = tape.size();
  return tape.record("normalize_rows", std::move(out), {a},
                     [&tape, out_id, norms = std::move(norms), m, n](const Array& g, GradSink& sink) {
                       const Array& Y = tape.value(out_id);
                       Array* ga = sink[0];
                       for (std::size_t i = 0; i < m; ++i) {
                         double dot = 0.0;
                         for (std::size_t j = 0; j < n; ++j) dot += g(i, j) * Y(i, j);
                         for (std::size_t j = 0; j < n; ++j) (*ga)(i, j) += (g(i, j) - Y(i, j) * dot) / norms[i];
                       }
                     });
}

Var single_head_attention(const Var& q, const Var& k, const Var& v, std::span<const std::uint8_t> key_mask) {
  const Array& Q = q.value();
  require(Q.cols() == k.value().cols() && k.value().rows() == v.value().rows(), "attention",
          "q/k/v shapes " + shape_string(Q.shape()) + ", " + shape_string(k.shape()) + ", " + shape_string(v.shape()));
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(Q.cols()));
  Var scores = scale(matmul(q, transpose(k)), inv_sqrt_d);
  return matmul(softmax_rows(scores, key_mask), v);
}

}  // namespace muffin::num
