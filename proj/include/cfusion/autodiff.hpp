#pragma once

// Tape-based reverse-mode automatic differentiation over dense Eigen
// matrices. Batches are laid out as columns; sequence tensors (channels x
// length, per sample) are stored as C x (N * L) with column index n * L + l.

#include <Eigen/Dense>

#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <span>
#include <stdexcept>
#include <utility>
#include <vector>

namespace cfusion::ad {

template <typename T>
using Matrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic>;
template <typename T>
using RowVector = Eigen::Matrix<T, 1, Eigen::Dynamic>;
template <typename T>
using Vector = Eigen::Matrix<T, Eigen::Dynamic, 1>;

template <typename T>
class Tape;

template <typename T>
struct Var {
  Tape<T>* tape = nullptr;
  std::size_t id = 0;

  const Matrix<T>& value() const { return tape->value(*this); }
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
};

template <typename T>
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, const Matrix<T>&)>;

  Tape() { nodes_.reserve(256); }
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var<T> constant(Matrix<T> value) { return push(std::move(value), false, nullptr); }
  Var<T> variable(Matrix<T> value) { return push(std::move(value), true, nullptr); }

  // Records an op result. The backward closure is kept only if at least one
  // input participates in differentiation.
  Var<T> record(Matrix<T> value, std::initializer_list<Var<T>> inputs, BackwardFn backward) {
    bool needs = false;
    for (const auto& in : inputs) needs = needs || nodes_[in.id].requires_grad;
    return push(std::move(value), needs, needs ? std::move(backward) : nullptr);
  }
  Var<T> record(Matrix<T> value, std::span<const Var<T>> inputs, BackwardFn backward) {
    bool needs = false;
    for (const auto& in : inputs) needs = needs || nodes_[in.id].requires_grad;
    return push(std::move(value), needs, needs ? std::move(backward) : nullptr);
  }

  const Matrix<T>& value(Var<T> v) const { return nodes_[v.id].value; }
  bool requires_grad(Var<T> v) const { return nodes_[v.id].requires_grad; }
  bool has_grad(Var<T> v) const { return nodes_[v.id].grad.size() != 0; }

  // Gradient of the last backward() target w.r.t. v; zeros if unreached.
  Matrix<T> grad(Var<T> v) const {
    const auto& node = nodes_[v.id];
    if (node.grad.size() == 0) return Matrix<T>::Zero(node.value.rows(), node.value.cols());
    return node.grad;
  }

  // Accumulation target used by backward closures.
  Matrix<T>& grad_ref(Var<T> v) {
    auto& node = nodes_[v.id];
    if (node.grad.size() == 0) node.grad = Matrix<T>::Zero(node.value.rows(), node.value.cols());
    return node.grad;
  }

  void accumulate(Var<T> v, const Matrix<T>& g) {
    if (!nodes_[v.id].requires_grad) return;
    grad_ref(v) += g;
  }

  void backward(Var<T> target) {
    if (nodes_[target.id].value.size() != 1) {
      throw std::invalid_argument("backward target must be a scalar");
    }
    for (auto& n : nodes_) n.grad.resize(0, 0);
    grad_ref(target).setOnes();
    for (std::size_t i = target.id + 1; i-- > 0;) {
      auto& node = nodes_[i];
      if (!node.backward || node.grad.size() == 0) continue;
      // The closure may allocate gradients of earlier nodes; nodes_ never
      // grows during the sweep so the reference stays valid.
      node.backward(*this, node.grad);
    }
  }

  std::size_t size() const noexcept { return nodes_.size(); }
  void clear() { nodes_.clear(); }

 private:
  struct Node {
    Matrix<T> value;
    Matrix<T> grad;
    bool requires_grad = false;
    BackwardFn backward;
  };

  Var<T> push(Matrix<T> value, bool requires_grad, BackwardFn backward) {
    nodes_.push_back(Node{std::move(value), Matrix<T>(), requires_grad, std::move(backward)});
    return Var<T>{this, nodes_.size() - 1};
  }

  std::vector<Node> nodes_;
};

namespace detail {
inline void require(bool ok, const char* what) {
  if (!ok) throw std::invalid_argument(what);
}
}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise and linear algebra.

template <typename T>
Var<T> matmul(Var<T> a, Var<T> b) {
  detail::require(a.cols() == b.rows(), "matmul: inner dimension mismatch");
  Matrix<T> out = a.value() * b.value();
  return a.tape->record(std::move(out), {a, b}, [a, b](Tape<T>& tape, const Matrix<T>& g) {
    if (tape.requires_grad(a)) tape.grad_ref(a).noalias() += g * tape.value(b).transpose();
    if (tape.requires_grad(b)) tape.grad_ref(b).noalias() += tape.value(a).transpose() * g;
  });
}

template <typename T>
Var<T> operator+(Var<T> a, Var<T> b) {
  detail::require(a.rows() == b.rows() && a.cols() == b.cols(), "add: shape mismatch");
  Matrix<T> out = a.value() + b.value();
  return a.tape->record(std::move(out), {a, b}, [a, b](Tape<T>& tape, const Matrix<T>& g) {
    tape.accumulate(a, g);
    tape.accumulate(b, g);
  });
}

template <typename T>
Var<T> operator-(Var<T> a, Var<T> b) {
  detail::require(a.rows() == b.rows() && a.cols() == b.cols(), "sub: shape mismatch");
  Matrix<T> out = a.value() - b.value();
  return a.tape->record(std::move(out), {a, b}, [a, b](Tape<T>& tape, const Matrix<T>& g) {
    tape.accumulate(a, g);
    if (tape.requires_grad(b)) tape.grad_ref(b) -= g;
  });
}

template <typename T>
Var<T> hadamard(Var<T> a, Var<T> b) {
  detail::require(a.rows() == b.rows() && a.cols() == b.cols(), "hadamard: shape mismatch");
  Matrix<T> out = a.value().cwiseProduct(b.value());
  return a.tape->record(std::move(out), {a, b}, [a, b](Tape<T>& tape, const Matrix<T>& g) {
    if (tape.requires_grad(a)) tape.grad_ref(a) += g.cwiseProduct(tape.value(b));
    if (tape.requires_grad(b)) tape.grad_ref(b) += g.cwiseProduct(tape.value(a));
  });
}

template <typename T>
Var<T> scale(Var<T> a, T s) {
  Matrix<T> out = a.value() * s;
  return a.tape->record(std::move(out), {a}, [a, s](Tape<T>& tape, const Matrix<T>& g) {
    tape.grad_ref(a) += g * s;
  });
}

// x + b with b a column vector broadcast over columns.
template <typename T>
Var<T> add_bias(Var<T> x, Var<T> b) {
  detail::require(b.cols() == 1 && b.rows() == x.rows(), "add_bias: bias must be rows x 1");
  Matrix<T> out = x.value();
  out.colwise() += b.value().col(0);
  return x.tape->record(std::move(out), {x, b}, [x, b](Tape<T>& tape, const Matrix<T>& g) {
    tape.accumulate(x, g);
    if (tape.requires_grad(b)) tape.grad_ref(b) += g.rowwise().sum();
  });
}

// x scaled per column by the 1 x cols row vector w.
template <typename T>
Var<T> scale_cols(Var<T> x, Var<T> w) {
  detail::require(w.rows() == 1 && w.cols() == x.cols(), "scale_cols: weight must be 1 x cols");
  Matrix<T> out = x.value() * w.value().row(0).asDiagonal();
  return x.tape->record(std::move(out), {x, w}, [x, w](Tape<T>& tape, const Matrix<T>& g) {
    if (tape.requires_grad(x)) tape.grad_ref(x) += g * tape.value(w).row(0).asDiagonal();
    if (tape.requires_grad(w)) {
      tape.grad_ref(w) += g.cwiseProduct(tape.value(x)).colwise().sum();
    }
  });
}

// Repeats every column `times` times: r x N -> r x (N * times).
template <typename T>
Var<T> repeat_cols(Var<T> x, Eigen::Index times) {
  const Eigen::Index n = x.cols();
  Matrix<T> out(x.rows(), n * times);
  for (Eigen::Index j = 0; j < n; ++j) {
    out.middleCols(j * times, times).colwise() = x.value().col(j);
  }
  return x.tape->record(std::move(out), {x}, [x, n, times](Tape<T>& tape, const Matrix<T>& g) {
    auto& gx = tape.grad_ref(x);
    for (Eigen::Index j = 0; j < n; ++j) gx.col(j) += g.middleCols(j * times, times).rowwise().sum();
  });
}

template <typename T>
Var<T> concat_rows(std::span<const Var<T>> parts) {
  detail::require(!parts.empty(), "concat_rows: no inputs");
  const Eigen::Index cols = parts.front().cols();
  Eigen::Index rows = 0;
  for (const auto& p : parts) {
    detail::require(p.cols() == cols, "concat_rows: column mismatch");
    rows += p.rows();
  }
  Matrix<T> out(rows, cols);
  std::vector<Eigen::Index> offsets;
  offsets.reserve(parts.size());
  Eigen::Index r = 0;
  for (const auto& p : parts) {
    offsets.push_back(r);
    out.middleRows(r, p.rows()) = p.value();
    r += p.rows();
  }
  std::vector<Var<T>> inputs(parts.begin(), parts.end());
  Tape<T>* tape = parts.front().tape;
  return tape->record(std::move(out), std::span<const Var<T>>(inputs),
                      [inputs, offsets](Tape<T>& t, const Matrix<T>& g) {
                        for (std::size_t i = 0; i < inputs.size(); ++i) {
                          if (!t.requires_grad(inputs[i])) continue;
                          t.grad_ref(inputs[i]) += g.middleRows(offsets[i], inputs[i].rows());
                        }
                      });
}

template <typename T>
Var<T> concat_rows(std::initializer_list<Var<T>> parts) {
  std::vector<Var<T>> v(parts);
  return concat_rows(std::span<const Var<T>>(v));
}

template <typename T>
Var<T> slice_rows(Var<T> x, Eigen::Index start, Eigen::Index count) {
  detail::require(start >= 0 && start + count <= x.rows(), "slice_rows: out of range");
  Matrix<T> out = x.value().middleRows(start, count);
  return x.tape->record(std::move(out), {x}, [x, start, count](Tape<T>& tape, const Matrix<T>& g) {
    tape.grad_ref(x).middleRows(start, count) += g;
  });
}

// ---------------------------------------------------------------------------
// Nonlinearities.

template <typename T>
T softplus_scalar(T x) {
  using std::exp;
  using std::log1p;
  return (x > T(0) ? x : T(0)) + log1p(exp(-(x > T(0) ? x : -x)));
}

template <typename T>
T sigmoid_scalar(T x) {
  using std::exp;
  if (x >= T(0)) return T(1) / (T(1) + exp(-x));
  const T e = exp(x);
  return e / (T(1) + e);
}

template <typename T>
Var<T> silu(Var<T> x) {
  Matrix<T> sig = x.value().unaryExpr([](T v) { return sigmoid_scalar(v); });
  Matrix<T> out = x.value().cwiseProduct(sig);
  return x.tape->record(std::move(out), {x}, [x, sig](Tape<T>& tape, const Matrix<T>& g) {
    const auto& xv = tape.value(x);
    // d/dx x*s(x) = s + x*s*(1-s)
    Matrix<T> d = sig.array() + xv.array() * sig.array() * (T(1) - sig.array());
    tape.grad_ref(x) += g.cwiseProduct(d);
  });
}

template <typename T>
Var<T> softplus(Var<T> x) {
  Matrix<T> out = x.value().unaryExpr([](T v) { return softplus_scalar(v); });
  return x.tape->record(std::move(out), {x}, [x](Tape<T>& tape, const Matrix<T>& g) {
    Matrix<T> d = tape.value(x).unaryExpr([](T v) { return sigmoid_scalar(v); });
    tape.grad_ref(x) += g.cwiseProduct(d);
  });
}

// Column-wise softmax.
template <typename T>
Var<T> softmax_cols(Var<T> x) {
  Matrix<T> out(x.rows(), x.cols());
  for (Eigen::Index j = 0; j < x.cols(); ++j) {
    const T m = x.value().col(j).maxCoeff();
    out.col(j) = (x.value().col(j).array() - m).exp();
    out.col(j) /= out.col(j).sum();
  }
  Matrix<T> saved = out;
  return x.tape->record(std::move(out), {x}, [x, saved](Tape<T>& tape, const Matrix<T>& g) {
    auto& gx = tape.grad_ref(x);
    for (Eigen::Index j = 0; j < saved.cols(); ++j) {
      const T dot = g.col(j).dot(saved.col(j));
      gx.col(j).array() += saved.col(j).array() * (g.col(j).array() - dot);
    }
  });
}

// ---------------------------------------------------------------------------
// Sequence ops. Input layout C x (N * L), column n * L + l.

// 1-D convolution with zero padding (kernel - 1) / 2. Weight layout is
// C_out x (kernel * C_in) with column k * C_in + c. Output length is
// ceil(L / stride).
template <typename T>
Var<T> conv1d(Var<T> x, Var<T> weight, Var<T> bias, Eigen::Index length, Eigen::Index stride) {
  const Eigen::Index c_in = x.rows();
  detail::require(length > 0 && x.cols() % length == 0, "conv1d: columns not a multiple of length");
  detail::require(weight.cols() % c_in == 0, "conv1d: weight/channel mismatch");
  const Eigen::Index kernel = weight.cols() / c_in;
  detail::require(kernel % 2 == 1, "conv1d: kernel must be odd");
  detail::require(bias.rows() == weight.rows() && bias.cols() == 1, "conv1d: bias shape");
  const Eigen::Index batch = x.cols() / length;
  const Eigen::Index pad = (kernel - 1) / 2;
  const Eigen::Index out_len = (length + stride - 1) / stride;

  Matrix<T> cols = Matrix<T>::Zero(kernel * c_in, batch * out_len);
  const auto& xv = x.value();
  for (Eigen::Index n = 0; n < batch; ++n) {
    for (Eigen::Index o = 0; o < out_len; ++o) {
      for (Eigen::Index k = 0; k < kernel; ++k) {
        const Eigen::Index i = o * stride + k - pad;
        if (i < 0 || i >= length) continue;
        cols.block(k * c_in, n * out_len + o, c_in, 1) = xv.col(n * length + i);
      }
    }
  }
  Matrix<T> out = weight.value() * cols;
  out.colwise() += bias.value().col(0);
  return x.tape->record(
      std::move(out), {x, weight, bias},
      [x, weight, bias, cols = std::move(cols), c_in, kernel, pad, length, stride, out_len, batch](
          Tape<T>& tape, const Matrix<T>& g) {
        if (tape.requires_grad(weight)) tape.grad_ref(weight).noalias() += g * cols.transpose();
        if (tape.requires_grad(bias)) tape.grad_ref(bias) += g.rowwise().sum();
        if (!tape.requires_grad(x)) return;
        Matrix<T> gcols = tape.value(weight).transpose() * g;
        auto& gx = tape.grad_ref(x);
        for (Eigen::Index n = 0; n < batch; ++n) {
          for (Eigen::Index o = 0; o < out_len; ++o) {
            for (Eigen::Index k = 0; k < kernel; ++k) {
              const Eigen::Index i = o * stride + k - pad;
              if (i < 0 || i >= length) continue;
              gx.col(n * length + i) += gcols.block(k * c_in, n * out_len + o, c_in, 1);
            }
          }
        }
      });
}

// Nearest-neighbour x2 upsampling from in_len to out_len (<= 2 * in_len).
template <typename T>
Var<T> upsample2(Var<T> x, Eigen::Index in_len, Eigen::Index out_len) {
  detail::require(x.cols() % in_len == 0, "upsample2: columns not a multiple of length");
  detail::require(out_len <= 2 * in_len && (out_len + 1) / 2 == in_len, "upsample2: bad lengths");
  const Eigen::Index batch = x.cols() / in_len;
  Matrix<T> out(x.rows(), batch * out_len);
  for (Eigen::Index n = 0; n < batch; ++n) {
    for (Eigen::Index o = 0; o < out_len; ++o) out.col(n * out_len + o) = x.value().col(n * in_len + o / 2);
  }
  return x.tape->record(std::move(out), {x}, [x, batch, in_len, out_len](Tape<T>& tape, const Matrix<T>& g) {
    auto& gx = tape.grad_ref(x);
    for (Eigen::Index n = 0; n < batch; ++n) {
      for (Eigen::Index o = 0; o < out_len; ++o) gx.col(n * in_len + o / 2) += g.col(n * out_len + o);
    }
  });
}

// ---------------------------------------------------------------------------
// Reductions and losses.

template <typename T>
Var<T> mean_all(Var<T> x) {
  const T n = static_cast<T>(x.value().size());
  Matrix<T> out(1, 1);
  out(0, 0) = x.value().sum() / n;
  return x.tape->record(std::move(out), {x}, [x, n](Tape<T>& tape, const Matrix<T>& g) {
    tape.grad_ref(x).array() += g(0, 0) / n;
  });
}

template <typename T>
Var<T> mse(Var<T> prediction, Var<T> target) {
  detail::require(prediction.rows() == target.rows() && prediction.cols() == target.cols(),
                  "mse: shape mismatch");
  const T n = static_cast<T>(prediction.value().size());
  Matrix<T> diff = prediction.value() - target.value();
  Matrix<T> out(1, 1);
  out(0, 0) = diff.squaredNorm() / n;
  return prediction.tape->record(
      std::move(out), {prediction, target},
      [prediction, target, diff = std::move(diff), n](Tape<T>& tape, const Matrix<T>& g) {
        const T s = T(2) * g(0, 0) / n;
        if (tape.requires_grad(prediction)) tape.grad_ref(prediction) += s * diff;
        if (tape.requires_grad(target)) tape.grad_ref(target) -= s * diff;
      });
}

template <typename T>
Var<T> add_scaled(Var<T> a, Var<T> b, T s) {
  return a + scale(b, s);
}

}  // namespace cfusion::ad
