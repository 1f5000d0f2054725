#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <limits>
#include <memory>
#include <numeric>
#include <string>
#include <vector>

#include "duet/error.hpp"
#include "duet/rng.hpp"

namespace duet {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

struct Tensor;
using TensorPtr = std::shared_ptr<Tensor>;

// Dense row-major 64-bit float tensor. Rank 0 is represented as shape {1}.
// The grad buffer is allocated lazily and always matches the data shape.
struct Tensor {
  std::vector<int> shape;
  std::vector<double> data;
  std::vector<double> grad;
  bool requires_grad = false;
  bool node_output = false;  // produced by a recorded op

  static TensorPtr create(std::vector<int> shape, bool requires_grad = false) {
    auto t = std::make_shared<Tensor>();
    int64_t n = 1;
    for (int e : shape) {
      if (e <= 0) throw ShapeError("Tensor: extents must be positive");
      n *= e;
    }
    t->shape = std::move(shape);
    t->data.assign(static_cast<size_t>(n), 0.0);
    t->requires_grad = requires_grad;
    return t;
  }

  static TensorPtr scalar(double v) {
    auto t = create({1});
    t->data[0] = v;
    return t;
  }

  static TensorPtr from_values(std::vector<int> shape, std::vector<double> values,
                               bool requires_grad = false) {
    auto t = create(std::move(shape), requires_grad);
    if (values.size() != t->data.size())
      throw ShapeError("Tensor::from_values: value count does not match shape");
    t->data = std::move(values);
    return t;
  }

  static TensorPtr from_rows(std::initializer_list<std::initializer_list<double>> rows,
                             bool requires_grad = false) {
    const int m = static_cast<int>(rows.size());
    const int n = m > 0 ? static_cast<int>(rows.begin()->size()) : 0;
    auto t = create({m, n}, requires_grad);
    size_t k = 0;
    for (const auto& row : rows) {
      if (static_cast<int>(row.size()) != n)
        throw ShapeError("Tensor::from_rows: ragged rows");
      for (double v : row) t->data[k++] = v;
    }
    return t;
  }

  static TensorPtr randn(std::vector<int> shape, Rng& rng, double stddev,
                         bool requires_grad = false) {
    auto t = create(std::move(shape), requires_grad);
    for (auto& v : t->data) v = rng.normal(0.0, stddev);
    return t;
  }

  static TensorPtr full(std::vector<int> shape, double value, bool requires_grad = false) {
    auto t = create(std::move(shape), requires_grad);
    std::fill(t->data.begin(), t->data.end(), value);
    return t;
  }

  int64_t numel() const { return static_cast<int64_t>(data.size()); }
  int rank() const { return static_cast<int>(shape.size()); }

  // 2-D view helpers; rank-1 tensors act as a single row.
  int rows() const { return rank() >= 2 ? shape[0] : 1; }
  int cols() const { return rank() >= 2 ? shape[1] : shape[0]; }

  double& at(int i, int j) { return data[static_cast<size_t>(i) * cols() + j]; }
  double at(int i, int j) const { return data[static_cast<size_t>(i) * cols() + j]; }

  double value() const {
    if (numel() != 1) throw ShapeError("Tensor::value: tensor is not scalar");
    return data[0];
  }

  bool all_finite() const {
    for (double v : data)
      if (!std::isfinite(v)) return false;
    return true;
  }

  void ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
  }

  void zero_grad() {
    if (!grad.empty()) std::fill(grad.begin(), grad.end(), 0.0);
  }

  bool wants_grad() const { return requires_grad; }
};

namespace detail {

// C[m x n] = or += A[m x k] * B[k x n]
inline void mm(const double* a, const double* b, double* c, int m, int k, int n,
               bool accumulate) {
  if (!accumulate) std::fill(c, c + static_cast<size_t>(m) * n, 0.0);
  for (int i = 0; i < m; ++i) {
    const double* arow = a + static_cast<size_t>(i) * k;
    double* crow = c + static_cast<size_t>(i) * n;
    for (int p = 0; p < k; ++p) {
      const double av = arow[p];
      if (av == 0.0) continue;
      const double* brow = b + static_cast<size_t>(p) * n;
      for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// C[m x k] += A[m x n] * B[k x n]^T, with B stored row-major [k x n]
inline void mm_nt_acc(const double* a, const double* b, double* c, int m, int n, int k) {
  for (int i = 0; i < m; ++i) {
    const double* arow = a + static_cast<size_t>(i) * n;
    double* crow = c + static_cast<size_t>(i) * k;
    for (int p = 0; p < k; ++p) {
      const double* brow = b + static_cast<size_t>(p) * n;
      double acc = 0.0;
      for (int j = 0; j < n; ++j) acc += arow[j] * brow[j];
      crow[p] += acc;
    }
  }
}

// C[k x n] += A[m x k]^T * B[m x n]
inline void mm_tn_acc(const double* a, const double* b, double* c, int k, int m, int n) {
  for (int i = 0; i < m; ++i) {
    const double* arow = a + static_cast<size_t>(i) * k;
    const double* brow = b + static_cast<size_t>(i) * n;
    for (int p = 0; p < k; ++p) {
      const double av = arow[p];
      if (av == 0.0) continue;
      double* crow = c + static_cast<size_t>(p) * n;
      for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

}  // namespace detail

// Reverse-mode tape. Operations append in execution order, so the list is
// topologically sorted by construction; backward replays it in exact
// reverse order. One tape and its tensors belong to one thread.
class Tape {
 public:
  struct Node {
    const char* name;
    std::vector<TensorPtr> inputs;
    TensorPtr output;
    std::function<void()> backward;
  };

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  static Tape*& active() {
    thread_local Tape* tape = nullptr;
    return tape;
  }

  void record(const char* name, std::vector<TensorPtr> inputs, TensorPtr output,
              std::function<void()> backward) {
    nodes_.push_back(Node{name, std::move(inputs), std::move(output), std::move(backward)});
  }

  size_t size() const { return nodes_.size(); }

  // Accumulates dLoss/dT into every tensor with requires_grad. Interior
  // node grads are reset at the start of each call, so calling twice
  // without zeroing leaf grads doubles them.
  void backward(const TensorPtr& loss) {
    if (nodes_.empty()) throw ValueError("backward: tape is empty");
    if (loss->numel() != 1) throw ValueError("backward: loss must be scalar");
    if (!loss->node_output)
      throw ValueError("backward: loss is not an output recorded on this tape");
    for (auto& node : nodes_) {
      node.output->ensure_grad();
      node.output->zero_grad();
      for (auto& in : node.inputs)
        if (in->requires_grad) in->ensure_grad();
    }
    loss->grad[0] = 1.0;
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) it->backward();
  }

  void clear() { nodes_.clear(); }

 private:
  std::vector<Node> nodes_;
};

// RAII activation of a tape on the current thread.
class TapeScope {
 public:
  explicit TapeScope(Tape& tape) : prev_(Tape::active()) { Tape::active() = &tape; }
  ~TapeScope() { Tape::active() = prev_; }
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape* prev_;
};

namespace detail {

inline bool tracking(std::initializer_list<const TensorPtr*> inputs) {
  if (Tape::active() == nullptr) return false;
  for (const TensorPtr* t : inputs)
    if ((*t)->requires_grad) return true;
  return false;
}

inline void mark_output(const TensorPtr& out) {
  out->requires_grad = true;
  out->node_output = true;
}

inline void check_same_shape(const TensorPtr& a, const TensorPtr& b, const char* op) {
  if (a->shape != b->shape)
    throw ShapeError(std::string(op) + ": shape mismatch");
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Primitives
// ---------------------------------------------------------------------------

inline TensorPtr add(const TensorPtr& a, const TensorPtr& b) {
  detail::check_same_shape(a, b, "add");
  auto out = Tensor::create(a->shape);
  for (size_t i = 0; i < out->data.size(); ++i) out->data[i] = a->data[i] + b->data[i];
  if (detail::tracking({&a, &b})) {
    detail::mark_output(out);
    Tape::active()->record("add", {a, b}, out, [a, b, out] {
      if (a->requires_grad)
        for (size_t i = 0; i < out->grad.size(); ++i) a->grad[i] += out->grad[i];
      if (b->requires_grad)
        for (size_t i = 0; i < out->grad.size(); ++i) b->grad[i] += out->grad[i];
    });
  }
  return out;
}

// x[m x n] + bias[n], broadcast over rows.
inline TensorPtr add_bias(const TensorPtr& x, const TensorPtr& bias) {
  const int m = x->rows(), n = x->cols();
  if (bias->numel() != n) throw ShapeError("add_bias: bias length must match columns");
  auto out = Tensor::create(x->shape);
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) out->at(i, j) = x->at(i, j) + bias->data[static_cast<size_t>(j)];
  if (detail::tracking({&x, &bias})) {
    detail::mark_output(out);
    Tape::active()->record("add_bias", {x, bias}, out, [x, bias, out, m, n] {
      if (x->requires_grad)
        for (size_t i = 0; i < out->grad.size(); ++i) x->grad[i] += out->grad[i];
      if (bias->requires_grad)
        for (int i = 0; i < m; ++i)
          for (int j = 0; j < n; ++j)
            bias->grad[static_cast<size_t>(j)] += out->grad[static_cast<size_t>(i) * n + j];
    });
  }
  return out;
}

inline TensorPtr multiply(const TensorPtr& a, const TensorPtr& b) {
  detail::check_same_shape(a, b, "multiply");
  auto out = Tensor::create(a->shape);
  for (size_t i = 0; i < out->data.size(); ++i) out->data[i] = a->data[i] * b->data[i];
  if (detail::tracking({&a, &b})) {
    detail::mark_output(out);
    Tape::active()->record("multiply", {a, b}, out, [a, b, out] {
      if (a->requires_grad)
        for (size_t i = 0; i < out->grad.size(); ++i) a->grad[i] += out->grad[i] * b->data[i];
      if (b->requires_grad)
        for (size_t i = 0; i < out->grad.size(); ++i) b->grad[i] += out->grad[i] * a->data[i];
    });
  }
  return out;
}

inline TensorPtr scale(const TensorPtr& x, double c) {
  auto out = Tensor::create(x->shape);
  for (size_t i = 0; i < out->data.size(); ++i) out->data[i] = c * x->data[i];
  if (detail::tracking({&x})) {
    detail::mark_output(out);
    Tape::active()->record("scale", {x}, out, [x, out, c] {
      if (x->requires_grad)
        for (size_t i = 0; i < out->grad.size(); ++i) x->grad[i] += c * out->grad[i];
    });
  }
  return out;
}

inline TensorPtr sum(const TensorPtr& x) {
  auto out = Tensor::create({1});
  out->data[0] = std::accumulate(x->data.begin(), x->data.end(), 0.0);
  if (detail::tracking({&x})) {
    detail::mark_output(out);
    Tape::active()->record("sum", {x}, out, [x, out] {
      if (x->requires_grad) {
        const double g = out->grad[0];
        for (auto& v : x->grad) v += g;
      }
    });
  }
  return out;
}

inline TensorPtr mean(const TensorPtr& x) {
  return scale(sum(x), 1.0 / static_cast<double>(x->numel()));
}

inline TensorPtr matmul(const TensorPtr& a, const TensorPtr& b) {
  const int m = a->rows(), k = a->cols();
  const int k2 = b->rows(), n = b->cols();
  if (k != k2) throw ShapeError("matmul: inner dimensions do not agree");
  auto out = Tensor::create({m, n});
  detail::mm(a->data.data(), b->data.data(), out->data.data(), m, k, n, false);
  if (detail::tracking({&a, &b})) {
    detail::mark_output(out);
    Tape::active()->record("matmul", {a, b}, out, [a, b, out, m, k, n] {
      if (a->requires_grad)
        detail::mm_nt_acc(out->grad.data(), b->data.data(), a->grad.data(), m, n, k);
      if (b->requires_grad)
        detail::mm_tn_acc(a->data.data(), out->grad.data(), b->grad.data(), k, m, n);
    });
  }
  return out;
}

inline TensorPtr transpose(const TensorPtr& x) {
  const int m = x->rows(), n = x->cols();
  auto out = Tensor::create({n, m});
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) out->at(j, i) = x->at(i, j);
  if (detail::tracking({&x})) {
    detail::mark_output(out);
    Tape::active()->record("transpose", {x}, out, [x, out, m, n] {
      if (x->requires_grad)
        for (int i = 0; i < m; ++i)
          for (int j = 0; j < n; ++j)
            x->grad[static_cast<size_t>(i) * n + j] += out->grad[static_cast<size_t>(j) * m + i];
    });
  }
  return out;
}

// Row gather: out[r] = x[rows[r]]. Backward scatter-adds, so repeated
// indices accumulate. Doubles as the embedding lookup.
inline TensorPtr gather_rows(const TensorPtr& x, const std::vector<int>& rows) {
  const int m = x->rows(), n = x->cols();
  if (rows.empty()) throw ValueError("gather_rows: empty index list");
  for (int r : rows)
    if (r < 0 || r >= m) throw ValueError("gather_rows: row index out of range");
  auto out = Tensor::create({static_cast<int>(rows.size()), n});
  for (size_t i = 0; i < rows.size(); ++i)
    std::copy_n(x->data.begin() + static_cast<size_t>(rows[i]) * n, n,
                out->data.begin() + i * n);
  if (detail::tracking({&x})) {
    detail::mark_output(out);
    Tape::active()->record("gather_rows", {x}, out, [x, out, rows, n] {
      if (x->requires_grad)
        for (size_t i = 0; i < rows.size(); ++i)
          for (int j = 0; j < n; ++j)
            x->grad[static_cast<size_t>(rows[i]) * n + j] += out->grad[i * n + j];
    });
  }
  return out;
}

inline TensorPtr embedding_lookup(const TensorPtr& table, const std::vector<int>& ids) {
  return gather_rows(table, ids);
}

// Block slice of a 2-D tensor, rows [r0, r1) and columns [c0, c1).
inline TensorPtr slice(const TensorPtr& x, int r0, int r1, int c0, int c1) {
  const int m = x->rows(), n = x->cols();
  if (r0 < 0 || r1 > m || r0 >= r1 || c0 < 0 || c1 > n || c0 >= c1)
    throw ShapeError("slice: block out of range");
  auto out = Tensor::create({r1 - r0, c1 - c0});
  for (int i = r0; i < r1; ++i)
    for (int j = c0; j < c1; ++j) out->at(i - r0, j - c0) = x->at(i, j);
  if (detail::tracking({&x})) {
    detail::mark_output(out);
    Tape::active()->record("slice", {x}, out, [x, out, r0, r1, c0, c1, n] {
      if (x->requires_grad)
        for (int i = r0; i < r1; ++i)
          for (int j = c0; j < c1; ++j)
            x->grad[static_cast<size_t>(i) * n + j] +=
                out->grad[static_cast<size_t>(i - r0) * (c1 - c0) + (j - c0)];
    });
  }
  return out;
}

inline TensorPtr concat_rows(const TensorPtr& a, const TensorPtr& b) {
  const int n = a->cols();
  if (b->cols() != n) throw ShapeError("concat_rows: column counts differ");
  const int ma = a->rows(), mb = b->rows();
  auto out = Tensor::create({ma + mb, n});
  std::copy(a->data.begin(), a->data.end(), out->data.begin());
  std::copy(b->data.begin(), b->data.end(), out->data.begin() + a->data.size());
  if (detail::tracking({&a, &b})) {
    detail::mark_output(out);
    Tape::active()->record("concat_rows", {a, b}, out, [a, b, out] {
      if (a->requires_grad)
        for (size_t i = 0; i < a->grad.size(); ++i) a->grad[i] += out->grad[i];
      if (b->requires_grad)
        for (size_t i = 0; i < b->grad.size(); ++i) b->grad[i] += out->grad[a->data.size() + i];
    });
  }
  return out;
}

inline TensorPtr concat_cols(const std::vector<TensorPtr>& parts) {
  if (parts.empty()) throw ValueError("concat_cols: no inputs");
  const int m = parts[0]->rows();
  int n = 0;
  for (const auto& p : parts) {
    if (p->rows() != m) throw ShapeError("concat_cols: row counts differ");
    n += p->cols();
  }
  auto out = Tensor::create({m, n});
  int off = 0;
  for (const auto& p : parts) {
    const int pc = p->cols();
    for (int i = 0; i < m; ++i)
      std::copy_n(p->data.begin() + static_cast<size_t>(i) * pc, pc,
                  out->data.begin() + static_cast<size_t>(i) * n + off);
    off += pc;
  }
  bool track = Tape::active() != nullptr &&
               std::any_of(parts.begin(), parts.end(),
                           [](const TensorPtr& p) { return p->requires_grad; });
  if (track) {
    detail::mark_output(out);
    Tape::active()->record("concat_cols", parts, out, [parts, out, m, n] {
      int off = 0;
      for (const auto& p : parts) {
        const int pc = p->cols();
        if (p->requires_grad)
          for (int i = 0; i < m; ++i)
            for (int j = 0; j < pc; ++j)
              p->grad[static_cast<size_t>(i) * pc + j] +=
                  out->grad[static_cast<size_t>(i) * n + off + j];
        off += pc;
      }
    });
  }
  return out;
}

inline TensorPtr gelu(const TensorPtr& x) {
  constexpr double kInvSqrt2 = 0.70710678118654752440;
  constexpr double kInvSqrt2Pi = 0.39894228040143267794;
  auto out = Tensor::create(x->shape);
  for (size_t i = 0; i < x->data.size(); ++i) {
    const double v = x->data[i];
    out->data[i] = 0.5 * v * (1.0 + std::erf(v * kInvSqrt2));
  }
  if (detail::tracking({&x})) {
    detail::mark_output(out);
    Tape::active()->record("gelu", {x}, out, [x, out] {
      if (!x->requires_grad) return;
      for (size_t i = 0; i < x->data.size(); ++i) {
        const double v = x->data[i];
        const double cdf = 0.5 * (1.0 + std::erf(v * kInvSqrt2));
        const double pdf = kInvSqrt2Pi * std::exp(-0.5 * v * v);
        x->grad[i] += out->grad[i] * (cdf + v * pdf);
      }
    });
  }
  return out;
}

// Row-wise RMS normalization with learned gain: y_ij = g_j * x_ij / rms(x_i).
constexpr double kRmsNormEps = 1e-6;

inline TensorPtr rmsnorm(const TensorPtr& x, const TensorPtr& gain) {
  const int m = x->rows(), n = x->cols();
  if (gain->numel() != n) throw ShapeError("rmsnorm: gain length must match columns");
  auto out = Tensor::create(x->shape);
  std::vector<double> inv_rms(static_cast<size_t>(m));
  for (int i = 0; i < m; ++i) {
    double ms = 0.0;
    for (int j = 0; j < n; ++j) ms += x->at(i, j) * x->at(i, j);
    inv_rms[static_cast<size_t>(i)] = 1.0 / std::sqrt(ms / n + kRmsNormEps);
    for (int j = 0; j < n; ++j)
      out->at(i, j) = gain->data[static_cast<size_t>(j)] * x->at(i, j) * inv_rms[static_cast<size_t>(i)];
  }
  if (detail::tracking({&x, &gain})) {
    detail::mark_output(out);
    Tape::active()->record("rmsnorm", {x, gain}, out, [x, gain, out, inv_rms, m, n] {
      for (int i = 0; i < m; ++i) {
        const double ir = inv_rms[static_cast<size_t>(i)];
        double dot = 0.0;  // sum_j dL/dy_ij * g_j * x_ij
        for (int j = 0; j < n; ++j)
          dot += out->grad[static_cast<size_t>(i) * n + j] * gain->data[static_cast<size_t>(j)] *
                 x->at(i, j);
        for (int j = 0; j < n; ++j) {
          const double go = out->grad[static_cast<size_t>(i) * n + j];
          if (x->requires_grad)
            x->grad[static_cast<size_t>(i) * n + j] +=
                ir * go * gain->data[static_cast<size_t>(j)] -
                x->at(i, j) * ir * ir * ir * dot / n;
          if (gain->requires_grad)
            gain->grad[static_cast<size_t>(j)] += go * x->at(i, j) * ir;
        }
      }
    });
  }
  return out;
}

enum class MaskKind { kCausal, kBidirectional };

// Attention-score mask on a square matrix. Causal keeps (i, j) with j <= i
// and writes -inf above the diagonal; bidirectional leaves scores as they
// are. Masked entries pass zero gradient.
inline TensorPtr masked_fill(const TensorPtr& x, MaskKind kind) {
  const int m = x->rows(), n = x->cols();
  if (m != n) throw ShapeError("masked_fill: score matrix must be square");
  auto out = Tensor::create(x->shape);
  out->data = x->data;
  if (kind == MaskKind::kCausal)
    for (int i = 0; i < m; ++i)
      for (int j = i + 1; j < n; ++j) out->at(i, j) = kNegInf;
  if (detail::tracking({&x})) {
    detail::mark_output(out);
    Tape::active()->record("masked_fill", {x}, out, [x, out, kind, m, n] {
      if (!x->requires_grad) return;
      for (int i = 0; i < m; ++i) {
        const int jmax = (kind == MaskKind::kCausal) ? i + 1 : n;
        for (int j = 0; j < jmax; ++j)
          x->grad[static_cast<size_t>(i) * n + j] += out->grad[static_cast<size_t>(i) * n + j];
      }
    });
  }
  return out;
}

// Key-padding mask: writes -inf into score columns >= valid_len (padding
// holds only suffix positions).
inline TensorPtr mask_pad_columns(const TensorPtr& x, int valid_len) {
  const int m = x->rows(), n = x->cols();
  if (valid_len <= 0 || valid_len > n) throw ValueError("mask_pad_columns: bad valid_len");
  auto out = Tensor::create(x->shape);
  out->data = x->data;
  for (int i = 0; i < m; ++i)
    for (int j = valid_len; j < n; ++j) out->at(i, j) = kNegInf;
  if (detail::tracking({&x})) {
    detail::mark_output(out);
    Tape::active()->record("mask_pad_columns", {x}, out, [x, out, valid_len, m, n] {
      if (!x->requires_grad) return;
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < valid_len; ++j)
          x->grad[static_cast<size_t>(i) * n + j] += out->grad[static_cast<size_t>(i) * n + j];
    });
  }
  return out;
}

// Row-wise softmax. -inf entries map to exactly 0 and receive exactly zero
// gradient; a row that is entirely -inf is an error.
inline TensorPtr softmax_rows(const TensorPtr& x) {
  const int m = x->rows(), n = x->cols();
  auto out = Tensor::create(x->shape);
  for (int i = 0; i < m; ++i) {
    double mx = kNegInf;
    for (int j = 0; j < n; ++j) mx = std::max(mx, x->at(i, j));
    if (mx == kNegInf)
      throw ValueError("softmax_rows: degenerate row (all entries masked)");
    double total = 0.0;
    for (int j = 0; j < n; ++j) {
      const double v = x->at(i, j);
      const double e = (v == kNegInf) ? 0.0 : std::exp(v - mx);
      out->at(i, j) = e;
      total += e;
    }
    for (int j = 0; j < n; ++j) out->at(i, j) /= total;
  }
  if (detail::tracking({&x})) {
    detail::mark_output(out);
    Tape::active()->record("softmax_rows", {x}, out, [x, out, m, n] {
      if (!x->requires_grad) return;
      // dL/dx_j = a_j * (dL/da_j - sum_k dL/da_k a_k); a_j == 0 keeps 0.
      for (int i = 0; i < m; ++i) {
        double dot = 0.0;
        for (int j = 0; j < n; ++j)
          dot += out->grad[static_cast<size_t>(i) * n + j] * out->at(i, j);
        for (int j = 0; j < n; ++j)
          x->grad[static_cast<size_t>(i) * n + j] +=
              out->at(i, j) * (out->grad[static_cast<size_t>(i) * n + j] - dot);
      }
    });
  }
  return out;
}

// Mean cross entropy (nats) between logit rows and integer targets.
inline TensorPtr cross_entropy_with_logits(const TensorPtr& logits,
                                           const std::vector<int>& targets) {
  const int m = logits->rows(), n = logits->cols();
  if (static_cast<int>(targets.size()) != m)
    throw ShapeError("cross_entropy_with_logits: one target per row required");
  for (int t : targets)
    if (t < 0 || t >= n) throw ValueError("cross_entropy_with_logits: target out of range");
  auto out = Tensor::create({1});
  // Softmax rows are cached for the backward rule.
  auto probs = std::make_shared<std::vector<double>>(logits->data.size());
  double loss = 0.0;
  for (int i = 0; i < m; ++i) {
    double mx = kNegInf;
    for (int j = 0; j < n; ++j) mx = std::max(mx, logits->at(i, j));
    if (!std::isfinite(mx)) throw ValueError("cross_entropy_with_logits: non-finite logits");
    double total = 0.0;
    for (int j = 0; j < n; ++j) total += std::exp(logits->at(i, j) - mx);
    const double lse = mx + std::log(total);
    loss += lse - logits->at(i, targets[static_cast<size_t>(i)]);
    for (int j = 0; j < n; ++j)
      (*probs)[static_cast<size_t>(i) * n + j] = std::exp(logits->at(i, j) - lse);
  }
  out->data[0] = loss / m;
  if (detail::tracking({&logits})) {
    detail::mark_output(out);
    Tape::active()->record("cross_entropy", {logits}, out, [logits, out, probs, targets, m, n] {
      if (!logits->requires_grad) return;
      const double g = out->grad[0] / m;
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) {
          double d = (*probs)[static_cast<size_t>(i) * n + j];
          if (j == targets[static_cast<size_t>(i)]) d -= 1.0;
          logits->grad[static_cast<size_t>(i) * n + j] += g * d;
        }
    });
  }
  return out;
}

// Mean squared error over all entries.
inline TensorPtr mse_loss(const TensorPtr& pred, const TensorPtr& target) {
  detail::check_same_shape(pred, target, "mse_loss");
  auto out = Tensor::create({1});
  double loss = 0.0;
  for (size_t i = 0; i < pred->data.size(); ++i) {
    const double d = pred->data[i] - target->data[i];
    loss += d * d;
  }
  out->data[0] = loss / static_cast<double>(pred->numel());
  if (detail::tracking({&pred, &target})) {
    detail::mark_output(out);
    Tape::active()->record("mse_loss", {pred, target}, out, [pred, target, out] {
      const double g = 2.0 * out->grad[0] / static_cast<double>(pred->numel());
      for (size_t i = 0; i < pred->data.size(); ++i) {
        const double d = pred->data[i] - target->data[i];
        if (pred->requires_grad) pred->grad[i] += g * d;
        if (target->requires_grad) target->grad[i] -= g * d;
      }
    });
  }
  return out;
}

// Mean binary cross entropy with logits; targets in {0, 1}.
inline TensorPtr bce_with_logits(const TensorPtr& logits, const TensorPtr& targets) {
  detail::check_same_shape(logits, targets, "bce_with_logits");
  auto out = Tensor::create({1});
  double loss = 0.0;
  for (size_t i = 0; i < logits->data.size(); ++i) {
    const double z = logits->data[i];
    const double t = targets->data[i];
    // max(z, 0) - t*z + log(1 + exp(-|z|)), stable in both tails
    loss += std::max(z, 0.0) - t * z + std::log1p(std::exp(-std::abs(z)));
  }
  out->data[0] = loss / static_cast<double>(logits->numel());
  if (detail::tracking({&logits})) {
    detail::mark_output(out);
    Tape::active()->record("bce_with_logits", {logits, targets}, out, [logits, targets, out] {
      if (!logits->requires_grad) return;
      const double g = out->grad[0] / static_cast<double>(logits->numel());
      for (size_t i = 0; i < logits->data.size(); ++i) {
        const double sig = 1.0 / (1.0 + std::exp(-logits->data[i]));
        logits->grad[i] += g * (sig - targets->data[i]);
      }
    });
  }
  return out;
}

// Inverted dropout; active only when training. Mask draws come from the
// caller's rng so runs stay reproducible.
inline TensorPtr dropout(const TensorPtr& x, double rate, Rng& rng) {
  if (rate < 0.0 || rate >= 1.0) throw ValueError("dropout: rate must be in [0, 1)");
  if (rate == 0.0) return x;
  auto keep = std::make_shared<std::vector<double>>(x->data.size());
  const double inv_keep = 1.0 / (1.0 - rate);
  auto out = Tensor::create(x->shape);
  for (size_t i = 0; i < x->data.size(); ++i) {
    (*keep)[i] = rng.uniform01() < rate ? 0.0 : inv_keep;
    out->data[i] = x->data[i] * (*keep)[i];
  }
  if (detail::tracking({&x})) {
    detail::mark_output(out);
    Tape::active()->record("dropout", {x}, out, [x, out, keep] {
      if (!x->requires_grad) return;
      for (size_t i = 0; i < x->data.size(); ++i) x->grad[i] += out->grad[i] * (*keep)[i];
    });
  }
  return out;
}

// x[m x k] * w[k x n] (+ bias[n]).
inline TensorPtr linear(const TensorPtr& x, const TensorPtr& w, const TensorPtr& bias = nullptr) {
  auto out = matmul(x, w);
  return bias ? add_bias(out, bias) : out;
}

}  // namespace duet
