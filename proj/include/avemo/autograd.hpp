#pragma once

// Minimal reverse-mode automatic differentiation over 2-D matrices.
//
// Every value in the model is a (rows x cols) matrix. A forward pass records
// nodes that hold their value plus a closure that pushes the node's gradient
// into its parents. Parameters live outside the graph and are bound to leaf
// nodes through a Tape; after backward() the tape folds leaf gradients into
// Parameter::grad. Nodes that no trainable input reaches carry no closure, so
// frozen sub-networks run at inference cost.

#include <algorithm>
#include <cmath>
#include <functional>
#include <memory>
#include <numbers>
#include <span>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "avemo/error.hpp"
#include "avemo/tensor.hpp"

namespace avemo::ag {

template <class T>
struct Node {
  Mat<T> own;
  const Mat<T>* ext = nullptr;  // parameter leaves alias the parameter value
  Mat<T> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  const Mat<T>& value() const { return ext ? *ext : own; }
  Mat<T>& grad_buf() {
    if (grad.size() == 0) grad = Mat<T>::Zero(value().rows(), value().cols());
    return grad;
  }
};

template <class T>
class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<Node<T>> n) : node_(std::move(n)) {}

  const Mat<T>& value() const { return node_->value(); }
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
  bool requires_grad() const { return node_->requires_grad; }
  const Mat<T>& grad() const { return node_->grad; }
  const std::shared_ptr<Node<T>>& node() const { return node_; }
  explicit operator bool() const { return static_cast<bool>(node_); }

 private:
  std::shared_ptr<Node<T>> node_;
};

template <class T>
Var<T> constant(Mat<T> v) {
  auto n = std::make_shared<Node<T>>();
  n->own = std::move(v);
  return Var<T>(std::move(n));
}

/// Free leaf whose gradient is kept on the node (for input-sensitivity checks).
template <class T>
Var<T> leaf(Mat<T> v) {
  auto n = std::make_shared<Node<T>>();
  n->own = std::move(v);
  n->requires_grad = true;
  return Var<T>(std::move(n));
}

/// Role of a parameter; stage 3 tunes kBias and kNorm alongside kLora.
enum class ParamKind { kWeight, kBias, kNorm, kLora, kEmbedding, kQuery };

/// Named trainable tensor. `grad` accumulates across backward passes until
/// zero_grad(); it is mutable so const forward code can still be trained.
template <class T>
struct Parameter {
  std::string name;
  Mat<T> value;
  mutable Mat<T> grad;
  bool trainable = true;
  ParamKind kind = ParamKind::kWeight;

  Parameter() = default;
  Parameter(std::string n, Mat<T> v, ParamKind k = ParamKind::kWeight)
      : name(std::move(n)), value(std::move(v)), kind(k) {}

  void zero_grad() const { grad = Mat<T>::Zero(value.rows(), value.cols()); }
  bool has_grad() const { return grad.size() == value.size() && grad.size() > 0; }
};

/// Binds parameters to graph leaves for one forward/backward pass.
template <class T>
class Tape {
 public:
  explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}

  bool grad_enabled() const { return grad_enabled_; }

  Var<T> operator()(const Parameter<T>& p) {
    auto it = leaves_.find(&p);
    if (it != leaves_.end()) return Var<T>(it->second);
    auto n = std::make_shared<Node<T>>();
    n->ext = &p.value;
    n->requires_grad = grad_enabled_ && p.trainable;
    leaves_.emplace(&p, n);
    return Var<T>(std::move(n));
  }

  /// Reverse sweep from a scalar (1x1) loss, then fold leaf gradients into
  /// the bound parameters.
  void backward(const Var<T>& loss) {
    if (loss.rows() != 1 || loss.cols() != 1) fail(ErrorCode::kShapeMismatch, "backward needs a scalar");
    if (!loss.requires_grad()) return;
    std::vector<Node<T>*> order;
    std::unordered_set<Node<T>*> seen;
    std::vector<std::pair<Node<T>*, std::size_t>> stack{{loss.node().get(), 0}};
    seen.insert(loss.node().get());
    while (!stack.empty()) {
      auto& [n, i] = stack.back();
      if (i < n->parents.size()) {
        Node<T>* p = n->parents[i++].get();
        if (p->requires_grad && !seen.count(p)) {
          seen.insert(p);
          stack.emplace_back(p, 0);
        }
      } else {
        order.push_back(n);
        stack.pop_back();
      }
    }
    loss.node()->grad_buf()(0, 0) += T(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      Node<T>* n = *it;
      if (n->backward && n->grad.size() > 0) n->backward(*n);
    }
    for (auto& [param, leaf] : leaves_) {
      if (!leaf->requires_grad || leaf->grad.size() == 0) continue;
      if (!param->has_grad()) param->zero_grad();
      param->grad += leaf->grad;
      leaf->grad.resize(0, 0);
    }
  }

 private:
  bool grad_enabled_;
  std::unordered_map<const Parameter<T>*, std::shared_ptr<Node<T>>> leaves_;
};

namespace detail {

template <class T>
Var<T> make(Mat<T> value, std::vector<Var<T>> inputs, std::function<void(Node<T>&)> bw) {
  auto n = std::make_shared<Node<T>>();
  n->own = std::move(value);
  for (auto& v : inputs) {
    if (v.requires_grad()) n->requires_grad = true;
  }
  if (n->requires_grad) {
    for (auto& v : inputs) n->parents.push_back(v.node());
    n->backward = std::move(bw);
  }
  return Var<T>(std::move(n));
}

template <class T>
inline void accum(Node<T>& n, const Mat<T>& g) {
  if (n.requires_grad) n.grad_buf() += g;
}

}  // namespace detail

template <class T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
  if (a.cols() != b.rows()) fail(ErrorCode::kShapeMismatch, "matmul inner dimension");
  Mat<T> out = a.value() * b.value();
  return detail::make<T>(std::move(out), {a, b}, [](Node<T>& n) {
    auto& A = *n.parents[0];
    auto& B = *n.parents[1];
    if (A.requires_grad) A.grad_buf().noalias() += n.grad * B.value().transpose();
    if (B.requires_grad) B.grad_buf().noalias() += A.value().transpose() * n.grad;
  });
}

/// a * b^T
template <class T>
Var<T> matmul_nt(const Var<T>& a, const Var<T>& b) {
  if (a.cols() != b.cols()) fail(ErrorCode::kShapeMismatch, "matmul_nt inner dimension");
  Mat<T> out = a.value() * b.value().transpose();
  return detail::make<T>(std::move(out), {a, b}, [](Node<T>& n) {
    auto& A = *n.parents[0];
    auto& B = *n.parents[1];
    if (A.requires_grad) A.grad_buf().noalias() += n.grad * B.value();
    if (B.requires_grad) B.grad_buf().noalias() += n.grad.transpose() * A.value();
  });
}

template <class T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) fail(ErrorCode::kShapeMismatch, "add shapes");
  Mat<T> out = a.value() + b.value();
  return detail::make<T>(std::move(out), {a, b}, [](Node<T>& n) {
    detail::accum(*n.parents[0], n.grad);
    detail::accum(*n.parents[1], n.grad);
  });
}

/// Adds a 1 x cols row to every row of `a`.
template <class T>
Var<T> add_row(const Var<T>& a, const Var<T>& row) {
  if (row.rows() != 1 || row.cols() != a.cols()) fail(ErrorCode::kShapeMismatch, "add_row shapes");
  Mat<T> out = a.value().rowwise() + RowVec<T>(row.value().row(0));
  return detail::make<T>(std::move(out), {a, row}, [](Node<T>& n) {
    detail::accum(*n.parents[0], n.grad);
    if (n.parents[1]->requires_grad) n.parents[1]->grad_buf() += n.grad.colwise().sum();
  });
}

template <class T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) fail(ErrorCode::kShapeMismatch, "mul shapes");
  Mat<T> out = a.value().cwiseProduct(b.value());
  return detail::make<T>(std::move(out), {a, b}, [](Node<T>& n) {
    auto& A = *n.parents[0];
    auto& B = *n.parents[1];
    if (A.requires_grad) A.grad_buf() += n.grad.cwiseProduct(B.value());
    if (B.requires_grad) B.grad_buf() += n.grad.cwiseProduct(A.value());
  });
}

template <class T>
Var<T> scale(const Var<T>& a, T s) {
  Mat<T> out = a.value() * s;
  return detail::make<T>(std::move(out), {a}, [s](Node<T>& n) { detail::accum<T>(*n.parents[0], n.grad * s); });
}

/// tanh approximation of GELU.
template <class T>
Var<T> gelu(const Var<T>& a) {
  const T c = std::sqrt(T(2) / std::numbers::pi_v<T>);
  const T k = T(0.044715);
  Mat<T> out = a.value().unaryExpr([=](T x) { return T(0.5) * x * (T(1) + std::tanh(c * (x + k * x * x * x))); });
  return detail::make<T>(std::move(out), {a}, [=](Node<T>& n) {
    auto& A = *n.parents[0];
    Mat<T> d = A.value().unaryExpr([=](T x) {
      const T t = std::tanh(c * (x + k * x * x * x));
      return T(0.5) * (T(1) + t) + T(0.5) * x * (T(1) - t * t) * c * (T(1) + T(3) * k * x * x);
    });
    detail::accum<T>(A, n.grad.cwiseProduct(d));
  });
}

/// Row-wise layer normalization with learned gain and shift (1 x cols each).
template <class T>
Var<T> layer_norm(const Var<T>& x, const Var<T>& gain, const Var<T>& shift, T eps = T(1e-5)) {
  const auto rows = x.rows(), cols = x.cols();
  if (gain.cols() != cols || shift.cols() != cols) fail(ErrorCode::kShapeMismatch, "layer_norm shapes");
  Mat<T> xhat(rows, cols);
  std::vector<T> inv_std(static_cast<std::size_t>(rows));
  for (Eigen::Index i = 0; i < rows; ++i) {
    const auto r = x.value().row(i);
    const T mean = r.mean();
    const T var = (r.array() - mean).square().mean();
    inv_std[i] = T(1) / std::sqrt(var + eps);
    xhat.row(i) = (r.array() - mean) * inv_std[i];
  }
  Mat<T> out = (xhat.array().rowwise() * gain.value().row(0).array()).matrix();
  out.rowwise() += RowVec<T>(shift.value().row(0));
  return detail::make<T>(std::move(out), {x, gain, shift},
                         [xhat = std::move(xhat), inv_std = std::move(inv_std)](Node<T>& n) {
    auto& X = *n.parents[0];
    auto& G = *n.parents[1];
    auto& B = *n.parents[2];
    if (G.requires_grad) G.grad_buf() += n.grad.cwiseProduct(xhat).colwise().sum();
    if (B.requires_grad) B.grad_buf() += n.grad.colwise().sum();
    if (X.requires_grad) {
      Mat<T> dxhat = (n.grad.array().rowwise() * G.value().row(0).array()).matrix();
      auto& dx = X.grad_buf();
      for (Eigen::Index i = 0; i < dxhat.rows(); ++i) {
        const T m1 = dxhat.row(i).mean();
        const T m2 = dxhat.row(i).cwiseProduct(xhat.row(i)).mean();
        dx.row(i).array() += inv_std[i] * (dxhat.row(i).array() - m1 - xhat.row(i).array() * m2);
      }
    }
  });
}

/// Row softmax. With `causal`, entry (i, j) is masked for j > i + offset.
template <class T>
Var<T> softmax_rows(const Var<T>& x, bool causal = false, Eigen::Index offset = 0) {
  Mat<T> p(x.rows(), x.cols());
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    const Eigen::Index limit = causal ? std::min<Eigen::Index>(x.cols(), i + offset + 1) : x.cols();
    const auto r = x.value().row(i).head(limit);
    const T mx = r.maxCoeff();
    auto e = (r.array() - mx).exp();
    const T z = e.sum();
    p.row(i).head(limit) = e / z;
    if (limit < x.cols()) p.row(i).tail(x.cols() - limit).setZero();
  }
  Mat<T> saved = p;
  return detail::make<T>(std::move(p), {x}, [saved = std::move(saved)](Node<T>& n) {
    Eigen::Matrix<T, Eigen::Dynamic, 1> dot = n.grad.cwiseProduct(saved).rowwise().sum();
    Mat<T> dx = saved.cwiseProduct(n.grad.colwise() - dot);
    detail::accum<T>(*n.parents[0], dx);
  });
}

template <class T>
Var<T> log_softmax_rows(const Var<T>& x) {
  Mat<T> out(x.rows(), x.cols());
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    const auto r = x.value().row(i);
    const T mx = r.maxCoeff();
    const T lse = mx + std::log((r.array() - mx).exp().sum());
    out.row(i) = r.array() - lse;
  }
  Mat<T> saved = out;
  return detail::make<T>(std::move(out), {x}, [saved = std::move(saved)](Node<T>& n) {
    Eigen::Matrix<T, Eigen::Dynamic, 1> gsum = n.grad.rowwise().sum();
    Mat<T> dx = n.grad - (saved.array().exp().colwise() * gsum.array()).matrix();
    detail::accum<T>(*n.parents[0], dx);
  });
}

template <class T>
Var<T> slice_cols(const Var<T>& x, Eigen::Index start, Eigen::Index n) {
  if (start < 0 || start + n > x.cols()) fail(ErrorCode::kShapeMismatch, "slice_cols range");
  Mat<T> out = x.value().middleCols(start, n);
  return detail::make<T>(std::move(out), {x}, [start, n](Node<T>& node) {
    auto& X = *node.parents[0];
    if (X.requires_grad) X.grad_buf().middleCols(start, n) += node.grad;
  });
}

template <class T>
Var<T> slice_rows(const Var<T>& x, Eigen::Index start, Eigen::Index n) {
  if (start < 0 || start + n > x.rows()) fail(ErrorCode::kShapeMismatch, "slice_rows range");
  Mat<T> out = x.value().middleRows(start, n);
  return detail::make<T>(std::move(out), {x}, [start, n](Node<T>& node) {
    auto& X = *node.parents[0];
    if (X.requires_grad) X.grad_buf().middleRows(start, n) += node.grad;
  });
}

template <class T>
Var<T> concat_cols(const std::vector<Var<T>>& parts) {
  if (parts.empty()) fail(ErrorCode::kEmptyInput, "concat_cols of nothing");
  Eigen::Index cols = 0;
  for (const auto& p : parts) {
    if (p.rows() != parts[0].rows()) fail(ErrorCode::kShapeMismatch, "concat_cols rows");
    cols += p.cols();
  }
  Mat<T> out(parts[0].rows(), cols);
  Eigen::Index at = 0;
  for (const auto& p : parts) {
    out.middleCols(at, p.cols()) = p.value();
    at += p.cols();
  }
  return detail::make<T>(std::move(out), parts, [](Node<T>& n) {
    Eigen::Index at = 0;
    for (auto& p : n.parents) {
      const auto c = p->value().cols();
      if (p->requires_grad) p->grad_buf() += n.grad.middleCols(at, c);
      at += c;
    }
  });
}

template <class T>
Var<T> concat_rows(const std::vector<Var<T>>& parts) {
  if (parts.empty()) fail(ErrorCode::kEmptyInput, "concat_rows of nothing");
  Eigen::Index rows = 0;
  for (const auto& p : parts) {
    if (p.cols() != parts[0].cols()) fail(ErrorCode::kShapeMismatch, "concat_rows cols");
    rows += p.rows();
  }
  Mat<T> out(rows, parts[0].cols());
  Eigen::Index at = 0;
  for (const auto& p : parts) {
    out.middleRows(at, p.rows()) = p.value();
    at += p.rows();
  }
  return detail::make<T>(std::move(out), parts, [](Node<T>& n) {
    Eigen::Index at = 0;
    for (auto& p : n.parents) {
      const auto r = p->value().rows();
      if (p->requires_grad) p->grad_buf() += n.grad.middleRows(at, r);
      at += r;
    }
  });
}

/// Embedding lookup: row i of the result is row ids[i] of `table`.
template <class T>
Var<T> gather_rows(const Var<T>& table, std::vector<int> ids) {
  Mat<T> out(static_cast<Eigen::Index>(ids.size()), table.cols());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || ids[i] >= table.rows()) fail(ErrorCode::kShapeMismatch, "gather_rows id out of range");
    out.row(static_cast<Eigen::Index>(i)) = table.value().row(ids[i]);
  }
  return detail::make<T>(std::move(out), {table}, [ids = std::move(ids)](Node<T>& n) {
    auto& Tb = *n.parents[0];
    if (!Tb.requires_grad) return;
    auto& g = Tb.grad_buf();
    for (std::size_t i = 0; i < ids.size(); ++i) g.row(ids[i]) += n.grad.row(static_cast<Eigen::Index>(i));
  });
}

/// im2col for 1-D convolution over rows: output row t concatenates input rows
/// t*stride - pad + k for k in [0, kernel), zero outside the input.
template <class T>
Var<T> stack_windows(const Var<T>& x, int kernel, int stride, int pad) {
  const Eigen::Index in_rows = x.rows(), c = x.cols();
  const Eigen::Index out_rows = (in_rows + 2 * pad - kernel) / stride + 1;
  if (out_rows < 1) fail(ErrorCode::kShapeMismatch, "stack_windows input too short");
  Mat<T> out = Mat<T>::Zero(out_rows, c * kernel);
  for (Eigen::Index t = 0; t < out_rows; ++t) {
    for (int k = 0; k < kernel; ++k) {
      const Eigen::Index src = t * stride - pad + k;
      if (src >= 0 && src < in_rows) out.block(t, k * c, 1, c) = x.value().row(src);
    }
  }
  return detail::make<T>(std::move(out), {x}, [=](Node<T>& n) {
    auto& X = *n.parents[0];
    if (!X.requires_grad) return;
    auto& g = X.grad_buf();
    for (Eigen::Index t = 0; t < out_rows; ++t) {
      for (int k = 0; k < kernel; ++k) {
        const Eigen::Index src = t * stride - pad + k;
        if (src >= 0 && src < in_rows) g.row(src) += n.grad.block(t, k * c, 1, c);
      }
    }
  });
}

/// Sum of -logprob[i, target[i]] over rows with mask[i] set, optionally
/// divided by the number of such rows. Returns a 1x1 node.
template <class T>
Var<T> masked_nll(const Var<T>& logprob, std::span<const int> targets, std::span<const bool> mask, bool mean) {
  if (static_cast<Eigen::Index>(targets.size()) != logprob.rows() || mask.size() != targets.size())
    fail(ErrorCode::kShapeMismatch, "masked_nll length mismatch");
  std::vector<std::pair<Eigen::Index, int>> picks;
  for (std::size_t i = 0; i < mask.size(); ++i) {
    if (!mask[i]) continue;
    if (targets[i] < 0 || targets[i] >= logprob.cols()) fail(ErrorCode::kShapeMismatch, "masked_nll target id");
    picks.emplace_back(static_cast<Eigen::Index>(i), targets[i]);
  }
  if (picks.empty()) fail(ErrorCode::kEmptyTarget, "no masked target positions");
  T total = 0;
  for (auto [r, c] : picks) total -= logprob.value()(r, c);
  const T denom = mean ? static_cast<T>(picks.size()) : T(1);
  Mat<T> out(1, 1);
  out(0, 0) = total / denom;
  return detail::make<T>(std::move(out), {logprob}, [picks = std::move(picks), denom](Node<T>& n) {
    auto& L = *n.parents[0];
    if (!L.requires_grad) return;
    auto& g = L.grad_buf();
    const T s = n.grad(0, 0) / denom;
    for (auto [r, c] : picks) g(r, c) -= s;
  });
}

template <class T>
Var<T> masked_nll(const Var<T>& logprob, std::span<const int> targets, const std::vector<bool>& mask, bool mean) {
  std::unique_ptr<bool[]> flat(new bool[mask.size()]);
  std::copy(mask.begin(), mask.end(), flat.get());
  return masked_nll(logprob, targets, std::span<const bool>(flat.get(), mask.size()), mean);
}

/// Mean over all entries, 1x1.
template <class T>
Var<T> mean_all(const Var<T>& x) {
  Mat<T> out(1, 1);
  out(0, 0) = x.value().mean();
  const T inv = T(1) / static_cast<T>(x.value().size());
  return detail::make<T>(std::move(out), {x}, [inv](Node<T>& n) {
    auto& X = *n.parents[0];
    if (X.requires_grad) X.grad_buf().array() += n.grad(0, 0) * inv;
  });
}

/// Sum of elementwise products with a constant weight matrix, 1x1. Used to
/// build arbitrary scalar probes for gradient checks.
template <class T>
Var<T> dot_const(const Var<T>& x, const Mat<T>& w) {
  if (w.rows() != x.rows() || w.cols() != x.cols()) fail(ErrorCode::kShapeMismatch, "dot_const shapes");
  Mat<T> out(1, 1);
  out(0, 0) = x.value().cwiseProduct(w).sum();
  return detail::make<T>(std::move(out), {x}, [w](Node<T>& n) {
    detail::accum<T>(*n.parents[0], w * n.grad(0, 0));
  });
}

}  // namespace avemo::ag
