#pragma once

// Minimal reverse-mode differentiation over dense matrices. Each operation
// allocates a node holding its value, its parents and a backward rule that
// pushes the node's gradient into the parents. Leaf parameters persist across
// graphs and accumulate gradients until zero_grad().

#include <Eigen/Dense>

#include <cmath>
#include <functional>
#include <limits>
#include <memory>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

namespace atomkit::ad {

using Matrix = Eigen::MatrixXd;

struct Node {
  Matrix value;
  Matrix grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  Matrix& grad_ref() {
    if (grad.size() == 0) grad = Matrix::Zero(value.rows(), value.cols());
    return grad;
  }
};

class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<Node> n) : node_(std::move(n)) {}

  const Matrix& value() const { return node_->value; }
  Matrix& mutable_value() { return node_->value; }
  const Matrix& grad() const { return node_->grad; }
  Eigen::Index rows() const { return node_->value.rows(); }
  Eigen::Index cols() const { return node_->value.cols(); }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  double scalar() const { return node_->value(0, 0); }
  const std::shared_ptr<Node>& node() const { return node_; }
  bool defined() const { return static_cast<bool>(node_); }

  void zero_grad() { node_->grad.resize(0, 0); }

 private:
  std::shared_ptr<Node> node_;
};

inline Var constant(Matrix value) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  return Var(std::move(n));
}

inline Var leaf(Matrix value) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  n->requires_grad = true;
  return Var(std::move(n));
}

namespace detail {

inline Var make(Matrix value, std::vector<Var> inputs, std::function<void(Node&)> backward) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  bool any = false;
  for (const auto& v : inputs) any = any || v.requires_grad();
  if (any) {
    n->requires_grad = true;
    n->parents.reserve(inputs.size());
    for (auto& v : inputs) n->parents.push_back(v.node());
    n->backward = std::move(backward);
  }
  return Var(std::move(n));
}

inline void check_same_shape(const Var& a, const Var& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw std::invalid_argument(std::string(op) + ": shape mismatch (" + std::to_string(a.rows()) + "x" +
                                std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) + "x" +
                                std::to_string(b.cols()) + ")");
  }
}

inline Matrix& pgrad(Node& self, std::size_t k) { return self.parents[k]->grad_ref(); }
inline bool pneeds(Node& self, std::size_t k) { return self.parents[k]->requires_grad; }

}  // namespace detail

// Runs reverse accumulation from a 1x1 output.
inline void backward(const Var& out) {
  if (out.rows() != 1 || out.cols() != 1) throw std::invalid_argument("backward requires a scalar output");
  if (!out.requires_grad()) return;
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack;
  stack.emplace_back(out.node().get(), 0);
  seen.insert(out.node().get());
  while (!stack.empty()) {
    auto& [n, idx] = stack.back();
    if (idx < n->parents.size()) {
      Node* p = n->parents[idx++].get();
      if (p->requires_grad && !seen.count(p)) {
        seen.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }
  out.node()->grad_ref()(0, 0) += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward && n->grad.size() != 0) n->backward(*n);
  }
  // Interior gradients are not needed after the sweep.
  for (Node* n : order) {
    if (n->backward) n->grad.resize(0, 0);
  }
}

// ---------------------------------------------------------------- elementwise

inline Var add(const Var& a, const Var& b) {
  detail::check_same_shape(a, b, "add");
  return detail::make(a.value() + b.value(), {a, b}, [](Node& s) {
    if (detail::pneeds(s, 0)) detail::pgrad(s, 0) += s.grad;
    if (detail::pneeds(s, 1)) detail::pgrad(s, 1) += s.grad;
  });
}

inline Var sub(const Var& a, const Var& b) {
  detail::check_same_shape(a, b, "sub");
  return detail::make(a.value() - b.value(), {a, b}, [](Node& s) {
    if (detail::pneeds(s, 0)) detail::pgrad(s, 0) += s.grad;
    if (detail::pneeds(s, 1)) detail::pgrad(s, 1) -= s.grad;
  });
}

inline Var mul(const Var& a, const Var& b) {
  detail::check_same_shape(a, b, "mul");
  return detail::make(a.value().cwiseProduct(b.value()), {a, b}, [](Node& s) {
    if (detail::pneeds(s, 0)) detail::pgrad(s, 0) += s.grad.cwiseProduct(s.parents[1]->value);
    if (detail::pneeds(s, 1)) detail::pgrad(s, 1) += s.grad.cwiseProduct(s.parents[0]->value);
  });
}

inline Var scale(const Var& a, double c) {
  return detail::make(a.value() * c, {a}, [c](Node& s) { detail::pgrad(s, 0) += s.grad * c; });
}

inline Var add_sum(const std::vector<Var>& terms) {
  if (terms.empty()) throw std::invalid_argument("add_sum of nothing");
  Var acc = terms.front();
  for (std::size_t k = 1; k < terms.size(); ++k) acc = add(acc, terms[k]);
  return acc;
}

// a (M x C) + b (1 x C) broadcast over rows.
inline Var add_row(const Var& a, const Var& b) {
  if (b.rows() != 1 || b.cols() != a.cols()) throw std::invalid_argument("add_row: bias shape mismatch");
  Matrix v = a.value();
  v.rowwise() += b.value().row(0);
  return detail::make(std::move(v), {a, b}, [](Node& s) {
    if (detail::pneeds(s, 0)) detail::pgrad(s, 0) += s.grad;
    if (detail::pneeds(s, 1)) detail::pgrad(s, 1) += s.grad.colwise().sum();
  });
}

inline Var silu(const Var& a) {
  Matrix sig = (1.0 + (-a.value().array()).exp()).inverse().matrix();
  Matrix v = a.value().cwiseProduct(sig);
  return detail::make(std::move(v), {a}, [sig](Node& s) {
    const auto& x = s.parents[0]->value.array();
    const auto sg = sig.array();
    detail::pgrad(s, 0).array() += s.grad.array() * (sg * (1.0 + x * (1.0 - sg)));
  });
}

inline Var sigmoid(const Var& a) {
  Matrix sig = (1.0 + (-a.value().array()).exp()).inverse().matrix();
  return detail::make(sig, {a}, [sig](Node& s) {
    detail::pgrad(s, 0).array() += s.grad.array() * sig.array() * (1.0 - sig.array());
  });
}

// ---------------------------------------------------------------- linear algebra

inline Var matmul(const Var& a, const Var& b) {
  if (a.cols() != b.rows()) throw std::invalid_argument("matmul: inner dimension mismatch");
  return detail::make(a.value() * b.value(), {a, b}, [](Node& s) {
    if (detail::pneeds(s, 0)) detail::pgrad(s, 0).noalias() += s.grad * s.parents[1]->value.transpose();
    if (detail::pneeds(s, 1)) detail::pgrad(s, 1).noalias() += s.parents[0]->value.transpose() * s.grad;
  });
}

// ---------------------------------------------------------------- reductions

inline Var sum(const Var& a) {
  Matrix v(1, 1);
  v(0, 0) = a.value().sum();
  return detail::make(std::move(v), {a}, [](Node& s) { detail::pgrad(s, 0).array() += s.grad(0, 0); });
}

inline Var sum_rows(const Var& a) {
  return detail::make(a.value().colwise().sum(), {a}, [](Node& s) {
    detail::pgrad(s, 0).rowwise() += s.grad.row(0);
  });
}

inline Var mean_rows(const Var& a) {
  const double inv = 1.0 / static_cast<double>(a.rows());
  return detail::make(a.value().colwise().sum() * inv, {a}, [inv](Node& s) {
    detail::pgrad(s, 0).rowwise() += s.grad.row(0) * inv;
  });
}

// mean |a - target| over the entries where mask != 0 (mask empty = all).
inline Var masked_mae(const Var& a, const Matrix& target, const Matrix& mask = Matrix()) {
  if (target.rows() != a.rows() || target.cols() != a.cols()) throw std::invalid_argument("masked_mae: shape mismatch");
  Matrix m = mask.size() ? mask : Matrix::Ones(a.rows(), a.cols());
  const double count = m.sum();
  Matrix diff = a.value() - target;
  Matrix v(1, 1);
  v(0, 0) = count > 0 ? diff.cwiseAbs().cwiseProduct(m).sum() / count : 0.0;
  return detail::make(std::move(v), {a}, [diff, m, count](Node& s) {
    if (count <= 0) return;
    const double g = s.grad(0, 0) / count;
    Matrix sign = diff.unaryExpr([](double d) { return d > 0 ? 1.0 : (d < 0 ? -1.0 : 0.0); });
    detail::pgrad(s, 0) += (sign.cwiseProduct(m)) * g;
  });
}

// Mean binary cross-entropy with logits, numerically stable.
inline Var bce_with_logits(const Var& logits, const Matrix& labels) {
  if (labels.rows() != logits.rows() || labels.cols() != logits.cols()) throw std::invalid_argument("bce: shape mismatch");
  const double n = static_cast<double>(logits.value().size());
  double total = 0.0;
  for (Eigen::Index k = 0; k < logits.value().size(); ++k) {
    const double z = logits.value()(k), y = labels(k);
    total += std::max(z, 0.0) - z * y + std::log1p(std::exp(-std::abs(z)));
  }
  Matrix v(1, 1);
  v(0, 0) = total / n;
  return detail::make(std::move(v), {logits}, [labels, n](Node& s) {
    const Matrix& z = s.parents[0]->value;
    Matrix sig = (1.0 + (-z.array()).exp()).inverse().matrix();
    detail::pgrad(s, 0) += (sig - labels) * (s.grad(0, 0) / n);
  });
}

// ---------------------------------------------------------------- layout

inline Var concat_cols(const Var& a, const Var& b) {
  if (a.rows() != b.rows()) throw std::invalid_argument("concat_cols: row mismatch");
  Matrix v(a.rows(), a.cols() + b.cols());
  v << a.value(), b.value();
  const Eigen::Index ca = a.cols(), cb = b.cols();
  return detail::make(std::move(v), {a, b}, [ca, cb](Node& s) {
    if (detail::pneeds(s, 0)) detail::pgrad(s, 0) += s.grad.leftCols(ca);
    if (detail::pneeds(s, 1)) detail::pgrad(s, 1) += s.grad.rightCols(cb);
  });
}

inline Var slice_cols(const Var& a, Eigen::Index start, Eigen::Index count) {
  if (start < 0 || start + count > a.cols()) throw std::invalid_argument("slice_cols: out of range");
  return detail::make(a.value().middleCols(start, count), {a}, [start, count](Node& s) {
    detail::pgrad(s, 0).middleCols(start, count) += s.grad;
  });
}

inline Var slice_rows(const Var& a, Eigen::Index start, Eigen::Index count) {
  if (start < 0 || start + count > a.rows()) throw std::invalid_argument("slice_rows: out of range");
  return detail::make(a.value().middleRows(start, count), {a}, [start, count](Node& s) {
    detail::pgrad(s, 0).middleRows(start, count) += s.grad;
  });
}

// General entry gather: out(r, c) = a.flat[index[r * cols + c]] where the flat
// index is row-major (row * a.cols() + col); -1 yields 0.
inline Var remap(const Var& a, Eigen::Index rows, Eigen::Index cols, std::shared_ptr<const std::vector<int>> index) {
  if (static_cast<Eigen::Index>(index->size()) != rows * cols) throw std::invalid_argument("remap: index size mismatch");
  const Eigen::Index ac = a.cols();
  Matrix v = Matrix::Zero(rows, cols);
  const Matrix& av = a.value();
  for (Eigen::Index r = 0; r < rows; ++r) {
    for (Eigen::Index c = 0; c < cols; ++c) {
      const int src = (*index)[static_cast<std::size_t>(r * cols + c)];
      if (src >= 0) v(r, c) = av(src / ac, src % ac);
    }
  }
  return detail::make(std::move(v), {a}, [index, rows, cols, ac](Node& s) {
    Matrix& g = detail::pgrad(s, 0);
    for (Eigen::Index r = 0; r < rows; ++r) {
      for (Eigen::Index c = 0; c < cols; ++c) {
        const int src = (*index)[static_cast<std::size_t>(r * cols + c)];
        if (src >= 0) g(src / ac, src % ac) += s.grad(r, c);
      }
    }
  });
}

inline Var gather_rows(const Var& a, std::shared_ptr<const std::vector<int>> rows) {
  Matrix v(static_cast<Eigen::Index>(rows->size()), a.cols());
  for (std::size_t k = 0; k < rows->size(); ++k) v.row(static_cast<Eigen::Index>(k)) = a.value().row((*rows)[k]);
  return detail::make(std::move(v), {a}, [rows](Node& s) {
    Matrix& g = detail::pgrad(s, 0);
    for (std::size_t k = 0; k < rows->size(); ++k) g.row((*rows)[k]) += s.grad.row(static_cast<Eigen::Index>(k));
  });
}

// Gathers whole blocks of `block` rows: out block k = a block idx[k].
inline Var gather_blocks(const Var& a, std::shared_ptr<const std::vector<int>> idx, Eigen::Index block) {
  const auto n = static_cast<Eigen::Index>(idx->size());
  Matrix v(n * block, a.cols());
  for (Eigen::Index k = 0; k < n; ++k) v.middleRows(k * block, block) = a.value().middleRows((*idx)[k] * block, block);
  return detail::make(std::move(v), {a}, [idx, block, n](Node& s) {
    Matrix& g = detail::pgrad(s, 0);
    for (Eigen::Index k = 0; k < n; ++k) g.middleRows((*idx)[k] * block, block) += s.grad.middleRows(k * block, block);
  });
}

// Sums blocks into segments: out block seg[k] += a block k.
inline Var segment_sum_blocks(const Var& a, std::shared_ptr<const std::vector<int>> seg, Eigen::Index segments,
                              Eigen::Index block) {
  const auto n = static_cast<Eigen::Index>(seg->size());
  if (n * block != a.rows()) throw std::invalid_argument("segment_sum_blocks: row mismatch");
  Matrix v = Matrix::Zero(segments * block, a.cols());
  for (Eigen::Index k = 0; k < n; ++k) v.middleRows((*seg)[k] * block, block) += a.value().middleRows(k * block, block);
  return detail::make(std::move(v), {a}, [seg, block, n](Node& s) {
    Matrix& g = detail::pgrad(s, 0);
    for (Eigen::Index k = 0; k < n; ++k) g.middleRows(k * block, block) += s.grad.middleRows((*seg)[k] * block, block);
  });
}

// Applies a fixed P x K matrix to every K-row block of a: (M*K x C) -> (M*P x C).
inline Var block_left(std::shared_ptr<const Matrix> op, const Var& a) {
  const Eigen::Index p = op->rows(), k = op->cols();
  if (a.rows() % k != 0) throw std::invalid_argument("block_left: rows not a multiple of block size");
  const Eigen::Index m = a.rows() / k;
  Matrix v(m * p, a.cols());
  for (Eigen::Index e = 0; e < m; ++e) v.middleRows(e * p, p).noalias() = (*op) * a.value().middleRows(e * k, k);
  return detail::make(std::move(v), {a}, [op, p, k, m](Node& s) {
    Matrix& g = detail::pgrad(s, 0);
    for (Eigen::Index e = 0; e < m; ++e) g.middleRows(e * k, k).noalias() += op->transpose() * s.grad.middleRows(e * p, p);
  });
}

// Per-block fixed square operators: out block e = ops[e] (or its transpose) * a block e.
inline Var block_left_each(std::shared_ptr<const std::vector<Matrix>> ops, const Var& a, bool transpose) {
  const auto m = static_cast<Eigen::Index>(ops->size());
  if (m == 0) return constant(Matrix(0, a.cols()));
  const Eigen::Index k = (*ops)[0].rows();
  if (a.rows() != m * k) throw std::invalid_argument("block_left_each: row mismatch");
  Matrix v(m * k, a.cols());
  for (Eigen::Index e = 0; e < m; ++e) {
    const Matrix& op = (*ops)[static_cast<std::size_t>(e)];
    if (transpose) {
      v.middleRows(e * k, k).noalias() = op.transpose() * a.value().middleRows(e * k, k);
    } else {
      v.middleRows(e * k, k).noalias() = op * a.value().middleRows(e * k, k);
    }
  }
  return detail::make(std::move(v), {a}, [ops, k, m, transpose](Node& s) {
    Matrix& g = detail::pgrad(s, 0);
    for (Eigen::Index e = 0; e < m; ++e) {
      const Matrix& op = (*ops)[static_cast<std::size_t>(e)];
      if (transpose) {
        g.middleRows(e * k, k).noalias() += op * s.grad.middleRows(e * k, k);
      } else {
        g.middleRows(e * k, k).noalias() += op.transpose() * s.grad.middleRows(e * k, k);
      }
    }
  });
}

// out[e*K + k, c] = a[e*K + k, c] * gate[e, c]
inline Var scale_blocks(const Var& a, const Var& gate) {
  const Eigen::Index m = gate.rows();
  if (m == 0 || a.rows() % m != 0 || a.cols() != gate.cols()) throw std::invalid_argument("scale_blocks: shape mismatch");
  const Eigen::Index k = a.rows() / m;
  Matrix v = a.value();
  for (Eigen::Index e = 0; e < m; ++e) {
    for (Eigen::Index r = 0; r < k; ++r) v.row(e * k + r).array() *= gate.value().row(e).array();
  }
  return detail::make(std::move(v), {a, gate}, [k, m](Node& s) {
    const Matrix& av = s.parents[0]->value;
    const Matrix& gv = s.parents[1]->value;
    if (detail::pneeds(s, 0)) {
      Matrix& g = detail::pgrad(s, 0);
      for (Eigen::Index e = 0; e < m; ++e)
        for (Eigen::Index r = 0; r < k; ++r) g.row(e * k + r).array() += s.grad.row(e * k + r).array() * gv.row(e).array();
    }
    if (detail::pneeds(s, 1)) {
      Matrix& g = detail::pgrad(s, 1);
      for (Eigen::Index e = 0; e < m; ++e)
        for (Eigen::Index r = 0; r < k; ++r) g.row(e).array() += s.grad.row(e * k + r).array() * av.row(e * k + r).array();
    }
  });
}

// Softmax over rows sharing a segment id, independently per column.
inline Var segment_softmax(const Var& logits, std::shared_ptr<const std::vector<int>> seg, Eigen::Index segments) {
  const Eigen::Index n = logits.rows(), h = logits.cols();
  if (static_cast<Eigen::Index>(seg->size()) != n) throw std::invalid_argument("segment_softmax: size mismatch");
  Matrix mx = Matrix::Constant(segments, h, -std::numeric_limits<double>::infinity());
  for (Eigen::Index r = 0; r < n; ++r) mx.row((*seg)[r]) = mx.row((*seg)[r]).cwiseMax(logits.value().row(r));
  Matrix ex(n, h);
  Matrix den = Matrix::Zero(segments, h);
  for (Eigen::Index r = 0; r < n; ++r) {
    ex.row(r) = (logits.value().row(r) - mx.row((*seg)[r])).array().exp().matrix();
    den.row((*seg)[r]) += ex.row(r);
  }
  Matrix v(n, h);
  for (Eigen::Index r = 0; r < n; ++r) v.row(r) = ex.row(r).cwiseQuotient(den.row((*seg)[r]));
  return detail::make(v, {logits}, [v, seg, segments, n, h](Node& s) {
    Matrix dot = Matrix::Zero(segments, h);
    for (Eigen::Index r = 0; r < n; ++r) dot.row((*seg)[r]) += s.grad.row(r).cwiseProduct(v.row(r));
    Matrix& g = detail::pgrad(s, 0);
    for (Eigen::Index r = 0; r < n; ++r) g.row(r) += v.row(r).cwiseProduct(s.grad.row(r) - dot.row((*seg)[r]));
  });
}

// Equivariant RMS normalisation: each (entity, degree) block of (2l+1) x C
// entries is divided by its root-mean-square, then scaled per (degree, channel).
inline Var rms_norm_degrees(const Var& a, const Var& gamma, int lmax, double eps = 1e-6) {
  const Eigen::Index k = (lmax + 1) * (lmax + 1);
  const Eigen::Index c = a.cols();
  if (a.rows() % k != 0 || gamma.rows() != lmax + 1 || gamma.cols() != c) throw std::invalid_argument("rms_norm: shape mismatch");
  const Eigen::Index m = a.rows() / k;
  Matrix inv_rms(m, lmax + 1);
  Matrix v(a.rows(), c);
  for (Eigen::Index e = 0; e < m; ++e) {
    for (int l = 0; l <= lmax; ++l) {
      const auto blk = a.value().middleRows(e * k + l * l, 2 * l + 1);
      const double ms = blk.squaredNorm() / static_cast<double>((2 * l + 1) * c);
      const double ir = 1.0 / std::sqrt(ms + eps);
      inv_rms(e, l) = ir;
      for (int r = 0; r < 2 * l + 1; ++r) {
        v.row(e * k + l * l + r) = blk.row(r).cwiseProduct(gamma.value().row(l)) * ir;
      }
    }
  }
  return detail::make(std::move(v), {a, gamma}, [inv_rms, k, m, lmax, c](Node& s) {
    const Matrix& av = s.parents[0]->value;
    const Matrix& gv = s.parents[1]->value;
    const bool need_a = detail::pneeds(s, 0), need_g = detail::pneeds(s, 1);
    for (Eigen::Index e = 0; e < m; ++e) {
      for (int l = 0; l <= lmax; ++l) {
        const Eigen::Index r0 = e * k + l * l;
        const int rows = 2 * l + 1;
        const double ir = inv_rms(e, l);
        const auto x = av.middleRows(r0, rows);
        const auto gy = s.grad.middleRows(r0, rows);
        if (need_g) {
          Matrix& gg = detail::pgrad(s, 1);
          gg.row(l) += (gy.cwiseProduct(x)).colwise().sum() * ir;
        }
        if (need_a) {
          // y = x * g * ir; dL/dx = ir * (gy*g) - x * ir^3 / n * sum(gy*g*x)
          Matrix gyg = gy;
          for (int r = 0; r < rows; ++r) gyg.row(r) = gyg.row(r).cwiseProduct(gv.row(l));
          const double n = static_cast<double>(rows * c);
          const double dot = gyg.cwiseProduct(x).sum();
          detail::pgrad(s, 0).middleRows(r0, rows) += gyg * ir - x * (ir * ir * ir * dot / n);
        }
      }
    }
  });
}

// Per-degree linear map on (M*K x Cin) blocks: degree l rows are multiplied by
// weights[l] (Cin x Cout); bias (1 x Cout) is added to the l = 0 row only.
inline Var degree_linear(const Var& a, const std::vector<Var>& weights, const Var& bias, int lmax) {
  const Eigen::Index k = (lmax + 1) * (lmax + 1);
  if (static_cast<int>(weights.size()) != lmax + 1) throw std::invalid_argument("degree_linear: need one weight per degree");
  if (a.rows() % k != 0) throw std::invalid_argument("degree_linear: rows not a multiple of block size");
  const Eigen::Index m = a.rows() / k;
  const Eigen::Index cout = weights[0].cols();
  Matrix v(a.rows(), cout);
  for (Eigen::Index e = 0; e < m; ++e) {
    for (int l = 0; l <= lmax; ++l) {
      v.middleRows(e * k + l * l, 2 * l + 1).noalias() = a.value().middleRows(e * k + l * l, 2 * l + 1) * weights[l].value();
    }
    v.row(e * k) += bias.value().row(0);
  }
  std::vector<Var> inputs{a, bias};
  inputs.insert(inputs.end(), weights.begin(), weights.end());
  return detail::make(std::move(v), std::move(inputs), [k, m, lmax](Node& s) {
    const Matrix& av = s.parents[0]->value;
    if (detail::pneeds(s, 1)) {
      Matrix& gb = detail::pgrad(s, 1);
      for (Eigen::Index e = 0; e < m; ++e) gb.row(0) += s.grad.row(e * k);
    }
    for (int l = 0; l <= lmax; ++l) {
      const std::size_t wi = 2 + static_cast<std::size_t>(l);
      const Matrix& w = s.parents[wi]->value;
      const bool need_w = detail::pneeds(s, wi);
      for (Eigen::Index e = 0; e < m; ++e) {
        const auto gy = s.grad.middleRows(e * k + l * l, 2 * l + 1);
        if (detail::pneeds(s, 0)) detail::pgrad(s, 0).middleRows(e * k + l * l, 2 * l + 1).noalias() += gy * w.transpose();
        if (need_w) detail::pgrad(s, wi).noalias() += av.middleRows(e * k + l * l, 2 * l + 1).transpose() * gy;
      }
    }
  });
}

namespace detail {

// Row offsets (within a K block) of order m for degrees |m|..lmax.
inline std::vector<int> order_rows(int lmax, int m) {
  std::vector<int> rows;
  for (int l = std::abs(m); l <= lmax; ++l) rows.push_back(l * l + l + m);
  return rows;
}

// Packs rows `rows` of every K block side by side: (E x rows*C).
inline Matrix pack_rows(const Matrix& a, Eigen::Index k, const std::vector<int>& rows) {
  const Eigen::Index e_count = a.rows() / k, c = a.cols();
  Matrix out(e_count, static_cast<Eigen::Index>(rows.size()) * c);
  for (Eigen::Index e = 0; e < e_count; ++e) {
    for (std::size_t r = 0; r < rows.size(); ++r) out.block(e, static_cast<Eigen::Index>(r) * c, 1, c) = a.row(e * k + rows[r]);
  }
  return out;
}

inline void unpack_rows_add(Matrix& a, Eigen::Index k, const std::vector<int>& rows, const Matrix& packed) {
  const Eigen::Index e_count = a.rows() / k, c = a.cols();
  for (Eigen::Index e = 0; e < e_count; ++e) {
    for (std::size_t r = 0; r < rows.size(); ++r) a.row(e * k + rows[r]) += packed.block(e, static_cast<Eigen::Index>(r) * c, 1, c);
  }
}

}  // namespace detail

// The m = 0 rows of every block packed side by side: (E*K x C) -> (E x (L+1)*C).
inline Var pack_order_zero(const Var& a, int lmax) {
  const Eigen::Index k = (lmax + 1) * (lmax + 1);
  auto rows = detail::order_rows(lmax, 0);
  return detail::make(detail::pack_rows(a.value(), k, rows), {a}, [k, rows](Node& s) {
    detail::unpack_rows_add(detail::pgrad(s, 0), k, rows, s.grad);
  });
}

// Order-wise linear map in an edge-aligned frame. For m = 0 all degrees are
// mixed by w0; for m > 0 the (+m, -m) pair is treated as one complex number and
// multiplied by w1[m-1] + i w2[m-1], which commutes with rotations about z.
inline Var so2_linear(const Var& a, const Var& w0, const std::vector<Var>& w1, const std::vector<Var>& w2, int lmax) {
  const Eigen::Index k = (lmax + 1) * (lmax + 1);
  if (a.rows() % k != 0) throw std::invalid_argument("so2_linear: rows not a multiple of block size");
  if (static_cast<int>(w1.size()) != lmax || static_cast<int>(w2.size()) != lmax) throw std::invalid_argument("so2_linear: weight count");
  const Eigen::Index cin = a.cols();
  const Eigen::Index cout = w0.cols() / (lmax + 1);
  if (w0.rows() != (lmax + 1) * cin || w0.cols() != (lmax + 1) * cout) throw std::invalid_argument("so2_linear: w0 shape");
  Matrix v = Matrix::Zero(a.rows(), cout);
  {
    auto r0 = detail::order_rows(lmax, 0);
    detail::unpack_rows_add(v, k, r0, detail::pack_rows(a.value(), k, r0) * w0.value());
  }
  for (int m = 1; m <= lmax; ++m) {
    auto rp = detail::order_rows(lmax, m), rn = detail::order_rows(lmax, -m);
    Matrix xp = detail::pack_rows(a.value(), k, rp), xn = detail::pack_rows(a.value(), k, rn);
    const Matrix& p1 = w1[m - 1].value();
    const Matrix& p2 = w2[m - 1].value();
    detail::unpack_rows_add(v, k, rp, xp * p1 - xn * p2);
    detail::unpack_rows_add(v, k, rn, xn * p1 + xp * p2);
  }
  std::vector<Var> inputs{a, w0};
  inputs.insert(inputs.end(), w1.begin(), w1.end());
  inputs.insert(inputs.end(), w2.begin(), w2.end());
  return detail::make(std::move(v), std::move(inputs), [k, lmax](Node& s) {
    const Matrix& av = s.parents[0]->value;
    const bool need_a = detail::pneeds(s, 0);
    {
      auto r0 = detail::order_rows(lmax, 0);
      Matrix x0 = detail::pack_rows(av, k, r0);
      Matrix g0 = detail::pack_rows(s.grad, k, r0);
      if (need_a) detail::unpack_rows_add(detail::pgrad(s, 0), k, r0, g0 * s.parents[1]->value.transpose());
      if (detail::pneeds(s, 1)) detail::pgrad(s, 1).noalias() += x0.transpose() * g0;
    }
    for (int m = 1; m <= lmax; ++m) {
      const std::size_t i1 = 1 + static_cast<std::size_t>(m), i2 = 1 + static_cast<std::size_t>(lmax + m);
      auto rp = detail::order_rows(lmax, m), rn = detail::order_rows(lmax, -m);
      Matrix xp = detail::pack_rows(av, k, rp), xn = detail::pack_rows(av, k, rn);
      Matrix gp = detail::pack_rows(s.grad, k, rp), gn = detail::pack_rows(s.grad, k, rn);
      const Matrix& p1 = s.parents[i1]->value;
      const Matrix& p2 = s.parents[i2]->value;
      if (need_a) {
        detail::unpack_rows_add(detail::pgrad(s, 0), k, rp, gp * p1.transpose() + gn * p2.transpose());
        detail::unpack_rows_add(detail::pgrad(s, 0), k, rn, gn * p1.transpose() - gp * p2.transpose());
      }
      if (detail::pneeds(s, i1)) detail::pgrad(s, i1).noalias() += xp.transpose() * gp + xn.transpose() * gn;
      if (detail::pneeds(s, i2)) detail::pgrad(s, i2).noalias() += xp.transpose() * gn - xn.transpose() * gp;
    }
  });
}

// ---------------------------------------------------------------- parameters

struct NamedParam {
  std::string name;
  Var var;
};

class ParamStore {
 public:
  Var add(const std::string& name, Matrix init) {
    if (index_.count(name)) throw std::invalid_argument("duplicate parameter name: " + name);
    index_[name] = params_.size();
    params_.push_back(NamedParam{name, leaf(std::move(init))});
    return params_.back().var;
  }

  Var get(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::out_of_range("unknown parameter: " + name);
    return params_[it->second].var;
  }

  bool contains(const std::string& name) const { return index_.count(name) > 0; }

  const std::vector<NamedParam>& all() const { return params_; }
  std::vector<NamedParam>& all() { return params_; }

  std::size_t flat_size() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += static_cast<std::size_t>(p.var.value().size());
    return n;
  }

  Eigen::VectorXd flat_values() const {
    Eigen::VectorXd out(static_cast<Eigen::Index>(flat_size()));
    Eigen::Index o = 0;
    for (const auto& p : params_) {
      const Matrix& v = p.var.value();
      for (Eigen::Index k = 0; k < v.size(); ++k) out(o++) = v(k);
    }
    return out;
  }

  void set_flat_values(const Eigen::VectorXd& flat) {
    if (static_cast<std::size_t>(flat.size()) != flat_size()) throw std::invalid_argument("flat parameter size mismatch");
    Eigen::Index o = 0;
    for (auto& p : params_) {
      Matrix& v = p.var.mutable_value();
      for (Eigen::Index k = 0; k < v.size(); ++k) v(k) = flat(o++);
    }
  }

  Eigen::VectorXd flat_grad() const {
    Eigen::VectorXd out = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(flat_size()));
    Eigen::Index o = 0;
    for (const auto& p : params_) {
      const Matrix& g = p.var.grad();
      const Eigen::Index n = p.var.value().size();
      if (g.size() == n) {
        for (Eigen::Index k = 0; k < n; ++k) out(o + k) = g(k);
      }
      o += n;
    }
    return out;
  }

  // Name of the parameter that owns flat coordinate `index`.
  std::string owner(std::size_t index) const {
    std::size_t o = 0;
    for (const auto& p : params_) {
      const auto n = static_cast<std::size_t>(p.var.value().size());
      if (index < o + n) return p.name;
      o += n;
    }
    throw std::out_of_range("flat index out of range");
  }

  void zero_grad() {
    for (auto& p : params_) p.var.zero_grad();
  }

 private:
  std::vector<NamedParam> params_;
  std::unordered_map<std::string, std::size_t> index_;
};

// Evaluates loss(), runs backward and returns the flat gradient over `store`.
inline Eigen::VectorXd gradients(const std::function<Var()>& loss, ParamStore& store) {
  store.zero_grad();
  Var l = loss();
  backward(l);
  Eigen::VectorXd g = store.flat_grad();
  for (Eigen::Index k = 0; k < g.size(); ++k) {
    if (!std::isfinite(g(k))) throw std::runtime_error("non-finite gradient in parameter " + store.owner(static_cast<std::size_t>(k)));
  }
  return g;
}

}  // namespace atomkit::ad
