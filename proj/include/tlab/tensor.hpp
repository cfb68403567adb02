#pragma once

// Reverse-mode autodiff over dense double matrices.
//
// Every Tensor is a cheap handle onto a shared Node holding values, a grad
// buffer and the backward closure that produced it. Ops build a DAG; a Tape
// snapshots the DAG below a scalar root in topological order and runs the
// reverse sweep. All tensors are rank-2 (vectors are 1 x n, scalars 1 x 1),
// which keeps shapes and broadcasting rules trivial.
//
// Grads of every node are retained after backward so diagnostics can read
// the gradient at any intermediate activation. A node used as input to
// several ops accumulates (sums) the grads flowing back from each use.
// Any non-finite value appearing in a forward result or in a grad aborts
// with numeric_error: silent NaN propagation is worse than a crash here.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <vector>

#include "tlab/rng.hpp"

namespace tlab {

struct numeric_error : std::runtime_error {
  explicit numeric_error(const std::string& what) : std::runtime_error(what) {}
};

struct shape_error : std::invalid_argument {
  explicit shape_error(const std::string& what) : std::invalid_argument(what) {}
};

namespace detail {

struct Node {
  std::size_t rows = 0, cols = 0;
  std::vector<double> val;
  std::vector<double> grad;  // sized lazily, kept zero until backward
  bool requires_grad = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> parents;
  // pulls from this->grad and accumulates into parents' grad buffers
  std::function<void(Node&)> backward_fn;
  bool backward_ran = false;

  std::size_t numel() const { return rows * cols; }
  void ensure_grad() {
    if (grad.size() != val.size()) grad.assign(val.size(), 0.0);
  }
};

inline void check_finite(const std::vector<double>& v, const char* op, const char* what) {
  for (double x : v) {
    if (!std::isfinite(x)) {
      throw numeric_error(std::string("non-finite ") + what + " in op '" + op + "'");
    }
  }
}

}  // namespace detail

class Tensor {
 public:
  Tensor() = default;

  static Tensor leaf(std::size_t rows, std::size_t cols, bool requires_grad = false) {
    auto n = std::make_shared<detail::Node>();
    n->rows = rows;
    n->cols = cols;
    n->val.assign(rows * cols, 0.0);
    n->requires_grad = requires_grad;
    return Tensor(std::move(n));
  }

  static Tensor from(std::size_t rows, std::size_t cols, std::vector<double> values,
                     bool requires_grad = false) {
    if (values.size() != rows * cols) throw shape_error("Tensor::from: size mismatch");
    auto t = leaf(rows, cols, requires_grad);
    t.node_->val = std::move(values);
    return t;
  }

  static Tensor scalar(double v) { return from(1, 1, {v}); }

  bool defined() const { return node_ != nullptr; }
  std::size_t rows() const { return node_->rows; }
  std::size_t cols() const { return node_->cols; }
  std::size_t numel() const { return node_->numel(); }
  bool requires_grad() const { return node_->requires_grad; }
  bool is_leaf() const { return !node_->backward_fn; }

  std::vector<double>& values() { return node_->val; }
  const std::vector<double>& values() const { return node_->val; }
  double item() const {
    if (numel() != 1) throw shape_error("item(): tensor is not scalar");
    return node_->val[0];
  }

  // Grad buffer; zeros if backward has not touched this node yet.
  std::vector<double>& grad() {
    node_->ensure_grad();
    return node_->grad;
  }
  const std::vector<double>& grad() const {
    node_->ensure_grad();
    return node_->grad;
  }
  void zero_grad() { node_->grad.assign(node_->val.size(), 0.0); }

  double operator()(std::size_t r, std::size_t c) const { return node_->val[r * cols() + c]; }
  double& at(std::size_t r, std::size_t c) { return node_->val[r * cols() + c]; }

  detail::Node* node() const { return node_.get(); }
  const std::shared_ptr<detail::Node>& node_ptr() const { return node_; }

  explicit Tensor(std::shared_ptr<detail::Node> n) : node_(std::move(n)) {}

 private:
  std::shared_ptr<detail::Node> node_;
};

namespace detail {

// Builds the result node for an op: shape, parents, closure, finite check.
inline Tensor make_op(const char* op, std::size_t rows, std::size_t cols,
                      std::vector<std::shared_ptr<Node>> parents,
                      std::vector<double> val, std::function<void(Node&)> backward_fn) {
  check_finite(val, op, "forward value");
  auto n = std::make_shared<Node>();
  n->rows = rows;
  n->cols = cols;
  n->val = std::move(val);
  n->op = op;
  bool needs = false;
  for (auto& p : parents) needs = needs || p->requires_grad;
  n->requires_grad = needs;
  if (needs) {
    n->parents = std::move(parents);
    n->backward_fn = std::move(backward_fn);
  }
  return Tensor(std::move(n));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Tape: the recorded graph below a scalar root, in topological order.
// One backward sweep per tape; building a fresh forward graph (the normal
// thing between training steps) gives a fresh tape.

class Tape {
 public:
  explicit Tape(const Tensor& root) : root_(root.node_ptr()) {
    if (!root_) throw std::invalid_argument("Tape: undefined root");
    if (root_->numel() != 1) throw shape_error("Tape: backward root must be scalar");
    // iterative post-order DFS; order_ ends up topologically sorted
    std::unordered_set<detail::Node*> seen;
    std::vector<std::pair<detail::Node*, std::size_t>> stack;
    stack.emplace_back(root_.get(), 0);
    seen.insert(root_.get());
    while (!stack.empty()) {
      auto& [n, next] = stack.back();
      if (next < n->parents.size()) {
        detail::Node* p = n->parents[next++].get();
        if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
      } else {
        order_.push_back(n);
        stack.pop_back();
      }
    }
  }

  // Seeds d(root)/d(root) = 1 and runs the reverse sweep. Errors if this
  // graph has already been swept (grads would silently double-accumulate).
  void backward() {
    if (root_->backward_ran) {
      throw std::logic_error("backward() called twice on the same graph without reset");
    }
    for (detail::Node* n : order_) {
      n->ensure_grad();
      n->backward_ran = true;
    }
    root_->grad[0] = 1.0;
    for (auto it = order_.rbegin(); it != order_.rend(); ++it) {
      detail::Node* n = *it;
      if (n->backward_fn) {
        n->backward_fn(*n);
        // check what the closure just wrote: the parents' accumulators
        for (auto& p : n->parents)
          if (p->requires_grad) detail::check_finite(p->grad, n->op, "grad");
      }
    }
  }

  std::size_t size() const { return order_.size(); }

 private:
  std::shared_ptr<detail::Node> root_;
  std::vector<detail::Node*> order_;  // parents before children
};

inline void backward(const Tensor& loss) { Tape(loss).backward(); }

// ---------------------------------------------------------------------------
// Ops

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.cols() != b.rows()) throw shape_error("matmul: inner dimensions differ");
  std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  std::vector<double> out(m * n, 0.0);
  const auto& av = a.values();
  const auto& bv = b.values();
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t p = 0; p < k; ++p) {
      double aik = av[i * k + p];
      if (aik == 0.0) continue;
      const double* brow = &bv[p * n];
      double* orow = &out[i * n];
      for (std::size_t j = 0; j < n; ++j) orow[j] += aik * brow[j];
    }
  }
  auto an = a.node_ptr();
  auto bn = b.node_ptr();
  return detail::make_op(
      "matmul", m, n, {an, bn}, std::move(out), [an, bn, m, k, n](detail::Node& self) {
        const auto& g = self.grad;
        if (an->requires_grad) {
          an->ensure_grad();
          // dA[i,p] += sum_j g[i,j] * B[p,j]
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t p = 0; p < k; ++p) {
              double acc = 0.0;
              const double* grow = &g[i * n];
              const double* brow = &bn->val[p * n];
              for (std::size_t j = 0; j < n; ++j) acc += grow[j] * brow[j];
              an->grad[i * k + p] += acc;
            }
        }
        if (bn->requires_grad) {
          bn->ensure_grad();
          // dB[p,j] += sum_i A[i,p] * g[i,j]
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t p = 0; p < k; ++p) {
              double aip = an->val[i * k + p];
              if (aip == 0.0) continue;
              const double* grow = &g[i * n];
              double* brow = &bn->grad[p * n];
              for (std::size_t j = 0; j < n; ++j) brow[j] += aip * grow[j];
            }
        }
      });
}

// a . b^T without materializing the transpose (attention scores, K/V2 paths)
inline Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  if (a.cols() != b.cols()) throw shape_error("matmul_nt: inner dimensions differ");
  std::size_t m = a.rows(), k = a.cols(), n = b.rows();
  std::vector<double> out(m * n, 0.0);
  const auto& av = a.values();
  const auto& bv = b.values();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      double acc = 0.0;
      const double* arow = &av[i * k];
      const double* brow = &bv[j * k];
      for (std::size_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
      out[i * n + j] = acc;
    }
  auto an = a.node_ptr();
  auto bn = b.node_ptr();
  return detail::make_op(
      "matmul_nt", m, n, {an, bn}, std::move(out), [an, bn, m, k, n](detail::Node& self) {
        const auto& g = self.grad;
        if (an->requires_grad) {
          an->ensure_grad();
          // dA = g . B
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) {
              double gij = g[i * n + j];
              if (gij == 0.0) continue;
              const double* brow = &bn->val[j * k];
              double* arow = &an->grad[i * k];
              for (std::size_t p = 0; p < k; ++p) arow[p] += gij * brow[p];
            }
        }
        if (bn->requires_grad) {
          bn->ensure_grad();
          // dB = g^T . A
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) {
              double gij = g[i * n + j];
              if (gij == 0.0) continue;
              const double* arow = &an->val[i * k];
              double* brow = &bn->grad[j * k];
              for (std::size_t p = 0; p < k; ++p) brow[p] += gij * arow[p];
            }
        }
      });
}

inline Tensor add(const Tensor& a, const Tensor& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) throw shape_error("add: shape mismatch");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] + b.values()[i];
  auto an = a.node_ptr();
  auto bn = b.node_ptr();
  return detail::make_op("add", a.rows(), a.cols(), {an, bn}, std::move(out),
                         [an, bn](detail::Node& self) {
                           if (an->requires_grad) {
                             an->ensure_grad();
                             for (std::size_t i = 0; i < self.grad.size(); ++i)
                               an->grad[i] += self.grad[i];
                           }
                           if (bn->requires_grad) {
                             bn->ensure_grad();
                             for (std::size_t i = 0; i < self.grad.size(); ++i)
                               bn->grad[i] += self.grad[i];
                           }
                         });
}

inline Tensor mul_scalar(const Tensor& a, double c) {
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = c * a.values()[i];
  auto an = a.node_ptr();
  return detail::make_op("mul_scalar", a.rows(), a.cols(), {an}, std::move(out),
                         [an, c](detail::Node& self) {
                           if (!an->requires_grad) return;
                           an->ensure_grad();
                           for (std::size_t i = 0; i < self.grad.size(); ++i)
                             an->grad[i] += c * self.grad[i];
                         });
}

// x[m x d] scaled columnwise by w[1 x d] (broadcast over rows); realizes
// the omega product on the residual shortcut.
inline Tensor scale_elementwise(const Tensor& x, const Tensor& w) {
  if (w.rows() != 1 || w.cols() != x.cols())
    throw shape_error("scale_elementwise: weight must be 1 x cols(x)");
  std::size_t m = x.rows(), d = x.cols();
  std::vector<double> out(m * d);
  for (std::size_t t = 0; t < m; ++t)
    for (std::size_t j = 0; j < d; ++j) out[t * d + j] = x.values()[t * d + j] * w.values()[j];
  auto xn = x.node_ptr();
  auto wn = w.node_ptr();
  return detail::make_op(
      "scale_elementwise", m, d, {xn, wn}, std::move(out), [xn, wn, m, d](detail::Node& self) {
        if (xn->requires_grad) {
          xn->ensure_grad();
          for (std::size_t t = 0; t < m; ++t)
            for (std::size_t j = 0; j < d; ++j)
              xn->grad[t * d + j] += self.grad[t * d + j] * wn->val[j];
        }
        if (wn->requires_grad) {
          wn->ensure_grad();
          for (std::size_t t = 0; t < m; ++t)
            for (std::size_t j = 0; j < d; ++j)
              wn->grad[j] += self.grad[t * d + j] * xn->val[t * d + j];
        }
      });
}

inline Tensor relu(const Tensor& x) {
  std::vector<double> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.values()[i] > 0.0 ? x.values()[i] : 0.0;
  auto xn = x.node_ptr();
  return detail::make_op("relu", x.rows(), x.cols(), {xn}, std::move(out),
                         [xn](detail::Node& self) {
                           if (!xn->requires_grad) return;
                           xn->ensure_grad();
                           for (std::size_t i = 0; i < self.grad.size(); ++i)
                             if (xn->val[i] > 0.0) xn->grad[i] += self.grad[i];
                         });
}

// Softmax over each row. An optional 0/1 keep-mask (numel entries) restricts
// each row's support: masked-out entries get exactly zero probability and
// zero grad, which is how causal attention is realized. A fully masked row
// is an error rather than a silent uniform fallback.
inline Tensor row_softmax(const Tensor& x, const std::vector<std::uint8_t>* keep = nullptr) {
  if (keep && keep->size() != x.numel()) throw shape_error("row_softmax: mask size mismatch");
  std::size_t m = x.rows(), n = x.cols();
  std::vector<double> out(m * n, 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    double mx = -1e308;
    bool any = false;
    for (std::size_t j = 0; j < n; ++j) {
      if (keep && !(*keep)[i * n + j]) continue;
      any = true;
      mx = std::max(mx, x.values()[i * n + j]);
    }
    if (!any) throw std::invalid_argument("row_softmax: fully masked row");
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      if (keep && !(*keep)[i * n + j]) continue;
      double e = std::exp(x.values()[i * n + j] - mx);
      out[i * n + j] = e;
      z += e;
    }
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] /= z;
  }
  auto xn = x.node_ptr();
  return detail::make_op(
      "row_softmax", m, n, {xn}, std::move(out), [xn, m, n](detail::Node& self) {
        if (!xn->requires_grad) return;
        xn->ensure_grad();
        // dx = (g - sum_j g.y) * y per row; masked entries have y = 0
        for (std::size_t i = 0; i < m; ++i) {
          double dot = 0.0;
          for (std::size_t j = 0; j < n; ++j) dot += self.grad[i * n + j] * self.val[i * n + j];
          for (std::size_t j = 0; j < n; ++j)
            xn->grad[i * n + j] += (self.grad[i * n + j] - dot) * self.val[i * n + j];
        }
      });
}

// LayerNorm over each row with learned gain/bias (both 1 x d). Population
// variance (divide by d) and eps inside the square root.
inline Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& nu,
                         double eps = 1e-5) {
  std::size_t m = x.rows(), d = x.cols();
  if (gamma.rows() != 1 || gamma.cols() != d || nu.rows() != 1 || nu.cols() != d)
    throw shape_error("layer_norm: gain/bias must be 1 x cols(x)");
  if (d == 0) throw shape_error("layer_norm: empty rows");
  std::vector<double> out(m * d);
  auto xhat = std::make_shared<std::vector<double>>(m * d);
  auto inv_sigma = std::make_shared<std::vector<double>>(m);
  for (std::size_t t = 0; t < m; ++t) {
    const double* row = &x.values()[t * d];
    double mu = 0.0;
    for (std::size_t j = 0; j < d; ++j) mu += row[j];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<double>(d);
    double is = 1.0 / std::sqrt(var + eps);
    (*inv_sigma)[t] = is;
    for (std::size_t j = 0; j < d; ++j) {
      double xh = (row[j] - mu) * is;
      (*xhat)[t * d + j] = xh;
      out[t * d + j] = gamma.values()[j] * xh + nu.values()[j];
    }
  }
  auto xn = x.node_ptr();
  auto gn = gamma.node_ptr();
  auto nn = nu.node_ptr();
  return detail::make_op(
      "layer_norm", m, d, {xn, gn, nn}, std::move(out),
      [xn, gn, nn, xhat, inv_sigma, m, d](detail::Node& self) {
        double dd = static_cast<double>(d);
        for (std::size_t t = 0; t < m; ++t) {
          const double* g = &self.grad[t * d];
          const double* xh = &(*xhat)[t * d];
          if (gn->requires_grad) {
            gn->ensure_grad();
            for (std::size_t j = 0; j < d; ++j) gn->grad[j] += g[j] * xh[j];
          }
          if (nn->requires_grad) {
            nn->ensure_grad();
            for (std::size_t j = 0; j < d; ++j) nn->grad[j] += g[j];
          }
          if (xn->requires_grad) {
            xn->ensure_grad();
            // dxhat = g * gamma; dx = is * (dxhat - mean(dxhat) - xhat * mean(dxhat*xhat))
            double s1 = 0.0, s2 = 0.0;
            for (std::size_t j = 0; j < d; ++j) {
              double dxh = g[j] * gn->val[j];
              s1 += dxh;
              s2 += dxh * xh[j];
            }
            s1 /= dd;
            s2 /= dd;
            double is = (*inv_sigma)[t];
            for (std::size_t j = 0; j < d; ++j) {
              double dxh = g[j] * gn->val[j];
              xn->grad[t * d + j] += is * (dxh - s1 - xh[j] * s2);
            }
          }
        }
      });
}

// Inverted dropout: at train time each element is kept with probability
// 1 - p and scaled by 1/(1 - p); at eval (or p == 0) it is the identity.
inline Tensor dropout(const Tensor& x, double p, Rng& rng, bool train) {
  if (!(p >= 0.0 && p < 1.0)) throw std::invalid_argument("dropout: p must be in [0, 1)");
  if (!train || p == 0.0) return x;
  auto mask = std::make_shared<std::vector<double>>(x.numel());
  double scale = 1.0 / (1.0 - p);
  std::vector<double> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) {
    double m = rng.uniform() >= p ? scale : 0.0;
    (*mask)[i] = m;
    out[i] = x.values()[i] * m;
  }
  auto xn = x.node_ptr();
  return detail::make_op("dropout", x.rows(), x.cols(), {xn}, std::move(out),
                         [xn, mask](detail::Node& self) {
                           if (!xn->requires_grad) return;
                           xn->ensure_grad();
                           for (std::size_t i = 0; i < self.grad.size(); ++i)
                             xn->grad[i] += self.grad[i] * (*mask)[i];
                         });
}

// Mean negative log-likelihood of integer targets under row-wise softmax
// of the logits. Stable log-sum-exp; backward is (softmax - onehot)/rows.
inline Tensor cross_entropy(const Tensor& logits, const std::vector<int>& targets) {
  std::size_t m = logits.rows(), v = logits.cols();
  if (targets.size() != m) throw shape_error("cross_entropy: one target per row required");
  auto probs = std::make_shared<std::vector<double>>(m * v);
  double loss = 0.0;
  for (std::size_t i = 0; i < m; ++i) {
    int t = targets[i];
    if (t < 0 || static_cast<std::size_t>(t) >= v)
      throw std::out_of_range("cross_entropy: target id outside vocabulary");
    const double* row = &logits.values()[i * v];
    double mx = row[0];
    for (std::size_t j = 1; j < v; ++j) mx = std::max(mx, row[j]);
    double z = 0.0;
    for (std::size_t j = 0; j < v; ++j) z += std::exp(row[j] - mx);
    double logz = mx + std::log(z);
    loss += logz - row[t];
    for (std::size_t j = 0; j < v; ++j) (*probs)[i * v + j] = std::exp(row[j] - logz);
  }
  loss /= static_cast<double>(m);
  auto ln = logits.node_ptr();
  auto tgt = std::make_shared<std::vector<int>>(targets);
  return detail::make_op("cross_entropy", 1, 1, {ln}, {loss},
                         [ln, probs, tgt, m, v](detail::Node& self) {
                           if (!ln->requires_grad) return;
                           ln->ensure_grad();
                           double g = self.grad[0] / static_cast<double>(m);
                           for (std::size_t i = 0; i < m; ++i) {
                             for (std::size_t j = 0; j < v; ++j)
                               ln->grad[i * v + j] += g * (*probs)[i * v + j];
                             ln->grad[i * v + (*tgt)[i]] -= g;
                           }
                         });
}

// Row gather from an embedding table; backward scatter-adds, so repeated
// ids accumulate their grads.
inline Tensor embed(const Tensor& table, const std::vector<int>& ids) {
  std::size_t v = table.rows(), d = table.cols(), L = ids.size();
  std::vector<double> out(L * d);
  for (std::size_t i = 0; i < L; ++i) {
    int id = ids[i];
    if (id < 0 || static_cast<std::size_t>(id) >= v)
      throw std::out_of_range("embed: token id outside table");
    std::copy_n(&table.values()[static_cast<std::size_t>(id) * d], d, &out[i * d]);
  }
  auto tn = table.node_ptr();
  auto idc = std::make_shared<std::vector<int>>(ids);
  return detail::make_op("embed", L, d, {tn}, std::move(out),
                         [tn, idc, d](detail::Node& self) {
                           if (!tn->requires_grad) return;
                           tn->ensure_grad();
                           for (std::size_t i = 0; i < idc->size(); ++i) {
                             double* dst = &tn->grad[static_cast<std::size_t>((*idc)[i]) * d];
                             const double* src = &self.grad[i * d];
                             for (std::size_t j = 0; j < d; ++j) dst[j] += src[j];
                           }
                         });
}

inline Tensor slice_cols(const Tensor& x, std::size_t c0, std::size_t c1) {
  if (c0 >= c1 || c1 > x.cols()) throw shape_error("slice_cols: bad column range");
  std::size_t m = x.rows(), n = x.cols(), w = c1 - c0;
  std::vector<double> out(m * w);
  for (std::size_t i = 0; i < m; ++i)
    std::copy_n(&x.values()[i * n + c0], w, &out[i * w]);
  auto xn = x.node_ptr();
  return detail::make_op("slice_cols", m, w, {xn}, std::move(out),
                         [xn, m, n, c0, w](detail::Node& self) {
                           if (!xn->requires_grad) return;
                           xn->ensure_grad();
                           for (std::size_t i = 0; i < m; ++i)
                             for (std::size_t j = 0; j < w; ++j)
                               xn->grad[i * n + c0 + j] += self.grad[i * w + j];
                         });
}

inline Tensor slice_rows(const Tensor& x, std::size_t r0, std::size_t r1) {
  if (r0 >= r1 || r1 > x.rows()) throw shape_error("slice_rows: bad row range");
  std::size_t n = x.cols(), h = r1 - r0;
  std::vector<double> out(h * n);
  std::copy_n(&x.values()[r0 * n], h * n, out.begin());
  auto xn = x.node_ptr();
  return detail::make_op("slice_rows", h, n, {xn}, std::move(out),
                         [xn, n, r0, h](detail::Node& self) {
                           if (!xn->requires_grad) return;
                           xn->ensure_grad();
                           for (std::size_t i = 0; i < h * n; ++i)
                             xn->grad[r0 * n + i] += self.grad[i];
                         });
}

inline Tensor sum(const Tensor& x) {
  double s = 0.0;
  for (double v : x.values()) s += v;
  auto xn = x.node_ptr();
  return detail::make_op("sum", 1, 1, {xn}, {s}, [xn](detail::Node& self) {
    if (!xn->requires_grad) return;
    xn->ensure_grad();
    for (double& g : xn->grad) g += self.grad[0];
  });
}

// mean of squared elements; handy scalar probe objective for stacks
inline Tensor mean_square(const Tensor& x) {
  double s = 0.0;
  for (double v : x.values()) s += v * v;
  double n = static_cast<double>(x.numel());
  auto xn = x.node_ptr();
  return detail::make_op("mean_square", 1, 1, {xn}, {s / n}, [xn, n](detail::Node& self) {
    if (!xn->requires_grad) return;
    xn->ensure_grad();
    double g = 2.0 * self.grad[0] / n;
    for (std::size_t i = 0; i < xn->grad.size(); ++i) xn->grad[i] += g * xn->val[i];
  });
}

// elementwise product of same-shape tensors (used by probe objectives)
inline Tensor mul(const Tensor& a, const Tensor& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) throw shape_error("mul: shape mismatch");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] * b.values()[i];
  auto an = a.node_ptr();
  auto bn = b.node_ptr();
  return detail::make_op("mul", a.rows(), a.cols(), {an, bn}, std::move(out),
                         [an, bn](detail::Node& self) {
                           if (an->requires_grad) {
                             an->ensure_grad();
                             for (std::size_t i = 0; i < self.grad.size(); ++i)
                               an->grad[i] += self.grad[i] * bn->val[i];
                           }
                           if (bn->requires_grad) {
                             bn->ensure_grad();
                             for (std::size_t i = 0; i < self.grad.size(); ++i)
                               bn->grad[i] += self.grad[i] * an->val[i];
                           }
                         });
}

// ---------------------------------------------------------------------------
// Plain statistics helpers (no autodiff) used all over the diagnostics.

inline double mean_of(const std::vector<double>& v) {
  if (v.empty()) throw std::invalid_argument("mean_of: empty");
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

// population variance
inline double var_of(const std::vector<double>& v) {
  double mu = mean_of(v);
  double s = 0.0;
  for (double x : v) s += (x - mu) * (x - mu);
  return s / static_cast<double>(v.size());
}

inline double l2_norm(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

}  // namespace tlab
