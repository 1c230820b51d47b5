#pragma once

// Reverse-mode differentiation over Tensor values.
//
// A Var is a handle to a graph node. Parameters are leaf nodes that persist
// across steps (the optimizer mutates their value in place); every other node
// is built fresh per forward pass. Nodes that do not depend on any parameter
// carry no backward closure, so constant subgraphs cost nothing on the way
// back.

#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <unordered_set>
#include <utility>
#include <vector>

#include "tokenflow/tensor.hpp"

namespace tokenflow {

namespace detail {

struct Node {
  Tensor value;
  Tensor grad;  // empty until materialized during a backward pass
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  Tensor& grad_buffer() {
    if (grad.size() != value.size() || grad.shape() != value.shape()) {
      grad = Tensor(value.shape());
    }
    return grad;
  }
};

}  // namespace detail

class Var {
 public:
  Var() = default;

  const Tensor& value() const { return node_->value; }
  // Parameters only: the optimizer writes through this.
  Tensor& mutable_value() { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  bool valid() const { return static_cast<bool>(node_); }

  double item() const {
    if (node_->value.size() != 1) throw DimensionError("item() on non-scalar " + shape_str(shape()));
    return node_->value[0];
  }

  friend Var parameter(Tensor value);
  friend Var constant(Tensor value);
  friend std::vector<Tensor> grad(const Var& loss, std::span<const Var> params);

  // Builds an interior node. `backward` reads self.grad and accumulates into
  // self.parents[i]->grad_buffer(). It is dropped when no parent needs grad.
  static Var make(Tensor value, std::vector<Var> inputs,
                  std::function<void(detail::Node&)> backward) {
    auto node = std::make_shared<detail::Node>();
    node->value = std::move(value);
    for (auto& in : inputs) node->requires_grad = node->requires_grad || in.requires_grad();
    if (node->requires_grad) {
      node->parents.reserve(inputs.size());
      for (auto& in : inputs) node->parents.push_back(in.node_);
      node->backward = std::move(backward);
    }
    return Var(std::move(node));
  }

 private:
  explicit Var(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}
  std::shared_ptr<detail::Node> node_;
};

inline Var parameter(Tensor value) {
  auto node = std::make_shared<detail::Node>();
  node->value = std::move(value);
  node->requires_grad = true;
  return Var(std::move(node));
}

inline Var constant(Tensor value) {
  auto node = std::make_shared<detail::Node>();
  node->value = std::move(value);
  return Var(std::move(node));
}

namespace detail {
inline bool wants(const Node& self, std::size_t i) { return self.parents[i]->requires_grad; }
}  // namespace detail

// out[n,j] = sum_i input[n,i] * weight[i,j] + bias[j]
inline Var affine(const Var& input, const Var& weight, const Var& bias) {
  const Tensor& x = input.value();
  const Tensor& w = weight.value();
  const Tensor& b = bias.value();
  if (x.rank() != 2 || w.rank() != 2 || b.rank() != 1 || x.dim(1) != w.dim(0) ||
      w.dim(1) != b.dim(0)) {
    throw DimensionError("affine: input " + shape_str(x.shape()) + ", weight " +
                         shape_str(w.shape()) + ", bias " + shape_str(b.shape()));
  }
  const std::size_t n = x.dim(0), a = x.dim(1), m = w.dim(1);
  Tensor out({n, m});
  for (std::size_t r = 0; r < n; ++r) {
    double* o = &out.at(r, 0);
    for (std::size_t j = 0; j < m; ++j) o[j] = b[j];
    for (std::size_t i = 0; i < a; ++i) {
      const double xi = x.at(r, i);
      if (xi == 0.0) continue;
      const double* wr = &w.at(i, 0);
      for (std::size_t j = 0; j < m; ++j) o[j] += xi * wr[j];
    }
  }
  return Var::make(std::move(out), {input, weight, bias}, [n, a, m](detail::Node& self) {
    const Tensor& g = self.grad;
    const Tensor& x = self.parents[0]->value;
    const Tensor& w = self.parents[1]->value;
    if (detail::wants(self, 0)) {
      Tensor& gx = self.parents[0]->grad_buffer();
      for (std::size_t r = 0; r < n; ++r)
        for (std::size_t i = 0; i < a; ++i) {
          double s = 0.0;
          for (std::size_t j = 0; j < m; ++j) s += g.at(r, j) * w.at(i, j);
          gx.at(r, i) += s;
        }
    }
    if (detail::wants(self, 1)) {
      Tensor& gw = self.parents[1]->grad_buffer();
      for (std::size_t r = 0; r < n; ++r)
        for (std::size_t i = 0; i < a; ++i) {
          const double xi = x.at(r, i);
          if (xi == 0.0) continue;
          for (std::size_t j = 0; j < m; ++j) gw.at(i, j) += xi * g.at(r, j);
        }
    }
    if (detail::wants(self, 2)) {
      Tensor& gb = self.parents[2]->grad_buffer();
      for (std::size_t r = 0; r < n; ++r)
        for (std::size_t j = 0; j < m; ++j) gb[j] += g.at(r, j);
    }
  });
}

namespace detail {
template <typename Fwd, typename Deriv>
Var unary(const Var& x, Fwd fwd, Deriv deriv) {
  Tensor out(x.shape());
  const Tensor& in = x.value();
  for (std::size_t i = 0; i < in.size(); ++i) out[i] = fwd(in[i]);
  return Var::make(std::move(out), {x}, [deriv](Node& self) {
    const Tensor& in = self.parents[0]->value;
    Tensor& g = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < in.size(); ++i) g[i] += self.grad[i] * deriv(in[i], self.value[i]);
  });
}
}  // namespace detail

inline Var tanh(const Var& x) {
  return detail::unary(
      x, [](double v) { return std::tanh(v); }, [](double, double y) { return 1.0 - y * y; });
}

inline Var relu(const Var& x) {
  return detail::unary(
      x, [](double v) { return v > 0.0 ? v : 0.0; },
      [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

// a*x + b with constant a, b.
inline Var scale_shift(const Var& x, double a, double b = 0.0) {
  return detail::unary(
      x, [a, b](double v) { return a * v + b; }, [a](double, double) { return a; });
}

inline Var scale(const Var& x, double a) { return scale_shift(x, a, 0.0); }

// Each row of x[N x d] divided by sqrt(|row|^2 + eps).
inline Var normalize_rows(const Var& x, double eps = 1e-12) {
  const Tensor& v = x.value();
  const std::size_t n = v.rows(), d = v.row_width();
  Tensor out(v.shape());
  std::vector<double> inv(n);
  for (std::size_t r = 0; r < n; ++r) {
    double sq = 0.0;
    for (std::size_t j = 0; j < d; ++j) sq += v[r * d + j] * v[r * d + j];
    inv[r] = 1.0 / std::sqrt(sq + eps);
    for (std::size_t j = 0; j < d; ++j) out[r * d + j] = v[r * d + j] * inv[r];
  }
  return Var::make(std::move(out), {x}, [inv = std::move(inv), n, d](detail::Node& self) {
    // dy/dx = (I - y y^T) / s
    Tensor& g = self.parents[0]->grad_buffer();
    for (std::size_t r = 0; r < n; ++r) {
      double dot = 0.0;
      for (std::size_t j = 0; j < d; ++j) dot += self.grad[r * d + j] * self.value[r * d + j];
      for (std::size_t j = 0; j < d; ++j)
        g[r * d + j] += inv[r] * (self.grad[r * d + j] - dot * self.value[r * d + j]);
    }
  });
}

// sqrt(x + eps); eps > 0 keeps the derivative bounded at x = 0.
inline Var sqrt_eps(const Var& x, double eps) {
  if (!(eps > 0.0)) throw ParameterError("sqrt_eps: eps must be positive");
  return detail::unary(
      x, [eps](double v) { return std::sqrt(v + eps); }, [](double, double y) { return 0.5 / y; });
}

inline Var add(const Var& a, const Var& b) {
  require_same_shape(a.value(), b.value(), "add");
  Tensor out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] + b.value()[i];
  return Var::make(std::move(out), {a, b}, [](detail::Node& self) {
    for (std::size_t p = 0; p < 2; ++p) {
      if (!detail::wants(self, p)) continue;
      Tensor& g = self.parents[p]->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
  });
}

inline Var sub(const Var& a, const Var& b) {
  require_same_shape(a.value(), b.value(), "sub");
  Tensor out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] - b.value()[i];
  return Var::make(std::move(out), {a, b}, [](detail::Node& self) {
    if (detail::wants(self, 0)) {
      Tensor& g = self.parents[0]->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
    if (detail::wants(self, 1)) {
      Tensor& g = self.parents[1]->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i];
    }
  });
}

inline Var mul(const Var& a, const Var& b) {
  require_same_shape(a.value(), b.value(), "mul");
  Tensor out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] * b.value()[i];
  return Var::make(std::move(out), {a, b}, [](detail::Node& self) {
    const Tensor& av = self.parents[0]->value;
    const Tensor& bv = self.parents[1]->value;
    if (detail::wants(self, 0)) {
      Tensor& g = self.parents[0]->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * bv[i];
    }
    if (detail::wants(self, 1)) {
      Tensor& g = self.parents[1]->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * av[i];
    }
  });
}

inline Var sum(const Var& x) {
  return Var::make(Tensor::scalar(x.value().sum()), {x}, [](detail::Node& self) {
    Tensor& g = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[0];
  });
}

inline Var mean(const Var& x) {
  const double n = static_cast<double>(x.value().size());
  if (n == 0) throw DimensionError("mean of empty tensor");
  return Var::make(Tensor::scalar(x.value().sum() / n), {x}, [n](detail::Node& self) {
    Tensor& g = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[0] / n;
  });
}

// sum_i (a_i - b_i)^2 as a scalar.
inline Var squared_difference_sum(const Var& a, const Var& b) {
  require_same_shape(a.value(), b.value(), "squared_difference_sum");
  double s = 0.0;
  for (std::size_t i = 0; i < a.value().size(); ++i) {
    const double d = a.value()[i] - b.value()[i];
    s += d * d;
  }
  return Var::make(Tensor::scalar(s), {a, b}, [](detail::Node& self) {
    const Tensor& av = self.parents[0]->value;
    const Tensor& bv = self.parents[1]->value;
    const double g0 = self.grad[0];
    if (detail::wants(self, 0)) {
      Tensor& g = self.parents[0]->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += 2.0 * g0 * (av[i] - bv[i]);
    }
    if (detail::wants(self, 1)) {
      Tensor& g = self.parents[1]->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= 2.0 * g0 * (av[i] - bv[i]);
    }
  });
}

// Row-wise log-softmax of logits[N x K] against integer targets; returns the
// mean negative log-likelihood over rows.
inline Var softmax_cross_entropy(const Var& logits, std::span<const std::uint32_t> targets) {
  const Tensor& z = logits.value();
  if (z.rank() != 2 || z.dim(0) != targets.size() || z.dim(0) == 0) {
    throw DimensionError("softmax_cross_entropy: logits " + shape_str(z.shape()) + " vs " +
                         std::to_string(targets.size()) + " targets");
  }
  const std::size_t n = z.dim(0), k = z.dim(1);
  Tensor probs({n, k});
  double nll = 0.0;
  for (std::size_t r = 0; r < n; ++r) {
    if (targets[r] >= k) throw ParameterError("softmax_cross_entropy: target out of range");
    double mx = z.at(r, 0);
    for (std::size_t j = 1; j < k; ++j) mx = std::max(mx, z.at(r, j));
    double den = 0.0;
    for (std::size_t j = 0; j < k; ++j) den += std::exp(z.at(r, j) - mx);
    for (std::size_t j = 0; j < k; ++j) probs.at(r, j) = std::exp(z.at(r, j) - mx) / den;
    nll += -(z.at(r, targets[r]) - mx - std::log(den));
  }
  std::vector<std::uint32_t> t(targets.begin(), targets.end());
  return Var::make(Tensor::scalar(nll / static_cast<double>(n)), {logits},
                   [probs = std::move(probs), t = std::move(t), n, k](detail::Node& self) {
                     Tensor& g = self.parents[0]->grad_buffer();
                     const double s = self.grad[0] / static_cast<double>(n);
                     for (std::size_t r = 0; r < n; ++r)
                       for (std::size_t j = 0; j < k; ++j)
                         g.at(r, j) += s * (probs.at(r, j) - (j == t[r] ? 1.0 : 0.0));
                   });
}

// Same value, no gradient path.
inline Var stop_gradient(const Var& x) { return constant(x.value()); }

inline Var reshape(const Var& x, Shape shape) {
  Tensor out = x.value().reshaped(std::move(shape));
  return Var::make(std::move(out), {x}, [](detail::Node& self) {
    Tensor& g = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

// Concatenate two [N x a], [N x b] matrices along columns.
inline Var concat_cols(const Var& a, const Var& b) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.rank() != 2 || bv.rank() != 2 || av.dim(0) != bv.dim(0)) {
    throw DimensionError("concat_cols: " + shape_str(av.shape()) + " and " + shape_str(bv.shape()));
  }
  const std::size_t n = av.dim(0), ca = av.dim(1), cb = bv.dim(1);
  Tensor out({n, ca + cb});
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t j = 0; j < ca; ++j) out.at(r, j) = av.at(r, j);
    for (std::size_t j = 0; j < cb; ++j) out.at(r, ca + j) = bv.at(r, j);
  }
  return Var::make(std::move(out), {a, b}, [n, ca, cb](detail::Node& self) {
    if (detail::wants(self, 0)) {
      Tensor& g = self.parents[0]->grad_buffer();
      for (std::size_t r = 0; r < n; ++r)
        for (std::size_t j = 0; j < ca; ++j) g.at(r, j) += self.grad.at(r, j);
    }
    if (detail::wants(self, 1)) {
      Tensor& g = self.parents[1]->grad_buffer();
      for (std::size_t r = 0; r < n; ++r)
        for (std::size_t j = 0; j < cb; ++j) g.at(r, j) += self.grad.at(r, ca + j);
    }
  });
}

// out[n,:] = table[indices[n],:]. Equivalent to affine(one_hot(indices), table, 0)
// without materializing the one-hot matrix.
inline Var gather_rows(const Var& table, std::span<const std::uint32_t> indices) {
  const Tensor& t = table.value();
  if (t.rank() != 2) throw DimensionError("gather_rows: table must be rank 2");
  const std::size_t k = t.dim(0), d = t.dim(1);
  Tensor out({indices.size(), d});
  for (std::size_t r = 0; r < indices.size(); ++r) {
    if (indices[r] >= k) throw CorruptTokenError("gather_rows: index " + std::to_string(indices[r]) +
                                                 " >= " + std::to_string(k));
    for (std::size_t j = 0; j < d; ++j) out.at(r, j) = t.at(indices[r], j);
  }
  std::vector<std::uint32_t> idx(indices.begin(), indices.end());
  return Var::make(std::move(out), {table}, [idx = std::move(idx), d](detail::Node& self) {
    Tensor& g = self.parents[0]->grad_buffer();
    for (std::size_t r = 0; r < idx.size(); ++r)
      for (std::size_t j = 0; j < d; ++j) g.at(idx[r], j) += self.grad.at(r, j);
  });
}

// Fixed sparse linear operator y = M x applied independently to each block of
// `in_size` consecutive values. Used for resampling grids, patch/image layout
// changes and finite-difference filters.
struct SparseMap {
  struct Entry {
    std::uint32_t out;
    std::uint32_t in;
    double weight;
  };
  std::size_t in_size = 0;
  std::size_t out_size = 0;
  std::vector<Entry> entries;

  void apply(std::span<const double> x, std::span<double> y) const {
    for (const auto& e : entries) y[e.out] += e.weight * x[e.in];
  }
  void apply_transpose(std::span<const double> gy, std::span<double> gx) const {
    for (const auto& e : entries) gx[e.in] += e.weight * gy[e.out];
  }
};

inline Tensor apply_map(const Tensor& x, const SparseMap& map, Shape out_shape) {
  if (map.in_size == 0 && x.size() == 0 && shape_size(out_shape) == 0) {
    return Tensor(std::move(out_shape));  // zero-width features
  }
  if (map.in_size == 0 || x.size() % map.in_size != 0) {
    throw DimensionError("linear_map: input size " + std::to_string(x.size()) +
                         " is not a multiple of " + std::to_string(map.in_size));
  }
  const std::size_t blocks = x.size() / map.in_size;
  if (shape_size(out_shape) != blocks * map.out_size) {
    throw DimensionError("linear_map: output shape " + shape_str(out_shape) + " mismatch");
  }
  Tensor out(std::move(out_shape));
  for (std::size_t b = 0; b < blocks; ++b) {
    map.apply(x.data().subspan(b * map.in_size, map.in_size),
              out.data().subspan(b * map.out_size, map.out_size));
  }
  return out;
}

inline Var linear_map(const Var& x, std::shared_ptr<const SparseMap> map, Shape out_shape) {
  Tensor out = apply_map(x.value(), *map, std::move(out_shape));
  return Var::make(std::move(out), {x}, [map](detail::Node& self) {
    Tensor& g = self.parents[0]->grad_buffer();
    if (map->in_size == 0) return;
    const std::size_t blocks = g.size() / map->in_size;
    for (std::size_t b = 0; b < blocks; ++b) {
      map->apply_transpose(self.grad.data().subspan(b * map->out_size, map->out_size),
                           g.data().subspan(b * map->in_size, map->in_size));
    }
  });
}

// d(loss)/d(param) for each param. The loss must hold exactly one value.
// Params that the loss does not depend on get a zero tensor.
inline std::vector<Tensor> grad(const Var& loss, std::span<const Var> params) {
  if (!loss.valid() || loss.value().size() != 1) {
    throw ParameterError("grad: loss must be a scalar, got " +
                         (loss.valid() ? shape_str(loss.shape()) : std::string("null")));
  }
  // Iterative post-order DFS; each node is visited once.
  std::vector<detail::Node*> order;
  std::unordered_set<detail::Node*> seen;
  if (loss.node_->requires_grad) {
    std::vector<std::pair<detail::Node*, std::size_t>> stack{{loss.node_.get(), 0}};
    seen.insert(loss.node_.get());
    while (!stack.empty()) {
      auto& [node, next] = stack.back();
      if (next < node->parents.size()) {
        detail::Node* p = node->parents[next++].get();
        if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
      } else {
        order.push_back(node);
        stack.pop_back();
      }
    }
  }
  for (auto* n : order) n->grad = Tensor();
  if (!order.empty()) {
    loss.node_->grad_buffer()[0] = 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      detail::Node* n = *it;
      if (n->backward && n->grad.size() == n->value.size() && !n->value.empty()) n->backward(*n);
    }
  }
  std::vector<Tensor> out;
  out.reserve(params.size());
  for (const auto& p : params) {
    if (seen.count(p.node_.get()) && p.node_->grad.shape() == p.node_->value.shape()) {
      out.push_back(p.node_->grad);
    } else {
      out.push_back(Tensor(p.shape()));
    }
  }
  // Release interior buffers; leaves keep nothing between calls either.
  for (auto* n : order) n->grad = Tensor();
  return out;
}

inline std::vector<Tensor> grad(const Var& loss, std::initializer_list<Var> params) {
  std::vector<Var> v(params);
  return grad(loss, std::span<const Var>(v));
}

// Central differences: (f(x + h e_i) - f(x - h e_i)) / 2h per coordinate.
template <typename F>
Tensor finite_diff_grad(F&& f, const Tensor& x, double h = 1e-5) {
  if (!(h > 0.0)) throw ParameterError("finite_diff_grad: h must be positive");
  Tensor g(x.shape());
  Tensor probe = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double orig = probe[i];
    probe[i] = orig + h;
    const double fp = f(probe);
    probe[i] = orig - h;
    const double fm = f(probe);
    probe[i] = orig;
    g[i] = (fp - fm) / (2.0 * h);
  }
  return g;
}

// |a - b| / max(|a|, |b|, floor). The floor keeps coordinates whose true
// derivative is zero from dividing roundoff by roundoff.
inline double relative_error(double a, double b, double floor = 1e-6) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

}  // namespace tokenflow
