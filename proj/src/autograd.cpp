#include "tcl/autograd.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <unordered_set>

#include "tcl/errors.hpp"
#include "tcl/fastmath.hpp"

namespace tcl::ag {

namespace {

void accumulate(Matrix& dst, const Matrix& src) {
  double* d = dst.data();
  const double* s = src.data();
  for (std::size_t i = 0; i < dst.size(); ++i) d[i] += s[i];
}

bool wants(const Var& v) { return v && v->requires_grad; }

void check_same_shape(const Var& a, const Var& b, const char* op) {
  require(a->value.same_shape(b->value), std::string(op) + ": shape mismatch");
}

}  // namespace

Matrix& Node::grad_buffer() {
  if (grad.empty() && !value.empty()) grad = Matrix(value.rows(), value.cols());
  return grad;
}

Var constant(Matrix value) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  return n;
}

Var parameter(Matrix value, bool requires_grad) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  n->requires_grad = requires_grad;
  return n;
}

Var scalar(double v) { return constant(Matrix(1, 1, v)); }

Var make_op(Matrix value, std::vector<Var> parents, std::function<void(Node&)> fn) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  n->requires_grad = std::any_of(parents.begin(), parents.end(), wants);
  if (n->requires_grad) {
    n->parents = std::move(parents);
    n->backward_fn = std::move(fn);
  }
  return n;
}

void backward(const Var& root) {
  require(root->value.rows() == 1 && root->value.cols() == 1, "backward: root must be 1x1");
  if (!root->requires_grad) return;

  // Iterative post-order DFS gives a topological order.
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack{{root.get(), 0}};
  seen.insert(root.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* p = node->parents[next++].get();
      if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  root->grad_buffer()(0, 0) += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward_fn && n->has_grad()) n->backward_fn(*n);
  }
}

double item(const Var& v) {
  require(v->value.size() == 1, "item: expected a 1x1 value");
  return v->value[0];
}

Var matmul(const Var& a, const Var& b) {
  require(a->cols() == b->rows(), "matmul: inner dimension mismatch");
  const std::size_t m = a->rows(), k = a->cols(), n = b->cols();
  Matrix out(m, n);
  kernels::gemm_nn(a->value.data(), b->value.data(), out.data(), m, k, n, false);
  return make_op(std::move(out), {a, b}, [a, b, m, k, n](Node& self) {
    if (wants(a))
      kernels::gemm_nt(self.grad.data(), b->value.data(), a->grad_buffer().data(), m, n, k, true);
    if (wants(b))
      kernels::gemm_tn(a->value.data(), self.grad.data(), b->grad_buffer().data(), k, m, n, true);
  });
}

Var matmul_nt(const Var& a, const Var& b) {
  require(a->cols() == b->cols(), "matmul_nt: inner dimension mismatch");
  const std::size_t m = a->rows(), k = a->cols(), n = b->rows();
  Matrix out(m, n);
  kernels::gemm_nt(a->value.data(), b->value.data(), out.data(), m, k, n, false);
  return make_op(std::move(out), {a, b}, [a, b, m, k, n](Node& self) {
    if (wants(a))
      kernels::gemm_nn(self.grad.data(), b->value.data(), a->grad_buffer().data(), m, n, k, true);
    if (wants(b))
      kernels::gemm_tn(self.grad.data(), a->value.data(), b->grad_buffer().data(), n, m, k, true);
  });
}

Var matmul_const_left(const Matrix& p, const Var& x) {
  require(p.cols() == x->rows(), "matmul_const_left: inner dimension mismatch");
  const std::size_t m = p.rows(), k = p.cols(), n = x->cols();
  Matrix out(m, n);
  kernels::gemm_nn(p.data(), x->value.data(), out.data(), m, k, n, false);
  return make_op(std::move(out), {x}, [p, x, m, k, n](Node& self) {
    kernels::gemm_tn(p.data(), self.grad.data(), x->grad_buffer().data(), k, m, n, true);
  });
}

Var add(const Var& a, const Var& b) {
  check_same_shape(a, b, "add");
  Matrix out = a->value;
  accumulate(out, b->value);
  return make_op(std::move(out), {a, b}, [a, b](Node& self) {
    if (wants(a)) accumulate(a->grad_buffer(), self.grad);
    if (wants(b)) accumulate(b->grad_buffer(), self.grad);
  });
}

Var sub(const Var& a, const Var& b) {
  check_same_shape(a, b, "sub");
  Matrix out = a->value;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b->value[i];
  return make_op(std::move(out), {a, b}, [a, b](Node& self) {
    if (wants(a)) accumulate(a->grad_buffer(), self.grad);
    if (wants(b)) {
      Matrix& g = b->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i];
    }
  });
}

Var mul(const Var& a, const Var& b) {
  check_same_shape(a, b, "mul");
  Matrix out = a->value;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b->value[i];
  return make_op(std::move(out), {a, b}, [a, b](Node& self) {
    if (wants(a)) {
      Matrix& g = a->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * b->value[i];
    }
    if (wants(b)) {
      Matrix& g = b->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * a->value[i];
    }
  });
}

Var scale(const Var& a, double s) {
  Matrix out = a->value;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= s;
  return make_op(std::move(out), {a}, [a, s](Node& self) {
    Matrix& g = a->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * s;
  });
}

Var add_row(const Var& a, const Var& row) {
  require(row->rows() == 1 && row->cols() == a->cols(), "add_row: row shape mismatch");
  Matrix out = a->value;
  const std::size_t c = a->cols();
  for (std::size_t r = 0; r < out.rows(); ++r)
    for (std::size_t j = 0; j < c; ++j) out(r, j) += row->value[j];
  return make_op(std::move(out), {a, row}, [a, row, c](Node& self) {
    if (wants(a)) accumulate(a->grad_buffer(), self.grad);
    if (wants(row)) {
      Matrix& g = row->grad_buffer();
      for (std::size_t r = 0; r < self.grad.rows(); ++r)
        for (std::size_t j = 0; j < c; ++j) g[j] += self.grad(r, j);
    }
  });
}

Var add_tiled(const Var& a, const Var& block) {
  const std::size_t len = block->rows();
  require(block->cols() == a->cols() && len > 0 && a->rows() % len == 0,
          "add_tiled: shape mismatch");
  Matrix out = a->value;
  for (std::size_t r = 0; r < out.rows(); ++r) {
    auto dst = out.row(r);
    auto src = block->value.row(r % len);
    for (std::size_t j = 0; j < dst.size(); ++j) dst[j] += src[j];
  }
  return make_op(std::move(out), {a, block}, [a, block, len](Node& self) {
    if (wants(a)) accumulate(a->grad_buffer(), self.grad);
    if (wants(block)) {
      Matrix& g = block->grad_buffer();
      for (std::size_t r = 0; r < self.grad.rows(); ++r) {
        auto src = self.grad.row(r);
        auto dst = g.row(r % len);
        for (std::size_t j = 0; j < dst.size(); ++j) dst[j] += src[j];
      }
    }
  });
}

Var mul_const(const Var& a, const Matrix& mask) {
  require(a->value.same_shape(mask), "mul_const: shape mismatch");
  Matrix out = a->value;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= mask[i];
  return make_op(std::move(out), {a}, [a, mask](Node& self) {
    Matrix& g = a->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * mask[i];
  });
}

Var gelu(const Var& a) {
  // tanh form: 0.5 x (1 + tanh(c (x + 0.044715 x^3))).
  constexpr double c = 0.79788456080286535588;  // sqrt(2 / pi)
  constexpr double k3 = 0.044715;
  Matrix out = a->value;
  const std::size_t n = out.size();
  double* o = out.data();
  for (std::size_t i = 0; i < n; ++i) {
    const double x = o[i];
    o[i] = 0.5 * x * (1.0 + fastmath::tanh(c * (x + k3 * x * x * x)));
  }
  return make_op(std::move(out), {a}, [a](Node& self) {
    Matrix& g = a->grad_buffer();
    const std::size_t n = g.size();
    const double* x = a->value.data();
    const double* up = self.grad.data();
    double* gp = g.data();
    for (std::size_t i = 0; i < n; ++i) {
      const double xi = x[i];
      const double t = fastmath::tanh(c * (xi + k3 * xi * xi * xi));
      const double du = c * (1.0 + 3.0 * k3 * xi * xi);
      gp[i] += up[i] * (0.5 * (1.0 + t) + 0.5 * xi * (1.0 - t * t) * du);
    }
  });
}

Var gather_rows(const Var& a, std::span<const std::size_t> rows) {
  const std::size_t c = a->cols();
  Matrix out(rows.size(), c);
  for (std::size_t r = 0; r < rows.size(); ++r) {
    require(rows[r] < a->rows(), "gather_rows: index out of range");
    auto src = a->value.row(rows[r]);
    std::copy(src.begin(), src.end(), out.row(r).begin());
  }
  std::vector<std::size_t> idx(rows.begin(), rows.end());
  return make_op(std::move(out), {a}, [a, idx = std::move(idx)](Node& self) {
    Matrix& g = a->grad_buffer();
    for (std::size_t r = 0; r < idx.size(); ++r) {
      auto src = self.grad.row(r);
      auto dst = g.row(idx[r]);
      for (std::size_t j = 0; j < dst.size(); ++j) dst[j] += src[j];
    }
  });
}

Var concat_rows(const std::vector<Var>& parts) {
  require(!parts.empty(), "concat_rows: no inputs");
  const std::size_t c = parts.front()->cols();
  std::size_t total = 0;
  for (const auto& p : parts) {
    require(p->cols() == c, "concat_rows: column mismatch");
    total += p->rows();
  }
  Matrix out(total, c);
  std::size_t off = 0;
  for (const auto& p : parts) {
    std::copy(p->value.storage().begin(), p->value.storage().end(), out.data() + off * c);
    off += p->rows();
  }
  return make_op(std::move(out), parts, [parts, c](Node& self) {
    std::size_t off = 0;
    for (const auto& p : parts) {
      if (wants(p)) {
        Matrix& g = p->grad_buffer();
        const double* src = self.grad.data() + off * c;
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += src[i];
      }
      off += p->rows();
    }
  });
}

Var prepend_row(const Var& prefix, const Var& x, std::size_t groups) {
  require(prefix->rows() == 1 && prefix->cols() == x->cols(), "prepend_row: prefix shape");
  require(groups > 0 && x->rows() % groups == 0, "prepend_row: rows not divisible by groups");
  const std::size_t len = x->rows() / groups, c = x->cols();
  Matrix out(groups * (len + 1), c);
  for (std::size_t g = 0; g < groups; ++g) {
    std::copy(prefix->value.data(), prefix->value.data() + c, out.row(g * (len + 1)).begin());
    std::copy(x->value.data() + g * len * c, x->value.data() + (g + 1) * len * c,
              out.row(g * (len + 1) + 1).begin());
  }
  return make_op(std::move(out), {prefix, x}, [prefix, x, groups, len, c](Node& self) {
    for (std::size_t g = 0; g < groups; ++g) {
      if (wants(prefix)) {
        auto src = self.grad.row(g * (len + 1));
        Matrix& d = prefix->grad_buffer();
        for (std::size_t j = 0; j < c; ++j) d[j] += src[j];
      }
      if (wants(x)) {
        const double* src = self.grad.row(g * (len + 1) + 1).data();
        double* dst = x->grad_buffer().data() + g * len * c;
        for (std::size_t i = 0; i < len * c; ++i) dst[i] += src[i];
      }
    }
  });
}

Var layer_norm(const Var& x, const Var& gain, const Var& bias, double eps) {
  const std::size_t n = x->rows(), c = x->cols();
  require(gain->rows() == 1 && gain->cols() == c && bias->value.same_shape(gain->value),
          "layer_norm: parameter shape mismatch");
  Matrix out(n, c), xhat(n, c);
  std::vector<double> inv_std(n);
  for (std::size_t r = 0; r < n; ++r) {
    auto xr = x->value.row(r);
    double mean = 0.0;
    for (double v : xr) mean += v;
    mean /= static_cast<double>(c);
    double var = 0.0;
    for (double v : xr) var += (v - mean) * (v - mean);
    var /= static_cast<double>(c);
    inv_std[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < c; ++j) {
      xhat(r, j) = (xr[j] - mean) * inv_std[r];
      out(r, j) = xhat(r, j) * gain->value[j] + bias->value[j];
    }
  }
  return make_op(std::move(out), {x, gain, bias},
                 [x, gain, bias, xhat = std::move(xhat), inv_std = std::move(inv_std), n,
                  c](Node& self) {
                   if (wants(gain) || wants(bias)) {
                     Matrix& gg = gain->grad_buffer();
                     Matrix& gb = bias->grad_buffer();
                     for (std::size_t r = 0; r < n; ++r)
                       for (std::size_t j = 0; j < c; ++j) {
                         gg[j] += self.grad(r, j) * xhat(r, j);
                         gb[j] += self.grad(r, j);
                       }
                   }
                   if (!wants(x)) return;
                   Matrix& gx = x->grad_buffer();
                   const double inv_c = 1.0 / static_cast<double>(c);
                   for (std::size_t r = 0; r < n; ++r) {
                     double mean_g = 0.0, mean_gx = 0.0;
                     for (std::size_t j = 0; j < c; ++j) {
                       const double gh = self.grad(r, j) * gain->value[j];
                       mean_g += gh;
                       mean_gx += gh * xhat(r, j);
                     }
                     mean_g *= inv_c;
                     mean_gx *= inv_c;
                     for (std::size_t j = 0; j < c; ++j) {
                       const double gh = self.grad(r, j) * gain->value[j];
                       gx(r, j) += inv_std[r] * (gh - mean_g - xhat(r, j) * mean_gx);
                     }
                   }
                 });
}

Var l2_normalize_rows(const Var& x, double eps) {
  const std::size_t n = x->rows(), c = x->cols();
  Matrix out = x->value;
  std::vector<double> norms(n);
  for (std::size_t r = 0; r < n; ++r) {
    norms[r] = l2_norm(x->value.row(r));
    const double d = norms[r] + eps;
    for (double& v : out.row(r)) v /= d;
  }
  Matrix y = out;
  return make_op(std::move(out), {x}, [x, y = std::move(y), norms = std::move(norms), eps, n,
                                       c](Node& self) {
    Matrix& g = x->grad_buffer();
    for (std::size_t r = 0; r < n; ++r) {
      // y = x / (|x| + eps);  dy/dx = I/(|x|+eps) - x x^T / (|x| (|x|+eps)^2)
      const double d = norms[r] + eps;
      const double gy_dot_y = dot(self.grad.row(r), y.row(r));
      const double coef = norms[r] > 0.0 ? gy_dot_y : 0.0;
      for (std::size_t j = 0; j < c; ++j) {
        const double xhat = norms[r] > 0.0 ? x->value(r, j) / norms[r] : 0.0;
        g(r, j) += (self.grad(r, j) - coef * xhat) / d;
      }
    }
  });
}

Var attention(const Var& q, const Var& k, const Var& v, const kernels::AttentionShape& shape,
              std::vector<std::uint8_t> key_valid) {
  require(shape.heads > 0 && shape.dim % shape.heads == 0, "attention: dim not divisible by heads");
  require(q->rows() == shape.batch * shape.q_len && q->cols() == shape.dim,
          "attention: query shape mismatch");
  require(k->rows() == shape.batch * shape.k_len && k->cols() == shape.dim &&
              v->value.same_shape(k->value),
          "attention: key/value shape mismatch");
  require(key_valid.empty() || key_valid.size() == shape.batch * shape.k_len,
          "attention: key mask size mismatch");
  Matrix out(q->rows(), shape.dim);
  auto probs = std::make_shared<std::vector<double>>(shape.batch * shape.heads * shape.q_len *
                                                     shape.k_len);
  kernels::attention_forward(q->value.data(), k->value.data(), v->value.data(), out.data(),
                             probs->data(), key_valid, shape);
  return make_op(std::move(out), {q, k, v}, [q, k, v, shape, probs](Node& self) {
    kernels::attention_backward(q->value.data(), k->value.data(), v->value.data(),
                                probs->data(), self.grad.data(),
                                wants(q) ? q->grad_buffer().data() : nullptr,
                                wants(k) ? k->grad_buffer().data() : nullptr,
                                wants(v) ? v->grad_buffer().data() : nullptr, shape);
  });
}

Var cross_entropy(const Var& logits, std::span<const int> targets) {
  const std::size_t n = logits->rows(), c = logits->cols();
  require(targets.size() == n, "cross_entropy: target count mismatch");
  if (n == 0) return scalar(0.0);
  Matrix probs(n, c);
  double total = 0.0;
  for (std::size_t r = 0; r < n; ++r) {
    require(targets[r] >= 0 && static_cast<std::size_t>(targets[r]) < c,
            "cross_entropy: target out of range");
    auto lr = logits->value.row(r);
    const double mx = *std::max_element(lr.begin(), lr.end());
    double z = 0.0;
    for (std::size_t j = 0; j < c; ++j) {
      probs(r, j) = std::exp(lr[j] - mx);
      z += probs(r, j);
    }
    for (std::size_t j = 0; j < c; ++j) probs(r, j) /= z;
    total += -(lr[targets[r]] - mx - std::log(z));
  }
  std::vector<int> tgt(targets.begin(), targets.end());
  return make_op(Matrix(1, 1, total / static_cast<double>(n)), {logits},
                 [logits, probs = std::move(probs), tgt = std::move(tgt), n, c](Node& self) {
                   Matrix& g = logits->grad_buffer();
                   const double s = self.grad[0] / static_cast<double>(n);
                   for (std::size_t r = 0; r < n; ++r)
                     for (std::size_t j = 0; j < c; ++j)
                       g(r, j) += s * (probs(r, j) - (static_cast<int>(j) == tgt[r] ? 1.0 : 0.0));
                 });
}

Var sum(const Var& a) {
  double s = 0.0;
  for (double v : a->value.storage()) s += v;
  return make_op(Matrix(1, 1, s), {a}, [a](Node& self) {
    Matrix& g = a->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[0];
  });
}

}  // namespace tcl::ag
