#pragma once

// Minimal reverse-mode autodiff over row-major matrices.
//
// A Var is a shared handle to a graph node. Operations record their parents
// and a backward closure only when at least one input requires a gradient, so
// forward passes over constants (the momentum branch, evaluation) build no
// graph at all.

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "tcl/kernels.hpp"
#include "tcl/matrix.hpp"

namespace tcl::ag {

struct Node;
using Var = std::shared_ptr<Node>;

struct Node {
  Matrix value;
  Matrix grad;  // allocated lazily by grad_buffer()
  bool requires_grad = false;
  std::vector<Var> parents;
  std::function<void(Node&)> backward_fn;

  Matrix& grad_buffer();
  bool has_grad() const { return !grad.empty(); }
  std::size_t rows() const { return value.rows(); }
  std::size_t cols() const { return value.cols(); }
};

Var constant(Matrix value);
Var parameter(Matrix value, bool requires_grad = true);
Var scalar(double v);

// Creates an op node. `fn` is dropped when no parent requires a gradient.
Var make_op(Matrix value, std::vector<Var> parents, std::function<void(Node&)> fn);

// Backpropagates from a 1x1 root, accumulating into every reachable node's grad.
void backward(const Var& root);

double item(const Var& v);

// --- linear algebra -------------------------------------------------------
Var matmul(const Var& a, const Var& b);     // a(m,k) b(k,n)
Var matmul_nt(const Var& a, const Var& b);  // a(m,k) b(n,k)^T
Var matmul_const_left(const Matrix& p, const Var& x);  // p x, p constant

// --- elementwise ----------------------------------------------------------
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, double s);
Var add_row(const Var& a, const Var& row);        // broadcast a 1xC row over rows
Var add_tiled(const Var& a, const Var& block);    // a rows g*L+i += block row i
Var mul_const(const Var& a, const Matrix& mask);  // elementwise by a constant
Var gelu(const Var& a);

// --- structural -----------------------------------------------------------
Var gather_rows(const Var& a, std::span<const std::size_t> rows);
Var concat_rows(const std::vector<Var>& parts);
// For each of `groups` blocks of x, emits [prefix; block] (prefix is 1xC).
Var prepend_row(const Var& prefix, const Var& x, std::size_t groups);

// --- normalization --------------------------------------------------------
Var layer_norm(const Var& x, const Var& gain, const Var& bias, double eps = 1e-6);
// Divides each row by (norm + eps).
Var l2_normalize_rows(const Var& x, double eps = 1e-12);

// --- attention ------------------------------------------------------------
// Batched multi-head scaled dot-product attention. key_valid masks keys
// (1 = attend) and has batch*k_len entries, or is empty.
Var attention(const Var& q, const Var& k, const Var& v, const kernels::AttentionShape& shape,
              std::vector<std::uint8_t> key_valid = {});

// --- losses ---------------------------------------------------------------
// Mean over rows of -log softmax(logits)[target]. Empty logits give 0.
Var cross_entropy(const Var& logits, std::span<const int> targets);
Var sum(const Var& a);

}  // namespace tcl::ag
