#pragma once

#include <memory>
#include <unordered_map>
#include <vector>

#include "bpc/tensor.hpp"

namespace bpc {

// Define-by-run reverse-mode automatic differentiation on f64 tensors.
// Graphs are built eagerly by the op functions below; values are computed at
// construction and treated as immutable afterwards. backward() walks the
// graph once in reverse topological order, so graph construction and
// gradient evaluation are both deterministic.

enum class Op {
  leaf,
  constant,
  add,
  sub,
  mul,
  div,
  matmul,
  neg,
  relu,
  tanh_fn,
  log_fn,
  exp_fn,
  sqrt_fn,
  sum,
  mean,
  sum_rows,
  sum_last,
  logsumexp_last,
  log_softmax_last,
  softmax_last,
  gather_rows,
  select_cols,
  slice,
  reshape,
  transpose,
  concat,
  l2sq,
  stop_grad,
};

class Node;
using Var = std::shared_ptr<Node>;

class Node {
 public:
  Op op;
  std::vector<Var> inputs;
  Tensor value;
  // True when a grad-requiring leaf is reachable through this node. A
  // stop_grad node reports false regardless of its input.
  bool requires_grad = false;
  // Payload for gather_rows / select_cols (indices) and slice (offset).
  std::vector<std::size_t> indices;
  std::size_t offset = 0;
};

const char* op_name(Op op);

// Leaf with gradient tracking (parameters, pseudocoreset features).
Var leaf(Tensor v);
// Leaf without gradient tracking (data, frozen samples).
Var constant(Tensor v);

Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var div(const Var& a, const Var& b);
Var matmul(const Var& a, const Var& b);
Var neg(const Var& a);
Var relu(const Var& a);
Var tanh(const Var& a);
Var log(const Var& a);
Var exp(const Var& a);
Var sqrt(const Var& a);
Var sum(const Var& a);
Var mean(const Var& a);
// Sum over the first dimension of a rank-2 tensor: [n,m] -> [m].
Var sum_rows(const Var& a);
// Sum over the last dimension: [n,m] -> [n], [m] -> [1].
Var sum_last(const Var& a);
Var logsumexp_last(const Var& a);
Var log_softmax_last(const Var& a);
Var softmax_last(const Var& a);
// Row selection on the first dimension; duplicate indices accumulate in the
// adjoint.
Var gather_rows(const Var& a, const std::vector<std::size_t>& idx);
// One element per row of a rank-2 tensor: out[i] = a[i, idx[i]].
Var select_cols(const Var& a, const std::vector<std::size_t>& idx);
// Contiguous range of a rank-1 tensor.
Var slice(const Var& a, std::size_t begin, std::size_t count);
Var reshape(const Var& a, Shape target);
Var transpose(const Var& a);
// Concatenation of rank-1 tensors.
Var concat(const std::vector<Var>& parts);
// Sum of squared entries -> scalar.
Var l2sq(const Var& a);
// Value passes through; gradient does not.
Var stop_grad(const Var& a);

// Convenience: multiply by a scalar constant.
Var scale(const Var& a, double c);

class GradMap {
 public:
  // Gradient of the root w.r.t. v; zeros if no gradient reached v.
  Tensor grad_of(const Var& v) const;
  bool contains(const Var& v) const;
  void add(const Node* n, Tensor g);
  Tensor* find(const Node* n);

 private:
  std::unordered_map<const Node*, Tensor> grads_;
};

// Reverse-mode sweep from a scalar root. Throws ContractError when the root
// is not scalar.
GradMap backward(const Var& root);

}  // namespace bpc
