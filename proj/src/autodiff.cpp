#include "bpc/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "bpc/errors.hpp"

namespace bpc {

namespace {

Var make_node(Op op, std::vector<Var> inputs, Tensor value) {
  auto n = std::make_shared<Node>();
  n->op = op;
  n->inputs = std::move(inputs);
  n->value = std::move(value);
  for (const auto& in : n->inputs)
    if (in->requires_grad) n->requires_grad = true;
  return n;
}

[[noreturn]] void shape_error(Op op, const Tensor& a, const Tensor& b) {
  throw DimensionError(std::string(op_name(op)) + ": incompatible shapes " +
                       shape_str(a.shape) + " and " + shape_str(b.shape));
}

void require_rank(Op op, const Tensor& t, std::size_t rank) {
  if (t.rank() != rank)
    throw DimensionError(std::string(op_name(op)) + ": expected rank " +
                         std::to_string(rank) + ", got shape " + shape_str(t.shape));
}

// Suffix broadcasting: the smaller operand must be scalar or its shape must
// equal the trailing dimensions of the larger one.
bool is_suffix(const Shape& small, const Shape& big) {
  if (small.size() > big.size()) return false;
  for (std::size_t i = 0; i < small.size(); ++i)
    if (small[small.size() - 1 - i] != big[big.size() - 1 - i]) return false;
  return true;
}

enum class Cast { none, b_tiled, a_tiled };

Cast broadcast_kind(Op op, const Tensor& a, const Tensor& b) {
  if (a.shape == b.shape) return Cast::none;
  if (b.is_scalar() || is_suffix(b.shape, a.shape)) return Cast::b_tiled;
  if (a.is_scalar() || is_suffix(a.shape, b.shape)) return Cast::a_tiled;
  shape_error(op, a, b);
}

template <typename F>
Tensor zip(Op op, const Tensor& a, const Tensor& b, F f) {
  Cast c = broadcast_kind(op, a, b);
  if (c == Cast::none) {
    Tensor out = Tensor::zeros(a.shape);
    for (std::size_t i = 0; i < a.size(); ++i) out[i] = f(a[i], b[i]);
    return out;
  }
  const Tensor& big = (c == Cast::b_tiled) ? a : b;
  const Tensor& small = (c == Cast::b_tiled) ? b : a;
  Tensor out = Tensor::zeros(big.shape);
  std::size_t m = small.size();
  for (std::size_t i = 0; i < big.size(); ++i) {
    double s = small[i % m];
    out[i] = (c == Cast::b_tiled) ? f(big[i], s) : f(s, big[i]);
  }
  return out;
}

// Sum the adjoint of a broadcast result back down to the operand's shape.
Tensor reduce_to(const Shape& target, const Tensor& g) {
  if (g.shape == target) return g;
  std::size_t m = Tensor::element_count(target);
  Tensor out = Tensor::zeros(target);
  for (std::size_t i = 0; i < g.size(); ++i) out[i % m] += g[i];
  return out;
}

template <typename F>
Tensor map(const Tensor& a, F f) {
  Tensor out = Tensor::zeros(a.shape);
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = f(a[i]);
  return out;
}

// Rows/cols view of a tensor reduced over its last dimension.
void last_dim_view(Op op, const Tensor& t, std::size_t* rows, std::size_t* cols) {
  if (t.rank() == 1) {
    *rows = 1;
    *cols = t.shape[0];
  } else if (t.rank() == 2) {
    *rows = t.shape[0];
    *cols = t.shape[1];
  } else {
    throw DimensionError(std::string(op_name(op)) + ": expected rank 1 or 2, got " +
                         shape_str(t.shape));
  }
}

Shape last_dim_result_shape(const Tensor& t) {
  if (t.rank() == 1) return Shape{1};
  return Shape{t.shape[0]};
}

}  // namespace

const char* op_name(Op op) {
  switch (op) {
    case Op::leaf: return "leaf";
    case Op::constant: return "constant";
    case Op::add: return "add";
    case Op::sub: return "sub";
    case Op::mul: return "mul";
    case Op::div: return "div";
    case Op::matmul: return "matmul";
    case Op::neg: return "neg";
    case Op::relu: return "relu";
    case Op::tanh_fn: return "tanh";
    case Op::log_fn: return "log";
    case Op::exp_fn: return "exp";
    case Op::sqrt_fn: return "sqrt";
    case Op::sum: return "sum";
    case Op::mean: return "mean";
    case Op::sum_rows: return "sum_rows";
    case Op::sum_last: return "sum_last";
    case Op::logsumexp_last: return "logsumexp_last";
    case Op::log_softmax_last: return "log_softmax_last";
    case Op::softmax_last: return "softmax_last";
    case Op::gather_rows: return "gather_rows";
    case Op::select_cols: return "select_cols";
    case Op::slice: return "slice";
    case Op::reshape: return "reshape";
    case Op::transpose: return "transpose";
    case Op::concat: return "concat";
    case Op::l2sq: return "l2sq";
    case Op::stop_grad: return "stop_grad";
  }
  return "?";
}

Var leaf(Tensor v) {
  auto n = make_node(Op::leaf, {}, std::move(v));
  n->requires_grad = true;
  return n;
}

Var constant(Tensor v) { return make_node(Op::constant, {}, std::move(v)); }

Var add(const Var& a, const Var& b) {
  return make_node(Op::add, {a, b}, zip(Op::add, a->value, b->value,
                                        [](double x, double y) { return x + y; }));
}

Var sub(const Var& a, const Var& b) {
  return make_node(Op::sub, {a, b}, zip(Op::sub, a->value, b->value,
                                        [](double x, double y) { return x - y; }));
}

Var mul(const Var& a, const Var& b) {
  return make_node(Op::mul, {a, b}, zip(Op::mul, a->value, b->value,
                                        [](double x, double y) { return x * y; }));
}

Var div(const Var& a, const Var& b) {
  return make_node(Op::div, {a, b}, zip(Op::div, a->value, b->value,
                                        [](double x, double y) { return x / y; }));
}

Var matmul(const Var& a, const Var& b) {
  const Tensor& A = a->value;
  const Tensor& B = b->value;
  require_rank(Op::matmul, A, 2);
  require_rank(Op::matmul, B, 2);
  if (A.shape[1] != B.shape[0]) shape_error(Op::matmul, A, B);
  std::size_t m = A.shape[0], k = A.shape[1], n = B.shape[1];
  Tensor out = Tensor::zeros({m, n});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t p = 0; p < k; ++p) {
      double av = A.data[i * k + p];
      if (av == 0.0) continue;
      const double* brow = &B.data[p * n];
      double* orow = &out.data[i * n];
      for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
    }
  return make_node(Op::matmul, {a, b}, std::move(out));
}

Var neg(const Var& a) {
  return make_node(Op::neg, {a}, map(a->value, [](double x) { return -x; }));
}

Var relu(const Var& a) {
  return make_node(Op::relu, {a}, map(a->value, [](double x) { return x > 0 ? x : 0.0; }));
}

Var tanh(const Var& a) {
  return make_node(Op::tanh_fn, {a}, map(a->value, [](double x) { return std::tanh(x); }));
}

Var log(const Var& a) {
  return make_node(Op::log_fn, {a}, map(a->value, [](double x) { return std::log(x); }));
}

Var exp(const Var& a) {
  return make_node(Op::exp_fn, {a}, map(a->value, [](double x) { return std::exp(x); }));
}

Var sqrt(const Var& a) {
  return make_node(Op::sqrt_fn, {a}, map(a->value, [](double x) { return std::sqrt(x); }));
}

Var sum(const Var& a) {
  double s = 0.0;
  for (double x : a->value.data) s += x;
  return make_node(Op::sum, {a}, Tensor::scalar(s));
}

Var mean(const Var& a) {
  double s = 0.0;
  for (double x : a->value.data) s += x;
  return make_node(Op::mean, {a}, Tensor::scalar(s / static_cast<double>(a->value.size())));
}

Var sum_rows(const Var& a) {
  require_rank(Op::sum_rows, a->value, 2);
  std::size_t n = a->value.shape[0], m = a->value.shape[1];
  Tensor out = Tensor::zeros({m});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) out[j] += a->value.data[i * m + j];
  return make_node(Op::sum_rows, {a}, std::move(out));
}

Var sum_last(const Var& a) {
  std::size_t rows, cols;
  last_dim_view(Op::sum_last, a->value, &rows, &cols);
  Tensor out = Tensor::zeros(last_dim_result_shape(a->value));
  for (std::size_t i = 0; i < rows; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < cols; ++j) s += a->value.data[i * cols + j];
    out[i] = s;
  }
  return make_node(Op::sum_last, {a}, std::move(out));
}

Var logsumexp_last(const Var& a) {
  std::size_t rows, cols;
  last_dim_view(Op::logsumexp_last, a->value, &rows, &cols);
  Tensor out = Tensor::zeros(last_dim_result_shape(a->value));
  for (std::size_t i = 0; i < rows; ++i) {
    const double* row = &a->value.data[i * cols];
    double mx = row[0];
    for (std::size_t j = 1; j < cols; ++j) mx = std::max(mx, row[j]);
    double s = 0.0;
    for (std::size_t j = 0; j < cols; ++j) s += std::exp(row[j] - mx);
    out[i] = mx + std::log(s);
  }
  return make_node(Op::logsumexp_last, {a}, std::move(out));
}

Var log_softmax_last(const Var& a) {
  std::size_t rows, cols;
  last_dim_view(Op::log_softmax_last, a->value, &rows, &cols);
  Tensor out = Tensor::zeros(a->value.shape);
  for (std::size_t i = 0; i < rows; ++i) {
    const double* row = &a->value.data[i * cols];
    double mx = row[0];
    for (std::size_t j = 1; j < cols; ++j) mx = std::max(mx, row[j]);
    double s = 0.0;
    for (std::size_t j = 0; j < cols; ++j) s += std::exp(row[j] - mx);
    double lse = mx + std::log(s);
    for (std::size_t j = 0; j < cols; ++j) out.data[i * cols + j] = row[j] - lse;
  }
  return make_node(Op::log_softmax_last, {a}, std::move(out));
}

Var softmax_last(const Var& a) {
  std::size_t rows, cols;
  last_dim_view(Op::softmax_last, a->value, &rows, &cols);
  Tensor out = Tensor::zeros(a->value.shape);
  for (std::size_t i = 0; i < rows; ++i) {
    const double* row = &a->value.data[i * cols];
    double mx = row[0];
    for (std::size_t j = 1; j < cols; ++j) mx = std::max(mx, row[j]);
    double s = 0.0;
    for (std::size_t j = 0; j < cols; ++j) s += std::exp(row[j] - mx);
    for (std::size_t j = 0; j < cols; ++j)
      out.data[i * cols + j] = std::exp(row[j] - mx) / s;
  }
  return make_node(Op::softmax_last, {a}, std::move(out));
}

Var gather_rows(const Var& a, const std::vector<std::size_t>& idx) {
  const Tensor& A = a->value;
  if (A.rank() < 1)
    throw DimensionError("gather_rows: input must have at least rank 1");
  std::size_t n = A.shape[0];
  std::size_t row = A.size() / std::max<std::size_t>(n, 1);
  for (std::size_t i : idx)
    if (i >= n) throw BoundsError("gather_rows: row index " + std::to_string(i) +
                                  " out of range for " + shape_str(A.shape));
  Shape out_shape = A.shape;
  out_shape[0] = idx.size();
  Tensor out = Tensor::zeros(out_shape);
  for (std::size_t k = 0; k < idx.size(); ++k)
    std::copy_n(&A.data[idx[k] * row], row, &out.data[k * row]);
  auto node = make_node(Op::gather_rows, {a}, std::move(out));
  node->indices = idx;
  return node;
}

Var select_cols(const Var& a, const std::vector<std::size_t>& idx) {
  const Tensor& A = a->value;
  require_rank(Op::select_cols, A, 2);
  if (idx.size() != A.shape[0])
    throw DimensionError("select_cols: need one index per row, got " +
                         std::to_string(idx.size()) + " for " + shape_str(A.shape));
  for (std::size_t j : idx)
    if (j >= A.shape[1])
      throw BoundsError("select_cols: column index " + std::to_string(j) +
                        " out of range for " + shape_str(A.shape));
  Tensor out = Tensor::zeros({A.shape[0]});
  for (std::size_t i = 0; i < A.shape[0]; ++i) out[i] = A.at2(i, idx[i]);
  auto node = make_node(Op::select_cols, {a}, std::move(out));
  node->indices = idx;
  return node;
}

Var slice(const Var& a, std::size_t begin, std::size_t count) {
  require_rank(Op::slice, a->value, 1);
  if (begin + count > a->value.size())
    throw BoundsError("slice: range [" + std::to_string(begin) + "," +
                      std::to_string(begin + count) + ") out of range for " +
                      shape_str(a->value.shape));
  Tensor out = Tensor::zeros({count});
  std::copy_n(&a->value.data[begin], count, out.data.data());
  auto node = make_node(Op::slice, {a}, std::move(out));
  node->offset = begin;
  return node;
}

Var reshape(const Var& a, Shape target) {
  if (Tensor::element_count(target) != a->value.size())
    throw DimensionError("reshape: cannot view " + shape_str(a->value.shape) +
                         " as " + shape_str(target));
  Tensor out = a->value;
  out.shape = std::move(target);
  return make_node(Op::reshape, {a}, std::move(out));
}

Var transpose(const Var& a) {
  require_rank(Op::transpose, a->value, 2);
  std::size_t n = a->value.shape[0], m = a->value.shape[1];
  Tensor out = Tensor::zeros({m, n});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) out.data[j * n + i] = a->value.data[i * m + j];
  return make_node(Op::transpose, {a}, std::move(out));
}

Var concat(const std::vector<Var>& parts) {
  if (parts.empty()) throw ContractError("concat: no inputs");
  std::size_t total = 0;
  for (const auto& p : parts) {
    require_rank(Op::concat, p->value, 1);
    total += p->value.size();
  }
  Tensor out = Tensor::zeros({total});
  std::size_t pos = 0;
  for (const auto& p : parts) {
    std::copy_n(p->value.data.data(), p->value.size(), &out.data[pos]);
    pos += p->value.size();
  }
  return make_node(Op::concat, parts, std::move(out));
}

Var l2sq(const Var& a) {
  double s = 0.0;
  for (double x : a->value.data) s += x * x;
  return make_node(Op::l2sq, {a}, Tensor::scalar(s));
}

Var stop_grad(const Var& a) {
  auto n = make_node(Op::stop_grad, {a}, a->value);
  n->requires_grad = false;
  return n;
}

Var scale(const Var& a, double c) { return mul(a, constant(Tensor::scalar(c))); }

Tensor GradMap::grad_of(const Var& v) const {
  auto it = grads_.find(v.get());
  if (it == grads_.end()) return Tensor::zeros(v->value.shape);
  return it->second;
}

bool GradMap::contains(const Var& v) const { return grads_.count(v.get()) > 0; }

void GradMap::add(const Node* n, Tensor g) {
  auto it = grads_.find(n);
  if (it == grads_.end()) {
    grads_.emplace(n, std::move(g));
  } else {
    Tensor& acc = it->second;
    for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += g[i];
  }
}

Tensor* GradMap::find(const Node* n) {
  auto it = grads_.find(n);
  return it == grads_.end() ? nullptr : &it->second;
}

namespace {

// Adjoint of one node into its inputs.
void accumulate(const Node* n, const Tensor& g, GradMap& out) {
  auto push = [&](const Var& in, Tensor grad) {
    if (in->requires_grad) out.add(in.get(), std::move(grad));
  };
  const Tensor& val = n->value;
  switch (n->op) {
    case Op::leaf:
    case Op::constant:
    case Op::stop_grad:
      return;
    case Op::add: {
      push(n->inputs[0], reduce_to(n->inputs[0]->value.shape, g));
      push(n->inputs[1], reduce_to(n->inputs[1]->value.shape, g));
      return;
    }
    case Op::sub: {
      push(n->inputs[0], reduce_to(n->inputs[0]->value.shape, g));
      Tensor gb = map(g, [](double x) { return -x; });
      push(n->inputs[1], reduce_to(n->inputs[1]->value.shape, gb));
      return;
    }
    case Op::mul: {
      const Tensor& a = n->inputs[0]->value;
      const Tensor& b = n->inputs[1]->value;
      if (n->inputs[0]->requires_grad) {
        Tensor ga = zip(Op::mul, g, b, [](double x, double y) { return x * y; });
        push(n->inputs[0], reduce_to(a.shape, ga));
      }
      if (n->inputs[1]->requires_grad) {
        Tensor gb = zip(Op::mul, g, a, [](double x, double y) { return x * y; });
        push(n->inputs[1], reduce_to(b.shape, gb));
      }
      return;
    }
    case Op::div: {
      const Tensor& a = n->inputs[0]->value;
      const Tensor& b = n->inputs[1]->value;
      if (n->inputs[0]->requires_grad) {
        Tensor ga = zip(Op::div, g, b, [](double x, double y) { return x / y; });
        push(n->inputs[0], reduce_to(a.shape, ga));
      }
      if (n->inputs[1]->requires_grad) {
        // d(a/b)/db = -a / b^2; val already holds a/b.
        Tensor t = zip(Op::div, val, b, [](double q, double y) { return -q / y; });
        Tensor gb = zip(Op::mul, g, t, [](double x, double y) { return x * y; });
        push(n->inputs[1], reduce_to(b.shape, gb));
      }
      return;
    }
    case Op::matmul: {
      const Tensor& A = n->inputs[0]->value;
      const Tensor& B = n->inputs[1]->value;
      std::size_t m = A.shape[0], k = A.shape[1], c = B.shape[1];
      if (n->inputs[0]->requires_grad) {
        Tensor ga = Tensor::zeros(A.shape);  // g [m,c] * B^T [c,k]
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < c; ++j) {
            double gv = g.data[i * c + j];
            if (gv == 0.0) continue;
            for (std::size_t p = 0; p < k; ++p)
              ga.data[i * k + p] += gv * B.data[p * c + j];
          }
        push(n->inputs[0], std::move(ga));
      }
      if (n->inputs[1]->requires_grad) {
        Tensor gb = Tensor::zeros(B.shape);  // A^T [k,m] * g [m,c]
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t p = 0; p < k; ++p) {
            double av = A.data[i * k + p];
            if (av == 0.0) continue;
            for (std::size_t j = 0; j < c; ++j)
              gb.data[p * c + j] += av * g.data[i * c + j];
          }
        push(n->inputs[1], std::move(gb));
      }
      return;
    }
    case Op::neg:
      push(n->inputs[0], map(g, [](double x) { return -x; }));
      return;
    case Op::relu: {
      const Tensor& x = n->inputs[0]->value;
      Tensor gx = Tensor::zeros(x.shape);
      for (std::size_t i = 0; i < x.size(); ++i) gx[i] = x[i] > 0 ? g[i] : 0.0;
      push(n->inputs[0], std::move(gx));
      return;
    }
    case Op::tanh_fn: {
      Tensor gx = Tensor::zeros(val.shape);
      for (std::size_t i = 0; i < val.size(); ++i)
        gx[i] = g[i] * (1.0 - val[i] * val[i]);
      push(n->inputs[0], std::move(gx));
      return;
    }
    case Op::log_fn: {
      const Tensor& x = n->inputs[0]->value;
      Tensor gx = Tensor::zeros(x.shape);
      for (std::size_t i = 0; i < x.size(); ++i) gx[i] = g[i] / x[i];
      push(n->inputs[0], std::move(gx));
      return;
    }
    case Op::exp_fn: {
      Tensor gx = Tensor::zeros(val.shape);
      for (std::size_t i = 0; i < val.size(); ++i) gx[i] = g[i] * val[i];
      push(n->inputs[0], std::move(gx));
      return;
    }
    case Op::sqrt_fn: {
      Tensor gx = Tensor::zeros(val.shape);
      for (std::size_t i = 0; i < val.size(); ++i) gx[i] = g[i] * 0.5 / val[i];
      push(n->inputs[0], std::move(gx));
      return;
    }
    case Op::sum: {
      push(n->inputs[0], Tensor::full(n->inputs[0]->value.shape, g[0]));
      return;
    }
    case Op::mean: {
      double v = g[0] / static_cast<double>(n->inputs[0]->value.size());
      push(n->inputs[0], Tensor::full(n->inputs[0]->value.shape, v));
      return;
    }
    case Op::sum_rows: {
      const Tensor& x = n->inputs[0]->value;
      std::size_t rows = x.shape[0], cols = x.shape[1];
      Tensor gx = Tensor::zeros(x.shape);
      for (std::size_t i = 0; i < rows; ++i)
        for (std::size_t j = 0; j < cols; ++j) gx.data[i * cols + j] = g[j];
      push(n->inputs[0], std::move(gx));
      return;
    }
    case Op::sum_last: {
      const Tensor& x = n->inputs[0]->value;
      std::size_t rows = (x.rank() == 1) ? 1 : x.shape[0];
      std::size_t cols = x.size() / rows;
      Tensor gx = Tensor::zeros(x.shape);
      for (std::size_t i = 0; i < rows; ++i)
        for (std::size_t j = 0; j < cols; ++j) gx.data[i * cols + j] = g[i];
      push(n->inputs[0], std::move(gx));
      return;
    }
    case Op::logsumexp_last: {
      const Tensor& x = n->inputs[0]->value;
      std::size_t rows = (x.rank() == 1) ? 1 : x.shape[0];
      std::size_t cols = x.size() / rows;
      Tensor gx = Tensor::zeros(x.shape);
      for (std::size_t i = 0; i < rows; ++i)
        for (std::size_t j = 0; j < cols; ++j)
          gx.data[i * cols + j] = g[i] * std::exp(x.data[i * cols + j] - val[i]);
      push(n->inputs[0], std::move(gx));
      return;
    }
    case Op::log_softmax_last: {
      // dx = g - softmax(x) * rowsum(g); val holds log-softmax.
      const Tensor& x = n->inputs[0]->value;
      std::size_t rows = (x.rank() == 1) ? 1 : x.shape[0];
      std::size_t cols = x.size() / rows;
      Tensor gx = Tensor::zeros(x.shape);
      for (std::size_t i = 0; i < rows; ++i) {
        double rowsum = 0.0;
        for (std::size_t j = 0; j < cols; ++j) rowsum += g.data[i * cols + j];
        for (std::size_t j = 0; j < cols; ++j) {
          double p = std::exp(val.data[i * cols + j]);
          gx.data[i * cols + j] = g.data[i * cols + j] - p * rowsum;
        }
      }
      push(n->inputs[0], std::move(gx));
      return;
    }
    case Op::softmax_last: {
      // dx = y * (g - sum_j g_j y_j); val holds softmax.
      const Tensor& x = n->inputs[0]->value;
      std::size_t rows = (x.rank() == 1) ? 1 : x.shape[0];
      std::size_t cols = x.size() / rows;
      Tensor gx = Tensor::zeros(x.shape);
      for (std::size_t i = 0; i < rows; ++i) {
        double dot = 0.0;
        for (std::size_t j = 0; j < cols; ++j)
          dot += g.data[i * cols + j] * val.data[i * cols + j];
        for (std::size_t j = 0; j < cols; ++j)
          gx.data[i * cols + j] = val.data[i * cols + j] * (g.data[i * cols + j] - dot);
      }
      push(n->inputs[0], std::move(gx));
      return;
    }
    case Op::gather_rows: {
      const Tensor& x = n->inputs[0]->value;
      std::size_t row = x.size() / x.shape[0];
      Tensor gx = Tensor::zeros(x.shape);
      for (std::size_t k = 0; k < n->indices.size(); ++k)
        for (std::size_t j = 0; j < row; ++j)
          gx.data[n->indices[k] * row + j] += g.data[k * row + j];
      push(n->inputs[0], std::move(gx));
      return;
    }
    case Op::select_cols: {
      const Tensor& x = n->inputs[0]->value;
      Tensor gx = Tensor::zeros(x.shape);
      for (std::size_t i = 0; i < n->indices.size(); ++i)
        gx.data[i * x.shape[1] + n->indices[i]] += g[i];
      push(n->inputs[0], std::move(gx));
      return;
    }
    case Op::slice: {
      const Tensor& x = n->inputs[0]->value;
      Tensor gx = Tensor::zeros(x.shape);
      for (std::size_t i = 0; i < g.size(); ++i) gx[n->offset + i] += g[i];
      push(n->inputs[0], std::move(gx));
      return;
    }
    case Op::reshape: {
      Tensor gx = g;
      gx.shape = n->inputs[0]->value.shape;
      push(n->inputs[0], std::move(gx));
      return;
    }
    case Op::transpose: {
      const Tensor& x = n->inputs[0]->value;
      std::size_t r = x.shape[0], c = x.shape[1];
      Tensor gx = Tensor::zeros(x.shape);
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) gx.data[i * c + j] = g.data[j * r + i];
      push(n->inputs[0], std::move(gx));
      return;
    }
    case Op::concat: {
      std::size_t pos = 0;
      for (const auto& in : n->inputs) {
        std::size_t len = in->value.size();
        if (in->requires_grad) {
          Tensor gx = Tensor::zeros(in->value.shape);
          std::copy_n(&g.data[pos], len, gx.data.data());
          push(in, std::move(gx));
        }
        pos += len;
      }
      return;
    }
    case Op::l2sq: {
      const Tensor& x = n->inputs[0]->value;
      Tensor gx = Tensor::zeros(x.shape);
      for (std::size_t i = 0; i < x.size(); ++i) gx[i] = 2.0 * x[i] * g[0];
      push(n->inputs[0], std::move(gx));
      return;
    }
  }
}

}  // namespace

GradMap backward(const Var& root) {
  if (!root->value.is_scalar())
    throw ContractError("backward: root must be scalar, got shape " +
                        shape_str(root->value.shape));
  GradMap grads;
  if (!root->requires_grad) return grads;

  // Iterative post-order DFS; inputs visited in declaration order so the
  // resulting topological order is deterministic.
  std::vector<const Node*> order;
  std::unordered_map<const Node*, int> state;
  std::vector<const Node*> stack{root.get()};
  while (!stack.empty()) {
    const Node* n = stack.back();
    int& st = state[n];
    if (st == 0) {
      st = 1;
      for (auto it = n->inputs.rbegin(); it != n->inputs.rend(); ++it)
        if ((*it)->requires_grad && state[it->get()] == 0) stack.push_back(it->get());
    } else {
      stack.pop_back();
      if (st == 1) {
        st = 2;
        order.push_back(n);
      }
    }
  }

  grads.add(root.get(), Tensor::scalar(1.0));
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    const Tensor* g = grads.find(*it);
    if (g == nullptr) continue;
    accumulate(*it, *g, grads);
  }
  return grads;
}

}  // namespace bpc
