#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "bpc/autodiff.hpp"
#include "bpc/rng.hpp"
#include "bpc/tensor.hpp"

namespace bpc::testutil {

inline double rel_err(double a, double b) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-8});
}

inline Tensor random_tensor(Shape s, Rng& rng, double lo = -2.0, double hi = 2.0) {
  Tensor t = Tensor::zeros(std::move(s));
  for (auto& v : t.data) v = lo + (hi - lo) * rng.uniform();
  return t;
}

// Central finite differences of a scalar-valued function of flat parameters.
inline std::vector<double> finite_diff(
    const std::function<double(const std::vector<double>&)>& f,
    std::vector<double> x, double h = 1e-5) {
  std::vector<double> g(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    double keep = x[i];
    x[i] = keep + h;
    double fp = f(x);
    x[i] = keep - h;
    double fm = f(x);
    x[i] = keep;
    g[i] = (fp - fm) / (2.0 * h);
  }
  return g;
}

// Rebuilds the graph from leaf tensors and checks every leaf gradient
// against central finite differences. Returns the worst relative error.
inline double check_gradients(
    const std::vector<Tensor>& leaf_values,
    const std::function<Var(const std::vector<Var>&)>& build, double h = 1e-5) {
  std::vector<Var> leaves;
  leaves.reserve(leaf_values.size());
  for (const auto& t : leaf_values) leaves.push_back(leaf(t));
  Var root = build(leaves);
  GradMap grads = backward(root);

  double worst = 0.0;
  for (std::size_t li = 0; li < leaves.size(); ++li) {
    Tensor analytic = grads.grad_of(leaves[li]);
    auto eval = [&](const std::vector<double>& flat) {
      std::vector<Var> vars;
      vars.reserve(leaf_values.size());
      for (std::size_t k = 0; k < leaf_values.size(); ++k) {
        Tensor t = leaf_values[k];
        if (k == li) t.data = flat;
        vars.push_back(leaf(std::move(t)));
      }
      return build(vars)->value[0];
    };
    std::vector<double> fd = finite_diff(eval, leaf_values[li].data, h);
    for (std::size_t i = 0; i < fd.size(); ++i)
      worst = std::max(worst, rel_err(analytic[i], fd[i]));
  }
  return worst;
}

}  // namespace bpc::testutil
