#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>

#include "bpc/autodiff.hpp"
#include "bpc/errors.hpp"
#include "bpc/rng.hpp"
#include "doctest.h"
#include "test_util.hpp"

using namespace bpc;
using testutil::check_gradients;
using testutil::random_tensor;
using testutil::rel_err;

TEST_CASE("matmul against identity returns the operand") {
  Var x = leaf(Tensor({2, 2}, {1.0, 2.0, 3.0, 4.0}));
  Var id = constant(Tensor({2, 2}, {1.0, 0.0, 0.0, 1.0}));
  Var y = matmul(x, id);
  for (std::size_t i = 0; i < 4; ++i) CHECK(y->value[i] == x->value[i]);
}

TEST_CASE("logsumexp of two zeros is ln 2") {
  Var y = logsumexp_last(constant(Tensor({2}, {0.0, 0.0})));
  CHECK(y->value[0] == doctest::Approx(std::log(2.0)).epsilon(1e-12));
}

TEST_CASE("relu forward and backward on mixed signs") {
  Var x = leaf(Tensor({3}, {-1.0, 2.0, 3.0}));
  Var s = sum(relu(x));
  CHECK(s->value[0] == 5.0);
  Tensor g = backward(s).grad_of(x);
  CHECK(g[0] == 0.0);
  CHECK(g[1] == 1.0);
  CHECK(g[2] == 1.0);
}

TEST_CASE("gradient of x^T x is 2x") {
  Var x = leaf(Tensor({3}, {1.0, -2.0, 0.5}));
  Tensor g = backward(l2sq(x)).grad_of(x);
  for (std::size_t i = 0; i < 3; ++i)
    CHECK(g[i] == doctest::Approx(2.0 * x->value[i]).epsilon(1e-14));
}

TEST_CASE("stop-grad freezes one factor of a product") {
  // y = sg(x) * x at x = 3: value 9, dy/dx = sg value = 3.
  Var x = leaf(Tensor::scalar(3.0));
  Var y = mul(stop_grad(x), x);
  CHECK(y->value[0] == 9.0);
  Tensor g = backward(sum(y)).grad_of(x);
  CHECK(g[0] == 3.0);
}

TEST_CASE("stop-grad blocks every path") {
  Rng rng(7);
  Var x = leaf(random_tensor({4}, rng));
  Var y = sum(mul(stop_grad(exp(x)), stop_grad(x)));
  GradMap grads = backward(y);
  Tensor g = grads.grad_of(x);
  CHECK_FALSE(grads.contains(x));
  for (std::size_t i = 0; i < 4; ++i) CHECK(g[i] == 0.0);
}

TEST_CASE("backward rejects non-scalar roots") {
  Var x = leaf(Tensor({2}, {1.0, 2.0}));
  CHECK_THROWS_AS((void)backward(add(x, x)), ContractError);
}

TEST_CASE("shape mismatch names the op") {
  Var a = leaf(Tensor::zeros({2, 3}));
  Var b = leaf(Tensor::zeros({2}));
  try {
    (void)add(a, b);
    FAIL("expected DimensionError");
  } catch (const DimensionError& e) {
    CHECK(std::string(e.what()).find("add") != std::string::npos);
  }
  CHECK_THROWS_AS((void)matmul(a, leaf(Tensor::zeros({4, 2}))), DimensionError);
  CHECK_THROWS_AS((void)matmul(a, leaf(Tensor::zeros({3}))), DimensionError);
}

TEST_CASE("finite differences validate every elementwise and reduction op") {
  Rng rng(11);
  double tol = 1e-5;

  auto weighted = [](Var v, const Tensor& w) { return sum(mul(v, constant(w))); };

  SUBCASE("add sub mul div with equal shapes") {
    Tensor w = random_tensor({3, 2}, rng);
    double worst = check_gradients(
        {random_tensor({3, 2}, rng), random_tensor({3, 2}, rng, 0.5, 2.5)},
        [&](const std::vector<Var>& v) {
          Var t = add(sub(mul(v[0], v[1]), v[0]), div(v[0], v[1]));
          return weighted(t, w);
        });
    CHECK(worst < tol);
  }
  SUBCASE("broadcast over leading dim") {
    Tensor w = random_tensor({4, 3}, rng);
    double worst = check_gradients(
        {random_tensor({4, 3}, rng), random_tensor({3}, rng, 0.5, 2.5)},
        [&](const std::vector<Var>& v) {
          Var t = add(mul(v[0], v[1]), div(v[1], v[0]));
          return weighted(t, w);
        });
    CHECK(worst < tol);
  }
  SUBCASE("scalar broadcast") {
    Tensor w = random_tensor({2, 2}, rng);
    double worst = check_gradients(
        {random_tensor({2, 2}, rng), random_tensor({1}, rng, 0.5, 2.5)},
        [&](const std::vector<Var>& v) {
          return weighted(mul(v[0], v[1]), w);
        });
    CHECK(worst < tol);
  }
  SUBCASE("matmul chain with transpose") {
    Tensor w = random_tensor({3, 3}, rng);
    double worst = check_gradients(
        {random_tensor({3, 4}, rng), random_tensor({4, 3}, rng)},
        [&](const std::vector<Var>& v) {
          return weighted(matmul(v[0], v[1]), w) ;
        });
    CHECK(worst < tol);
    worst = check_gradients({random_tensor({2, 5}, rng)},
                            [&](const std::vector<Var>& v) {
                              return sum(matmul(v[0], transpose(v[0])));
                            });
    CHECK(worst < tol);
  }
  SUBCASE("unary maps") {
    Tensor w = random_tensor({6}, rng);
    double worst = check_gradients(
        {random_tensor({6}, rng, 0.5, 2.5)},
        [&](const std::vector<Var>& v) {
          Var t = add(tanh(neg(v[0])), mul(log(v[0]), sqrt(v[0])));
          return weighted(add(t, exp(neg(v[0]))), w);
        });
    CHECK(worst < tol);
  }
  SUBCASE("relu away from the kink") {
    Tensor x = random_tensor({8}, rng);
    for (auto& v : x.data)
      if (std::abs(v) < 0.05) v = 0.3;
    Tensor w = random_tensor({8}, rng);
    double worst = check_gradients({x}, [&](const std::vector<Var>& v) {
      return sum(mul(relu(v[0]), constant(w)));
    });
    CHECK(worst < tol);
  }
  SUBCASE("reductions") {
    Tensor wc = random_tensor({4}, rng);
    Tensor wd = random_tensor({3}, rng);
    double worst = check_gradients(
        {random_tensor({3, 4}, rng)}, [&](const std::vector<Var>& v) {
          Var a = sum(v[0]);
          Var b = mean(v[0]);
          Var c = sum(mul(sum_rows(v[0]), constant(wc)));
          Var d = sum(mul(sum_last(v[0]), constant(wd)));
          return add(add(a, b), add(c, d));
        });
    CHECK(worst < tol);
  }
  SUBCASE("logsumexp and softmax family") {
    Tensor wrow = random_tensor({3}, rng);
    Tensor wfull = random_tensor({3, 5}, rng);
    double worst = check_gradients(
        {random_tensor({3, 5}, rng)}, [&](const std::vector<Var>& v) {
          Var a = sum(mul(logsumexp_last(v[0]), constant(wrow)));
          Var b = sum(mul(log_softmax_last(v[0]), constant(wfull)));
          Var c = sum(mul(softmax_last(v[0]), constant(wfull)));
          return add(a, add(b, c));
        });
    CHECK(worst < tol);
  }
  SUBCASE("gather with duplicate rows accumulates") {
    Tensor w = random_tensor({4, 3}, rng);
    double worst = check_gradients(
        {random_tensor({3, 3}, rng)}, [&](const std::vector<Var>& v) {
          return sum(mul(gather_rows(v[0], {2, 0, 2, 1}), constant(w)));
        });
    CHECK(worst < tol);
  }
  SUBCASE("select one column per row") {
    Tensor w = random_tensor({4}, rng);
    double worst = check_gradients(
        {random_tensor({4, 3}, rng)}, [&](const std::vector<Var>& v) {
          return sum(mul(select_cols(v[0], {0, 2, 1, 2}), constant(w)));
        });
    CHECK(worst < tol);
  }
  SUBCASE("slice reshape concat") {
    Tensor w = random_tensor({2, 3}, rng);
    double worst = check_gradients(
        {random_tensor({10}, rng)}, [&](const std::vector<Var>& v) {
          Var head = slice(v[0], 0, 6);
          Var tail = slice(v[0], 6, 4);
          Var m = reshape(head, {2, 3});
          Var t = sum(mul(m, constant(w)));
          return add(t, l2sq(concat({tail, head})));
        });
    CHECK(worst < tol);
  }
}

TEST_CASE("two identical builds produce bitwise identical gradients") {
  auto run = [] {
    Rng rng(99);
    Tensor a = random_tensor({4, 3}, rng);
    Tensor b = random_tensor({3, 2}, rng);
    Var la = leaf(a);
    Var lb = leaf(b);
    Var root = sum(tanh(matmul(la, lb)));
    GradMap g = backward(root);
    return std::make_pair(g.grad_of(la).data, g.grad_of(lb).data);
  };
  auto r1 = run();
  auto r2 = run();
  CHECK(r1.first == r2.first);
  CHECK(r1.second == r2.second);
}

TEST_CASE("gradients flow through both occurrences of a shared node") {
  // y = sum(x * x) should match l2sq exactly.
  Var x = leaf(Tensor({3}, {1.5, -0.5, 2.0}));
  Tensor g = backward(sum(mul(x, x))).grad_of(x);
  for (std::size_t i = 0; i < 3; ++i)
    CHECK(g[i] == doctest::Approx(2.0 * x->value[i]).epsilon(1e-14));
}

TEST_CASE("rng normal moments sanity") {
  Rng rng(5);
  double s = 0.0, s2 = 0.0;
  int n = 200000;
  for (int i = 0; i < n; ++i) {
    double z = rng.normal();
    s += z;
    s2 += z * z;
  }
  CHECK(std::abs(s / n) < 0.01);
  CHECK(std::abs(s2 / n - 1.0) < 0.02);
}

TEST_CASE("rng split streams are independent of parent consumption") {
  Rng a(42);
  Rng b(42);
  (void)a.next_u64();
  (void)a.next_u64();
  Rng ca = a.split("child");
  Rng cb = b.split("child");
  for (int i = 0; i < 8; ++i) CHECK(ca.next_u64() == cb.next_u64());
}
