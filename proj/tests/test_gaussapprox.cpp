#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "bpc/errors.hpp"
#include "bpc/gaussian.hpp"
#include "bpc/model.hpp"
#include "test_util.hpp"

using namespace bpc;
using testutil::rel_err;

namespace {

GaussianApprox make_gauss(Tensor mean, Covariance cov) {
  GaussianApprox g;
  g.mean = std::move(mean);
  g.cov = std::move(cov);
  return g;
}

Covariance random_spd(std::size_t d, Rng& rng) {
  // A A^T + I is symmetric positive definite by construction
  std::vector<double> a(d * d);
  for (double& v : a) v = rng.normal();
  std::vector<double> m(d * d, 0.0);
  for (std::size_t i = 0; i < d; ++i) {
    for (std::size_t j = 0; j < d; ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < d; ++k) s += a[i * d + k] * a[j * d + k];
      m[i * d + j] = s + (i == j ? 1.0 : 0.0);
    }
  }
  return Covariance::Full(d, std::move(m));
}

}  // namespace

TEST_CASE("kl of identical gaussians is zero") {
  auto p = make_gauss(Tensor::zeros({3}), Covariance::Isotropic(3, 1.0));
  CHECK(std::abs(gaussian_kl(p, p)) <= 1e-12);
  CHECK(std::abs(gaussian_w2sq(p, p)) <= 1e-12);

  Rng rng(11);
  auto q = make_gauss(testutil::random_tensor({4}, rng), random_spd(4, rng));
  CHECK(std::abs(gaussian_kl(q, q)) <= 1e-12);
  CHECK(std::abs(gaussian_w2sq(q, q)) <= 1e-12);
}

TEST_CASE("1-d kl closed form vs hand value and monte carlo") {
  auto p = make_gauss(Tensor::zeros({1}), Covariance::Isotropic(1, 1.0));
  auto q = make_gauss(Tensor({1}, {1.0}), Covariance::Isotropic(1, 2.0));
  double kl = gaussian_kl(p, q);
  // 0.5 * (1/2 - 1 + 1/2 + ln 2)
  CHECK(rel_err(kl, 0.5 * std::log(2.0)) <= 1e-12);

  Rng rng(202);
  auto est = mc_kl(p, q, 1000000, rng);
  CHECK(std::abs(est.value - kl) / kl <= 0.01);
  CHECK(std::abs(est.value - kl) <= 3.0 * est.std_error);
}

TEST_CASE("kl is asymmetric and both directions match monte carlo") {
  auto p = make_gauss(Tensor({2}, {0.0, 1.0}),
                      Covariance::Diagonal({1.0, 0.5}));
  auto q = make_gauss(Tensor({2}, {1.0, -0.5}),
                      Covariance::Diagonal({2.0, 1.5}));
  double pq = gaussian_kl(p, q);
  double qp = gaussian_kl(q, p);
  CHECK(std::abs(pq - qp) > 1e-3);

  Rng rng(303);
  auto est_pq = mc_kl(p, q, 400000, rng);
  auto est_qp = mc_kl(q, p, 400000, rng);
  CHECK(std::abs(est_pq.value - pq) <= 3.0 * est_pq.std_error);
  CHECK(std::abs(est_qp.value - qp) <= 3.0 * est_qp.std_error);
}

TEST_CASE("kl agrees across covariance kind promotions") {
  Rng rng(404);
  Tensor mp = testutil::random_tensor({3}, rng);
  Tensor mq = testutil::random_tensor({3}, rng);
  auto p_iso = make_gauss(mp, Covariance::Isotropic(3, 0.7));
  auto q_diag = make_gauss(mq, Covariance::Diagonal({1.1, 0.9, 2.0}));

  auto as_full = [](const Covariance& c) { return c.promoted(Covariance::Kind::full); };
  auto p_full = make_gauss(mp, as_full(p_iso.cov));
  auto q_full = make_gauss(mq, as_full(q_diag.cov));

  CHECK(rel_err(gaussian_kl(p_iso, q_diag), gaussian_kl(p_full, q_full)) <= 1e-10);
  CHECK(rel_err(gaussian_w2sq(p_iso, q_diag), gaussian_w2sq(p_full, q_full)) <= 1e-10);
}

TEST_CASE("w2 squared closed form") {
  SUBCASE("shared covariance reduces to squared mean distance") {
    Rng rng(505);
    Covariance c = random_spd(5, rng);
    Tensor m1 = testutil::random_tensor({5}, rng);
    Tensor m2 = testutil::random_tensor({5}, rng);
    double expect = 0.0;
    for (std::size_t i = 0; i < 5; ++i) {
      double d = m1[i] - m2[i];
      expect += d * d;
    }
    double w2 = gaussian_w2sq(make_gauss(m1, c), make_gauss(m2, c));
    CHECK(rel_err(w2, expect) <= 1e-12);
  }
  SUBCASE("1-d pair with different variances") {
    auto p = make_gauss(Tensor::zeros({1}), Covariance::Isotropic(1, 1.0));
    auto q = make_gauss(Tensor({1}, {1.0}), Covariance::Isotropic(1, 4.0));
    CHECK(rel_err(gaussian_w2sq(p, q), 2.0) <= 1e-12);
  }
  SUBCASE("symmetry on a random full pair") {
    Rng rng(606);
    auto p = make_gauss(testutil::random_tensor({4}, rng), random_spd(4, rng));
    auto q = make_gauss(testutil::random_tensor({4}, rng), random_spd(4, rng));
    CHECK(std::abs(gaussian_w2sq(p, q) - gaussian_w2sq(q, p)) <= 1e-10);
    CHECK(gaussian_w2sq(p, q) >= 0.0);
  }
}

TEST_CASE("closed forms agree with coupling monte carlo") {
  Rng rng(707);
  auto p = make_gauss(Tensor({3}, {0.2, -0.4, 1.0}),
                      Covariance::Diagonal({0.8, 1.3, 0.5}));
  auto q = make_gauss(Tensor({3}, {-0.3, 0.6, 0.1}),
                      Covariance::Diagonal({1.9, 0.7, 1.2}));
  double w2 = gaussian_w2sq(p, q);
  auto est = mc_w2sq_coupling(p, q, 400000, rng);
  CHECK(std::abs(est.value - w2) <= 3.0 * est.std_error);

  auto pf = make_gauss(p.mean, random_spd(3, rng));
  auto qf = make_gauss(q.mean, random_spd(3, rng));
  double w2f = gaussian_w2sq(pf, qf);
  auto estf = mc_w2sq_coupling(pf, qf, 400000, rng);
  CHECK(std::abs(estf.value - w2f) <= 3.0 * estf.std_error);
}

TEST_CASE("mc kl sanity") {
  auto p = make_gauss(Tensor({2}, {0.5, -0.5}), Covariance::Diagonal({1.0, 2.0}));
  Rng rng(808);
  auto self = mc_kl(p, p, 50000, rng);
  CHECK(std::abs(self.value) <= std::max(3.0 * self.std_error, 1e-12));

  auto q = make_gauss(Tensor({2}, {0.0, 0.0}), Covariance::Diagonal({1.5, 1.0}));
  auto one = mc_kl(p, q, 1, rng);
  CHECK(std::isfinite(one.value));
  CHECK(one.std_error == 0.0);

  CHECK_THROWS_AS(mc_kl(p, q, 0, rng), ContractError);
}

TEST_CASE("covariance validation and algebra") {
  SUBCASE("non-spd rejected") {
    // symmetric but indefinite
    CHECK_THROWS_AS(Covariance::Full(2, {1.0, 2.0, 2.0, 1.0}), ContractError);
    CHECK_THROWS_AS(Covariance::Full(2, {1.0, 0.5, -0.5, 1.0}), ContractError);
    CHECK_THROWS_AS(Covariance::Diagonal({1.0, 0.0}), ContractError);
    CHECK_THROWS_AS(Covariance::Isotropic(2, -1.0), ContractError);
    CHECK_THROWS_AS(Covariance::Full(65, std::vector<double>(65 * 65, 0.0)),
                    ContractError);
  }
  SUBCASE("solve inverts apply") {
    Rng rng(909);
    Covariance c = random_spd(4, rng);
    std::vector<double> v = {0.3, -1.2, 0.7, 2.1};
    auto round = c.solve(c.apply(v));
    for (std::size_t i = 0; i < v.size(); ++i) CHECK(rel_err(round[i], v[i]) <= 1e-10);
    Covariance inv = c.inverse();
    auto round2 = inv.apply(c.apply(v));
    for (std::size_t i = 0; i < v.size(); ++i) CHECK(rel_err(round2[i], v[i]) <= 1e-10);
  }
  SUBCASE("cholesky factor reconstructs the matrix") {
    Rng rng(910);
    std::size_t d = 3;
    Covariance c = random_spd(d, rng);
    // columns of L from basis vectors, then compare L L^T to the matrix
    std::vector<std::vector<double>> cols;
    for (std::size_t j = 0; j < d; ++j) {
      std::vector<double> e(d, 0.0);
      e[j] = 1.0;
      cols.push_back(c.chol_apply(e));
    }
    for (std::size_t i = 0; i < d; ++i) {
      for (std::size_t j = 0; j < d; ++j) {
        double s = 0.0;
        for (std::size_t k = 0; k < d; ++k) s += cols[k][i] * cols[k][j];
        CHECK(rel_err(s, c.dense[i * d + j]) <= 1e-10);
      }
    }
  }
  SUBCASE("posterior update matches full-kind computation") {
    Covariance prior = Covariance::Isotropic(3, 100.0);
    Covariance like = Covariance::Diagonal({1.0, 2.0, 0.5});
    Covariance mixed = Covariance::posterior(prior, like, 7.0);
    Covariance dense = Covariance::posterior(prior.promoted(Covariance::Kind::full),
                                             like.promoted(Covariance::Kind::full),
                                             7.0);
    CHECK(mixed.kind == Covariance::Kind::diagonal);
    for (std::size_t i = 0; i < 3; ++i) {
      CHECK(rel_err(mixed.diag_var[i], dense.dense[i * 3 + i]) <= 1e-10);
    }
  }
}

TEST_CASE("sampling and log density") {
  auto p = make_gauss(Tensor({2}, {1.0, -2.0}), Covariance::Diagonal({0.25, 4.0}));
  Rng rng(111);
  std::size_t n = 200000;
  double s0 = 0.0, s1 = 0.0, q0 = 0.0, q1 = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    Tensor x = p.sample(rng);
    s0 += x[0];
    s1 += x[1];
    q0 += (x[0] - 1.0) * (x[0] - 1.0);
    q1 += (x[1] + 2.0) * (x[1] + 2.0);
  }
  double nf = static_cast<double>(n);
  CHECK(std::abs(s0 / nf - 1.0) <= 4.0 * std::sqrt(0.25 / nf));
  CHECK(std::abs(s1 / nf + 2.0) <= 4.0 * std::sqrt(4.0 / nf));
  CHECK(std::abs(q0 / nf - 0.25) <= 0.01);
  CHECK(std::abs(q1 / nf - 4.0) <= 0.16);

  auto std1 = make_gauss(Tensor::zeros({1}), Covariance::Isotropic(1, 1.0));
  CHECK(rel_err(std1.log_density({0.0}), -0.5 * std::log(2.0 * 3.14159265358979323846)) <=
        1e-12);
}

TEST_CASE("sgd gaussian fit") {
  Rng rng(121);
  std::size_t d = 4, m = 5;
  // near-flat prior so the likelihood optimum coincides with the posterior mean
  ModelSpec spec = make_gaussian_location(
      d, Tensor::zeros({d}), Covariance::Isotropic(d, 1e7),
      Covariance::Isotropic(d, 1.0));
  Dataset data = make_dataset(testutil::random_tensor({m, d}, rng));

  SUBCASE("zero steps returns the init") {
    Tensor init = testutil::random_tensor({d}, rng);
    FitResult res = fit_sgd_gaussian(spec, data, init, 0, 0.1,
                                     Covariance::Isotropic(d, 1e-4));
    CHECK(res.trajectory.size() == 1);
    for (std::size_t i = 0; i < d; ++i) CHECK(res.gauss.mean[i] == init[i]);
  }
  SUBCASE("loss decreases and endpoint matches the posterior mean") {
    Tensor init = testutil::random_tensor({d}, rng);
    FitResult res = fit_sgd_gaussian(spec, data, init, 400, 0.02,
                                     Covariance::Isotropic(d, 1e-4));
    CHECK(res.trajectory.size() == 401);
    double prev = std::numeric_limits<double>::infinity();
    for (const auto& t : res.trajectory) {
      ParamVector theta = make_params(spec, t);
      double loss = potential_energy_value(spec, data, theta, 0.0);
      CHECK(loss <= prev + 1e-10);
      prev = loss;
    }
    GaussianApprox post = exact_conjugate_posterior(spec, data);
    for (std::size_t i = 0; i < d; ++i) {
      CHECK(std::abs(res.gauss.mean[i] - post.mean[i]) <= 1e-6);
    }
  }
  SUBCASE("non-finite iterate reports the step") {
    Tensor init = Tensor::full({d}, 1e300);
    CHECK_THROWS_AS(fit_sgd_gaussian(spec, data, init, 50, 1e10,
                                     Covariance::Isotropic(d, 1.0)),
                    NumericError);
  }
}

TEST_CASE("divergence csv roundtrip") {
  std::vector<DivergenceRow> rows;
  DivergenceRow r;
  r.step = 0;
  r.method = "rkl";
  r.kind = DivKind::rkl;
  r.value = 0.12345678901234567;
  r.exact = true;
  rows.push_back(r);
  r.step = 10;
  r.method = "w2";
  r.kind = DivKind::w2;
  r.value = 3.0e-8;
  r.exact = false;
  rows.push_back(r);

  std::string path = "divergence_test.csv";
  write_divergence_csv(path, rows);
  std::ifstream in(path);
  REQUIRE(static_cast<bool>(in));
  std::string line;
  std::getline(in, line);
  CHECK(line == "step,method,kind,value,exact");
  std::getline(in, line);
  {
    std::istringstream ss(line);
    std::string step, method, kind, value, exact;
    std::getline(ss, step, ',');
    std::getline(ss, method, ',');
    std::getline(ss, kind, ',');
    std::getline(ss, value, ',');
    std::getline(ss, exact, ',');
    CHECK(step == "0");
    CHECK(method == "rkl");
    CHECK(kind == "rkl");
    CHECK(std::stod(value) == 0.12345678901234567);
    CHECK(exact == "1");
  }
  std::getline(in, line);
  {
    std::istringstream ss(line);
    std::string step, method, kind, value, exact;
    std::getline(ss, step, ',');
    std::getline(ss, method, ',');
    std::getline(ss, kind, ',');
    std::getline(ss, value, ',');
    std::getline(ss, exact, ',');
    CHECK(step == "10");
    CHECK(kind == "w2");
    CHECK(std::stod(value) == 3.0e-8);
    CHECK(exact == "0");
  }
  std::remove(path.c_str());
}

TEST_CASE("dimension errors name the operation") {
  auto p = make_gauss(Tensor::zeros({2}), Covariance::Isotropic(2, 1.0));
  auto q = make_gauss(Tensor::zeros({3}), Covariance::Isotropic(3, 1.0));
  CHECK_THROWS_WITH_AS(gaussian_kl(p, q), doctest::Contains("gaussian_kl"),
                       DimensionError);
  CHECK_THROWS_WITH_AS(gaussian_w2sq(p, q), doctest::Contains("gaussian_w2sq"),
                       DimensionError);
}
