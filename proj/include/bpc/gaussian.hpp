#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "bpc/rng.hpp"
#include "bpc/tensor.hpp"

namespace bpc {

struct ModelSpec;
struct Dataset;

// Covariance with three storage kinds. Full matrices are limited to d <= 64;
// everything at desk scale that needs dense algebra stays small.
struct Covariance {
  enum class Kind { isotropic, diagonal, full };

  Kind kind = Kind::isotropic;
  std::size_t dim = 0;
  double iso = 1.0;                // isotropic variance
  std::vector<double> diag_var;    // [d] per-dimension variances
  std::vector<double> dense;       // [d*d] row-major, symmetric

  static Covariance Isotropic(std::size_t d, double var);
  static Covariance Diagonal(std::vector<double> vars);
  static Covariance Full(std::size_t d, std::vector<double> matrix);

  static Kind richer(Kind a, Kind b);
  Covariance promoted(Kind target) const;
  // Same kind and bitwise-equal parameters.
  bool equals(const Covariance& o) const;

  double logdet() const;
  double trace() const;
  std::vector<double> apply(const std::vector<double>& v) const;   // Sigma v
  std::vector<double> solve(const std::vector<double>& v) const;   // Sigma^{-1} v
  double quad_inv(const std::vector<double>& r) const;             // r^T Sigma^{-1} r
  // Lower Cholesky factor applied to a vector (for sampling).
  std::vector<double> chol_apply(const std::vector<double>& z) const;
  Covariance inverse() const;

  // Conjugate-update covariance (prior^{-1} + count * like^{-1})^{-1}.
  static Covariance posterior(const Covariance& prior, const Covariance& like,
                              double count);
};

struct GaussianApprox {
  Tensor mean;  // [d]
  Covariance cov;

  std::size_t dim() const { return mean.size(); }
  double log_density(const std::vector<double>& x) const;
  Tensor sample(Rng& rng) const;
};

// KL(p || q) in nats; covariance kinds are promoted to the richer of the two.
double gaussian_kl(const GaussianApprox& p, const GaussianApprox& q);

// Squared 2-Wasserstein distance. When the two covariances are identical the
// cross term is skipped entirely so the result reduces exactly to the squared
// mean distance.
double gaussian_w2sq(const GaussianApprox& p, const GaussianApprox& q);

struct McEstimate {
  double value = 0.0;
  double std_error = 0.0;
};

// Monte-Carlo KL(p||q) from S draws of p.
McEstimate mc_kl(const GaussianApprox& p, const GaussianApprox& q,
                 std::size_t samples, Rng& rng);

// Monte-Carlo squared 2-Wasserstein via the optimal coupling map: draws
// x ~ p and evaluates E ||x - T(x)||^2 where T pushes p onto q. For
// isotropic/diagonal pairs the map is the per-dimension affine transport,
// which shares nothing with the closed-form cross term.
McEstimate mc_w2sq_coupling(const GaussianApprox& p, const GaussianApprox& q,
                            std::size_t samples, Rng& rng);

struct FitResult {
  GaussianApprox gauss;
  std::vector<Tensor> trajectory;  // L+1 iterates including the start
};

// Full-batch gradient descent on the negative log potential; the returned
// Gaussian has the final iterate as mean and the supplied fixed covariance.
FitResult fit_sgd_gaussian(const ModelSpec& spec, const Dataset& data,
                           Tensor theta0, std::size_t steps, double lr,
                           Covariance fixed_cov);

enum class DivKind { rkl, fkl, w2 };

const char* div_kind_name(DivKind k);

struct DivergenceRow {
  std::size_t step = 0;
  std::string method;
  DivKind kind = DivKind::rkl;
  double value = 0.0;
  bool exact = true;
};

// CSV schema: step,method,kind,value,exact with %.17g values.
void write_divergence_csv(const std::string& path,
                          const std::vector<DivergenceRow>& rows);

}  // namespace bpc
