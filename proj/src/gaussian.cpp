#include "bpc/gaussian.hpp"

#include <Eigen/Cholesky>
#include <Eigen/Core>
#include <Eigen/Eigenvalues>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>

#include "bpc/errors.hpp"
#include "bpc/model.hpp"

namespace bpc {

namespace {

using EMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using EVec = Eigen::VectorXd;

constexpr std::size_t kMaxFullDim = 64;
constexpr double kTwoPi = 6.283185307179586476925286766559;

EMat as_matrix(const std::vector<double>& dense, std::size_t d) {
  return Eigen::Map<const EMat>(dense.data(), static_cast<Eigen::Index>(d),
                                static_cast<Eigen::Index>(d));
}

EVec as_vector(const std::vector<double>& v) {
  return Eigen::Map<const EVec>(v.data(), static_cast<Eigen::Index>(v.size()));
}

std::vector<double> from_vector(const EVec& v) {
  return std::vector<double>(v.data(), v.data() + v.size());
}

void check_same_dim(const Covariance& c, std::size_t n, const char* what) {
  if (c.dim != n) {
    throw DimensionError(std::string(what) + ": covariance dim " +
                         std::to_string(c.dim) + " vs vector dim " +
                         std::to_string(n));
  }
}

Eigen::LLT<EMat> llt_of(const Covariance& c, const char* what) {
  Eigen::LLT<EMat> llt(as_matrix(c.dense, c.dim));
  if (llt.info() != Eigen::Success) {
    throw ContractError(std::string(what) + ": covariance not positive definite");
  }
  return llt;
}

// Symmetric positive-semidefinite square root via eigendecomposition.
EMat psd_sqrt(const EMat& m, const char* what) {
  Eigen::SelfAdjointEigenSolver<EMat> es(m);
  if (es.info() != Eigen::Success) {
    throw NumericError(std::string(what) + ": eigendecomposition failed");
  }
  EVec vals = es.eigenvalues();
  for (Eigen::Index i = 0; i < vals.size(); ++i) {
    // clamp roundoff noise; genuinely negative spectra are rejected upstream
    vals[i] = vals[i] > 0.0 ? std::sqrt(vals[i]) : 0.0;
  }
  return es.eigenvectors() * vals.asDiagonal() * es.eigenvectors().transpose();
}

}  // namespace

Covariance Covariance::Isotropic(std::size_t d, double var) {
  if (d == 0) throw DimensionError("covariance: dimension must be positive");
  if (!(var > 0.0) || !std::isfinite(var)) {
    throw ContractError("covariance: isotropic variance must be finite and positive");
  }
  Covariance c;
  c.kind = Kind::isotropic;
  c.dim = d;
  c.iso = var;
  return c;
}

Covariance Covariance::Diagonal(std::vector<double> vars) {
  if (vars.empty()) throw DimensionError("covariance: dimension must be positive");
  for (double v : vars) {
    if (!(v > 0.0) || !std::isfinite(v)) {
      throw ContractError("covariance: diagonal variances must be finite and positive");
    }
  }
  Covariance c;
  c.kind = Kind::diagonal;
  c.dim = vars.size();
  c.diag_var = std::move(vars);
  return c;
}

Covariance Covariance::Full(std::size_t d, std::vector<double> matrix) {
  if (d == 0) throw DimensionError("covariance: dimension must be positive");
  if (d > kMaxFullDim) {
    throw ContractError("covariance: full kind limited to dim <= " +
                        std::to_string(kMaxFullDim));
  }
  if (matrix.size() != d * d) {
    throw DimensionError("covariance: full matrix has " +
                         std::to_string(matrix.size()) + " entries, expected " +
                         std::to_string(d * d));
  }
  double scale = 0.0;
  for (double v : matrix) {
    if (!std::isfinite(v)) throw ContractError("covariance: non-finite entry");
    scale = std::max(scale, std::abs(v));
  }
  for (std::size_t i = 0; i < d; ++i) {
    for (std::size_t j = i + 1; j < d; ++j) {
      double a = matrix[i * d + j], b = matrix[j * d + i];
      if (std::abs(a - b) > 1e-9 * std::max(1.0, scale)) {
        throw ContractError("covariance: matrix not symmetric");
      }
      double s = 0.5 * (a + b);
      matrix[i * d + j] = s;
      matrix[j * d + i] = s;
    }
  }
  Covariance c;
  c.kind = Kind::full;
  c.dim = d;
  c.dense = std::move(matrix);
  llt_of(c, "covariance");  // SPD check
  return c;
}

Covariance::Kind Covariance::richer(Kind a, Kind b) {
  auto rank = [](Kind k) {
    switch (k) {
      case Kind::isotropic: return 0;
      case Kind::diagonal: return 1;
      case Kind::full: return 2;
    }
    return 2;
  };
  return rank(a) >= rank(b) ? a : b;
}

Covariance Covariance::promoted(Kind target) const {
  if (target == kind) return *this;
  if (richer(kind, target) == kind) {
    throw ContractError("covariance: cannot demote kind");
  }
  if (target == Kind::diagonal) {
    return Diagonal(std::vector<double>(dim, iso));
  }
  // target full
  std::vector<double> m(dim * dim, 0.0);
  for (std::size_t i = 0; i < dim; ++i) {
    m[i * dim + i] = kind == Kind::isotropic ? iso : diag_var[i];
  }
  return Full(dim, std::move(m));
}

bool Covariance::equals(const Covariance& o) const {
  if (kind != o.kind || dim != o.dim) return false;
  switch (kind) {
    case Kind::isotropic: return iso == o.iso;
    case Kind::diagonal: return diag_var == o.diag_var;
    case Kind::full: return dense == o.dense;
  }
  return false;
}

double Covariance::logdet() const {
  switch (kind) {
    case Kind::isotropic:
      return static_cast<double>(dim) * std::log(iso);
    case Kind::diagonal: {
      double s = 0.0;
      for (double v : diag_var) s += std::log(v);
      return s;
    }
    case Kind::full: {
      auto llt = llt_of(*this, "logdet");
      double s = 0.0;
      for (std::size_t i = 0; i < dim; ++i) {
        s += std::log(llt.matrixLLT()(static_cast<Eigen::Index>(i),
                                      static_cast<Eigen::Index>(i)));
      }
      return 2.0 * s;
    }
  }
  throw ContractError("covariance: bad kind");
}

double Covariance::trace() const {
  switch (kind) {
    case Kind::isotropic:
      return static_cast<double>(dim) * iso;
    case Kind::diagonal: {
      double s = 0.0;
      for (double v : diag_var) s += v;
      return s;
    }
    case Kind::full: {
      double s = 0.0;
      for (std::size_t i = 0; i < dim; ++i) s += dense[i * dim + i];
      return s;
    }
  }
  throw ContractError("covariance: bad kind");
}

std::vector<double> Covariance::apply(const std::vector<double>& v) const {
  check_same_dim(*this, v.size(), "covariance apply");
  switch (kind) {
    case Kind::isotropic: {
      std::vector<double> out(v);
      for (double& x : out) x *= iso;
      return out;
    }
    case Kind::diagonal: {
      std::vector<double> out(v);
      for (std::size_t i = 0; i < dim; ++i) out[i] *= diag_var[i];
      return out;
    }
    case Kind::full:
      return from_vector(as_matrix(dense, dim) * as_vector(v));
  }
  throw ContractError("covariance: bad kind");
}

std::vector<double> Covariance::solve(const std::vector<double>& v) const {
  check_same_dim(*this, v.size(), "covariance solve");
  switch (kind) {
    case Kind::isotropic: {
      std::vector<double> out(v);
      for (double& x : out) x /= iso;
      return out;
    }
    case Kind::diagonal: {
      std::vector<double> out(v);
      for (std::size_t i = 0; i < dim; ++i) out[i] /= diag_var[i];
      return out;
    }
    case Kind::full: {
      auto llt = llt_of(*this, "covariance solve");
      return from_vector(llt.solve(as_vector(v)));
    }
  }
  throw ContractError("covariance: bad kind");
}

double Covariance::quad_inv(const std::vector<double>& r) const {
  auto s = solve(r);
  double q = 0.0;
  for (std::size_t i = 0; i < r.size(); ++i) q += r[i] * s[i];
  return q;
}

std::vector<double> Covariance::chol_apply(const std::vector<double>& z) const {
  check_same_dim(*this, z.size(), "covariance chol");
  switch (kind) {
    case Kind::isotropic: {
      std::vector<double> out(z);
      double s = std::sqrt(iso);
      for (double& x : out) x *= s;
      return out;
    }
    case Kind::diagonal: {
      std::vector<double> out(z);
      for (std::size_t i = 0; i < dim; ++i) out[i] *= std::sqrt(diag_var[i]);
      return out;
    }
    case Kind::full: {
      auto llt = llt_of(*this, "covariance chol");
      EMat l = llt.matrixL();
      return from_vector(l * as_vector(z));
    }
  }
  throw ContractError("covariance: bad kind");
}

Covariance Covariance::inverse() const {
  switch (kind) {
    case Kind::isotropic:
      return Isotropic(dim, 1.0 / iso);
    case Kind::diagonal: {
      std::vector<double> inv(diag_var);
      for (double& v : inv) v = 1.0 / v;
      return Diagonal(std::move(inv));
    }
    case Kind::full: {
      auto llt = llt_of(*this, "covariance inverse");
      EMat inv = llt.solve(EMat::Identity(static_cast<Eigen::Index>(dim),
                                          static_cast<Eigen::Index>(dim)));
      EMat sym = 0.5 * (inv + inv.transpose());
      return Full(dim, std::vector<double>(sym.data(), sym.data() + dim * dim));
    }
  }
  throw ContractError("covariance: bad kind");
}

Covariance Covariance::posterior(const Covariance& prior, const Covariance& like,
                                 double count) {
  if (prior.dim != like.dim) {
    throw DimensionError("covariance posterior: prior dim " +
                         std::to_string(prior.dim) + " vs likelihood dim " +
                         std::to_string(like.dim));
  }
  if (count < 0.0) throw ContractError("covariance posterior: negative count");
  Kind k = richer(prior.kind, like.kind);
  std::size_t d = prior.dim;
  if (k == Kind::isotropic) {
    return Isotropic(d, 1.0 / (1.0 / prior.iso + count / like.iso));
  }
  if (k == Kind::diagonal) {
    Covariance p = prior.promoted(Kind::diagonal);
    Covariance l = like.promoted(Kind::diagonal);
    std::vector<double> v(d);
    for (std::size_t i = 0; i < d; ++i) {
      v[i] = 1.0 / (1.0 / p.diag_var[i] + count / l.diag_var[i]);
    }
    return Diagonal(std::move(v));
  }
  Covariance p = prior.promoted(Kind::full).inverse();
  Covariance l = like.promoted(Kind::full).inverse();
  EMat lambda = as_matrix(p.dense, d) + count * as_matrix(l.dense, d);
  Eigen::LLT<EMat> llt(lambda);
  if (llt.info() != Eigen::Success) {
    throw NumericError("covariance posterior: precision not positive definite");
  }
  EMat sigma = llt.solve(EMat::Identity(static_cast<Eigen::Index>(d),
                                        static_cast<Eigen::Index>(d)));
  EMat sym = 0.5 * (sigma + sigma.transpose());
  return Full(d, std::vector<double>(sym.data(), sym.data() + d * d));
}

double GaussianApprox::log_density(const std::vector<double>& x) const {
  if (x.size() != dim()) {
    throw DimensionError("gaussian log_density: point dim " +
                         std::to_string(x.size()) + " vs mean dim " +
                         std::to_string(dim()));
  }
  std::vector<double> r(x);
  for (std::size_t i = 0; i < r.size(); ++i) r[i] -= mean.data[i];
  double d = static_cast<double>(dim());
  return -0.5 * (d * std::log(kTwoPi) + cov.logdet() + cov.quad_inv(r));
}

Tensor GaussianApprox::sample(Rng& rng) const {
  std::vector<double> z(dim());
  for (double& v : z) v = rng.normal();
  auto lz = cov.chol_apply(z);
  Tensor out = mean;
  for (std::size_t i = 0; i < lz.size(); ++i) out.data[i] += lz[i];
  return out;
}

namespace {

void check_pair(const GaussianApprox& p, const GaussianApprox& q,
                const char* what) {
  if (p.dim() != q.dim()) {
    throw DimensionError(std::string(what) + ": dim " + std::to_string(p.dim()) +
                         " vs " + std::to_string(q.dim()));
  }
  if (p.cov.dim != p.dim() || q.cov.dim != q.dim()) {
    throw DimensionError(std::string(what) + ": covariance dim mismatch");
  }
}

}  // namespace

double gaussian_kl(const GaussianApprox& p, const GaussianApprox& q) {
  check_pair(p, q, "gaussian_kl");
  std::size_t d = p.dim();
  auto kind = Covariance::richer(p.cov.kind, q.cov.kind);
  Covariance cp = p.cov.promoted(kind);
  Covariance cq = q.cov.promoted(kind);
  std::vector<double> dm(d);
  for (std::size_t i = 0; i < d; ++i) dm[i] = p.mean.data[i] - q.mean.data[i];

  double tr = 0.0;
  if (kind == Covariance::Kind::isotropic) {
    tr = static_cast<double>(d) * cp.iso / cq.iso;
  } else if (kind == Covariance::Kind::diagonal) {
    for (std::size_t i = 0; i < d; ++i) tr += cp.diag_var[i] / cq.diag_var[i];
  } else {
    auto llt = llt_of(cq, "gaussian_kl");
    tr = llt.solve(as_matrix(cp.dense, d)).trace();
  }
  double quad = cq.quad_inv(dm);
  double val = 0.5 * (tr - static_cast<double>(d) + quad + cq.logdet() - cp.logdet());
  if (!std::isfinite(val)) throw NumericError("gaussian_kl: non-finite result");
  return val;
}

double gaussian_w2sq(const GaussianApprox& p, const GaussianApprox& q) {
  check_pair(p, q, "gaussian_w2sq");
  std::size_t d = p.dim();
  double mean_sq = 0.0;
  for (std::size_t i = 0; i < d; ++i) {
    double diff = p.mean.data[i] - q.mean.data[i];
    mean_sq += diff * diff;
  }
  // identical covariances: the transport cost is the mean offset alone
  if (p.cov.equals(q.cov)) return mean_sq;

  auto kind = Covariance::richer(p.cov.kind, q.cov.kind);
  Covariance cp = p.cov.promoted(kind);
  Covariance cq = q.cov.promoted(kind);
  double bures = 0.0;
  if (kind == Covariance::Kind::isotropic) {
    double s = std::sqrt(cp.iso) - std::sqrt(cq.iso);
    bures = static_cast<double>(d) * s * s;
  } else if (kind == Covariance::Kind::diagonal) {
    for (std::size_t i = 0; i < d; ++i) {
      double s = std::sqrt(cp.diag_var[i]) - std::sqrt(cq.diag_var[i]);
      bures += s * s;
    }
  } else {
    EMat sq = psd_sqrt(as_matrix(cq.dense, d), "gaussian_w2sq");
    EMat inner = sq * as_matrix(cp.dense, d) * sq;
    Eigen::SelfAdjointEigenSolver<EMat> es(inner);
    if (es.info() != Eigen::Success) {
      throw NumericError("gaussian_w2sq: eigendecomposition failed");
    }
    double cross = 0.0;
    for (Eigen::Index i = 0; i < es.eigenvalues().size(); ++i) {
      double v = es.eigenvalues()[i];
      cross += v > 0.0 ? std::sqrt(v) : 0.0;
    }
    bures = cp.trace() + cq.trace() - 2.0 * cross;
  }
  double val = mean_sq + bures;
  if (!std::isfinite(val)) throw NumericError("gaussian_w2sq: non-finite result");
  return val;
}

McEstimate mc_kl(const GaussianApprox& p, const GaussianApprox& q,
                 std::size_t samples, Rng& rng) {
  check_pair(p, q, "mc_kl");
  if (samples == 0) throw ContractError("mc_kl: samples must be positive");
  double sum = 0.0, sumsq = 0.0;
  for (std::size_t s = 0; s < samples; ++s) {
    Tensor x = p.sample(rng);
    double v = p.log_density(x.data) - q.log_density(x.data);
    sum += v;
    sumsq += v * v;
  }
  double n = static_cast<double>(samples);
  McEstimate est;
  est.value = sum / n;
  double var = std::max(0.0, sumsq / n - est.value * est.value);
  est.std_error = samples > 1 ? std::sqrt(var / (n - 1.0)) : 0.0;
  return est;
}

McEstimate mc_w2sq_coupling(const GaussianApprox& p, const GaussianApprox& q,
                            std::size_t samples, Rng& rng) {
  check_pair(p, q, "mc_w2sq_coupling");
  if (samples == 0) throw ContractError("mc_w2sq_coupling: samples must be positive");
  std::size_t d = p.dim();
  auto kind = Covariance::richer(p.cov.kind, q.cov.kind);

  // transport map T(x) = mu_q + A (x - mu_p)
  std::vector<double> a_diag;
  EMat a_full;
  if (kind == Covariance::Kind::full) {
    Covariance cp = p.cov.promoted(kind);
    Covariance cq = q.cov.promoted(kind);
    EMat sp = psd_sqrt(as_matrix(cp.dense, d), "mc_w2sq_coupling");
    EMat inner = psd_sqrt(sp * as_matrix(cq.dense, d) * sp, "mc_w2sq_coupling");
    Eigen::SelfAdjointEigenSolver<EMat> es(sp);
    if (es.info() != Eigen::Success) {
      throw NumericError("mc_w2sq_coupling: eigendecomposition failed");
    }
    EVec inv_vals = es.eigenvalues();
    for (Eigen::Index i = 0; i < inv_vals.size(); ++i) {
      if (inv_vals[i] <= 0.0) {
        throw NumericError("mc_w2sq_coupling: degenerate covariance");
      }
      inv_vals[i] = 1.0 / inv_vals[i];
    }
    EMat sp_inv =
        es.eigenvectors() * inv_vals.asDiagonal() * es.eigenvectors().transpose();
    a_full = sp_inv * inner * sp_inv;
  } else {
    Covariance cp = p.cov.promoted(Covariance::Kind::diagonal);
    Covariance cq = q.cov.promoted(Covariance::Kind::diagonal);
    a_diag.resize(d);
    for (std::size_t i = 0; i < d; ++i) {
      a_diag[i] = std::sqrt(cq.diag_var[i] / cp.diag_var[i]);
    }
  }

  double sum = 0.0, sumsq = 0.0;
  std::vector<double> centered(d), mapped(d);
  for (std::size_t s = 0; s < samples; ++s) {
    Tensor x = p.sample(rng);
    for (std::size_t i = 0; i < d; ++i) centered[i] = x.data[i] - p.mean.data[i];
    if (kind == Covariance::Kind::full) {
      EVec m = a_full * as_vector(centered);
      for (std::size_t i = 0; i < d; ++i) mapped[i] = m[static_cast<Eigen::Index>(i)];
    } else {
      for (std::size_t i = 0; i < d; ++i) mapped[i] = a_diag[i] * centered[i];
    }
    double c = 0.0;
    for (std::size_t i = 0; i < d; ++i) {
      double diff = x.data[i] - (q.mean.data[i] + mapped[i]);
      c += diff * diff;
    }
    sum += c;
    sumsq += c * c;
  }
  double n = static_cast<double>(samples);
  McEstimate est;
  est.value = sum / n;
  double var = std::max(0.0, sumsq / n - est.value * est.value);
  est.std_error = samples > 1 ? std::sqrt(var / (n - 1.0)) : 0.0;
  return est;
}

FitResult fit_sgd_gaussian(const ModelSpec& spec, const Dataset& data,
                           Tensor theta0, std::size_t steps, double lr,
                           Covariance fixed_cov) {
  check_dataset(spec, data);
  if (theta0.size() != spec.param_dim()) {
    throw DimensionError("fit_sgd_gaussian: theta dim " +
                         std::to_string(theta0.size()) + " vs model dim " +
                         std::to_string(spec.param_dim()));
  }
  if (fixed_cov.dim != spec.param_dim()) {
    throw DimensionError("fit_sgd_gaussian: covariance dim mismatch");
  }
  if (!(lr > 0.0)) throw ContractError("fit_sgd_gaussian: lr must be positive");

  FitResult res;
  res.trajectory.reserve(steps + 1);
  ParamVector theta = make_params(spec, theta0);
  res.trajectory.push_back(theta.flat);
  for (std::size_t t = 0; t < steps; ++t) {
    Tensor g = potential_energy_grad_theta(spec, data, theta, spec.weight_decay);
    for (std::size_t i = 0; i < theta.flat.size(); ++i) {
      theta.flat.data[i] -= lr * g.data[i];
      if (!std::isfinite(theta.flat.data[i])) {
        throw NumericError("fit_sgd_gaussian: non-finite iterate at step " +
                           std::to_string(t + 1));
      }
    }
    res.trajectory.push_back(theta.flat);
  }
  res.gauss.mean = theta.flat;
  res.gauss.cov = std::move(fixed_cov);
  return res;
}

const char* div_kind_name(DivKind k) {
  switch (k) {
    case DivKind::rkl: return "rkl";
    case DivKind::fkl: return "fkl";
    case DivKind::w2: return "w2";
  }
  return "rkl";
}

void write_divergence_csv(const std::string& path,
                          const std::vector<DivergenceRow>& rows) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot open for writing: " + path);
  out << "step,method,kind,value,exact\n";
  char buf[64];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof(buf), "%.17g", r.value);
    out << r.step << ',' << r.method << ',' << div_kind_name(r.kind) << ','
        << buf << ',' << (r.exact ? 1 : 0) << '\n';
  }
  if (!out) throw IoError("write failed: " + path);
}

}  // namespace bpc
