#include "bpc/sampler.hpp"

#include <cmath>
#include <string>

#include "bpc/errors.hpp"

namespace bpc {

namespace {

Tensor scaled_normal(std::size_t n, double sigma, Rng& rng) {
  Tensor t = Tensor::zeros({n});
  for (double& v : t.data) v = sigma * rng.normal();
  return t;
}

double kinetic(const Tensor& r) {
  double s = 0.0;
  for (double v : r.data) s += v * v;
  return 0.5 * s;
}

bool all_finite(const Tensor& t) {
  for (double v : t.data) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

Tensor grad_u(const ModelSpec& spec, const Dataset& data, const Tensor& theta,
              double decay) {
  return potential_energy_grad_theta(spec, data, make_params(spec, theta), decay);
}

double value_u(const ModelSpec& spec, const Dataset& data, const Tensor& theta,
               double decay) {
  return potential_energy_value(spec, data, make_params(spec, theta), decay);
}

void validate_common(const HmcConfig& cfg, const char* who) {
  auto fail = [&](const std::string& msg) {
    throw ContractError(std::string(who) + ": " + msg);
  };
  if (cfg.iterations < 1) fail("iterations must be >= 1");
  if (cfg.leapfrog_steps < 1) fail("leapfrog steps must be >= 1");
  if (!(cfg.step_size > 0.0) || !std::isfinite(cfg.step_size)) {
    fail("step size must be finite and positive");
  }
  if (!(cfg.sigma_theta >= 0.0) || !std::isfinite(cfg.sigma_theta)) {
    fail("sigma_theta must be finite and >= 0");
  }
  if (!(cfg.sigma_r >= 0.0) || !std::isfinite(cfg.sigma_r)) {
    fail("sigma_r must be finite and >= 0");
  }
  if (!(cfg.weight_decay >= 0.0) || !std::isfinite(cfg.weight_decay)) {
    fail("weight decay must be finite and >= 0");
  }
  if (cfg.burn_in >= cfg.iterations) fail("burn-in must be < iterations");
}

}  // namespace

double Chain::acceptance_rate() const {
  if (iterations == 0) return 0.0;
  return static_cast<double>(accepted) / static_cast<double>(iterations);
}

void validate_hmc_config(const HmcConfig& cfg) { validate_common(cfg, "hmc"); }

void validate_sghmc_config(const SghmcConfig& cfg) {
  validate_common(cfg, "asghmc");
  if (!(cfg.momentum_decay > 0.0) || !(cfg.momentum_decay < 1.0)) {
    throw ContractError("asghmc: momentum decay must lie in (0,1)");
  }
  if (!(cfg.noise_scale >= 0.0) || !std::isfinite(cfg.noise_scale)) {
    throw ContractError("asghmc: noise scale must be finite and >= 0");
  }
}

double hamiltonian(const ModelSpec& spec, const Dataset& coreset,
                   const Tensor& theta, const Tensor& r, double decay) {
  return value_u(spec, coreset, theta, decay) + kinetic(r);
}

PhasePoint leapfrog(const ModelSpec& spec, const Dataset& coreset,
                    const Tensor& theta0, const Tensor& r0, std::size_t steps,
                    double step_size, double decay) {
  if (steps < 1) throw ContractError("leapfrog: steps must be >= 1");
  const std::size_t d = spec.param_dim();
  if (theta0.size() != d || r0.size() != d) {
    throw DimensionError("leapfrog: phase point size " +
                         std::to_string(theta0.size()) + "/" +
                         std::to_string(r0.size()) + ", expected " +
                         std::to_string(d));
  }
  PhasePoint p{theta0, r0};
  Tensor g = grad_u(spec, coreset, p.theta, decay);
  for (std::size_t i = 0; i < d; ++i) p.r.data[i] -= 0.5 * step_size * g.data[i];
  for (std::size_t s = 0; s < steps; ++s) {
    for (std::size_t i = 0; i < d; ++i) p.theta.data[i] += step_size * p.r.data[i];
    if (!all_finite(p.theta)) {
      throw NumericError("leapfrog: non-finite position at step " +
                         std::to_string(s + 1));
    }
    g = grad_u(spec, coreset, p.theta, decay);
    const double kick = (s + 1 == steps) ? 0.5 * step_size : step_size;
    for (std::size_t i = 0; i < d; ++i) p.r.data[i] -= kick * g.data[i];
  }
  if (!all_finite(p.r)) throw NumericError("leapfrog: non-finite momentum");
  return p;
}

bool mh_accept(double h_current, double h_proposed, Rng& rng) {
  const double rho = std::exp(h_current - h_proposed);
  return rng.uniform() < rho;
}

Chain hmc_sample(const ModelSpec& spec, const Dataset& coreset,
                 const HmcConfig& cfg, Rng& rng) {
  validate_hmc_config(cfg);
  check_dataset(spec, coreset);
  if (coreset.size() == 0) throw ContractError("hmc: empty coreset");

  const std::size_t d = spec.param_dim();
  Tensor theta = scaled_normal(d, cfg.sigma_theta, rng);
  double u_cur = value_u(spec, coreset, theta, cfg.weight_decay);

  Chain chain;
  chain.iterations = cfg.iterations;
  chain.potentials.reserve(cfg.iterations);
  chain.samples.reserve(cfg.iterations - cfg.burn_in);
  for (std::size_t t = 0; t < cfg.iterations; ++t) {
    Tensor r = scaled_normal(d, cfg.sigma_r, rng);
    const double h0 = u_cur + kinetic(r);
    bool proposed = false;
    PhasePoint prop;
    double u_prop = 0.0, h1 = 0.0;
    try {
      prop = leapfrog(spec, coreset, theta, r, cfg.leapfrog_steps, cfg.step_size,
                      cfg.weight_decay);
      u_prop = value_u(spec, coreset, prop.theta, cfg.weight_decay);
      h1 = u_prop + kinetic(prop.r);
      proposed = std::isfinite(h1);
    } catch (const NumericError&) {
      proposed = false;
    }
    if (!proposed) {
      ++chain.nonfinite_rejected;
      chain.warnings.push_back("iteration " + std::to_string(t + 1) +
                               ": non-finite proposal energy, rejected");
    } else if (mh_accept(h0, h1, rng)) {
      theta = std::move(prop.theta);
      u_cur = u_prop;
      ++chain.accepted;
    }
    chain.potentials.push_back(u_cur);
    if (t >= cfg.burn_in) chain.samples.push_back(make_params(spec, theta));
  }
  return chain;
}

Chain asghmc_sample(const ModelSpec& spec, const Dataset& coreset,
                    const SghmcConfig& cfg, Rng& rng) {
  validate_sghmc_config(cfg);
  check_dataset(spec, coreset);
  if (coreset.size() == 0) throw ContractError("asghmc: empty coreset");

  const std::size_t d = spec.param_dim();
  const std::size_t n = coreset.size(), feat_dim = coreset.dim();
  const double noise_std = std::sqrt(2.0 * cfg.momentum_decay * cfg.noise_scale);

  Tensor theta = scaled_normal(d, cfg.sigma_theta, rng);
  Tensor r = scaled_normal(d, cfg.sigma_r, rng);
  double u_cur = value_u(spec, coreset, theta, cfg.weight_decay);

  Chain chain;
  chain.iterations = cfg.iterations;
  chain.potentials.reserve(cfg.iterations);
  chain.samples.reserve(cfg.iterations - cfg.burn_in);
  for (std::size_t t = 0; t < cfg.iterations; ++t) {
    Tensor theta_try = theta, r_try = r;
    double u_next = u_cur;
    bool ok = true;
    try {
      for (std::size_t s = 0; s < cfg.leapfrog_steps; ++s) {
        for (std::size_t i = 0; i < d; ++i) {
          theta_try.data[i] += cfg.step_size * r_try.data[i];
        }
        AugmentDraw draw = draw_augmentation(cfg.augment, n, feat_dim, rng);
        Dataset view{apply_augmentation_value(coreset.features, draw),
                     coreset.labels};
        Tensor g = grad_u(spec, view, theta_try, cfg.weight_decay);
        for (std::size_t i = 0; i < d; ++i) {
          r_try.data[i] = (1.0 - cfg.momentum_decay) * r_try.data[i] -
                          cfg.step_size * g.data[i];
        }
        if (noise_std != 0.0) {
          for (std::size_t i = 0; i < d; ++i) {
            r_try.data[i] += noise_std * rng.normal();
          }
        }
        if (!all_finite(theta_try) || !all_finite(r_try)) {
          throw NumericError("non-finite phase point");
        }
      }
      u_next = value_u(spec, coreset, theta_try, cfg.weight_decay);
    } catch (const NumericError&) {
      ok = false;
    }
    if (ok) {
      theta = std::move(theta_try);
      r = std::move(r_try);
      u_cur = u_next;
    } else {
      ++chain.nonfinite_rejected;
      chain.warnings.push_back("iteration " + std::to_string(t + 1) +
                               ": non-finite dynamics, iteration reverted");
    }
    chain.potentials.push_back(u_cur);
    if (t >= cfg.burn_in) chain.samples.push_back(make_params(spec, theta));
  }
  return chain;
}

TrajectoryBuffer chain_buffer(const ModelSpec& spec, const Chain& chain) {
  if (chain.samples.empty()) throw ContractError("chain_buffer: empty chain");
  TrajectoryBuffer buffer;
  buffer.model_id = spec.id();
  buffer.param_dim = spec.param_dim();
  buffer.snapshots.reserve(chain.samples.size());
  for (const ParamVector& p : chain.samples) buffer.snapshots.push_back(p.flat);
  return buffer;
}

}  // namespace bpc
