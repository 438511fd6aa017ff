#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "bpc/model.hpp"
#include "bpc/rng.hpp"
#include "bpc/tensor.hpp"
#include "bpc/trajectory.hpp"

namespace bpc {

// full-batch hamiltonian sampler over theta given a (pseudo)coreset
struct HmcConfig {
  std::size_t iterations = 100;    // chain length N
  std::size_t leapfrog_steps = 5;  // m
  double step_size = 0.01;
  double sigma_theta = 0.1;   // scale of the theta init draw
  double sigma_r = 0.1;       // scale of the momentum draws
  double weight_decay = 1.5;  // quadratic penalty inside the potential
  std::size_t burn_in = 50;
};

// stochastic-gradient variant: persistent momentum, freshly augmented
// gradient per step, injected noise, no accept/reject test
struct SghmcConfig : HmcConfig {
  double momentum_decay = 0.1;  // in (0,1)
  double noise_scale = 0.01;    // temperature; noise std is sqrt(2 alpha T)
  Augmentation augment;
};

struct Chain {
  std::vector<ParamVector> samples;  // retained, post burn-in
  std::size_t iterations = 0;
  std::size_t accepted = 0;            // mh acceptances (hmc only)
  std::size_t nonfinite_rejected = 0;  // proposals dropped for non-finite energy
  std::vector<double> potentials;      // current-state potential per iteration
  std::vector<std::string> warnings;

  double acceptance_rate() const;
};

void validate_hmc_config(const HmcConfig& cfg);
void validate_sghmc_config(const SghmcConfig& cfg);

// unit-mass hamiltonian: U(coreset, theta) + 0.5 ||r||^2
double hamiltonian(const ModelSpec& spec, const Dataset& coreset,
                   const Tensor& theta, const Tensor& r, double decay);

struct PhasePoint {
  Tensor theta;
  Tensor r;
};

// velocity-verlet integrator: half kick, m drifts with full kicks between,
// closing half kick; running it again with negated momentum returns the start
PhasePoint leapfrog(const ModelSpec& spec, const Dataset& coreset,
                    const Tensor& theta, const Tensor& r, std::size_t steps,
                    double step_size, double decay);

// one metropolis-hastings coin: accept with probability min(1, e^{h0 - h1});
// consumes exactly one uniform draw
bool mh_accept(double h_current, double h_proposed, Rng& rng);

Chain hmc_sample(const ModelSpec& spec, const Dataset& coreset,
                 const HmcConfig& cfg, Rng& rng);

Chain asghmc_sample(const ModelSpec& spec, const Dataset& coreset,
                    const SghmcConfig& cfg, Rng& rng);

// chains persist in the trajectory buffer format for downstream evaluation
TrajectoryBuffer chain_buffer(const ModelSpec& spec, const Chain& chain);

}  // namespace bpc
