#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "bpc/gaussian.hpp"
#include "bpc/model.hpp"
#include "bpc/rng.hpp"
#include "bpc/tensor.hpp"
#include "bpc/trajectory.hpp"

namespace bpc {

enum class Method { rkl, w, fkl, dc };

const char* method_name(Method m);
Method method_from_name(const std::string& name);

// Synthetic dataset under construction: features learn, labels are frozen.
struct Pseudocoreset {
  Dataset data;
  std::size_t per_class = 0;  // points per class for classifiers, 0 otherwise

  std::size_t size() const { return data.size(); }
};

struct DistillConfig {
  Method method = Method::fkl;
  // M for unlabeled families, points per class for classifiers.
  std::size_t coreset_size = 10;
  std::size_t outer_steps = 5000;     // K
  std::size_t inner_steps_u = 30;     // L_u
  std::size_t inner_steps_x = 1;      // L_x, also the segment span
  double inner_lr = 0.03;             // eta
  double outer_lr = 0.01;             // gamma
  std::size_t max_start_epoch = 20;   // T+
  // fkl reads experts as if trained this many epochs shorter; applied by
  // lowering the start-epoch cap.
  std::size_t fkl_start_shrink = 1;
  std::size_t mc_samples = 30;        // S
  double sigma_u = 0.01;              // Sigma_u^{1/2}, isotropic
  double sigma_x = 0.01;              // Sigma_x^{1/2}, isotropic
  std::size_t minibatch = 1000;       // B, rkl only; clamped to dataset size
  // off: per-datum averages of the potentials, as the pseudocode writes them.
  // on: scale the data term by N and the coreset term by M so the weights
  // estimate the population sums.
  bool rescale_minibatch = false;
  Augmentation augment;
  std::uint64_t seed = 0;
  std::size_t log_interval = 10;
  std::size_t max_segment_retries = 10;
};

void validate_config(const DistillConfig& cfg);

// Random subset of the full data; class-balanced for classifiers (size means
// points per class there). size == n gives a permutation of the dataset.
Pseudocoreset init_pseudocoreset(const ModelSpec& spec, const Dataset& full,
                                 std::size_t size, Rng& rng);

struct StepDiagnostics {
  double objective = 0.0;
  std::vector<std::string> warnings;
};

// L steps of gradient ascent on the summed log potential, theta <- theta +
// eta * grad. Features are re-augmented before every step. Plain numeric
// loop; nothing differentiates through it.
Tensor inner_ascent(const ModelSpec& spec, const Dataset& data,
                    const Tensor& theta_start, std::size_t steps, double eta,
                    const Augmentation& augment, Rng& rng);

// Frozen inputs for the forward-KL estimator, exposed so tests can replay
// one draw under finite differences.
struct FklEstimatorInput {
  Tensor theta_u_end;  // inner-loop endpoint, gradient does not flow through
  Tensor theta_x_end;
  double sigma_u = 0.0;
  double sigma_x = 0.0;
  std::vector<Tensor> eps_u;  // S standard-normal vectors each
  std::vector<Tensor> eps_x;
};

// Gradient w.r.t. u-features of
//   (1/S) sum_s [ 1^T f(u, theta_u_end + sigma_u eps_u[s])
//               - 1^T f(u, theta_x_end + sigma_x eps_x[s]) ].
// Identical perturbed parameter sets cancel to an exactly zero gradient.
Tensor fkl_estimator_grad(const ModelSpec& spec, const Dataset& u,
                          const FklEstimatorInput& in, double* value = nullptr);

// One forward-KL outer step: truncated inner ascent from segment start, then
// the Monte-Carlo estimator around both endpoints with fresh noise.
Tensor fkl_step(const ModelSpec& spec, const Pseudocoreset& u,
                const TrajectorySegment& seg, const DistillConfig& cfg,
                Rng& rng, StepDiagnostics* diag = nullptr);

// One trajectory-matching step: differentiable unroll of the inner ascent,
// objective |theta_u_end - theta_x_end|^2 / |theta_start - theta_x_end|^2.
// Coincident segment endpoints make the normalization zero; callers resample.
Tensor w_step(const ModelSpec& spec, const Pseudocoreset& u,
              const TrajectorySegment& seg, const DistillConfig& cfg, Rng& rng,
              StepDiagnostics* diag = nullptr);

// Gradient w.r.t. u-features of -(1/S) sum_s weights[s] * 1^T f(A(u),
// thetas[s]) with the weights held frozen. The final stage of the reverse-KL
// estimator; exposed so its backward pass can be checked by finite
// differences at fixed weights.
Tensor rkl_weighted_grad(const ModelSpec& spec, const Dataset& u,
                         const AugmentDraw& draw,
                         const std::vector<Tensor>& thetas,
                         const std::vector<double>& weights);

// One reverse-KL step: fits the coreset posterior mean by inner ascent, then
// the covariance estimator between per-datum potentials and their feature
// gradients over S samples. full_count is the size of the full dataset,
// used only by the rescale switch.
Tensor rkl_step(const ModelSpec& spec, const Pseudocoreset& u,
                const TrajectorySegment& seg, const Dataset& batch,
                std::size_t full_count, const DistillConfig& cfg, Rng& rng,
                StepDiagnostics* diag = nullptr);

struct DcResult {
  Tensor grad;
  double objective = 0.0;
  std::vector<std::string> skipped;  // manifest segments with zero gradients
};

// Gradient-matching step at a single parameter point: sum over manifest
// segments of one minus the cosine similarity between the loss gradients on
// the full data and on the coreset.
DcResult dc_step(const ModelSpec& spec, const Dataset& u, const Dataset& full,
                 const Tensor& theta);

struct Prop1Result {
  Tensor lhs;  // [M, d] exact gradient of the Gaussian-substituted objective
  Tensor rhs;  // [M, d] negated inner-product gradient, scaled by eta
  double rel_err = 0.0;
};

// Numerical agreement check between the divergence gradient and the
// gradient-matching direction near an optimum of the coreset loss.
// gaussian-location only: both sides have closed forms there.
Prop1Result verify_prop1(const ModelSpec& spec, const Dataset& u,
                         const Dataset& full, const Tensor& theta0, double eta);

struct DistillResult {
  Pseudocoreset coreset;
  std::vector<DivergenceRow> divergence_log;
};

// Outer loop: init from a random subset, then K steps of the selected method
// with plain SGD on the features. For the conjugate family every logged row
// holds an exact divergence against the full-data posterior.
DistillResult distill(const ModelSpec& spec, const Dataset& full,
                      const std::vector<TrajectoryBuffer>& buffers,
                      const DistillConfig& cfg);

}  // namespace bpc
