#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "bpc/autodiff.hpp"
#include "bpc/gaussian.hpp"
#include "bpc/rng.hpp"
#include "bpc/tensor.hpp"

namespace bpc {

enum class Family { gaussian_location, softmax_linear, mlp_1hidden };

const char* family_name(Family f);
Family family_from_name(const std::string& name);

// One named slice of the flat parameter vector.
struct Segment {
  std::string name;
  Shape shape;
  std::size_t offset = 0;
  std::size_t size = 0;
};

struct ModelSpec {
  Family family = Family::gaussian_location;
  std::size_t input_dim = 0;
  std::size_t num_classes = 0;  // classifiers only
  std::size_t hidden = 0;       // mlp only
  double weight_decay = 0.0;    // quadratic penalty coefficient on theta

  // gaussian-location only: prior over the location and the fixed
  // likelihood covariance.
  Tensor prior_mean;
  Covariance prior_cov;
  Covariance like_cov;

  std::size_t param_dim() const;
  std::vector<Segment> manifest() const;
  bool is_classifier() const { return family != Family::gaussian_location; }
  // Stable id string, e.g. "gaussian-location:d=10".
  std::string id() const;
  void validate() const;
};

ModelSpec make_gaussian_location(std::size_t d, Tensor prior_mean,
                                 Covariance prior_cov, Covariance like_cov);
ModelSpec make_softmax_linear(std::size_t d, std::size_t classes,
                              double weight_decay);
ModelSpec make_mlp_1hidden(std::size_t d, std::size_t hidden,
                           std::size_t classes, double weight_decay);

// Flat f64 parameters plus the layout they were built against.
struct ParamVector {
  Tensor flat;
  std::vector<Segment> manifest;

  std::size_t dim() const { return flat.size(); }
};

ParamVector make_params(const ModelSpec& spec, Tensor flat);
ParamVector zero_params(const ModelSpec& spec);
// Independent N(0, sigma^2) entries.
ParamVector random_params(const ModelSpec& spec, Rng& rng, double sigma);

struct Dataset {
  Tensor features;            // [n, d]
  std::vector<long> labels;   // [n] class indices, empty when unlabeled

  std::size_t size() const { return features.shape.empty() ? 0 : features.shape[0]; }
  std::size_t dim() const { return features.shape.size() < 2 ? 0 : features.shape[1]; }
  bool has_labels() const { return !labels.empty(); }
};

Dataset make_dataset(Tensor features, std::vector<long> labels = {});
// Dimension/label checks for a dataset against a model.
void check_dataset(const ModelSpec& spec, const Dataset& data);
Dataset take_rows(const Dataset& data, const std::vector<std::size_t>& rows);

// Per-datum log potential f(x_n, theta) as a [n] graph value. features may be
// a leaf (pseudocoreset being optimized) or a constant.
Var per_datum_log_potential(const ModelSpec& spec, const Var& features,
                            const std::vector<long>& labels, const Var& theta);

// Sum over data of the log potential, a scalar graph value.
Var log_potential_sum(const ModelSpec& spec, const Var& features,
                      const std::vector<long>& labels, const Var& theta);

// Closed-form gradient of the summed negative log potential with respect to
// theta, expressed as a graph over (features, theta) so it can be
// differentiated once more with respect to the features.
Var loss_grad_theta_graph(const ModelSpec& spec, const Var& features,
                          const std::vector<long>& labels, const Var& theta);

// Potential energy U(theta) = -sum_n f(x_n, theta) + decay * ||theta||^2.
Var potential_energy_graph(const ModelSpec& spec, const Var& features,
                           const std::vector<long>& labels, const Var& theta,
                           double decay);

// Numeric conveniences over the graphs above.
std::vector<double> per_datum_log_potential_value(const ModelSpec& spec,
                                                  const Dataset& data,
                                                  const ParamVector& theta);
double potential_energy_value(const ModelSpec& spec, const Dataset& data,
                              const ParamVector& theta, double decay);
Tensor potential_energy_grad_theta(const ModelSpec& spec, const Dataset& data,
                                   const ParamVector& theta, double decay);
// Rowwise log class probabilities [n, C]; classifier families only. Labels
// are not consulted, so unlabeled data is fine.
Tensor class_log_probs(const ModelSpec& spec, const Dataset& data,
                       const ParamVector& theta);

// Exact posterior for the conjugate gaussian-location family. With an empty
// dataset this returns the prior exactly.
GaussianApprox exact_conjugate_posterior(const ModelSpec& spec,
                                         const Dataset& data);

enum class AugmentKind { identity, gaussian_jitter, flip_sign };

const char* augment_kind_name(AugmentKind k);
AugmentKind augment_kind_from_name(const std::string& name);

struct Augmentation {
  AugmentKind kind = AugmentKind::identity;
  double sigma = 0.0;  // jitter scale
};

// One concrete random draw, applied as an affine map so it stays
// differentiable with respect to the features.
struct AugmentDraw {
  bool trivial = true;
  Tensor scale;   // [n, d] multiplicative part
  Tensor offset;  // [n, d] additive part
};

AugmentDraw draw_augmentation(const Augmentation& aug, std::size_t n,
                              std::size_t d, Rng& rng);
Var apply_augmentation(const Var& features, const AugmentDraw& draw);
Tensor apply_augmentation_value(const Tensor& features,
                                const AugmentDraw& draw);

}  // namespace bpc
