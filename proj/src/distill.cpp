#include "bpc/distill.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "bpc/errors.hpp"

namespace bpc {
namespace {

bool all_finite(const Tensor& t) {
  for (double v : t.data) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

Tensor normal_vector(std::size_t n, Rng& rng) {
  Tensor out = Tensor::zeros({n});
  for (std::size_t i = 0; i < n; ++i) out.data[i] = rng.normal();
  return out;
}

Tensor axpy(const Tensor& x, double a, const Tensor& y) {
  // x + a * y
  Tensor out = x;
  for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] += a * y.data[i];
  return out;
}

// b distinct row indices via a partial shuffle.
std::vector<std::size_t> sample_rows(std::size_t n, std::size_t b, Rng& rng) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  for (std::size_t i = 0; i < b; ++i) {
    std::size_t j = i + rng.uniform_index(n - i);
    std::swap(idx[i], idx[j]);
  }
  idx.resize(b);
  return idx;
}

double squared_distance(const Tensor& a, const Tensor& b) {
  double acc = 0.0;
  for (std::size_t i = 0; i < a.data.size(); ++i) {
    double d = a.data[i] - b.data[i];
    acc += d * d;
  }
  return acc;
}

double frobenius(const Tensor& t) {
  double acc = 0.0;
  for (double v : t.data) acc += v * v;
  return std::sqrt(acc);
}

}  // namespace

const char* method_name(Method m) {
  switch (m) {
    case Method::rkl: return "rkl";
    case Method::w: return "w";
    case Method::fkl: return "fkl";
    case Method::dc: return "dc";
  }
  throw ContractError("method_name: unknown method");
}

Method method_from_name(const std::string& name) {
  if (name == "rkl") return Method::rkl;
  if (name == "w") return Method::w;
  if (name == "fkl") return Method::fkl;
  if (name == "dc") return Method::dc;
  throw ConfigError("unknown method '" + name + "', expected rkl|w|fkl|dc");
}

void validate_config(const DistillConfig& cfg) {
  if (cfg.coreset_size == 0) throw ContractError("distill config: coreset size must be >= 1");
  if (cfg.inner_steps_u == 0) throw ContractError("distill config: L_u must be >= 1");
  if (cfg.mc_samples == 0) throw ContractError("distill config: S must be >= 1");
  if (cfg.minibatch == 0) throw ContractError("distill config: minibatch must be >= 1");
  if (!(cfg.inner_lr > 0.0) || !std::isfinite(cfg.inner_lr))
    throw ContractError("distill config: inner lr must be positive and finite");
  if (!(cfg.outer_lr > 0.0) || !std::isfinite(cfg.outer_lr))
    throw ContractError("distill config: outer lr must be positive and finite");
  if (cfg.sigma_u < 0.0 || !std::isfinite(cfg.sigma_u) || cfg.sigma_x < 0.0 ||
      !std::isfinite(cfg.sigma_x))
    throw ContractError("distill config: noise scales must be >= 0 and finite");
  if (cfg.log_interval == 0) throw ContractError("distill config: log interval must be >= 1");
}

Pseudocoreset init_pseudocoreset(const ModelSpec& spec, const Dataset& full,
                                 std::size_t size, Rng& rng) {
  check_dataset(spec, full);
  if (size == 0) throw ContractError("init_pseudocoreset: size must be >= 1");
  std::vector<std::size_t> chosen;
  std::size_t per_class = 0;
  if (spec.is_classifier()) {
    per_class = size;
    for (std::size_t c = 0; c < spec.num_classes; ++c) {
      std::vector<std::size_t> members;
      for (std::size_t i = 0; i < full.size(); ++i) {
        if (full.labels[i] == static_cast<long>(c)) members.push_back(i);
      }
      if (members.size() < size) {
        throw InsufficientDataError(
            "init_pseudocoreset: class " + std::to_string(c) + " has " +
            std::to_string(members.size()) + " examples, needs " +
            std::to_string(size));
      }
      rng.shuffle(members);
      chosen.insert(chosen.end(), members.begin(), members.begin() + size);
    }
  } else {
    if (full.size() < size) {
      throw InsufficientDataError("init_pseudocoreset: dataset has " +
                                  std::to_string(full.size()) +
                                  " points, needs " + std::to_string(size));
    }
    chosen.resize(full.size());
    std::iota(chosen.begin(), chosen.end(), std::size_t{0});
    rng.shuffle(chosen);
    chosen.resize(size);
  }
  Pseudocoreset out;
  out.data = take_rows(full, chosen);
  out.per_class = per_class;
  return out;
}

Tensor inner_ascent(const ModelSpec& spec, const Dataset& data,
                    const Tensor& theta_start, std::size_t steps, double eta,
                    const Augmentation& augment, Rng& rng) {
  check_dataset(spec, data);
  if (theta_start.size() != spec.param_dim())
    throw DimensionError("inner_ascent: theta has " +
                         std::to_string(theta_start.size()) + " entries, model needs " +
                         std::to_string(spec.param_dim()));
  Tensor theta = theta_start;
  for (std::size_t l = 0; l < steps; ++l) {
    AugmentDraw draw = draw_augmentation(augment, data.size(), data.dim(), rng);
    Dataset step_data{apply_augmentation_value(data.features, draw), data.labels};
    Tensor g;
    try {
      g = potential_energy_grad_theta(spec, step_data, make_params(spec, theta), 0.0);
    } catch (const NumericError& e) {
      throw NumericError("inner ascent: " + std::string(e.what()) +
                         " at inner step " + std::to_string(l + 1));
    }
    theta = axpy(theta, -eta, g);  // ascent on the potential = descent on the loss
    if (!all_finite(theta)) {
      throw NumericError("inner ascent: non-finite parameters at inner step " +
                         std::to_string(l + 1));
    }
  }
  return theta;
}

Tensor fkl_estimator_grad(const ModelSpec& spec, const Dataset& u,
                          const FklEstimatorInput& in, double* value) {
  check_dataset(spec, u);
  const std::size_t s_count = in.eps_u.size();
  if (s_count == 0 || in.eps_x.size() != s_count)
    throw ContractError("fkl estimator: needs matching nonempty noise draws");
  Var u_leaf = leaf(u.features);
  Tensor total = Tensor::zeros(u.features.shape);
  double acc_value = 0.0;
  for (std::size_t s = 0; s < s_count; ++s) {
    Tensor theta_su = axpy(in.theta_u_end, in.sigma_u, in.eps_u[s]);
    Tensor theta_sx = axpy(in.theta_x_end, in.sigma_x, in.eps_x[s]);
    // one backward per sample: when the two parameter sets coincide the +1/-1
    // adjoints meet in the leaf accumulator and cancel exactly
    Var diff = sub(log_potential_sum(spec, u_leaf, u.labels, constant(theta_su)),
                   log_potential_sum(spec, u_leaf, u.labels, constant(theta_sx)));
    acc_value += diff->value.data[0];
    GradMap grads = backward(diff);
    Tensor g = grads.grad_of(u_leaf);
    for (std::size_t i = 0; i < total.data.size(); ++i) total.data[i] += g.data[i];
  }
  const double inv_s = 1.0 / static_cast<double>(s_count);
  for (double& v : total.data) v *= inv_s;
  acc_value *= inv_s;
  if (!std::isfinite(acc_value) || !all_finite(total))
    throw NumericError("fkl estimator: non-finite value");
  if (value != nullptr) *value = acc_value;
  return total;
}

Tensor fkl_step(const ModelSpec& spec, const Pseudocoreset& u,
                const TrajectorySegment& seg, const DistillConfig& cfg,
                Rng& rng, StepDiagnostics* diag) {
  FklEstimatorInput in;
  in.theta_u_end = inner_ascent(spec, u.data, seg.theta_start, cfg.inner_steps_u,
                                cfg.inner_lr, cfg.augment, rng);
  in.theta_x_end = seg.theta_target;
  in.sigma_u = cfg.sigma_u;
  in.sigma_x = cfg.sigma_x;
  const std::size_t d = spec.param_dim();
  in.eps_u.reserve(cfg.mc_samples);
  in.eps_x.reserve(cfg.mc_samples);
  for (std::size_t s = 0; s < cfg.mc_samples; ++s) in.eps_u.push_back(normal_vector(d, rng));
  for (std::size_t s = 0; s < cfg.mc_samples; ++s) in.eps_x.push_back(normal_vector(d, rng));
  double value = 0.0;
  Tensor grad = fkl_estimator_grad(spec, u.data, in, &value);
  if (diag != nullptr) diag->objective = value;
  return grad;
}

Tensor w_step(const ModelSpec& spec, const Pseudocoreset& u,
              const TrajectorySegment& seg, const DistillConfig& cfg, Rng& rng,
              StepDiagnostics* diag) {
  check_dataset(spec, u.data);
  const double den = squared_distance(seg.theta_start, seg.theta_target);
  if (den == 0.0) {
    throw DegenerateSegmentError(
        "w step: segment start coincides with target, normalization is zero");
  }
  Var u_leaf = leaf(u.data.features);
  Var theta = constant(seg.theta_start);
  for (std::size_t l = 0; l < cfg.inner_steps_u; ++l) {
    AugmentDraw draw =
        draw_augmentation(cfg.augment, u.data.size(), u.data.dim(), rng);
    Var af = apply_augmentation(u_leaf, draw);
    Var g = loss_grad_theta_graph(spec, af, u.data.labels, theta);
    theta = sub(theta, scale(g, cfg.inner_lr));
    if (!all_finite(theta->value)) {
      throw NumericError("w step: non-finite parameters at inner step " +
                         std::to_string(l + 1));
    }
  }
  Var objective = scale(l2sq(sub(theta, constant(seg.theta_target))), 1.0 / den);
  GradMap grads = backward(objective);
  Tensor grad = grads.grad_of(u_leaf);
  if (!std::isfinite(objective->value.data[0]) || !all_finite(grad))
    throw NumericError("w step: non-finite objective or gradient");
  if (diag != nullptr) diag->objective = objective->value.data[0];
  return grad;
}

namespace {

// mean anchored at the first entry: identical inputs yield deviations that
// are exactly zero
double anchored_mean(const std::vector<double>& v) {
  double acc = 0.0;
  for (double x : v) acc += x - v[0];
  return v[0] + acc / static_cast<double>(v.size());
}

}  // namespace

Tensor rkl_weighted_grad(const ModelSpec& spec, const Dataset& u,
                         const AugmentDraw& draw,
                         const std::vector<Tensor>& thetas,
                         const std::vector<double>& weights) {
  check_dataset(spec, u);
  const std::size_t s_count = thetas.size();
  if (s_count == 0 || weights.size() != s_count)
    throw ContractError("rkl weighted grad: needs matching nonempty samples");
  Var u_leaf = leaf(u.features);
  Var af = apply_augmentation(u_leaf, draw);
  Tensor total = Tensor::zeros(u.features.shape);
  for (std::size_t s = 0; s < s_count; ++s) {
    if (weights[s] == 0.0) continue;
    Var root = log_potential_sum(spec, af, u.labels, constant(thetas[s]));
    GradMap grads = backward(root);
    Tensor g = grads.grad_of(u_leaf);
    const double c = -weights[s] / static_cast<double>(s_count);
    for (std::size_t i = 0; i < total.data.size(); ++i) total.data[i] += c * g.data[i];
  }
  return total;
}

Tensor rkl_step(const ModelSpec& spec, const Pseudocoreset& u,
                const TrajectorySegment& seg, const Dataset& batch,
                std::size_t full_count, const DistillConfig& cfg, Rng& rng,
                StepDiagnostics* diag) {
  check_dataset(spec, u.data);
  check_dataset(spec, batch);
  const std::size_t s_count = cfg.mc_samples;
  if (s_count < 2)
    throw ContractError(
        "rkl step: needs S >= 2 samples, the centered covariance is undefined");
  if (batch.size() == 0) throw ContractError("rkl step: empty minibatch");

  Tensor theta_end = inner_ascent(spec, u.data, seg.theta_start,
                                  cfg.inner_steps_u, cfg.inner_lr, cfg.augment, rng);

  const std::size_t d = spec.param_dim();
  const std::size_t m = u.data.size();
  const std::size_t b = batch.size();
  std::vector<Tensor> thetas;
  thetas.reserve(s_count);
  for (std::size_t s = 0; s < s_count; ++s)
    thetas.push_back(axpy(theta_end, cfg.sigma_u, normal_vector(d, rng)));
  // one augmentation realization per outer step, shared by every sample so
  // the centering over s sees a fixed dataset
  AugmentDraw draw_u = draw_augmentation(cfg.augment, m, u.data.dim(), rng);
  AugmentDraw draw_x = draw_augmentation(cfg.augment, b, batch.dim(), rng);

  Dataset u_aug{apply_augmentation_value(u.data.features, draw_u), u.data.labels};
  Dataset batch_aug{apply_augmentation_value(batch.features, draw_x), batch.labels};

  std::vector<double> a(s_count), bb(s_count);
  for (std::size_t s = 0; s < s_count; ++s) {
    ParamVector at = make_params(spec, thetas[s]);
    std::vector<double> pot_u = per_datum_log_potential_value(spec, u_aug, at);
    bb[s] = std::accumulate(pot_u.begin(), pot_u.end(), 0.0) / static_cast<double>(m);
    std::vector<double> pot_x = per_datum_log_potential_value(spec, batch_aug, at);
    a[s] = std::accumulate(pot_x.begin(), pot_x.end(), 0.0) / static_cast<double>(b);
  }
  const double a_mean = anchored_mean(a);
  const double b_mean = anchored_mean(bb);

  std::vector<double> weights(s_count);
  for (std::size_t s = 0; s < s_count; ++s) {
    weights[s] = cfg.rescale_minibatch
                     ? static_cast<double>(full_count) * (a[s] - a_mean) -
                           static_cast<double>(m) * (bb[s] - b_mean)
                     : (a[s] - a_mean) - (bb[s] - b_mean);
  }
  Tensor total = rkl_weighted_grad(spec, u.data, draw_u, thetas, weights);
  if (!all_finite(total)) throw NumericError("rkl step: non-finite gradient");
  if (diag != nullptr) diag->objective = a_mean - b_mean;
  return total;
}

DcResult dc_step(const ModelSpec& spec, const Dataset& u, const Dataset& full,
                 const Tensor& theta) {
  check_dataset(spec, u);
  check_dataset(spec, full);
  if (theta.size() != spec.param_dim())
    throw DimensionError("dc_step: theta has " + std::to_string(theta.size()) +
                         " entries, model needs " + std::to_string(spec.param_dim()));
  if (!all_finite(theta)) throw ContractError("dc_step: non-finite parameters");

  Tensor full_grad =
      potential_energy_grad_theta(spec, full, make_params(spec, theta), 0.0);
  Var u_leaf = leaf(u.features);
  Var coreset_grad =
      loss_grad_theta_graph(spec, u_leaf, u.labels, constant(theta));

  DcResult out;
  Var objective;
  for (const Segment& seg : spec.manifest()) {
    double norm_full_sq = 0.0;
    for (std::size_t i = 0; i < seg.size; ++i) {
      double v = full_grad.data[seg.offset + i];
      norm_full_sq += v * v;
    }
    double norm_core_sq = 0.0;
    for (std::size_t i = 0; i < seg.size; ++i) {
      double v = coreset_grad->value.data[seg.offset + i];
      norm_core_sq += v * v;
    }
    if (norm_full_sq == 0.0 || norm_core_sq == 0.0) {
      out.skipped.push_back(seg.name);
      continue;
    }
    Tensor ref = Tensor::zeros({seg.size});
    std::copy(full_grad.data.begin() + static_cast<std::ptrdiff_t>(seg.offset),
              full_grad.data.begin() + static_cast<std::ptrdiff_t>(seg.offset + seg.size),
              ref.data.begin());
    Var part = slice(coreset_grad, seg.offset, seg.size);
    Var dot = sum(mul(part, constant(ref)));
    Var den = scale(bpc::sqrt(l2sq(part)), std::sqrt(norm_full_sq));
    Var term = sub(constant(Tensor::scalar(1.0)), div(dot, den));
    objective = objective ? add(objective, term) : term;
  }
  if (!objective) {
    out.grad = Tensor::zeros(u.features.shape);
    out.objective = 0.0;
    return out;
  }
  GradMap grads = backward(objective);
  out.grad = grads.grad_of(u_leaf);
  out.objective = objective->value.data[0];
  if (!std::isfinite(out.objective) || !all_finite(out.grad))
    throw NumericError("dc_step: non-finite objective or gradient");
  return out;
}

Prop1Result verify_prop1(const ModelSpec& spec, const Dataset& u,
                         const Dataset& full, const Tensor& theta0, double eta) {
  if (spec.family != Family::gaussian_location)
    throw UnsupportedModelError(
        "verify_prop1: closed forms exist only for the gaussian-location family");
  check_dataset(spec, u);
  check_dataset(spec, full);
  if (!(eta > 0.0) || !std::isfinite(eta))
    throw ContractError("verify_prop1: eta must be positive and finite");

  ParamVector at = make_params(spec, theta0);
  // one coreset gradient-descent step defines the substituted Gaussian mean
  Tensor grad_u = potential_energy_grad_theta(spec, u, at, 0.0);
  Tensor theta_t = axpy(theta0, -eta, grad_u);

  GaussianApprox post_x = exact_conjugate_posterior(spec, full);
  std::vector<double> delta(theta_t.data.size());
  for (std::size_t i = 0; i < delta.size(); ++i)
    delta[i] = theta_t.data[i] - post_x.mean.data[i];
  std::vector<double> v = post_x.cov.solve(delta);
  std::vector<double> lhs_row = spec.like_cov.solve(v);

  Tensor grad_x = potential_energy_grad_theta(spec, full, at, 0.0);
  std::vector<double> rhs_row = spec.like_cov.solve(grad_x.data);

  const std::size_t m = u.size();
  const std::size_t d = u.dim();
  Prop1Result out;
  out.lhs = Tensor::zeros({m, d});
  out.rhs = Tensor::zeros({m, d});
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < d; ++j) {
      out.lhs.at2(i, j) = eta * lhs_row[j];
      out.rhs.at2(i, j) = eta * rhs_row[j];
    }
  }
  Tensor diff = Tensor::zeros({m, d});
  for (std::size_t i = 0; i < diff.data.size(); ++i)
    diff.data[i] = out.lhs.data[i] - out.rhs.data[i];
  const double scale_norm = std::max(frobenius(out.lhs), frobenius(out.rhs));
  out.rel_err = scale_norm == 0.0 ? 0.0 : frobenius(diff) / scale_norm;
  return out;
}

namespace {

void append_divergence_rows(std::vector<DivergenceRow>& rows,
                            const ModelSpec& spec, const Pseudocoreset& u,
                            const GaussianApprox& post_x, const char* method,
                            std::size_t step) {
  GaussianApprox post_u = exact_conjugate_posterior(spec, u.data);
  rows.push_back({step, method, DivKind::rkl, gaussian_kl(post_u, post_x), true});
  rows.push_back({step, method, DivKind::fkl, gaussian_kl(post_x, post_u), true});
  rows.push_back({step, method, DivKind::w2, gaussian_w2sq(post_u, post_x), true});
}

}  // namespace

DistillResult distill(const ModelSpec& spec, const Dataset& full,
                      const std::vector<TrajectoryBuffer>& buffers,
                      const DistillConfig& cfg) {
  validate_config(cfg);
  check_dataset(spec, full);
  const bool needs_buffers = cfg.outer_steps > 0;
  if (needs_buffers && buffers.empty())
    throw ContractError("distill: no trajectory buffers supplied");
  for (const TrajectoryBuffer& buf : buffers) {
    if (buf.model_id != spec.id())
      throw ContractError("distill: buffer trained for '" + buf.model_id +
                          "', expected '" + spec.id() + "'");
  }

  Rng root(cfg.seed);
  Rng rng_init = root.split("init");
  Rng rng_steps = root.split("steps");

  DistillResult out;
  out.coreset = init_pseudocoreset(spec, full, cfg.coreset_size, rng_init);
  const std::vector<long> frozen_labels = out.coreset.data.labels;

  const bool conjugate = spec.family == Family::gaussian_location;
  GaussianApprox post_x;
  const char* name = method_name(cfg.method);
  if (conjugate) {
    post_x = exact_conjugate_posterior(spec, full);
    append_divergence_rows(out.divergence_log, spec, out.coreset, post_x, name, 0);
  }

  const std::size_t span = cfg.method == Method::w || cfg.method == Method::fkl
                               ? cfg.inner_steps_x
                               : 0;
  std::size_t max_start = cfg.max_start_epoch;
  if (cfg.method == Method::fkl)
    max_start = max_start >= cfg.fkl_start_shrink ? max_start - cfg.fkl_start_shrink : 0;

  for (std::size_t k = 1; k <= cfg.outer_steps; ++k) {
    Rng rng_k = rng_steps.split(k);
    Tensor grad;
    for (std::size_t attempt = 0;; ++attempt) {
      try {
        TrajectorySegment seg = sample_segment(buffers, max_start, span, rng_k);
        switch (cfg.method) {
          case Method::fkl:
            grad = fkl_step(spec, out.coreset, seg, cfg, rng_k);
            break;
          case Method::w:
            grad = w_step(spec, out.coreset, seg, cfg, rng_k);
            break;
          case Method::rkl: {
            const std::size_t b = std::min(cfg.minibatch, full.size());
            Dataset batch = take_rows(full, sample_rows(full.size(), b, rng_k));
            grad = rkl_step(spec, out.coreset, seg, batch, full.size(), cfg, rng_k);
            break;
          }
          case Method::dc: {
            DcResult r = dc_step(spec, out.coreset.data, full, seg.theta_start);
            grad = r.grad;
            break;
          }
        }
        break;
      } catch (const DegenerateSegmentError&) {
        if (attempt >= cfg.max_segment_retries) throw;
      }
    }
    Tensor& feats = out.coreset.data.features;
    for (std::size_t i = 0; i < feats.data.size(); ++i)
      feats.data[i] -= cfg.outer_lr * grad.data[i];
    if (!all_finite(feats))
      throw NumericError("distill: non-finite features at step " + std::to_string(k));
    out.coreset.data.labels = frozen_labels;
    if (conjugate && (k % cfg.log_interval == 0 || k == cfg.outer_steps))
      append_divergence_rows(out.divergence_log, spec, out.coreset, post_x, name, k);
  }
  return out;
}

}  // namespace bpc
