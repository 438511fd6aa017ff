#include "bpc/model.hpp"

#include <cmath>
#include <cstdio>

#include "bpc/errors.hpp"

namespace bpc {

namespace {

std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%g", v);
  return buf;
}

void check_theta(const ModelSpec& spec, const Var& theta, const char* what) {
  if (theta->value.rank() != 1 || theta->value.size() != spec.param_dim()) {
    throw DimensionError(std::string(what) + ": parameter shape " +
                         shape_str(theta->value.shape) + ", expected [" +
                         std::to_string(spec.param_dim()) + "]");
  }
}

void check_features(const ModelSpec& spec, const Var& features, const char* what) {
  const Tensor& v = features->value;
  if (v.rank() != 2 || v.dim(1) != spec.input_dim || v.dim(0) == 0) {
    throw DimensionError(std::string(what) + ": feature shape " +
                         shape_str(v.shape) + ", expected [n," +
                         std::to_string(spec.input_dim) + "] with n >= 1");
  }
}

std::vector<std::size_t> checked_labels(const ModelSpec& spec,
                                        const std::vector<long>& labels,
                                        std::size_t n, const char* what) {
  if (labels.size() != n) {
    throw DimensionError(std::string(what) + ": " + std::to_string(labels.size()) +
                         " labels for " + std::to_string(n) + " data points");
  }
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= spec.num_classes) {
      throw ContractError(std::string(what) + ": label " +
                          std::to_string(labels[i]) + " at datum " +
                          std::to_string(i) + " outside [0," +
                          std::to_string(spec.num_classes) + ")");
    }
    idx[i] = static_cast<std::size_t>(labels[i]);
  }
  return idx;
}

// Applies the inverse likelihood covariance to the rows of a [n,d] value.
Var apply_like_precision(const ModelSpec& spec, const Var& rows) {
  const Covariance& c = spec.like_cov;
  switch (c.kind) {
    case Covariance::Kind::isotropic:
      return scale(rows, 1.0 / c.iso);
    case Covariance::Kind::diagonal: {
      std::vector<double> inv(c.diag_var);
      for (double& v : inv) v = 1.0 / v;
      return mul(rows, constant(Tensor({c.dim}, std::move(inv))));
    }
    case Covariance::Kind::full: {
      Covariance inv = c.inverse();
      return matmul(rows, constant(Tensor({c.dim, c.dim}, inv.dense)));
    }
  }
  throw ContractError("likelihood covariance: bad kind");
}

struct ClassifierParams {
  Var w1, b1, w2, b2;  // softmax-linear uses w1/b1 only
};

ClassifierParams unpack_classifier(const ModelSpec& spec, const Var& theta) {
  ClassifierParams p;
  auto segs = spec.manifest();
  auto grab = [&](const Segment& s) {
    Var flat = slice(theta, s.offset, s.size);
    return s.shape.size() == 1 ? flat : reshape(flat, s.shape);
  };
  if (spec.family == Family::softmax_linear) {
    p.w1 = grab(segs[0]);
    p.b1 = grab(segs[1]);
  } else {
    p.w1 = grab(segs[0]);
    p.b1 = grab(segs[1]);
    p.w2 = grab(segs[2]);
    p.b2 = grab(segs[3]);
  }
  return p;
}

Var classifier_logits(const ModelSpec& spec, const Var& features, const Var& theta) {
  ClassifierParams p = unpack_classifier(spec, theta);
  if (spec.family == Family::softmax_linear) {
    return add(matmul(features, p.w1), p.b1);
  }
  Var hidden = bpc::tanh(add(matmul(features, p.w1), p.b1));
  return add(matmul(hidden, p.w2), p.b2);
}

Tensor onehot(const std::vector<std::size_t>& idx, std::size_t classes) {
  Tensor t = Tensor::zeros({idx.size(), classes});
  for (std::size_t i = 0; i < idx.size(); ++i) t.at2(i, idx[i]) = 1.0;
  return t;
}

}  // namespace

const char* family_name(Family f) {
  switch (f) {
    case Family::gaussian_location: return "gaussian-location";
    case Family::softmax_linear: return "softmax-linear";
    case Family::mlp_1hidden: return "mlp-1hidden";
  }
  return "gaussian-location";
}

Family family_from_name(const std::string& name) {
  if (name == "gaussian-location") return Family::gaussian_location;
  if (name == "softmax-linear") return Family::softmax_linear;
  if (name == "mlp-1hidden") return Family::mlp_1hidden;
  throw FormatError("unknown model family: " + name);
}

std::size_t ModelSpec::param_dim() const {
  switch (family) {
    case Family::gaussian_location:
      return input_dim;
    case Family::softmax_linear:
      return input_dim * num_classes + num_classes;
    case Family::mlp_1hidden:
      return input_dim * hidden + hidden + hidden * num_classes + num_classes;
  }
  return 0;
}

std::vector<Segment> ModelSpec::manifest() const {
  std::vector<Segment> segs;
  auto push = [&](const char* name, Shape shape) {
    Segment s;
    s.name = name;
    s.size = Tensor::element_count(shape);
    s.shape = std::move(shape);
    s.offset = segs.empty() ? 0 : segs.back().offset + segs.back().size;
    segs.push_back(std::move(s));
  };
  switch (family) {
    case Family::gaussian_location:
      push("loc", {input_dim});
      break;
    case Family::softmax_linear:
      push("weight", {input_dim, num_classes});
      push("bias", {num_classes});
      break;
    case Family::mlp_1hidden:
      push("weight1", {input_dim, hidden});
      push("bias1", {hidden});
      push("weight2", {hidden, num_classes});
      push("bias2", {num_classes});
      break;
  }
  return segs;
}

std::string ModelSpec::id() const {
  std::string s = family_name(family);
  s += ":d=" + std::to_string(input_dim);
  if (family == Family::mlp_1hidden) s += ",h=" + std::to_string(hidden);
  if (is_classifier()) s += ",c=" + std::to_string(num_classes);
  return s;
}

void ModelSpec::validate() const {
  if (input_dim == 0) throw ContractError("model: input dim must be positive");
  if (!(weight_decay >= 0.0) || !std::isfinite(weight_decay)) {
    throw ContractError("model: weight decay must be finite and >= 0, got " +
                        num(weight_decay));
  }
  if (family == Family::gaussian_location) {
    if (prior_mean.size() != input_dim || prior_mean.rank() != 1) {
      throw DimensionError("model: prior mean shape " + shape_str(prior_mean.shape) +
                           ", expected [" + std::to_string(input_dim) + "]");
    }
    if (prior_cov.dim != input_dim || like_cov.dim != input_dim) {
      throw DimensionError("model: covariance dim mismatch with input dim " +
                           std::to_string(input_dim));
    }
  } else {
    if (num_classes < 2) throw ContractError("model: classifier needs >= 2 classes");
    if (family == Family::mlp_1hidden && hidden == 0) {
      throw ContractError("model: mlp hidden width must be positive");
    }
  }
}

ModelSpec make_gaussian_location(std::size_t d, Tensor prior_mean,
                                 Covariance prior_cov, Covariance like_cov) {
  ModelSpec spec;
  spec.family = Family::gaussian_location;
  spec.input_dim = d;
  spec.prior_mean = std::move(prior_mean);
  spec.prior_cov = std::move(prior_cov);
  spec.like_cov = std::move(like_cov);
  spec.validate();
  return spec;
}

ModelSpec make_softmax_linear(std::size_t d, std::size_t classes,
                              double weight_decay) {
  ModelSpec spec;
  spec.family = Family::softmax_linear;
  spec.input_dim = d;
  spec.num_classes = classes;
  spec.weight_decay = weight_decay;
  spec.validate();
  return spec;
}

ModelSpec make_mlp_1hidden(std::size_t d, std::size_t hidden, std::size_t classes,
                           double weight_decay) {
  ModelSpec spec;
  spec.family = Family::mlp_1hidden;
  spec.input_dim = d;
  spec.hidden = hidden;
  spec.num_classes = classes;
  spec.weight_decay = weight_decay;
  spec.validate();
  return spec;
}

ParamVector make_params(const ModelSpec& spec, Tensor flat) {
  if (flat.rank() != 1 || flat.size() != spec.param_dim()) {
    throw DimensionError("params: shape " + shape_str(flat.shape) +
                         ", expected [" + std::to_string(spec.param_dim()) + "]");
  }
  ParamVector p;
  p.flat = std::move(flat);
  p.manifest = spec.manifest();
  return p;
}

ParamVector zero_params(const ModelSpec& spec) {
  return make_params(spec, Tensor::zeros({spec.param_dim()}));
}

ParamVector random_params(const ModelSpec& spec, Rng& rng, double sigma) {
  Tensor t = Tensor::zeros({spec.param_dim()});
  for (double& v : t.data) v = sigma * rng.normal();
  return make_params(spec, std::move(t));
}

Dataset make_dataset(Tensor features, std::vector<long> labels) {
  if (features.rank() != 2) {
    throw DimensionError("dataset: features shape " + shape_str(features.shape) +
                         ", expected rank 2");
  }
  if (!labels.empty() && labels.size() != features.dim(0)) {
    throw DimensionError("dataset: " + std::to_string(labels.size()) +
                         " labels for " + std::to_string(features.dim(0)) +
                         " data points");
  }
  for (std::size_t i = 0; i < features.size(); ++i) {
    if (!std::isfinite(features[i])) {
      throw ContractError("dataset: non-finite feature at datum " +
                          std::to_string(i / features.dim(1)));
    }
  }
  Dataset d;
  d.features = std::move(features);
  d.labels = std::move(labels);
  return d;
}

void check_dataset(const ModelSpec& spec, const Dataset& data) {
  if (data.features.rank() != 2 || data.dim() != spec.input_dim) {
    throw DimensionError("dataset: feature shape " + shape_str(data.features.shape) +
                         " does not match model input dim " +
                         std::to_string(spec.input_dim));
  }
  if (spec.is_classifier()) {
    if (!data.has_labels()) {
      throw ContractError(std::string("dataset: model ") + family_name(spec.family) +
                          " requires labels");
    }
    checked_labels(spec, data.labels, data.size(), "dataset");
  }
}

Dataset take_rows(const Dataset& data, const std::vector<std::size_t>& rows) {
  std::size_t d = data.dim();
  Tensor f = Tensor::zeros({rows.size(), d});
  std::vector<long> labels;
  labels.reserve(data.has_labels() ? rows.size() : 0);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= data.size()) {
      throw BoundsError("take_rows: index " + std::to_string(rows[i]) +
                        " out of range for " + std::to_string(data.size()) +
                        " data points");
    }
    for (std::size_t j = 0; j < d; ++j) f.at2(i, j) = data.features.at2(rows[i], j);
    if (data.has_labels()) labels.push_back(data.labels[rows[i]]);
  }
  Dataset out;
  out.features = std::move(f);
  out.labels = std::move(labels);
  return out;
}

Var per_datum_log_potential(const ModelSpec& spec, const Var& features,
                            const std::vector<long>& labels, const Var& theta) {
  check_features(spec, features, "log_potential");
  check_theta(spec, theta, "log_potential");
  std::size_t n = features->value.dim(0);
  if (spec.family == Family::gaussian_location) {
    Var diff = sub(features, theta);
    Var weighted = apply_like_precision(spec, diff);
    return scale(sum_last(mul(weighted, diff)), -0.5);
  }
  auto idx = checked_labels(spec, labels, n, "log_potential");
  Var logits = classifier_logits(spec, features, theta);
  return select_cols(log_softmax_last(logits), idx);
}

Var log_potential_sum(const ModelSpec& spec, const Var& features,
                      const std::vector<long>& labels, const Var& theta) {
  return sum(per_datum_log_potential(spec, features, labels, theta));
}

Var loss_grad_theta_graph(const ModelSpec& spec, const Var& features,
                          const std::vector<long>& labels, const Var& theta) {
  check_features(spec, features, "loss_grad_theta");
  check_theta(spec, theta, "loss_grad_theta");
  std::size_t n = features->value.dim(0);
  if (spec.family == Family::gaussian_location) {
    // grad of -sum_n f = Sigma^{-1} (n theta - sum_n x_n)
    Var v = sub(scale(theta, static_cast<double>(n)), sum_rows(features));
    Var row = reshape(v, {1, spec.input_dim});
    return reshape(apply_like_precision(spec, row), {spec.input_dim});
  }
  auto idx = checked_labels(spec, labels, n, "loss_grad_theta");
  Tensor y = onehot(idx, spec.num_classes);
  ClassifierParams p = unpack_classifier(spec, theta);
  if (spec.family == Family::softmax_linear) {
    Var logits = add(matmul(features, p.w1), p.b1);
    Var delta = sub(softmax_last(logits), constant(y));
    Var gw = matmul(transpose(features), delta);
    Var gb = sum_rows(delta);
    return concat({reshape(gw, {spec.input_dim * spec.num_classes}), gb});
  }
  Var hidden = bpc::tanh(add(matmul(features, p.w1), p.b1));
  Var logits = add(matmul(hidden, p.w2), p.b2);
  Var delta2 = sub(softmax_last(logits), constant(y));
  Var gw2 = matmul(transpose(hidden), delta2);
  Var gb2 = sum_rows(delta2);
  // tanh' = 1 - h^2
  Var act = sub(constant(Tensor::scalar(1.0)), mul(hidden, hidden));
  Var delta1 = mul(matmul(delta2, transpose(p.w2)), act);
  Var gw1 = matmul(transpose(features), delta1);
  Var gb1 = sum_rows(delta1);
  return concat({reshape(gw1, {spec.input_dim * spec.hidden}), gb1,
                 reshape(gw2, {spec.hidden * spec.num_classes}), gb2});
}

Var potential_energy_graph(const ModelSpec& spec, const Var& features,
                           const std::vector<long>& labels, const Var& theta,
                           double decay) {
  if (!(decay >= 0.0) || !std::isfinite(decay)) {
    throw ContractError("potential_energy: decay must be finite and >= 0");
  }
  Var u = neg(log_potential_sum(spec, features, labels, theta));
  if (decay != 0.0) u = add(u, scale(l2sq(theta), decay));
  return u;
}

std::vector<double> per_datum_log_potential_value(const ModelSpec& spec,
                                                  const Dataset& data,
                                                  const ParamVector& theta) {
  check_dataset(spec, data);
  if (data.size() == 0) throw ContractError("log_potential: empty dataset");
  Var f = per_datum_log_potential(spec, constant(data.features), data.labels,
                                  constant(theta.flat));
  for (std::size_t i = 0; i < f->value.size(); ++i) {
    if (!std::isfinite(f->value[i])) {
      throw NumericError("log_potential: non-finite value at datum " +
                         std::to_string(i));
    }
  }
  return f->value.data;
}

double potential_energy_value(const ModelSpec& spec, const Dataset& data,
                              const ParamVector& theta, double decay) {
  auto f = per_datum_log_potential_value(spec, data, theta);
  double s = 0.0;
  for (double v : f) s += v;
  double u = -s;
  if (decay != 0.0) {
    double sq = 0.0;
    for (double v : theta.flat.data) sq += v * v;
    u += decay * sq;
  }
  if (!std::isfinite(u)) throw NumericError("potential_energy: non-finite value");
  return u;
}

Tensor potential_energy_grad_theta(const ModelSpec& spec, const Dataset& data,
                                   const ParamVector& theta, double decay) {
  check_dataset(spec, data);
  if (data.size() == 0) throw ContractError("potential_energy: empty dataset");
  Var th = leaf(theta.flat);
  Var u = potential_energy_graph(spec, constant(data.features), data.labels, th,
                                 decay);
  if (!std::isfinite(u->value[0])) {
    throw NumericError("potential_energy: non-finite value");
  }
  return backward(u).grad_of(th);
}

Tensor class_log_probs(const ModelSpec& spec, const Dataset& data,
                       const ParamVector& theta) {
  if (!spec.is_classifier()) {
    throw UnsupportedModelError(std::string("class_log_probs: family ") +
                                family_name(spec.family) +
                                " has no class probabilities");
  }
  if (data.size() == 0) throw ContractError("class_log_probs: empty dataset");
  Var features = constant(data.features);
  check_features(spec, features, "class_log_probs");
  Var th = constant(theta.flat);
  check_theta(spec, th, "class_log_probs");
  Var lp = log_softmax_last(classifier_logits(spec, features, th));
  for (std::size_t i = 0; i < lp->value.size(); ++i) {
    if (!std::isfinite(lp->value[i])) {
      throw NumericError("class_log_probs: non-finite value at datum " +
                         std::to_string(i / spec.num_classes));
    }
  }
  return lp->value;
}

GaussianApprox exact_conjugate_posterior(const ModelSpec& spec,
                                         const Dataset& data) {
  if (spec.family != Family::gaussian_location) {
    throw UnsupportedModelError(std::string("exact_conjugate_posterior: family ") +
                                family_name(spec.family) + " has no closed form");
  }
  spec.validate();
  std::size_t m = data.size();
  if (m == 0) {
    GaussianApprox prior;
    prior.mean = spec.prior_mean;
    prior.cov = spec.prior_cov;
    return prior;
  }
  check_dataset(spec, data);
  Covariance post_cov =
      Covariance::posterior(spec.prior_cov, spec.like_cov, static_cast<double>(m));
  // natural parameter h = Lambda0 theta0 + Lambda sum_m u_m
  std::vector<double> h = spec.prior_cov.solve(spec.prior_mean.data);
  std::vector<double> colsum(spec.input_dim, 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < spec.input_dim; ++j) {
      colsum[j] += data.features.at2(i, j);
    }
  }
  std::vector<double> ls = spec.like_cov.solve(colsum);
  for (std::size_t j = 0; j < spec.input_dim; ++j) h[j] += ls[j];
  std::vector<double> mean = post_cov.apply(h);
  GaussianApprox out;
  out.mean = Tensor({spec.input_dim}, std::move(mean));
  out.cov = std::move(post_cov);
  return out;
}

const char* augment_kind_name(AugmentKind k) {
  switch (k) {
    case AugmentKind::identity: return "identity";
    case AugmentKind::gaussian_jitter: return "gaussian-jitter";
    case AugmentKind::flip_sign: return "flip-sign";
  }
  return "identity";
}

AugmentKind augment_kind_from_name(const std::string& name) {
  if (name == "identity") return AugmentKind::identity;
  if (name == "gaussian-jitter") return AugmentKind::gaussian_jitter;
  if (name == "flip-sign") return AugmentKind::flip_sign;
  throw FormatError("unknown augmentation kind: " + name);
}

AugmentDraw draw_augmentation(const Augmentation& aug, std::size_t n,
                              std::size_t d, Rng& rng) {
  if (!(aug.sigma >= 0.0) || !std::isfinite(aug.sigma)) {
    throw ContractError("augment: jitter sigma must be finite and >= 0");
  }
  AugmentDraw draw;
  switch (aug.kind) {
    case AugmentKind::identity:
      break;
    case AugmentKind::gaussian_jitter: {
      if (aug.sigma == 0.0) break;
      draw.trivial = false;
      draw.offset = Tensor::zeros({n, d});
      for (double& v : draw.offset.data) v = aug.sigma * rng.normal();
      break;
    }
    case AugmentKind::flip_sign: {
      draw.trivial = false;
      draw.scale = Tensor::full({n, d}, 1.0);
      for (std::size_t i = 0; i < n; ++i) {
        if (rng.uniform_index(2) == 1) {
          for (std::size_t j = 0; j < d; ++j) draw.scale.at2(i, j) = -1.0;
        }
      }
      break;
    }
  }
  return draw;
}

Var apply_augmentation(const Var& features, const AugmentDraw& draw) {
  if (draw.trivial) return features;
  Var out = features;
  if (draw.scale.size() > 0) {
    if (!draw.scale.same_shape(out->value)) {
      throw DimensionError("augment: draw shape " + shape_str(draw.scale.shape) +
                           " vs features " + shape_str(out->value.shape));
    }
    out = mul(out, constant(draw.scale));
  }
  if (draw.offset.size() > 0) {
    if (!draw.offset.same_shape(out->value)) {
      throw DimensionError("augment: draw shape " + shape_str(draw.offset.shape) +
                           " vs features " + shape_str(out->value.shape));
    }
    out = add(out, constant(draw.offset));
  }
  return out;
}

Tensor apply_augmentation_value(const Tensor& features, const AugmentDraw& draw) {
  if (draw.trivial) return features;
  Tensor out = features;
  if (draw.scale.size() > 0) {
    if (!draw.scale.same_shape(out)) {
      throw DimensionError("augment: draw shape " + shape_str(draw.scale.shape) +
                           " vs features " + shape_str(out.shape));
    }
    for (std::size_t i = 0; i < out.size(); ++i) out[i] *= draw.scale[i];
  }
  if (draw.offset.size() > 0) {
    if (!draw.offset.same_shape(out)) {
      throw DimensionError("augment: draw shape " + shape_str(draw.offset.shape) +
                           " vs features " + shape_str(out.shape));
    }
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += draw.offset[i];
  }
  return out;
}

}  // namespace bpc
