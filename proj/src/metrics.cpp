#include "bpc/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>

#include "bpc/errors.hpp"
#include "json.hpp"

namespace bpc {

namespace {

// ascending sort then left-to-right sum: the value is a pure function of the
// multiset of contributions, never of their order
double sorted_sum(std::vector<double>& v) {
  std::sort(v.begin(), v.end());
  double s = 0.0;
  for (double x : v) s += x;
  return s;
}

std::string fmt_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace

PredictiveDistribution predictive(const ModelSpec& spec, const Chain& chain,
                                  const Dataset& test) {
  if (!spec.is_classifier()) {
    throw UnsupportedMetricError(
        std::string("predictive: family ") + family_name(spec.family) +
        " has no class probabilities");
  }
  if (chain.samples.empty()) throw ContractError("predictive: empty chain");
  if (test.size() == 0) throw ContractError("predictive: empty test set");

  // group bitwise-identical samples; the weight of each unique state is
  // count/total, and the ordered map fixes the accumulation order no matter
  // how the chain was arranged
  std::map<std::vector<double>, std::size_t> groups;
  for (const ParamVector& p : chain.samples) ++groups[p.flat.data];

  const std::size_t n = test.size(), c = spec.num_classes;
  const double total = static_cast<double>(chain.samples.size());
  Tensor probs = Tensor::zeros({n, c});
  for (const auto& [flat, count] : groups) {
    ParamVector theta = make_params(spec, Tensor({flat.size()}, flat));
    Tensor lp = class_log_probs(spec, test, theta);
    const double w = static_cast<double>(count) / total;
    for (std::size_t i = 0; i < n * c; ++i) {
      probs.data[i] += w * std::exp(lp.data[i]);
    }
  }
  PredictiveDistribution pred;
  pred.probs = std::move(probs);
  pred.chain_samples = chain.samples.size();
  return pred;
}

MetricsReport metrics(const PredictiveDistribution& pred,
                      const std::vector<long>& labels, std::size_t ece_bins) {
  if (pred.probs.rank() != 2) {
    throw DimensionError("metrics: predictive distribution must be [n, classes]");
  }
  const std::size_t n = pred.probs.dim(0), c = pred.probs.dim(1);
  if (n == 0 || c == 0) throw ContractError("metrics: empty predictive distribution");
  if (labels.size() != n) {
    throw DimensionError("metrics: " + std::to_string(labels.size()) +
                         " labels for " + std::to_string(n) + " predictions");
  }
  if (ece_bins < 1) throw ContractError("metrics: ece bins must be >= 1");

  MetricsReport report;
  report.ece_bins = ece_bins;
  report.test_count = n;
  report.chain_samples = pred.chain_samples;

  std::vector<double> nll_terms, brier_terms;
  nll_terms.reserve(n);
  brier_terms.reserve(n);
  std::size_t correct_total = 0;
  struct Bin {
    std::size_t count = 0;
    std::size_t correct = 0;
    std::vector<double> confidences;
  };
  std::vector<Bin> bins(ece_bins);

  for (std::size_t i = 0; i < n; ++i) {
    const long y = labels[i];
    if (y < 0 || static_cast<std::size_t>(y) >= c) {
      throw ContractError("metrics: label " + std::to_string(y) +
                          " outside [0, " + std::to_string(c) + ") at datum " +
                          std::to_string(i));
    }
    // argmax with ties broken toward the lowest class index
    std::size_t arg = 0;
    for (std::size_t j = 1; j < c; ++j) {
      if (pred.probs.at2(i, j) > pred.probs.at2(i, arg)) arg = j;
    }
    const double conf = pred.probs.at2(i, arg);
    const bool correct = arg == static_cast<std::size_t>(y);
    if (correct) ++correct_total;

    const double p_true = pred.probs.at2(i, static_cast<std::size_t>(y));
    if (p_true <= 0.0) {
      report.nll_clamped = true;
      nll_terms.push_back(-std::log(p_true + 1e-12));
    } else {
      nll_terms.push_back(-std::log(p_true));
    }

    double sq = 0.0;
    for (std::size_t j = 0; j < c; ++j) {
      const double diff = pred.probs.at2(i, j) -
                          (j == static_cast<std::size_t>(y) ? 1.0 : 0.0);
      sq += diff * diff;
    }
    brier_terms.push_back(sq);

    std::size_t b = static_cast<std::size_t>(conf * static_cast<double>(ece_bins));
    if (b >= ece_bins) b = ece_bins - 1;
    ++bins[b].count;
    if (correct) ++bins[b].correct;
    bins[b].confidences.push_back(conf);
  }

  report.accuracy = static_cast<double>(correct_total) / static_cast<double>(n);
  report.nll = sorted_sum(nll_terms) / static_cast<double>(n);
  report.brier = sorted_sum(brier_terms) / static_cast<double>(n);

  std::vector<double> gap_terms;
  for (Bin& bin : bins) {
    if (bin.count == 0) continue;
    const double cnt = static_cast<double>(bin.count);
    const double acc = static_cast<double>(bin.correct) / cnt;
    const double conf = sorted_sum(bin.confidences) / cnt;
    gap_terms.push_back(cnt / static_cast<double>(n) * std::abs(acc - conf));
  }
  report.ece = sorted_sum(gap_terms);
  return report;
}

std::string metrics_json(const MetricsReport& report) {
  nlohmann::json j;
  j["accuracy"] = report.accuracy;
  j["nll"] = report.nll;
  j["ece"] = report.ece;
  j["brier"] = report.brier;
  j["ece_bins"] = report.ece_bins;
  j["test_count"] = report.test_count;
  j["chain_samples"] = report.chain_samples;
  j["nll_clamped"] = report.nll_clamped;
  return j.dump(2) + "\n";
}

std::string metrics_csv_header() {
  return "method,ipc,sampler,seed,acc,nll,ece,brier";
}

std::string metrics_csv_row(const MetricsReport& report,
                            const std::string& method, std::size_t ipc,
                            const std::string& sampler, std::uint64_t seed) {
  std::string row = method;
  row += ',';
  row += std::to_string(ipc);
  row += ',';
  row += sampler;
  row += ',';
  row += std::to_string(seed);
  row += ',';
  row += fmt_double(report.accuracy);
  row += ',';
  row += fmt_double(report.nll);
  row += ',';
  row += fmt_double(report.ece);
  row += ',';
  row += fmt_double(report.brier);
  return row;
}

}  // namespace bpc
