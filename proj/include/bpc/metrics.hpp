#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "bpc/model.hpp"
#include "bpc/sampler.hpp"
#include "bpc/tensor.hpp"

namespace bpc {

// bayesian model average over the retained chain: per-datum class
// probabilities, each row summing to 1
struct PredictiveDistribution {
  Tensor probs;                    // [n, C]
  std::size_t chain_samples = 0;   // samples averaged into the rows
};

struct MetricsReport {
  double accuracy = 0.0;
  double nll = 0.0;
  double ece = 0.0;
  double brier = 0.0;
  std::size_t ece_bins = 15;
  std::size_t test_count = 0;
  std::size_t chain_samples = 0;
  bool nll_clamped = false;  // a true-class probability hit the log floor
};

// averages softmax outputs across retained samples. identical samples are
// grouped and weighted by count, so duplicating the whole chain in equal
// proportion reproduces the distribution bitwise.
PredictiveDistribution predictive(const ModelSpec& spec, const Chain& chain,
                                  const Dataset& test);

// accuracy, mean negative log-likelihood, expected calibration error over
// equal-width confidence bins, brier score. per-datum contributions are
// sorted before summing, so permuting the test data changes nothing at all.
MetricsReport metrics(const PredictiveDistribution& pred,
                      const std::vector<long>& labels,
                      std::size_t ece_bins = 15);

std::string metrics_json(const MetricsReport& report);
std::string metrics_csv_header();
std::string metrics_csv_row(const MetricsReport& report,
                            const std::string& method, std::size_t ipc,
                            const std::string& sampler, std::uint64_t seed);

}  // namespace bpc
