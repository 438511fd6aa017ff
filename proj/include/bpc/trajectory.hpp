#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "bpc/model.hpp"
#include "bpc/rng.hpp"
#include "bpc/tensor.hpp"

namespace bpc {

struct TrainMeta {
  double lr = 0.0;
  std::size_t epochs = 0;
  std::uint64_t seed = 0;
  std::size_t minibatch = 0;  // 0 means full batch
  std::string dataset_id;

  bool operator==(const TrainMeta&) const = default;
};

// Expert parameter trajectory: one snapshot per epoch boundary, including the
// random init at epoch 0.
struct TrajectoryBuffer {
  std::string model_id;
  std::size_t param_dim = 0;
  std::vector<Tensor> snapshots;
  TrainMeta meta;

  std::size_t epochs() const { return snapshots.empty() ? 0 : snapshots.size() - 1; }
};

// Minibatch SGD on the potential from a seeded N(0, 0.1^2) init; records the
// parameters at every epoch end. minibatch 0 or >= n trains full batch.
TrajectoryBuffer train_expert(const ModelSpec& spec, const Dataset& data,
                              std::size_t epochs, double lr, std::uint64_t seed,
                              std::size_t minibatch);

struct TrajectorySegment {
  Tensor theta_start;
  Tensor theta_target;
  std::size_t start_epoch = 0;
  std::size_t buffer_index = 0;
};

// Uniformly picks a buffer and a start epoch r in {0..max_start}; returns
// snapshots r and r + span.
TrajectorySegment sample_segment(const std::vector<TrajectoryBuffer>& buffers,
                                 std::size_t max_start, std::size_t span,
                                 Rng& rng);

// Binary snapshot file plus a <path>.meta.json sidecar with training
// metadata. Round trips are bit exact.
void save_trajectory(const std::string& path, const TrajectoryBuffer& buffer);
TrajectoryBuffer load_trajectory(const std::string& path);

// All *.bpct files in a directory, sorted by filename.
std::vector<TrajectoryBuffer> load_trajectory_dir(const std::string& dir);

// Short stable content hash used as a dataset id.
std::string dataset_fingerprint(const Dataset& data);

}  // namespace bpc
