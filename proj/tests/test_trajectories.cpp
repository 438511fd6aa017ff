#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <vector>

#include "bpc/errors.hpp"
#include "bpc/gaussian.hpp"
#include "bpc/model.hpp"
#include "bpc/trajectory.hpp"
#include "test_util.hpp"

using namespace bpc;

namespace {

ModelSpec flat_prior_gaussian(std::size_t d) {
  return make_gaussian_location(d, Tensor::zeros({d}),
                                Covariance::Isotropic(d, 1e7),
                                Covariance::Isotropic(d, 1.0));
}

bool buffers_equal(const TrajectoryBuffer& a, const TrajectoryBuffer& b) {
  if (a.model_id != b.model_id || a.param_dim != b.param_dim) return false;
  if (!(a.meta == b.meta)) return false;
  if (a.snapshots.size() != b.snapshots.size()) return false;
  for (std::size_t i = 0; i < a.snapshots.size(); ++i) {
    if (a.snapshots[i].data != b.snapshots[i].data) return false;
  }
  return true;
}

std::vector<char> slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  return std::vector<char>((std::istreambuf_iterator<char>(in)),
                           std::istreambuf_iterator<char>());
}

void spit(const std::string& path, const std::vector<char>& bytes) {
  std::ofstream out(path, std::ios::binary);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

}  // namespace

TEST_CASE("expert training") {
  Rng rng(50);
  std::size_t d = 4, n = 20;
  ModelSpec spec = flat_prior_gaussian(d);
  Dataset data = make_dataset(testutil::random_tensor({n, d}, rng));

  SUBCASE("one epoch gives exactly two snapshots") {
    TrajectoryBuffer b = train_expert(spec, data, 1, 0.01, 7, 0);
    CHECK(b.snapshots.size() == 2);
    CHECK(b.param_dim == d);
    CHECK(b.model_id == spec.id());
    CHECK(b.meta.epochs == 1);
  }
  SUBCASE("fixed seed is bit-identical, new seed differs") {
    TrajectoryBuffer a = train_expert(spec, data, 3, 0.01, 7, 8);
    TrajectoryBuffer b = train_expert(spec, data, 3, 0.01, 7, 8);
    TrajectoryBuffer c = train_expert(spec, data, 3, 0.01, 8, 8);
    CHECK(buffers_equal(a, b));
    CHECK(!buffers_equal(a, c));
  }
  SUBCASE("full-batch convex training is monotone and finds the posterior mean") {
    TrajectoryBuffer b = train_expert(spec, data, 60, 0.02, 3, 0);
    CHECK(b.snapshots.size() == 61);
    double prev = std::numeric_limits<double>::infinity();
    for (const auto& snap : b.snapshots) {
      double loss =
          potential_energy_value(spec, data, make_params(spec, snap), 0.0);
      CHECK(loss <= prev + 1e-10);
      prev = loss;
    }
    GaussianApprox post = exact_conjugate_posterior(spec, data);
    const Tensor& last = b.snapshots.back();
    for (std::size_t i = 0; i < d; ++i) {
      CHECK(std::abs(last[i] - post.mean[i]) <= 1e-4);
    }
  }
  SUBCASE("minibatch training visits every datum and still converges loosely") {
    TrajectoryBuffer b = train_expert(spec, data, 80, 0.01, 3, 6);
    GaussianApprox post = exact_conjugate_posterior(spec, data);
    const Tensor& last = b.snapshots.back();
    for (std::size_t i = 0; i < d; ++i) {
      CHECK(std::abs(last[i] - post.mean[i]) <= 0.05);
    }
  }
  SUBCASE("divergent training reports the epoch") {
    CHECK_THROWS_WITH_AS(train_expert(spec, data, 60, 1e8, 3, 0),
                         doctest::Contains("epoch"), NumericError);
  }
  SUBCASE("bad arguments are rejected") {
    CHECK_THROWS_AS(train_expert(spec, data, 0, 0.01, 3, 0), ContractError);
    CHECK_THROWS_AS(train_expert(spec, data, 1, 0.0, 3, 0), ContractError);
  }
}

TEST_CASE("segment sampling") {
  Rng rng(51);
  std::size_t d = 2;
  ModelSpec spec = flat_prior_gaussian(d);
  Dataset data = make_dataset(testutil::random_tensor({6, d}, rng));
  std::vector<TrajectoryBuffer> buffers;
  buffers.push_back(train_expert(spec, data, 5, 0.01, 1, 0));
  buffers.push_back(train_expert(spec, data, 5, 0.01, 2, 0));

  SUBCASE("zero max start always begins at epoch zero") {
    for (int i = 0; i < 20; ++i) {
      TrajectorySegment seg = sample_segment(buffers, 0, 2, rng);
      CHECK(seg.start_epoch == 0);
      CHECK(seg.theta_start.data == buffers[seg.buffer_index].snapshots[0].data);
    }
  }
  SUBCASE("zero span returns identical endpoints") {
    TrajectorySegment seg = sample_segment(buffers, 2, 0, rng);
    CHECK(seg.theta_start.data == seg.theta_target.data);
  }
  SUBCASE("start epochs are uniform") {
    std::size_t draws = 10000;
    std::vector<std::size_t> counts(3, 0);
    for (std::size_t i = 0; i < draws; ++i) {
      counts[sample_segment(buffers, 2, 1, rng).start_epoch]++;
    }
    double expect = static_cast<double>(draws) / 3.0;
    double chi2 = 0.0;
    for (std::size_t c : counts) {
      double diff = static_cast<double>(c) - expect;
      chi2 += diff * diff / expect;
      CHECK(std::abs(static_cast<double>(c) / draws - 1.0 / 3.0) <= 0.02);
    }
    // df=2 critical value at p=0.01
    CHECK(chi2 < 9.210);
  }
  SUBCASE("short buffers are named") {
    CHECK_THROWS_WITH_AS(sample_segment(buffers, 3, 3, rng),
                         doctest::Contains("buffer 0"), BoundsError);
  }
}

TEST_CASE("trajectory persistence") {
  Rng rng(52);
  std::size_t d = 3;
  ModelSpec spec = flat_prior_gaussian(d);
  Dataset data = make_dataset(testutil::random_tensor({5, d}, rng));
  TrajectoryBuffer buffer = train_expert(spec, data, 4, 0.02, 11, 2);
  std::string path = "traj_test.bpct";

  SUBCASE("round trip is bit exact") {
    save_trajectory(path, buffer);
    TrajectoryBuffer loaded = load_trajectory(path);
    CHECK(buffers_equal(buffer, loaded));
  }
  SUBCASE("missing sidecar leaves metadata defaulted but loads the snapshots") {
    save_trajectory(path, buffer);
    std::remove((path + ".meta.json").c_str());
    TrajectoryBuffer loaded = load_trajectory(path);
    CHECK(loaded.model_id == buffer.model_id);
    CHECK(loaded.snapshots.size() == buffer.snapshots.size());
    CHECK(loaded.meta.lr == 0.0);
  }
  SUBCASE("corrupted magic is a format error") {
    save_trajectory(path, buffer);
    auto bytes = slurp(path);
    bytes[0] = 'X';
    spit(path, bytes);
    CHECK_THROWS_AS(load_trajectory(path), FormatError);
  }
  SUBCASE("truncation inside the header is a format error") {
    save_trajectory(path, buffer);
    auto bytes = slurp(path);
    bytes.resize(6);
    spit(path, bytes);
    CHECK_THROWS_AS(load_trajectory(path), FormatError);
  }
  SUBCASE("payload size mismatch is an integrity error") {
    save_trajectory(path, buffer);
    auto bytes = slurp(path);
    bytes.resize(bytes.size() - 8);
    spit(path, bytes);
    CHECK_THROWS_AS(load_trajectory(path), IntegrityError);
  }
  SUBCASE("non-finite payload is an integrity error") {
    save_trajectory(path, buffer);
    auto bytes = slurp(path);
    // first payload double sits right after magic, version, id, dims
    std::size_t header = 4 + 4 + 4 + buffer.model_id.size() + 8 + 8;
    const std::uint64_t inf_bits = 0x7ff0000000000000ull;
    for (int i = 0; i < 8; ++i) {
      bytes[header + static_cast<std::size_t>(i)] =
          static_cast<char>((inf_bits >> (8 * i)) & 0xff);
    }
    spit(path, bytes);
    CHECK_THROWS_AS(load_trajectory(path), IntegrityError);
  }
  SUBCASE("saving a buffer with bad values is rejected") {
    TrajectoryBuffer bad = buffer;
    bad.snapshots[1][0] = std::numeric_limits<double>::quiet_NaN();
    CHECK_THROWS_AS(save_trajectory(path, bad), ContractError);
  }
  SUBCASE("directory loading finds every buffer") {
    namespace fs = std::filesystem;
    fs::create_directory("traj_dir_test");
    save_trajectory("traj_dir_test/a.bpct", buffer);
    TrajectoryBuffer other = train_expert(spec, data, 4, 0.02, 12, 2);
    save_trajectory("traj_dir_test/b.bpct", other);
    auto loaded = load_trajectory_dir("traj_dir_test");
    REQUIRE(loaded.size() == 2);
    CHECK(buffers_equal(loaded[0], buffer));
    CHECK(buffers_equal(loaded[1], other));
    fs::remove_all("traj_dir_test");
    CHECK_THROWS_AS(load_trajectory_dir("traj_dir_test"), IoError);
  }
  std::remove(path.c_str());
  std::remove((path + ".meta.json").c_str());
}

TEST_CASE("dataset fingerprints separate different data") {
  Rng rng(53);
  Dataset a = make_dataset(testutil::random_tensor({4, 2}, rng));
  Dataset b = make_dataset(testutil::random_tensor({4, 2}, rng));
  CHECK(dataset_fingerprint(a) == dataset_fingerprint(a));
  CHECK(dataset_fingerprint(a) != dataset_fingerprint(b));
}
