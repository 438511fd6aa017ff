#include "bpc/trajectory.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <numeric>

#include "bpc/errors.hpp"
#include "json.hpp"

namespace bpc {

namespace {

constexpr char kMagic[4] = {'B', 'P', 'C', 'T'};
constexpr std::uint32_t kVersion = 1;

void write_u32(std::ostream& out, std::uint32_t v) {
  unsigned char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  out.write(reinterpret_cast<const char*>(b), 4);
}

void write_u64(std::ostream& out, std::uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  out.write(reinterpret_cast<const char*>(b), 8);
}

void write_f64(std::ostream& out, double v) {
  std::uint64_t bits;
  std::memcpy(&bits, &v, 8);
  write_u64(out, bits);
}

std::uint32_t read_u32(std::istream& in, const char* what) {
  unsigned char b[4];
  in.read(reinterpret_cast<char*>(b), 4);
  if (!in) throw FormatError(std::string("trajectory file truncated in ") + what);
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
  return v;
}

std::uint64_t read_u64(std::istream& in, const char* what) {
  unsigned char b[8];
  in.read(reinterpret_cast<char*>(b), 8);
  if (!in) throw FormatError(std::string("trajectory file truncated in ") + what);
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return v;
}

void check_buffer(const TrajectoryBuffer& buffer, const char* what,
                  bool corrupt_is_integrity) {
  auto fail = [&](const std::string& msg) -> void {
    if (corrupt_is_integrity) throw IntegrityError(std::string(what) + ": " + msg);
    throw ContractError(std::string(what) + ": " + msg);
  };
  if (buffer.param_dim == 0) fail("parameter dimension is zero");
  if (buffer.snapshots.empty()) fail("no snapshots");
  for (std::size_t i = 0; i < buffer.snapshots.size(); ++i) {
    const Tensor& t = buffer.snapshots[i];
    if (t.rank() != 1 || t.size() != buffer.param_dim) {
      fail("snapshot " + std::to_string(i) + " has shape " + shape_str(t.shape) +
           ", expected [" + std::to_string(buffer.param_dim) + "]");
    }
    for (double v : t.data) {
      if (!std::isfinite(v)) {
        fail("non-finite value in snapshot " + std::to_string(i));
      }
    }
  }
}

}  // namespace

std::string dataset_fingerprint(const Dataset& data) {
  // FNV-1a over the raw feature bytes and labels
  std::uint64_t h = 1469598103934665603ull;
  auto mix_bytes = [&](const void* p, std::size_t n) {
    const unsigned char* b = static_cast<const unsigned char*>(p);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= b[i];
      h *= 1099511628211ull;
    }
  };
  std::uint64_t n = data.size(), d = data.dim();
  mix_bytes(&n, 8);
  mix_bytes(&d, 8);
  if (!data.features.data.empty()) {
    mix_bytes(data.features.data.data(), data.features.data.size() * 8);
  }
  for (long l : data.labels) mix_bytes(&l, sizeof(l));
  char buf[20];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

TrajectoryBuffer train_expert(const ModelSpec& spec, const Dataset& data,
                              std::size_t epochs, double lr, std::uint64_t seed,
                              std::size_t minibatch) {
  check_dataset(spec, data);
  if (data.size() == 0) throw ContractError("train_expert: empty dataset");
  if (epochs < 1) throw ContractError("train_expert: epochs must be >= 1");
  if (!(lr > 0.0) || !std::isfinite(lr)) {
    throw ContractError("train_expert: lr must be finite and positive");
  }

  std::size_t n = data.size();
  std::size_t batch = (minibatch == 0 || minibatch >= n) ? n : minibatch;

  Rng root(seed);
  Rng init_rng = root.split("init");
  Rng order_rng = root.split("order");
  ParamVector theta = random_params(spec, init_rng, 0.1);

  TrajectoryBuffer buffer;
  buffer.model_id = spec.id();
  buffer.param_dim = spec.param_dim();
  buffer.snapshots.reserve(epochs + 1);
  buffer.snapshots.push_back(theta.flat);
  buffer.meta.lr = lr;
  buffer.meta.epochs = epochs;
  buffer.meta.seed = seed;
  buffer.meta.minibatch = minibatch;
  buffer.meta.dataset_id = dataset_fingerprint(data);

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  for (std::size_t epoch = 1; epoch <= epochs; ++epoch) {
    order_rng.shuffle(order);
    for (std::size_t start = 0; start < n; start += batch) {
      std::size_t stop = std::min(start + batch, n);
      std::vector<std::size_t> rows(order.begin() + static_cast<long>(start),
                                    order.begin() + static_cast<long>(stop));
      Dataset part = batch == n ? data : take_rows(data, rows);
      Tensor g;
      try {
        g = potential_energy_grad_theta(spec, part, theta, spec.weight_decay);
      } catch (const NumericError& e) {
        throw NumericError("train_expert: diverged at epoch " +
                           std::to_string(epoch) + ": " + e.what());
      }
      for (std::size_t i = 0; i < theta.flat.size(); ++i) {
        theta.flat.data[i] -= lr * g[i];
        if (!std::isfinite(theta.flat.data[i])) {
          throw NumericError("train_expert: non-finite parameters at epoch " +
                             std::to_string(epoch));
        }
      }
    }
    buffer.snapshots.push_back(theta.flat);
  }
  return buffer;
}

TrajectorySegment sample_segment(const std::vector<TrajectoryBuffer>& buffers,
                                 std::size_t max_start, std::size_t span,
                                 Rng& rng) {
  if (buffers.empty()) throw ContractError("sample_segment: no buffers");
  std::size_t needed = max_start + span + 1;
  for (std::size_t i = 0; i < buffers.size(); ++i) {
    if (buffers[i].snapshots.size() < needed) {
      throw BoundsError("sample_segment: buffer " + std::to_string(i) + " has " +
                        std::to_string(buffers[i].snapshots.size()) +
                        " snapshots, needs " + std::to_string(needed));
    }
  }
  TrajectorySegment seg;
  seg.buffer_index = rng.uniform_index(buffers.size());
  seg.start_epoch = rng.uniform_index(max_start + 1);
  const TrajectoryBuffer& b = buffers[seg.buffer_index];
  seg.theta_start = b.snapshots[seg.start_epoch];
  seg.theta_target = b.snapshots[seg.start_epoch + span];
  return seg;
}

void save_trajectory(const std::string& path, const TrajectoryBuffer& buffer) {
  check_buffer(buffer, "save_trajectory", false);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open for writing: " + path);
  out.write(kMagic, 4);
  write_u32(out, kVersion);
  write_u32(out, static_cast<std::uint32_t>(buffer.model_id.size()));
  out.write(buffer.model_id.data(),
            static_cast<std::streamsize>(buffer.model_id.size()));
  write_u64(out, buffer.param_dim);
  write_u64(out, buffer.snapshots.size());
  for (const Tensor& t : buffer.snapshots) {
    for (double v : t.data) write_f64(out, v);
  }
  if (!out) throw IoError("write failed: " + path);
  out.close();

  nlohmann::json meta;
  meta["lr"] = buffer.meta.lr;
  meta["epochs"] = buffer.meta.epochs;
  meta["seed"] = buffer.meta.seed;
  meta["minibatch"] = buffer.meta.minibatch;
  meta["dataset_id"] = buffer.meta.dataset_id;
  meta["model_id"] = buffer.model_id;
  std::ofstream mout(path + ".meta.json");
  if (!mout) throw IoError("cannot open for writing: " + path + ".meta.json");
  mout << meta.dump(2) << "\n";
  if (!mout) throw IoError("write failed: " + path + ".meta.json");
}

TrajectoryBuffer load_trajectory(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open: " + path);
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, kMagic, 4) != 0) {
    throw FormatError("not a trajectory file (bad magic): " + path);
  }
  std::uint32_t version = read_u32(in, "version");
  if (version != kVersion) {
    throw FormatError("unsupported trajectory version " + std::to_string(version));
  }
  std::uint32_t id_len = read_u32(in, "model id");
  std::string model_id(id_len, '\0');
  in.read(model_id.data(), id_len);
  if (!in) throw FormatError("trajectory file truncated in model id");
  std::uint64_t dim = read_u64(in, "header");
  std::uint64_t count = read_u64(in, "header");

  TrajectoryBuffer buffer;
  buffer.model_id = std::move(model_id);
  buffer.param_dim = dim;

  // the remaining payload must be exactly count * dim doubles
  std::streampos here = in.tellg();
  in.seekg(0, std::ios::end);
  std::uint64_t remaining = static_cast<std::uint64_t>(in.tellg() - here);
  in.seekg(here);
  if (remaining != count * dim * 8) {
    throw IntegrityError("trajectory payload is " + std::to_string(remaining) +
                         " bytes, header implies " +
                         std::to_string(count * dim * 8) + ": " + path);
  }
  buffer.snapshots.reserve(count);
  for (std::uint64_t s = 0; s < count; ++s) {
    Tensor t = Tensor::zeros({dim});
    for (std::uint64_t i = 0; i < dim; ++i) {
      std::uint64_t bits = read_u64(in, "payload");
      double v;
      std::memcpy(&v, &bits, 8);
      t[i] = v;
    }
    buffer.snapshots.push_back(std::move(t));
  }
  check_buffer(buffer, "load_trajectory", true);

  std::string meta_path = path + ".meta.json";
  std::ifstream min(meta_path);
  if (min) {
    nlohmann::json meta;
    try {
      min >> meta;
      buffer.meta.lr = meta.value("lr", 0.0);
      buffer.meta.epochs = meta.value("epochs", std::size_t{0});
      buffer.meta.seed = meta.value("seed", std::uint64_t{0});
      buffer.meta.minibatch = meta.value("minibatch", std::size_t{0});
      buffer.meta.dataset_id = meta.value("dataset_id", std::string());
    } catch (const nlohmann::json::exception& e) {
      throw FormatError("bad trajectory metadata " + meta_path + ": " + e.what());
    }
  }
  return buffer;
}

std::vector<TrajectoryBuffer> load_trajectory_dir(const std::string& dir) {
  namespace fs = std::filesystem;
  std::error_code ec;
  if (!fs::is_directory(dir, ec)) {
    throw IoError("not a directory: " + dir);
  }
  std::vector<std::string> paths;
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (entry.is_regular_file() && entry.path().extension() == ".bpct") {
      paths.push_back(entry.path().string());
    }
  }
  std::sort(paths.begin(), paths.end());
  if (paths.empty()) throw IoError("no .bpct files in " + dir);
  std::vector<TrajectoryBuffer> buffers;
  buffers.reserve(paths.size());
  for (const auto& p : paths) buffers.push_back(load_trajectory(p));
  return buffers;
}

}  // namespace bpc
