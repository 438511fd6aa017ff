#include "bpc/dataset_io.hpp"

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <fstream>
#include <limits>
#include <sstream>

#include "bpc/errors.hpp"
#include "json.hpp"

namespace bpc {

namespace {

constexpr char kMagic[4] = {'B', 'P', 'C', 'D'};
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
  if (!in) throw FormatError(std::string("dataset file truncated in ") + what);
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
  return v;
}

std::uint64_t read_u64(std::istream& in, const char* what) {
  unsigned char b[8];
  in.read(reinterpret_cast<char*>(b), 8);
  if (!in) throw FormatError(std::string("dataset file truncated in ") + what);
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return v;
}

double read_f64(std::istream& in, const char* what) {
  std::uint64_t bits = read_u64(in, what);
  double v;
  std::memcpy(&v, &bits, 8);
  return v;
}

void require_payload_end(std::istream& in, const std::string& path) {
  if (in.peek() != std::char_traits<char>::eof()) {
    throw IntegrityError("trailing bytes after dataset payload: " + path);
  }
}

std::string fmt_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    std::size_t comma = line.find(',', start);
    if (comma == std::string::npos) {
      out.push_back(line.substr(start));
      return out;
    }
    out.push_back(line.substr(start, comma - start));
    start = comma + 1;
  }
}

double parse_feature(const std::string& field, std::size_t row, std::size_t col) {
  const char* s = field.c_str();
  char* end = nullptr;
  errno = 0;
  double v = std::strtod(s, &end);
  while (end && *end == ' ') ++end;
  if (end == s || (end && *end != '\0') || !std::isfinite(v)) {
    throw FormatError("dataset csv row " + std::to_string(row) + " column " +
                      std::to_string(col) + ": bad feature value '" + field + "'");
  }
  return v;
}

long parse_label(const std::string& field, std::size_t row) {
  const char* s = field.c_str();
  char* end = nullptr;
  errno = 0;
  long v = std::strtol(s, &end, 10);
  while (end && *end == ' ') ++end;
  if (end == s || (end && *end != '\0') || errno == ERANGE) {
    throw FormatError("dataset csv row " + std::to_string(row) +
                      ": bad integer label '" + field + "'");
  }
  return v;
}

nlohmann::json parse_json_file(const std::string& path, const char* what) {
  std::ifstream in(path);
  if (!in) throw IoError(std::string("cannot open: ") + path);
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError(std::string(what) + " " + path + ": " + e.what());
  }
}

std::vector<double> json_number_array(const nlohmann::json& j, const char* key,
                                      const std::string& path) {
  if (!j.contains(key) || !j[key].is_array() || j[key].empty()) {
    throw FormatError("gaussian file " + path + ": missing or empty '" + key +
                      "' array");
  }
  std::vector<double> out;
  out.reserve(j[key].size());
  for (const auto& v : j[key]) {
    if (!v.is_number()) {
      throw FormatError("gaussian file " + path + ": non-numeric entry in '" +
                        key + "'");
    }
    out.push_back(v.get<double>());
  }
  return out;
}

}  // namespace

void save_dataset_bpcd(const std::string& path, const Dataset& data) {
  if (data.size() == 0) throw ContractError("save_dataset_bpcd: empty dataset");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open for writing: " + path);
  out.write(kMagic, 4);
  write_u32(out, kVersion);
  write_u64(out, data.size());
  write_u64(out, data.dim());
  const unsigned char has_labels = data.has_labels() ? 1 : 0;
  out.write(reinterpret_cast<const char*>(&has_labels), 1);
  for (double v : data.features.data) write_f64(out, v);
  for (long l : data.labels) {
    write_u64(out, static_cast<std::uint64_t>(static_cast<std::int64_t>(l)));
  }
  if (!out) throw IoError("write failed: " + path);
}

Dataset load_dataset_bpcd(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open: " + path);
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, kMagic, 4) != 0) {
    throw FormatError("not a dataset file (bad magic): " + path);
  }
  std::uint32_t version = read_u32(in, "version");
  if (version != kVersion) {
    throw FormatError("unsupported dataset version " + std::to_string(version));
  }
  std::uint64_t count = read_u64(in, "header");
  std::uint64_t dim = read_u64(in, "header");
  char flag;
  in.read(&flag, 1);
  if (!in) throw FormatError("dataset file truncated in header");
  if (flag != 0 && flag != 1) {
    throw FormatError("dataset file has bad label flag " +
                      std::to_string(static_cast<int>(flag)) + ": " + path);
  }
  if (count == 0 || dim == 0) {
    throw FormatError("dataset file declares an empty dataset: " + path);
  }
  if (count > (std::numeric_limits<std::uint64_t>::max() / 8) / dim) {
    throw FormatError("dataset file header implies an implausible size: " + path);
  }

  Tensor features = Tensor::zeros({count, dim});
  for (std::uint64_t i = 0; i < count * dim; ++i) {
    features.data[i] = read_f64(in, "features");
    if (!std::isfinite(features.data[i])) {
      throw IntegrityError("non-finite feature at datum " +
                           std::to_string(i / dim) + ": " + path);
    }
  }
  std::vector<long> labels;
  if (flag == 1) {
    labels.resize(count);
    for (std::uint64_t i = 0; i < count; ++i) {
      labels[i] = static_cast<long>(
          static_cast<std::int64_t>(read_u64(in, "labels")));
    }
  }
  require_payload_end(in, path);
  return make_dataset(std::move(features), std::move(labels));
}

void save_dataset_csv(const std::string& path, const Dataset& data) {
  if (data.size() == 0) throw ContractError("save_dataset_csv: empty dataset");
  std::ofstream out(path);
  if (!out) throw IoError("cannot open for writing: " + path);
  for (std::size_t i = 0; i < data.size(); ++i) {
    for (std::size_t j = 0; j < data.dim(); ++j) {
      if (j) out << ',';
      out << fmt_double(data.features.at2(i, j));
    }
    if (data.has_labels()) out << ',' << data.labels[i];
    out << '\n';
  }
  if (!out) throw IoError("write failed: " + path);
}

Dataset load_dataset_csv(const std::string& path, bool has_labels) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open: " + path);
  std::vector<double> values;
  std::vector<long> labels;
  std::size_t cols = 0, rows = 0;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::vector<std::string> fields = split_csv(line);
    if (cols == 0) {
      cols = fields.size();
      if (has_labels && cols < 2) {
        throw FormatError("dataset csv row " + std::to_string(lineno) +
                          ": need at least one feature and a label");
      }
    } else if (fields.size() != cols) {
      throw FormatError("dataset csv row " + std::to_string(lineno) + " has " +
                        std::to_string(fields.size()) + " columns, expected " +
                        std::to_string(cols));
    }
    const std::size_t feature_cols = has_labels ? cols - 1 : cols;
    for (std::size_t j = 0; j < feature_cols; ++j) {
      values.push_back(parse_feature(fields[j], lineno, j + 1));
    }
    if (has_labels) labels.push_back(parse_label(fields[cols - 1], lineno));
    ++rows;
  }
  if (rows == 0) throw FormatError("dataset csv has no rows: " + path);
  const std::size_t feature_cols = has_labels ? cols - 1 : cols;
  Tensor features({rows, feature_cols}, std::move(values));
  return make_dataset(std::move(features), std::move(labels));
}

void save_gaussian_json(const std::string& path, const GaussianApprox& g) {
  if (g.dim() == 0 || g.dim() != g.cov.dim) {
    throw ContractError("save_gaussian_json: mean dim " + std::to_string(g.dim()) +
                        " vs covariance dim " + std::to_string(g.cov.dim));
  }
  nlohmann::json j;
  j["mean"] = g.mean.data;
  nlohmann::json cov;
  switch (g.cov.kind) {
    case Covariance::Kind::isotropic:
      cov["kind"] = "isotropic";
      cov["variance"] = g.cov.iso;
      break;
    case Covariance::Kind::diagonal:
      cov["kind"] = "diagonal";
      cov["variances"] = g.cov.diag_var;
      break;
    case Covariance::Kind::full: {
      cov["kind"] = "full";
      nlohmann::json rows = nlohmann::json::array();
      for (std::size_t i = 0; i < g.cov.dim; ++i) {
        nlohmann::json row = nlohmann::json::array();
        for (std::size_t k = 0; k < g.cov.dim; ++k) {
          row.push_back(g.cov.dense[i * g.cov.dim + k]);
        }
        rows.push_back(std::move(row));
      }
      cov["matrix"] = std::move(rows);
      break;
    }
  }
  j["cov"] = std::move(cov);
  std::ofstream out(path);
  if (!out) throw IoError("cannot open for writing: " + path);
  out << j.dump(2) << "\n";
  if (!out) throw IoError("write failed: " + path);
}

GaussianApprox load_gaussian_json(const std::string& path) {
  nlohmann::json j = parse_json_file(path, "gaussian file");
  if (!j.is_object()) {
    throw FormatError("gaussian file " + path + ": top level must be an object");
  }
  std::vector<double> mean = json_number_array(j, "mean", path);
  for (double v : mean) {
    if (!std::isfinite(v)) {
      throw FormatError("gaussian file " + path + ": non-finite mean entry");
    }
  }
  const std::size_t d = mean.size();
  if (!j.contains("cov") || !j["cov"].is_object()) {
    throw FormatError("gaussian file " + path + ": missing 'cov' object");
  }
  const nlohmann::json& cov = j["cov"];
  if (!cov.contains("kind") || !cov["kind"].is_string()) {
    throw FormatError("gaussian file " + path + ": missing covariance 'kind'");
  }
  const std::string kind = cov["kind"].get<std::string>();

  GaussianApprox g;
  g.mean = Tensor({d}, std::move(mean));
  try {
    if (kind == "isotropic") {
      if (!cov.contains("variance") || !cov["variance"].is_number()) {
        throw FormatError("gaussian file " + path + ": missing 'variance'");
      }
      g.cov = Covariance::Isotropic(d, cov["variance"].get<double>());
    } else if (kind == "diagonal") {
      std::vector<double> vars = json_number_array(cov, "variances", path);
      if (vars.size() != d) {
        throw FormatError("gaussian file " + path + ": " +
                          std::to_string(vars.size()) + " variances for dim " +
                          std::to_string(d));
      }
      g.cov = Covariance::Diagonal(std::move(vars));
    } else if (kind == "full") {
      if (!cov.contains("matrix") || !cov["matrix"].is_array() ||
          cov["matrix"].size() != d) {
        throw FormatError("gaussian file " + path +
                          ": 'matrix' must have one row per dimension");
      }
      std::vector<double> dense;
      dense.reserve(d * d);
      for (const auto& row : cov["matrix"]) {
        if (!row.is_array() || row.size() != d) {
          throw FormatError("gaussian file " + path +
                            ": matrix rows must have length " + std::to_string(d));
        }
        for (const auto& v : row) {
          if (!v.is_number()) {
            throw FormatError("gaussian file " + path +
                              ": non-numeric matrix entry");
          }
          dense.push_back(v.get<double>());
        }
      }
      g.cov = Covariance::Full(d, std::move(dense));
    } else {
      throw FormatError("gaussian file " + path + ": unknown covariance kind '" +
                        kind + "'");
    }
  } catch (const FormatError&) {
    throw;
  } catch (const Error& e) {
    // factory rejections (non-positive variance, asymmetry, ...) are the
    // file's fault here
    throw FormatError("gaussian file " + path + ": " + e.what());
  }
  return g;
}

}  // namespace bpc
