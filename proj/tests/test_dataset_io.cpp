#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "bpc/dataset_io.hpp"
#include "bpc/errors.hpp"
#include "test_util.hpp"

using namespace bpc;
using namespace bpc::testutil;

namespace {

// scratch files live under the system temp root so manual runs from the
// source tree leave no litter behind
std::string scratch(const std::string& name) {
  return (std::filesystem::temp_directory_path() / name).string();
}

std::vector<unsigned char> slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  REQUIRE(bool(in));
  std::vector<unsigned char> bytes;
  char c;
  while (in.get(c)) bytes.push_back(static_cast<unsigned char>(c));
  return bytes;
}

void spit(const std::string& path, const std::vector<unsigned char>& bytes) {
  std::ofstream out(path, std::ios::binary);
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path);
  out << text;
}

Dataset sample_labeled() {
  Tensor f({3, 2}, {1.5, -2.0, 1.0 / 3.0, 1e-300, -17.25, 0.0});
  return make_dataset(f, {3, -1, 0});
}

std::uint64_t le64(const std::vector<unsigned char>& b, std::size_t off) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[off + i]) << (8 * i);
  return v;
}

}  // namespace

TEST_CASE("binary dataset files round trip bitwise") {
  const std::string path = scratch("dataset_test.bpcd");
  SUBCASE("labeled") {
    Dataset d = sample_labeled();
    save_dataset_bpcd(path, d);
    Dataset back = load_dataset_bpcd(path);
    CHECK(back.features.shape == d.features.shape);
    CHECK(back.features.data == d.features.data);
    CHECK(back.labels == d.labels);
  }
  SUBCASE("unlabeled") {
    Rng rng(1);
    Tensor f = random_tensor({5, 4}, rng, -10.0, 10.0);
    Dataset d = make_dataset(f);
    save_dataset_bpcd(path, d);
    Dataset back = load_dataset_bpcd(path);
    CHECK(back.features.data == d.features.data);
    CHECK(!back.has_labels());
  }
}

TEST_CASE("binary dataset layout is pinned byte for byte") {
  const std::string path = scratch("dataset_layout.bpcd");
  Tensor f({1, 2}, {1.5, -2.0});
  save_dataset_bpcd(path, make_dataset(f, {3}));
  std::vector<unsigned char> b = slurp(path);
  REQUIRE(b.size() == 4 + 4 + 8 + 8 + 1 + 16 + 8);
  CHECK(std::memcmp(b.data(), "BPCD", 4) == 0);
  CHECK(le64(b, 8) == 1);   // count
  CHECK(le64(b, 16) == 2);  // dim
  CHECK(b[4] == 1);         // version, little endian
  CHECK(b[5] == 0);
  CHECK(b[24] == 1);  // has-labels flag
  CHECK(le64(b, 25) == 0x3FF8000000000000ull);  // 1.5
  CHECK(le64(b, 33) == 0xC000000000000000ull);  // -2.0
  CHECK(le64(b, 41) == 3);                      // label
}

TEST_CASE("binary dataset corruption is diagnosed") {
  const std::string path = scratch("dataset_bad.bpcd");
  Dataset d = sample_labeled();
  save_dataset_bpcd(scratch("dataset_good.bpcd"), d);
  std::vector<unsigned char> good = slurp(scratch("dataset_good.bpcd"));

  SUBCASE("missing file") {
    CHECK_THROWS_AS(load_dataset_bpcd("no_such_file.bpcd"), IoError);
  }
  SUBCASE("bad magic") {
    std::vector<unsigned char> b = good;
    b[0] = 'X';
    spit(path, b);
    CHECK_THROWS_WITH_AS(load_dataset_bpcd(path), doctest::Contains("magic"),
                         FormatError);
  }
  SUBCASE("unsupported version") {
    std::vector<unsigned char> b = good;
    b[4] = 9;
    spit(path, b);
    CHECK_THROWS_WITH_AS(load_dataset_bpcd(path), doctest::Contains("version"),
                         FormatError);
  }
  SUBCASE("bad label flag") {
    std::vector<unsigned char> b = good;
    b[24] = 2;
    spit(path, b);
    CHECK_THROWS_WITH_AS(load_dataset_bpcd(path), doctest::Contains("label flag"),
                         FormatError);
  }
  SUBCASE("truncated payload") {
    std::vector<unsigned char> b = good;
    b.resize(b.size() - 5);
    spit(path, b);
    CHECK_THROWS_WITH_AS(load_dataset_bpcd(path), doctest::Contains("truncated"),
                         FormatError);
  }
  SUBCASE("trailing bytes") {
    std::vector<unsigned char> b = good;
    b.push_back(0);
    spit(path, b);
    CHECK_THROWS_WITH_AS(load_dataset_bpcd(path), doctest::Contains("trailing"),
                         IntegrityError);
  }
  SUBCASE("non-finite feature") {
    std::vector<unsigned char> b = good;
    for (int i = 0; i < 8; ++i) b[25 + i] = 0xFF;  // quiet nan bit pattern
    spit(path, b);
    CHECK_THROWS_WITH_AS(load_dataset_bpcd(path), doctest::Contains("non-finite"),
                         IntegrityError);
  }
  SUBCASE("empty writes are rejected at the source") {
    Dataset empty;
    empty.features = Tensor::zeros({0, 2});
    CHECK_THROWS_AS(save_dataset_bpcd(path, empty), ContractError);
  }
}

TEST_CASE("csv dataset files round trip exactly") {
  const std::string path = scratch("dataset_test.csv");
  SUBCASE("labeled values survive the text form") {
    Dataset d = sample_labeled();
    save_dataset_csv(path, d);
    Dataset back = load_dataset_csv(path, true);
    CHECK(back.features.data == d.features.data);
    CHECK(back.labels == d.labels);
  }
  SUBCASE("unlabeled") {
    Rng rng(2);
    Dataset d = make_dataset(random_tensor({4, 3}, rng, -5.0, 5.0));
    save_dataset_csv(path, d);
    Dataset back = load_dataset_csv(path, false);
    CHECK(back.features.data == d.features.data);
    CHECK(!back.has_labels());
  }
  SUBCASE("windows line endings and blank tail lines are tolerated") {
    write_text(path, "1.0,2.0,1\r\n3.0,4.0,0\r\n\r\n");
    Dataset back = load_dataset_csv(path, true);
    REQUIRE(back.size() == 2);
    CHECK(back.features.at2(1, 0) == 3.0);
    CHECK(back.labels == std::vector<long>{1, 0});
  }
}

TEST_CASE("csv dataset parsing rejects malformed rows") {
  const std::string path = scratch("dataset_bad.csv");
  SUBCASE("ragged rows") {
    write_text(path, "1.0,2.0,1\n3.0,0\n");
    CHECK_THROWS_WITH_AS(load_dataset_csv(path, true), doctest::Contains("row 2"),
                         FormatError);
  }
  SUBCASE("fractional label") {
    write_text(path, "1.0,2.0,1.5\n");
    CHECK_THROWS_WITH_AS(load_dataset_csv(path, true), doctest::Contains("label"),
                         FormatError);
  }
  SUBCASE("non-numeric feature") {
    write_text(path, "1.0,abc,1\n");
    CHECK_THROWS_WITH_AS(load_dataset_csv(path, true),
                         doctest::Contains("feature"), FormatError);
  }
  SUBCASE("non-finite feature text") {
    write_text(path, "1.0,nan,1\n");
    CHECK_THROWS_AS(load_dataset_csv(path, true), FormatError);
  }
  SUBCASE("no rows") {
    write_text(path, "\n");
    CHECK_THROWS_WITH_AS(load_dataset_csv(path, true), doctest::Contains("no rows"),
                         FormatError);
  }
  SUBCASE("label column missing") {
    write_text(path, "1.0\n2.0\n");
    CHECK_THROWS_AS(load_dataset_csv(path, true), FormatError);
  }
  SUBCASE("missing file") {
    CHECK_THROWS_AS(load_dataset_csv("no_such_file.csv", true), IoError);
  }
}

TEST_CASE("gaussian json files round trip every covariance kind") {
  const std::string path = scratch("gauss_test.json");
  SUBCASE("isotropic") {
    GaussianApprox g{Tensor({2}, {0.5, -1.25}), Covariance::Isotropic(2, 0.7)};
    save_gaussian_json(path, g);
    GaussianApprox back = load_gaussian_json(path);
    CHECK(back.mean.data == g.mean.data);
    CHECK(back.cov.equals(g.cov));
  }
  SUBCASE("diagonal") {
    GaussianApprox g{Tensor({3}, {1.0 / 3.0, 2.0, -7.0}),
                     Covariance::Diagonal({0.1, 2.5, 1e-6})};
    save_gaussian_json(path, g);
    GaussianApprox back = load_gaussian_json(path);
    CHECK(back.mean.data == g.mean.data);
    CHECK(back.cov.equals(g.cov));
  }
  SUBCASE("full") {
    GaussianApprox g{Tensor({2}, {0.0, 1.0}),
                     Covariance::Full(2, {2.0, 0.3, 0.3, 1.0})};
    save_gaussian_json(path, g);
    GaussianApprox back = load_gaussian_json(path);
    CHECK(back.mean.data == g.mean.data);
    CHECK(back.cov.equals(g.cov));
  }
}

TEST_CASE("gaussian json parsing rejects malformed content") {
  const std::string path = scratch("gauss_bad.json");
  SUBCASE("invalid json") {
    write_text(path, "{oops");
    CHECK_THROWS_AS(load_gaussian_json(path), FormatError);
  }
  SUBCASE("missing mean") {
    write_text(path, R"({"cov": {"kind": "isotropic", "variance": 1.0}})");
    CHECK_THROWS_WITH_AS(load_gaussian_json(path), doctest::Contains("mean"),
                         FormatError);
  }
  SUBCASE("unknown kind") {
    write_text(path, R"({"mean": [0.0], "cov": {"kind": "spherical"}})");
    CHECK_THROWS_WITH_AS(load_gaussian_json(path), doctest::Contains("kind"),
                         FormatError);
  }
  SUBCASE("non-positive variance") {
    write_text(path, R"({"mean": [0.0], "cov": {"kind": "isotropic", "variance": -1.0}})");
    CHECK_THROWS_AS(load_gaussian_json(path), FormatError);
  }
  SUBCASE("variance count mismatch") {
    write_text(path,
               R"({"mean": [0.0, 1.0], "cov": {"kind": "diagonal", "variances": [1.0]}})");
    CHECK_THROWS_WITH_AS(load_gaussian_json(path), doctest::Contains("variances"),
                         FormatError);
  }
  SUBCASE("asymmetric full matrix") {
    write_text(path,
               R"({"mean": [0.0, 0.0],
                   "cov": {"kind": "full", "matrix": [[1.0, 0.9], [0.1, 1.0]]}})");
    CHECK_THROWS_WITH_AS(load_gaussian_json(path), doctest::Contains("symmetric"),
                         FormatError);
  }
  SUBCASE("ragged matrix rows") {
    write_text(path,
               R"({"mean": [0.0, 0.0],
                   "cov": {"kind": "full", "matrix": [[1.0, 0.0], [0.0]]}})");
    CHECK_THROWS_AS(load_gaussian_json(path), FormatError);
  }
  SUBCASE("missing file") {
    CHECK_THROWS_AS(load_gaussian_json("no_such_gauss.json"), IoError);
  }
}
