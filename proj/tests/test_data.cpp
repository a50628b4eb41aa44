#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "aim/data.hpp"

using namespace aim;

namespace {

DatasetSpec small_spec(std::uint64_t seed, std::vector<double> snr = {1.5, 0.6}) {
  DatasetSpec spec;
  spec.num_modalities = 2;
  spec.num_classes = 4;
  spec.dims = {8, 8};
  spec.n_train = 400;
  spec.n_test = 200;
  spec.snr = std::move(snr);
  spec.seed = seed;
  return spec;
}

}  // namespace

TEST_CASE("generate: same seed twice gives bit-identical datasets") {
  const auto [tr1, te1] = generate(small_spec(7));
  const auto [tr2, te2] = generate(small_spec(7));
  CHECK(tr1.labels == tr2.labels);
  for (int m = 0; m < 2; ++m) {
    REQUIRE(tr1.features[m].size() == tr2.features[m].size());
    CHECK(std::memcmp(tr1.features[m].data(), tr2.features[m].data(),
                      tr1.features[m].size() * sizeof(double)) == 0);
    CHECK(std::memcmp(te1.features[m].data(), te2.features[m].data(),
                      te1.features[m].size() * sizeof(double)) == 0);
  }
  const auto [tr3, te3] = generate(small_spec(8));
  CHECK(std::memcmp(tr1.features[0].data(), tr3.features[0].data(),
                    tr1.features[0].size() * sizeof(double)) != 0);
}

TEST_CASE("generate: labels are balanced round-robin") {
  const auto [train, test] = generate(small_spec(1));
  for (int i = 0; i < train.size(); ++i) CHECK(train.labels[i] == i % 4);
  std::vector<int> counts(4, 0);
  for (int y : train.labels) ++counts[y];
  for (int c : counts) CHECK(c == 100);
}

TEST_CASE("generate: a zero-snr modality scores near chance under nearest class mean") {
  const auto [train, test] = generate(small_spec(3, {1.5, 0.0}));
  const double acc = nearest_class_mean_accuracy(train, test, 1);
  const double p = 1.0 / 4.0;
  const double sigma = std::sqrt(p * (1 - p) / test.size());
  CHECK(acc <= p + 3 * sigma);
  CHECK(acc >= p - 3 * sigma);
}

TEST_CASE("generate: a very high snr modality is perfectly separable") {
  DatasetSpec spec = small_spec(4, {50.0, 0.5});
  spec.n_train = 200;
  spec.n_test = 200;
  const auto [train, test] = generate(spec);
  CHECK(nearest_class_mean_accuracy(train, test, 0) == 1.0);
}

TEST_CASE("dominance monotonicity over a three-point snr sweep") {
  double prev = -1.0;
  for (double snr : {0.0, 0.8, 3.0}) {
    const auto [train, test] = generate(small_spec(5, {snr, 1.0}));
    const double acc = nearest_class_mean_accuracy(train, test, 0);
    CHECK(acc >= prev - 0.02);  // allow tiny statistical jitter at the flat end
    prev = acc;
  }
}

TEST_CASE("standard fixture: the pinned benchmark dominance holds") {
  const DatasetSpec spec = standard_fixture(0);
  CHECK(spec.num_modalities == 2);
  CHECK(spec.num_classes == 6);
  CHECK(spec.dims == std::vector<int>{16, 32});
  CHECK(spec.n_train == 600);
  CHECK(spec.n_test == 300);
  const auto [train, test] = generate(spec);
  const double dom = nearest_class_mean_accuracy(train, test, 0);
  const double weak = nearest_class_mean_accuracy(train, test, 1);
  CHECK(dom > weak);
  CHECK(dom > 1.0 / 6.0);
}

TEST_CASE("save/load: round trip is exact") {
  namespace fs = std::filesystem;
  const std::string dir = (fs::temp_directory_path() / "aim_data_test").string();
  fs::create_directories(dir);
  const std::string path = dir + "/set.mmds";

  DatasetSpec spec = small_spec(6);
  spec.n_train = 37;  // odd size: exercises the partial final class group
  spec.n_test = 11;
  const auto [train, test] = generate(spec);
  save(train, path);
  const Dataset back = load(path);
  CHECK(back.num_modalities == train.num_modalities);
  CHECK(back.num_classes == train.num_classes);
  CHECK(back.dims == train.dims);
  CHECK(back.labels == train.labels);
  for (int m = 0; m < 2; ++m) {
    REQUIRE(back.features[m].size() == train.features[m].size());
    CHECK(std::memcmp(back.features[m].data(), train.features[m].data(),
                      back.features[m].size() * sizeof(double)) == 0);
  }
  fs::remove_all(dir);
}

TEST_CASE("load: malformed inputs are parse errors with line numbers") {
  namespace fs = std::filesystem;
  const std::string dir = (fs::temp_directory_path() / "aim_data_bad").string();
  fs::create_directories(dir);

  auto write = [&](const std::string& name, const std::string& body) {
    std::ofstream os(dir + "/" + name);
    os << body;
    return dir + "/" + name;
  };

  SUBCASE("truncated file") {
    const std::string p = write("trunc.mmds",
                                "mmds v1 M=2 K=2 dims=2,2 n=3\n"
                                "0;1,2;3,4\n");
    try {
      load(p);
      FAIL("expected ParseError");
    } catch (const ParseError& e) {
      CHECK(std::string(e.what()).find("line 3") != std::string::npos);
    }
  }
  SUBCASE("bad feature count") {
    const std::string p = write("short.mmds",
                                "mmds v1 M=2 K=2 dims=2,2 n=1\n"
                                "0;1,2;3\n");
    CHECK_THROWS_AS(load(p), ParseError);
  }
  SUBCASE("bad label") {
    const std::string p = write("label.mmds",
                                "mmds v1 M=2 K=2 dims=1,1 n=1\n"
                                "7;1;2\n");
    CHECK_THROWS_AS(load(p), ParseError);
  }
  SUBCASE("bad header") {
    const std::string p = write("hdr.mmds", "mmds v2 M=2 K=2 dims=1,1 n=0\n");
    CHECK_THROWS_AS(load(p), ParseError);
  }
  SUBCASE("header-only file with n=0 loads as an empty set") {
    const std::string p = write("empty.mmds", "mmds v1 M=2 K=3 dims=2,2 n=0\n");
    const Dataset set = load(p);
    CHECK(set.size() == 0);
    CHECK(set.num_classes == 3);
  }
  fs::remove_all(dir);
}

TEST_CASE("dataset spec files parse and validate") {
  namespace fs = std::filesystem;
  const std::string dir = (fs::temp_directory_path() / "aim_spec_test").string();
  fs::create_directories(dir);
  {
    std::ofstream os(dir + "/good.dataspec");
    os << "# the pinned benchmark\nM=2\nK=6\ndims=16,16\nn_train=1200\nn_test=300\n"
          "snr=1.5,0.6\nseed=3\n";
  }
  const DatasetSpec spec = parse_dataset_spec(dir + "/good.dataspec");
  CHECK(spec.num_classes == 6);
  CHECK(spec.snr == std::vector<double>{1.5, 0.6});
  CHECK(spec.seed == 3);

  {
    std::ofstream os(dir + "/bad.dataspec");
    os << "M=2\nK=6\ndims=16\nn_train=10\nn_test=10\nsnr=1.5,0.6\nseed=0\n";
  }
  CHECK_THROWS_AS(parse_dataset_spec(dir + "/bad.dataspec"), ValueError);
  {
    std::ofstream os(dir + "/unk.dataspec");
    os << "M=2\nwhat=1\n";
  }
  CHECK_THROWS_AS(parse_dataset_spec(dir + "/unk.dataspec"), ParseError);
  fs::remove_all(dir);
}

TEST_CASE("modality batch extraction preserves rows") {
  const auto [train, test] = generate(small_spec(9));
  const std::vector<int> idx{5, 0, 17};
  const Tensor batch = train.modality_batch(1, idx);
  REQUIRE(batch.shape() == Shape{3, 8});
  for (int r = 0; r < 3; ++r) {
    for (int c = 0; c < 8; ++c) {
      CHECK(batch.at(r, c) == train.features[1][static_cast<std::size_t>(idx[r]) * 8 + c]);
    }
  }
  const auto labels = train.label_batch(idx);
  CHECK(labels == std::vector<int>{5 % 4, 0, 17 % 4});
}
