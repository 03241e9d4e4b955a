// Copyright 2026 The fastsep Authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)

#include <catch_amalgamated.hpp>

#include <cstring>
#include <filesystem>
#include <random>

#include "fastsep/neural.hpp"
#include "support/random_bundle.hpp"

using namespace fastsep;
using namespace fastsep::model;
using fastsep::testing::make_random_bundle;
using fastsep::testing::randn;

namespace {

constexpr int kF = 33, kC = 4, kDz = 6, kH = 8;

Eigen::MatrixXd random_power(Eigen::Index F, Eigen::Index N, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::exponential_distribution<double> e(1.0);
  Eigen::MatrixXd P(F, N);
  for (Eigen::Index i = 0; i < P.size(); ++i) P.data()[i] = e(rng) + 1e-4;
  return P;
}

Eigen::VectorXd one_hot(int C, int k) {
  Eigen::VectorXd c = Eigen::VectorXd::Zero(C);
  c[k] = 1.0;
  return c;
}

// Rewrites the manifest of a serialized bundle.
std::string with_manifest(const std::string& bytes, const Json& manifest) {
  std::uint64_t len = 0;
  std::memcpy(&len, bytes.data() + 8, sizeof len);
  const std::string body = manifest.dump();
  std::string out(bytes.data(), 8);
  const std::uint64_t new_len = body.size();
  out.append(reinterpret_cast<const char*>(&new_len), sizeof new_len);
  out += body;
  out += bytes.substr(16 + len);
  return out;
}

Json manifest_of(const std::string& bytes) {
  std::uint64_t len = 0;
  std::memcpy(&len, bytes.data() + 8, sizeof len);
  return Json::parse(bytes.substr(16, len));
}

}  // namespace

TEST_CASE("conv1d matches a direct loop", "[neural]") {
  std::mt19937_64 rng(1);
  const auto layer = fastsep::testing::make_conv(5 + 2, 6, 3, 2, 1, true, rng);
  const Tensor x = randn(5, 9, 1.0f, rng);
  Eigen::VectorXf c(2);
  c << 0.25f, 0.75f;
  const Tensor y = forward(layer, x, c);
  const Eigen::Index t_out = (9 + 2 - 3) / 2 + 1;
  REQUIRE(y.cols() == t_out);
  for (int co = 0; co < 6; ++co)
    for (Eigen::Index t = 0; t < t_out; ++t) {
      double acc = layer.bias[co];
      for (int ci = 0; ci < 7; ++ci)
        for (int k = 0; k < 3; ++k) {
          const Eigen::Index src = t * 2 - 1 + k;
          if (src < 0 || src >= 9) continue;
          const double in = ci < 5 ? x(ci, src) : c[ci - 5];
          acc += layer.weight(co, ci * 3 + k) * in;
        }
      CHECK(std::abs(y(co, t) - acc) < 1e-5);
    }
}

TEST_CASE("deconv1d matches a direct scatter", "[neural]") {
  std::mt19937_64 rng(2);
  const auto layer = fastsep::testing::make_deconv(4, 3, 4, 2, 1, false, rng);
  const Tensor x = randn(4, 5, 1.0f, rng);
  const Tensor y = forward(layer, x, Eigen::VectorXf());
  const Eigen::Index t_out = (5 - 1) * 2 - 2 + 4;
  REQUIRE(y.cols() == t_out);
  Eigen::MatrixXd ref = Eigen::MatrixXd::Zero(3, t_out);
  for (int ci = 0; ci < 4; ++ci)
    for (int co = 0; co < 3; ++co)
      for (int k = 0; k < 4; ++k)
        for (int t = 0; t < 5; ++t) {
          const int dst = t * 2 - 1 + k;
          if (dst >= 0 && dst < t_out) ref(co, dst) += layer.taps[k](co, ci) * x(ci, t);
        }
  for (int co = 0; co < 3; ++co) ref.row(co).array() += layer.bias[co];
  CHECK((y.cast<double>() - ref).cwiseAbs().maxCoeff() < 1e-5);
}

TEST_CASE("batch norm maps the running mean to its shift", "[neural]") {
  std::mt19937_64 rng(3);
  const auto bn = fastsep::testing::make_bn(7, rng);
  const Tensor x = bn.running_mean.replicate(1, 4);
  const Tensor y = forward(bn, x, Eigen::VectorXf());
  for (Eigen::Index t = 0; t < 4; ++t) CHECK(y.col(t) == bn.beta);
}

TEST_CASE("glu matches an elementwise oracle", "[neural]") {
  std::mt19937_64 rng(4);
  const Tensor x = randn(10, 6, 2.0f, rng);
  const Tensor y = forward(Glu{}, x, Eigen::VectorXf());
  REQUIRE(y.rows() == 5);
  for (int c = 0; c < 5; ++c)
    for (int t = 0; t < 6; ++t) {
      const double ref = x(c, t) / (1.0 + std::exp(-static_cast<double>(x(c + 5, t))));
      CHECK(std::abs(y(c, t) - ref) < 1e-6);
    }
  CHECK_THROWS_AS(forward(Glu{}, randn(3, 2, 1.0f, rng), Eigen::VectorXf()), InvalidArgument);
}

TEST_CASE("forward passes are deterministic and well-shaped", "[neural]") {
  const auto b = make_random_bundle(kF, kC, kDz, kH, 11);
  const auto P = random_power(kF, 13, 1);
  const auto c = one_hot(kC, 2);

  const auto enc = encoder_forward(b, P, c);
  CHECK(enc.mean.rows() == kDz);
  CHECK(enc.mean.cols() == 7);  // ceil(13 / 2)
  CHECK((enc.variance.array() > 0.0).all());

  const auto v1 = decoder_forward(b, enc.mean, c, 13);
  const auto v2 = decoder_forward(b, enc.mean, c, 13);
  CHECK(v1.rows() == kF);
  CHECK(v1.cols() == 13);
  CHECK(v1 == v2);
  CHECK(v1.minCoeff() > 0.0);

  const auto p = classifier_forward(b, P);
  CHECK(p.size() == kC);
  CHECK(p.minCoeff() >= 0.0);
  CHECK(std::abs(p.sum() - 1.0) < 1e-6);
  CHECK(classifier_forward(b, P) == p);
}

TEST_CASE("decoder output varies continuously with the class vector", "[neural]") {
  const auto b = make_random_bundle(kF, kC, kDz, kH, 12);
  std::mt19937_64 rng(5);
  const Eigen::MatrixXd z = randn(kDz, 5, 1.0f, rng).cast<double>();
  const auto base = decoder_forward(b, z, one_hot(kC, 0));
  double prev = std::numeric_limits<double>::infinity();
  for (double eps : {1e-1, 1e-2, 1e-3, 1e-4}) {
    Eigen::VectorXd c = one_hot(kC, 0) * (1.0 - eps);
    c[1] = eps;
    const double d = (decoder_forward(b, z, c) - base).norm() / base.norm();
    CHECK(d < prev);
    prev = d;
  }
  CHECK(prev < 1e-3);
}

TEST_CASE("classifier posteriors sum to one and ignore global scale", "[neural]") {
  const auto b = make_random_bundle(kF, kC, kDz, kH, 13);
  for (int trial = 0; trial < 20; ++trial) {
    const auto P = random_power(kF, 3 + trial, 100 + trial);
    const auto p = classifier_forward(b, P);
    CHECK(std::abs(p.sum() - 1.0) < 1e-6);
    // A power-of-two scale survives normalisation bit-exactly.
    CHECK(classifier_forward(b, 4.0 * P) == p);
    CHECK((classifier_forward(b, 3.7 * P) - p).cwiseAbs().maxCoeff() < 1e-6);
  }
}

TEST_CASE("decoder output stays positive for extreme latents", "[neural]") {
  const auto b = make_random_bundle(kF, kC, kDz, kH, 14);
  for (double scale : {1e-6, 1.0, 1e3, 1e6}) {
    const Eigen::MatrixXd z = Eigen::MatrixXd::Constant(kDz, 4, scale);
    const auto v = decoder_forward(b, z, one_hot(kC, 1));
    CHECK(v.minCoeff() > 0.0);
    CHECK(v.allFinite());
  }
}

TEST_CASE("forward passes reject inconsistent shapes", "[neural]") {
  const auto b = make_random_bundle(kF, kC, kDz, kH, 15);
  CHECK_THROWS_AS(decoder_forward(b, Eigen::MatrixXd::Zero(kDz + 1, 4), one_hot(kC, 0)), InvalidArgument);
  CHECK_THROWS_AS(decoder_forward(b, Eigen::MatrixXd::Zero(kDz, 4), one_hot(kC + 1, 0)), InvalidArgument);
  CHECK_THROWS_AS(classifier_forward(b, random_power(kF + 1, 4, 1)), InvalidArgument);
  CHECK_THROWS_AS(encoder_forward(b, Eigen::MatrixXd::Zero(kF, 4), one_hot(kC, 0)), InvalidArgument);
}

TEST_CASE("bundle save/load is the identity", "[neural][bundle]") {
  const auto b = make_random_bundle(kF, kC, kDz, kH, 16);
  const auto path = std::filesystem::temp_directory_path() / "fastsep_test_bundle.fmvae";
  save_bundle(path, b);
  const auto loaded = load_bundle(path);
  CHECK(serialize_bundle(loaded) == serialize_bundle(b));
  CHECK(loaded.metadata == b.metadata);

  const auto P = random_power(kF, 9, 3);
  CHECK(classifier_forward(loaded, P) == classifier_forward(b, P));
  const auto c = one_hot(kC, 3);
  CHECK(encoder_forward(loaded, P, c).mean == encoder_forward(b, P, c).mean);

  const std::string bytes = serialize_bundle(b);
  CHECK(bytes.substr(0, 8) == std::string("FMVAE01\0", 8));
}

TEST_CASE("bundle loader rejects bad files", "[neural][bundle]") {
  const auto b = make_random_bundle(kF, kC, kDz, kH, 17);
  const std::string bytes = serialize_bundle(b);

  SECTION("bad magic") {
    std::string bad = bytes;
    bad[0] = 'X';
    CHECK_THROWS_WITH(parse_bundle(bad), Catch::Matchers::ContainsSubstring("magic"));
  }
  SECTION("truncated payload") {
    CHECK_THROWS_WITH(parse_bundle(bytes.substr(0, bytes.size() - 4)), Catch::Matchers::ContainsSubstring("truncated"));
  }
  SECTION("trailing bytes") {
    CHECK_THROWS_AS(parse_bundle(bytes + "xx"), FormatError);
  }
  SECTION("unsupported layer kind") {
    auto m = manifest_of(bytes);
    m["encoder"]["layers"][0]["kind"] = "lstm";
    CHECK_THROWS_WITH(parse_bundle(with_manifest(bytes, m)), Catch::Matchers::ContainsSubstring("unsupported layer kind"));
  }
  SECTION("inconsistent channel counts") {
    auto m = manifest_of(bytes);
    m["decoder"]["layers"][1]["channels"] = 2 * kH + 2;
    for (auto& t : m["tensors"])
      if (t["name"].get<std::string>().rfind("decoder.1.", 0) == 0) t["shape"] = {2 * kH + 2};
    CHECK_THROWS_AS(parse_bundle(with_manifest(bytes, m)), FormatError);
  }
  SECTION("tensor table shape disagreement") {
    auto m = manifest_of(bytes);
    m["tensors"][1]["shape"] = {1};
    CHECK_THROWS_WITH(parse_bundle(with_manifest(bytes, m)), Catch::Matchers::ContainsSubstring("inconsistent shape"));
  }
  SECTION("wrong classifier width") {
    auto m = manifest_of(bytes);
    m["num_classes"] = kC + 1;
    CHECK_THROWS_AS(parse_bundle(with_manifest(bytes, m)), FormatError);
  }
  SECTION("unsupported version") {
    auto m = manifest_of(bytes);
    m["version"] = 99;
    CHECK_THROWS_WITH(parse_bundle(with_manifest(bytes, m)), Catch::Matchers::ContainsSubstring("version"));
  }
}
