// Copyright 2026 The fastsep Authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)

#include <catch_amalgamated.hpp>

#include <random>
#include <sstream>

#include "fastsep/evaluation.hpp"

using namespace fastsep;
using namespace fastsep::eval;

namespace {

std::vector<double> white(std::size_t n, std::mt19937_64& rng, double sigma = 1.0) {
  std::normal_distribution<double> g(0.0, sigma);
  std::vector<double> x(n);
  for (auto& v : x) v = g(rng);
  return x;
}

// Columns are copies of each reference delayed by 0..L-1 samples, zero padded to n + L - 1.
Eigen::MatrixXd delay_matrix(const std::vector<Channel>& refs, int L) {
  const auto n = static_cast<Eigen::Index>(refs.front().size());
  Eigen::MatrixXd A = Eigen::MatrixXd::Zero(n + L - 1, static_cast<Eigen::Index>(refs.size()) * L);
  for (std::size_t i = 0; i < refs.size(); ++i)
    for (int d = 0; d < L; ++d)
      for (Eigen::Index t = 0; t < n; ++t) A(t + d, static_cast<Eigen::Index>(i) * L + d) = refs[i][static_cast<std::size_t>(t)];
  return A;
}

double db(double num, double den) { return 10.0 * std::log10(num / den); }

}  // namespace

TEST_CASE("perfect estimates hit the score caps", "[eval]") {
  std::mt19937_64 rng(1);
  const std::vector<Channel> refs = {white(2000, rng), white(2000, rng)};
  const auto s = bss_eval(refs, refs, {64});
  for (Eigen::Index k = 0; k < 2; ++k) {
    CHECK(s.sdr[k] == kScoreCapDb);
    CHECK(s.sir[k] == kScoreCapDb);
    CHECK(s.sar[k] == kScoreCapDb);
  }
  CHECK(s.permutation == std::vector<int>{0, 1});
}

TEST_CASE("orthogonal noise at -20 dB scores 20 dB SDR", "[eval]") {
  std::mt19937_64 rng(2);
  const int L = 64;
  const std::size_t n = 3000;
  const std::vector<Channel> refs = {white(n, rng), white(n, rng)};
  // Gram-Schmidt the noise against every delayed copy of every reference. The
  // estimate is zero past sample n, so only the first n rows of each copy matter.
  const Eigen::MatrixXd A = delay_matrix(refs, L).topRows(static_cast<Eigen::Index>(n));
  Eigen::HouseholderQR<Eigen::MatrixXd> qr(A);
  const Eigen::MatrixXd Q = qr.householderQ() * Eigen::MatrixXd::Identity(A.rows(), A.cols());
  const auto raw = white(n, rng);
  Eigen::VectorXd noise = Eigen::Map<const Eigen::VectorXd>(raw.data(), static_cast<Eigen::Index>(n));
  noise -= Q * (Q.transpose() * noise);
  REQUIRE((A.transpose() * noise).cwiseAbs().maxCoeff() < 1e-9 * noise.norm());

  for (std::size_t k = 0; k < 2; ++k) {
    const double ref_energy = std::inner_product(refs[k].begin(), refs[k].end(), refs[k].begin(), 0.0);
    const double scale = std::sqrt(ref_energy / 100.0) / noise.norm();
    std::vector<Channel> est = refs;
    for (std::size_t t = 0; t < n; ++t) est[k][t] += scale * noise[static_cast<Eigen::Index>(t)];
    const auto s = bss_eval(est, refs, {L});
    CHECK(std::abs(s.sdr[static_cast<Eigen::Index>(k)] - 20.0) < 1e-6);
    CHECK(std::abs(s.sar[static_cast<Eigen::Index>(k)] - 20.0) < 1e-6);
  }
}

TEST_CASE("single-source scores match a least-squares oracle", "[eval]") {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 5; ++trial) {
    const int L = 8 + 4 * trial;
    const std::size_t n = 400 + 50 * static_cast<std::size_t>(trial);
    const std::vector<Channel> ref = {white(n, rng)};
    // Estimate: filtered reference plus noise.
    Channel est(n, 0.0);
    const auto taps = white(5, rng);
    for (std::size_t t = 0; t < n; ++t)
      for (std::size_t d = 0; d < taps.size() && d <= t; ++d) est[t] += taps[d] * ref[0][t - d];
    const auto noise = white(n, rng, 0.3);
    for (std::size_t t = 0; t < n; ++t) est[t] += noise[t];

    const Eigen::MatrixXd A = delay_matrix(ref, L);
    Eigen::VectorXd e = Eigen::VectorXd::Zero(A.rows());
    for (std::size_t t = 0; t < n; ++t) e[static_cast<Eigen::Index>(t)] = est[t];
    const Eigen::VectorXd proj = A * A.colPivHouseholderQr().solve(e);
    const double expected_sdr = db(proj.squaredNorm(), (e - proj).squaredNorm());

    const auto s = bss_eval(std::vector<Channel>{est}, ref, {L});
    CHECK(s.sdr[0] == Catch::Approx(expected_sdr).margin(1e-6));
    CHECK(s.sar[0] == Catch::Approx(expected_sdr).margin(1e-6));
    CHECK(s.sir[0] == kScoreCapDb);
  }
}

TEST_CASE("scores are invariant to estimate scale and order", "[eval]") {
  std::mt19937_64 rng(4);
  const std::size_t n = 2500;
  const std::vector<Channel> refs = {white(n, rng), white(n, rng)};
  std::vector<Channel> est(2, Channel(n));
  const auto noise = white(n, rng, 0.5);
  for (std::size_t t = 0; t < n; ++t) {
    est[0][t] = refs[0][t] + 0.3 * refs[1][t] + noise[t];
    est[1][t] = 0.2 * refs[0][t] + refs[1][t] - noise[t];
  }
  const auto base = bss_eval(est, refs, {32});
  CHECK(base.permutation == std::vector<int>{0, 1});

  std::vector<Channel> scaled = est;
  for (auto& v : scaled[1]) v *= 7.25;
  const auto s = bss_eval(scaled, refs, {32});
  CHECK((s.sdr - base.sdr).cwiseAbs().maxCoeff() < 1e-8);
  CHECK((s.sir - base.sir).cwiseAbs().maxCoeff() < 1e-8);
  CHECK((s.sar - base.sar).cwiseAbs().maxCoeff() < 1e-8);

  const auto swapped = bss_eval(std::vector<Channel>{est[1], est[0]}, refs, {32});
  CHECK(swapped.permutation == std::vector<int>{1, 0});
  CHECK((swapped.sdr - base.sdr).cwiseAbs().maxCoeff() < 1e-8);
  CHECK((swapped.sir - base.sir).cwiseAbs().maxCoeff() < 1e-8);

  for (Eigen::Index k = 0; k < 2; ++k) CHECK(base.sdr[k] <= std::min(base.sir[k], base.sar[k]) + 3.02);
}

TEST_CASE("bss_eval rejects degenerate input", "[eval]") {
  std::mt19937_64 rng(5);
  const auto a = white(500, rng), b = white(500, rng);
  CHECK_THROWS_AS(bss_eval(std::vector<Channel>{a, b}, std::vector<Channel>{a, Channel(500, 0.0)}), InvalidArgument);
  CHECK_THROWS_AS(bss_eval(std::vector<Channel>{a, Channel(500, 0.0)}, std::vector<Channel>{a, b}), InvalidArgument);
  CHECK_THROWS_AS(bss_eval(std::vector<Channel>{a}, std::vector<Channel>{a, b}), InvalidArgument);
  CHECK_THROWS_AS(bss_eval(std::vector<Channel>{a, Channel(400, 1.0)}, std::vector<Channel>{a, b}), InvalidArgument);
  Channel near = a;
  for (std::size_t t = 0; t < near.size(); ++t) near[t] = 2.0 * a[t] + 1e-3 * b[t];
  CHECK_THROWS_WITH(bss_eval(std::vector<Channel>{a, b}, std::vector<Channel>{a, near}),
                    Catch::Matchers::ContainsSubstring("degenerate"));
}

TEST_CASE("classification accuracy tallies argmax hits", "[eval]") {
  sep::SeparationTrace trace;
  for (int it = 1; it <= 4; ++it) {
    sep::IterationRecord r;
    r.iteration = it;
    r.class_posteriors = {{0.1, 0.7, 0.2}, {0.6, 0.2, 0.2}};
    trace.iterations.push_back(r);
  }
  CHECK(classification_accuracy(trace, {1, 0}, AccuracyMode::kAllIterations) == 1.0);
  CHECK(classification_accuracy(trace, {0, 1}, {1, 0}, AccuracyMode::kAllIterations) == 1.0);
  CHECK(classification_accuracy(trace, {1, 2}, AccuracyMode::kAllIterations) == 0.5);

  trace.iterations.back().class_posteriors[0] = {0.9, 0.05, 0.05};
  CHECK(classification_accuracy(trace, {1, 0}, AccuracyMode::kAllIterations) == 7.0 / 8.0);
  CHECK(classification_accuracy(trace, {1, 0}, AccuracyMode::kFinal) == 0.5);

  // Uniform posteriors: the lowest index wins the tie.
  for (auto& r : trace.iterations) r.class_posteriors = {{1.0 / 3, 1.0 / 3, 1.0 / 3}, {1.0 / 3, 1.0 / 3, 1.0 / 3}};
  CHECK(classification_accuracy(trace, {0, 2}, AccuracyMode::kAllIterations) == 0.5);
  CHECK(classification_accuracy(trace, {0, 0}, AccuracyMode::kFinal) == 1.0);

  CHECK_THROWS_AS(classification_accuracy(trace, {0}, AccuracyMode::kFinal), InvalidArgument);
  CHECK_THROWS_AS(classification_accuracy(sep::SeparationTrace{}, {0}, AccuracyMode::kFinal), InvalidArgument);
}

TEST_CASE("runtime report averages per method", "[eval]") {
  auto make = [](const std::string& method, std::vector<double> ms) {
    sep::SeparationTrace t;
    t.method = method;
    for (std::size_t i = 0; i < ms.size(); ++i) t.iterations.push_back({static_cast<int>(i + 1), 0.0, ms[i], {}});
    return t;
  };
  const auto rows = runtime_report({make("ilrma", {10, 20}), make("fmvae", {5}), make("ilrma", {30, 40, 50, 60})});
  REQUIRE(rows.size() == 2);
  CHECK(rows[0].method == "ilrma");
  CHECK(rows[0].runs == 2);
  CHECK(rows[0].iterations == 3.0);
  CHECK(rows[0].per_iteration_ms == Catch::Approx(35.0));
  CHECK(rows[0].total_ms == Catch::Approx(105.0));
  CHECK(rows[1].per_iteration_ms == 5.0);

  std::ostringstream csv, text;
  runtime_table(rows).write_csv(csv);
  runtime_table(rows).write_text(text);
  CHECK(csv.str() == "method,runs,iterations,runtime/iteration [s],total [s]\n"
                     "ilrma,2,3.0,0.0350,0.105\n"
                     "fmvae,1,1.0,0.0050,0.005\n");
  CHECK(text.str().find("runtime/iteration [s]") != std::string::npos);
}

TEST_CASE("score and accuracy tables follow method order", "[eval]") {
  BssScores a;
  a.sdr = Eigen::Vector2d(10.0, 12.0);
  a.sir = Eigen::Vector2d(20.0, 22.0);
  a.sar = Eigen::Vector2d(11.0, 13.0);
  a.permutation = {0, 1};
  MethodSummary ilrma{"ilrma", {a}};
  MethodSummary fmvae{"fmvae", {a, a}, 0.75, 1.0};
  std::ostringstream os;
  score_table({ilrma, fmvae}).write_csv(os);
  CHECK(os.str() == "method,scenes,SDR [dB],SIR [dB],SAR [dB]\nilrma,1,11.00,21.00,12.00\nfmvae,2,11.00,21.00,12.00\n");
  std::ostringstream acc;
  accuracy_table({ilrma, fmvae}).write_csv(acc);
  CHECK(acc.str() == "method,all iterations [%],final estimation [%]\nfmvae,75.00,100.00\n");
}
