// Copyright 2026 The fastsep Authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)

#include <catch_amalgamated.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>

#include "fastsep/room.hpp"

using namespace fastsep;
using namespace fastsep::room;

namespace {

constexpr int kFs = 16000;

// A large anechoic room: every wall absorbs everything.
RoomSpec anechoic(double distance) {
  RoomSpec s;
  s.dimensions = {20.0, 20.0, 20.0};
  s.mic_positions = {{10.0, 10.0, 10.0}};
  s.source_positions = {{10.0 + distance, 10.0, 10.0}};
  s.absorption.fill(1.0);
  s.target_rt60 = 0.05;
  s.sample_rate = kFs;
  s.max_image_order = 3;
  return s;
}

double delay_distance(int samples) { return samples * kSpeedOfSound / kFs; }

RoomSpec reverberant() {
  return load_room_spec(std::filesystem::path(FASTSEP_CONFIG_DIR) / "room_rt78.toml");
}

}  // namespace

TEST_CASE("direct path lands at the propagation delay with spherical spreading", "[room]") {
  for (int k : {50, 100}) {
    const double d = delay_distance(k);
    const auto h = image_method_rir(anechoic(d), 0, 0);
    const double expected = 1.0 / (4.0 * std::numbers::pi * d);
    CHECK(std::abs(h[k] - expected) < 1e-6 * expected);
    double off_peak = 0.0;
    for (std::size_t i = 0; i < h.size(); ++i)
      if (static_cast<int>(i) != k) off_peak = std::max(off_peak, std::abs(h[i]));
    CHECK(off_peak < 1e-6 * expected);
  }
}

TEST_CASE("direct-path amplitude follows the inverse distance law", "[room]") {
  const auto near = image_method_rir(anechoic(delay_distance(40)), 0, 0);
  const auto far = image_method_rir(anechoic(delay_distance(120)), 0, 0);
  CHECK(near[40] / far[120] == Catch::Approx(3.0).epsilon(1e-9));
}

TEST_CASE("fractional delays keep their energy centred", "[room]") {
  const double d = delay_distance(60) + 0.5 * kSpeedOfSound / kFs;
  const auto h = image_method_rir(anechoic(d), 0, 0);
  CHECK(h[60] == Catch::Approx(h[61]).epsilon(1e-9));
  CHECK(h[60] > 0.0);
}

TEST_CASE("schroeder_rt60 recovers an exponential decay", "[room]") {
  for (double t60 : {0.05, 0.078, 0.3}) {
    std::vector<double> h(static_cast<std::size_t>(3.0 * t60 * kFs));
    for (std::size_t i = 0; i < h.size(); ++i)
      h[i] = std::pow(10.0, -3.0 * static_cast<double>(i) / (kFs * t60));
    CHECK(schroeder_rt60(h, kFs) == Catch::Approx(t60).epsilon(1e-2));
  }
  CHECK_THROWS_AS(schroeder_rt60(std::vector<double>(10, 0.0), kFs), InvalidArgument);
}

TEST_CASE("simulated room reaches its target reverberation time", "[room]") {
  const RoomSpec spec = reverberant();
  CHECK(spec.target_rt60 == 0.078);
  CHECK(spec.rir_length() == static_cast<std::size_t>(std::ceil(1.5 * 0.078 * kFs)));
  for (std::size_t s = 0; s < 2; ++s)
    for (std::size_t m = 0; m < 2; ++m) {
      const auto h = image_method_rir(spec, s, m);
      const double rt = schroeder_rt60(h, kFs);
      INFO("source " << s << " mic " << m << " rt60 " << rt);
      CHECK(rt > 0.7 * spec.target_rt60);
      CHECK(rt < 1.3 * spec.target_rt60);
    }
}

TEST_CASE("mixture is the sum of the source images", "[room]") {
  const RoomSpec spec = reverberant();
  CorpusOptions opt;
  opt.classes = 2;
  opt.utterances_per_class = 1;
  opt.duration = 1.0;
  const auto corpus = toy_corpus(opt);
  const Scene scene = make_scene(spec, corpus, 1);
  REQUIRE(scene.mixture.num_channels() == 2);
  REQUIRE(scene.mixture.length() == corpus[0].samples.size());
  double err = 0.0;
  for (std::size_t m = 0; m < 2; ++m)
    for (std::size_t t = 0; t < scene.mixture.length(); ++t)
      err = std::max(err, std::abs(scene.mixture.channels[m][t] - scene.source_images[0].channels[m][t] -
                                   scene.source_images[1].channels[m][t]));
  CHECK(err < 1e-12);
}

TEST_CASE("convolution matches a direct sum", "[room]") {
  std::vector<double> x = {1.0, -2.0, 0.5, 3.0, 0.0, 1.5, -1.0};
  std::vector<double> h = {0.5, 0.25, -0.125};
  const auto y = convolve(x, h);
  REQUIRE(y.size() == x.size());
  for (std::size_t n = 0; n < x.size(); ++n) {
    double acc = 0.0;
    for (std::size_t k = 0; k < h.size() && k <= n; ++k) acc += h[k] * x[n - k];
    CHECK(std::abs(y[n] - acc) < 1e-12);
  }
}

TEST_CASE("scene generation is deterministic", "[room]") {
  CorpusOptions opt;
  opt.classes = 3;
  opt.utterances_per_class = 2;
  opt.duration = 0.5;
  opt.seed = 9;
  const auto a = toy_corpus(opt);
  const auto b = toy_corpus(opt);
  REQUIRE(a.size() == 6);
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].samples == b[i].samples);
    CHECK(a[i].label == static_cast<int>(i / 2));
  }
  const auto pa = draw_pairs(a, 4, 3);
  const auto pb = draw_pairs(b, 4, 3);
  for (std::size_t i = 0; i < pa.size(); ++i) {
    CHECK(pa[i][0].label != pa[i][1].label);
    CHECK(pa[i][0].samples == pb[i][0].samples);
  }
  const RoomSpec spec = reverberant();
  CHECK(make_scene(spec, pa[0], 1).mixture.channels == make_scene(spec, pb[0], 1).mixture.channels);
}

TEST_CASE("scene directories round trip", "[room]") {
  CorpusOptions opt;
  opt.classes = 2;
  opt.utterances_per_class = 1;
  opt.duration = 0.5;
  const Scene scene = make_scene(reverberant(), toy_corpus(opt), 4);
  const auto dir = std::filesystem::temp_directory_path() / "fastsep_test_scene";
  std::filesystem::remove_all(dir);
  write_scene(dir, scene);
  for (const char* f : {"mixture.wav", "src0_img.wav", "src1_img.wav", "scene.json"})
    CHECK(std::filesystem::exists(dir / f));
  const Scene back = read_scene(dir);
  CHECK(back.labels == scene.labels);
  CHECK(back.spec.dimensions == scene.spec.dimensions);
  CHECK(back.spec.absorption == scene.spec.absorption);
  CHECK(back.mixture.length() == scene.mixture.length());
  CHECK(static_cast<float>(back.source_images[1].channels[0][100]) ==
        static_cast<float>(scene.source_images[1].channels[0][100]));
}

TEST_CASE("room files reject unknown keys and bad geometry", "[room]") {
  const auto path = std::filesystem::temp_directory_path() / "fastsep_test_room.toml";
  auto write = [&](const std::string& text) { std::ofstream(path) << text; };
  write("room_dims = [5, 4, 3]\nmic_positions = [1, 1, 1]\nsource_positions = [2, 2, 2]\nrt60 = 0.2\nwalls = 3\n");
  CHECK_THROWS_WITH(load_room_spec(path), Catch::Matchers::ContainsSubstring("walls"));
  write("room_dims = [5, 4, 3]\nmic_positions = [1, 1, 1]\nsource_positions = [6, 2, 2]\nrt60 = 0.2\n");
  CHECK_THROWS_AS(load_room_spec(path), InvalidArgument);
  write("room_dims = [5, 4]\nrt60 = 0.2\n");
  CHECK_THROWS_AS(load_room_spec(path), FormatError);
  CHECK_THROWS_AS(load_room_spec(path.string() + ".missing"), FormatError);
}

TEST_CASE("uniform absorption inverts the Eyring relation", "[room]") {
  const Point dims = {5.0, 4.0, 3.0};
  for (double rt : {0.078, 0.3, 0.6}) {
    const double a = uniform_absorption(dims, rt);
    const double V = 60.0, S = 94.0;
    CHECK(0.161 * V / (-S * std::log(1.0 - a)) == Catch::Approx(rt).epsilon(1e-12));
  }
}
