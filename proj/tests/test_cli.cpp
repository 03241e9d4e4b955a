// Copyright 2026 The fastsep Authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)

#include <catch_amalgamated.hpp>

#include <sys/wait.h>
#include <unistd.h>

#include <algorithm>
#include <array>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>

#include "json.hpp"

namespace fs = std::filesystem;

namespace {

const std::string kCli = FASTSEP_CLI;
const std::string kRoom = std::string(FASTSEP_CONFIG_DIR) + "/room_rt78.toml";
const std::string kModel = std::string(FASTSEP_FIXTURES) + "/toy_bundle.fmvae";

struct Result {
  int status = -1;
  std::string output;  // stdout and stderr
};

Result run(const std::string& args) {
  Result r;
  FILE* p = ::popen((kCli + " " + args + " 2>&1").c_str(), "r");
  REQUIRE(p != nullptr);
  std::array<char, 4096> buf{};
  while (std::fgets(buf.data(), static_cast<int>(buf.size()), p) != nullptr) r.output += buf.data();
  const int raw = ::pclose(p);
  r.status = WIFEXITED(raw) ? WEXITSTATUS(raw) : -1;
  return r;
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  REQUIRE(is);
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

// Scratch directory removed at scope exit.
struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& tag) : path(fs::temp_directory_path() / ("fastsep_cli_" + tag + "_" + std::to_string(::getpid()))) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
  std::string operator/(const std::string& s) const { return (path / s).string(); }
};

// Reads the mean SDR column of a score table, keyed by method.
std::map<std::string, double> mean_sdr(const fs::path& csv) {
  std::istringstream in(slurp(csv));
  std::string line;
  std::getline(in, line);
  REQUIRE(line == "method,scenes,SDR [dB],SIR [dB],SAR [dB]");
  std::map<std::string, double> out;
  while (std::getline(in, line)) {
    std::istringstream row(line);
    std::string method, scenes, sdr;
    std::getline(row, method, ',');
    std::getline(row, scenes, ',');
    std::getline(row, sdr, ',');
    out[method] = std::stod(sdr);
  }
  return out;
}

}  // namespace

TEST_CASE("fmvae without a model is a usage error", "[cli]") {
  TempDir tmp("usage");
  REQUIRE(run("simulate --room " + kRoom + " --out " + (tmp / "sc") + " --scenes 1 --per-class 1").status == 0);
  const auto r = run("separate --input " + (tmp / "sc/scene_000") + " --out " + (tmp / "o") + " --method fmvae");
  CHECK(r.status == 2);
  CHECK(r.output.find("--model") != std::string::npos);
  CHECK_FALSE(fs::exists(tmp / "o/trace.jsonl"));
}

TEST_CASE("bad inputs exit nonzero with a message", "[cli]") {
  TempDir tmp("bad");
  CHECK(run("").status != 0);
  CHECK(run("separate --input /nonexistent --out x").status != 0);
  {
    std::ofstream(tmp / "bad.toml") << "[separate]\nbogus=1\n";
    const auto r = run("--config " + (tmp / "bad.toml") + " separate --input " + tmp.path.string() + " --out x");
    CHECK(r.status != 0);
    CHECK(r.output.find("bogus") != std::string::npos);
  }
  {
    std::ofstream(tmp / "room.toml") << "room_dims = [5.0, 4.0, 3.0]\nmic_positions = [2.4, 2.0, 1.2, 2.6, 2.0, 1.2]\n"
                                   "source_positions = [1.5, 3.0, 1.2, 3.5, 3.0, 1.2]\nrt60 = 0.1\nwalls = 3\n";
    const auto r = run("simulate --room " + (tmp / "room.toml") + " --out " + (tmp / "sc"));
    CHECK(r.status == 1);
    CHECK(r.output.find("walls") != std::string::npos);
  }
  {
    std::ofstream(tmp / "junk.fmvae") << "not a weight file";
    const auto r = run("inspect-model " + (tmp / "junk.fmvae"));
    CHECK(r.status == 1);
    CHECK(r.output.find("error: format:") != std::string::npos);
  }
}

TEST_CASE("seeded runs write byte-identical traces", "[cli]") {
  TempDir tmp("determinism");
  REQUIRE(run("simulate --room " + kRoom + " --out " + (tmp / "sc") + " --scenes 1 --per-class 2 --seed 5").status == 0);
  for (const std::string method : {"ilrma", "fmvae"}) {
    const std::string common = "separate --input " + (tmp / "sc/scene_000") + " --method " + method + " --model " + kModel +
                               " --iterations 4 --init-iterations 3 --seed 9 --no-timing --out ";
    REQUIRE(run(common + (tmp / method + "_a")).status == 0);
    REQUIRE(run(common + (tmp / method + "_b")).status == 0);
    const std::string a = slurp(tmp / method + "_a/trace.jsonl");
    CHECK(std::count(a.begin(), a.end(), '\n') == 4);
    CHECK(a == slurp(tmp / method + "_b/trace.jsonl"));
    CHECK(slurp(tmp / method + "_a/est0.wav") == slurp(tmp / method + "_b/est0.wav"));
  }
  CHECK(fs::exists(tmp / "fmvae_a/init_trace.jsonl"));
  CHECK_FALSE(fs::exists(tmp / "ilrma_a/init_trace.jsonl"));
}

TEST_CASE("the resolved config replays a run exactly", "[cli]") {
  TempDir tmp("replay");
  REQUIRE(run("simulate --room " + kRoom + " --out " + (tmp / "sc") + " --scenes 1 --per-class 2 --seed 6").status == 0);
  REQUIRE(run("separate --input " + (tmp / "sc/scene_000") + " --out " + (tmp / "run") +
              " --method fmvae --model " + kModel + " --iterations 3 --init-iterations 2 --seed 4 --no-timing")
              .status == 0);
  const std::string config = slurp(tmp / "run/run.toml");
  CHECK(config.rfind("[separate]\n", 0) == 0);
  CHECK(config.find("seed=4") != std::string::npos);
  const std::string trace = slurp(tmp / "run/trace.jsonl");
  const std::string est = slurp(tmp / "run/est1.wav");
  fs::copy_file(tmp / "run/run.toml", tmp / "saved.toml");
  fs::remove_all(tmp / "run");
  REQUIRE(run("--config " + (tmp / "saved.toml")).status == 0);
  CHECK(slurp(tmp / "run/trace.jsonl") == trace);
  CHECK(slurp(tmp / "run/est1.wav") == est);
  CHECK(slurp(tmp / "run/run.toml") == config);

  // Flags override the file.
  REQUIRE(run("--config " + (tmp / "saved.toml") + " separate --iterations 2 --out " + (tmp / "over")).status == 0);
  const std::string over = slurp(tmp / "over/trace.jsonl");
  CHECK(std::count(over.begin(), over.end(), '\n') == 2);
}

TEST_CASE("inspect-model reports the architecture", "[cli]") {
  const auto text = run("inspect-model " + kModel);
  REQUIRE(text.status == 0);
  CHECK(text.output.find("classes: 4") != std::string::npos);
  CHECK(text.output.find("frequency bins: 2049") != std::string::npos);
  CHECK(text.output.find("decoder") != std::string::npos);
  const auto json = run("inspect-model --json " + kModel);
  REQUIRE(json.status == 0);
  const auto m = nlohmann::json::parse(json.output);
  CHECK(m.at("format") == "FMVAE01");
  CHECK(m.at("num_classes") == 4);
  CHECK(m.at("encoder").at("layers").size() == 8);
}

TEST_CASE("evaluate over ten seeded scenes ranks fmvae above ilrma", "[cli]") {
  TempDir tmp("evaluate");
  REQUIRE(run("simulate --room " + kRoom + " --out " + (tmp / "sc") + " --scenes 10").status == 0);
  const auto r = run("evaluate --scenes " + (tmp / "sc") + " --out " + (tmp / "ev") + " --methods ilrma,fmvae --model " +
                     kModel + " --jobs 2");
  REQUIRE(r.status == 0);
  CHECK(r.output.find("SDR [dB]") != std::string::npos);
  const auto sdr = mean_sdr(tmp / "ev/scores.csv");
  REQUIRE(sdr.count("ilrma") == 1);
  REQUIRE(sdr.count("fmvae") == 1);
  CHECK(sdr.at("fmvae") > sdr.at("ilrma"));
  for (const char* f : {"scores.txt", "runtime.csv", "runtime.txt", "accuracy.csv", "accuracy.txt", "scores_per_scene.csv",
                        "run.toml", "scene_000/trace_fmvae.jsonl", "scene_009/trace_ilrma.jsonl"})
    CHECK(fs::exists(tmp.path / "ev" / f));
  const std::string acc = slurp(tmp / "ev/accuracy.csv");
  CHECK(acc.rfind("method,all iterations [%],final estimation [%]\nfmvae,", 0) == 0);
}
