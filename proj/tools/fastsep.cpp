// Copyright 2026 The fastsep Authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)

// fastsep command-line tool: corpus and scene simulation, separation,
// evaluation and model inspection.

#include <atomic>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <mutex>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <spdlog/spdlog.h>

#include "CLI11.hpp"
#include "fastsep/evaluation.hpp"
#include "fastsep/neural.hpp"
#include "fastsep/pipeline.hpp"
#include "fastsep/room.hpp"

namespace fs = std::filesystem;
using namespace fastsep;

namespace {

struct CorpusArgs {
  std::string out;
  room::CorpusOptions opt;
};

struct SimulateArgs {
  std::string room;
  std::string out;
  pipeline::SuiteOptions suite;
};

struct StftArgs {
  double win_ms = 256.0;
  double hop_ms = 128.0;
};

struct SeparateArgs {
  std::string input;
  std::string out;
  std::string method = "ilrma";
  std::string model;
  int iterations = 0;  // 0: method default
  int init_iterations = 30;
  int rank = 2;
  std::uint64_t seed = 0;
  std::size_t reference = 0;
  bool no_timing = false;
  StftArgs stft;
};

struct EvaluateArgs {
  std::string scenes;
  std::string out;
  std::vector<std::string> methods = {"ilrma", "fmvae"};
  std::string model;
  int ilrma_iterations = 100;
  int fmvae_iterations = 40;
  int init_iterations = 30;
  int rank = 2;
  std::uint64_t seed = 0;
  std::size_t reference = 0;
  int filter_length = 512;
  unsigned jobs = 1;
  StftArgs stft;
};

struct InspectArgs {
  std::string path;
  bool json = false;
};

void add_stft_options(CLI::App* cmd, StftArgs& a) {
  cmd->add_option("--win-ms", a.win_ms, "STFT window length in milliseconds")->capture_default_str()->check(CLI::PositiveNumber);
  cmd->add_option("--hop-ms", a.hop_ms, "STFT frame shift in milliseconds")->capture_default_str()->check(CLI::PositiveNumber);
}

void configure_logging() {
  spdlog::set_pattern("[%l] %v");
  spdlog::set_level(spdlog::level::warn);
  if (const char* env = std::getenv("FASTSEP_LOG")) {
    const auto lvl = spdlog::level::from_str(env);
    // from_str maps unknown names to "off"; only accept it when asked for.
    if (lvl != spdlog::level::off || std::string(env) == "off") spdlog::set_level(lvl);
    else spdlog::warn("FASTSEP_LOG: unknown level '{}'", env);
  }
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw FormatError("cannot write " + path.string());
  out << text;
}

void write_trace(const fs::path& path, const sep::SeparationTrace& t, bool timing) {
  std::ofstream out(path);
  if (!out) throw FormatError("cannot write " + path.string());
  sep::write_trace_jsonl(out, t, {timing});
}

/// Loads a scene directory, or a bare mixture WAV.
Waveform read_mixture(const fs::path& input) {
  if (fs::is_directory(input)) return read_wav(input / "mixture.wav");
  return read_wav(input);
}

std::vector<fs::path> scene_dirs(const fs::path& root) {
  if (!fs::is_directory(root)) throw InvalidArgument("scene directory " + root.string() + " does not exist");
  std::vector<fs::path> dirs;
  for (const auto& e : fs::directory_iterator(root))
    if (e.is_directory() && fs::exists(e.path() / "scene.json")) dirs.push_back(e.path());
  std::sort(dirs.begin(), dirs.end());
  if (dirs.empty()) throw InvalidArgument("no scenes (subdirectories with scene.json) under " + root.string());
  return dirs;
}

pipeline::SeparationConfig separation_config(pipeline::Method m, int iterations, int init_iterations, int rank,
                                             std::uint64_t seed, std::size_t reference, const StftArgs& stft,
                                             int sample_rate) {
  auto cfg = pipeline::SeparationConfig::defaults(m);
  if (iterations > 0) cfg.iterations = iterations;
  cfg.init_iterations = init_iterations;
  cfg.nmf_rank = rank;
  cfg.seed = seed;
  cfg.reference_channel = reference;
  cfg.stft = StftConfig::from_ms(stft.win_ms, stft.hop_ms, sample_rate);
  return cfg;
}

// ---------------------------------------------------------------------------
// Subcommands

int cmd_make_corpus(const CorpusArgs& a) {
  const auto corpus = room::toy_corpus(a.opt);
  room::write_corpus(a.out, corpus, a.opt);
  spdlog::info("wrote {} utterances to {}", corpus.size(), a.out);
  return 0;
}

int cmd_simulate(const SimulateArgs& a) {
  const auto spec = room::load_room_spec(a.room);
  const auto scenes = pipeline::toy_suite(spec, a.suite);
  fs::create_directories(a.out);
  for (std::size_t k = 0; k < scenes.size(); ++k) {
    char name[32];
    std::snprintf(name, sizeof name, "scene_%03zu", k);
    room::write_scene(fs::path(a.out) / name, scenes[k]);
  }
  spdlog::info("wrote {} scenes to {}", scenes.size(), a.out);
  return 0;
}

int cmd_separate(const SeparateArgs& a, const std::string& resolved_config) {
  const auto method = pipeline::parse_method(a.method);
  std::optional<model::NeuralBundle> bundle;
  if (method == pipeline::Method::kFmvae) bundle = model::load_bundle(a.model);
  const Waveform mix = read_mixture(a.input);
  const auto cfg = separation_config(method, a.iterations, a.init_iterations, a.rank, a.seed, a.reference, a.stft,
                                     mix.sample_rate);
  const auto run = pipeline::separate(mix, cfg, bundle ? &*bundle : nullptr);

  const fs::path out(a.out);
  fs::create_directories(out);
  for (std::size_t j = 0; j < run.estimates.size(); ++j) {
    Waveform w;
    w.sample_rate = mix.sample_rate;
    w.channels.push_back(run.estimates[j]);
    write_wav(out / ("est" + std::to_string(j) + ".wav"), w);
  }
  write_trace(out / "trace.jsonl", run.trace, !a.no_timing);
  if (run.init_trace) write_trace(out / "init_trace.jsonl", *run.init_trace, !a.no_timing);
  write_text(out / "run.toml", resolved_config);
  spdlog::info("{}: {} iterations, final NLL {:.6g}", a.method, run.trace.iterations.size(),
               run.trace.iterations.empty() ? run.trace.initial_nll : run.trace.iterations.back().nll);
  return 0;
}

int cmd_evaluate(const EvaluateArgs& a, const std::string& resolved_config) {
  std::vector<pipeline::Method> methods;
  for (const auto& m : a.methods) methods.push_back(pipeline::parse_method(m));
  std::optional<model::NeuralBundle> bundle;
  if (std::find(methods.begin(), methods.end(), pipeline::Method::kFmvae) != methods.end()) {
    if (a.model.empty()) throw InvalidArgument("method fmvae requires --model");
    bundle = model::load_bundle(a.model);
  }
  const auto dirs = scene_dirs(a.scenes);
  const fs::path out(a.out);
  fs::create_directories(out);

  struct Cell {
    pipeline::SceneScore score;
    sep::SeparationTrace trace;
  };
  std::vector<std::vector<Cell>> cells(dirs.size(), std::vector<Cell>(methods.size()));
  std::vector<std::string> errors(dirs.size());
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t k; (k = next.fetch_add(1)) < dirs.size();) {
      try {
        const auto scene = room::read_scene(dirs[k]);
        const fs::path scene_out = out / dirs[k].filename();
        fs::create_directories(scene_out);
        for (std::size_t m = 0; m < methods.size(); ++m) {
          const int iters = methods[m] == pipeline::Method::kIlrma ? a.ilrma_iterations : a.fmvae_iterations;
          const auto cfg = separation_config(methods[m], iters, a.init_iterations, a.rank, a.seed, a.reference, a.stft,
                                             scene.mixture.sample_rate);
          const auto run = pipeline::separate(scene.mixture, cfg, bundle ? &*bundle : nullptr);
          cells[k][m] = {pipeline::score(run, scene, a.reference, {a.filter_length}), run.trace};
          write_trace(scene_out / ("trace_" + a.methods[m] + ".jsonl"), run.trace, true);
        }
      } catch (const std::exception& e) {
        errors[k] = e.what();
      }
    }
  };
  const unsigned jobs = std::max(1u, std::min<unsigned>(a.jobs, static_cast<unsigned>(dirs.size())));
  std::vector<std::thread> pool;
  for (unsigned i = 1; i < jobs; ++i) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();
  for (std::size_t k = 0; k < dirs.size(); ++k)
    if (!errors[k].empty()) throw Error(dirs[k].filename().string() + ": " + errors[k]);

  // Per-scene scores.
  std::ostringstream per_scene;
  per_scene << "scene,method,reference,estimate,sdr,sir,sar\n";
  std::vector<eval::MethodSummary> summaries;
  std::vector<sep::SeparationTrace> traces;
  for (std::size_t m = 0; m < methods.size(); ++m) {
    eval::MethodSummary s{a.methods[m], {}};
    double all = 0.0, fin = 0.0;
    bool has_acc = false;
    for (std::size_t k = 0; k < dirs.size(); ++k) {
      const auto& c = cells[k][m];
      s.scores.push_back(c.score.scores);
      traces.push_back(c.trace);
      for (Eigen::Index r = 0; r < c.score.scores.sdr.size(); ++r)
        per_scene << dirs[k].filename().string() << ',' << a.methods[m] << ',' << r << ','
                  << c.score.scores.permutation[static_cast<std::size_t>(r)] << ',' << eval::fixed(c.score.scores.sdr[r], 4)
                  << ',' << eval::fixed(c.score.scores.sir[r], 4) << ',' << eval::fixed(c.score.scores.sar[r], 4) << '\n';
      if (c.score.accuracy_all) {
        has_acc = true;
        all += *c.score.accuracy_all;
        fin += *c.score.accuracy_final;
      }
    }
    if (has_acc) {
      s.accuracy_all = all / static_cast<double>(dirs.size());
      s.accuracy_final = fin / static_cast<double>(dirs.size());
    }
    summaries.push_back(std::move(s));
  }
  write_text(out / "scores_per_scene.csv", per_scene.str());

  const std::pair<const char*, eval::Table> tables[] = {
      {"scores", eval::score_table(summaries)},
      {"runtime", eval::runtime_table(eval::runtime_report(traces))},
      {"accuracy", eval::accuracy_table(summaries)},
  };
  for (const auto& [name, table] : tables) {
    std::ofstream csv(out / (std::string(name) + ".csv"));
    table.write_csv(csv);
    std::ostringstream text;
    table.write_text(text);
    write_text(out / (std::string(name) + ".txt"), text.str());
    std::cout << text.str() << '\n';
  }
  write_text(out / "run.toml", resolved_config);
  return 0;
}

int cmd_inspect_model(const InspectArgs& a) {
  const auto b = model::load_bundle(a.path);
  const auto m = model::bundle_manifest(b);
  if (a.json) {
    std::cout << m.dump(2) << '\n';
    return 0;
  }
  std::size_t params = 0;
  for (const auto& t : m["tensors"]) params += model::detail::numel(t["shape"].get<std::vector<int>>());
  std::cout << "format: FMVAE01 v" << m["version"].get<int>() << '\n'
            << "classes: " << b.num_classes << '\n'
            << "latent channels: " << b.latent_channels << '\n'
            << "frequency bins: " << b.freq_bins << '\n'
            << "parameters: " << params << '\n';
  for (const char* net : {"encoder", "decoder", "classifier"}) {
    std::cout << net << " (in " << m[net]["in_channels"].get<int>() << "):\n";
    for (const auto& l : m[net]["layers"]) {
      std::cout << "  " << l["kind"].get<std::string>();
      if (l.contains("in_channels"))
        std::cout << ' ' << l["in_channels"].get<int>() << " -> " << l["out_channels"].get<int>() << " k"
                  << l["kernel"].get<int>() << " s" << l["stride"].get<int>() << " p" << l["padding"].get<int>()
                  << (l.value("concat_class", false) ? " +class" : "");
      else if (l.contains("channels"))
        std::cout << ' ' << l["channels"].get<int>();
      std::cout << '\n';
    }
  }
  if (!b.metadata.empty()) std::cout << "metadata: " << b.metadata.dump() << '\n';
  return 0;
}

std::string error_kind(const std::exception& e) {
  if (dynamic_cast<const InvalidArgument*>(&e)) return "invalid-argument";
  if (dynamic_cast<const FormatError*>(&e)) return "format";
  if (dynamic_cast<const SeparationError*>(&e)) return "separation";
  if (dynamic_cast<const IllConditioned*>(&e)) return "ill-conditioned";
  return "runtime";
}

}  // namespace

int main(int argc, char** argv) {
  configure_logging();

  CLI::App app{"fastsep: determined multichannel source separation (ILRMA, fMVAE)"};
  app.set_config("--config", "", "TOML configuration file; command-line flags take precedence");
  app.allow_config_extras(false);
  app.require_subcommand(1);

  CorpusArgs corpus;
  auto* c_corpus = app.add_subcommand("make-corpus", "Write a labelled toy corpus (WAVs and corpus.json)")->configurable();
  c_corpus->add_option("--out", corpus.out, "Output directory")->required();
  c_corpus->add_option("--classes", corpus.opt.classes, "Number of classes")->capture_default_str()->check(CLI::PositiveNumber);
  c_corpus->add_option("--per-class", corpus.opt.utterances_per_class, "Utterances per class")->capture_default_str()->check(CLI::PositiveNumber);
  c_corpus->add_option("--duration", corpus.opt.duration, "Utterance length in seconds")->capture_default_str();
  c_corpus->add_option("--sample-rate", corpus.opt.sample_rate, "Sample rate in Hz")->capture_default_str()->check(CLI::PositiveNumber);
  c_corpus->add_option("--seed", corpus.opt.seed, "Random seed")->capture_default_str();

  SimulateArgs sim;
  auto* c_sim = app.add_subcommand("simulate", "Simulate seeded two-source reverberant scenes")->configurable();
  c_sim->add_option("--room", sim.room, "Room description (TOML)")->required()->check(CLI::ExistingFile);
  c_sim->add_option("--out", sim.out, "Output directory (one subdirectory per scene)")->required();
  c_sim->add_option("--scenes", sim.suite.scenes, "Number of scenes")->capture_default_str()->check(CLI::PositiveNumber);
  c_sim->add_option("--classes", sim.suite.classes, "Number of toy classes")->capture_default_str()->check(CLI::PositiveNumber);
  c_sim->add_option("--per-class", sim.suite.utterances_per_class, "Utterances per class in the source pool")->capture_default_str()->check(CLI::PositiveNumber);
  c_sim->add_option("--duration", sim.suite.duration, "Scene length in seconds")->capture_default_str();
  c_sim->add_option("--seed", sim.suite.seed, "Random seed")->capture_default_str();

  SeparateArgs sepa;
  auto* c_sep = app.add_subcommand("separate", "Separate one mixture")->configurable();
  c_sep->add_option("--input", sepa.input, "Scene directory or mixture WAV")->required()->check(CLI::ExistingPath);
  c_sep->add_option("--out", sepa.out, "Output directory")->required();
  c_sep->add_option("--method", sepa.method, "ilrma or fmvae")->capture_default_str()->check(CLI::IsMember({"ilrma", "fmvae"}));
  c_sep->add_option("--model", sepa.model, "FMVAE01 weight file (required for fmvae)")->check(CLI::ExistingFile);
  c_sep->add_option("--iterations", sepa.iterations, "Main-loop iterations (0: 100 for ilrma, 40 for fmvae)")->capture_default_str()->check(CLI::NonNegativeNumber);
  c_sep->add_option("--init-iterations", sepa.init_iterations, "ILRMA iterations before fmvae")->capture_default_str()->check(CLI::NonNegativeNumber);
  c_sep->add_option("--rank", sepa.rank, "NMF bases per source")->capture_default_str()->check(CLI::PositiveNumber);
  c_sep->add_option("--seed", sepa.seed, "Random seed")->capture_default_str();
  c_sep->add_option("--reference", sepa.reference, "Reference microphone for back-projection")->capture_default_str();
  c_sep->add_flag("--no-timing", sepa.no_timing, "Write null durations so that traces are reproducible byte for byte");
  add_stft_options(c_sep, sepa.stft);

  EvaluateArgs ev;
  auto* c_eval = app.add_subcommand("evaluate", "Separate and score every scene in a directory")->configurable();
  c_eval->add_option("--scenes", ev.scenes, "Directory of scene subdirectories")->required()->check(CLI::ExistingDirectory);
  c_eval->add_option("--out", ev.out, "Output directory for tables and traces")->required();
  c_eval->add_option("--methods", ev.methods, "Comma-separated methods")->delimiter(',')->capture_default_str()->check(CLI::IsMember({"ilrma", "fmvae"}));
  c_eval->add_option("--model", ev.model, "FMVAE01 weight file")->check(CLI::ExistingFile);
  c_eval->add_option("--ilrma-iterations", ev.ilrma_iterations, "ILRMA iterations")->capture_default_str()->check(CLI::PositiveNumber);
  c_eval->add_option("--fmvae-iterations", ev.fmvae_iterations, "fMVAE iterations")->capture_default_str()->check(CLI::PositiveNumber);
  c_eval->add_option("--init-iterations", ev.init_iterations, "ILRMA iterations before fmvae")->capture_default_str()->check(CLI::NonNegativeNumber);
  c_eval->add_option("--rank", ev.rank, "NMF bases per source")->capture_default_str()->check(CLI::PositiveNumber);
  c_eval->add_option("--seed", ev.seed, "Random seed")->capture_default_str();
  c_eval->add_option("--reference", ev.reference, "Reference microphone")->capture_default_str();
  c_eval->add_option("--filter-length", ev.filter_length, "Allowed distortion filter taps")->capture_default_str()->check(CLI::PositiveNumber);
  c_eval->add_option("--jobs", ev.jobs, "Scenes processed in parallel")->capture_default_str()->check(CLI::PositiveNumber);
  add_stft_options(c_eval, ev.stft);

  InspectArgs insp;
  auto* c_insp = app.add_subcommand("inspect-model", "Print the architecture of an FMVAE01 weight file")->configurable();
  c_insp->add_option("path", insp.path, "Weight file")->required()->check(CLI::ExistingFile);
  c_insp->add_flag("--json", insp.json, "Dump the full manifest as JSON");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  if (c_sep->parsed() && sepa.method == "fmvae" && sepa.model.empty()) {
    std::cerr << "usage error: separate --method fmvae requires --model <weights.fmvae>\n";
    return 2;
  }

  try {
    // Fully resolved settings of the chosen subcommand; `fastsep --config run.toml` replays the run.
    auto resolved_for = [](const CLI::App* sub) {
      std::istringstream in(sub->config_to_str(true, false));
      std::string text = "[" + sub->get_name() + "]\n", line;
      while (std::getline(in, line))
        if (line.find("=\"\"") == std::string::npos) text += line + '\n';  // unset paths
      return text;
    };
    if (c_corpus->parsed()) return cmd_make_corpus(corpus);
    if (c_sim->parsed()) return cmd_simulate(sim);
    if (c_sep->parsed()) return cmd_separate(sepa, resolved_for(c_sep));
    if (c_eval->parsed()) return cmd_evaluate(ev, resolved_for(c_eval));
    if (c_insp->parsed()) return cmd_inspect_model(insp);
  } catch (const std::exception& e) {
    std::cerr << "error: " << error_kind(e) << ": " << e.what() << '\n';
    return 1;
  }
  return 0;
}
