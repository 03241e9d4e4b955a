// Copyright 2026 The fastsep Authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)

// End-to-end separation and scoring of one mixture, shared by the command-line
// tool and the acceptance suite.

#ifndef FASTSEP_PIPELINE_HPP_
#define FASTSEP_PIPELINE_HPP_

#include <optional>
#include <string>
#include <vector>

#include "fastsep/evaluation.hpp"
#include "fastsep/neural.hpp"
#include "fastsep/room.hpp"
#include "fastsep/separation.hpp"
#include "fastsep/signal_io.hpp"

namespace fastsep::pipeline {

enum class Method { kIlrma, kFmvae };

inline Method parse_method(const std::string& s) {
  if (s == "ilrma") return Method::kIlrma;
  if (s == "fmvae") return Method::kFmvae;
  throw InvalidArgument("unknown method '" + s + "' (expected ilrma or fmvae)");
}

inline std::string method_name(Method m) { return m == Method::kIlrma ? "ilrma" : "fmvae"; }

struct SeparationConfig {
  Method method = Method::kIlrma;
  /// Main-loop iterations; ILRMA 100 standalone, fMVAE 40.
  int iterations = 100;
  /// ILRMA iterations used to initialise fMVAE.
  int init_iterations = 30;
  Eigen::Index nmf_rank = 2;
  StftConfig stft;
  std::uint64_t seed = 0;
  std::size_t reference_channel = 0;

  static SeparationConfig defaults(Method m) {
    SeparationConfig c;
    c.method = m;
    c.iterations = m == Method::kIlrma ? 100 : 40;
    return c;
  }
};

struct SeparationRun {
  std::vector<Channel> estimates;  // per source, at the reference microphone
  sep::DemixingStack demixing;
  sep::SeparationTrace trace;
  std::optional<sep::SeparationTrace> init_trace;  // ILRMA stage of fMVAE
};

inline SeparationRun separate(const Waveform& mixture, const SeparationConfig& cfg,
                              const model::NeuralBundle* bundle = nullptr) {
  mixture.validate();
  if (cfg.reference_channel >= mixture.num_channels())
    throw InvalidArgument("reference channel " + std::to_string(cfg.reference_channel) + " out of range");
  if (cfg.method == Method::kFmvae && bundle == nullptr) throw InvalidArgument("fmvae needs a model bundle");
  const sep::Mixture X = sep::analyze(mixture, cfg.stft);

  SeparationRun run;
  sep::IlrmaOptions io;
  io.rank = cfg.nmf_rank;
  io.seed = cfg.seed;
  if (cfg.method == Method::kIlrma) {
    io.iterations = cfg.iterations;
    auto r = sep::ilrma_separate(X, io);
    run.demixing = std::move(r.demixing);
    run.trace = std::move(r.trace);
  } else {
    io.iterations = cfg.init_iterations;
    auto init = sep::ilrma_separate(X, io);
    run.init_trace = std::move(init.trace);
    sep::FmvaeOptions fo;
    fo.iterations = cfg.iterations;
    auto r = sep::fmvae_separate(X, *bundle, std::move(init.demixing), fo);
    run.demixing = std::move(r.demixing);
    run.trace = std::move(r.trace);
    run.trace.seed = cfg.seed;
  }
  const auto Y = sep::back_project(sep::demix(run.demixing, X), run.demixing,
                                   static_cast<Eigen::Index>(cfg.reference_channel));
  run.estimates = sep::synthesize(Y, X).channels;
  return run;
}

struct SceneScore {
  eval::BssScores scores;
  std::optional<double> accuracy_all, accuracy_final;
};

/// Scores a run against the scene's source images at the reference microphone.
inline SceneScore score(const SeparationRun& run, const room::Scene& scene, std::size_t reference_channel = 0,
                        const eval::BssEvalOptions& opt = {}) {
  std::vector<Channel> refs;
  for (const auto& img : scene.source_images) {
    if (reference_channel >= img.num_channels()) throw InvalidArgument("scene: reference channel out of range");
    refs.push_back(img.channels[reference_channel]);
  }
  SceneScore s;
  s.scores = eval::bss_eval(run.estimates, refs, opt);
  const bool has_posteriors = !run.trace.iterations.empty() && !run.trace.iterations.front().class_posteriors.empty();
  if (has_posteriors) {
    s.accuracy_all = eval::classification_accuracy(run.trace, scene.labels, s.scores.permutation,
                                                   eval::AccuracyMode::kAllIterations);
    s.accuracy_final =
        eval::classification_accuracy(run.trace, scene.labels, s.scores.permutation, eval::AccuracyMode::kFinal);
  }
  return s;
}

// ---------------------------------------------------------------------------
// Seeded toy test suite

struct SuiteOptions {
  int scenes = 10;
  int classes = 4;
  int utterances_per_class = 5;
  double duration = 4.0;
  std::uint64_t seed = 1000;
};

/// Scenes built from a corpus drawn with `seed`; scene k is seeded seed + k.
inline std::vector<room::Scene> toy_suite(const room::RoomSpec& spec, const SuiteOptions& opt) {
  room::CorpusOptions co;
  co.classes = opt.classes;
  co.utterances_per_class = opt.utterances_per_class;
  co.duration = opt.duration;
  co.sample_rate = spec.sample_rate;
  co.seed = opt.seed;
  const auto corpus = room::toy_corpus(co);
  const auto pairs = room::draw_pairs(corpus, opt.scenes, opt.seed + 1);
  std::vector<room::Scene> out;
  for (int k = 0; k < opt.scenes; ++k)
    out.push_back(room::make_scene(spec, pairs[static_cast<std::size_t>(k)], opt.seed + static_cast<std::uint64_t>(k)));
  return out;
}

}  // namespace fastsep::pipeline

#endif  // FASTSEP_PIPELINE_HPP_
