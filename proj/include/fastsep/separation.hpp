// Copyright 2026 The fastsep Authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)

// Determined separation: demixing y(f,n) = W(f)^H x(f,n) estimated by
// iterative projection, with either a low-rank NMF variance model (ILRMA) or
// the neural source model driven by forward passes only (fMVAE).

#ifndef FASTSEP_SEPARATION_HPP_
#define FASTSEP_SEPARATION_HPP_

#include <chrono>
#include <cmath>
#include <cstdint>
#include <optional>
#include <ostream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "json.hpp"

#include "fastsep/error.hpp"
#include "fastsep/linalg.hpp"
#include "fastsep/neural.hpp"
#include "fastsep/nmf.hpp"
#include "fastsep/signal_io.hpp"

namespace fastsep::sep {

using linalg::CMat;
using linalg::CVec;

/// Multichannel STFT arranged per frequency bin: bins[f] is I x N.
struct Mixture {
  std::vector<CMat> bins;
  StftConfig stft;
  int sample_rate = 16000;
  std::size_t length = 0;  // time-domain samples

  Eigen::Index num_bins() const { return static_cast<Eigen::Index>(bins.size()); }
  Eigen::Index channels() const { return bins.empty() ? 0 : bins.front().rows(); }
  Eigen::Index frames() const { return bins.empty() ? 0 : bins.front().cols(); }
};

inline Mixture analyze(const Waveform& w, const StftConfig& cfg) {
  w.validate();
  if (w.channels.empty()) throw InvalidArgument("analyze: waveform has no channels");
  std::vector<Spectrogram> per_channel;
  for (const auto& ch : w.channels) per_channel.push_back(stft(ch, cfg, w.sample_rate));
  Mixture X;
  X.stft = cfg;
  X.sample_rate = w.sample_rate;
  X.length = w.length();
  const Eigen::Index F = per_channel.front().bins();
  const Eigen::Index N = per_channel.front().frames();
  const Eigen::Index I = static_cast<Eigen::Index>(per_channel.size());
  X.bins.assign(static_cast<std::size_t>(F), CMat(I, N));
  for (Eigen::Index i = 0; i < I; ++i)
    for (Eigen::Index f = 0; f < F; ++f) X.bins[static_cast<std::size_t>(f)].row(i) = per_channel[static_cast<std::size_t>(i)].values.row(f);
  return X;
}

/// Per-frequency demixing matrices W(f) = [w_1(f), ..., w_I(f)].
struct DemixingStack {
  std::vector<CMat> W;
  Eigen::Index reference_channel = 0;

  static DemixingStack identity(Eigen::Index bins, Eigen::Index channels) {
    DemixingStack d;
    d.W.assign(static_cast<std::size_t>(bins), CMat::Identity(channels, channels));
    return d;
  }
};

/// One F x N map per source.
using SourceMaps = std::vector<Eigen::MatrixXd>;
using SourceSpectra = std::vector<Eigen::MatrixXcd>;

inline void check_shapes(const DemixingStack& W, const Mixture& X) {
  if (W.W.size() != X.bins.size()) throw InvalidArgument("demixing stack and mixture differ in bin count");
  for (const auto& w : W.W)
    if (w.rows() != X.channels() || w.cols() != X.channels())
      throw InvalidArgument("demixing matrix is not I x I for the mixture's channel count");
}

/// y_j(f, n) for every source: F x N complex per source.
inline SourceSpectra demix(const DemixingStack& W, const Mixture& X) {
  check_shapes(W, X);
  const Eigen::Index F = X.num_bins(), N = X.frames(), I = X.channels();
  SourceSpectra Y(static_cast<std::size_t>(I), Eigen::MatrixXcd(F, N));
  for (Eigen::Index f = 0; f < F; ++f) {
    const CMat y = W.W[static_cast<std::size_t>(f)].adjoint() * X.bins[static_cast<std::size_t>(f)];
    for (Eigen::Index j = 0; j < I; ++j) Y[static_cast<std::size_t>(j)].row(f) = y.row(j);
  }
  return Y;
}

/// |y_j(f, n)|^2 for a single source.
inline Eigen::MatrixXd source_power(const DemixingStack& W, const Mixture& X, Eigen::Index j) {
  const Eigen::Index F = X.num_bins(), N = X.frames();
  Eigen::MatrixXd P(F, N);
  for (Eigen::Index f = 0; f < F; ++f) {
    const auto& Xf = X.bins[static_cast<std::size_t>(f)];
    const CVec w = W.W[static_cast<std::size_t>(f)].col(j);
    P.row(f) = (w.adjoint() * Xf).cwiseAbs2();
  }
  return P;
}

/// Negative log-likelihood of (W, v) given X, constants dropped:
///   -2N sum_f log|det W(f)| + sum_{f,n,j} (log v_j + |w_j^H x|^2 / v_j).
inline double neg_log_likelihood(const DemixingStack& W, const SourceMaps& v, const Mixture& X,
                                 double floor = linalg::kVarianceFloor) {
  check_shapes(W, X);
  const Eigen::Index F = X.num_bins(), N = X.frames(), I = X.channels();
  if (static_cast<Eigen::Index>(v.size()) != I) throw InvalidArgument("neg_log_likelihood: one variance map per source required");
  for (const auto& m : v)
    if (m.rows() != F || m.cols() != N) throw InvalidArgument("neg_log_likelihood: variance map shape mismatch");
  double logdet = 0.0, fit = 0.0;
  for (Eigen::Index f = 0; f < F; ++f) {
    const CMat& Wf = W.W[static_cast<std::size_t>(f)];
    logdet += linalg::logdet_abs(Wf);
    const Eigen::MatrixXd P = (Wf.adjoint() * X.bins[static_cast<std::size_t>(f)]).cwiseAbs2();
    for (Eigen::Index j = 0; j < I; ++j) {
      const Eigen::ArrayXd vj = v[static_cast<std::size_t>(j)].row(f).array().max(floor);
      fit += (vj.log() + P.row(j).array().transpose() / vj).sum();
    }
  }
  return -2.0 * static_cast<double>(N) * logdet + fit;
}

/// Iterative-projection update of w_j(f) for every f, given source j's variance map.
///   w_j <- (W^H Sigma_j)^{-1} e_j,  w_j <- w_j / sqrt(w_j^H Sigma_j w_j).
inline void ip_update(DemixingStack& W, const Mixture& X, const Eigen::MatrixXd& vj, Eigen::Index j,
                      double floor = linalg::kVarianceFloor) {
  check_shapes(W, X);
  if (vj.rows() != X.num_bins() || vj.cols() != X.frames()) throw InvalidArgument("ip_update: variance map shape mismatch");
  if (j < 0 || j >= X.channels()) throw InvalidArgument("ip_update: source index out of range");
  std::vector<double> weights(static_cast<std::size_t>(X.frames()));
  for (Eigen::Index f = 0; f < X.num_bins(); ++f) {
    CMat& Wf = W.W[static_cast<std::size_t>(f)];
    for (Eigen::Index n = 0; n < X.frames(); ++n) weights[static_cast<std::size_t>(n)] = vj(f, n);
    CMat sigma = linalg::weighted_cov(X.bins[static_cast<std::size_t>(f)], weights, floor).sigma;
    CVec w;
    try {
      w = linalg::solve(Wf.adjoint() * sigma, j);
    } catch (const IllConditioned&) {
      sigma = linalg::regularized(sigma);
      try {
        w = linalg::solve(Wf.adjoint() * sigma, j);
      } catch (const IllConditioned& e) {
        throw SeparationError(std::string("ip_update: ") + e.what(), static_cast<std::size_t>(f));
      }
    }
    const double q = (w.adjoint() * sigma * w)(0, 0).real();
    if (!(q > 0.0) || !std::isfinite(q))
      throw SeparationError("ip_update: non-positive quadratic form", static_cast<std::size_t>(f));
    Wf.col(j) = w / std::sqrt(q);
  }
}

/// Closed-form gain: mean over (f, n) of |y_j|^2 / sigma^2.
inline double update_gain(const Eigen::MatrixXd& power, const Eigen::MatrixXd& sigma2,
                          double floor = linalg::kVarianceFloor) {
  if (power.rows() != sigma2.rows() || power.cols() != sigma2.cols() || power.size() == 0)
    throw InvalidArgument("update_gain: shape mismatch");
  const double g = (power.array() / sigma2.array().max(floor)).mean();
  return std::max(g, floor);
}

/// Source images at the reference microphone: y_j scaled by [(W^H)^{-1}]_{ref, j}.
inline SourceSpectra back_project(const SourceSpectra& Y, const DemixingStack& W, Eigen::Index reference_channel) {
  const Eigen::Index I = static_cast<Eigen::Index>(Y.size());
  if (I == 0) throw InvalidArgument("back_project: no sources");
  if (reference_channel < 0 || reference_channel >= I) throw InvalidArgument("back_project: reference channel out of range");
  const Eigen::Index F = Y.front().rows();
  if (static_cast<Eigen::Index>(W.W.size()) != F) throw InvalidArgument("back_project: bin count mismatch");
  SourceSpectra out(Y.size(), Eigen::MatrixXcd(F, Y.front().cols()));
  for (Eigen::Index f = 0; f < F; ++f) {
    const CMat A = W.W[static_cast<std::size_t>(f)].adjoint().inverse();
    for (Eigen::Index j = 0; j < I; ++j)
      out[static_cast<std::size_t>(j)].row(f) = A(reference_channel, j) * Y[static_cast<std::size_t>(j)].row(f);
  }
  return out;
}

/// Rescales each w_j(f) so that y_j becomes source j's image at the reference
/// microphone: w_j <- conj(a_{ref,j}) w_j with A = (W^H)^{-1}. The stack still
/// demixes; only the per-frequency scale ambiguity is resolved. Columns whose
/// source does not reach the reference microphone (a = 0) are left unscaled.
inline void project_back_scale(DemixingStack& W, Eigen::Index reference_channel) {
  for (std::size_t f = 0; f < W.W.size(); ++f) {
    CMat& Wf = W.W[f];
    if (reference_channel < 0 || reference_channel >= Wf.rows())
      throw InvalidArgument("project_back_scale: reference channel out of range");
    Eigen::PartialPivLU<CMat> lu(Wf.adjoint());
    const CMat A = lu.inverse();
    if (!A.allFinite()) throw SeparationError("project_back_scale: singular demixing matrix", f);
    const double tiny = 1e-12 * A.cwiseAbs().maxCoeff();
    for (Eigen::Index j = 0; j < Wf.cols(); ++j) {
      const std::complex<double> a = A(reference_channel, j);
      if (std::abs(a) > tiny) Wf.col(j) *= std::conj(a);
    }
  }
}

/// Time-domain signals from per-source spectra.
inline Waveform synthesize(const SourceSpectra& S, const Mixture& X) {
  Waveform w;
  w.sample_rate = X.sample_rate;
  for (const auto& s : S) {
    Spectrogram spec{s, X.stft.frame_shift, X.stft.window_length, X.sample_rate};
    w.channels.push_back(istft(spec, X.length));
  }
  return w;
}

// ---------------------------------------------------------------------------
// Trace

struct IterationRecord {
  int iteration = 0;
  double nll = 0.0;
  double duration_ms = 0.0;
  std::vector<std::vector<double>> class_posteriors;  // per source; empty for ILRMA
};

struct SeparationTrace {
  std::string method;
  double initial_nll = 0.0;
  std::uint64_t seed = 0;
  std::vector<IterationRecord> iterations;

  double total_ms() const {
    double t = 0.0;
    for (const auto& r : iterations) t += r.duration_ms;
    return t;
  }
  double mean_ms() const { return iterations.empty() ? 0.0 : total_ms() / static_cast<double>(iterations.size()); }
};

struct TraceFormat {
  /// Wall-clock durations vary between runs; with this off they are written
  /// as null so that seeded runs produce byte-identical files.
  bool include_timing = true;
};

/// JSON lines: {"iteration", "nll", "duration_ms", "class_posteriors"} per iteration.
inline void write_trace_jsonl(std::ostream& os, const SeparationTrace& trace, TraceFormat fmt = {}) {
  for (const auto& r : trace.iterations) {
    nlohmann::ordered_json j;
    j["iteration"] = r.iteration;
    j["nll"] = r.nll;
    j["duration_ms"] = fmt.include_timing ? nlohmann::ordered_json(r.duration_ms) : nlohmann::ordered_json(nullptr);
    j["class_posteriors"] = r.class_posteriors;
    os << j.dump() << '\n';
  }
}

inline std::string trace_jsonl(const SeparationTrace& trace, TraceFormat fmt = {}) {
  std::ostringstream os;
  write_trace_jsonl(os, trace, fmt);
  return os.str();
}

inline SeparationTrace read_trace_jsonl(std::istream& is) {
  SeparationTrace t;
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    const auto j = nlohmann::json::parse(line);
    IterationRecord r;
    r.iteration = j.at("iteration").get<int>();
    r.nll = j.at("nll").get<double>();
    r.duration_ms = j.at("duration_ms").is_null() ? 0.0 : j.at("duration_ms").get<double>();
    r.class_posteriors = j.at("class_posteriors").get<std::vector<std::vector<double>>>();
    t.iterations.push_back(std::move(r));
  }
  return t;
}

namespace detail {

using Clock = std::chrono::steady_clock;

inline double elapsed_ms(Clock::time_point since) {
  return std::chrono::duration<double, std::milli>(Clock::now() - since).count();
}

}  // namespace detail

// ---------------------------------------------------------------------------
// ILRMA

struct IlrmaOptions {
  int iterations = 100;
  Eigen::Index rank = 2;
  std::uint64_t seed = 0;
  /// Rescale each w_j (and its NMF model) to unit output power once per
  /// iteration. Leaves the likelihood unchanged.
  bool normalize = true;
};

struct IlrmaResult {
  DemixingStack demixing;
  std::vector<model::NmfModel> models;
  SeparationTrace trace;
};

inline IlrmaResult ilrma_separate(const Mixture& X, const IlrmaOptions& opt, std::optional<DemixingStack> init = {}) {
  if (opt.iterations < 0) throw InvalidArgument("ilrma: negative iteration count");
  const Eigen::Index F = X.num_bins(), N = X.frames(), I = X.channels();
  if (I < 1 || F < 1 || N < 1) throw InvalidArgument("ilrma: empty mixture");

  IlrmaResult res;
  res.demixing = init ? std::move(*init) : DemixingStack::identity(F, I);
  check_shapes(res.demixing, X);
  std::mt19937_64 rng(opt.seed);
  for (Eigen::Index j = 0; j < I; ++j) res.models.push_back(model::NmfModel::random(F, N, opt.rank, rng));
  res.trace.method = "ilrma";
  res.trace.seed = opt.seed;

  auto variances = [&] {
    SourceMaps v;
    for (const auto& m : res.models) v.push_back(model::nmf_variance(m));
    return v;
  };
  res.trace.initial_nll = neg_log_likelihood(res.demixing, variances(), X);

  for (int it = 0; it < opt.iterations; ++it) {
    const auto start = detail::Clock::now();
    for (Eigen::Index j = 0; j < I; ++j) {
      auto& m = res.models[static_cast<std::size_t>(j)];
      model::nmf_update(m, source_power(res.demixing, X, j));
      ip_update(res.demixing, X, model::nmf_variance(m), j);
    }
    if (opt.normalize) {
      for (Eigen::Index j = 0; j < I; ++j) {
        const double lambda = std::sqrt(source_power(res.demixing, X, j).mean());
        if (!(lambda > 0.0)) continue;
        for (auto& Wf : res.demixing.W) Wf.col(j) /= lambda;
        res.models[static_cast<std::size_t>(j)].basis /= lambda * lambda;
      }
    }
    IterationRecord rec;
    rec.iteration = it + 1;
    rec.nll = neg_log_likelihood(res.demixing, variances(), X);
    rec.duration_ms = detail::elapsed_ms(start);
    res.trace.iterations.push_back(std::move(rec));
  }
  return res;
}

// ---------------------------------------------------------------------------
// fMVAE

/// Per-source neural model parameters.
struct SourceModelState {
  Eigen::MatrixXd latent;    // z_j, D_z x N_z
  Eigen::VectorXd classes;   // c_j on the simplex
  double gain = 1.0;         // g_j
  Eigen::MatrixXd variance;  // v_j = g_j * sigma^2, F x N
};

struct FmvaeOptions {
  int iterations = 40;
  /// Rescale W by projection back before every sweep so that the networks see
  /// each source with its reference-microphone spectral envelope.
  bool project_back = true;
  /// When set, must equal the bundle's class count.
  std::optional<int> num_classes;
};

struct FmvaeResult {
  DemixingStack demixing;
  std::vector<SourceModelState> states;
  SeparationTrace trace;
};

/// One source's forward-only model refresh: classifier -> encoder mean ->
/// decoder -> closed-form gain. `power` is |y_j|^2.
inline SourceModelState refresh_source_model(const model::NeuralBundle& bundle, const Eigen::MatrixXd& power) {
  SourceModelState s;
  s.classes = model::classifier_forward(bundle, power);
  s.latent = model::encoder_forward(bundle, power, s.classes).mean;
  const Eigen::MatrixXd sigma2 = model::decoder_forward(bundle, s.latent, s.classes, power.cols());
  s.gain = update_gain(power, sigma2);
  s.variance = (s.gain * sigma2).cwiseMax(linalg::kVarianceFloor);
  return s;
}

inline FmvaeResult fmvae_separate(const Mixture& X, const model::NeuralBundle& bundle, DemixingStack init,
                                  const FmvaeOptions& opt) {
  if (opt.iterations < 0) throw InvalidArgument("fmvae: negative iteration count");
  if (opt.num_classes && *opt.num_classes != bundle.num_classes)
    throw InvalidArgument("fmvae: requested " + std::to_string(*opt.num_classes) + " classes, bundle has " +
                          std::to_string(bundle.num_classes));
  if (bundle.freq_bins != X.num_bins())
    throw InvalidArgument("fmvae: bundle expects " + std::to_string(bundle.freq_bins) + " bins, mixture has " +
                          std::to_string(X.num_bins()));
  check_shapes(init, X);
  const Eigen::Index I = X.channels();

  FmvaeResult res;
  res.demixing = std::move(init);
  if (opt.project_back) project_back_scale(res.demixing, res.demixing.reference_channel);
  res.trace.method = "fmvae";
  for (Eigen::Index j = 0; j < I; ++j)
    res.states.push_back(refresh_source_model(bundle, source_power(res.demixing, X, j)));

  auto variances = [&] {
    SourceMaps v;
    for (const auto& s : res.states) v.push_back(s.variance);
    return v;
  };
  res.trace.initial_nll = neg_log_likelihood(res.demixing, variances(), X);

  for (int it = 0; it < opt.iterations; ++it) {
    const auto start = detail::Clock::now();
    if (opt.project_back && it > 0) project_back_scale(res.demixing, res.demixing.reference_channel);
    for (Eigen::Index j = 0; j < I; ++j) {
      auto& state = res.states[static_cast<std::size_t>(j)];
      state = refresh_source_model(bundle, source_power(res.demixing, X, j));
      ip_update(res.demixing, X, state.variance, j);
    }
    IterationRecord rec;
    rec.iteration = it + 1;
    rec.nll = neg_log_likelihood(res.demixing, variances(), X);
    rec.duration_ms = detail::elapsed_ms(start);
    for (const auto& s : res.states) rec.class_posteriors.emplace_back(s.classes.data(), s.classes.data() + s.classes.size());
    res.trace.iterations.push_back(std::move(rec));
  }
  return res;
}

}  // namespace fastsep::sep

#endif  // FASTSEP_SEPARATION_HPP_
