// Copyright 2026 The fastsep Authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)

// Separation quality (SDR/SIR/SAR with a time-invariant distortion filter),
// classification tallies, runtime statistics and report tables.

#ifndef FASTSEP_EVALUATION_HPP_
#define FASTSEP_EVALUATION_HPP_

#include <algorithm>
#include <cmath>
#include <complex>
#include <iomanip>
#include <numeric>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <unsupported/Eigen/FFT>

#include "fastsep/error.hpp"
#include "fastsep/separation.hpp"
#include "fastsep/signal_io.hpp"

namespace fastsep::eval {

inline constexpr double kScoreCapDb = 100.0;
inline constexpr double kDegenerateCorrelation = 0.99;

struct BssEvalOptions {
  int filter_length = 512;
};

/// Scores indexed by reference; permutation[k] is the estimate matched to reference k.
struct BssScores {
  Eigen::VectorXd sdr, sir, sar;
  std::vector<int> permutation;
};

namespace detail {

using Spectrum = std::vector<std::complex<double>>;

inline double ratio_db(double num, double den) {
  if (den <= 0.0) return num > 0.0 ? kScoreCapDb : -kScoreCapDb;
  if (num <= 0.0) return -kScoreCapDb;
  return std::clamp(10.0 * std::log10(num / den), -kScoreCapDb, kScoreCapDb);
}

inline double energy(const std::vector<double>& x) {
  return std::inner_product(x.begin(), x.end(), x.begin(), 0.0);
}

/// Circular cross-correlation r[t] = sum_n a[n + t] b[n] from spectra.
inline std::vector<double> xcorr(Eigen::FFT<double>& fft, const Spectrum& a, const Spectrum& b) {
  Spectrum p(a.size());
  for (std::size_t k = 0; k < a.size(); ++k) p[k] = a[k] * std::conj(b[k]);
  std::vector<double> r;
  fft.inv(r, p);
  return r;
}


/// Least-squares projection of one estimate onto the span of delayed copies
/// (0..L-1 samples) of a set of references.
class Projector {
 public:
  Projector(const std::vector<std::vector<double>>& refs, int L) : L_(L), n_(refs.front().size()) {
    nfft_ = 1;
    while (nfft_ < n_ + static_cast<std::size_t>(L) - 1) nfft_ <<= 1;
    for (const auto& r : refs) spectra_.push_back(spectrum(r));
    const auto S = static_cast<Eigen::Index>(refs.size());
    gram_.resize(S * L, S * L);
    for (Eigen::Index i = 0; i < S; ++i)
      for (Eigen::Index j = i; j < S; ++j) {
        // <s_i(. - a), s_j(. - b)> = r_ij[b - a] with r_ij[t] = sum s_i[n + t] s_j[n].
        const auto r = xcorr(fft_, spectra_[i], spectra_[j]);
        for (int a = 0; a < L; ++a)
          for (int b = 0; b < L; ++b) {
            const long lag = static_cast<long>(b) - a;
            const double g = r[static_cast<std::size_t>((lag + static_cast<long>(nfft_)) % static_cast<long>(nfft_))];
            gram_(i * L + a, j * L + b) = g;
            gram_(j * L + b, i * L + a) = g;
          }
      }
    solver_.compute(gram_);
  }

  std::size_t fft_length() const { return nfft_; }

  Spectrum spectrum(const std::vector<double>& x) {
    std::vector<double> padded(nfft_, 0.0);
    std::copy(x.begin(), x.end(), padded.begin());
    Spectrum s;
    fft_.fwd(s, padded);
    return s;
  }

  /// Projection of the estimate with spectrum `est`, length n + L - 1.
  std::vector<double> project(const Spectrum& est) {
    const auto S = static_cast<Eigen::Index>(spectra_.size());
    Eigen::VectorXd d(S * L_);
    for (Eigen::Index i = 0; i < S; ++i) {
      // <s_i(. - t), e> for t = 0..L-1
      const auto r = xcorr(fft_, est, spectra_[i]);
      for (int t = 0; t < L_; ++t) d[i * L_ + t] = r[static_cast<std::size_t>(t)];
    }
    const Eigen::VectorXd c = solver_.solve(d);
    Spectrum acc(nfft_, {0.0, 0.0});
    for (Eigen::Index i = 0; i < S; ++i) {
      std::vector<double> taps(nfft_, 0.0);
      for (int t = 0; t < L_; ++t) taps[static_cast<std::size_t>(t)] = c[i * L_ + t];
      Spectrum tf;
      fft_.fwd(tf, taps);
      for (std::size_t k = 0; k < nfft_; ++k) acc[k] += tf[k] * spectra_[i][k];
    }
    std::vector<double> out;
    fft_.inv(out, acc);
    out.resize(n_ + static_cast<std::size_t>(L_) - 1);
    return out;
  }

 private:
  int L_;
  std::size_t n_;
  std::size_t nfft_ = 1;
  Eigen::FFT<double> fft_;
  std::vector<Spectrum> spectra_;
  Eigen::MatrixXd gram_;
  Eigen::LDLT<Eigen::MatrixXd> solver_;
};

struct PairScore {
  double sdr, sir, sar;
};

}  // namespace detail

/// Scores of every (estimate, reference) pair: result[e][r].
inline std::vector<std::vector<detail::PairScore>> bss_eval_pairs(const std::vector<Channel>& estimates,
                                                                  const std::vector<Channel>& references,
                                                                  const BssEvalOptions& opt = {}) {
  const std::size_t S = references.size();
  if (S == 0) throw InvalidArgument("bss_eval: no references");
  if (estimates.size() != S)
    throw InvalidArgument("bss_eval: " + std::to_string(estimates.size()) + " estimates for " + std::to_string(S) +
                          " references");
  if (opt.filter_length < 1) throw InvalidArgument("bss_eval: filter length must be positive");
  const std::size_t n = references.front().size();
  if (n == 0) throw InvalidArgument("bss_eval: empty signals");
  for (const auto* set : {&estimates, &references})
    for (const auto& x : *set)
      if (x.size() != n) throw InvalidArgument("bss_eval: signals differ in length");
  for (std::size_t k = 0; k < S; ++k) {
    if (!(detail::energy(references[k]) > 0.0)) throw InvalidArgument("bss_eval: reference " + std::to_string(k) + " has zero energy");
    if (!(detail::energy(estimates[k]) > 0.0)) throw InvalidArgument("bss_eval: estimate " + std::to_string(k) + " has zero energy");
  }
  for (std::size_t a = 0; a < S; ++a)
    for (std::size_t b = a + 1; b < S; ++b) {
      const double c = std::inner_product(references[a].begin(), references[a].end(), references[b].begin(), 0.0) /
                       std::sqrt(detail::energy(references[a]) * detail::energy(references[b]));
      if (std::abs(c) >= kDegenerateCorrelation)
        throw InvalidArgument("bss_eval: references " + std::to_string(a) + " and " + std::to_string(b) +
                              " are degenerate");
    }

  const int L = opt.filter_length;
  const std::size_t m = n + static_cast<std::size_t>(L) - 1;
  detail::Projector all(references, L);
  std::vector<detail::Projector> single;
  for (const auto& r : references) single.emplace_back(std::vector<std::vector<double>>{r}, L);

  std::vector<std::vector<detail::PairScore>> out(S);
  for (std::size_t e = 0; e < S; ++e) {
    const auto est_spec = all.spectrum(estimates[e]);
    const auto p_all = all.project(est_spec);
    for (std::size_t r = 0; r < S; ++r) {
      const auto target = single[r].project(single[r].spectrum(estimates[e]));
      std::vector<double> interf(m), artif(m), distortion(m), filtered_plus_interf(m);
      for (std::size_t t = 0; t < m; ++t) {
        const double est = t < n ? estimates[e][t] : 0.0;
        interf[t] = p_all[t] - target[t];
        artif[t] = est - p_all[t];
        distortion[t] = interf[t] + artif[t];
        filtered_plus_interf[t] = p_all[t];
      }
      const double e_target = detail::energy(target);
      out[e].push_back({detail::ratio_db(e_target, detail::energy(distortion)),
                        detail::ratio_db(e_target, detail::energy(interf)),
                        detail::ratio_db(detail::energy(filtered_plus_interf), detail::energy(artif))});
    }
  }
  return out;
}

/// SDR/SIR/SAR with the estimate-to-reference permutation that maximises
/// summed SIR; ties go to the lexicographically first permutation.
inline BssScores bss_eval(const std::vector<Channel>& estimates, const std::vector<Channel>& references,
                          const BssEvalOptions& opt = {}) {
  const auto pairs = bss_eval_pairs(estimates, references, opt);
  const std::size_t S = references.size();
  std::vector<int> perm(S);
  std::iota(perm.begin(), perm.end(), 0);
  std::vector<int> best = perm;
  double best_sir = -std::numeric_limits<double>::infinity();
  do {
    double total = 0.0;
    for (std::size_t r = 0; r < S; ++r) total += pairs[static_cast<std::size_t>(perm[r])][r].sir;
    if (total > best_sir) {
      best_sir = total;
      best = perm;
    }
  } while (std::next_permutation(perm.begin(), perm.end()));

  BssScores s;
  s.sdr.resize(static_cast<Eigen::Index>(S));
  s.sir.resize(static_cast<Eigen::Index>(S));
  s.sar.resize(static_cast<Eigen::Index>(S));
  s.permutation = best;
  for (std::size_t r = 0; r < S; ++r) {
    const auto& p = pairs[static_cast<std::size_t>(best[r])][r];
    s.sdr[static_cast<Eigen::Index>(r)] = p.sdr;
    s.sir[static_cast<Eigen::Index>(r)] = p.sir;
    s.sar[static_cast<Eigen::Index>(r)] = p.sar;
  }
  return s;
}

/// Scores at one microphone: channel `reference_channel` of each estimate
/// against the same channel of each source image.
inline BssScores bss_eval(const std::vector<Waveform>& estimates, const std::vector<Waveform>& images,
                          std::size_t reference_channel, const BssEvalOptions& opt = {}) {
  auto pick = [&](const std::vector<Waveform>& ws) {
    std::vector<Channel> out;
    for (const auto& w : ws) {
      if (reference_channel >= w.num_channels()) throw InvalidArgument("bss_eval: reference channel out of range");
      out.push_back(w.channels[reference_channel]);
    }
    return out;
  };
  return bss_eval(pick(estimates), pick(images), opt);
}

// ---------------------------------------------------------------------------
// Classification

enum class AccuracyMode { kAllIterations, kFinal };

/// Index of the largest entry; the lowest index wins ties.
inline int argmax(const std::vector<double>& p) {
  if (p.empty()) throw InvalidArgument("argmax: empty vector");
  return static_cast<int>(std::max_element(p.begin(), p.end()) - p.begin());
}

/// Fraction of (iteration, source) pairs whose posterior argmax matches the
/// label of the reference it was matched to. `permutation[k]` is the
/// estimated source matched to reference k.
inline double classification_accuracy(const sep::SeparationTrace& trace, const std::vector<int>& true_labels,
                                      const std::vector<int>& permutation, AccuracyMode mode) {
  if (trace.iterations.empty()) throw InvalidArgument("classification_accuracy: trace has no iterations");
  if (permutation.size() != true_labels.size())
    throw InvalidArgument("classification_accuracy: permutation and label counts differ");
  std::size_t first = mode == AccuracyMode::kFinal ? trace.iterations.size() - 1 : 0;
  std::size_t hits = 0, total = 0;
  for (std::size_t it = first; it < trace.iterations.size(); ++it) {
    const auto& post = trace.iterations[it].class_posteriors;
    if (post.size() != true_labels.size())
      throw InvalidArgument("classification_accuracy: iteration " + std::to_string(it + 1) + " records " +
                            std::to_string(post.size()) + " sources, expected " + std::to_string(true_labels.size()));
    for (std::size_t k = 0; k < true_labels.size(); ++k) {
      hits += argmax(post[static_cast<std::size_t>(permutation[k])]) == true_labels[k];
      ++total;
    }
  }
  return static_cast<double>(hits) / static_cast<double>(total);
}

inline double classification_accuracy(const sep::SeparationTrace& trace, const std::vector<int>& true_labels,
                                      AccuracyMode mode) {
  std::vector<int> identity(true_labels.size());
  std::iota(identity.begin(), identity.end(), 0);
  return classification_accuracy(trace, true_labels, identity, mode);
}

// ---------------------------------------------------------------------------
// Reports

struct RuntimeRow {
  std::string method;
  int runs = 0;
  double iterations = 0.0;  // mean per run
  double per_iteration_ms = 0.0;
  double total_ms = 0.0;    // mean per run
};

/// Per-method timing summary; row order follows first appearance in `traces`.
inline std::vector<RuntimeRow> runtime_report(const std::vector<sep::SeparationTrace>& traces) {
  std::vector<RuntimeRow> rows;
  std::vector<double> iter_sum;
  for (const auto& t : traces) {
    auto it = std::find_if(rows.begin(), rows.end(), [&](const RuntimeRow& r) { return r.method == t.method; });
    if (it == rows.end()) {
      rows.push_back({t.method});
      iter_sum.push_back(0.0);
      it = rows.end() - 1;
    }
    const auto idx = static_cast<std::size_t>(it - rows.begin());
    it->runs += 1;
    it->iterations += static_cast<double>(t.iterations.size());
    it->total_ms += t.total_ms();
    iter_sum[idx] += static_cast<double>(t.iterations.size());
  }
  for (std::size_t i = 0; i < rows.size(); ++i) {
    rows[i].per_iteration_ms = iter_sum[i] > 0.0 ? rows[i].total_ms / iter_sum[i] : 0.0;
    rows[i].iterations /= rows[i].runs;
    rows[i].total_ms /= rows[i].runs;
  }
  return rows;
}

/// Column-labelled table rendered as CSV or as aligned text.
struct Table {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  void write_csv(std::ostream& os) const {
    auto line = [&](const std::vector<std::string>& cells) {
      for (std::size_t i = 0; i < cells.size(); ++i) os << (i ? "," : "") << cells[i];
      os << '\n';
    };
    line(header);
    for (const auto& r : rows) line(r);
  }

  void write_text(std::ostream& os) const {
    std::vector<std::size_t> width(header.size(), 0);
    auto measure = [&](const std::vector<std::string>& cells) {
      for (std::size_t i = 0; i < cells.size() && i < width.size(); ++i) width[i] = std::max(width[i], cells[i].size());
    };
    measure(header);
    for (const auto& r : rows) measure(r);
    auto line = [&](const std::vector<std::string>& cells) {
      for (std::size_t i = 0; i < cells.size(); ++i) {
        if (i) os << "  ";
        os << (i ? std::right : std::left) << std::setw(static_cast<int>(width[i])) << cells[i];
      }
      os << '\n';
    };
    line(header);
    std::size_t total = 0;
    for (auto w : width) total += w;
    os << std::string(total + 2 * (width.size() - 1), '-') << '\n';
    for (const auto& r : rows) line(r);
  }
};

inline std::string fixed(double v, int digits = 2) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(digits) << v;
  return os.str();
}

/// One method's results over a scene suite.
struct MethodSummary {
  std::string method;
  std::vector<BssScores> scores;  // one per scene
  double accuracy_all = std::numeric_limits<double>::quiet_NaN();
  double accuracy_final = std::numeric_limits<double>::quiet_NaN();
};

inline double mean_of(const std::vector<BssScores>& s, Eigen::VectorXd BssScores::*field) {
  double acc = 0.0;
  Eigen::Index count = 0;
  for (const auto& x : s) {
    acc += (x.*field).sum();
    count += (x.*field).size();
  }
  return count ? acc / static_cast<double>(count) : std::numeric_limits<double>::quiet_NaN();
}

/// Mean SDR/SIR/SAR per method.
inline Table score_table(const std::vector<MethodSummary>& methods) {
  Table t{{"method", "scenes", "SDR [dB]", "SIR [dB]", "SAR [dB]"}, {}};
  for (const auto& m : methods)
    t.rows.push_back({m.method, std::to_string(m.scores.size()), fixed(mean_of(m.scores, &BssScores::sdr)),
                      fixed(mean_of(m.scores, &BssScores::sir)), fixed(mean_of(m.scores, &BssScores::sar))});
  return t;
}

inline Table runtime_table(const std::vector<RuntimeRow>& rows) {
  Table t{{"method", "runs", "iterations", "runtime/iteration [s]", "total [s]"}, {}};
  for (const auto& r : rows)
    t.rows.push_back({r.method, std::to_string(r.runs), fixed(r.iterations, 1), fixed(r.per_iteration_ms / 1e3, 4),
                      fixed(r.total_ms / 1e3, 3)});
  return t;
}

/// Classification accuracy per method; methods without posteriors are skipped.
inline Table accuracy_table(const std::vector<MethodSummary>& methods) {
  Table t{{"method", "all iterations [%]", "final estimation [%]"}, {}};
  for (const auto& m : methods) {
    if (std::isnan(m.accuracy_all)) continue;
    t.rows.push_back({m.method, fixed(100.0 * m.accuracy_all), fixed(100.0 * m.accuracy_final)});
  }
  return t;
}

}  // namespace fastsep::eval

#endif  // FASTSEP_EVALUATION_HPP_
