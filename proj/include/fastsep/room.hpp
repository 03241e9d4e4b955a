// Copyright 2026 The fastsep Authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)

// Shoebox-room simulation with the image method, convolutive mixing of
// labelled sources, and a synthetic labelled corpus of harmonic "speakers".

#ifndef FASTSEP_ROOM_HPP_
#define FASTSEP_ROOM_HPP_

#include <algorithm>
#include <array>
#include <cmath>
#include <complex>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <random>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <unsupported/Eigen/FFT>

#include "CLI11.hpp"
#include "json.hpp"

#include "fastsep/error.hpp"
#include "fastsep/signal_io.hpp"

namespace fastsep::room {

using Point = std::array<double, 3>;

inline constexpr double kSpeedOfSound = 343.0;
/// Half-width, in samples, of the windowed-sinc fractional-delay kernel.
inline constexpr int kSincHalfWidth = 32;

struct RoomSpec {
  Point dimensions{};
  std::vector<Point> mic_positions;
  std::vector<Point> source_positions;
  /// Energy absorption per wall: x=0, x=L, y=0, y=W, z=0, z=H.
  std::array<double, 6> absorption{};
  double target_rt60 = 0.0;
  int sample_rate = 16000;
  int max_image_order = 0;
  double speed_of_sound = kSpeedOfSound;

  void validate() const {
    for (double d : dimensions)
      if (!(d > 0.0)) throw InvalidArgument("room dimensions must be positive");
    if (!(target_rt60 > 0.0)) throw InvalidArgument("target RT60 must be positive");
    if (sample_rate <= 0) throw InvalidArgument("sample rate must be positive");
    if (max_image_order < 0) throw InvalidArgument("image order must be non-negative");
    for (double a : absorption)
      if (!(a > 0.0 && a <= 1.0)) throw InvalidArgument("wall absorption must lie in (0, 1]");
    auto inside = [&](const Point& p) {
      for (int k = 0; k < 3; ++k)
        if (!(p[k] > 0.0 && p[k] < dimensions[k])) return false;
      return true;
    };
    for (const auto& p : mic_positions)
      if (!inside(p)) throw InvalidArgument("microphone position outside the room");
    for (const auto& p : source_positions)
      if (!inside(p)) throw InvalidArgument("source position outside the room");
  }

  double volume() const { return dimensions[0] * dimensions[1] * dimensions[2]; }
  double surface() const {
    const auto& d = dimensions;
    return 2.0 * (d[0] * d[1] + d[0] * d[2] + d[1] * d[2]);
  }

  /// RIR length: 1.5 x target RT60.
  std::size_t rir_length() const {
    return static_cast<std::size_t>(std::ceil(1.5 * target_rt60 * sample_rate));
  }
};

/// Uniform absorption reaching `rt60` in the given room, from the Eyring
/// relation RT60 = 0.161 V / (-S ln(1 - a)).
inline double uniform_absorption(const Point& dims, double rt60) {
  const double V = dims[0] * dims[1] * dims[2];
  const double S = 2.0 * (dims[0] * dims[1] + dims[0] * dims[2] + dims[1] * dims[2]);
  const double a = 1.0 - std::exp(-0.161 * V / (S * rt60));
  return std::clamp(a, 1e-6, 1.0);
}

/// Smallest reflection order at which every image is at least 60 dB below
/// an unreflected path of the same length.
inline int order_for_60db(const std::array<double, 6>& absorption) {
  double beta = 0.0;
  for (double a : absorption) beta = std::max(beta, std::sqrt(1.0 - a));
  if (beta <= 0.0) return 0;
  if (beta >= 1.0) return 64;
  return std::min(64, static_cast<int>(std::ceil(std::log(1e-3) / std::log(beta))));
}

/// Fills absorption and image order from target_rt60.
inline void derive_acoustics(RoomSpec& spec) {
  spec.absorption.fill(uniform_absorption(spec.dimensions, spec.target_rt60));
  spec.max_image_order = order_for_60db(spec.absorption);
}

/// Adds `amp * delta(t - delay)` to `h` with a Hann-windowed sinc kernel.
inline void add_fractional_impulse(std::vector<double>& h, double delay, double amp) {
  const auto center = static_cast<long>(std::floor(delay));
  const double frac = delay - static_cast<double>(center);
  for (long k = -kSincHalfWidth; k <= kSincHalfWidth; ++k) {
    const long idx = center + k;
    if (idx < 0 || idx >= static_cast<long>(h.size())) continue;
    const double x = static_cast<double>(k) - frac;
    if (std::abs(x) >= kSincHalfWidth) continue;
    const double sinc = x == 0.0 ? 1.0 : std::sin(std::numbers::pi * x) / (std::numbers::pi * x);
    const double win = 0.5 * (1.0 + std::cos(std::numbers::pi * x / kSincHalfWidth));
    h[static_cast<std::size_t>(idx)] += amp * sinc * win;
  }
}

/// Impulse response from source `s` to microphone `m`.
inline std::vector<double> image_method_rir(const RoomSpec& spec, std::size_t s, std::size_t m) {
  spec.validate();
  if (s >= spec.source_positions.size() || m >= spec.mic_positions.size())
    throw InvalidArgument("image_method_rir: source or microphone index out of range");
  const Point& src = spec.source_positions[s];
  const Point& mic = spec.mic_positions[m];
  const std::size_t len = spec.rir_length();
  std::vector<double> h(len, 0.0);
  const double max_dist = spec.speed_of_sound * static_cast<double>(len + kSincHalfWidth) / spec.sample_rate;
  std::array<double, 6> beta{};
  for (int w = 0; w < 6; ++w) beta[w] = std::sqrt(1.0 - spec.absorption[w]);
  const int order = spec.max_image_order;

  std::array<int, 3> reach{};
  for (int k = 0; k < 3; ++k)
    reach[k] = std::min(order, static_cast<int>(std::ceil(max_dist / (2.0 * spec.dimensions[k]))) + 1);

  for (int nx = -reach[0]; nx <= reach[0]; ++nx)
    for (int ny = -reach[1]; ny <= reach[1]; ++ny)
      for (int nz = -reach[2]; nz <= reach[2]; ++nz)
        for (int q = 0; q < 8; ++q) {
          const std::array<int, 3> n = {nx, ny, nz};
          const std::array<int, 3> qq = {q & 1, (q >> 1) & 1, (q >> 2) & 1};
          int reflections = 0;
          double amp = 1.0, dist2 = 0.0;
          for (int k = 0; k < 3; ++k) {
            const int low = std::abs(n[k] - qq[k]);  // hits on the wall at 0
            const int high = std::abs(n[k]);         // hits on the wall at L
            reflections += low + high;
            amp *= std::pow(beta[2 * k], low) * std::pow(beta[2 * k + 1], high);
            const double img = (1 - 2 * qq[k]) * src[k] + 2.0 * n[k] * spec.dimensions[k];
            dist2 += (img - mic[k]) * (img - mic[k]);
          }
          if (reflections > order) continue;
          const double d = std::sqrt(dist2);
          if (d > max_dist) continue;
          add_fractional_impulse(h, d / spec.speed_of_sound * spec.sample_rate, amp / (4.0 * std::numbers::pi * d));
        }
  return h;
}

/// Reverberation time from Schroeder backward integration, fitting the
/// energy decay curve between -5 and -25 dB and extrapolating to -60 dB.
inline double schroeder_rt60(std::span<const double> h, int sample_rate) {
  std::vector<double> edc(h.size() + 1, 0.0);
  for (std::size_t i = h.size(); i-- > 0;) edc[i] = edc[i + 1] + h[i] * h[i];
  if (!(edc[0] > 0.0)) throw InvalidArgument("schroeder_rt60: silent impulse response");
  double sx = 0, sy = 0, sxx = 0, sxy = 0;
  std::size_t count = 0;
  for (std::size_t i = 0; i < h.size(); ++i) {
    const double db = 10.0 * std::log10(edc[i] / edc[0]);
    if (db > -5.0) continue;
    if (db < -25.0) break;
    const double t = static_cast<double>(i) / sample_rate;
    sx += t;
    sy += db;
    sxx += t * t;
    sxy += t * db;
    ++count;
  }
  if (count < 2) throw InvalidArgument("schroeder_rt60: decay does not span -5..-25 dB");
  const double slope = (count * sxy - sx * sy) / (count * sxx - sx * sx);
  return -60.0 / slope;
}

/// Linear convolution truncated to the length of `x`.
inline Channel convolve(std::span<const double> x, std::span<const double> h) {
  if (x.empty() || h.empty()) return Channel(x.size(), 0.0);
  const std::size_t full = x.size() + h.size() - 1;
  std::size_t nfft = 1;
  while (nfft < full) nfft <<= 1;
  std::vector<double> a(nfft, 0.0), b(nfft, 0.0);
  std::copy(x.begin(), x.end(), a.begin());
  std::copy(h.begin(), h.end(), b.begin());
  Eigen::FFT<double> fft;
  std::vector<std::complex<double>> fa, fb;
  fft.fwd(fa, a);
  fft.fwd(fb, b);
  for (std::size_t k = 0; k < fa.size(); ++k) fa[k] *= fb[k];
  std::vector<double> y;
  fft.inv(y, fa);
  y.resize(x.size());
  return y;
}

// ---------------------------------------------------------------------------
// Scenes

struct LabeledSource {
  Channel samples;
  int label = 0;
  std::string name;
};

struct Scene {
  RoomSpec spec;
  std::vector<std::vector<Channel>> rirs;  // [source][mic]
  Waveform mixture;                        // one channel per mic
  std::vector<Waveform> source_images;     // [source], one channel per mic
  std::vector<int> labels;
  std::vector<std::string> source_names;
  std::uint64_t seed = 0;
};

/// Convolves each source with its RIRs; the mixture is the exact sum of the images.
inline Scene make_scene(const RoomSpec& spec, const std::vector<LabeledSource>& sources, std::uint64_t seed) {
  spec.validate();
  if (sources.size() != spec.source_positions.size())
    throw InvalidArgument("make_scene: " + std::to_string(sources.size()) + " sources for " +
                          std::to_string(spec.source_positions.size()) + " source positions");
  if (sources.empty()) throw InvalidArgument("make_scene: no sources");
  const std::size_t len = sources.front().samples.size();
  for (const auto& s : sources)
    if (s.samples.size() != len) throw InvalidArgument("make_scene: sources differ in length");

  Scene scene;
  scene.spec = spec;
  scene.seed = seed;
  const std::size_t mics = spec.mic_positions.size();
  scene.mixture.sample_rate = spec.sample_rate;
  scene.mixture.channels.assign(mics, Channel(len, 0.0));
  for (std::size_t j = 0; j < sources.size(); ++j) {
    Waveform img;
    img.sample_rate = spec.sample_rate;
    std::vector<Channel> rirs;
    for (std::size_t m = 0; m < mics; ++m) {
      rirs.push_back(image_method_rir(spec, j, m));
      img.channels.push_back(convolve(sources[j].samples, rirs.back()));
    }
    scene.rirs.push_back(std::move(rirs));
    scene.source_images.push_back(std::move(img));
    scene.labels.push_back(sources[j].label);
    scene.source_names.push_back(sources[j].name);
  }
  for (const auto& img : scene.source_images)
    for (std::size_t m = 0; m < mics; ++m)
      for (std::size_t t = 0; t < len; ++t) scene.mixture.channels[m][t] += img.channels[m][t];
  return scene;
}

// ---------------------------------------------------------------------------
// Synthetic labelled corpus
//
// Each class is a fixed "voice": a set of fundamental frequencies and a
// formant envelope. Utterances are sequences of harmonic syllables drawn from
// the class's pitch set with random levels and durations. The class templates
// depend only on the class index, so corpora drawn with different seeds share
// their classes.

struct ClassTemplate {
  std::vector<double> pitches;   // Hz
  std::vector<double> formants;  // Hz
  std::vector<double> bandwidths;
  double tilt_db_per_octave = -6.0;
};

inline ClassTemplate class_template(int k) {
  ClassTemplate t;
  const double base = 95.0 * std::pow(1.42, k % 6) * (k >= 6 ? 1.07 : 1.0);
  for (double ratio : {1.0, 9.0 / 8.0, 5.0 / 4.0, 3.0 / 2.0}) t.pitches.push_back(base * ratio);
  static constexpr double kF1[] = {350, 650, 500, 800, 420, 720};
  static constexpr double kF2[] = {900, 1800, 1250, 2300, 1550, 1050};
  static constexpr double kF3[] = {2600, 3000, 3600, 2800, 4200, 3300};
  t.formants = {kF1[k % 6], kF2[(k + 1) % 6], kF3[(k + 3) % 6]};
  t.bandwidths = {90.0, 140.0, 220.0};
  t.tilt_db_per_octave = -4.0 - 1.5 * (k % 3);
  return t;
}

inline double envelope_gain(const ClassTemplate& t, double freq) {
  double env = 0.02;
  for (std::size_t i = 0; i < t.formants.size(); ++i) {
    const double z = (freq - t.formants[i]) / t.bandwidths[i];
    env += std::exp(-0.5 * z * z) / (1.0 + static_cast<double>(i));
  }
  return env * std::pow(10.0, t.tilt_db_per_octave * std::log2(std::max(freq, 50.0) / 100.0) / 20.0);
}

struct CorpusOptions {
  int classes = 4;
  int utterances_per_class = 20;
  double duration = 4.0;  // seconds
  int sample_rate = 16000;
  std::uint64_t seed = 0;
};

inline LabeledSource synth_utterance(int label, double duration, int sample_rate, std::mt19937_64& rng) {
  const ClassTemplate tpl = class_template(label);
  const std::size_t len = static_cast<std::size_t>(std::llround(duration * sample_rate));
  LabeledSource out;
  out.label = label;
  out.samples.assign(len, 0.0);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::uniform_int_distribution<std::size_t> pick(0, tpl.pitches.size() - 1);
  const double nyquist = 0.5 * sample_rate;
  const double fs = static_cast<double>(sample_rate);

  double t0 = 0.05 + 0.1 * u(rng);
  while (t0 < duration - 0.15) {
    const double dur = std::min(0.2 + 0.4 * u(rng), duration - t0);
    const double level = 0.5 + 0.5 * u(rng);
    const double f0 = tpl.pitches[pick(rng)];
    const auto start = static_cast<std::size_t>(t0 * fs);
    const auto stop = std::min(len, static_cast<std::size_t>((t0 + dur) * fs));
    const double attack = 0.02, release = 0.04;
    for (int h = 1; h * f0 < nyquist - 100.0; ++h) {
      const double freq = h * f0;
      const double amp = level * envelope_gain(tpl, freq);
      const double phase = 2.0 * std::numbers::pi * u(rng);
      for (std::size_t i = start; i < stop; ++i) {
        const double tl = static_cast<double>(i - start) / fs;
        const double tr = static_cast<double>(stop - i) / fs;
        const double env = std::min({1.0, tl / attack, tr / release});
        out.samples[i] += amp * env * std::sin(2.0 * std::numbers::pi * freq * tl + phase);
      }
    }
    t0 += dur + 0.05 + 0.15 * u(rng);
  }
  std::normal_distribution<double> noise(0.0, 1e-4);
  double energy = 0.0;
  for (double v : out.samples) energy += v * v;
  const double rms = std::sqrt(energy / static_cast<double>(len));
  const double scale = rms > 0.0 ? 0.1 / rms : 1.0;
  for (double& v : out.samples) v = v * scale + noise(rng);
  return out;
}

/// Deterministic labelled corpus, ordered class-major.
inline std::vector<LabeledSource> toy_corpus(const CorpusOptions& opt) {
  if (opt.classes < 1 || opt.utterances_per_class < 1 || !(opt.duration > 0.2))
    throw InvalidArgument("toy_corpus: need at least one class, one utterance, and 0.2 s duration");
  std::mt19937_64 rng(opt.seed);
  std::vector<LabeledSource> corpus;
  for (int c = 0; c < opt.classes; ++c)
    for (int k = 0; k < opt.utterances_per_class; ++k) {
      auto utt = synth_utterance(c, opt.duration, opt.sample_rate, rng);
      utt.name = "class" + std::to_string(c) + "_" + std::to_string(k);
      corpus.push_back(std::move(utt));
    }
  return corpus;
}

inline void write_corpus(const std::filesystem::path& dir, const std::vector<LabeledSource>& corpus,
                         const CorpusOptions& opt) {
  std::filesystem::create_directories(dir);
  nlohmann::ordered_json items = nlohmann::ordered_json::array();
  for (const auto& u : corpus) {
    Waveform w;
    w.sample_rate = opt.sample_rate;
    w.channels.push_back(u.samples);
    write_wav(dir / (u.name + ".wav"), w);
    items.push_back({{"file", u.name + ".wav"}, {"label", u.label}});
  }
  nlohmann::ordered_json j = {{"classes", opt.classes},         {"utterances_per_class", opt.utterances_per_class},
                              {"duration", opt.duration},       {"sample_rate", opt.sample_rate},
                              {"seed", opt.seed},               {"items", items}};
  std::ofstream(dir / "corpus.json") << j.dump(2) << '\n';
}

/// Pairs of utterances with distinct labels, drawn deterministically from `corpus`.
inline std::vector<std::vector<LabeledSource>> draw_pairs(const std::vector<LabeledSource>& corpus, int count,
                                                          std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> pick(0, corpus.size() - 1);
  std::vector<std::vector<LabeledSource>> out;
  while (static_cast<int>(out.size()) < count) {
    const auto a = pick(rng), b = pick(rng);
    if (corpus[a].label == corpus[b].label) continue;
    out.push_back({corpus[a], corpus[b]});
  }
  return out;
}

// ---------------------------------------------------------------------------
// Persistence

inline nlohmann::ordered_json to_json(const RoomSpec& s) {
  return {{"dimensions", s.dimensions},
          {"mic_positions", s.mic_positions},
          {"source_positions", s.source_positions},
          {"absorption", s.absorption},
          {"target_rt60", s.target_rt60},
          {"sample_rate", s.sample_rate},
          {"max_image_order", s.max_image_order},
          {"speed_of_sound", s.speed_of_sound}};
}

inline RoomSpec room_from_json(const nlohmann::json& j) {
  RoomSpec s;
  try {
    s.dimensions = j.at("dimensions").get<Point>();
    s.mic_positions = j.at("mic_positions").get<std::vector<Point>>();
    s.source_positions = j.at("source_positions").get<std::vector<Point>>();
    s.absorption = j.at("absorption").get<std::array<double, 6>>();
    s.target_rt60 = j.at("target_rt60").get<double>();
    s.sample_rate = j.at("sample_rate").get<int>();
    s.max_image_order = j.at("max_image_order").get<int>();
    s.speed_of_sound = j.value("speed_of_sound", kSpeedOfSound);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("room description: ") + e.what());
  }
  s.validate();
  return s;
}

/// Room geometry from a TOML key/value file:
///   room_dims, mic_positions, source_positions (flat xyz lists), rt60,
///   and optionally sample_rate, speed_of_sound, absorption, max_image_order.
inline RoomSpec load_room_spec(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open room file " + path.string());
  std::vector<CLI::ConfigItem> items;
  try {
    items = CLI::ConfigTOML().from_config(in);
  } catch (const CLI::Error& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
  auto numbers = [&](const CLI::ConfigItem& it) {
    std::vector<double> v;
    for (const auto& s : it.inputs) {
      try {
        v.push_back(std::stod(s));
      } catch (const std::exception&) {
        throw FormatError(path.string() + ": key '" + it.name + "' expects numbers, got '" + s + "'");
      }
    }
    return v;
  };
  auto points = [&](const CLI::ConfigItem& it) {
    const auto v = numbers(it);
    if (v.empty() || v.size() % 3 != 0) throw FormatError(path.string() + ": '" + it.name + "' must hold xyz triplets");
    std::vector<Point> p;
    for (std::size_t i = 0; i < v.size(); i += 3) p.push_back({v[i], v[i + 1], v[i + 2]});
    return p;
  };

  RoomSpec s;
  bool have_dims = false, have_absorption = false, have_order = false;
  for (const auto& it : items) {
    if (it.name == "++" || it.name == "--") continue;  // section markers
    if (it.name == "room_dims") {
      const auto v = numbers(it);
      if (v.size() != 3) throw FormatError(path.string() + ": room_dims needs three values");
      s.dimensions = {v[0], v[1], v[2]};
      have_dims = true;
    } else if (it.name == "mic_positions") {
      s.mic_positions = points(it);
    } else if (it.name == "source_positions") {
      s.source_positions = points(it);
    } else if (it.name == "rt60") {
      s.target_rt60 = numbers(it).at(0);
    } else if (it.name == "sample_rate") {
      s.sample_rate = static_cast<int>(numbers(it).at(0));
    } else if (it.name == "speed_of_sound") {
      s.speed_of_sound = numbers(it).at(0);
    } else if (it.name == "absorption") {
      const auto v = numbers(it);
      if (v.size() == 1) s.absorption.fill(v[0]);
      else if (v.size() == 6) std::copy(v.begin(), v.end(), s.absorption.begin());
      else throw FormatError(path.string() + ": absorption needs one or six values");
      have_absorption = true;
    } else if (it.name == "max_image_order") {
      s.max_image_order = static_cast<int>(numbers(it).at(0));
      have_order = true;
    } else {
      throw FormatError(path.string() + ": unknown key '" + it.fullname() + "'");
    }
  }
  if (!have_dims) throw FormatError(path.string() + ": room_dims is required");
  if (!(s.target_rt60 > 0.0)) throw FormatError(path.string() + ": rt60 is required");
  if (!have_absorption) s.absorption.fill(uniform_absorption(s.dimensions, s.target_rt60));
  if (!have_order) s.max_image_order = order_for_60db(s.absorption);
  s.validate();
  return s;
}

inline void write_scene(const std::filesystem::path& dir, const Scene& scene) {
  std::filesystem::create_directories(dir);
  write_wav(dir / "mixture.wav", scene.mixture);
  for (std::size_t j = 0; j < scene.source_images.size(); ++j)
    write_wav(dir / ("src" + std::to_string(j) + "_img.wav"), scene.source_images[j]);
  nlohmann::ordered_json j = {{"room", to_json(scene.spec)},
                              {"labels", scene.labels},
                              {"source_names", scene.source_names},
                              {"seed", scene.seed}};
  std::ofstream(dir / "scene.json") << j.dump(2) << '\n';
}

/// Scene without RIRs (they are not persisted).
inline Scene read_scene(const std::filesystem::path& dir) {
  std::ifstream in(dir / "scene.json");
  if (!in) throw FormatError("missing scene.json in " + dir.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(dir.string() + "/scene.json: " + e.what());
  }
  Scene s;
  s.spec = room_from_json(j.at("room"));
  s.labels = j.at("labels").get<std::vector<int>>();
  s.source_names = j.value("source_names", std::vector<std::string>{});
  s.seed = j.value("seed", std::uint64_t{0});
  s.mixture = read_wav(dir / "mixture.wav");
  for (std::size_t k = 0; k < s.labels.size(); ++k)
    s.source_images.push_back(read_wav(dir / ("src" + std::to_string(k) + "_img.wav")));
  return s;
}

}  // namespace fastsep::room

#endif  // FASTSEP_ROOM_HPP_
