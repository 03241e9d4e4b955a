// Copyright 2026 The fastsep Authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)

// WAV ingestion/emission and STFT analysis/synthesis.
//
// Framing: a signal of L samples is analysed with N = max(1, ceil(L / hop))
// frames. The padded buffer carries (win - hop) leading zeros so that the
// first sample sits in the same overlap position as every other sample, and
// trailing zeros up to (N - 1) * hop + win. Synthesis is weighted overlap-add
// normalised by the summed squared window, which reconstructs any window that
// is non-zero on its support (periodic Hamming included).

#ifndef FASTSEP_SIGNAL_IO_HPP_
#define FASTSEP_SIGNAL_IO_HPP_

#include <algorithm>
#include <cmath>
#include <complex>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <unsupported/Eigen/FFT>
#include <spdlog/spdlog.h>

#include "fastsep/error.hpp"

namespace fastsep {

using Channel = std::vector<double>;

/// Multichannel time-domain signal. All channels have equal length.
struct Waveform {
  std::vector<Channel> channels;
  int sample_rate = 16000;

  std::size_t num_channels() const { return channels.size(); }
  std::size_t length() const { return channels.empty() ? 0 : channels.front().size(); }

  void validate() const {
    if (sample_rate <= 0) throw InvalidArgument("waveform sample rate must be positive");
    for (const auto& ch : channels)
      if (ch.size() != length()) throw InvalidArgument("waveform channels differ in length");
  }
};

struct StftConfig {
  std::size_t window_length = 4096;
  std::size_t frame_shift = 2048;

  std::size_t num_bins() const { return window_length / 2 + 1; }

  /// Window/shift in samples from durations in milliseconds.
  static StftConfig from_ms(double win_ms, double hop_ms, int sample_rate) {
    StftConfig cfg;
    cfg.window_length = static_cast<std::size_t>(std::lround(win_ms * sample_rate / 1000.0));
    cfg.frame_shift = static_cast<std::size_t>(std::lround(hop_ms * sample_rate / 1000.0));
    return cfg;
  }

  void validate() const {
    if (window_length == 0 || window_length % 2 != 0)
      throw InvalidArgument("STFT window length must be even and positive, got " +
                            std::to_string(window_length));
    if (frame_shift == 0 || frame_shift > window_length)
      throw InvalidArgument("STFT frame shift must lie in (0, window_length], got " +
                            std::to_string(frame_shift));
  }

  std::size_t num_frames(std::size_t signal_length) const {
    return std::max<std::size_t>(1, (signal_length + frame_shift - 1) / frame_shift);
  }
};

/// One-sided complex spectrogram, F x N (bins x frames).
struct Spectrogram {
  Eigen::MatrixXcd values;
  std::size_t frame_shift = 0;
  std::size_t window_length = 0;
  int sample_rate = 16000;

  Eigen::Index bins() const { return values.rows(); }
  Eigen::Index frames() const { return values.cols(); }
  StftConfig config() const { return {window_length, frame_shift}; }
};

/// Periodic Hamming window.
inline std::vector<double> hamming_window(std::size_t length) {
  std::vector<double> w(length);
  const double two_pi = 2.0 * std::numbers::pi;
  for (std::size_t i = 0; i < length; ++i)
    w[i] = 0.54 - 0.46 * std::cos(two_pi * static_cast<double>(i) / static_cast<double>(length));
  return w;
}

inline Spectrogram stft(std::span<const double> x, const StftConfig& cfg, int sample_rate = 16000) {
  cfg.validate();
  if (x.empty()) throw InvalidArgument("stft: empty signal");
  if (x.size() < cfg.window_length)
    spdlog::warn("stft: signal of {} samples is shorter than one window ({}), zero-padding",
                 x.size(), cfg.window_length);

  const std::size_t win = cfg.window_length;
  const std::size_t hop = cfg.frame_shift;
  const std::size_t n_frames = cfg.num_frames(x.size());
  const std::size_t lead = win - hop;
  const auto window = hamming_window(win);

  Spectrogram S;
  S.frame_shift = hop;
  S.window_length = win;
  S.sample_rate = sample_rate;
  S.values.resize(static_cast<Eigen::Index>(cfg.num_bins()), static_cast<Eigen::Index>(n_frames));

  Eigen::FFT<double> fft;
  fft.SetFlag(Eigen::FFT<double>::HalfSpectrum);
  std::vector<double> frame(win);
  std::vector<std::complex<double>> spectrum;
  for (std::size_t n = 0; n < n_frames; ++n) {
    // Padded index p maps to signal index p - lead.
    const std::ptrdiff_t start = static_cast<std::ptrdiff_t>(n * hop) - static_cast<std::ptrdiff_t>(lead);
    for (std::size_t t = 0; t < win; ++t) {
      const std::ptrdiff_t idx = start + static_cast<std::ptrdiff_t>(t);
      const double sample = (idx >= 0 && idx < static_cast<std::ptrdiff_t>(x.size())) ? x[idx] : 0.0;
      frame[t] = sample * window[t];
    }
    fft.fwd(spectrum, frame);
    for (std::size_t k = 0; k < cfg.num_bins(); ++k) S.values(k, n) = spectrum[k];
  }
  return S;
}

/// Inverse of stft(); `length` is the original signal length.
inline Channel istft(const Spectrogram& S, std::size_t length) {
  const StftConfig cfg = S.config();
  cfg.validate();
  if (static_cast<std::size_t>(S.bins()) != cfg.num_bins())
    throw InvalidArgument("istft: spectrogram has " + std::to_string(S.bins()) +
                          " bins, window length " + std::to_string(cfg.window_length) +
                          " implies " + std::to_string(cfg.num_bins()));
  if (S.frames() < 1) throw InvalidArgument("istft: spectrogram has no frames");

  const std::size_t win = cfg.window_length;
  const std::size_t hop = cfg.frame_shift;
  const std::size_t n_frames = static_cast<std::size_t>(S.frames());
  const std::size_t lead = win - hop;
  const std::size_t padded = (n_frames - 1) * hop + win;
  const auto window = hamming_window(win);

  std::vector<double> acc(padded, 0.0), norm(padded, 0.0);
  Eigen::FFT<double> fft;
  fft.SetFlag(Eigen::FFT<double>::HalfSpectrum);
  std::vector<std::complex<double>> spectrum(cfg.num_bins());
  std::vector<double> frame;
  for (std::size_t n = 0; n < n_frames; ++n) {
    for (std::size_t k = 0; k < cfg.num_bins(); ++k) spectrum[k] = S.values(k, n);
    // DC and Nyquist of a real signal are real.
    spectrum.front() = spectrum.front().real();
    spectrum.back() = spectrum.back().real();
    fft.inv(frame, spectrum, win);
    for (std::size_t t = 0; t < win; ++t) {
      acc[n * hop + t] += frame[t] * window[t];
      norm[n * hop + t] += window[t] * window[t];
    }
  }

  Channel y(length, 0.0);
  for (std::size_t t = 0; t < length; ++t) {
    const std::size_t p = t + lead;
    if (p < padded && norm[p] > 0.0) y[t] = acc[p] / norm[p];
  }
  return y;
}

// ---------------------------------------------------------------------------
// WAV (RIFF) I/O

enum class SampleFormat { kPcm16, kFloat32 };

namespace detail {

inline std::uint32_t read_u32(const unsigned char* p) {
  return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}
inline std::uint16_t read_u16(const unsigned char* p) {
  return static_cast<std::uint16_t>(p[0] | (p[1] << 8));
}
inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
inline void put_u16(std::string& out, std::uint16_t v) {
  out.push_back(static_cast<char>(v & 0xff));
  out.push_back(static_cast<char>((v >> 8) & 0xff));
}

}  // namespace detail

inline Waveform read_wav(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open WAV file " + path.string());
  std::vector<unsigned char> buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  const std::string where = " in " + path.string();
  if (buf.size() < 12 || std::memcmp(buf.data(), "RIFF", 4) != 0 || std::memcmp(buf.data() + 8, "WAVE", 4) != 0)
    throw FormatError("not a RIFF/WAVE file" + where);

  std::uint16_t format = 0, channels = 0, bits = 0;
  std::uint32_t rate = 0;
  const unsigned char* data = nullptr;
  std::size_t data_size = 0;
  std::size_t pos = 12;
  while (pos + 8 <= buf.size()) {
    const unsigned char* chunk = buf.data() + pos;
    const std::uint32_t size = detail::read_u32(chunk + 4);
    const std::size_t body = pos + 8;
    if (body + size > buf.size()) {
      if (std::memcmp(chunk, "data", 4) == 0) {
        // Tolerate truncated data chunks written by streaming encoders.
        data = buf.data() + body;
        data_size = buf.size() - body;
        break;
      }
      throw FormatError("chunk overruns file" + where);
    }
    if (std::memcmp(chunk, "fmt ", 4) == 0) {
      if (size < 16) throw FormatError("fmt chunk too short" + where);
      format = detail::read_u16(chunk + 8);
      channels = detail::read_u16(chunk + 10);
      rate = detail::read_u32(chunk + 12);
      bits = detail::read_u16(chunk + 22);
      if (format == 0xFFFE) {
        if (size < 40) throw FormatError("extensible fmt chunk too short" + where);
        format = detail::read_u16(chunk + 8 + 24);
      }
    } else if (std::memcmp(chunk, "data", 4) == 0) {
      data = buf.data() + body;
      data_size = size;
    }
    pos = body + size + (size & 1u);
  }
  if (channels == 0) throw FormatError("missing or empty fmt chunk" + where);
  if (data == nullptr) throw FormatError("missing data chunk" + where);
  if (rate == 0) throw FormatError("zero sample rate" + where);

  const bool pcm16 = format == 1 && bits == 16;
  const bool f32 = format == 3 && bits == 32;
  if (!pcm16 && !f32)
    throw FormatError("unsupported codec (format tag " + std::to_string(format) + ", " +
                      std::to_string(bits) + " bits); only 16-bit PCM and 32-bit float are supported" + where);

  const std::size_t bytes = bits / 8;
  const std::size_t frames = data_size / (bytes * channels);
  Waveform w;
  w.sample_rate = static_cast<int>(rate);
  w.channels.assign(channels, Channel(frames));
  for (std::size_t t = 0; t < frames; ++t) {
    for (std::size_t c = 0; c < channels; ++c) {
      const unsigned char* p = data + (t * channels + c) * bytes;
      if (pcm16) {
        const auto v = static_cast<std::int16_t>(detail::read_u16(p));
        w.channels[c][t] = static_cast<double>(v) / 32768.0;
      } else {
        const std::uint32_t u = detail::read_u32(p);
        float f;
        std::memcpy(&f, &u, sizeof f);
        w.channels[c][t] = f;
      }
    }
  }
  return w;
}

inline void write_wav(const std::filesystem::path& path, const Waveform& w,
                      SampleFormat fmt = SampleFormat::kFloat32) {
  w.validate();
  if (w.channels.empty()) throw InvalidArgument("write_wav: waveform has no channels");
  const std::uint16_t channels = static_cast<std::uint16_t>(w.num_channels());
  const std::uint16_t bits = fmt == SampleFormat::kPcm16 ? 16 : 32;
  const std::uint16_t tag = fmt == SampleFormat::kPcm16 ? 1 : 3;
  const std::uint32_t block = channels * (bits / 8);
  const std::uint32_t data_size = static_cast<std::uint32_t>(w.length() * block);

  std::string out;
  out.reserve(44 + data_size);
  out += "RIFF";
  detail::put_u32(out, 36 + data_size);
  out += "WAVEfmt ";
  detail::put_u32(out, 16);
  detail::put_u16(out, tag);
  detail::put_u16(out, channels);
  detail::put_u32(out, static_cast<std::uint32_t>(w.sample_rate));
  detail::put_u32(out, static_cast<std::uint32_t>(w.sample_rate) * block);
  detail::put_u16(out, static_cast<std::uint16_t>(block));
  detail::put_u16(out, bits);
  out += "data";
  detail::put_u32(out, data_size);
  for (std::size_t t = 0; t < w.length(); ++t) {
    for (std::size_t c = 0; c < channels; ++c) {
      const double v = w.channels[c][t];
      if (fmt == SampleFormat::kPcm16) {
        const double clipped = std::clamp(v, -1.0, 32767.0 / 32768.0);
        detail::put_u16(out, static_cast<std::uint16_t>(static_cast<std::int16_t>(std::lround(clipped * 32768.0))));
      } else {
        const float f = static_cast<float>(v);
        std::uint32_t u;
        std::memcpy(&u, &f, sizeof u);
        detail::put_u32(out, u);
      }
    }
  }
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FormatError("cannot open " + path.string() + " for writing");
  os.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!os) throw FormatError("failed writing " + path.string());
}

}  // namespace fastsep

#endif  // FASTSEP_SIGNAL_IO_HPP_
