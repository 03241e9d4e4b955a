// Copyright 2026 The fastsep Authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)

// Forward-only runtime for the encoder / decoder / auxiliary classifier
// networks, and the FMVAE01 weight-file format they are shipped in.
//
// Activations are channels x time matrices with the frequency axis of a
// spectrogram as the channel axis. Each network is a linear sequence of
// layers. Convolutions may concatenate the class vector, broadcast over time,
// to their input channels.
//
// FMVAE01 layout:
//   8 bytes   magic "FMVAE01\0"
//   8 bytes   manifest length M, unsigned little-endian
//   M bytes   UTF-8 JSON manifest (architecture + ordered tensor table)
//   payload   float32 little-endian tensors, in manifest order
//
// Tensor layouts follow the usual conventions: conv1d weight [out, in, k],
// deconv1d weight [in, out, k], biases and batch-norm vectors [channels].

#ifndef FASTSEP_NEURAL_HPP_
#define FASTSEP_NEURAL_HPP_

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include <Eigen/Dense>

#include "json.hpp"

#include "fastsep/error.hpp"

namespace fastsep::model {

using Tensor = Eigen::MatrixXf;  // channels x time
using Json = nlohmann::json;

inline constexpr char kBundleMagic[8] = {'F', 'M', 'V', 'A', 'E', '0', '1', '\0'};
inline constexpr int kBundleVersion = 1;

struct Conv1d {
  int in_channels = 0;  // including concatenated class channels
  int out_channels = 0;
  int kernel = 1;
  int stride = 1;
  int padding = 0;
  bool concat_class = false;
  Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> weight;  // out x (in * kernel)
  Eigen::VectorXf bias;                                                          // empty when absent
};

struct Deconv1d {
  int in_channels = 0;
  int out_channels = 0;
  int kernel = 1;
  int stride = 1;
  int padding = 0;
  int output_padding = 0;
  bool concat_class = false;
  std::vector<Eigen::MatrixXf> taps;  // per kernel tap, out x in
  Eigen::VectorXf bias;
};

/// Inference-mode batch normalisation with stored running statistics.
struct BatchNorm {
  int channels = 0;
  float eps = 1e-5f;
  Eigen::VectorXf gamma, beta, running_mean, running_var;
};

/// Gated linear unit over the channel axis: first half * sigmoid(second half).
struct Glu {};

/// Elementwise log(x + eps); used as an input compression stage.
struct LogCompress {
  float eps = 1e-6f;
};

using Layer = std::variant<Conv1d, Deconv1d, BatchNorm, Glu, LogCompress>;

struct Network {
  int in_channels = 0;
  std::vector<Layer> layers;
};

struct NeuralBundle {
  Network encoder;     // F -> 2 * latent (mean, log-variance)
  Network decoder;     // latent -> F (log-variance)
  Network classifier;  // F -> C (per-frame logits)
  int num_classes = 0;
  int latent_channels = 0;
  int freq_bins = 0;
  Json metadata = Json::object();

  void validate() const;
};

// ---------------------------------------------------------------------------
// Layer kernels

inline Tensor with_class(const Tensor& x, const Eigen::VectorXf& c) {
  Tensor out(x.rows() + c.size(), x.cols());
  out.topRows(x.rows()) = x;
  out.bottomRows(c.size()) = c.replicate(1, x.cols());
  return out;
}

inline Tensor forward(const Conv1d& l, const Tensor& in, const Eigen::VectorXf& c) {
  const Tensor x = l.concat_class ? with_class(in, c) : in;
  if (x.rows() != l.in_channels)
    throw InvalidArgument("conv1d: expected " + std::to_string(l.in_channels) + " input channels, got " +
                          std::to_string(x.rows()));
  const Eigen::Index t_in = x.cols();
  const Eigen::Index t_out = (t_in + 2 * l.padding - l.kernel) / l.stride + 1;
  if (t_in + 2 * l.padding < l.kernel || t_out < 1)
    throw InvalidArgument("conv1d: input of " + std::to_string(t_in) + " frames is shorter than the kernel");

  Tensor y;
  if (l.kernel == 1 && l.stride == 1 && l.padding == 0) {
    y = l.weight * x;
  } else {
    // im2col: row (ci * k + tap) holds x(ci, t * stride - padding + tap).
    Tensor cols = Tensor::Zero(static_cast<Eigen::Index>(l.in_channels) * l.kernel, t_out);
    for (Eigen::Index t = 0; t < t_out; ++t) {
      for (int tap = 0; tap < l.kernel; ++tap) {
        const Eigen::Index src = t * l.stride - l.padding + tap;
        if (src < 0 || src >= t_in) continue;
        for (Eigen::Index ci = 0; ci < x.rows(); ++ci) cols(ci * l.kernel + tap, t) = x(ci, src);
      }
    }
    y = l.weight * cols;
  }
  if (l.bias.size() > 0) y.colwise() += l.bias;
  return y;
}

inline Tensor forward(const Deconv1d& l, const Tensor& in, const Eigen::VectorXf& c) {
  const Tensor x = l.concat_class ? with_class(in, c) : in;
  if (x.rows() != l.in_channels)
    throw InvalidArgument("deconv1d: expected " + std::to_string(l.in_channels) + " input channels, got " +
                          std::to_string(x.rows()));
  const Eigen::Index t_in = x.cols();
  const Eigen::Index t_out = (t_in - 1) * l.stride - 2 * l.padding + l.kernel + l.output_padding;
  if (t_out < 1) throw InvalidArgument("deconv1d: output would be empty");
  Tensor y = Tensor::Zero(l.out_channels, t_out);
  for (int tap = 0; tap < l.kernel; ++tap) {
    const Tensor z = l.taps[static_cast<std::size_t>(tap)] * x;
    for (Eigen::Index t = 0; t < t_in; ++t) {
      const Eigen::Index dst = t * l.stride - l.padding + tap;
      if (dst >= 0 && dst < t_out) y.col(dst) += z.col(t);
    }
  }
  if (l.bias.size() > 0) y.colwise() += l.bias;
  return y;
}

inline Tensor forward(const BatchNorm& l, const Tensor& x, const Eigen::VectorXf&) {
  if (x.rows() != l.channels) throw InvalidArgument("batchnorm: channel mismatch");
  const Eigen::ArrayXf scale = l.gamma.array() / (l.running_var.array() + l.eps).sqrt();
  Tensor y(x.rows(), x.cols());
  for (Eigen::Index t = 0; t < x.cols(); ++t)
    y.col(t) = ((x.col(t) - l.running_mean).array() * scale + l.beta.array()).matrix();
  return y;
}

inline Tensor forward(const Glu&, const Tensor& x, const Eigen::VectorXf&) {
  if (x.rows() % 2 != 0) throw InvalidArgument("glu: odd channel count");
  const Eigen::Index h = x.rows() / 2;
  const Eigen::ArrayXXf gate = x.bottomRows(h).array();
  return (x.topRows(h).array() / (1.0f + (-gate).exp())).matrix();
}

inline Tensor forward(const LogCompress& l, const Tensor& x, const Eigen::VectorXf&) {
  return (x.array() + l.eps).log().matrix();
}

inline Tensor run(const Network& net, const Tensor& x, const Eigen::VectorXf& c) {
  if (x.rows() != net.in_channels)
    throw InvalidArgument("network expects " + std::to_string(net.in_channels) + " input channels, got " +
                          std::to_string(x.rows()));
  Tensor h = x;
  for (const auto& layer : net.layers) h = std::visit([&](const auto& l) { return forward(l, h, c); }, layer);
  return h;
}

// ---------------------------------------------------------------------------
// Source-model passes

/// Power map divided by its mean; also returns the mean.
inline std::pair<Eigen::MatrixXd, double> normalize_power(const Eigen::MatrixXd& power) {
  const double mean = power.mean();
  if (!(mean > 0.0) || !std::isfinite(mean)) throw InvalidArgument("power map has no positive energy");
  return {power / mean, mean};
}

namespace detail {

inline Eigen::VectorXf class_vector(const NeuralBundle& b, const Eigen::VectorXd& c) {
  if (c.size() != b.num_classes)
    throw InvalidArgument("class vector has " + std::to_string(c.size()) + " entries, bundle has " +
                          std::to_string(b.num_classes) + " classes");
  return c.cast<float>();
}

inline void check_power(const NeuralBundle& b, const Eigen::MatrixXd& power) {
  if (power.rows() != b.freq_bins)
    throw InvalidArgument("power map has " + std::to_string(power.rows()) + " bins, bundle expects " +
                          std::to_string(b.freq_bins));
  if (power.cols() < 1) throw InvalidArgument("power map has no frames");
}

}  // namespace detail

struct EncoderOutput {
  Eigen::MatrixXd mean;      // latent x frames'
  Eigen::MatrixXd variance;  // > 0
};

/// Variance map sigma^2(f, n) from a latent sequence and class vector.
/// The output is cropped (or edge-extended) to `frames` when frames > 0.
inline Eigen::MatrixXd decoder_forward(const NeuralBundle& b, const Eigen::MatrixXd& z, const Eigen::VectorXd& c,
                                       Eigen::Index frames = 0) {
  if (z.rows() != b.latent_channels)
    throw InvalidArgument("latent has " + std::to_string(z.rows()) + " channels, bundle expects " +
                          std::to_string(b.latent_channels));
  const Tensor logvar = run(b.decoder, z.cast<float>(), detail::class_vector(b, c));
  const Eigen::Index produced = logvar.cols();
  const Eigen::Index n = frames > 0 ? frames : produced;
  Eigen::MatrixXd out(logvar.rows(), n);
  for (Eigen::Index t = 0; t < n; ++t) {
    const Eigen::Index src = std::min(t, produced - 1);
    out.col(t) = logvar.col(src).cast<double>().array().max(-200.0).min(200.0).exp().matrix();
  }
  return out;
}

inline EncoderOutput encoder_forward(const NeuralBundle& b, const Eigen::MatrixXd& power, const Eigen::VectorXd& c) {
  detail::check_power(b, power);
  const auto normalized = normalize_power(power).first;
  const Tensor h = run(b.encoder, normalized.cast<float>(), detail::class_vector(b, c));
  const Eigen::Index d = b.latent_channels;
  EncoderOutput out;
  out.mean = h.topRows(d).cast<double>();
  out.variance = h.bottomRows(d).cast<double>().array().max(-200.0).min(200.0).exp().matrix();
  return out;
}

/// Class posterior: per-frame logits averaged over time, then softmax.
inline Eigen::VectorXd classifier_forward(const NeuralBundle& b, const Eigen::MatrixXd& power) {
  detail::check_power(b, power);
  const auto normalized = normalize_power(power).first;
  const Tensor logits = run(b.classifier, normalized.cast<float>(), Eigen::VectorXf::Zero(b.num_classes));
  const Eigen::VectorXd mean_logits = logits.cast<double>().rowwise().mean();
  const Eigen::ArrayXd e = (mean_logits.array() - mean_logits.maxCoeff()).exp();
  return (e / e.sum()).matrix();
}

// ---------------------------------------------------------------------------
// Shape bookkeeping

namespace detail {

/// Output channel count of `net`, validating every layer along the way.
inline int trace_channels(const Network& net, int num_classes, const std::string& name) {
  int ch = net.in_channels;
  for (std::size_t i = 0; i < net.layers.size(); ++i) {
    const std::string where = name + " layer " + std::to_string(i);
    const auto& layer = net.layers[i];
    if (const auto* cv = std::get_if<Conv1d>(&layer)) {
      const int expected = ch + (cv->concat_class ? num_classes : 0);
      if (cv->in_channels != expected)
        throw FormatError(where + ": conv1d declares " + std::to_string(cv->in_channels) +
                          " input channels, previous layer provides " + std::to_string(expected));
      if (cv->kernel < 1 || cv->stride < 1 || cv->padding < 0) throw FormatError(where + ": bad conv geometry");
      if (cv->weight.rows() != cv->out_channels || cv->weight.cols() != cv->in_channels * cv->kernel)
        throw FormatError(where + ": conv1d weight shape mismatch");
      if (cv->bias.size() != 0 && cv->bias.size() != cv->out_channels)
        throw FormatError(where + ": conv1d bias shape mismatch");
      ch = cv->out_channels;
    } else if (const auto* dc = std::get_if<Deconv1d>(&layer)) {
      const int expected = ch + (dc->concat_class ? num_classes : 0);
      if (dc->in_channels != expected)
        throw FormatError(where + ": deconv1d declares " + std::to_string(dc->in_channels) +
                          " input channels, previous layer provides " + std::to_string(expected));
      if (dc->kernel < 1 || dc->stride < 1 || dc->padding < 0 || dc->output_padding < 0)
        throw FormatError(where + ": bad deconv geometry");
      if (dc->taps.size() != static_cast<std::size_t>(dc->kernel)) throw FormatError(where + ": deconv1d tap count");
      for (const auto& t : dc->taps)
        if (t.rows() != dc->out_channels || t.cols() != dc->in_channels)
          throw FormatError(where + ": deconv1d weight shape mismatch");
      if (dc->bias.size() != 0 && dc->bias.size() != dc->out_channels)
        throw FormatError(where + ": deconv1d bias shape mismatch");
      ch = dc->out_channels;
    } else if (const auto* bn = std::get_if<BatchNorm>(&layer)) {
      if (bn->channels != ch)
        throw FormatError(where + ": batchnorm over " + std::to_string(bn->channels) + " channels, input has " +
                          std::to_string(ch));
      if (bn->gamma.size() != ch || bn->beta.size() != ch || bn->running_mean.size() != ch ||
          bn->running_var.size() != ch)
        throw FormatError(where + ": batchnorm parameter shape mismatch");
    } else if (std::holds_alternative<Glu>(layer)) {
      if (ch % 2 != 0) throw FormatError(where + ": glu over an odd channel count");
      ch /= 2;
    }
  }
  return ch;
}

}  // namespace detail

inline void NeuralBundle::validate() const {
  if (num_classes < 1) throw FormatError("bundle: class count must be positive");
  if (latent_channels < 1) throw FormatError("bundle: latent channel count must be positive");
  if (freq_bins < 1) throw FormatError("bundle: frequency bin count must be positive");
  if (encoder.in_channels != freq_bins) throw FormatError("bundle: encoder input channels must equal freq_bins");
  if (decoder.in_channels != latent_channels)
    throw FormatError("bundle: decoder input channels must equal latent_channels");
  if (classifier.in_channels != freq_bins) throw FormatError("bundle: classifier input channels must equal freq_bins");
  if (detail::trace_channels(encoder, num_classes, "encoder") != 2 * latent_channels)
    throw FormatError("bundle: encoder must emit 2 * latent_channels (mean, log-variance)");
  if (detail::trace_channels(decoder, num_classes, "decoder") != freq_bins)
    throw FormatError("bundle: decoder output channels must equal freq_bins");
  if (detail::trace_channels(classifier, num_classes, "classifier") != num_classes)
    throw FormatError("bundle: classifier output channels must equal the class count");
}

// ---------------------------------------------------------------------------
// FMVAE01 serialisation

namespace detail {

static_assert(std::endian::native == std::endian::little, "FMVAE01 I/O assumes a little-endian host");

struct TensorRef {
  std::string name;
  std::vector<int> shape;
};

inline std::size_t numel(const std::vector<int>& shape) {
  std::size_t n = 1;
  for (int d : shape) n *= static_cast<std::size_t>(d);
  return n;
}

inline Json layer_json(const Layer& layer) {
  return std::visit(
      [](const auto& l) -> Json {
        using T = std::decay_t<decltype(l)>;
        if constexpr (std::is_same_v<T, Conv1d>) {
          return {{"kind", "conv1d"},        {"in_channels", l.in_channels}, {"out_channels", l.out_channels},
                  {"kernel", l.kernel},      {"stride", l.stride},           {"padding", l.padding},
                  {"bias", l.bias.size() > 0}, {"concat_class", l.concat_class}};
        } else if constexpr (std::is_same_v<T, Deconv1d>) {
          return {{"kind", "deconv1d"},      {"in_channels", l.in_channels}, {"out_channels", l.out_channels},
                  {"kernel", l.kernel},      {"stride", l.stride},           {"padding", l.padding},
                  {"output_padding", l.output_padding}, {"bias", l.bias.size() > 0},
                  {"concat_class", l.concat_class}};
        } else if constexpr (std::is_same_v<T, BatchNorm>) {
          return {{"kind", "batchnorm"}, {"channels", l.channels}, {"eps", l.eps}};
        } else if constexpr (std::is_same_v<T, Glu>) {
          return {{"kind", "glu"}};
        } else {
          return {{"kind", "log"}, {"eps", l.eps}};
        }
      },
      layer);
}

/// Tensor table entries for one layer, in payload order.
inline std::vector<TensorRef> layer_tensors(const Layer& layer, const std::string& prefix) {
  std::vector<TensorRef> refs;
  if (const auto* cv = std::get_if<Conv1d>(&layer)) {
    refs.push_back({prefix + ".weight", {cv->out_channels, cv->in_channels, cv->kernel}});
    if (cv->bias.size() > 0) refs.push_back({prefix + ".bias", {cv->out_channels}});
  } else if (const auto* dc = std::get_if<Deconv1d>(&layer)) {
    refs.push_back({prefix + ".weight", {dc->in_channels, dc->out_channels, dc->kernel}});
    if (dc->bias.size() > 0) refs.push_back({prefix + ".bias", {dc->out_channels}});
  } else if (const auto* bn = std::get_if<BatchNorm>(&layer)) {
    for (const char* n : {"weight", "bias", "running_mean", "running_var"})
      refs.push_back({prefix + "." + n, {bn->channels}});
  }
  return refs;
}

template <class T>
T require(const Json& j, const char* key, const std::string& where) {
  if (!j.contains(key)) throw FormatError(where + ": missing field '" + key + "'");
  try {
    return j.at(key).get<T>();
  } catch (const Json::exception& e) {
    throw FormatError(where + ": field '" + key + "' has the wrong type (" + e.what() + ")");
  }
}

/// Layer skeleton (hyperparameters only, tensors unset) from its manifest entry.
inline Layer parse_layer(const Json& j, const std::string& where) {
  const auto kind = require<std::string>(j, "kind", where);
  if (kind == "conv1d") {
    Conv1d l;
    l.in_channels = require<int>(j, "in_channels", where);
    l.out_channels = require<int>(j, "out_channels", where);
    l.kernel = require<int>(j, "kernel", where);
    l.stride = j.value("stride", 1);
    l.padding = j.value("padding", 0);
    l.concat_class = j.value("concat_class", false);
    if (l.in_channels < 1 || l.out_channels < 1 || l.kernel < 1) throw FormatError(where + ": bad conv1d shape");
    if (j.value("bias", true)) l.bias.resize(l.out_channels);
    return l;
  }
  if (kind == "deconv1d") {
    Deconv1d l;
    l.in_channels = require<int>(j, "in_channels", where);
    l.out_channels = require<int>(j, "out_channels", where);
    l.kernel = require<int>(j, "kernel", where);
    l.stride = j.value("stride", 1);
    l.padding = j.value("padding", 0);
    l.output_padding = j.value("output_padding", 0);
    l.concat_class = j.value("concat_class", false);
    if (l.in_channels < 1 || l.out_channels < 1 || l.kernel < 1) throw FormatError(where + ": bad deconv1d shape");
    if (j.value("bias", true)) l.bias.resize(l.out_channels);
    return l;
  }
  if (kind == "batchnorm") {
    BatchNorm l;
    l.channels = require<int>(j, "channels", where);
    l.eps = j.value("eps", 1e-5f);
    if (l.channels < 1) throw FormatError(where + ": bad batchnorm channel count");
    return l;
  }
  if (kind == "glu") return Glu{};
  if (kind == "log") return LogCompress{j.value("eps", 1e-6f)};
  throw FormatError(where + ": unsupported layer kind '" + kind + "'");
}

inline void assign_tensor(Layer& layer, const std::string& field, const float* data) {
  if (auto* cv = std::get_if<Conv1d>(&layer)) {
    if (field == "weight") {
      cv->weight = Eigen::Map<const Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(
          data, cv->out_channels, static_cast<Eigen::Index>(cv->in_channels) * cv->kernel);
    } else {
      cv->bias = Eigen::Map<const Eigen::VectorXf>(data, cv->out_channels);
    }
  } else if (auto* dc = std::get_if<Deconv1d>(&layer)) {
    if (field == "weight") {
      // [in, out, k] -> per-tap out x in
      dc->taps.assign(static_cast<std::size_t>(dc->kernel), Eigen::MatrixXf(dc->out_channels, dc->in_channels));
      for (int ci = 0; ci < dc->in_channels; ++ci)
        for (int co = 0; co < dc->out_channels; ++co)
          for (int k = 0; k < dc->kernel; ++k)
            dc->taps[static_cast<std::size_t>(k)](co, ci) =
                data[(static_cast<std::size_t>(ci) * dc->out_channels + co) * dc->kernel + k];
    } else {
      dc->bias = Eigen::Map<const Eigen::VectorXf>(data, dc->out_channels);
    }
  } else if (auto* bn = std::get_if<BatchNorm>(&layer)) {
    Eigen::VectorXf v = Eigen::Map<const Eigen::VectorXf>(data, bn->channels);
    if (field == "weight") bn->gamma = std::move(v);
    else if (field == "bias") bn->beta = std::move(v);
    else if (field == "running_mean") bn->running_mean = std::move(v);
    else bn->running_var = std::move(v);
  }
}

inline void append_tensor(std::string& out, const Layer& layer, const std::string& field) {
  auto put = [&out](const float* p, std::size_t n) {
    out.append(reinterpret_cast<const char*>(p), n * sizeof(float));
  };
  if (const auto* cv = std::get_if<Conv1d>(&layer)) {
    if (field == "weight") put(cv->weight.data(), static_cast<std::size_t>(cv->weight.size()));
    else put(cv->bias.data(), static_cast<std::size_t>(cv->bias.size()));
  } else if (const auto* dc = std::get_if<Deconv1d>(&layer)) {
    if (field == "weight") {
      std::vector<float> flat(static_cast<std::size_t>(dc->in_channels) * dc->out_channels * dc->kernel);
      for (int ci = 0; ci < dc->in_channels; ++ci)
        for (int co = 0; co < dc->out_channels; ++co)
          for (int k = 0; k < dc->kernel; ++k)
            flat[(static_cast<std::size_t>(ci) * dc->out_channels + co) * dc->kernel + k] =
                dc->taps[static_cast<std::size_t>(k)](co, ci);
      put(flat.data(), flat.size());
    } else {
      put(dc->bias.data(), static_cast<std::size_t>(dc->bias.size()));
    }
  } else if (const auto* bn = std::get_if<BatchNorm>(&layer)) {
    const Eigen::VectorXf* v = field == "weight"         ? &bn->gamma
                               : field == "bias"         ? &bn->beta
                               : field == "running_mean" ? &bn->running_mean
                                                         : &bn->running_var;
    put(v->data(), static_cast<std::size_t>(v->size()));
  }
}

inline const std::pair<const char*, Network NeuralBundle::*> kNetworks[] = {
    {"encoder", &NeuralBundle::encoder},
    {"decoder", &NeuralBundle::decoder},
    {"classifier", &NeuralBundle::classifier},
};

}  // namespace detail

/// Manifest JSON for `b` (architecture, metadata, tensor table).
inline Json bundle_manifest(const NeuralBundle& b) {
  Json m;
  m["format"] = "FMVAE01";
  m["version"] = kBundleVersion;
  m["num_classes"] = b.num_classes;
  m["latent_channels"] = b.latent_channels;
  m["freq_bins"] = b.freq_bins;
  m["conditioning"] = "concat";
  m["input"] = "power_unit_mean";
  m["decoder_output"] = "log_variance";
  m["encoder_output"] = "mean_log_variance";
  m["classifier_pooling"] = "mean_logits_softmax";
  m["metadata"] = b.metadata;
  Json tensors = Json::array();
  for (const auto& [name, member] : detail::kNetworks) {
    const Network& net = b.*member;
    Json layers = Json::array();
    for (std::size_t i = 0; i < net.layers.size(); ++i) {
      layers.push_back(detail::layer_json(net.layers[i]));
      for (const auto& ref : detail::layer_tensors(net.layers[i], std::string(name) + "." + std::to_string(i)))
        tensors.push_back({{"name", ref.name}, {"shape", ref.shape}, {"dtype", "float32"}});
    }
    m[name] = {{"in_channels", net.in_channels}, {"layers", layers}};
  }
  m["tensors"] = tensors;
  return m;
}

inline std::string serialize_bundle(const NeuralBundle& b) {
  b.validate();
  const std::string manifest = bundle_manifest(b).dump();
  std::string out(kBundleMagic, sizeof kBundleMagic);
  const std::uint64_t len = manifest.size();
  out.append(reinterpret_cast<const char*>(&len), sizeof len);
  out += manifest;
  for (const auto& [name, member] : detail::kNetworks) {
    const Network& net = b.*member;
    for (std::size_t i = 0; i < net.layers.size(); ++i)
      for (const auto& ref : detail::layer_tensors(net.layers[i], "x")) {
        detail::append_tensor(out, net.layers[i], ref.name.substr(2));
      }
  }
  return out;
}

inline NeuralBundle parse_bundle(const std::string& bytes) {
  if (bytes.size() < 16 || std::memcmp(bytes.data(), kBundleMagic, sizeof kBundleMagic) != 0)
    throw FormatError("weight file: bad magic (expected FMVAE01)");
  std::uint64_t len = 0;
  std::memcpy(&len, bytes.data() + 8, sizeof len);
  if (len > bytes.size() - 16) throw FormatError("weight file: manifest length exceeds file size");
  Json m;
  try {
    m = Json::parse(bytes.begin() + 16, bytes.begin() + 16 + static_cast<std::ptrdiff_t>(len));
  } catch (const Json::exception& e) {
    throw FormatError(std::string("weight file: manifest is not valid JSON: ") + e.what());
  }
  const std::string where = "weight file manifest";
  if (m.value("format", "") != "FMVAE01") throw FormatError(where + ": format field is not FMVAE01");
  const int version = detail::require<int>(m, "version", where);
  if (version != kBundleVersion) throw FormatError(where + ": unsupported version " + std::to_string(version));
  if (m.value("conditioning", "concat") != "concat")
    throw FormatError(where + ": unsupported conditioning '" + m.value("conditioning", "") + "'");

  NeuralBundle b;
  b.num_classes = detail::require<int>(m, "num_classes", where);
  b.latent_channels = detail::require<int>(m, "latent_channels", where);
  b.freq_bins = detail::require<int>(m, "freq_bins", where);
  b.metadata = m.value("metadata", Json::object());
  for (const auto& [name, member] : detail::kNetworks) {
    const std::string nw = where + ": " + name;
    if (!m.contains(name)) throw FormatError(nw + " missing");
    const Json& jn = m.at(name);
    Network& net = b.*member;
    net.in_channels = detail::require<int>(jn, "in_channels", nw);
    const auto layers = detail::require<Json>(jn, "layers", nw);
    if (!layers.is_array()) throw FormatError(nw + ": layers is not an array");
    for (std::size_t i = 0; i < layers.size(); ++i)
      net.layers.push_back(detail::parse_layer(layers[i], nw + " layer " + std::to_string(i)));
  }

  // The tensor table must list exactly the tensors the architecture implies, in order.
  const auto table = detail::require<Json>(m, "tensors", where);
  std::size_t entry = 0;
  std::size_t offset = 16 + static_cast<std::size_t>(len);
  for (const auto& [name, member] : detail::kNetworks) {
    Network& net = b.*member;
    for (std::size_t i = 0; i < net.layers.size(); ++i) {
      const std::string prefix = std::string(name) + "." + std::to_string(i);
      for (const auto& ref : detail::layer_tensors(net.layers[i], prefix)) {
        if (entry >= table.size()) throw FormatError(where + ": tensor table is missing " + ref.name);
        const Json& t = table[entry++];
        const auto tname = detail::require<std::string>(t, "name", where);
        const auto tshape = detail::require<std::vector<int>>(t, "shape", where);
        if (tname != ref.name) throw FormatError(where + ": expected tensor " + ref.name + ", found " + tname);
        if (tshape != ref.shape) throw FormatError(where + ": tensor " + tname + " has inconsistent shape");
        if (t.value("dtype", "float32") != "float32") throw FormatError(where + ": tensor " + tname + " is not float32");
        const std::size_t bytes_needed = detail::numel(ref.shape) * sizeof(float);
        if (offset + bytes_needed > bytes.size()) throw FormatError("weight file: payload truncated at " + tname);
        std::vector<float> buf(detail::numel(ref.shape));
        std::memcpy(buf.data(), bytes.data() + offset, bytes_needed);
        offset += bytes_needed;
        detail::assign_tensor(net.layers[i], ref.name.substr(prefix.size() + 1), buf.data());
      }
    }
  }
  if (entry != table.size()) throw FormatError(where + ": tensor table lists unused tensors");
  if (offset != bytes.size()) throw FormatError("weight file: trailing bytes after payload");
  b.validate();
  return b;
}

inline NeuralBundle load_bundle(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open weight file " + path.string());
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  try {
    return parse_bundle(bytes);
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

inline void save_bundle(const std::filesystem::path& path, const NeuralBundle& b) {
  const std::string bytes = serialize_bundle(b);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot open " + path.string() + " for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw FormatError("failed writing " + path.string());
}

}  // namespace fastsep::model

#endif  // FASTSEP_NEURAL_HPP_
