// Copyright (c) 2026 The layerlens Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//   http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

// Desk-scale encoders and synthetic corpora.
//
// A ToyEncoder is a stack of frame-wise maps y = f(x W) with no bias and no
// temporal context. Encoding a corpus records every layer's output, which is
// the activation set the similarity and probing code consumes.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <optional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "layerlens/actvstore.hpp"
#include "layerlens/types.hpp"

namespace layerlens {

enum class Nonlinearity { kIdentity, kTanh, kRelu };

inline const char* ToString(Nonlinearity f) {
  switch (f) {
    case Nonlinearity::kIdentity: return "identity";
    case Nonlinearity::kTanh: return "tanh";
    case Nonlinearity::kRelu: return "relu";
  }
  return "?";
}

inline Nonlinearity ParseNonlinearity(const std::string& name) {
  if (name == "identity") return Nonlinearity::kIdentity;
  if (name == "tanh") return Nonlinearity::kTanh;
  if (name == "relu") return Nonlinearity::kRelu;
  throw Error(ErrorCode::kInvalidArgument, "unknown nonlinearity '" + name + "'");
}

inline Matrix Apply(Nonlinearity f, const Matrix& z) {
  switch (f) {
    case Nonlinearity::kIdentity: return z;
    case Nonlinearity::kTanh: return z.array().tanh().matrix();
    case Nonlinearity::kRelu: return z.cwiseMax(0.0);
  }
  return z;
}

// f'(z) given z and y = f(z).
inline Matrix Derivative(Nonlinearity f, const Matrix& z, const Matrix& y) {
  switch (f) {
    case Nonlinearity::kIdentity: return Matrix::Ones(z.rows(), z.cols());
    case Nonlinearity::kTanh: return (1.0 - y.array().square()).matrix();
    case Nonlinearity::kRelu: return (z.array() > 0.0).cast<double>().matrix();
  }
  return Matrix::Ones(z.rows(), z.cols());
}

struct ToyLayer {
  Matrix weight;  // d_in x d_out
  Nonlinearity activation = Nonlinearity::kTanh;
};

struct ToyEncoder {
  std::vector<ToyLayer> layers;
  std::uint64_t seed = 0;

  std::size_t depth() const { return layers.size(); }
  Eigen::Index input_dim() const { return layers.empty() ? 0 : layers.front().weight.rows(); }
  Eigen::Index output_dim() const { return layers.empty() ? 0 : layers.back().weight.cols(); }

  void Validate() const {
    Check(!layers.empty(), ErrorCode::kInvalidArgument, "encoder has no layers");
    for (std::size_t l = 0; l < layers.size(); ++l) {
      Check(layers[l].weight.size() > 0, ErrorCode::kDimensionMismatch,
            "layer " + std::to_string(l) + " has an empty weight");
      Check(layers[l].weight.allFinite(), ErrorCode::kNonFinite,
            "layer " + std::to_string(l) + " weight");
      if (l > 0)
        Check(layers[l].weight.rows() == layers[l - 1].weight.cols(),
              ErrorCode::kDimensionMismatch,
              "layer " + std::to_string(l) + " input dim does not chain with layer " +
                  std::to_string(l - 1));
    }
  }
};

enum class InitStyle {
  kGaussian,      // N(0, scale^2 / d_in)
  kNearIdentity,  // I + N(0, scale^2 / d_in); needs square layers
};

// Perturbation scale for near-identity ("smooth") encoders. Small enough that
// similarity decays steadily with layer distance.
inline constexpr double kSmoothInitScale = 0.2;

struct Bottleneck {
  int depth = 0;  // 0-based layer index
  int rank = 1;
};

struct EncoderConfig {
  Eigen::Index input_dim = 16;
  std::vector<Eigen::Index> layer_dims = {16, 16, 16, 16};
  Nonlinearity activation = Nonlinearity::kTanh;
  InitStyle init = InitStyle::kGaussian;
  double init_scale = 1.0;
  // The bottleneck layer gets a rank-limited weight and no nonlinearity.
  std::optional<Bottleneck> bottleneck;
};

inline Matrix GaussianMatrix(Eigen::Index rows, Eigen::Index cols, double stddev,
                             std::mt19937_64& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = stddev * normal(rng);
  return m;
}

inline ToyEncoder MakeToyEncoder(const EncoderConfig& cfg, std::uint64_t seed) {
  Check(!cfg.layer_dims.empty(), ErrorCode::kInvalidArgument, "encoder depth must be >= 1");
  Check(cfg.input_dim >= 1, ErrorCode::kInvalidArgument, "input dim must be >= 1");
  for (auto d : cfg.layer_dims)
    Check(d >= 1, ErrorCode::kInvalidArgument, "layer dims must be >= 1");
  Check(std::isfinite(cfg.init_scale) && cfg.init_scale >= 0.0, ErrorCode::kInvalidArgument,
        "init scale must be finite and >= 0");
  if (cfg.bottleneck) {
    Check(cfg.bottleneck->depth >= 0 &&
              cfg.bottleneck->depth < static_cast<int>(cfg.layer_dims.size()),
          ErrorCode::kInvalidArgument, "bottleneck depth outside the encoder");
    Check(cfg.bottleneck->rank >= 1, ErrorCode::kInvalidArgument, "bottleneck rank must be >= 1");
  }

  std::mt19937_64 rng(seed);
  ToyEncoder enc;
  enc.seed = seed;
  Eigen::Index d_in = cfg.input_dim;
  for (std::size_t l = 0; l < cfg.layer_dims.size(); ++l) {
    const Eigen::Index d_out = cfg.layer_dims[l];
    const double stddev = cfg.init_scale / std::sqrt(static_cast<double>(d_in));
    ToyLayer layer;
    layer.activation = cfg.activation;
    if (cfg.bottleneck && cfg.bottleneck->depth == static_cast<int>(l)) {
      const Eigen::Index r = cfg.bottleneck->rank;
      const Matrix u = GaussianMatrix(d_in, r, 1.0 / std::sqrt(static_cast<double>(d_in)), rng);
      const Matrix v = GaussianMatrix(r, d_out, 1.0 / std::sqrt(static_cast<double>(r)), rng);
      layer.weight = u * v;
      layer.activation = Nonlinearity::kIdentity;
    } else if (cfg.init == InitStyle::kNearIdentity) {
      Check(d_in == d_out, ErrorCode::kDimensionMismatch,
            "near-identity init needs square layers");
      layer.weight = Matrix::Identity(d_in, d_out) + GaussianMatrix(d_in, d_out, stddev, rng);
    } else {
      layer.weight = GaussianMatrix(d_in, d_out, stddev, rng);
    }
    enc.layers.push_back(std::move(layer));
    d_in = d_out;
  }
  enc.Validate();
  return enc;
}

// Per-layer pre- and post-activation values of one forward pass.
struct ForwardTrace {
  Matrix input;
  std::vector<Matrix> pre;
  std::vector<Matrix> post;
};

inline ForwardTrace Forward(const ToyEncoder& enc, const Matrix& x) {
  Check(x.cols() == enc.input_dim(), ErrorCode::kDimensionMismatch,
        "input dim " + std::to_string(x.cols()) + " != encoder input dim " +
            std::to_string(enc.input_dim()));
  ForwardTrace t;
  t.input = x;
  t.pre.reserve(enc.depth());
  t.post.reserve(enc.depth());
  const Matrix* prev = &t.input;
  for (const auto& layer : enc.layers) {
    t.pre.push_back(*prev * layer.weight);
    t.post.push_back(Apply(layer.activation, t.pre.back()));
    prev = &t.post.back();
  }
  return t;
}

// Weight gradients of a scalar objective given d objective / d (last output).
inline std::vector<Matrix> Backward(const ToyEncoder& enc, const ForwardTrace& t,
                                    const Matrix& d_output) {
  std::vector<Matrix> grads(enc.depth());
  Matrix d_post = d_output;
  for (std::size_t l = enc.depth(); l-- > 0;) {
    const Matrix d_pre =
        (d_post.array() *
         Derivative(enc.layers[l].activation, t.pre[l], t.post[l]).array()).matrix();
    const Matrix& below = l == 0 ? t.input : t.post[l - 1];
    grads[l] = below.transpose() * d_pre;
    if (l > 0) d_post = d_pre * enc.layers[l].weight.transpose();
  }
  return grads;
}

inline std::string UtteranceId(std::size_t index) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "utt%05zu", index);
  return buf;
}

struct Corpus {
  std::vector<Matrix> sequences;
  std::vector<int> labels;
  std::vector<std::string> utterance_ids;
  int num_classes = 0;
};

inline ActivationSet Encode(const ToyEncoder& enc, const std::vector<Matrix>& inputs,
                            const std::string& model_name = "toy",
                            std::vector<std::string> utterance_ids = {}) {
  enc.Validate();
  Check(!inputs.empty(), ErrorCode::kInvalidArgument, "encode needs at least one sequence");
  if (utterance_ids.empty())
    for (std::size_t i = 0; i < inputs.size(); ++i) utterance_ids.push_back(UtteranceId(i));
  Check(utterance_ids.size() == inputs.size(), ErrorCode::kDimensionMismatch,
        "utterance id count differs from sequence count");
  ActivationSet set;
  set.model_name = model_name;
  set.utterance_ids = std::move(utterance_ids);
  set.layers.resize(enc.depth());
  for (std::size_t l = 0; l < enc.depth(); ++l) set.layers[l].layer_id = static_cast<int>(l);
  for (const auto& x : inputs) {
    auto trace = Forward(enc, x);
    for (std::size_t l = 0; l < enc.depth(); ++l)
      set.layers[l].sequences.push_back(trace.post[l].cast<float>());
  }
  set.Validate();
  return set;
}

struct CorpusConfig {
  int num_classes = 4;
  int utterances = 40;
  int frames = 16;
  Eigen::Index dim = 16;
  // Distance scale of class means relative to unit frame noise.
  double class_separation = 2.0;
  double frame_noise = 1.0;
};

// Frames of utterance u are mu_{label(u)} + frame_noise * N(0, I); class means are
// Gaussian with per-coordinate stddev class_separation / sqrt(dim). Labels cycle
// through the classes so every class is represented.
inline Corpus MakeLabeledCorpus(const CorpusConfig& cfg, std::uint64_t seed) {
  Check(cfg.num_classes >= 1 && cfg.utterances >= 1 && cfg.frames >= 1 && cfg.dim >= 1,
        ErrorCode::kInvalidArgument, "corpus sizes must be positive");
  std::mt19937_64 rng(seed);
  const Matrix means = GaussianMatrix(cfg.num_classes, cfg.dim,
                                      cfg.class_separation / std::sqrt(double(cfg.dim)), rng);
  Corpus c;
  c.num_classes = cfg.num_classes;
  for (int u = 0; u < cfg.utterances; ++u) {
    const int y = u % cfg.num_classes;
    Matrix x = GaussianMatrix(cfg.frames, cfg.dim, cfg.frame_noise, rng);
    x.rowwise() += means.row(y);
    c.sequences.push_back(std::move(x));
    c.labels.push_back(y);
    c.utterance_ids.push_back(UtteranceId(static_cast<std::size_t>(u)));
  }
  return c;
}

struct ProbeDatasetConfig {
  int num_layers = 6;
  int planted_layer = 0;
  int num_classes = 2;
  int utterances = 200;
  int frames = 10;
  // Either one dim for every layer, or one entry per layer.
  std::vector<Eigen::Index> dims = {8};
  double separation = 1.0;
  double noise = 1.0;
};

struct ProbeDataset {
  ActivationSet set;
  std::vector<int> labels;
  int num_classes = 0;
};

// Layer planted_layer carries class means of norm `separation` on top of noise;
// every other layer is label-independent noise with the same per-frame stddev.
inline ProbeDataset GenProbeDataset(const ProbeDatasetConfig& cfg, std::uint64_t seed) {
  Check(cfg.num_layers >= 1, ErrorCode::kInvalidArgument, "need at least one layer");
  Check(cfg.planted_layer >= 0 && cfg.planted_layer < cfg.num_layers,
        ErrorCode::kInvalidArgument,
        "planted layer " + std::to_string(cfg.planted_layer) + " outside [0, " +
            std::to_string(cfg.num_layers) + ")");
  Check(cfg.num_classes >= 2 && cfg.utterances >= 2 && cfg.frames >= 1,
        ErrorCode::kInvalidArgument, "probe dataset sizes are too small");
  Check(cfg.dims.size() == 1 || cfg.dims.size() == static_cast<std::size_t>(cfg.num_layers),
        ErrorCode::kDimensionMismatch, "dims must hold one entry or one per layer");
  for (auto d : cfg.dims) Check(d >= 1, ErrorCode::kInvalidArgument, "layer dims must be >= 1");

  auto dim_of = [&](int l) { return cfg.dims.size() == 1 ? cfg.dims[0] : cfg.dims[l]; };
  std::mt19937_64 rng(seed);
  const Eigen::Index planted_dim = dim_of(cfg.planted_layer);
  Matrix means = GaussianMatrix(cfg.num_classes, planted_dim, 1.0, rng);
  for (Eigen::Index c = 0; c < means.rows(); ++c)
    means.row(c) *= cfg.separation / std::max(means.row(c).norm(), 1e-12);

  ProbeDataset ds;
  ds.num_classes = cfg.num_classes;
  ds.set.model_name = "planted";
  ds.set.layers.resize(static_cast<std::size_t>(cfg.num_layers));
  for (int l = 0; l < cfg.num_layers; ++l) ds.set.layers[static_cast<std::size_t>(l)].layer_id = l;
  std::vector<int> labels(static_cast<std::size_t>(cfg.utterances));
  for (int u = 0; u < cfg.utterances; ++u) labels[static_cast<std::size_t>(u)] = u % cfg.num_classes;
  std::shuffle(labels.begin(), labels.end(), rng);
  for (int u = 0; u < cfg.utterances; ++u) {
    ds.set.utterance_ids.push_back(UtteranceId(static_cast<std::size_t>(u)));
    for (int l = 0; l < cfg.num_layers; ++l) {
      Matrix x = GaussianMatrix(cfg.frames, dim_of(l), cfg.noise, rng);
      if (l == cfg.planted_layer) x.rowwise() += means.row(labels[static_cast<std::size_t>(u)]);
      ds.set.layers[static_cast<std::size_t>(l)].sequences.push_back(x.cast<float>());
    }
  }
  ds.labels = std::move(labels);
  ds.set.Validate();
  return ds;
}

}  // namespace layerlens
