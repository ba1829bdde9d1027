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

// Weighted-sum layer probing.
//
// The combiner mixes L layer outputs with convex weights w = softmax(logits),
// optionally passing each layer through its own bias-free projection first:
//
//   combined = sum_l w_l * (x_l A_l)        (frames are row vectors)
//
// A probe feeds the mean-pooled combination to a linear softmax classifier and
// trains logits, projections and head jointly by full-batch gradient descent.
// Layer importance is read off as w_l * ||A_l||_F.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "layerlens/actvstore.hpp"
#include "layerlens/types.hpp"

namespace layerlens {

inline Vector Softmax(const Vector& logits) {
  Check(logits.size() >= 1, ErrorCode::kInvalidArgument, "softmax of an empty vector");
  const double peak = logits.maxCoeff();
  Vector e = (logits.array() - peak).exp().matrix();
  return e / e.sum();
}

template <typename Derived>
RowVector MeanPool(const Eigen::MatrixBase<Derived>& seq) {
  Check(seq.rows() >= 1, ErrorCode::kInvalidArgument, "mean pool of an empty sequence");
  return seq.template cast<double>().colwise().mean();
}

struct WeightedSumCombiner {
  Vector logits;
  // Empty when projections are disabled; otherwise one D_l x out_dim matrix per layer.
  std::vector<Matrix> projections;
  Eigen::Index out_dim = 0;

  bool has_projections() const { return !projections.empty(); }
  std::size_t num_layers() const { return static_cast<std::size_t>(logits.size()); }
  Vector weights() const { return Softmax(logits); }

  // Checks shapes against the per-layer input dims.
  void Validate(const std::vector<Eigen::Index>& layer_dims) const {
    Check(logits.size() >= 1, ErrorCode::kInvalidArgument, "combiner has no layers");
    Check(static_cast<std::size_t>(logits.size()) == layer_dims.size(),
          ErrorCode::kDimensionMismatch,
          "combiner has " + std::to_string(logits.size()) + " logits for " +
              std::to_string(layer_dims.size()) + " layers");
    Check(logits.allFinite(), ErrorCode::kNonFinite, "combiner logits");
    if (has_projections()) {
      Check(projections.size() == layer_dims.size(), ErrorCode::kMissingProjection,
            "one projection per layer is required");
      for (std::size_t l = 0; l < projections.size(); ++l) {
        Check(projections[l].rows() == layer_dims[l] && projections[l].cols() == out_dim,
              ErrorCode::kDimensionMismatch,
              "projection " + std::to_string(l) + " is " + std::to_string(projections[l].rows()) +
                  "x" + std::to_string(projections[l].cols()) + ", expected " +
                  std::to_string(layer_dims[l]) + "x" + std::to_string(out_dim));
      }
    } else {
      for (std::size_t l = 0; l < layer_dims.size(); ++l) {
        Check(layer_dims[l] == out_dim, ErrorCode::kMissingProjection,
              "layer " + std::to_string(l) + " has dim " + std::to_string(layer_dims[l]) +
                  " but the combined dim is " + std::to_string(out_dim) +
                  "; heterogeneous layer dims need projections");
      }
    }
  }
};

template <typename MatrixType>
Matrix Combine(const WeightedSumCombiner& combiner, const std::vector<MatrixType>& layers) {
  std::vector<Eigen::Index> dims;
  for (const auto& x : layers) dims.push_back(x.cols());
  combiner.Validate(dims);
  const Eigen::Index frames = layers.front().rows();
  for (std::size_t l = 0; l < layers.size(); ++l) {
    Check(layers[l].rows() == frames, ErrorCode::kDimensionMismatch,
          "layer " + std::to_string(l) + " has " + std::to_string(layers[l].rows()) +
              " frames, expected " + std::to_string(frames));
  }
  const Vector w = combiner.weights();
  Matrix out = Matrix::Zero(frames, combiner.out_dim);
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const Matrix x = layers[l].template cast<double>();
    if (combiner.has_projections())
      out.noalias() += w(static_cast<Eigen::Index>(l)) * (x * combiner.projections[l]);
    else
      out += w(static_cast<Eigen::Index>(l)) * x;
  }
  return out;
}

inline std::vector<double> ContributionScores(const WeightedSumCombiner& combiner) {
  const Vector w = combiner.weights();
  std::vector<double> scores(combiner.num_layers());
  for (std::size_t l = 0; l < scores.size(); ++l) {
    const double wl = w(static_cast<Eigen::Index>(l));
    scores[l] = combiner.has_projections() ? wl * combiner.projections[l].norm() : wl;
  }
  return scores;
}

struct ProbeTask {
  ActivationSet inputs;
  std::vector<int> labels;
  int num_classes = 0;

  void Validate() const {
    inputs.Validate();
    Check(labels.size() == inputs.num_sequences(), ErrorCode::kDimensionMismatch,
          std::to_string(labels.size()) + " labels for " + std::to_string(inputs.num_sequences()) +
              " utterances");
    Check(num_classes >= 2, ErrorCode::kInvalidArgument, "a probe needs at least 2 classes");
    for (std::size_t u = 0; u < labels.size(); ++u) {
      Check(labels[u] >= 0 && labels[u] < num_classes, ErrorCode::kInvalidArgument,
            "label " + std::to_string(labels[u]) + " of utterance " + inputs.utterance_ids[u] +
                " is outside [0, " + std::to_string(num_classes) + ")");
    }
    // Frame-level layers of one utterance must share a frame axis for combining.
    for (std::size_t u = 0; u < labels.size(); ++u) {
      Eigen::Index frames = -1;
      for (const auto& layer : inputs.layers) {
        if (layer.is_segment_level) continue;
        const auto t = layer.sequences[u].rows();
        Check(frames < 0 || t == frames, ErrorCode::kDimensionMismatch,
              "utterance " + inputs.utterance_ids[u] + ": frame-level layers disagree on length");
        frames = t;
      }
    }
  }

  std::vector<Eigen::Index> layer_dims() const {
    std::vector<Eigen::Index> dims;
    for (const auto& layer : inputs.layers) dims.push_back(layer.dim());
    return dims;
  }
};

struct ProbeParams {
  WeightedSumCombiner combiner;
  Matrix head_weight;  // out_dim x num_classes
  RowVector head_bias;  // num_classes
};

struct ProbeConfig {
  bool use_projections = true;
  // Combined dimension with projections on; 0 means the largest layer dim.
  Eigen::Index out_dim = 0;
  double learning_rate = 0.5;
  int steps = 300;
  double weight_decay = 1e-3;
  double train_fraction = 0.8;
};

// Mean-pooled layer features, one N x D_l matrix per layer. Mean pooling
// commutes with the frame-wise combination, so the probe works on these.
struct PooledFeatures {
  std::vector<Matrix> layers;

  std::size_t num_utterances() const {
    return layers.empty() ? 0 : static_cast<std::size_t>(layers.front().rows());
  }
};

inline PooledFeatures PoolTask(const ProbeTask& task) {
  PooledFeatures pooled;
  const auto n = static_cast<Eigen::Index>(task.inputs.num_sequences());
  for (const auto& layer : task.inputs.layers) {
    Matrix m(n, layer.dim());
    for (Eigen::Index u = 0; u < n; ++u)
      m.row(u) = MeanPool(layer.sequences[static_cast<std::size_t>(u)]);
    pooled.layers.push_back(std::move(m));
  }
  return pooled;
}

// Parameter gradients in the same shapes as ProbeParams.
struct ProbeGradients {
  Vector logits;
  std::vector<Matrix> projections;
  Matrix head_weight;
  RowVector head_bias;
};

// Mean cross-entropy over `rows` plus 0.5 * weight_decay * (sum ||A_l||^2 + ||W||^2).
inline double ProbeLoss(const ProbeParams& p, const PooledFeatures& feats,
                        const std::vector<int>& labels, const std::vector<std::size_t>& rows,
                        double weight_decay, ProbeGradients* grad = nullptr) {
  const auto& comb = p.combiner;
  const std::size_t num_layers = comb.num_layers();
  const auto n = static_cast<Eigen::Index>(rows.size());
  Check(n >= 1, ErrorCode::kInvalidArgument, "probe loss over zero utterances");
  const Vector w = comb.weights();

  std::vector<Matrix> per_layer(num_layers);
  Matrix z = Matrix::Zero(n, comb.out_dim);
  for (std::size_t l = 0; l < num_layers; ++l) {
    Matrix x(n, feats.layers[l].cols());
    for (Eigen::Index i = 0; i < n; ++i) x.row(i) = feats.layers[l].row(
        static_cast<Eigen::Index>(rows[static_cast<std::size_t>(i)]));
    per_layer[l] = comb.has_projections() ? Matrix(x * comb.projections[l]) : x;
    z += w(static_cast<Eigen::Index>(l)) * per_layer[l];
  }
  Matrix scores = z * p.head_weight;
  scores.rowwise() += p.head_bias;

  double loss = 0.0;
  Matrix dscores(n, scores.cols());
  for (Eigen::Index i = 0; i < n; ++i) {
    const double peak = scores.row(i).maxCoeff();
    RowVector e = (scores.row(i).array() - peak).exp().matrix();
    const double denom = e.sum();
    const int y = labels[rows[static_cast<std::size_t>(i)]];
    loss -= (scores(i, y) - peak) - std::log(denom);
    dscores.row(i) = e / denom;
    dscores(i, y) -= 1.0;
  }
  loss /= static_cast<double>(n);
  dscores /= static_cast<double>(n);

  double reg = p.head_weight.squaredNorm();
  for (const auto& a : comb.projections) reg += a.squaredNorm();
  loss += 0.5 * weight_decay * reg;

  if (grad) {
    grad->head_weight = z.transpose() * dscores + weight_decay * p.head_weight;
    grad->head_bias = dscores.colwise().sum();
    const Matrix dz = dscores * p.head_weight.transpose();
    Vector dw(static_cast<Eigen::Index>(num_layers));
    grad->projections.clear();
    for (std::size_t l = 0; l < num_layers; ++l) {
      const auto li = static_cast<Eigen::Index>(l);
      dw(li) = (dz.array() * per_layer[l].array()).sum();
      if (comb.has_projections()) {
        Matrix x(n, feats.layers[l].cols());
        for (Eigen::Index i = 0; i < n; ++i) x.row(i) = feats.layers[l].row(
            static_cast<Eigen::Index>(rows[static_cast<std::size_t>(i)]));
        grad->projections.push_back(w(li) * (x.transpose() * dz) +
                                    weight_decay * comb.projections[l]);
      }
    }
    // Softmax Jacobian: d logit_k = w_k (dw_k - sum_l w_l dw_l).
    grad->logits = (w.array() * (dw.array() - w.dot(dw))).matrix();
  }
  return loss;
}

inline int ArgMax(const std::vector<double>& v) {
  return static_cast<int>(std::max_element(v.begin(), v.end()) - v.begin());
}

inline std::vector<int> PredictProbe(const ProbeParams& p, const PooledFeatures& feats,
                                     const std::vector<std::size_t>& rows) {
  const Vector w = p.combiner.weights();
  std::vector<int> out;
  for (auto r : rows) {
    RowVector z = RowVector::Zero(p.combiner.out_dim);
    for (std::size_t l = 0; l < feats.layers.size(); ++l) {
      const RowVector x = feats.layers[l].row(static_cast<Eigen::Index>(r));
      z += w(static_cast<Eigen::Index>(l)) *
           (p.combiner.has_projections() ? RowVector(x * p.combiner.projections[l]) : x);
    }
    RowVector s = z * p.head_weight + p.head_bias;
    Eigen::Index best = 0;
    s.maxCoeff(&best);
    out.push_back(static_cast<int>(best));
  }
  return out;
}

struct ProbeSplit {
  std::vector<std::size_t> train;
  std::vector<std::size_t> held_out;
};

// Seeded shuffle of utterance order; the first train_fraction goes to training.
inline ProbeSplit MakeSplit(std::size_t count, double train_fraction, std::uint64_t seed) {
  Check(count >= 2, ErrorCode::kInvalidArgument, "a train/held-out split needs >= 2 utterances");
  Check(train_fraction > 0.0 && train_fraction < 1.0, ErrorCode::kInvalidArgument,
        "train fraction must lie in (0, 1)");
  std::vector<std::size_t> order(count);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  auto n_train = static_cast<std::size_t>(std::lround(train_fraction * static_cast<double>(count)));
  n_train = std::clamp<std::size_t>(n_train, 1, count - 1);
  ProbeSplit split;
  split.train.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_train));
  split.held_out.assign(order.begin() + static_cast<std::ptrdiff_t>(n_train), order.end());
  return split;
}

inline ProbeParams InitProbeParams(const std::vector<Eigen::Index>& layer_dims, int num_classes,
                                   const ProbeConfig& cfg, std::uint64_t seed) {
  ProbeParams p;
  auto& comb = p.combiner;
  comb.logits = Vector::Zero(static_cast<Eigen::Index>(layer_dims.size()));
  const Eigen::Index max_dim = *std::max_element(layer_dims.begin(), layer_dims.end());
  if (cfg.use_projections) {
    comb.out_dim = cfg.out_dim > 0 ? cfg.out_dim : max_dim;
    std::mt19937_64 rng(DeriveSeed(seed, 1));
    std::normal_distribution<double> normal(0.0, 1.0);
    for (auto d : layer_dims) {
      Matrix a(d, comb.out_dim);
      for (Eigen::Index i = 0; i < a.size(); ++i) a.data()[i] = normal(rng);
      // Columns then have roughly unit norm, so x A_l keeps the scale of x.
      comb.projections.push_back(a / std::sqrt(static_cast<double>(d)));
    }
  } else {
    comb.out_dim = layer_dims.front();
  }
  comb.Validate(layer_dims);
  p.head_weight = Matrix::Zero(comb.out_dim, num_classes);
  p.head_bias = RowVector::Zero(num_classes);
  return p;
}

struct ProbeResult {
  ProbeParams params;
  double accuracy = 0.0;  // held-out
  double train_accuracy = 0.0;
  double majority_baseline = 0.0;  // held-out share of the most frequent training class
  std::vector<double> weights;  // softmax(logits)
  std::vector<double> contribution;  // w_l * ||A_l||_F, or w_l without projections
  std::vector<double> loss_trace;  // training loss before each step, then the final loss
  ProbeSplit split;
};

namespace detail {

inline double Accuracy(const std::vector<int>& predicted, const std::vector<int>& labels,
                       const std::vector<std::size_t>& rows) {
  if (rows.empty()) return 0.0;
  std::size_t hits = 0;
  for (std::size_t i = 0; i < rows.size(); ++i) hits += predicted[i] == labels[rows[i]];
  return static_cast<double>(hits) / static_cast<double>(rows.size());
}

}  // namespace detail

inline ProbeResult TrainProbe(const ProbeTask& task, const ProbeConfig& cfg, std::uint64_t seed) {
  task.Validate();
  Check(cfg.steps >= 0, ErrorCode::kInvalidArgument, "steps must be >= 0");
  Check(cfg.learning_rate >= 0.0 && std::isfinite(cfg.learning_rate),
        ErrorCode::kInvalidArgument, "learning rate must be finite and >= 0");
  Check(cfg.weight_decay >= 0.0, ErrorCode::kInvalidArgument, "weight decay must be >= 0");

  const PooledFeatures feats = PoolTask(task);
  ProbeResult result;
  result.split = MakeSplit(task.labels.size(), cfg.train_fraction, seed);
  result.params = InitProbeParams(task.layer_dims(), task.num_classes, cfg, seed);
  auto& p = result.params;

  const auto& train = result.split.train;
  ProbeGradients g;
  for (int step = 0; step < cfg.steps; ++step) {
    const double loss = ProbeLoss(p, feats, task.labels, train, cfg.weight_decay, &g);
    Check(std::isfinite(loss), ErrorCode::kDivergence,
          "probe loss became non-finite at iteration " + std::to_string(step));
    result.loss_trace.push_back(loss);
    p.combiner.logits -= cfg.learning_rate * g.logits;
    for (std::size_t l = 0; l < p.combiner.projections.size(); ++l)
      p.combiner.projections[l] -= cfg.learning_rate * g.projections[l];
    p.head_weight -= cfg.learning_rate * g.head_weight;
    p.head_bias -= cfg.learning_rate * g.head_bias;
  }
  const double final_loss = ProbeLoss(p, feats, task.labels, train, cfg.weight_decay);
  Check(std::isfinite(final_loss), ErrorCode::kDivergence,
        "probe loss became non-finite at iteration " + std::to_string(cfg.steps));
  result.loss_trace.push_back(final_loss);

  result.train_accuracy = detail::Accuracy(PredictProbe(p, feats, train), task.labels, train);
  result.accuracy = detail::Accuracy(PredictProbe(p, feats, result.split.held_out), task.labels,
                                     result.split.held_out);
  std::vector<int> counts(static_cast<std::size_t>(task.num_classes), 0);
  for (auto r : train) ++counts[static_cast<std::size_t>(task.labels[r])];
  const int majority = static_cast<int>(std::max_element(counts.begin(), counts.end()) - counts.begin());
  std::size_t majority_hits = 0;
  for (auto r : result.split.held_out) majority_hits += task.labels[r] == majority;
  result.majority_baseline =
      static_cast<double>(majority_hits) / static_cast<double>(result.split.held_out.size());
  const Vector w = p.combiner.weights();
  result.weights.assign(w.data(), w.data() + w.size());
  result.contribution = ContributionScores(p.combiner);
  return result;
}

struct GradientCheckReport {
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
  std::size_t num_params = 0;
};

// Relative errors below are |analytic - numeric| / max(|analytic|, |numeric|, floor).
inline constexpr double kGradientCheckFloor = 1e-5;

namespace detail {

// Visits every scalar parameter by reference, in a fixed order.
template <typename Fn>
void ForEachParam(ProbeParams& p, Fn fn) {
  for (Eigen::Index i = 0; i < p.combiner.logits.size(); ++i) fn(p.combiner.logits(i));
  for (auto& a : p.combiner.projections)
    for (Eigen::Index i = 0; i < a.size(); ++i) fn(a.data()[i]);
  for (Eigen::Index i = 0; i < p.head_weight.size(); ++i) fn(p.head_weight.data()[i]);
  for (Eigen::Index i = 0; i < p.head_bias.size(); ++i) fn(p.head_bias(i));
}

inline std::vector<double> FlattenGradients(const ProbeGradients& g) {
  std::vector<double> out(g.logits.data(), g.logits.data() + g.logits.size());
  for (const auto& a : g.projections) out.insert(out.end(), a.data(), a.data() + a.size());
  out.insert(out.end(), g.head_weight.data(), g.head_weight.data() + g.head_weight.size());
  out.insert(out.end(), g.head_bias.data(), g.head_bias.data() + g.head_bias.size());
  return out;
}

}  // namespace detail

// Compares the analytic gradient of the training loss with central differences
// (f(x + eps) - f(x - eps)) / (2 eps) for every parameter.
inline GradientCheckReport GradientCheck(const ProbeTask& task, const ProbeParams& params,
                                         double epsilon, double weight_decay = 1e-3,
                                         std::vector<std::size_t> rows = {}) {
  task.Validate();
  Check(epsilon >= 1e-7 && epsilon <= 1e-3, ErrorCode::kInvalidArgument,
        "epsilon must lie in [1e-7, 1e-3]");
  params.combiner.Validate(task.layer_dims());
  const PooledFeatures feats = PoolTask(task);
  if (rows.empty()) {
    rows.resize(task.labels.size());
    std::iota(rows.begin(), rows.end(), std::size_t{0});
  }
  ProbeGradients g;
  ProbeLoss(params, feats, task.labels, rows, weight_decay, &g);
  const auto analytic = detail::FlattenGradients(g);

  ProbeParams probe = params;
  GradientCheckReport report;
  std::size_t idx = 0;
  detail::ForEachParam(probe, [&](double& v) {
    const double saved = v;
    v = saved + epsilon;
    const double up = ProbeLoss(probe, feats, task.labels, rows, weight_decay);
    v = saved - epsilon;
    const double down = ProbeLoss(probe, feats, task.labels, rows, weight_decay);
    v = saved;
    const double numeric = (up - down) / (2.0 * epsilon);
    const double a = analytic[idx++];
    const double abs_err = std::abs(a - numeric);
    const double denom = std::max({std::abs(a), std::abs(numeric), kGradientCheckFloor});
    report.max_abs_error = std::max(report.max_abs_error, abs_err);
    report.max_rel_error = std::max(report.max_rel_error, abs_err / denom);
  });
  report.num_params = idx;
  return report;
}

}  // namespace layerlens
