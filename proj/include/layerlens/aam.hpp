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

// Additive angular margin softmax and a supervised toy speaker model.
//
// With e and w_j unit-normalized and cos(theta_j) = e . w_j, the logits are
// s * cos(theta_y + m) for the target class and s * cos(theta_j) otherwise,
// followed by softmax cross-entropy.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <string>
#include <vector>

#include "layerlens/toy_encoder.hpp"
#include "layerlens/types.hpp"

namespace layerlens {

struct AamConfig {
  double margin = 0.2;  // radians
  double scale = 30.0;
  Matrix class_weights;  // num_classes x D, unit rows

  void Validate() const {
    Check(margin >= 0.0 && margin < std::numbers::pi / 2, ErrorCode::kInvalidArgument,
          "AAM margin must lie in [0, pi/2)");
    Check(scale > 0.0, ErrorCode::kInvalidArgument, "AAM scale must be positive");
    Check(class_weights.rows() >= 1 && class_weights.cols() >= 1, ErrorCode::kInvalidArgument,
          "AAM needs class weights");
    for (Eigen::Index c = 0; c < class_weights.rows(); ++c)
      Check(std::abs(class_weights.row(c).norm() - 1.0) <= 1e-6, ErrorCode::kInvalidArgument,
            "class weight row " + std::to_string(c) + " is not unit-norm");
  }
};

inline Matrix NormalizeRows(const Matrix& m) {
  Matrix out = m;
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    const double n = m.row(i).norm();
    Check(n > 0.0, ErrorCode::kDegenerateInput, "cannot normalize a zero row");
    out.row(i) /= n;
  }
  return out;
}

struct AamGradients {
  Matrix embeddings;     // d loss / d raw embeddings
  Matrix class_weights;  // d loss / d (unit) class weights
};

// Minimum sin(theta) used in d cos(theta + m) / d cos(theta).
inline constexpr double kAamMinSine = 1e-6;

inline double AamSoftmaxLoss(const Matrix& embeddings, const std::vector<int>& labels,
                             const AamConfig& cfg, AamGradients* grad = nullptr) {
  cfg.Validate();
  const Eigen::Index n = embeddings.rows();
  const Eigen::Index classes = cfg.class_weights.rows();
  Check(n >= 1, ErrorCode::kInvalidArgument, "empty batch");
  Check(static_cast<Eigen::Index>(labels.size()) == n, ErrorCode::kDimensionMismatch,
        "label count differs from batch size");
  Check(embeddings.cols() == cfg.class_weights.cols(), ErrorCode::kDimensionMismatch,
        "embedding dim differs from class weight dim");
  for (int y : labels)
    Check(y >= 0 && y < classes, ErrorCode::kInvalidArgument,
          "label " + std::to_string(y) + " outside [0, " + std::to_string(classes) + ")");

  const Matrix e_hat = NormalizeRows(embeddings);
  const Matrix w_hat = NormalizeRows(cfg.class_weights);
  const Matrix cosine = e_hat * w_hat.transpose();
  const double cm = std::cos(cfg.margin), sm = std::sin(cfg.margin);

  double loss = 0.0;
  Matrix d_cos = Matrix::Zero(n, classes);
  for (Eigen::Index i = 0; i < n; ++i) {
    const int y = labels[static_cast<std::size_t>(i)];
    const double c = std::clamp(cosine(i, y), -1.0, 1.0);
    const double sine = std::sqrt(std::max(0.0, 1.0 - c * c));
    RowVector logits = cfg.scale * cosine.row(i);
    // cos(theta + m) = cos(theta) cos(m) - sin(theta) sin(m)
    logits(y) = cfg.scale * (c * cm - sine * sm);
    const double peak = logits.maxCoeff();
    RowVector e = (logits.array() - peak).exp().matrix();
    const double z = e.sum();
    loss += std::log(z) - (logits(y) - peak);
    if (grad) {
      RowVector d_logits = e / z;
      d_logits(y) -= 1.0;
      d_cos.row(i) = cfg.scale * d_logits;
      d_cos(i, y) *= cm + sm * c / std::max(sine, kAamMinSine);
    }
  }
  const double inv_n = 1.0 / static_cast<double>(n);
  if (grad) {
    d_cos *= inv_n;
    const Matrix d_e_hat = d_cos * w_hat;
    grad->class_weights = d_cos.transpose() * e_hat;
    grad->embeddings.resize(n, embeddings.cols());
    for (Eigen::Index i = 0; i < n; ++i) {
      const double norm = embeddings.row(i).norm();
      const RowVector u = e_hat.row(i);
      grad->embeddings.row(i) = (d_e_hat.row(i) - d_e_hat.row(i).dot(u) * u) / norm;
    }
  }
  return loss * inv_n;
}

struct SupervisedConfig {
  CorpusConfig corpus{.num_classes = 4, .utterances = 80, .frames = 12, .dim = 16,
                      .class_separation = 3.0, .frame_noise = 1.0};
  std::vector<Eigen::Index> layer_dims = {16, 16, 16};
  Nonlinearity activation = Nonlinearity::kTanh;
  double margin = 0.2;
  double scale = 30.0;
  double learning_rate = 0.05;
  int steps = 150;
};

struct SupervisedRun {
  ToyEncoder encoder;
  AamConfig aam;
  std::vector<double> loss_trace;  // loss before each step, then the final loss
  double train_accuracy = 0.0;
  Corpus corpus;
};

inline Matrix PooledEmbeddings(const ToyEncoder& enc, const std::vector<Matrix>& seqs,
                               std::vector<ForwardTrace>* traces = nullptr) {
  Matrix out(static_cast<Eigen::Index>(seqs.size()), enc.output_dim());
  for (std::size_t i = 0; i < seqs.size(); ++i) {
    auto t = Forward(enc, seqs[i]);
    out.row(static_cast<Eigen::Index>(i)) = t.post.back().colwise().mean();
    if (traces) traces->push_back(std::move(t));
  }
  return out;
}

// Nearest class weight by cosine.
inline double CosineAccuracy(const Matrix& embeddings, const std::vector<int>& labels,
                             const Matrix& class_weights) {
  const Matrix scores = NormalizeRows(embeddings) * NormalizeRows(class_weights).transpose();
  std::size_t hits = 0;
  for (Eigen::Index i = 0; i < scores.rows(); ++i) {
    Eigen::Index best = 0;
    scores.row(i).maxCoeff(&best);
    hits += best == labels[static_cast<std::size_t>(i)];
  }
  return static_cast<double>(hits) / static_cast<double>(scores.rows());
}

// Full-batch gradient descent on the AAM objective over mean-pooled encoder
// output. Class weights take a gradient step and are renormalized each step.
inline SupervisedRun TrainSupervisedToy(const SupervisedConfig& cfg, std::uint64_t seed) {
  Check(cfg.steps >= 0, ErrorCode::kInvalidArgument, "steps must be >= 0");
  Check(cfg.learning_rate >= 0.0, ErrorCode::kInvalidArgument, "learning rate must be >= 0");
  SupervisedRun run;
  run.corpus = MakeLabeledCorpus(cfg.corpus, seed);
  EncoderConfig ec;
  ec.input_dim = cfg.corpus.dim;
  ec.layer_dims = cfg.layer_dims;
  ec.activation = cfg.activation;
  run.encoder = MakeToyEncoder(ec, DeriveSeed(seed, 1));
  std::mt19937_64 rng(DeriveSeed(seed, 2));
  run.aam.margin = cfg.margin;
  run.aam.scale = cfg.scale;
  run.aam.class_weights =
      NormalizeRows(GaussianMatrix(cfg.corpus.num_classes, run.encoder.output_dim(), 1.0, rng));

  const auto& seqs = run.corpus.sequences;
  for (int step = 0; step <= cfg.steps; ++step) {
    std::vector<ForwardTrace> traces;
    const Matrix emb = PooledEmbeddings(run.encoder, seqs, &traces);
    AamGradients g;
    const bool last = step == cfg.steps;
    const double loss = AamSoftmaxLoss(emb, run.corpus.labels, run.aam, last ? nullptr : &g);
    Check(std::isfinite(loss), ErrorCode::kDivergence,
          "AAM loss became non-finite at step " + std::to_string(step));
    run.loss_trace.push_back(loss);
    if (last) {
      run.train_accuracy = CosineAccuracy(emb, run.corpus.labels, run.aam.class_weights);
      break;
    }
    std::vector<Matrix> d_weights(run.encoder.depth());
    for (std::size_t i = 0; i < seqs.size(); ++i) {
      const auto rows = seqs[i].rows();
      const Matrix d_out = g.embeddings.row(static_cast<Eigen::Index>(i)).replicate(rows, 1) /
                           static_cast<double>(rows);
      auto gw = Backward(run.encoder, traces[i], d_out);
      for (std::size_t l = 0; l < gw.size(); ++l) {
        if (d_weights[l].size() == 0) d_weights[l] = std::move(gw[l]);
        else d_weights[l] += gw[l];
      }
    }
    for (std::size_t l = 0; l < d_weights.size(); ++l)
      run.encoder.layers[l].weight -= cfg.learning_rate * d_weights[l];
    run.aam.class_weights =
        NormalizeRows(run.aam.class_weights - cfg.learning_rate * g.class_weights);
  }
  return run;
}

}  // namespace layerlens
