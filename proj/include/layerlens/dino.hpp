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

// Toy self-distillation with an EMA teacher.
//
// Student and teacher share the architecture backbone -> mean pool -> linear
// head (K logits). The student is trained to match the teacher's centered and
// sharpened distribution softmax((t - c) / tau_t) on a different crop of the
// same utterance; the teacher follows the student by EMA and c follows the
// teacher logits by EMA. Collapse is tracked through the entropy of the mean
// teacher distribution over a fixed probe set.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "layerlens/toy_encoder.hpp"
#include "layerlens/types.hpp"

namespace layerlens {

struct DinoNet {
  ToyEncoder backbone;
  Matrix head;  // backbone output dim x K
  RowVector head_bias;

  Eigen::Index num_outputs() const { return head.cols(); }
};

struct DinoState {
  DinoNet student;
  DinoNet teacher;
  RowVector center;
  double student_temperature = 0.1;
  double teacher_temperature = 0.04;
  double ema_momentum = 0.99;
  double center_momentum = 0.9;
  bool centering = true;
  std::vector<double> collapse_trace;

  void Validate() const {
    Check(student_temperature > 0.0 && teacher_temperature > 0.0, ErrorCode::kInvalidArgument,
          "temperatures must be positive");
    Check(ema_momentum >= 0.0 && ema_momentum <= 1.0, ErrorCode::kInvalidArgument,
          "EMA momentum must lie in [0, 1]");
    Check(center_momentum >= 0.0 && center_momentum <= 1.0, ErrorCode::kInvalidArgument,
          "center momentum must lie in [0, 1]");
  }
};

namespace detail {

inline Matrix RowSoftmax(const Matrix& logits) {
  Matrix out(logits.rows(), logits.cols());
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    const double peak = logits.row(i).maxCoeff();
    RowVector e = (logits.row(i).array() - peak).exp().matrix();
    out.row(i) = e / e.sum();
  }
  return out;
}

inline Matrix RowLogSoftmax(const Matrix& logits) {
  Matrix out(logits.rows(), logits.cols());
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    const double peak = logits.row(i).maxCoeff();
    const double lse = peak + std::log((logits.row(i).array() - peak).exp().sum());
    out.row(i) = logits.row(i).array() - lse;
  }
  return out;
}

}  // namespace detail

// Teacher distribution: centering, then sharpening.
inline Matrix TeacherProbabilities(const Matrix& teacher_logits, const RowVector& center,
                                   double teacher_temperature) {
  Check(teacher_temperature > 0.0, ErrorCode::kInvalidArgument,
        "teacher temperature must be positive");
  Check(center.size() == teacher_logits.cols(), ErrorCode::kDimensionMismatch,
        "center length differs from the logit width");
  Matrix shifted = teacher_logits;
  shifted.rowwise() -= center;
  return detail::RowSoftmax(shifted / teacher_temperature);
}

// Mean over the batch of H(p_t, p_s). The teacher side is treated as a constant;
// d_student, if given, receives d loss / d student_logits.
inline double DinoLoss(const Matrix& student_logits, const Matrix& teacher_logits,
                       const DinoState& state, Matrix* d_student = nullptr) {
  Check(state.student_temperature > 0.0 && state.teacher_temperature > 0.0,
        ErrorCode::kInvalidArgument, "temperatures must be positive");
  Check(student_logits.rows() == teacher_logits.rows() &&
            student_logits.cols() == teacher_logits.cols(),
        ErrorCode::kDimensionMismatch, "student and teacher logits differ in shape");
  Check(student_logits.rows() >= 1, ErrorCode::kInvalidArgument, "empty batch");
  const Matrix p_t = TeacherProbabilities(teacher_logits, state.center, state.teacher_temperature);
  const Matrix log_p_s = detail::RowLogSoftmax(student_logits / state.student_temperature);
  const double n = static_cast<double>(student_logits.rows());
  const double loss = -(p_t.array() * log_p_s.array()).sum() / n;
  if (d_student) {
    *d_student = (log_p_s.array().exp() - p_t.array()).matrix() / (state.student_temperature * n);
  }
  return loss;
}

inline RowVector UpdateCenter(const DinoState& state, const Matrix& teacher_batch_logits) {
  Check(teacher_batch_logits.rows() >= 1, ErrorCode::kInvalidArgument,
        "center update needs a nonempty batch");
  Check(teacher_batch_logits.cols() == state.center.size(), ErrorCode::kDimensionMismatch,
        "center length differs from the logit width");
  const double m = state.center_momentum;
  return m * state.center + (1.0 - m) * teacher_batch_logits.colwise().mean();
}

namespace detail {

inline void CheckSameShape(const DinoNet& a, const DinoNet& b) {
  Check(a.backbone.depth() == b.backbone.depth(), ErrorCode::kDimensionMismatch,
        "teacher and student depths differ");
  for (std::size_t l = 0; l < a.backbone.depth(); ++l) {
    const auto& wa = a.backbone.layers[l].weight;
    const auto& wb = b.backbone.layers[l].weight;
    Check(wa.rows() == wb.rows() && wa.cols() == wb.cols(), ErrorCode::kDimensionMismatch,
          "teacher and student layer " + std::to_string(l) + " shapes differ");
  }
  Check(a.head.rows() == b.head.rows() && a.head.cols() == b.head.cols() &&
            a.head_bias.size() == b.head_bias.size(),
        ErrorCode::kDimensionMismatch, "teacher and student heads differ");
}

}  // namespace detail

// theta_t <- lambda theta_t + (1 - lambda) theta_s, elementwise.
inline DinoNet EmaUpdate(const DinoState& state) {
  detail::CheckSameShape(state.teacher, state.student);
  const double lambda = state.ema_momentum;
  DinoNet next = state.teacher;
  for (std::size_t l = 0; l < next.backbone.depth(); ++l) {
    next.backbone.layers[l].weight =
        lambda * state.teacher.backbone.layers[l].weight +
        (1.0 - lambda) * state.student.backbone.layers[l].weight;
  }
  next.head = lambda * state.teacher.head + (1.0 - lambda) * state.student.head;
  next.head_bias = lambda * state.teacher.head_bias + (1.0 - lambda) * state.student.head_bias;
  return next;
}

// Euclidean norm of the concatenated parameter difference.
inline double ParameterDistance(const DinoNet& a, const DinoNet& b) {
  detail::CheckSameShape(a, b);
  double sq = (a.head - b.head).squaredNorm() + (a.head_bias - b.head_bias).squaredNorm();
  for (std::size_t l = 0; l < a.backbone.depth(); ++l)
    sq += (a.backbone.layers[l].weight - b.backbone.layers[l].weight).squaredNorm();
  return std::sqrt(sq);
}

struct DinoForward {
  Matrix pooled;  // batch x backbone output dim
  Matrix logits;  // batch x K
  std::vector<ForwardTrace> traces;
};

inline DinoForward ForwardViews(const DinoNet& net, const std::vector<Matrix>& views,
                                bool keep_traces) {
  DinoForward out;
  out.pooled.resize(static_cast<Eigen::Index>(views.size()), net.backbone.output_dim());
  for (std::size_t i = 0; i < views.size(); ++i) {
    auto trace = Forward(net.backbone, views[i]);
    out.pooled.row(static_cast<Eigen::Index>(i)) = trace.post.back().colwise().mean();
    if (keep_traces) out.traces.push_back(std::move(trace));
  }
  out.logits = out.pooled * net.head;
  out.logits.rowwise() += net.head_bias;
  return out;
}

inline double Entropy(const RowVector& p) {
  double h = 0.0;
  for (Eigen::Index k = 0; k < p.size(); ++k)
    if (p(k) > 0.0) h -= p(k) * std::log(p(k));
  return h;
}

// Entropy of the batch-mean teacher distribution.
inline double MeanTeacherEntropy(const DinoState& state, const std::vector<Matrix>& probe) {
  const auto fwd = ForwardViews(state.teacher, probe, false);
  const Matrix p = TeacherProbabilities(fwd.logits, state.center, state.teacher_temperature);
  return Entropy(p.colwise().mean());
}

struct DinoConfig {
  CorpusConfig corpus{.num_classes = 8, .utterances = 64, .frames = 40, .dim = 16,
                      .class_separation = 0.5, .frame_noise = 1.0};
  std::vector<Eigen::Index> layer_dims = {32, 32};
  Nonlinearity activation = Nonlinearity::kTanh;
  Eigen::Index num_outputs = 16;  // K
  int crop_frames = 16;
  int batch_size = 16;
  int steps = 300;
  double learning_rate = 0.5;
  double student_temperature = 0.1;
  double teacher_temperature = 0.04;
  double ema_momentum = 0.99;
  double center_momentum = 0.9;
  bool centering = true;
  // Without sharpening the teacher uses the student temperature.
  bool sharpening = true;
  double augment_snr_db = 0.0;
  // Leading corpus utterances, uncropped and clean, used for the entropy trace.
  int probe_size = 64;
};

struct DinoRun {
  ToyEncoder student;
  DinoState state;
  std::vector<double> collapse_trace;  // per-step mean-teacher entropy
  std::vector<double> loss_trace;
  Corpus corpus;
};

namespace detail {

inline Matrix AugmentedCrop(const Matrix& x, int crop, double snr_db, std::mt19937_64& rng) {
  const int frames = static_cast<int>(x.rows());
  const int len = std::min(crop, frames);
  std::uniform_int_distribution<int> start_dist(0, frames - len);
  Matrix view = x.middleRows(start_dist(rng), len);
  const double power = view.squaredNorm() / static_cast<double>(view.size());
  const double noise_std = std::sqrt(power / std::pow(10.0, snr_db / 10.0));
  std::normal_distribution<double> normal(0.0, 1.0);
  for (Eigen::Index i = 0; i < view.size(); ++i) view.data()[i] += noise_std * normal(rng);
  return view;
}

}  // namespace detail

inline DinoState InitDinoState(const DinoConfig& cfg, std::uint64_t seed) {
  EncoderConfig ec;
  ec.input_dim = cfg.corpus.dim;
  ec.layer_dims = cfg.layer_dims;
  ec.activation = cfg.activation;
  DinoState st;
  st.student.backbone = MakeToyEncoder(ec, DeriveSeed(seed, 1));
  std::mt19937_64 rng(DeriveSeed(seed, 2));
  const auto d = st.student.backbone.output_dim();
  st.student.head = GaussianMatrix(d, cfg.num_outputs, 1.0 / std::sqrt(double(d)), rng);
  st.student.head_bias = RowVector::Zero(cfg.num_outputs);
  st.teacher = st.student;
  st.center = RowVector::Zero(cfg.num_outputs);
  st.student_temperature = cfg.student_temperature;
  st.teacher_temperature = cfg.sharpening ? cfg.teacher_temperature : cfg.student_temperature;
  st.ema_momentum = cfg.ema_momentum;
  st.center_momentum = cfg.center_momentum;
  st.centering = cfg.centering;
  st.Validate();
  return st;
}

inline DinoRun TrainDinoToy(const DinoConfig& cfg, std::uint64_t seed) {
  Check(cfg.steps >= 0 && cfg.batch_size >= 1 && cfg.crop_frames >= 1 && cfg.probe_size >= 1,
        ErrorCode::kInvalidArgument, "bad DINO schedule");
  Check(cfg.num_outputs >= 2, ErrorCode::kInvalidArgument, "need at least 2 outputs");
  DinoRun run;
  run.corpus = MakeLabeledCorpus(cfg.corpus, seed);
  run.state = InitDinoState(cfg, seed);
  auto& st = run.state;

  const auto probe_count = std::min<std::size_t>(static_cast<std::size_t>(cfg.probe_size),
                                                 run.corpus.sequences.size());
  const std::vector<Matrix> probe(run.corpus.sequences.begin(),
                                  run.corpus.sequences.begin() +
                                      static_cast<std::ptrdiff_t>(probe_count));
  std::mt19937_64 rng(DeriveSeed(seed, 3));
  std::uniform_int_distribution<std::size_t> pick(0, run.corpus.sequences.size() - 1);
  const auto b = static_cast<std::size_t>(cfg.batch_size);

  for (int step = 0; step < cfg.steps; ++step) {
    std::vector<Matrix> views(2 * b);
    for (std::size_t i = 0; i < b; ++i) {
      const auto& x = run.corpus.sequences[pick(rng)];
      views[i] = detail::AugmentedCrop(x, cfg.crop_frames, cfg.augment_snr_db, rng);
      views[b + i] = detail::AugmentedCrop(x, cfg.crop_frames, cfg.augment_snr_db, rng);
    }
    const auto s = ForwardViews(st.student, views, true);
    const auto t = ForwardViews(st.teacher, views, false);
    // Each student view is matched against the teacher's view of the other crop.
    Matrix targets(t.logits.rows(), t.logits.cols());
    targets.topRows(static_cast<Eigen::Index>(b)) = t.logits.bottomRows(static_cast<Eigen::Index>(b));
    targets.bottomRows(static_cast<Eigen::Index>(b)) = t.logits.topRows(static_cast<Eigen::Index>(b));

    Matrix d_logits;
    const double loss = DinoLoss(s.logits, targets, st, &d_logits);
    Check(std::isfinite(loss), ErrorCode::kDivergence,
          "DINO loss became non-finite at step " + std::to_string(step));
    run.loss_trace.push_back(loss);

    const Matrix d_head = s.pooled.transpose() * d_logits;
    const RowVector d_bias = d_logits.colwise().sum();
    const Matrix d_pooled = d_logits * st.student.head.transpose();
    std::vector<Matrix> d_weights(st.student.backbone.depth());
    for (std::size_t i = 0; i < views.size(); ++i) {
      const auto rows = views[i].rows();
      const Matrix d_out =
          d_pooled.row(static_cast<Eigen::Index>(i)).replicate(rows, 1) / static_cast<double>(rows);
      auto g = Backward(st.student.backbone, s.traces[i], d_out);
      for (std::size_t l = 0; l < g.size(); ++l) {
        if (d_weights[l].size() == 0) d_weights[l] = std::move(g[l]);
        else d_weights[l] += g[l];
      }
    }
    for (std::size_t l = 0; l < d_weights.size(); ++l)
      st.student.backbone.layers[l].weight -= cfg.learning_rate * d_weights[l];
    st.student.head -= cfg.learning_rate * d_head;
    st.student.head_bias -= cfg.learning_rate * d_bias;

    st.teacher = EmaUpdate(st);
    if (st.centering) st.center = UpdateCenter(st, t.logits);
    const double h = MeanTeacherEntropy(st, probe);
    st.collapse_trace.push_back(h);
  }
  run.collapse_trace = st.collapse_trace;
  run.student = st.student.backbone;
  return run;
}

}  // namespace layerlens
