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


#include <gtest/gtest.h>

#include <random>

#include "test_support.hpp"

namespace layerlens {
namespace {

using testing::RandomMatrix;

DinoState SmallState(std::uint64_t seed) {
  DinoConfig cfg;
  cfg.corpus.dim = 4;
  cfg.layer_dims = {5};
  cfg.num_outputs = 6;
  return InitDinoState(cfg, seed);
}

TEST(DinoTest, EmaFollowsGeometricRecurrence) {
  // Fixed student s: after k updates teacher = s + lambda^k (t0 - s).
  auto st = SmallState(1);
  std::mt19937_64 rng(1);
  st.student.head = RandomMatrix(5, 6, rng);
  st.student.backbone.layers[0].weight = RandomMatrix(4, 5, rng);
  const DinoNet t0 = st.teacher;
  for (int k = 1; k <= 20; ++k) {
    st.teacher = EmaUpdate(st);
    const double f = std::pow(st.ema_momentum, k);
    const Matrix want_head = st.student.head + f * (t0.head - st.student.head);
    EXPECT_LE((st.teacher.head - want_head).cwiseAbs().maxCoeff(), 1e-12);
    const Matrix want_w = st.student.backbone.layers[0].weight +
                          f * (t0.backbone.layers[0].weight - st.student.backbone.layers[0].weight);
    EXPECT_LE((st.teacher.backbone.layers[0].weight - want_w).cwiseAbs().maxCoeff(), 1e-12);
  }
}

TEST(DinoTest, EmaEndpoints) {
  auto st = SmallState(2);
  std::mt19937_64 rng(2);
  st.student.head = RandomMatrix(5, 6, rng);
  st.ema_momentum = 1.0;
  EXPECT_EQ(EmaUpdate(st).head, st.teacher.head);
  st.ema_momentum = 0.0;
  EXPECT_EQ(EmaUpdate(st).head, st.student.head);
}

TEST(DinoTest, CenterFollowsGeometricRecurrence) {
  // Constant batch mean mu from c0 = 0: c_k = (1 - m^k) mu.
  auto st = SmallState(3);
  std::mt19937_64 rng(3);
  const Matrix batch = RandomMatrix(8, 6, rng);
  const RowVector mu = batch.colwise().mean();
  for (int k = 1; k <= 15; ++k) {
    st.center = UpdateCenter(st, batch);
    const RowVector want = (1.0 - std::pow(st.center_momentum, k)) * mu;
    EXPECT_LE((st.center - want).cwiseAbs().maxCoeff(), 1e-12);
  }
}

TEST(DinoTest, TeacherProbabilitiesAreCenteredAndSharpened) {
  std::mt19937_64 rng(4);
  const Matrix logits = RandomMatrix(5, 6, rng);
  const RowVector zero = RowVector::Zero(6);
  const Matrix p_sharp = TeacherProbabilities(logits, zero, 0.04);
  const Matrix p_soft = TeacherProbabilities(logits, zero, 0.1);
  for (Eigen::Index i = 0; i < 5; ++i) {
    EXPECT_NEAR(p_sharp.row(i).sum(), 1.0, 1e-12);
    EXPECT_LT(Entropy(p_sharp.row(i)), Entropy(p_soft.row(i)));
  }
  // Subtracting a constant-across-classes center changes nothing.
  const RowVector flat = RowVector::Constant(6, 3.0);
  EXPECT_LE((TeacherProbabilities(logits, flat, 0.04) - p_sharp).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(DinoTest, EntropyOfUniformIsLogK) {
  EXPECT_NEAR(Entropy(RowVector::Constant(16, 1.0 / 16)), std::log(16.0), 1e-12);
  RowVector onehot = RowVector::Zero(4);
  onehot(2) = 1.0;
  EXPECT_EQ(Entropy(onehot), 0.0);
}

TEST(DinoTest, LossGradientMatchesFiniteDifferences) {
  auto st = SmallState(5);
  std::mt19937_64 rng(5);
  st.center = RandomMatrix(1, 6, rng);
  const Matrix s = RandomMatrix(4, 6, rng), t = RandomMatrix(4, 6, rng);
  Matrix grad;
  DinoLoss(s, t, st, &grad);
  const double eps = 1e-6;
  for (Eigen::Index i = 0; i < s.size(); ++i) {
    Matrix up = s, down = s;
    up.data()[i] += eps;
    down.data()[i] -= eps;
    const double fd = (DinoLoss(up, t, st) - DinoLoss(down, t, st)) / (2 * eps);
    EXPECT_NEAR(grad.data()[i], fd, 1e-6);
  }
}

TEST(DinoTest, LossIsCrossEntropyOfTeacherAndStudent) {
  auto st = SmallState(6);
  std::mt19937_64 rng(6);
  const Matrix s = RandomMatrix(3, 6, rng), t = RandomMatrix(3, 6, rng);
  double want = 0;
  for (Eigen::Index i = 0; i < 3; ++i) {
    double zs = 0, zt = 0;
    for (Eigen::Index k = 0; k < 6; ++k) {
      zs += std::exp(s(i, k) / st.student_temperature);
      zt += std::exp(t(i, k) / st.teacher_temperature);
    }
    for (Eigen::Index k = 0; k < 6; ++k) {
      const double pt = std::exp(t(i, k) / st.teacher_temperature) / zt;
      const double log_ps = s(i, k) / st.student_temperature - std::log(zs);
      want -= pt * log_ps;
    }
  }
  EXPECT_NEAR(DinoLoss(s, t, st), want / 3.0, 1e-10);
}

TEST(DinoTest, SharpeningOffUsesStudentTemperature) {
  DinoConfig cfg;
  cfg.sharpening = false;
  const auto st = InitDinoState(cfg, 7);
  EXPECT_EQ(st.teacher_temperature, st.student_temperature);
}

TEST(DinoTest, ValidationRejectsBadMomentum) {
  auto st = SmallState(8);
  st.ema_momentum = 1.5;
  EXPECT_THROW(st.Validate(), Error);
}

TEST(DinoTest, TrainingIsDeterministic) {
  DinoConfig cfg;
  cfg.steps = 10;
  const auto a = TrainDinoToy(cfg, 9), b = TrainDinoToy(cfg, 9);
  EXPECT_EQ(a.collapse_trace, b.collapse_trace);
  EXPECT_EQ(a.loss_trace, b.loss_trace);
  ASSERT_EQ(a.collapse_trace.size(), 10u);
}

TEST(DinoTest, CollapseWithoutCenteringOnly) {
  DinoConfig with, without;
  without.centering = false;
  const double ln_k = std::log(static_cast<double>(with.num_outputs));
  const auto a = TrainDinoToy(with, 0);
  const auto b = TrainDinoToy(without, 0);
  EXPECT_GT(a.collapse_trace.back(), 0.5 * ln_k);
  EXPECT_LT(b.collapse_trace.back(), 0.2 * ln_k);
  EXPECT_EQ(b.state.center, RowVector::Zero(with.num_outputs));
}

}  // namespace
}  // namespace layerlens
