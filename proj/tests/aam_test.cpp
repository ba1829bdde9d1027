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

#include <numbers>
#include <random>

#include "test_support.hpp"

namespace layerlens {
namespace {

using testing::RandomMatrix;

// Plain softmax cross-entropy on s * cos(theta_j), computed per element.
double ScaledCosineCe(const Matrix& e, const std::vector<int>& labels, const Matrix& w, double s) {
  double total = 0;
  for (Eigen::Index i = 0; i < e.rows(); ++i) {
    const RowVector u = e.row(i) / e.row(i).norm();
    std::vector<double> logits;
    for (Eigen::Index c = 0; c < w.rows(); ++c) logits.push_back(s * u.dot(w.row(c) / w.row(c).norm()));
    const double peak = *std::max_element(logits.begin(), logits.end());
    double z = 0;
    for (double l : logits) z += std::exp(l - peak);
    total += std::log(z) + peak - logits[static_cast<std::size_t>(labels[i])];
  }
  return total / static_cast<double>(e.rows());
}

AamConfig RandomAam(std::mt19937_64& rng, Eigen::Index classes, Eigen::Index dim, double m) {
  AamConfig cfg;
  cfg.margin = m;
  cfg.class_weights = NormalizeRows(RandomMatrix(classes, dim, rng));
  return cfg;
}

TEST(AamTest, ClosedFormTwoClassCase) {
  // e = w0, w1 orthogonal: loss = log(1 + exp(-30 cos 0.2)).
  AamConfig cfg;
  cfg.class_weights = Matrix::Identity(2, 3);
  Matrix e(1, 3);
  e << 2.0, 0.0, 0.0;
  const double want = std::log1p(std::exp(-30.0 * std::cos(0.2)));
  EXPECT_NEAR(AamSoftmaxLoss(e, {0}, cfg), want, 1e-15);
}

TEST(AamTest, ZeroMarginIsScaledCosineCrossEntropy) {
  std::mt19937_64 rng(1);
  for (int t = 0; t < 20; ++t) {
    auto cfg = RandomAam(rng, 5, 8, 0.0);
    const Matrix e = RandomMatrix(10, 8, rng);
    std::vector<int> labels;
    for (int i = 0; i < 10; ++i) labels.push_back(i % 5);
    EXPECT_NEAR(AamSoftmaxLoss(e, labels, cfg), ScaledCosineCe(e, labels, cfg.class_weights, 30.0),
                1e-12);
  }
}

TEST(AamTest, LossIncreasesWithMargin) {
  std::mt19937_64 rng(2);
  for (int t = 0; t < 20; ++t) {
    auto cfg = RandomAam(rng, 4, 6, 0.0);
    const Matrix e = RandomMatrix(8, 6, rng);
    const std::vector<int> labels = {0, 1, 2, 3, 0, 1, 2, 3};
    double prev = -1;
    for (double m : {0.0, 0.1, 0.2, 0.3}) {
      cfg.margin = m;
      const double loss = AamSoftmaxLoss(e, labels, cfg);
      EXPECT_GT(loss, prev);
      prev = loss;
    }
  }
}

TEST(AamTest, EmbeddingGradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(3);
  auto cfg = RandomAam(rng, 4, 5, 0.2);
  cfg.scale = 4.0;
  const Matrix e = RandomMatrix(6, 5, rng);
  const std::vector<int> labels = {0, 1, 2, 3, 1, 2};
  AamGradients g;
  AamSoftmaxLoss(e, labels, cfg, &g);
  const double eps = 1e-6;
  for (Eigen::Index i = 0; i < e.size(); ++i) {
    Matrix up = e, down = e;
    up.data()[i] += eps;
    down.data()[i] -= eps;
    const double fd = (AamSoftmaxLoss(up, labels, cfg) - AamSoftmaxLoss(down, labels, cfg)) / (2 * eps);
    EXPECT_NEAR(g.embeddings.data()[i], fd, 1e-6);
  }
}

TEST(AamTest, ClassWeightGradientMatchesOnTangentSpace) {
  // Class weights are renormalized, so only the component tangent to the unit
  // sphere is observable by perturbation.
  std::mt19937_64 rng(4);
  auto cfg = RandomAam(rng, 3, 4, 0.2);
  cfg.scale = 4.0;
  const Matrix e = RandomMatrix(5, 4, rng);
  const std::vector<int> labels = {0, 1, 2, 0, 1};
  AamGradients g;
  AamSoftmaxLoss(e, labels, cfg, &g);
  const double eps = 1e-6;
  for (Eigen::Index c = 0; c < 3; ++c) {
    const RowVector w = cfg.class_weights.row(c);
    const RowVector tangent = g.class_weights.row(c) - g.class_weights.row(c).dot(w) * w;
    for (Eigen::Index j = 0; j < 4; ++j) {
      AamConfig up = cfg, down = cfg;
      up.class_weights(c, j) += eps;
      down.class_weights(c, j) -= eps;
      up.class_weights = NormalizeRows(up.class_weights);
      down.class_weights = NormalizeRows(down.class_weights);
      const double fd = (AamSoftmaxLoss(e, labels, up) - AamSoftmaxLoss(e, labels, down)) / (2 * eps);
      EXPECT_NEAR(tangent(j), fd, 1e-6);
    }
  }
}

TEST(AamTest, RejectsBadConfig) {
  AamConfig cfg;
  cfg.class_weights = Matrix::Identity(2, 2);
  cfg.margin = std::numbers::pi / 2;
  EXPECT_THROW(cfg.Validate(), Error);
  cfg.margin = 0.2;
  cfg.class_weights(0, 0) = 2.0;
  EXPECT_THROW(cfg.Validate(), Error);
  cfg.class_weights = Matrix::Identity(2, 2);
  EXPECT_THROW(AamSoftmaxLoss(Matrix::Ones(1, 2), {2}, cfg), Error);
}

TEST(SupervisedToyTest, LearnsSeparableClasses) {
  const auto run = TrainSupervisedToy(SupervisedConfig{}, 0);
  EXPECT_LT(run.loss_trace.back(), 0.1 * run.loss_trace.front());
  EXPECT_GE(run.train_accuracy, 0.95);
  for (Eigen::Index c = 0; c < run.aam.class_weights.rows(); ++c)
    EXPECT_NEAR(run.aam.class_weights.row(c).norm(), 1.0, 1e-12);
}

}  // namespace
}  // namespace layerlens
