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

// Linear CKA built on the unbiased HSIC estimator.
//
// For Gram matrices K, L over n >= 4 examples, with K~ and L~ the same matrices
// with zeroed diagonals:
//
//   HSIC1(K, L) = [ tr(K~ L~)
//                   + (1' K~ 1)(1' L~ 1) / ((n-1)(n-2))
//                   - 2/(n-2) * (K~ 1)'(L~ 1) ] / (n(n-3))
//
// CKA = HSIC1(K, L) / sqrt(HSIC1(K, K) HSIC1(L, L)). In minibatch mode the three
// HSIC terms are summed over batches before the ratio is taken, so no Gram
// matrix larger than one batch is ever formed.

#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <exception>
#include <mutex>
#include <numeric>
#include <optional>
#include <random>
#include <string>
#include <thread>
#include <vector>

#include "layerlens/actvstore.hpp"
#include "layerlens/types.hpp"

namespace layerlens {

// Self-HSIC at or below this fraction of its scale term counts as degenerate.
inline constexpr double kDegenerateRelTol = 1e-10;

struct GramMatrix {
  Matrix values;

  Eigen::Index n() const { return values.rows(); }
};

struct CkaConfig {
  int batch_size_utterances = 4;
  std::optional<std::uint64_t> shuffle_seed;
  int min_examples_per_batch = 4;
  bool include_segment_level = true;
  // 0 picks std::thread::hardware_concurrency().
  int num_threads = 0;

  void Validate() const {
    Check(batch_size_utterances >= 1, ErrorCode::kInvalidArgument, "batch size must be >= 1");
    Check(min_examples_per_batch >= 4, ErrorCode::kInvalidArgument,
          "min_examples_per_batch must be >= 4");
    Check(num_threads >= 0, ErrorCode::kInvalidArgument, "num_threads must be >= 0");
  }
};

template <typename Derived>
GramMatrix GramLinear(const Eigen::MatrixBase<Derived>& x) {
  Check(x.rows() >= 1, ErrorCode::kInvalidArgument, "gram of an empty matrix");
  Check(x.allFinite(), ErrorCode::kNonFinite, "gram input holds a non-finite value");
  const Matrix xd = x.template cast<double>();
  GramMatrix g;
  g.values.noalias() = xd * xd.transpose();
  // Mirror the upper triangle so the result is exactly symmetric.
  for (Eigen::Index i = 0; i < g.n(); ++i)
    for (Eigen::Index j = i + 1; j < g.n(); ++j) g.values(j, i) = g.values(i, j);
  return g;
}

namespace detail {

struct HsicParts {
  double hsic = 0.0;
  // tr(K~ K~) / (n(n-3)) style magnitude used for degeneracy tests.
  double scale = 0.0;
};

// Every sum below pairs K and L entries through commutative products, so
// swapping the arguments gives a bit-identical result.
inline HsicParts HsicUnbiasedParts(const Matrix& k, const Matrix& l) {
  const Eigen::Index n = k.rows();
  Check(k.cols() == n && l.rows() == n && l.cols() == n, ErrorCode::kDimensionMismatch,
        "HSIC needs two n x n Gram matrices");
  Check(n >= 4, ErrorCode::kBatchTooSmall,
        "unbiased HSIC needs n >= 4, got " + std::to_string(n));
  double trace = 0.0, sum_k = 0.0, sum_l = 0.0, row_dot = 0.0, scale_k = 0.0, scale_l = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) {
    double row_k = 0.0, row_l = 0.0;
    for (Eigen::Index j = 0; j < n; ++j) {
      if (i == j) continue;
      const double kij = k(i, j), lij = l(i, j);
      trace += kij * lij;
      row_k += kij;
      row_l += lij;
      scale_k += kij * kij;
      scale_l += lij * lij;
    }
    sum_k += row_k;
    sum_l += row_l;
    row_dot += row_k * row_l;
  }
  const double nd = static_cast<double>(n);
  HsicParts parts;
  parts.hsic = (trace + sum_k * sum_l / ((nd - 1.0) * (nd - 2.0)) - 2.0 / (nd - 2.0) * row_dot) /
               (nd * (nd - 3.0));
  parts.scale = std::sqrt(scale_k * scale_l) / (nd * (nd - 3.0));
  return parts;
}

}  // namespace detail

inline double HsicUnbiased(const GramMatrix& k, const GramMatrix& l) {
  return detail::HsicUnbiasedParts(k.values, l.values).hsic;
}

namespace detail {

inline double CkaRatio(double xy, double xx, double yy, double scale_xx, double scale_yy) {
  Check(xx > kDegenerateRelTol * scale_xx && xx > 0.0, ErrorCode::kDegenerateInput,
        "first representation has (near-)zero self-HSIC; constant features?");
  Check(yy > kDegenerateRelTol * scale_yy && yy > 0.0, ErrorCode::kDegenerateInput,
        "second representation has (near-)zero self-HSIC; constant features?");
  return xy / std::sqrt(xx * yy);
}

}  // namespace detail

template <typename DerivedX, typename DerivedY>
double CkaFull(const Eigen::MatrixBase<DerivedX>& x, const Eigen::MatrixBase<DerivedY>& y) {
  Check(x.rows() == y.rows(), ErrorCode::kDimensionMismatch,
        "CKA inputs need equal example counts, got " + std::to_string(x.rows()) + " and " +
            std::to_string(y.rows()));
  const GramMatrix k = GramLinear(x), l = GramLinear(y);
  const auto xy = detail::HsicUnbiasedParts(k.values, l.values);
  const auto xx = detail::HsicUnbiasedParts(k.values, k.values);
  const auto yy = detail::HsicUnbiasedParts(l.values, l.values);
  return detail::CkaRatio(xy.hsic, xx.hsic, yy.hsic, xx.scale, yy.scale);
}

struct CkaEstimate {
  double value = 0.0;
  int batches_used = 0;
  int dropped_batches = 0;
  std::int64_t dropped_frames = 0;
};

// Utterance visiting order for minibatching: corpus order, or a seeded shuffle.
inline std::vector<std::size_t> BatchOrder(std::size_t count, const CkaConfig& cfg) {
  std::vector<std::size_t> order(count);
  std::iota(order.begin(), order.end(), std::size_t{0});
  if (cfg.shuffle_seed) {
    std::mt19937_64 rng(*cfg.shuffle_seed);
    std::shuffle(order.begin(), order.end(), rng);
  }
  return order;
}

// a[u] and b[u] are the aligned views of utterance u (equal row counts). Frames of
// batch_size_utterances consecutive utterances are pooled into one Gram matrix.
inline CkaEstimate CkaMinibatch(const std::vector<Matrix>& a, const std::vector<Matrix>& b,
                                const CkaConfig& cfg) {
  cfg.Validate();
  Check(a.size() == b.size(), ErrorCode::kCorpusMismatch,
        std::to_string(a.size()) + " vs " + std::to_string(b.size()) + " utterances");
  Check(!a.empty(), ErrorCode::kInvalidArgument, "no utterances");
  for (std::size_t u = 0; u < a.size(); ++u) {
    Check(a[u].rows() == b[u].rows(), ErrorCode::kDimensionMismatch,
          "utterance " + std::to_string(u) + " is not aligned (" + std::to_string(a[u].rows()) +
              " vs " + std::to_string(b[u].rows()) + " rows)");
  }
  const auto dim_a = a.front().cols(), dim_b = b.front().cols();

  const auto order = BatchOrder(a.size(), cfg);
  const std::size_t bs = static_cast<std::size_t>(cfg.batch_size_utterances);
  double s_xy = 0.0, s_xx = 0.0, s_yy = 0.0, scale_xx = 0.0, scale_yy = 0.0;
  CkaEstimate est;
  for (std::size_t start = 0; start < order.size(); start += bs) {
    const std::size_t stop = std::min(order.size(), start + bs);
    Eigen::Index frames = 0;
    for (std::size_t i = start; i < stop; ++i) frames += a[order[i]].rows();
    if (frames < cfg.min_examples_per_batch) {
      Check(stop == order.size(), ErrorCode::kBatchTooSmall,
            "batch starting at utterance position " + std::to_string(start) + " has " +
                std::to_string(frames) + " frames, need " +
                std::to_string(cfg.min_examples_per_batch));
      ++est.dropped_batches;
      est.dropped_frames += frames;
      continue;
    }
    Matrix x(frames, dim_a), y(frames, dim_b);
    Eigen::Index row = 0;
    for (std::size_t i = start; i < stop; ++i) {
      const auto& xa = a[order[i]];
      const auto& yb = b[order[i]];
      Check(xa.cols() == dim_a && yb.cols() == dim_b, ErrorCode::kDimensionMismatch,
            "feature dimension changes across utterances");
      x.middleRows(row, xa.rows()) = xa;
      y.middleRows(row, yb.rows()) = yb;
      row += xa.rows();
    }
    const GramMatrix k = GramLinear(x), l = GramLinear(y);
    const auto xy = detail::HsicUnbiasedParts(k.values, l.values);
    const auto xx = detail::HsicUnbiasedParts(k.values, k.values);
    const auto yy = detail::HsicUnbiasedParts(l.values, l.values);
    s_xy += xy.hsic;
    s_xx += xx.hsic;
    s_yy += yy.hsic;
    scale_xx += xx.scale;
    scale_yy += yy.scale;
    ++est.batches_used;
  }
  Check(est.batches_used > 0, ErrorCode::kBatchTooSmall, "no batch reached the frame minimum");
  est.value = detail::CkaRatio(s_xy, s_xx, s_yy, scale_xx, scale_yy);
  return est;
}

struct SimilarityMatrix {
  std::vector<std::string> row_labels;
  std::vector<std::string> col_labels;
  Matrix values;
  std::string model_a;
  std::string model_b;
  CkaConfig config;
  int num_utterances = 0;
  // Totals over all cells.
  int dropped_batches = 0;
  std::int64_t dropped_frames = 0;
};

namespace detail {

inline std::vector<std::size_t> GridLayers(const ActivationSet& s, const CkaConfig& cfg) {
  std::vector<std::size_t> out;
  for (std::size_t l = 0; l < s.layers.size(); ++l)
    if (cfg.include_segment_level || !s.layers[l].is_segment_level) out.push_back(l);
  Check(!out.empty(), ErrorCode::kInvalidArgument,
        "model '" + s.model_name + "' has no frame-level layers to compare");
  return out;
}

inline CkaEstimate CellEstimate(const ActivationSet& a, std::size_t la, const ActivationSet& b,
                                std::size_t lb, const CkaConfig& cfg) {
  const auto& layer_a = a.layers[la];
  const auto& layer_b = b.layers[lb];
  std::vector<Matrix> xa, yb;
  xa.reserve(a.num_sequences());
  yb.reserve(a.num_sequences());
  for (std::size_t u = 0; u < a.num_sequences(); ++u) {
    auto pair = AlignPair(layer_a.sequences[u], layer_b.sequences[u], a.frame_hop, b.frame_hop,
                          layer_a.is_segment_level, layer_b.is_segment_level);
    xa.push_back(std::move(pair.a));
    yb.push_back(std::move(pair.b));
  }
  return CkaMinibatch(xa, yb, cfg);
}

// Runs fn(task) for task in [0, count) on up to `threads` workers. Results are
// written by index, so the outcome does not depend on scheduling.
template <typename Fn>
void ParallelFor(std::size_t count, int threads, Fn fn) {
  std::size_t workers = threads > 0 ? static_cast<std::size_t>(threads)
                                    : std::max(1u, std::thread::hardware_concurrency());
  workers = std::min(workers, count);
  if (workers <= 1) {
    for (std::size_t i = 0; i < count; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr first_error;
  std::mutex error_mu;
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < count; i = next++) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard<std::mutex> lock(error_mu);
          if (!first_error) first_error = std::current_exception();
        }
      }
    });
  }
  for (auto& t : pool) t.join();
  if (first_error) std::rethrow_exception(first_error);
}

inline SimilarityMatrix Grid(const ActivationSet& a, const ActivationSet& b, const CkaConfig& cfg,
                             bool symmetric) {
  cfg.Validate();
  a.Validate();
  b.Validate();
  Check(a.utterance_ids == b.utterance_ids, ErrorCode::kCorpusMismatch,
        "models '" + a.model_name + "' and '" + b.model_name +
            "' do not share the same utterance ids in the same order");
  const auto rows = GridLayers(a, cfg);
  const auto cols = GridLayers(b, cfg);

  SimilarityMatrix sm;
  sm.model_a = a.model_name;
  sm.model_b = b.model_name;
  sm.config = cfg;
  sm.num_utterances = static_cast<int>(a.num_sequences());
  for (auto l : rows) sm.row_labels.push_back("L" + std::to_string(a.layers[l].layer_id));
  for (auto l : cols) sm.col_labels.push_back("L" + std::to_string(b.layers[l].layer_id));
  sm.values = Matrix::Zero(static_cast<Eigen::Index>(rows.size()),
                           static_cast<Eigen::Index>(cols.size()));

  std::vector<std::pair<std::size_t, std::size_t>> cells;
  for (std::size_t i = 0; i < rows.size(); ++i)
    for (std::size_t j = symmetric ? i : 0; j < cols.size(); ++j) cells.emplace_back(i, j);
  std::vector<CkaEstimate> results(cells.size());
  ParallelFor(cells.size(), cfg.num_threads, [&](std::size_t t) {
    results[t] = CellEstimate(a, rows[cells[t].first], b, cols[cells[t].second], cfg);
  });
  for (std::size_t t = 0; t < cells.size(); ++t) {
    const auto [i, j] = cells[t];
    sm.values(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = results[t].value;
    sm.dropped_batches += results[t].dropped_batches;
    sm.dropped_frames += results[t].dropped_frames;
    if (symmetric && i != j) {
      sm.values(static_cast<Eigen::Index>(j), static_cast<Eigen::Index>(i)) = results[t].value;
      sm.dropped_batches += results[t].dropped_batches;
      sm.dropped_frames += results[t].dropped_frames;
    }
  }
  return sm;
}

}  // namespace detail

inline SimilarityMatrix ComputeSimilarityMatrix(const ActivationSet& a, const ActivationSet& b,
                                                const CkaConfig& cfg = {}) {
  return detail::Grid(a, b, cfg, /*symmetric=*/false);
}

// Same grid as ComputeSimilarityMatrix(a, a, cfg); only the upper triangle is evaluated.
inline SimilarityMatrix SelfSimilarity(const ActivationSet& a, const CkaConfig& cfg = {}) {
  return detail::Grid(a, a, cfg, /*symmetric=*/true);
}

}  // namespace layerlens
