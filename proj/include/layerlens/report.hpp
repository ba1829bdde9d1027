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

// Text and image serializations: similarity CSV, key = value sidecars and
// binary (P5) grayscale PGM images.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "layerlens/cka.hpp"
#include "layerlens/types.hpp"

namespace layerlens {

// Shortest decimal text that parses back to the same double.
inline std::string FormatDouble(double v) {
  char buf[32];
  for (int prec = 1; prec <= 17; ++prec) {
    std::snprintf(buf, sizeof(buf), "%.*g", prec, v);
    if (std::strtod(buf, nullptr) == v) break;
  }
  return buf;
}

inline void WriteSimilarityCsv(std::ostream& os, const SimilarityMatrix& sm) {
  os << "layer";
  for (const auto& c : sm.col_labels) os << "," << c;
  os << "\n";
  for (Eigen::Index i = 0; i < sm.values.rows(); ++i) {
    os << sm.row_labels[static_cast<std::size_t>(i)];
    for (Eigen::Index j = 0; j < sm.values.cols(); ++j) os << "," << FormatDouble(sm.values(i, j));
    os << "\n";
  }
}

struct CsvGrid {
  std::vector<std::string> row_labels;
  std::vector<std::string> col_labels;
  Matrix values;
};

inline std::vector<std::string> SplitCsvLine(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::istringstream ss(line);
  while (std::getline(ss, cell, ',')) out.push_back(cell);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

inline CsvGrid ReadSimilarityCsv(std::istream& is) {
  CsvGrid grid;
  std::string line;
  Check(static_cast<bool>(std::getline(is, line)), ErrorCode::kParse, "empty CSV");
  auto header = SplitCsvLine(line);
  Check(header.size() >= 2, ErrorCode::kParse, "CSV header has no columns");
  grid.col_labels.assign(header.begin() + 1, header.end());
  std::vector<std::vector<double>> rows;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    auto cells = SplitCsvLine(line);
    Check(cells.size() == header.size(), ErrorCode::kParse,
          "CSV row '" + line + "' has " + std::to_string(cells.size()) + " cells");
    grid.row_labels.push_back(cells.front());
    std::vector<double> row;
    for (std::size_t j = 1; j < cells.size(); ++j) {
      char* end = nullptr;
      row.push_back(std::strtod(cells[j].c_str(), &end));
      Check(end != cells[j].c_str() && *end == '\0', ErrorCode::kParse,
            "bad CSV number '" + cells[j] + "'");
    }
    rows.push_back(std::move(row));
  }
  grid.values.resize(static_cast<Eigen::Index>(rows.size()),
                     static_cast<Eigen::Index>(grid.col_labels.size()));
  for (std::size_t i = 0; i < rows.size(); ++i)
    for (std::size_t j = 0; j < rows[i].size(); ++j)
      grid.values(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = rows[i][j];
  return grid;
}

// Ordered key = value lines.
class KeyValueWriter {
 public:
  KeyValueWriter& Add(const std::string& key, const std::string& value) {
    entries_.emplace_back(key, value);
    return *this;
  }
  KeyValueWriter& Add(const std::string& key, const char* value) {
    return Add(key, std::string(value));
  }
  KeyValueWriter& Add(const std::string& key, double value) { return Add(key, FormatDouble(value)); }
  KeyValueWriter& Add(const std::string& key, std::int64_t value) {
    return Add(key, std::to_string(value));
  }
  KeyValueWriter& Add(const std::string& key, int value) { return Add(key, std::to_string(value)); }
  KeyValueWriter& Add(const std::string& key, bool value) {
    return Add(key, std::string(value ? "true" : "false"));
  }
  KeyValueWriter& Add(const std::string& key, const std::vector<double>& values) {
    std::string s;
    for (std::size_t i = 0; i < values.size(); ++i) s += (i ? " " : "") + FormatDouble(values[i]);
    return Add(key, s);
  }

  void Write(std::ostream& os) const {
    for (const auto& [k, v] : entries_) os << k << " = " << v << "\n";
  }

 private:
  std::vector<std::pair<std::string, std::string>> entries_;
};

// Reads the format KeyValueWriter emits.
inline std::vector<std::pair<std::string, std::string>> ReadKeyValues(std::istream& is) {
  std::vector<std::pair<std::string, std::string>> out;
  std::string line;
  while (std::getline(is, line)) {
    auto eq = line.find(" = ");
    if (eq == std::string::npos) continue;
    out.emplace_back(line.substr(0, eq), line.substr(eq + 3));
  }
  return out;
}

struct GrayImage {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> pixels;
  // Values outside [0, 1] that were clamped.
  int clamped_low = 0;
  int clamped_high = 0;
};

inline std::uint8_t ToGray(double v, int* low, int* high) {
  if (v < 0.0) {
    ++*low;
    v = 0.0;
  } else if (v > 1.0) {
    ++*high;
    v = 1.0;
  }
  return static_cast<std::uint8_t>(std::lround(v * 255.0));
}

// One cell_px x cell_px block per matrix entry, row 0 at the top, [0,1] -> [0,255].
inline GrayImage RenderHeatmap(const Matrix& values, int cell_px = 16) {
  Check(cell_px >= 1, ErrorCode::kInvalidArgument, "cell size must be >= 1");
  GrayImage img;
  img.width = static_cast<int>(values.cols()) * cell_px;
  img.height = static_cast<int>(values.rows()) * cell_px;
  img.pixels.assign(static_cast<std::size_t>(img.width) * img.height, 0);
  for (Eigen::Index i = 0; i < values.rows(); ++i) {
    for (Eigen::Index j = 0; j < values.cols(); ++j) {
      const auto g = ToGray(values(i, j), &img.clamped_low, &img.clamped_high);
      for (int y = 0; y < cell_px; ++y)
        for (int x = 0; x < cell_px; ++x)
          img.pixels[static_cast<std::size_t>((i * cell_px + y) * img.width + j * cell_px + x)] = g;
    }
  }
  return img;
}

// Bar strip: one column of width bar_px per entry, bar height proportional to
// value / max(values), light bars on a black background.
inline GrayImage RenderBarStrip(const std::vector<double>& values, int bar_px = 16,
                                int height = 64) {
  Check(!values.empty(), ErrorCode::kInvalidArgument, "bar strip of an empty vector");
  Check(bar_px >= 1 && height >= 1, ErrorCode::kInvalidArgument, "bad bar strip geometry");
  GrayImage img;
  img.width = static_cast<int>(values.size()) * bar_px;
  img.height = height;
  img.pixels.assign(static_cast<std::size_t>(img.width) * img.height, 0);
  const double peak = *std::max_element(values.begin(), values.end());
  for (std::size_t l = 0; l < values.size(); ++l) {
    const double frac = peak > 0.0 ? std::clamp(values[l] / peak, 0.0, 1.0) : 0.0;
    const int bar = static_cast<int>(std::lround(frac * height));
    const auto shade = static_cast<std::uint8_t>(std::lround(64 + 191 * frac));
    for (int y = height - bar; y < height; ++y)
      for (int x = 0; x < bar_px; ++x)
        img.pixels[static_cast<std::size_t>(y * img.width + static_cast<int>(l) * bar_px + x)] =
            shade;
  }
  return img;
}

inline void WritePgm(std::ostream& os, const GrayImage& img) {
  os << "P5\n" << img.width << " " << img.height << "\n255\n";
  os.write(reinterpret_cast<const char*>(img.pixels.data()),
           static_cast<std::streamsize>(img.pixels.size()));
}

inline void WritePgmFile(const std::filesystem::path& path, const GrayImage& img) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  Check(out.good(), ErrorCode::kIo, "cannot write " + path.string());
  WritePgm(out, img);
  Check(out.good(), ErrorCode::kIo, "write failed on " + path.string());
}

inline KeyValueWriter SimilarityMeta(const SimilarityMatrix& sm, const GrayImage& heatmap) {
  KeyValueWriter kv;
  kv.Add("model_a", sm.model_a)
      .Add("model_b", sm.model_b)
      .Add("rows", static_cast<int>(sm.values.rows()))
      .Add("cols", static_cast<int>(sm.values.cols()))
      .Add("num_utterances", sm.num_utterances)
      .Add("estimator", "unbiased linear CKA, minibatch")
      .Add("batch_size_utterances", sm.config.batch_size_utterances)
      .Add("min_examples_per_batch", sm.config.min_examples_per_batch)
      .Add("batch_order", sm.config.shuffle_seed
                              ? "shuffled seed " + std::to_string(*sm.config.shuffle_seed)
                              : std::string("corpus"))
      .Add("length_balanced_batches", false)
      .Add("passes", 1)
      .Add("include_segment_level", sm.config.include_segment_level)
      .Add("dropped_batches", sm.dropped_batches)
      .Add("dropped_frames", sm.dropped_frames)
      .Add("heatmap_clamped_low", heatmap.clamped_low)
      .Add("heatmap_clamped_high", heatmap.clamped_high);
  return kv;
}

}  // namespace layerlens
