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

// Activation container and temporal alignment.
//
// An activation set lives in a directory:
//
//   manifest.json      format_version, model_name, frame_hop, utterance_ids,
//                      and one record per layer
//                      {layer_id, dim, is_segment_level, data_file, frame_counts}
//   layer_000.f32      raw little-endian float32, row-major frames,
//   layer_001.f32      sequences concatenated in utterance order
//   ...
//
// frame_hop is a rate (frames per unit time, relative scale) written as
// "num/den" or an integer. Two sets with hops 2 and 1 are aligned by
// repeating every frame of the second one twice.

#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "layerlens/types.hpp"

namespace layerlens {

inline constexpr int kManifestFormatVersion = 1;
inline constexpr const char* kManifestFileName = "manifest.json";

struct Rational {
  std::int64_t num = 1;
  std::int64_t den = 1;

  double value() const { return static_cast<double>(num) / static_cast<double>(den); }

  std::string ToString() const {
    if (den == 1) return std::to_string(num);
    return std::to_string(num) + "/" + std::to_string(den);
  }

  static Rational Parse(const std::string& text) {
    Rational r;
    try {
      auto slash = text.find('/');
      std::size_t used = 0;
      if (slash == std::string::npos) {
        r.num = std::stoll(text, &used);
        Check(used == text.size(), ErrorCode::kParse, "bad rational '" + text + "'");
        r.den = 1;
      } else {
        std::string a = text.substr(0, slash), b = text.substr(slash + 1);
        r.num = std::stoll(a, &used);
        Check(used == a.size(), ErrorCode::kParse, "bad rational '" + text + "'");
        r.den = std::stoll(b, &used);
        Check(used == b.size(), ErrorCode::kParse, "bad rational '" + text + "'");
      }
    } catch (const std::logic_error&) {
      throw Error(ErrorCode::kParse, "bad rational '" + text + "'");
    }
    Check(r.num > 0 && r.den > 0, ErrorCode::kInvalidArgument,
          "frame_hop must be positive, got '" + text + "'");
    auto g = std::gcd(r.num, r.den);
    r.num /= g;
    r.den /= g;
    return r;
  }

  friend bool operator==(const Rational&, const Rational&) = default;
};

struct LayerActivation {
  int layer_id = 0;
  // One T_i x D matrix per utterance.
  std::vector<FloatMatrix> sequences;
  bool is_segment_level = false;

  Eigen::Index dim() const { return sequences.empty() ? 0 : sequences.front().cols(); }
};

struct ActivationSet {
  std::string model_name;
  Rational frame_hop;
  std::vector<LayerActivation> layers;
  std::vector<std::string> utterance_ids;

  std::size_t num_layers() const { return layers.size(); }
  std::size_t num_sequences() const { return utterance_ids.size(); }

  // Throws on the first violated invariant.
  void Validate() const {
    Check(!layers.empty(), ErrorCode::kInvalidArgument, "activation set has no layers");
    for (std::size_t l = 0; l < layers.size(); ++l) {
      const auto& layer = layers[l];
      const std::string where = "layer " + std::to_string(l);
      Check(layer.layer_id == static_cast<int>(l), ErrorCode::kInvalidArgument,
            where + ": layer_id " + std::to_string(layer.layer_id) + " breaks the 0..L-1 sequence");
      Check(layer.sequences.size() == utterance_ids.size(), ErrorCode::kDimensionMismatch,
            where + ": " + std::to_string(layer.sequences.size()) + " sequences for " +
                std::to_string(utterance_ids.size()) + " utterances");
      Check(!layer.sequences.empty(), ErrorCode::kInvalidArgument, where + ": no sequences");
      const auto dim = layer.dim();
      Check(dim >= 1, ErrorCode::kDimensionMismatch, where + ": zero feature dimension");
      for (std::size_t i = 0; i < layer.sequences.size(); ++i) {
        const auto& seq = layer.sequences[i];
        Check(seq.cols() == dim, ErrorCode::kDimensionMismatch,
              where + ", sequence " + std::to_string(i) + ": dim " + std::to_string(seq.cols()) +
                  " != " + std::to_string(dim));
        Check(seq.rows() >= 1, ErrorCode::kDimensionMismatch,
              where + ", sequence " + std::to_string(i) + ": no frames");
        Check(!layer.is_segment_level || seq.rows() == 1, ErrorCode::kDimensionMismatch,
              where + ", sequence " + std::to_string(i) + ": segment-level layer with " +
                  std::to_string(seq.rows()) + " frames");
        Check(seq.allFinite(), ErrorCode::kNonFinite,
              where + ", sequence " + std::to_string(i) + " holds a non-finite value");
      }
    }
  }
};

struct LayerRecord {
  int layer_id = 0;
  std::int64_t dim = 0;
  bool is_segment_level = false;
  std::string data_file;
  std::vector<std::int64_t> frame_counts;
};

struct Manifest {
  int format_version = kManifestFormatVersion;
  std::string model_name;
  Rational frame_hop;
  std::vector<std::string> utterance_ids;
  std::vector<LayerRecord> layers;
};

inline nlohmann::ordered_json ToJson(const Manifest& m) {
  nlohmann::ordered_json j;
  j["format_version"] = m.format_version;
  j["model_name"] = m.model_name;
  j["frame_hop"] = m.frame_hop.ToString();
  j["utterance_ids"] = m.utterance_ids;
  auto& layers = j["layers"] = nlohmann::ordered_json::array();
  for (const auto& r : m.layers) {
    nlohmann::ordered_json lj;
    lj["layer_id"] = r.layer_id;
    lj["dim"] = r.dim;
    lj["is_segment_level"] = r.is_segment_level;
    lj["data_file"] = r.data_file;
    lj["frame_counts"] = r.frame_counts;
    layers.push_back(std::move(lj));
  }
  return j;
}

inline Manifest ManifestFromJson(const nlohmann::json& j) {
  Manifest m;
  try {
    m.format_version = j.at("format_version").get<int>();
    Check(m.format_version == kManifestFormatVersion, ErrorCode::kUnsupportedVersion,
          "format_version " + std::to_string(m.format_version));
    m.model_name = j.value("model_name", std::string());
    const auto& hop = j.at("frame_hop");
    m.frame_hop = Rational::Parse(hop.is_string() ? hop.get<std::string>() : hop.dump());
    m.utterance_ids = j.value("utterance_ids", std::vector<std::string>());
    for (const auto& lj : j.at("layers")) {
      LayerRecord r;
      r.layer_id = lj.at("layer_id").get<int>();
      r.dim = lj.at("dim").get<std::int64_t>();
      r.is_segment_level = lj.value("is_segment_level", false);
      r.data_file = lj.at("data_file").get<std::string>();
      r.frame_counts = lj.at("frame_counts").get<std::vector<std::int64_t>>();
      m.layers.push_back(std::move(r));
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::kParse, std::string("manifest: ") + e.what());
  }
  return m;
}

namespace detail {

inline void WriteF32LE(std::ostream& os, const FloatMatrix& m) {
  std::vector<unsigned char> buf(static_cast<std::size_t>(m.size()) * 4);
  for (Eigen::Index i = 0; i < m.size(); ++i) {
    auto bits = std::bit_cast<std::uint32_t>(m.data()[i]);
    for (int b = 0; b < 4; ++b) buf[static_cast<std::size_t>(i) * 4 + b] = (bits >> (8 * b)) & 0xFFu;
  }
  os.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
}

inline float ReadF32LE(const unsigned char* p) {
  std::uint32_t bits = std::uint32_t(p[0]) | (std::uint32_t(p[1]) << 8) |
                       (std::uint32_t(p[2]) << 16) | (std::uint32_t(p[3]) << 24);
  return std::bit_cast<float>(bits);
}

inline std::string LayerFileName(int layer_id) {
  char name[32];
  std::snprintf(name, sizeof(name), "layer_%03d.f32", layer_id);
  return name;
}

}  // namespace detail

// Accepts either the manifest file itself or the directory holding it.
inline ActivationSet LoadActivationSet(const std::filesystem::path& path) {
  namespace fs = std::filesystem;
  fs::path manifest_path = fs::is_directory(path) ? path / kManifestFileName : path;
  Check(fs::is_regular_file(manifest_path), ErrorCode::kMissingFile, manifest_path.string());

  nlohmann::json j;
  {
    std::ifstream in(manifest_path);
    Check(in.good(), ErrorCode::kIo, "cannot open " + manifest_path.string());
    try {
      in >> j;
    } catch (const nlohmann::json::exception& e) {
      throw Error(ErrorCode::kParse, manifest_path.string() + ": " + e.what());
    }
  }
  Manifest m = ManifestFromJson(j);
  Check(!m.layers.empty(), ErrorCode::kInvalidArgument, manifest_path.string() + ": no layers");

  std::sort(m.layers.begin(), m.layers.end(),
            [](const LayerRecord& a, const LayerRecord& b) { return a.layer_id < b.layer_id; });
  const std::size_t num_seq = m.layers.front().frame_counts.size();
  if (m.utterance_ids.empty()) {
    for (std::size_t i = 0; i < num_seq; ++i) m.utterance_ids.push_back(std::to_string(i));
  }

  ActivationSet set;
  set.model_name = m.model_name;
  set.frame_hop = m.frame_hop;
  set.utterance_ids = m.utterance_ids;
  const fs::path dir = manifest_path.parent_path();
  for (const auto& r : m.layers) {
    const std::string where = manifest_path.string() + ": layer " + std::to_string(r.layer_id);
    Check(r.dim >= 1, ErrorCode::kDimensionMismatch, where + ": dim must be positive");
    Check(r.frame_counts.size() == set.utterance_ids.size(), ErrorCode::kDimensionMismatch,
          where + ": " + std::to_string(r.frame_counts.size()) + " frame counts for " +
              std::to_string(set.utterance_ids.size()) + " utterances");
    std::int64_t total_frames = 0;
    for (auto t : r.frame_counts) {
      Check(t >= 1, ErrorCode::kDimensionMismatch, where + ": frame count < 1");
      total_frames += t;
    }

    const fs::path data_path = dir / r.data_file;
    Check(fs::is_regular_file(data_path), ErrorCode::kMissingFile, data_path.string());
    const auto bytes = fs::file_size(data_path);
    Check(bytes % 4 == 0 && static_cast<std::int64_t>(bytes / 4) == total_frames * r.dim,
          ErrorCode::kDimensionMismatch,
          where + ": " + data_path.string() + " holds " + std::to_string(bytes / 4) +
              " floats, frame counts x dim = " + std::to_string(total_frames * r.dim));

    std::vector<unsigned char> raw(bytes);
    std::ifstream in(data_path, std::ios::binary);
    Check(in.good(), ErrorCode::kIo, "cannot open " + data_path.string());
    in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(bytes));
    Check(static_cast<std::uintmax_t>(in.gcount()) == bytes, ErrorCode::kIo,
          "short read on " + data_path.string());

    LayerActivation layer;
    layer.layer_id = r.layer_id;
    layer.is_segment_level = r.is_segment_level;
    const unsigned char* p = raw.data();
    for (auto t : r.frame_counts) {
      FloatMatrix seq(t, r.dim);
      for (Eigen::Index i = 0; i < seq.size(); ++i, p += 4) seq.data()[i] = detail::ReadF32LE(p);
      layer.sequences.push_back(std::move(seq));
    }
    set.layers.push_back(std::move(layer));
  }
  set.Validate();
  return set;
}

inline Manifest MakeManifest(const ActivationSet& set) {
  Manifest m;
  m.model_name = set.model_name;
  m.frame_hop = set.frame_hop;
  m.utterance_ids = set.utterance_ids;
  for (const auto& layer : set.layers) {
    LayerRecord r;
    r.layer_id = layer.layer_id;
    r.dim = layer.dim();
    r.is_segment_level = layer.is_segment_level;
    r.data_file = detail::LayerFileName(layer.layer_id);
    for (const auto& seq : layer.sequences) r.frame_counts.push_back(seq.rows());
    m.layers.push_back(std::move(r));
  }
  return m;
}

inline void SaveActivationSet(const ActivationSet& set, const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  set.Validate();
  std::error_code ec;
  fs::create_directories(dir, ec);
  Check(!ec && fs::is_directory(dir), ErrorCode::kIo, "cannot create directory " + dir.string());

  const Manifest m = MakeManifest(set);
  for (std::size_t l = 0; l < set.layers.size(); ++l) {
    const fs::path data_path = dir / m.layers[l].data_file;
    std::ofstream out(data_path, std::ios::binary | std::ios::trunc);
    Check(out.good(), ErrorCode::kIo, "cannot write " + data_path.string());
    for (const auto& seq : set.layers[l].sequences) detail::WriteF32LE(out, seq);
    Check(out.good(), ErrorCode::kIo, "write failed on " + data_path.string());
  }
  const fs::path manifest_path = dir / kManifestFileName;
  std::ofstream out(manifest_path, std::ios::trunc);
  Check(out.good(), ErrorCode::kIo, "cannot write " + manifest_path.string());
  out << ToJson(m).dump(2) << "\n";
  Check(out.good(), ErrorCode::kIo, "write failed on " + manifest_path.string());
}

// Output row i is input row floor(i / factor).
template <typename Derived>
Eigen::Matrix<typename Derived::Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>
UpsampleRepeat(const Eigen::MatrixBase<Derived>& seq, int factor) {
  Check(factor >= 1, ErrorCode::kInvalidArgument, "repeat factor must be >= 1");
  Eigen::Matrix<typename Derived::Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> out(
      seq.rows() * factor, seq.cols());
  for (Eigen::Index i = 0; i < out.rows(); ++i) out.row(i) = seq.row(i / factor);
  return out;
}

template <typename Derived>
Eigen::Matrix<typename Derived::Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>
BroadcastVector(const Eigen::MatrixBase<Derived>& vec, Eigen::Index length) {
  Check(vec.rows() == 1, ErrorCode::kDimensionMismatch, "broadcast expects a single row");
  Check(length >= 1, ErrorCode::kInvalidArgument, "broadcast length must be >= 1");
  return vec.replicate(length, 1);
}

// Nearest-integer repeat factor between two frame rates. Ratios that are not
// within 10% of an integer cannot be matched by repetition and are rejected.
inline int RepeatFactor(const Rational& hop_a, const Rational& hop_b) {
  const double hi = std::max(hop_a.value(), hop_b.value());
  const double lo = std::min(hop_a.value(), hop_b.value());
  const double ratio = hi / lo;
  const double factor = std::round(ratio);
  Check(std::abs(ratio / factor - 1.0) <= 0.1, ErrorCode::kInvalidArgument,
        "frame-rate ratio " + std::to_string(ratio) + " is not close to an integer");
  return static_cast<int>(factor);
}

struct AlignedPair {
  Matrix a;
  Matrix b;
};

// Brings two views of the same utterance to a common frame axis. A segment-level
// input is broadcast to the other side's length; otherwise the lower-rate side is
// repeated by the rounded rate ratio and both are truncated to the shorter length.
template <typename DerivedA, typename DerivedB>
AlignedPair AlignPair(const Eigen::MatrixBase<DerivedA>& a, const Eigen::MatrixBase<DerivedB>& b,
                      const Rational& hop_a, const Rational& hop_b, bool a_segment = false,
                      bool b_segment = false) {
  Check(a.rows() >= 1 && b.rows() >= 1, ErrorCode::kInvalidArgument, "empty sequence");
  Check(a.cols() >= 1 && b.cols() >= 1, ErrorCode::kInvalidArgument, "zero-width sequence");
  AlignedPair out;
  if (a_segment || b_segment) {
    Check(!a_segment || a.rows() == 1, ErrorCode::kDimensionMismatch,
          "segment-level input with more than one row");
    Check(!b_segment || b.rows() == 1, ErrorCode::kDimensionMismatch,
          "segment-level input with more than one row");
    out.a = a_segment ? BroadcastVector(a.template cast<double>(), b.rows())
                      : Matrix(a.template cast<double>());
    out.b = b_segment ? BroadcastVector(b.template cast<double>(), a.rows())
                      : Matrix(b.template cast<double>());
    return out;
  }
  const int factor = RepeatFactor(hop_a, hop_b);
  if (hop_a.value() < hop_b.value()) {
    out.a = UpsampleRepeat(a.template cast<double>(), factor);
    out.b = b.template cast<double>();
  } else if (hop_b.value() < hop_a.value()) {
    out.a = a.template cast<double>();
    out.b = UpsampleRepeat(b.template cast<double>(), factor);
  } else {
    out.a = a.template cast<double>();
    out.b = b.template cast<double>();
  }
  const Eigen::Index rows = std::min(out.a.rows(), out.b.rows());
  out.a.conservativeResize(rows, Eigen::NoChange);
  out.b.conservativeResize(rows, Eigen::NoChange);
  return out;
}

}  // namespace layerlens
