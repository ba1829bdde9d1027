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

#include <fstream>
#include <random>

#include "test_support.hpp"

namespace layerlens {
namespace {

using testing::ReadFile;
using testing::ReadTree;
using testing::TempDir;

ActivationSet SmallSet(std::uint64_t seed, bool with_segment = false) {
  std::mt19937_64 rng(seed);
  std::vector<std::vector<Matrix>> layers(3);
  const std::vector<Eigen::Index> frames = {5, 3, 7, 4};
  for (auto& layer : layers)
    for (auto t : frames) layer.push_back(testing::RandomMatrix(t, 6, rng));
  auto set = testing::SetFromMatrices(layers, "small");
  set.frame_hop = Rational{50, 1};
  if (with_segment) {
    LayerActivation seg;
    seg.layer_id = 3;
    seg.is_segment_level = true;
    for (std::size_t u = 0; u < frames.size(); ++u)
      seg.sequences.push_back(testing::RandomMatrix(1, 6, rng).cast<float>());
    set.layers.push_back(std::move(seg));
  }
  return set;
}

ErrorCode CodeOf(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.code();
  }
  ADD_FAILURE() << "expected an exception";
  return ErrorCode::kInvalidArgument;
}

TEST(RationalTest, ParsesAndReduces) {
  EXPECT_EQ(Rational::Parse("50").ToString(), "50");
  EXPECT_EQ(Rational::Parse("3/6").ToString(), "1/2");
  EXPECT_DOUBLE_EQ(Rational::Parse("25/2").value(), 12.5);
  EXPECT_EQ(CodeOf([] { Rational::Parse("0"); }), ErrorCode::kInvalidArgument);
  EXPECT_EQ(CodeOf([] { Rational::Parse("x/2"); }), ErrorCode::kParse);
}

TEST(ActvstoreTest, RoundTripPreservesValuesExactly) {
  TempDir dir("rt");
  const auto set = SmallSet(1, true);
  SaveActivationSet(set, dir.path());
  const auto loaded = LoadActivationSet(dir.path());
  ASSERT_EQ(loaded.num_layers(), set.num_layers());
  EXPECT_EQ(loaded.model_name, "small");
  EXPECT_EQ(loaded.frame_hop, set.frame_hop);
  EXPECT_EQ(loaded.utterance_ids, set.utterance_ids);
  for (std::size_t l = 0; l < set.num_layers(); ++l) {
    EXPECT_EQ(loaded.layers[l].is_segment_level, set.layers[l].is_segment_level);
    for (std::size_t u = 0; u < set.num_sequences(); ++u)
      EXPECT_EQ(loaded.layers[l].sequences[u], set.layers[l].sequences[u]);
  }
}

TEST(ActvstoreTest, SaveLoadSaveIsByteIdentical) {
  TempDir a("a"), b("b");
  SaveActivationSet(SmallSet(2, true), a.path());
  SaveActivationSet(LoadActivationSet(a.path()), b.path());
  EXPECT_EQ(ReadTree(a.path()), ReadTree(b.path()));
}

TEST(ActvstoreTest, DataFileIsLittleEndianFloat32FramesContiguous) {
  TempDir dir("le");
  ActivationSet set;
  set.model_name = "le";
  LayerActivation layer;
  FloatMatrix m(2, 2);
  m << 1.0f, 2.0f, 3.0f, -0.5f;
  layer.sequences.push_back(m);
  set.layers.push_back(layer);
  set.utterance_ids = {"u"};
  SaveActivationSet(set, dir.path());
  const std::string bytes = ReadFile(dir / "layer_000.f32");
  ASSERT_EQ(bytes.size(), 16u);
  // 1.0f = 0x3f800000, 2.0f = 0x40000000, 3.0f = 0x40400000, -0.5f = 0xbf000000.
  const unsigned char want[16] = {0, 0, 0x80, 0x3f, 0, 0, 0, 0x40, 0, 0, 0x40, 0x40, 0, 0, 0, 0xbf};
  for (int i = 0; i < 16; ++i) EXPECT_EQ(static_cast<unsigned char>(bytes[i]), want[i]) << i;
}

TEST(ActvstoreTest, LoadsThroughManifestPath) {
  TempDir dir("mp");
  SaveActivationSet(SmallSet(3), dir.path());
  EXPECT_EQ(LoadActivationSet(dir / kManifestFileName).num_layers(), 3u);
}

TEST(ActvstoreTest, MissingManifestNamesPath) {
  TempDir dir("missing");
  try {
    LoadActivationSet(dir / "nothing");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kMissingFile);
    EXPECT_NE(std::string(e.what()).find("nothing"), std::string::npos);
  }
}

TEST(ActvstoreTest, TruncatedDataFileIsDimensionMismatch) {
  TempDir dir("trunc");
  SaveActivationSet(SmallSet(4), dir.path());
  const auto file = dir / "layer_001.f32";
  std::filesystem::resize_file(file, std::filesystem::file_size(file) - 4);
  EXPECT_EQ(CodeOf([&] { LoadActivationSet(dir.path()); }), ErrorCode::kDimensionMismatch);
}

TEST(ActvstoreTest, MissingDataFile) {
  TempDir dir("nodata");
  SaveActivationSet(SmallSet(5), dir.path());
  std::filesystem::remove(dir / "layer_002.f32");
  EXPECT_EQ(CodeOf([&] { LoadActivationSet(dir.path()); }), ErrorCode::kMissingFile);
}

TEST(ActvstoreTest, RejectsUnknownFormatVersion) {
  TempDir dir("ver");
  SaveActivationSet(SmallSet(6), dir.path());
  auto j = nlohmann::json::parse(ReadFile(dir / kManifestFileName));
  j["format_version"] = 99;
  std::ofstream(dir / kManifestFileName) << j.dump();
  EXPECT_EQ(CodeOf([&] { LoadActivationSet(dir.path()); }), ErrorCode::kUnsupportedVersion);
}

TEST(ActvstoreTest, MalformedManifestIsParseError) {
  TempDir dir("bad");
  std::ofstream(dir / kManifestFileName) << "{ not json";
  EXPECT_EQ(CodeOf([&] { LoadActivationSet(dir.path()); }), ErrorCode::kParse);
}

TEST(ActvstoreTest, ValidateRejectsBadSets) {
  auto nan = SmallSet(7);
  nan.layers[1].sequences[2](0, 0) = std::numeric_limits<float>::quiet_NaN();
  EXPECT_EQ(CodeOf([&] { nan.Validate(); }), ErrorCode::kNonFinite);

  auto dims = SmallSet(7);
  dims.layers[0].sequences[1] = FloatMatrix::Zero(3, 5);
  EXPECT_EQ(CodeOf([&] { dims.Validate(); }), ErrorCode::kDimensionMismatch);

  auto seg = SmallSet(7, true);
  seg.layers[3].sequences[0] = FloatMatrix::Zero(2, 6);
  EXPECT_EQ(CodeOf([&] { seg.Validate(); }), ErrorCode::kDimensionMismatch);

  auto ids = SmallSet(7);
  ids.utterance_ids.pop_back();
  EXPECT_EQ(CodeOf([&] { ids.Validate(); }), ErrorCode::kDimensionMismatch);

  TempDir dir("novalidate");
  EXPECT_THROW(SaveActivationSet(nan, dir.path()), Error);
}

TEST(AlignTest, RepeatFactorTwoIsExhaustivelyElementDoubling) {
  for (Eigen::Index t = 1; t <= 6; ++t) {
    for (Eigen::Index d = 1; d <= 3; ++d) {
      Matrix x(t, d);
      for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = static_cast<double>(i + 1);
      const Matrix up = UpsampleRepeat(x, 2);
      ASSERT_EQ(up.rows(), 2 * t);
      for (Eigen::Index i = 0; i < t; ++i) {
        EXPECT_EQ(up.row(2 * i), x.row(i));
        EXPECT_EQ(up.row(2 * i + 1), x.row(i));
      }
    }
  }
}

TEST(AlignTest, FactorOneIsIdentityAndZeroIsRejected) {
  Matrix x = Matrix::Random(4, 3);
  EXPECT_EQ(UpsampleRepeat(x, 1), x);
  EXPECT_THROW(UpsampleRepeat(x, 0), Error);
}

TEST(AlignTest, LowerRateSideIsRepeatedThenTruncated) {
  // 25 Hz vs 50 Hz: a is repeated twice, and b has one frame more than 2 * Ta.
  Matrix a(3, 1), b(7, 1);
  a << 1, 2, 3;
  b << 10, 11, 12, 13, 14, 15, 16;
  const auto p = AlignPair(a, b, Rational{25, 1}, Rational{50, 1});
  Matrix want_a(6, 1);
  want_a << 1, 1, 2, 2, 3, 3;
  EXPECT_EQ(p.a, want_a);
  EXPECT_EQ(p.b, b.topRows(6));

  const auto q = AlignPair(b, a, Rational{50, 1}, Rational{25, 1});
  EXPECT_EQ(q.b, want_a);
  EXPECT_EQ(q.a, b.topRows(6));
}

TEST(AlignTest, EqualRatesTruncateToShorter) {
  Matrix a = Matrix::Random(5, 2), b = Matrix::Random(4, 3);
  const auto p = AlignPair(a, b, Rational{50, 1}, Rational{50, 1});
  EXPECT_EQ(p.a, a.topRows(4));
  EXPECT_EQ(p.b, b);
}

TEST(AlignTest, SegmentLevelIsBroadcast) {
  RowVector v(3);
  v << 1, 2, 3;
  Matrix frames = Matrix::Random(5, 2);
  const auto p = AlignPair(Matrix(v), frames, Rational{1, 1}, Rational{50, 1}, true, false);
  ASSERT_EQ(p.a.rows(), 5);
  for (Eigen::Index i = 0; i < 5; ++i) EXPECT_EQ(p.a.row(i), v);
  EXPECT_EQ(p.b, frames);
}

TEST(AlignTest, NonIntegerRateRatioIsRejected) {
  EXPECT_EQ(RepeatFactor(Rational{50, 1}, Rational{25, 1}), 2);
  EXPECT_EQ(RepeatFactor(Rational{100, 1}, Rational{49, 1}), 2);
  EXPECT_THROW(RepeatFactor(Rational{50, 1}, Rational{20, 1}), Error);
}

}  // namespace
}  // namespace layerlens
