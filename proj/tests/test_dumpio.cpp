#include <bit>
#include <cmath>
#include <cstring>
#include <random>
#include <sstream>

#include <gtest/gtest.h>

#include "iseg/dumpio.hpp"
#include "iseg/synthetic_dump.hpp"

using iseg::Matrix;

namespace {

iseg::AttnDump minimal_dump() {
  iseg::AttnDump d;
  d.image_id = "tiny";
  d.image_size = {4, 4};
  d.token_meta.tokens = {"<s>", "cat", "background", "</s>"};
  d.token_meta.categories = {{"cat", {1}}};
  d.token_meta.background_indices = {2};
  Matrix sa(4, 4);
  sa << 0.5, 0.25, 0.125, 0.125,  //
      0.25, 0.5, 0.125, 0.125,     //
      0.125, 0.125, 0.5, 0.25,     //
      0.125, 0.125, 0.25, 0.5;
  d.self_attention = {{2, 2}, sa, false};
  iseg::CrossQK c;
  c.name = "up.1";
  c.grid = {2, 2};
  c.d = 2;
  c.q = Matrix(4, 2);
  c.q << 1, 0, 0, 1, 0.5, 0.5, -1, 0.25;
  c.k = Matrix(4, 2);
  c.k << 0, 0, 1, 0.5, 0.25, 1, 0, 0;
  d.cross.push_back(c);
  return d;
}

// Offset of the first payload byte.
std::size_t payload_start(const std::string& bytes) {
  std::uint32_t len = 0;
  std::memcpy(&len, bytes.data() + 12, 4);
  return 16 + len;
}

void put_f32(std::string& bytes, std::size_t at, float v) {
  const auto u = std::bit_cast<std::uint32_t>(v);
  for (int b = 0; b < 4; ++b) bytes[at + static_cast<std::size_t>(b)] = static_cast<char>((u >> (8 * b)) & 0xFF);
}

}  // namespace

TEST(Dump, RoundTripMinimal) {
  const auto d = minimal_dump();
  std::stringstream ss;
  iseg::write_dump(d, ss);
  const auto back = iseg::read_dump(ss);
  EXPECT_EQ(back.image_id, d.image_id);
  EXPECT_EQ(back.timestep, 100);
  EXPECT_EQ(back.pathway, iseg::Pathway::offline);
  EXPECT_EQ(back.image_size, d.image_size);
  EXPECT_EQ(back.self_attention.grid, d.self_attention.grid);
  EXPECT_EQ(back.self_attention.data, d.self_attention.data);
  EXPECT_EQ(back.token_meta, d.token_meta);
  ASSERT_EQ(back.cross.size(), 1u);
  EXPECT_EQ(back.cross[0].name, "up.1");
  EXPECT_EQ(back.cross[0].q, d.cross[0].q);
  EXPECT_EQ(back.cross[0].k, d.cross[0].k);
  EXPECT_EQ(back.cross[0].d, 2.0);
}

TEST(Dump, ReencodingIsByteExact) {
  iseg::SceneOptions so;
  so.grid = {16, 16};
  const auto scene = iseg::generate_scene(so, 3);
  iseg::NoiseSpec noise;
  noise.locality = 1.0;
  const auto bytes = iseg::encode_dump(iseg::make_synthetic_dump(scene, noise, {}, "s"));
  EXPECT_EQ(iseg::encode_dump(iseg::decode_dump(bytes)), bytes);
}

TEST(Dump, LayoutPreamble) {
  const auto bytes = iseg::encode_dump(minimal_dump());
  EXPECT_EQ(bytes.substr(0, 8), "ISEGATTN");
  EXPECT_EQ(static_cast<unsigned char>(bytes[8]), 1);
  EXPECT_EQ(bytes[9], 0);
  const auto header = nlohmann::json::parse(bytes.substr(16, payload_start(bytes) - 16));
  EXPECT_EQ(header["tensors"][0]["name"], "self_attention");
  EXPECT_EQ(header["tensors"][0]["length"], 64);
  EXPECT_EQ(bytes.size(), payload_start(bytes) + 64 + 32 + 32);
}

TEST(Dump, Truncation) {
  const auto bytes = iseg::encode_dump(minimal_dump());
  EXPECT_THROW(iseg::decode_dump(bytes.substr(0, 10)), iseg::TruncationError);
  EXPECT_THROW(iseg::decode_dump(bytes.substr(0, 40)), iseg::TruncationError);
  try {
    iseg::decode_dump(bytes.substr(0, bytes.size() - 3));
    FAIL() << "expected truncation error";
  } catch (const iseg::TruncationError& e) {
    EXPECT_NE(std::string(e.what()).find("cross.0.k"), std::string::npos);
  }
}

TEST(Dump, BadMagicAndVersion) {
  auto bytes = iseg::encode_dump(minimal_dump());
  auto bad = bytes;
  bad[0] = 'X';
  EXPECT_THROW(iseg::decode_dump(bad), iseg::ValidationError);
  bad = bytes;
  bad[8] = 2;
  EXPECT_THROW(iseg::decode_dump(bad), iseg::ValidationError);
}

TEST(Dump, DeclaredLengthMismatchNamesField) {
  const auto bytes = iseg::encode_dump(minimal_dump());
  const std::size_t start = payload_start(bytes);
  auto header = nlohmann::json::parse(bytes.substr(16, start - 16));
  header["tensors"][1]["shape"] = {3, 2};
  const std::string text = header.dump();
  std::string out = bytes.substr(0, 12);
  const auto len = static_cast<std::uint32_t>(text.size());
  for (int b = 0; b < 4; ++b) out.push_back(static_cast<char>((len >> (8 * b)) & 0xFF));
  out += text + bytes.substr(start);
  try {
    iseg::decode_dump(out);
    FAIL() << "expected shape error";
  } catch (const iseg::ShapeError& e) {
    EXPECT_NE(std::string(e.what()).find("cross.0.q"), std::string::npos);
  }
}

TEST(Dump, RejectsNanAndNonStochasticRows) {
  const auto bytes = iseg::encode_dump(minimal_dump());
  const std::size_t start = payload_start(bytes);
  auto bad = bytes;
  put_f32(bad, start + 4 * 5, std::nanf(""));
  EXPECT_THROW(iseg::decode_dump(bad), iseg::ValidationError);

  auto d = minimal_dump();
  d.self_attention.data.row(2) *= 0.5;
  EXPECT_THROW(iseg::decode_dump(iseg::encode_dump(d)), iseg::ValidationError);

  d = minimal_dump();
  d.self_attention.data(0, 0) += 5e-4;  // within the producer tolerance
  EXPECT_NO_THROW(iseg::decode_dump(iseg::encode_dump(d)));

  bad = bytes + "xx";
  EXPECT_THROW(iseg::decode_dump(bad), iseg::ValidationError);
}

TEST(Dump, RejectsInvalidTokenMeta) {
  auto d = minimal_dump();
  d.token_meta.background_indices = {1};
  EXPECT_THROW(iseg::decode_dump(iseg::encode_dump(d)), iseg::ValidationError);
  d = minimal_dump();
  d.token_meta.categories[0].positions = {9};
  EXPECT_THROW(iseg::decode_dump(iseg::encode_dump(d)), iseg::Error);
}

TEST(Dump, SyntheticDumpIsConforming) {
  iseg::SceneOptions so;
  so.grid = {16, 16};
  for (std::uint64_t s = 0; s < 5; ++s) {
    const auto scene = iseg::generate_scene(so, s);
    iseg::SyntheticDumpOptions opt;
    opt.seed = s;
    const auto d = iseg::make_synthetic_dump(scene, {}, opt, "x");
    EXPECT_NO_THROW(iseg::decode_dump(iseg::encode_dump(d)));
    EXPECT_EQ(d.token_meta.categories.size(), static_cast<std::size_t>(scene.segments));
    EXPECT_EQ(iseg::dump_levels(d), (std::vector<iseg::Grid>{{8, 8}, {16, 16}}));
  }
}

class Fuse : public ::testing::Test {
 protected:
  void SetUp() override {
    iseg::SceneOptions so;
    so.grid = {16, 16};
    scene_ = iseg::generate_scene(so, 11);
    iseg::SyntheticDumpOptions opt;
    opt.seed = 12;
    dump_ = iseg::make_synthetic_dump(scene_, {}, opt, "fuse");
  }
  iseg::SyntheticScene scene_;
  iseg::AttnDump dump_;
};

TEST_F(Fuse, SingleLevelEqualsUpsampledLayer) {
  const auto stack = iseg::fuse_cross_attention(dump_, dump_.token_meta, {{8, 8}});
  ASSERT_EQ(stack.layers.size(), 1u);
  const Matrix expected = iseg::resize_bilinear(
      iseg::category_enhanced_attention(dump_.cross[0].q, dump_.cross[0].k, dump_.token_meta, dump_.cross[0].d), {8, 8}, {16, 16});
  EXPECT_LT((stack.fused - expected).cwiseAbs().maxCoeff(), 1e-14);
  EXPECT_EQ(stack.grid, dump_.self_attention.grid);
  for (const auto& l : stack.layers) EXPECT_LT((l.map.rowwise().sum().array() - 1.0).abs().maxCoeff(), 1e-5);
  EXPECT_GE(stack.fused.minCoeff(), 0.0);
}

TEST_F(Fuse, IdenticalLayersFuseToEither) {
  auto d = dump_;
  d.cross.resize(1);
  d.cross.push_back(d.cross[0]);
  const auto both = iseg::fuse_cross_attention(d, d.token_meta, {});
  const auto one = iseg::fuse_cross_attention(dump_, dump_.token_meta, {{8, 8}});
  EXPECT_EQ(both.layers.size(), 2u);
  EXPECT_LT((both.fused - one.fused).cwiseAbs().maxCoeff(), 1e-14);
}

TEST_F(Fuse, BothLevelsDifferFromHighResolutionAlone) {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 10; ++trial) {
    iseg::SyntheticDumpOptions opt;
    opt.seed = rng();
    opt.level_divisors = {2, 1};
    const auto d = iseg::make_synthetic_dump(scene_, {}, opt, "r");
    const auto both = iseg::fuse_cross_attention(d, d.token_meta, {{8, 8}, {16, 16}});
    const auto high = iseg::fuse_cross_attention(d, d.token_meta, {{16, 16}});
    EXPECT_GT((both.fused - high.fused).cwiseAbs().maxCoeff(), 1e-6);
  }
}

TEST_F(Fuse, GammaPathways) {
  auto meta = dump_.token_meta;
  meta.gamma = 1.0;
  const auto plain = iseg::fuse_cross_attention(dump_, meta, {});
  meta.gamma = 1.6;
  const auto enhanced = iseg::fuse_cross_attention(dump_, meta, {});
  EXPECT_GT((plain.fused - enhanced.fused).cwiseAbs().maxCoeff(), 1e-6);

  auto embedded = dump_;
  embedded.pathway = iseg::Pathway::embedding;
  EXPECT_EQ(iseg::fuse_cross_attention(embedded, meta, {}).fused, plain.fused);
}

TEST_F(Fuse, MissingLevelIsConfigError) {
  EXPECT_THROW(iseg::fuse_cross_attention(dump_, dump_.token_meta, {{32, 32}}), iseg::ConfigError);
}

TEST(TokenMetaJson, RoundTrip) {
  const auto m = iseg::synthetic_token_meta(2, 1.4);
  EXPECT_EQ(iseg::token_meta_from_json(iseg::to_json(m)), m);
  EXPECT_THROW(iseg::token_meta_from_json(nlohmann::json::object()), iseg::ValidationError);
}

TEST(Resample, BilinearAndNearest) {
  Matrix m(4, 1);
  m << 0, 1, 2, 3;
  const Matrix up = iseg::resize_bilinear(m, {2, 2}, {4, 4});
  EXPECT_DOUBLE_EQ(up(0, 0), 0.0);
  EXPECT_DOUBLE_EQ(up(1, 0), 0.25);
  EXPECT_DOUBLE_EQ(up(15, 0), 3.0);
  EXPECT_EQ(iseg::resize_bilinear(m, {2, 2}, {2, 2}), m);
  EXPECT_THROW(iseg::resize_bilinear(m, {3, 3}, {2, 2}), iseg::ShapeError);

  iseg::SegMask s({2, 2});
  s.labels = {0, 1, 2, 3};
  const auto big = iseg::resize_nearest(s, {4, 6});
  EXPECT_EQ(big.at(0, 0), 0);
  EXPECT_EQ(big.at(0, 5), 1);
  EXPECT_EQ(big.at(3, 0), 2);
  EXPECT_EQ(big.at(3, 5), 3);
}
