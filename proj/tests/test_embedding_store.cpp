#include <gtest/gtest.h>

#include <cmath>
#include <cstring>
#include <filesystem>
#include <random>

#include "cfcbm/embedding_store.hpp"
#include "cfcbm/synthetic.hpp"

using namespace cfcbm;
namespace fs = std::filesystem;

namespace {

fs::path temp_path(const std::string& name) {
  return fs::path(::testing::TempDir()) / ("cfcbm_store_" + name);
}

EmbeddingBundle small_bundle(bool with_truth = true) {
  SyntheticSpec spec;
  spec.n_examples = 12;
  spec.n_classes = 3;
  spec.embed_dim = 8;
  spec.attributes_per_class = 2;
  spec.n_patches = 4;
  auto bundle = make_synthetic(spec).bundle;
  if (!with_truth) {
    bundle.dataset.example_attributes.reset();
    bundle.dataset.class_attributes.reset();
  }
  return bundle;
}

// Rounds every stored value to f32 the way the file does.
Matrix as_f32(const Matrix& m) {
  Matrix out = m;
  for (auto& v : out.values()) v = static_cast<double>(static_cast<float>(v));
  return out;
}

void overwrite_f32(std::vector<char>& bytes, std::size_t offset, float value) {
  std::memcpy(bytes.data() + offset, &value, sizeof(float));
}

}  // namespace

TEST(L2Normalize, Examples) {
  const auto v = l2_normalize(std::vector<double>{3.0, 4.0});
  EXPECT_NEAR(v[0], 0.6, 1e-15);
  EXPECT_NEAR(v[1], 0.8, 1e-15);
  const std::vector<double> unit{0.0, 1.0, 0.0};
  EXPECT_EQ(l2_normalize(unit), unit);
  EXPECT_THROW(l2_normalize(std::vector<double>{0.0, 0.0}), DegenerateInputError);
}

TEST(PerfectSquare, Values) {
  for (std::uint64_t v : {1u, 4u, 9u, 16u, 64u, 256u}) EXPECT_TRUE(is_perfect_square(v));
  for (std::uint64_t v : {2u, 3u, 8u, 15u, 17u}) EXPECT_FALSE(is_perfect_square(v));
}

TEST(Similarity, Examples) {
  EmbeddingDataset d;
  d.n_examples = 1;
  d.embed_dim = 2;
  d.n_patches = 1;
  d.image_embeddings = Matrix{{0.6, 0.8}};
  d.patch_embeddings = Matrix{{0.0, 1.0}};
  ConceptEmbeddings c{Matrix{{0.6, 0.8}, {0.8, 0.6}, {0.8, -0.6}}, Matrix{{0.0, 1.0}, {1.0, 0.0}}};
  const Matrix sh = similarity_high(d, c);
  EXPECT_NEAR(sh(0, 0), 1.0, 1e-15);
  EXPECT_NEAR(sh(0, 1), 0.96, 1e-15);
  EXPECT_NEAR(sh(0, 2), 0.0, 1e-15);
  const Matrix sl = similarity_low(d, c);
  EXPECT_EQ(sl, (Matrix{{1.0, 0.0}}));

  ConceptEmbeddings wrong{Matrix(1, 3), Matrix(1, 3)};
  EXPECT_THROW(similarity_high(d, wrong), DimensionError);
  EXPECT_THROW(similarity_low(d, wrong), DimensionError);
}

TEST(Similarity, SinglePatchMatchesHighFormula) {
  auto bundle = small_bundle();
  auto& d = bundle.dataset;
  d.n_patches = 1;
  d.patch_embeddings = d.image_embeddings;
  const ConceptEmbeddings swapped{bundle.concepts.low, bundle.concepts.high};
  EXPECT_EQ(similarity_low(d, bundle.concepts), similarity_high(d, swapped));
}

TEST(Similarity, BoundedAndScaleInvariant) {
  std::mt19937 rng(21);
  std::normal_distribution<double> g;
  for (int trial = 0; trial < 20; ++trial) {
    EmbeddingDataset d;
    d.image_embeddings = Matrix(5, 6);
    ConceptEmbeddings c{Matrix(4, 6), Matrix(1, 6)};
    for (auto& v : d.image_embeddings.values()) v = g(rng);
    for (auto& v : c.high.values()) v = g(rng);
    Matrix raw = d.image_embeddings;
    l2_normalize_rows(d.image_embeddings);
    l2_normalize_rows(c.high);
    const Matrix s = similarity_high(d, c);
    for (double v : s.values()) {
      EXPECT_GE(v, -1.0 - 1e-12);
      EXPECT_LE(v, 1.0 + 1e-12);
    }
    for (auto& v : raw.row(2)) v *= 37.5;
    l2_normalize_rows(raw);
    d.image_embeddings = raw;
    const Matrix scaled = similarity_high(d, c);
    for (std::size_t h = 0; h < 4; ++h) EXPECT_NEAR(scaled(2, h), s(2, h), 1e-12);
  }
}

TEST(Cfeb, RoundTripIsExactAtSinglePrecision) {
  const auto bundle = small_bundle();
  const auto path = temp_path("roundtrip.cfeb");
  write_dataset(path, bundle);
  const auto back = load_dataset(path);
  const auto& a = bundle.dataset;
  const auto& b = back.dataset;
  EXPECT_EQ(b.n_examples, a.n_examples);
  EXPECT_EQ(b.n_patches, a.n_patches);
  EXPECT_EQ(b.embed_dim, a.embed_dim);
  EXPECT_EQ(b.n_classes, a.n_classes);
  EXPECT_EQ(b.labels, a.labels);
  EXPECT_EQ(b.image_embeddings, as_f32(a.image_embeddings));
  EXPECT_EQ(b.patch_embeddings, as_f32(a.patch_embeddings));
  EXPECT_EQ(back.concepts.high, as_f32(bundle.concepts.high));
  EXPECT_EQ(back.concepts.low, as_f32(bundle.concepts.low));
  EXPECT_EQ(b.example_attributes, a.example_attributes);
  EXPECT_EQ(b.class_attributes, a.class_attributes);

  // A second trip is bit-exact.
  write_dataset(path, back);
  const auto again = load_dataset(path);
  EXPECT_EQ(again.dataset.image_embeddings, b.image_embeddings);
  EXPECT_EQ(again.concepts.low, back.concepts.low);
}

TEST(Cfeb, GroundTruthIsOptional) {
  const auto bundle = small_bundle(false);
  const auto bytes = encode_dataset(bundle);
  const auto back = decode_dataset(bytes, "mem");
  EXPECT_FALSE(back.dataset.example_attributes.has_value());
  EXPECT_FALSE(back.dataset.class_attributes.has_value());
}

TEST(Cfeb, HeaderFields) {
  const auto bundle = small_bundle();
  const auto path = temp_path("header.cfeb");
  write_dataset(path, bundle);
  const auto h = read_header(path);
  EXPECT_EQ(h.version, 1u);
  EXPECT_EQ(h.flags, kFlagExampleAttributes | kFlagClassAttributes);
  EXPECT_EQ(h.n, 12u);
  EXPECT_EQ(h.p, 4u);
  EXPECT_EQ(h.k, 8u);
  EXPECT_EQ(h.c, 3u);
  EXPECT_EQ(h.h, 3u);
  EXPECT_EQ(h.l_all, 6u);
  EXPECT_EQ(fs::file_size(path), kCfebHeaderBytes + detail::expected_payload_bytes(h, "x"));
}

TEST(Cfeb, BadMagic) {
  auto bytes = encode_dataset(small_bundle());
  std::memcpy(bytes.data(), "XXXX", 4);
  EXPECT_THROW(decode_dataset(bytes, "mem"), FormatError);
}

TEST(Cfeb, BadVersion) {
  auto bytes = encode_dataset(small_bundle());
  bytes[4] = 2;
  EXPECT_THROW(decode_dataset(bytes, "mem"), FormatError);
}

TEST(Cfeb, TruncatedAndTrailingBytes) {
  auto bytes = encode_dataset(small_bundle());
  auto truncated = bytes;
  truncated.pop_back();
  EXPECT_THROW(decode_dataset(truncated, "mem"), FormatError);
  std::vector<char> header_only(bytes.begin(), bytes.begin() + 20);
  EXPECT_THROW(decode_dataset(header_only, "mem"), FormatError);
  auto longer = bytes;
  longer.push_back(0);
  EXPECT_THROW(decode_dataset(longer, "mem"), FormatError);
}

TEST(Cfeb, SlightlyOffNormIsRenormalized) {
  auto bundle = small_bundle();
  for (auto& v : bundle.dataset.image_embeddings.row(3)) v *= 0.9999;
  const auto back = decode_dataset(encode_dataset(bundle), "mem");
  double sq = 0.0;
  for (double v : back.dataset.image_embeddings.row(3)) sq += v * v;
  EXPECT_NEAR(std::sqrt(sq), 1.0, 1e-12);
}

TEST(Cfeb, FarOffNormIsCorruptAndNamesTheRow) {
  auto bundle = small_bundle();
  for (auto& v : bundle.dataset.patch_embeddings.row(5)) v *= 0.5;
  try {
    decode_dataset(encode_dataset(bundle), "mem");
    FAIL() << "expected CorruptDataError";
  } catch (const CorruptDataError& e) {
    EXPECT_NE(std::string(e.what()).find("row 5"), std::string::npos) << e.what();
  }
}

TEST(Cfeb, NonFiniteValueIsCorrupt) {
  auto bytes = encode_dataset(small_bundle());
  const std::size_t first_image_value = kCfebHeaderBytes + 12 * 4;
  overwrite_f32(bytes, first_image_value, std::nanf(""));
  EXPECT_THROW(decode_dataset(bytes, "mem"), CorruptDataError);
}

TEST(Cfeb, LabelOutOfRange) {
  auto bytes = encode_dataset(small_bundle());
  const std::uint32_t bad = 3;
  std::memcpy(bytes.data() + kCfebHeaderBytes, &bad, sizeof bad);
  EXPECT_THROW(decode_dataset(bytes, "mem"), CorruptDataError);
}

TEST(Cfeb, NonBinaryGroundTruth) {
  auto bytes = encode_dataset(small_bundle());
  bytes.back() = 2;
  EXPECT_THROW(decode_dataset(bytes, "mem"), CorruptDataError);
}

TEST(Cfeb, NonSquarePatchCount) {
  auto bundle = small_bundle(false);
  auto& d = bundle.dataset;
  d.n_patches = 2;
  d.patch_embeddings = Matrix(d.n_examples * 2, d.embed_dim);
  for (std::size_t r = 0; r < d.patch_embeddings.rows(); ++r) d.patch_embeddings(r, 0) = 1.0;
  EXPECT_THROW(decode_dataset(encode_dataset(bundle), "mem"), CorruptDataError);
}

TEST(Cfeb, EncodeRejectsInconsistentShapes) {
  auto bundle = small_bundle();
  bundle.dataset.labels.pop_back();
  EXPECT_THROW(encode_dataset(bundle), DimensionError);
}

TEST(Cfeb, MissingFile) {
  EXPECT_THROW(load_dataset(temp_path("does_not_exist.cfeb")), IoError);
}
