#include <cmath>
#include <fstream>
#include <limits>

#include <gtest/gtest.h>

#include "fixtures.hpp"
#include "oracles.hpp"
#include "sing/bundle.hpp"
#include "sing/error.hpp"
#include "sing/tensor_store.hpp"

using namespace sing;
using oracle::TempDir;
namespace inv = bundle_invariant;

namespace {

std::string violation(const FeatureBundle& b) {
  try {
    validate(b);
  } catch (const ValidationError& e) {
    return e.invariant();
  }
  return "<none>";
}

}  // namespace

TEST(Bundle, RandomBundlesPassValidation) {
  for (std::uint64_t s = 0; s < 10; ++s) EXPECT_EQ(violation(fixture::random_bundle(s)), "<none>");
}

TEST(Bundle, WriteReadIsBitwiseIdentity) {
  for (std::uint64_t s = 0; s < 20; ++s) {
    TempDir dir("bundle");
    fixture::BundleShape shape;
    shape.n_samples = 5 + static_cast<Eigen::Index>(s);
    shape.bias = s % 2 == 0;
    shape.prompts = s % 3 == 0 ? 0 : 4;
    const FeatureBundle b = fixture::random_bundle(s, shape);
    write_bundle(b, dir.path());
    const FeatureBundle back = read_bundle(dir.path());
    EXPECT_TRUE(bitwise_equal(b, back)) << "seed " << s;
    EXPECT_EQ(back.head_bias.has_value(), shape.bias);
    EXPECT_EQ(back.has_text(), shape.prompts > 0);
  }
}

TEST(Bundle, BitwiseEqualDetectsSingleBitChanges) {
  const FeatureBundle a = fixture::random_bundle(1);
  FeatureBundle b = a;
  EXPECT_TRUE(bitwise_equal(a, b));
  b.features(0, 0) = std::nextafter(b.features(0, 0), 1e9f);
  EXPECT_FALSE(bitwise_equal(a, b));
  b = a;
  b.class_names[0] += " ";
  EXPECT_FALSE(bitwise_equal(a, b));
  b = a;
  b.head_bias.reset();
  EXPECT_FALSE(bitwise_equal(a, b));
  b = a;
  b.text_embeddings->coeffRef(0, 0) = -b.text_embeddings->coeff(0, 0);
  EXPECT_FALSE(bitwise_equal(a, b));
}

TEST(Bundle, ManifestLayout) {
  TempDir dir("layout");
  const FeatureBundle b = fixture::random_bundle(2);
  write_bundle(b, dir.path());
  TensorDirectoryReader r(dir.path());
  EXPECT_EQ(r.manifest()["model_name"], b.model_name);
  EXPECT_EQ(r.manifest()["class_names"].size(), 3u);
  EXPECT_EQ(r.manifest()["prompts"].size(), 3u);
  EXPECT_EQ(r.entry("features").dtype, DType::f32);
  EXPECT_EQ(r.entry("labels").dtype, DType::i64);
  EXPECT_EQ(r.entry("features").shape, (std::vector<std::int64_t>{12, 6}));
  EXPECT_EQ(r.entry("clip_image").file, "clip_image.bin");
}

TEST(Bundle, EveryInvariantHasItsNamedError) {
  const FeatureBundle good = fixture::random_bundle(3);
  FeatureBundle b;

  b = good;
  b.features.resize(0, 6);
  b.clip_image.resize(0, 4);
  b.labels.clear();
  EXPECT_EQ(violation(b), inv::kEmptyTensor);

  b = good;
  b.clip_image.conservativeResize(11, Eigen::NoChange);
  EXPECT_EQ(violation(b), inv::kRowCount);

  b = good;
  b.labels.pop_back();
  EXPECT_EQ(violation(b), inv::kRowCount);

  b = good;
  b.head_weight.conservativeResize(Eigen::NoChange, 5);
  EXPECT_EQ(violation(b), inv::kFeatureDim);

  b = good;
  b.text_embeddings->conservativeResize(Eigen::NoChange, 5);
  EXPECT_EQ(violation(b), inv::kEmbeddingDim);

  b = good;
  b.labels[4] = 3;
  EXPECT_EQ(violation(b), inv::kLabelRange);
  b.labels[4] = -1;
  EXPECT_EQ(violation(b), inv::kLabelRange);

  b = good;
  b.class_names.pop_back();
  EXPECT_EQ(violation(b), inv::kClassNames);

  b = good;
  b.head_bias->conservativeResize(2);
  EXPECT_EQ(violation(b), inv::kBiasLength);

  b = good;
  b.prompts.pop_back();
  EXPECT_EQ(violation(b), inv::kPromptCount);

  b = good;
  b.text_embeddings.reset();
  EXPECT_EQ(violation(b), inv::kPromptCount);

  for (const char* tensor : {"features", "head_weight", "head_bias", "clip_image", "text_embeddings"}) {
    b = good;
    const std::string t = tensor;
    float* data = t == "features"      ? b.features.data()
                  : t == "head_weight" ? b.head_weight.data()
                  : t == "head_bias"   ? b.head_bias->data()
                  : t == "clip_image"  ? b.clip_image.data()
                                       : b.text_embeddings->data();
    data[2] = std::numeric_limits<float>::quiet_NaN();
    EXPECT_EQ(violation(b), inv::kNonFinite) << tensor;
    data[2] = std::numeric_limits<float>::infinity();
    EXPECT_EQ(violation(b), inv::kNonFinite) << tensor;
  }
}

TEST(Bundle, NonFiniteReportsTensorAndFlatIndex) {
  FeatureBundle b = fixture::random_bundle(4);
  b.features(1, 2) = std::numeric_limits<float>::quiet_NaN();
  try {
    validate(b);
    FAIL();
  } catch (const ValidationError& e) {
    EXPECT_NE(std::string(e.what()).find("'features' at flat index 8"), std::string::npos) << e.what();
  }
}

TEST(Bundle, WriteRefusesInvalidBundle) {
  TempDir dir("invalid");
  FeatureBundle b = fixture::random_bundle(5);
  b.labels[0] = 99;
  EXPECT_THROW(write_bundle(b, dir / "out"), ValidationError);
  EXPECT_FALSE(std::filesystem::exists(dir / "out" / kManifestName));
}

TEST(Bundle, ReadChecksInvariantsUnlessDisabled) {
  TempDir dir("corrupt");
  const FeatureBundle b = fixture::random_bundle(6);
  write_bundle(b, dir.path());
  {
    std::fstream f(dir / "labels.bin", std::ios::in | std::ios::out | std::ios::binary);
    const std::int64_t bad = 42;
    f.write(reinterpret_cast<const char*>(&bad), sizeof bad);
  }
  try {
    read_bundle(dir.path());
    FAIL();
  } catch (const ValidationError& e) {
    EXPECT_EQ(e.invariant(), inv::kLabelRange);
  }
  EXPECT_EQ(read_bundle(dir.path(), false).labels[0], 42);
}

TEST(Bundle, TruncatedTensorFileIsByteCountMismatch) {
  TempDir dir("trunc");
  write_bundle(fixture::random_bundle(7), dir.path());
  std::filesystem::resize_file(dir / "features.bin", 100);
  try {
    read_bundle(dir.path());
    FAIL();
  } catch (const ValidationError& e) {
    EXPECT_EQ(e.invariant(), "byte count mismatch");
    EXPECT_NE(std::string(e.what()).find("expected 288"), std::string::npos) << e.what();
  }
}

TEST(Bundle, MissingRequiredTensor) {
  TempDir dir("notensor");
  TensorDirectoryWriter w(dir.path());
  w.add("features", MatrixF(MatrixF::Ones(2, 2)));
  w.commit();
  try {
    read_bundle(dir.path());
    FAIL();
  } catch (const ValidationError& e) {
    EXPECT_EQ(e.invariant(), "missing tensor");
  }
}

TEST(Bundle, Accessors) {
  const FeatureBundle b = fixture::random_bundle(8);
  EXPECT_EQ(b.sample_count(), 12);
  EXPECT_EQ(b.feature_dim(), 6);
  EXPECT_EQ(b.class_count(), 3);
  EXPECT_EQ(b.embedding_dim(), 4);
  EXPECT_EQ(b.prompt_count(), 3);
}
