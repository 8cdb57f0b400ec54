#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "sing/types.hpp"

namespace sing {

/// Everything the analysis needs from one classifier: penultimate features,
/// the final linear head, joint-space image embeddings, labels, and
/// optionally prompt text embeddings. Tensors keep their on-disk f32
/// precision; consumers upcast.
struct FeatureBundle {
  MatrixF features;                       // N x m
  MatrixF head_weight;                    // c x m
  std::optional<VectorF> head_bias;       // c
  MatrixF clip_image;                     // N x n
  Labels labels;                          // N, each in [0, c)
  std::vector<std::string> class_names;   // c
  std::optional<MatrixF> text_embeddings; // K x n
  std::vector<std::string> prompts;       // K, paired with text_embeddings
  std::string model_name;

  Eigen::Index sample_count() const { return features.rows(); }
  Eigen::Index feature_dim() const { return features.cols(); }
  Eigen::Index class_count() const { return head_weight.rows(); }
  Eigen::Index embedding_dim() const { return clip_image.cols(); }
  Eigen::Index prompt_count() const { return text_embeddings ? text_embeddings->rows() : 0; }
  bool has_text() const { return text_embeddings.has_value(); }
};

/// Names reported by `ValidationError::invariant()` for bundle checks.
namespace bundle_invariant {
inline constexpr const char* kEmptyTensor = "empty tensor";
inline constexpr const char* kRowCount = "row count mismatch";
inline constexpr const char* kFeatureDim = "feature dimension mismatch";
inline constexpr const char* kEmbeddingDim = "embedding dimension mismatch";
inline constexpr const char* kLabelRange = "label out of range";
inline constexpr const char* kNonFinite = "non-finite value";
inline constexpr const char* kClassNames = "class names count mismatch";
inline constexpr const char* kBiasLength = "head bias length mismatch";
inline constexpr const char* kPromptCount = "prompt count mismatch";
}  // namespace bundle_invariant

/// Checks every FeatureBundle invariant, including a NaN/Inf scan; throws
/// ValidationError naming the first violation found.
void validate(const FeatureBundle& bundle);

/// Writes manifest.json plus one raw .bin per tensor. Validates first.
void write_bundle(const FeatureBundle& bundle, const std::filesystem::path& directory);

/// Reads a bundle directory. Byte counts and the manifest schema are always
/// checked; `check_invariants` additionally runs `validate`.
FeatureBundle read_bundle(const std::filesystem::path& directory, bool check_invariants = true);

/// Bitwise equality of every tensor and metadata field.
bool bitwise_equal(const FeatureBundle& a, const FeatureBundle& b);

}  // namespace sing
