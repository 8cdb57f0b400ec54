#include "sing/bundle.hpp"

#include <cmath>
#include <cstring>

#include "sing/error.hpp"
#include "sing/tensor_store.hpp"

namespace sing {

namespace inv = bundle_invariant;

namespace {

void require(bool ok, const char* invariant, const std::string& detail) {
  if (!ok) throw ValidationError(invariant, detail);
}

void scan_finite(const float* data, Eigen::Index count, const std::string& tensor) {
  for (Eigen::Index i = 0; i < count; ++i) {
    if (!std::isfinite(data[i]))
      throw ValidationError(inv::kNonFinite, "tensor '" + tensor + "' at flat index " + std::to_string(i));
  }
}

bool same_bits(const float* a, const float* b, Eigen::Index count) {
  return count == 0 || std::memcmp(a, b, static_cast<std::size_t>(count) * sizeof(float)) == 0;
}

bool same_bits(const MatrixF& a, const MatrixF& b) {
  return a.rows() == b.rows() && a.cols() == b.cols() && same_bits(a.data(), b.data(), a.size());
}

std::vector<std::string> string_array(const nlohmann::json& manifest, const char* key) {
  if (!manifest.contains(key)) return {};
  const auto& node = manifest[key];
  if (!node.is_array()) throw ValidationError("manifest schema", std::string("'") + key + "' must be an array");
  std::vector<std::string> out;
  for (const auto& item : node) {
    if (!item.is_string()) throw ValidationError("manifest schema", std::string("'") + key + "' must hold strings");
    out.push_back(item.get<std::string>());
  }
  return out;
}

}  // namespace

void validate(const FeatureBundle& b) {
  const auto n_samples = b.features.rows();
  const auto classes = b.head_weight.rows();

  require(n_samples > 0 && b.features.cols() > 0, inv::kEmptyTensor, "features must be non-empty");
  require(classes > 0 && b.head_weight.cols() > 0, inv::kEmptyTensor, "head_weight must be non-empty");
  require(b.clip_image.cols() > 0, inv::kEmptyTensor, "clip_image must have at least one column");

  require(b.clip_image.rows() == n_samples, inv::kRowCount,
          "clip_image has " + std::to_string(b.clip_image.rows()) + " rows, features has " + std::to_string(n_samples));
  require(static_cast<Eigen::Index>(b.labels.size()) == n_samples, inv::kRowCount,
          "labels has " + std::to_string(b.labels.size()) + " entries, features has " + std::to_string(n_samples));
  require(b.features.cols() == b.head_weight.cols(), inv::kFeatureDim,
          "features has " + std::to_string(b.features.cols()) + " columns, head_weight has " +
              std::to_string(b.head_weight.cols()));
  if (b.head_bias) {
    require(b.head_bias->size() == classes, inv::kBiasLength,
            "head_bias has " + std::to_string(b.head_bias->size()) + " entries for " + std::to_string(classes) + " classes");
  }
  require(static_cast<Eigen::Index>(b.class_names.size()) == classes, inv::kClassNames,
          std::to_string(b.class_names.size()) + " names for " + std::to_string(classes) + " classes");

  if (b.text_embeddings) {
    require(b.text_embeddings->rows() > 0, inv::kEmptyTensor, "text_embeddings must be non-empty when present");
    require(b.text_embeddings->cols() == b.clip_image.cols(), inv::kEmbeddingDim,
            "text_embeddings has " + std::to_string(b.text_embeddings->cols()) + " columns, clip_image has " +
                std::to_string(b.clip_image.cols()));
    require(static_cast<Eigen::Index>(b.prompts.size()) == b.text_embeddings->rows(), inv::kPromptCount,
            std::to_string(b.prompts.size()) + " prompts for " + std::to_string(b.text_embeddings->rows()) +
                " text embeddings");
  } else {
    require(b.prompts.empty(), inv::kPromptCount, "prompts given without text_embeddings");
  }

  for (std::size_t i = 0; i < b.labels.size(); ++i) {
    const auto label = b.labels[i];
    require(label >= 0 && label < classes, inv::kLabelRange,
            "labels[" + std::to_string(i) + "] = " + std::to_string(label) + " with c = " + std::to_string(classes));
  }

  scan_finite(b.features.data(), b.features.size(), "features");
  scan_finite(b.head_weight.data(), b.head_weight.size(), "head_weight");
  if (b.head_bias) scan_finite(b.head_bias->data(), b.head_bias->size(), "head_bias");
  scan_finite(b.clip_image.data(), b.clip_image.size(), "clip_image");
  if (b.text_embeddings) scan_finite(b.text_embeddings->data(), b.text_embeddings->size(), "text_embeddings");
}

void write_bundle(const FeatureBundle& bundle, const std::filesystem::path& directory) {
  validate(bundle);
  TensorDirectoryWriter writer(directory);
  writer.add("features", bundle.features);
  writer.add("head_weight", bundle.head_weight);
  if (bundle.head_bias) writer.add("head_bias", *bundle.head_bias);
  writer.add("clip_image", bundle.clip_image);
  writer.add("labels", bundle.labels);
  if (bundle.text_embeddings) {
    writer.add("text_embeddings", *bundle.text_embeddings);
    writer.fields()["prompts"] = bundle.prompts;
  }
  writer.fields()["model_name"] = bundle.model_name;
  writer.fields()["class_names"] = bundle.class_names;
  writer.commit();
}

FeatureBundle read_bundle(const std::filesystem::path& directory, bool check_invariants) {
  const TensorDirectoryReader reader(directory);
  const auto& manifest = reader.manifest();

  FeatureBundle b;
  if (manifest.contains("model_name")) {
    if (!manifest["model_name"].is_string()) throw ValidationError("manifest schema", "'model_name' must be a string");
    b.model_name = manifest["model_name"].get<std::string>();
  }
  b.class_names = string_array(manifest, "class_names");
  b.prompts = string_array(manifest, "prompts");

  b.features = reader.read_f32_matrix("features");
  b.head_weight = reader.read_f32_matrix("head_weight");
  if (reader.has("head_bias")) b.head_bias = reader.read_f32_vector("head_bias");
  b.clip_image = reader.read_f32_matrix("clip_image");
  b.labels = reader.read_i64_vector("labels");
  if (reader.has("text_embeddings")) b.text_embeddings = reader.read_f32_matrix("text_embeddings");

  if (check_invariants) validate(b);
  return b;
}

bool bitwise_equal(const FeatureBundle& a, const FeatureBundle& b) {
  if (a.model_name != b.model_name || a.class_names != b.class_names || a.prompts != b.prompts) return false;
  if (a.labels != b.labels) return false;
  if (!same_bits(a.features, b.features) || !same_bits(a.head_weight, b.head_weight) ||
      !same_bits(a.clip_image, b.clip_image))
    return false;
  if (a.head_bias.has_value() != b.head_bias.has_value()) return false;
  if (a.head_bias && (a.head_bias->size() != b.head_bias->size() ||
                      !same_bits(a.head_bias->data(), b.head_bias->data(), a.head_bias->size())))
    return false;
  if (a.text_embeddings.has_value() != b.text_embeddings.has_value()) return false;
  if (a.text_embeddings && !same_bits(*a.text_embeddings, *b.text_embeddings)) return false;
  return true;
}

}  // namespace sing
