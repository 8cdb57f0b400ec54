#pragma once

#include <string>

#include "sing/bundle.hpp"
#include "sing/rng.hpp"

namespace fixture {

struct BundleShape {
  Eigen::Index n_samples = 12;
  Eigen::Index feature_dim = 6;
  Eigen::Index classes = 3;
  Eigen::Index embed_dim = 4;
  Eigen::Index prompts = 3;
  bool bias = true;
};

inline sing::FeatureBundle random_bundle(std::uint64_t seed, const BundleShape& s = {}) {
  sing::Rng rng(seed);
  sing::FeatureBundle b;
  b.model_name = "random_" + std::to_string(seed);
  b.features = rng.normal_matrix(s.n_samples, s.feature_dim).cast<float>();
  b.head_weight = rng.normal_matrix(s.classes, s.feature_dim).cast<float>();
  if (s.bias) b.head_bias = rng.normal_vector(s.classes).cast<float>();
  b.clip_image = rng.normal_matrix(s.n_samples, s.embed_dim).cast<float>();
  for (Eigen::Index i = 0; i < s.n_samples; ++i)
    b.labels.push_back(static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(s.classes))));
  for (Eigen::Index k = 0; k < s.classes; ++k) b.class_names.push_back("class, \"" + std::to_string(k) + "\"");
  if (s.prompts > 0) {
    b.text_embeddings = rng.normal_matrix(s.prompts, s.embed_dim).cast<float>();
    for (Eigen::Index k = 0; k < s.prompts; ++k) b.prompts.push_back("an image of a class " + std::to_string(k));
  }
  return b;
}

}  // namespace fixture
