#pragma once

#include <string>
#include <vector>

#include <json.hpp>

#include "sing/bundle.hpp"
#include "sing/head_decomposition.hpp"
#include "sing/translator.hpp"
#include "sing/types.hpp"

namespace sing {

/// Angle between two nonzero vectors in degrees, computed as
/// 2 atan2(|a - b|, |a + b|) on the unit vectors so that parallel inputs
/// give exactly 0. Throws NumericalError on a zero-norm argument.
double angle_degrees(const Vector& u, const Vector& v);

/// Attribute Score: angle(T f, z_text) - angle(T f_eq, z_text), degrees.
/// Positive when the equivalent feature is closer to the text.
double attribute_score(const Vector& feature, const Vector& equivalent, const Vector& text_embedding,
                       const Translator& translator);

/// Image Score: angle(T f, T f_eq), degrees.
double image_score(const Vector& feature, const Vector& equivalent, const Translator& translator);

struct MetricRecord {
  Eigen::Index sample_id = 0;
  Eigen::Index class_id = 0;
  Eigen::Index prompt_id = -1;  // -1 for image-score-only records
  double attribute_score = 0.0;
  double image_score = 0.0;
  double angle_original = 0.0;
  double angle_equivalent = 0.0;
};

/// Which prompts each sample is scored against.
struct PromptSelector {
  enum class Kind {
    true_class,  // prompt k is "an image of a <class k>"; sample uses its label
    prompt_id,   // one fixed prompt for every sample
    all_prompts,
    image_only,  // no text; IS only, prompt_id = -1 and AS = angles = 0
  };
  Kind kind = Kind::true_class;
  Eigen::Index prompt = 0;

  static PromptSelector true_class() { return {Kind::true_class, 0}; }
  static PromptSelector single(Eigen::Index id) { return {Kind::prompt_id, id}; }
  static PromptSelector all() { return {Kind::all_prompts, 0}; }
  static PromptSelector image_only() { return {Kind::image_only, 0}; }
};

struct SkippedSample {
  Eigen::Index sample_id = 0;
  std::string reason;
};

struct BatchMetrics {
  std::vector<MetricRecord> records;  // ordered by (sample_id, prompt_id)
  std::vector<SkippedSample> skipped;
};

/// Null-removes every sample (f_eq = f - Pi_n f) and scores the pair.
/// Samples whose translation or null-removed translation is the zero vector
/// are skipped and reported rather than aborting the batch.
BatchMetrics batch_metrics(const FeatureBundle& bundle, const HeadDecomposition& decomp, const Translator& translator,
                           PromptSelector selector);

inline constexpr const char* kMetricCsvHeader = "sample_id,class_id,prompt_id,AS_deg,IS_deg,angle_orig_deg,angle_eq_deg";

std::string metric_records_csv(const std::vector<MetricRecord>& records);
nlohmann::json metric_records_json(const std::vector<MetricRecord>& records);

}  // namespace sing
