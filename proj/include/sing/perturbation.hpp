#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "sing/bundle.hpp"
#include "sing/head_decomposition.hpp"
#include "sing/stats.hpp"
#include "sing/translator.hpp"
#include "sing/types.hpp"

namespace sing {

/// Classifier head in f64.
struct Head {
  Matrix weight;              // c x m
  std::optional<Vector> bias; // c

  static Head from_bundle(const FeatureBundle& bundle);
};

/// ||logits(f_perturbed) - logits(f)||_2
double logit_drift(const Head& head, const Vector& original, const Vector& perturbed);

/// f - Pi_n f. Leaves W f unchanged.
Vector null_removal(const Vector& feature, const HeadDecomposition& decomp);

/// Cosine similarity between T f and the text embedding.
double similarity_score(const Vector& feature, const Vector& text_embedding, const Translator& translator);

/// Analytic gradient of `similarity_score` with respect to f:
/// theta^T (w - (u.w) u) / ||z|| with z = theta f, u = z/||z||, w = unit text.
Vector semantic_gradient(const Vector& feature, const Vector& text_embedding, const Translator& translator);

struct CalibrationOptions {
  double tolerance_deg = 0.1;
  int max_iter = 60;  // bisection steps
};

struct Calibration {
  double epsilon = 0.0;
  double achieved_is = 0.0;
  int bisection_steps = 0;
};

/// Finds the smallest step epsilon >= 0 with |IS(f, f + eps*direction) -
/// target| <= tolerance: the step is grown geometrically until IS reaches
/// the target, then the last bracket is bisected. `direction` must be unit.
Calibration calibrate_epsilon(const Vector& feature, const Vector& direction, const Translator& translator,
                              double target_is_deg, CalibrationOptions options = {});

/// z_eq scaled to the norm of z_ref.
Vector rescale_to_reference(const Vector& equivalent, const Vector& reference);

enum class SteeringMode { null_removal, text_gradient, random, principal };

std::string to_string(SteeringMode mode);
SteeringMode parse_steering_mode(const std::string& text);

/// Direction used by the principal baseline.
enum class PrincipalDirection {
  top_singular,  // first right-singular vector, signed to raise the predicted logit
  class_row,     // normalized head row of the predicted class
};

std::string to_string(PrincipalDirection direction);
PrincipalDirection parse_principal_direction(const std::string& text);

struct SteeringSpec {
  SteeringMode mode = SteeringMode::null_removal;
  std::optional<Vector> target_text;
  std::optional<double> epsilon;
  std::optional<double> target_is_deg;
  std::uint64_t seed = 0;
  PrincipalDirection principal_direction = PrincipalDirection::top_singular;
  CalibrationOptions calibration;

  /// Throws ValidationError when the field combination is not allowed.
  void validate() const;
};

struct SteeringResult {
  Vector original;
  Vector perturbed;
  double epsilon_used = 0.0;   // step length; for null removal ||Pi_n f||
  double achieved_is = 0.0;    // degrees
  double logit_drift = 0.0;
  double direction_norm_in_null = 0.0;  // ||Pi_n d|| of the raw direction
  int bisection_steps = 0;
};

/// Builds one perturbed feature. Stepped modes move along a unit direction
/// by the given epsilon or by a calibrated one. For random and principal
/// modes epsilon is the perturbation norm.
SteeringResult steer(const Vector& feature, const SteeringSpec& spec, const HeadDecomposition& decomp,
                     const Translator& translator, const Head& head);

/// Unit direction a stepped mode would move along, plus ||Pi_n d|| of the
/// raw (pre-normalization) direction.
struct SteeringDirection {
  Vector unit;
  double norm_in_null = 0.0;
};
SteeringDirection steering_direction(const Vector& feature, const SteeringSpec& spec, const HeadDecomposition& decomp,
                                     const Translator& translator, const Head& head);

// --- batch steering ---------------------------------------------------------

enum class CalibrationGranularity {
  per_sample,    // every sample gets its own epsilon
  model_median,  // one epsilon: the median of the per-sample calibrations
};

struct SteeringRow {
  Eigen::Index sample_id = 0;
  Eigen::Index class_id = 0;
  SteeringMode mode = SteeringMode::null_removal;
  SteeringResult result;
  std::vector<double> attribute_scores;  // one per requested prompt
};

struct SteeringBatch {
  std::vector<Eigen::Index> prompt_ids;
  std::vector<SteeringRow> rows;
  std::vector<std::pair<Eigen::Index, std::string>> skipped;
  std::optional<double> shared_epsilon;  // set in model_median mode
};

/// Steers every listed sample (all samples when empty). Random-mode seeds
/// are derived per sample as seed XOR sample_id. `text_prompt` selects the
/// steering target for text_gradient mode; `as_prompts` are the prompts AS
/// is reported against.
SteeringBatch steer_batch(const FeatureBundle& bundle, const HeadDecomposition& decomp, const Translator& translator,
                          SteeringSpec spec, std::optional<Eigen::Index> text_prompt,
                          const std::vector<Eigen::Index>& as_prompts, std::vector<Eigen::Index> samples = {},
                          CalibrationGranularity granularity = CalibrationGranularity::per_sample);

std::string steering_csv(const SteeringBatch& batch);
nlohmann::json steering_json(const SteeringBatch& batch);

/// Writes T f and the norm-matched T f_perturbed for each row as f32
/// tensors `original_embedding` / `rescaled_equivalent` plus i64
/// `sample_ids`, for external decoders.
void export_rescaled_embeddings(const SteeringBatch& batch, const Translator& translator,
                                const std::filesystem::path& directory);

// --- null-space validation ----------------------------------------------------

struct DriftTrial {
  Eigen::Index sample_id = 0;
  double reference_norm = 0.0;
  double null_drift = 0.0;
  double random_drift = 0.0;
  double principal_drift = 0.0;
};

struct NullSpaceValidation {
  std::vector<DriftTrial> trials;
  SummaryStats null_stats;
  SummaryStats random_stats;
  SummaryStats principal_stats;
  double fraction_random_exceeds_null = 0.0;
  double max_null_bound_ratio = 0.0;  // max of drift / (1 + ||W||_F ||delta||)
};

/// Compares logit drift of matched-norm null, random and principal
/// perturbations. Each trial draws a sample and a random null-space
/// direction; the shared norm is ||Pi_n f|| of that sample (||f|| if zero).
NullSpaceValidation validate_null_space(const Matrix& features, const Head& head, const HeadDecomposition& decomp,
                                        int n_trials, std::uint64_t seed,
                                        PrincipalDirection principal = PrincipalDirection::top_singular);

nlohmann::json to_json(const NullSpaceValidation& validation);

}  // namespace sing
