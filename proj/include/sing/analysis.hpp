#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "sing/bundle.hpp"
#include "sing/head_decomposition.hpp"
#include "sing/metrics.hpp"
#include "sing/perturbation.hpp"
#include "sing/stats.hpp"
#include "sing/translator.hpp"

namespace sing {

// --- sample selection ----------------------------------------------------------

enum class SamplingScheme {
  uniform,   // seeded shuffle of all samples
  balanced,  // as equal a count per class as the data allows
};

std::string to_string(SamplingScheme scheme);
SamplingScheme parse_sampling_scheme(const std::string& text);

/// Ascending sample indices, `count` of them (all when count >= N).
std::vector<Eigen::Index> sample_indices(const Labels& labels, Eigen::Index n_classes, std::size_t count,
                                         SamplingScheme scheme, std::uint64_t seed);

/// Copy of the bundle restricted to the given rows; metadata is shared.
FeatureBundle subset_bundle(const FeatureBundle& bundle, std::span<const Eigen::Index> rows);

// --- model level ------------------------------------------------------------

/// Confidence ellipse parameters of a 2-D sample: mean, population
/// covariance, and the chi-square(2) quantile that scales it to `level`.
struct Ellipse {
  double cx = 0.0;
  double cy = 0.0;
  double cov_xx = 0.0;
  double cov_xy = 0.0;
  double cov_yy = 0.0;
  double level = 0.0;
  double chi2_quantile = 0.0;
};

/// Quantile of the chi-square distribution with 2 degrees of freedom.
double chi_square2_quantile(double p);

Ellipse confidence_ellipse(std::span<const double> x, std::span<const double> y, double level);

struct ModelSummary {
  std::string model_name;
  SummaryStats as_stats;         // over |AS|
  SummaryStats signed_as_stats;  // over AS
  SummaryStats is_stats;
  double ratio_is_over_as = 0.0;  // mean IS / mean |AS|; +inf when undefined
  bool ratio_defined = false;
  Ellipse ellipse;         // over (|AS|, IS)
  Ellipse ellipse_signed;  // over (AS, IS)
  std::size_t n_samples = 0;
};

inline constexpr double kDefaultEllipseLevel = 0.9;

ModelSummary summarize_model(const std::vector<MetricRecord>& records, const std::string& model_name,
                             double confidence = kDefaultEllipseLevel);

nlohmann::json to_json(const ModelSummary& summary);

// --- class level ------------------------------------------------------------

struct ClassProfile {
  Eigen::Index class_id = 0;
  std::string class_name;
  double mean = 0.0;  // signed AS
  double std = 0.0;   // population
  std::array<double, 5> quantiles{};  // 5, 25, 50, 75, 95 %
  double mean_abs = 0.0;
  std::size_t n_samples = 0;
  double leak_z = 0.0;   // (mean |AS| of class - rest) / pooled SE
  bool flagged = false;  // leak_z above the flag threshold
};

inline constexpr double kLeakFlagThreshold = 3.0;

/// One profile per class present in `records`, ordered by class id. Classes
/// are flagged when their mean |AS| exceeds the other classes' by more than
/// `flag_threshold` pooled standard errors.
std::vector<ClassProfile> summarize_classes(const std::vector<MetricRecord>& records,
                                            const std::vector<std::string>& class_names,
                                            double flag_threshold = kLeakFlagThreshold);

/// Spearman correlation of per-class mean |AS| over classes present in both.
double class_rank_correlation(const std::vector<ClassProfile>& a, const std::vector<ClassProfile>& b);

std::string class_profiles_csv(const std::vector<ClassProfile>& profiles);
nlohmann::json to_json(const std::vector<ClassProfile>& profiles);

/// Mean |AS| gap between two groups of classes in units of the pooled
/// standard error sqrt(var_a/n_a + var_b/n_b).
struct LeakageGap {
  double leaky_mean = 0.0;
  double clean_mean = 0.0;
  double pooled_se = 0.0;
  double z = 0.0;
  std::size_t n_leaky = 0;
  std::size_t n_clean = 0;
};

LeakageGap leakage_gap(const std::vector<MetricRecord>& records, const std::vector<Eigen::Index>& leak_classes);

// --- concept level ----------------------------------------------------------

struct ConceptProfile {
  Eigen::Index prompt_id = 0;
  std::string prompt;
  double angle_original_mean = 0.0;
  double angle_equivalent_mean = 0.0;
  double attribute_score_mean = 0.0;  // = original - equivalent
  std::size_t n_samples = 0;
};

/// Mean angle of a class's original and null-removed translated features to
/// each prompt.
std::vector<ConceptProfile> concept_profile(const FeatureBundle& bundle, const HeadDecomposition& decomp,
                                            const Translator& translator, Eigen::Index class_id,
                                            const std::vector<Eigen::Index>& prompt_ids);

std::string concept_profiles_csv(const std::vector<ConceptProfile>& profiles);

// --- steering summary ---------------------------------------------------------

/// |AS| statistics for column `prompt_index` of a steering batch.
SummaryStats steering_as_summary(const SteeringBatch& batch, std::size_t prompt_index);

// --- head probe ---------------------------------------------------------------

struct ProbeCorrelation {
  std::vector<double> accuracies_raw;
  std::vector<double> accuracies_translated;
  double pearson = 0.0;
};

/// Train/test split (80/20) from a seeded shuffle; throws ValidationError if
/// a class with samples is missing from the training part.
struct ProbeSplit {
  std::vector<Eigen::Index> train;
  std::vector<Eigen::Index> test;
};
ProbeSplit probe_split(const Labels& labels, Eigen::Index n_classes, std::uint64_t seed);

/// Accuracy of a ridge one-hot probe with argmax decoding.
double probe_accuracy(const Matrix& inputs, const Labels& labels, Eigen::Index n_classes, const ProbeSplit& split,
                      double lambda);

/// Per model: fit probes on principal features Pi_p f and on their
/// translations T(Pi_p f); report both accuracy lists and their Pearson
/// correlation across models.
ProbeCorrelation head_probe_correlation(const std::vector<FeatureBundle>& bundles,
                                        const std::vector<HeadDecomposition>& decomps,
                                        const std::vector<Translator>& translators, double probe_lambda,
                                        std::uint64_t seed = 0);

// --- planted leakage ------------------------------------------------------------

struct PlantedConfig {
  Eigen::Index m = 64;
  Eigen::Index c = 8;
  Eigen::Index n = 64;
  Eigen::Index per_class = 50;
  /// Leak vector length in units of the per-coordinate noise sigma (1).
  double leak_strength = 0.0;
  std::uint64_t seed = 0;
  /// Class-mean norm in units of the expected noise norm.
  double mean_ratio = 4.0;
};

struct PlantedTruth {
  Matrix null_dirs;  // m x (number of leaky classes), orthonormal, W null_dirs = 0
  std::vector<Eigen::Index> leak_classes;
};

struct PlantedBundle {
  FeatureBundle bundle;
  PlantedTruth truth;
};

/// Synthetic bundle with a known head null space. Features are a class mean
/// in the row space of W plus isotropic noise (unit variance per
/// coordinate); odd-numbered classes also carry a constant component of
/// length `leak_strength` along their own null direction. Image embeddings
/// are a fixed random linear map of the full feature, and prompt k is the
/// embedding of class k's mean without the leak. The random stream does not
/// depend on `leak_strength`.
PlantedBundle generate_planted_bundle(const PlantedConfig& config);

nlohmann::json to_json(const PlantedTruth& truth);

}  // namespace sing
