#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "sing/types.hpp"

namespace sing {

struct FitReport {
  double train_mse = 0.0;
  double train_mean_cosine = 0.0;
  Eigen::Index n_samples = 0;
};

/// Linear map from classifier feature space (m) into the joint image
/// embedding space (n), applied as theta * f. There is no bias term, so
/// translating is exactly additive.
struct Translator {
  Matrix theta;  // n x m
  double ridge_lambda = 0.0;
  FitReport fit_report;

  Eigen::Index source_dim() const { return theta.cols(); }
  Eigen::Index target_dim() const { return theta.rows(); }
};

struct FitOptions {
  /// At lambda = 0, fall back to the minimum-norm least-squares solution
  /// when F^T F is singular. When false a singular system is an error.
  bool allow_pseudoinverse = true;
};

/// Default ridge coefficient for a training set of `n_samples`. The
/// objective is summed over samples, so a per-sample weight decay of 0.1
/// becomes 0.1 * N.
double default_ridge_lambda(Eigen::Index n_samples);

/// Minimizes sum_i ||theta f_i - z_i||^2 + lambda ||theta||_F^2 in closed
/// form: theta = Z^T F (F^T F + lambda I)^{-1}. Rows of `features` and
/// `targets` are samples.
Translator fit_translator(const Matrix& features, const Matrix& targets, double lambda, FitOptions options = {});

Vector translate(const Translator& translator, const Vector& feature);

/// Row-wise translation of an N x m matrix; returns N x n.
Matrix translate_rows(const Translator& translator, const Matrix& features);

inline constexpr int kCosineHistogramBins = 40;

struct TranslatorEvaluation {
  double mse = 0.0;          // mean over samples of ||theta f - z||^2
  double mean_cosine = 0.0;  // over samples with a nonzero translation and target
  std::vector<std::int64_t> cosine_histogram;  // 40 bins over [-1, 1]
  Eigen::Index excluded = 0;                   // samples with undefined cosine
  Eigen::Index n_samples = 0;
};

TranslatorEvaluation evaluate_translator(const Translator& translator, const Matrix& features, const Matrix& targets);

/// Manifest directory with f64 tensor `theta` and fields ridge_lambda,
/// source_dim, target_dim, fit_report.
void save_translator(const Translator& translator, const std::filesystem::path& directory);
Translator load_translator(const std::filesystem::path& directory);

}  // namespace sing
