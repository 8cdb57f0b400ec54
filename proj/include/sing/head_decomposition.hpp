#pragma once

#include <filesystem>
#include <optional>
#include <string>

#include "sing/types.hpp"

namespace sing {

/// How the numerical rank of the head is decided from its singular values.
/// A singular value counts toward the rank when it is strictly above tau.
struct RankTolerance {
  enum class Mode { relative, absolute, machine };

  Mode mode = Mode::machine;
  double value = 0.0;  // rho for relative, tau for absolute, unused for machine

  static RankTolerance relative(double rho) { return {Mode::relative, rho}; }
  static RankTolerance absolute(double tau) { return {Mode::absolute, tau}; }
  /// tau = max(c, m) * sigma_max * machine epsilon
  static RankTolerance machine() { return {Mode::machine, 0.0}; }

  double resolve(double sigma_max, Eigen::Index rows, Eigen::Index cols) const;
};

std::string to_string(RankTolerance::Mode mode);
RankTolerance::Mode parse_rank_mode(const std::string& text);

/// SVD of a classifier head W (c x m) split at its numerical rank r into a
/// principal part (row space) and a null part, with dense m x m projectors.
struct HeadDecomposition {
  Vector singular_values;  // min(c, m), nonincreasing
  Matrix left_vectors;     // c x c
  Matrix principal_basis;  // m x r
  Matrix null_basis;       // m x (m - r)
  Matrix proj_principal;   // m x m
  Matrix proj_null;        // m x m
  Eigen::Index rank = 0;
  double rank_tolerance = 0.0;
  RankTolerance::Mode rank_mode = RankTolerance::Mode::machine;

  Eigen::Index feature_dim() const { return proj_null.rows(); }
  Eigen::Index null_dim() const { return null_basis.cols(); }
};

enum class Subspace { principal, null };

HeadDecomposition decompose_head(const Matrix& weight, RankTolerance tolerance = RankTolerance::machine());

/// Pi_p f or Pi_n f.
Vector project(const HeadDecomposition& decomp, const Vector& feature, Subspace subspace);

/// W f (+ bias).
Vector logits(const Matrix& weight, const std::optional<Vector>& bias, const Vector& feature);

/// Residuals of the decomposition identities, for reports and tests.
struct DecompositionCheck {
  double weight_norm = 0.0;       // ||W||_F
  double null_leak = 0.0;         // ||W Pi_n||_F
  double orthonormality = 0.0;    // max |V^T V - I|
  double idempotency = 0.0;       // max over both projectors of |P P - P|
  double symmetry = 0.0;          // max over both projectors of |P - P^T|
  double completeness = 0.0;      // max |Pi_p + Pi_n - I|
  double cross = 0.0;             // max |Pi_p Pi_n|
};

DecompositionCheck check_decomposition(const HeadDecomposition& decomp, const Matrix& weight);

/// Persists to a manifest directory: f64 tensors singular_values,
/// left_vectors, principal_basis, null_basis, proj_principal, proj_null and
/// manifest fields rank, rank_tolerance, rank_mode.
void save_decomposition(const HeadDecomposition& decomp, const std::filesystem::path& directory);
HeadDecomposition load_decomposition(const std::filesystem::path& directory);

}  // namespace sing
