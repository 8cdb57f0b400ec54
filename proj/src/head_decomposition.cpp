#include "sing/head_decomposition.hpp"

#include <limits>

#include <Eigen/SVD>

#include "sing/error.hpp"
#include "sing/tensor_store.hpp"

namespace sing {

double RankTolerance::resolve(double sigma_max, Eigen::Index rows, Eigen::Index cols) const {
  switch (mode) {
    case Mode::relative: return value * sigma_max;
    case Mode::absolute: return value;
    case Mode::machine:
      return static_cast<double>(std::max(rows, cols)) * sigma_max * std::numeric_limits<double>::epsilon();
  }
  return 0.0;
}

std::string to_string(RankTolerance::Mode mode) {
  switch (mode) {
    case RankTolerance::Mode::relative: return "relative";
    case RankTolerance::Mode::absolute: return "absolute";
    case RankTolerance::Mode::machine: return "machine";
  }
  return "machine";
}

RankTolerance::Mode parse_rank_mode(const std::string& text) {
  if (text == "relative") return RankTolerance::Mode::relative;
  if (text == "absolute") return RankTolerance::Mode::absolute;
  if (text == "machine") return RankTolerance::Mode::machine;
  throw ValidationError("rank tolerance mode", "unknown mode '" + text + "' (expected relative|absolute|machine)");
}

namespace {

Matrix symmetric_outer(const Matrix& basis) {
  const Eigen::Index m = basis.rows();
  if (basis.cols() == 0) return Matrix::Zero(m, m);
  Matrix p = basis * basis.transpose();
  return 0.5 * (p + p.transpose());
}

}  // namespace

HeadDecomposition decompose_head(const Matrix& weight, RankTolerance tolerance) {
  const Eigen::Index c = weight.rows();
  const Eigen::Index m = weight.cols();
  if (c < 1 || m < 1) throw ValidationError("empty tensor", "head weight must be at least 1x1");
  if (!weight.allFinite()) throw ValidationError("non-finite value", "head weight contains NaN or Inf");
  if (tolerance.mode != RankTolerance::Mode::machine && !(tolerance.value >= 0.0))
    throw ValidationError("rank tolerance mode", "tolerance value must be nonnegative");

  Eigen::BDCSVD<Matrix> svd(weight, Eigen::ComputeFullU | Eigen::ComputeFullV);

  HeadDecomposition d;
  d.singular_values = svd.singularValues();
  d.left_vectors = svd.matrixU();
  const double sigma_max = d.singular_values.size() > 0 ? d.singular_values(0) : 0.0;
  d.rank_mode = tolerance.mode;
  d.rank_tolerance = tolerance.resolve(sigma_max, c, m);

  Eigen::Index rank = 0;
  while (rank < d.singular_values.size() && d.singular_values(rank) > d.rank_tolerance) ++rank;
  d.rank = rank;

  const Matrix& v = svd.matrixV();
  d.principal_basis = v.leftCols(rank);
  d.null_basis = v.rightCols(m - rank);
  d.proj_principal = symmetric_outer(d.principal_basis);
  d.proj_null = symmetric_outer(d.null_basis);
  return d;
}

Vector project(const HeadDecomposition& decomp, const Vector& feature, Subspace subspace) {
  if (feature.size() != decomp.feature_dim())
    throw ValidationError("dimension mismatch", "feature has " + std::to_string(feature.size()) +
                                                    " entries, decomposition expects " +
                                                    std::to_string(decomp.feature_dim()));
  return subspace == Subspace::principal ? Vector(decomp.proj_principal * feature) : Vector(decomp.proj_null * feature);
}

Vector logits(const Matrix& weight, const std::optional<Vector>& bias, const Vector& feature) {
  if (feature.size() != weight.cols())
    throw ValidationError("dimension mismatch", "feature has " + std::to_string(feature.size()) +
                                                    " entries, head expects " + std::to_string(weight.cols()));
  Vector out = weight * feature;
  if (bias) {
    if (bias->size() != weight.rows())
      throw ValidationError("dimension mismatch", "bias length " + std::to_string(bias->size()) + " for " +
                                                      std::to_string(weight.rows()) + " classes");
    out += *bias;
  }
  return out;
}

DecompositionCheck check_decomposition(const HeadDecomposition& d, const Matrix& weight) {
  const Eigen::Index m = d.feature_dim();
  const Matrix identity = Matrix::Identity(m, m);
  Matrix v(m, m);
  v << d.principal_basis, d.null_basis;

  DecompositionCheck out;
  out.weight_norm = weight.norm();
  out.null_leak = (weight * d.proj_null).norm();
  out.orthonormality = (v.transpose() * v - identity).cwiseAbs().maxCoeff();
  out.idempotency = std::max((d.proj_null * d.proj_null - d.proj_null).cwiseAbs().maxCoeff(),
                             (d.proj_principal * d.proj_principal - d.proj_principal).cwiseAbs().maxCoeff());
  out.symmetry = std::max((d.proj_null - d.proj_null.transpose()).cwiseAbs().maxCoeff(),
                          (d.proj_principal - d.proj_principal.transpose()).cwiseAbs().maxCoeff());
  out.completeness = (d.proj_principal + d.proj_null - identity).cwiseAbs().maxCoeff();
  out.cross = (d.proj_principal * d.proj_null).cwiseAbs().maxCoeff();
  return out;
}

void save_decomposition(const HeadDecomposition& d, const std::filesystem::path& directory) {
  TensorDirectoryWriter writer(directory);
  writer.add("singular_values", d.singular_values);
  writer.add("left_vectors", d.left_vectors);
  writer.add("principal_basis", d.principal_basis);
  writer.add("null_basis", d.null_basis);
  writer.add("proj_principal", d.proj_principal);
  writer.add("proj_null", d.proj_null);
  writer.fields()["kind"] = "head_decomposition";
  writer.fields()["rank"] = d.rank;
  writer.fields()["rank_tolerance"] = d.rank_tolerance;
  writer.fields()["rank_mode"] = to_string(d.rank_mode);
  writer.commit();
}

HeadDecomposition load_decomposition(const std::filesystem::path& directory) {
  const TensorDirectoryReader reader(directory);
  const auto& manifest = reader.manifest();
  if (manifest.value("kind", "") != "head_decomposition")
    throw ValidationError("manifest schema", directory.string() + " is not a head decomposition directory");
  if (!manifest.contains("rank") || !manifest["rank"].is_number_integer() || !manifest.contains("rank_tolerance") ||
      !manifest["rank_tolerance"].is_number())
    throw ValidationError("manifest schema", "decomposition manifest needs integer 'rank' and numeric 'rank_tolerance'");

  HeadDecomposition d;
  d.singular_values = reader.read_f64_vector("singular_values");
  d.left_vectors = reader.read_f64_matrix("left_vectors");
  d.principal_basis = reader.read_f64_matrix("principal_basis");
  d.null_basis = reader.read_f64_matrix("null_basis");
  d.proj_principal = reader.read_f64_matrix("proj_principal");
  d.proj_null = reader.read_f64_matrix("proj_null");
  d.rank = manifest["rank"].get<Eigen::Index>();
  d.rank_tolerance = manifest["rank_tolerance"].get<double>();
  d.rank_mode = parse_rank_mode(manifest.value("rank_mode", "machine"));

  const Eigen::Index m = d.proj_null.rows();
  const bool consistent = d.proj_null.cols() == m && d.proj_principal.rows() == m && d.proj_principal.cols() == m &&
                          d.principal_basis.rows() == m && d.null_basis.rows() == m &&
                          d.principal_basis.cols() == d.rank && d.principal_basis.cols() + d.null_basis.cols() == m;
  if (!consistent) throw ValidationError("manifest schema", "decomposition tensor shapes are inconsistent with rank");
  return d;
}

}  // namespace sing
