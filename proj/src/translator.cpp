#include "sing/translator.hpp"

#include <algorithm>
#include <cmath>

#include <Eigen/Cholesky>
#include <Eigen/SVD>

#include "sing/error.hpp"
#include "sing/tensor_store.hpp"

namespace sing {

double default_ridge_lambda(Eigen::Index n_samples) { return 0.1 * static_cast<double>(n_samples); }

Translator fit_translator(const Matrix& features, const Matrix& targets, double lambda, FitOptions options) {
  if (features.rows() < 1) throw ValidationError("empty tensor", "translator fit needs at least one sample");
  if (features.rows() != targets.rows())
    throw ValidationError("dimension mismatch", "features has " + std::to_string(features.rows()) +
                                                    " rows, targets has " + std::to_string(targets.rows()));
  if (features.cols() < 1 || targets.cols() < 1)
    throw ValidationError("empty tensor", "features and targets need at least one column");
  if (!features.allFinite() || !targets.allFinite())
    throw ValidationError("non-finite value", "translator inputs contain NaN or Inf");
  if (!(lambda >= 0.0) || !std::isfinite(lambda))
    throw ValidationError("ridge lambda", "lambda must be finite and nonnegative, got " + std::to_string(lambda));

  const Eigen::Index m = features.cols();
  Matrix theta_t;  // m x n

  if (lambda > 0.0) {
    Matrix gram = features.transpose() * features;
    gram.diagonal().array() += lambda;
    Eigen::LLT<Matrix> llt(gram);
    if (llt.info() != Eigen::Success) throw NumericalError("Cholesky factorization of F^T F + lambda I failed");
    theta_t = llt.solve(features.transpose() * targets);
  } else {
    Eigen::BDCSVD<Matrix> svd(features, Eigen::ComputeThinU | Eigen::ComputeThinV);
    if (svd.rank() < m) {
      if (!options.allow_pseudoinverse)
        throw NumericalError("singular system at lambda = 0: F has rank " + std::to_string(svd.rank()) + " < " +
                             std::to_string(m) + " and the pseudoinverse fallback is disabled");
    }
    theta_t = svd.solve(targets);
  }

  Translator t;
  t.theta = theta_t.transpose();
  t.ridge_lambda = lambda;
  if (!t.theta.allFinite()) throw NumericalError("translator solve produced non-finite coefficients");

  const auto eval = evaluate_translator(t, features, targets);
  t.fit_report = {eval.mse, eval.mean_cosine, features.rows()};
  return t;
}

Vector translate(const Translator& translator, const Vector& feature) {
  if (feature.size() != translator.source_dim())
    throw ValidationError("dimension mismatch", "feature has " + std::to_string(feature.size()) +
                                                    " entries, translator expects " +
                                                    std::to_string(translator.source_dim()));
  return translator.theta * feature;
}

Matrix translate_rows(const Translator& translator, const Matrix& features) {
  if (features.cols() != translator.source_dim())
    throw ValidationError("dimension mismatch", "features have " + std::to_string(features.cols()) +
                                                    " columns, translator expects " +
                                                    std::to_string(translator.source_dim()));
  return features * translator.theta.transpose();
}

TranslatorEvaluation evaluate_translator(const Translator& translator, const Matrix& features, const Matrix& targets) {
  if (features.rows() != targets.rows())
    throw ValidationError("dimension mismatch", "features has " + std::to_string(features.rows()) +
                                                    " rows, targets has " + std::to_string(targets.rows()));
  if (targets.cols() != translator.target_dim())
    throw ValidationError("dimension mismatch", "targets have " + std::to_string(targets.cols()) +
                                                    " columns, translator produces " +
                                                    std::to_string(translator.target_dim()));
  if (features.rows() < 1) throw ValidationError("empty tensor", "evaluation needs at least one sample");

  const Matrix predicted = translate_rows(translator, features);

  TranslatorEvaluation out;
  out.n_samples = features.rows();
  out.cosine_histogram.assign(kCosineHistogramBins, 0);
  out.mse = (predicted - targets).rowwise().squaredNorm().mean();

  double cosine_sum = 0.0;
  for (Eigen::Index i = 0; i < predicted.rows(); ++i) {
    const double np = predicted.row(i).norm();
    const double nt = targets.row(i).norm();
    if (np == 0.0 || nt == 0.0) {
      ++out.excluded;
      continue;
    }
    const double cosine = std::clamp(predicted.row(i).dot(targets.row(i)) / (np * nt), -1.0, 1.0);
    cosine_sum += cosine;
    const auto bin = static_cast<int>(std::floor((cosine + 1.0) / 2.0 * kCosineHistogramBins));
    ++out.cosine_histogram[static_cast<std::size_t>(std::clamp(bin, 0, kCosineHistogramBins - 1))];
  }
  const Eigen::Index valid = out.n_samples - out.excluded;
  out.mean_cosine = valid > 0 ? cosine_sum / static_cast<double>(valid) : 0.0;
  return out;
}

void save_translator(const Translator& translator, const std::filesystem::path& directory) {
  TensorDirectoryWriter writer(directory);
  writer.add("theta", translator.theta);
  writer.fields()["kind"] = "translator";
  writer.fields()["ridge_lambda"] = translator.ridge_lambda;
  writer.fields()["source_dim"] = translator.source_dim();
  writer.fields()["target_dim"] = translator.target_dim();
  writer.fields()["fit_report"] = {{"train_mse", translator.fit_report.train_mse},
                                   {"train_mean_cosine", translator.fit_report.train_mean_cosine},
                                   {"n_samples", translator.fit_report.n_samples}};
  writer.commit();
}

Translator load_translator(const std::filesystem::path& directory) {
  const TensorDirectoryReader reader(directory);
  const auto& manifest = reader.manifest();
  if (manifest.value("kind", "") != "translator")
    throw ValidationError("manifest schema", directory.string() + " is not a translator directory");

  Translator t;
  t.theta = reader.read_f64_matrix("theta");
  try {
    t.ridge_lambda = manifest.at("ridge_lambda").get<double>();
    const auto source = manifest.at("source_dim").get<Eigen::Index>();
    const auto target = manifest.at("target_dim").get<Eigen::Index>();
    if (source != t.source_dim() || target != t.target_dim())
      throw ValidationError("manifest schema", "source_dim/target_dim disagree with theta's shape");
    const auto& report = manifest.at("fit_report");
    t.fit_report = {report.at("train_mse").get<double>(), report.at("train_mean_cosine").get<double>(),
                    report.at("n_samples").get<Eigen::Index>()};
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError("manifest schema", std::string("translator manifest: ") + e.what());
  }
  if (!t.theta.allFinite()) throw ValidationError("non-finite value", "translator theta contains NaN or Inf");
  return t;
}

}  // namespace sing
