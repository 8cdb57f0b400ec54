#include "sing/metrics.hpp"

#include <cmath>
#include <numbers>
#include <sstream>

#include "sing/error.hpp"
#include "sing/format.hpp"
#include "sing/parallel.hpp"

namespace sing {

namespace {

constexpr double kDegreesPerRadian = 180.0 / std::numbers::pi;

Vector row(const MatrixF& m, Eigen::Index i) { return m.row(i).transpose().cast<double>(); }

}  // namespace

double angle_degrees(const Vector& u, const Vector& v) {
  if (u.size() != v.size())
    throw ValidationError("dimension mismatch",
                          "angle between vectors of length " + std::to_string(u.size()) + " and " + std::to_string(v.size()));
  const double nu = u.norm();
  const double nv = v.norm();
  if (!(nu > 0.0) || !(nv > 0.0)) throw NumericalError("angle undefined for a zero-norm vector");

  // Half-angle form of arccos(clamp(cos)): same value, but exact at 0 and
  // 180 degrees where arccos loses half the significant digits.
  const Vector a = u / nu;
  const Vector b = v / nv;
  const double radians = 2.0 * std::atan2((a - b).norm(), (a + b).norm());
  return radians * kDegreesPerRadian;
}

double attribute_score(const Vector& feature, const Vector& equivalent, const Vector& text_embedding,
                       const Translator& translator) {
  return angle_degrees(translate(translator, feature), text_embedding) -
         angle_degrees(translate(translator, equivalent), text_embedding);
}

double image_score(const Vector& feature, const Vector& equivalent, const Translator& translator) {
  return angle_degrees(translate(translator, feature), translate(translator, equivalent));
}

BatchMetrics batch_metrics(const FeatureBundle& bundle, const HeadDecomposition& decomp, const Translator& translator,
                           PromptSelector selector) {
  using Kind = PromptSelector::Kind;
  const Eigen::Index n_samples = bundle.sample_count();
  if (bundle.feature_dim() != decomp.feature_dim() || bundle.feature_dim() != translator.source_dim())
    throw ValidationError("dimension mismatch", "bundle, decomposition and translator disagree on feature dimension");
  if (selector.kind != Kind::image_only) {
    if (!bundle.has_text())
      throw ValidationError("missing prompts", "prompt-based metrics need text_embeddings in the bundle");
    if (translator.target_dim() != bundle.text_embeddings->cols())
      throw ValidationError("dimension mismatch", "translator output dimension differs from text embedding dimension");
  }
  if (selector.kind == Kind::true_class && bundle.prompt_count() < bundle.class_count())
    throw ValidationError("missing prompts", "true-class prompts need one prompt per class (" +
                                                 std::to_string(bundle.class_count()) + " classes, " +
                                                 std::to_string(bundle.prompt_count()) + " prompts)");
  if (selector.kind == Kind::prompt_id && (selector.prompt < 0 || selector.prompt >= bundle.prompt_count()))
    throw ValidationError("missing prompts", "prompt id " + std::to_string(selector.prompt) + " out of range");

  std::vector<Vector> texts;
  for (Eigen::Index k = 0; k < bundle.prompt_count(); ++k) {
    texts.push_back(row(*bundle.text_embeddings, k));
    if (selector.kind != Kind::image_only && texts.back().norm() == 0.0)
      throw NumericalError("text embedding for prompt " + std::to_string(k) + " has zero norm");
  }

  std::vector<std::vector<MetricRecord>> per_sample(static_cast<std::size_t>(n_samples));
  std::vector<std::string> failure(static_cast<std::size_t>(n_samples));

  parallel_for(static_cast<std::size_t>(n_samples), [&](std::size_t s) {
    const auto i = static_cast<Eigen::Index>(s);
    const Vector f = row(bundle.features, i);
    const Vector f_eq = f - decomp.proj_null * f;
    const Vector z = translate(translator, f);
    const Vector z_eq = translate(translator, f_eq);
    if (z.norm() == 0.0 || z_eq.norm() == 0.0) {
      failure[s] = z.norm() == 0.0 ? "translated feature has zero norm" : "translated equivalent has zero norm";
      return;
    }

    MetricRecord base;
    base.sample_id = i;
    base.class_id = bundle.labels[s];
    base.image_score = angle_degrees(z, z_eq);

    auto emit = [&](Eigen::Index k) {
      MetricRecord r = base;
      r.prompt_id = k;
      r.angle_original = angle_degrees(z, texts[static_cast<std::size_t>(k)]);
      r.angle_equivalent = angle_degrees(z_eq, texts[static_cast<std::size_t>(k)]);
      r.attribute_score = r.angle_original - r.angle_equivalent;
      per_sample[s].push_back(r);
    };

    switch (selector.kind) {
      case Kind::true_class: emit(base.class_id); break;
      case Kind::prompt_id: emit(selector.prompt); break;
      case Kind::all_prompts:
        for (Eigen::Index k = 0; k < bundle.prompt_count(); ++k) emit(k);
        break;
      case Kind::image_only: per_sample[s].push_back(base); break;
    }
  });

  BatchMetrics out;
  for (std::size_t s = 0; s < per_sample.size(); ++s) {
    if (!failure[s].empty()) {
      out.skipped.push_back({static_cast<Eigen::Index>(s), failure[s]});
      continue;
    }
    out.records.insert(out.records.end(), per_sample[s].begin(), per_sample[s].end());
  }
  return out;
}

std::string metric_records_csv(const std::vector<MetricRecord>& records) {
  std::ostringstream out;
  out << kMetricCsvHeader << '\n';
  for (const auto& r : records) {
    out << r.sample_id << ',' << r.class_id << ',' << r.prompt_id << ',' << format_double(r.attribute_score) << ','
        << format_double(r.image_score) << ',' << format_double(r.angle_original) << ','
        << format_double(r.angle_equivalent) << '\n';
  }
  return out.str();
}

nlohmann::json metric_records_json(const std::vector<MetricRecord>& records) {
  nlohmann::json out = nlohmann::json::array();
  for (const auto& r : records) {
    out.push_back({{"sample_id", r.sample_id},
                   {"class_id", r.class_id},
                   {"prompt_id", r.prompt_id},
                   {"AS_deg", r.attribute_score},
                   {"IS_deg", r.image_score},
                   {"angle_orig_deg", r.angle_original},
                   {"angle_eq_deg", r.angle_equivalent}});
  }
  return out;
}

}  // namespace sing
