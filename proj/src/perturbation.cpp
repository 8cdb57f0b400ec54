#include "sing/perturbation.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "sing/error.hpp"
#include "sing/format.hpp"
#include "sing/metrics.hpp"
#include "sing/parallel.hpp"
#include "sing/rng.hpp"
#include "sing/tensor_store.hpp"

namespace sing {

namespace {

Vector row(const MatrixF& m, Eigen::Index i) { return m.row(i).transpose().cast<double>(); }

void require_dim(const Vector& v, Eigen::Index expected, const char* what) {
  if (v.size() != expected)
    throw ValidationError("dimension mismatch", std::string(what) + " has " + std::to_string(v.size()) +
                                                    " entries, expected " + std::to_string(expected));
}

Eigen::Index predicted_class(const Head& head, const Vector& feature) {
  Eigen::Index best = 0;
  logits(head.weight, head.bias, feature).maxCoeff(&best);
  return best;
}

Vector principal_unit(const Vector& feature, const Head& head, const HeadDecomposition& decomp,
                      PrincipalDirection kind) {
  const Eigen::Index pred = predicted_class(head, feature);
  const Vector class_row = head.weight.row(pred).transpose();
  if (kind == PrincipalDirection::class_row) {
    const double n = class_row.norm();
    if (n == 0.0) throw NumericalError("head row of the predicted class is zero");
    return class_row / n;
  }
  if (decomp.rank < 1) throw NumericalError("head has rank 0; no principal direction exists");
  Vector v = decomp.principal_basis.col(0);
  if (class_row.dot(v) < 0.0) v = -v;
  return v / v.norm();
}

}  // namespace

Head Head::from_bundle(const FeatureBundle& bundle) {
  Head head;
  head.weight = bundle.head_weight.cast<double>();
  if (bundle.head_bias) head.bias = bundle.head_bias->cast<double>();
  return head;
}

double logit_drift(const Head& head, const Vector& original, const Vector& perturbed) {
  return (logits(head.weight, head.bias, perturbed) - logits(head.weight, head.bias, original)).norm();
}

Vector null_removal(const Vector& feature, const HeadDecomposition& decomp) {
  return feature - project(decomp, feature, Subspace::null);
}

double similarity_score(const Vector& feature, const Vector& text_embedding, const Translator& translator) {
  const Vector z = translate(translator, feature);
  require_dim(text_embedding, z.size(), "text embedding");
  const double nz = z.norm();
  const double nt = text_embedding.norm();
  if (nz == 0.0 || nt == 0.0) throw NumericalError("similarity undefined for a zero-norm vector");
  return std::clamp(z.dot(text_embedding) / (nz * nt), -1.0, 1.0);
}

Vector semantic_gradient(const Vector& feature, const Vector& text_embedding, const Translator& translator) {
  const Vector z = translate(translator, feature);
  require_dim(text_embedding, z.size(), "text embedding");
  const double nz = z.norm();
  const double nt = text_embedding.norm();
  if (nz == 0.0) throw NumericalError("semantic gradient undefined: translated feature has zero norm");
  if (nt == 0.0) throw NumericalError("semantic gradient undefined: text embedding has zero norm");
  const Vector u = z / nz;
  const Vector w = text_embedding / nt;
  return translator.theta.transpose() * ((w - u.dot(w) * u) / nz);
}

Calibration calibrate_epsilon(const Vector& feature, const Vector& direction, const Translator& translator,
                              double target_is_deg, CalibrationOptions options) {
  require_dim(direction, feature.size(), "direction");
  if (!(target_is_deg >= 0.0 && target_is_deg < 180.0))
    throw ValidationError("target image score", "target must lie in [0, 180) degrees");
  if (!(options.tolerance_deg > 0.0) || options.max_iter < 1)
    throw ValidationError("calibration options", "tolerance must be positive and max_iter at least 1");
  if (std::abs(direction.norm() - 1.0) > 1e-8) throw ValidationError("calibration direction", "direction must be unit-norm");
  if (target_is_deg == 0.0) return {};

  const Vector z = translate(translator, feature);
  const Vector w = translate(translator, direction);
  if (z.norm() == 0.0) throw NumericalError("calibration undefined: translated feature has zero norm");
  if (!(w.norm() > 1e-300)) throw NumericalError("calibration failed: direction is annihilated by the translator");

  auto is_at = [&](double eps) { return image_score(feature, feature + eps * direction, translator); };

  // geometric bracket growth from well below the natural scale ||z||/||w||
  constexpr int kGrowthSteps = 80;
  constexpr double kStartShrink = 0x1.0p-20;
  double lo = 0.0;
  double hi = z.norm() / w.norm() * kStartShrink;
  double value = is_at(hi);
  int grown = 0;
  while (value < target_is_deg - options.tolerance_deg) {
    if (++grown > kGrowthSteps)
      throw NumericalError("calibration failed: no bracket for IS = " + format_double(target_is_deg) +
                           " within 2^60 of the natural step scale (direction nearly annihilated)");
    lo = hi;
    hi *= 2.0;
    value = is_at(hi);
  }
  if (std::abs(value - target_is_deg) <= options.tolerance_deg) return {hi, value, 0};

  for (int step = 1; step <= options.max_iter; ++step) {
    const double mid = 0.5 * (lo + hi);
    value = is_at(mid);
    if (std::abs(value - target_is_deg) <= options.tolerance_deg) return {mid, value, step};
    (value < target_is_deg ? lo : hi) = mid;
  }
  throw NumericalError("calibration failed: IS did not reach " + format_double(target_is_deg) + " +/- " +
                       format_double(options.tolerance_deg) + " within " + std::to_string(options.max_iter) +
                       " bisection steps");
}

Vector rescale_to_reference(const Vector& equivalent, const Vector& reference) {
  require_dim(reference, equivalent.size(), "reference embedding");
  const double n = equivalent.norm();
  if (n == 0.0) throw NumericalError("cannot rescale a zero-norm embedding");
  return equivalent * (reference.norm() / n);
}

std::string to_string(SteeringMode mode) {
  switch (mode) {
    case SteeringMode::null_removal: return "null-removal";
    case SteeringMode::text_gradient: return "text-gradient";
    case SteeringMode::random: return "random";
    case SteeringMode::principal: return "principal";
  }
  return "?";
}

SteeringMode parse_steering_mode(const std::string& text) {
  if (text == "null-removal") return SteeringMode::null_removal;
  if (text == "text-gradient") return SteeringMode::text_gradient;
  if (text == "random") return SteeringMode::random;
  if (text == "principal") return SteeringMode::principal;
  throw ValidationError("steering mode", "unknown mode '" + text + "'");
}

std::string to_string(PrincipalDirection direction) {
  return direction == PrincipalDirection::top_singular ? "top-singular" : "class-row";
}

PrincipalDirection parse_principal_direction(const std::string& text) {
  if (text == "top-singular") return PrincipalDirection::top_singular;
  if (text == "class-row") return PrincipalDirection::class_row;
  throw ValidationError("principal direction", "unknown direction '" + text + "'");
}

void SteeringSpec::validate() const {
  if (mode == SteeringMode::null_removal) {
    if (epsilon || target_is_deg)
      throw ValidationError("steering spec", "null removal takes neither epsilon nor a target IS");
    return;
  }
  if (mode == SteeringMode::text_gradient && !target_text)
    throw ValidationError("steering spec", "text-gradient steering needs a target text embedding");
  if (epsilon.has_value() == target_is_deg.has_value())
    throw ValidationError("steering spec", "give exactly one of epsilon or target IS");
  if (epsilon && !(*epsilon >= 0.0 && std::isfinite(*epsilon)))
    throw ValidationError("steering spec", "epsilon must be finite and nonnegative");
  if (target_is_deg && !(*target_is_deg >= 0.0 && *target_is_deg < 180.0))
    throw ValidationError("steering spec", "target IS must lie in [0, 180) degrees");
}

SteeringDirection steering_direction(const Vector& feature, const SteeringSpec& spec, const HeadDecomposition& decomp,
                                     const Translator& translator, const Head& head) {
  require_dim(feature, decomp.feature_dim(), "feature");
  SteeringDirection out;
  Vector raw;
  switch (spec.mode) {
    case SteeringMode::null_removal:
      raw = -project(decomp, feature, Subspace::null);
      break;
    case SteeringMode::text_gradient: {
      const Vector gradient = semantic_gradient(feature, *spec.target_text, translator);
      raw = decomp.proj_null * gradient;
      const double n = raw.norm();
      if (!(n > 1e-12 * gradient.norm()) || n == 0.0)
        throw NumericalError("null-projected semantic gradient vanishes: ||Pi_n grad s|| = " + format_double(n));
      break;
    }
    case SteeringMode::random: {
      Rng rng(spec.seed);
      raw = rng.normal_vector(feature.size());
      break;
    }
    case SteeringMode::principal:
      raw = principal_unit(feature, head, decomp, spec.principal_direction);
      break;
  }
  out.norm_in_null = (decomp.proj_null * raw).norm();
  const double n = raw.norm();
  out.unit = n > 0.0 ? Vector(raw / n) : Vector::Zero(raw.size());
  return out;
}

SteeringResult steer(const Vector& feature, const SteeringSpec& spec, const HeadDecomposition& decomp,
                     const Translator& translator, const Head& head) {
  spec.validate();
  require_dim(feature, decomp.feature_dim(), "feature");

  SteeringResult r;
  r.original = feature;
  const SteeringDirection dir = steering_direction(feature, spec, decomp, translator, head);
  r.direction_norm_in_null = dir.norm_in_null;

  if (spec.mode == SteeringMode::null_removal) {
    r.perturbed = null_removal(feature, decomp);
    r.epsilon_used = dir.norm_in_null;
  } else {
    if (spec.epsilon) {
      r.epsilon_used = *spec.epsilon;
    } else {
      const Calibration cal = calibrate_epsilon(feature, dir.unit, translator, *spec.target_is_deg, spec.calibration);
      r.epsilon_used = cal.epsilon;
      r.bisection_steps = cal.bisection_steps;
    }
    r.perturbed = feature + r.epsilon_used * dir.unit;
  }
  r.achieved_is = image_score(feature, r.perturbed, translator);
  r.logit_drift = logit_drift(head, feature, r.perturbed);
  return r;
}

SteeringBatch steer_batch(const FeatureBundle& bundle, const HeadDecomposition& decomp, const Translator& translator,
                          SteeringSpec spec, std::optional<Eigen::Index> text_prompt,
                          const std::vector<Eigen::Index>& as_prompts, std::vector<Eigen::Index> samples,
                          CalibrationGranularity granularity) {
  auto check_prompt = [&](Eigen::Index k) {
    if (!bundle.has_text() || k < 0 || k >= bundle.prompt_count())
      throw ValidationError("missing prompts", "prompt id " + std::to_string(k) + " is not in the bundle");
  };
  for (auto k : as_prompts) check_prompt(k);
  if (spec.mode == SteeringMode::text_gradient) {
    if (!text_prompt) throw ValidationError("steering spec", "text-gradient steering needs a target prompt");
    check_prompt(*text_prompt);
    spec.target_text = row(*bundle.text_embeddings, *text_prompt);
  }
  spec.validate();
  if (samples.empty()) {
    samples.resize(static_cast<std::size_t>(bundle.sample_count()));
    for (std::size_t i = 0; i < samples.size(); ++i) samples[i] = static_cast<Eigen::Index>(i);
  }
  for (auto s : samples) {
    if (s < 0 || s >= bundle.sample_count())
      throw ValidationError("sample id", "sample " + std::to_string(s) + " is out of range");
  }

  const Head head = Head::from_bundle(bundle);
  SteeringBatch batch;
  batch.prompt_ids = as_prompts;

  auto run = [&](const SteeringSpec& base) {
    std::vector<std::optional<SteeringRow>> slots(samples.size());
    std::vector<std::string> errors(samples.size());
    parallel_for(samples.size(), [&](std::size_t j) {
      const Eigen::Index i = samples[j];
      SteeringSpec local = base;
      local.seed = base.seed ^ static_cast<std::uint64_t>(i);
      try {
        SteeringRow r;
        r.sample_id = i;
        r.class_id = bundle.labels[static_cast<std::size_t>(i)];
        r.mode = local.mode;
        r.result = steer(row(bundle.features, i), local, decomp, translator, head);
        for (auto k : as_prompts)
          r.attribute_scores.push_back(
              attribute_score(r.result.original, r.result.perturbed, row(*bundle.text_embeddings, k), translator));
        slots[j] = std::move(r);
      } catch (const NumericalError& e) {
        errors[j] = e.what();
      }
    });
    std::vector<SteeringRow> rows;
    std::vector<std::pair<Eigen::Index, std::string>> skipped;
    for (std::size_t j = 0; j < samples.size(); ++j) {
      if (slots[j]) rows.push_back(std::move(*slots[j]));
      else skipped.emplace_back(samples[j], errors[j]);
    }
    return std::make_pair(std::move(rows), std::move(skipped));
  };

  auto [rows, skipped] = run(spec);
  if (granularity == CalibrationGranularity::model_median && spec.target_is_deg && spec.mode != SteeringMode::null_removal) {
    if (rows.empty()) throw NumericalError("no sample could be calibrated; model-median epsilon undefined");
    std::vector<double> eps;
    for (const auto& r : rows) eps.push_back(r.result.epsilon_used);
    std::sort(eps.begin(), eps.end());
    const double shared = quantile_sorted(eps, 0.5);
    SteeringSpec fixed = spec;
    fixed.target_is_deg.reset();
    fixed.epsilon = shared;
    std::tie(rows, skipped) = run(fixed);
    batch.shared_epsilon = shared;
  }
  batch.rows = std::move(rows);
  batch.skipped = std::move(skipped);
  return batch;
}

std::string steering_csv(const SteeringBatch& batch) {
  std::ostringstream out;
  out << "sample_id,class_id,mode,epsilon_used,achieved_is_deg,logit_drift,direction_norm_in_null,bisection_steps";
  for (auto k : batch.prompt_ids) out << ",AS_deg_prompt" << k;
  out << '\n';
  for (const auto& r : batch.rows) {
    out << r.sample_id << ',' << r.class_id << ',' << to_string(r.mode) << ',' << format_double(r.result.epsilon_used)
        << ',' << format_double(r.result.achieved_is) << ',' << format_double(r.result.logit_drift) << ','
        << format_double(r.result.direction_norm_in_null) << ',' << r.result.bisection_steps;
    for (double as : r.attribute_scores) out << ',' << format_double(as);
    out << '\n';
  }
  return out.str();
}

nlohmann::json steering_json(const SteeringBatch& batch) {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& r : batch.rows) {
    nlohmann::json as = nlohmann::json::object();
    for (std::size_t j = 0; j < batch.prompt_ids.size(); ++j)
      as[std::to_string(batch.prompt_ids[j])] = r.attribute_scores[j];
    rows.push_back({{"sample_id", r.sample_id},
                    {"class_id", r.class_id},
                    {"mode", to_string(r.mode)},
                    {"epsilon_used", r.result.epsilon_used},
                    {"achieved_is_deg", r.result.achieved_is},
                    {"logit_drift", r.result.logit_drift},
                    {"direction_norm_in_null", r.result.direction_norm_in_null},
                    {"bisection_steps", r.result.bisection_steps},
                    {"AS_deg", as}});
  }
  nlohmann::json skipped = nlohmann::json::array();
  for (const auto& [id, reason] : batch.skipped) skipped.push_back({{"sample_id", id}, {"reason", reason}});
  nlohmann::json out = {{"rows", rows}, {"skipped", skipped}};
  out["shared_epsilon"] = batch.shared_epsilon ? nlohmann::json(*batch.shared_epsilon) : nlohmann::json(nullptr);
  return out;
}

void export_rescaled_embeddings(const SteeringBatch& batch, const Translator& translator,
                                const std::filesystem::path& directory) {
  const auto rows = static_cast<Eigen::Index>(batch.rows.size());
  MatrixF original(rows, translator.target_dim());
  MatrixF rescaled(rows, translator.target_dim());
  Labels ids;
  for (Eigen::Index i = 0; i < rows; ++i) {
    const auto& r = batch.rows[static_cast<std::size_t>(i)];
    const Vector z = translate(translator, r.result.original);
    original.row(i) = z.transpose().cast<float>();
    rescaled.row(i) = rescale_to_reference(translate(translator, r.result.perturbed), z).transpose().cast<float>();
    ids.push_back(r.sample_id);
  }
  TensorDirectoryWriter writer(directory);
  writer.add("original_embedding", original);
  writer.add("rescaled_equivalent", rescaled);
  writer.add("sample_ids", ids);
  writer.fields()["kind"] = "rescaled_embeddings";
  writer.commit();
}

NullSpaceValidation validate_null_space(const Matrix& features, const Head& head, const HeadDecomposition& decomp,
                                        int n_trials, std::uint64_t seed, PrincipalDirection principal) {
  if (n_trials < 1) throw ValidationError("trial count", "need at least one trial");
  if (features.rows() < 1) throw ValidationError("empty tensor", "validation needs at least one feature");
  if (features.cols() != decomp.feature_dim() || head.weight.cols() != decomp.feature_dim())
    throw ValidationError("dimension mismatch", "features, head and decomposition disagree on feature dimension");
  if (decomp.null_dim() == 0) throw ValidationError("empty null space", "the head has full column rank; nothing to validate");

  const double weight_norm = head.weight.norm();
  Rng rng(seed);
  NullSpaceValidation out;
  out.trials.reserve(static_cast<std::size_t>(n_trials));
  std::size_t random_wins = 0;

  for (int t = 0; t < n_trials; ++t) {
    const auto i = static_cast<Eigen::Index>(rng.below(static_cast<std::uint64_t>(features.rows())));
    const Vector f = features.row(i).transpose();
    const Vector null_raw = decomp.proj_null * rng.normal_vector(f.size());
    const Vector random_raw = rng.normal_vector(f.size());

    double reference = (decomp.proj_null * f).norm();
    if (reference == 0.0) reference = f.norm();
    if (reference == 0.0) reference = 1.0;

    const Vector delta_null = null_raw * (reference / null_raw.norm());
    const Vector delta_random = random_raw * (reference / random_raw.norm());
    const Vector delta_principal = principal_unit(f, head, decomp, principal) * reference;

    DriftTrial trial;
    trial.sample_id = i;
    trial.reference_norm = reference;
    trial.null_drift = logit_drift(head, f, f + delta_null);
    trial.random_drift = logit_drift(head, f, f + delta_random);
    trial.principal_drift = logit_drift(head, f, f + delta_principal);
    if (trial.random_drift > trial.null_drift) ++random_wins;
    out.max_null_bound_ratio =
        std::max(out.max_null_bound_ratio, trial.null_drift / (1.0 + weight_norm * delta_null.norm()));
    out.trials.push_back(trial);
  }

  std::vector<double> nulls, randoms, principals;
  for (const auto& t : out.trials) {
    nulls.push_back(t.null_drift);
    randoms.push_back(t.random_drift);
    principals.push_back(t.principal_drift);
  }
  out.null_stats = summarize(nulls);
  out.random_stats = summarize(randoms);
  out.principal_stats = summarize(principals);
  out.fraction_random_exceeds_null = static_cast<double>(random_wins) / static_cast<double>(n_trials);
  return out;
}

nlohmann::json to_json(const NullSpaceValidation& v) {
  nlohmann::json trials = nlohmann::json::array();
  for (const auto& t : v.trials) {
    trials.push_back({{"sample_id", t.sample_id},
                      {"reference_norm", t.reference_norm},
                      {"null_drift", t.null_drift},
                      {"random_drift", t.random_drift},
                      {"principal_drift", t.principal_drift}});
  }
  return {{"n_trials", v.trials.size()},
          {"null", to_json(v.null_stats)},
          {"random", to_json(v.random_stats)},
          {"principal", to_json(v.principal_stats)},
          {"fraction_random_exceeds_null", v.fraction_random_exceeds_null},
          {"max_null_bound_ratio", v.max_null_bound_ratio},
          {"trials", trials}};
}

}  // namespace sing
