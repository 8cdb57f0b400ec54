#include "sing/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>
#include <sstream>

#include <Eigen/QR>

#include "sing/error.hpp"
#include "sing/format.hpp"
#include "sing/rng.hpp"

namespace sing {

namespace {

Vector row(const MatrixF& m, Eigen::Index i) { return m.row(i).transpose().cast<double>(); }

nlohmann::json to_json(const Ellipse& e) {
  return {{"cx", e.cx},         {"cy", e.cy},       {"cov_xx", e.cov_xx},
          {"cov_xy", e.cov_xy}, {"cov_yy", e.cov_yy}, {"level", e.level},
          {"chi2_quantile", e.chi2_quantile}};
}

// sqrt(var_a/n_a + var_b/n_b) with population variances
double pooled_standard_error(std::span<const double> a, std::span<const double> b) {
  return std::sqrt(population_variance(a) / static_cast<double>(a.size()) +
                   population_variance(b) / static_cast<double>(b.size()));
}

double gap_z(double diff, double se) {
  if (se > 0.0) return diff / se;
  if (diff == 0.0) return 0.0;
  return diff > 0.0 ? std::numeric_limits<double>::infinity() : -std::numeric_limits<double>::infinity();
}

}  // namespace

// --- sample selection ----------------------------------------------------------

std::string to_string(SamplingScheme scheme) {
  return scheme == SamplingScheme::uniform ? "uniform" : "balanced";
}

SamplingScheme parse_sampling_scheme(const std::string& text) {
  if (text == "uniform") return SamplingScheme::uniform;
  if (text == "balanced") return SamplingScheme::balanced;
  throw ValidationError("unknown sampling scheme", text);
}

std::vector<Eigen::Index> sample_indices(const Labels& labels, Eigen::Index n_classes, std::size_t count,
                                         SamplingScheme scheme, std::uint64_t seed) {
  Rng rng(seed);
  auto shuffle = [&rng](std::vector<Eigen::Index>& v) {
    for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[rng.below(i)]);
  };
  std::vector<Eigen::Index> out;
  if (count >= labels.size()) {
    out.resize(labels.size());
    std::iota(out.begin(), out.end(), Eigen::Index{0});
    return out;
  }
  if (scheme == SamplingScheme::uniform) {
    std::vector<Eigen::Index> all(labels.size());
    std::iota(all.begin(), all.end(), Eigen::Index{0});
    shuffle(all);
    out.assign(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(count));
  } else {
    std::vector<std::vector<Eigen::Index>> pools(static_cast<std::size_t>(n_classes));
    for (std::size_t i = 0; i < labels.size(); ++i) {
      const auto l = labels[i];
      if (l < 0 || l >= n_classes) throw ValidationError("label out of range", "label " + std::to_string(l));
      pools[static_cast<std::size_t>(l)].push_back(static_cast<Eigen::Index>(i));
    }
    for (auto& p : pools) shuffle(p);
    // round-robin over classes until the budget is spent
    for (std::size_t depth = 0; out.size() < count; ++depth) {
      for (auto& p : pools) {
        if (depth < p.size() && out.size() < count) out.push_back(p[depth]);
      }
    }
  }
  std::sort(out.begin(), out.end());
  return out;
}

FeatureBundle subset_bundle(const FeatureBundle& bundle, std::span<const Eigen::Index> rows) {
  FeatureBundle out;
  const auto n = static_cast<Eigen::Index>(rows.size());
  out.features.resize(n, bundle.features.cols());
  out.clip_image.resize(n, bundle.clip_image.cols());
  for (Eigen::Index r = 0; r < n; ++r) {
    const auto i = rows[static_cast<std::size_t>(r)];
    if (i < 0 || i >= bundle.sample_count())
      throw ValidationError("sample out of range", "sample id " + std::to_string(i));
    out.features.row(r) = bundle.features.row(i);
    out.clip_image.row(r) = bundle.clip_image.row(i);
    out.labels.push_back(bundle.labels[static_cast<std::size_t>(i)]);
  }
  out.head_weight = bundle.head_weight;
  out.head_bias = bundle.head_bias;
  out.class_names = bundle.class_names;
  out.text_embeddings = bundle.text_embeddings;
  out.prompts = bundle.prompts;
  out.model_name = bundle.model_name;
  return out;
}

// --- model level ------------------------------------------------------------

double chi_square2_quantile(double p) {
  if (!(p > 0.0 && p < 1.0)) throw ValidationError("confidence level", "level must lie in (0, 1)");
  return -2.0 * std::log1p(-p);
}

Ellipse confidence_ellipse(std::span<const double> x, std::span<const double> y, double level) {
  if (x.size() != y.size() || x.empty()) throw ValidationError("empty input", "ellipse needs paired, nonempty samples");
  Ellipse e;
  e.level = level;
  e.chi2_quantile = chi_square2_quantile(level);
  e.cx = mean(x);
  e.cy = mean(y);
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double dx = x[i] - e.cx;
    const double dy = y[i] - e.cy;
    e.cov_xx += dx * dx;
    e.cov_xy += dx * dy;
    e.cov_yy += dy * dy;
  }
  const auto n = static_cast<double>(x.size());
  e.cov_xx /= n;
  e.cov_xy /= n;
  e.cov_yy /= n;
  return e;
}

ModelSummary summarize_model(const std::vector<MetricRecord>& records, const std::string& model_name,
                             double confidence) {
  if (records.empty()) throw ValidationError("empty input", "cannot summarize a model without records");
  std::vector<double> as, abs_as, is;
  for (const auto& r : records) {
    as.push_back(r.attribute_score);
    abs_as.push_back(std::abs(r.attribute_score));
    is.push_back(r.image_score);
  }
  ModelSummary s;
  s.model_name = model_name;
  s.n_samples = records.size();
  s.as_stats = summarize(abs_as);
  s.signed_as_stats = summarize(as);
  s.is_stats = summarize(is);
  s.ratio_defined = s.as_stats.mean > 0.0;
  s.ratio_is_over_as = s.ratio_defined ? s.is_stats.mean / s.as_stats.mean : std::numeric_limits<double>::infinity();
  s.ellipse = confidence_ellipse(abs_as, is, confidence);
  s.ellipse_signed = confidence_ellipse(as, is, confidence);
  return s;
}

nlohmann::json to_json(const ModelSummary& s) {
  nlohmann::json out = {{"model_name", s.model_name},
                        {"n_samples", s.n_samples},
                        {"abs_as", to_json(s.as_stats)},
                        {"signed_as", to_json(s.signed_as_stats)},
                        {"is", to_json(s.is_stats)},
                        {"ratio_defined", s.ratio_defined},
                        {"ellipse_abs_as_is", to_json(s.ellipse)},
                        {"ellipse_signed_as_is", to_json(s.ellipse_signed)}};
  out["ratio_is_over_as"] = s.ratio_defined ? nlohmann::json(s.ratio_is_over_as) : nlohmann::json(nullptr);
  return out;
}

// --- class level ------------------------------------------------------------

std::vector<ClassProfile> summarize_classes(const std::vector<MetricRecord>& records,
                                            const std::vector<std::string>& class_names, double flag_threshold) {
  std::map<Eigen::Index, std::vector<double>> by_class;
  for (const auto& r : records) {
    if (r.class_id < 0 || (!class_names.empty() && r.class_id >= static_cast<Eigen::Index>(class_names.size())))
      throw ValidationError("label out of range", "record class id " + std::to_string(r.class_id));
    by_class[r.class_id].push_back(r.attribute_score);
  }

  std::vector<ClassProfile> out;
  for (const auto& [id, values] : by_class) {
    std::vector<double> sorted = values;
    std::sort(sorted.begin(), sorted.end());
    ClassProfile p;
    p.class_id = id;
    p.class_name = class_names.empty() ? std::to_string(id) : class_names[static_cast<std::size_t>(id)];
    p.n_samples = values.size();
    p.mean = mean(values);
    p.std = std::sqrt(population_variance(values));
    constexpr std::array<double, 5> levels{0.05, 0.25, 0.5, 0.75, 0.95};
    for (std::size_t q = 0; q < levels.size(); ++q) p.quantiles[q] = quantile_sorted(sorted, levels[q]);
    double abs_sum = 0.0;
    for (double v : values) abs_sum += std::abs(v);
    p.mean_abs = abs_sum / static_cast<double>(values.size());
    out.push_back(p);
  }

  if (out.size() > 1) {
    for (auto& p : out) {
      std::vector<double> mine, rest;
      for (const auto& r : records) (r.class_id == p.class_id ? mine : rest).push_back(std::abs(r.attribute_score));
      p.leak_z = gap_z(mean(mine) - mean(rest), pooled_standard_error(mine, rest));
      p.flagged = p.leak_z > flag_threshold;
    }
  }
  return out;
}

double class_rank_correlation(const std::vector<ClassProfile>& a, const std::vector<ClassProfile>& b) {
  std::map<Eigen::Index, double> lookup;
  for (const auto& p : b) lookup[p.class_id] = p.mean_abs;
  std::vector<double> xa, xb;
  for (const auto& p : a) {
    if (auto it = lookup.find(p.class_id); it != lookup.end()) {
      xa.push_back(p.mean_abs);
      xb.push_back(it->second);
    }
  }
  return spearman(xa, xb);
}

std::string class_profiles_csv(const std::vector<ClassProfile>& profiles) {
  std::ostringstream out;
  out << "class_id,class_name,n_samples,AS_mean,AS_std,AS_q05,AS_q25,AS_q50,AS_q75,AS_q95,abs_AS_mean,leak_z,flagged\n";
  for (const auto& p : profiles) {
    out << p.class_id << ',' << csv_field(p.class_name) << ',' << p.n_samples << ',' << format_double(p.mean) << ','
        << format_double(p.std);
    for (double q : p.quantiles) out << ',' << format_double(q);
    out << ',' << format_double(p.mean_abs) << ',' << format_double(p.leak_z) << ',' << (p.flagged ? 1 : 0) << '\n';
  }
  return out.str();
}

nlohmann::json to_json(const std::vector<ClassProfile>& profiles) {
  nlohmann::json out = nlohmann::json::array();
  for (const auto& p : profiles) {
    out.push_back({{"class_id", p.class_id},
                   {"class_name", p.class_name},
                   {"n_samples", p.n_samples},
                   {"mean", p.mean},
                   {"std", p.std},
                   {"quantiles", {{"q05", p.quantiles[0]},
                                  {"q25", p.quantiles[1]},
                                  {"q50", p.quantiles[2]},
                                  {"q75", p.quantiles[3]},
                                  {"q95", p.quantiles[4]}}},
                   {"abs_mean", p.mean_abs},
                   {"leak_z", std::isfinite(p.leak_z) ? nlohmann::json(p.leak_z) : nlohmann::json(nullptr)},
                   {"flagged", p.flagged}});
  }
  return out;
}

LeakageGap leakage_gap(const std::vector<MetricRecord>& records, const std::vector<Eigen::Index>& leak_classes) {
  std::vector<double> leaky, clean;
  for (const auto& r : records) {
    const bool is_leaky = std::find(leak_classes.begin(), leak_classes.end(), r.class_id) != leak_classes.end();
    (is_leaky ? leaky : clean).push_back(std::abs(r.attribute_score));
  }
  if (leaky.empty() || clean.empty())
    throw ValidationError("empty input", "leakage gap needs records from both leaky and clean classes");
  LeakageGap g;
  g.n_leaky = leaky.size();
  g.n_clean = clean.size();
  g.leaky_mean = mean(leaky);
  g.clean_mean = mean(clean);
  g.pooled_se = pooled_standard_error(leaky, clean);
  g.z = gap_z(g.leaky_mean - g.clean_mean, g.pooled_se);
  return g;
}

// --- concept level ----------------------------------------------------------

std::vector<ConceptProfile> concept_profile(const FeatureBundle& bundle, const HeadDecomposition& decomp,
                                            const Translator& translator, Eigen::Index class_id,
                                            const std::vector<Eigen::Index>& prompt_ids) {
  if (!bundle.has_text()) throw ValidationError("missing prompts", "concept profiles need text_embeddings");
  for (auto k : prompt_ids) {
    if (k < 0 || k >= bundle.prompt_count())
      throw ValidationError("missing prompts", "prompt id " + std::to_string(k) + " is not in the bundle");
  }

  std::vector<Vector> originals, equivalents;
  for (Eigen::Index i = 0; i < bundle.sample_count(); ++i) {
    if (bundle.labels[static_cast<std::size_t>(i)] != class_id) continue;
    const Vector f = row(bundle.features, i);
    const Vector z = translate(translator, f);
    const Vector z_eq = translate(translator, f - decomp.proj_null * f);
    if (z.norm() == 0.0 || z_eq.norm() == 0.0) continue;
    originals.push_back(z);
    equivalents.push_back(z_eq);
  }
  if (originals.empty())
    throw ValidationError("empty class", "class " + std::to_string(class_id) + " has no usable samples");

  std::vector<ConceptProfile> out;
  for (auto k : prompt_ids) {
    const Vector text = row(*bundle.text_embeddings, k);
    double orig_sum = 0.0;
    double eq_sum = 0.0;
    for (std::size_t j = 0; j < originals.size(); ++j) {
      orig_sum += angle_degrees(originals[j], text);
      eq_sum += angle_degrees(equivalents[j], text);
    }
    ConceptProfile p;
    p.prompt_id = k;
    p.prompt = bundle.prompts[static_cast<std::size_t>(k)];
    p.n_samples = originals.size();
    p.angle_original_mean = orig_sum / static_cast<double>(originals.size());
    p.angle_equivalent_mean = eq_sum / static_cast<double>(originals.size());
    p.attribute_score_mean = p.angle_original_mean - p.angle_equivalent_mean;
    out.push_back(p);
  }
  return out;
}

std::string concept_profiles_csv(const std::vector<ConceptProfile>& profiles) {
  std::ostringstream out;
  out << "prompt_id,prompt,n_samples,angle_orig_mean_deg,angle_eq_mean_deg,AS_mean_deg\n";
  for (const auto& p : profiles) {
    out << p.prompt_id << ',' << csv_field(p.prompt) << ',' << p.n_samples << ','
        << format_double(p.angle_original_mean) << ',' << format_double(p.angle_equivalent_mean) << ','
        << format_double(p.attribute_score_mean) << '\n';
  }
  return out.str();
}

SummaryStats steering_as_summary(const SteeringBatch& batch, std::size_t prompt_index) {
  if (prompt_index >= batch.prompt_ids.size())
    throw ValidationError("missing prompts", "steering batch has no AS column " + std::to_string(prompt_index));
  std::vector<double> values;
  for (const auto& r : batch.rows) values.push_back(std::abs(r.attribute_scores[prompt_index]));
  return summarize(values);
}

// --- head probe ---------------------------------------------------------------

ProbeSplit probe_split(const Labels& labels, Eigen::Index n_classes, std::uint64_t seed) {
  std::vector<Eigen::Index> order(labels.size());
  std::iota(order.begin(), order.end(), Eigen::Index{0});
  Rng rng(seed);
  for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);

  const auto n_train = static_cast<std::size_t>(std::floor(0.8 * static_cast<double>(labels.size())));
  ProbeSplit split;
  split.train.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_train));
  split.test.assign(order.begin() + static_cast<std::ptrdiff_t>(n_train), order.end());
  if (split.train.empty() || split.test.empty())
    throw ValidationError("degenerate split", "need at least one training and one test sample");

  std::vector<bool> present(static_cast<std::size_t>(n_classes), false);
  std::vector<bool> in_train(static_cast<std::size_t>(n_classes), false);
  for (auto l : labels) present[static_cast<std::size_t>(l)] = true;
  for (auto i : split.train) in_train[static_cast<std::size_t>(labels[static_cast<std::size_t>(i)])] = true;
  for (Eigen::Index k = 0; k < n_classes; ++k) {
    if (present[static_cast<std::size_t>(k)] && !in_train[static_cast<std::size_t>(k)])
      throw ValidationError("degenerate split", "class " + std::to_string(k) + " is absent from the training split");
  }
  return split;
}

double probe_accuracy(const Matrix& inputs, const Labels& labels, Eigen::Index n_classes, const ProbeSplit& split,
                      double lambda) {
  const auto n_train = static_cast<Eigen::Index>(split.train.size());
  Matrix x_train(n_train, inputs.cols());
  Matrix y_train = Matrix::Zero(n_train, n_classes);
  for (Eigen::Index r = 0; r < n_train; ++r) {
    const auto i = split.train[static_cast<std::size_t>(r)];
    x_train.row(r) = inputs.row(i);
    y_train(r, labels[static_cast<std::size_t>(i)]) = 1.0;
  }
  const Translator probe = fit_translator(x_train, y_train, lambda);

  std::size_t correct = 0;
  for (auto i : split.test) {
    Eigen::Index predicted = 0;
    (probe.theta * inputs.row(i).transpose()).maxCoeff(&predicted);
    if (predicted == labels[static_cast<std::size_t>(i)]) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(split.test.size());
}

ProbeCorrelation head_probe_correlation(const std::vector<FeatureBundle>& bundles,
                                        const std::vector<HeadDecomposition>& decomps,
                                        const std::vector<Translator>& translators, double probe_lambda,
                                        std::uint64_t seed) {
  if (bundles.size() != decomps.size() || bundles.size() != translators.size())
    throw ValidationError("dimension mismatch", "need one decomposition and one translator per bundle");
  if (bundles.size() < 2) throw ValidationError("empty input", "a correlation needs at least two models");

  ProbeCorrelation out;
  for (std::size_t b = 0; b < bundles.size(); ++b) {
    const auto& bundle = bundles[b];
    const Matrix principal = bundle.features.cast<double>() * decomps[b].proj_principal;  // Pi_p symmetric
    const Matrix translated = translate_rows(translators[b], principal);
    const ProbeSplit split = probe_split(bundle.labels, bundle.class_count(), seed);
    out.accuracies_raw.push_back(probe_accuracy(principal, bundle.labels, bundle.class_count(), split, probe_lambda));
    out.accuracies_translated.push_back(
        probe_accuracy(translated, bundle.labels, bundle.class_count(), split, probe_lambda));
  }
  out.pearson = pearson(out.accuracies_raw, out.accuracies_translated);
  return out;
}

// --- planted leakage ------------------------------------------------------------

PlantedBundle generate_planted_bundle(const PlantedConfig& cfg) {
  if (cfg.c < 1 || cfg.m <= cfg.c) throw ValidationError("planted config", "need m > c >= 1");
  if (cfg.n < 1 || cfg.per_class < 1) throw ValidationError("planted config", "need n >= 1 and per_class >= 1");
  if (!(cfg.leak_strength >= 0.0)) throw ValidationError("planted config", "leak_strength must be nonnegative");

  const Eigen::Index m = cfg.m;
  const Eigen::Index c = cfg.c;
  Rng rng(cfg.seed);

  // random orthogonal basis: first c columns span the row space of W
  const Matrix basis = Eigen::HouseholderQR<Matrix>(rng.normal_matrix(m, m)).householderQ();
  const Matrix mixing = rng.normal_matrix(c, c);
  // the stored head is f32, so the planted directions are made null for the
  // rounded matrix rather than the exact product
  const MatrixF weight_f32 = (mixing * basis.leftCols(c).transpose()).cast<float>();
  const Matrix weight = weight_f32.cast<double>();
  const Matrix stored_null = decompose_head(weight).proj_null;

  const Matrix raw_embed = rng.normal_matrix(cfg.n, m);
  Matrix embed;
  if (cfg.n >= m) {
    embed = Eigen::HouseholderQR<Matrix>(raw_embed).householderQ() * Matrix::Identity(cfg.n, m);
  } else {
    embed = raw_embed / std::sqrt(static_cast<double>(cfg.n));
  }

  const double noise_norm = std::sqrt(static_cast<double>(m));  // unit variance per coordinate

  PlantedTruth truth;
  for (Eigen::Index k = 1; k < c; k += 2) truth.leak_classes.push_back(k);
  const auto n_leaky = static_cast<Eigen::Index>(truth.leak_classes.size());
  const Eigen::Index null_dim = m - c;
  truth.null_dirs.resize(m, n_leaky);
  // orthonormal as long as null_dim >= number of leaky classes; reused otherwise
  const Eigen::Index distinct = std::min(n_leaky, null_dim);
  const Matrix seeds = stored_null * basis.middleCols(c, distinct);
  const Matrix q = Eigen::HouseholderQR<Matrix>(seeds).householderQ() * Matrix::Identity(m, distinct);
  for (Eigen::Index j = 0; j < n_leaky; ++j) {
    Vector u = q.col(j % distinct);
    if (u.dot(basis.col(c + (j % distinct))) < 0.0) u = -u;
    truth.null_dirs.col(j) = u;
  }

  // concepts live in the row space; the leak is added to features only, so
  // prompts describe the class and not the planted null component
  std::vector<Vector> concepts(static_cast<std::size_t>(c));
  std::vector<Vector> shifts(static_cast<std::size_t>(c), Vector::Zero(m));
  for (Eigen::Index k = 0; k < c; ++k) {
    const Vector a = rng.normal_vector(c);
    concepts[static_cast<std::size_t>(k)] = basis.leftCols(c) * (a / a.norm()) * (cfg.mean_ratio * noise_norm);
    if (k % 2 == 1) shifts[static_cast<std::size_t>(k)] = cfg.leak_strength * truth.null_dirs.col(k / 2);
  }

  const Eigen::Index n_samples = c * cfg.per_class;
  Matrix features(n_samples, m);
  Labels labels;
  for (Eigen::Index k = 0; k < c; ++k) {
    for (Eigen::Index s = 0; s < cfg.per_class; ++s) {
      const auto kk = static_cast<std::size_t>(k);
      features.row(k * cfg.per_class + s) = (concepts[kk] + shifts[kk] + rng.normal_vector(m)).transpose();
      labels.push_back(k);
    }
  }

  PlantedBundle out;
  FeatureBundle& b = out.bundle;
  b.model_name = "planted";
  b.features = features.cast<float>();
  b.head_weight = weight_f32;
  b.clip_image = (features * embed.transpose()).cast<float>();
  b.labels = std::move(labels);
  MatrixF text(c, cfg.n);
  for (Eigen::Index k = 0; k < c; ++k) {
    b.class_names.push_back("class_" + std::to_string(k));
    b.prompts.push_back("an image of a class_" + std::to_string(k));
    text.row(k) = (embed * concepts[static_cast<std::size_t>(k)]).transpose().cast<float>();
  }
  b.text_embeddings = std::move(text);
  out.truth = std::move(truth);
  return out;
}

nlohmann::json to_json(const PlantedTruth& truth) {
  nlohmann::json dirs = nlohmann::json::array();
  for (Eigen::Index j = 0; j < truth.null_dirs.cols(); ++j) {
    std::vector<double> col(truth.null_dirs.col(j).data(), truth.null_dirs.col(j).data() + truth.null_dirs.rows());
    dirs.push_back(col);
  }
  return {{"leak_classes", truth.leak_classes}, {"null_dirs", dirs}};
}

}  // namespace sing
