// Acceptance run: one PASS/FAIL line per criterion, nonzero exit on any FAIL.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include "fixtures.hpp"
#include "oracles.hpp"
#include "sing/analysis.hpp"
#include "sing/bundle.hpp"
#include "sing/error.hpp"
#include "sing/head_decomposition.hpp"
#include "sing/metrics.hpp"
#include "sing/parallel.hpp"
#include "sing/perturbation.hpp"
#include "sing/rng.hpp"
#include "sing/stats.hpp"
#include "sing/translator.hpp"

using namespace sing;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

struct Criterion {
  std::string name;
  double time_limit_s;  // 0 = no limit
  std::function<Outcome()> run;
};

std::string fmt(const char* format, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, format, args...);
  return buf;
}

double max_abs(const Matrix& m) { return m.size() == 0 ? 0.0 : m.cwiseAbs().maxCoeff(); }

Eigen::Index uniform_int(Rng& rng, Eigen::Index lo, Eigen::Index hi) {
  return lo + static_cast<Eigen::Index>(rng.below(static_cast<std::uint64_t>(hi - lo + 1)));
}

// --- projector algebra -------------------------------------------------------

Outcome projector_algebra() {
  constexpr int kHeads = 200;
  struct Result {
    double algebra = 0.0;
    double leak_ratio = 0.0;
    Eigen::Index c = 0, m = 0, rank = 0;
  };
  std::vector<Result> results(kHeads);
  parallel_for(kHeads, [&](std::size_t i) {
    Rng rng(0xA11CE + i);
    const Eigen::Index c = uniform_int(rng, 1, 256);
    const Eigen::Index m = uniform_int(rng, 1, 512);
    Matrix w;
    if (i % 3 == 2 && std::min(c, m) > 1) {
      // rank deficient: product through a narrow inner dimension
      const Eigen::Index inner = uniform_int(rng, 1, std::min(c, m) - 1);
      w = rng.normal_matrix(c, inner) * rng.normal_matrix(inner, m);
    } else {
      w = rng.normal_matrix(c, m);
    }
    const auto d = decompose_head(w);
    const Matrix& pp = d.proj_principal;
    const Matrix& pn = d.proj_null;
    const Matrix eye = Matrix::Identity(m, m);
    Result r;
    r.c = c;
    r.m = m;
    r.rank = d.rank;
    r.algebra = std::max({max_abs(pn * pn - pn), max_abs(pn.transpose() - pn), max_abs(pp + pn - eye),
                          max_abs(pp * pn), max_abs(pp * pp - pp), max_abs(pp.transpose() - pp)});
    r.leak_ratio = (w * pn).norm() / w.norm();
    results[i] = r;
  });
  double worst_algebra = 0.0, worst_leak = 0.0;
  Eigen::Index biggest_m = 0, biggest_c = 0;
  for (const auto& r : results) {
    worst_algebra = std::max(worst_algebra, r.algebra);
    worst_leak = std::max(worst_leak, r.leak_ratio);
    biggest_m = std::max(biggest_m, r.m);
    biggest_c = std::max(biggest_c, r.c);
  }
  return {worst_algebra <= 1e-8 && worst_leak <= 1e-10,
          fmt("%d heads up to %lldx%lld; max elementwise residual %.2e (<=1e-8); max |W Pi_n|/|W| %.2e (<=1e-10)",
              kHeads, static_cast<long long>(biggest_c), static_cast<long long>(biggest_m), worst_algebra, worst_leak)};
}

// --- logit invariance ------------------------------------------------------------

Outcome logit_invariance() {
  struct Shape {
    Eigen::Index c, m, n_samples;
  };
  const std::vector<Shape> shapes = {{10, 64, 200}, {100, 384, 300}, {5, 32, 100}, {50, 128, 200}, {200, 256, 150}};
  double worst_ratio = 0.0, worst_fraction = 1.0;
  bool principal_ok = true;
  std::string per_head;
  for (std::size_t h = 0; h < shapes.size(); ++h) {
    Rng rng(0xB0B + h);
    const auto& s = shapes[h];
    Head head;
    head.weight = rng.normal_matrix(s.c, s.m);
    head.bias = rng.normal_vector(s.c);
    const auto d = decompose_head(head.weight);
    const Matrix features = rng.normal_matrix(s.n_samples, s.m) * 2.0;
    const auto v = validate_null_space(features, head, d, 1000, 1000 + h);
    worst_ratio = std::max(worst_ratio, v.max_null_bound_ratio);
    worst_fraction = std::min(worst_fraction, v.fraction_random_exceeds_null);
    principal_ok = principal_ok && v.principal_stats.mean >= v.random_stats.mean;
    per_head += fmt(" [%lldx%lld null %.1e random %.2f principal %.2f]", static_cast<long long>(s.c),
                    static_cast<long long>(s.m), v.null_stats.mean, v.random_stats.mean, v.principal_stats.mean);
  }
  return {worst_ratio <= 1e-4 && worst_fraction >= 0.99 && principal_ok,
          fmt("5 heads x 1000 trials; max null drift / (1+|W||d|) %.2e (<=1e-4); min random>null fraction %.3f "
              "(>=0.99); principal mean >= random mean: %s; mean drifts",
              worst_ratio, worst_fraction, principal_ok ? "yes" : "no") +
              per_head};
}

// --- ridge oracle ------------------------------------------------------------------

Outcome ridge_oracle() {
  Matrix f(3, 2);
  f << 1, 0, 0, 1, 1, 1;
  Matrix z(3, 1);
  z << 2, 0, 2;
  Matrix expected(1, 2);
  expected << 1.25, 0.25;
  const double worked = std::max(max_abs(fit_translator(f, z, 1.0).theta - expected),
                                 max_abs(fit_translator(f, z, 1.0).theta - oracle::ridge_normal_equations(f, z, 1.0)));

  double worst = 0.0;
  Rng rng(0xC0FFEE);
  for (int i = 0; i < 50; ++i) {
    const Eigen::Index m = uniform_int(rng, 1, 16);
    const Eigen::Index n = uniform_int(rng, 1, 8);
    const Eigen::Index big_n = uniform_int(rng, m, 200);
    const Matrix features = rng.normal_matrix(big_n, m);
    const Matrix targets = rng.normal_matrix(big_n, n);
    // every fifth instance at lambda 0 (N >= m keeps F^T F invertible)
    const double lambda = i % 5 == 0 ? 0.0 : 0.1 * static_cast<double>(big_n) * rng.uniform() * 2.0;
    const Translator t = fit_translator(features, targets, lambda);
    worst = std::max(worst, max_abs(t.theta - oracle::ridge_normal_equations(features, targets, lambda)));
  }
  return {worked <= 1e-8 && worst <= 1e-8,
          fmt("worked example error %.2e; 50 instances max elementwise error %.2e (<=1e-8)", worked, worst)};
}

// --- gradient check ------------------------------------------------------------------

Outcome gradient_check() {
  double worst = 0.0;
  Rng rng(0xD1FF);
  for (int i = 0; i < 100; ++i) {
    const Eigen::Index m = uniform_int(rng, 2, 32);
    const Eigen::Index n = uniform_int(rng, 2, 16);
    Translator t;
    t.theta = rng.normal_matrix(n, m);
    const Vector feature = rng.normal_vector(m);
    const Vector text = rng.normal_vector(n);
    const Vector analytic = semantic_gradient(feature, text, t);
    const Vector numeric = oracle::central_difference(
        [&](const Vector& x) { return similarity_score(x, text, t); }, feature, 1e-5);
    worst = std::max(worst, (analytic - numeric).norm() / analytic.norm());
  }
  return {worst < 1e-5, fmt("100 instances, h=1e-5; max relative error %.2e (<1e-5)", worst)};
}

// --- calibration ---------------------------------------------------------------------

Outcome calibration() {
  Rng rng(0xCA1);
  int done = 0, redraws = 0, worst_steps = 0;
  double worst_err = 0.0;
  while (done < 100) {
    const Eigen::Index c = uniform_int(rng, 2, 16);
    const Eigen::Index m = uniform_int(rng, c + 2, 48);
    const Eigen::Index n = uniform_int(rng, 4, 24);
    const auto d = decompose_head(rng.normal_matrix(c, m));
    Translator t;
    t.theta = rng.normal_matrix(n, m);
    const Vector feature = rng.normal_vector(m);
    Vector dir = d.proj_null * rng.normal_vector(m);
    dir.normalize();
    // IS along the ray is bounded by the angle between T f and T d
    if (angle_degrees(translate(t, feature), translate(t, dir)) <= 40.0 + 0.1) {
      ++redraws;
      continue;
    }
    const auto cal = calibrate_epsilon(feature, dir, t, 40.0);
    const double is = image_score(feature, feature + cal.epsilon * dir, t);
    worst_err = std::max(worst_err, std::abs(is - 40.0));
    worst_steps = std::max(worst_steps, cal.bisection_steps);
    ++done;
  }
  Translator identity;
  identity.theta = Matrix::Identity(2, 2);
  Vector f(2), dir(2);
  f << 1, 0;
  dir << 0, 1;
  CalibrationOptions tight;
  tight.tolerance_deg = 1e-6;
  const auto analytic = calibrate_epsilon(f, dir, identity, 40.0, tight);
  const double analytic_err = std::abs(analytic.epsilon - std::tan(40.0 * M_PI / 180.0));
  return {worst_err <= 0.1 && worst_steps <= 60 && analytic_err <= 1e-4,
          fmt("100 instances (%d unreachable draws replaced); max |IS-40| %.3f deg (<=0.1), max steps %d (<=60); "
              "tan(40) case error %.2e (<=1e-4)",
              redraws, worst_err, worst_steps, analytic_err)};
}

// --- metric identities -----------------------------------------------------------------

Outcome metric_identities() {
  Rng rng(0x1D);
  int violations = 0;
  double worst_scale = 0.0;
  for (int i = 0; i < 1000; ++i) {
    const Eigen::Index m = uniform_int(rng, 1, 24);
    const Eigen::Index n = uniform_int(rng, 1, 12);
    Translator t;
    t.theta = rng.normal_matrix(n, m);
    const Vector f = rng.normal_vector(m);
    const Vector g = rng.normal_vector(m);
    const Vector z = rng.normal_vector(n);
    if (attribute_score(f, f, z, t) != 0.0) ++violations;
    if (image_score(f, f, t) != 0.0) ++violations;
    if (image_score(f, 2.0 * f, t) != 0.0) ++violations;
    if (attribute_score(f, g, z, t) != -attribute_score(g, f, z, t)) ++violations;
    Translator scaled;
    const double alpha = std::exp(rng.normal() * 3.0);
    scaled.theta = alpha * t.theta;
    const double d_as = std::abs(attribute_score(f, g, z, scaled) - attribute_score(f, g, z, t));
    const double d_is = std::abs(image_score(f, g, scaled) - image_score(f, g, t));
    worst_scale = std::max({worst_scale, d_as, d_is});
    if (d_as > 1e-9 || d_is > 1e-9) ++violations;
  }
  return {violations == 0,
          fmt("1000 inputs x 5 identities; %d violations; max translator-scale deviation %.2e deg (<=1e-9)",
              violations, worst_scale)};
}

// --- planted leakage -------------------------------------------------------------------

constexpr double kStrongLeak = 5.0;

struct PlantedRun {
  double z = 0.0;
  double max_drift = 0.0;
};

PlantedRun planted_run(std::uint64_t seed, double leak) {
  PlantedConfig cfg;
  cfg.seed = seed;
  cfg.leak_strength = leak;
  const auto planted = generate_planted_bundle(cfg);
  const auto& b = planted.bundle;
  const auto d = decompose_head(b.head_weight.cast<double>());
  const Matrix f = b.features.cast<double>();
  const Translator t = fit_translator(f, b.clip_image.cast<double>(), default_ridge_lambda(b.sample_count()));
  const auto m = batch_metrics(b, d, t, PromptSelector::true_class());
  PlantedRun r;
  r.z = leakage_gap(m.records, planted.truth.leak_classes).z;
  const Head head = Head::from_bundle(b);
  for (Eigen::Index i = 0; i < f.rows(); ++i) {
    const Vector x = f.row(i).transpose();
    r.max_drift = std::max(r.max_drift, logit_drift(head, x, null_removal(x, d)));
  }
  return r;
}

Outcome planted_leakage() {
  constexpr int kSeeds = 20;
  std::vector<PlantedRun> clean(kSeeds), leaky(kSeeds);
  parallel_for(2 * kSeeds, [&](std::size_t i) {
    const auto seed = static_cast<std::uint64_t>(i % kSeeds);
    if (i < kSeeds) clean[i] = planted_run(seed, 0.0);
    else leaky[i - kSeeds] = planted_run(seed, kStrongLeak);
  });
  double mean_clean = 0.0, max_drift = 0.0, min_leaky = std::numeric_limits<double>::infinity();
  int above = 0;
  for (int s = 0; s < kSeeds; ++s) {
    mean_clean += clean[s].z / kSeeds;
    if (leaky[s].z > 3.0) ++above;
    min_leaky = std::min(min_leaky, leaky[s].z);
    max_drift = std::max({max_drift, clean[s].max_drift, leaky[s].max_drift});
  }
  const bool pass = mean_clean < 1.0 && above >= 19 && max_drift <= 1e-6;
  return {pass, fmt("leak 0: mean gap %.2f SE (<1); leak %.0f sigma: %d/20 seeds above 3 SE (>=19), min %.2f SE; "
                    "max null-removal logit drift %.2e (<=1e-6)",
                    mean_clean, kStrongLeak, above, min_leaky, max_drift)};
}

// --- bundle round trip -------------------------------------------------------------------

std::string violation(const FeatureBundle& b) {
  try {
    validate(b);
  } catch (const ValidationError& e) {
    return e.invariant();
  }
  return "<none>";
}

Outcome bundle_round_trip() {
  int mismatches = 0;
  for (std::uint64_t s = 0; s < 30; ++s) {
    oracle::TempDir dir("accept_bundle");
    Rng rng(s);
    fixture::BundleShape shape;
    shape.n_samples = uniform_int(rng, 1, 60);
    shape.feature_dim = uniform_int(rng, 1, 40);
    shape.classes = uniform_int(rng, 1, 10);
    shape.embed_dim = uniform_int(rng, 1, 20);
    shape.prompts = uniform_int(rng, 0, 5);
    shape.bias = rng.below(2) == 0;
    const FeatureBundle b = fixture::random_bundle(s, shape);
    write_bundle(b, dir.path());
    if (!bitwise_equal(b, read_bundle(dir.path()))) ++mismatches;
  }

  namespace inv = bundle_invariant;
  const FeatureBundle good = fixture::random_bundle(99);
  std::vector<std::pair<std::string, std::function<void(FeatureBundle&)>>> cases = {
      {inv::kEmptyTensor, [](FeatureBundle& b) { b.features.resize(0, 6); b.clip_image.resize(0, 4); b.labels.clear(); }},
      {inv::kRowCount, [](FeatureBundle& b) { b.labels.pop_back(); }},
      {inv::kFeatureDim, [](FeatureBundle& b) { b.head_weight.conservativeResize(Eigen::NoChange, 5); }},
      {inv::kEmbeddingDim, [](FeatureBundle& b) { b.text_embeddings->conservativeResize(Eigen::NoChange, 3); }},
      {inv::kLabelRange, [](FeatureBundle& b) { b.labels[0] = 3; }},
      {inv::kNonFinite, [](FeatureBundle& b) { b.clip_image(1, 1) = std::numeric_limits<float>::quiet_NaN(); }},
      {inv::kClassNames, [](FeatureBundle& b) { b.class_names.push_back("extra"); }},
      {inv::kBiasLength, [](FeatureBundle& b) { b.head_bias->conservativeResize(4); }},
      {inv::kPromptCount, [](FeatureBundle& b) { b.prompts.pop_back(); }},
  };
  int wrong = 0;
  std::string wrong_names;
  for (auto& [name, mutate] : cases) {
    FeatureBundle b = good;
    mutate(b);
    if (violation(b) != name) {
      ++wrong;
      wrong_names += " " + name;
    }
  }
  // on-disk damage
  {
    oracle::TempDir dir("accept_trunc");
    write_bundle(good, dir.path());
    std::filesystem::resize_file(dir / "features.bin", 8);
    try {
      read_bundle(dir.path());
      ++wrong;
      wrong_names += " byte-count";
    } catch (const ValidationError& e) {
      if (e.invariant() != "byte count mismatch") {
        ++wrong;
        wrong_names += " byte-count";
      }
    }
  }
  return {mismatches == 0 && wrong == 0,
          fmt("30 randomized bundles, %d not bitwise identical; %zu invariant classes + truncation, %d wrong or missing",
              mismatches, cases.size(), wrong) +
              wrong_names};
}

// --- head probe ------------------------------------------------------------------------

Outcome head_probe() {
  int exact = 0;
  std::string values;
  for (int set = 0; set < 3; ++set) {
    std::vector<FeatureBundle> bundles;
    std::vector<HeadDecomposition> decomps;
    std::vector<Translator> translators;
    for (int k = 0; k < 4; ++k) {
      PlantedConfig cfg;
      cfg.m = 16 + 8 * k;
      cfg.c = 4 + k;
      cfg.n = 8;
      cfg.per_class = 20;
      cfg.mean_ratio = 0.3 + 0.4 * k;
      cfg.leak_strength = 2.0 * set;
      cfg.seed = static_cast<std::uint64_t>(10 * set + k);
      bundles.push_back(generate_planted_bundle(cfg).bundle);
      decomps.push_back(decompose_head(bundles.back().head_weight.cast<double>()));
      Translator t;
      t.theta = Matrix::Identity(cfg.m, cfg.m);
      translators.push_back(t);
    }
    const auto corr = head_probe_correlation(bundles, decomps, translators, 1.0, static_cast<std::uint64_t>(set));
    if (corr.pearson == 1.0) ++exact;
    values += fmt(" %.17g", corr.pearson);
  }
  return {exact == 3, fmt("theta = I on 3 bundle sets of 4 models; pearson ==%s", values.c_str())};
}

}  // namespace

int main() {
  const std::vector<Criterion> criteria = {
      {"projector algebra", 30.0, projector_algebra},
      {"logit invariance", 60.0, logit_invariance},
      {"ridge oracle", 10.0, ridge_oracle},
      {"gradient check", 5.0, gradient_check},
      {"calibration", 10.0, calibration},
      {"metric identities", 0.0, metric_identities},
      {"planted leakage", 120.0, planted_leakage},
      {"bundle round trip", 0.0, bundle_round_trip},
      {"head probe", 0.0, head_probe},
  };
  int failed = 0;
  for (const auto& c : criteria) {
    const auto start = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    const bool in_time = c.time_limit_s <= 0.0 || secs < c.time_limit_s;
    const bool pass = o.pass && in_time;
    if (!pass) ++failed;
    std::string timing = fmt("%.2f s", secs);
    if (c.time_limit_s > 0.0) timing += fmt(" (<%.0f s)", c.time_limit_s);
    std::printf("%s  %-18s %s; %s\n", pass ? "PASS" : "FAIL", c.name.c_str(), o.detail.c_str(), timing.c_str());
    std::fflush(stdout);
  }
  std::printf("%d/%zu criteria passed\n", static_cast<int>(criteria.size()) - failed, criteria.size());
  return failed == 0 ? 0 : 1;
}
