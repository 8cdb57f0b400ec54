#include "sing/cli.hpp"

#include <charconv>
#include <filesystem>
#include <fstream>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "sing/analysis.hpp"
#include "sing/bundle.hpp"
#include "sing/error.hpp"
#include "sing/format.hpp"
#include "sing/head_decomposition.hpp"
#include "sing/metrics.hpp"
#include "sing/perturbation.hpp"
#include "sing/translator.hpp"

namespace sing {

namespace {

namespace fs = std::filesystem;

constexpr const char* kDefaultPromptTemplate = "an image of a {class}";

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) {
    std::error_code ec;
    fs::create_directories(path.parent_path(), ec);
    if (ec) throw IoError("cannot create directory " + path.parent_path().string() + ": " + ec.message());
  }
  std::ofstream file(path, std::ios::binary);
  if (!file) throw IoError("cannot open " + path.string() + " for writing");
  file << text;
  if (!file) throw IoError("failed writing " + path.string());
}

Eigen::Index parse_index(const std::string& text, const char* what) {
  Eigen::Index value = 0;
  const auto* end = text.data() + text.size();
  const auto [ptr, ec] = std::from_chars(text.data(), end, value);
  if (ec != std::errc() || ptr != end || value < 0)
    throw ValidationError("bad argument", std::string(what) + " '" + text + "' is not a nonnegative integer");
  return value;
}

std::string render_prompt(const std::string& tmpl, const std::string& class_name) {
  std::string out = tmpl;
  const std::string key = "{class}";
  for (auto pos = out.find(key); pos != std::string::npos; pos = out.find(key, pos + class_name.size()))
    out.replace(pos, key.size(), class_name);
  return out;
}

PromptSelector parse_prompt_selector(const std::string& text) {
  if (text == "true-class") return PromptSelector::true_class();
  if (text == "all") return PromptSelector::all();
  if (text == "image-only") return PromptSelector::image_only();
  return PromptSelector::single(parse_index(text, "prompt id"));
}

CalibrationGranularity parse_granularity(const std::string& text) {
  if (text == "per-sample") return CalibrationGranularity::per_sample;
  if (text == "model-median") return CalibrationGranularity::model_median;
  throw ValidationError("unknown granularity", text);
}

std::string format_check(const std::string& format) {
  if (format != "csv" && format != "json") throw ValidationError("unknown format", format);
  return format;
}

// --- decompose ------------------------------------------------------------------

struct DecomposeArgs {
  std::string bundle;
  std::string mode = "machine";
  double tol = 0.0;
  std::string out;
};

int cmd_decompose(const DecomposeArgs& a, std::ostream& out) {
  const FeatureBundle bundle = read_bundle(a.bundle);
  const auto mode = parse_rank_mode(a.mode);
  RankTolerance tol{mode, a.tol};
  if (mode != RankTolerance::Mode::machine && !(a.tol >= 0.0))
    throw ValidationError("bad argument", "--rank-tol must be nonnegative");
  const Matrix w = bundle.head_weight.cast<double>();
  const HeadDecomposition d = decompose_head(w, tol);
  save_decomposition(d, a.out);
  const DecompositionCheck check = check_decomposition(d, w);
  out << "rank=" << d.rank << " null_dim=" << d.null_dim() << " null_leak_fro=" << format_double(check.null_leak)
      << " weight_fro=" << format_double(check.weight_norm) << " tau=" << format_double(d.rank_tolerance) << '\n';
  return kExitOk;
}

// --- fit-translator ---------------------------------------------------------------

struct FitArgs {
  std::string bundle;
  std::optional<double> lambda;
  std::vector<double> sweep;
  bool no_pinv = false;
  std::string out;
};

int cmd_fit(const FitArgs& a, std::ostream& out) {
  const FeatureBundle bundle = read_bundle(a.bundle);
  const Matrix f = bundle.features.cast<double>();
  const Matrix z = bundle.clip_image.cast<double>();
  FitOptions opts;
  opts.allow_pseudoinverse = !a.no_pinv;

  for (double lambda : a.sweep) {
    const Translator t = fit_translator(f, z, lambda, opts);
    out << "sweep lambda=" << format_double(lambda) << " mse=" << format_double(t.fit_report.train_mse)
        << " theta_fro=" << format_double(t.theta.norm()) << '\n';
  }

  const double lambda = a.lambda.value_or(default_ridge_lambda(bundle.sample_count()));
  const Translator t = fit_translator(f, z, lambda, opts);
  save_translator(t, a.out);
  out << "lambda=" << format_double(lambda) << " mse=" << format_double(t.fit_report.train_mse)
      << " mean_cosine=" << format_double(t.fit_report.train_mean_cosine) << " theta_fro=" << format_double(t.theta.norm())
      << " n_samples=" << t.fit_report.n_samples << '\n';
  return kExitOk;
}

// --- metrics ------------------------------------------------------------------------

struct MetricsArgs {
  std::string bundle;
  std::string decomp;
  std::string translator;
  std::string prompts = "true-class";
  std::string out;
  std::string format = "csv";
  std::string summary;
  double confidence = kDefaultEllipseLevel;
  std::optional<std::size_t> max_samples;
  std::string sampling = "balanced";
  std::uint64_t seed = 0;
};

int cmd_metrics(const MetricsArgs& a, std::ostream& out, std::ostream& err) {
  format_check(a.format);
  const auto selector = parse_prompt_selector(a.prompts);
  const auto scheme = parse_sampling_scheme(a.sampling);
  FeatureBundle bundle = read_bundle(a.bundle);
  const HeadDecomposition d = load_decomposition(a.decomp);
  const Translator t = load_translator(a.translator);

  std::vector<Eigen::Index> rows;
  if (a.max_samples) {
    rows = sample_indices(bundle.labels, bundle.class_count(), *a.max_samples, scheme, a.seed);
    bundle = subset_bundle(bundle, rows);
  }

  BatchMetrics m = batch_metrics(bundle, d, t, selector);
  if (!rows.empty()) {
    for (auto& r : m.records) r.sample_id = rows[static_cast<std::size_t>(r.sample_id)];
    for (auto& s : m.skipped) s.sample_id = rows[static_cast<std::size_t>(s.sample_id)];
  }
  for (const auto& s : m.skipped) err << "skipped sample " << s.sample_id << ": " << s.reason << '\n';

  if (a.format == "csv") {
    write_text(a.out, metric_records_csv(m.records));
  } else {
    nlohmann::json skipped = nlohmann::json::array();
    for (const auto& s : m.skipped) skipped.push_back({{"sample_id", s.sample_id}, {"reason", s.reason}});
    const nlohmann::json doc = {{"model_name", bundle.model_name},
                                {"records", metric_records_json(m.records)},
                                {"skipped", skipped}};
    write_text(a.out, doc.dump(2) + "\n");
  }

  if (!a.summary.empty()) {
    if (m.records.empty()) throw NumericalError("no sample could be scored; summary undefined");
    const ModelSummary model = summarize_model(m.records, bundle.model_name, a.confidence);
    const auto classes = summarize_classes(m.records, bundle.class_names);
    nlohmann::json flagged = nlohmann::json::array();
    for (const auto& c : classes)
      if (c.flagged) flagged.push_back(c.class_id);
    const nlohmann::json doc = {{"model", to_json(model)}, {"classes", to_json(classes)}, {"flagged_classes", flagged}};
    write_text(a.summary, doc.dump(2) + "\n");
  }
  out << "records=" << m.records.size() << " skipped=" << m.skipped.size() << '\n';
  return kExitOk;
}

// --- steer ------------------------------------------------------------------------

struct SteerArgs {
  std::string bundle;
  std::string decomp;
  std::string translator;
  std::string mode = "null-removal";
  std::optional<std::string> prompt;
  std::optional<double> target_is;
  std::optional<double> epsilon;
  std::uint64_t seed = 0;
  std::string out;
  std::string format = "csv";
  std::string granularity = "per-sample";
  std::string principal = "top-singular";
  std::vector<std::string> as_prompts;
  std::vector<std::string> samples;
  double tolerance = 0.1;
  int max_iter = 60;
  std::string export_dir;
};

int cmd_steer(const SteerArgs& a, std::ostream& out, std::ostream& err) {
  format_check(a.format);
  SteeringSpec spec;
  spec.mode = parse_steering_mode(a.mode);
  spec.epsilon = a.epsilon;
  spec.target_is_deg = a.target_is;
  spec.seed = a.seed;
  spec.principal_direction = parse_principal_direction(a.principal);
  spec.calibration.tolerance_deg = a.tolerance;
  spec.calibration.max_iter = a.max_iter;
  const auto granularity = parse_granularity(a.granularity);

  std::optional<Eigen::Index> text_prompt;
  if (a.prompt) text_prompt = parse_index(*a.prompt, "prompt id");
  std::vector<Eigen::Index> as_prompts;
  for (const auto& p : a.as_prompts) as_prompts.push_back(parse_index(p, "prompt id"));
  if (as_prompts.empty() && text_prompt) as_prompts.push_back(*text_prompt);
  std::vector<Eigen::Index> samples;
  for (const auto& s : a.samples) samples.push_back(parse_index(s, "sample id"));

  const FeatureBundle bundle = read_bundle(a.bundle);
  const HeadDecomposition d = load_decomposition(a.decomp);
  const Translator t = load_translator(a.translator);

  const SteeringBatch batch = steer_batch(bundle, d, t, spec, text_prompt, as_prompts, samples, granularity);
  for (const auto& [id, reason] : batch.skipped) err << "skipped sample " << id << ": " << reason << '\n';

  if (a.format == "csv") write_text(a.out, steering_csv(batch));
  else write_text(a.out, steering_json(batch).dump(2) + "\n");
  if (!a.export_dir.empty()) export_rescaled_embeddings(batch, t, a.export_dir);

  out << "rows=" << batch.rows.size() << " skipped=" << batch.skipped.size();
  if (batch.shared_epsilon) out << " shared_epsilon=" << format_double(*batch.shared_epsilon);
  out << '\n';
  return kExitOk;
}

// --- validate -----------------------------------------------------------------------

struct ValidateArgs {
  std::string bundle;
  std::string decomp;
  int n_trials = 1000;
  std::uint64_t seed = 0;
  std::string principal = "top-singular";
  std::string out;
};

int cmd_validate(const ValidateArgs& a, std::ostream& out) {
  if (a.n_trials < 1) throw ValidationError("bad argument", "--n-trials must be positive");
  const auto principal = parse_principal_direction(a.principal);
  const FeatureBundle bundle = read_bundle(a.bundle);
  const HeadDecomposition d = load_decomposition(a.decomp);
  const NullSpaceValidation v =
      validate_null_space(bundle.features.cast<double>(), Head::from_bundle(bundle), d, a.n_trials, a.seed, principal);
  write_text(a.out, to_json(v).dump(2) + "\n");
  out << "null_drift_max=" << format_double(v.null_stats.max) << " random_drift_mean=" << format_double(v.random_stats.mean)
      << " principal_drift_mean=" << format_double(v.principal_stats.mean)
      << " fraction_random_exceeds_null=" << format_double(v.fraction_random_exceeds_null) << '\n';
  return kExitOk;
}

// --- synth ----------------------------------------------------------------------------

struct SynthArgs {
  PlantedConfig config;
  std::string prompt_template = kDefaultPromptTemplate;
  std::string out;
};

int cmd_synth(const SynthArgs& a, std::ostream& out) {
  PlantedBundle planted = generate_planted_bundle(a.config);
  auto& b = planted.bundle;
  for (std::size_t k = 0; k < b.class_names.size(); ++k) b.prompts[k] = render_prompt(a.prompt_template, b.class_names[k]);
  write_bundle(b, a.out);
  write_text(fs::path(a.out) / "ground_truth.json", to_json(planted.truth).dump(2) + "\n");
  out << "samples=" << b.sample_count() << " m=" << b.feature_dim() << " c=" << b.class_count()
      << " n=" << b.embedding_dim() << " leaky_classes=" << planted.truth.leak_classes.size() << '\n';
  return kExitOk;
}

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Null-space analysis of linear classifier heads"};
  app.require_subcommand(1);

  DecomposeArgs dec;
  auto* c_dec = app.add_subcommand("decompose", "SVD of the head into principal and null subspaces");
  c_dec->add_option("bundle", dec.bundle, "bundle directory")->required()->check(CLI::ExistingDirectory);
  c_dec->add_option("--rank-tol-mode", dec.mode, "machine | relative | absolute")->capture_default_str();
  c_dec->add_option("--rank-tol", dec.tol, "rho (relative) or tau (absolute)");
  c_dec->add_option("--out", dec.out, "output directory")->required();

  FitArgs fit;
  auto* c_fit = app.add_subcommand("fit-translator", "ridge map from features to image embeddings");
  c_fit->add_option("bundle", fit.bundle, "bundle directory")->required()->check(CLI::ExistingDirectory);
  c_fit->add_option("--lambda", fit.lambda, "ridge coefficient (default 0.1 N)")->check(CLI::NonNegativeNumber);
  c_fit->add_option("--lambda-sweep", fit.sweep, "extra lambdas to report")->delimiter(',')->check(CLI::NonNegativeNumber);
  c_fit->add_flag("--no-pinv", fit.no_pinv, "fail instead of using a pseudoinverse at lambda 0");
  c_fit->add_option("--out", fit.out, "output directory")->required();

  MetricsArgs met;
  auto* c_met = app.add_subcommand("metrics", "attribute and image scores of null-removed pairs");
  c_met->add_option("bundle", met.bundle, "bundle directory")->required()->check(CLI::ExistingDirectory);
  c_met->add_option("decomposition", met.decomp, "decomposition directory")->required()->check(CLI::ExistingDirectory);
  c_met->add_option("translator", met.translator, "translator directory")->required()->check(CLI::ExistingDirectory);
  c_met->add_option("--prompts", met.prompts, "true-class | all | image-only | <prompt id>")->capture_default_str();
  c_met->add_option("--out", met.out, "report file")->required();
  c_met->add_option("--format", met.format, "csv | json")->capture_default_str();
  c_met->add_option("--summary", met.summary, "model and per-class summary JSON");
  c_met->add_option("--confidence", met.confidence, "ellipse confidence level")->capture_default_str();
  c_met->add_option("--max-samples", met.max_samples, "score a subset of this size");
  c_met->add_option("--sampling", met.sampling, "balanced | uniform")->capture_default_str();
  c_met->add_option("--seed", met.seed, "subset seed")->capture_default_str();

  SteerArgs st;
  auto* c_st = app.add_subcommand("steer", "perturb features and report logit drift and scores");
  c_st->add_option("bundle", st.bundle, "bundle directory")->required()->check(CLI::ExistingDirectory);
  c_st->add_option("decomposition", st.decomp, "decomposition directory")->required()->check(CLI::ExistingDirectory);
  c_st->add_option("translator", st.translator, "translator directory")->required()->check(CLI::ExistingDirectory);
  c_st->add_option("--mode", st.mode, "null-removal | text-gradient | random | principal")->capture_default_str();
  c_st->add_option("--prompt", st.prompt, "target prompt id for text-gradient");
  auto* o_target = c_st->add_option("--target-is", st.target_is, "calibrate each step to this IS (degrees)");
  auto* o_eps = c_st->add_option("--epsilon", st.epsilon, "fixed step length")->check(CLI::NonNegativeNumber);
  o_target->excludes(o_eps);
  c_st->add_option("--seed", st.seed, "random-mode seed")->capture_default_str();
  c_st->add_option("--out", st.out, "report file")->required();
  c_st->add_option("--format", st.format, "csv | json")->capture_default_str();
  c_st->add_option("--granularity", st.granularity, "per-sample | model-median")->capture_default_str();
  c_st->add_option("--principal-direction", st.principal, "top-singular | class-row")->capture_default_str();
  c_st->add_option("--as-prompts", st.as_prompts, "prompt ids to report AS against")->delimiter(',');
  c_st->add_option("--samples", st.samples, "sample ids (default all)")->delimiter(',');
  c_st->add_option("--tolerance", st.tolerance, "calibration tolerance (degrees)")->capture_default_str();
  c_st->add_option("--max-iter", st.max_iter, "bisection step limit")->capture_default_str();
  c_st->add_option("--export-rescaled", st.export_dir, "directory for norm-matched embeddings");

  ValidateArgs val;
  auto* c_val = app.add_subcommand("validate", "logit drift of null, random and principal perturbations");
  c_val->add_option("bundle", val.bundle, "bundle directory")->required()->check(CLI::ExistingDirectory);
  c_val->add_option("decomposition", val.decomp, "decomposition directory")->required()->check(CLI::ExistingDirectory);
  c_val->add_option("--n-trials", val.n_trials, "number of trials")->capture_default_str();
  c_val->add_option("--seed", val.seed, "trial seed")->capture_default_str();
  c_val->add_option("--principal-direction", val.principal, "top-singular | class-row")->capture_default_str();
  c_val->add_option("--out", val.out, "report JSON")->required();

  SynthArgs syn;
  auto* c_syn = app.add_subcommand("synth", "write a planted-leakage bundle");
  c_syn->add_option("--m", syn.config.m, "feature dimension")->capture_default_str();
  c_syn->add_option("--c", syn.config.c, "classes")->capture_default_str();
  c_syn->add_option("--n", syn.config.n, "embedding dimension")->capture_default_str();
  c_syn->add_option("--per-class", syn.config.per_class, "samples per class")->capture_default_str();
  c_syn->add_option("--leak", syn.config.leak_strength, "leak length in noise-norm units")->capture_default_str();
  c_syn->add_option("--mean-ratio", syn.config.mean_ratio, "class-mean length in noise-norm units")->capture_default_str();
  c_syn->add_option("--seed", syn.config.seed, "generator seed")->capture_default_str();
  c_syn->add_option("--prompt-template", syn.prompt_template, "prompt text; {class} is replaced")->capture_default_str();
  c_syn->add_option("--out", syn.out, "bundle directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (c_dec->parsed()) return cmd_decompose(dec, out);
    if (c_fit->parsed()) return cmd_fit(fit, out);
    if (c_met->parsed()) return cmd_metrics(met, out, err);
    if (c_st->parsed()) return cmd_steer(st, out, err);
    if (c_val->parsed()) return cmd_validate(val, out);
    if (c_syn->parsed()) return cmd_synth(syn, out);
  } catch (const NumericalError& e) {
    err << "numerical error: " << e.what() << '\n';
    return kExitNumerical;
  } catch (const ValidationError& e) {
    err << "invalid input: " << e.what() << '\n';
    return kExitUsage;
  } catch (const IoError& e) {
    err << "i/o error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const Error& e) {
    err << "error: " << e.what() << '\n';
    return kExitUsage;
  }
  return kExitUsage;
}

}  // namespace sing
