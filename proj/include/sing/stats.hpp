#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include <json.hpp>

namespace sing {

/// Population (1/N) moments and linearly interpolated quantiles
/// (Hyndman-Fan type 7).
struct SummaryStats {
  std::size_t count = 0;
  double mean = 0.0;
  double std = 0.0;
  double min = 0.0;
  double max = 0.0;
  double median = 0.0;
  double q05 = 0.0;
  double q95 = 0.0;
};

/// Throws ValidationError on empty input.
SummaryStats summarize(std::span<const double> values);

/// `sorted` must be nondecreasing and nonempty; p in [0, 1].
double quantile_sorted(std::span<const double> sorted, double p);

double mean(std::span<const double> values);
double population_variance(std::span<const double> values);

/// Pearson correlation. Identical inputs give exactly 1; zero variance in
/// either input otherwise throws NumericalError.
double pearson(std::span<const double> x, std::span<const double> y);

/// Ranks with ties sharing their average rank (1-based).
std::vector<double> average_ranks(std::span<const double> values);

/// Spearman rank correlation: Pearson over average ranks.
double spearman(std::span<const double> x, std::span<const double> y);

nlohmann::json to_json(const SummaryStats& stats);

}  // namespace sing
