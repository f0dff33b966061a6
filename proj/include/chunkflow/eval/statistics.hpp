#pragma once

#include <cstdint>
#include <span>
#include <vector>

namespace chunkflow {

/// Hartigan's dip statistic of a sample (sorted internally).
double dip_statistic(std::span<const double> sample);

/// Upper `1 - alpha` quantile of the dip statistic under Uniform(0, 1)
/// samples of size n, by simulation.
double dip_critical_value(std::size_t n, double alpha = 0.05, int replicates = 200, std::uint64_t seed = 7);

struct SuccessEstimate {
  double p_hat = 0.0;
  double standard_error = 0.0;
  std::size_t trials = 0;
};

struct SuccessCurve {
  SuccessEstimate final;
  std::vector<SuccessEstimate> running;  // after k = 1..n trials
};

/// p = mean of outcomes, SE = sqrt(p (1 - p) / n), plus the running curve.
SuccessCurve success_rate_with_se(std::span<const int> outcomes);
SuccessEstimate success_estimate(std::size_t successes, std::size_t trials);

/// Bernoulli(p_star) streams of length n: fraction of all (replication, k)
/// pairs where the stream's final estimate lies in p_k +- z SE_k.
double running_band_coverage(double p_star, std::size_t n, int replications, double z = 2.0, std::uint64_t seed = 0);

/// 1 where error <= threshold.
std::vector<int> trials_from_errors(std::span<const double> errors, double threshold);

}  // namespace chunkflow
