#pragma once

#include <filesystem>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "chunkflow/data/shards.hpp"
#include "chunkflow/policy/train.hpp"

namespace chunkflow {

struct LossPoint {
  double N = 0.0;  // trainable parameters
  double D = 0.0;  // tokens consumed, never repeated
  double loss = 0.0;
};

/// loss = E + A / N^alpha + B / D^beta
struct ScalingParams {
  double E = 0.0;
  double A = 0.0;
  double alpha = 0.0;
  double B = 0.0;
  double beta = 0.0;

  static ScalingParams published() { return {2.1108, 4.3754e3, 0.4402, 1.7906e2, 0.2251}; }
};

double predict_loss(const ScalingParams& p, double N, double D);

struct FitOptions {
  std::vector<double> alpha_grid;  // empty: 8 log-spaced values in [0.05, 2]
  std::vector<double> beta_grid;
  double huber_delta = 1e-3;
  int max_iterations = 500;
};

struct ScalingFit {
  ScalingParams params;
  double objective = 0.0;           // sum of Huber losses of log residuals
  double rmse = 0.0;                // of log residuals
  std::vector<double> residuals;    // log predicted - log observed
  std::vector<double> trace;        // objective after each accepted step of the winning start
  bool converged = false;
  int iterations = 0;
  std::string loss_kind = "raw";    // or "smoothed", recorded from the input
};

/// Multi-start fit: for every (alpha, beta) grid pair, (E, A, B) start from a
/// non-negative least-squares solve, then damped Gauss-Newton on the Huber
/// objective refines all five. The lowest final objective wins. Throws
/// ContractError for fewer than 5 points or fewer than 2 distinct N.
ScalingFit fit_scaling_law(const std::vector<LossPoint>& points, const FitOptions& options = {});

std::vector<LossPoint> read_loss_points(const std::filesystem::path& path);
void write_loss_points(const std::vector<LossPoint>& points, const std::filesystem::path& path);

/// D needed to reach `loss` at size N; infinity when the N term alone is above it.
double tokens_for_loss(const ScalingParams& p, double N, double loss);
/// Parameters, residual RMSE and an iso-loss table over `sizes`.
std::string scaling_report(const ScalingFit& fit, const std::vector<double>& sizes, const std::vector<double>& levels);

/// One model size in a sweep: consumes a batch of unseen chunks, returns its loss.
struct SweepArm {
  std::string name;
  double parameters = 0.0;
  std::function<double(const std::vector<DemoChunk>& batch)> step;
};

struct SweepConfig {
  Index batch = 32;
  std::int64_t checkpoint_every = 8;  // steps
  Index tokens_per_sample = 32;
};

struct SweepCurve {
  std::string name;
  std::vector<LossPoint> points;
  std::vector<double> standard_errors;  // of each point's mean batch loss
};

using StreamFactory = std::function<std::unique_ptr<RecordStream>()>;

/// Trains every arm for exactly one pass over a fresh stream from `epoch`.
/// Each checkpoint reports the mean loss of the batches since the previous
/// one, at D = steps * batch * tokens_per_sample. A final partial batch is dropped.
std::vector<SweepCurve> sweep_protocol(std::vector<SweepArm>& arms, const StreamFactory& epoch, const SweepConfig& cfg);

/// A flow-policy arm trained with PolicyTrainer; N counts every parameter,
/// the condition encoder included.
SweepArm policy_sweep_arm(const std::string& name, const PolicyConfig& policy, const PolicyTrainConfig& train,
                          const NormStats& stats);

}  // namespace chunkflow
