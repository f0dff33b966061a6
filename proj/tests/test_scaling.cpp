#include <cmath>
#include <filesystem>

#include "chunkflow/core/errors.hpp"
#include "chunkflow/scaling/scaling.hpp"
#include "doctest.h"

using namespace chunkflow;

namespace {

// 5 sizes, one per decade, by 8 token counts spread over seven decades.
std::vector<LossPoint> synthetic_grid(const ScalingParams& p, double log_noise, Rng& rng) {
  std::vector<LossPoint> out;
  for (int i = 0; i < 5; ++i)
    for (int j = 0; j < 8; ++j) {
      const double N = 1e6 * std::pow(1e4, i / 4.0), D = 1e7 * std::pow(1e7, j / 7.0);
      out.push_back({N, D, predict_loss(p, N, D) * std::exp(log_noise * rng.normal())});
    }
  return out;
}

double rel(double got, double want) { return std::abs(got / want - 1.0); }

}  // namespace

TEST_CASE("predict_loss examples") {
  const ScalingParams p = ScalingParams::published();
  // 40-digit evaluation of the same expression.
  CHECK(predict_loss(p, 7e9, 1e10) == doctest::Approx(3.318276795846063901).epsilon(1e-14));
  CHECK(predict_loss(p, 1e300, 1e300) == doctest::Approx(p.E).epsilon(1e-12));
  const double a1 = predict_loss(p, 1e8, 1e300) - p.E, a2 = predict_loss(p, 2e8, 1e300) - p.E;
  CHECK(a2 / a1 == doctest::Approx(std::pow(2.0, -p.alpha)).epsilon(1e-10));
}

TEST_CASE("fit_scaling_law recovers noiseless parameters") {
  Rng rng(0);
  const ScalingParams truth = ScalingParams::published();
  const ScalingFit fit = fit_scaling_law(synthetic_grid(truth, 0.0, rng));
  CHECK(rel(fit.params.E, truth.E) < 1e-3);
  CHECK(rel(fit.params.A, truth.A) < 1e-3);
  CHECK(rel(fit.params.alpha, truth.alpha) < 1e-3);
  CHECK(rel(fit.params.B, truth.B) < 1e-3);
  CHECK(rel(fit.params.beta, truth.beta) < 1e-3);
  CHECK(fit.rmse < 1e-9);
  CHECK(fit.residuals.size() == 40);
  for (std::size_t i = 1; i < fit.trace.size(); ++i) CHECK(fit.trace[i] < fit.trace[i - 1]);
}

TEST_CASE("fit_scaling_law with one percent log noise") {
  const ScalingParams truth = ScalingParams::published();
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(seed);
    const ScalingFit fit = fit_scaling_law(synthetic_grid(truth, 0.01, rng));
    CHECK(rel(fit.params.alpha, truth.alpha) < 0.05);
    CHECK(rel(fit.params.beta, truth.beta) < 0.05);
    for (std::size_t i = 1; i < fit.trace.size(); ++i) CHECK(fit.trace[i] <= fit.trace[i - 1]);
  }
}

TEST_CASE("fit_scaling_law without a data term") {
  Rng rng(1);
  ScalingParams truth = ScalingParams::published();
  truth.B = 0.0;
  const std::vector<LossPoint> pts = synthetic_grid(truth, 0.0, rng);
  const ScalingFit fit = fit_scaling_law(pts);
  double lo = pts[0].loss, hi = pts[0].loss, term = 0.0;
  for (const LossPoint& p : pts) {
    lo = std::min(lo, p.loss), hi = std::max(hi, p.loss);
    term = std::max(term, fit.params.B * std::pow(p.D, -fit.params.beta));
  }
  CHECK(term < 0.01 * (hi - lo));
  CHECK(rel(fit.params.alpha, truth.alpha) < 0.02);
}

TEST_CASE("scaling the losses scales E, A and B only") {
  Rng rng(2);
  std::vector<LossPoint> pts = synthetic_grid(ScalingParams::published(), 0.0, rng);
  const ScalingFit base = fit_scaling_law(pts);
  for (LossPoint& p : pts) p.loss *= 3.0;
  const ScalingFit scaled = fit_scaling_law(pts);
  CHECK(rel(scaled.params.E, 3.0 * base.params.E) < 1e-3);
  CHECK(rel(scaled.params.A, 3.0 * base.params.A) < 1e-3);
  CHECK(rel(scaled.params.B, 3.0 * base.params.B) < 1e-3);
  CHECK(rel(scaled.params.alpha, base.params.alpha) < 1e-3);
  CHECK(rel(scaled.params.beta, base.params.beta) < 1e-3);
}

TEST_CASE("fit_scaling_law input errors") {
  std::vector<LossPoint> few{{1e6, 1e7, 3.0}, {1e7, 1e7, 2.9}, {1e8, 1e7, 2.8}, {1e6, 1e8, 2.7}};
  CHECK_THROWS_AS(fit_scaling_law(few), ContractError);
  std::vector<LossPoint> one_size;
  for (int j = 0; j < 6; ++j) one_size.push_back({1e6, std::pow(10.0, 7 + j), 3.0 - 0.1 * j});
  CHECK_THROWS_AS(fit_scaling_law(one_size), ContractError);
  one_size.push_back({1e7, 1e7, std::nan("")});
  CHECK_THROWS_AS(fit_scaling_law(one_size), ContractError);
}

TEST_CASE("iso-loss table and CSV") {
  const ScalingParams p = ScalingParams::published();
  const double D = tokens_for_loss(p, 1e9, 3.0);
  CHECK(predict_loss(p, 1e9, D) == doctest::Approx(3.0).epsilon(1e-12));
  CHECK(std::isinf(tokens_for_loss(p, 1e3, 2.2)));

  ScalingFit fit;
  fit.params = p;
  const std::string report = scaling_report(fit, {1e8, 1e9}, {3.0, 3.5});
  CHECK(report.find("alpha = 0.4402") != std::string::npos);
  CHECK(report.find("L=3.5") != std::string::npos);

  Rng rng(4);
  const auto pts = synthetic_grid(p, 0.01, rng);
  const auto path = std::filesystem::temp_directory_path() / "chunkflow_scaling_test.csv";
  write_loss_points(pts, path);
  const auto back = read_loss_points(path);
  std::filesystem::remove(path);
  REQUIRE(back.size() == pts.size());
  for (std::size_t i = 0; i < pts.size(); ++i) {
    CHECK(back[i].N == pts[i].N);
    CHECK(back[i].D == pts[i].D);
    CHECK(back[i].loss == pts[i].loss);
  }
}

TEST_CASE("sweep_protocol bookkeeping") {
  TaskSpec spec = TaskSpec::default_task();
  spec.d = 7;
  spec.chunk_size = 8;
  spec.context_dim = 5;
  const Dataset data = generate_dataset(spec, 70);
  std::vector<SampleRecord> records;
  for (std::size_t i = 0; i < data.chunks.size(); ++i) records.push_back(chunk_to_record(data.chunks[i], "s" + std::to_string(i)));
  const auto dir = std::filesystem::temp_directory_path() / "chunkflow_sweep_test";
  std::filesystem::remove_all(dir);
  write_shards(records, 16, dir);
  const StreamFactory epoch = [&] { return std::make_unique<EpochStream>(list_shards(dir), 3); };

  SweepConfig sc;
  sc.batch = 4;
  sc.checkpoint_every = 3;
  sc.tokens_per_sample = 8;
  int seen = 0;
  std::vector<SweepArm> arms{{"count", 10.0, [&](const std::vector<DemoChunk>& b) {
                                seen += int(b.size());
                                return double(seen);
                              }}};
  const auto curves = sweep_protocol(arms, epoch, sc);
  CHECK(seen == 68);  // 17 full batches; the last 2 records are dropped
  REQUIRE(curves[0].points.size() == 5);
  for (std::size_t k = 0; k < 5; ++k) {
    CHECK(curves[0].points[k].D == double((k + 1) * 3 * 4 * 8));
    CHECK(curves[0].points[k].N == 10.0);
  }
  CHECK(curves[0].points[0].loss == doctest::Approx((4.0 + 8.0 + 12.0) / 3.0));

  PolicyConfig pc;
  pc.layers = 1;
  pc.hidden = 16;
  pc.q_heads = 4;
  pc.kv_heads = 2;
  pc.chunk_size = 8;
  pc.action_dim = 7;
  pc.context_dim = 5;
  PolicyTrainConfig tc;
  tc.seed = 5;
  std::vector<SweepArm> a1{policy_sweep_arm("h16", pc, tc, data.stats)}, a2{policy_sweep_arm("h16", pc, tc, data.stats)};
  const auto c1 = sweep_protocol(a1, epoch, sc), c2 = sweep_protocol(a2, epoch, sc);
  std::filesystem::remove_all(dir);
  REQUIRE(c1[0].points.size() == c2[0].points.size());
  for (std::size_t k = 0; k < c1[0].points.size(); ++k) CHECK(c1[0].points[k].loss == c2[0].points[k].loss);
  Rng rng(5);
  CHECK(a1[0].parameters == double(count_parameters(FlowPolicy(pc, rng).parameters())));
}
