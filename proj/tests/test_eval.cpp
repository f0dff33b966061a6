#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <sstream>

#include "chunkflow/core/errors.hpp"
#include "chunkflow/core/rng.hpp"
#include "chunkflow/eval/figures.hpp"
#include "chunkflow/eval/metrics.hpp"
#include "chunkflow/eval/statistics.hpp"
#include "doctest.h"

using namespace chunkflow;
namespace fs = std::filesystem;

namespace {

Mat3<double> random_rotation(Rng& rng) {
  Vec3<double> axis(rng.normal(), rng.normal(), rng.normal());
  return rotation_from_axis_angle<double>(axis.normalized(), rng.uniform(0.0, std::numbers::pi));
}

Tensor random_chunk(const ActionLayout& layout, Index T, Rng& rng) {
  Tensor c({T, layout.d});
  for (Index i = 0; i < c.numel(); ++i) c[i] = rng.uniform(-0.5, 0.5);
  for (Index t = 0; t < T; ++t)
    for (Index a = 0; a < layout.arm_count(); ++a) layout.set_rotation(c, t, a, random_rotation(rng));
  return c;
}

double flat_mse(const Tensor& a, const Tensor& b, const std::vector<Index>& cols) {
  const Index d = a.dim(1);
  double s = 0.0;
  for (Index t = 0; t < a.dim(0); ++t)
    for (Index c : cols) s += (a[t * d + c] - b[t * d + c]) * (a[t * d + c] - b[t * d + c]);
  return s / double(a.dim(0) * Index(cols.size()));
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::ostringstream s;
  s << f.rdbuf();
  return s.str();
}

}  // namespace

TEST_CASE("rotation_geodesic examples") {
  const Mat3<double> I = Mat3<double>::Identity();
  CHECK(rotation_geodesic(I, I) == 0.0);
  const Mat3<double> rz = rotation_from_axis_angle<double>(Vec3<double>(0, 0, 1), std::numbers::pi / 2);
  CHECK(rotation_geodesic(I, rz) == doctest::Approx(std::numbers::pi / 2).epsilon(1e-14));

  Rng rng(11);
  for (int i = 0; i < 100; ++i) {
    const Mat3<double> a = random_rotation(rng), b = random_rotation(rng);
    CHECK(std::abs(rotation_geodesic(a, b) - rotation_geodesic(b, a)) <= 1e-12);
  }
  Mat3<double> skewed = I;
  skewed(0, 1) = 1e-3;
  CHECK_THROWS_AS(rotation_geodesic(I, skewed), ContractError);
}

TEST_CASE("chunk_metrics examples") {
  Rng rng(12);
  for (Index d : {7, 14, 20}) {
    const ActionLayout layout = ActionLayout::for_dimension(d);
    const Tensor gt = random_chunk(layout, 8, rng);

    const EvalReport zero = chunk_metrics(gt, gt, layout);
    CHECK(zero.action_mse == 0.0);
    CHECK(zero.position_mse == 0.0);
    CHECK(zero.rotation_geodesic_rad == 0.0);
    CHECK(zero.gripper_mse == 0.0);

    Tensor shifted = gt;
    for (Index t = 0; t < 8; ++t)
      for (const ArmSlice& s : layout.arms)
        for (Index k = 0; k < 3; ++k) shifted[t * d + s.position + k] += 0.1;
    const EvalReport pos = chunk_metrics(shifted, gt, layout);
    CHECK(pos.position_mse == doctest::Approx(0.01).epsilon(1e-12));
    CHECK(pos.rotation_geodesic_rad == 0.0);
    CHECK(pos.gripper_mse == 0.0);

    // Slice metrics recombine into the flat MSE over all columns.
    const Tensor pred = random_chunk(layout, 8, rng);
    const EvalReport r = chunk_metrics(pred, gt, layout);
    std::vector<Index> all, p, rot, g;
    for (Index c = 0; c < d; ++c) all.push_back(c);
    for (const ArmSlice& s : layout.arms) {
      for (Index k = 0; k < 3; ++k) p.push_back(s.position + k);
      for (Index k = 0; k < layout.rotation_width(); ++k) rot.push_back(s.rotation + k);
      g.push_back(s.gripper);
    }
    CHECK(r.action_mse == doctest::Approx(flat_mse(pred, gt, all)).epsilon(1e-12));
    CHECK(r.position_mse == doctest::Approx(flat_mse(pred, gt, p)).epsilon(1e-12));
    CHECK(r.gripper_mse == doctest::Approx(flat_mse(pred, gt, g)).epsilon(1e-12));
    const double recombined = (double(p.size()) * r.position_mse + double(rot.size()) * r.rotation_param_mse +
                               double(g.size()) * r.gripper_mse) /
                              double(d);
    CHECK(r.action_mse == doctest::Approx(recombined).epsilon(1e-12));
  }
  CHECK_THROWS_AS(chunk_metrics(Tensor({4, 14}), Tensor({4, 14}), ActionLayout::for_dimension(7)), DimensionError);
}

TEST_CASE("batch metrics are permutation invariant") {
  Rng rng(13);
  const ActionLayout layout = ActionLayout::for_dimension(14);
  std::vector<Tensor> pred, gt;
  for (int i = 0; i < 12; ++i) pred.push_back(random_chunk(layout, 4, rng)), gt.push_back(random_chunk(layout, 4, rng));
  const EvalReport a = batch_metrics(pred, gt, layout);
  std::vector<std::size_t> perm{3, 7, 0, 11, 5, 1, 9, 2, 10, 4, 8, 6};
  std::vector<Tensor> pp, gp;
  for (std::size_t i : perm) pp.push_back(pred[i]), gp.push_back(gt[i]);
  const EvalReport b = batch_metrics(pp, gp, layout);
  CHECK(a.samples == 12);
  CHECK(b.action_mse == doctest::Approx(a.action_mse).epsilon(1e-14));
  CHECK(b.position_mse == doctest::Approx(a.position_mse).epsilon(1e-14));
  CHECK(b.rotation_geodesic_rad == doctest::Approx(a.rotation_geodesic_rad).epsilon(1e-14));
  CHECK(b.gripper_mse == doctest::Approx(a.gripper_mse).epsilon(1e-14));
}

TEST_CASE("success_rate_with_se examples") {
  const std::vector<int> wins(40, 1);
  const SuccessCurve all = success_rate_with_se(wins);
  CHECK(all.final.p_hat == 1.0);
  CHECK(all.final.standard_error == 0.0);

  CHECK(success_estimate(128, 256).standard_error == 0.03125);
  for (std::size_t n : {1, 7, 256})
    for (std::size_t k = 0; k <= n; ++k)
      CHECK(success_estimate(k, n).standard_error == success_estimate(n - k, n).standard_error);

  Rng rng(14);
  std::vector<int> outcomes;
  for (int i = 0; i < 500; ++i) outcomes.push_back(rng.uniform() < 0.7);
  const SuccessCurve c = success_rate_with_se(outcomes);
  REQUIRE(c.running.size() == 500);
  for (std::size_t k = 1; k < c.running.size(); ++k)
    CHECK(std::abs(c.running[k].p_hat - c.running[k - 1].p_hat) <= 1.0 / double(k + 1) + 1e-15);

  CHECK_THROWS_AS(success_rate_with_se(std::vector<int>{}), ContractError);
  CHECK_THROWS_AS(success_rate_with_se(std::vector<int>{0, 2}), ContractError);
  const std::vector<double> errs{0.1, 0.5, 0.2};
  CHECK(trials_from_errors(errs, 0.2) == std::vector<int>{1, 0, 1});
}

TEST_CASE("running band covers the final estimate") {
  CHECK(running_band_coverage(0.5, 256, 1000) >= 0.95);
  CHECK(running_band_coverage(0.5, 256, 50, 2.0, 3) == running_band_coverage(0.5, 256, 50, 2.0, 3));
  CHECK(running_band_coverage(1.0, 16, 5) == 1.0);
}

TEST_CASE("emit_figures") {
  const fs::path dir = fs::temp_directory_path() / "chunkflow_figures_test";
  fs::remove_all(dir);
  fs::create_directories(dir);

  try {
    emit_figures(dir);
    FAIL("expected MissingArtifactError");
  } catch (const MissingArtifactError& e) {
    CHECK(e.missing() == std::vector<std::string>{"pareto.csv", "ablation.csv", "latency.csv", "scaling_points.csv", "trials.csv"});
    CHECK(std::string(e.what()).find("scaling_points.csv") != std::string::npos);
  }
  CHECK_THROWS_AS(emit_figures(dir, {"no_such_figure"}), ConfigError);

  std::ofstream(dir / "pareto.csv") << "tokenizer,budget,tokens_per_chunk,pos_mse,rot_geodesic_rad,grip_mse\n"
                                       "rvq,depth1,8,1e-3,0.1,1e-4\nrvq,depth2,16,5e-4,0.05,5e-5\n"
                                       "binning,b16,448,2e-4,0.02,1e-5\ndct_bpe,k2_s4,30.5,8e-4,0.07,2e-5\n";
  std::ofstream(dir / "ablation.csv") << "arm,step,loss,smoothed_loss\nhybrid,1,5,5\nhybrid,2,4,4.5\nscratch,1,6,6\nscratch,2,5,5.5\n";
  std::ofstream(dir / "latency.csv") << "variant,passes_per_chunk,median_ms,chunks_per_s\nar_token_head,32,40,25\n"
                                        "flow_s5,5,10,100\ndistilled_s1,1,2,500\n";
  {
    std::ofstream f(dir / "scaling_points.csv");
    f << "N,D,loss\n";
    for (double N : {1e6, 1e7, 1e8})
      for (double D : {1e7, 1e8, 1e9, 1e10}) f << N << ',' << D << ',' << 2.0 + 400.0 / std::pow(N, 0.4) + 180.0 / std::pow(D, 0.25) << '\n';
  }
  write_trials_csv({1, 0, 1, 1, 0, 1}, dir / "trials.csv");
  CHECK(read_trials_csv(dir / "trials.csv") == std::vector<int>{1, 0, 1, 1, 0, 1});

  const auto first = emit_figures(dir);
  CHECK(first.size() == 10);
  std::vector<std::string> bytes;
  for (const auto& p : first) bytes.push_back(slurp(p));
  const auto second = emit_figures(dir);
  for (std::size_t i = 0; i < second.size(); ++i) CHECK(slurp(second[i]) == bytes[i]);

  // Pareto figure keeps the token axis and both error axes.
  const std::string pareto = slurp(dir / "figures" / "tokenizer_pareto.csv");
  CHECK(pareto.rfind("tokenizer,budget,tokens_per_chunk,pos_mse,rot_geodesic_rad\n", 0) == 0);
  CHECK(pareto.find("binning,b16,448,0.0002,0.02") != std::string::npos);
  CHECK(slurp(dir / "figures" / "speed_ablation.csv").find("distilled_s1,1,2,500,5\n") != std::string::npos);
  CHECK(slurp(dir / "figures" / "success_rate.csv").find("\n6,0.666666667,") != std::string::npos);

  fs::remove(dir / "latency.csv");
  CHECK_NOTHROW(emit_figures(dir, {"success_rate"}));
  try {
    emit_figures(dir);
    FAIL("expected MissingArtifactError");
  } catch (const MissingArtifactError& e) {
    CHECK(e.missing() == std::vector<std::string>{"latency.csv"});
  }
  fs::remove_all(dir);
}
