#include <cmath>
#include <numbers>

#include "chunkflow/core/errors.hpp"
#include "chunkflow/data/datagen.hpp"
#include "chunkflow/eval/statistics.hpp"
#include "doctest.h"

using namespace chunkflow;

namespace {

// Rodrigues: R = I + sin(t) K + (1 - cos(t)) K^2 for unit axis k.
Mat3<double> rodrigues(Vec3<double> k, double t) {
  Mat3<double> K;
  K << 0, -k.z(), k.y(), k.z(), 0, -k.x(), -k.y(), k.x(), 0;
  return Mat3<double>::Identity() + std::sin(t) * K + (1 - std::cos(t)) * K * K;
}

Mat3<double> random_rotation(Rng& rng) {
  Vec3<double> axis(rng.normal(), rng.normal(), rng.normal());
  return rodrigues(axis.normalized(), rng.uniform(-std::numbers::pi, std::numbers::pi));
}

}  // namespace

TEST_CASE("rotation_block examples") {
  SUBCASE("identity") {
    const Vec6<double> v = to_6d<double>(Mat3<double>::Identity());
    CHECK(v == (Vec6<double>() << 1, 0, 0, 0, 1, 0).finished());
  }
  SUBCASE("quarter turn about z") {
    const Mat3<double> r = rotation_from_axis_angle<double>(Vec3<double>::UnitZ(), std::numbers::pi / 2);
    CHECK((r - rodrigues(Vec3<double>::UnitZ(), std::numbers::pi / 2)).cwiseAbs().maxCoeff() < 1e-15);
    const Vec6<double> expected = (Vec6<double>() << 0, 1, 0, -1, 0, 0).finished();
    CHECK((to_6d(r) - expected).cwiseAbs().maxCoeff() < 1e-15);
  }
  SUBCASE("Gram-Schmidt round trip") {
    Rng rng(21);
    for (int i = 0; i < 100; ++i) {
      const Mat3<double> r = random_rotation(rng);
      CHECK((from_6d(to_6d(r)) - r).cwiseAbs().maxCoeff() < 1e-12);
    }
  }
  SUBCASE("rotation vector round trip") {
    Rng rng(22);
    for (int i = 0; i < 100; ++i) {
      const Mat3<double> r = random_rotation(rng);
      CHECK((rotvec_to_matrix(matrix_to_rotvec(r)) - r).cwiseAbs().maxCoeff() < 1e-12);
    }
  }
  SUBCASE("float scalars") {
    const Mat3<float> r = rotation_from_axis_angle<float>(Vec3<float>::UnitX(), 0.5f);
    CHECK((from_6d(to_6d(r)) - r).cwiseAbs().maxCoeff() < 1e-6f);
  }
  SUBCASE("zero axis") {
    CHECK_THROWS_AS(rotation_from_axis_angle<double>(Vec3<double>::Zero(), 0.3), ContractError);
    CHECK(rotation_from_axis_angle<double>(Vec3<double>::Zero(), 0.0) == Mat3<double>::Identity());
  }
}

TEST_CASE("action layouts") {
  const ActionLayout l14 = ActionLayout::for_dimension(14);
  CHECK(l14.arm_count() == 2);
  CHECK(l14.arms[1].position == 7);
  CHECK(l14.arms[1].rotation == 10);
  CHECK(l14.arms[1].gripper == 13);
  const ActionLayout l20 = ActionLayout::for_dimension(20);
  CHECK(l20.rotation_width() == 6);
  CHECK(l20.arms[1].gripper == 19);
  CHECK(ActionLayout::for_dimension(7).arm_count() == 1);
  CHECK(ActionLayout::for_dimension(10).arms[0].gripper == 9);
  CHECK_THROWS_AS(ActionLayout::for_dimension(12), ConfigError);
}

TEST_CASE("generate_dataset examples") {
  SUBCASE("noise-free single mode is fixed by its goals") {
    TaskSpec spec;
    spec.modes = {{0, 0.2, 0.0}};
    const Dataset ds = generate_dataset(spec, 20);
    for (const DemoChunk& c : ds.chunks) CHECK(c.actions.data == render_mode(spec, 0, c.goals).data);
  }
  SUBCASE("equal-weight mode counts concentrate") {
    const Dataset ds = generate_dataset(TaskSpec::two_mode_task(), 10000);
    int first = 0;
    for (const DemoChunk& c : ds.chunks) first += c.mode_id == 0;
    CHECK(std::abs(first - 5000) <= 3.0 * std::sqrt(10000 * 0.25));
  }
  SUBCASE("normalization round trip") {
    const Dataset ds = generate_dataset(TaskSpec::default_task(), 64);
    for (const DemoChunk& c : ds.chunks)
      CHECK(max_abs_diff(ds.stats.denormalize(ds.stats.normalize(c.actions)), c.actions) < 1e-12);
  }
  SUBCASE("zero-spread column is clamped") {
    TaskSpec spec;
    spec.modes = {{0, 0.0, 0.0}};
    std::vector<DemoChunk> chunks(3);
    for (auto& c : chunks) c.actions = Tensor({4, 14}, 0.5);
    const NormStats s = compute_norm_stats(chunks);
    for (double v : s.scale) CHECK(v == NormStats::kMinScale);
  }
  SUBCASE("values stay in declared ranges, for every layout") {
    for (Index d : {7, 10, 14, 20}) {
      TaskSpec spec = TaskSpec::default_task();
      spec.d = d;
      const auto ranges = spec.layout().ranges();
      const Dataset ds = generate_dataset(spec, 50);
      for (const DemoChunk& c : ds.chunks) {
        REQUIRE(c.actions.is_finite());
        REQUIRE(c.actions.shape == Shape{32, d});
        for (Index i = 0; i < c.actions.numel(); ++i) {
          const auto [lo, hi] = ranges[std::size_t(i % d)];
          CHECK(c.actions[i] >= lo);
          CHECK(c.actions[i] <= hi);
        }
      }
    }
  }
  SUBCASE("context is informative about family") {
    const TaskSpec spec = TaskSpec::default_task();
    const std::vector<double> goals(std::size_t(spec.goal_dim()), 0.3);
    const auto a = context_mean(spec, 0, goals), b = context_mean(spec, 1, goals);
    double gap = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) gap += (a[i] - b[i]) * (a[i] - b[i]);
    CHECK(std::sqrt(gap) > 10 * spec.context_noise);
  }
  SUBCASE("bad specs") {
    TaskSpec spec;
    CHECK_THROWS_AS(generate_dataset(spec, 5), ConfigError);
    spec = TaskSpec::default_task();
    CHECK_THROWS_AS(generate_dataset(spec, 0), ConfigError);
    for (auto& m : spec.modes) m.weight = 0.0;
    CHECK_THROWS_AS(generate_dataset(spec, 5), ConfigError);
  }
}

TEST_CASE("reproducibility") {
  const TaskSpec spec = TaskSpec::default_task();
  const Dataset a = generate_dataset(spec, 30), b = generate_dataset(spec, 30), c = generate_dataset(spec, 30, 1);
  bool same = true, differs = false;
  for (std::size_t i = 0; i < a.chunks.size(); ++i) {
    same &= a.chunks[i].actions.data == b.chunks[i].actions.data && a.chunks[i].context == b.chunks[i].context &&
            a.chunks[i].mode_id == b.chunks[i].mode_id;
    differs |= a.chunks[i].actions.data != c.chunks[i].actions.data;
  }
  CHECK(same);
  CHECK(differs);
  CHECK(a.stats.to_json() == b.stats.to_json());
}

TEST_CASE("norm stats sidecar round trip") {
  const Dataset ds = generate_dataset(TaskSpec::default_task(), 16);
  const NormStats back = NormStats::from_json(ds.stats.to_json());
  CHECK(back.mean == ds.stats.mean);
  CHECK(back.scale == ds.stats.scale);
  CHECK_THROWS_AS(NormStats::from_json("{\"mean\": [1], \"scale\": [0]}"), FormatError);
  CHECK_THROWS_AS(NormStats::from_json("not json"), FormatError);
}

TEST_CASE("dip statistic reference values") {
  // Frozen from an independent implementation of the same statistic.
  const std::vector<double> five = {0.1, 0.4, 0.45, 0.9, 1.3};
  CHECK(dip_statistic(five) == doctest::Approx(0.10588235294117646).epsilon(1e-14));
  const std::vector<double> ties = {1, 1, 2, 2, 2, 3, 5, 5, 8, 8};
  CHECK(dip_statistic(ties) == doctest::Approx(0.1).epsilon(1e-14));
  std::vector<double> squares, alternating;
  for (int i = 1; i <= 20; ++i) squares.push_back(double(i * i));
  for (int i = 0; i < 40; ++i) alternating.push_back(std::sin(i * 1.7) * 3 + (i % 2 ? 5 : -5));
  CHECK(dip_statistic(squares) == doctest::Approx(0.025).epsilon(1e-14));
  CHECK(dip_statistic(alternating) == doctest::Approx(0.10024738921819516).epsilon(1e-14));
  const std::vector<double> constant(10, 3.0);
  CHECK(dip_statistic(constant) == doctest::Approx(1.0 / 20));
}

TEST_CASE("two-mode task has a bimodal per-timestep marginal") {
  const TaskSpec spec = TaskSpec::two_mode_task();
  const Dataset ds = generate_dataset(spec, 10000);
  const Index t = spec.chunk_size / 2, z = spec.layout().arms[0].position + 2;
  std::vector<double> column, normal_control;
  Rng rng(3);
  for (const DemoChunk& c : ds.chunks) column.push_back(c.actions[t * spec.d + z]);
  for (int i = 0; i < 10000; ++i) normal_control.push_back(rng.normal());
  const double critical = dip_critical_value(10000, 0.05, 100);
  CHECK(dip_statistic(column) > critical);
  CHECK(dip_statistic(normal_control) < critical);
}
