#include "chunkflow/data/datagen.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <sstream>

#include "chunkflow/core/errors.hpp"
#include "json.hpp"

namespace chunkflow {

namespace {

constexpr Index kGoalsPerArm = 5;  // dx, dy, dz, angle, grip switch time

struct GoalRange {
  double lo, hi;
};
constexpr GoalRange kGoalRanges[kGoalsPerArm] = {{0.2, 0.4}, {-0.15, 0.15}, {-0.05, 0.05}, {0.3, 1.2}, {0.4, 0.8}};

Vec3<double> family_axis(int family) {
  static const Vec3<double> axes[] = {{0, 0, 1}, {1, 0, 0}, {0, 1, 0}, {1, 1, 0}};
  return axes[family % 4].normalized();
}

double smoothstep(double u) { return u * u * (3.0 - 2.0 * u); }

RowMatrix context_projection(const TaskSpec& spec) {
  Rng root(spec.seed);
  Rng rng = root.fork(1);
  const Index in = spec.family_count() + spec.goal_dim();
  RowMatrix p(spec.context_dim, in);
  for (Index i = 0; i < p.size(); ++i) p.data()[i] = rng.normal() / std::sqrt(double(in));
  return p;
}

// [family one-hot, goals rescaled to [-1, 1]]
Eigen::VectorXd context_features(const TaskSpec& spec, int family, const std::vector<double>& goals) {
  const Index F = spec.family_count();
  Eigen::VectorXd x = Eigen::VectorXd::Zero(F + spec.goal_dim());
  x[family] = 1.0;
  for (Index i = 0; i < spec.goal_dim(); ++i) {
    const GoalRange r = kGoalRanges[i % kGoalsPerArm];
    x[F + i] = (goals[std::size_t(i)] - 0.5 * (r.lo + r.hi)) / (0.5 * (r.hi - r.lo));
  }
  return x;
}

void fill_chunk(const TaskSpec& spec, const ActionLayout& layout, int mode, const std::vector<double>& goals,
                Rng* noise, Tensor& out) {
  const ModeSpec& m = spec.modes[static_cast<std::size_t>(mode)];
  const Index T = spec.chunk_size;
  const auto ranges = layout.ranges();
  for (Index a = 0; a < layout.arm_count(); ++a) {
    const ArmSlice& arm = layout.arms[static_cast<std::size_t>(a)];
    const double* g = goals.data() + a * kGoalsPerArm;
    const double dir = m.family % 2 == 0 ? 1.0 : -1.0;
    const Vec3<double> start(-0.3 * dir, a == 0 ? -0.25 : 0.25, 0.0);
    const Vec3<double> delta(dir * g[0], g[1], g[2]);
    const Vec3<double> axis = family_axis(m.family);
    for (Index t = 0; t < T; ++t) {
      const double u = T > 1 ? double(t) / double(T - 1) : 0.0;
      double* row = out.data.data() + t * spec.d;
      Vec3<double> p = start + smoothstep(u) * delta;
      p.z() += m.detour * std::sin(std::numbers::pi * u);
      Vec3<double> rv = smoothstep(u) * g[3] * axis;
      double grip = 0.08 - 0.06 / (1.0 + std::exp(-12.0 * (u - g[4])));
      if (noise != nullptr && m.sigma > 0.0) {
        for (int i = 0; i < 3; ++i) p[i] += m.sigma * noise->normal();
        for (int i = 0; i < 3; ++i) rv[i] += m.sigma * noise->normal();
        grip += m.sigma * noise->normal();
      }
      for (int i = 0; i < 3; ++i) row[arm.position + i] = p[i];
      row[arm.gripper] = grip;
      if (layout.rotation == RotationFormat::kAxisAngle) {
        for (int i = 0; i < 3; ++i) row[arm.rotation + i] = rv[i];
      } else {
        layout.set_rotation(out, t, a, rotvec_to_matrix<double>(rv));
      }
      for (Index c = 0; c < spec.d; ++c) {
        const auto [lo, hi] = ranges[static_cast<std::size_t>(c)];
        row[c] = std::clamp(row[c], lo, hi);
      }
    }
  }
}

}  // namespace

int TaskSpec::family_count() const {
  int f = 0;
  for (const ModeSpec& m : modes) f = std::max(f, m.family + 1);
  return f;
}

Index TaskSpec::goal_dim() const { return layout().arm_count() * kGoalsPerArm; }

void TaskSpec::validate() const {
  if (modes.empty()) throw ConfigError("task has no modes");
  if (chunk_size < 1) throw ConfigError("chunk_size must be >= 1");
  if (context_dim < 1) throw ConfigError("context_dim must be >= 1");
  double total = 0.0;
  for (const ModeSpec& m : modes) {
    if (m.family < 0 || m.weight < 0.0 || m.sigma < 0.0) throw ConfigError("invalid mode parameters");
    total += m.weight;
  }
  if (total <= 0.0) throw ConfigError("mode weights sum to zero");
  (void)layout();
}

TaskSpec TaskSpec::default_task() {
  TaskSpec spec;
  spec.modes = {{0, 0.2}, {0, -0.2}, {1, 0.2}, {1, -0.2}};
  return spec;
}

TaskSpec TaskSpec::two_mode_task() {
  TaskSpec spec;
  spec.modes = {{0, 0.2}, {0, -0.2}};
  return spec;
}

Tensor NormStats::normalize(const Tensor& chunk) const {
  if (chunk.dim(-1) != dim()) throw DimensionError("normalize: width " + std::to_string(chunk.dim(-1)));
  Tensor out = chunk;
  const Index d = dim();
  for (Index i = 0; i < out.numel(); ++i) out[i] = (out[i] - mean[std::size_t(i % d)]) / scale[std::size_t(i % d)];
  return out;
}

Tensor NormStats::denormalize(const Tensor& chunk) const {
  if (chunk.dim(-1) != dim()) throw DimensionError("denormalize: width " + std::to_string(chunk.dim(-1)));
  Tensor out = chunk;
  const Index d = dim();
  for (Index i = 0; i < out.numel(); ++i) out[i] = out[i] * scale[std::size_t(i % d)] + mean[std::size_t(i % d)];
  return out;
}

std::string NormStats::to_json() const {
  nlohmann::ordered_json j;
  j["mean"] = mean;
  j["scale"] = scale;
  return j.dump(2) + "\n";
}

NormStats NormStats::from_json(const std::string& text) {
  NormStats s;
  try {
    const auto j = nlohmann::json::parse(text);
    s.mean = j.at("mean").get<std::vector<double>>();
    s.scale = j.at("scale").get<std::vector<double>>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("norm stats: ") + e.what());
  }
  if (s.mean.size() != s.scale.size()) throw FormatError("norm stats: mean/scale length mismatch");
  for (double v : s.scale)
    if (!(v > 0.0)) throw FormatError("norm stats: non-positive scale");
  return s;
}

void NormStats::save(const std::filesystem::path& path) const {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw FormatError("cannot write " + path.string());
  f << to_json();
}

NormStats NormStats::load(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw FormatError("cannot read " + path.string());
  std::stringstream ss;
  ss << f.rdbuf();
  return from_json(ss.str());
}

Tensor render_mode(const TaskSpec& spec, int mode, const std::vector<double>& goals) {
  if (static_cast<Index>(goals.size()) != spec.goal_dim()) throw DimensionError("render_mode: goal count");
  Tensor out({spec.chunk_size, spec.d});
  fill_chunk(spec, spec.layout(), mode, goals, nullptr, out);
  return out;
}

std::vector<double> context_mean(const TaskSpec& spec, int family, const std::vector<double>& goals) {
  const Eigen::VectorXd c = context_projection(spec) * context_features(spec, family, goals);
  return {c.data(), c.data() + c.size()};
}

Dataset generate_dataset(const TaskSpec& spec, Index n_chunks, std::uint64_t split) {
  spec.validate();
  if (n_chunks < 1) throw ConfigError("n_chunks must be >= 1");
  const ActionLayout layout = spec.layout();
  const RowMatrix proj = context_projection(spec);
  Rng root(spec.seed);
  root.fork(1);
  Rng rng = root.fork(1000 + split);

  std::vector<double> cumulative;
  double total = 0.0;
  for (const ModeSpec& m : spec.modes) cumulative.push_back(total += m.weight);

  Dataset ds;
  ds.spec = spec;
  ds.chunks.reserve(static_cast<std::size_t>(n_chunks));
  for (Index n = 0; n < n_chunks; ++n) {
    DemoChunk c;
    const double pick = rng.uniform() * total;
    c.mode_id = int(std::upper_bound(cumulative.begin(), cumulative.end(), pick) - cumulative.begin());
    c.mode_id = std::min<int>(c.mode_id, int(spec.modes.size()) - 1);
    const ModeSpec& m = spec.modes[std::size_t(c.mode_id)];
    c.instruction_id = m.family;
    c.goals.resize(std::size_t(spec.goal_dim()));
    for (Index i = 0; i < spec.goal_dim(); ++i) {
      const GoalRange r = kGoalRanges[i % kGoalsPerArm];
      c.goals[std::size_t(i)] = rng.uniform(r.lo, r.hi);
    }
    c.actions = Tensor({spec.chunk_size, spec.d});
    fill_chunk(spec, layout, c.mode_id, c.goals, &rng, c.actions);

    const Eigen::VectorXd ctx = proj * context_features(spec, m.family, c.goals);
    c.context.resize(std::size_t(spec.context_dim));
    for (Index i = 0; i < spec.context_dim; ++i) c.context[std::size_t(i)] = ctx[i] + spec.context_noise * rng.normal();
    ds.chunks.push_back(std::move(c));
  }
  ds.stats = compute_norm_stats(ds.chunks);
  return ds;
}

NormStats compute_norm_stats(const std::vector<DemoChunk>& chunks) {
  if (chunks.empty()) throw ConfigError("compute_norm_stats: no chunks");
  const Index d = chunks.front().actions.dim(1);
  Eigen::VectorXd sum = Eigen::VectorXd::Zero(d), sq = Eigen::VectorXd::Zero(d);
  double rows = 0.0;
  for (const DemoChunk& c : chunks) {
    const auto m = c.actions.matrix(d);
    sum += m.colwise().sum().transpose();
    rows += double(m.rows());
  }
  const Eigen::VectorXd mu = sum / rows;
  for (const DemoChunk& c : chunks) {
    const auto m = c.actions.matrix(d);
    sq += (m.rowwise() - mu.transpose()).array().square().matrix().colwise().sum().transpose();
  }
  NormStats s;
  s.mean.assign(mu.data(), mu.data() + d);
  s.scale.resize(std::size_t(d));
  for (Index i = 0; i < d; ++i) {
    double sd = std::sqrt(sq[i] / rows);
    if (sd < NormStats::kMinScale) {
      spdlog::warn("action column {} has near-zero spread ({:.3g}); scale clamped to {:g}", i, sd, NormStats::kMinScale);
      sd = NormStats::kMinScale;
    }
    s.scale[std::size_t(i)] = sd;
  }
  return s;
}

}  // namespace chunkflow
