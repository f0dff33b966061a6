#include "chunkflow/scaling/scaling.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <set>
#include <sstream>

#include <Eigen/Dense>

#include "chunkflow/core/errors.hpp"

namespace chunkflow {
namespace {

constexpr double kMinExponent = 1e-4;
constexpr double kMaxExponent = 2.0;
constexpr double kFloor = 1e-300;

std::vector<double> log_grid(double lo, double hi, int n) {
  std::vector<double> g(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) g[std::size_t(i)] = lo * std::pow(hi / lo, double(i) / double(n - 1));
  return g;
}

double huber(double r, double delta) {
  const double a = std::abs(r);
  return a <= delta ? 0.5 * r * r : delta * (a - 0.5 * delta);
}

// u = (log E, log A, alpha, log B, beta)
using Vec5 = Eigen::Matrix<double, 5, 1>;

ScalingParams from_u(const Vec5& u) { return {std::exp(u[0]), std::exp(u[1]), u[2], std::exp(u[3]), u[4]}; }

Vec5 to_u(const ScalingParams& p) {
  Vec5 u;
  u << std::log(std::max(p.E, kFloor)), std::log(std::max(p.A, kFloor)), p.alpha, std::log(std::max(p.B, kFloor)), p.beta;
  return u;
}

struct Problem {
  const std::vector<LossPoint>& pts;
  double delta;

  double objective(const Vec5& u, std::vector<double>* res = nullptr) const {
    const ScalingParams p = from_u(u);
    double f = 0.0;
    if (res) res->resize(pts.size());
    for (std::size_t i = 0; i < pts.size(); ++i) {
      const double r = std::log(predict_loss(p, pts[i].N, pts[i].D)) - std::log(pts[i].loss);
      if (res) (*res)[i] = r;
      f += huber(r, delta);
    }
    return std::isfinite(f) ? f : std::numeric_limits<double>::infinity();
  }
};

// Non-negative weighted least squares for loss ~ E + A x + B y: the best
// feasible solution over every support set.
ScalingParams linear_start(const std::vector<LossPoint>& pts, double alpha, double beta) {
  const Index n = Index(pts.size());
  Eigen::MatrixXd X(n, 3);
  Eigen::VectorXd y(n);
  for (Index i = 0; i < n; ++i) {
    const double w = 1.0 / pts[std::size_t(i)].loss;  // relative error, like the log residual
    X(i, 0) = w;
    X(i, 1) = w * std::pow(pts[std::size_t(i)].N, -alpha);
    X(i, 2) = w * std::pow(pts[std::size_t(i)].D, -beta);
    y[i] = 1.0;
  }
  double best = std::numeric_limits<double>::infinity();
  Eigen::Vector3d best_c = Eigen::Vector3d::Zero();
  for (int mask = 1; mask < 8; ++mask) {
    std::vector<int> cols;
    for (int j = 0; j < 3; ++j)
      if (mask & (1 << j)) cols.push_back(j);
    Eigen::MatrixXd S(n, Index(cols.size()));
    for (std::size_t k = 0; k < cols.size(); ++k) S.col(Index(k)) = X.col(cols[k]);
    const Eigen::VectorXd c = S.colPivHouseholderQr().solve(y);
    if ((c.array() < 0).any()) continue;
    const double sse = (S * c - y).squaredNorm();
    if (sse < best) {
      best = sse;
      best_c.setZero();
      for (std::size_t k = 0; k < cols.size(); ++k) best_c[cols[k]] = c[Index(k)];
    }
  }
  // Floors keep the log parameterization finite when a term is inactive.
  const double scale = pts.front().loss;
  return {std::max(best_c[0], 1e-8 * scale), std::max(best_c[1], 1e-8 * scale), alpha, std::max(best_c[2], 1e-8 * scale),
          beta};
}

struct LmResult {
  Vec5 u;
  double objective;
  std::vector<double> trace;
  bool converged;
  int iterations;
};

LmResult refine(const Problem& prob, Vec5 u, int max_iter) {
  std::vector<double> res;
  double f = prob.objective(u, &res);
  LmResult out{u, f, {f}, false, 0};
  double lambda = 1e-3;
  const std::size_t n = prob.pts.size();
  for (int it = 0; it < max_iter; ++it) {
    out.iterations = it + 1;
    const ScalingParams p = from_u(u);
    Eigen::Matrix<double, 5, 5> H = Eigen::Matrix<double, 5, 5>::Zero();
    Vec5 g = Vec5::Zero();
    for (std::size_t i = 0; i < n; ++i) {
      const double N = prob.pts[i].N, D = prob.pts[i].D;
      const double an = p.A * std::pow(N, -p.alpha), bd = p.B * std::pow(D, -p.beta);
      const double pred = p.E + an + bd;
      Vec5 j;
      j << p.E / pred, an / pred, -an * std::log(N) / pred, bd / pred, -bd * std::log(D) / pred;
      const double r = res[i], a = std::abs(r);
      const double w = a <= prob.delta ? 1.0 : prob.delta / a;  // IRLS weight of the Huber loss
      H.noalias() += w * j * j.transpose();
      g.noalias() += w * r * j;
    }
    if (g.norm() < 1e-30) {
      out.converged = true;
      break;
    }
    bool accepted = false;
    while (lambda < 1e20) {
      Eigen::Matrix<double, 5, 5> M = H;
      for (int k = 0; k < 5; ++k) M(k, k) += lambda * std::max(H(k, k), 1e-30);
      Vec5 cand = u + M.ldlt().solve(-g);
      cand[2] = std::clamp(cand[2], kMinExponent, kMaxExponent);
      cand[4] = std::clamp(cand[4], kMinExponent, kMaxExponent);
      std::vector<double> cres;
      const double fc = prob.objective(cand, &cres);
      if (fc < f) {
        const double gain = f - fc;
        u = cand;
        res = std::move(cres);
        f = fc;
        out.trace.push_back(f);
        lambda = std::max(lambda / 3.0, 1e-12);
        accepted = true;
        if (gain <= 1e-15 * f || f < 1e-32) out.converged = true;
        break;
      }
      lambda *= 4.0;
    }
    if (!accepted) {
      out.converged = true;  // no descent direction left at this damping
      break;
    }
    if (out.converged) break;
  }
  out.u = u;
  out.objective = f;
  return out;
}

}  // namespace

double predict_loss(const ScalingParams& p, double N, double D) {
  return p.E + p.A * std::pow(N, -p.alpha) + p.B * std::pow(D, -p.beta);
}

ScalingFit fit_scaling_law(const std::vector<LossPoint>& points, const FitOptions& options) {
  if (points.size() < 5) throw ContractError("scaling fit needs at least 5 points, got " + std::to_string(points.size()));
  std::set<double> sizes;
  for (const LossPoint& p : points) {
    if (!(p.N > 0) || !(p.D > 0) || !std::isfinite(p.loss) || !(p.loss > 0))
      throw ContractError("scaling fit needs N > 0, D > 0 and a finite positive loss");
    sizes.insert(p.N);
  }
  if (sizes.size() < 2) throw ContractError("scaling fit is underdetermined: fewer than 2 distinct model sizes");

  const std::vector<double> ag = options.alpha_grid.empty() ? log_grid(0.05, 2.0, 8) : options.alpha_grid;
  const std::vector<double> bg = options.beta_grid.empty() ? log_grid(0.05, 2.0, 8) : options.beta_grid;
  const Problem prob{points, options.huber_delta};
  LmResult best{Vec5::Zero(), std::numeric_limits<double>::infinity(), {}, false, 0};
  for (double a : ag)
    for (double b : bg) {
      LmResult r = refine(prob, to_u(linear_start(points, a, b)), options.max_iterations);
      if (r.objective < best.objective) best = std::move(r);
    }

  ScalingFit fit;
  fit.params = from_u(best.u);
  fit.objective = prob.objective(best.u, &fit.residuals);
  double ss = 0.0;
  for (double r : fit.residuals) ss += r * r;
  fit.rmse = std::sqrt(ss / double(fit.residuals.size()));
  fit.trace = std::move(best.trace);
  fit.converged = best.converged;
  fit.iterations = best.iterations;
  return fit;
}

std::vector<LossPoint> read_loss_points(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw FormatError("cannot read " + path.string());
  std::string line;
  std::getline(f, line);
  if (line != "N,D,loss") throw FormatError(path.string() + ": expected header N,D,loss");
  std::vector<LossPoint> out;
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    LossPoint p;
    char c1 = 0, c2 = 0;
    std::istringstream is(line);
    if (!(is >> p.N >> c1 >> p.D >> c2 >> p.loss) || c1 != ',' || c2 != ',')
      throw FormatError(path.string() + ": bad row '" + line + "'");
    out.push_back(p);
  }
  return out;
}

void write_loss_points(const std::vector<LossPoint>& points, const std::filesystem::path& path) {
  std::ofstream f(path);
  if (!f) throw FormatError("cannot write " + path.string());
  f << "N,D,loss\n";
  char buf[96];
  for (const LossPoint& p : points) {
    std::snprintf(buf, sizeof buf, "%.17g,%.17g,%.17g\n", p.N, p.D, p.loss);
    f << buf;
  }
}

double tokens_for_loss(const ScalingParams& p, double N, double loss) {
  const double gap = loss - p.E - p.A * std::pow(N, -p.alpha);
  if (gap <= 0 || p.B <= 0) return std::numeric_limits<double>::infinity();
  return std::pow(p.B / gap, 1.0 / p.beta);
}

std::string scaling_report(const ScalingFit& fit, const std::vector<double>& sizes, const std::vector<double>& levels) {
  std::ostringstream os;
  char buf[256];
  const ScalingParams& p = fit.params;
  std::snprintf(buf, sizeof buf, "E = %.6g\nA = %.6g\nalpha = %.6g\nB = %.6g\nbeta = %.6g\n", p.E, p.A, p.alpha, p.B, p.beta);
  os << buf;
  std::snprintf(buf, sizeof buf, "log residual rmse = %.4g over %zu points (%s losses, %s)\n", fit.rmse,
                fit.residuals.size(), fit.loss_kind.c_str(), fit.converged ? "converged" : "not converged");
  os << buf << "\niso-loss tokens D(N, L)\nN";
  for (double l : levels) {
    std::snprintf(buf, sizeof buf, ",L=%.4g", l);
    os << buf;
  }
  os << '\n';
  for (double N : sizes) {
    std::snprintf(buf, sizeof buf, "%.4g", N);
    os << buf;
    for (double l : levels) {
      std::snprintf(buf, sizeof buf, ",%.4g", tokens_for_loss(p, N, l));
      os << buf;
    }
    os << '\n';
  }
  return os.str();
}

std::vector<SweepCurve> sweep_protocol(std::vector<SweepArm>& arms, const StreamFactory& epoch, const SweepConfig& cfg) {
  if (cfg.batch < 1 || cfg.checkpoint_every < 1 || cfg.tokens_per_sample < 1) throw ConfigError("sweep sizes must be positive");
  std::vector<SweepCurve> out;
  for (SweepArm& arm : arms) {
    SweepCurve curve{arm.name, {}, {}};
    std::unique_ptr<RecordStream> stream = epoch();
    std::int64_t steps = 0;
    double sum = 0.0, sum2 = 0.0;
    int count = 0;
    for (;;) {
      std::vector<DemoChunk> batch;
      while (Index(batch.size()) < cfg.batch) {
        std::optional<SampleRecord> r = stream->next();
        if (!r) break;
        batch.push_back(record_to_chunk(*r));
      }
      if (Index(batch.size()) < cfg.batch) break;
      const double loss = arm.step(batch);
      ++steps;
      sum += loss, sum2 += loss * loss, ++count;
      if (steps % cfg.checkpoint_every == 0) {
        const double mean = sum / count;
        const double var = count > 1 ? std::max(0.0, (sum2 - count * mean * mean) / (count - 1)) : 0.0;
        const double D = double(steps) * double(cfg.batch) * double(cfg.tokens_per_sample);
        curve.points.push_back({arm.parameters, D, mean});
        curve.standard_errors.push_back(std::sqrt(var / count));
        sum = sum2 = 0.0;
        count = 0;
      }
    }
    out.push_back(std::move(curve));
  }
  return out;
}

SweepArm policy_sweep_arm(const std::string& name, const PolicyConfig& policy, const PolicyTrainConfig& train,
                          const NormStats& stats) {
  Rng init(train.seed);
  auto trainer = std::make_shared<PolicyTrainer>(FlowPolicy(policy, init), train);
  const double n = double(count_parameters(trainer->policy().parameters()));
  return {name, n, [trainer, stats](const std::vector<DemoChunk>& batch) {
            return trainer->step(make_batch(batch, stats)).loss;
          }};
}

}  // namespace chunkflow
