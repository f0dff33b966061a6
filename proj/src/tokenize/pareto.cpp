#include "chunkflow/tokenize/pareto.hpp"

#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>

#include <spdlog/spdlog.h>

#include "chunkflow/core/errors.hpp"
#include "chunkflow/tokenize/baselines.hpp"

namespace chunkflow {

Tensor stack_normalized(const std::vector<DemoChunk>& chunks, const NormStats& stats) {
  const Index T = chunks.front().actions.dim(0), d = chunks.front().actions.dim(1);
  Tensor out({Index(chunks.size()), T, d});
  for (std::size_t i = 0; i < chunks.size(); ++i) {
    const Tensor n = stats.normalize(chunks[i].actions);
    std::copy(n.data.begin(), n.data.end(), out.data.begin() + std::ptrdiff_t(i) * T * d);
  }
  return out;
}

std::vector<Tensor> unstack(const Tensor& batch) {
  const Index N = batch.dim(0), T = batch.dim(1), d = batch.dim(2);
  std::vector<Tensor> out;
  for (Index i = 0; i < N; ++i)
    out.emplace_back(Shape{T, d}, std::vector<double>(batch.data.begin() + i * T * d, batch.data.begin() + (i + 1) * T * d));
  return out;
}

namespace {

std::vector<Tensor> actions_of(const std::vector<DemoChunk>& chunks) {
  std::vector<Tensor> out;
  for (const auto& c : chunks) out.push_back(c.actions);
  return out;
}

}  // namespace

std::vector<ParetoPoint> rvq_sweep(RvqModel& rvq, const NormStats& stats, const std::vector<DemoChunk>& eval) {
  const ActionLayout layout = ActionLayout::for_dimension(rvq.config.action_dim);
  const std::vector<Tensor> gt = actions_of(eval);
  const Tensor x = stack_normalized(eval, stats);
  const auto tokens = quantize_rvq(rvq.encode_latents(x), rvq.books, rvq.config.distance).tokens;
  std::vector<ParetoPoint> out;
  for (Index depth = 1; depth <= rvq.config.depth; ++depth) {
    std::vector<Tensor> pred = unstack(rvq.dequantize(tokens, depth));
    for (Tensor& p : pred) p = stats.denormalize(p);
    out.push_back({"rvq", "depth" + std::to_string(depth), double(rvq.config.latents * depth), batch_metrics(pred, gt, layout)});
  }
  return out;
}

std::vector<ParetoPoint> pareto_sweep(RvqModel& rvq, const NormStats& stats, const std::vector<DemoChunk>& train,
                                      const std::vector<DemoChunk>& eval, const ParetoConfig& cfg) {
  if (train.empty() || eval.empty()) throw ConfigError("pareto_sweep needs training and evaluation chunks");
  const Index T = eval.front().actions.dim(0), d = eval.front().actions.dim(1);
  const ActionLayout layout = ActionLayout::for_dimension(d);
  const std::vector<Tensor> gt = actions_of(eval);
  std::vector<ParetoPoint> out = rvq_sweep(rvq, stats, eval);

  std::vector<std::pair<double, double>> ranges(std::size_t(d), {std::numeric_limits<double>::infinity(), -std::numeric_limits<double>::infinity()});
  for (const auto& c : train)
    for (Index i = 0; i < c.actions.numel(); ++i) {
      auto& [lo, hi] = ranges[std::size_t(i % d)];
      lo = std::min(lo, c.actions[i]);
      hi = std::max(hi, c.actions[i]);
    }
  for (auto& [lo, hi] : ranges)
    if (hi - lo < NormStats::kMinScale) hi = lo + NormStats::kMinScale;
  for (int bins : cfg.bin_counts) {
    const UniformBinTokenizer tok(bins, ranges);
    std::vector<Tensor> pred;
    for (const Tensor& a : gt) pred.push_back(tok.decode(tok.encode(a), T));
    out.push_back({"binning", "bins" + std::to_string(bins), double(T * d), batch_metrics(pred, gt, layout)});
  }

  std::vector<Tensor> corpus;
  for (std::size_t i = 0; i < std::min(cfg.bpe_corpus, train.size()); ++i) corpus.push_back(stats.normalize(train[i].actions));
  for (Index keep : cfg.dct_keep) {
    if (keep > T) continue;
    for (double scale : cfg.dct_scales) {
      const DctBpeTokenizer tok = DctBpeTokenizer::train(corpus, keep, scale, cfg.bpe_merges);
      std::vector<Tensor> pred;
      double tokens = 0;
      for (const Tensor& a : gt) {
        const auto ids = tok.encode(stats.normalize(a));
        tokens += double(ids.size());
        pred.push_back(stats.denormalize(tok.decode(ids)));
      }
      std::ostringstream name;
      name << "keep" << keep << "_scale" << scale;
      out.push_back({"dct_bpe", name.str(), tokens / double(gt.size()), batch_metrics(pred, gt, layout)});
      spdlog::debug("dct_bpe {} tokens {:.1f}", name.str(), out.back().tokens_per_chunk);
    }
  }
  return out;
}

double tokens_at_error(const std::vector<ParetoPoint>& points, const std::string& family, double target) {
  double best = std::numeric_limits<double>::infinity();
  for (const auto& p : points)
    if (p.tokenizer == family && p.report.position_mse <= target) best = std::min(best, p.tokens_per_chunk);
  return best;
}

std::vector<MatchedPoint> matched_error_points(const std::vector<ParetoPoint>& points, int count) {
  double lo = std::numeric_limits<double>::infinity(), hi = 0;
  for (const auto& p : points)
    if (p.tokenizer == "rvq") {
      lo = std::min(lo, p.report.position_mse);
      hi = std::max(hi, p.report.position_mse);
    }
  if (!(hi > 0) || count < 1) throw ConfigError("matched_error_points needs RVQ points");
  std::vector<MatchedPoint> out;
  for (int i = 0; i < count; ++i) {
    const double u = count == 1 ? 0.0 : double(i) / (count - 1);
    MatchedPoint m;
    m.target_pos_mse = std::exp(std::log(lo) + u * (std::log(hi) - std::log(lo)));
    m.rvq = tokens_at_error(points, "rvq", m.target_pos_mse);
    m.dct_bpe = tokens_at_error(points, "dct_bpe", m.target_pos_mse);
    m.binning = tokens_at_error(points, "binning", m.target_pos_mse);
    out.push_back(m);
  }
  return out;
}

void write_pareto_csv(const std::vector<ParetoPoint>& points, const std::filesystem::path& path) {
  std::ofstream f(path);
  if (!f) throw FormatError("cannot write " + path.string());
  f << "tokenizer,budget,tokens_per_chunk,pos_mse,rot_geodesic_rad,grip_mse\n";
  char buf[256];
  for (const auto& p : points) {
    std::snprintf(buf, sizeof buf, "%s,%s,%.6g,%.9g,%.9g,%.9g\n", p.tokenizer.c_str(), p.budget.c_str(), p.tokens_per_chunk,
                  p.report.position_mse, p.report.rotation_geodesic_rad, p.report.gripper_mse);
    f << buf;
  }
}

std::vector<ParetoPoint> read_pareto_csv(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw FormatError("cannot read " + path.string());
  std::string line;
  std::getline(f, line);
  if (line != "tokenizer,budget,tokens_per_chunk,pos_mse,rot_geodesic_rad,grip_mse") throw FormatError("unexpected pareto CSV header");
  std::vector<ParetoPoint> out;
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    std::vector<std::string> cols;
    std::stringstream ss(line);
    for (std::string c; std::getline(ss, c, ',');) cols.push_back(c);
    if (cols.size() != 6) throw FormatError("pareto CSV row has " + std::to_string(cols.size()) + " columns");
    ParetoPoint p;
    p.tokenizer = cols[0];
    p.budget = cols[1];
    try {
      p.tokens_per_chunk = std::stod(cols[2]);
      p.report.position_mse = std::stod(cols[3]);
      p.report.rotation_geodesic_rad = std::stod(cols[4]);
      p.report.gripper_mse = std::stod(cols[5]);
    } catch (const std::exception&) {
      throw FormatError("pareto CSV row is not numeric: " + line);
    }
    out.push_back(p);
  }
  return out;
}

}  // namespace chunkflow
