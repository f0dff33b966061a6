#include "chunkflow/policy/train.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include <spdlog/spdlog.h>

#include "chunkflow/core/errors.hpp"

namespace chunkflow {
namespace {

std::string exact(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

double LossSmoother::push(double x) {
  acc_ = weight_ * acc_ + (1.0 - weight_) * x;
  norm_ = weight_ * norm_ + (1.0 - weight_);
  return value();
}

FlowBatch make_batch(const std::vector<DemoChunk>& chunks, const NormStats& stats) {
  if (chunks.empty()) throw ContractError("make_batch: no chunks");
  const Index B = Index(chunks.size()), T = chunks[0].actions.dim(0), d = chunks[0].actions.dim(1);
  const Index ctx = Index(chunks[0].context.size());
  FlowBatch out{Tensor({B, T, d}), Tensor({B, ctx})};
  for (Index b = 0; b < B; ++b) {
    const DemoChunk& c = chunks[std::size_t(b)];
    const Tensor n = stats.normalize(c.actions);
    std::copy(n.data.begin(), n.data.end(), out.actions.data.begin() + b * T * d);
    std::copy(c.context.begin(), c.context.end(), out.context.data.begin() + b * ctx);
  }
  return out;
}

FlowBatch sample_batch(const std::vector<DemoChunk>& chunks, const NormStats& stats, Index count, Rng& rng) {
  std::vector<DemoChunk> pick;
  pick.reserve(std::size_t(count));
  for (Index i = 0; i < count; ++i) pick.push_back(chunks[rng.index(chunks.size())]);
  return make_batch(pick, stats);
}

EvalReport validate_policy(FlowPolicy& policy, const std::vector<DemoChunk>& eval, const NormStats& stats, Index steps,
                           Rng& rng) {
  const FlowBatch b = make_batch(eval, stats);
  const Tensor out = euler_sample(policy, b.context, steps, rng);
  const ActionLayout layout = ActionLayout::for_dimension(policy.config.action_dim);
  const Index T = policy.config.chunk_size, d = policy.config.action_dim;
  std::vector<Tensor> pred, gt;
  for (std::size_t i = 0; i < eval.size(); ++i) {
    Tensor p({T, d}, std::vector<double>(out.data.begin() + Index(i) * T * d, out.data.begin() + Index(i + 1) * T * d));
    pred.push_back(stats.denormalize(p));
    gt.push_back(eval[i].actions);
  }
  return batch_metrics(pred, gt, layout);
}

PolicyTrainer::PolicyTrainer(FlowPolicy policy, const PolicyTrainConfig& cfg)
    : policy_(std::move(policy)), config_(cfg), rng_(cfg.seed), smoother_(cfg.smoothing) {
  opt_.config.lr = cfg.lr;
}

ParameterList PolicyTrainer::trainable() {
  return config_.train_encoder ? policy_.parameters() : policy_.net_parameters();
}

LossRecord PolicyTrainer::step(const FlowBatch& batch) {
  Tape t;
  Var cond;
  if (config_.train_encoder) {
    cond = policy_.encoder(t, t.constant(batch.context));
  } else {
    Tape frozen;
    cond = t.constant(policy_.encoder(frozen, frozen.constant(batch.context)).value());
    macs_ += frozen.macs();
  }
  Var loss = flow_matching_loss(t, policy_.net, cond, batch.actions, rng_);
  t.backward(loss);
  macs_ += 3.0 * t.macs();
  const ParameterList params = trainable();
  clip_global_norm(params, config_.clip);
  const LrSchedule schedule{LrSchedule::Kind::kConstant, config_.lr, config_.warmup};
  adamw_step(params, opt_, schedule.at(step_));

  const double value = loss.value().item();
  if (step_ == 0) initial_loss_ = value;
  over_ = value > config_.divergence_factor * initial_loss_ ? over_ + 1 : 0;
  ++step_;
  LossRecord rec{step_, value, smoother_.push(value)};
  log_.push_back(rec);
  if (over_ >= config_.divergence_window)
    throw NumericError("training diverged: loss above " + std::to_string(config_.divergence_factor) + "x the initial value for " +
                       std::to_string(over_) + " steps (step " + std::to_string(step_) + ")");
  return rec;
}

void PolicyTrainer::run(const std::vector<DemoChunk>& train, const NormStats& stats, const std::vector<DemoChunk>& eval) {
  while (step_ < config_.steps) {
    step(sample_batch(train, stats, config_.batch, rng_));
    if (!eval.empty() && config_.eval_every > 0 && step_ % config_.eval_every == 0) {
      Rng vr(config_.seed ^ std::uint64_t(step_));
      validation_.push_back({step_, validate_policy(policy_, eval, stats, policy_.config.steps, vr)});
      spdlog::info("step {} loss {:.4f} val position_mse {:.3e}", step_, log_.back().smoothed,
                   validation_.back().report.position_mse);
    }
  }
}

Checkpoint PolicyTrainer::to_checkpoint() {
  Checkpoint ck;
  policy_.write(ck, "policy.");
  ck.set_meta("train.steps", std::to_string(config_.steps));
  ck.set_meta("train.batch", std::to_string(config_.batch));
  ck.set_meta("train.lr", exact(config_.lr));
  ck.set_meta("train.warmup", std::to_string(config_.warmup));
  ck.set_meta("train.clip", exact(config_.clip));
  ck.set_meta("train.smoothing", exact(config_.smoothing));
  ck.set_meta("train.eval_every", std::to_string(config_.eval_every));
  ck.set_meta("train.divergence_window", std::to_string(config_.divergence_window));
  ck.set_meta("train.divergence_factor", exact(config_.divergence_factor));
  ck.set_meta("train.seed", std::to_string(config_.seed));
  ck.set_meta("train.train_encoder", config_.train_encoder ? "1" : "0");
  ck.set_meta("state.step", std::to_string(step_));
  ck.set_meta("state.initial_loss", exact(initial_loss_));
  ck.set_meta("state.over", std::to_string(over_));
  ck.set_meta("state.macs", exact(macs_));
  ck.set_meta("state.rng", rng_.state());
  const auto [acc, norm] = smoother_.state();
  ck.set_meta("state.smoother_acc", exact(acc));
  ck.set_meta("state.smoother_norm", exact(norm));
  ck.put_optimizer(opt_, trainable(), "opt.");
  Tensor log({Index(log_.size()), 3});
  for (std::size_t i = 0; i < log_.size(); ++i) {
    log[Index(i) * 3] = double(log_[i].step);
    log[Index(i) * 3 + 1] = log_[i].loss;
    log[Index(i) * 3 + 2] = log_[i].smoothed;
  }
  ck.put("state.log", log);
  return ck;
}

PolicyTrainer PolicyTrainer::from_checkpoint(const Checkpoint& ck) {
  PolicyTrainConfig cfg;
  auto geti = [&](const char* k) { return std::stoll(ck.meta(k)); };
  auto getd = [&](const char* k) { return std::stod(ck.meta(k)); };
  cfg.steps = geti("train.steps");
  cfg.batch = geti("train.batch");
  cfg.lr = getd("train.lr");
  cfg.warmup = geti("train.warmup");
  cfg.clip = getd("train.clip");
  cfg.smoothing = getd("train.smoothing");
  cfg.eval_every = geti("train.eval_every");
  cfg.divergence_window = geti("train.divergence_window");
  cfg.divergence_factor = getd("train.divergence_factor");
  cfg.seed = std::stoull(ck.meta("train.seed"));
  cfg.train_encoder = ck.meta("train.train_encoder") == "1";
  PolicyTrainer tr(FlowPolicy::from_checkpoint(ck, "policy."), cfg);
  tr.step_ = geti("state.step");
  tr.initial_loss_ = getd("state.initial_loss");
  tr.over_ = geti("state.over");
  tr.macs_ = getd("state.macs");
  tr.rng_.restore(ck.meta("state.rng"));
  tr.smoother_.restore(getd("state.smoother_acc"), getd("state.smoother_norm"));
  tr.opt_ = ck.get_optimizer(tr.trainable(), "opt.");
  tr.opt_.config.lr = cfg.lr;
  const Tensor& log = ck.get("state.log");
  for (Index i = 0; i < log.dim(0); ++i) tr.log_.push_back({std::int64_t(log[i * 3]), log[i * 3 + 1], log[i * 3 + 2]});
  return tr;
}

void write_loss_csv(const std::vector<LossRecord>& log, const std::filesystem::path& path) {
  std::ofstream f(path);
  if (!f) throw FormatError("cannot write " + path.string());
  f << "step,loss,smoothed_loss\n";
  char buf[96];
  for (const LossRecord& r : log) {
    std::snprintf(buf, sizeof buf, "%lld,%.9g,%.9g\n", static_cast<long long>(r.step), r.loss, r.smoothed);
    f << buf;
  }
}

std::vector<LossRecord> read_loss_csv(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw FormatError("cannot read " + path.string());
  std::string line;
  std::getline(f, line);
  if (line != "step,loss,smoothed_loss") throw FormatError(path.string() + ": unexpected loss CSV header");
  std::vector<LossRecord> out;
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    LossRecord r;
    char c1 = 0, c2 = 0;
    std::istringstream is(line);
    if (!(is >> r.step >> c1 >> r.loss >> c2 >> r.smoothed) || c1 != ',' || c2 != ',')
      throw FormatError(path.string() + ": bad loss row '" + line + "'");
    out.push_back(r);
  }
  return out;
}

void write_validation_csv(const std::vector<ValidationRecord>& log, const std::filesystem::path& path) {
  std::ofstream f(path);
  if (!f) throw FormatError("cannot write " + path.string());
  f << "step,action_mse,position_mse,rotation_geodesic_rad,gripper_mse\n";
  char buf[160];
  for (const ValidationRecord& r : log) {
    std::snprintf(buf, sizeof buf, "%lld,%.9g,%.9g,%.9g,%.9g\n", static_cast<long long>(r.step), r.report.action_mse,
                  r.report.position_mse, r.report.rotation_geodesic_rad, r.report.gripper_mse);
    f << buf;
  }
}

}  // namespace chunkflow
