#include "chunkflow/distill/distill.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <memory>
#include <sstream>

#include <spdlog/spdlog.h>

#include "chunkflow/core/errors.hpp"

namespace chunkflow {

Tensor teacher_generate(FlowPolicy& teacher, const Tensor& context, const Tensor& x0, Index steps) {
  return euler_from(teacher, context, x0, steps);
}

Teacher policy_teacher(const FlowPolicy& policy, Index steps) {
  auto frozen = std::make_shared<FlowPolicy>(policy);
  return [frozen, steps](const Tensor& context, const Tensor& x0) { return teacher_generate(*frozen, context, x0, steps); };
}

Var student_output(Tape& t, VelocityNet& net, Var cond, const Tensor& x0) {
  Var x = t.constant(x0);
  return add(x, net(t, std::vector<double>(std::size_t(x0.dim(0)), 0.0), x, cond));
}

Tensor student_generate(FlowPolicy& student, const Tensor& context, const Tensor& x0) {
  return euler_from(student, context, x0, 1);
}

Distiller::Distiller(const FlowPolicy& teacher, const DistillConfig& cfg)
    : Distiller(policy_teacher(teacher, cfg.teacher_steps), teacher, cfg) {}

Distiller::Distiller(Teacher teacher, FlowPolicy student, const DistillConfig& cfg)
    : teacher_(std::move(teacher)), student_(std::move(student)), config_(cfg), rng_(cfg.seed), smoother_(cfg.smoothing) {
  if (cfg.teacher_steps < 1) throw ConfigError("teacher_steps must be >= 1");
  opt_.config.lr = cfg.lr;
}

DistillRecord Distiller::step(const Tensor& context) {
  const PolicyConfig& pc = student_.config;
  const Index B = context.dim(0);
  const Tensor x0 = Tensor::randn({B, pc.chunk_size, pc.action_dim}, rng_);
  const Tensor target = teacher_(context, x0);
  ++step_;
  if (!target.is_finite()) {
    spdlog::warn("distill step {}: teacher output is not finite, batch skipped", step_);
    log_.push_back({step_, std::nan(""), smoother_.value(), true});
    return log_.back();
  }
  Tape t;
  const Var cond = t.constant(student_.condition(context));
  Var gap = sub(student_output(t, student_.net, cond, x0), t.constant(target));
  Var loss = scale(sum_squares(gap), 1.0 / double(B));
  t.backward(loss);
  const ParameterList params = student_.net_parameters();
  clip_global_norm(params, config_.clip);
  LrSchedule schedule{config_.cosine ? LrSchedule::Kind::kCosine : LrSchedule::Kind::kConstant, config_.lr,
                      config_.warmup, config_.steps, 0.0};
  adamw_step(params, opt_, schedule.at(step_ - 1));
  const double value = loss.value().item();
  log_.push_back({step_, value, smoother_.push(value), false});
  return log_.back();
}

void Distiller::run(const std::vector<DemoChunk>& chunks) {
  if (chunks.empty()) throw ContractError("distillation needs at least one context");
  const Index ctx = Index(chunks[0].context.size());
  while (step_ < config_.steps) {
    Tensor context({config_.batch, ctx});
    for (Index b = 0; b < config_.batch; ++b) {
      const DemoChunk& c = chunks[rng_.index(chunks.size())];
      std::copy(c.context.begin(), c.context.end(), context.data.begin() + b * ctx);
    }
    step(context);
  }
}

std::vector<LatencyResult> latency_bench(const std::vector<LatencyVariant>& variants, const Tensor& contexts, int chunks,
                                         int warmup) {
  if (chunks < 1) throw ConfigError("latency_bench needs at least one timed chunk");
  const Index n = contexts.dim(0), ctx = contexts.dim(1);
  auto row = [&](int i) {
    const Index r = Index(i) % n;
    return Tensor({1, ctx}, Storage(contexts.data.begin() + r * ctx, contexts.data.begin() + (r + 1) * ctx));
  };
  std::vector<LatencyResult> out;
  for (const LatencyVariant& v : variants) {
    for (int i = 0; i < warmup; ++i) v.run(row(i));
    std::vector<double> ms;
    ms.reserve(std::size_t(chunks));
    for (int i = 0; i < chunks; ++i) {
      const Tensor c = row(i);
      const auto t0 = std::chrono::steady_clock::now();
      v.run(c);
      ms.push_back(std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count());
    }
    std::nth_element(ms.begin(), ms.begin() + Index(ms.size() / 2), ms.end());
    const double median = ms[ms.size() / 2];
    out.push_back({v.name, v.passes_per_chunk, median, 1000.0 / median});
  }
  return out;
}

std::vector<LatencyVariant> standard_variants(FlowPolicy& flow, FlowPolicy& distilled, TokenHead& head,
                                              RvqModel& tokenizer, Index flow_steps) {
  if (head.config.hidden != flow.config.hidden) throw ConfigError("token head width differs from the policy");
  auto noise = std::make_shared<Rng>(0);
  const Shape chunk{1, flow.config.chunk_size, flow.config.action_dim};
  std::vector<LatencyVariant> v;
  v.push_back({"ar_token_head", head.config.sequence_length(), [&flow, &head, &tokenizer](const Tensor& c) {
                 const auto seqs = head.generate(flow.condition(c));
                 std::vector<TokenSequence> tokens;
                 for (const auto& s : seqs) tokens.push_back({head.config.latents, head.config.depth, s});
                 tokenizer.dequantize(tokens);
               }});
  v.push_back({"flow_s" + std::to_string(flow_steps), flow_steps, [&flow, noise, chunk, flow_steps](const Tensor& c) {
                 euler_from(flow, c, Tensor::randn(chunk, *noise), flow_steps);
               }});
  v.push_back({"distilled_s1", 1, [&distilled, noise, chunk](const Tensor& c) {
                 student_generate(distilled, c, Tensor::randn(chunk, *noise));
               }});
  return v;
}

void write_latency_csv(const std::vector<LatencyResult>& rows, const std::filesystem::path& path) {
  std::ofstream f(path);
  if (!f) throw FormatError("cannot write " + path.string());
  f << "variant,passes_per_chunk,median_ms,chunks_per_s\n";
  char buf[160];
  for (const LatencyResult& r : rows) {
    std::snprintf(buf, sizeof buf, "%s,%lld,%.6g,%.6g\n", r.variant.c_str(), static_cast<long long>(r.passes_per_chunk),
                  r.median_ms, r.chunks_per_s);
    f << buf;
  }
}

std::vector<LatencyResult> read_latency_csv(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw FormatError("cannot read " + path.string());
  std::string line;
  std::getline(f, line);
  if (line != "variant,passes_per_chunk,median_ms,chunks_per_s") throw FormatError(path.string() + ": unexpected bench header");
  std::vector<LatencyResult> out;
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string name, passes, median, rate;
    if (!std::getline(ss, name, ',') || !std::getline(ss, passes, ',') || !std::getline(ss, median, ',') ||
        !std::getline(ss, rate))
      throw FormatError(path.string() + ": bad bench row '" + line + "'");
    out.push_back({name, Index(std::stoll(passes)), std::stod(median), std::stod(rate)});
  }
  return out;
}

}  // namespace chunkflow
