#include "chunkflow/policy/hybrid.hpp"

#include <cstdio>
#include <fstream>

#include <spdlog/spdlog.h>

#include "chunkflow/core/errors.hpp"

namespace chunkflow {

std::vector<std::vector<int>> tokenize_chunks(RvqModel& tokenizer, const std::vector<DemoChunk>& chunks,
                                              const NormStats& stats) {
  std::vector<std::vector<int>> out;
  out.reserve(chunks.size());
  constexpr std::size_t kBlock = 256;
  for (std::size_t lo = 0; lo < chunks.size(); lo += kBlock) {
    const std::size_t hi = std::min(chunks.size(), lo + kBlock);
    std::vector<DemoChunk> part(chunks.begin() + Index(lo), chunks.begin() + Index(hi));
    const QuantizeResult q = tokenizer.quantize(make_batch(part, stats).actions);
    for (const TokenSequence& s : q.tokens) out.push_back(s.indices);
  }
  return out;
}

PretrainResult pretrain_encoder(FlowPolicy& policy, TokenHead& head, const std::vector<DemoChunk>& chunks,
                                const std::vector<std::vector<int>>& tokens, const HybridConfig& cfg, Rng& rng) {
  if (chunks.size() != tokens.size()) throw ContractError("pretrain_encoder: one token sequence per chunk");
  ParameterList params = policy.encoder_parameters();
  head.collect(params);
  OptimizerState opt;
  opt.config.lr = cfg.pretrain_lr;
  const LrSchedule schedule{LrSchedule::Kind::kConstant, cfg.pretrain_lr, cfg.flow.warmup};
  const Index B = cfg.flow.batch, ctx = policy.config.context_dim;
  PretrainResult res;
  for (std::int64_t s = 0; s < cfg.pretrain_steps; ++s) {
    Tensor context({B, ctx});
    std::vector<std::vector<int>> seqs;
    for (Index b = 0; b < B; ++b) {
      const std::size_t i = rng.index(chunks.size());
      std::copy(chunks[i].context.begin(), chunks[i].context.end(), context.data.begin() + b * ctx);
      seqs.push_back(tokens[i]);
    }
    Tape t;
    Var loss = head.loss(t, policy.encoder(t, t.constant(context)), seqs);
    t.backward(loss);
    res.compute_macs += 3.0 * t.macs();
    clip_global_norm(params, cfg.flow.clip);
    adamw_step(params, opt, schedule.at(s));
    res.losses.push_back(loss.value().item());
  }
  return res;
}

ArmResult train_scratch(FlowPolicy policy, const Dataset& data, const PolicyTrainConfig& cfg, double compute_macs) {
  PolicyTrainConfig c = cfg;
  c.train_encoder = true;
  PolicyTrainer tr(std::move(policy), c);
  while (tr.compute_macs() < compute_macs) tr.step(sample_batch(data.chunks, data.stats, c.batch, tr.rng()));
  return {"scratch", {}, tr.log(), tr.compute_macs()};
}

HybridResult hybrid_vs_scratch(const Dataset& data, RvqModel& tokenizer, const HybridConfig& cfg) {
  cfg.policy.validate();
  TokenHeadConfig hc = cfg.head;
  hc.hidden = cfg.policy.hidden;
  hc.latents = tokenizer.config.latents;
  hc.depth = tokenizer.config.depth;
  hc.codebook_size = tokenizer.config.codebook_size;

  Rng init(cfg.flow.seed);
  const FlowPolicy initial(cfg.policy, init);
  TokenHead head(hc, init);
  Rng data_rng(cfg.flow.seed ^ 0x9e3779b97f4a7c15ULL);

  HybridResult out;
  FlowPolicy pretrained = initial;
  const std::vector<std::vector<int>> tokens = tokenize_chunks(tokenizer, data.chunks, data.stats);
  const PretrainResult pre = pretrain_encoder(pretrained, head, data.chunks, tokens, cfg, data_rng);
  spdlog::info("hybrid pretraining: cross entropy {:.4f} -> {:.4f}", pre.losses.front(), pre.losses.back());

  PolicyTrainConfig fc = cfg.flow;
  fc.train_encoder = false;
  PolicyTrainer tr(std::move(pretrained), fc);
  tr.run(data.chunks, data.stats);
  out.hybrid = {"hybrid", pre.losses, tr.log(), pre.compute_macs + tr.compute_macs()};

  out.scratch = train_scratch(initial, data, cfg.flow, out.hybrid.compute_macs);
  return out;
}

void write_ablation_csv(const HybridResult& result, const std::filesystem::path& path) {
  std::ofstream f(path);
  if (!f) throw FormatError("cannot write " + path.string());
  f << "arm,step,loss,smoothed_loss\n";
  char buf[128];
  for (const ArmResult* arm : {&result.hybrid, &result.scratch})
    for (const LossRecord& r : arm->flow_log) {
      std::snprintf(buf, sizeof buf, "%s,%lld,%.9g,%.9g\n", arm->name.c_str(), static_cast<long long>(r.step), r.loss,
                    r.smoothed);
      f << buf;
    }
}

}  // namespace chunkflow
