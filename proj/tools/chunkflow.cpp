// chunkflow: the full pipeline as subcommands. Every run writes the resolved
// options to <out>/<subcommand>.toml, which can be fed back with --config.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include <spdlog/spdlog.h>

#include "CLI11.hpp"
#include "json.hpp"

#include "chunkflow/core/errors.hpp"
#include "chunkflow/data/datagen.hpp"
#include "chunkflow/data/shards.hpp"
#include "chunkflow/distill/distill.hpp"
#include "chunkflow/eval/figures.hpp"
#include "chunkflow/eval/statistics.hpp"
#include "chunkflow/policy/hybrid.hpp"
#include "chunkflow/scaling/scaling.hpp"
#include "chunkflow/tokenize/pareto.hpp"

using namespace chunkflow;
namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

struct Run {
  fs::path out = "out";
  std::uint64_t seed = 0;

  fs::path data() const { return out / "data"; }
  fs::path split(const std::string& name) const { return data() / name; }
};

std::string exact(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

void require_file(const fs::path& p, const char* produced_by) {
  if (!fs::exists(p)) throw FormatError(p.string() + " not found (run '" + produced_by + "' first)");
}

std::vector<DemoChunk> load_split(const fs::path& dir) {
  const auto shards = list_shards(dir);
  if (shards.empty()) throw FormatError("no shards in " + dir.string() + " (run 'gen-data' first)");
  std::vector<DemoChunk> out;
  for (const auto& s : shards)
    for (const SampleRecord& r : read_shard(s)) out.push_back(record_to_chunk(r));
  return out;
}

std::vector<DemoChunk> next_chunks(RecordStream& s, Index n) {
  std::vector<DemoChunk> out;
  while (Index(out.size()) < n) {
    auto r = s.next();
    if (!r) break;
    out.push_back(record_to_chunk(*r));
  }
  return out;
}

std::unique_ptr<RecordStream> train_stream(const Run& run, std::uint64_t salt) {
  const auto shards = list_shards(run.split("train"));
  if (shards.empty()) throw FormatError("no shards in " + run.split("train").string() + " (run 'gen-data' first)");
  return std::make_unique<PrefetchStream>(std::make_unique<ResampleStream>(shards, run.seed ^ salt));
}

json load_task(const Run& run) {
  const fs::path p = run.data() / "task.json";
  require_file(p, "gen-data");
  std::ifstream f(p);
  return json::parse(f);
}

PolicyConfig policy_for_task(PolicyConfig c, const json& task) {
  c.chunk_size = task.at("chunk_size").get<Index>();
  c.action_dim = task.at("d").get<Index>();
  c.context_dim = task.at("context_dim").get<Index>();
  return c;
}

void write_json(const fs::path& p, const json& j) {
  std::ofstream f(p);
  if (!f) throw FormatError("cannot write " + p.string());
  f << j.dump(2) << "\n";
}

// ---- gen-data ----------------------------------------------------------

struct GenOpts {
  std::string task = "default";
  Index train_chunks = 8192;
  Index eval_chunks = 512;
  std::size_t shard_size = 512;
};

int gen_data(const Run& run, const GenOpts& o) {
  TaskSpec spec = o.task == "two_mode" ? TaskSpec::two_mode_task() : TaskSpec::default_task();
  spec.seed = run.seed;
  const Dataset train = generate_dataset(spec, o.train_chunks, 0);
  const Dataset eval = generate_dataset(spec, o.eval_chunks, 1);
  for (const auto& [name, ds] : {std::pair{"train", &train}, std::pair{"eval", &eval}}) {
    std::vector<SampleRecord> records;
    for (std::size_t i = 0; i < ds->chunks.size(); ++i) {
      char key[32];
      std::snprintf(key, sizeof key, "%s%07zu", name, i);
      records.push_back(chunk_to_record(ds->chunks[i], key));
    }
    fs::remove_all(run.split(name));
    const auto files = write_shards(records, o.shard_size, run.split(name));
    spdlog::info("{}: {} chunks in {} shards", name, records.size(), files.size());
  }
  train.stats.save(run.data() / "norm_stats.json");
  write_json(run.data() / "task.json",
             {{"task", o.task}, {"seed", run.seed}, {"d", spec.d}, {"chunk_size", spec.chunk_size},
              {"context_dim", spec.context_dim}, {"modes", spec.modes.size()}});
  return 0;
}

// ---- shards ------------------------------------------------------------

struct ShardOpts {
  std::vector<std::string> inputs{"train"};
  std::string output = "resharded";
  std::size_t shard_size = 256;
  std::string dir = "train";
  std::string mix = "train=3,eval=1";
  std::int64_t draws = 10000;
};

int shards_write(const Run& run, const ShardOpts& o) {
  std::vector<SampleRecord> records;
  for (const std::string& in : o.inputs) {
    EpochStream s(list_shards(run.split(in)), run.seed);
    while (auto r = s.next()) records.push_back(std::move(*r));
  }
  fs::remove_all(run.split(o.output));
  const auto files = write_shards(records, o.shard_size, run.split(o.output));
  std::printf("wrote %zu records in %zu shards to %s\n", records.size(), files.size(), run.split(o.output).c_str());
  return 0;
}

int shards_inspect(const Run& run, const ShardOpts& o) {
  std::size_t total = 0;
  bool exact_ok = true;
  for (const auto& p : list_shards(run.split(o.dir))) {
    std::ifstream f(p, std::ios::binary);
    const std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    const auto records = untar_records(bytes);
    const bool same = tar_records(records) == bytes;
    exact_ok = exact_ok && same;
    total += records.size();
    std::string suffixes;
    if (!records.empty())
      for (const auto& [suffix, _] : records.front().entries) suffixes += (suffixes.empty() ? "" : ",") + suffix;
    std::printf("%s records=%zu first=%s entries=%s roundtrip=%s\n", p.filename().c_str(), records.size(),
                records.empty() ? "-" : records.front().key.c_str(), suffixes.c_str(), same ? "exact" : "DIFFERS");
  }
  std::printf("total records=%zu\n", total);
  return exact_ok ? 0 : 2;
}

int shards_stream_test(const Run& run, const ShardOpts& o) {
  const auto mix = parse_mix(o.mix);
  std::vector<std::unique_ptr<RecordStream>> sources;
  std::vector<double> weights;
  double wsum = 0.0;
  for (std::size_t i = 0; i < mix.size(); ++i) {
    sources.push_back(std::make_unique<ResampleStream>(list_shards(run.split(mix[i].first)), run.seed + i + 1));
    weights.push_back(mix[i].second);
    wsum += mix[i].second;
  }
  MixStream stream(std::move(sources), weights, run.seed);
  std::vector<std::int64_t> counts(mix.size(), 0);
  for (std::int64_t i = 0; i < o.draws; ++i) {
    stream.next();
    ++counts[stream.last_source()];
  }
  std::ofstream csv(run.out / "stream_test.csv");
  csv << "source,weight,draws,fraction,expected,z\n";
  bool ok = true;
  for (std::size_t i = 0; i < mix.size(); ++i) {
    const double p = weights[i] / wsum, n = double(o.draws);
    const double z = (double(counts[i]) - n * p) / std::sqrt(n * p * (1 - p));
    ok = ok && std::abs(z) <= 3.0;
    csv << mix[i].first << ',' << exact(weights[i]) << ',' << counts[i] << ',' << exact(double(counts[i]) / n) << ','
        << exact(p) << ',' << exact(z) << '\n';
    std::printf("%s: %lld of %lld draws (%.4f, expected %.4f, z=%.2f)\n", mix[i].first.c_str(),
                static_cast<long long>(counts[i]), static_cast<long long>(o.draws), double(counts[i]) / n, p, z);
  }

  // One epoch over the first source: every record exactly once.
  std::map<std::string, int> seen;
  std::size_t stored = 0;
  const auto shards = list_shards(run.split(mix[0].first));
  for (const auto& s : shards) stored += read_shard(s).size();
  EpochStream epoch(shards, run.seed);
  while (auto r = epoch.next()) ++seen[r->key];
  const bool once = seen.size() == stored && std::all_of(seen.begin(), seen.end(), [](auto& kv) { return kv.second == 1; });
  std::printf("epoch over %s: %zu distinct of %zu records, each once: %s\n", mix[0].first.c_str(), seen.size(), stored,
              once ? "yes" : "no");
  return ok && once ? 0 : 2;
}

// ---- train-tokenizer ---------------------------------------------------

struct TokOpts {
  std::int64_t steps = 2000;
  Index batch = 32;
  double lr = 1e-3;
  Index latents = 8;
  Index latent_dim = 64;
  Index depth = 4;
  Index codebook = 256;
  Index hidden = 64;
  bool ema = true;
  bool restarts = true;
  int restart_period = 500;
  std::string distance = "cosine";
  std::int64_t log_every = 100;
};

int train_tokenizer(const Run& run, const TokOpts& o) {
  const json task = load_task(run);
  const NormStats stats = NormStats::load(run.data() / "norm_stats.json");
  RvqConfig c;
  c.chunk_size = task.at("chunk_size").get<Index>();
  c.action_dim = task.at("d").get<Index>();
  c.latents = o.latents;
  c.latent_dim = o.latent_dim;
  c.depth = o.depth;
  c.codebook_size = o.codebook;
  c.hidden = o.hidden;
  c.use_ema = o.ema;
  c.restarts = o.restarts;
  c.restart_period = o.restart_period;
  if (o.distance != "cosine" && o.distance != "euclidean") throw ConfigError("distance must be cosine or euclidean");
  c.distance = o.distance == "cosine" ? Distance::kCosine : Distance::kEuclidean;
  c.validate();

  Rng rng(run.seed);
  RvqModel model(c, rng);
  OptimizerState opt;
  auto stream = train_stream(run, 0x746f6b);
  std::ofstream csv(run.out / "tokenizer_loss.csv");
  csv << "step,loss,reconstruction,codebook,commitment,restarts\n";
  for (std::int64_t s = 0; s < o.steps; ++s) {
    const RvqStepStats st = rvq_train_step(model, opt, stack_normalized(next_chunks(*stream, o.batch), stats), rng, o.lr);
    csv << s + 1 << ',' << exact(st.loss) << ',' << exact(st.reconstruction) << ',' << exact(st.codebook) << ','
        << exact(st.commitment) << ',' << st.restarts << '\n';
    if (o.log_every > 0 && (s + 1) % o.log_every == 0)
      spdlog::info("tokenizer step {} loss {:.4f} reconstruction {:.4f}", s + 1, st.loss, st.reconstruction);
  }
  model.to_checkpoint().save(run.out / "tokenizer.ckpt");

  const auto eval = load_split(run.split("eval"));
  const auto util = codebook_utilization(model, stack_normalized(eval, stats));
  std::ofstream u(run.out / "tokenizer_utilization.csv");
  u << "depth,utilization\n";
  for (std::size_t j = 0; j < util.size(); ++j) {
    u << j + 1 << ',' << exact(util[j]) << '\n';
    spdlog::info("depth {} utilization {:.3f}", j + 1, util[j]);
  }
  return 0;
}

// ---- tokenize ----------------------------------------------------------

struct TokenizeOpts {
  std::string split = "eval";
  bool pareto = false;
  int bpe_merges = 1024;
};

int tokenize(const Run& run, const TokenizeOpts& o) {
  require_file(run.out / "tokenizer.ckpt", "train-tokenizer");
  RvqModel model = RvqModel::from_checkpoint(Checkpoint::load(run.out / "tokenizer.ckpt"));
  const NormStats stats = NormStats::load(run.data() / "norm_stats.json");
  const auto chunks = load_split(run.split(o.split));
  const auto tokens = tokenize_chunks(model, chunks, stats);
  std::ofstream csv(run.out / "tokens.csv");
  csv << "index,tokens\n";
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    csv << i << ',';
    TokenSequence seq{model.config.latents, model.config.depth, tokens[i]};
    const auto ids = seq.vocab_ids(model.config.vocab_offset, model.config.codebook_size);
    for (std::size_t k = 0; k < ids.size(); ++k) csv << (k ? " " : "") << ids[k];
    csv << '\n';
  }
  spdlog::info("tokenized {} chunks into {} tokens each", tokens.size(), tokens.empty() ? 0 : tokens[0].size());
  if (o.pareto) {
    ParetoConfig pc;
    pc.bpe_merges = o.bpe_merges;
    const auto pts = pareto_sweep(model, stats, load_split(run.split("train")), load_split(run.split("eval")), pc);
    write_pareto_csv(pts, run.out / "pareto.csv");
    for (const MatchedPoint& m : matched_error_points(pts))
      spdlog::info("pos mse {:.3e}: rvq {} dct_bpe {:.1f} binning {}", m.target_pos_mse, m.rvq, m.dct_bpe, m.binning);
  }
  return 0;
}

// ---- train-policy ------------------------------------------------------

struct PolicyOpts {
  PolicyConfig policy;
  PolicyTrainConfig train;
  std::string mode = "flow";
  std::int64_t checkpoint_every = 0;
  bool resume = false;
  std::int64_t pretrain_steps = 1000;
  double pretrain_lr = 1e-4;
  std::int64_t log_every = 100;
};

int train_policy(const Run& run, PolicyOpts o) {
  const json task = load_task(run);
  const NormStats stats = NormStats::load(run.data() / "norm_stats.json");
  o.policy = policy_for_task(o.policy, task);
  o.policy.validate();
  o.train.seed = run.seed;

  if (o.mode == "ablation") {
    require_file(run.out / "tokenizer.ckpt", "train-tokenizer");
    RvqModel tokenizer = RvqModel::from_checkpoint(Checkpoint::load(run.out / "tokenizer.ckpt"));
    Dataset data;
    data.chunks = load_split(run.split("train"));
    data.stats = stats;
    HybridConfig hc;
    hc.policy = o.policy;
    hc.flow = o.train;
    hc.pretrain_steps = o.pretrain_steps;
    hc.pretrain_lr = o.pretrain_lr;
    const HybridResult r = hybrid_vs_scratch(data, tokenizer, hc);
    write_ablation_csv(r, run.out / "ablation.csv");
    std::ofstream ce(run.out / "pretrain_loss.csv");
    ce << "step,cross_entropy\n";
    for (std::size_t i = 0; i < r.hybrid.ce_loss.size(); ++i) ce << i + 1 << ',' << exact(r.hybrid.ce_loss[i]) << '\n';
    std::printf("hybrid final smoothed loss %.4f (%zu flow steps), scratch %.4f (%zu steps), compute %.3e MACs\n",
                r.hybrid.final_smoothed(), r.hybrid.flow_log.size(), r.scratch.final_smoothed(), r.scratch.flow_log.size(),
                r.hybrid.compute_macs);
    return 0;
  }
  if (o.mode != "flow") throw ConfigError("mode must be flow or ablation");

  const fs::path ckpt = run.out / "policy.ckpt";
  std::unique_ptr<PolicyTrainer> tr;
  if (o.resume && fs::exists(ckpt)) {
    tr = std::make_unique<PolicyTrainer>(PolicyTrainer::from_checkpoint(Checkpoint::load(ckpt)));
    tr->set_total_steps(o.train.steps);
    spdlog::info("resumed at step {}", tr->steps_done());
  } else {
    Rng init(run.seed);
    tr = std::make_unique<PolicyTrainer>(FlowPolicy(o.policy, init), o.train);
  }
  const auto eval = load_split(run.split("eval"));
  const std::vector<DemoChunk> val(eval.begin(), eval.begin() + std::min<std::ptrdiff_t>(256, std::ptrdiff_t(eval.size())));
  auto stream = train_stream(run, 0x706f6c ^ std::uint64_t(tr->steps_done()));
  std::vector<ValidationRecord> validation;
  while (tr->steps_done() < o.train.steps) {
    const LossRecord rec = tr->step(make_batch(next_chunks(*stream, o.train.batch), stats));
    const std::int64_t s = rec.step;
    if (o.log_every > 0 && s % o.log_every == 0) spdlog::info("policy step {} smoothed loss {:.4f}", s, rec.smoothed);
    if (o.train.eval_every > 0 && s % o.train.eval_every == 0) {
      Rng vr(run.seed ^ std::uint64_t(s));
      validation.push_back({s, validate_policy(tr->policy(), val, stats, o.policy.steps, vr)});
      spdlog::info("step {} validation position_mse {:.3e}", s, validation.back().report.position_mse);
    }
    if (o.checkpoint_every > 0 && s % o.checkpoint_every == 0)
      tr->to_checkpoint().save(run.out / ("policy-step" + std::to_string(s) + ".ckpt"));
  }
  tr->to_checkpoint().save(ckpt);
  write_loss_csv(tr->log(), run.out / "policy_loss.csv");
  write_validation_csv(validation, run.out / "policy_validation.csv");
  return 0;
}

// ---- distill -----------------------------------------------------------

int distill(const Run& run, DistillConfig dc) {
  require_file(run.out / "policy.ckpt", "train-policy");
  dc.seed = run.seed;
  FlowPolicy teacher = FlowPolicy::from_checkpoint(Checkpoint::load(run.out / "policy.ckpt"), "policy.");
  Distiller d(teacher, dc);
  auto stream = train_stream(run, 0x646973);
  while (d.steps_done() < dc.steps) {
    const auto chunks = next_chunks(*stream, dc.batch);
    Tensor ctx({Index(chunks.size()), Index(chunks[0].context.size())});
    for (std::size_t i = 0; i < chunks.size(); ++i)
      std::copy(chunks[i].context.begin(), chunks[i].context.end(), ctx.data.begin() + std::ptrdiff_t(i * chunks[i].context.size()));
    const DistillRecord r = d.step(ctx);
    if (r.step % 50 == 0) spdlog::info("distill step {} smoothed loss {:.5f}", r.step, r.smoothed);
  }
  Checkpoint ck;
  d.student().write(ck, "policy.");
  ck.set_meta("distill.teacher_steps", std::to_string(dc.teacher_steps));
  ck.save(run.out / "distilled.ckpt");
  std::ofstream csv(run.out / "distill_loss.csv");
  csv << "step,loss,smoothed_loss,skipped\n";
  for (const DistillRecord& r : d.log())
    csv << r.step << ',' << exact(r.loss) << ',' << exact(r.smoothed) << ',' << (r.skipped ? 1 : 0) << '\n';
  return 0;
}

// ---- scaling -----------------------------------------------------------

struct FitOpts {
  std::string input = "scaling_points.csv";
};

void report_fit(const Run& run, const std::vector<LossPoint>& pts) {
  const ScalingFit fit = fit_scaling_law(pts);
  std::vector<double> sizes, levels;
  for (const LossPoint& p : pts)
    if (std::find(sizes.begin(), sizes.end(), p.N) == sizes.end()) sizes.push_back(p.N);
  double lo = pts[0].loss, hi = pts[0].loss;
  for (const LossPoint& p : pts) lo = std::min(lo, p.loss), hi = std::max(hi, p.loss);
  for (int k = 1; k <= 3; ++k) levels.push_back(lo + (hi - lo) * k / 4.0);
  const std::string report = scaling_report(fit, sizes, levels);
  std::ofstream(run.out / "scaling_fit.txt") << report;
  write_json(run.out / "scaling_fit.json", {{"E", fit.params.E},
                                            {"A", fit.params.A},
                                            {"alpha", fit.params.alpha},
                                            {"B", fit.params.B},
                                            {"beta", fit.params.beta},
                                            {"objective", fit.objective},
                                            {"rmse", fit.rmse},
                                            {"converged", fit.converged},
                                            {"iterations", fit.iterations},
                                            {"loss_kind", fit.loss_kind}});
  std::cout << report;
}

int fit_scaling(const Run& run, const FitOpts& o) {
  const fs::path in = fs::path(o.input).is_absolute() ? fs::path(o.input) : run.out / o.input;
  require_file(in, "sweep-scaling");
  report_fit(run, read_loss_points(in));
  return 0;
}

struct SweepOpts {
  std::vector<Index> hidden{16, 32, 64, 128};
  Index layers = 2;
  Index batch = 32;
  Index checkpoint_every = 8;
  double lr = 1e-3;
  std::int64_t warmup = 20;
  bool fit = true;
};

int sweep_scaling(const Run& run, const SweepOpts& o) {
  const json task = load_task(run);
  const NormStats stats = NormStats::load(run.data() / "norm_stats.json");
  std::vector<SweepArm> arms;
  for (Index h : o.hidden) {
    PolicyConfig pc;
    pc.layers = o.layers;
    pc.hidden = h;
    pc.q_heads = std::max<Index>(2, h / 16);
    pc.kv_heads = std::max<Index>(1, pc.q_heads / 2);
    pc = policy_for_task(pc, task);
    pc.validate();
    PolicyTrainConfig tc;
    tc.lr = o.lr;
    tc.warmup = o.warmup;
    tc.batch = o.batch;
    tc.seed = run.seed;
    arms.push_back(policy_sweep_arm("h" + std::to_string(h), pc, tc, stats));
  }
  SweepConfig sc;
  sc.batch = o.batch;
  sc.checkpoint_every = o.checkpoint_every;
  sc.tokens_per_sample = task.at("chunk_size").get<Index>();
  const auto shards = list_shards(run.split("train"));
  const StreamFactory epoch = [&] { return std::make_unique<EpochStream>(shards, run.seed); };
  const auto curves = sweep_protocol(arms, epoch, sc);

  std::vector<LossPoint> all;
  std::ofstream csv(run.out / "scaling_curves.csv");
  csv << "arm,N,D,loss,standard_error\n";
  for (const SweepCurve& c : curves)
    for (std::size_t k = 0; k < c.points.size(); ++k) {
      all.push_back(c.points[k]);
      csv << c.name << ',' << exact(c.points[k].N) << ',' << exact(c.points[k].D) << ',' << exact(c.points[k].loss) << ','
          << exact(c.standard_errors[k]) << '\n';
    }
  write_loss_points(all, run.out / "scaling_points.csv");
  if (o.fit) report_fit(run, all);
  return 0;
}

// ---- bench-latency -----------------------------------------------------

struct BenchOpts {
  int chunks = 200;
  int warmup = 20;
};

int bench_latency(const Run& run, const BenchOpts& o) {
  for (const char* f : {"policy.ckpt", "distilled.ckpt", "tokenizer.ckpt"})
    require_file(run.out / f, std::string(f) == "distilled.ckpt" ? "distill" : std::string(f) == "policy.ckpt" ? "train-policy" : "train-tokenizer");
  FlowPolicy flow = FlowPolicy::from_checkpoint(Checkpoint::load(run.out / "policy.ckpt"), "policy.");
  FlowPolicy student = FlowPolicy::from_checkpoint(Checkpoint::load(run.out / "distilled.ckpt"), "policy.");
  RvqModel tokenizer = RvqModel::from_checkpoint(Checkpoint::load(run.out / "tokenizer.ckpt"));
  // Timing depends on the head's shape only, so an untrained head is used.
  TokenHeadConfig hc;
  hc.hidden = flow.config.hidden;
  hc.q_heads = flow.config.q_heads;
  hc.kv_heads = flow.config.kv_heads;
  hc.latents = tokenizer.config.latents;
  hc.depth = tokenizer.config.depth;
  hc.codebook_size = tokenizer.config.codebook_size;
  Rng rng(run.seed);
  TokenHead head(hc, rng);
  const auto eval = load_split(run.split("eval"));
  const Index n = std::min<Index>(64, Index(eval.size())), cd = Index(eval[0].context.size());
  Tensor ctx({n, cd});
  for (Index i = 0; i < n; ++i) std::copy(eval[std::size_t(i)].context.begin(), eval[std::size_t(i)].context.end(), ctx.data.begin() + i * cd);
  const auto rows = latency_bench(standard_variants(flow, student, head, tokenizer, flow.config.steps), ctx, o.chunks, o.warmup);
  write_latency_csv(rows, run.out / "latency.csv");
  for (const LatencyResult& r : rows)
    std::printf("%-14s passes %3lld  median %.3f ms  %.1f chunks/s\n", r.variant.c_str(),
                static_cast<long long>(r.passes_per_chunk), r.median_ms, r.chunks_per_s);
  return 0;
}

// ---- eval --------------------------------------------------------------

struct EvalOpts {
  double threshold = 0.05;  // meters, position RMSE over the chunk
  Index limit = 0;
};

int evaluate(const Run& run, const EvalOpts& o) {
  require_file(run.out / "policy.ckpt", "train-policy");
  const NormStats stats = NormStats::load(run.data() / "norm_stats.json");
  auto eval = load_split(run.split("eval"));
  if (o.limit > 0 && Index(eval.size()) > o.limit) eval.resize(std::size_t(o.limit));
  const FlowBatch batch = make_batch(eval, stats);
  const Index T = batch.actions.dim(1), d = batch.actions.dim(2);
  const ActionLayout layout = ActionLayout::for_dimension(d);

  std::vector<Tensor> gt;
  for (const DemoChunk& c : eval) gt.push_back(c.actions);
  // Reference for the aggregate: the training mean predicted everywhere.
  std::vector<Tensor> mean_pred(eval.size(), stats.denormalize(Tensor({T, d})));
  const EvalReport reference = batch_metrics(mean_pred, gt, layout);

  struct Variant {
    std::string name, file;
    Index steps;
  };
  std::vector<Variant> variants{{"flow", "policy.ckpt", -1}};
  if (fs::exists(run.out / "distilled.ckpt")) variants.push_back({"distilled", "distilled.ckpt", 1});

  std::ofstream csv(run.out / "eval.csv");
  csv << "variant,euler_steps,action_mse,position_mse,rotation_geodesic_rad,gripper_mse,aggregate,samples,success_rate,"
         "success_se\n";
  for (const Variant& v : variants) {
    FlowPolicy policy = FlowPolicy::from_checkpoint(Checkpoint::load(run.out / v.file), "policy.");
    const Index S = v.steps > 0 ? v.steps : policy.config.steps;
    Rng rng(run.seed);
    const Tensor x0 = Tensor::randn(batch.actions.shape, rng);
    const Tensor out = v.name == "distilled" ? student_generate(policy, batch.context, x0)
                                             : euler_from(policy, batch.context, x0, S);
    std::vector<Tensor> pred;
    std::vector<double> errors;
    for (std::size_t i = 0; i < eval.size(); ++i) {
      Tensor p({T, d}, std::vector<double>(out.data.begin() + std::ptrdiff_t(i) * T * d, out.data.begin() + std::ptrdiff_t(i + 1) * T * d));
      pred.push_back(stats.denormalize(p));
      errors.push_back(std::sqrt(chunk_metrics(pred.back(), gt[i], layout).position_mse));
    }
    const EvalReport r = batch_metrics(pred, gt, layout);
    const std::vector<int> trials = trials_from_errors(errors, o.threshold);
    const SuccessCurve sc = success_rate_with_se(trials);
    if (v.name == "flow") write_trials_csv(trials, run.out / "trials.csv");
    csv << v.name << ',' << S << ',' << exact(r.action_mse) << ',' << exact(r.position_mse) << ','
        << exact(r.rotation_geodesic_rad) << ',' << exact(r.gripper_mse) << ',' << exact(r.aggregate(reference)) << ','
        << r.samples << ',' << exact(sc.final.p_hat) << ',' << exact(sc.final.standard_error) << '\n';
    std::printf("%-10s S=%lld position_mse %.3e rotation %.4f rad success %.3f +- %.3f\n", v.name.c_str(),
                static_cast<long long>(S), r.position_mse, r.rotation_geodesic_rad, sc.final.p_hat, sc.final.standard_error);
  }
  return 0;
}

// ---- argv handling -----------------------------------------------------

// "--set key=value" and "--set=key=value" become "--key=value".
std::vector<std::string> expand_set(int argc, char** argv) {
  std::vector<std::string> out;
  for (int i = 1; i < argc; ++i) {
    std::string a = argv[i];
    std::string kv;
    if (a == "--set") {
      if (i + 1 >= argc) throw CLI::ArgumentMismatch("--set needs key=value");
      kv = argv[++i];
    } else if (a.rfind("--set=", 0) == 0) {
      kv = a.substr(6);
    } else {
      out.push_back(a);
      continue;
    }
    const auto eq = kv.find('=');
    if (eq == std::string::npos || eq == 0) throw CLI::ArgumentMismatch("--set expects key=value, got '" + kv + "'");
    std::string key = kv.substr(0, eq);
    std::replace(key.begin(), key.end(), '_', '-');
    out.push_back("--" + key + "=" + kv.substr(eq + 1));
  }
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"chunkflow: action-chunk tokenizers, flow policies and their evaluation", "chunkflow"};
  app.require_subcommand(1);
  app.fallthrough();
  app.set_config("--config", "", "TOML file with option values; sections name subcommands");
  app.set_help_all_flag("--help-all", "Expand all help");

  Run run;
  app.add_option("--out", run.out, "Run directory")->envname("CHUNKFLOW_OUT")->capture_default_str();
  app.add_option("--seed", run.seed, "Random seed")->capture_default_str();
  bool verbose = false;
  app.add_flag("-v,--verbose", verbose, "Log progress");

  GenOpts gen;
  auto* gen_cmd = app.add_subcommand("gen-data", "Generate synthetic demonstration shards");
  gen_cmd->add_option("--task", gen.task, "default or two_mode")->check(CLI::IsMember({"default", "two_mode"}))->capture_default_str();
  gen_cmd->add_option("--train-chunks", gen.train_chunks)->capture_default_str();
  gen_cmd->add_option("--eval-chunks", gen.eval_chunks)->capture_default_str();
  gen_cmd->add_option("--shard-size", gen.shard_size)->capture_default_str();

  ShardOpts sh;
  auto* sh_cmd = app.add_subcommand("shards", "Write, inspect and stream shards");
  sh_cmd->require_subcommand(1);
  auto* sh_write = sh_cmd->add_subcommand("write", "Re-shard splits into a new directory");
  sh_write->add_option("--inputs", sh.inputs, "Split directories under <out>/data")->capture_default_str();
  sh_write->add_option("--output", sh.output)->capture_default_str();
  sh_write->add_option("--shard-size", sh.shard_size)->capture_default_str();
  auto* sh_inspect = sh_cmd->add_subcommand("inspect", "List shards and check byte-exact round trips");
  sh_inspect->add_option("--dir", sh.dir)->capture_default_str();
  auto* sh_stream = sh_cmd->add_subcommand("stream-test", "Check mixing proportions and epoch coverage");
  sh_stream->add_option("--mix", sh.mix, "name=weight,... over split directories")->capture_default_str();
  sh_stream->add_option("--draws", sh.draws)->capture_default_str();

  TokOpts tok;
  auto* tok_cmd = app.add_subcommand("train-tokenizer", "Train the residual VQ tokenizer");
  tok_cmd->add_option("--steps", tok.steps)->capture_default_str();
  tok_cmd->add_option("--batch", tok.batch)->capture_default_str();
  tok_cmd->add_option("--lr", tok.lr)->capture_default_str();
  tok_cmd->add_option("--latents", tok.latents)->capture_default_str();
  tok_cmd->add_option("--latent-dim", tok.latent_dim)->capture_default_str();
  tok_cmd->add_option("--depth", tok.depth)->capture_default_str();
  tok_cmd->add_option("--codebook", tok.codebook)->capture_default_str();
  tok_cmd->add_option("--hidden", tok.hidden)->capture_default_str();
  tok_cmd->add_option("--ema", tok.ema)->capture_default_str();
  tok_cmd->add_option("--restarts", tok.restarts)->capture_default_str();
  tok_cmd->add_option("--restart-period", tok.restart_period)->capture_default_str();
  tok_cmd->add_option("--distance", tok.distance)->check(CLI::IsMember({"cosine", "euclidean"}))->capture_default_str();
  tok_cmd->add_option("--log-every", tok.log_every)->capture_default_str();

  TokenizeOpts tz;
  auto* tz_cmd = app.add_subcommand("tokenize", "Encode a split; optionally sweep all tokenizers");
  tz_cmd->add_option("--split", tz.split)->capture_default_str();
  tz_cmd->add_option("--pareto", tz.pareto, "Also write pareto.csv")->capture_default_str();
  tz_cmd->add_option("--bpe-merges", tz.bpe_merges)->capture_default_str();

  PolicyOpts po;
  po.train.eval_every = 0;
  auto* po_cmd = app.add_subcommand("train-policy", "Train the flow policy, or run the hybrid ablation");
  po_cmd->add_option("--mode", po.mode, "flow or ablation")->check(CLI::IsMember({"flow", "ablation"}))->capture_default_str();
  po_cmd->add_option("--layers", po.policy.layers)->capture_default_str();
  po_cmd->add_option("--hidden", po.policy.hidden)->capture_default_str();
  po_cmd->add_option("--q-heads", po.policy.q_heads)->capture_default_str();
  po_cmd->add_option("--kv-heads", po.policy.kv_heads)->capture_default_str();
  po_cmd->add_option("--cond-tokens", po.policy.cond_tokens)->capture_default_str();
  po_cmd->add_option("--ffn-mult", po.policy.ffn_mult)->capture_default_str();
  po_cmd->add_option("--euler-steps", po.policy.steps)->capture_default_str();
  po_cmd->add_option("--steps", po.train.steps)->capture_default_str();
  po_cmd->add_option("--batch", po.train.batch)->capture_default_str();
  po_cmd->add_option("--lr", po.train.lr)->capture_default_str();
  po_cmd->add_option("--warmup", po.train.warmup)->capture_default_str();
  po_cmd->add_option("--clip", po.train.clip)->capture_default_str();
  po_cmd->add_option("--eval-every", po.train.eval_every)->capture_default_str();
  po_cmd->add_option("--checkpoint-every", po.checkpoint_every)->capture_default_str();
  po_cmd->add_option("--resume", po.resume)->capture_default_str();
  po_cmd->add_option("--pretrain-steps", po.pretrain_steps)->capture_default_str();
  po_cmd->add_option("--pretrain-lr", po.pretrain_lr)->capture_default_str();
  po_cmd->add_option("--log-every", po.log_every)->capture_default_str();

  DistillConfig dc;
  auto* di_cmd = app.add_subcommand("distill", "Distill the flow policy into a one-pass student");
  di_cmd->add_option("--steps", dc.steps)->capture_default_str();
  di_cmd->add_option("--batch", dc.batch)->capture_default_str();
  di_cmd->add_option("--lr", dc.lr)->capture_default_str();
  di_cmd->add_option("--warmup", dc.warmup)->capture_default_str();
  di_cmd->add_option("--teacher-steps", dc.teacher_steps)->capture_default_str();
  di_cmd->add_option("--cosine", dc.cosine)->capture_default_str();

  FitOpts fo;
  auto* fit_cmd = app.add_subcommand("fit-scaling-law", "Fit L(N, D) = E + A/N^alpha + B/D^beta");
  fit_cmd->add_option("--input", fo.input, "N,D,loss CSV, relative to --out")->capture_default_str();

  SweepOpts so;
  auto* sw_cmd = app.add_subcommand("sweep-scaling", "Train several policy sizes for one epoch and fit");
  sw_cmd->add_option("--hidden-sizes", so.hidden)->delimiter(',')->capture_default_str();
  sw_cmd->add_option("--layers", so.layers)->capture_default_str();
  sw_cmd->add_option("--batch", so.batch)->capture_default_str();
  sw_cmd->add_option("--checkpoint-every", so.checkpoint_every)->capture_default_str();
  sw_cmd->add_option("--lr", so.lr)->capture_default_str();
  sw_cmd->add_option("--warmup", so.warmup)->capture_default_str();
  sw_cmd->add_option("--fit", so.fit)->capture_default_str();

  BenchOpts bo;
  auto* be_cmd = app.add_subcommand("bench-latency", "Time token head, flow and distilled inference");
  be_cmd->add_option("--chunks", bo.chunks)->capture_default_str();
  be_cmd->add_option("--warmup", bo.warmup)->capture_default_str();

  EvalOpts eo;
  auto* ev_cmd = app.add_subcommand("eval", "Score policies on the held-out split");
  ev_cmd->add_option("--threshold", eo.threshold, "Success if chunk position RMSE <= threshold (m)")->capture_default_str();
  ev_cmd->add_option("--limit", eo.limit, "Evaluate at most this many chunks (0: all)")->capture_default_str();

  std::vector<std::string> only;
  auto* fig_cmd = app.add_subcommand("emit-figures", "Write figure CSVs and SVG plots under <out>/figures");
  fig_cmd->add_option("--only", only, "Figure names to emit");

  try {
    std::vector<std::string> args = expand_set(argc, argv);
    std::reverse(args.begin(), args.end());
    app.parse(args);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 1;
  }

  spdlog::set_level(verbose ? spdlog::level::info : spdlog::level::warn);
  try {
    fs::create_directories(run.out / "data");
    const CLI::App* sub = app.get_subcommands().front();
    std::ofstream(run.out / (sub->get_name() + ".toml")) << app.config_to_str(true, false);

    if (sub == gen_cmd) return gen_data(run, gen);
    if (sub == sh_cmd) {
      if (sh_write->parsed()) return shards_write(run, sh);
      if (sh_inspect->parsed()) return shards_inspect(run, sh);
      return shards_stream_test(run, sh);
    }
    if (sub == tok_cmd) return train_tokenizer(run, tok);
    if (sub == tz_cmd) return tokenize(run, tz);
    if (sub == po_cmd) return train_policy(run, po);
    if (sub == di_cmd) return distill(run, dc);
    if (sub == fit_cmd) return fit_scaling(run, fo);
    if (sub == sw_cmd) return sweep_scaling(run, so);
    if (sub == be_cmd) return bench_latency(run, bo);
    if (sub == ev_cmd) return evaluate(run, eo);
    if (sub == fig_cmd) {
      for (const auto& p : emit_figures(run.out, only)) std::printf("%s\n", p.c_str());
      return 0;
    }
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  }
  return 2;
}
