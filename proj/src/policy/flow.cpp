#include "chunkflow/policy/flow.hpp"

#include <cmath>

#include "chunkflow/core/errors.hpp"

namespace chunkflow {

void PolicyConfig::validate() const {
  if (layers < 1 || hidden < 2 || cond_tokens < 1 || ffn_mult < 1) throw ConfigError("policy sizes must be positive");
  if (q_heads < 1 || kv_heads < 1 || q_heads % kv_heads != 0) throw ConfigError("q_heads must be a multiple of kv_heads");
  if (hidden % q_heads != 0 || hidden % 2 != 0) throw ConfigError("hidden must be even and divisible by q_heads");
  if (chunk_size < 1 || action_dim < 1 || context_dim < 1) throw ConfigError("policy data sizes must be positive");
  if (steps < 1) throw ConfigError("Euler steps must be >= 1");
}

ConditionEncoder::ConditionEncoder(const std::string& name, Index context_dim, Index n_tokens, Index width, Index ffn,
                                   Rng& rng)
    : input(name + ".input", context_dim, n_tokens * width, rng),
      norm(name + ".norm", width),
      ff(name + ".ff", width, ffn, rng),
      positions(name + ".positions", Tensor::randn({n_tokens, width}, rng, 0.02)),
      tokens(n_tokens),
      hidden(width) {}

Var ConditionEncoder::operator()(Tape& t, Var context) {
  ++calls;
  const Index B = context.dim(0);
  Var h = add(reshape(input(t, context), {B, tokens, hidden}), t.param(positions));
  return add(h, ff(t, norm(t, h)));
}

void ConditionEncoder::collect(ParameterList& out) {
  input.collect(out);
  norm.collect(out);
  ff.collect(out);
  out.push_back(&positions);
}

ExpertBlock::ExpertBlock(const std::string& name, const PolicyConfig& cfg, Rng& rng)
    : self_norm(name + ".self_norm", cfg.hidden),
      cross_norm(name + ".cross_norm", cfg.hidden),
      ff_norm(name + ".ff_norm", cfg.hidden),
      self_attn(name + ".self", cfg.hidden, cfg.q_heads, cfg.kv_heads, rng),
      cross_attn(name + ".cross", cfg.hidden, cfg.q_heads, cfg.kv_heads, rng),
      ff(name + ".ff", cfg.hidden, cfg.hidden * cfg.ffn_mult, rng) {}

void ExpertBlock::collect(ParameterList& out) {
  self_norm.collect(out);
  cross_norm.collect(out);
  ff_norm.collect(out);
  self_attn.collect(out);
  cross_attn.collect(out);
  ff.collect(out);
}

VelocityNet::VelocityNet(const PolicyConfig& cfg, Rng& rng)
    : config(cfg),
      in_proj("net.in", cfg.action_dim, cfg.hidden, rng),
      time_up("net.time_up", cfg.hidden, cfg.hidden, rng),
      time_down("net.time_down", cfg.hidden, cfg.hidden, rng),
      out_norm("net.out_norm", cfg.hidden),
      out_proj("net.out", cfg.hidden, cfg.action_dim, rng, 0.02),
      skip("net.skip", cfg.action_dim, cfg.action_dim, rng, 0.0) {
  cfg.validate();
  std::vector<double> rows(static_cast<std::size_t>(cfg.chunk_size));
  for (std::size_t i = 0; i < rows.size(); ++i) rows[i] = double(i) / double(cfg.chunk_size);
  row_positions = sinusoidal_embedding(rows, cfg.hidden, 100.0);
  for (Index l = 0; l < cfg.layers; ++l) blocks.emplace_back("net.block" + std::to_string(l), cfg, rng);
}

Var VelocityNet::operator()(Tape& t, const std::vector<double>& tau, Var x, Var cond) {
  ++calls;
  const Index B = x.dim(0), H = config.hidden, G = config.cond_tokens;
  if (x.value().rank() != 3 || x.dim(1) != config.chunk_size || x.dim(2) != config.action_dim)
    throw DimensionError("velocity net expects x [B, " + std::to_string(config.chunk_size) + ", " +
                         std::to_string(config.action_dim) + "], got " + shape_string(x.shape()));
  if (Index(tau.size()) != B) throw DimensionError("velocity net needs one tau per batch row");
  if (cond.value().rank() != 3 || cond.dim(0) != B || cond.dim(1) != config.total_cond_tokens() || cond.dim(2) != H)
    throw DimensionError("velocity net condition has shape " + shape_string(cond.shape()));

  Var temb = time_down(t, gelu(time_up(t, t.constant(sinusoidal_embedding(tau, H)))));
  temb = reshape(temb, {B, 1, H});
  Var h = add(in_proj(t, x), t.constant(row_positions));
  for (Index l = 0; l < config.layers; ++l) {
    ExpertBlock& blk = blocks[std::size_t(l)];
    Var c = add(slice(cond, 1, l * G, G), temb);
    Var n = blk.self_norm(t, h);
    h = add(h, blk.self_attn(t, n, n, false));
    h = add(h, blk.cross_attn(t, blk.cross_norm(t, h), c, false));
    h = add(h, blk.ff(t, blk.ff_norm(t, h)));
  }
  return add(out_proj(t, out_norm(t, h)), skip(t, x));
}

void VelocityNet::collect(ParameterList& out) {
  in_proj.collect(out);
  time_up.collect(out);
  time_down.collect(out);
  for (ExpertBlock& b : blocks) b.collect(out);
  out_norm.collect(out);
  out_proj.collect(out);
  skip.collect(out);
}

FlowPolicy::FlowPolicy(const PolicyConfig& cfg, Rng& rng)
    : config(cfg),
      encoder("cond", cfg.context_dim, cfg.total_cond_tokens(), cfg.hidden, cfg.hidden * cfg.ffn_mult, rng),
      net(cfg, rng) {}

ParameterList FlowPolicy::parameters() {
  ParameterList out = encoder_parameters();
  net.collect(out);
  return out;
}

ParameterList FlowPolicy::encoder_parameters() {
  ParameterList out;
  encoder.collect(out);
  return out;
}

ParameterList FlowPolicy::net_parameters() {
  ParameterList out;
  net.collect(out);
  return out;
}

Tensor FlowPolicy::condition(const Tensor& context) {
  Tape t;
  return encoder(t, t.constant(context)).value();
}

Tensor FlowPolicy::velocity(const std::vector<double>& tau, const Tensor& x, const Tensor& cond) {
  Tape t;
  return net(t, tau, t.constant(x), t.constant(cond)).value();
}

void FlowPolicy::write(Checkpoint& ck, const std::string& prefix) {
  ck.set_meta(prefix + "kind", "flow_policy");
  ck.set_meta(prefix + "layers", std::to_string(config.layers));
  ck.set_meta(prefix + "hidden", std::to_string(config.hidden));
  ck.set_meta(prefix + "q_heads", std::to_string(config.q_heads));
  ck.set_meta(prefix + "kv_heads", std::to_string(config.kv_heads));
  ck.set_meta(prefix + "cond_tokens", std::to_string(config.cond_tokens));
  ck.set_meta(prefix + "ffn_mult", std::to_string(config.ffn_mult));
  ck.set_meta(prefix + "chunk_size", std::to_string(config.chunk_size));
  ck.set_meta(prefix + "action_dim", std::to_string(config.action_dim));
  ck.set_meta(prefix + "context_dim", std::to_string(config.context_dim));
  ck.set_meta(prefix + "steps", std::to_string(config.steps));
  ck.put_parameters(parameters(), prefix);
}

Checkpoint FlowPolicy::to_checkpoint() {
  Checkpoint ck;
  write(ck);
  return ck;
}

FlowPolicy FlowPolicy::from_checkpoint(const Checkpoint& ck, const std::string& prefix) {
  if (!ck.has_meta(prefix + "kind") || ck.meta(prefix + "kind") != "flow_policy") throw FormatError("not a policy checkpoint");
  auto geti = [&](const char* k) { return Index(std::stoll(ck.meta(prefix + k))); };
  PolicyConfig cfg;
  cfg.layers = geti("layers");
  cfg.hidden = geti("hidden");
  cfg.q_heads = geti("q_heads");
  cfg.kv_heads = geti("kv_heads");
  cfg.cond_tokens = geti("cond_tokens");
  cfg.ffn_mult = geti("ffn_mult");
  cfg.chunk_size = geti("chunk_size");
  cfg.action_dim = geti("action_dim");
  cfg.context_dim = geti("context_dim");
  cfg.steps = geti("steps");
  Rng rng(0);
  FlowPolicy p(cfg, rng);
  ck.get_parameters(p.parameters(), prefix);
  return p;
}

double logistic(double g) { return 1.0 / (1.0 + std::exp(-g)); }

double sample_timestep(Rng& rng) { return logistic(rng.normal()); }

NoisySample make_noisy(const Tensor& actions, const Tensor& eps, const std::vector<double>& tau) {
  if (actions.shape != eps.shape) throw DimensionError("make_noisy: noise shape differs from actions");
  const Index B = actions.dim(0), per = actions.numel() / std::max<Index>(B, 1);
  if (Index(tau.size()) != B) throw DimensionError("make_noisy: one tau per row");
  NoisySample s{Tensor(actions.shape), Tensor(actions.shape)};
  for (Index b = 0; b < B; ++b) {
    const double tb = tau[std::size_t(b)];
    for (Index i = b * per; i < (b + 1) * per; ++i) {
      s.noisy[i] = (1.0 - tb) * eps[i] + tb * actions[i];
      s.target[i] = actions[i] - eps[i];
    }
  }
  return s;
}

Tensor euler_integrate(const VelocityField& v, Tensor x, Index steps) {
  if (steps < 1) throw ContractError("euler sampling needs at least one step");
  const double dt = 1.0 / double(steps);
  for (Index k = 0; k < steps; ++k) {
    const double tau = double(k) / double(steps);
    const Tensor vel = v(tau, x);
    if (vel.shape != x.shape) throw DimensionError("velocity field changed the sample shape");
    for (Index i = 0; i < x.numel(); ++i) x[i] += dt * vel[i];
  }
  return x;
}

Tensor euler_from(FlowPolicy& policy, const Tensor& context, const Tensor& x0, Index steps) {
  const Tensor cond = policy.condition(context);
  const std::size_t B = std::size_t(x0.dim(0));
  return euler_integrate(
      [&](double tau, const Tensor& x) { return policy.velocity(std::vector<double>(B, tau), x, cond); }, x0, steps);
}

Tensor euler_sample(FlowPolicy& policy, const Tensor& context, Index steps, Rng& rng) {
  const Tensor x0 = Tensor::randn({context.dim(0), policy.config.chunk_size, policy.config.action_dim}, rng);
  return euler_from(policy, context, x0, steps);
}

Var flow_matching_loss(Tape& t, VelocityNet& net, Var cond, const Tensor& actions, Rng& rng) {
  return flow_matching_loss(
      t, [&](Tape& tt, const std::vector<double>& tau, Var x) { return net(tt, tau, x, cond); }, actions, rng);
}

Var flow_matching_loss(Tape& t, const VelocityFn& velocity, const Tensor& actions, Rng& rng) {
  const Index B = actions.dim(0);
  std::vector<double> tau(static_cast<std::size_t>(B));
  for (double& v : tau) v = sample_timestep(rng);
  const Tensor eps = Tensor::randn(actions.shape, rng);
  const NoisySample s = make_noisy(actions, eps, tau);
  Var v = velocity(t, tau, t.constant(s.noisy));
  if (v.shape() != actions.shape) throw DimensionError("velocity shape " + shape_string(v.shape()) + " differs from the chunk");
  Var loss = scale(sum_squares(sub(v, t.constant(s.target))), 1.0 / double(B));
  if (!std::isfinite(loss.value().item())) {
    double lo = 1.0, hi = 0.0;
    for (double x : tau) lo = std::min(lo, x), hi = std::max(hi, x);
    throw NumericError("flow loss is not finite (batch " + std::to_string(B) + ", tau in [" + std::to_string(lo) + ", " +
                       std::to_string(hi) + "], input finite: " + (actions.is_finite() ? "yes" : "no") + ")");
  }
  return loss;
}

}  // namespace chunkflow
