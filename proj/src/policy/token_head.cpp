#include "chunkflow/policy/token_head.hpp"

#include <algorithm>
#include <cmath>

#include "chunkflow/core/errors.hpp"

namespace chunkflow {
namespace {

int input_id(const TokenHeadConfig& cfg, const std::vector<int>& seq, Index p) {
  if (p == 0) return int(cfg.depth * cfg.codebook_size);  // BOS
  const Index prev = p - 1;
  return int((prev % cfg.depth) * cfg.codebook_size) + seq[std::size_t(prev)];
}

std::vector<int> argmax_rows(const Tensor& logits) {
  const Index K = logits.dim(-1), rows = logits.numel() / K;
  std::vector<int> out(static_cast<std::size_t>(rows));
  for (Index r = 0; r < rows; ++r) {
    const double* row = logits.data.data() + r * K;
    out[std::size_t(r)] = int(std::max_element(row, row + K) - row);
  }
  return out;
}

}  // namespace

void TokenHeadConfig::validate() const {
  if (layers < 1 || hidden < 2 || ffn_mult < 1) throw ConfigError("token head sizes must be positive");
  if (q_heads < 1 || kv_heads < 1 || q_heads % kv_heads != 0 || hidden % q_heads != 0)
    throw ConfigError("token head heads do not divide");
  if (latents < 1 || depth < 1 || codebook_size < 2) throw ConfigError("token head sequence sizes must be positive");
}

TokenBlock::TokenBlock(const std::string& name, const TokenHeadConfig& cfg, Rng& rng)
    : self_norm(name + ".self_norm", cfg.hidden),
      cross_norm(name + ".cross_norm", cfg.hidden),
      ff_norm(name + ".ff_norm", cfg.hidden),
      self_attn(name + ".self", cfg.hidden, cfg.q_heads, cfg.kv_heads, rng),
      cross_attn(name + ".cross", cfg.hidden, cfg.q_heads, cfg.kv_heads, rng),
      ff(name + ".ff", cfg.hidden, cfg.hidden * cfg.ffn_mult, rng) {}

void TokenBlock::collect(ParameterList& out) {
  self_norm.collect(out);
  cross_norm.collect(out);
  ff_norm.collect(out);
  self_attn.collect(out);
  cross_attn.collect(out);
  ff.collect(out);
}

TokenHead::TokenHead(const TokenHeadConfig& cfg, Rng& rng)
    : config(cfg),
      embed("head.embed", Tensor::randn({cfg.depth * cfg.codebook_size + 1, cfg.hidden}, rng, 0.02)),
      positions("head.positions", Tensor::randn({cfg.sequence_length(), cfg.hidden}, rng, 0.02)),
      out_norm("head.out_norm", cfg.hidden),
      out_proj("head.out", cfg.hidden, cfg.codebook_size, rng, 0.02) {
  cfg.validate();
  for (Index l = 0; l < cfg.layers; ++l) blocks.emplace_back("head.block" + std::to_string(l), cfg, rng);
}

void TokenHead::collect(ParameterList& out) {
  out.push_back(&embed);
  out.push_back(&positions);
  for (TokenBlock& b : blocks) b.collect(out);
  out_norm.collect(out);
  out_proj.collect(out);
}

namespace {

// Teacher-forced forward over the first `len` positions: [B, len, K].
Var forward_prefix(TokenHead& head, Tape& t, Var cond, const std::vector<std::vector<int>>& tokens, Index len) {
  const TokenHeadConfig& cfg = head.config;
  const Index B = Index(tokens.size());
  std::vector<int> ids;
  ids.reserve(std::size_t(B * len));
  for (const auto& seq : tokens)
    for (Index p = 0; p < len; ++p) ids.push_back(input_id(cfg, seq, p));
  Var h = add(embedding(t.param(head.embed), ids, {B, len}), slice(t.param(head.positions), 0, 0, len));
  for (TokenBlock& blk : head.blocks) {
    Var n = blk.self_norm(t, h);
    h = add(h, blk.self_attn(t, n, n, true));
    h = add(h, blk.cross_attn(t, blk.cross_norm(t, h), cond, false));
    h = add(h, blk.ff(t, blk.ff_norm(t, h)));
  }
  return head.out_proj(t, head.out_norm(t, h));
}

}  // namespace

Var TokenHead::logits(Tape& t, Var cond, const std::vector<std::vector<int>>& tokens) {
  const Index S = config.sequence_length();
  for (const auto& seq : tokens) {
    if (Index(seq.size()) != S) throw DimensionError("token head expects sequences of length " + std::to_string(S));
    for (int k : seq)
      if (k < 0 || k >= config.codebook_size) throw FormatError("token index out of range");
  }
  if (cond.dim(0) != Index(tokens.size())) throw DimensionError("token head: one condition row per sequence");
  return reshape(forward_prefix(*this, t, cond, tokens, S), {Index(tokens.size()) * S, config.codebook_size});
}

Var TokenHead::loss(Tape& t, Var cond, const std::vector<std::vector<int>>& tokens) {
  std::vector<int> targets;
  for (const auto& seq : tokens) targets.insert(targets.end(), seq.begin(), seq.end());
  return softmax_cross_entropy(logits(t, cond, tokens), targets);
}

std::vector<std::vector<int>> TokenHead::generate_uncached(const Tensor& cond) {
  const Index B = cond.dim(0), S = config.sequence_length();
  std::vector<std::vector<int>> seqs(static_cast<std::size_t>(B), std::vector<int>(static_cast<std::size_t>(S), 0));
  for (Index p = 0; p < S; ++p) {
    Tape t;
    const Tensor out = forward_prefix(*this, t, t.constant(cond), seqs, p + 1).value();
    const Index K = config.codebook_size;
    for (Index b = 0; b < B; ++b) {
      Tensor row({K}, std::vector<double>(out.data.begin() + (b * (p + 1) + p) * K, out.data.begin() + (b * (p + 1) + p + 1) * K));
      seqs[std::size_t(b)][std::size_t(p)] = argmax_rows(row)[0];
    }
  }
  return seqs;
}

std::vector<std::vector<int>> TokenHead::generate(const Tensor& cond) {
  const Index B = cond.dim(0), S = config.sequence_length(), H = config.hidden;
  const Index hd = H / config.q_heads, tc = cond.dim(1);
  std::vector<std::vector<int>> seqs(static_cast<std::size_t>(B), std::vector<int>(static_cast<std::size_t>(S), 0));

  // Cross-attention keys and values depend only on the condition.
  std::vector<Tensor> cross_k, cross_v;
  {
    Tape t;
    Var c = t.constant(cond);
    for (TokenBlock& blk : blocks) {
      cross_k.push_back(reshape(blk.cross_attn.key(t, c), {B, tc, config.kv_heads, hd}).value());
      cross_v.push_back(reshape(blk.cross_attn.value(t, c), {B, tc, config.kv_heads, hd}).value());
    }
  }
  std::vector<Tensor> self_k(blocks.size()), self_v(blocks.size());

  for (Index p = 0; p < S; ++p) {
    Tape t;
    std::vector<int> ids;
    for (const auto& seq : seqs) ids.push_back(input_id(config, seq, p));
    Var h = add(embedding(t.param(embed), ids, {B, 1}), slice(t.param(positions), 0, p, 1));
    for (std::size_t l = 0; l < blocks.size(); ++l) {
      TokenBlock& blk = blocks[l];
      AttentionLayer& sa = blk.self_attn;
      Var n = blk.self_norm(t, h);
      Var q = reshape(sa.query(t, n), {B, 1, config.q_heads, hd});
      Var k = reshape(sa.key(t, n), {B, 1, config.kv_heads, hd});
      Var v = reshape(sa.value(t, n), {B, 1, config.kv_heads, hd});
      if (p > 0) {
        k = concat({t.constant(self_k[l]), k}, 1);
        v = concat({t.constant(self_v[l]), v}, 1);
      }
      self_k[l] = k.value();
      self_v[l] = v.value();
      h = add(h, sa.output(t, reshape(gqa_attention(q, k, v, false), {B, 1, H})));

      AttentionLayer& ca = blk.cross_attn;
      Var cq = reshape(ca.query(t, blk.cross_norm(t, h)), {B, 1, config.q_heads, hd});
      h = add(h, ca.output(t, reshape(gqa_attention(cq, t.constant(cross_k[l]), t.constant(cross_v[l]), false), {B, 1, H})));
      h = add(h, blk.ff(t, blk.ff_norm(t, h)));
    }
    const std::vector<int> next = argmax_rows(out_proj(t, out_norm(t, h)).value());
    for (Index b = 0; b < B; ++b) seqs[std::size_t(b)][std::size_t(p)] = next[std::size_t(b)];
  }
  return seqs;
}

}  // namespace chunkflow
