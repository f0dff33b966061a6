#include "chunkflow/tokenize/rvq.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <numeric>

#include "chunkflow/core/errors.hpp"

namespace chunkflow {

namespace {

Var activate(Activation a, Var x) { return a == Activation::kGelu ? gelu(x) : x; }

std::vector<Index> stage_lengths(Index length, Index stages) {
  std::vector<Index> out{length};
  for (Index s = 0; s < stages; ++s) out.push_back(conv_output_length(out.back(), 4, 2, same_padding(4, 2)));
  return out;
}

std::string exact(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

const char* distance_name(Distance d) { return d == Distance::kCosine ? "cosine" : "euclidean"; }

Distance parse_distance(const std::string& s) {
  if (s == "cosine") return Distance::kCosine;
  if (s == "euclidean") return Distance::kEuclidean;
  throw ConfigError("unknown distance '" + s + "'");
}

}  // namespace

Index RvqConfig::stages() const {
  Index s = 0;
  for (Index f = downsample(); f > 1; f /= 2) ++s;
  return s;
}

void RvqConfig::validate() const {
  if (latents < 1 || chunk_size % latents != 0) throw ConfigError("chunk_size must be a multiple of the latent count");
  const Index f = downsample();
  if ((f & (f - 1)) != 0) throw ConfigError("downsample factor must be a power of two");
  if (depth < 1 || codebook_size < 1 || latent_dim < 1 || hidden < 1) throw ConfigError("rvq sizes must be positive");
  if (depth * codebook_size > reserved_vocab)
    throw ConfigError("depth * codebook_size exceeds the reserved vocabulary (" + std::to_string(reserved_vocab) + ")");
  if (!(ema_decay >= 0.0 && ema_decay < 1.0)) throw ConfigError("ema_decay must be in [0, 1)");
  if (restart_period < 1) throw ConfigError("restart_period must be >= 1");
  if (beta < 0.0) throw ConfigError("beta must be >= 0");
}

TemporalEncoder::TemporalEncoder(const std::string& name, Index cin, Index hidden, Index cout, Index stages, Rng& rng)
    : input(name + ".input", cin, hidden, 3, 1, same_padding(3, 1), rng),
      output(name + ".output", hidden, cout, 1, 1, 0, rng) {
  for (Index s = 0; s < stages; ++s)
    down.emplace_back(name + ".down" + std::to_string(s), hidden, hidden, 4, 2, same_padding(4, 2), rng);
}

Var TemporalEncoder::operator()(Tape& t, Var x) {
  Var h = activate(activation, input(t, x));
  for (Conv1dLayer& c : down) h = activate(activation, c(t, h));
  return output(t, h);
}

void TemporalEncoder::collect(ParameterList& out) {
  input.collect(out);
  for (Conv1dLayer& c : down) c.collect(out);
  output.collect(out);
}

TemporalDecoder::TemporalDecoder(const std::string& name, Index cin, Index hidden, Index cout, Index stages, Rng& rng)
    : input(name + ".input", cin, hidden, 3, 1, same_padding(3, 1), rng),
      output(name + ".output", hidden, cout, 3, 1, same_padding(3, 1), rng) {
  for (Index s = 0; s < stages; ++s)
    up.emplace_back(name + ".up" + std::to_string(s), hidden, hidden, 4, 2, same_padding(4, 2), rng);
}

Var TemporalDecoder::operator()(Tape& t, Var z, Index length) {
  const std::vector<Index> lengths = stage_lengths(length, Index(up.size()));
  Var h = activate(activation, input(t, z));
  for (std::size_t s = 0; s < up.size(); ++s) h = activate(activation, up[s](t, h, lengths[up.size() - 1 - s]));
  return output(t, h);
}

void TemporalDecoder::collect(ParameterList& out) {
  input.collect(out);
  for (ConvTranspose1dLayer& c : up) c.collect(out);
  output.collect(out);
}

Codebook::Codebook(const std::string& name, Tensor init)
    : entries(name, std::move(init)), ema_size(Tensor::ones({entries.value.dim(0)})), ema_sum(entries.value),
      usage(std::size_t(entries.value.dim(0)), 0.0) {
  ema_sum.requires_grad = false;
}

int vocab_id(int offset, Index codebook_size, Index depth_index, int k) {
  return offset + int(depth_index * codebook_size) + k;
}

std::vector<int> TokenSequence::vocab_ids(int offset, Index codebook_size) const {
  std::vector<int> out;
  out.reserve(indices.size());
  for (Index i = 0; i < latents; ++i)
    for (Index j = 0; j < depth; ++j) out.push_back(vocab_id(offset, codebook_size, j, at(i, j)));
  return out;
}

TokenSequence TokenSequence::from_vocab_ids(const std::vector<int>& ids, int offset, Index codebook_size, Index depth) {
  if (depth < 1 || ids.size() % std::size_t(depth) != 0) throw FormatError("token count is not a multiple of depth");
  TokenSequence s;
  s.depth = depth;
  s.latents = Index(ids.size()) / depth;
  for (std::size_t p = 0; p < ids.size(); ++p) {
    const Index j = Index(p) % depth;
    const int k = ids[p] - offset - int(j * codebook_size);
    if (k < 0 || k >= codebook_size) throw FormatError("vocabulary id " + std::to_string(ids[p]) + " out of range");
    s.indices.push_back(k);
  }
  return s;
}

int nearest_entry(std::span<const double> r, const Tensor& entries, Distance distance) {
  const Index K = entries.dim(0), C = entries.dim(1);
  std::vector<double> query(r.begin(), r.end());
  if (distance == Distance::kCosine) {
    double n = 0.0;
    for (double v : query) n += v * v;
    n = std::sqrt(n);
    if (n > 0.0)
      for (double& v : query) v /= n;
  }
  int best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (Index k = 0; k < K; ++k) {
    const double* e = entries.data.data() + k * C;
    double scale = 1.0;
    if (distance == Distance::kCosine) {
      double n = 0.0;
      for (Index c = 0; c < C; ++c) n += e[c] * e[c];
      n = std::sqrt(n);
      scale = n > 0.0 ? 1.0 / n : 0.0;
    }
    double dist = 0.0;
    for (Index c = 0; c < C; ++c) {
      const double diff = query[std::size_t(c)] - e[c] * scale;
      dist += diff * diff;
    }
    if (dist < best_d) {
      best_d = dist;
      best = int(k);
    }
  }
  return best;
}

QuantizeResult quantize_rvq(const Tensor& latents, const std::vector<Codebook>& books, Distance distance) {
  if (latents.rank() != 3) throw DimensionError("quantize_rvq: latents must be [B, n, C], got " + shape_string(latents.shape));
  if (books.empty()) throw ContractError("quantize_rvq: no codebooks");
  const Index B = latents.dim(0), n = latents.dim(1), C = latents.dim(2), m = Index(books.size());
  for (const Codebook& b : books)
    if (b.dim() != C) throw DimensionError("quantize_rvq: codebook width differs from latent width");

  QuantizeResult q;
  q.zhat = Tensor({B, n, C});
  q.residual_norms = Tensor({B, n, m + 1});
  q.depth_inputs.assign(std::size_t(m), Tensor({B * n, C}));
  q.tokens.assign(std::size_t(B), TokenSequence{n, m, std::vector<int>(std::size_t(n * m))});
  std::vector<double> r(static_cast<std::size_t>(C));
  for (Index b = 0; b < B; ++b) {
    for (Index i = 0; i < n; ++i) {
      const Index row = b * n + i;
      std::copy_n(latents.data.data() + row * C, C, r.begin());
      auto norm = [&] {
        double s = 0.0;
        for (double v : r) s += v * v;
        return std::sqrt(s);
      };
      q.residual_norms[row * (m + 1)] = norm();
      for (Index j = 0; j < m; ++j) {
        std::copy(r.begin(), r.end(), q.depth_inputs[std::size_t(j)].data.begin() + row * C);
        const Tensor& e = books[std::size_t(j)].entries.value;
        const int k = nearest_entry(r, e, distance);
        q.tokens[std::size_t(b)].indices[std::size_t(i * m + j)] = k;
        for (Index c = 0; c < C; ++c) {
          r[std::size_t(c)] -= e[k * C + c];
          q.zhat[row * C + c] += e[k * C + c];
        }
        q.residual_norms[row * (m + 1) + j + 1] = norm();
      }
    }
  }
  return q;
}

RvqModel::RvqModel(const RvqConfig& cfg, Rng& rng) : config(cfg) {
  config.validate();
  encoder = TemporalEncoder("encoder", cfg.action_dim, cfg.hidden, cfg.latent_dim, cfg.stages(), rng);
  decoder = TemporalDecoder("decoder", cfg.latent_dim, cfg.hidden, cfg.action_dim, cfg.stages(), rng);
  for (Index j = 0; j < cfg.depth; ++j) {
    books.emplace_back("codebook" + std::to_string(j),
                       Tensor::randn({cfg.codebook_size, cfg.latent_dim}, rng, 1.0 / std::sqrt(double(cfg.latent_dim))));
  }
}

ParameterList RvqModel::network_parameters() {
  ParameterList out;
  encoder.collect(out);
  decoder.collect(out);
  return out;
}

ParameterList RvqModel::codebook_parameters() {
  ParameterList out;
  for (Codebook& b : books) out.push_back(&b.entries);
  return out;
}

Var RvqModel::encode(Tape& t, Var chunk) {
  if (chunk.value().rank() != 3 || chunk.dim(1) != config.chunk_size || chunk.dim(2) != config.action_dim)
    throw DimensionError("encode: expected [B, " + std::to_string(config.chunk_size) + ", " +
                         std::to_string(config.action_dim) + "], got " + shape_string(chunk.shape()));
  return encoder(t, chunk);
}

Tensor RvqModel::encode_latents(const Tensor& chunk) {
  Tape t;
  return encode(t, t.constant(chunk)).value();
}

Var RvqModel::decode(Tape& t, Var zhat) { return decoder(t, zhat, config.chunk_size); }

Tensor RvqModel::decode_latents(const Tensor& zhat) {
  Tape t;
  return decode(t, t.constant(zhat)).value();
}

QuantizeResult RvqModel::quantize(const Tensor& chunk) {
  QuantizeResult q = quantize_rvq(encode_latents(chunk), books, config.distance);
  q.reconstruction = decode_latents(q.zhat);
  return q;
}

Tensor RvqModel::dequantize(const std::vector<TokenSequence>& tokens, Index use_depth) {
  const Index m = use_depth < 0 ? config.depth : std::min(use_depth, config.depth);
  const Index n = config.latents, C = config.latent_dim, K = config.codebook_size;
  Tensor zhat({Index(tokens.size()), n, C});
  for (std::size_t b = 0; b < tokens.size(); ++b) {
    const TokenSequence& s = tokens[b];
    if (s.latents != n || s.depth != config.depth || Index(s.indices.size()) != n * config.depth)
      throw FormatError("dequantize: token sequence has the wrong length");
    for (Index i = 0; i < n; ++i) {
      for (Index j = 0; j < m; ++j) {
        const int k = s.at(i, j);
        if (k < 0 || k >= K) throw FormatError("dequantize: index " + std::to_string(k) + " out of range");
        const Tensor& e = books[std::size_t(j)].entries.value;
        for (Index c = 0; c < C; ++c) zhat[(Index(b) * n + i) * C + c] += e[k * C + c];
      }
    }
  }
  return decode_latents(zhat);
}

Tensor RvqModel::reconstruct(const Tensor& chunk, Index use_depth) {
  return dequantize(quantize_rvq(encode_latents(chunk), books, config.distance).tokens, use_depth);
}

Checkpoint RvqModel::to_checkpoint() {
  Checkpoint ck;
  ck.set_meta("kind", "rvq");
  ck.set_meta("chunk_size", std::to_string(config.chunk_size));
  ck.set_meta("action_dim", std::to_string(config.action_dim));
  ck.set_meta("latents", std::to_string(config.latents));
  ck.set_meta("latent_dim", std::to_string(config.latent_dim));
  ck.set_meta("depth", std::to_string(config.depth));
  ck.set_meta("codebook_size", std::to_string(config.codebook_size));
  ck.set_meta("hidden", std::to_string(config.hidden));
  ck.set_meta("beta", exact(config.beta));
  ck.set_meta("distance", distance_name(config.distance));
  ck.set_meta("use_ema", config.use_ema ? "1" : "0");
  ck.set_meta("ema_decay", exact(config.ema_decay));
  ck.set_meta("restarts", config.restarts ? "1" : "0");
  ck.set_meta("restart_period", std::to_string(config.restart_period));
  ck.set_meta("restart_threshold", std::to_string(config.restart_threshold));
  ck.set_meta("vocab_offset", std::to_string(config.vocab_offset));
  ck.set_meta("step", std::to_string(step));
  ck.put_parameters(network_parameters());
  for (std::size_t j = 0; j < books.size(); ++j) {
    const std::string p = "codebook" + std::to_string(j);
    ck.put(p, books[j].entries.value);
    ck.put(p + ".ema_size", books[j].ema_size);
    ck.put(p + ".ema_sum", books[j].ema_sum);
    ck.put(p + ".usage", Tensor({Index(books[j].usage.size())}, books[j].usage));
  }
  return ck;
}

RvqModel RvqModel::from_checkpoint(const Checkpoint& ck) {
  if (!ck.has_meta("kind") || ck.meta("kind") != "rvq") throw FormatError("not a tokenizer checkpoint");
  RvqConfig cfg;
  auto geti = [&](const char* k) { return std::stoll(ck.meta(k)); };
  cfg.chunk_size = geti("chunk_size");
  cfg.action_dim = geti("action_dim");
  cfg.latents = geti("latents");
  cfg.latent_dim = geti("latent_dim");
  cfg.depth = geti("depth");
  cfg.codebook_size = geti("codebook_size");
  cfg.hidden = geti("hidden");
  cfg.beta = std::stod(ck.meta("beta"));
  cfg.distance = parse_distance(ck.meta("distance"));
  cfg.use_ema = ck.meta("use_ema") == "1";
  cfg.ema_decay = std::stod(ck.meta("ema_decay"));
  cfg.restarts = ck.meta("restarts") == "1";
  cfg.restart_period = int(geti("restart_period"));
  cfg.restart_threshold = int(geti("restart_threshold"));
  cfg.vocab_offset = int(geti("vocab_offset"));
  Rng rng(0);
  RvqModel model(cfg, rng);
  model.step = geti("step");
  ck.get_parameters(model.network_parameters());
  for (std::size_t j = 0; j < model.books.size(); ++j) {
    const std::string p = "codebook" + std::to_string(j);
    model.books[j].entries.value.data = ck.get(p).data;
    model.books[j].ema_size = ck.get(p + ".ema_size");
    model.books[j].ema_sum = ck.get(p + ".ema_sum");
    const Storage& usage = ck.get(p + ".usage").data;
    model.books[j].usage.assign(usage.begin(), usage.end());
  }
  return model;
}

Var straight_through(Var z, Var zhat) { return add(z, detach(sub(zhat, z))); }

RvqLossTerms tokenizer_loss(Tape&, Var chunk, Var z, Var zhat, Var reconstruction, double beta, bool codebook_grad) {
  const double inv_b = 1.0 / double(chunk.dim(0));
  Var rec = scale(sum_squares(sub(chunk, reconstruction)), inv_b);
  Var cb = scale(sum_squares(sub(detach(z), codebook_grad ? zhat : detach(zhat))), inv_b);
  Var commit = scale(sum_squares(sub(z, detach(zhat))), beta * inv_b);
  RvqLossTerms terms;
  terms.total = add(add(rec, cb), commit);
  terms.reconstruction = rec.value().item();
  terms.codebook = cb.value().item();
  terms.commitment = commit.value().item();
  return terms;
}

void ema_codebook_update(Codebook& book, const Tensor& inputs, const std::vector<int>& assign, double decay) {
  const Index K = book.size(), C = book.dim();
  if (inputs.rank() != 2 || inputs.dim(1) != C || Index(assign.size()) != inputs.dim(0))
    throw DimensionError("ema_codebook_update: inputs/assignments mismatch");
  std::vector<double> counts(std::size_t(K), 0.0);
  Tensor sums({K, C});
  for (std::size_t r = 0; r < assign.size(); ++r) {
    const int k = assign[r];
    counts[std::size_t(k)] += 1.0;
    for (Index c = 0; c < C; ++c) sums[k * C + c] += inputs[Index(r) * C + c];
  }
  constexpr double kLaplace = 1e-5;
  for (Index k = 0; k < K; ++k) {
    book.ema_size[k] = decay * book.ema_size[k] + (1.0 - decay) * counts[std::size_t(k)];
    for (Index c = 0; c < C; ++c) book.ema_sum[k * C + c] = decay * book.ema_sum[k * C + c] + (1.0 - decay) * sums[k * C + c];
    if (counts[std::size_t(k)] > 0.0) {
      for (Index c = 0; c < C; ++c) book.entries.value[k * C + c] = book.ema_sum[k * C + c] / (book.ema_size[k] + kLaplace);
    }
  }
}

int restart_dead_codes(Codebook& book, const Tensor& inputs, int threshold, Rng& rng) {
  const Index K = book.size(), C = book.dim(), N = inputs.dim(0);
  std::vector<Index> dead;
  for (Index k = 0; k < K; ++k)
    if (book.usage[std::size_t(k)] < threshold) dead.push_back(k);
  if (!dead.empty() && N > 0) {
    std::vector<Index> pool(static_cast<std::size_t>(N));
    std::iota(pool.begin(), pool.end(), Index(0));
    for (std::size_t d = 0; d < dead.size(); ++d) {
      Index src;
      if (Index(dead.size()) <= N) {
        // partial Fisher-Yates: distinct rows
        const std::size_t pick = d + std::size_t(rng.index(std::uint64_t(N) - d));
        std::swap(pool[d], pool[pick]);
        src = pool[d];
      } else {
        src = Index(rng.index(std::uint64_t(N)));
      }
      const Index k = dead[d];
      for (Index c = 0; c < C; ++c) {
        book.entries.value[k * C + c] = inputs[src * C + c];
        book.ema_sum[k * C + c] = inputs[src * C + c];
      }
      book.ema_size[k] = 1.0;
    }
  }
  std::fill(book.usage.begin(), book.usage.end(), 0.0);
  return N > 0 ? int(dead.size()) : 0;
}

RvqStepStats rvq_train_step(RvqModel& model, OptimizerState& opt, const Tensor& batch, Rng& rng, double lr) {
  const RvqConfig& cfg = model.config;
  const bool cb_grad = !cfg.use_ema || cfg.codebook_grad_with_ema;
  Tape t;
  Var x = t.constant(batch);
  Var z = model.encode(t, x);
  QuantizeResult q = quantize_rvq(z.value(), model.books, cfg.distance);
  const Index B = batch.dim(0), n = cfg.latents;

  std::vector<std::vector<int>> assign(std::size_t(cfg.depth));
  for (Index j = 0; j < cfg.depth; ++j)
    for (Index b = 0; b < B; ++b)
      for (Index i = 0; i < n; ++i) assign[std::size_t(j)].push_back(q.tokens[std::size_t(b)].at(i, j));

  Var zhat;
  if (cb_grad) {
    for (Index j = 0; j < cfg.depth; ++j) {
      Var e = embedding(t.param(model.books[std::size_t(j)].entries), assign[std::size_t(j)], {B, n});
      zhat = j == 0 ? e : add(zhat, e);
    }
  } else {
    zhat = t.constant(q.zhat);
  }
  Var recon = model.decode(t, straight_through(z, zhat));
  RvqLossTerms terms = tokenizer_loss(t, x, z, zhat, recon, cfg.beta, cb_grad);
  t.backward(terms.total);

  ParameterList params = model.network_parameters();
  if (cb_grad) {
    for (Parameter* p : model.codebook_parameters()) params.push_back(p);
  }
  clip_global_norm(params, 1.0);
  adamw_step(params, opt, lr);

  RvqStepStats stats;
  stats.loss = terms.total.value().item();
  stats.reconstruction = terms.reconstruction;
  stats.codebook = terms.codebook;
  stats.commitment = terms.commitment;
  for (Index j = 0; j < cfg.depth; ++j) {
    Codebook& book = model.books[std::size_t(j)];
    if (cfg.use_ema) ema_codebook_update(book, q.depth_inputs[std::size_t(j)], assign[std::size_t(j)], cfg.ema_decay);
    for (int k : assign[std::size_t(j)]) book.usage[std::size_t(k)] += 1.0;
  }
  ++model.step;
  if (cfg.restarts && model.step % cfg.restart_period == 0) {
    for (Index j = 0; j < cfg.depth; ++j)
      stats.restarts += restart_dead_codes(model.books[std::size_t(j)], q.depth_inputs[std::size_t(j)],
                                           cfg.restart_threshold, rng);
  }
  return stats;
}

std::vector<double> codebook_utilization(RvqModel& model, const Tensor& chunks) {
  const Index m = model.config.depth, K = model.config.codebook_size;
  std::vector<std::vector<bool>> used(std::size_t(m), std::vector<bool>(std::size_t(K), false));
  const Index N = chunks.dim(0), per = chunks.numel() / std::max<Index>(N, 1);
  const Index batch = 256;
  for (Index start = 0; start < N; start += batch) {
    const Index len = std::min(batch, N - start);
    Tensor part({len, chunks.dim(1), chunks.dim(2)},
                std::vector<double>(chunks.data.begin() + start * per, chunks.data.begin() + (start + len) * per));
    const QuantizeResult q = quantize_rvq(model.encode_latents(part), model.books, model.config.distance);
    for (const TokenSequence& s : q.tokens)
      for (Index i = 0; i < s.latents; ++i)
        for (Index j = 0; j < m; ++j) used[std::size_t(j)][std::size_t(s.at(i, j))] = true;
  }
  std::vector<double> out;
  for (const auto& u : used) out.push_back(double(std::count(u.begin(), u.end(), true)) / double(K));
  return out;
}

}  // namespace chunkflow
