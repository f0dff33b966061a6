#include "chunkflow/tokenize/baselines.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <unordered_map>

#include "chunkflow/core/errors.hpp"

namespace chunkflow {

UniformBinTokenizer::UniformBinTokenizer(int b, std::vector<std::pair<double, double>> r)
    : bins(b), ranges(std::move(r)) {
  if (bins < 2) throw ConfigError("uniform binning needs at least 2 bins");
  for (const auto& [lo, hi] : ranges)
    if (!(hi > lo)) throw ConfigError("uniform binning range needs hi > lo");
}

int UniformBinTokenizer::encode_value(double x, Index column) const {
  const auto [lo, hi] = ranges[std::size_t(column)];
  x = std::clamp(x, lo, hi);
  const int k = static_cast<int>(std::floor((x - lo) / (hi - lo) * bins));
  return std::min(k, bins - 1);
}

double UniformBinTokenizer::decode_value(int index, Index column) const {
  const auto [lo, hi] = ranges[std::size_t(column)];
  return lo + (index + 0.5) * (hi - lo) / bins;
}

std::vector<int> UniformBinTokenizer::encode(const Tensor& chunk) const {
  const Index d = Index(ranges.size());
  if (chunk.rank() != 2 || chunk.dim(1) != d) throw DimensionError("binning expects chunk [T, " + std::to_string(d) + "]");
  std::vector<int> out(chunk.data.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = encode_value(chunk.data[i], Index(i) % d);
  return out;
}

Tensor UniformBinTokenizer::decode(const std::vector<int>& tokens, Index chunk_size) const {
  const Index d = Index(ranges.size());
  if (Index(tokens.size()) != chunk_size * d) throw FormatError("binning token count does not match the chunk");
  Tensor out({chunk_size, d});
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (tokens[i] < 0 || tokens[i] >= bins) throw FormatError("bin index out of range");
    out.data[i] = decode_value(tokens[i], Index(i) % d);
  }
  return out;
}

RowMatrix dct_basis(Index length) {
  RowMatrix b(length, length);
  const double n = double(length);
  for (Index k = 0; k < length; ++k) {
    const double w = std::sqrt((k == 0 ? 1.0 : 2.0) / n);
    for (Index t = 0; t < length; ++t) b(k, t) = w * std::cos(std::numbers::pi * (t + 0.5) * k / n);
  }
  return b;
}

namespace {

std::uint64_t pair_key(int a, int b) { return (std::uint64_t(std::uint32_t(a)) << 32) | std::uint32_t(b); }

std::vector<int> apply_merge(const std::vector<int>& s, std::pair<int, int> pair, int id) {
  std::vector<int> out;
  out.reserve(s.size());
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i + 1 < s.size() && s[i] == pair.first && s[i + 1] == pair.second) {
      out.push_back(id);
      ++i;
    } else {
      out.push_back(s[i]);
    }
  }
  return out;
}

}  // namespace

std::vector<int> BpeTable::encode(const std::vector<int>& symbols) const {
  std::vector<int> s = symbols;
  for (std::size_t i = 0; i < merges.size(); ++i) s = apply_merge(s, merges[i], base + int(i));
  return s;
}

std::vector<int> BpeTable::decode(const std::vector<int>& tokens) const {
  std::vector<int> out;
  std::vector<int> stack;
  for (int tok : tokens) {
    if (tok < 0 || tok >= vocab_size()) throw FormatError("unknown BPE token " + std::to_string(tok));
    stack.push_back(tok);
    while (!stack.empty()) {
      const int t = stack.back();
      stack.pop_back();
      if (t < base) {
        out.push_back(t);
      } else {
        const auto& [a, b] = merges[std::size_t(t - base)];
        stack.push_back(b);
        stack.push_back(a);
      }
    }
  }
  return out;
}

BpeTable bpe_train(const std::vector<std::vector<int>>& corpus, int alphabet, int num_merges) {
  BpeTable table;
  table.base = alphabet;
  std::vector<std::vector<int>> seqs = corpus;
  for (int m = 0; m < num_merges; ++m) {
    std::unordered_map<std::uint64_t, long> counts;
    for (const auto& s : seqs)
      for (std::size_t i = 0; i + 1 < s.size(); ++i) ++counts[pair_key(s[i], s[i + 1])];
    std::uint64_t best_key = 0;
    long best_count = 1;
    for (const auto& [key, c] : counts)
      if (c > best_count || (c == best_count && key < best_key)) {
        best_key = key;
        best_count = c;
      }
    if (best_count < 2) break;
    const std::pair<int, int> best{int(best_key >> 32), int(best_key & 0xffffffffu)};
    const int id = table.vocab_size();
    table.merges.push_back(best);
    for (auto& s : seqs) s = apply_merge(s, best, id);
  }
  return table;
}

std::vector<int> DctBpeTokenizer::symbols(const Tensor& chunk) const {
  if (chunk.rank() != 2 || chunk.dim(0) != chunk_size || chunk.dim(1) != dims)
    throw DimensionError("DCT tokenizer expects chunk [" + std::to_string(chunk_size) + ", " + std::to_string(dims) + "]");
  const RowMatrix coef = dct_basis(chunk_size).topRows(keep) * chunk.matrix(dims);  // [keep, d]
  std::vector<int> out;
  out.reserve(std::size_t(keep * dims));
  for (Index j = 0; j < dims; ++j)
    for (Index k = 0; k < keep; ++k) {
      const int q = static_cast<int>(std::lround(coef(k, j) * quant_scale)) - min_symbol;
      out.push_back(std::clamp(q, 0, bpe.base - 1));
    }
  return out;
}

Tensor DctBpeTokenizer::from_symbols(const std::vector<int>& s) const {
  if (Index(s.size()) != keep * dims) throw FormatError("DCT symbol stream has the wrong length");
  RowMatrix coef(keep, dims);
  for (Index j = 0; j < dims; ++j)
    for (Index k = 0; k < keep; ++k) coef(k, j) = (s[std::size_t(j * keep + k)] + min_symbol) / quant_scale;
  Tensor out({chunk_size, dims});
  out.matrix(dims) = dct_basis(chunk_size).topRows(keep).transpose() * coef;
  return out;
}

std::vector<int> DctBpeTokenizer::encode(const Tensor& chunk) const { return bpe.encode(symbols(chunk)); }

Tensor DctBpeTokenizer::decode(const std::vector<int>& tokens) const { return from_symbols(bpe.decode(tokens)); }

DctBpeTokenizer DctBpeTokenizer::train(const std::vector<Tensor>& chunks, Index keep, double quant_scale, int num_merges) {
  if (chunks.empty()) throw ConfigError("DCT tokenizer needs training chunks");
  if (quant_scale <= 0) throw ConfigError("quant_scale must be positive");
  DctBpeTokenizer tok;
  tok.chunk_size = chunks[0].dim(0);
  tok.dims = chunks[0].dim(1);
  if (keep < 1 || keep > tok.chunk_size) throw ConfigError("dct_keep must lie in [1, chunk_size]");
  tok.keep = keep;
  tok.quant_scale = quant_scale;

  const RowMatrix basis = dct_basis(tok.chunk_size).topRows(keep);
  std::vector<std::vector<int>> raw;
  int lo = 0, hi = 0;
  for (const Tensor& c : chunks) {
    const RowMatrix coef = basis * c.matrix(tok.dims);
    std::vector<int> s;
    for (Index j = 0; j < tok.dims; ++j)
      for (Index k = 0; k < keep; ++k) {
        const int q = static_cast<int>(std::lround(coef(k, j) * quant_scale));
        lo = std::min(lo, q);
        hi = std::max(hi, q);
        s.push_back(q);
      }
    raw.push_back(std::move(s));
  }
  tok.min_symbol = lo;
  for (auto& s : raw)
    for (int& v : s) v -= lo;
  tok.bpe = bpe_train(raw, hi - lo + 1, num_merges);
  return tok;
}

}  // namespace chunkflow
