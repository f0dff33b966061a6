#pragma once

#include <utility>
#include <vector>

#include "chunkflow/core/tensor.hpp"

namespace chunkflow {

/// Per-dimension uniform quantizer over [lo, hi]; one token per element.
struct UniformBinTokenizer {
  int bins = 256;
  std::vector<std::pair<double, double>> ranges;  // per column

  UniformBinTokenizer() = default;
  UniformBinTokenizer(int bins, std::vector<std::pair<double, double>> ranges);

  int encode_value(double x, Index column) const;
  double decode_value(int index, Index column) const;
  /// chunk[T, d] -> T * d indices, row-major.
  std::vector<int> encode(const Tensor& chunk) const;
  Tensor decode(const std::vector<int>& tokens, Index chunk_size) const;
};

/// Orthonormal DCT-II basis: row k is the k-th cosine over `length` samples.
RowMatrix dct_basis(Index length);

/// Byte-pair merges over integer symbols; merge i creates id base + i.
struct BpeTable {
  int base = 0;  // alphabet size
  std::vector<std::pair<int, int>> merges;

  int vocab_size() const { return base + int(merges.size()); }
  std::vector<int> encode(const std::vector<int>& symbols) const;
  /// Throws FormatError on an id outside the vocabulary.
  std::vector<int> decode(const std::vector<int>& tokens) const;
};

/// Greedy most-frequent-pair merges; ties go to the smallest pair.
BpeTable bpe_train(const std::vector<std::vector<int>>& corpus, int alphabet, int num_merges);

/// DCT over time per dimension, keep the lowest coefficients, scale and
/// round, flatten dimension-major, then BPE.
struct DctBpeTokenizer {
  Index chunk_size = 32;
  Index dims = 14;
  Index keep = 8;
  double quant_scale = 10.0;
  int min_symbol = 0;  // smallest quantized coefficient seen in training
  BpeTable bpe;

  /// Quantized coefficient stream before BPE (length dims * keep).
  std::vector<int> symbols(const Tensor& chunk) const;
  Tensor from_symbols(const std::vector<int>& symbols) const;

  std::vector<int> encode(const Tensor& chunk) const;
  Tensor decode(const std::vector<int>& tokens) const;

  /// Fits the alphabet and `num_merges` merges on `chunks`.
  static DctBpeTokenizer train(const std::vector<Tensor>& chunks, Index keep, double quant_scale, int num_merges);
};

}  // namespace chunkflow
