#pragma once

#include <condition_variable>
#include <cstdint>
#include <deque>
#include <exception>
#include <filesystem>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "chunkflow/core/rng.hpp"
#include "chunkflow/core/tensor.hpp"
#include "chunkflow/data/datagen.hpp"

namespace chunkflow {

/// One sample: entries named "<key>.<suffix>" inside a shard.
struct SampleRecord {
  std::string key;
  std::vector<std::pair<std::string, std::string>> entries;  // suffix, bytes

  const std::string& entry(const std::string& suffix) const;
  bool operator==(const SampleRecord&) const = default;
};

/// "shape=32,14 dtype=f64\n" followed by little-endian doubles.
std::string encode_array(const Tensor& t);
Tensor decode_array(const std::string& bytes);

SampleRecord chunk_to_record(const DemoChunk& chunk, const std::string& key);
DemoChunk record_to_chunk(const SampleRecord& record);

/// ustar bytes for `records`, entries in insertion order. Rejects duplicate
/// keys, keys containing '.' or '/', and names over 100 bytes.
std::string tar_records(const std::vector<SampleRecord>& records);
/// Parses a ustar archive back into records. Throws FormatError.
std::vector<SampleRecord> untar_records(const std::string& bytes);

/// Writes ceil(n / shard_size) files "<prefix>-NNNNNN.tar" into `dir`.
std::vector<std::filesystem::path> write_shards(const std::vector<SampleRecord>& records, std::size_t shard_size,
                                                const std::filesystem::path& dir, const std::string& prefix = "shard");
std::vector<SampleRecord> read_shard(const std::filesystem::path& path);
/// Shard files in `dir`, sorted by name.
std::vector<std::filesystem::path> list_shards(const std::filesystem::path& dir);

class RecordStream {
 public:
  virtual ~RecordStream() = default;
  /// Next record, or nothing once a finite stream is exhausted.
  virtual std::optional<SampleRecord> next() = 0;
};

/// Infinite: shards drawn uniformly with replacement, each read front to
/// back. Unreadable shards are skipped with a warning; if every shard is
/// unreadable, throws FormatError.
class ResampleStream : public RecordStream {
 public:
  ResampleStream(std::vector<std::filesystem::path> shards, std::uint64_t seed);
  std::optional<SampleRecord> next() override;
  /// Index of the shard the last record came from.
  std::size_t current_shard() const { return current_; }

 private:
  std::vector<std::filesystem::path> shards_;
  std::vector<bool> unreadable_;
  Rng rng_;
  std::vector<SampleRecord> buffer_;
  std::size_t pos_ = 0;
  std::size_t current_ = 0;
};

/// Finite: every record once, shard order permuted by the seed, in-shard
/// order preserved.
class EpochStream : public RecordStream {
 public:
  EpochStream(std::vector<std::filesystem::path> shards, std::uint64_t seed);
  std::optional<SampleRecord> next() override;
  const std::vector<std::size_t>& shard_order() const { return order_; }

 private:
  std::vector<std::filesystem::path> shards_;
  std::vector<std::size_t> order_;
  std::size_t shard_pos_ = 0;
  std::vector<SampleRecord> buffer_;
  std::size_t pos_ = 0;
};

/// Each draw picks a source with probability w_i / sum(w), then pulls one
/// record from it. Weights may change between draws.
class MixStream : public RecordStream {
 public:
  MixStream(std::vector<std::unique_ptr<RecordStream>> sources, std::vector<double> weights, std::uint64_t seed);
  std::optional<SampleRecord> next() override;
  void set_weights(std::vector<double> weights);
  std::size_t last_source() const { return last_; }

 private:
  std::vector<std::unique_ptr<RecordStream>> sources_;
  std::vector<double> weights_;
  Rng rng_;
  std::size_t last_ = 0;
};

/// Runs `source` on a reader thread feeding a bounded queue. Order is
/// unchanged; a full queue blocks the reader.
class PrefetchStream : public RecordStream {
 public:
  explicit PrefetchStream(std::unique_ptr<RecordStream> source, std::size_t capacity = 64);
  ~PrefetchStream() override;
  PrefetchStream(const PrefetchStream&) = delete;
  PrefetchStream& operator=(const PrefetchStream&) = delete;

  std::optional<SampleRecord> next() override;

 private:
  void run();

  std::unique_ptr<RecordStream> source_;
  std::size_t capacity_;
  std::deque<SampleRecord> queue_;
  bool done_ = false;
  bool stop_ = false;
  std::exception_ptr error_;
  std::mutex mu_;
  std::condition_variable not_empty_, not_full_;
  std::thread reader_;
};

/// Parses "a=3,b=1" into (name, weight) pairs.
std::vector<std::pair<std::string, double>> parse_mix(const std::string& text);

}  // namespace chunkflow
