#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "chunkflow/core/optim.hpp"
#include "chunkflow/core/tape.hpp"

namespace chunkflow {

/// Versioned tensor container: an 8-byte magic, a little-endian u64 manifest
/// length, a JSON manifest (names, shapes, dtype, offsets, metadata) and the
/// raw little-endian f64 blobs. Identical contents give identical bytes.
class Checkpoint {
 public:
  static constexpr int kFormatVersion = 1;

  void set_meta(const std::string& key, std::string value) { metadata_[key] = std::move(value); }
  const std::string& meta(const std::string& key) const;
  bool has_meta(const std::string& key) const { return metadata_.count(key) != 0; }
  const std::map<std::string, std::string>& metadata() const { return metadata_; }

  void put(const std::string& name, const Tensor& tensor);
  const Tensor& get(const std::string& name) const;
  bool has(const std::string& name) const { return index_.count(name) != 0; }
  const std::vector<std::pair<std::string, Tensor>>& tensors() const { return tensors_; }

  void put_parameters(const ParameterList& params, const std::string& prefix = "");
  /// Copies stored values into `params`; shapes must match exactly.
  void get_parameters(const ParameterList& params, const std::string& prefix = "") const;

  void put_optimizer(const OptimizerState& state, const ParameterList& params, const std::string& prefix);
  OptimizerState get_optimizer(const ParameterList& params, const std::string& prefix) const;

  std::string serialize() const;
  static Checkpoint deserialize(const std::string& bytes);
  void save(const std::filesystem::path& path) const;
  static Checkpoint load(const std::filesystem::path& path);

 private:
  std::map<std::string, std::string> metadata_;
  std::vector<std::pair<std::string, Tensor>> tensors_;
  std::map<std::string, std::size_t> index_;
};

}  // namespace chunkflow
