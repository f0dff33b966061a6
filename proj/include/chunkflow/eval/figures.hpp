#pragma once

#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

namespace chunkflow {

/// Raised when inputs of the requested figures are absent from a run directory.
class MissingArtifactError : public std::runtime_error {
 public:
  MissingArtifactError(const std::filesystem::path& run_dir, std::vector<std::string> missing);
  const std::vector<std::string>& missing() const { return missing_; }

 private:
  std::vector<std::string> missing_;
};

struct FigureSpec {
  std::string name;   // output stem under figures/
  std::string input;  // CSV read from the run directory
};

/// tokenizer_pareto, hybrid_training, speed_ablation, scaling_law, success_rate.
const std::vector<FigureSpec>& figure_specs();

/// Writes figures/<name>.csv and figures/<name>.svg for each selected figure
/// (all when `only` is empty). Every input is checked before anything is
/// written. Returns the files written.
std::vector<std::filesystem::path> emit_figures(const std::filesystem::path& run_dir,
                                                const std::vector<std::string>& only = {});

void write_trials_csv(const std::vector<int>& outcomes, const std::filesystem::path& path);
std::vector<int> read_trials_csv(const std::filesystem::path& path);

}  // namespace chunkflow
