#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "wiss/phantom.hpp"
#include "wiss/pipeline.hpp"

namespace wiss {

// Either a seeded phantom suite, an explicit list of phantom specs, or a
// directory in the layout written by `phantom gen`.
struct DatasetConfig {
  int suite_count = 0;
  std::uint64_t suite_seed = 0;
  std::vector<PhantomSpec> phantoms;
  std::filesystem::path data_dir;
};

struct NoiseConfig {
  double max_shift_mm = 0.0;
  std::uint64_t seed = 0;
};

struct MetricOptions {
  double hausdorff_percentile = 100.0;
  bool difference_maps = true;
};

struct ExperimentConfig {
  DatasetConfig dataset;
  PipelineConfig pipeline;
  std::optional<NoiseConfig> noise;
  std::string output;
  MetricOptions metrics;
};

// Relative data_dir paths resolve against base_dir. Every violation is
// reported in one kInvalidConfig error.
ExperimentConfig experiment_config_from_json(const nlohmann::json& j, const std::filesystem::path& base_dir = {});
ExperimentConfig read_experiment_config(const std::filesystem::path& path);
// Omits `output` so manifests do not depend on where a run was written.
nlohmann::json to_json(const ExperimentConfig& cfg);

DatasetConfig dataset_config_from_json(const nlohmann::json& j, const std::string& path,
                                       std::vector<std::string>& errors, const std::filesystem::path& base_dir);
nlohmann::json to_json(const DatasetConfig& d);

struct Dataset {
  std::vector<Volume> volumes;
  std::vector<LandmarkAnnotation> annotations;  // exact landmarks, before any jitter
  std::optional<LabelStore> ground_truth;
};

Dataset load_dataset(const DatasetConfig& d);
std::vector<LandmarkAnnotation> apply_noise(const Dataset& data, const std::optional<NoiseConfig>& noise);

// Writes volumes/, annotations/ and ground_truth/ under dir.
void write_dataset(const Dataset& data, const std::filesystem::path& dir);

struct AblationRow {
  std::string name;  // M, M-E, M-E-R, M-E-R-ST with an n- prefix under jitter
  MetricsReport report;
};

// Mid-sagittal scores of the self-training stage of a run: the model trained
// on coarse labels (selection only), its refined labels, and the final
// self-trained labels.
struct SelfTrainingScores {
  MetricsReport model;
  MetricsReport refined;
  MetricsReport self_trained;
};
SelfTrainingScores score_self_training(const RunResult& run, const std::vector<LandmarkAnnotation>& annotations,
                                       const LabelStore& gt);

// The four rows of the ablation grid, with and without landmark jitter
// (1 mm when the config has no noise section).
std::vector<AblationRow> run_ablation(const ExperimentConfig& cfg);

}  // namespace wiss
