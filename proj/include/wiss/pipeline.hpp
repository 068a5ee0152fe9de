#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "wiss/backbone.hpp"
#include "wiss/data_model.hpp"
#include "wiss/metrics.hpp"
#include "wiss/refinement.hpp"

namespace wiss {

struct PipelineConfig {
  int self_train_iterations = 2;
  int propagation_radius = 2;
  BackboneConfig backbone;
  SelectionConfig selection;
  CrfConfig crf;
  std::uint64_t seed = 0;
  // Off when 0: stop an inner loop once the relative change of the final
  // epoch's total loss falls below this.
  double plateau_tolerance = 0.0;
  // false replaces CRF refinement by selection alone.
  bool refine = true;
};

void validate(const PipelineConfig& cfg);
nlohmann::json to_json(const PipelineConfig& cfg);
PipelineConfig pipeline_config_from_json(const nlohmann::json& j, const std::string& path,
                                         std::vector<std::string>& errors);

struct ProvenanceCounts {
  int coarse = 0;
  int selected = 0;
  int crf_refined = 0;
  int fallback = 0;  // slices that kept their previous labels
  bool operator==(const ProvenanceCounts&) const = default;
};

struct StageRecord {
  std::string stage;  // "self_train" or "propagate"
  int radius = 0;     // propagation offset k, 0 for self-training
  int iteration = 0;  // 1-based pass within the stage
  std::string checkpoint;
  std::vector<EpochLosses> training_log;
  ProvenanceCounts provenance;
  int training_slices = 0;
};

struct RunManifest {
  nlohmann::json config;
  std::vector<StageRecord> stages;
  std::vector<std::string> warnings;
  nlohmann::json metrics = nlohmann::json::object();
};

nlohmann::json to_json(const RunManifest& m);

struct SliceRef {
  std::string volume_id;
  int slice_index = 0;
  auto operator<=>(const SliceRef&) const = default;
};

struct PipelineState {
  std::optional<TrainedModel> model;
  LabelStore labels;
  // Checkpoint name -> model, in creation order.
  std::vector<std::pair<std::string, TrainedModel>> checkpoints;
  // Selection-only output of the model after each self-training pass, keyed
  // by pass; used to score the model before refinement.
  std::map<int, std::map<SliceRef, std::vector<InstanceMask>>> model_outputs;
  RunManifest manifest;
  int train_calls = 0;
};

// Keyed by volume id.
using VolumeSet = std::map<std::string, Volume>;

VolumeSet index_volumes(const std::vector<Volume>& volumes);

// One coarse mask per annotated vertebra at (volume, slice_index, 0).
LabelStore build_coarse_labels(const std::vector<LandmarkAnnotation>& annotations, const VolumeSet& volumes);

// Trains on the latest labels of `slices` and regenerates them
// self_train_iterations times, warm-starting from state.model.
void self_train(const VolumeSet& volumes, const std::vector<SliceRef>& slices, const PipelineConfig& cfg,
                PipelineState& state);

// Extends labels outward from the annotated slices, one offset at a time.
void slice_propagate(const VolumeSet& volumes, const std::vector<LandmarkAnnotation>& annotations,
                     const PipelineConfig& cfg, PipelineState& state);

// Stacks the latest masks of each slice into an int16 instance labelmap with
// instances linked across slices by overlap.
Volume assemble_volume(const LabelStore& labels, const Volume& volume, int mid_slice,
                       std::vector<std::string>* warnings = nullptr);

struct RunResult {
  PipelineState state;
  std::map<std::string, Volume> segmentations;
};

RunResult run_pipeline(const std::vector<Volume>& volumes, const std::vector<LandmarkAnnotation>& annotations,
                       const PipelineConfig& cfg);

// Per-vertebra 2D metrics of instance masks against ground-truth instances;
// each ground-truth instance is matched to the prediction of maximal overlap.
MetricsReport evaluate_instances(const std::map<SliceRef, std::vector<InstanceMask>>& pred, const LabelStore& gt);

std::map<SliceRef, std::vector<InstanceMask>> latest_labels(const LabelStore& store,
                                                            const std::vector<SliceRef>& slices);

struct RunEvaluation {
  std::map<int, MetricsReport> per_offset;  // signed offset from the annotated slice
  MetricsReport volumetric;
};

// Ground truth is restricted to slices within the propagation radius for the
// volumetric scores.
RunEvaluation evaluate_run(const RunResult& run, const std::vector<LandmarkAnnotation>& annotations,
                           const LabelStore& gt, const PipelineConfig& cfg, const ReportOptions& opts = {});

nlohmann::json to_json(const RunEvaluation& e);

}  // namespace wiss
