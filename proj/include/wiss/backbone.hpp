#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "wiss/data_model.hpp"

namespace wiss {

struct BackboneConfig {
  std::array<int, 2> input_size{128, 128};  // (H, W)
  int max_instances = 8;
  double learning_rate = 0.001;
  double momentum = 0.9;
  int epochs = 50;
  double edge_loss_alpha = 0.1;
  std::uint64_t seed = 0;
  bool operator==(const BackboneConfig&) const = default;
};

void validate(const BackboneConfig& cfg, bool warm_start = false);
nlohmann::json to_json(const BackboneConfig& cfg);
BackboneConfig backbone_config_from_json(const nlohmann::json& j, const std::string& path,
                                         std::vector<std::string>& errors, bool allow_zero_epochs = false);

struct EpochLosses {
  double cls = 0.0;
  double box = 0.0;
  double mask = 0.0;
  double edge = 0.0;
  double total = 0.0;
  bool operator==(const EpochLosses&) const = default;
};

struct TrainedModel {
  BackboneConfig config;
  std::vector<double> params;
  std::vector<EpochLosses> training_log;
  bool operator==(const TrainedModel&) const = default;
};

struct TrainingSlice {
  Image2 image;
  std::vector<InstanceMask> labels;
};

// cls + box + mask + alpha * edge. Throws kNonFinite.
double total_loss(double cls, double box, double mask, double edge, double alpha);

inline constexpr double kEdgeLossEpsilon = 1e-8;

// Mean over pixels of sqrt((Mx - Gx)^2 + (My - Gy)^2 + eps).
double edge_loss(const Image2& m, const Image2& g);

struct EdgeLossResult {
  double value = 0.0;
  Image2 grad;  // d value / d m
};
EdgeLossResult edge_loss_with_grad(const Image2& m, const Image2& g);

// Warm-starts from `init` when given; epochs == 0 is only valid with `init`.
TrainedModel train(const std::vector<TrainingSlice>& slices, const BackboneConfig& cfg,
                   const std::optional<TrainedModel>& init = std::nullopt);

std::vector<InstancePrediction> predict(const TrainedModel& model, const Image2& image);

// Versioned little-endian float64 blob plus a .json sidecar (same stem) with config
// and training log.
void write_checkpoint(const TrainedModel& model, const std::filesystem::path& path);
TrainedModel read_checkpoint(const std::filesystem::path& path);

// Exposed for tests.
namespace backbone_detail {

inline constexpr int kFeatureChannels = 8;
inline constexpr int kGridStride = 4;
inline constexpr int kMaskMargin = 4;

struct FeatureStack {
  int height = 0;
  int width = 0;
  std::vector<float> data;  // channel-major
  float at(int c, int y, int x) const {
    return data[(static_cast<size_t>(c) * height + y) * width + x];
  }
};

FeatureStack compute_features(const Image2& image);
size_t parameter_count();

}  // namespace backbone_detail

}  // namespace wiss
