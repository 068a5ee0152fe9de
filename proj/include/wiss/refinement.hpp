#pragma once

#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "wiss/data_model.hpp"
#include "wiss/geometry.hpp"

namespace wiss {

struct SelectionConfig {
  double t1_objectness = 0.9;
  double t2_pixel = 0.5;
  int curve_degree = 2;
  // Curve-distance cutoff as a multiple of the median ROI height.
  double rejection_factor = 1.5;
  int min_rois_for_curve = 3;
};

struct CrfConfig {
  int n_iterations = 5;
  double appearance_weight = 2.0;
  double spatial_weight = 1.0;
  double appearance_sigma_xy = 30.0;
  double appearance_sigma_intensity = 10.0;
  double spatial_sigma_xy = 3.0;
};

void validate(const SelectionConfig& cfg);
void validate(const CrfConfig& cfg);
nlohmann::json to_json(const SelectionConfig& cfg);
nlohmann::json to_json(const CrfConfig& cfg);
SelectionConfig selection_config_from_json(const nlohmann::json& j, const std::string& path,
                                           std::vector<std::string>& errors);
CrfConfig crf_config_from_json(const nlohmann::json& j, const std::string& path, std::vector<std::string>& errors);

struct Selection {
  // Provenance `selected`, ids "roi<k>" numbered top to bottom.
  std::vector<InstanceMask> kept;
  // Index into the input predictions for each kept mask.
  std::vector<size_t> kept_source;
  std::vector<InstancePrediction> rejected;
  std::optional<SpineCurve> curve;
};

// (height, width) is the slice shape the prediction boxes refer to.
Selection select_confident(const std::vector<InstancePrediction>& preds, int height, int width,
                           const SelectionConfig& cfg);

// Binary fully connected CRF solved by parallel mean-field updates; returns
// the per-pixel argmax (ties go to foreground).
Mask2 crf_refine(const Image2& image, const Image2& mask_prob, const CrfConfig& cfg);
// Inactive pixels take no part in the field and come out as background.
Mask2 crf_refine(const Image2& image, const Image2& mask_prob, const Mask2& active, const CrfConfig& cfg);

inline constexpr double kUnaryClamp = 1e-5;
inline constexpr int kCrfWindowMargin = 8;

// Foreground probability over the CRF window of one kept instance: the
// prediction's prob_map inside its bbox, 0 elsewhere. Pixels owned by other
// kept instances are inactive.
struct CrfWindow {
  BBox window;
  Image2 image;
  Image2 prob;
  Mask2 active;
};
CrfWindow crf_window(const Image2& image, const Selection& sel, const std::vector<InstancePrediction>& preds,
                     size_t kept_index);

// select_confident followed by crf_refine on each kept instance's window.
// Provenance crf_refined; empty results are dropped.
std::vector<InstanceMask> refine_labels(const Image2& image, const std::vector<InstancePrediction>& preds,
                                        const SelectionConfig& sel_cfg, const CrfConfig& crf_cfg,
                                        int iteration = 0);

// Selection only, without CRF (provenance selected).
std::vector<InstanceMask> select_labels(const Image2& image, const std::vector<InstancePrediction>& preds,
                                        const SelectionConfig& sel_cfg, int iteration = 0);

}  // namespace wiss
