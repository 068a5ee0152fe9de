#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "wiss/data_model.hpp"

namespace wiss {

struct Contrast {
  double bone_mean = 140.0;
  double background_mean = 100.0;
  double noise_sigma = 10.0;
};

struct Collapse {
  int vertebra_index = 0;
  double height_scale = 0.6;
};

// Parameters of a synthetic sagittal spine volume. Sizes are in pixels of the
// in-plane grid; the spine centerline is x = sum(coeffs[k] * y^k).
struct PhantomSpec {
  std::string volume_id = "phantom";
  std::uint64_t seed = 0;
  std::array<int, 3> dims{9, 128, 128};
  std::array<double, 3> spacing_mm{2.0, 0.8, 0.8};
  int n_vertebrae = 4;
  std::vector<double> spine_curve_coeffs{64.0};
  double vb_height_px = 20.0;
  double vb_width_px = 30.0;
  double gap_px = 6.0;
  Contrast contrast;
  std::optional<Collapse> collapse;
  // One lateral scale per slice; empty selects the default profile that
  // shrinks cross-sections toward the marginal slices.
  std::vector<double> extrusion_profile;
};

// Superior/inferior endplates bow inward by this fraction of the VB height.
inline constexpr double kEndplateBow = 0.12;
// Corner rounding radius as a fraction of min(width, height).
inline constexpr double kCornerRounding = 0.18;

struct Phantom {
  Volume volume;
  LandmarkAnnotation annotation;
  // Ground-truth masks at iteration 0 for every slice with a visible VB.
  LabelStore ground_truth;
};

std::vector<double> default_extrusion_profile(int slices);

// Throws kInvalidConfig for invariant violations and kOutOfBounds when the
// geometry does not fit with a 2 px border.
Phantom generate_phantom(const PhantomSpec& spec);

// Displaces each corner by a uniform distance in [0, max_shift_mm] along a
// uniform direction; spacing_mm is (dy, dx).
LandmarkAnnotation jitter_landmarks(const LandmarkAnnotation& a, std::array<double, 2> spacing_mm,
                                    double max_shift_mm, std::uint64_t seed, int max_retries = 100);

// 128x128x9 volumes with 4 VBs each and seed-derived curvature and sizes.
std::vector<PhantomSpec> standard_phantom_suite(int count, std::uint64_t base_seed);

nlohmann::json to_json(const PhantomSpec& spec);
PhantomSpec phantom_spec_from_json(const nlohmann::json& j, const std::string& path,
                                   std::vector<std::string>& errors);

// Instance-id labelmap (int16, ids 1..n in annotation order) from a ground-truth store.
Volume labelmap_from_store(const LabelStore& store, const Volume& like,
                           const std::vector<std::string>& vertebra_order);

}  // namespace wiss
