#include "wiss/phantom.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>

#include "wiss/config_json.hpp"
#include "wiss/geometry.hpp"

namespace wiss {

namespace {

constexpr int kBorderPx = 2;

struct VbPose {
  Point2 center;
  double angle = 0.0;  // rotation of the VB's vertical axis, radians
  double width = 0.0;
  double height = 0.0;
};

double curve_x(const std::vector<double>& coeffs, double y) {
  double acc = 0.0;
  for (auto it = coeffs.rbegin(); it != coeffs.rend(); ++it) acc = acc * y + *it;
  return acc;
}

double curve_slope(const std::vector<double>& coeffs, double y) {
  double acc = 0.0;
  for (size_t k = coeffs.size(); k-- > 1;) acc = acc * y + static_cast<double>(k) * coeffs[k];
  return acc;
}

// Local (u across, v along the spine) coordinates of a pixel center.
std::pair<double, double> to_local(const VbPose& pose, double x, double y) {
  const double dx = x - pose.center.x;
  const double dy = y - pose.center.y;
  const double c = std::cos(pose.angle);
  const double s = std::sin(pose.angle);
  return {dx * c - dy * s, dx * s + dy * c};
}

Point2 to_image(const VbPose& pose, double u, double v) {
  const double c = std::cos(pose.angle);
  const double s = std::sin(pose.angle);
  return {pose.center.x + u * c + v * s, pose.center.y - u * s + v * c};
}

bool inside_vb(const VbPose& pose, double x, double y) {
  const auto [u, v] = to_local(pose, x, y);
  const double hw = pose.width / 2.0;
  const double hh = pose.height / 2.0;
  if (std::abs(u) > hw || std::abs(v) > hh) return false;
  const double t = u / hw;
  const double bow = kEndplateBow * pose.height * (1.0 - t * t);
  if (v < -hh + bow || v > hh - bow) return false;
  const double r = kCornerRounding * std::min(pose.width, pose.height);
  const double cu = std::abs(u) - (hw - r);
  const double cv = std::abs(v) - (hh - r);
  if (cu > 0.0 && cv > 0.0 && cu * cu + cv * cv > r * r) return false;
  return true;
}

std::array<Point2, 4> true_corners(const VbPose& pose) {
  const double hw = pose.width / 2.0;
  const double hh = pose.height / 2.0;
  return {to_image(pose, -hw, -hh), to_image(pose, hw, -hh), to_image(pose, hw, hh), to_image(pose, -hw, hh)};
}

std::vector<std::string> validate_spec(const PhantomSpec& spec) {
  std::vector<std::string> errors;
  for (int d : spec.dims) {
    if (d < 1) errors.push_back("dims must be >= 1");
  }
  for (double s : spec.spacing_mm) {
    if (!(s > 0.0) || !std::isfinite(s)) errors.push_back("spacing_mm must be finite and > 0");
  }
  if (spec.n_vertebrae < 2) errors.push_back("n_vertebrae must be >= 2");
  if (spec.gap_px < 1.0) errors.push_back("gap_px must be >= 1");
  if (!(spec.contrast.bone_mean > spec.contrast.background_mean)) {
    errors.push_back("bone_mean must exceed background_mean");
  }
  if (spec.contrast.noise_sigma < 0.0) errors.push_back("noise_sigma must be >= 0");
  if (!(spec.vb_height_px > 2.0) || !(spec.vb_width_px > 2.0)) errors.push_back("VB sizes must exceed 2 px");
  if (spec.spine_curve_coeffs.empty()) errors.push_back("spine_curve_coeffs must not be empty");
  if (spec.collapse) {
    if (spec.collapse->vertebra_index < 0 || spec.collapse->vertebra_index >= spec.n_vertebrae) {
      errors.push_back("collapse.vertebra_index out of range");
    }
    if (!(spec.collapse->height_scale > 0.0 && spec.collapse->height_scale < 1.0)) {
      errors.push_back("collapse.height_scale must be in (0,1)");
    }
  }
  if (!spec.extrusion_profile.empty()) {
    if (static_cast<int>(spec.extrusion_profile.size()) != spec.dims[0]) {
      errors.push_back("extrusion_profile needs one entry per slice");
    }
    for (double s : spec.extrusion_profile) {
      if (!(s > 0.0 && s <= 1.0)) errors.push_back("extrusion_profile entries must be in (0,1]");
    }
  }
  return errors;
}

}  // namespace

std::vector<double> default_extrusion_profile(int slices) {
  // Chord of an elliptic cylinder: sqrt(1 - (d / R)^2) with R reaching the outermost slice.
  std::vector<double> profile(static_cast<size_t>(slices));
  const int mid = slices / 2;
  const double radius = slices / 2.0 - 0.5;
  for (int s = 0; s < slices; ++s) {
    const double d = static_cast<double>(s - mid) / radius;
    profile[static_cast<size_t>(s)] = std::sqrt(std::max(0.05, 1.0 - d * d));
  }
  return profile;
}

Phantom generate_phantom(const PhantomSpec& spec) {
  throw_if_errors(validate_spec(spec), "phantom spec '" + spec.volume_id + "'");

  const int S = spec.dims[0];
  const int H = spec.dims[1];
  const int W = spec.dims[2];
  const int mid = S / 2;
  const auto profile = spec.extrusion_profile.empty() ? default_extrusion_profile(S) : spec.extrusion_profile;

  std::mt19937_64 rng(spec.seed);
  std::uniform_real_distribution<double> size_jitter(0.92, 1.08);

  std::vector<double> heights(static_cast<size_t>(spec.n_vertebrae));
  std::vector<double> widths(static_cast<size_t>(spec.n_vertebrae));
  for (int i = 0; i < spec.n_vertebrae; ++i) {
    heights[static_cast<size_t>(i)] = spec.vb_height_px * size_jitter(rng);
    widths[static_cast<size_t>(i)] = spec.vb_width_px * size_jitter(rng);
  }
  if (spec.collapse) heights[static_cast<size_t>(spec.collapse->vertebra_index)] *= spec.collapse->height_scale;

  // Centers advance down the column; collapsed VBs keep their slot.
  std::vector<double> slot(heights.size());
  for (int i = 0; i < spec.n_vertebrae; ++i) {
    double h = spec.vb_height_px;
    if (!spec.collapse || spec.collapse->vertebra_index != i) h = heights[static_cast<size_t>(i)];
    slot[static_cast<size_t>(i)] = h;
  }
  double total = spec.gap_px * (spec.n_vertebrae - 1);
  for (double h : slot) total += h;
  double y_cursor = (H - 1 - total) / 2.0;

  std::vector<VbPose> mid_poses;
  for (int i = 0; i < spec.n_vertebrae; ++i) {
    const auto idx = static_cast<size_t>(i);
    const double cy = y_cursor + slot[idx] / 2.0;
    y_cursor += slot[idx] + spec.gap_px;
    VbPose pose;
    pose.center = {curve_x(spec.spine_curve_coeffs, cy), cy};
    pose.angle = std::atan(curve_slope(spec.spine_curve_coeffs, cy));
    pose.width = widths[idx];
    pose.height = heights[idx];
    mid_poses.push_back(pose);
  }

  std::vector<std::string> ids;
  for (int i = 0; i < spec.n_vertebrae; ++i) ids.push_back("vb" + std::to_string(i + 1));

  Phantom out;
  Volume vol(spec.volume_id, spec.dims, spec.spacing_mm);
  std::normal_distribution<double> noise(0.0, 1.0);

  for (int s = 0; s < S; ++s) {
    const double scale = profile[static_cast<size_t>(s)];
    const double bone = spec.contrast.background_mean +
                        (spec.contrast.bone_mean - spec.contrast.background_mean) * scale;
    std::vector<InstanceMask> masks;
    Mask2 occupied(H, W, 0);
    for (int i = 0; i < spec.n_vertebrae; ++i) {
      VbPose pose = mid_poses[static_cast<size_t>(i)];
      pose.width *= scale;
      pose.height *= 0.6 + 0.4 * scale;
      InstanceMask m{ids[static_cast<size_t>(i)], Mask2(H, W, 0), Provenance::kGroundTruth, 0, false};
      const double reach = std::hypot(pose.width, pose.height) / 2.0 + 1.0;
      const int y0 = std::max(0, static_cast<int>(std::floor(pose.center.y - reach)));
      const int y1 = std::min(H - 1, static_cast<int>(std::ceil(pose.center.y + reach)));
      const int x0 = std::max(0, static_cast<int>(std::floor(pose.center.x - reach)));
      const int x1 = std::min(W - 1, static_cast<int>(std::ceil(pose.center.x + reach)));
      for (int y = y0; y <= y1; ++y) {
        for (int x = x0; x <= x1; ++x) {
          if (!inside_vb(pose, x, y)) continue;
          if (x < kBorderPx || y < kBorderPx || x >= W - kBorderPx || y >= H - kBorderPx) {
            throw Error(ErrorCode::kOutOfBounds, "geometry overflow: '" + m.vertebra_id + "' touches the border");
          }
          if (occupied.at(y, x)) {
            throw Error(ErrorCode::kOutOfBounds, "geometry overflow: vertebrae overlap on slice " + std::to_string(s));
          }
          occupied.at(y, x) = 1;
          m.mask.at(y, x) = 1;
        }
      }
      if (m.foreground() > 0) masks.push_back(std::move(m));
    }
    for (int y = 0; y < H; ++y) {
      for (int x = 0; x < W; ++x) {
        const double mean = occupied.at(y, x) ? bone : spec.contrast.background_mean;
        const double v = std::round(mean + spec.contrast.noise_sigma * noise(rng));
        vol.at(s, y, x) = static_cast<std::int16_t>(std::clamp(v, -32768.0, 32767.0));
      }
    }
    if (!masks.empty()) out.ground_truth.put(LabelKey{spec.volume_id, s, 0}, std::move(masks), "phantom");
  }

  out.annotation.volume_id = spec.volume_id;
  out.annotation.slice_index = mid;
  for (int i = 0; i < spec.n_vertebrae; ++i) {
    VbPose pose = mid_poses[static_cast<size_t>(i)];
    pose.width *= profile[static_cast<size_t>(mid)];
    pose.height *= 0.6 + 0.4 * profile[static_cast<size_t>(mid)];
    VertebraLandmarks vl{ids[static_cast<size_t>(i)], true_corners(pose)};
    for (const auto& c : vl.corners) {
      if (c.x < kBorderPx || c.y < kBorderPx || c.x > W - 1 - kBorderPx || c.y > H - 1 - kBorderPx) {
        throw Error(ErrorCode::kOutOfBounds, "geometry overflow: corner of '" + vl.vertebra_id + "'");
      }
    }
    out.annotation.vertebrae.push_back(std::move(vl));
  }
  validate(out.annotation, SliceBounds{S, H, W});
  out.volume = std::move(vol);
  return out;
}

LandmarkAnnotation jitter_landmarks(const LandmarkAnnotation& a, std::array<double, 2> spacing_mm,
                                    double max_shift_mm, std::uint64_t seed, int max_retries) {
  if (!(max_shift_mm >= 0.0)) throw Error(ErrorCode::kInvalidConfig, "max_shift_mm must be >= 0");
  if (!(spacing_mm[0] > 0.0 && spacing_mm[1] > 0.0)) throw Error(ErrorCode::kInvalidSpacing, "jitter spacing");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> radius(0.0, max_shift_mm);
  std::uniform_real_distribution<double> angle(0.0, 2.0 * std::numbers::pi);

  LandmarkAnnotation out = a;
  for (auto& v : out.vertebrae) {
    for (size_t c = 0; c < 4; ++c) {
      const Point2 original = v.corners[c];
      bool ok = false;
      for (int attempt = 0; attempt < max_retries && !ok; ++attempt) {
        const double r = radius(rng);
        const double phi = angle(rng);
        v.corners[c] = {original.x + r * std::cos(phi) / spacing_mm[1], original.y + r * std::sin(phi) / spacing_mm[0]};
        ok = std::abs(signed_area(v.corners)) > 1e-9 && is_simple_polygon(v.corners);
      }
      if (!ok) {
        throw Error(ErrorCode::kRetriesExhausted, "could not jitter '" + v.vertebra_id + "' into a simple quadrilateral");
      }
    }
  }
  return out;
}

std::vector<PhantomSpec> standard_phantom_suite(int count, std::uint64_t base_seed) {
  std::vector<PhantomSpec> specs;
  for (int i = 0; i < count; ++i) {
    PhantomSpec spec;
    spec.seed = base_seed * 1000003ULL + static_cast<std::uint64_t>(i);
    spec.volume_id = "phantom_" + std::string(i < 10 ? "0" : "") + std::to_string(i);
    std::mt19937_64 rng(spec.seed ^ 0x5bd1e995ULL);
    std::uniform_real_distribution<double> slope(-0.1, 0.1);
    std::uniform_real_distribution<double> bend(-0.0015, 0.0015);
    std::uniform_real_distribution<double> shift(-6.0, 6.0);
    // x = c + a (y - 64) + b (y - 64)^2, expanded in powers of y.
    const double a = slope(rng);
    const double b = bend(rng);
    const double c = 64.0 + shift(rng);
    spec.spine_curve_coeffs = {c - 64.0 * a + 4096.0 * b, a - 128.0 * b, b};
    specs.push_back(std::move(spec));
  }
  return specs;
}

nlohmann::json to_json(const PhantomSpec& spec) {
  nlohmann::json j;
  j["volume_id"] = spec.volume_id;
  j["seed"] = spec.seed;
  j["dims"] = spec.dims;
  j["spacing_mm"] = spec.spacing_mm;
  j["n_vertebrae"] = spec.n_vertebrae;
  j["spine_curve_coeffs"] = spec.spine_curve_coeffs;
  j["vb_height_px"] = spec.vb_height_px;
  j["vb_width_px"] = spec.vb_width_px;
  j["gap_px"] = spec.gap_px;
  j["contrast"] = {{"bone_mean", spec.contrast.bone_mean},
                   {"background_mean", spec.contrast.background_mean},
                   {"noise_sigma", spec.contrast.noise_sigma}};
  if (spec.collapse) {
    j["collapse"] = {{"vertebra_index", spec.collapse->vertebra_index},
                     {"height_scale", spec.collapse->height_scale}};
  } else {
    j["collapse"] = nullptr;
  }
  j["extrusion_profile"] = spec.extrusion_profile;
  return j;
}

PhantomSpec phantom_spec_from_json(const nlohmann::json& j, const std::string& path,
                                   std::vector<std::string>& errors) {
  PhantomSpec d;
  JsonReader r(j, path, errors);
  PhantomSpec s;
  s.volume_id = r.get("volume_id", d.volume_id);
  s.seed = r.get<std::uint64_t>("seed", d.seed);
  s.dims = r.get("dims", d.dims);
  s.spacing_mm = r.get("spacing_mm", d.spacing_mm);
  s.n_vertebrae = r.get("n_vertebrae", d.n_vertebrae);
  s.spine_curve_coeffs = r.get("spine_curve_coeffs", d.spine_curve_coeffs);
  s.vb_height_px = r.get("vb_height_px", d.vb_height_px);
  s.vb_width_px = r.get("vb_width_px", d.vb_width_px);
  s.gap_px = r.get("gap_px", d.gap_px);
  if (r.has("contrast")) {
    JsonReader c(r.child("contrast"), r.sub("contrast"), errors);
    s.contrast.bone_mean = c.get("bone_mean", d.contrast.bone_mean);
    s.contrast.background_mean = c.get("background_mean", d.contrast.background_mean);
    s.contrast.noise_sigma = c.get("noise_sigma", d.contrast.noise_sigma);
    c.finish();
  }
  if (r.has("collapse")) {
    JsonReader c(r.child("collapse"), r.sub("collapse"), errors);
    Collapse col;
    col.vertebra_index = c.require<int>("vertebra_index");
    col.height_scale = c.require<double>("height_scale");
    c.finish();
    s.collapse = col;
  }
  s.extrusion_profile = r.get("extrusion_profile", d.extrusion_profile);
  r.finish();
  for (const auto& e : validate_spec(s)) errors.push_back(path + ": " + e);
  return s;
}

Volume labelmap_from_store(const LabelStore& store, const Volume& like,
                           const std::vector<std::string>& vertebra_order) {
  Volume out(like.id(), like.dims(), like.spacing());
  for (const auto& [key, entry] : store.entries()) {
    if (key.volume_id != like.id()) continue;
    if (store.latest_iteration(key.volume_id, key.slice_index) != key.iteration) continue;
    for (const auto& m : entry.instances) {
      auto it = std::find(vertebra_order.begin(), vertebra_order.end(), m.vertebra_id);
      if (it == vertebra_order.end()) continue;
      const auto label = static_cast<std::int16_t>(1 + (it - vertebra_order.begin()));
      for (int y = 0; y < like.height(); ++y) {
        for (int x = 0; x < like.width(); ++x) {
          if (m.mask.at(y, x) && out.at(key.slice_index, y, x) == 0) out.at(key.slice_index, y, x) = label;
        }
      }
    }
  }
  return out;
}

}  // namespace wiss
