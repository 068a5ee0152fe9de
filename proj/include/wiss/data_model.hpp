#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <tuple>
#include <vector>

#include "wiss/error.hpp"

namespace wiss {

// Dense row-major 2D array.
template <typename T>
struct Grid2 {
  int height = 0;
  int width = 0;
  std::vector<T> data;

  Grid2() = default;
  Grid2(int h, int w, T fill = T{}) : height(h), width(w), data(static_cast<size_t>(h) * w, fill) {}

  T& at(int y, int x) { return data[static_cast<size_t>(y) * width + x]; }
  const T& at(int y, int x) const { return data[static_cast<size_t>(y) * width + x]; }
  size_t size() const { return data.size(); }

  template <typename U>
  bool same_shape(const Grid2<U>& o) const {
    return height == o.height && width == o.width;
  }

  bool operator==(const Grid2&) const = default;
};

using Mask2 = Grid2<std::uint8_t>;
using Image2 = Grid2<double>;

struct Point2 {
  double x = 0.0;
  double y = 0.0;
  bool operator==(const Point2&) const = default;
};

// Half-open pixel box [x0, x1) x [y0, y1).
struct BBox {
  int x0 = 0;
  int y0 = 0;
  int x1 = 0;
  int y1 = 0;

  int width() const { return x1 - x0; }
  int height() const { return y1 - y0; }
  bool operator==(const BBox&) const = default;
};

class Volume {
 public:
  Volume() = default;
  Volume(std::string id, std::array<int, 3> dims, std::array<double, 3> spacing_mm);
  Volume(std::string id, std::array<int, 3> dims, std::array<double, 3> spacing_mm,
         std::vector<std::int16_t> voxels);

  const std::string& id() const { return id_; }
  int slices() const { return dims_[0]; }
  int height() const { return dims_[1]; }
  int width() const { return dims_[2]; }
  const std::array<int, 3>& dims() const { return dims_; }
  // (ds, dy, dx) in millimeters.
  const std::array<double, 3>& spacing() const { return spacing_; }
  int mid_slice() const { return dims_[0] / 2; }

  std::int16_t& at(int s, int y, int x) { return voxels_[index(s, y, x)]; }
  std::int16_t at(int s, int y, int x) const { return voxels_[index(s, y, x)]; }
  const std::vector<std::int16_t>& voxels() const { return voxels_; }

  Image2 slice_image(int s) const;

  bool operator==(const Volume&) const = default;

 private:
  size_t index(int s, int y, int x) const {
    return (static_cast<size_t>(s) * dims_[1] + y) * dims_[2] + x;
  }
  void validate() const;

  std::string id_;
  std::array<int, 3> dims_{0, 0, 0};
  std::array<double, 3> spacing_{1.0, 1.0, 1.0};
  std::vector<std::int16_t> voxels_;
};

// Corners ordered anterior-superior, posterior-superior, posterior-inferior,
// anterior-inferior. Anterior is the low-x side, superior the low-y side, so
// the order is clockwise on screen starting top-left.
struct VertebraLandmarks {
  std::string vertebra_id;
  std::array<Point2, 4> corners;
  bool operator==(const VertebraLandmarks&) const = default;
};

struct LandmarkAnnotation {
  std::string volume_id;
  int slice_index = 0;
  std::vector<VertebraLandmarks> vertebrae;
  bool operator==(const LandmarkAnnotation&) const = default;
};

// Bounds used to validate annotations against a volume.
struct SliceBounds {
  int slices = 0;
  int height = 0;
  int width = 0;
};

enum class Provenance { kCoarse, kModel, kSelected, kCrfRefined, kGroundTruth };

std::string_view to_string(Provenance p);
Provenance provenance_from_string(std::string_view s);
// Forward-only along coarse -> model -> selected -> crf_refined; ground_truth is terminal.
bool provenance_can_follow(Provenance from, Provenance to);

struct InstanceMask {
  std::string vertebra_id;
  Mask2 mask;
  Provenance provenance = Provenance::kCoarse;
  int iteration = 0;
  // Set when the entry was carried over because refinement produced nothing.
  bool fallback = false;

  long foreground() const;
  bool operator==(const InstanceMask&) const = default;
};

struct InstancePrediction {
  double objectness = 0.0;
  BBox bbox;
  // Defined over bbox; prob_map.height == bbox.height(), prob_map.width == bbox.width().
  Image2 prob_map;
};

void validate(const InstanceMask& m);
void validate(const InstancePrediction& p, int height, int width);

// Throws kOutOfBounds / kSelfIntersecting / kDegenerateGeometry / kMalformed.
void validate(const LandmarkAnnotation& a, const std::optional<SliceBounds>& bounds = std::nullopt);

// Reorders the corners of a simple quadrilateral into the canonical order.
std::array<Point2, 4> canonicalize_corners(const std::array<Point2, 4>& corners);

// Keyed by (volume_id, slice_index, iteration).
struct LabelKey {
  std::string volume_id;
  int slice_index = 0;
  int iteration = 0;
  auto operator<=>(const LabelKey&) const = default;
};

struct LabelEntry {
  std::vector<InstanceMask> instances;
  std::string generation;
  bool operator==(const LabelEntry&) const = default;
};

class LabelStore {
 public:
  // Rejects duplicate vertebra ids and replaces any existing entry for the key.
  void put(const LabelKey& key, std::vector<InstanceMask> instances, std::string generation);

  bool contains(const LabelKey& key) const { return entries_.count(key) != 0; }
  const LabelEntry& at(const LabelKey& key) const;
  const std::map<LabelKey, LabelEntry>& entries() const { return entries_; }

  std::vector<std::string> volume_ids() const;
  std::vector<int> slice_indices(const std::string& volume_id) const;
  std::vector<int> iterations(const std::string& volume_id, int slice_index) const;
  std::optional<int> latest_iteration(const std::string& volume_id, int slice_index) const;
  // Entry at the highest iteration for the slice, or nullptr.
  const LabelEntry* latest(const std::string& volume_id, int slice_index) const;

  size_t size() const { return entries_.size(); }
  bool operator==(const LabelStore&) const = default;

 private:
  std::map<LabelKey, LabelEntry> entries_;
};

// Run-length encoding, row-major, alternating runs starting with background.
std::vector<std::uint32_t> rle_encode(const Mask2& mask);
Mask2 rle_decode(const std::vector<std::uint32_t>& counts, int height, int width);

// `path` is the header (<name>.json); the payload lives in <name>.raw.
Volume read_volume(const std::filesystem::path& path);
void write_volume(const Volume& v, const std::filesystem::path& path);

LandmarkAnnotation read_annotation(const std::filesystem::path& path,
                                   const std::optional<SliceBounds>& bounds = std::nullopt);
void write_annotation(const LandmarkAnnotation& a, const std::filesystem::path& path);

// One subdirectory per volume, one RLE JSON file per (slice, iteration).
void write_label_store(const LabelStore& store, const std::filesystem::path& dir);
LabelStore read_label_store(const std::filesystem::path& dir);

// Helpers shared by the file formats above.
std::filesystem::path raw_path_for(const std::filesystem::path& header);
void write_text_file(const std::filesystem::path& path, const std::string& text);
std::string read_text_file(const std::filesystem::path& path);

}  // namespace wiss
