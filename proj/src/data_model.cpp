#include "wiss/data_model.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>

#include "json.hpp"
#include "wiss/geometry.hpp"

namespace wiss {

namespace fs = std::filesystem;
using nlohmann::json;

std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::kMissingFile: return "missing_file";
    case ErrorCode::kSizeMismatch: return "size_mismatch";
    case ErrorCode::kInvalidSpacing: return "invalid_spacing";
    case ErrorCode::kMalformed: return "malformed";
    case ErrorCode::kOutOfBounds: return "out_of_bounds";
    case ErrorCode::kSelfIntersecting: return "self_intersecting";
    case ErrorCode::kDegenerateGeometry: return "degenerate_geometry";
    case ErrorCode::kInsufficientPoints: return "insufficient_points";
    case ErrorCode::kRankDeficient: return "rank_deficient";
    case ErrorCode::kShapeMismatch: return "shape_mismatch";
    case ErrorCode::kNonFinite: return "non_finite";
    case ErrorCode::kInvalidConfig: return "invalid_config";
    case ErrorCode::kEmptyTrainingSet: return "empty_training_set";
    case ErrorCode::kRetriesExhausted: return "retries_exhausted";
    case ErrorCode::kUndefinedDistance: return "undefined_distance";
    case ErrorCode::kDuplicateEntry: return "duplicate_entry";
    case ErrorCode::kIo: return "io";
  }
  return "unknown";
}

// ---------------------------------------------------------------------------
// Volume

Volume::Volume(std::string id, std::array<int, 3> dims, std::array<double, 3> spacing_mm)
    : id_(std::move(id)), dims_(dims), spacing_(spacing_mm) {
  validate();
  voxels_.assign(static_cast<size_t>(dims[0]) * dims[1] * dims[2], 0);
}

Volume::Volume(std::string id, std::array<int, 3> dims, std::array<double, 3> spacing_mm,
               std::vector<std::int16_t> voxels)
    : id_(std::move(id)), dims_(dims), spacing_(spacing_mm), voxels_(std::move(voxels)) {
  validate();
  const size_t expected = static_cast<size_t>(dims[0]) * dims[1] * dims[2];
  if (voxels_.size() != expected) {
    throw Error(ErrorCode::kSizeMismatch,
                "expected " + std::to_string(expected) + " voxels, got " + std::to_string(voxels_.size()));
  }
}

void Volume::validate() const {
  for (int d : dims_) {
    if (d < 1) throw Error(ErrorCode::kMalformed, "volume dimensions must be >= 1");
  }
  for (double s : spacing_) {
    if (!std::isfinite(s) || s <= 0.0) {
      throw Error(ErrorCode::kInvalidSpacing, "spacing must be finite and > 0");
    }
  }
}

Image2 Volume::slice_image(int s) const {
  if (s < 0 || s >= slices()) throw Error(ErrorCode::kOutOfBounds, "slice " + std::to_string(s));
  Image2 img(height(), width());
  for (int y = 0; y < height(); ++y) {
    for (int x = 0; x < width(); ++x) img.at(y, x) = at(s, y, x);
  }
  return img;
}

// ---------------------------------------------------------------------------
// Provenance and validation

std::string_view to_string(Provenance p) {
  switch (p) {
    case Provenance::kCoarse: return "coarse";
    case Provenance::kModel: return "model";
    case Provenance::kSelected: return "selected";
    case Provenance::kCrfRefined: return "crf_refined";
    case Provenance::kGroundTruth: return "ground_truth";
  }
  return "unknown";
}

Provenance provenance_from_string(std::string_view s) {
  for (auto p : {Provenance::kCoarse, Provenance::kModel, Provenance::kSelected, Provenance::kCrfRefined,
                 Provenance::kGroundTruth}) {
    if (to_string(p) == s) return p;
  }
  throw Error(ErrorCode::kMalformed, "unknown provenance '" + std::string(s) + "'");
}

bool provenance_can_follow(Provenance from, Provenance to) {
  if (from == Provenance::kGroundTruth || to == Provenance::kGroundTruth) return from == to;
  return static_cast<int>(to) >= static_cast<int>(from);
}

long InstanceMask::foreground() const { return count_foreground(mask); }

void validate(const InstanceMask& m) {
  if (m.iteration < 0) throw Error(ErrorCode::kMalformed, "negative iteration");
  if (m.mask.size() != static_cast<size_t>(m.mask.height) * m.mask.width) {
    throw Error(ErrorCode::kSizeMismatch, "mask payload does not match its shape");
  }
  if (m.provenance != Provenance::kModel && m.foreground() == 0) {
    throw Error(ErrorCode::kMalformed, "instance '" + m.vertebra_id + "' has an empty mask");
  }
}

void validate(const InstancePrediction& p, int height, int width) {
  if (!(p.objectness >= 0.0 && p.objectness <= 1.0)) {
    throw Error(ErrorCode::kOutOfBounds, "objectness outside [0,1]");
  }
  const auto& b = p.bbox;
  if (b.x0 < 0 || b.y0 < 0 || b.x1 > width || b.y1 > height || b.x0 >= b.x1 || b.y0 >= b.y1) {
    throw Error(ErrorCode::kOutOfBounds, "bbox outside slice");
  }
  if (p.prob_map.height != b.height() || p.prob_map.width != b.width()) {
    throw Error(ErrorCode::kShapeMismatch, "prob_map does not match bbox");
  }
  for (double v : p.prob_map.data) {
    if (!(v >= 0.0 && v <= 1.0)) throw Error(ErrorCode::kOutOfBounds, "probability outside [0,1]");
  }
}

void validate(const LandmarkAnnotation& a, const std::optional<SliceBounds>& bounds) {
  if (a.vertebrae.empty()) throw Error(ErrorCode::kMalformed, "annotation has no vertebrae");
  if (bounds && (a.slice_index < 0 || a.slice_index >= bounds->slices)) {
    throw Error(ErrorCode::kOutOfBounds, "slice_index " + std::to_string(a.slice_index) + " outside volume");
  }
  std::set<std::string> ids;
  for (const auto& v : a.vertebrae) {
    if (!ids.insert(v.vertebra_id).second) {
      throw Error(ErrorCode::kDuplicateEntry, "duplicate vertebra id '" + v.vertebra_id + "'");
    }
    for (const auto& c : v.corners) {
      if (!std::isfinite(c.x) || !std::isfinite(c.y)) throw Error(ErrorCode::kNonFinite, "corner");
      if (bounds && (c.x < 0 || c.y < 0 || c.x > bounds->width - 1 || c.y > bounds->height - 1)) {
        throw Error(ErrorCode::kOutOfBounds, "corner of '" + v.vertebra_id + "' outside slice");
      }
    }
    if (is_collinear(v.corners)) {
      throw Error(ErrorCode::kDegenerateGeometry, "'" + v.vertebra_id + "' corners are collinear");
    }
    if (!is_simple_polygon(v.corners)) {
      throw Error(ErrorCode::kSelfIntersecting, "'" + v.vertebra_id + "' corners self-intersect");
    }
  }
}

std::array<Point2, 4> canonicalize_corners(const std::array<Point2, 4>& corners) {
  Point2 c{0.0, 0.0};
  for (const auto& p : corners) {
    c.x += p.x / 4.0;
    c.y += p.y / 4.0;
  }
  std::array<Point2, 4> sorted = corners;
  // Increasing atan2 in y-down coordinates runs clockwise on screen.
  std::stable_sort(sorted.begin(), sorted.end(), [&](const Point2& a, const Point2& b) {
    return std::atan2(a.y - c.y, a.x - c.x) < std::atan2(b.y - c.y, b.x - c.x);
  });
  size_t start = 0;
  for (size_t i = 1; i < 4; ++i) {
    const double si = sorted[i].x + sorted[i].y;
    const double ss = sorted[start].x + sorted[start].y;
    if (si < ss || (si == ss && sorted[i].y < sorted[start].y)) start = i;
  }
  std::rotate(sorted.begin(), sorted.begin() + static_cast<long>(start), sorted.end());
  return sorted;
}

// ---------------------------------------------------------------------------
// LabelStore

void LabelStore::put(const LabelKey& key, std::vector<InstanceMask> instances, std::string generation) {
  std::set<std::string> ids;
  for (const auto& m : instances) {
    if (!ids.insert(m.vertebra_id).second) {
      throw Error(ErrorCode::kDuplicateEntry, "vertebra '" + m.vertebra_id + "' twice in " + key.volume_id +
                                                  "/s" + std::to_string(key.slice_index) + "/it" +
                                                  std::to_string(key.iteration));
    }
    validate(m);
  }
  entries_[key] = LabelEntry{std::move(instances), std::move(generation)};
}

const LabelEntry& LabelStore::at(const LabelKey& key) const {
  auto it = entries_.find(key);
  if (it == entries_.end()) {
    throw Error(ErrorCode::kMissingFile, "no labels for " + key.volume_id + "/s" + std::to_string(key.slice_index) +
                                             "/it" + std::to_string(key.iteration));
  }
  return it->second;
}

std::vector<std::string> LabelStore::volume_ids() const {
  std::vector<std::string> out;
  for (const auto& [k, _] : entries_) {
    if (out.empty() || out.back() != k.volume_id) out.push_back(k.volume_id);
  }
  return out;
}

std::vector<int> LabelStore::slice_indices(const std::string& volume_id) const {
  std::set<int> s;
  for (const auto& [k, _] : entries_) {
    if (k.volume_id == volume_id) s.insert(k.slice_index);
  }
  return {s.begin(), s.end()};
}

std::vector<int> LabelStore::iterations(const std::string& volume_id, int slice_index) const {
  std::vector<int> out;
  for (const auto& [k, _] : entries_) {
    if (k.volume_id == volume_id && k.slice_index == slice_index) out.push_back(k.iteration);
  }
  return out;
}

std::optional<int> LabelStore::latest_iteration(const std::string& volume_id, int slice_index) const {
  auto its = iterations(volume_id, slice_index);
  if (its.empty()) return std::nullopt;
  return its.back();
}

const LabelEntry* LabelStore::latest(const std::string& volume_id, int slice_index) const {
  auto it = latest_iteration(volume_id, slice_index);
  if (!it) return nullptr;
  return &entries_.at(LabelKey{volume_id, slice_index, *it});
}

// ---------------------------------------------------------------------------
// RLE

std::vector<std::uint32_t> rle_encode(const Mask2& mask) {
  std::vector<std::uint32_t> counts;
  std::uint8_t current = 0;
  std::uint32_t run = 0;
  for (auto v : mask.data) {
    const std::uint8_t bit = v ? 1 : 0;
    if (bit != current) {
      counts.push_back(run);
      run = 0;
      current = bit;
    }
    ++run;
  }
  counts.push_back(run);
  return counts;
}

Mask2 rle_decode(const std::vector<std::uint32_t>& counts, int height, int width) {
  Mask2 mask(height, width, 0);
  size_t pos = 0;
  std::uint8_t value = 0;
  for (auto run : counts) {
    if (pos + run > mask.size()) throw Error(ErrorCode::kSizeMismatch, "RLE runs exceed mask size");
    std::fill_n(mask.data.begin() + static_cast<long>(pos), run, value);
    pos += run;
    value ^= 1;
  }
  if (pos != mask.size()) throw Error(ErrorCode::kSizeMismatch, "RLE runs do not cover the mask");
  return mask;
}

// ---------------------------------------------------------------------------
// Files

fs::path raw_path_for(const fs::path& header) {
  fs::path raw = header;
  raw.replace_extension(".raw");
  return raw;
}

void write_text_file(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) {
    std::error_code ec;
    fs::create_directories(path.parent_path(), ec);
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorCode::kIo, "cannot write " + path.string());
  out << text;
  if (!out) throw Error(ErrorCode::kIo, "failed writing " + path.string());
}

std::string read_text_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::kMissingFile, path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

namespace {

json parse_json(const fs::path& path) {
  const std::string text = read_text_file(path);
  try {
    return json::parse(text);
  } catch (const json::exception& e) {
    throw Error(ErrorCode::kMalformed, path.string() + ": " + e.what());
  }
}

template <typename T>
T required(const json& j, const char* key, const fs::path& where) {
  if (!j.is_object() || !j.contains(key)) {
    throw Error(ErrorCode::kMalformed, where.string() + ": missing key '" + key + "'");
  }
  try {
    return j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw Error(ErrorCode::kMalformed, where.string() + ": key '" + key + "': " + e.what());
  }
}

std::string volume_id_from(const fs::path& header) {
  std::string stem = header.filename().string();
  if (stem.size() > 5 && stem.ends_with(".json")) stem.resize(stem.size() - 5);
  return stem;
}

}  // namespace

Volume read_volume(const fs::path& path) {
  if (!fs::exists(path)) throw Error(ErrorCode::kMissingFile, path.string());
  const json header = parse_json(path);
  const auto dims = required<std::array<int, 3>>(header, "dims", path);
  const auto spacing = required<std::array<double, 3>>(header, "spacing_mm", path);
  const auto dtype = required<std::string>(header, "dtype", path);
  if (dtype != "int16le") throw Error(ErrorCode::kMalformed, "unsupported dtype '" + dtype + "'");
  for (double s : spacing) {
    if (!std::isfinite(s) || s <= 0.0) throw Error(ErrorCode::kInvalidSpacing, path.string());
  }
  for (int d : dims) {
    if (d < 1) throw Error(ErrorCode::kMalformed, path.string() + ": dims must be >= 1");
  }

  const fs::path raw = raw_path_for(path);
  if (!fs::exists(raw)) throw Error(ErrorCode::kMissingFile, raw.string());
  const size_t count = static_cast<size_t>(dims[0]) * dims[1] * dims[2];
  const auto bytes = static_cast<size_t>(fs::file_size(raw));
  if (bytes != count * 2) {
    throw Error(ErrorCode::kSizeMismatch, raw.string() + ": expected " + std::to_string(count * 2) +
                                              " bytes, found " + std::to_string(bytes));
  }
  std::ifstream in(raw, std::ios::binary);
  std::vector<unsigned char> buf(bytes);
  in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(bytes));
  if (!in) throw Error(ErrorCode::kIo, "failed reading " + raw.string());
  std::vector<std::int16_t> voxels(count);
  for (size_t i = 0; i < count; ++i) {
    const auto u = static_cast<std::uint16_t>(buf[2 * i] | (buf[2 * i + 1] << 8));
    voxels[i] = static_cast<std::int16_t>(u);
  }
  return Volume(volume_id_from(path), dims, spacing, std::move(voxels));
}

void write_volume(const Volume& v, const fs::path& path) {
  json header;
  header["dims"] = v.dims();
  header["spacing_mm"] = v.spacing();
  header["dtype"] = "int16le";
  write_text_file(path, header.dump(2) + "\n");

  std::string payload(v.voxels().size() * 2, '\0');
  for (size_t i = 0; i < v.voxels().size(); ++i) {
    const auto u = static_cast<std::uint16_t>(v.voxels()[i]);
    payload[2 * i] = static_cast<char>(u & 0xFF);
    payload[2 * i + 1] = static_cast<char>(u >> 8);
  }
  write_text_file(raw_path_for(path), payload);
}

LandmarkAnnotation read_annotation(const fs::path& path, const std::optional<SliceBounds>& bounds) {
  const json j = parse_json(path);
  LandmarkAnnotation a;
  a.volume_id = required<std::string>(j, "volume_id", path);
  a.slice_index = required<int>(j, "slice_index", path);
  const auto verts = required<json>(j, "vertebrae", path);
  if (!verts.is_array()) throw Error(ErrorCode::kMalformed, path.string() + ": vertebrae must be an array");
  for (const auto& v : verts) {
    VertebraLandmarks vl;
    vl.vertebra_id = required<std::string>(v, "id", path);
    const auto corners = required<std::vector<std::array<double, 2>>>(v, "corners", path);
    if (corners.size() != 4) {
      throw Error(ErrorCode::kMalformed, path.string() + ": '" + vl.vertebra_id + "' needs exactly 4 corners");
    }
    for (size_t i = 0; i < 4; ++i) vl.corners[i] = {corners[i][0], corners[i][1]};
    a.vertebrae.push_back(std::move(vl));
  }
  validate(a, bounds);
  for (auto& v : a.vertebrae) v.corners = canonicalize_corners(v.corners);
  return a;
}

void write_annotation(const LandmarkAnnotation& a, const fs::path& path) {
  json j;
  j["volume_id"] = a.volume_id;
  j["slice_index"] = a.slice_index;
  j["vertebrae"] = json::array();
  for (const auto& v : a.vertebrae) {
    json corners = json::array();
    for (const auto& c : v.corners) corners.push_back({c.x, c.y});
    j["vertebrae"].push_back({{"id", v.vertebra_id}, {"corners", corners}});
  }
  write_text_file(path, j.dump(2) + "\n");
}

void write_label_store(const LabelStore& store, const fs::path& dir) {
  fs::create_directories(dir);
  for (const auto& [key, entry] : store.entries()) {
    json j;
    j["volume_id"] = key.volume_id;
    j["slice_index"] = key.slice_index;
    j["iteration"] = key.iteration;
    j["generation"] = entry.generation;
    j["instances"] = json::array();
    for (const auto& m : entry.instances) {
      j["instances"].push_back({{"vertebra_id", m.vertebra_id},
                                {"provenance", std::string(to_string(m.provenance))},
                                {"iteration", m.iteration},
                                {"fallback", m.fallback},
                                {"height", m.mask.height},
                                {"width", m.mask.width},
                                {"rle", rle_encode(m.mask)}});
    }
    const fs::path file = dir / key.volume_id /
                          ("s" + std::to_string(key.slice_index) + "_it" + std::to_string(key.iteration) + ".json");
    write_text_file(file, j.dump() + "\n");
  }
}

LabelStore read_label_store(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw Error(ErrorCode::kMissingFile, dir.string());
  std::vector<fs::path> files;
  for (const auto& vol_dir : fs::directory_iterator(dir)) {
    if (!vol_dir.is_directory()) continue;
    for (const auto& f : fs::directory_iterator(vol_dir.path())) {
      if (f.path().extension() == ".json") files.push_back(f.path());
    }
  }
  std::sort(files.begin(), files.end());
  LabelStore store;
  for (const auto& f : files) {
    const json j = parse_json(f);
    LabelKey key{required<std::string>(j, "volume_id", f), required<int>(j, "slice_index", f),
                 required<int>(j, "iteration", f)};
    std::vector<InstanceMask> instances;
    for (const auto& m : required<json>(j, "instances", f)) {
      InstanceMask im;
      im.vertebra_id = required<std::string>(m, "vertebra_id", f);
      im.provenance = provenance_from_string(required<std::string>(m, "provenance", f));
      im.iteration = required<int>(m, "iteration", f);
      im.fallback = required<bool>(m, "fallback", f);
      im.mask = rle_decode(required<std::vector<std::uint32_t>>(m, "rle", f), required<int>(m, "height", f),
                           required<int>(m, "width", f));
      instances.push_back(std::move(im));
    }
    store.put(key, std::move(instances), required<std::string>(j, "generation", f));
  }
  return store;
}

}  // namespace wiss
