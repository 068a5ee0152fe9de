#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "wiss/data_model.hpp"

namespace wiss {

struct ConfusionCounts {
  long tp = 0;
  long fp = 0;
  long fn = 0;
  long tn = 0;
  bool operator==(const ConfusionCounts&) const = default;
};

// Any nonzero value counts as foreground.
ConfusionCounts confusion_counts(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> gt);
ConfusionCounts confusion_counts(const Mask2& pred, const Mask2& gt);

// Percentages. DIC of two empty masks is 100; SEN/SPE with an empty
// denominator are missing.
double dic(const ConfusionCounts& c);
double acc(const ConfusionCounts& c);
std::optional<double> sen(const ConfusionCounts& c);
std::optional<double> spe(const ConfusionCounts& c);

// Binary 3D mask on an (S, H, W) grid.
struct Mask3 {
  std::array<int, 3> dims{0, 0, 0};
  std::vector<std::uint8_t> data;

  Mask3() = default;
  explicit Mask3(std::array<int, 3> d) : dims(d), data(static_cast<size_t>(d[0]) * d[1] * d[2], 0) {}
  std::uint8_t& at(int s, int y, int x) { return data[(static_cast<size_t>(s) * dims[1] + y) * dims[2] + x]; }
  std::uint8_t at(int s, int y, int x) const { return data[(static_cast<size_t>(s) * dims[1] + y) * dims[2] + x]; }
};

struct SurfaceDistances {
  double asd = 0.0;
  double hsd = 0.0;
};

// Surface voxels are foreground voxels with a background 6-neighbor (the
// volume border counts as background). spacing_mm is (ds, dy, dx). ASD is the
// mean of the two directed mean distances.
// hausdorff_percentile = 100 gives the exact Hausdorff distance.
SurfaceDistances surface_distances(const Mask3& pred, const Mask3& gt, std::array<double, 3> spacing_mm,
                                   double hausdorff_percentile = 100.0);

std::vector<std::array<int, 3>> surface_voxels(const Mask3& m);

struct MetricRow {
  std::string volume_id;
  std::string vertebra_id;
  std::string metric;
  std::optional<double> value;  // missing when undefined
};

struct MetricSummary {
  std::string metric;
  double mean = 0.0;
  double stddev = 0.0;
  int count = 0;
};

struct MetricsReport {
  std::vector<MetricRow> rows;
  // (volume_id, metric) -> mean over that scan's vertebrae.
  std::vector<std::tuple<std::string, std::string, double>> scan_means;
  // Mean and standard deviation of the per-scan means.
  std::vector<MetricSummary> summary;

  std::optional<MetricSummary> find(const std::string& metric) const;
};

// Recomputes scan means and grand summary from rows.
void summarize(MetricsReport& report);
void append(MetricsReport& into, const MetricsReport& from);

struct ReportOptions {
  double hausdorff_percentile = 100.0;
  bool surface_metrics = true;
};

// Labelmaps hold instance ids (0 = background). Each ground-truth instance is
// matched to the predicted instance with maximal overlap; unmatched ones score
// DIC 0 with missing distances.
MetricsReport per_vertebra_report(const Volume& pred, const Volume& gt, const ReportOptions& opts = {});

void write_report_csv(const MetricsReport& r, const std::filesystem::path& path);
nlohmann::json report_summary_json(const MetricsReport& r);

struct RgbImage {
  int height = 0;
  int width = 0;
  std::vector<std::uint8_t> data;  // RGB interleaved
  std::array<std::uint8_t, 3> pixel(int y, int x) const {
    const size_t i = 3 * (static_cast<size_t>(y) * width + x);
    return {data[i], data[i + 1], data[i + 2]};
  }
};

inline constexpr std::array<std::uint8_t, 3> kOversegColor{255, 0, 0};
inline constexpr std::array<std::uint8_t, 3> kUndersegColor{255, 255, 0};

// Oversegmentation (pred and not gt) red, undersegmentation yellow, over the
// grayscale image windowed to its min/max.
RgbImage render_difference_map(const Mask2& pred, const Mask2& gt, const Image2& image);
void write_png(const RgbImage& img, const std::filesystem::path& path);

}  // namespace wiss
