#include "wiss/metrics.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <map>
#include <set>

#include "wiss/error.hpp"

namespace wiss {

ConfusionCounts confusion_counts(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> gt) {
  if (pred.size() != gt.size()) throw Error(ErrorCode::kShapeMismatch, "confusion_counts: size differs");
  ConfusionCounts c;
  for (size_t i = 0; i < pred.size(); ++i) {
    const bool p = pred[i] != 0, g = gt[i] != 0;
    if (p && g) ++c.tp;
    else if (p) ++c.fp;
    else if (g) ++c.fn;
    else ++c.tn;
  }
  return c;
}

ConfusionCounts confusion_counts(const Mask2& pred, const Mask2& gt) {
  if (!pred.same_shape(gt)) throw Error(ErrorCode::kShapeMismatch, "confusion_counts: shape differs");
  return confusion_counts(std::span<const std::uint8_t>(pred.data), std::span<const std::uint8_t>(gt.data));
}

double dic(const ConfusionCounts& c) {
  const long d = 2 * c.tp + c.fp + c.fn;
  return d == 0 ? 100.0 : 100.0 * 2.0 * c.tp / d;
}

double acc(const ConfusionCounts& c) {
  const long n = c.tp + c.fp + c.fn + c.tn;
  return n == 0 ? 100.0 : 100.0 * (c.tp + c.tn) / n;
}

std::optional<double> sen(const ConfusionCounts& c) {
  if (c.tp + c.fn == 0) return std::nullopt;
  return 100.0 * c.tp / (c.tp + c.fn);
}

std::optional<double> spe(const ConfusionCounts& c) {
  if (c.tn + c.fp == 0) return std::nullopt;
  return 100.0 * c.tn / (c.tn + c.fp);
}

std::vector<std::array<int, 3>> surface_voxels(const Mask3& m) {
  std::vector<std::array<int, 3>> out;
  const auto [S, H, W] = m.dims;
  auto bg = [&](int s, int y, int x) {
    if (s < 0 || y < 0 || x < 0 || s >= S || y >= H || x >= W) return true;
    return m.at(s, y, x) == 0;
  };
  for (int s = 0; s < S; ++s)
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x) {
        if (!m.at(s, y, x)) continue;
        if (bg(s - 1, y, x) || bg(s + 1, y, x) || bg(s, y - 1, x) || bg(s, y + 1, x) || bg(s, y, x - 1) ||
            bg(s, y, x + 1))
          out.push_back({s, y, x});
      }
  return out;
}

namespace {

std::vector<double> nearest_distances(const std::vector<std::array<int, 3>>& from,
                                      const std::vector<std::array<int, 3>>& to, const std::array<double, 3>& sp) {
  std::vector<double> out;
  out.reserve(from.size());
  for (const auto& a : from) {
    double best = std::numeric_limits<double>::infinity();
    for (const auto& b : to) {
      const double ds = (a[0] - b[0]) * sp[0], dy = (a[1] - b[1]) * sp[1], dx = (a[2] - b[2]) * sp[2];
      best = std::min(best, ds * ds + dy * dy + dx * dx);
    }
    out.push_back(std::sqrt(best));
  }
  return out;
}

double percentile(std::vector<double> v, double p) {
  std::sort(v.begin(), v.end());
  if (p >= 100.0) return v.back();
  // nearest-rank
  const double rank = std::ceil(p / 100.0 * static_cast<double>(v.size()));
  const size_t idx = static_cast<size_t>(std::max(1.0, rank)) - 1;
  return v[std::min(idx, v.size() - 1)];
}

}  // namespace

SurfaceDistances surface_distances(const Mask3& pred, const Mask3& gt, std::array<double, 3> spacing_mm,
                                   double hausdorff_percentile) {
  if (pred.dims != gt.dims) throw Error(ErrorCode::kShapeMismatch, "surface_distances: shape differs");
  if (!(hausdorff_percentile > 0.0 && hausdorff_percentile <= 100.0))
    throw Error(ErrorCode::kInvalidConfig, "hausdorff percentile must be in (0, 100]");
  for (double s : spacing_mm)
    if (!(s > 0.0) || !std::isfinite(s)) throw Error(ErrorCode::kInvalidSpacing, "spacing must be positive");
  const auto sp = surface_voxels(pred), sg = surface_voxels(gt);
  if (sp.empty() || sg.empty()) throw Error(ErrorCode::kUndefinedDistance, "surface distance of an empty mask");
  auto d1 = nearest_distances(sp, sg, spacing_mm);
  auto d2 = nearest_distances(sg, sp, spacing_mm);
  SurfaceDistances r;
  double s1 = 0.0, s2 = 0.0;
  for (double d : d1) s1 += d;
  for (double d : d2) s2 += d;
  r.asd = 0.5 * (s1 / static_cast<double>(d1.size()) + s2 / static_cast<double>(d2.size()));
  r.hsd = std::max(percentile(d1, hausdorff_percentile), percentile(d2, hausdorff_percentile));
  return r;
}

std::optional<MetricSummary> MetricsReport::find(const std::string& metric) const {
  for (const auto& s : summary)
    if (s.metric == metric) return s;
  return std::nullopt;
}

void summarize(MetricsReport& report) {
  // metric -> volume -> values, in first-seen order for metrics
  std::vector<std::string> metric_order;
  std::map<std::string, std::map<std::string, std::vector<double>>> acc_;
  for (const auto& r : report.rows) {
    if (!acc_.count(r.metric)) metric_order.push_back(r.metric);
    auto& per_vol = acc_[r.metric][r.volume_id];
    if (r.value) per_vol.push_back(*r.value);
  }
  report.scan_means.clear();
  report.summary.clear();
  for (const auto& metric : metric_order) {
    std::vector<double> means;
    for (const auto& [vol, vals] : acc_[metric]) {
      if (vals.empty()) continue;
      double s = 0.0;
      for (double v : vals) s += v;
      const double m = s / static_cast<double>(vals.size());
      report.scan_means.emplace_back(vol, metric, m);
      means.push_back(m);
    }
    MetricSummary ms;
    ms.metric = metric;
    ms.count = static_cast<int>(means.size());
    if (!means.empty()) {
      double s = 0.0;
      for (double v : means) s += v;
      ms.mean = s / static_cast<double>(means.size());
      double ss = 0.0;
      for (double v : means) ss += (v - ms.mean) * (v - ms.mean);
      ms.stddev = means.size() > 1 ? std::sqrt(ss / static_cast<double>(means.size() - 1)) : 0.0;
    }
    report.summary.push_back(ms);
  }
}

void append(MetricsReport& into, const MetricsReport& from) {
  into.rows.insert(into.rows.end(), from.rows.begin(), from.rows.end());
  summarize(into);
}

MetricsReport per_vertebra_report(const Volume& pred, const Volume& gt, const ReportOptions& opts) {
  if (pred.dims() != gt.dims()) throw Error(ErrorCode::kShapeMismatch, "per_vertebra_report: shape differs");
  const auto& pv = pred.voxels();
  const auto& gv = gt.voxels();
  std::set<int> gt_ids;
  for (auto v : gv)
    if (v != 0) gt_ids.insert(v);

  MetricsReport rep;
  for (int id : gt_ids) {
    std::map<int, long> overlap;
    for (size_t i = 0; i < gv.size(); ++i)
      if (gv[i] == id && pv[i] != 0) ++overlap[pv[i]];
    int best = 0;
    long best_n = 0;
    for (const auto& [pid, n] : overlap)
      if (n > best_n) best = pid, best_n = n;

    Mask3 g(gt.dims()), p(gt.dims());
    for (size_t i = 0; i < gv.size(); ++i) {
      g.data[i] = gv[i] == id;
      p.data[i] = best != 0 && pv[i] == best;
    }
    const auto c = confusion_counts(std::span<const std::uint8_t>(p.data), std::span<const std::uint8_t>(g.data));
    const std::string vid = std::to_string(id);
    rep.rows.push_back({gt.id(), vid, "DIC", dic(c)});
    rep.rows.push_back({gt.id(), vid, "ACC", acc(c)});
    rep.rows.push_back({gt.id(), vid, "SEN", sen(c)});
    rep.rows.push_back({gt.id(), vid, "SPE", spe(c)});
    if (opts.surface_metrics) {
      std::optional<double> asd, hsd;
      if (best != 0) {
        const auto d = surface_distances(p, g, gt.spacing(), opts.hausdorff_percentile);
        asd = d.asd;
        hsd = d.hsd;
      }
      rep.rows.push_back({gt.id(), vid, "ASD", asd});
      rep.rows.push_back({gt.id(), vid, "HSD", hsd});
    }
  }
  summarize(rep);
  return rep;
}

void write_report_csv(const MetricsReport& r, const std::filesystem::path& path) {
  std::string out = "volume_id,vertebra_id,metric,value\n";
  char buf[64];
  for (const auto& row : r.rows) {
    out += row.volume_id + "," + row.vertebra_id + "," + row.metric + ",";
    if (row.value) {
      std::snprintf(buf, sizeof buf, "%.6f", *row.value);
      out += buf;
    }
    out += "\n";
  }
  write_text_file(path, out);
}

nlohmann::json report_summary_json(const MetricsReport& r) {
  nlohmann::json j = nlohmann::json::object();
  for (const auto& s : r.summary) j[s.metric] = {{"mean", s.mean}, {"std", s.stddev}, {"n_scans", s.count}};
  nlohmann::json scans = nlohmann::json::object();
  for (const auto& [vol, metric, m] : r.scan_means) scans[vol][metric] = m;
  return {{"summary", j}, {"per_scan", scans}};
}

RgbImage render_difference_map(const Mask2& pred, const Mask2& gt, const Image2& image) {
  if (!pred.same_shape(gt) || !pred.same_shape(image))
    throw Error(ErrorCode::kShapeMismatch, "render_difference_map: shape differs");
  RgbImage out{pred.height, pred.width, std::vector<std::uint8_t>(3 * pred.size())};
  double lo = 0.0, hi = 0.0;
  if (!image.data.empty()) {
    const auto [mn, mx] = std::minmax_element(image.data.begin(), image.data.end());
    lo = *mn;
    hi = *mx;
  }
  const double scale = hi > lo ? 255.0 / (hi - lo) : 0.0;
  for (size_t i = 0; i < pred.size(); ++i) {
    const bool p = pred.data[i] != 0, g = gt.data[i] != 0;
    std::array<std::uint8_t, 3> px;
    if (p && !g) px = kOversegColor;
    else if (g && !p) px = kUndersegColor;
    else {
      const auto v = static_cast<std::uint8_t>(std::lround(std::clamp((image.data[i] - lo) * scale, 0.0, 255.0)));
      px = {v, v, v};
    }
    std::copy(px.begin(), px.end(), out.data.begin() + 3 * i);
  }
  return out;
}

void write_png(const RgbImage& img, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  FILE* f = std::fopen(path.c_str(), "wb");
  if (!f) throw Error(ErrorCode::kIo, "cannot open " + path.string());
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info || setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    std::fclose(f);
    throw Error(ErrorCode::kIo, "png encoding failed for " + path.string());
  }
  png_init_io(png, f);
  png_set_IHDR(png, info, img.width, img.height, 8, PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (int y = 0; y < img.height; ++y)
    png_write_row(png, const_cast<png_bytep>(img.data.data() + 3 * static_cast<size_t>(y) * img.width));
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  std::fclose(f);
}

}  // namespace wiss
