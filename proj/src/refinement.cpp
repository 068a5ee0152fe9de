#include "wiss/refinement.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "wiss/config_json.hpp"

namespace wiss {

void validate(const SelectionConfig& cfg) {
  std::vector<std::string> errors;
  if (!(cfg.t1_objectness > 0.0 && cfg.t1_objectness <= 1.0)) errors.push_back("t1_objectness must be in (0,1]");
  if (!(cfg.t2_pixel > 0.0 && cfg.t2_pixel <= 1.0)) errors.push_back("t2_pixel must be in (0,1]");
  if (!(cfg.rejection_factor > 0.0)) errors.push_back("rejection_factor must be > 0");
  if (cfg.curve_degree < 0) errors.push_back("curve_degree must be >= 0");
  if (cfg.min_rois_for_curve < 1) errors.push_back("min_rois_for_curve must be >= 1");
  throw_if_errors(errors, "selection config");
}

void validate(const CrfConfig& cfg) {
  std::vector<std::string> errors;
  if (cfg.n_iterations < 0) errors.push_back("n_iterations must be >= 0");
  if (!(cfg.appearance_weight >= 0.0) || !(cfg.spatial_weight >= 0.0)) errors.push_back("weights must be >= 0");
  if (!(cfg.appearance_sigma_xy > 0.0) || !(cfg.appearance_sigma_intensity > 0.0) || !(cfg.spatial_sigma_xy > 0.0)) {
    errors.push_back("sigmas must be > 0");
  }
  throw_if_errors(errors, "crf config");
}

nlohmann::json to_json(const SelectionConfig& cfg) {
  return {{"t1_objectness", cfg.t1_objectness},
          {"t2_pixel", cfg.t2_pixel},
          {"curve_degree", cfg.curve_degree},
          {"rejection_factor", cfg.rejection_factor},
          {"min_rois_for_curve", cfg.min_rois_for_curve}};
}

nlohmann::json to_json(const CrfConfig& cfg) {
  return {{"n_iterations", cfg.n_iterations},
          {"appearance_weight", cfg.appearance_weight},
          {"spatial_weight", cfg.spatial_weight},
          {"appearance_sigma_xy", cfg.appearance_sigma_xy},
          {"appearance_sigma_intensity", cfg.appearance_sigma_intensity},
          {"spatial_sigma_xy", cfg.spatial_sigma_xy}};
}

SelectionConfig selection_config_from_json(const nlohmann::json& j, const std::string& path,
                                           std::vector<std::string>& errors) {
  const SelectionConfig d;
  JsonReader r(j, path, errors);
  SelectionConfig c;
  c.t1_objectness = r.get("t1_objectness", d.t1_objectness);
  c.t2_pixel = r.get("t2_pixel", d.t2_pixel);
  c.curve_degree = r.get("curve_degree", d.curve_degree);
  c.rejection_factor = r.get("rejection_factor", d.rejection_factor);
  c.min_rois_for_curve = r.get("min_rois_for_curve", d.min_rois_for_curve);
  r.finish();
  try {
    validate(c);
  } catch (const Error& e) {
    errors.push_back(path + ": " + e.what());
  }
  return c;
}

CrfConfig crf_config_from_json(const nlohmann::json& j, const std::string& path, std::vector<std::string>& errors) {
  const CrfConfig d;
  JsonReader r(j, path, errors);
  CrfConfig c;
  c.n_iterations = r.get("n_iterations", d.n_iterations);
  c.appearance_weight = r.get("appearance_weight", d.appearance_weight);
  c.spatial_weight = r.get("spatial_weight", d.spatial_weight);
  c.appearance_sigma_xy = r.get("appearance_sigma_xy", d.appearance_sigma_xy);
  c.appearance_sigma_intensity = r.get("appearance_sigma_intensity", d.appearance_sigma_intensity);
  c.spatial_sigma_xy = r.get("spatial_sigma_xy", d.spatial_sigma_xy);
  r.finish();
  try {
    validate(c);
  } catch (const Error& e) {
    errors.push_back(path + ": " + e.what());
  }
  return c;
}

namespace {

struct Candidate {
  size_t source;
  Mask2 mask;
  Point2 centroid;
  int height;
};

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

// Fits with the largest usable degree not above `degree`.
std::optional<SpineCurve> fit_with_fallback(const std::vector<Point2>& pts, int degree) {
  for (int d = std::min(degree, static_cast<int>(pts.size()) - 1); d >= 0; --d) {
    try {
      return fit_spine_curve(pts, d);
    } catch (const Error& e) {
      if (e.code() != ErrorCode::kRankDeficient && e.code() != ErrorCode::kInsufficientPoints) throw;
    }
  }
  return std::nullopt;
}

}  // namespace

Selection select_confident(const std::vector<InstancePrediction>& preds, int height, int width,
                           const SelectionConfig& cfg) {
  validate(cfg);
  Selection sel;
  std::vector<Candidate> cands;
  for (size_t i = 0; i < preds.size(); ++i) {
    const auto& p = preds[i];
    if (p.objectness < cfg.t1_objectness) {
      sel.rejected.push_back(p);
      continue;
    }
    validate(p, height, width);
    Mask2 mask(height, width, 0);
    for (int y = 0; y < p.bbox.height(); ++y) {
      for (int x = 0; x < p.bbox.width(); ++x) {
        if (p.prob_map.at(y, x) >= cfg.t2_pixel) mask.at(p.bbox.y0 + y, p.bbox.x0 + x) = 1;
      }
    }
    const auto c = mask_centroid(mask);
    if (!c) {
      sel.rejected.push_back(p);
      continue;
    }
    const int h = mask_bbox(mask)->height();
    cands.push_back({i, std::move(mask), *c, h});
  }

  // Deterministic order independent of the input order.
  std::sort(cands.begin(), cands.end(), [&](const Candidate& a, const Candidate& b) {
    if (a.centroid.y != b.centroid.y) return a.centroid.y < b.centroid.y;
    if (a.centroid.x != b.centroid.x) return a.centroid.x < b.centroid.x;
    if (preds[a.source].objectness != preds[b.source].objectness) {
      return preds[a.source].objectness > preds[b.source].objectness;
    }
    return a.mask.data < b.mask.data;
  });

  if (static_cast<int>(cands.size()) >= cfg.min_rois_for_curve) {
    std::vector<double> heights;
    for (const auto& c : cands) heights.push_back(c.height);
    const double cutoff = cfg.rejection_factor * median(heights);
    // Backward elimination: while some ROI is off the curve through all of
    // them, drop the one whose removal leaves the most consistent remainder
    // (smallest residual RMS), ties going to the one farthest from the rest.
    auto residual_rms = [](const SpineCurve& c, const std::vector<Point2>& pts) {
      double ss = 0.0;
      for (const auto& p : pts) ss += curve_distance(c, p) * curve_distance(c, p);
      return std::sqrt(ss / static_cast<double>(pts.size()));
    };
    while (static_cast<int>(cands.size()) >= std::max(cfg.min_rois_for_curve, 3)) {
      std::vector<Point2> all;
      for (const auto& c : cands) all.push_back(c.centroid);
      const auto full = fit_with_fallback(all, cfg.curve_degree);
      if (!full) break;
      double far = 0.0;
      for (const auto& p : all) far = std::max(far, curve_distance(*full, p));
      if (far <= cutoff) break;
      std::vector<std::pair<double, double>> score(cands.size(), {std::numeric_limits<double>::infinity(), 0.0});
      double best_rms = std::numeric_limits<double>::infinity();
      for (size_t i = 0; i < cands.size(); ++i) {
        std::vector<Point2> others;
        for (size_t j = 0; j < cands.size(); ++j) {
          if (j != i) others.push_back(cands[j].centroid);
        }
        const auto curve = fit_with_fallback(others, cfg.curve_degree);
        if (!curve) continue;
        score[i] = {residual_rms(*curve, others), curve_distance(*curve, cands[i].centroid)};
        best_rms = std::min(best_rms, score[i].first);
      }
      if (!std::isfinite(best_rms)) break;
      const double tol = 1e-6 * (1.0 + cutoff);
      size_t drop = cands.size();
      for (size_t i = 0; i < cands.size(); ++i) {
        if (score[i].first > best_rms + tol) continue;
        if (drop == cands.size() || score[i].second > score[drop].second) drop = i;
      }
      sel.rejected.push_back(preds[cands[drop].source]);
      cands.erase(cands.begin() + static_cast<long>(drop));
    }
    std::vector<Point2> centers;
    for (const auto& c : cands) centers.push_back(c.centroid);
    if (!centers.empty()) sel.curve = fit_with_fallback(centers, cfg.curve_degree);
  }

  for (size_t k = 0; k < cands.size(); ++k) {
    InstanceMask m;
    m.vertebra_id = (k + 1 < 10 ? "roi0" : "roi") + std::to_string(k + 1);
    m.mask = std::move(cands[k].mask);
    m.provenance = Provenance::kSelected;
    sel.kept.push_back(std::move(m));
    sel.kept_source.push_back(cands[k].source);
  }
  return sel;
}

Mask2 crf_refine(const Image2& image, const Image2& mask_prob, const CrfConfig& cfg) {
  return crf_refine(image, mask_prob, Mask2(image.height, image.width, 1), cfg);
}

Mask2 crf_refine(const Image2& image, const Image2& mask_prob, const Mask2& active, const CrfConfig& cfg) {
  validate(cfg);
  if (!image.same_shape(mask_prob) || !image.same_shape(active)) {
    throw Error(ErrorCode::kShapeMismatch, "CRF image, probability map and active mask differ");
  }
  const int w = image.width;
  const size_t n = image.size();

  std::vector<double> unary_fg(n);
  std::vector<double> unary_bg(n);
  std::vector<double> q_fg(n);
  for (size_t i = 0; i < n; ++i) {
    const double p = std::clamp(mask_prob.data[i], kUnaryClamp, 1.0 - kUnaryClamp);
    unary_fg[i] = -std::log(p);
    unary_bg[i] = -std::log(1.0 - p);
    q_fg[i] = p;
  }

  Mask2 out(image.height, image.width, 0);
  const bool coupled = cfg.n_iterations > 0 && (cfg.appearance_weight > 0.0 || cfg.spatial_weight > 0.0);
  if (!coupled || n < 2) {
    for (size_t i = 0; i < n; ++i) out.data[i] = active.data[i] && unary_fg[i] <= unary_bg[i] ? 1 : 0;
    return out;
  }

  // Kernel matrices are symmetric; each exponential is computed once and
  // rows are normalized to unit mass over active pixels (self excluded).
  const double a_xy = 1.0 / (2.0 * cfg.appearance_sigma_xy * cfg.appearance_sigma_xy);
  const double a_i = 1.0 / (2.0 * cfg.appearance_sigma_intensity * cfg.appearance_sigma_intensity);
  const double s_xy = 1.0 / (2.0 * cfg.spatial_sigma_xy * cfg.spatial_sigma_xy);
  const int h = image.height;
  // The spatial kernel depends only on the offset.
  std::vector<double> sp_table(static_cast<size_t>(h) * w);
  for (int dy = 0; dy < h; ++dy) {
    for (int dx = 0; dx < w; ++dx) {
      const double d2 = static_cast<double>(dx) * dx + static_cast<double>(dy) * dy;
      sp_table[static_cast<size_t>(dy) * w + dx] = std::exp(-d2 * s_xy);
    }
  }
  // Row dy of the table, indexed by |dx|; j runs in row-major order so sums
  // accumulate in the same order as a flat loop.
  auto sp_row = [&](int yi, int yj) { return &sp_table[static_cast<size_t>(std::abs(yj - yi)) * w]; };
  std::vector<double> app(n * n, 0.0);
  for (size_t i = 0; i < n; ++i) {
    const double xi = static_cast<double>(i % w);
    const double yi = static_cast<double>(i / w);
    for (size_t j = i + 1; j < n; ++j) {
      const double dx = static_cast<double>(j % w) - xi;
      const double dy = static_cast<double>(j / w) - yi;
      const double d2 = dx * dx + dy * dy;
      const double di = image.data[j] - image.data[i];
      app[i * n + j] = app[j * n + i] = std::exp(-d2 * a_xy - di * di * a_i);
    }
  }
  std::vector<double> app_norm(n, 0.0);
  std::vector<double> sp_norm(n, 0.0);
  for (size_t i = 0; i < n; ++i) {
    if (!active.data[i]) continue;
    const int yi = static_cast<int>(i / w);
    const int xi = static_cast<int>(i % w);
    const double* arow = &app[i * n];
    double sa = 0.0;
    double ss = 0.0;
    for (int yj = 0; yj < h; ++yj) {
      const double* srow = sp_row(yi, yj);
      for (int xj = 0; xj < w; ++xj) {
        const size_t j = static_cast<size_t>(yj) * w + xj;
        if (j == i || !active.data[j]) continue;
        sa += arow[j];
        ss += srow[std::abs(xj - xi)];
      }
    }
    app_norm[i] = sa > 0.0 ? 1.0 / sa : 0.0;
    sp_norm[i] = ss > 0.0 ? 1.0 / ss : 0.0;
  }

  std::vector<double> next(q_fg);
  for (int it = 0; it < cfg.n_iterations; ++it) {
    for (size_t i = 0; i < n; ++i) {
      if (!active.data[i]) continue;
      const int yi = static_cast<int>(i / w);
      const int xi = static_cast<int>(i % w);
      const double* arow = &app[i * n];
      double ma = 0.0;
      double ms = 0.0;
      for (int yj = 0; yj < h; ++yj) {
        const double* srow = sp_row(yi, yj);
        for (int xj = 0; xj < w; ++xj) {
          const size_t j = static_cast<size_t>(yj) * w + xj;
          if (j == i || !active.data[j]) continue;
          ma += arow[j] * q_fg[j];
          ms += srow[std::abs(xj - xi)] * q_fg[j];
        }
      }
      // Expected mass of foreground / background neighbors.
      const double fg_msg = cfg.appearance_weight * ma * app_norm[i] + cfg.spatial_weight * ms * sp_norm[i];
      const double total_w = cfg.appearance_weight * (app_norm[i] > 0.0 ? 1.0 : 0.0) +
                             cfg.spatial_weight * (sp_norm[i] > 0.0 ? 1.0 : 0.0);
      const double bg_msg = total_w - fg_msg;
      // Potts: labelling i as fg is penalized by background neighbors and vice versa.
      const double e_fg = unary_fg[i] + bg_msg;
      const double e_bg = unary_bg[i] + fg_msg;
      next[i] = 1.0 / (1.0 + std::exp(e_fg - e_bg));
    }
    q_fg.swap(next);
  }
  for (size_t i = 0; i < n; ++i) out.data[i] = active.data[i] && q_fg[i] >= 0.5 ? 1 : 0;
  return out;
}

CrfWindow crf_window(const Image2& image, const Selection& sel, const std::vector<InstancePrediction>& preds,
                     size_t kept_index) {
  const auto& pred = preds[sel.kept_source[kept_index]];
  CrfWindow w;
  w.window = dilate(pred.bbox, kCrfWindowMargin, image.height, image.width);
  w.image = Image2(w.window.height(), w.window.width());
  w.prob = Image2(w.window.height(), w.window.width(), 0.0);
  w.active = Mask2(w.window.height(), w.window.width(), 1);
  for (int y = w.window.y0; y < w.window.y1; ++y) {
    for (int x = w.window.x0; x < w.window.x1; ++x) {
      const int wy = y - w.window.y0;
      const int wx = x - w.window.x0;
      w.image.at(wy, wx) = image.at(y, x);
      bool claimed = false;
      for (size_t k = 0; k < sel.kept.size(); ++k) {
        if (k != kept_index && sel.kept[k].mask.at(y, x)) claimed = true;
      }
      if (claimed) {
        w.active.at(wy, wx) = 0;
        continue;
      }
      if (x >= pred.bbox.x0 && x < pred.bbox.x1 && y >= pred.bbox.y0 && y < pred.bbox.y1) {
        w.prob.at(wy, wx) = pred.prob_map.at(y - pred.bbox.y0, x - pred.bbox.x0);
      }
    }
  }
  return w;
}

std::vector<InstanceMask> refine_labels(const Image2& image, const std::vector<InstancePrediction>& preds,
                                        const SelectionConfig& sel_cfg, const CrfConfig& crf_cfg, int iteration) {
  const Selection sel = select_confident(preds, image.height, image.width, sel_cfg);
  std::vector<InstanceMask> out;
  for (size_t k = 0; k < sel.kept.size(); ++k) {
    const auto win = crf_window(image, sel, preds, k);
    const Mask2 local = crf_refine(win.image, win.prob, win.active, crf_cfg);
    InstanceMask m;
    m.vertebra_id = sel.kept[k].vertebra_id;
    m.mask = Mask2(image.height, image.width, 0);
    for (int y = 0; y < local.height; ++y) {
      for (int x = 0; x < local.width; ++x) m.mask.at(win.window.y0 + y, win.window.x0 + x) = local.at(y, x);
    }
    if (m.foreground() == 0) continue;
    m.provenance = Provenance::kCrfRefined;
    m.iteration = iteration;
    out.push_back(std::move(m));
  }
  std::sort(out.begin(), out.end(), [](const auto& a, const auto& b) { return a.vertebra_id < b.vertebra_id; });
  return out;
}

std::vector<InstanceMask> select_labels(const Image2& image, const std::vector<InstancePrediction>& preds,
                                        const SelectionConfig& sel_cfg, int iteration) {
  auto sel = select_confident(preds, image.height, image.width, sel_cfg);
  for (auto& m : sel.kept) m.iteration = iteration;
  return std::move(sel.kept);
}

}  // namespace wiss
