#include "wiss/geometry.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <set>

namespace wiss {

namespace {

constexpr double kOnEdgeTolerance = 1e-9;

double cross(Point2 o, Point2 a, Point2 b) {
  return (a.x - o.x) * (b.y - o.y) - (a.y - o.y) * (b.x - o.x);
}

int orientation(Point2 o, Point2 a, Point2 b) {
  const double c = cross(o, a, b);
  if (std::abs(c) <= kOnEdgeTolerance) return 0;
  return c > 0 ? 1 : -1;
}

bool on_segment(Point2 a, Point2 b, Point2 p) {
  return std::min(a.x, b.x) - kOnEdgeTolerance <= p.x && p.x <= std::max(a.x, b.x) + kOnEdgeTolerance &&
         std::min(a.y, b.y) - kOnEdgeTolerance <= p.y && p.y <= std::max(a.y, b.y) + kOnEdgeTolerance;
}

bool segments_intersect(Point2 p1, Point2 p2, Point2 q1, Point2 q2) {
  const int o1 = orientation(p1, p2, q1);
  const int o2 = orientation(p1, p2, q2);
  const int o3 = orientation(q1, q2, p1);
  const int o4 = orientation(q1, q2, p2);
  if (o1 != o2 && o3 != o4 && o1 != 0 && o2 != 0 && o3 != 0 && o4 != 0) return true;
  if (o1 == 0 && on_segment(p1, p2, q1)) return true;
  if (o2 == 0 && on_segment(p1, p2, q2)) return true;
  if (o3 == 0 && on_segment(q1, q2, p1)) return true;
  if (o4 == 0 && on_segment(q1, q2, p2)) return true;
  return false;
}

bool point_on_segment(Point2 a, Point2 b, Point2 p) {
  const double len = std::hypot(b.x - a.x, b.y - a.y);
  if (std::abs(cross(a, b, p)) > kOnEdgeTolerance * std::max(1.0, len)) return false;
  return on_segment(a, b, p);
}

}  // namespace

double signed_area(std::span<const Point2> polygon) {
  double twice = 0.0;
  const size_t n = polygon.size();
  for (size_t i = 0; i < n; ++i) {
    const Point2 a = polygon[i];
    const Point2 b = polygon[(i + 1) % n];
    twice += a.x * b.y - b.x * a.y;
  }
  return 0.5 * twice;
}

bool is_simple_polygon(std::span<const Point2> polygon) {
  const size_t n = polygon.size();
  if (n < 3) return false;
  for (size_t i = 0; i < n; ++i) {
    for (size_t j = i + 1; j < n; ++j) {
      if (polygon[i] == polygon[j]) return false;
    }
  }
  for (size_t i = 0; i < n; ++i) {
    for (size_t j = i + 1; j < n; ++j) {
      const bool adjacent = (j == i + 1) || (i == 0 && j == n - 1);
      if (adjacent) continue;
      if (segments_intersect(polygon[i], polygon[(i + 1) % n], polygon[j], polygon[(j + 1) % n])) {
        return false;
      }
    }
  }
  return true;
}

bool point_in_polygon(std::span<const Point2> polygon, Point2 p) {
  const size_t n = polygon.size();
  bool inside = false;
  for (size_t i = 0, j = n - 1; i < n; j = i++) {
    const Point2 a = polygon[i];
    const Point2 b = polygon[j];
    if (point_on_segment(a, b, p)) return true;
    if ((a.y > p.y) != (b.y > p.y)) {
      const double x_cross = a.x + (p.y - a.y) * (b.x - a.x) / (b.y - a.y);
      if (p.x < x_cross) inside = !inside;
    }
  }
  return inside;
}

bool is_collinear(std::span<const Point2> polygon) {
  for (size_t i = 1; i < polygon.size(); ++i) {
    for (size_t j = i + 1; j < polygon.size(); ++j) {
      const double cross = (polygon[i].x - polygon[0].x) * (polygon[j].y - polygon[0].y) -
                           (polygon[i].y - polygon[0].y) * (polygon[j].x - polygon[0].x);
      if (std::abs(cross) > kOnEdgeTolerance) return false;
    }
  }
  return true;
}

Mask2 rasterize_quadrilateral(const Quad& corners, int height, int width) {
  if (is_collinear(corners)) {
    throw Error(ErrorCode::kDegenerateGeometry, "quadrilateral corners are collinear");
  }
  if (!is_simple_polygon(corners)) {
    throw Error(ErrorCode::kSelfIntersecting, "quadrilateral edges cross");
  }
  Mask2 mask(height, width, 0);
  double min_x = corners[0].x, max_x = corners[0].x, min_y = corners[0].y, max_y = corners[0].y;
  for (const auto& c : corners) {
    min_x = std::min(min_x, c.x);
    max_x = std::max(max_x, c.x);
    min_y = std::min(min_y, c.y);
    max_y = std::max(max_y, c.y);
  }
  const int x0 = std::max(0, static_cast<int>(std::ceil(min_x - kOnEdgeTolerance)));
  const int x1 = std::min(width - 1, static_cast<int>(std::floor(max_x + kOnEdgeTolerance)));
  const int y0 = std::max(0, static_cast<int>(std::ceil(min_y - kOnEdgeTolerance)));
  const int y1 = std::min(height - 1, static_cast<int>(std::floor(max_y + kOnEdgeTolerance)));
  for (int y = y0; y <= y1; ++y) {
    for (int x = x0; x <= x1; ++x) {
      if (point_in_polygon(corners, {static_cast<double>(x), static_cast<double>(y)})) {
        mask.at(y, x) = 1;
      }
    }
  }
  return mask;
}

double SpineCurve::evaluate(double y) const {
  double acc = 0.0;
  for (auto it = coeffs.rbegin(); it != coeffs.rend(); ++it) acc = acc * y + *it;
  return acc;
}

SpineCurve fit_spine_curve(std::span<const Point2> centers, int degree) {
  if (degree < 0) throw Error(ErrorCode::kInvalidConfig, "negative curve degree");
  const int n_coeffs = degree + 1;
  if (static_cast<int>(centers.size()) < n_coeffs) {
    throw Error(ErrorCode::kInsufficientPoints, "need at least " + std::to_string(n_coeffs) +
                                                    " points, got " + std::to_string(centers.size()));
  }
  std::set<double> distinct_y;
  for (const auto& c : centers) distinct_y.insert(c.y);
  if (static_cast<int>(distinct_y.size()) < n_coeffs) {
    throw Error(ErrorCode::kRankDeficient, "only " + std::to_string(distinct_y.size()) +
                                               " distinct y values for degree " + std::to_string(degree));
  }

  // Solve in a centered, scaled variable for conditioning, then expand back.
  double mean_y = 0.0;
  for (const auto& c : centers) mean_y += c.y;
  mean_y /= static_cast<double>(centers.size());
  double scale = 0.0;
  for (const auto& c : centers) scale = std::max(scale, std::abs(c.y - mean_y));
  if (scale == 0.0) scale = 1.0;

  const Eigen::Index n = static_cast<Eigen::Index>(centers.size());
  Eigen::MatrixXd design(n, n_coeffs);
  Eigen::VectorXd rhs(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const double t = (centers[i].y - mean_y) / scale;
    double power = 1.0;
    for (int k = 0; k < n_coeffs; ++k) {
      design(i, k) = power;
      power *= t;
    }
    rhs(i) = centers[i].x;
  }
  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(design);
  if (qr.rank() < n_coeffs) throw Error(ErrorCode::kRankDeficient, "design matrix is rank deficient");
  const Eigen::VectorXd scaled = qr.solve(rhs);

  // ((y - mean) / scale)^k = scale^-k * sum_j C(k, j) y^j (-mean)^(k - j)
  SpineCurve curve;
  curve.degree = degree;
  curve.coeffs.assign(n_coeffs, 0.0);
  for (int k = 0; k < n_coeffs; ++k) {
    const double a = scaled(k) / std::pow(scale, k);
    double binom = 1.0;
    for (int j = 0; j <= k; ++j) {
      curve.coeffs[j] += a * binom * std::pow(-mean_y, k - j);
      binom = binom * (k - j) / (j + 1);
    }
  }
  double sq = 0.0;
  for (const auto& c : centers) {
    const double r = c.x - curve.evaluate(c.y);
    sq += r * r;
  }
  curve.rms_residual = std::sqrt(sq / static_cast<double>(centers.size()));
  curve.support = static_cast<int>(centers.size());
  return curve;
}

double curve_distance(const SpineCurve& curve, Point2 p) { return std::abs(p.x - curve.evaluate(p.y)); }

std::pair<Image2, Image2> image_gradients(const Image2& m) {
  if (m.height < 2 || m.width < 2) {
    throw Error(ErrorCode::kShapeMismatch, "gradients need at least 2x2, got " + std::to_string(m.height) +
                                               "x" + std::to_string(m.width));
  }
  const int h = m.height;
  const int w = m.width;
  Image2 gx(h, w, 0.0);
  Image2 gy(h, w, 0.0);
  for (int y = 0; y < h; ++y) {
    gx.at(y, 0) = m.at(y, 1) - m.at(y, 0);
    for (int x = 1; x < w - 1; ++x) gx.at(y, x) = (m.at(y, x + 1) - m.at(y, x - 1)) / 2.0;
    gx.at(y, w - 1) = m.at(y, w - 1) - m.at(y, w - 2);
  }
  for (int x = 0; x < w; ++x) {
    gy.at(0, x) = m.at(1, x) - m.at(0, x);
    gy.at(h - 1, x) = m.at(h - 1, x) - m.at(h - 2, x);
  }
  for (int y = 1; y < h - 1; ++y) {
    for (int x = 0; x < w; ++x) gy.at(y, x) = (m.at(y + 1, x) - m.at(y - 1, x)) / 2.0;
  }
  return {std::move(gx), std::move(gy)};
}

Image2 image_gradients_adjoint(const Image2& ax, const Image2& ay) {
  const int h = ax.height;
  const int w = ax.width;
  if (!ax.same_shape(ay) || h < 2 || w < 2) {
    throw Error(ErrorCode::kShapeMismatch, "adjoint inputs must share a shape of at least 2x2");
  }
  Image2 out(h, w, 0.0);
  for (int y = 0; y < h; ++y) {
    out.at(y, 1) += ax.at(y, 0);
    out.at(y, 0) -= ax.at(y, 0);
    for (int x = 1; x < w - 1; ++x) {
      out.at(y, x + 1) += ax.at(y, x) / 2.0;
      out.at(y, x - 1) -= ax.at(y, x) / 2.0;
    }
    out.at(y, w - 1) += ax.at(y, w - 1);
    out.at(y, w - 2) -= ax.at(y, w - 1);
  }
  for (int x = 0; x < w; ++x) {
    out.at(1, x) += ay.at(0, x);
    out.at(0, x) -= ay.at(0, x);
    out.at(h - 1, x) += ay.at(h - 1, x);
    out.at(h - 2, x) -= ay.at(h - 1, x);
  }
  for (int y = 1; y < h - 1; ++y) {
    for (int x = 0; x < w; ++x) {
      out.at(y + 1, x) += ay.at(y, x) / 2.0;
      out.at(y - 1, x) -= ay.at(y, x) / 2.0;
    }
  }
  return out;
}

std::optional<BBox> mask_bbox(const Mask2& mask) {
  BBox box{mask.width, mask.height, -1, -1};
  bool any = false;
  for (int y = 0; y < mask.height; ++y) {
    for (int x = 0; x < mask.width; ++x) {
      if (!mask.at(y, x)) continue;
      any = true;
      box.x0 = std::min(box.x0, x);
      box.y0 = std::min(box.y0, y);
      box.x1 = std::max(box.x1, x + 1);
      box.y1 = std::max(box.y1, y + 1);
    }
  }
  if (!any) return std::nullopt;
  return box;
}

std::optional<Point2> mask_centroid(const Mask2& mask) {
  double sx = 0.0, sy = 0.0;
  long n = 0;
  for (int y = 0; y < mask.height; ++y) {
    for (int x = 0; x < mask.width; ++x) {
      if (!mask.at(y, x)) continue;
      sx += x;
      sy += y;
      ++n;
    }
  }
  if (n == 0) return std::nullopt;
  return Point2{sx / n, sy / n};
}

BBox dilate(const BBox& box, int margin, int height, int width) {
  return {std::max(0, box.x0 - margin), std::max(0, box.y0 - margin), std::min(width, box.x1 + margin),
          std::min(height, box.y1 + margin)};
}

long count_foreground(const Mask2& mask) {
  long n = 0;
  for (auto v : mask.data) n += v != 0;
  return n;
}

long overlap(const Mask2& a, const Mask2& b) {
  if (!a.same_shape(b)) throw Error(ErrorCode::kShapeMismatch, "overlap of differently shaped masks");
  long n = 0;
  for (size_t i = 0; i < a.data.size(); ++i) n += (a.data[i] != 0) && (b.data[i] != 0);
  return n;
}

}  // namespace wiss
