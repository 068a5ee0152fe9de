#pragma once

#include <array>
#include <optional>
#include <span>
#include <utility>
#include <vector>

#include "wiss/data_model.hpp"

namespace wiss {

using Quad = std::array<Point2, 4>;

// Shoelace area; positive for clockwise-on-screen (y down) ordering.
double signed_area(std::span<const Point2> polygon);

// True iff the closed polygon through the points in stored order has no
// crossing non-adjacent edges and no coincident vertices.
bool is_simple_polygon(std::span<const Point2> polygon);

// True when all corners lie on one line (coincident corners included).
bool is_collinear(std::span<const Point2> polygon);

// Boundary-inclusive point-in-polygon.
bool point_in_polygon(std::span<const Point2> polygon, Point2 p);

// Pixel (x, y) is foreground iff its center (x, y) lies inside or on the
// polygon. Throws kDegenerateGeometry on collinear corners, kSelfIntersecting
// on any other non-simple input.
Mask2 rasterize_quadrilateral(const Quad& corners, int height, int width);

// x = coeffs[0] + coeffs[1] * y + coeffs[2] * y^2 + ...
struct SpineCurve {
  int degree = 0;
  std::vector<double> coeffs;
  double rms_residual = 0.0;
  int support = 0;

  double evaluate(double y) const;
};

SpineCurve fit_spine_curve(std::span<const Point2> centers, int degree);

// Horizontal distance |p.x - f(p.y)|.
double curve_distance(const SpineCurve& curve, Point2 p);

// Central differences inside, one-sided at the borders. gx is d/dx (along
// columns), gy is d/dy (along rows).
std::pair<Image2, Image2> image_gradients(const Image2& m);

// Adjoint of image_gradients: returns G^T applied to (ax, ay).
Image2 image_gradients_adjoint(const Image2& ax, const Image2& ay);

// Mask utilities.
std::optional<BBox> mask_bbox(const Mask2& mask);
std::optional<Point2> mask_centroid(const Mask2& mask);
BBox dilate(const BBox& box, int margin, int height, int width);
long count_foreground(const Mask2& mask);
long overlap(const Mask2& a, const Mask2& b);

}  // namespace wiss
