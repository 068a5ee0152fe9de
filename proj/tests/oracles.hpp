#pragma once

// Brute-force reference implementations. They restate each definition
// directly and share no code with the library beyond plain data types.

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <vector>

#include "wiss/data_model.hpp"
#include "wiss/metrics.hpp"
#include "wiss/refinement.hpp"

namespace oracle {

struct Counts {
  long tp = 0, fp = 0, fn = 0, tn = 0;
};

inline Counts confusion(const std::vector<std::uint8_t>& p, const std::vector<std::uint8_t>& g) {
  Counts c;
  for (size_t i = 0; i < p.size(); ++i) {
    c.tp += p[i] && g[i];
    c.fp += p[i] && !g[i];
    c.fn += !p[i] && g[i];
    c.tn += !p[i] && !g[i];
  }
  return c;
}

inline double dic(const Counts& c) {
  if (c.tp + c.fp + c.fn == 0) return 100.0;
  return 200.0 * c.tp / (2.0 * c.tp + c.fp + c.fn);
}
inline double acc(const Counts& c) { return 100.0 * (c.tp + c.tn) / (c.tp + c.fp + c.fn + c.tn); }
inline double sen(const Counts& c) { return 100.0 * c.tp / (c.tp + c.fn); }
inline double spe(const Counts& c) { return 100.0 * c.tn / (c.tn + c.fp); }

// Surface voxels of a (S, H, W) mask by explicit 6-neighbor test.
inline std::vector<std::array<int, 3>> surface(const wiss::Mask3& m) {
  std::vector<std::array<int, 3>> out;
  const int S = m.dims[0], H = m.dims[1], W = m.dims[2];
  const int offs[6][3] = {{-1, 0, 0}, {1, 0, 0}, {0, -1, 0}, {0, 1, 0}, {0, 0, -1}, {0, 0, 1}};
  for (int s = 0; s < S; ++s)
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x) {
        if (!m.at(s, y, x)) continue;
        bool edge = false;
        for (const auto& o : offs) {
          const int a = s + o[0], b = y + o[1], c = x + o[2];
          if (a < 0 || b < 0 || c < 0 || a >= S || b >= H || c >= W || !m.at(a, b, c)) edge = true;
        }
        if (edge) out.push_back({s, y, x});
      }
  return out;
}

struct Distances {
  double asd = 0.0;
  double hsd = 0.0;
};

inline Distances surface_distances(const wiss::Mask3& p, const wiss::Mask3& g, std::array<double, 3> sp) {
  const auto a = surface(p), b = surface(g);
  auto directed = [&](const auto& from, const auto& to, double& mean, double& max) {
    double sum = 0.0;
    max = 0.0;
    for (const auto& u : from) {
      double best = std::numeric_limits<double>::infinity();
      for (const auto& v : to) {
        double d = 0.0;
        for (int k = 0; k < 3; ++k) d += ((u[k] - v[k]) * sp[k]) * ((u[k] - v[k]) * sp[k]);
        best = std::min(best, std::sqrt(d));
      }
      sum += best;
      max = std::max(max, best);
    }
    mean = sum / from.size();
  };
  double m1, x1, m2, x2;
  directed(a, b, m1, x1);
  directed(b, a, m2, x2);
  return {(m1 + m2) / 2.0, std::max(x1, x2)};
}

// Edge loss straight from its definition, with its own finite differences.
inline double edge_loss(const wiss::Image2& m, const wiss::Image2& g, double eps = 1e-8) {
  const int H = m.height, W = m.width;
  auto dx = [&](const wiss::Image2& a, int y, int x) {
    if (x == 0) return a.at(y, 1) - a.at(y, 0);
    if (x == W - 1) return a.at(y, W - 1) - a.at(y, W - 2);
    return (a.at(y, x + 1) - a.at(y, x - 1)) / 2.0;
  };
  auto dy = [&](const wiss::Image2& a, int y, int x) {
    if (y == 0) return a.at(1, x) - a.at(0, x);
    if (y == H - 1) return a.at(H - 1, x) - a.at(H - 2, x);
    return (a.at(y + 1, x) - a.at(y - 1, x)) / 2.0;
  };
  double sum = 0.0;
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) {
      const double ex = dx(m, y, x) - dx(g, y, x), ey = dy(m, y, x) - dy(g, y, x);
      sum += std::sqrt(ex * ex + ey * ey + eps);
    }
  return sum / (H * W);
}

// Dense mean-field reference: every kernel value is recomputed from its
// definition on each use, with no caching or symmetry tricks.
// Inactive pixels are neither updated nor used as neighbors; they come out 0.
inline wiss::Mask2 crf(const wiss::Image2& img, const wiss::Image2& prob, const wiss::CrfConfig& c,
                       const wiss::Mask2* active = nullptr) {
  const int H = img.height, W = img.width;
  const size_t n = static_cast<size_t>(H) * W;
  auto on = [&](size_t i) { return active == nullptr || active->data[i] != 0; };
  std::vector<double> ufg(n), ubg(n), q(n);
  for (size_t i = 0; i < n; ++i) {
    const double p = std::clamp(prob.data[i], wiss::kUnaryClamp, 1.0 - wiss::kUnaryClamp);
    ufg[i] = -std::log(p);
    ubg[i] = -std::log(1.0 - p);
    q[i] = p;
  }
  wiss::Mask2 out(H, W, 0);
  const bool coupled = c.n_iterations > 0 && (c.appearance_weight > 0.0 || c.spatial_weight > 0.0);
  if (!coupled || n < 2) {
    for (size_t i = 0; i < n; ++i) out.data[i] = on(i) && ufg[i] <= ubg[i];
    return out;
  }
  const double a_xy = 1.0 / (2.0 * c.appearance_sigma_xy * c.appearance_sigma_xy);
  const double a_i = 1.0 / (2.0 * c.appearance_sigma_intensity * c.appearance_sigma_intensity);
  const double s_xy = 1.0 / (2.0 * c.spatial_sigma_xy * c.spatial_sigma_xy);
  auto k_app = [&](size_t i, size_t j) {
    const double dx = static_cast<double>(j % W) - static_cast<double>(i % W);
    const double dy = static_cast<double>(j / W) - static_cast<double>(i / W);
    const double di = img.data[j] - img.data[i];
    return std::exp(-(dx * dx + dy * dy) * a_xy - di * di * a_i);
  };
  auto k_sp = [&](size_t i, size_t j) {
    const int dx = std::abs(static_cast<int>(j % W) - static_cast<int>(i % W));
    const int dy = std::abs(static_cast<int>(j / W) - static_cast<int>(i / W));
    return std::exp(-(static_cast<double>(dx) * dx + static_cast<double>(dy) * dy) * s_xy);
  };
  std::vector<double> na(n), ns(n);
  for (size_t i = 0; i < n; ++i) {
    if (!on(i)) continue;
    double sa = 0.0, ss = 0.0;
    for (size_t j = 0; j < n; ++j) {
      if (j == i || !on(j)) continue;
      sa += k_app(i, j);
      ss += k_sp(i, j);
    }
    na[i] = sa > 0.0 ? 1.0 / sa : 0.0;
    ns[i] = ss > 0.0 ? 1.0 / ss : 0.0;
  }
  for (int it = 0; it < c.n_iterations; ++it) {
    std::vector<double> next(q);
    for (size_t i = 0; i < n; ++i) {
      if (!on(i)) continue;
      double ma = 0.0, ms = 0.0;
      for (size_t j = 0; j < n; ++j) {
        if (j == i || !on(j)) continue;
        ma += k_app(i, j) * q[j];
        ms += k_sp(i, j) * q[j];
      }
      const double fg = c.appearance_weight * ma * na[i] + c.spatial_weight * ms * ns[i];
      const double total = c.appearance_weight * (na[i] > 0.0 ? 1.0 : 0.0) + c.spatial_weight * (ns[i] > 0.0 ? 1.0 : 0.0);
      const double e_fg = ufg[i] + (total - fg);
      const double e_bg = ubg[i] + fg;
      next[i] = 1.0 / (1.0 + std::exp(e_fg - e_bg));
    }
    q = next;
  }
  for (size_t i = 0; i < n; ++i) out.data[i] = on(i) && q[i] >= 0.5;
  return out;
}

}  // namespace oracle
