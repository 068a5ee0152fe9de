#include <algorithm>
#include <cmath>
#include <fstream>

#include "doctest.h"
#include "json.hpp"
#include "wiss/error.hpp"
#include "wiss/geometry.hpp"
#include "wiss/metrics.hpp"
#include "wiss/phantom.hpp"

using namespace wiss;

namespace {

double point_distance(Point2 a, Point2 b) { return std::hypot(a.x - b.x, a.y - b.y); }

std::vector<double> coarse_dice(const Phantom& p) {
  const int mid = p.volume.mid_slice();
  const auto* gt = p.ground_truth.latest(p.volume.id(), mid);
  REQUIRE(gt);
  std::vector<double> out;
  for (const auto& v : p.annotation.vertebrae) {
    const Mask2 coarse = rasterize_quadrilateral(v.corners, p.volume.dims()[1], p.volume.dims()[2]);
    const auto it = std::find_if(gt->instances.begin(), gt->instances.end(),
                                 [&](const InstanceMask& m) { return m.vertebra_id == v.vertebra_id; });
    REQUIRE(it != gt->instances.end());
    out.push_back(dic(confusion_counts(coarse, it->mask)) / 100.0);
  }
  return out;
}

}  // namespace

TEST_CASE("phantom generation is deterministic") {
  PhantomSpec s;
  s.seed = 42;
  const Phantom a = generate_phantom(s), b = generate_phantom(s);
  CHECK(a.volume == b.volume);
  CHECK(a.annotation == b.annotation);
  CHECK(a.ground_truth == b.ground_truth);
  s.seed = 43;
  CHECK_FALSE(generate_phantom(s).volume == a.volume);
}

TEST_CASE("vertebra count and disjoint ground truth") {
  PhantomSpec s;
  s.n_vertebrae = 3;
  const Phantom p = generate_phantom(s);
  const int mid = p.volume.mid_slice();
  const auto* e = p.ground_truth.latest(p.volume.id(), mid);
  REQUIRE(e);
  CHECK(e->instances.size() == 3);
  CHECK(p.annotation.slice_index == mid);
  CHECK(p.annotation.vertebrae.size() == 3);
  for (const auto& [key, entry] : p.ground_truth.entries())
    for (size_t i = 0; i < entry.instances.size(); ++i)
      for (size_t j = i + 1; j < entry.instances.size(); ++j)
        CHECK(overlap(entry.instances[i].mask, entry.instances[j].mask) == 0);
}

TEST_CASE("marginal slices have smaller cross-sections") {
  const Phantom p = generate_phantom(PhantomSpec{});
  const int mid = p.volume.mid_slice();
  const auto* m = p.ground_truth.latest(p.volume.id(), mid);
  REQUIRE(m);
  for (int s : {0, p.volume.dims()[0] - 1}) {
    const auto* e = p.ground_truth.latest(p.volume.id(), s);
    if (!e) continue;
    for (const auto& inst : e->instances) {
      const auto it = std::find_if(m->instances.begin(), m->instances.end(),
                                   [&](const InstanceMask& x) { return x.vertebra_id == inst.vertebra_id; });
      REQUIRE(it != m->instances.end());
      CHECK(count_foreground(inst.mask) < count_foreground(it->mask));
    }
  }
  const auto prof = default_extrusion_profile(9);
  CHECK(prof[4] == doctest::Approx(1.0));
  for (int i = 0; i < 4; ++i) CHECK(prof[i] < prof[i + 1]);
}

TEST_CASE("geometry overflow and invalid specs are rejected") {
  PhantomSpec s;
  s.n_vertebrae = 12;
  CHECK_THROWS_AS(generate_phantom(s), Error);
  PhantomSpec c;
  c.contrast.bone_mean = c.contrast.background_mean;
  CHECK_THROWS_AS(generate_phantom(c), Error);
  PhantomSpec g;
  g.gap_px = 0.5;
  CHECK_THROWS_AS(generate_phantom(g), Error);
}

TEST_CASE("coarse quadrilateral labels over the standard suite") {
  std::vector<double> all;
  for (const auto& spec : standard_phantom_suite(20, 0)) {
    const auto d = coarse_dice(generate_phantom(spec));
    all.insert(all.end(), d.begin(), d.end());
  }
  const double lo = *std::min_element(all.begin(), all.end());
  CHECK(lo >= 0.85);
  CHECK(lo < 1.0);

  std::ifstream f(std::string(WISS_GOLDEN_DIR) + "/phantom_coarse_dice.json");
  REQUIRE(f);
  const auto golden = nlohmann::json::parse(f);
  CHECK(lo == doctest::Approx(golden["min_dice"].get<double>()).epsilon(1e-9));
  CHECK(all.size() == golden["n_vertebrae"].get<size_t>());
}

TEST_CASE("collapsed vertebra is shorter") {
  PhantomSpec s;
  s.collapse = Collapse{1, 0.6};
  const Phantom p = generate_phantom(s);
  const Phantom q = generate_phantom(PhantomSpec{});
  const int mid = p.volume.mid_slice();
  const auto& a = p.ground_truth.latest(p.volume.id(), mid)->instances[1].mask;
  const auto& b = q.ground_truth.latest(q.volume.id(), mid)->instances[1].mask;
  CHECK(mask_bbox(a)->height() < mask_bbox(b)->height());
}

TEST_CASE("landmark jitter") {
  const Phantom p = generate_phantom(PhantomSpec{});
  const auto& a = p.annotation;
  CHECK(jitter_landmarks(a, {1, 1}, 0.0, 5) == a);

  const auto j = jitter_landmarks(a, {1, 1}, 1.0, 5);
  CHECK(j == jitter_landmarks(a, {1, 1}, 1.0, 5));
  REQUIRE(j.vertebrae.size() == a.vertebrae.size());
  bool moved = false;
  for (size_t v = 0; v < a.vertebrae.size(); ++v) {
    CHECK(j.vertebrae[v].vertebra_id == a.vertebrae[v].vertebra_id);
    CHECK(is_simple_polygon(j.vertebrae[v].corners));
    for (int c = 0; c < 4; ++c) {
      const double d = point_distance(j.vertebrae[v].corners[c], a.vertebrae[v].corners[c]);
      CHECK(d <= 1.0 + 1e-12);
      moved = moved || d > 0.0;
    }
  }
  CHECK(moved);

  // Anisotropic spacing: the bound is in millimeters.
  const auto k = jitter_landmarks(a, {0.5, 0.25}, 1.0, 9);
  for (size_t v = 0; v < a.vertebrae.size(); ++v)
    for (int c = 0; c < 4; ++c) {
      const double dy = (k.vertebrae[v].corners[c].y - a.vertebrae[v].corners[c].y) * 0.5;
      const double dx = (k.vertebrae[v].corners[c].x - a.vertebrae[v].corners[c].x) * 0.25;
      CHECK(std::hypot(dx, dy) <= 1.0 + 1e-12);
    }
  CHECK_THROWS_AS(jitter_landmarks(a, {1, 1}, -1.0, 5), Error);
}

TEST_CASE("phantom spec json round trip") {
  PhantomSpec s;
  s.seed = 7;
  s.n_vertebrae = 3;
  s.collapse = Collapse{2, 0.5};
  std::vector<std::string> errors;
  const PhantomSpec back = phantom_spec_from_json(to_json(s), "spec", errors);
  CHECK(errors.empty());
  CHECK(to_json(back) == to_json(s));
  errors.clear();
  phantom_spec_from_json({{"seed", 1}, {"bogus", 2}, {"n_vertebrae", "x"}}, "spec", errors);
  CHECK(errors.size() == 2);
}
