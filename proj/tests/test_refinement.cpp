#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <random>

#include "doctest.h"
#include "json.hpp"
#include "oracles.hpp"
#include "scenarios.hpp"
#include "test_util.hpp"
#include "wiss/backbone.hpp"
#include "wiss/error.hpp"
#include "wiss/geometry.hpp"
#include "wiss/metrics.hpp"
#include "wiss/phantom.hpp"
#include "wiss/refinement.hpp"

using namespace wiss;

namespace {

Mask2 threshold(const Image2& p) {
  Mask2 m(p.height, p.width, 0);
  for (size_t i = 0; i < p.size(); ++i) m.data[i] = p.data[i] >= 0.5;
  return m;
}

// Line fit through the other centroids; distance of the held-out one.
double lateral_offset(const std::vector<Point2>& others, Point2 p) {
  double sy = 0, sx = 0, syy = 0, sxy = 0;
  for (const auto& q : others) {
    sy += q.y;
    sx += q.x;
    syy += q.y * q.y;
    sxy += q.x * q.y;
  }
  const double n = static_cast<double>(others.size());
  const double b = (n * sxy - sx * sy) / (n * syy - sy * sy);
  const double a = (sx - b * sy) / n;
  return std::abs(p.x - (a + b * p.y));
}

Point2 box_center(const InstancePrediction& p) {
  return {(p.bbox.x0 + p.bbox.x1 - 1) / 2.0, (p.bbox.y0 + p.bbox.y1 - 1) / 2.0};
}

double best_dice(const Mask2& gt, const std::vector<InstanceMask>& preds) {
  double best = 0.0;
  for (const auto& p : preds)
    if (overlap(p.mask, gt) > 0) best = std::max(best, dic(confusion_counts(p.mask, gt)));
  return best;
}

}  // namespace

TEST_CASE("selection thresholds") {
  SelectionConfig cfg;
  const auto one = scenario::box_prediction(10, 20, 6, 4, 0.95);
  const auto s = select_confident({one}, 64, 64, cfg);
  REQUIRE(s.kept.size() == 1);
  CHECK(count_foreground(s.kept[0].mask) == 24);
  CHECK(mask_bbox(s.kept[0].mask) == one.bbox);
  CHECK(s.kept[0].provenance == Provenance::kSelected);
  CHECK(s.kept[0].vertebra_id == "roi01");

  auto low = one;
  low.objectness = 0.5;
  const auto r = select_confident({low}, 64, 64, cfg);
  CHECK(r.kept.empty());
  CHECK(r.rejected.size() == 1);

  auto faint = one;
  faint.prob_map = Image2(4, 6, 0.4);
  CHECK(select_confident({faint}, 64, 64, cfg).kept.empty());
  CHECK(select_confident({}, 64, 64, cfg).kept.empty());
}

TEST_CASE("lateral outlier is the only rejection") {
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    const auto c = scenario::lateral_outlier(seed);
    // Independent check that the construction is what it claims.
    std::vector<Point2> others;
    for (size_t i = 0; i < c.preds.size(); ++i)
      if (i != c.outlier) others.push_back(box_center(c.preds[i]));
    REQUIRE(lateral_offset(others, box_center(c.preds[c.outlier])) > 50.0);

    const auto s = select_confident(c.preds, c.height, c.width, SelectionConfig{});
    REQUIRE(s.rejected.size() == 1);
    CHECK(s.rejected[0].bbox == c.preds[c.outlier].bbox);
    CHECK(s.kept.size() == 5);
    CHECK(std::find(s.kept_source.begin(), s.kept_source.end(), c.outlier) == s.kept_source.end());
  }
}

TEST_CASE("selection is order insensitive and monotone in T1") {
  std::mt19937_64 rng(5);
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    auto c = scenario::lateral_outlier(seed);
    std::uniform_real_distribution<double> obj(0.85, 1.0);
    for (auto& p : c.preds) p.objectness = obj(rng);
    const auto base = select_confident(c.preds, c.height, c.width, SelectionConfig{});
    auto shuffled = c.preds;
    std::shuffle(shuffled.begin(), shuffled.end(), rng);
    const auto perm = select_confident(shuffled, c.height, c.width, SelectionConfig{});
    REQUIRE(perm.kept.size() == base.kept.size());
    for (size_t k = 0; k < base.kept.size(); ++k) {
      CHECK(perm.kept[k].mask == base.kept[k].mask);
      CHECK(perm.kept[k].vertebra_id == base.kept[k].vertebra_id);
    }
    size_t prev = c.preds.size() + 1;
    for (double t1 : {0.85, 0.9, 0.93, 0.96, 0.99, 1.0}) {
      SelectionConfig cfg;
      cfg.t1_objectness = t1;
      const size_t n = select_confident(c.preds, c.height, c.width, cfg).kept.size();
      CHECK(n <= prev);
      prev = n;
    }
  }
}

TEST_CASE("fewer than three survivors skip the curve") {
  std::vector<InstancePrediction> two{scenario::box_prediction(10, 10, 8, 8, 0.95),
                                      scenario::box_prediction(200, 40, 8, 8, 0.95)};
  const auto s = select_confident(two, 128, 256, SelectionConfig{});
  CHECK(s.kept.size() == 2);
  CHECK(!s.curve);
}

TEST_CASE("CRF without coupling is thresholding") {
  std::mt19937_64 rng(6);
  for (int i = 0; i < 20; ++i) {
    const Image2 img = testutil::random_image(rng, 12, 14, 0, 500);
    Image2 p = testutil::random_image(rng, 12, 14);
    p.data[0] = 0.5;
    const Mask2 expect = threshold(p);
    CrfConfig none;
    none.appearance_weight = none.spatial_weight = 0.0;
    CHECK(crf_refine(img, p, none) == expect);
    CrfConfig zero;
    zero.n_iterations = 0;
    CHECK(crf_refine(img, p, zero) == expect);
    CHECK(crf_refine(img, p, zero) == crf_refine(img, p, zero));
  }
  CHECK_THROWS_AS(crf_refine(Image2(4, 4), Image2(4, 5), CrfConfig{}), Error);
  CrfConfig bad;
  bad.spatial_sigma_xy = 0.0;
  CHECK_THROWS_AS(crf_refine(Image2(4, 4), Image2(4, 4), bad), Error);
}

TEST_CASE("CRF matches the naive dense reference bitwise") {
  std::mt19937_64 rng(7);
  for (int i = 0; i < 6; ++i) {
    const int h = 24 - (i % 3), w = 24 - 2 * (i % 2);
    const Image2 img = testutil::random_image(rng, h, w, 0, 200);
    const Image2 p = testutil::random_image(rng, h, w);
    CrfConfig c;
    c.appearance_sigma_xy = 5.0 + i;
    c.appearance_weight = 1.0 + 0.5 * i;
    CHECK(crf_refine(img, p, c) == oracle::crf(img, p, c));
  }
  const auto t = scenario::two_region(16);
  CHECK(crf_refine(t.image, t.prob, CrfConfig{}) == oracle::crf(t.image, t.prob, CrfConfig{}));
}

TEST_CASE("CRF with inactive pixels matches the reference bitwise") {
  std::mt19937_64 rng(9);
  std::bernoulli_distribution keep(0.8);
  for (int i = 0; i < 4; ++i) {
    const int h = 20 + i, w = 22 - i;
    const Image2 img = testutil::random_image(rng, h, w, 0, 200);
    const Image2 p = testutil::random_image(rng, h, w);
    Mask2 active(h, w, 0);
    for (auto& a : active.data) a = keep(rng);
    CrfConfig c;
    c.appearance_sigma_xy = 4.0 + 2 * i;
    const Mask2 out = crf_refine(img, p, active, c);
    CHECK(out == oracle::crf(img, p, c, &active));
    for (size_t k = 0; k < out.size(); ++k)
      if (!active.data[k]) CHECK(out.data[k] == 0);
    CrfConfig none;
    none.n_iterations = 0;
    CHECK(crf_refine(img, p, active, none) == oracle::crf(img, p, none, &active));
  }
  // All-active mask is the plain overload.
  const auto t = scenario::two_region(16);
  CHECK(crf_refine(t.image, t.prob, Mask2(16, 16, 1), CrfConfig{}) == crf_refine(t.image, t.prob, CrfConfig{}));
  CHECK_THROWS_AS(crf_refine(t.image, t.prob, Mask2(16, 15, 1), CrfConfig{}), Error);
}

TEST_CASE("CRF snaps an over-covering mask to the intensity edge") {
  for (int n : {16, 24})
    for (double outside : {0.0, 0.3}) {
      const auto t = scenario::two_region(n, 2, 0.7, outside);
      const Mask2 in = threshold(t.prob);
      const Mask2 out = crf_refine(t.image, t.prob, CrfConfig{});
      CHECK(out == oracle::crf(t.image, t.prob, CrfConfig{}));
      long err_in = 0, err_out = 0;
      for (int y = 0; y < n; ++y) {
        int last = -1;
        for (int x = 0; x < n; ++x) {
          const bool truth = x < t.edge;
          err_in += (in.at(y, x) != 0) != truth;
          err_out += (out.at(y, x) != 0) != truth;
          if (out.at(y, x)) last = x;
        }
        CHECK(std::abs(last + 1 - t.edge) <= 1);
      }
      CHECK(err_out < err_in);
    }
}

TEST_CASE("refine_labels composes selection and windowed CRF") {
  std::mt19937_64 rng(8);
  Image2 img = testutil::random_image(rng, 64, 64, 90, 110);
  std::vector<InstancePrediction> preds;
  for (int k = 0; k < 3; ++k) {
    const int y0 = 6 + 18 * k;
    for (int y = y0; y < y0 + 10; ++y)
      for (int x = 20; x < 34; ++x) img.at(y, x) += 60;
    auto p = scenario::box_prediction(19, y0 - 1, 16, 12, 0.95);
    preds.push_back(p);
  }
  SelectionConfig sc;
  CrfConfig cc;
  const auto out = refine_labels(img, preds, sc, cc, 3);
  const auto sel = select_confident(preds, 64, 64, sc);
  std::vector<InstanceMask> manual;
  for (size_t k = 0; k < sel.kept.size(); ++k) {
    const auto w = crf_window(img, sel, preds, k);
    const Mask2 local = crf_refine(w.image, w.prob, w.active, cc);
    Mask2 full(64, 64, 0);
    for (int y = 0; y < local.height; ++y)
      for (int x = 0; x < local.width; ++x) full.at(w.window.y0 + y, w.window.x0 + x) = local.at(y, x);
    if (count_foreground(full) == 0) continue;
    manual.push_back({sel.kept[k].vertebra_id, full, Provenance::kCrfRefined, 3, false});
  }
  REQUIRE(out.size() == manual.size());
  for (size_t k = 0; k < out.size(); ++k) {
    CHECK(out[k].vertebra_id == manual[k].vertebra_id);
    CHECK(out[k].mask == manual[k].mask);
    CHECK(out[k].provenance == Provenance::kCrfRefined);
    CHECK(out[k].iteration == 3);
  }
  CHECK(refine_labels(img, {}, sc, cc).empty());

  const auto w = crf_window(img, sel, preds, 0);
  CHECK(w.window == dilate(preds[0].bbox, kCrfWindowMargin, 64, 64));
  for (int y = w.window.y0; y < w.window.y1; ++y)
    for (int x = w.window.x0; x < w.window.x1; ++x)
      CHECK((w.active.at(y - w.window.y0, x - w.window.x0) == 0) == (sel.kept[1].mask.at(y, x) != 0));
}

TEST_CASE("refinement improves on selection for a model trained on coarse labels") {
  std::vector<TrainingSlice> train_set;
  for (const auto& s : standard_phantom_suite(10, 100)) {
    const Phantom p = generate_phantom(s);
    const int m = p.volume.mid_slice();
    TrainingSlice ts{p.volume.slice_image(m), {}};
    for (const auto& v : p.annotation.vertebrae)
      ts.labels.push_back({v.vertebra_id, rasterize_quadrilateral(v.corners, 128, 128), Provenance::kCoarse, 0, false});
    train_set.push_back(std::move(ts));
  }
  const TrainedModel model = train(train_set, BackboneConfig{});

  double sum_sel = 0.0, sum_ref = 0.0;
  int n = 0;
  for (const auto& s : standard_phantom_suite(20, 500)) {
    const Phantom p = generate_phantom(s);
    const int m = p.volume.mid_slice();
    const Image2 img = p.volume.slice_image(m);
    const auto preds = predict(model, img);
    const auto sel = select_labels(img, preds, SelectionConfig{});
    const auto ref = refine_labels(img, preds, SelectionConfig{}, CrfConfig{});
    for (const auto& g : p.ground_truth.latest(p.volume.id(), m)->instances) {
      sum_sel += best_dice(g.mask, sel);
      sum_ref += best_dice(g.mask, ref);
      ++n;
    }
  }
  const double mean_sel = sum_sel / n, mean_ref = sum_ref / n;
  char buf[96];
  std::snprintf(buf, sizeof buf, "selected %.12f refined %.12f", mean_sel, mean_ref);
  MESSAGE(buf);
  CHECK(mean_ref >= mean_sel);

  std::ifstream f(std::string(WISS_GOLDEN_DIR) + "/refinement_dice.json");
  REQUIRE(f);
  const auto golden = nlohmann::json::parse(f);
  CHECK(mean_sel == doctest::Approx(golden["selected_mean_dice"].get<double>()).epsilon(1e-6));
  CHECK(mean_ref == doctest::Approx(golden["refined_mean_dice"].get<double>()).epsilon(1e-6));
}
