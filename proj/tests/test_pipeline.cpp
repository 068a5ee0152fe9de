#include <algorithm>
#include <fstream>
#include <queue>
#include <random>
#include <set>

#include "doctest.h"
#include "json.hpp"
#include "wiss/error.hpp"
#include "wiss/geometry.hpp"
#include "wiss/metrics.hpp"
#include "wiss/phantom.hpp"
#include "wiss/pipeline.hpp"

using namespace wiss;

namespace {

PhantomSpec small_spec(std::uint64_t seed, int slices = 7) {
  PhantomSpec s;
  s.volume_id = "small" + std::to_string(seed);
  s.seed = seed;
  s.dims = {slices, 64, 64};
  s.n_vertebrae = 3;
  s.spine_curve_coeffs = {32.0};
  s.vb_height_px = 12.0;
  s.vb_width_px = 18.0;
  s.gap_px = 4.0;
  return s;
}

struct Small {
  std::vector<Phantom> phantoms;
  std::vector<Volume> volumes;
  std::vector<LandmarkAnnotation> annotations;
  LabelStore gt;
};

Small make_small(int n, int slices = 7) {
  Small s;
  for (int i = 0; i < n; ++i) {
    s.phantoms.push_back(generate_phantom(small_spec(11 + i, slices)));
    s.volumes.push_back(s.phantoms.back().volume);
    s.annotations.push_back(s.phantoms.back().annotation);
    for (const auto& [k, e] : s.phantoms.back().ground_truth.entries()) s.gt.put(k, e.instances, e.generation);
  }
  return s;
}

PipelineConfig fast_config(int iterations, int radius) {
  PipelineConfig c;
  c.self_train_iterations = iterations;
  c.propagation_radius = radius;
  c.backbone.input_size = {64, 64};
  c.backbone.epochs = 200;
  c.seed = 3;
  return c;
}

// Connected components of nonzero voxels, 6-neighborhood, ignoring ids.
// Components of at least `min_size` voxels. The CRF can leave isolated pixels.
int count_components(const Volume& v, int min_size = 1) {
  const auto [S, H, W] = v.dims();
  std::vector<int> seen(v.voxels().size(), 0);
  int comps = 0;
  for (int s = 0; s < S; ++s)
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x) {
        const size_t i = (static_cast<size_t>(s) * H + y) * W + x;
        if (!v.voxels()[i] || seen[i]) continue;
        int size = 0;
        std::queue<std::array<int, 3>> q;
        q.push({s, y, x});
        seen[i] = 1;
        while (!q.empty()) {
          const auto [a, b, c] = q.front();
          q.pop();
          ++size;
          const int d[6][3] = {{1, 0, 0}, {-1, 0, 0}, {0, 1, 0}, {0, -1, 0}, {0, 0, 1}, {0, 0, -1}};
          for (const auto& o : d) {
            const int na = a + o[0], nb = b + o[1], nc = c + o[2];
            if (na < 0 || nb < 0 || nc < 0 || na >= S || nb >= H || nc >= W) continue;
            const size_t j = (static_cast<size_t>(na) * H + nb) * W + nc;
            if (v.voxels()[j] && !seen[j]) {
              seen[j] = 1;
              q.push({na, nb, nc});
            }
          }
        }
        if (size >= min_size) ++comps;
      }
  return comps;
}

const Small& shared_small() {
  static const Small s = make_small(2);
  return s;
}

const RunResult& shared_run() {
  static const RunResult r = run_pipeline(shared_small().volumes, shared_small().annotations, fast_config(2, 2));
  return r;
}

}  // namespace

TEST_CASE("coarse labels are the rasterized annotations") {
  const Small s = make_small(1);
  const auto vs = index_volumes(s.volumes);
  const LabelStore store = build_coarse_labels(s.annotations, vs);
  const auto& a = s.annotations[0];
  const auto& e = store.at({a.volume_id, a.slice_index, 0});
  REQUIRE(e.instances.size() == 3);
  CHECK(store.size() == 1);
  for (size_t k = 0; k < 3; ++k) {
    CHECK(e.instances[k].vertebra_id == a.vertebrae[k].vertebra_id);
    CHECK(e.instances[k].provenance == Provenance::kCoarse);
    CHECK(e.instances[k].mask == rasterize_quadrilateral(a.vertebrae[k].corners, 64, 64));
  }
  CHECK_THROWS_AS(index_volumes({s.volumes[0], s.volumes[0]}), Error);
}

TEST_CASE("coarse labels reproduce the phantom golden minimum") {
  std::vector<Volume> vols;
  std::vector<LandmarkAnnotation> anns;
  LabelStore gt;
  for (const auto& spec : standard_phantom_suite(20, 0)) {
    const Phantom p = generate_phantom(spec);
    vols.push_back(p.volume);
    anns.push_back(p.annotation);
    for (const auto& [k, e] : p.ground_truth.entries()) gt.put(k, e.instances, e.generation);
  }
  const LabelStore coarse = build_coarse_labels(anns, index_volumes(vols));
  double lo = 100.0;
  for (const auto& a : anns) {
    const auto& c = coarse.at({a.volume_id, a.slice_index, 0}).instances;
    const auto* g = gt.latest(a.volume_id, a.slice_index);
    for (const auto& inst : g->instances)
      for (const auto& ci : c)
        if (ci.vertebra_id == inst.vertebra_id) lo = std::min(lo, dic(confusion_counts(ci.mask, inst.mask)));
  }
  std::ifstream f(std::string(WISS_GOLDEN_DIR) + "/phantom_coarse_dice.json");
  REQUIRE(f);
  CHECK(lo / 100.0 == doctest::Approx(nlohmann::json::parse(f)["min_dice"].get<double>()).epsilon(1e-12));
}

TEST_CASE("one self-training iteration") {
  const Small& s = shared_small();
  const auto r = run_pipeline(s.volumes, s.annotations, fast_config(1, 0));
  for (const auto& a : s.annotations) CHECK(r.state.labels.iterations(a.volume_id, a.slice_index) == std::vector<int>{0, 1});
  REQUIRE(r.state.manifest.stages.size() == 1);
  CHECK(r.state.manifest.stages[0].stage == "self_train");
  CHECK(r.state.manifest.stages[0].checkpoint == "it1");
  CHECK(r.state.checkpoints.size() == 1);
  CHECK(r.state.train_calls == 1);
  CHECK(r.state.manifest.stages[0].training_log.size() == 200);
  for (const auto& [vol, seg] : r.segmentations) {
    const int m = seg.mid_slice();
    for (int sl = 0; sl < seg.dims()[0]; ++sl)
      for (int y = 0; y < 64; ++y)
        for (int x = 0; x < 64; ++x)
          if (sl != m) REQUIRE(seg.at(sl, y, x) == 0);
  }
}

TEST_CASE("radius zero propagation changes nothing") {
  const Small& s = shared_small();
  const auto vs = index_volumes(s.volumes);
  PipelineState state;
  state.labels = build_coarse_labels(s.annotations, vs);
  std::vector<SliceRef> mids;
  for (const auto& a : s.annotations) mids.push_back({a.volume_id, a.slice_index});
  const auto cfg = fast_config(1, 0);
  self_train(vs, mids, cfg, state);
  const LabelStore before = state.labels;
  const TrainedModel model = *state.model;
  const size_t stages = state.manifest.stages.size();
  slice_propagate(vs, s.annotations, cfg, state);
  CHECK(state.labels == before);
  CHECK(*state.model == model);
  CHECK(state.manifest.stages.size() == stages);
}

TEST_CASE("radius two covers five slices per volume") {
  const auto& r = shared_run();
  for (const auto& a : shared_small().annotations) {
    std::set<int> offsets;
    for (int sl : r.state.labels.slice_indices(a.volume_id)) offsets.insert(sl - a.slice_index);
    CHECK(offsets == std::set<int>{-2, -1, 0, 1, 2});
  }
  std::vector<std::string> names;
  for (const auto& [n, m] : r.state.checkpoints) names.push_back(n);
  CHECK(names.front() == "it1");
  CHECK(names.size() == static_cast<size_t>(r.state.train_calls));
  // 2 self-training passes, then 2 passes for each of 2 offsets.
  CHECK(r.state.train_calls == 6);
}

TEST_CASE("label provenance moves forward across iterations") {
  const auto& store = shared_run().state.labels;
  for (const auto& vol : store.volume_ids())
    for (int sl : store.slice_indices(vol)) {
      std::optional<Provenance> prev;
      for (int it : store.iterations(vol, sl)) {
        const auto& e = store.at({vol, sl, it});
        for (const auto& inst : e.instances) {
          if (it == 0) CHECK(inst.provenance == Provenance::kCoarse);
          else CHECK((inst.fallback || inst.provenance != Provenance::kCoarse));
          if (prev && !inst.fallback) CHECK(provenance_can_follow(*prev, inst.provenance));
        }
        if (!e.instances.empty()) prev = e.instances.front().provenance;
      }
    }
}

TEST_CASE("assembled volume stacks the final masks") {
  const auto& r = shared_run();
  for (const auto& [vol, seg] : r.segmentations) {
    CHECK(count_components(seg, 10) == 3);
    std::map<int, std::set<int>> slices_of;
    for (int sl = 0; sl < seg.dims()[0]; ++sl)
      for (int y = 0; y < 64; ++y)
        for (int x = 0; x < 64; ++x)
          if (seg.at(sl, y, x)) slices_of[seg.at(sl, y, x)].insert(sl);
    CHECK(slices_of.size() == 3);
    for (const auto& [id, sl] : slices_of) CHECK(sl.size() <= 5);

    for (int sl : r.state.labels.slice_indices(vol)) {
      const auto* e = r.state.labels.latest(vol, sl);
      Mask2 u(64, 64, 0);
      for (const auto& inst : e->instances)
        for (size_t i = 0; i < u.size(); ++i) u.data[i] |= inst.mask.data[i];
      for (int y = 0; y < 64; ++y)
        for (int x = 0; x < 64; ++x) CHECK((seg.at(sl, y, x) != 0) == (u.at(y, x) != 0));
    }
  }
}

TEST_CASE("assembly ignores instance order") {
  const auto& r = shared_run();
  std::mt19937_64 rng(2);
  LabelStore shuffled;
  for (const auto& [k, e] : r.state.labels.entries()) {
    auto inst = e.instances;
    std::shuffle(inst.begin(), inst.end(), rng);
    shuffled.put(k, inst, e.generation);
  }
  for (const auto& v : shared_small().volumes) {
    const int m = v.mid_slice();
    CHECK(assemble_volume(shuffled, v, m) == assemble_volume(r.state.labels, v, m));
  }
}

TEST_CASE("single-slice store assembles to one slice") {
  const Small& s = shared_small();
  const auto vs = index_volumes(s.volumes);
  const LabelStore coarse = build_coarse_labels(s.annotations, vs);
  const auto& v = s.volumes[0];
  const int m = s.annotations[0].slice_index;
  const Volume seg = assemble_volume(coarse, v, m);
  std::set<int> ids;
  for (int sl = 0; sl < v.dims()[0]; ++sl)
    for (int y = 0; y < 64; ++y)
      for (int x = 0; x < 64; ++x) {
        if (sl != m) REQUIRE(seg.at(sl, y, x) == 0);
        else if (seg.at(sl, y, x)) ids.insert(seg.at(sl, y, x));
      }
  CHECK(ids == std::set<int>{1, 2, 3});
}

TEST_CASE("pipeline runs are deterministic") {
  const Small& s = shared_small();
  const auto cfg = fast_config(1, 1);
  const auto a = run_pipeline(s.volumes, s.annotations, cfg);
  const auto b = run_pipeline(s.volumes, s.annotations, cfg);
  CHECK(to_json(a.state.manifest) == to_json(b.state.manifest));
  CHECK(a.state.labels == b.state.labels);
  CHECK(a.segmentations == b.segmentations);
  REQUIRE(a.state.checkpoints.size() == b.state.checkpoints.size());
  for (size_t i = 0; i < a.state.checkpoints.size(); ++i) CHECK(a.state.checkpoints[i] == b.state.checkpoints[i]);
}

TEST_CASE("radius beyond the volume is truncated with a warning") {
  const Small s = make_small(1, 3);
  const auto r = run_pipeline(s.volumes, s.annotations, fast_config(1, 2));
  const auto& a = s.annotations[0];
  std::set<int> offsets;
  for (int sl : r.state.labels.slice_indices(a.volume_id)) offsets.insert(sl - a.slice_index);
  // Slices the model finds nothing on stay unlabeled, so only bound the offsets.
  REQUIRE(offsets.count(0));
  CHECK(*offsets.begin() >= -1);
  CHECK(*offsets.rbegin() <= 1);
  int truncated = 0;
  for (const auto& w : r.state.manifest.warnings) truncated += w.find("radius truncated") != std::string::npos;
  CHECK(truncated == 2);
}

TEST_CASE("evaluation against ground truth") {
  const Small& s = shared_small();
  std::map<SliceRef, std::vector<InstanceMask>> perfect;
  for (const auto& a : s.annotations) perfect[{a.volume_id, a.slice_index}] = s.gt.latest(a.volume_id, a.slice_index)->instances;
  const auto rep = evaluate_instances(perfect, s.gt);
  CHECK(rep.find("DIC")->mean == 100.0);

  const auto ev = evaluate_run(shared_run(), s.annotations, s.gt, fast_config(2, 2));
  std::set<int> offs;
  for (const auto& [o, r] : ev.per_offset) offs.insert(o);
  CHECK(offs == std::set<int>{-2, -1, 0, 1, 2});
  CHECK(ev.per_offset.at(0).find("DIC")->mean > 80.0);
  CHECK(ev.volumetric.find("DIC")->mean > 70.0);
  CHECK(ev.volumetric.find("HSD")->mean >= ev.volumetric.find("ASD")->mean);
}

TEST_CASE("pipeline config validation and json") {
  PipelineConfig c;
  CHECK_NOTHROW(validate(c));
  c.self_train_iterations = 0;
  CHECK_THROWS_AS(validate(c), Error);
  c = {};
  c.propagation_radius = -1;
  CHECK_THROWS_AS(validate(c), Error);
  std::vector<std::string> errors;
  const auto back = pipeline_config_from_json(to_json(PipelineConfig{}), "p", errors);
  CHECK(errors.empty());
  CHECK(to_json(back) == to_json(PipelineConfig{}));
}
