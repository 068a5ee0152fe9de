#include "wiss/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <tuple>

#include "wiss/config_json.hpp"
#include "wiss/error.hpp"
#include "wiss/geometry.hpp"
#include "wiss/phantom.hpp"

namespace wiss {

namespace {

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

const Volume& volume_for(const VolumeSet& volumes, const std::string& id) {
  auto it = volumes.find(id);
  if (it == volumes.end()) throw Error(ErrorCode::kMissingFile, "no volume loaded for id " + id);
  return it->second;
}

std::string slice_name(const SliceRef& s) { return s.volume_id + "[" + std::to_string(s.slice_index) + "]"; }

TrainedModel train_step(const std::vector<TrainingSlice>& data, const PipelineConfig& cfg, PipelineState& state) {
  BackboneConfig bc = cfg.backbone;
  bc.seed = splitmix64(cfg.seed ^ splitmix64(cfg.backbone.seed + static_cast<std::uint64_t>(state.train_calls)));
  ++state.train_calls;
  return train(data, bc, state.model);
}

std::vector<TrainingSlice> training_data(const VolumeSet& volumes, const LabelStore& store,
                                         const std::vector<SliceRef>& slices) {
  std::vector<TrainingSlice> out;
  for (const auto& s : slices) {
    const LabelEntry* e = store.latest(s.volume_id, s.slice_index);
    if (!e || e->instances.empty()) continue;
    out.push_back({volume_for(volumes, s.volume_id).slice_image(s.slice_index), e->instances});
  }
  return out;
}

void count(ProvenanceCounts& c, const std::vector<InstanceMask>& masks) {
  for (const auto& m : masks) {
    switch (m.provenance) {
      case Provenance::kCoarse: ++c.coarse; break;
      case Provenance::kSelected: ++c.selected; break;
      case Provenance::kCrfRefined: ++c.crf_refined; break;
      default: break;
    }
  }
}

std::vector<InstanceMask> regenerate(const TrainedModel& model, const Image2& image, const PipelineConfig& cfg,
                                     int iteration, std::vector<InstanceMask>* selected_out = nullptr) {
  const auto preds = predict(model, image);
  if (selected_out) *selected_out = select_labels(image, preds, cfg.selection, iteration);
  if (!cfg.refine) return selected_out ? *selected_out : select_labels(image, preds, cfg.selection, iteration);
  return refine_labels(image, preds, cfg.selection, cfg.crf, iteration);
}

// Trains on train_slices, then relabels refresh_slices; repeated `passes` times.
void inner_loop(const VolumeSet& volumes, const std::vector<SliceRef>& train_slices,
                const std::vector<SliceRef>& refresh_slices, const PipelineConfig& cfg, PipelineState& state,
                const std::string& stage, int radius) {
  double prev_loss = -1.0;
  for (int pass = 1; pass <= cfg.self_train_iterations; ++pass) {
    const auto data = training_data(volumes, state.labels, train_slices);
    if (data.empty()) throw Error(ErrorCode::kEmptyTrainingSet, stage + ": no labelled slices");
    state.model = train_step(data, cfg, state);

    StageRecord rec;
    rec.stage = stage;
    rec.radius = radius;
    rec.iteration = pass;
    rec.training_log = state.model->training_log;
    rec.training_slices = static_cast<int>(data.size());
    rec.checkpoint = "it" + std::to_string(state.checkpoints.size() + 1);
    state.checkpoints.emplace_back(rec.checkpoint, *state.model);

    for (const auto& s : refresh_slices) {
      const LabelEntry* prev = state.labels.latest(s.volume_id, s.slice_index);
      if (!prev) continue;
      const int it = *state.labels.latest_iteration(s.volume_id, s.slice_index) + 1;
      const Image2 image = volume_for(volumes, s.volume_id).slice_image(s.slice_index);
      std::vector<InstanceMask> selected;
      auto fresh = regenerate(*state.model, image, cfg, it, stage == "self_train" ? &selected : nullptr);
      if (stage == "self_train") state.model_outputs[pass][s] = std::move(selected);
      if (fresh.empty()) {
        fresh = prev->instances;
        for (auto& m : fresh) {
          m.fallback = true;
          m.iteration = it;
        }
        ++rec.provenance.fallback;
        state.manifest.warnings.push_back(stage + ": empty refinement on " + slice_name(s) + ", kept previous labels");
      }
      count(rec.provenance, fresh);
      state.labels.put({s.volume_id, s.slice_index, it}, std::move(fresh), stage);
    }
    state.manifest.stages.push_back(std::move(rec));

    const double loss = state.model->training_log.empty() ? 0.0 : state.model->training_log.back().total;
    if (cfg.plateau_tolerance > 0.0 && prev_loss > 0.0 &&
        std::abs(prev_loss - loss) / prev_loss < cfg.plateau_tolerance)
      break;
    prev_loss = loss;
  }
}

}  // namespace

void validate(const PipelineConfig& cfg) {
  std::vector<std::string> errors;
  if (cfg.self_train_iterations < 1) errors.push_back("self_train_iterations must be >= 1");
  if (cfg.propagation_radius < 0) errors.push_back("propagation_radius must be >= 0");
  if (!(cfg.plateau_tolerance >= 0.0) || !std::isfinite(cfg.plateau_tolerance))
    errors.push_back("plateau_tolerance must be a finite value >= 0");
  auto nested = [&](auto&& fn) {
    try {
      fn();
    } catch (const Error& e) {
      errors.push_back(e.what());
    }
  };
  nested([&] { validate(cfg.backbone); });
  nested([&] { validate(cfg.selection); });
  nested([&] { validate(cfg.crf); });
  throw_if_errors(errors, "pipeline config");
}

nlohmann::json to_json(const PipelineConfig& cfg) {
  return {{"self_train_iterations", cfg.self_train_iterations},
          {"propagation_radius", cfg.propagation_radius},
          {"backbone", to_json(cfg.backbone)},
          {"selection", to_json(cfg.selection)},
          {"crf", to_json(cfg.crf)},
          {"seed", cfg.seed},
          {"plateau_tolerance", cfg.plateau_tolerance},
          {"refine", cfg.refine}};
}

PipelineConfig pipeline_config_from_json(const nlohmann::json& j, const std::string& path,
                                         std::vector<std::string>& errors) {
  const PipelineConfig d;
  JsonReader r(j, path, errors);
  PipelineConfig c;
  c.self_train_iterations = r.get("self_train_iterations", d.self_train_iterations);
  c.propagation_radius = r.get("propagation_radius", d.propagation_radius);
  c.seed = r.get<std::uint64_t>("seed", d.seed);
  c.plateau_tolerance = r.get("plateau_tolerance", d.plateau_tolerance);
  c.refine = r.get("refine", d.refine);
  if (r.has("backbone")) c.backbone = backbone_config_from_json(r.child("backbone"), r.sub("backbone"), errors);
  if (r.has("selection")) c.selection = selection_config_from_json(r.child("selection"), r.sub("selection"), errors);
  if (r.has("crf")) c.crf = crf_config_from_json(r.child("crf"), r.sub("crf"), errors);
  r.check(c.self_train_iterations >= 1, "self_train_iterations must be >= 1");
  r.check(c.propagation_radius >= 0, "propagation_radius must be >= 0");
  r.check(c.plateau_tolerance >= 0.0, "plateau_tolerance must be >= 0");
  r.finish();
  return c;
}

nlohmann::json to_json(const RunManifest& m) {
  nlohmann::json stages = nlohmann::json::array();
  for (const auto& s : m.stages) {
    nlohmann::json log = nlohmann::json::array();
    for (const auto& e : s.training_log)
      log.push_back({{"cls", e.cls}, {"box", e.box}, {"mask", e.mask}, {"edge", e.edge}, {"total", e.total}});
    stages.push_back({{"stage", s.stage},
                      {"radius", s.radius},
                      {"iteration", s.iteration},
                      {"checkpoint", s.checkpoint.empty() ? nlohmann::json() : nlohmann::json("checkpoints/" + s.checkpoint + ".bin")},
                      {"training_slices", s.training_slices},
                      {"provenance_counts",
                       {{"coarse", s.provenance.coarse},
                        {"selected", s.provenance.selected},
                        {"crf_refined", s.provenance.crf_refined},
                        {"fallback", s.provenance.fallback}}},
                      {"training_log", log}});
  }
  return {{"config", m.config}, {"stages", stages}, {"warnings", m.warnings}, {"metrics", m.metrics}};
}

VolumeSet index_volumes(const std::vector<Volume>& volumes) {
  VolumeSet out;
  for (const auto& v : volumes) {
    if (!out.emplace(v.id(), v).second) throw Error(ErrorCode::kDuplicateEntry, "duplicate volume id " + v.id());
  }
  return out;
}

LabelStore build_coarse_labels(const std::vector<LandmarkAnnotation>& annotations, const VolumeSet& volumes) {
  LabelStore store;
  for (const auto& a : annotations) {
    const Volume& v = volume_for(volumes, a.volume_id);
    validate(a, SliceBounds{v.slices(), v.height(), v.width()});
    std::vector<InstanceMask> masks;
    for (const auto& vb : a.vertebrae) {
      InstanceMask m;
      m.vertebra_id = vb.vertebra_id;
      m.mask = rasterize_quadrilateral(vb.corners, v.height(), v.width());
      m.provenance = Provenance::kCoarse;
      m.iteration = 0;
      masks.push_back(std::move(m));
    }
    store.put({a.volume_id, a.slice_index, 0}, std::move(masks), "coarse");
  }
  return store;
}

void self_train(const VolumeSet& volumes, const std::vector<SliceRef>& slices, const PipelineConfig& cfg,
                PipelineState& state) {
  validate(cfg);
  for (const auto& s : slices) {
    const LabelEntry* e = state.labels.latest(s.volume_id, s.slice_index);
    if (!e || e->instances.empty())
      throw Error(ErrorCode::kEmptyTrainingSet, "no labels for training slice " + slice_name(s));
  }
  inner_loop(volumes, slices, slices, cfg, state, "self_train", 0);
}

void slice_propagate(const VolumeSet& volumes, const std::vector<LandmarkAnnotation>& annotations,
                     const PipelineConfig& cfg, PipelineState& state) {
  validate(cfg);
  if (cfg.propagation_radius == 0) return;
  if (!state.model) throw Error(ErrorCode::kEmptyTrainingSet, "slice propagation needs a trained model");

  std::vector<SliceRef> in_training;
  for (const auto& a : annotations) in_training.push_back({a.volume_id, a.slice_index});
  std::sort(in_training.begin(), in_training.end());

  for (int k = 1; k <= cfg.propagation_radius; ++k) {
    std::vector<SliceRef> fresh;
    StageRecord init;
    init.stage = "propagate_init";
    init.radius = k;
    for (const auto& a : annotations) {
      const Volume& v = volume_for(volumes, a.volume_id);
      for (int sign : {-1, 1}) {
        const int s = a.slice_index + sign * k;
        if (s < 0 || s >= v.slices()) {
          state.manifest.warnings.push_back("propagation radius truncated for " + a.volume_id + " at offset " +
                                            std::to_string(sign * k));
          continue;
        }
        auto masks = regenerate(*state.model, v.slice_image(s), cfg, 1);
        if (masks.empty()) {
          state.manifest.warnings.push_back("no labels on " + slice_name({a.volume_id, s}) +
                                            ", excluded from training");
          continue;
        }
        count(init.provenance, masks);
        state.labels.put({a.volume_id, s, 1}, std::move(masks), "propagate");
        fresh.push_back({a.volume_id, s});
      }
    }
    state.manifest.stages.push_back(std::move(init));
    std::sort(fresh.begin(), fresh.end());
    in_training.insert(in_training.end(), fresh.begin(), fresh.end());
    std::sort(in_training.begin(), in_training.end());
    inner_loop(volumes, in_training, in_training, cfg, state, "propagate", k);
  }
}

Volume assemble_volume(const LabelStore& labels, const Volume& volume, int mid_slice,
                       std::vector<std::string>* warnings) {
  Volume out(volume.id(), volume.dims(), volume.spacing());
  if (mid_slice < 0 || mid_slice >= volume.slices())
    throw Error(ErrorCode::kOutOfBounds, "annotated slice outside volume " + volume.id());

  struct Placed {
    int label;
    Mask2 mask;
    Point2 centroid;
  };
  auto place = [&](int s, const std::vector<Placed>& inst) {
    for (const auto& p : inst) {
      for (int y = 0; y < volume.height(); ++y)
        for (int x = 0; x < volume.width(); ++x)
          if (p.mask.at(y, x) && out.at(s, y, x) == 0) out.at(s, y, x) = static_cast<std::int16_t>(p.label);
    }
  };

  const LabelEntry* mid = labels.latest(volume.id(), mid_slice);
  if (!mid) {
    if (warnings) warnings->push_back("no labels on annotated slice of " + volume.id());
    return out;
  }
  // Annotated slice: ids 1..n top to bottom.
  std::vector<const InstanceMask*> order;
  for (const auto& m : mid->instances)
    if (m.foreground() > 0) order.push_back(&m);
  std::sort(order.begin(), order.end(), [](const InstanceMask* a, const InstanceMask* b) {
    const double ya = mask_centroid(a->mask)->y, yb = mask_centroid(b->mask)->y;
    if (ya != yb) return ya < yb;
    return a->vertebra_id < b->vertebra_id;
  });
  std::vector<Placed> mid_placed;
  int next_label = 1;
  for (const auto* m : order) mid_placed.push_back({next_label++, m->mask, *mask_centroid(m->mask)});
  place(mid_slice, mid_placed);

  for (int dir : {-1, 1}) {
    std::vector<Placed> prev = mid_placed;
    for (int s = mid_slice + dir; s >= 0 && s < volume.slices(); s += dir) {
      const LabelEntry* e = labels.latest(volume.id(), s);
      if (!e) break;
      std::vector<const InstanceMask*> cur;
      for (const auto& m : e->instances)
        if (m.foreground() > 0) cur.push_back(&m);
      // Candidate links ordered by overlap, centroid distance, then ids.
      std::vector<std::tuple<long, double, int, std::string, size_t, size_t>> cand;
      for (size_t i = 0; i < cur.size(); ++i) {
        const Point2 c = *mask_centroid(cur[i]->mask);
        for (size_t p = 0; p < prev.size(); ++p) {
          const long o = overlap(cur[i]->mask, prev[p].mask);
          if (o == 0) continue;
          const double d = std::hypot(c.x - prev[p].centroid.x, c.y - prev[p].centroid.y);
          cand.emplace_back(-o, d, prev[p].label, cur[i]->vertebra_id, i, p);
        }
      }
      std::sort(cand.begin(), cand.end(), [](const auto& a, const auto& b) {
        return std::tie(std::get<0>(a), std::get<1>(a), std::get<2>(a), std::get<3>(a)) <
               std::tie(std::get<0>(b), std::get<1>(b), std::get<2>(b), std::get<3>(b));
      });
      std::vector<int> assigned(cur.size(), 0);
      std::set<size_t> used;
      for (const auto& c : cand) {
        const size_t i = std::get<4>(c), p = std::get<5>(c);
        if (assigned[i] || used.count(p)) continue;
        assigned[i] = prev[p].label;
        used.insert(p);
      }
      // Unlinked instances get fresh ids in top-to-bottom order.
      std::vector<size_t> unlinked;
      for (size_t i = 0; i < cur.size(); ++i)
        if (!assigned[i]) unlinked.push_back(i);
      std::sort(unlinked.begin(), unlinked.end(), [&](size_t a, size_t b) {
        const double ya = mask_centroid(cur[a]->mask)->y, yb = mask_centroid(cur[b]->mask)->y;
        if (ya != yb) return ya < yb;
        return cur[a]->vertebra_id < cur[b]->vertebra_id;
      });
      for (size_t i : unlinked) assigned[i] = next_label++;

      std::vector<Placed> placed;
      for (size_t i = 0; i < cur.size(); ++i) placed.push_back({assigned[i], cur[i]->mask, *mask_centroid(cur[i]->mask)});
      std::sort(placed.begin(), placed.end(), [](const Placed& a, const Placed& b) { return a.label < b.label; });
      place(s, placed);
      prev = std::move(placed);
    }
  }
  return out;
}

RunResult run_pipeline(const std::vector<Volume>& volumes, const std::vector<LandmarkAnnotation>& annotations,
                       const PipelineConfig& cfg) {
  validate(cfg);
  const VolumeSet vs = index_volumes(volumes);
  RunResult run;
  run.state.manifest.config = to_json(cfg);
  run.state.labels = build_coarse_labels(annotations, vs);
  std::vector<SliceRef> mids;
  for (const auto& a : annotations) mids.push_back({a.volume_id, a.slice_index});
  std::sort(mids.begin(), mids.end());
  self_train(vs, mids, cfg, run.state);
  slice_propagate(vs, annotations, cfg, run.state);
  for (const auto& a : annotations) {
    run.segmentations.emplace(a.volume_id,
                              assemble_volume(run.state.labels, vs.at(a.volume_id), a.slice_index,
                                              &run.state.manifest.warnings));
  }
  return run;
}

std::map<SliceRef, std::vector<InstanceMask>> latest_labels(const LabelStore& store,
                                                            const std::vector<SliceRef>& slices) {
  std::map<SliceRef, std::vector<InstanceMask>> out;
  for (const auto& s : slices) {
    const LabelEntry* e = store.latest(s.volume_id, s.slice_index);
    out[s] = e ? e->instances : std::vector<InstanceMask>{};
  }
  return out;
}

MetricsReport evaluate_instances(const std::map<SliceRef, std::vector<InstanceMask>>& pred, const LabelStore& gt) {
  MetricsReport rep;
  for (const auto& [ref, masks] : pred) {
    const LabelEntry* g = gt.latest(ref.volume_id, ref.slice_index);
    if (!g) continue;
    for (const auto& gm : g->instances) {
      if (gm.foreground() == 0) continue;
      const InstanceMask* best = nullptr;
      long best_n = 0;
      for (const auto& pm : masks) {
        const long o = overlap(pm.mask, gm.mask);
        if (o > best_n) best = &pm, best_n = o;
      }
      const Mask2 empty(gm.mask.height, gm.mask.width, 0);
      const auto c = confusion_counts(best ? best->mask : empty, gm.mask);
      rep.rows.push_back({ref.volume_id, gm.vertebra_id, "DIC", dic(c)});
      rep.rows.push_back({ref.volume_id, gm.vertebra_id, "ACC", acc(c)});
      rep.rows.push_back({ref.volume_id, gm.vertebra_id, "SEN", sen(c)});
      rep.rows.push_back({ref.volume_id, gm.vertebra_id, "SPE", spe(c)});
    }
  }
  summarize(rep);
  return rep;
}

RunEvaluation evaluate_run(const RunResult& run, const std::vector<LandmarkAnnotation>& annotations,
                           const LabelStore& gt, const PipelineConfig& cfg, const ReportOptions& opts) {
  RunEvaluation ev;
  for (int o = -cfg.propagation_radius; o <= cfg.propagation_radius; ++o) {
    std::vector<SliceRef> slices;
    for (const auto& a : annotations) {
      const int s = a.slice_index + o;
      if (gt.latest(a.volume_id, s)) slices.push_back({a.volume_id, s});
    }
    ev.per_offset[o] = evaluate_instances(latest_labels(run.state.labels, slices), gt);
  }
  for (const auto& a : annotations) {
    auto it = run.segmentations.find(a.volume_id);
    if (it == run.segmentations.end()) continue;
    const Volume& pred = it->second;
    // Ground-truth ids in order of first appearance on the annotated slice.
    std::vector<std::string> order;
    if (const LabelEntry* e = gt.latest(a.volume_id, a.slice_index))
      for (const auto& m : e->instances) order.push_back(m.vertebra_id);
    for (const auto& [key, entry] : gt.entries()) {
      if (key.volume_id != a.volume_id) continue;
      for (const auto& m : entry.instances)
        if (std::find(order.begin(), order.end(), m.vertebra_id) == order.end()) order.push_back(m.vertebra_id);
    }
    Volume g = labelmap_from_store(gt, pred, order);
    for (int s = 0; s < g.slices(); ++s) {
      if (std::abs(s - a.slice_index) <= cfg.propagation_radius) continue;
      for (int y = 0; y < g.height(); ++y)
        for (int x = 0; x < g.width(); ++x) g.at(s, y, x) = 0;
    }
    auto rep = per_vertebra_report(pred, g, opts);
    ev.volumetric.rows.insert(ev.volumetric.rows.end(), rep.rows.begin(), rep.rows.end());
  }
  summarize(ev.volumetric);
  return ev;
}

nlohmann::json to_json(const RunEvaluation& e) {
  nlohmann::json per = nlohmann::json::object();
  for (const auto& [o, rep] : e.per_offset) per[std::to_string(o)] = report_summary_json(rep)["summary"];
  return {{"per_offset", per}, {"volumetric", report_summary_json(e.volumetric)["summary"]}};
}

}  // namespace wiss
