#include "wiss/experiment.hpp"

#include <algorithm>

#include "wiss/config_json.hpp"
#include "wiss/error.hpp"

namespace fs = std::filesystem;

namespace wiss {

DatasetConfig dataset_config_from_json(const nlohmann::json& j, const std::string& path,
                                       std::vector<std::string>& errors, const fs::path& base_dir) {
  JsonReader r(j, path, errors);
  DatasetConfig d;
  int sources = 0;
  if (r.has("suite")) {
    ++sources;
    JsonReader s(r.child("suite"), r.sub("suite"), errors);
    d.suite_count = s.require<int>("count");
    d.suite_seed = s.get<std::uint64_t>("base_seed", 0);
    s.check(d.suite_count >= 1, "count must be >= 1");
    s.finish();
  }
  if (r.has("phantoms")) {
    ++sources;
    const auto& arr = r.child("phantoms");
    if (!arr.is_array() || arr.empty()) {
      errors.push_back(r.sub("phantoms") + ": expected a non-empty array");
    } else {
      for (size_t i = 0; i < arr.size(); ++i)
        d.phantoms.push_back(phantom_spec_from_json(arr[i], r.sub("phantoms") + "[" + std::to_string(i) + "]", errors));
      std::vector<std::string> ids;
      for (const auto& p : d.phantoms) ids.push_back(p.volume_id);
      std::sort(ids.begin(), ids.end());
      r.check(std::adjacent_find(ids.begin(), ids.end()) == ids.end(), "phantom volume_ids must be unique");
    }
  }
  if (r.has("data_dir")) {
    ++sources;
    d.data_dir = r.get<std::string>("data_dir", "");
    if (d.data_dir.is_relative() && !base_dir.empty()) d.data_dir = base_dir / d.data_dir;
    r.check(fs::is_directory(d.data_dir), "data_dir '" + d.data_dir.string() + "' does not exist");
  }
  r.check(sources == 1, "exactly one of suite, phantoms, data_dir is required");
  r.finish();
  return d;
}

nlohmann::json to_json(const DatasetConfig& d) {
  if (d.suite_count > 0) return {{"suite", {{"count", d.suite_count}, {"base_seed", d.suite_seed}}}};
  if (!d.phantoms.empty()) {
    nlohmann::json arr = nlohmann::json::array();
    for (const auto& p : d.phantoms) arr.push_back(to_json(p));
    return {{"phantoms", arr}};
  }
  return {{"data_dir", d.data_dir.string()}};
}

ExperimentConfig experiment_config_from_json(const nlohmann::json& j, const fs::path& base_dir) {
  std::vector<std::string> errors;
  JsonReader r(j, "config", errors);
  ExperimentConfig c;
  if (r.has("dataset")) {
    c.dataset = dataset_config_from_json(r.child("dataset"), r.sub("dataset"), errors, base_dir);
  } else {
    errors.push_back("config.dataset: required");
  }
  if (r.has("pipeline")) c.pipeline = pipeline_config_from_json(r.child("pipeline"), r.sub("pipeline"), errors);
  if (r.has("noise")) {
    JsonReader n(r.child("noise"), r.sub("noise"), errors);
    NoiseConfig nc;
    nc.max_shift_mm = n.require<double>("max_shift_mm");
    nc.seed = n.get<std::uint64_t>("seed", 0);
    n.check(nc.max_shift_mm >= 0.0, "max_shift_mm must be >= 0");
    n.finish();
    c.noise = nc;
  }
  c.output = r.get<std::string>("output", "");
  if (r.has("metrics")) {
    JsonReader m(r.child("metrics"), r.sub("metrics"), errors);
    c.metrics.hausdorff_percentile = m.get("hausdorff_percentile", c.metrics.hausdorff_percentile);
    c.metrics.difference_maps = m.get("difference_maps", c.metrics.difference_maps);
    m.check(c.metrics.hausdorff_percentile > 0.0 && c.metrics.hausdorff_percentile <= 100.0,
            "hausdorff_percentile must be in (0, 100]");
    m.finish();
  }
  r.finish();
  throw_if_errors(errors, "experiment config");
  return c;
}

ExperimentConfig read_experiment_config(const fs::path& path) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(read_text_file(path));
  } catch (const nlohmann::json::parse_error& e) {
    throw Error(ErrorCode::kMalformed, path.string() + ": " + e.what());
  }
  return experiment_config_from_json(j, path.parent_path());
}

nlohmann::json to_json(const ExperimentConfig& cfg) {
  nlohmann::json j = {{"dataset", to_json(cfg.dataset)},
                      {"pipeline", to_json(cfg.pipeline)},
                      {"metrics",
                       {{"hausdorff_percentile", cfg.metrics.hausdorff_percentile},
                        {"difference_maps", cfg.metrics.difference_maps}}}};
  if (cfg.noise) j["noise"] = {{"max_shift_mm", cfg.noise->max_shift_mm}, {"seed", cfg.noise->seed}};
  return j;
}

Dataset load_dataset(const DatasetConfig& d) {
  Dataset out;
  auto add_phantoms = [&](const std::vector<PhantomSpec>& specs) {
    LabelStore gt;
    for (const auto& s : specs) {
      Phantom p = generate_phantom(s);
      out.volumes.push_back(std::move(p.volume));
      out.annotations.push_back(std::move(p.annotation));
      for (const auto& [k, e] : p.ground_truth.entries()) gt.put(k, e.instances, e.generation);
    }
    out.ground_truth = std::move(gt);
  };
  if (d.suite_count > 0) {
    add_phantoms(standard_phantom_suite(d.suite_count, d.suite_seed));
  } else if (!d.phantoms.empty()) {
    add_phantoms(d.phantoms);
  } else {
    const fs::path vdir = d.data_dir / "volumes";
    if (!fs::is_directory(vdir)) throw Error(ErrorCode::kMissingFile, "no volumes/ under " + d.data_dir.string());
    std::vector<fs::path> headers;
    for (const auto& e : fs::directory_iterator(vdir))
      if (e.path().extension() == ".json") headers.push_back(e.path());
    std::sort(headers.begin(), headers.end());
    for (const auto& h : headers) {
      Volume v = read_volume(h);
      const fs::path ann = d.data_dir / "annotations" / (v.id() + ".json");
      out.annotations.push_back(read_annotation(ann, SliceBounds{v.slices(), v.height(), v.width()}));
      out.volumes.push_back(std::move(v));
    }
    if (fs::is_directory(d.data_dir / "ground_truth")) out.ground_truth = read_label_store(d.data_dir / "ground_truth");
  }
  return out;
}

std::vector<LandmarkAnnotation> apply_noise(const Dataset& data, const std::optional<NoiseConfig>& noise) {
  if (!noise || noise->max_shift_mm == 0.0) return data.annotations;
  std::vector<LandmarkAnnotation> out;
  for (size_t i = 0; i < data.annotations.size(); ++i) {
    const auto& a = data.annotations[i];
    auto v = std::find_if(data.volumes.begin(), data.volumes.end(), [&](const Volume& x) { return x.id() == a.volume_id; });
    if (v == data.volumes.end()) throw Error(ErrorCode::kMissingFile, "no volume for annotation " + a.volume_id);
    out.push_back(jitter_landmarks(a, {v->spacing()[1], v->spacing()[2]}, noise->max_shift_mm,
                                   noise->seed * 1000003ULL + static_cast<std::uint64_t>(i)));
  }
  return out;
}

void write_dataset(const Dataset& data, const fs::path& dir) {
  for (const auto& v : data.volumes) write_volume(v, dir / "volumes" / (v.id() + ".json"));
  for (const auto& a : data.annotations) write_annotation(a, dir / "annotations" / (a.volume_id + ".json"));
  if (data.ground_truth) write_label_store(*data.ground_truth, dir / "ground_truth");
}

SelfTrainingScores score_self_training(const RunResult& run, const std::vector<LandmarkAnnotation>& annotations,
                                       const LabelStore& gt) {
  const auto& st = run.state;
  std::vector<SliceRef> mids;
  for (const auto& a : annotations) mids.push_back({a.volume_id, a.slice_index});
  auto at_iteration = [&](int it) {
    std::map<SliceRef, std::vector<InstanceMask>> out;
    for (const auto& s : mids) {
      const LabelKey key{s.volume_id, s.slice_index, it};
      out[s] = st.labels.contains(key) ? st.labels.at(key).instances : std::vector<InstanceMask>{};
    }
    return out;
  };
  SelfTrainingScores r;
  r.model = evaluate_instances(st.model_outputs.count(1) ? st.model_outputs.at(1)
                                                         : std::map<SliceRef, std::vector<InstanceMask>>{},
                               gt);
  r.refined = evaluate_instances(at_iteration(1), gt);
  int last = 0;
  for (const auto& rec : st.manifest.stages)
    if (rec.stage == "self_train") last = std::max(last, rec.iteration);
  r.self_trained = evaluate_instances(at_iteration(last), gt);
  return r;
}

std::vector<AblationRow> run_ablation(const ExperimentConfig& cfg) {
  const Dataset data = load_dataset(cfg.dataset);
  if (!data.ground_truth) throw Error(ErrorCode::kMissingFile, "ablation needs ground truth");
  NoiseConfig jitter = cfg.noise.value_or(NoiseConfig{1.0, 0});
  if (jitter.max_shift_mm == 0.0) jitter.max_shift_mm = 1.0;

  std::vector<AblationRow> rows;
  for (bool noisy : {false, true}) {
    const auto anns = apply_noise(data, noisy ? std::optional<NoiseConfig>(jitter) : std::nullopt);
    const std::string prefix = noisy ? "n-" : "";

    PipelineConfig plain = cfg.pipeline;
    plain.propagation_radius = 0;
    plain.self_train_iterations = 1;
    plain.backbone.edge_loss_alpha = 0.0;
    const RunResult m = run_pipeline(data.volumes, anns, plain);
    rows.push_back({prefix + "M", score_self_training(m, anns, *data.ground_truth).model});

    PipelineConfig full = cfg.pipeline;
    full.propagation_radius = 0;
    const RunResult me = run_pipeline(data.volumes, anns, full);
    const auto s = score_self_training(me, anns, *data.ground_truth);
    rows.push_back({prefix + "M-E", s.model});
    rows.push_back({prefix + "M-E-R", s.refined});
    rows.push_back({prefix + "M-E-R-ST", s.self_trained});
  }
  return rows;
}

}  // namespace wiss
