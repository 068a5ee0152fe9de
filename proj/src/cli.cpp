#include "wiss/cli.hpp"

#include <cstdio>
#include <cstdlib>
#include <iostream>

#include "wiss/config_json.hpp"
#include "wiss/error.hpp"
#include "wiss/experiment.hpp"

namespace fs = std::filesystem;

namespace wiss::cli {

namespace {

nlohmann::json parse_file(const fs::path& path) {
  try {
    return nlohmann::json::parse(read_text_file(path));
  } catch (const nlohmann::json::parse_error& e) {
    throw Error(ErrorCode::kMalformed, path.string() + ": " + e.what());
  }
}

void write_json(const nlohmann::json& j, const fs::path& path) { write_text_file(path, j.dump(2) + "\n"); }

int report_failure(const std::string& command, const std::exception& e, int status) {
  nlohmann::json err = {{"command", command}, {"message", e.what()}};
  if (const auto* we = dynamic_cast<const Error*>(&e)) err["error"] = std::string(to_string(we->code()));
  std::cerr << err.dump(2) << "\n";
  return status;
}

template <typename Fn>
int guarded(const std::string& command, Fn&& fn) {
  try {
    fn();
    return 0;
  } catch (const Error& e) {
    return report_failure(command, e, e.code() == ErrorCode::kInvalidConfig ? 2 : 1);
  } catch (const std::exception& e) {
    return report_failure(command, e, 1);
  }
}

Mask2 slice_mask(const Volume& v, int s) {
  Mask2 m(v.height(), v.width(), 0);
  for (int y = 0; y < v.height(); ++y)
    for (int x = 0; x < v.width(); ++x) m.at(y, x) = v.at(s, y, x) != 0;
  return m;
}

void write_difference_maps(const Volume& pred, const Volume& gt, const Volume* image, const std::vector<int>& slices,
                           const fs::path& dir) {
  for (int s : slices) {
    const Image2 img = image ? image->slice_image(s) : Image2(pred.height(), pred.width(), 0.0);
    const fs::path file = dir / (pred.id() + "_s" + std::to_string(s) + ".png");
    write_png(render_difference_map(slice_mask(pred, s), slice_mask(gt, s), img), file);
  }
}

void write_evaluation(const RunEvaluation& ev, const fs::path& dir) {
  for (const auto& [o, rep] : ev.per_offset) write_report_csv(rep, dir / ("offset_" + std::to_string(o) + ".csv"));
  write_report_csv(ev.volumetric, dir / "volumetric.csv");
  write_json(to_json(ev), dir / "summary.json");
}

// Ground-truth labelmap restricted to the propagated slab, in the order used
// by evaluate_run.
Volume gt_labelmap(const LabelStore& gt, const Volume& like, int mid, int radius) {
  std::vector<std::string> order;
  if (const LabelEntry* e = gt.latest(like.id(), mid))
    for (const auto& m : e->instances) order.push_back(m.vertebra_id);
  for (const auto& [key, entry] : gt.entries()) {
    if (key.volume_id != like.id()) continue;
    for (const auto& m : entry.instances)
      if (std::find(order.begin(), order.end(), m.vertebra_id) == order.end()) order.push_back(m.vertebra_id);
  }
  Volume g = labelmap_from_store(gt, like, order);
  for (int s = 0; s < g.slices(); ++s) {
    if (std::abs(s - mid) <= radius) continue;
    for (int y = 0; y < g.height(); ++y)
      for (int x = 0; x < g.width(); ++x) g.at(s, y, x) = 0;
  }
  return g;
}

nlohmann::json summary_of(const MetricsReport& r) { return report_summary_json(r)["summary"]; }

}  // namespace

fs::path resolve_output(const std::optional<fs::path>& flag, const std::string& configured, const std::string& name) {
  if (flag) return *flag;
  const char* root = std::getenv(kOutputRootEnv);
  const fs::path base = root && *root ? fs::path(root) : fs::path("runs");
  if (!configured.empty()) {
    const fs::path p(configured);
    return p.is_absolute() || !(root && *root) ? p : base / p;
  }
  return base / name;
}

void phantom_gen(const nlohmann::json& spec, const fs::path& out) {
  std::vector<std::string> errors;
  const DatasetConfig d = dataset_config_from_json(spec, "spec", errors, {});
  if (!d.data_dir.empty()) errors.push_back("spec: data_dir is not a phantom source");
  throw_if_errors(errors, "phantom spec");
  write_dataset(load_dataset(d), out);
  write_json({{"command", "phantom gen"}, {"spec", to_json(d)}}, out / "manifest.json");
}

void run_experiment(const nlohmann::json& config, const fs::path& base_dir, const fs::path& out,
                    std::optional<std::uint64_t> seed) {
  ExperimentConfig cfg = experiment_config_from_json(config, base_dir);
  if (seed) cfg.pipeline.seed = *seed;
  const Dataset data = load_dataset(cfg.dataset);
  const auto anns = apply_noise(data, cfg.noise);
  RunResult run = run_pipeline(data.volumes, anns, cfg.pipeline);

  for (const auto& [name, model] : run.state.checkpoints) write_checkpoint(model, out / "checkpoints" / (name + ".bin"));
  write_label_store(run.state.labels, out / "labels");
  for (const auto& [id, seg] : run.segmentations) write_volume(seg, out / "segmentations" / (id + ".json"));
  for (const auto& a : anns) write_annotation(a, out / "annotations" / (a.volume_id + ".json"));

  if (data.ground_truth) {
    const ReportOptions opts{cfg.metrics.hausdorff_percentile, true};
    const RunEvaluation ev = evaluate_run(run, anns, *data.ground_truth, cfg.pipeline, opts);
    write_evaluation(ev, out / "reports");
    const auto st = score_self_training(run, anns, *data.ground_truth);
    run.state.manifest.metrics = to_json(ev);
    run.state.manifest.metrics["self_training"] = {{"model", summary_of(st.model)},
                                                   {"refined", summary_of(st.refined)},
                                                   {"self_trained", summary_of(st.self_trained)}};
  }
  write_json({{"command", "run"}, {"experiment", to_json(cfg)}, {"run", to_json(run.state.manifest)}},
             out / "manifest.json");
}

void eval_run(const fs::path& run_dir, const fs::path& out) {
  const nlohmann::json manifest = parse_file(run_dir / "manifest.json");
  if (manifest.value("command", "") != "run") throw Error(ErrorCode::kMalformed, "not a run manifest");
  const ExperimentConfig cfg = experiment_config_from_json(manifest.at("experiment"), run_dir);
  const Dataset data = load_dataset(cfg.dataset);
  if (!data.ground_truth) throw Error(ErrorCode::kMissingFile, "dataset has no ground truth");

  RunResult run;
  run.state.labels = read_label_store(run_dir / "labels");
  std::vector<LandmarkAnnotation> anns;
  for (const auto& a : data.annotations) {
    anns.push_back(read_annotation(run_dir / "annotations" / (a.volume_id + ".json")));
    run.segmentations.emplace(a.volume_id, read_volume(run_dir / "segmentations" / (a.volume_id + ".json")));
  }
  const ReportOptions opts{cfg.metrics.hausdorff_percentile, true};
  const RunEvaluation ev = evaluate_run(run, anns, *data.ground_truth, cfg.pipeline, opts);
  write_evaluation(ev, out);

  if (cfg.metrics.difference_maps) {
    for (const auto& a : anns) {
      const Volume& pred = run.segmentations.at(a.volume_id);
      const auto v = std::find_if(data.volumes.begin(), data.volumes.end(),
                                  [&](const Volume& x) { return x.id() == a.volume_id; });
      const int r = cfg.pipeline.propagation_radius;
      const Volume gt = gt_labelmap(*data.ground_truth, pred, a.slice_index, r);
      std::vector<int> slices;
      for (int s = std::max(0, a.slice_index - r); s <= std::min(pred.slices() - 1, a.slice_index + r); ++s)
        slices.push_back(s);
      write_difference_maps(pred, gt, &*v, slices, out / "difference_maps");
    }
  }
  write_json({{"command", "eval"}, {"run", fs::absolute(run_dir).string()}, {"metrics", to_json(ev)}},
             out / "manifest.json");
}

void eval_labelmaps(const fs::path& pred_path, const fs::path& gt_path, const std::optional<fs::path>& image,
                    const fs::path& out) {
  const Volume pred = read_volume(pred_path);
  const Volume gt = read_volume(gt_path);
  const MetricsReport rep = per_vertebra_report(pred, gt);
  write_report_csv(rep, out / "report.csv");
  write_json(report_summary_json(rep), out / "summary.json");
  std::optional<Volume> img;
  if (image) img = read_volume(*image);
  std::vector<int> slices;
  for (int s = 0; s < gt.slices(); ++s) {
    bool any = false;
    for (int y = 0; y < gt.height() && !any; ++y)
      for (int x = 0; x < gt.width() && !any; ++x) any = pred.at(s, y, x) != 0 || gt.at(s, y, x) != 0;
    if (any) slices.push_back(s);
  }
  write_difference_maps(pred, gt, img ? &*img : nullptr, slices, out / "difference_maps");
  nlohmann::json m = {{"command", "eval"},
                      {"pred", fs::absolute(pred_path).string()},
                      {"gt", fs::absolute(gt_path).string()},
                      {"summary", summary_of(rep)}};
  if (image) m["image"] = fs::absolute(*image).string();
  write_json(m, out / "manifest.json");
}

void ablate(const nlohmann::json& config, const fs::path& base_dir, const fs::path& out,
            std::optional<std::uint64_t> seed) {
  ExperimentConfig cfg = experiment_config_from_json(config, base_dir);
  if (seed) cfg.pipeline.seed = *seed;
  const auto rows = run_ablation(cfg);

  std::string csv = "row,metric,mean,std,n_scans\n";
  std::string md = "| row | DIC | ACC | SEN | SPE |\n|---|---|---|---|---|\n";
  nlohmann::json table = nlohmann::json::array();
  char buf[128];
  for (const auto& row : rows) {
    md += "| " + row.name;
    for (const char* metric : {"DIC", "ACC", "SEN", "SPE"}) {
      const auto s = row.report.find(metric);
      const double mean = s ? s->mean : 0.0, sd = s ? s->stddev : 0.0;
      std::snprintf(buf, sizeof buf, "%s,%s,%.6f,%.6f,%d\n", row.name.c_str(), metric, mean, sd, s ? s->count : 0);
      csv += buf;
      std::snprintf(buf, sizeof buf, " | %.2f ± %.2f", mean, sd);
      md += buf;
    }
    md += " |\n";
    table.push_back({{"row", row.name}, {"summary", summary_of(row.report)}});
  }
  write_text_file(out / "ablation.csv", csv);
  write_text_file(out / "ablation.md", md);
  write_json({{"command", "ablate"}, {"experiment", to_json(cfg)}, {"rows", table}}, out / "manifest.json");
}

void replay(const fs::path& manifest_path, const fs::path& out) {
  const nlohmann::json m = parse_file(manifest_path);
  const std::string command = m.value("command", "");
  const fs::path base = fs::absolute(manifest_path).parent_path();
  if (command == "run") {
    run_experiment(m.at("experiment"), base, out, std::nullopt);
  } else if (command == "ablate") {
    ablate(m.at("experiment"), base, out, std::nullopt);
  } else if (command == "phantom gen") {
    phantom_gen(m.at("spec"), out);
  } else if (command == "eval" && m.contains("run")) {
    eval_run(m.at("run").get<std::string>(), out);
  } else if (command == "eval") {
    std::optional<fs::path> image;
    if (m.contains("image")) image = m.at("image").get<std::string>();
    eval_labelmaps(m.at("pred").get<std::string>(), m.at("gt").get<std::string>(), image, out);
  } else {
    throw Error(ErrorCode::kMalformed, manifest_path.string() + ": unknown command '" + command + "'");
  }
}

int cmd_phantom(const PhantomArgs& args) {
  return guarded("phantom gen", [&] {
    phantom_gen(parse_file(args.spec), resolve_output(args.out, "", args.spec.stem().string()));
  });
}

int cmd_run(const RunArgs& args) {
  return guarded("run", [&] {
    const nlohmann::json j = parse_file(args.config);
    const std::string configured = j.is_object() && j.contains("output") && j["output"].is_string()
                                       ? j["output"].get<std::string>()
                                       : std::string();
    run_experiment(j, fs::absolute(args.config).parent_path(),
                   resolve_output(args.out, configured, args.config.stem().string()), args.seed);
  });
}

int cmd_eval(const EvalArgs& args) {
  return guarded("eval", [&] {
    if (args.run) {
      eval_run(*args.run, args.out ? *args.out : *args.run / "eval");
    } else if (args.pred && args.gt) {
      eval_labelmaps(*args.pred, *args.gt, args.image, resolve_output(args.out, "", "eval"));
    } else {
      throw Error(ErrorCode::kInvalidConfig, "eval needs --run, or --pred and --gt");
    }
  });
}

int cmd_ablate(const AblateArgs& args) {
  return guarded("ablate", [&] {
    const nlohmann::json j = parse_file(args.config);
    const std::string configured = j.is_object() && j.contains("output") && j["output"].is_string()
                                       ? j["output"].get<std::string>()
                                       : std::string();
    ablate(j, fs::absolute(args.config).parent_path(),
           resolve_output(args.out, configured, args.config.stem().string() + "_ablation"), args.seed);
  });
}

int cmd_replay(const ReplayArgs& args) {
  return guarded("replay", [&] {
    replay(args.manifest, resolve_output(args.out, "", args.manifest.parent_path().filename().string() + "_replay"));
  });
}

}  // namespace wiss::cli
