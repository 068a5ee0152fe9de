// Acceptance checks. One PASS/FAIL line per criterion; exit status 0 only
// when every selected criterion passes.

#include <CLI11.hpp>
#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <iterator>
#include <random>
#include <set>
#include <string>
#include <unistd.h>

#include "oracles.hpp"
#include "scenarios.hpp"
#include "wiss/backbone.hpp"
#include "wiss/cli.hpp"
#include "wiss/experiment.hpp"
#include "wiss/metrics.hpp"
#include "wiss/refinement.hpp"

using namespace wiss;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, double a, double b = 0, double c = 0, double d = 0) {
  char buf[256];
  std::snprintf(buf, sizeof buf, f, a, b, c, d);
  return buf;
}

Image2 random_image(std::mt19937_64& rng, int h, int w, double lo = 0.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  Image2 m(h, w);
  for (auto& v : m.data) v = u(rng);
  return m;
}

Mask2 threshold(const Image2& p) {
  Mask2 m(p.height, p.width, 0);
  for (size_t i = 0; i < p.size(); ++i) m.data[i] = p.data[i] >= 0.5;
  return m;
}

Outcome metric_oracles() {
  std::mt19937_64 rng(101);
  std::uniform_int_distribution<int> dim(1, 8);
  std::uniform_real_distribution<double> sp(0.5, 2.0), dens(0.05, 0.7);
  int bad = 0, done = 0;
  double worst = 0.0;
  while (done < 100) {
    const std::array<int, 3> d{dim(rng), dim(rng), dim(rng)};
    Mask3 p(d), g(d);
    std::bernoulli_distribution bp(dens(rng)), bg(dens(rng));
    for (auto& v : p.data) v = bp(rng);
    for (auto& v : g.data) v = bg(rng);
    const bool any_p = std::count(p.data.begin(), p.data.end(), 1) > 0;
    const bool any_g = std::count(g.data.begin(), g.data.end(), 1) > 0;
    if (!any_p || !any_g) continue;
    ++done;
    const auto c = confusion_counts(p.data, g.data);
    const auto o = oracle::confusion(p.data, g.data);
    if (c.tp != o.tp || c.fp != o.fp || c.fn != o.fn || c.tn != o.tn) ++bad;
    std::vector<double> diffs{std::abs(dic(c) - oracle::dic(o)), std::abs(acc(c) - oracle::acc(o))};
    if (o.tp + o.fn > 0) diffs.push_back(std::abs(*sen(c) - oracle::sen(o)));
    if (o.tn + o.fp > 0) diffs.push_back(std::abs(*spe(c) - oracle::spe(o)));
    const std::array<double, 3> spacing{sp(rng), sp(rng), sp(rng)};
    const auto s = surface_distances(p, g, spacing);
    const auto so = oracle::surface_distances(p, g, spacing);
    diffs.push_back(std::abs(s.asd - so.asd));
    diffs.push_back(std::abs(s.hsd - so.hsd));
    for (double x : diffs) worst = std::max(worst, x);
  }
  return {bad == 0 && worst <= 1e-9,
          fmt("100 instances, %.0f count mismatches, max |diff| %.2e (tol 1e-9)", bad, worst)};
}

Outcome edge_loss_check() {
  std::mt19937_64 rng(102);
  double worst_val = 0.0, worst_grad = 0.0;
  for (int i = 0; i < 50; ++i) {
    Image2 m = random_image(rng, 8, 8);
    Image2 g = random_image(rng, 8, 8);
    for (auto& v : g.data) v = v > 0.5 ? 1.0 : 0.0;
    worst_val = std::max(worst_val, std::abs(edge_loss(m, g) - oracle::edge_loss(m, g)));
    const auto r = edge_loss_with_grad(m, g);
    const double h = 1e-4;
    for (size_t k = 0; k < m.size(); ++k) {
      const double keep = m.data[k];
      m.data[k] = keep + h;
      const double up = edge_loss(m, g);
      m.data[k] = keep - h;
      const double down = edge_loss(m, g);
      m.data[k] = keep;
      const double fd = (up - down) / (2 * h);
      const double scale = std::max({std::abs(fd), std::abs(r.grad.data[k]), 1e-6});
      worst_grad = std::max(worst_grad, std::abs(fd - r.grad.data[k]) / scale);
    }
  }
  return {worst_val <= 1e-9 && worst_grad < 1e-3,
          fmt("value |diff| %.2e (tol 1e-9), gradient max rel err %.2e (tol 1e-3)", worst_val, worst_grad)};
}

Outcome crf_identities() {
  std::mt19937_64 rng(103);
  int bad_degenerate = 0, bad_naive = 0;
  for (int i = 0; i < 20; ++i) {
    const Image2 img = random_image(rng, 12, 14, 0, 500);
    const Image2 p = random_image(rng, 12, 14);
    const Mask2 expect = threshold(p);
    CrfConfig none;
    none.appearance_weight = none.spatial_weight = 0.0;
    CrfConfig zero;
    zero.n_iterations = 0;
    bad_degenerate += crf_refine(img, p, none) != expect;
    bad_degenerate += crf_refine(img, p, zero) != expect;
  }
  for (int i = 0; i < 6; ++i) {
    const Image2 img = random_image(rng, 24, 24, 0, 200);
    const Image2 p = random_image(rng, 24, 24);
    CrfConfig c;
    c.appearance_weight = 1.0 + 0.5 * i;
    bad_naive += crf_refine(img, p, c) != oracle::crf(img, p, c);
    Mask2 active(24, 24, 1);
    std::bernoulli_distribution off(0.2);
    for (auto& a : active.data) a = !off(rng);
    bad_naive += crf_refine(img, p, active, c) != oracle::crf(img, p, c, &active);
  }
  return {bad_degenerate == 0 && bad_naive == 0,
          fmt("degenerate mismatches %.0f/40, naive 24x24 mismatches %.0f/12", bad_degenerate, bad_naive)};
}

Outcome two_region() {
  bool ok = true;
  int worst_offset = 0;
  std::string errs;
  for (int n : {16, 24})
    for (double outside : {0.0, 0.3}) {
      const auto t = scenario::two_region(n, 2, 0.7, outside);
      const Mask2 in = threshold(t.prob);
      const Mask2 out = crf_refine(t.image, t.prob, CrfConfig{});
      long err_in = 0, err_out = 0;
      for (int y = 0; y < n; ++y) {
        int last = -1;
        for (int x = 0; x < n; ++x) {
          const bool truth = x < t.edge;
          err_in += (in.at(y, x) != 0) != truth;
          err_out += (out.at(y, x) != 0) != truth;
          if (out.at(y, x)) last = x;
        }
        worst_offset = std::max(worst_offset, std::abs(last + 1 - t.edge));
      }
      ok = ok && err_out < err_in;
      errs += " " + std::to_string(err_in) + "->" + std::to_string(err_out);
    }
  ok = ok && worst_offset <= 1;
  return {ok, "max boundary offset " + std::to_string(worst_offset) + " px (tol 1), pixel errors" + errs};
}

Outcome outlier_rejection() {
  int exact = 0;
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    const auto c = scenario::lateral_outlier(seed);
    const auto s = select_confident(c.preds, c.height, c.width, SelectionConfig{});
    exact += s.rejected.size() == 1 && s.rejected[0].bbox == c.preds[c.outlier].bbox && s.kept.size() == 5;
  }
  return {exact == 50, std::to_string(exact) + "/50 placements reject exactly the outlier"};
}

double mean_dic(const MetricsReport& r) {
  const auto s = r.find("DIC");
  return s ? s->mean : 0.0;
}

struct SuiteRun {
  SelfTrainingScores st;
  RunEvaluation ev;
  int radius = 0;
};

SuiteRun run_suite(const Dataset& data, const std::optional<NoiseConfig>& noise, const PipelineConfig& cfg) {
  const auto anns = apply_noise(data, noise);
  const RunResult run = run_pipeline(data.volumes, anns, cfg);
  return {score_self_training(run, anns, *data.ground_truth), evaluate_run(run, anns, *data.ground_truth, cfg),
          cfg.propagation_radius};
}

std::vector<std::string> files_under(const fs::path& root) {
  std::vector<std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(root))
    if (e.is_regular_file()) out.push_back(fs::relative(e.path(), root).string());
  std::sort(out.begin(), out.end());
  return out;
}

std::string bytes(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

Outcome replay_check(int count) {
  const fs::path dir = fs::temp_directory_path() / ("wiss_acceptance_" + std::to_string(::getpid()));
  fs::remove_all(dir);
  const nlohmann::json config = {{"dataset", {{"suite", {{"count", count}, {"base_seed", 0}}}}}};
  cli::run_experiment(config, dir, dir / "run", std::nullopt);
  cli::replay(dir / "run" / "manifest.json", dir / "replay");
  const auto a = files_under(dir / "run"), b = files_under(dir / "replay");
  int differ = 0;
  for (const auto& f : a) differ += bytes(dir / "run" / f) != bytes(dir / "replay" / f);
  const bool same_set = a == b;
  fs::remove_all(dir);
  return {same_set && differ == 0 && !a.empty(),
          std::to_string(a.size()) + " files, " + std::to_string(differ) + " differ" +
              (same_set ? "" : ", file sets differ") + " (" + std::to_string(count) + "-phantom run)"};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance criteria"};
  std::vector<int> only;
  int suite_count = 20;
  std::uint64_t suite_seed = 0;
  int replay_count = 2;
  app.add_option("--only", only, "Criteria to run (default all)");
  app.add_option("--suite-count", suite_count, "Phantoms in the suite for criteria 5-7");
  app.add_option("--suite-seed", suite_seed, "Base seed of the suite");
  app.add_option("--replay-count", replay_count, "Phantoms in the replayed run");
  CLI11_PARSE(app, argc, argv);
  auto wanted = [&](int k) { return only.empty() || std::find(only.begin(), only.end(), k) != only.end(); };

  int failed = 0;
  auto report = [&](int k, const char* name, const std::function<Outcome()>& fn) {
    if (!wanted(k)) return;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = fn();
    } catch (const std::exception& e) {
      o = {false, std::string("threw: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    failed += !o.pass;
    std::printf("%s %d %s: %s [%.1fs]\n", o.pass ? "PASS" : "FAIL", k, name, o.detail.c_str(), secs);
    std::fflush(stdout);
  };

  report(1, "metric oracles", metric_oracles);
  report(2, "edge loss and gradient", edge_loss_check);
  report(3, "CRF degenerate identities and naive reference", crf_identities);
  report(4, "two-region boundary recovery", two_region);

  std::optional<SuiteRun> clean, noisy;
  std::optional<Dataset> data;
  const PipelineConfig cfg;
  auto suite = [&]() -> const Dataset& {
    if (!data) data = load_dataset(DatasetConfig{suite_count, suite_seed, {}, {}});
    return *data;
  };
  auto clean_run = [&]() -> const SuiteRun& {
    if (!clean) clean = run_suite(suite(), std::nullopt, cfg);
    return *clean;
  };

  report(5, "self-training trend", [&] {
    const auto& r = clean_run();
    const double m = mean_dic(r.st.model), f = mean_dic(r.st.self_trained);
    return Outcome{f - m >= 1.0, fmt("coarse-label model %.2f, refined %.2f, self-trained %.2f, gain %+.2f (need >= 1.0)",
                                     m, mean_dic(r.st.refined), f, f - m)};
  });
  report(6, "noise robustness trend", [&] {
    noisy = run_suite(suite(), NoiseConfig{1.0, 0}, cfg);
    const double m = mean_dic(noisy->st.model), f = mean_dic(noisy->st.self_trained);
    const double c = mean_dic(clean_run().st.self_trained);
    return Outcome{f - m >= 1.0 && c - f <= 5.0,
                   fmt("jittered model %.2f, self-trained %.2f, gain %+.2f (need >= 1.0); ", m, f, f - m) +
                       fmt("clean %.2f, gap %.2f (need <= 5)", c, c - f)};
  });
  report(7, "propagation trend", [&] {
    const auto& r = clean_run();
    const double mid = mean_dic(r.ev.per_offset.at(0)), vol = mean_dic(r.ev.volumetric);
    std::string curve;
    bool monotone = true;
    double prev = 1e9;
    for (int k = 0; k <= r.radius; ++k) {
      double sum = 0.0;
      int n = 0;
      for (int o : {-k, k}) {
        if (!r.ev.per_offset.count(o)) continue;
        sum += mean_dic(r.ev.per_offset.at(o));
        ++n;
        if (k == 0) break;
      }
      const double avg = n ? sum / n : 0.0;
      monotone = monotone && n > 0 && avg <= prev;
      prev = avg;
      curve += fmt(" |%.0f|=%.2f", k, avg);
    }
    return Outcome{vol < mid && mid - vol <= 15.0 && monotone,
                   fmt("mid %.2f, volumetric %.2f (gap %.2f, need 0 < gap <= 15); per-offset", mid, vol, mid - vol) + curve};
  });
  report(8, "replay determinism", [&] { return replay_check(replay_count); });
  report(9, "confident-selection geometry", outlier_rejection);

  return failed == 0 ? 0 : 1;
}
