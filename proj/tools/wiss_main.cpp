#include <CLI11.hpp>

#include "wiss/cli.hpp"

int main(int argc, char** argv) {
  namespace c = wiss::cli;
  CLI::App app{"Weakly supervised vertebral body segmentation from corner landmarks"};
  app.require_subcommand(1);

  c::PhantomArgs phantom;
  auto* ph = app.add_subcommand("phantom", "Synthetic phantom datasets");
  ph->require_subcommand(1);
  auto* gen = ph->add_subcommand("gen", "Generate phantoms from a spec file");
  gen->add_option("--spec", phantom.spec, "Spec JSON (suite or phantoms list)")->required()->check(CLI::ExistingFile);
  gen->add_option("--out", phantom.out, "Output directory");

  c::RunArgs run;
  auto* rn = app.add_subcommand("run", "Run the pipeline from an experiment config");
  rn->add_option("--config", run.config, "Experiment config JSON")->required()->check(CLI::ExistingFile);
  rn->add_option("--out", run.out, "Run directory");
  rn->add_option("--seed", run.seed, "Override the pipeline seed");

  c::EvalArgs ev;
  auto* el = app.add_subcommand("eval", "Score a run, or a predicted labelmap against ground truth");
  el->add_option("--run", ev.run, "Run directory")->check(CLI::ExistingDirectory);
  el->add_option("--pred", ev.pred, "Predicted labelmap header")->check(CLI::ExistingFile);
  el->add_option("--gt", ev.gt, "Ground-truth labelmap header")->check(CLI::ExistingFile);
  el->add_option("--image", ev.image, "Image volume for difference maps")->check(CLI::ExistingFile);
  el->add_option("--out", ev.out, "Output directory");

  c::AblateArgs ab;
  auto* at = app.add_subcommand("ablate", "Run the ablation grid");
  at->add_option("--config", ab.config, "Experiment config JSON")->required()->check(CLI::ExistingFile);
  at->add_option("--out", ab.out, "Output directory");
  at->add_option("--seed", ab.seed, "Override the pipeline seed");

  c::ReplayArgs rp;
  auto* re = app.add_subcommand("replay", "Re-execute a command from its manifest");
  re->add_option("--replay,manifest", rp.manifest, "manifest.json of a previous command")
      ->required()
      ->check(CLI::ExistingFile);
  re->add_option("--out", rp.out, "Output directory");

  CLI11_PARSE(app, argc, argv);

  if (*gen) return c::cmd_phantom(phantom);
  if (*rn) return c::cmd_run(run);
  if (*el) return c::cmd_eval(ev);
  if (*at) return c::cmd_ablate(ab);
  if (*re) return c::cmd_replay(rp);
  return 1;
}
