#include <cstdio>
#include <cstdlib>

#include "CLI11.hpp"
#include "zssrt/cli.hpp"
#include "zssrt/errors.hpp"

namespace zssrt::cli {

namespace {

void add_common(CLI::App* cmd, Options& o) {
  cmd->add_option("--out", o.run_dir, "Run directory (ZSSRT_RUN_DIR overrides)");
  cmd->add_option("--dataset", o.dataset, "Dataset directory holding transforms.json");
  cmd->add_option("--config", o.config, "JSON file with configuration overrides");
  cmd->add_option("--profile", o.profile, "Defaults profile: desk, blender or llff")
      ->check(CLI::IsMember({"desk", "blender", "llff"}));
  cmd->add_option("--seed", o.seed, "Training seed");
  cmd->add_option("--scale", o.scale, "Super-resolution factor")->check(CLI::IsMember({2, 4}));
  cmd->add_flag("--force", o.force, "Rerun a stage that is already complete");
  cmd->add_flag("-q,--quiet", o.quiet, "Suppress progress output");
}

void add_field_choice(CLI::App* cmd, Options& o) {
  cmd->add_flag("--ensemble,!--no-ensemble", o.ensemble,
                "Average the fine-stage snapshots (default) or use the final fine field");
  cmd->add_option("--field", o.field, "Field to use: fine or coarse")
      ->transform(CLI::CheckedTransformer(
          std::map<std::string, FieldChoice>{{"fine", FieldChoice::kFine},
                                             {"coarse", FieldChoice::kCoarse}},
          CLI::ignore_case));
}

void add_scene(CLI::App* cmd, Options& o) {
  cmd->add_option("--scene-seed", o.scene_seed, "Procedural scene seed");
  cmd->add_option("--views", o.views, "Training views")->check(CLI::PositiveNumber);
  cmd->add_option("--test-views", o.test_views, "Held-out views")->check(CLI::NonNegativeNumber);
  cmd->add_option("--res", o.res, "Low-resolution image side")->check(CLI::PositiveNumber);
}

}  // namespace

int run(int argc, const char* const* argv) {
  CLI::App app{"Zero-shot super-resolution training of tensorial radiance fields", "zssrt"};
  app.require_subcommand(1);
  Options o;

  auto* gen = app.add_subcommand("generate", "Write the procedural synthetic scene");
  add_common(gen, o);
  add_scene(gen, o);
  auto* coarse = app.add_subcommand("train-coarse", "Fit the low-resolution field");
  add_common(coarse, o);
  auto* sdm = app.add_subcommand("train-sdm", "Learn the degradation map");
  add_common(sdm, o);
  auto* fine = app.add_subcommand("train-fine", "Super-resolution training with SDM supervision");
  add_common(fine, o);
  auto* render = app.add_subcommand("render", "Render held-out views at the target scale");
  add_common(render, o);
  add_field_choice(render, o);
  auto* evaluate = app.add_subcommand("evaluate", "PSNR and SSIM against the references");
  add_common(evaluate, o);
  add_field_choice(evaluate, o);
  auto* pipeline = app.add_subcommand("pipeline", "Run every stage in order");
  add_common(pipeline, o);
  add_scene(pipeline, o);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kExitOk : kExitUsage;
  }
  if (const char* env = std::getenv("ZSSRT_RUN_DIR"); env && *env) o.run_dir = env;

  try {
    if (gen->parsed()) return cmd_generate(o);
    if (coarse->parsed()) return cmd_train_coarse(o);
    if (sdm->parsed()) return cmd_train_sdm(o);
    if (fine->parsed()) return cmd_train_fine(o);
    if (render->parsed()) return cmd_render(o);
    if (evaluate->parsed()) return cmd_evaluate(o);
    if (pipeline->parsed()) return cmd_pipeline(o);
  } catch (const MissingDependencyError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitMissingDependency;
  } catch (const DivergenceError& e) {
    std::fprintf(stderr, "error: training diverged: %s\n", e.what());
    return kExitDivergence;
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitUsage;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitFailure;
  }
  return kExitUsage;
}

int run(const std::vector<std::string>& args) {
  std::vector<const char*> argv = {"zssrt"};
  for (const auto& a : args) argv.push_back(a.c_str());
  return run(static_cast<int>(argv.size()), argv.data());
}

}  // namespace zssrt::cli
