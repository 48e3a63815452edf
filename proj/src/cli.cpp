#include "raregen/cli.hpp"

#include <iostream>

#include <CLI11.hpp>

#include "raregen/config.hpp"
#include "raregen/errors.hpp"
#include "raregen/experiments.hpp"
#include "raregen/logging.hpp"

namespace raregen::harness {

namespace {

struct CommonArgs {
  std::string config_path;
  std::string out_dir;
  std::uint64_t seed = 0;
  std::size_t workers = 1;
  std::size_t refs = 0;
  std::string variant = "full";
};

void add_common(CLI::App* cmd, CommonArgs& args, bool seed_required) {
  cmd->add_option("--config", args.config_path, "Experiment config file (JSON or TOML)");
  cmd->add_option("--out", args.out_dir, "Run directory")->required();
  auto* seed_opt = cmd->add_option("--seed", args.seed, "Master seed (u64)");
  if (seed_required) seed_opt->required();
}

nlohmann::json load_config(const CommonArgs& args) {
  if (args.config_path.empty()) return nlohmann::json::object();
  return load_structured(args.config_path);
}

}  // namespace

int cli_dispatch(const std::vector<std::string>& args) {
  CLI::App app{"Workbench for rarity-targeted latent optimization over a synthetic generator"};
  app.require_subcommand(1);

  CommonArgs make_world_args, train_args, manifold_args, optimize_args, eval_args, ablate_args,
      correlate_args, heatmap_args;

  CLI::App* make_world = app.add_subcommand("make-world", "Resolve and write the world file");
  add_common(make_world, make_world_args, /*seed_required=*/false);

  CLI::App* train = app.add_subcommand("train-flow", "Train the density estimator");
  add_common(train, train_args, /*seed_required=*/true);

  CLI::App* manifold =
      app.add_subcommand("build-manifold", "Sample real/generated sets and write them");
  add_common(manifold, manifold_args, /*seed_required=*/true);

  CLI::App* optimize = app.add_subcommand("optimize", "Run the multi-start latent optimization");
  add_common(optimize, optimize_args, /*seed_required=*/true);
  optimize->add_option("--workers", optimize_args.workers, "Parallel reference workers");
  optimize->add_option("--refs", optimize_args.refs, "Number of references");
  optimize->add_option("--variant", optimize_args.variant, "Objective variant")
      ->check(CLI::IsMember({"rare", "rare+sim", "full"}));

  CLI::App* eval = app.add_subcommand("eval", "Compute the metrics report for a finished run");
  add_common(eval, eval_args, /*seed_required=*/true);

  CLI::App* ablate = app.add_subcommand("ablate", "Run the three objective variants");
  add_common(ablate, ablate_args, /*seed_required=*/true);
  ablate->add_option("--workers", ablate_args.workers, "Parallel reference workers");
  ablate->add_option("--refs", ablate_args.refs, "Number of references");

  CLI::App* correlate =
      app.add_subcommand("correlate", "Neighbor-distance vs likelihood correlation");
  add_common(correlate, correlate_args, /*seed_required=*/true);

  CLI::App* heatmap = app.add_subcommand("heatmap", "Likelihood slice over a feature-space plane");
  add_common(heatmap, heatmap_args, /*seed_required=*/false);

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    if (e.get_name() == "CallForHelp" || e.get_name() == "CallForAllHelp") {
      std::cout << app.help();
      return 0;
    }
    std::cerr << e.what() << "\n\n" << app.help();
    return 2;
  }

  try {
    if (make_world->parsed()) {
      stage_make_world(load_config(make_world_args), make_world_args.out_dir);
      std::cout << "world written to " << make_world_args.out_dir << "/world.json\n";
    } else if (train->parsed()) {
      stage_train_flow(load_config(train_args), train_args.seed, train_args.out_dir);
      std::cout << "flow checkpoint written to " << train_args.out_dir << "/flow.gflw\n";
    } else if (manifold->parsed()) {
      stage_build_manifold(load_config(manifold_args), manifold_args.seed,
                           manifold_args.out_dir);
      std::cout << "feature sets written to " << manifold_args.out_dir << "\n";
    } else if (optimize->parsed()) {
      OptimizeOverrides overrides;
      if (optimize_args.refs > 0) overrides.refs = optimize_args.refs;
      overrides.workers = optimize_args.workers;
      overrides.variant = optimize_args.variant;
      stage_optimize(load_config(optimize_args), optimize_args.seed, optimize_args.out_dir,
                     overrides);
      std::cout << "results written to " << optimize_args.out_dir << "/results.jsonl\n";
    } else if (eval->parsed()) {
      stage_eval(load_config(eval_args), eval_args.seed, eval_args.out_dir);
      std::cout << "metrics written to " << eval_args.out_dir << "/metrics.json\n";
    } else if (ablate->parsed()) {
      OptimizeOverrides overrides;
      if (ablate_args.refs > 0) overrides.refs = ablate_args.refs;
      overrides.workers = ablate_args.workers;
      stage_ablate(load_config(ablate_args), ablate_args.seed, ablate_args.out_dir, overrides);
      std::cout << "ablation table written to " << ablate_args.out_dir << "/ablation.json\n";
    } else if (correlate->parsed()) {
      stage_correlate(load_config(correlate_args), correlate_args.seed, correlate_args.out_dir);
      std::cout << "correlation written to " << correlate_args.out_dir << "/correlation.json\n";
    } else if (heatmap->parsed()) {
      stage_heatmap(load_config(heatmap_args), heatmap_args.out_dir);
      std::cout << "heatmap written to " << heatmap_args.out_dir << "/heatmap.csv\n";
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}

}  // namespace raregen::harness
