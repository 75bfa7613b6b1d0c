#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "chaingoal/ablation.hpp"
#include "chaingoal/checkpoint.hpp"
#include "chaingoal/config.hpp"
#include "chaingoal/dataset.hpp"
#include "chaingoal/maze.hpp"
#include "chaingoal/trainer.hpp"
#include "chaingoal/viz.hpp"

namespace fs = std::filesystem;
using namespace chaingoal;

namespace {

void write_file(const std::string& path, const std::string& content) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw DataError("cannot open '" + path + "' for writing");
  out << content;
  if (!out) throw DataError("write to '" + path + "' failed");
}

nlohmann::json eval_json(const EvalResult& ev) {
  return {{"pairs", ev.per_pair}, {"mean", ev.mean}};
}

// Shared --config/--set/--seed/--out plumbing for train and ablate.
struct CommonOpts {
  std::string config_arg = "desk";
  std::vector<std::string> sets;
  std::uint64_t seed = 0;
  bool seed_given = false;
  std::string out_dir;
  bool force = false;
};

void add_common(CLI::App* cmd, CommonOpts& o) {
  cmd->add_option("--config", o.config_arg,
                  "config file path, or a preset name (desk, full)");
  cmd->add_option("--set", o.sets, "override a config key, e.g. --set trainer.n_steps=1000");
  cmd->add_option("--seed", o.seed, "override trainer.seed")
      ->each([&](const std::string&) { o.seed_given = true; });
  cmd->add_option("--out", o.out_dir, "output directory (overrides config out_dir)");
  cmd->add_flag("--force", o.force, "overwrite existing outputs");
}

nlohmann::json resolve_doc(const CommonOpts& o) {
  RunConfig base;
  if (o.config_arg == "desk" || o.config_arg == "full")
    base = preset_config(o.config_arg);
  else
    base = load_config_file(o.config_arg);
  nlohmann::json doc = to_json(base);
  for (const std::string& kv : o.sets) {
    auto eq = kv.find('=');
    if (eq == std::string::npos || eq == 0)
      throw ConfigError("--set expects KEY=VALUE, got '" + kv + "'");
    apply_override(doc, kv.substr(0, eq), kv.substr(eq + 1));
  }
  if (o.seed_given) doc["trainer"]["seed"] = o.seed;
  if (!o.out_dir.empty()) doc["out_dir"] = o.out_dir;
  return doc;
}

// Resolves, trains, and writes the full artifact set for one run: the
// resolved config before the run starts, then metrics, checkpoints and the
// final eval summary.
TrainSummary run_training(const nlohmann::json& doc, bool force, bool quiet) {
  RunConfig cfg = config_from_json(doc);
  fs::create_directories(cfg.out_dir);
  std::string metrics_path = cfg.out_dir + "/metrics.csv";
  if (fs::exists(metrics_path) && !force)
    throw DataError("'" + metrics_path + "' already exists; pass --force to overwrite");

  MazeSpec maze = load_maze(cfg);
  Dataset dataset = load_dataset(cfg.data_path);
  if (!dataset.maze_name.empty() && dataset.maze_name != maze.name)
    std::fprintf(stderr, "warning: dataset was generated on maze '%s', training on '%s'\n",
                 dataset.maze_name.c_str(), maze.name.c_str());
  write_file(cfg.out_dir + "/resolved_config.json", doc.dump(2) + "\n");

  auto trainer = Trainer<float>::init(cfg.trainer, maze, std::move(dataset));
  std::ofstream metrics(metrics_path, std::ios::trunc);
  if (!metrics) throw DataError("cannot open '" + metrics_path + "' for writing");

  TrainHooks hooks;
  hooks.on_row = [&](const std::string& line) {
    metrics << line << '\n';
    metrics.flush();
  };
  hooks.on_checkpoint = [&](std::size_t step) {
    bool with_decoder = cfg.trainer.decoder_enabled && cfg.trainer.horizon > 0;
    auto params = checkpoint_params(trainer.policy(), trainer.value_fn(),
                                    with_decoder ? &trainer.decoder() : nullptr);
    save_checkpoint(cfg.out_dir + "/checkpoint_" + std::to_string(step) + ".bin", doc, params);
  };

  TrainSummary summary;
  try {
    summary = trainer.run(hooks);
  } catch (const NumericError&) {
    metrics.flush();
    throw;
  }
  for (const auto& [step, ev] : summary.evals)
    if (!quiet) std::printf("step %zu: mean success %.1f%%\n", step, ev.mean);

  write_file(cfg.out_dir + "/eval.json", eval_json(summary.final_eval).dump(2) + "\n");
  bool with_decoder = cfg.trainer.decoder_enabled && cfg.trainer.horizon > 0;
  auto params = checkpoint_params(trainer.policy(), trainer.value_fn(),
                                  with_decoder ? &trainer.decoder() : nullptr);
  save_checkpoint(cfg.out_dir + "/checkpoint_final.bin", doc, params);
  if (!quiet)
    std::printf("done: %zu steps, final mean success %.1f%%, outputs in %s\n",
                trainer.step_count(), summary.final_eval.mean, cfg.out_dir.c_str());
  return summary;
}

int cmd_gen_data(const std::string& maze_name, std::size_t n_traj, double noise,
                 std::uint64_t seed, const std::string& out, bool force) {
  if (n_traj == 0) throw ConfigError("--n-traj must be at least 1");
  if (out.empty()) throw ConfigError("--out is required");
  if (fs::exists(out) && !force)
    throw DataError("'" + out + "' already exists; pass --force to overwrite");
  MazeSpec spec = builtin_maze(maze_name);
  Dataset ds = generate_dataset(spec, n_traj, noise, seed);
  if (fs::path(out).has_parent_path()) fs::create_directories(fs::path(out).parent_path());
  save_dataset(ds, out);

  std::set<std::pair<long, long>> visited;
  for (const Trajectory& tr : ds.trajectories)
    for (std::size_t i = 0; i + 1 < tr.states.size(); i += 2)
      visited.insert({spec.cell_x(tr.states[i]), spec.cell_y(tr.states[i + 1])});
  std::size_t free_cells = 0;
  for (std::uint8_t w : spec.wall) free_cells += w ? 0 : 1;
  std::printf("wrote %s: %zu trajectories, %zu transitions, %.1f%% free-space coverage\n",
              out.c_str(), ds.trajectories.size(), ds.total_transitions(),
              100.0 * static_cast<double>(visited.size()) / static_cast<double>(free_cells));
  return 0;
}

int cmd_eval(const std::string& checkpoint_path, const std::string& maze_arg,
             std::size_t episodes, const std::string& out_dir) {
  CheckpointData data = load_checkpoint(checkpoint_path);
  RunConfig cfg = config_from_json(data.config);
  MazeSpec maze;
  if (!maze_arg.empty()) {
    maze = builtin_maze(maze_arg);
  } else {
    maze = load_maze(cfg);
  }
  auto restored = restore_models<float>(data, cfg.trainer);
  EvalResult ev = evaluate(restored.models.policy, restored.models.value_fn, maze, episodes);
  for (std::size_t i = 0; i < ev.per_pair.size(); ++i)
    std::printf("pair %zu: %.1f%%\n", i, ev.per_pair[i]);
  std::printf("mean: %.1f%%\n", ev.mean);
  if (!out_dir.empty()) {
    fs::create_directories(out_dir);
    write_file(out_dir + "/eval.json", eval_json(ev).dump(2) + "\n");
  }
  return 0;
}

int cmd_ablate(const std::string& matrix_arg, std::size_t n_seeds, const CommonOpts& common) {
  nlohmann::json matrix;
  if (matrix_arg.empty()) {
    matrix = default_matrix();
  } else if (!matrix_arg.empty() && matrix_arg.front() == '{') {
    matrix = nlohmann::json::parse(matrix_arg, nullptr, false);
    if (matrix.is_discarded()) throw ConfigError("--matrix is not valid JSON");
  } else {
    std::ifstream in(matrix_arg);
    if (!in) throw DataError("cannot open matrix file '" + matrix_arg + "'");
    try {
      in >> matrix;
    } catch (const nlohmann::json::exception& e) {
      throw DataError("matrix file '" + matrix_arg + "' is not valid JSON: " + e.what());
    }
  }
  if (n_seeds == 0) throw ConfigError("--seeds must be at least 1");
  std::vector<AblationCell> cells = expand_matrix(matrix);
  nlohmann::json base_doc = resolve_doc(common);
  std::string out_root = base_doc["out_dir"].get<std::string>();
  fs::create_directories(out_root);

  // Each run writes its own artifact directory; the summary is recomputed
  // from the eval.json files on disk, never from in-memory state.
  std::vector<CellResult> results;
  int failure_exit = 0;
  for (const AblationCell& cell : cells) {
    CellResult result;
    result.cell = cell;
    for (std::size_t s = 1; s <= n_seeds; ++s) {
      nlohmann::json doc = base_doc;
      apply_override(doc, cell.config_key, cell.value.dump());
      doc["trainer"]["seed"] = s;
      std::string run_dir = out_root + "/" + cell.axis + "_" + cell.value_text() + "/seed" +
                            std::to_string(s);
      doc["out_dir"] = run_dir;
      std::printf("[%s seed %zu] running...\n", cell.label().c_str(), s);
      std::fflush(stdout);
      try {
        run_training(doc, common.force, /*quiet=*/true);
        std::ifstream in(run_dir + "/eval.json");
        nlohmann::json ev;
        in >> ev;
        result.seed_success.push_back(ev.at("mean").get<double>());
      } catch (const std::exception& e) {
        result.errors.emplace_back(e.what());
        std::fprintf(stderr, "[%s seed %zu] failed: %s\n", cell.label().c_str(), s, e.what());
        if (failure_exit == 0)
          failure_exit = dynamic_cast<const NumericError*>(&e) != nullptr ? 4 : 3;
      }
    }
    results.push_back(std::move(result));
  }

  std::string table = summary_table(results);
  write_file(out_root + "/summary.csv", summary_csv(results));
  write_file(out_root + "/summary.txt", table);
  std::printf("%s", table.c_str());
  return failure_exit;
}

int cmd_viz_subgoals(const std::string& checkpoint_path, const std::string& maze_arg,
                     std::vector<std::size_t> pair_indices, const std::string& out_dir) {
  CheckpointData data = load_checkpoint(checkpoint_path);
  RunConfig cfg = config_from_json(data.config);
  MazeSpec maze = maze_arg.empty() ? load_maze(cfg) : builtin_maze(maze_arg);
  auto restored = restore_models<float>(data, cfg.trainer);
  if (cfg.trainer.horizon > 0 && !restored.decoder_present)
    throw DataError(
        "checkpoint has no decoder parameters; retrain with decoder.enabled=true to "
        "visualize subgoals");

  if (pair_indices.empty())
    for (std::size_t i = 0; i < maze.eval_pairs.size(); ++i) pair_indices.push_back(i);
  fs::create_directories(out_dir);
  for (std::size_t idx : pair_indices) {
    if (idx >= maze.eval_pairs.size())
      throw ConfigError("--pairs index " + std::to_string(idx) + " out of range; maze has " +
                        std::to_string(maze.eval_pairs.size()) + " eval pairs");
    EpisodeTrace trace =
        trace_episode(restored.models.policy, restored.models.value_fn, restored.models.decoder,
                      maze, maze.eval_pairs[idx]);
    std::string stem = out_dir + "/pair" + std::to_string(idx);
    write_file(stem + ".csv", episode_csv(trace, cfg.trainer.horizon));
    write_file(stem + ".svg", episode_svg(trace, maze, cfg.trainer.horizon));
    std::printf("pair %zu: %zu steps, %s -> %s.csv / .svg\n", idx, trace.agent_x.size(),
                trace.success ? "reached goal" : "timed out", stem.c_str());
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"chain-of-goals hierarchical policy: training and evaluation tools"};
  app.require_subcommand(1);

  auto* gen = app.add_subcommand("gen-data", "generate a scripted-expert offline dataset");
  std::string gen_maze = "corridor", gen_out;
  std::size_t gen_n = 200;
  double gen_noise = 0.1;
  std::uint64_t gen_seed = 1;
  bool gen_force = false;
  gen->add_option("--maze", gen_maze, "built-in maze name");
  gen->add_option("--n-traj", gen_n, "number of trajectories");
  gen->add_option("--noise", gen_noise, "expert action noise sigma");
  gen->add_option("--seed", gen_seed, "generation seed");
  gen->add_option("--out", gen_out, "output dataset path")->required();
  gen->add_flag("--force", gen_force, "overwrite an existing dataset");

  auto* train = app.add_subcommand("train", "train a policy from a config");
  CommonOpts train_opts;
  add_common(train, train_opts);

  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint");
  std::string eval_ckpt, eval_maze, eval_out;
  std::size_t eval_episodes = 10;
  eval->add_option("--checkpoint", eval_ckpt, "checkpoint file")->required();
  eval->add_option("--maze", eval_maze, "override the checkpoint's maze");
  eval->add_option("--episodes", eval_episodes, "episodes per eval pair");
  eval->add_option("--out", eval_out, "directory for eval.json");

  auto* ablate = app.add_subcommand("ablate", "run an ablation matrix");
  std::string ablate_matrix;
  std::size_t ablate_seeds = 4;
  CommonOpts ablate_opts;
  ablate->add_option("--matrix", ablate_matrix,
                     "matrix JSON file or inline JSON (default: the full matrix)");
  ablate->add_option("--seeds", ablate_seeds, "seeds per cell");
  add_common(ablate, ablate_opts);

  auto* viz = app.add_subcommand("viz-subgoals", "export decoded subgoal visualizations");
  std::string viz_ckpt, viz_maze, viz_out = "viz";
  std::vector<std::size_t> viz_pairs;
  viz->add_option("--checkpoint", viz_ckpt, "checkpoint file")->required();
  viz->add_option("--maze", viz_maze, "override the checkpoint's maze");
  viz->add_option("--pairs", viz_pairs, "eval pair indices (default: all)");
  viz->add_option("--out", viz_out, "output directory");

  try {
    app.parse(argc, argv);
    if (gen->parsed())
      return cmd_gen_data(gen_maze, gen_n, gen_noise, gen_seed, gen_out, gen_force);
    if (train->parsed()) {
      run_training(resolve_doc(train_opts), train_opts.force, /*quiet=*/false);
      return 0;
    }
    if (eval->parsed()) return cmd_eval(eval_ckpt, eval_maze, eval_episodes, eval_out);
    if (ablate->parsed()) return cmd_ablate(ablate_matrix, ablate_seeds, ablate_opts);
    if (viz->parsed()) return cmd_viz_subgoals(viz_ckpt, viz_maze, viz_pairs, viz_out);
    return 2;
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  } catch (const DataError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 3;
  } catch (const ShapeError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 3;
  } catch (const NumericError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 4;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "internal error: %s\n", e.what());
    return 1;
  }
}
