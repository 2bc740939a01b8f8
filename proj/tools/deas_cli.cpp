// deas: generate play data, train, evaluate and check against exact oracles.

#include <filesystem>
#include <fstream>
#include <iostream>

#include "CLI11.hpp"
#include "deas/run.hpp"

namespace {

constexpr int kExitOk = 0;
constexpr int kExitFail = 1;
constexpr int kExitConfig = 2;
constexpr int kExitDiverged = 3;
constexpr int kExitFormat = 4;

void print(const nlohmann::ordered_json& j) { std::cout << j.dump(2) << '\n'; }

deas::RunConfig load_config(const std::string& path) {
  deas::RunConfig c = deas::RunConfig::load(path);
  c.apply_environment();
  return c;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Option-level offline RL with distributional critics"};
  app.require_subcommand(1);

  std::string config_path, checkpoint, out_path, dataset_override, tables_path;
  int episodes = 0, H = 0;
  std::uint64_t seed = 0;
  double tolerance = -1.0, gamma1 = 0.9, gamma2 = 0.99;
  std::string mode, selection;
  int best_n = 0;

  auto* gen = app.add_subcommand("gen-data", "Collect a noisy play dataset from the scripted expert");
  gen->add_option("--config", config_path, "Run config (JSON)")->required()->check(CLI::ExistingFile);
  gen->add_option("--out", dataset_override, "Dataset path (overrides the config)");

  auto* train = app.add_subcommand("train", "Train a learner; writes checkpoints and metrics.csv");
  train->add_option("--config", config_path, "Run config (JSON)")->required()->check(CLI::ExistingFile);
  train->add_option("--dataset", dataset_override, "Dataset path (overrides the config)");

  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint in its environment");
  eval->add_option("--config", config_path, "Run config (JSON)")->required()->check(CLI::ExistingFile);
  eval->add_option("--checkpoint", checkpoint, "Checkpoint file")->required()->check(CLI::ExistingFile);
  eval->add_option("--episodes", episodes, "Episodes (default: eval_episodes from the config)");
  eval->add_option("--seed", seed, "Evaluation seed");
  eval->add_option("--mode", mode, "sample | mode | best-of-n");
  eval->add_option("--n", best_n, "Candidates for best-of-n");
  eval->add_option("--selection", selection, "greedy | softmax");

  auto* scripted = app.add_subcommand("scripted-checkpoint", "Write a checkpoint whose policy replays the chain expert");
  scripted->add_option("--config", config_path, "Run config (JSON)")->required()->check(CLI::ExistingFile);
  scripted->add_option("--out", out_path, "Output checkpoint")->required();

  auto* oracle = app.add_subcommand("oracle-check", "Compare a checkpoint's values with the exact tabular oracle");
  oracle->add_option("--config", config_path, "Run config (JSON)")->required()->check(CLI::ExistingFile);
  oracle->add_option("--checkpoint", checkpoint, "Checkpoint file")->required()->check(CLI::ExistingFile);
  oracle->add_option("--dataset", dataset_override, "Dataset path (overrides the config)");
  oracle->add_option("--tolerance", tolerance, "Allowed mean |V gap| (default: two bin widths)");
  oracle->add_option("--tables", tables_path, "Write oracle V/Q tables as JSON");

  auto* stats = app.add_subcommand("stats", "Summarize a dataset");
  std::string stats_path;
  stats->add_option("dataset", stats_path, "Dataset file")->required()->check(CLI::ExistingFile);
  stats->add_option("--H", H, "Option length")->default_val(1);
  stats->add_option("--gamma1", gamma1, "Intra-option discount")->default_val(0.9);
  stats->add_option("--gamma2", gamma2, "Inter-option discount")->default_val(0.99);

  CLI11_PARSE(app, argc, argv);

  try {
    if (*gen) {
      auto cfg = load_config(config_path);
      if (!dataset_override.empty()) cfg.dataset = dataset_override;
      print(deas::cmd_gen_data(cfg).to_json());
    } else if (*train) {
      auto cfg = load_config(config_path);
      if (!dataset_override.empty()) cfg.dataset = dataset_override;
      const auto rep = deas::cmd_train(cfg);
      if (rep.diverged) {
        std::cerr << "training stopped: " << rep.error << "\nlast good checkpoint: " << rep.final_checkpoint << '\n';
        return kExitDiverged;
      }
      nlohmann::ordered_json j{{"final_checkpoint", rep.final_checkpoint}, {"steps", cfg.steps}};
      if (!rep.intervals.empty() && rep.intervals.back().eval) {
        j["eval_return"] = rep.intervals.back().eval->mean_return;
        j["eval_success"] = rep.intervals.back().eval->success_rate;
      }
      print(j);
    } else if (*eval) {
      auto cfg = load_config(config_path);
      if (!mode.empty()) cfg.eval.mode = deas::parse_eval_mode(mode);
      if (best_n > 0) cfg.eval.n = best_n;
      if (!selection.empty()) cfg.eval.selection = deas::parse_selection(selection);
      const auto learner = deas::load_checkpoint(checkpoint);
      const auto st = deas::cmd_eval(cfg, learner, episodes > 0 ? episodes : cfg.eval_episodes,
                                     eval->count("--seed") ? seed : deas::eval_seed(cfg.seed));
      print({{"mean_return", st.mean_return},
             {"success_rate", st.success_rate},
             {"episodes", st.episodes},
             {"seed", st.seed},
             {"mode", deas::to_string(cfg.eval.mode)}});
    } else if (*scripted) {
      const auto cfg = load_config(config_path);
      deas::save_checkpoint(out_path, deas::scripted_checkpoint(cfg));
      print({{"checkpoint", out_path}});
    } else if (*oracle) {
      auto cfg = load_config(config_path);
      if (!dataset_override.empty()) cfg.dataset = dataset_override;
      const auto* chain = std::get_if<deas::ChainSpec>(&cfg.env);
      if (chain == nullptr) throw deas::ConfigError("oracle-check needs a chain environment");
      const auto mdp = deas::make_chain(*chain);
      const auto ds = deas::load_dataset(cfg.dataset);
      const auto learner = deas::load_checkpoint(checkpoint);
      const auto& lc = learner.config();
      const auto table = deas::oracle_expectile_v(mdp, ds, lc.H, lc.gamma1, lc.gamma2, lc.expectile);
      const auto gap = deas::learner_oracle_gap(learner, mdp, table);
      const double tol = tolerance >= 0.0 ? tolerance : 2.0 * learner.grid().width();
      const bool pass = gap.mean_v_gap <= tol;
      if (!tables_path.empty()) {
        std::ofstream os(tables_path);
        os << deas::oracle_tables_json(mdp, table, lc.H).dump(2) << '\n';
      }
      print({{"covered_states", gap.covered_states},
             {"dataset_options", gap.options},
             {"mean_v_gap", gap.mean_v_gap},
             {"max_v_gap", gap.max_v_gap},
             {"mean_q_gap", gap.mean_q_gap},
             {"max_q_gap", gap.max_q_gap},
             {"mean_q_bias", gap.mean_q_signed},
             {"bin_width", learner.grid().width()},
             {"tolerance", tol},
             {"pass", pass}});
      return pass ? kExitOk : kExitFail;
    } else if (*stats) {
      print(deas::cmd_stats(deas::load_dataset(stats_path), gamma1, gamma2, H));
    }
  } catch (const deas::ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const deas::FormatError& e) {
    std::cerr << "format error: " << e.what() << '\n';
    return kExitFormat;
  } catch (const deas::ShapeError& e) {
    std::cerr << "shape error: " << e.what() << '\n';
    return kExitFormat;
  } catch (const deas::NonFiniteLoss& e) {
    std::cerr << e.what() << '\n';
    return kExitDiverged;
  }
  return kExitOk;
}
