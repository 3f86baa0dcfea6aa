#include <cstdio>
#include <string>

#include <CLI11.hpp>

#include "dart/analysis.hpp"
#include "dart/trainer.hpp"

using namespace dart;

int main(int argc, char** argv) {
  CLI::App app{"dart: discrete-token world models and in-imagination policy learning"};
  app.require_subcommand(1);

  auto* train = app.add_subcommand("train", "train a full agent");
  std::string train_config, train_profile = "desk";
  std::uint64_t train_seed = 0;
  bool train_seed_set = false;
  train->add_option("--config", train_config, "config file (key = value lines)");
  train->add_option("--profile", train_profile, "defaults to start from")->check(CLI::IsMember({"desk", "paper"}));
  train->add_option("--seed", train_seed, "override run.seed")->each([&](const std::string&) { train_seed_set = true; });
  std::string train_out;
  train->add_option("--out", train_out, "override run.out_dir");

  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint");
  std::string eval_ckpt;
  int eval_episodes = 20;
  double eval_temp = -1.0;
  eval->add_option("--ckpt", eval_ckpt, "checkpoint file")->required();
  eval->add_option("--episodes", eval_episodes, "evaluation episodes");
  eval->add_option("--temperature", eval_temp, "action temperature (default: config value)");

  auto* attn = app.add_subcommand("attn", "attention summary of a trained policy");
  std::string attn_ckpt, attn_env, attn_out = "attn_out";
  int attn_states = 20;
  std::uint64_t attn_seed = 20240501;
  attn->add_option("--ckpt", attn_ckpt, "checkpoint file")->required();
  attn->add_option("--env", attn_env, "override env (default: checkpoint's)");
  attn->add_option("--states", attn_states, "observation states to average over");
  attn->add_option("--out", attn_out, "output directory");
  attn->add_option("--seed", attn_seed, "sampling seed");

  auto* abl = app.add_subcommand("ablate", "score a checkpoint under an ablation");
  std::string abl_ckpt, abl_mode;
  int abl_episodes = 100, abl_seeds = 5;
  abl->add_option("--ckpt", abl_ckpt, "checkpoint file")->required();
  abl->add_option("--mode", abl_mode, "mask-mem | mask-obs:P | no-pe | no-eps")->required();
  abl->add_option("--episodes", abl_episodes, "episodes per seed");
  abl->add_option("--seeds", abl_seeds, "evaluation seeds");

  auto* met = app.add_subcommand("metrics", "normalized-score metrics from a score table");
  std::string met_scores;
  met->add_option("--scores", met_scores, "CSV: game,random,human,score_run1..")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (*train) {
      Config cfg = config_from_profile(train_profile);
      if (!train_config.empty()) config_apply_file(cfg, train_config);
      if (train_seed_set) cfg.run_seed = train_seed;
      if (!train_out.empty()) cfg.run_out_dir = train_out;
      validate(cfg);
      Trainer<float> tr(cfg);
      tr.run();
      std::printf("trained %d epochs, %lld real steps; outputs in %s\n", tr.epoch(),
                  static_cast<long long>(tr.real_steps()), cfg.run_out_dir.c_str());
    } else if (*eval) {
      auto tr = Trainer<float>::from_checkpoint(eval_ckpt);
      const double temp = eval_temp >= 0 ? eval_temp : tr->config().pol_temperature_eval;
      const double ret = tr->evaluate(eval_episodes, temp);
      std::printf("mean return over %d episodes at temperature %g: %.4f\n", eval_episodes, temp, ret);
    } else if (*attn) {
      auto tr = Trainer<float>::from_checkpoint(attn_ckpt);
      if (!attn_env.empty() && attn_env != tr->config().env_name)
        throw ConfigError("attn: checkpoint was trained on '" + tr->config().env_name + "', not '" + attn_env + "'");
      AttentionSummary s = attention_summary(*tr, attn_states, attn_seed);
      write_attention_summary(s, attn_out);
      double mem = 0;
      for (int l = 0; l < s.layers; ++l) mem += s.matrix.at(l, s.matrix.shape[1] - 1);
      std::printf("attention summary over %d states -> %s (mean MEM share %.4f)\n", s.n_states, attn_out.c_str(),
                  mem / s.layers);
    } else if (*abl) {
      AblateReport rep = ablate<float>(abl_ckpt, abl_mode, abl_episodes, abl_seeds);
      std::printf("%s: mean %.4f +- %.4f over %d episodes x %d seeds\n", rep.mode.c_str(), rep.mean, rep.stddev,
                  rep.episodes, rep.seeds);
      for (std::size_t s = 0; s < rep.per_seed_mean.size(); ++s)
        std::printf("  seed %zu mean %.4f\n", s, rep.per_seed_mean[s]);
    } else if (*met) {
      NormalizedMetrics m = normalized_metrics(load_score_table(met_scores));
      for (std::size_t i = 0; i < m.games.size(); ++i)
        std::printf("%-16s %.4f\n", m.games[i].c_str(), m.per_game[i]);
      std::printf("mean            %.4f\n", m.mean);
      std::printf("median          %.4f\n", m.median);
      std::printf("iqm             %.4f\n", m.iqm);
      std::printf("optimality_gap  %.4f\n", m.optimality_gap);
      std::printf("superhuman      %d\n", m.superhuman);
    }
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
