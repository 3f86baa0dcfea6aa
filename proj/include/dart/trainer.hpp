#pragma once

#include <filesystem>
#include <fstream>
#include <memory>
#include <string>
#include <vector>

#include "dart/checkpoint.hpp"
#include "dart/config.hpp"
#include "dart/envs.hpp"
#include "dart/policy.hpp"
#include "dart/tokenizer.hpp"
#include "dart/worldmodel.hpp"

// The training loop: collect real steps with the ε-mixed policy, then
// alternate tokenizer, world-model and policy updates. Policy updates run
// entirely inside imagination: a single tokenized real frame seeds the
// world model, the policy acts against sampled rollouts, and the
// actor-critic losses backpropagate through the memory token across the
// whole horizon while tokenizer and world model stay frozen.
//
// Checkpoints capture everything the next step depends on: parameters,
// optimizer moments, RNG counters and the episode store, so a resumed run
// continues the exact trajectory of an uninterrupted one.

namespace dart {

template <typename T>
class Trainer {
 public:
  struct EpochReport {
    int epoch = 0;
    std::int64_t real_steps = 0;
    double tok_loss = 0;
    double wm_token_ce = 0;
    double wm_reward_mse = 0;
    double wm_done_ce = 0;
    double actor_loss = 0;
    double critic_loss = 0;
    double entropy = 0;
    double eval_return = 0;
  };

  explicit Trainer(const Config& cfg)
      : cfg_(cfg),
        env_(make_env(cfg.env_name)),
        store_(cfg.store_capacity, cfg.run_seed),
        tok_(cfg, cfg.run_seed),
        wm_(cfg, env_->spec().action_count, cfg.run_seed),
        pol_(cfg, env_->spec().action_count, &tok_.codebook(), cfg.run_seed),
        opt_tok_(tok_.params(), adam_cfg(cfg.tok_lr, 0.0, cfg.train_grad_clip)),
        opt_wm_(wm_.params(), adam_cfg(cfg.wm_lr, cfg.wm_weight_decay, cfg.train_grad_clip)),
        opt_pol_(pol_.params(), adam_cfg(cfg.pol_lr, cfg.pol_weight_decay, cfg.train_grad_clip)),
        rng_eps_(cfg.run_seed, "collect_eps"),
        rng_act_(cfg.run_seed, "collect_act"),
        rng_imagine_(cfg.run_seed, "imagine"),
        rng_reset_(cfg.run_seed, "env_reset") {
    validate(cfg);
    for (auto* p : tok_.params()) frozen_.add(*p);
    for (auto* p : wm_.params()) frozen_.add(*p);
  }

  Tokenizer<T>& tokenizer() { return tok_; }
  WorldModel<T>& world_model() { return wm_; }
  Policy<T>& policy() { return pol_; }
  EpisodeStore& store() { return store_; }
  Env& env() { return *env_; }
  const Config& config() const { return cfg_; }
  std::int64_t real_steps() const { return real_steps_; }
  int epoch() const { return epoch_; }

  // Runs the env under the ε-mixed policy for exactly n steps (less only
  // when the real-step budget runs out first) and stores the episodes.
  // Episodes cut short by the step quota are stored as valid prefixes; the
  // next call starts a fresh episode. Returns steps actually taken.
  int collect(int n_steps, double epsilon, double temperature) {
    if (n_steps < 1) throw ContractError("collect: n_steps must be >= 1");
    const std::int64_t remaining = cfg_.env_budget_steps - real_steps_;
    int n = static_cast<int>(std::min<std::int64_t>(n_steps, std::max<std::int64_t>(remaining, 0)));
    int taken = 0;
    while (taken < n) {
      Episode ep;
      Tensor<std::uint8_t> obs = env_->reset(rng_reset_.next_u64());
      ep.frames.push_back(obs);
      Tensor<T> mem = pol_.initial_mem_value();
      bool done = false;
      while (!done && taken < n) {
        const std::vector<int> ids = tok_.tokenize(obs);
        Tape<T> tp(true, true);
        auto po = pol_.forward(tp, ids, tp.constant(mem));
        int action;
        if (epsilon > 0.0 && rng_eps_.uniform() < epsilon)
          action = rng_eps_.uniform_int(env_->spec().action_count);
        else
          action = pol_.act(tp, po.logits, temperature, rng_act_).action;
        mem = tp.val(po.mem_next);
        StepResult sr = env_->step(action);
        ep.actions.push_back(action);
        ep.rewards.push_back(sr.reward);
        ep.dones.push_back(sr.done ? 1 : 0);
        ep.frames.push_back(sr.obs);
        obs = sr.obs;
        done = sr.done;
        ++taken;
        ++real_steps_;
      }
      store_.add(std::move(ep));
    }
    return taken;
  }

  // Greedy-ish evaluation at the given temperature. Episode seeds are a
  // fixed function of the run seed, so every call plays the same set of
  // initial conditions and scores stay comparable across epochs.
  double evaluate(int episodes, double temperature) {
    if (episodes < 1) throw ContractError("evaluate: episodes must be >= 1");
    RngStream reset_rng(cfg_.run_seed, "eval_reset");
    RngStream act_rng(cfg_.run_seed, "eval_act");
    double total = 0;
    for (int e = 0; e < episodes; ++e) {
      Tensor<std::uint8_t> obs = env_->reset(reset_rng.next_u64());
      Tensor<T> mem = pol_.initial_mem_value();
      bool done = false;
      while (!done) {
        const std::vector<int> ids = tok_.tokenize(obs);
        Tape<T> tp(true, true);
        auto po = pol_.forward(tp, ids, tp.constant(mem));
        const int action = pol_.act(tp, po.logits, temperature, act_rng).action;
        mem = tp.val(po.mem_next);
        StepResult sr = env_->step(action);
        total += sr.reward;
        obs = sr.obs;
        done = sr.done;
      }
    }
    return total / episodes;
  }

  // One H-step imagination rollout on `tp`, starting from a single
  // tokenized real frame with the learned initial memory.
  ImaginedTrajectory<T> imagine(Tape<T>& tp, const std::vector<int>& start_tokens) {
    RolloutState<T> st = wm_.begin_rollout();
    wm_.feed_tokens(st, start_tokens);
    ImaginedTrajectory<T> traj;
    std::vector<int> cur = start_tokens;
    Var mem = pol_.initial_mem(tp);
    while (!st.halted) {
      auto po = pol_.forward(tp, cur, mem);
      auto ao = pol_.act(tp, po.logits, cfg_.pol_temperature_train, rng_imagine_);
      auto sr = wm_.imagine_step(st, ao.action, rng_imagine_, 1.0);
      traj.steps.push_back(ImaginedStep<T>{cur, ao.action, ao.log_prob, ao.entropy, po.value, sr.reward, sr.done});
      if (sr.done) {
        traj.bootstrap_value = T{0};
        break;
      }
      cur = sr.tokens;
      mem = po.mem_next;
      if (st.halted) {
        // Horizon boundary: value of the final imagined state, as data.
        Tape<T> bt(true, true);
        auto bo = pol_.forward(bt, cur, bt.constant(tp.val(po.mem_next)));
        traj.bootstrap_value = bt.val(bo.value)[0];
      }
    }
    return traj;
  }

  // collect -> tokenizer updates -> world-model updates -> policy updates.
  EpochReport train_epoch() {
    collect(cfg_.train_collect_steps, cfg_.pol_epsilon, cfg_.pol_temperature_train);
    ++epoch_;

    EpochReport rep;
    rep.epoch = epoch_;

    for (int u = 0; u < cfg_.train_updates_tokenizer; ++u) {
      std::vector<Tensor<T>> batch;
      for (int b = 0; b < cfg_.tok_batch; ++b) batch.push_back(image::to_float<T>(store_.sample_frame(false)));
      rep.tok_loss += tok_.train_step(batch, opt_tok_).total;
    }
    if (cfg_.train_updates_tokenizer > 0) rep.tok_loss /= cfg_.train_updates_tokenizer;

    const int seg_len = std::min(cfg_.wm_context_steps, store_.max_episode_len());
    for (int u = 0; u < cfg_.train_updates_worldmodel; ++u) {
      std::vector<WmSequence<T>> batch;
      for (int b = 0; b < cfg_.wm_batch; ++b) batch.push_back(sample_wm_sequence(seg_len));
      auto r = wm_.train_step(batch, opt_wm_);
      rep.wm_token_ce += r.next_token_ce;
      rep.wm_reward_mse += r.reward_mse;
      rep.wm_done_ce += r.termination_ce;
    }
    if (cfg_.train_updates_worldmodel > 0) {
      rep.wm_token_ce /= cfg_.train_updates_worldmodel;
      rep.wm_reward_mse /= cfg_.train_updates_worldmodel;
      rep.wm_done_ce /= cfg_.train_updates_worldmodel;
    }

    for (int u = 0; u < cfg_.train_updates_policy; ++u) {
      const auto& frame = store_.sample_frame(cfg_.train_imagine_from_episode_start);
      const std::vector<int> start = tok_.tokenize(frame);
      Tape<T> tp;
      ImaginedTrajectory<T> traj = imagine(tp, start);
      auto r = pol_.train_step(tp, {std::move(traj)}, opt_pol_, &frozen_);
      rep.actor_loss += r.actor;
      rep.critic_loss += r.critic;
      rep.entropy += r.entropy;
    }
    if (cfg_.train_updates_policy > 0) {
      rep.actor_loss /= cfg_.train_updates_policy;
      rep.critic_loss /= cfg_.train_updates_policy;
      rep.entropy /= cfg_.train_updates_policy;
    }

    rep.real_steps = real_steps_;
    if (cfg_.train_eval_every > 0 && (epoch_ % cfg_.train_eval_every == 0 || epoch_ == cfg_.train_epochs))
      last_eval_ = evaluate(cfg_.train_eval_episodes, cfg_.pol_temperature_eval);
    rep.eval_return = last_eval_;
    return rep;
  }

  // Full run: epochs until the schedule or the real-step budget ends,
  // metrics CSV and a rolling checkpoint in the output directory.
  void run() {
    namespace fs = std::filesystem;
    fs::create_directories(cfg_.run_out_dir);
    const std::string csv_path = (fs::path(cfg_.run_out_dir) / "metrics.csv").string();
    std::ofstream csv(csv_path, epoch_ == 0 ? std::ios::trunc : std::ios::app);
    if (!csv) throw IoError("cannot open " + csv_path);
    if (epoch_ == 0)
      csv << "epoch,real_steps,tok_loss,wm_token_ce,wm_reward_mse,wm_done_ce,actor_loss,critic_loss,entropy,"
             "eval_return\n";
    while (epoch_ < cfg_.train_epochs && real_steps_ < cfg_.env_budget_steps) {
      EpochReport r = train_epoch();
      csv << r.epoch << ',' << r.real_steps << ',' << fmt(r.tok_loss) << ',' << fmt(r.wm_token_ce) << ','
          << fmt(r.wm_reward_mse) << ',' << fmt(r.wm_done_ce) << ',' << fmt(r.actor_loss) << ','
          << fmt(r.critic_loss) << ',' << fmt(r.entropy) << ',' << fmt(r.eval_return) << '\n';
      csv.flush();
      save((fs::path(cfg_.run_out_dir) / "checkpoint.dart").string());
    }
  }

  void save(const std::string& path) {
    ckpt::Writer w;
    w.add_scalar_u64("trainer.version", 1);
    w.add_scalar_u64("trainer.real_steps", static_cast<std::uint64_t>(real_steps_));
    w.add_scalar_u64("trainer.epoch", static_cast<std::uint64_t>(epoch_));
    w.add_text("trainer.config", config_dump(cfg_));
    w.add_floats("trainer.last_eval", {static_cast<float>(last_eval_)});

    add_params(w, tok_.params());
    add_params(w, wm_.params());
    add_params(w, pol_.params());
    add_adam(w, "adam.tok", opt_tok_, tok_.params());
    add_adam(w, "adam.wm", opt_wm_, wm_.params());
    add_adam(w, "adam.pol", opt_pol_, pol_.params());

    w.add_scalar_u64("rng.collect_eps", rng_eps_.counter());
    w.add_scalar_u64("rng.collect_act", rng_act_.counter());
    w.add_scalar_u64("rng.imagine", rng_imagine_.counter());
    w.add_scalar_u64("rng.env_reset", rng_reset_.counter());
    w.add_scalar_u64("rng.store", store_.rng().counter());

    w.add_scalar_u64("store.episodes", store_.episode_count());
    std::size_t i = 0;
    for (const auto& ep : store_.episodes()) {
      const std::string base = "store.ep" + std::to_string(i++);
      const int n = ep.length();
      Tensor<std::uint8_t> frames = Tensor<std::uint8_t>::zeros({n + 1, 3, 16, 16});
      for (int f = 0; f <= n; ++f)
        std::copy(ep.frames[static_cast<std::size_t>(f)].data.begin(),
                  ep.frames[static_cast<std::size_t>(f)].data.end(), frames.data.begin() + f * 768);
      w.add_tensor(base + ".frames", frames);
      std::vector<std::int32_t> acts(ep.actions.begin(), ep.actions.end());
      w.add_ints(base + ".actions", acts);
      w.add_floats(base + ".rewards", ep.rewards);
      w.add_record(base + ".dones", ckpt::Dtype::u8, {n}, ep.dones.data(), static_cast<std::size_t>(n));
    }
    w.write(path);
  }

  void load(const std::string& path) {
    ckpt::Reader r(path);
    real_steps_ = static_cast<std::int64_t>(r.scalar_u64("trainer.real_steps"));
    epoch_ = static_cast<int>(r.scalar_u64("trainer.epoch"));
    last_eval_ = static_cast<double>(r.floats("trainer.last_eval").at(0));

    load_params(r, tok_.params());
    load_params(r, wm_.params());
    load_params(r, pol_.params());
    load_adam(r, "adam.tok", opt_tok_, tok_.params());
    load_adam(r, "adam.wm", opt_wm_, wm_.params());
    load_adam(r, "adam.pol", opt_pol_, pol_.params());

    rng_eps_.set_counter(r.scalar_u64("rng.collect_eps"));
    rng_act_.set_counter(r.scalar_u64("rng.collect_act"));
    rng_imagine_.set_counter(r.scalar_u64("rng.imagine"));
    rng_reset_.set_counter(r.scalar_u64("rng.env_reset"));

    store_ = EpisodeStore(cfg_.store_capacity, cfg_.run_seed);
    store_.rng().set_counter(r.scalar_u64("rng.store"));
    const std::uint64_t n_eps = r.scalar_u64("store.episodes");
    for (std::uint64_t i = 0; i < n_eps; ++i) {
      const std::string base = "store.ep" + std::to_string(i);
      Tensor<std::uint8_t> frames = r.tensor<std::uint8_t>(base + ".frames");
      Episode ep;
      const int n = frames.shape[0] - 1;
      for (int f = 0; f <= n; ++f) {
        Tensor<std::uint8_t> fr = Tensor<std::uint8_t>::zeros({3, 16, 16});
        std::copy(frames.data.begin() + f * 768, frames.data.begin() + (f + 1) * 768, fr.data.begin());
        ep.frames.push_back(std::move(fr));
      }
      for (auto a : r.ints(base + ".actions")) ep.actions.push_back(static_cast<int>(a));
      ep.rewards = r.floats(base + ".rewards");
      const auto& dn = r.get(base + ".dones");
      ep.dones.assign(dn.bytes.begin(), dn.bytes.end());
      store_.add(std::move(ep));
    }
  }

  // Builds a trainer from a checkpoint's own config snapshot.
  static std::unique_ptr<Trainer<T>> from_checkpoint(const std::string& path) {
    ckpt::Reader r(path);
    Config cfg;
    config_apply_text(cfg, r.text("trainer.config"), path);
    auto t = std::make_unique<Trainer<T>>(cfg);
    t->load(path);
    return t;
  }

 private:
  static AdamConfig adam_cfg(double lr, double wd, double clip) {
    AdamConfig a;
    a.lr = lr;
    a.weight_decay = wd;
    a.clip_norm = clip;
    return a;
  }

  static std::string fmt(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.6g", v);
    return buf;
  }

  static void add_params(ckpt::Writer& w, ParamSet<T>& ps) {
    for (auto* p : ps) w.add_tensor(p->name, p->value);
  }

  static void load_params(const ckpt::Reader& r, ParamSet<T>& ps) {
    for (auto* p : ps) {
      Tensor<T> t = r.tensor<T>(p->name);
      require_same_shape("checkpoint_param", p->value, t);
      p->value = std::move(t);
    }
  }

  static void add_adam(ckpt::Writer& w, const std::string& prefix, Adam<T>& opt, ParamSet<T>& ps) {
    w.add_scalar_u64(prefix + ".t", static_cast<std::uint64_t>(opt.t()));
    for (std::size_t i = 0; i < ps.size(); ++i) {
      w.add_tensor(prefix + ".m." + ps[i].name, opt.moment1(i));
      w.add_tensor(prefix + ".v." + ps[i].name, opt.moment2(i));
    }
  }

  static void load_adam(const ckpt::Reader& r, const std::string& prefix, Adam<T>& opt, ParamSet<T>& ps) {
    opt.set_t(static_cast<std::int64_t>(r.scalar_u64(prefix + ".t")));
    for (std::size_t i = 0; i < ps.size(); ++i) {
      Tensor<T> m = r.tensor<T>(prefix + ".m." + ps[i].name);
      Tensor<T> v = r.tensor<T>(prefix + ".v." + ps[i].name);
      require_same_shape("checkpoint_adam", opt.moment1(i), m);
      opt.moment1(i) = std::move(m);
      opt.moment2(i) = std::move(v);
    }
  }

  WmSequence<T> sample_wm_sequence(int seg_len) {
    auto seg = store_.sample_segment(seg_len);
    std::vector<std::vector<int>> grids;
    std::vector<int> actions;
    std::vector<T> rewards;
    std::vector<std::uint8_t> dones;
    for (int t = 0; t < seg.length; ++t) {
      const std::size_t i = static_cast<std::size_t>(seg.offset + t);
      grids.push_back(tok_.tokenize(seg.episode->frames[i]));
      actions.push_back(seg.episode->actions[i]);
      rewards.push_back(static_cast<T>(seg.episode->rewards[i]));
      dones.push_back(seg.episode->dones[i]);
    }
    return wm_.build_sequence(grids, actions, rewards, dones);
  }

  Config cfg_;
  std::unique_ptr<Env> env_;
  EpisodeStore store_;
  Tokenizer<T> tok_;
  WorldModel<T> wm_;
  Policy<T> pol_;
  Adam<T> opt_tok_, opt_wm_, opt_pol_;
  RngStream rng_eps_, rng_act_, rng_imagine_, rng_reset_;
  ParamSet<T> frozen_;
  std::int64_t real_steps_ = 0;
  int epoch_ = 0;
  double last_eval_ = 0;
};

}  // namespace dart
