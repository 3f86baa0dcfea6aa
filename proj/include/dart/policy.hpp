#pragma once

#include <string>
#include <vector>

#include "dart/adam.hpp"
#include "dart/config.hpp"
#include "dart/layers.hpp"
#include "dart/ops.hpp"

// Transformer-encoder actor-critic. The input row is [CLS, K observation
// tokens, MEM] plus a learned positional table; the CLS output after L
// pre-norm blocks is the step summary h_t, which doubles as the next
// step's MEM input, giving the policy a recurrent channel through
// otherwise feedforward attention. Observation tokens are looked up in
// the tokenizer's codebook, which enters the graph as a constant: the
// policy can learn a projection of the codes but never bends the codes
// themselves.

namespace dart {

// Key-side attention mask. CLS is always visible; observation positions
// and MEM can be hidden for ablations. Hidden positions still produce
// (unused) outputs, they just stop being attendable, so the CLS output is
// exactly the output of the same net run without that information.
struct PolicyMask {
  std::vector<std::uint8_t> obs_keep;  // size K when set, defaults to all-visible
  bool keep_mem = true;
};

// λ-return targets over n steps. `values` holds v(s_0)..v(s_n): the value
// of each state an action was taken in, plus the bootstrap for the
// post-horizon state. The recursion only reads values[t+1]; index 0 is
// kept for alignment (advantages subtract it later).
template <typename T>
std::vector<T> lambda_returns(const std::vector<T>& rewards, const std::vector<T>& values,
                              const std::vector<int>& dones, double gamma, double lambda) {
  if (gamma < 0.0 || gamma > 1.0) throw ConfigError("lambda_returns: gamma must be in [0,1]");
  if (lambda < 0.0 || lambda > 1.0) throw ConfigError("lambda_returns: lambda must be in [0,1]");
  const std::size_t n = rewards.size();
  if (dones.size() != n) throw ShapeError("lambda_returns: rewards/dones length mismatch");
  if (values.size() != n + 1) throw ShapeError("lambda_returns: need one value per step plus a bootstrap");
  std::vector<T> out(n);
  T next = values[n];
  for (std::size_t i = n; i-- > 0;) {
    const T cont = static_cast<T>(gamma) * (T{1} - static_cast<T>(dones[i])) *
                   ((T{1} - static_cast<T>(lambda)) * values[i + 1] + static_cast<T>(lambda) * next);
    next = rewards[i] + cont;
    out[i] = next;
  }
  return out;
}

// One imagined step's tape handles and recorded scalars. Vars are only
// meaningful on the tape the trajectory was built on.
template <typename T>
struct ImaginedStep {
  std::vector<int> tokens;
  int action = 0;
  Var log_prob, entropy, value;
  T reward = 0;
  int done = 0;
};

template <typename T>
struct ImaginedTrajectory {
  std::vector<ImaginedStep<T>> steps;
  T bootstrap_value = 0;  // v(s_{H+1}); zero when the rollout ended on done
};

template <typename T>
class Policy {
 public:
  struct ForwardOut {
    Var h;         // [1, d_p], CLS output
    Var logits;    // [1, |A|]
    Var value;     // [1, 1]
    Var mem_next;  // same node as h
  };

  struct ActOut {
    int action = 0;
    Var log_prob, entropy;
  };

  struct LossReport {
    double actor = 0;
    double critic = 0;
    double entropy = 0;
    double total = 0;
  };

  // The codebook stays owned by the tokenizer; the policy only reads it.
  Policy(const Config& cfg, int num_actions, const Param<T>* codebook, std::uint64_t seed)
      : cfg_(cfg), num_actions_(num_actions), codebook_(codebook) {
    if (num_actions < 1) throw ConfigError("policy: num_actions must be >= 1");
    if (!codebook) throw ConfigError("policy: codebook is null");
    if (cfg.pol_embed_dim % cfg.pol_heads != 0)
      throw ConfigError("policy.embed_dim must be divisible by policy.heads");
    const int K = cfg.tok_tokens_per_image, dp = cfg.pol_embed_dim;
    RngStream rng(seed, "policy_init");
    cls_ = Param<T>("pol.cls", trunc_normal_init<T>({1, dp}, rng));
    mem0_ = Param<T>("pol.mem0", trunc_normal_init<T>({1, dp}, rng));
    pos_ = Param<T>("pol.pos", trunc_normal_init<T>({K + 2, dp}, rng));
    const int d = codebook->value.shape[1];
    project_ = d != dp;
    if (project_) proj_ = Linear<T>("pol.proj", d, dp, rng);
    blocks_.reserve(static_cast<std::size_t>(cfg.pol_layers));
    for (int l = 0; l < cfg.pol_layers; ++l)
      blocks_.emplace_back("pol.block" + std::to_string(l), dp, cfg.pol_heads, 4 * dp, Activation::gelu, rng);
    ln_f_ = LayerNorm<T>("pol.lnf", dp);
    head_actor_ = Linear<T>("pol.head_actor", dp, num_actions, rng);
    head_critic_ = Linear<T>("pol.head_critic", dp, 1, rng);

    params_.add(cls_);
    params_.add(mem0_);
    params_.add(pos_);
    if (project_) proj_.register_params(params_);
    for (auto& b : blocks_) b.register_params(params_);
    ln_f_.register_params(params_);
    head_actor_.register_params(params_);
    head_critic_.register_params(params_);
  }

  ParamSet<T>& params() { return params_; }
  const Config& config() const { return cfg_; }
  int num_actions() const { return num_actions_; }

  // Learned episode-start memory.
  Var initial_mem(Tape<T>& tp) { return tp.leaf(mem0_); }
  const Tensor<T>& initial_mem_value() const { return mem0_.value; }

  ForwardOut forward(Tape<T>& tp, const std::vector<int>& ids, Var mem, const PolicyMask& mask = {},
                     RngStream* drop_rng = nullptr, AttnRecord<T>* record = nullptr) {
    const int K = cfg_.tok_tokens_per_image;
    if (static_cast<int>(ids.size()) != K)
      throw ShapeError("policy forward: expected " + std::to_string(K) + " token ids, got " +
                       std::to_string(ids.size()));
    const int N = codebook_->value.shape[0];
    for (int id : ids)
      if (id < 0 || id >= N)
        throw ContractError("policy forward: token id " + std::to_string(id) + " outside codebook of " +
                            std::to_string(N));
    if (!mask.obs_keep.empty() && static_cast<int>(mask.obs_keep.size()) != K)
      throw ShapeError("policy forward: obs_keep must have K entries");
    const Tensor<T>& mv = tp.val(mem);
    if (mv.shape != Shape{1, cfg_.pol_embed_dim}) throw ShapeError("policy forward: mem must be [1, d_p]");

    Var obs = ops::embedding(tp, tp.constant(codebook_->value), ids);
    if (project_) obs = proj_.forward(tp, obs);
    Var x = ops::concat_rows(tp, {tp.leaf(cls_), obs, mem});
    x = ops::add(tp, x, tp.leaf(pos_));

    std::vector<std::uint8_t> keep(static_cast<std::size_t>(K) + 2, 1);
    if (!mask.obs_keep.empty())
      for (int k = 0; k < K; ++k) keep[static_cast<std::size_t>(k) + 1] = mask.obs_keep[static_cast<std::size_t>(k)];
    keep.back() = mask.keep_mem ? 1 : 0;
    bool any = false;
    for (std::size_t i = 1; i < keep.size(); ++i) any = any || keep[i];
    if (!any) throw ContractError("policy forward: every position except CLS is masked");
    const bool all = mask.obs_keep.empty() && mask.keep_mem;

    const double p_attn = drop_rng ? cfg_.pol_dropout : 0.0;
    for (auto& b : blocks_)
      x = b.forward(tp, x, all ? AttnMask::none() : AttnMask::keymask(keep), p_attn, p_attn, drop_rng, record);
    Var h = ops::slice_rows(tp, ln_f_.forward(tp, x), 0, 1);
    return ForwardOut{h, head_actor_.forward(tp, h), head_critic_.forward(tp, h), h};
  }

  // Categorical action at the given temperature; log-prob and entropy are
  // taken from the same tempered distribution. Temperature 0 is the
  // documented argmax special case with deterministic zero log-prob and
  // entropy nodes.
  ActOut act(Tape<T>& tp, Var logits, double temperature, RngStream& rng) {
    const Tensor<T>& lv = tp.val(logits);
    if (!lv.all_finite()) throw NumericError("act: non-finite logits");
    if (temperature < 0.0) throw ConfigError("act: temperature must be >= 0");
    if (lv.size() != num_actions_) throw ShapeError("act: logits width mismatch");
    if (temperature == 0.0) {
      int best = 0;
      for (std::int64_t i = 1; i < lv.size(); ++i)
        if (lv[i] > lv[best]) best = static_cast<int>(i);
      return ActOut{best, tp.constant(Tensor<T>::scalar(T{0})), tp.constant(Tensor<T>::scalar(T{0}))};
    }
    Var scaled = ops::scale(tp, logits, static_cast<T>(1.0 / temperature));
    Var logp = ops::log_softmax_rows(tp, scaled);
    const Tensor<T>& lpv = tp.val(logp);
    std::vector<double> probs(static_cast<std::size_t>(num_actions_));
    for (int a = 0; a < num_actions_; ++a) probs[static_cast<std::size_t>(a)] = std::exp(static_cast<double>(lpv[a]));
    const int action = rng.categorical(probs);
    Var lp = ops::pick(tp, logp, action);
    Var ent = ops::scale(tp, ops::sum_all(tp, ops::mul(tp, ops::exp(tp, logp), logp)), T{-1});
    return ActOut{action, lp, ent};
  }

  // Actor-critic update over a batch of imagined trajectories living on
  // `tp`. Advantages and critic targets use the λ-returns as constants, so
  // gradients reach the graph only through log-probs, entropies, and
  // values. When `frozen` is given, a nonzero gradient on any of those
  // parameters after backward is a contract violation (the imagination
  // machinery must not be trainable from here).
  LossReport train_step(Tape<T>& tp, const std::vector<ImaginedTrajectory<T>>& trajectories, Adam<T>& opt,
                        const ParamSet<T>* frozen = nullptr) {
    if (trajectories.empty()) throw ContractError("policy train_step: no trajectories");
    Var actor_sum, critic_sum, entropy_sum;
    int n_steps = 0;
    for (const auto& traj : trajectories) {
      if (traj.steps.empty()) throw ContractError("policy train_step: empty trajectory");
      std::vector<T> rewards, values;
      std::vector<int> dones;
      for (const auto& s : traj.steps) {
        rewards.push_back(s.reward);
        values.push_back(tp.val(s.value)[0]);
        dones.push_back(s.done);
      }
      values.push_back(traj.bootstrap_value);
      std::vector<T> targets = lambda_returns(rewards, values, dones, cfg_.pol_gamma, cfg_.pol_lambda);
      for (std::size_t t = 0; t < traj.steps.size(); ++t) {
        const auto& s = traj.steps[t];
        const T adv = targets[t] - values[t];
        Var a = ops::scale(tp, s.log_prob, -adv);
        Var diff = ops::add_scalar(tp, ops::sum_all(tp, s.value), -targets[t]);
        Var c = ops::mul(tp, diff, diff);
        actor_sum = accumulate(tp, actor_sum, a);
        critic_sum = accumulate(tp, critic_sum, c);
        entropy_sum = accumulate(tp, entropy_sum, s.entropy);
        ++n_steps;
      }
    }
    const T inv = T{1} / static_cast<T>(n_steps);
    Var actor_mean = ops::scale(tp, actor_sum, inv);
    Var critic_mean = ops::scale(tp, critic_sum, inv);
    Var entropy_mean = ops::scale(tp, entropy_sum, inv);
    Var actor_loss = ops::add(tp, actor_mean, ops::scale(tp, entropy_mean, -static_cast<T>(cfg_.pol_entropy_coef)));
    Var total = ops::add(tp, actor_loss, critic_mean);
    LossReport rep;
    rep.actor = static_cast<double>(tp.val(actor_loss)[0]);
    rep.critic = static_cast<double>(tp.val(critic_mean)[0]);
    rep.entropy = static_cast<double>(tp.val(entropy_mean)[0]);
    rep.total = static_cast<double>(tp.val(total)[0]);
    tp.backward(total);
    if (frozen) {
      for (const auto* p : *frozen)
        for (auto g : p->grad.data)
          if (g != T{0})
            throw ContractError("policy train_step: gradient leaked into frozen parameter " + p->name);
    }
    opt.step();
    return rep;
  }

 private:
  static Var accumulate(Tape<T>& tp, Var acc, Var v) {
    Var flat = tp.val(v).size() == 1 ? v : ops::sum_all(tp, v);
    return acc.valid() ? ops::add(tp, acc, flat) : flat;
  }

  Config cfg_;
  int num_actions_ = 0;
  const Param<T>* codebook_ = nullptr;
  bool project_ = false;
  Param<T> cls_, mem0_, pos_;
  Linear<T> proj_;
  std::vector<TransformerBlock<T>> blocks_;
  LayerNorm<T> ln_f_;
  Linear<T> head_actor_, head_critic_;
  ParamSet<T> params_;
};

}  // namespace dart
